//! Multi-agent diffusion forcing transformer.
//!
//! Every token carries its own noise level. The denoiser sees all agents and
//! time steps of a window with full bidirectional attention and predicts the
//! clean tokens.

mod tokens;

use std::f64::consts::FRAC_PI_2;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub use tokens::{agent_latents, assemble_tokens, raw_latent_width, TokenLayout, TokenSeq, TokenStats};

use crate::dataset::{DatasetError, MotionSequence};
use crate::nn::se3::{transform_distance, TfVar};
use crate::nn::{
    clip_grad_norm, sinusoidal_embed, AdamW, AdamWConfig, AttnLayout, Bound, Checkpoint, Linear, Mlp, NnError,
    ParamId, ParamStore, Tape, Tensor, TransformerBlock, Var,
};
use crate::scalar::Real;
use crate::vqvae::{Vqvae, VqvaeError};

pub const MODEL_KIND: &str = "dfot";
/// Offset of the cosine schedule.
pub const SCHEDULE_S: f64 = 0.008;

#[derive(Debug, Error)]
pub enum DfotError {
    #[error("noise level {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Vqvae(#[from] VqvaeError),
}

/// `ᾱ(τ) = cos²(((τ + s)/(1 + s))·π/2)`, exactly 0 at τ = 1.
pub fn alpha_bar(tau: f64) -> Result<f64, DfotError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(DfotError::OutOfRange(tau));
    }
    if tau == 1.0 {
        return Ok(0.0);
    }
    let c = ((tau + SCHEDULE_S) / (1.0 + SCHEDULE_S) * FRAC_PI_2).cos();
    Ok(c * c)
}

/// `√ᾱ·m + √(1−ᾱ)·ε` on masked channels; other channels keep `m`.
pub fn perturb(m: &[f64], eps: &[f64], tau: f64, mask: &[bool]) -> Result<Vec<f64>, DfotError> {
    if m.len() != eps.len() || m.len() != mask.len() {
        return Err(DfotError::ShapeMismatch(format!("token {} / noise {} / mask {}", m.len(), eps.len(), mask.len())));
    }
    let a = alpha_bar(tau)?;
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(m.iter().zip(eps).zip(mask).map(|((m, e), on)| if *on { sa * m + sn * e } else { *m }).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DfotConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_emb: usize,
    pub layout: TokenLayout,
    /// Weights of the latent, partner, delta and consistency terms.
    pub lambda: [f64; 4],
    pub smooth_l1_delta: f64,
    pub seed: u64,
}

impl DfotConfig {
    pub fn desk() -> Self {
        Self {
            d: 64,
            layers: 2,
            heads: 4,
            d_emb: 32,
            layout: TokenLayout { d_z: 32, p_max: 4, omega: 4, use_partner: true },
            lambda: [1.0; 4],
            smooth_l1_delta: 1.0,
            seed: 0,
        }
    }

    /// Full-size model.
    pub fn full() -> Self {
        Self {
            d: 512,
            layers: 6,
            heads: 8,
            d_emb: 256,
            layout: TokenLayout { d_z: 512, ..Self::desk().layout },
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), DfotError> {
        let l = &self.layout;
        if l.p_max == 0 || l.omega == 0 || l.d_z == 0 {
            return Err(DfotError::Config("p_max, omega and d_z must be positive".into()));
        }
        if self.layers == 0 || self.d == 0 {
            return Err(DfotError::Config("layers and d must be positive".into()));
        }
        if !self.d_emb.is_multiple_of(2) {
            return Err(DfotError::Nn(NnError::OddDimension(self.d_emb)));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let l = &self.layout;
        [
            ("d", self.d.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("d_emb", self.d_emb.to_string()),
            ("d_z", l.d_z.to_string()),
            ("p_max", l.p_max.to_string()),
            ("omega", l.omega.to_string()),
            ("use_partner", l.use_partner.to_string()),
            ("lambda0", format!("{:e}", self.lambda[0])),
            ("lambda1", format!("{:e}", self.lambda[1])),
            ("lambda2", format!("{:e}", self.lambda[2])),
            ("lambda3", format!("{:e}", self.lambda[3])),
            ("smooth_l1_delta", format!("{:e}", self.smooth_l1_delta)),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, DfotError> {
        fn get<V: std::str::FromStr>(pairs: &[(String, String)], k: &str) -> Result<V, DfotError> {
            pairs
                .iter()
                .find(|(key, _)| key == k)
                .ok_or_else(|| DfotError::Config(format!("missing config key {k}")))?
                .1
                .parse()
                .map_err(|_| DfotError::Config(format!("bad value for {k}")))
        }
        Ok(Self {
            d: get(pairs, "d")?,
            layers: get(pairs, "layers")?,
            heads: get(pairs, "heads")?,
            d_emb: get(pairs, "d_emb")?,
            layout: TokenLayout {
                d_z: get(pairs, "d_z")?,
                p_max: get(pairs, "p_max")?,
                omega: get(pairs, "omega")?,
                use_partner: get(pairs, "use_partner")?,
            },
            lambda: [get(pairs, "lambda0")?, get(pairs, "lambda1")?, get(pairs, "lambda2")?, get(pairs, "lambda3")?],
            smooth_l1_delta: get(pairs, "smooth_l1_delta")?,
            seed: get(pairs, "seed")?,
        })
    }
}

/// Stacked examples ready for one denoiser pass. Every example has the same
/// number of token steps; agent counts are padded with invalid tokens.
#[derive(Debug, Clone)]
pub struct DenoiseBatch {
    pub layout: TokenLayout,
    pub steps: usize,
    pub agents: usize,
    pub batch: usize,
    /// Model input, `n × D` with `n = batch·steps·agents`.
    pub noisy: Vec<f64>,
    /// Clean targets, same shape.
    pub clean: Vec<f64>,
    pub tau: Vec<f64>,
    pub valid: Vec<bool>,
    /// `n × slots` presence of each partner slot.
    pub slot_present: Vec<bool>,
}

impl DenoiseBatch {
    pub fn new(layout: TokenLayout, steps: usize, agents: usize) -> Self {
        Self {
            layout,
            steps,
            agents,
            batch: 0,
            noisy: Vec::new(),
            clean: Vec::new(),
            tau: Vec::new(),
            valid: Vec::new(),
            slot_present: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.steps * self.agents
    }

    /// Row of token `(i, a)` in example `b`.
    pub fn row(&self, b: usize, i: usize, a: usize) -> usize {
        (b * self.steps + i) * self.agents + a
    }

    /// Appends an example with per-token inputs (`noisy`) and levels.
    pub fn push(&mut self, clean: &TokenSeq, noisy: &[f64], tau: &[f64]) -> Result<(), DfotError> {
        let w = self.layout.width();
        if clean.layout != self.layout || clean.steps != self.steps || clean.agents > self.agents {
            return Err(DfotError::ShapeMismatch(format!(
                "example with {} steps × {} agents does not fit batch {} × {}",
                clean.steps, clean.agents, self.steps, self.agents
            )));
        }
        if noisy.len() != clean.data.len() || tau.len() != clean.steps * clean.agents {
            return Err(DfotError::ShapeMismatch("noisy tokens or levels do not match the example".into()));
        }
        let slots = self.layout.slots();
        for i in 0..self.steps {
            for a in 0..self.agents {
                if a < clean.agents {
                    let r = clean.row(i, a);
                    self.noisy.extend_from_slice(&noisy[r * w..(r + 1) * w]);
                    self.clean.extend_from_slice(clean.token(i, a));
                    self.tau.push(tau[r]);
                    self.valid.push(clean.present[a]);
                    self.slot_present.extend((0..slots).map(|s| clean.slot_present(a, s)));
                } else {
                    self.noisy.extend(std::iter::repeat_n(0.0, w));
                    self.clean.extend(std::iter::repeat_n(0.0, w));
                    self.tau.push(0.0);
                    self.valid.push(false);
                    self.slot_present.extend(std::iter::repeat_n(false, slots));
                }
            }
        }
        self.batch += 1;
        Ok(())
    }

    /// Agent index per row.
    pub fn agent_ids(&self) -> Vec<usize> {
        (0..self.rows()).map(|r| r % self.agents).collect()
    }

    /// Time index per row.
    pub fn positions(&self) -> Vec<usize> {
        (0..self.rows()).map(|r| (r / self.agents) % self.steps).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DfotLossParts {
    pub total: f64,
    /// Weighted latent, partner, delta and consistency terms.
    pub components: [f64; 4],
}

pub struct DfotLoss<'t, T: Real> {
    pub total: Var<'t, T>,
    pub parts: DfotLossParts,
}

#[derive(Debug, Clone)]
pub struct Dfot<T> {
    pub config: DfotConfig,
    pub store: ParamStore<T>,
    embed: Mlp,
    agent_table: ParamId,
    blocks: Vec<TransformerBlock>,
    head: Linear,
}

impl<T: Real> Dfot<T> {
    pub fn new(config: DfotConfig) -> Result<Self, DfotError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut s = ParamStore::new();
        let (d, w) = (config.d, config.layout.width());
        let embed = Mlp::new(&mut s, "embed", &[w + config.d_emb, d, d, d], true, &mut rng);
        let agent_table = s.add_normal("agent_embedding", &[config.layout.p_max, d], 0.02, &mut rng);
        let blocks = (0..config.layers)
            .map(|i| TransformerBlock::new(&mut s, &format!("block{i}"), d, config.heads, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let head = Linear::new(&mut s, "head", d, w, &mut rng);
        Ok(Self { config, store: s, embed, agent_table, blocks, head })
    }

    pub fn cast<U: Real>(&self) -> Dfot<U> {
        Dfot {
            config: self.config.clone(),
            store: self.store.cast(),
            embed: self.embed.clone(),
            agent_table: self.agent_table,
            blocks: self.blocks.clone(),
            head: self.head.clone(),
        }
    }

    /// Input embedding `MLP([m(τ); SinEmb(τ)]) + ψ(agent)`, before the blocks.
    pub fn embed_var<'t>(&self, p: &Bound<'t, T>, tape: &'t Tape<T>, b: &DenoiseBatch) -> Result<Var<'t, T>, DfotError> {
        let n = b.rows();
        let mut emb = Vec::with_capacity(n * self.config.d_emb);
        for &tau in &b.tau {
            emb.extend(sinusoidal_embed(T::lit(tau), self.config.d_emb)?);
        }
        let noisy = Tensor::matrix(n, b.layout.width(), b.noisy.iter().map(|v| T::lit(*v)).collect())?;
        let inp = Var::concat_cols(&[tape.constant(noisy), tape.constant(Tensor::matrix(n, self.config.d_emb, emb)?)]);
        let psi = p.var(self.agent_table).select_rows(&b.agent_ids());
        Ok(self.embed.forward(p, inp).add(psi))
    }

    /// Predicted clean tokens `[n, D]`; invalid rows are zero.
    pub fn forward_var<'t>(&self, p: &Bound<'t, T>, tape: &'t Tape<T>, b: &DenoiseBatch) -> Result<Var<'t, T>, DfotError> {
        if b.layout != self.config.layout {
            return Err(DfotError::ShapeMismatch("batch token layout differs from the model".into()));
        }
        let n = b.rows();
        let valid = tape.constant(Tensor::matrix(n, 1, b.valid.iter().map(|v| if *v { T::one() } else { T::zero() }).collect())?);
        let layout = AttnLayout { batch: b.batch, seq: b.steps * b.agents, heads: self.config.heads, key_valid: b.valid.clone() };
        let positions = b.positions();
        let mut x = self.embed_var(p, tape, b)?.mul_col(valid);
        for blk in &self.blocks {
            x = blk.forward(p, x, &positions, &layout, valid);
        }
        Ok(self.head.forward(p, x).mul_col(valid))
    }

    /// Inference pass returning `n × D` predictions.
    pub fn predict(&self, b: &DenoiseBatch) -> Result<Vec<f64>, DfotError> {
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        let y = self.forward_var(&p, &tape, b)?.to_tensor();
        Ok(y.data().iter().map(|v| v.to_f64_lossy()).collect())
    }

    pub fn loss<'t>(
        &self,
        tape: &'t Tape<T>,
        p: &Bound<'t, T>,
        b: &DenoiseBatch,
        stats: &TokenStats,
    ) -> Result<DfotLoss<'t, T>, DfotError> {
        let pred = self.forward_var(p, tape, b)?;
        Ok(dfot_loss(tape, pred, b, stats, &self.config))
    }

    pub fn to_checkpoint(&self, stats: &TokenStats, opt: Option<&AdamW<T>>) -> Checkpoint {
        let mut cfg = self.config.to_pairs();
        cfg.extend(stats.to_pairs());
        Checkpoint::from_store(MODEL_KIND, &cfg, &self.store, opt)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, TokenStats), DfotError> {
        if ck.model_kind != MODEL_KIND {
            return Err(DfotError::Nn(NnError::CheckpointMismatch(format!(
                "expected model_kind {MODEL_KIND}, found {}",
                ck.model_kind
            ))));
        }
        let mut m = Self::new(DfotConfig::from_pairs(&ck.config)?)?;
        ck.restore(&mut m.store)?;
        Ok((m, TokenStats::from_pairs(&ck.config)?))
    }
}

/// Constant `[n, D]` weights spreading `1/count` over the selected entries.
fn mean_weights<T: Real>(n: usize, w: usize, mut pick: impl FnMut(usize, usize) -> bool) -> (Tensor<T>, usize) {
    let mut mask = vec![false; n * w];
    let mut count = 0;
    for r in 0..n {
        for c in 0..w {
            if pick(r, c) {
                mask[r * w + c] = true;
                count += 1;
            }
        }
    }
    let v = if count == 0 { T::zero() } else { T::one() / T::lit(count as f64) };
    (Tensor::from_fn(&[n, w], |i| if mask[i] { v } else { T::zero() }), count)
}

/// Denormalized `[rows, 9]` transform codes from a `[n, blocks·ω·9]` slice.
fn denorm_codes<'t, T: Real>(tape: &'t Tape<T>, x: Var<'t, T>, stats: &crate::dataset::NormStats) -> Var<'t, T> {
    let rows = x.rows() * x.cols() / 9;
    let std = Tensor::new(vec![9], stats.std.iter().map(|v| T::lit(*v)).collect()).expect("9 stats");
    let mean = Tensor::new(vec![9], stats.mean.iter().map(|v| T::lit(*v)).collect()).expect("9 stats");
    x.reshape(vec![rows, 9]).mul_row(tape.constant(std)).add_row(tape.constant(mean))
}

/// Decomposed objective: smooth-L1 means over the latent, present partner
/// slots and deltas of valid tokens, plus the consistency term
/// `d_T(T̂ₜ, (ΔT̂ˢᵉˡᶠₜ)⁻¹ T̂ₜ₋₁ ΔT̂ᵖᵃʳᵗⁿᵉʳₜ)` averaged over every present
/// (agent, partner, frame) triple with a previous frame inside the window.
pub fn dfot_loss<'t, T: Real>(
    tape: &'t Tape<T>,
    pred: Var<'t, T>,
    b: &DenoiseBatch,
    stats: &TokenStats,
    cfg: &DfotConfig,
) -> DfotLoss<'t, T> {
    let l = b.layout;
    let (n, w, slots, om) = (b.rows(), l.width(), l.slots(), l.omega);
    let delta = T::lit(cfg.smooth_l1_delta);
    let clean = Tensor::matrix(n, w, b.clean.iter().map(|v| T::lit(*v)).collect()).expect("clean tokens");
    let err = pred.sub(tape.constant(clean)).smooth_l1(delta);

    let (wz, _) = mean_weights::<T>(n, w, |r, c| b.valid[r] && c < l.d_z);
    let (wp, _) = mean_weights::<T>(n, w, |r, c| {
        b.valid[r] && c >= l.d_z && c < l.delta_start() && b.slot_present[r * slots + (c - l.d_z) / l.block()]
    });
    let (wd, _) = mean_weights::<T>(n, w, |r, c| b.valid[r] && c >= l.delta_start() && c < l.bits_start());
    let lz = err.mul(tape.constant(wz)).sum().scale(T::lit(cfg.lambda[0]));
    let lp = err.mul(tape.constant(wp)).sum().scale(T::lit(cfg.lambda[1]));
    let ld = err.mul(tape.constant(wd)).sum().scale(T::lit(cfg.lambda[2]));

    // (current, previous) partner rows and (self, partner) delta rows
    let (mut cur, mut prev, mut dself, mut dpart) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for bi in 0..b.batch {
        for i in 0..b.steps {
            for a in 0..b.agents {
                let r = b.row(bi, i, a);
                for s in (0..slots).filter(|s| b.valid[r] && b.slot_present[r * slots + s]) {
                    let q = crate::dataset::slot_partner(a, s);
                    let rq = b.row(bi, i, q);
                    for k in 0..om {
                        let f = i * om + k;
                        if f == 0 {
                            continue;
                        }
                        let rp = b.row(bi, (f - 1) / om, a);
                        cur.push((r * slots + s) * om + k);
                        prev.push((rp * slots + s) * om + (f - 1) % om);
                        dself.push(r * om + k);
                        dpart.push(rq * om + k);
                    }
                }
            }
        }
    }
    let lc = if cur.is_empty() {
        tape.scalar(T::zero())
    } else {
        let partner = TfVar::from_9d(denorm_codes(tape, pred.cols_slice(l.d_z, l.delta_start()), &stats.partner));
        let deltas = TfVar::from_9d(denorm_codes(tape, pred.cols_slice(l.delta_start(), l.bits_start()), &stats.delta));
        let propagated = deltas
            .select_rows(&dself)
            .invert()
            .compose(partner.select_rows(&prev))
            .compose(deltas.select_rows(&dpart));
        transform_distance(partner.select_rows(&cur), propagated, delta).mean()
    }
    .scale(T::lit(cfg.lambda[3]));

    let total = lz.add(lp).add(ld).add(lc);
    let components = [lz, lp, ld, lc].map(|v| v.item().to_f64_lossy());
    DfotLoss { total, parts: DfotLossParts { total: total.item().to_f64_lossy(), components } }
}

/// Normalized token windows for training and validation.
#[derive(Debug, Clone)]
pub struct TokenDataset {
    pub layout: TokenLayout,
    pub stats: TokenStats,
    pub train: Vec<TokenSeq>,
    pub val: Vec<TokenSeq>,
}

impl TokenDataset {
    /// Tokenizes preprocessed sequences. Statistics come from `train` only.
    pub fn build<T: Real>(
        train: &[MotionSequence],
        val: &[MotionSequence],
        vqvae: Option<&Vqvae<T>>,
        layout: TokenLayout,
    ) -> Result<Self, DfotError> {
        let raw = |seqs: &[MotionSequence]| -> Result<Vec<TokenSeq>, DfotError> {
            seqs.iter()
                .map(|s| assemble_tokens(s, &agent_latents(s, vqvae, layout.omega)?, layout))
                .collect()
        };
        let tr = raw(train)?;
        let va = raw(val)?;
        let stats = TokenStats::from_tokens(&tr)?;
        Ok(Self {
            layout,
            train: tr.iter().map(|s| stats.normalize(s)).collect(),
            val: va.iter().map(|s| stats.normalize(s)).collect(),
            stats,
        })
    }
}

/// Draws per-token levels and noise in row order, skipping absent agents:
/// for each present token one uniform level, then `D` standard normals.
pub fn noise_example<R: Rng>(seq: &TokenSeq, rng: &mut R, tau_fixed: Option<f64>) -> Result<(Vec<f64>, Vec<f64>), DfotError> {
    let w = seq.layout.width();
    let mut noisy = seq.data.clone();
    let mut taus = vec![0.0; seq.steps * seq.agents];
    let masks: Vec<Vec<bool>> = (0..seq.agents).map(|a| seq.noise_mask(a)).collect();
    for i in 0..seq.steps {
        for a in (0..seq.agents).filter(|a| seq.present[*a]) {
            let r = seq.row(i, a);
            let tau = match tau_fixed {
                Some(t) => t,
                None => rng.random::<f64>(),
            };
            let eps: Vec<f64> = (0..w).map(|_| rng.sample(StandardNormal)).collect();
            let out = perturb(seq.token(i, a), &eps, tau, &masks[a])?;
            noisy[r * w..(r + 1) * w].copy_from_slice(&out);
            taus[r] = tau;
        }
    }
    Ok((noisy, taus))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DfotTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Token steps per training window.
    pub window: usize,
    pub optimizer: AdamWConfig,
    pub max_grad_norm: Option<f64>,
    /// Probability of masking a random non-empty subset of agents.
    pub mask_prob: f64,
    pub shuffle_identities: bool,
    pub eval_every: usize,
    pub seed: u64,
}

impl DfotTrainConfig {
    pub fn desk() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            window: 16,
            optimizer: AdamWConfig { base_lr: 1e-3, weight_decay: 1e-4, total_steps: 3000, ..Default::default() },
            max_grad_norm: Some(1.0),
            mask_prob: 0.1,
            shuffle_identities: true,
            eval_every: 250,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DfotTrainLog {
    pub step_losses: Vec<DfotLossParts>,
    pub train_eval: Vec<(usize, f64)>,
    pub val_eval: Vec<(usize, f64)>,
    pub best_step: usize,
}

impl DfotTrainLog {
    pub fn initial_eval(&self) -> f64 {
        self.train_eval.first().map(|e| e.1).unwrap_or(f64::NAN)
    }

    pub fn final_eval(&self) -> f64 {
        self.train_eval.last().map(|e| e.1).unwrap_or(f64::NAN)
    }
}

/// Fixed evaluation batches: non-overlapping windows, seeded noise.
fn eval_batches(seqs: &[TokenSeq], layout: TokenLayout, window: usize, chunk: usize, seed: u64) -> Result<Vec<DenoiseBatch>, DfotError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let windows: Vec<TokenSeq> =
        seqs.iter().flat_map(|s| (0..s.steps / window).map(move |k| s.window(k * window, window))).collect();
    let agents = windows.iter().map(|w| w.agents).max().unwrap_or(1);
    let mut out = Vec::new();
    for c in windows.chunks(chunk.max(1)) {
        let mut b = DenoiseBatch::new(layout, window, agents);
        for wnd in c {
            let (noisy, tau) = noise_example(wnd, &mut rng, None)?;
            b.push(wnd, &noisy, &tau)?;
        }
        out.push(b);
    }
    Ok(out)
}

fn eval_loss<T: Real>(model: &Dfot<T>, batches: &[DenoiseBatch], stats: &TokenStats) -> Result<f64, DfotError> {
    let mut sum = 0.0;
    for b in batches {
        let tape = Tape::new();
        let p = model.store.bind(&tape);
        sum += model.loss(&tape, &p, b, stats)?.parts.total;
    }
    Ok(sum / batches.len().max(1) as f64)
}

/// One randomly cropped, shuffled and masked training example.
fn sample_example<R: Rng>(data: &[TokenSeq], tc: &DfotTrainConfig, rng: &mut R) -> Result<TokenSeq, DfotError> {
    let s = &data[rng.random_range(0..data.len())];
    let start = rng.random_range(0..=s.steps - tc.window);
    let mut ex = s.window(start, tc.window);
    if tc.shuffle_identities && ex.agents > 1 {
        let mut perm: Vec<usize> = (0..ex.agents).collect();
        perm.shuffle(rng);
        ex = ex.permuted(&perm);
    }
    if ex.agents > 1 && rng.random::<f64>() < tc.mask_prob {
        let keep_n = rng.random_range(1..ex.agents);
        let mut idx: Vec<usize> = (0..ex.agents).collect();
        idx.shuffle(rng);
        ex = ex.masked(&idx[..keep_n])?;
    }
    Ok(ex)
}

pub fn train_dfot(
    data: &TokenDataset,
    config: &DfotConfig,
    tc: &DfotTrainConfig,
) -> Result<(Dfot<f32>, DfotTrainLog), DfotError> {
    if config.layout != data.layout {
        return Err(DfotError::Config("model and dataset token layouts differ".into()));
    }
    if tc.steps == 0 || tc.batch_size == 0 || tc.window == 0 {
        return Err(DfotError::Config("steps, batch_size and window must be positive".into()));
    }
    if data.train.is_empty() || data.train.iter().any(|s| s.steps < tc.window) {
        return Err(DfotError::Config(format!("every training sequence needs at least {} token steps", tc.window)));
    }
    let agents = data.train.iter().chain(&data.val).map(|s| s.agents).max().unwrap_or(1);
    let train_eval = eval_batches(&data.train, data.layout, tc.window, tc.batch_size, tc.seed ^ 0x5eed)?;
    let val_eval = eval_batches(&data.val, data.layout, tc.window, tc.batch_size, tc.seed ^ 0x5eed)?;

    let mut model = Dfot::<f32>::new(config.clone())?;
    let mut opt_cfg = tc.optimizer;
    opt_cfg.total_steps = tc.steps;
    let mut opt = AdamW::new(opt_cfg, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut log = DfotTrainLog::default();
    let mut best: Option<(f64, ParamStore<f32>)> = None;

    let mut evaluate = |model: &Dfot<f32>, step: usize, log: &mut DfotTrainLog| -> Result<(), DfotError> {
        let tr = eval_loss(model, &train_eval, &data.stats)?;
        log.train_eval.push((step, tr));
        let score = if val_eval.is_empty() {
            tr
        } else {
            let v = eval_loss(model, &val_eval, &data.stats)?;
            log.val_eval.push((step, v));
            v
        };
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, model.store.clone()));
            log.best_step = step;
        }
        Ok(())
    };
    evaluate(&model, 0, &mut log)?;

    for step in 0..tc.steps {
        let mut batch = DenoiseBatch::new(data.layout, tc.window, agents);
        for _ in 0..tc.batch_size {
            let ex = sample_example(&data.train, tc, &mut rng)?;
            let (noisy, tau) = noise_example(&ex, &mut rng, None)?;
            batch.push(&ex, &noisy, &tau)?;
        }
        let tape = Tape::new();
        let bound = model.store.bind(&tape);
        let loss = model.loss(&tape, &bound, &batch, &data.stats)?;
        if !loss.parts.total.is_finite() {
            return Err(DfotError::NonFiniteLoss { step, detail: format!("{:?}", loss.parts) });
        }
        let grads = tape.backward(loss.total)?;
        let mut g = bound.grads(&grads);
        drop(bound);
        if let Some(m) = tc.max_grad_norm {
            clip_grad_norm(&mut g, m as f32);
        }
        opt.step(&mut model.store, &g)?;
        log.step_losses.push(loss.parts);
        if (step + 1) % tc.eval_every.max(1) == 0 || step + 1 == tc.steps {
            evaluate(&model, step + 1, &mut log)?;
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests;
