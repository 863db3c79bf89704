//! Conditional VQ-VAE over per-agent pose streams.
//!
//! Per frame the input is `x = [θ (J·6); T_can→root (9)]` and the condition
//! `c = [β (10); ΔT_can (9)]`. The encoder sees both, compresses time by the
//! stride ω and snaps each latent to its nearest codebook row. The decoder
//! expands every latent back to ω frames and reads the per-frame condition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::body::{NUM_JOINTS, SHAPE_DIM};
use crate::dataset::{DatasetError, MotionSequence};
use crate::nn::se3::{geodesic, rot6d_to_matrix, smooth_l1_rows, TfVar};
use crate::nn::{
    clip_grad_norm, AdamW, AdamWConfig, Bound, Checkpoint, Conv1d, Linear, NnError, ParamId, ParamStore, ResBlock1d,
    Tape, Tensor, Var,
};
use crate::scalar::Real;

pub const THETA_WIDTH: usize = NUM_JOINTS * 6;
pub const X_WIDTH: usize = THETA_WIDTH + 9;
pub const C_WIDTH: usize = SHAPE_DIM + 9;
pub const MODEL_KIND: &str = "vqvae";

#[derive(Debug, Error)]
pub enum VqvaeError {
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
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqvaeConfig {
    pub d_vq: usize,
    pub codebook_size: usize,
    pub stride: usize,
    pub hidden: usize,
    pub lambda_joint: f64,
    pub lambda_root: f64,
    pub smooth_l1_delta: f64,
    pub commitment: f64,
    pub seed: u64,
}

impl VqvaeConfig {
    pub fn desk() -> Self {
        Self {
            d_vq: 32,
            codebook_size: 64,
            stride: 4,
            hidden: 32,
            lambda_joint: 1.0,
            lambda_root: 1.0,
            smooth_l1_delta: 1.0,
            commitment: 0.25,
            seed: 0,
        }
    }

    /// Full-size model.
    pub fn full() -> Self {
        Self { d_vq: 512, codebook_size: 1024, hidden: 512, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<(), VqvaeError> {
        if self.codebook_size < 2 {
            return Err(VqvaeError::Config("codebook_size must be at least 2".into()));
        }
        if self.d_vq == 0 || self.hidden == 0 || self.stride == 0 {
            return Err(VqvaeError::Config("d_vq, hidden and stride must be positive".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("d_vq", self.d_vq.to_string()),
            ("codebook_size", self.codebook_size.to_string()),
            ("stride", self.stride.to_string()),
            ("hidden", self.hidden.to_string()),
            ("lambda_joint", format!("{:e}", self.lambda_joint)),
            ("lambda_root", format!("{:e}", self.lambda_root)),
            ("smooth_l1_delta", format!("{:e}", self.smooth_l1_delta)),
            ("commitment", format!("{:e}", self.commitment)),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, VqvaeError> {
        let get = |k: &str| {
            pairs
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| VqvaeError::Config(format!("missing config key {k}")))
        };
        let us = |k: &str| -> Result<usize, VqvaeError> {
            get(k)?.parse().map_err(|_| VqvaeError::Config(format!("bad value for {k}")))
        };
        let fl = |k: &str| -> Result<f64, VqvaeError> {
            get(k)?.parse().map_err(|_| VqvaeError::Config(format!("bad value for {k}")))
        };
        Ok(Self {
            d_vq: us("d_vq")?,
            codebook_size: us("codebook_size")?,
            stride: us("stride")?,
            hidden: us("hidden")?,
            lambda_joint: fl("lambda_joint")?,
            lambda_root: fl("lambda_root")?,
            smooth_l1_delta: fl("smooth_l1_delta")?,
            commitment: fl("commitment")?,
            seed: get("seed")?.parse().map_err(|_| VqvaeError::Config("bad value for seed".into()))?,
        })
    }
}

/// One agent's stream, padded to a multiple of the stride.
#[derive(Debug, Clone, PartialEq)]
pub struct VqvaeInput {
    /// `frames × 63`
    pub x: Vec<f64>,
    /// `frames × 19`
    pub c: Vec<f64>,
    pub frames: usize,
    /// Frames appended by repeating the last one.
    pub pad: usize,
}

impl VqvaeInput {
    pub fn from_sequence(seq: &MotionSequence, agent: usize, stride: usize) -> Result<Self, VqvaeError> {
        let d = seq.derived()?;
        let pn = seq.num_agents;
        let mut x = Vec::with_capacity(seq.num_frames * X_WIDTH);
        let mut c = Vec::with_capacity(seq.num_frames * C_WIDTH);
        for t in 0..seq.num_frames {
            x.extend_from_slice(seq.theta_frame(t, agent));
            x.extend_from_slice(&d.can_to_root[t * pn + agent].to_9d());
            c.extend_from_slice(&seq.beta[agent]);
            c.extend_from_slice(&d.delta_can[t * pn + agent].to_9d());
        }
        Ok(Self::from_rows(x, c, stride))
    }

    /// Builds an input from raw rows, padding by repetition of the last frame.
    pub fn from_rows(mut x: Vec<f64>, mut c: Vec<f64>, stride: usize) -> Self {
        let frames = x.len() / X_WIDTH;
        assert!(frames > 0, "empty stream");
        let pad = (stride - frames % stride) % stride;
        for _ in 0..pad {
            let lx = x[(frames - 1) * X_WIDTH..frames * X_WIDTH].to_vec();
            let lc = c[(frames - 1) * C_WIDTH..frames * C_WIDTH].to_vec();
            x.extend(lx);
            c.extend(lc);
        }
        Self { x, c, frames: frames + pad, pad }
    }

    pub fn latents(&self, stride: usize) -> usize {
        self.frames / stride
    }

    pub fn window(&self, start: usize, len: usize) -> VqvaeInput {
        VqvaeInput {
            x: self.x[start * X_WIDTH..(start + len) * X_WIDTH].to_vec(),
            c: self.c[start * C_WIDTH..(start + len) * C_WIDTH].to_vec(),
            frames: len,
            pad: 0,
        }
    }
}

/// Equal-length streams stacked row-wise.
#[derive(Debug, Clone)]
pub struct VqBatch<T> {
    pub x: Tensor<T>,
    pub c: Tensor<T>,
    pub batch: usize,
    pub frames: usize,
}

impl<T: Real> VqBatch<T> {
    pub fn new(items: &[&VqvaeInput]) -> Result<Self, VqvaeError> {
        let frames = items.first().map(|i| i.frames).unwrap_or(0);
        if items.iter().any(|i| i.frames != frames) || frames == 0 {
            return Err(VqvaeError::ShapeMismatch("batch streams must share a non-zero length".into()));
        }
        let x: Vec<T> = items.iter().flat_map(|i| i.x.iter().map(|v| T::lit(*v))).collect();
        let c: Vec<T> = items.iter().flat_map(|i| i.c.iter().map(|v| T::lit(*v))).collect();
        let n = items.len() * frames;
        Ok(Self {
            x: Tensor::matrix(n, X_WIDTH, x)?,
            c: Tensor::matrix(n, C_WIDTH, c)?,
            batch: items.len(),
            frames,
        })
    }
}

/// Stop-gradient values of one quantization pass.
#[derive(Debug, Clone)]
pub struct Quantization<T> {
    pub indices: Vec<usize>,
    /// Encoder output `h`.
    pub h: Tensor<T>,
    /// Selected codebook rows `e`.
    pub e: Tensor<T>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VqLossParts {
    pub total: f64,
    pub rotation: f64,
    pub translation: f64,
    pub codebook: f64,
    pub commitment: f64,
}

pub struct VqLoss<'t, T: Real> {
    pub total: Var<'t, T>,
    pub parts: VqLossParts,
    pub quant: Quantization<T>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    conv_in: Conv1d,
    res_a: ResBlock1d,
    down: Conv1d,
    res_b: ResBlock1d,
    proj: Conv1d,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    up: Linear,
    conv_in: Conv1d,
    res_a: ResBlock1d,
    res_b: ResBlock1d,
    proj: Conv1d,
}

#[derive(Debug, Clone)]
pub struct Vqvae<T> {
    pub config: VqvaeConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub codebook: ParamId,
}

impl<T: Real> Vqvae<T> {
    pub fn new(config: VqvaeConfig) -> Result<Self, VqvaeError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut s = ParamStore::new();
        let (h, d, w) = (config.hidden, config.d_vq, config.stride);
        let encoder = Encoder {
            conv_in: Conv1d::same(&mut s, "enc.conv_in", X_WIDTH + C_WIDTH, h, 3, &mut rng),
            res_a: ResBlock1d::new(&mut s, "enc.res_a", h, &mut rng),
            down: Conv1d::strided(&mut s, "enc.down", h, h, w, &mut rng),
            res_b: ResBlock1d::new(&mut s, "enc.res_b", h, &mut rng),
            proj: Conv1d::same(&mut s, "enc.proj", h, d, 1, &mut rng),
        };
        let decoder = Decoder {
            up: Linear::new(&mut s, "dec.up", d, w * h, &mut rng),
            conv_in: Conv1d::same(&mut s, "dec.conv_in", h + C_WIDTH, h, 3, &mut rng),
            res_a: ResBlock1d::new(&mut s, "dec.res_a", h, &mut rng),
            res_b: ResBlock1d::new(&mut s, "dec.res_b", h, &mut rng),
            proj: Conv1d::same(&mut s, "dec.proj", h, X_WIDTH, 1, &mut rng),
        };
        let codebook = s.add_normal("codebook", &[config.codebook_size, d], 1.0, &mut rng);
        Ok(Self { config, store: s, encoder, decoder, codebook })
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Real>(&self) -> Vqvae<U> {
        Vqvae {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            codebook: self.codebook,
        }
    }

    pub fn codebook(&self) -> &Tensor<T> {
        self.store.get(self.codebook)
    }

    /// `[B·T/ω, d_vq]` pre-quantization latents.
    pub fn encode_var<'t>(&self, p: &Bound<'t, T>, tape: &'t Tape<T>, b: &VqBatch<T>) -> Var<'t, T> {
        let e = &self.encoder;
        let inp = Var::concat_cols(&[tape.constant(b.x.clone()), tape.constant(b.c.clone())]);
        let h = e.conv_in.forward(p, inp, b.batch).gelu();
        let h = e.res_a.forward(p, h, b.batch);
        let h = e.down.forward(p, h, b.batch).gelu();
        let h = e.res_b.forward(p, h, b.batch);
        e.proj.forward(p, h, b.batch)
    }

    /// `[B·T, 63]` reconstruction from `[B·T/ω, d_vq]` latents.
    pub fn decode_var<'t>(&self, p: &Bound<'t, T>, tape: &'t Tape<T>, z: Var<'t, T>, c: &Tensor<T>, batch: usize) -> Var<'t, T> {
        let d = &self.decoder;
        let (h, w) = (self.config.hidden, self.config.stride);
        let up = d.up.forward(p, z).reshape(vec![z.rows() * w, h]);
        let inp = Var::concat_cols(&[up, tape.constant(c.clone())]);
        let y = d.conv_in.forward(p, inp, batch).gelu();
        let y = d.res_a.forward(p, y, batch);
        let y = d.res_b.forward(p, y, batch);
        d.proj.forward(p, y, batch)
    }

    /// Nearest codebook row per latent (ties to the lowest index) and its squared distance.
    pub fn quantize_rows(&self, h: &[T]) -> (Vec<usize>, Vec<T>) {
        quantize(self.codebook(), h)
    }

    /// Full training loss. With `frozen` the stop-gradient values and indices
    /// are taken from a previous pass instead of the current parameters.
    pub fn loss<'t>(
        &self,
        tape: &'t Tape<T>,
        p: &Bound<'t, T>,
        b: &VqBatch<T>,
        frozen: Option<&Quantization<T>>,
    ) -> VqLoss<'t, T> {
        let cfg = &self.config;
        let h = self.encode_var(p, tape, b);
        let quant = match frozen {
            Some(q) => q.clone(),
            None => {
                let hv = h.to_tensor();
                let (indices, _) = self.quantize_rows(hv.data());
                let e = gather_rows(self.codebook(), &indices);
                Quantization { indices, h: hv, e }
            }
        };
        // z = h + sg(e − h)
        let residual = Tensor::from_fn(quant.h.shape(), |i| quant.e.data()[i] - quant.h.data()[i]);
        let z = if frozen.is_some() { h.add(tape.constant(residual)) } else { h.substitute(quant.e.clone()) };
        let xhat = self.decode_var(p, tape, z, &b.c, b.batch);
        let (rot, trans) = reconstruction_terms(tape, xhat, &b.x, cfg);
        let inv_b = T::one() / T::lit(b.batch as f64);
        let e_var = p.var(self.codebook).select_rows(&quant.indices);
        let codebook = tape.constant(quant.h.clone()).sub(e_var).square().sum().scale(inv_b);
        let commit = h.sub(tape.constant(quant.e.clone())).square().sum().scale(T::lit(cfg.commitment) * inv_b);
        let rot = rot.scale(inv_b);
        let trans = trans.scale(inv_b);
        let total = rot.add(trans).add(codebook).add(commit);
        let parts = VqLossParts {
            total: total.item().to_f64_lossy(),
            rotation: rot.item().to_f64_lossy(),
            translation: trans.item().to_f64_lossy(),
            codebook: codebook.item().to_f64_lossy(),
            commitment: commit.item().to_f64_lossy(),
        };
        VqLoss { total, parts, quant }
    }

    /// Loss components without gradients.
    pub fn evaluate(&self, b: &VqBatch<T>) -> VqLossParts {
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        self.loss(&tape, &p, b, None).parts
    }

    /// Codebook indices and latents for one stream.
    pub fn encode(&self, input: &VqvaeInput) -> Result<(Vec<usize>, Tensor<T>), VqvaeError> {
        let b = VqBatch::new(&[input])?;
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        let h = self.encode_var(&p, &tape, &b).to_tensor();
        let (indices, _) = self.quantize_rows(h.data());
        Ok((indices, h))
    }

    /// Reconstruction `[frames × 63]` from latents `[frames/ω × d_vq]` and conditions `[frames × 19]`.
    pub fn decode(&self, z: &[f64], c: &[f64]) -> Result<Vec<f64>, VqvaeError> {
        let d = self.config.d_vq;
        let n = z.len() / d;
        if z.len() != n * d || c.len() != n * self.config.stride * C_WIDTH {
            return Err(VqvaeError::ShapeMismatch(format!(
                "{} latent values and {} condition values do not match stride {}",
                z.len(),
                c.len(),
                self.config.stride
            )));
        }
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        let zt = tape.constant(Tensor::matrix(n, d, z.iter().map(|v| T::lit(*v)).collect())?);
        let ct = Tensor::matrix(n * self.config.stride, C_WIDTH, c.iter().map(|v| T::lit(*v)).collect())?;
        let y = self.decode_var(&p, &tape, zt, &ct, 1).to_tensor();
        Ok(y.data().iter().map(|v| v.to_f64_lossy()).collect())
    }

    /// Encode, quantize and decode one stream.
    pub fn reconstruct(&self, input: &VqvaeInput) -> Result<Vec<f64>, VqvaeError> {
        let (idx, _) = self.encode(input)?;
        let z = self.codebook_rows(&idx);
        self.decode(&z, &input.c)
    }

    pub fn codebook_rows(&self, indices: &[usize]) -> Vec<f64> {
        gather_rows(self.codebook(), indices).data().iter().map(|v| v.to_f64_lossy()).collect()
    }

    /// Snaps arbitrary latents to their nearest codebook rows.
    pub fn snap(&self, z: &[f64]) -> Vec<f64> {
        let zt: Vec<T> = z.iter().map(|v| T::lit(*v)).collect();
        let (idx, _) = self.quantize_rows(&zt);
        self.codebook_rows(&idx)
    }

    pub fn to_checkpoint(&self, opt: Option<&AdamW<T>>) -> Checkpoint {
        Checkpoint::from_store(MODEL_KIND, &self.config.to_pairs(), &self.store, opt)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, VqvaeError> {
        if ck.model_kind != MODEL_KIND {
            return Err(VqvaeError::Nn(NnError::CheckpointMismatch(format!(
                "expected model_kind {MODEL_KIND}, found {}",
                ck.model_kind
            ))));
        }
        let mut m = Self::new(VqvaeConfig::from_pairs(&ck.config)?)?;
        ck.restore(&mut m.store)?;
        Ok(m)
    }
}

pub fn gather_rows<T: Real>(t: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let c = t.cols();
    let mut d = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        d.extend_from_slice(t.row(r));
    }
    Tensor::new(vec![rows.len(), c], d).expect("row gather")
}

/// Brute-force nearest codebook row for each `d`-wide row of `h`.
pub fn quantize<T: Real>(codebook: &Tensor<T>, h: &[T]) -> (Vec<usize>, Vec<T>) {
    let d = codebook.cols();
    let mut idx = Vec::with_capacity(h.len() / d);
    let mut dist = Vec::with_capacity(h.len() / d);
    for row in h.chunks(d) {
        let mut best = (0usize, T::infinity());
        for k in 0..codebook.rows() {
            let e = codebook.row(k);
            let mut s = T::zero();
            for i in 0..d {
                let v = row[i] - e[i];
                s += v * v;
            }
            if s < best.1 {
                best = (k, s);
            }
        }
        idx.push(best.0);
        dist.push(best.1);
    }
    (idx, dist)
}

/// Joint-rotation and root terms of the reconstruction loss, summed over all
/// rows (not yet batch-averaged): `λ_j Σ_j d_R(θ̂_j, θ_j)` and
/// `λ_r (d_R(R̂, R) + smooth-L1(t̂ − t))` for the canonical-to-root transform.
pub fn reconstruction_terms<'t, T: Real>(
    tape: &'t Tape<T>,
    xhat: Var<'t, T>,
    x: &Tensor<T>,
    cfg: &VqvaeConfig,
) -> (Var<'t, T>, Var<'t, T>) {
    let n = x.rows();
    let xt = tape.constant(x.clone());
    let theta_hat = xhat.cols_slice(0, THETA_WIDTH).reshape(vec![n * NUM_JOINTS, 6]);
    let theta = xt.cols_slice(0, THETA_WIDTH).reshape(vec![n * NUM_JOINTS, 6]);
    let rot = geodesic(rot6d_to_matrix(theta_hat), rot6d_to_matrix(theta).detach()).sum();
    let root_hat = TfVar::from_9d(xhat.cols_slice(THETA_WIDTH, X_WIDTH));
    let root = TfVar::from_9d(xt.cols_slice(THETA_WIDTH, X_WIDTH));
    let delta = T::lit(cfg.smooth_l1_delta);
    let trans = geodesic(root_hat.r, root.r.detach()).add(smooth_l1_rows(root_hat.t, root.t.detach(), delta)).sum();
    (rot.scale(T::lit(cfg.lambda_joint)), trans.scale(T::lit(cfg.lambda_root)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Window length in frames; a multiple of the stride.
    pub window: usize,
    pub optimizer: AdamWConfig,
    pub max_grad_norm: Option<f64>,
    /// Codebook rows unused for this many steps are re-seeded.
    pub dead_after: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl VqTrainConfig {
    pub fn desk() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            window: 64,
            optimizer: AdamWConfig { base_lr: 2e-3, weight_decay: 1e-4, total_steps: 2000, ..Default::default() },
            max_grad_norm: None,
            dead_after: 2000,
            eval_every: 250,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VqTrainLog {
    pub step_losses: Vec<VqLossParts>,
    /// `(step, total)` on the fixed evaluation windows of the training data.
    pub train_eval: Vec<(usize, f64)>,
    /// `(step, total)` on validation data, when given.
    pub val_eval: Vec<(usize, f64)>,
    pub best_step: usize,
    pub reseeded: usize,
    pub usage: f64,
}

impl VqTrainLog {
    pub fn initial_eval(&self) -> f64 {
        self.train_eval.first().map(|e| e.1).unwrap_or(f64::NAN)
    }

    pub fn final_eval(&self) -> f64 {
        self.train_eval.last().map(|e| e.1).unwrap_or(f64::NAN)
    }
}

/// Non-overlapping windows of every stream, used for evaluation.
pub fn eval_windows(inputs: &[VqvaeInput], window: usize) -> Vec<VqvaeInput> {
    inputs
        .iter()
        .flat_map(|i| (0..i.frames / window).map(move |k| i.window(k * window, window)))
        .collect()
}

fn eval_total<T: Real>(model: &Vqvae<T>, windows: &[VqvaeInput], chunk: usize) -> Result<f64, VqvaeError> {
    let mut total = 0.0;
    let mut n = 0;
    for c in windows.chunks(chunk.max(1)) {
        let refs: Vec<&VqvaeInput> = c.iter().collect();
        let b = VqBatch::new(&refs)?;
        total += model.evaluate(&b).total * c.len() as f64;
        n += c.len();
    }
    Ok(total / n.max(1) as f64)
}

/// Fraction of codebook rows selected at least once over `windows`.
pub fn codebook_usage<T: Real>(model: &Vqvae<T>, windows: &[VqvaeInput]) -> Result<f64, VqvaeError> {
    let mut used = vec![false; model.config.codebook_size];
    for w in windows {
        for i in model.encode(w)?.0 {
            used[i] = true;
        }
    }
    Ok(used.iter().filter(|u| **u).count() as f64 / used.len() as f64)
}

/// Trains on every present agent stream of `train`. The returned model is the
/// checkpoint with the lowest validation loss (training-window loss when
/// `val` is empty).
pub fn train_vqvae(
    train: &[MotionSequence],
    val: &[MotionSequence],
    config: &VqvaeConfig,
    tc: &VqTrainConfig,
) -> Result<(Vqvae<f32>, VqTrainLog), VqvaeError> {
    if tc.window == 0 || !tc.window.is_multiple_of(config.stride) {
        return Err(VqvaeError::Config(format!("window {} must be a multiple of stride {}", tc.window, config.stride)));
    }
    if tc.batch_size == 0 || tc.steps == 0 {
        return Err(VqvaeError::Config("steps and batch_size must be positive".into()));
    }
    let streams = |seqs: &[MotionSequence]| -> Result<Vec<VqvaeInput>, VqvaeError> {
        let mut out = Vec::new();
        for s in seqs {
            for p in s.active_agents() {
                out.push(VqvaeInput::from_sequence(s, p, config.stride)?);
            }
        }
        Ok(out)
    };
    let train_in = streams(train)?;
    let val_in = streams(val)?;
    if train_in.iter().any(|i| i.frames < tc.window) || train_in.is_empty() {
        return Err(VqvaeError::Config(format!("every training stream needs at least {} frames", tc.window)));
    }
    let train_windows = eval_windows(&train_in, tc.window);
    let val_windows = eval_windows(&val_in, tc.window);

    let mut model = Vqvae::<f32>::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    init_codebook(&mut model, &train_windows, &mut rng)?;

    let mut opt_cfg = tc.optimizer;
    opt_cfg.total_steps = tc.steps;
    let mut opt = AdamW::new(opt_cfg, &model.store);
    let mut log = VqTrainLog::default();
    let mut last_used = vec![0usize; config.codebook_size];
    let mut best: Option<(f64, ParamStore<f32>)> = None;

    let mut evaluate = |model: &Vqvae<f32>, step: usize, log: &mut VqTrainLog| -> Result<(), VqvaeError> {
        let tr = eval_total(model, &train_windows, tc.batch_size)?;
        log.train_eval.push((step, tr));
        let score = if val_windows.is_empty() {
            tr
        } else {
            let v = eval_total(model, &val_windows, tc.batch_size)?;
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
        let items: Vec<VqvaeInput> = (0..tc.batch_size)
            .map(|_| {
                let s = &train_in[rng.random_range(0..train_in.len())];
                let start = rng.random_range(0..=s.frames - tc.window);
                s.window(start, tc.window)
            })
            .collect();
        let refs: Vec<&VqvaeInput> = items.iter().collect();
        let batch = VqBatch::<f32>::new(&refs)?;
        let tape = Tape::new();
        let bound = model.store.bind(&tape);
        let loss = model.loss(&tape, &bound, &batch, None);
        if !loss.parts.total.is_finite() {
            return Err(VqvaeError::NonFiniteLoss { step, detail: format!("{:?}", loss.parts) });
        }
        let grads = tape.backward(loss.total)?;
        let mut g = bound.grads(&grads);
        drop(bound);
        if let Some(m) = tc.max_grad_norm {
            clip_grad_norm(&mut g, m as f32);
        }
        opt.step(&mut model.store, &g)?;
        for &i in &loss.quant.indices {
            last_used[i] = step + 1;
        }
        for k in 0..config.codebook_size {
            if step + 1 - last_used[k] >= tc.dead_after {
                let src = rng.random_range(0..loss.quant.h.rows());
                let row = loss.quant.h.row(src).to_vec();
                let cb = model.store.get_mut(model.codebook);
                let d = cb.cols();
                cb.data_mut()[k * d..(k + 1) * d].copy_from_slice(&row);
                last_used[k] = step + 1;
                log.reseeded += 1;
            }
        }
        log.step_losses.push(loss.parts);
        if (step + 1) % tc.eval_every.max(1) == 0 || step + 1 == tc.steps {
            evaluate(&model, step + 1, &mut log)?;
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    log.usage = codebook_usage(&model, &train_windows)?;
    Ok((model, log))
}

/// Codebook rows drawn without replacement from encoder outputs on `windows`.
fn init_codebook(model: &mut Vqvae<f32>, windows: &[VqvaeInput], rng: &mut ChaCha8Rng) -> Result<(), VqvaeError> {
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for w in windows {
        let (_, h) = model.encode(w)?;
        rows.extend(h.data().chunks(model.config.d_vq).map(|r| r.to_vec()));
    }
    let k = model.config.codebook_size;
    let d = model.config.d_vq;
    let cb = model.store.get_mut(model.codebook);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for i in 0..k.min(order.len()) {
        let j = rng.random_range(i..order.len());
        order.swap(i, j);
    }
    for i in 0..k {
        if i < rows.len() {
            cb.data_mut()[i * d..(i + 1) * d].copy_from_slice(&rows[order[i]]);
        } else {
            // fewer latents than entries: jittered copies
            let src = &rows[order[i % rows.len()]];
            for (c, v) in src.iter().enumerate() {
                let jitter: f32 = rng.random_range(-0.01..0.01);
                cb.data_mut()[i * d + c] = v + jitter;
            }
        }
    }
    Ok(())
}
