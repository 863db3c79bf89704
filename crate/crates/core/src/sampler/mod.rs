//! Inference: sampling plans, DDIM updates with per-token noise levels,
//! motion-history guidance, windowed long rollouts and decoding back to motion.

mod plan;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub use plan::{make_plan, Role, SamplingPlan, Strategy, DEFAULT_DENOISE_STEPS};

use crate::body::{NUM_JOINTS, SHAPE_DIM};
use crate::dataset::{preprocess, DatasetError, MotionSequence, Transform, TARGET_FPS};
use crate::dfot::{alpha_bar, raw_latent_width, DenoiseBatch, Dfot, DfotError, TokenSeq, TokenStats};
use crate::geometry::{matrix_to_rot6d, rot6d_to_matrix, GeometryError, RigidTransform, Rotation6D};
use crate::scalar::Real;
use crate::vqvae::{Vqvae, VqvaeError, C_WIDTH, THETA_WIDTH, X_WIDTH};

const GUIDANCE_SALT: u64 = 0x6a09_e667_f3bc_c909;
const ROLLOUT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid strategy parameters: {0}")]
    InvalidStrategyParams(String),
    #[error("degenerate denoising step from τ = {from} to τ = {to}")]
    DegenerateLevel { from: f64, to: f64 },
    #[error("plan does not match the model or conditioning: {0}")]
    PlanModelMismatch(String),
    #[error("missing conditioning: {0}")]
    MissingConditioning(String),
    #[error("unknown guidance mode '{0}' (expected none, hg, shg or phg)")]
    InvalidMode(String),
    #[error("invalid rollout window: {0}")]
    InvalidWindow(String),
    #[error(transparent)]
    Dfot(#[from] DfotError),
    #[error(transparent)]
    Vqvae(#[from] VqvaeError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One deterministic DDIM update on the channels selected by `mask`; other
/// channels keep their value from `m`. The terminal step (`τ_next = 0`)
/// returns the prediction itself.
pub fn ddim_step(m: &[f64], m0: &[f64], tau_cur: f64, tau_next: f64, mask: &[bool]) -> Result<Vec<f64>, SamplerError> {
    if tau_cur <= 0.0 || tau_next >= tau_cur || tau_next < 0.0 {
        return Err(SamplerError::DegenerateLevel { from: tau_cur, to: tau_next });
    }
    if m0.len() != m.len() || mask.len() != m.len() {
        return Err(SamplerError::PlanModelMismatch("token widths differ".into()));
    }
    let a_cur = alpha_bar(tau_cur)?;
    let a_next = if tau_next == 0.0 { 1.0 } else { alpha_bar(tau_next)? };
    let (sc, nc) = (a_cur.sqrt(), (1.0 - a_cur).sqrt());
    let (sn, nn) = (a_next.sqrt(), (1.0 - a_next).sqrt());
    Ok(m.iter()
        .zip(m0)
        .zip(mask)
        .map(|((x, x0), on)| {
            if !on {
                *x
            } else if tau_next == 0.0 {
                *x0
            } else {
                let eps = (x - sc * x0) / nc;
                sn * x0 + nn * eps
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceMode {
    None,
    /// Full history against none.
    History,
    /// Each agent's own history alone, averaged over agents.
    SelfHistory,
    /// Every history except one agent's, averaged over agents.
    PartnerHistory,
}

impl GuidanceMode {
    pub fn parse(s: &str) -> Result<Self, SamplerError> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "hg" => Ok(Self::History),
            "shg" => Ok(Self::SelfHistory),
            "phg" => Ok(Self::PartnerHistory),
            _ => Err(SamplerError::InvalidMode(s.into())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::History => "hg",
            Self::SelfHistory => "shg",
            Self::PartnerHistory => "phg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Guidance {
    pub mode: GuidanceMode,
    pub w: f64,
}

impl Default for Guidance {
    fn default() -> Self {
        Self { mode: GuidanceMode::None, w: 1.0 }
    }
}

impl Guidance {
    pub fn new(mode: GuidanceMode, w: f64) -> Self {
        Self { mode, w }
    }

    /// Agents whose history each forward branch keeps. Branch 0 is the fully
    /// conditioned one, branch 1 (when guided) the unconditioned one.
    pub fn branches(&self, present: &[bool]) -> Vec<Vec<bool>> {
        let all = present.to_vec();
        let none = vec![false; present.len()];
        let active: Vec<usize> = (0..present.len()).filter(|a| present[*a]).collect();
        match self.mode {
            GuidanceMode::None => vec![all],
            GuidanceMode::History => vec![all, none],
            GuidanceMode::SelfHistory => {
                let mut out = vec![all, none.clone()];
                out.extend(active.iter().map(|&n| {
                    let mut keep = none.clone();
                    keep[n] = true;
                    keep
                }));
                out
            }
            GuidanceMode::PartnerHistory => {
                let mut out = vec![all.clone(), none];
                out.extend(active.iter().map(|&n| {
                    let mut keep = all.clone();
                    keep[n] = false;
                    keep
                }));
                out
            }
        }
    }

    /// Combines branch predictions (each `len` long) into the guided one.
    pub fn combine(&self, preds: &[f64], len: usize) -> Vec<f64> {
        let cond = &preds[..len];
        if self.mode == GuidanceMode::None {
            return cond.to_vec();
        }
        let uncond = &preds[len..2 * len];
        let w = self.w;
        match self.mode {
            GuidanceMode::History => cond.iter().zip(uncond).map(|(c, u)| (1.0 + w) * c - w * u).collect(),
            _ => {
                let extra = preds.len() / len - 2;
                let mut avg = vec![0.0; len];
                for b in 0..extra {
                    for (a, v) in avg.iter_mut().zip(&preds[(2 + b) * len..(3 + b) * len]) {
                        *a += v;
                    }
                }
                avg.iter_mut().for_each(|a| *a /= extra as f64);
                cond.iter().zip(&avg).zip(uncond).map(|((c, s), u)| c + w * s - w * u).collect()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Clamped and revealed tokens are the conditioning, generated tokens the
    /// result, marginal tokens the noise they were left at.
    pub tokens: TokenSeq,
    /// Prediction used at each generated token's terminal step (zeros elsewhere).
    pub final_predictions: Vec<f64>,
    pub forward_passes: usize,
}

fn check_plan<T: Real>(model: &Dfot<T>, plan: &SamplingPlan, template: &TokenSeq) -> Result<(), SamplerError> {
    if template.layout != model.config.layout {
        return Err(SamplerError::PlanModelMismatch("token layout differs from the model's".into()));
    }
    if template.steps != plan.steps || template.agents != plan.agents {
        return Err(SamplerError::PlanModelMismatch(format!(
            "plan covers {} × {} tokens, conditioning has {} × {}",
            plan.steps, plan.agents, template.steps, template.agents
        )));
    }
    if template.agents > template.layout.p_max {
        return Err(SamplerError::PlanModelMismatch(format!("{} agents exceed P_max", template.agents)));
    }
    let w = template.layout.width();
    for (r, role) in plan.roles.iter().enumerate() {
        let a = r % plan.agents;
        let present = template.present[a];
        match role {
            Role::Absent if present => {
                return Err(SamplerError::PlanModelMismatch(format!("agent {a} is present but absent in the plan")))
            }
            Role::Absent => {}
            _ if !present => return Err(SamplerError::PlanModelMismatch(format!("agent {a} is not present"))),
            Role::Clamped | Role::Revealed { .. }
                if template.data[r * w..(r + 1) * w].iter().any(|v| !v.is_finite()) => {
                    return Err(SamplerError::MissingConditioning(format!(
                        "token (step {}, agent {a}) is conditioning but not finite",
                        r / plan.agents
                    )));
                }
            _ => {}
        }
    }
    Ok(())
}

/// Runs a plan. `template` carries normalized conditioning tokens at clamped
/// and revealed positions and the fixed channels (presence bits, absent
/// slots) everywhere; its noised channels at generated positions are ignored.
pub fn sample<T: Real>(
    model: &Dfot<T>,
    plan: &SamplingPlan,
    template: &TokenSeq,
    guidance: &Guidance,
    seed: u64,
) -> Result<SampleOutput, SamplerError> {
    check_plan(model, plan, template)?;
    let w = template.layout.width();
    let n = plan.steps * plan.agents;
    let masks: Vec<Vec<bool>> = (0..plan.agents).map(|a| template.noise_mask(a)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut guide_rng = ChaCha8Rng::seed_from_u64(seed ^ GUIDANCE_SALT);
    let mut cur = template.data.clone();
    for r in 0..n {
        if matches!(plan.roles[r], Role::Generated { .. } | Role::Marginal | Role::Revealed { .. }) {
            let mask = &masks[r % plan.agents];
            for c in 0..w {
                let e: f64 = rng.sample(StandardNormal);
                if mask[c] {
                    cur[r * w + c] = e;
                }
            }
        }
    }
    let branches = guidance.branches(&template.present);
    let mut final_predictions = vec![0.0; n * w];
    let mut forward_passes = 0;
    for k in 0..plan.iterations {
        reveal(plan, template, &mut cur, k, w);
        let taus: Vec<f64> = (0..n).map(|r| plan.tau(k, r)).collect();
        let mut batch = DenoiseBatch::new(template.layout, plan.steps, plan.agents);
        for keep in &branches {
            let mut input = cur.clone();
            let mut tau = taus.clone();
            for r in 0..n {
                let a = r % plan.agents;
                if !keep[a] && plan.is_clean_condition(k, r) {
                    tau[r] = 1.0;
                    for c in 0..w {
                        let e: f64 = guide_rng.sample(StandardNormal);
                        if masks[a][c] {
                            input[r * w + c] = e;
                        }
                    }
                }
            }
            batch.push(template, &input, &tau)?;
        }
        let preds = model.predict(&batch)?;
        forward_passes += 1;
        let m0 = guidance.combine(&preds, n * w);
        for r in 0..n {
            if plan.start_of(r).is_none() {
                continue;
            }
            let (t_cur, t_next) = (taus[r], plan.tau(k + 1, r));
            if t_next >= t_cur {
                continue;
            }
            let span = r * w..(r + 1) * w;
            let next = ddim_step(&cur[span.clone()], &m0[span.clone()], t_cur, t_next, &masks[r % plan.agents])?;
            if t_next == 0.0 {
                final_predictions[span.clone()].copy_from_slice(&m0[span.clone()]);
            }
            cur[span].copy_from_slice(&next);
        }
    }
    reveal(plan, template, &mut cur, plan.iterations, w);
    for r in 0..n {
        if plan.roles[r] == Role::Clamped {
            cur[r * w..(r + 1) * w].copy_from_slice(&template.data[r * w..(r + 1) * w]);
        }
    }
    let tokens = TokenSeq { data: cur, ..template.clone() };
    Ok(SampleOutput { tokens, final_predictions, forward_passes })
}

fn reveal(plan: &SamplingPlan, template: &TokenSeq, cur: &mut [f64], k: usize, w: usize) {
    for r in 0..plan.roles.len() {
        if plan.is_clean_condition(k, r) {
            cur[r * w..(r + 1) * w].copy_from_slice(&template.data[r * w..(r + 1) * w]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutConfig {
    /// Token steps per window.
    pub window: usize,
    /// Token steps carried over as history.
    pub overlap: usize,
    pub denoise_steps: usize,
    pub guidance: Guidance,
}

impl RolloutConfig {
    pub fn new(window: usize, overlap: usize) -> Self {
        Self { window, overlap, denoise_steps: DEFAULT_DENOISE_STEPS, guidance: Guidance::default() }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.overlap == 0 || self.overlap >= self.window {
            return Err(SamplerError::InvalidWindow(format!(
                "overlap {} must lie in 1..{} for window {}",
                self.overlap, self.window, self.window
            )));
        }
        Ok(())
    }

    /// New token steps per window.
    pub fn stride(&self) -> usize {
        self.window - self.overlap
    }

    /// Windows needed to add `new_steps` token steps.
    pub fn iterations(&self, new_steps: usize) -> usize {
        new_steps.div_ceil(self.stride())
    }
}

/// Extends `seed_tokens` by `new_steps` token steps with overlapping windows,
/// each conditioned on the last `overlap` steps produced so far.
pub fn rollout_ultralong<T: Real>(
    model: &Dfot<T>,
    seed_tokens: &TokenSeq,
    new_steps: usize,
    cfg: &RolloutConfig,
    seed: u64,
) -> Result<TokenSeq, SamplerError> {
    cfg.validate()?;
    if seed_tokens.steps < cfg.overlap {
        return Err(SamplerError::InvalidWindow(format!(
            "seed has {} token steps, overlap needs {}",
            seed_tokens.steps, cfg.overlap
        )));
    }
    let mut out = seed_tokens.clone();
    let mut produced = 0;
    let mut j = 0u64;
    while produced < new_steps {
        let n = cfg.stride().min(new_steps - produced);
        let mut template = out.window(out.steps - cfg.overlap, cfg.overlap);
        let last = template.window(cfg.overlap - 1, 1);
        for _ in 0..n {
            template.extend(&last);
        }
        let plan = make_plan(&Strategy::Joint { history: cfg.overlap }, &template.present, template.steps, cfg.denoise_steps)?;
        let s = sample(model, &plan, &template, &cfg.guidance, seed ^ j.wrapping_mul(ROLLOUT_SALT))?;
        out.extend(&s.tokens.window(cfg.overlap, n));
        produced += n;
        j += 1;
    }
    Ok(out)
}

/// Per-frame features recovered from denormalized tokens for one agent:
/// `x̂` rows `[frames × 63]` and the cleaned canonical deltas.
pub fn decode_agent_features<T: Real>(
    raw: &TokenSeq,
    agent: usize,
    vqvae: Option<&Vqvae<T>>,
    beta: &[f64; SHAPE_DIM],
    snap: bool,
) -> Result<(Vec<f64>, Vec<Transform>), SamplerError> {
    let l = raw.layout;
    let frames = raw.steps * l.omega;
    let mut z = Vec::with_capacity(raw.steps * l.d_z);
    let mut deltas = Vec::with_capacity(frames);
    for i in 0..raw.steps {
        let tok = raw.token(i, agent);
        z.extend_from_slice(&tok[..l.d_z]);
        for k in 0..l.omega {
            let ds = l.delta_start() + k * 9;
            deltas.push(RigidTransform::from_9d(&tok[ds..ds + 9])?);
        }
    }
    let x = match vqvae {
        Some(vq) => {
            if vq.config.d_vq != l.d_z || vq.config.stride != l.omega {
                return Err(SamplerError::PlanModelMismatch("tokenizer does not match the token layout".into()));
            }
            let z = if snap { vq.snap(&z) } else { z };
            let mut c = Vec::with_capacity(frames * C_WIDTH);
            for d in &deltas {
                c.extend_from_slice(beta);
                c.extend_from_slice(&d.to_9d());
            }
            vq.decode(&z, &c)?
        }
        None => {
            if l.d_z != raw_latent_width(l.omega) {
                return Err(SamplerError::PlanModelMismatch(format!(
                    "raw latents need d_z = {}, layout has {}",
                    raw_latent_width(l.omega),
                    l.d_z
                )));
            }
            z
        }
    };
    Ok((x, deltas))
}

/// Decodes normalized tokens into a preprocessed motion sequence. Canonical
/// frames are integrated from `initial` (frame 0 of each agent) by the
/// decoded deltas and composed with the decoded canonical-to-root offsets.
pub fn decode_to_motion<T: Real>(
    tokens: &TokenSeq,
    stats: &TokenStats,
    vqvae: Option<&Vqvae<T>>,
    beta: &[[f64; SHAPE_DIM]],
    initial: &[Transform],
    snap: bool,
) -> Result<MotionSequence, SamplerError> {
    let pn = tokens.agents;
    if beta.len() != pn || initial.len() != pn {
        return Err(SamplerError::MissingConditioning(format!(
            "need shape and initial frame for {pn} agents, got {} and {}",
            beta.len(),
            initial.len()
        )));
    }
    let raw = stats.denormalize(tokens);
    let frames = tokens.steps * tokens.layout.omega;
    let identity6 = Rotation6D::<f64>::identity().0;
    let mut theta = vec![0.0; frames * pn * NUM_JOINTS * 6];
    let mut root_world = vec![Transform::identity(); frames * pn];
    for a in 0..pn {
        if !tokens.present[a] {
            for f in 0..frames {
                for j in 0..NUM_JOINTS {
                    let i = ((f * pn + a) * NUM_JOINTS + j) * 6;
                    theta[i..i + 6].copy_from_slice(&identity6);
                }
            }
            continue;
        }
        let (x, deltas) = decode_agent_features(&raw, a, vqvae, &beta[a], snap)?;
        let mut canon = initial[a];
        for f in 0..frames {
            if f > 0 {
                canon = canon.compose(&deltas[f]);
            }
            let row = &x[f * X_WIDTH..(f + 1) * X_WIDTH];
            for j in 0..NUM_JOINTS {
                let clean = matrix_to_rot6d(&rot6d_to_matrix(&Rotation6D::from_slice(&row[j * 6..j * 6 + 6]))?)?;
                let i = ((f * pn + a) * NUM_JOINTS + j) * 6;
                theta[i..i + 6].copy_from_slice(&clean.0);
            }
            let ctr = RigidTransform::from_9d(&row[THETA_WIDTH..X_WIDTH])?;
            root_world[f * pn + a] = canon.compose(&ctr);
        }
    }
    let seq = MotionSequence {
        fps: TARGET_FPS,
        num_agents: pn,
        num_frames: frames,
        presence: tokens.present.clone(),
        beta: beta.to_vec(),
        theta,
        root_world,
        derived: None,
    };
    Ok(preprocess(&seq)?)
}
