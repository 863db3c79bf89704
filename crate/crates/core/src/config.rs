//! Flat `key=value` run configuration covering every module default.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::dataset::InteractionMode;
use crate::dfot::{raw_latent_width, DfotConfig, DfotTrainConfig, TokenLayout};
use crate::metrics::config_hash;
use crate::sampler::{GuidanceMode, Strategy, DEFAULT_DENOISE_STEPS};
use crate::vqvae::{VqTrainConfig, VqvaeConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: expected key=value, got '{text}'")]
    Syntax { line: usize, text: String },
    #[error("bad value '{value}' for {key}")]
    BadValue { key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    Inpaint,
    Predict,
    Joint,
    AgenticSync,
    AgenticAsync,
    Inbetween,
    Control,
    Ultralong,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 8] = [
        Self::Inpaint,
        Self::Predict,
        Self::Joint,
        Self::AgenticSync,
        Self::AgenticAsync,
        Self::Inbetween,
        Self::Control,
        Self::Ultralong,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Inpaint => "inpaint",
            Self::Predict => "predict",
            Self::Joint => "joint",
            Self::AgenticSync => "agentic-sync",
            Self::AgenticAsync => "agentic-async",
            Self::Inbetween => "inbetween",
            Self::Control => "control",
            Self::Ultralong => "ultralong",
        }
    }
}

impl FromStr for StrategyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.iter().copied().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
            format!("unknown strategy '{s}' (expected one of {})", names.join(", "))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub mode: InteractionMode,
    pub agents: usize,
    pub frames: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub strategy: StrategyKind,
    pub denoise_steps: usize,
    /// Clamped token steps for prediction-style strategies.
    pub history: usize,
    /// Generated agent for inpaint and predict.
    pub agent: usize,
    pub tt_offset: f64,
    pub keyframes: Vec<usize>,
    pub controller: usize,
    pub guidance: GuidanceMode,
    pub w: f64,
    pub samples: usize,
    pub window: usize,
    pub overlap: usize,
    /// Token steps added by an ultralong rollout.
    pub new_steps: usize,
    pub snap: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub vqvae: VqvaeConfig,
    pub vq_train: VqTrainConfig,
    /// Token latents come from the VQ-VAE; when false, raw per-frame features.
    pub use_vqvae: bool,
    pub dfot: DfotConfig,
    pub dfot_train: DfotTrainConfig,
    pub sample: SampleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig { mode: InteractionMode::Orbit, agents: 2, frames: 64, train: 4, val: 1, test: 2 },
            vqvae: VqvaeConfig::desk(),
            vq_train: VqTrainConfig::desk(),
            use_vqvae: true,
            dfot: DfotConfig::desk(),
            dfot_train: DfotTrainConfig::desk(),
            sample: SampleConfig {
                strategy: StrategyKind::Inpaint,
                denoise_steps: DEFAULT_DENOISE_STEPS,
                history: 4,
                agent: 1,
                tt_offset: 0.5,
                keyframes: vec![0, 15],
                controller: 0,
                guidance: GuidanceMode::None,
                w: 1.0,
                samples: 10,
                window: 16,
                overlap: 4,
                new_steps: 40,
                snap: true,
                seed: 0,
            },
        }
    }
}

fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue { key: key.into(), value: value.into() })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn grad_norm(v: Option<f64>) -> f64 {
    v.unwrap_or(0.0)
}

impl RunConfig {
    /// Parses a config file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.into() })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line: i + 1, key },
                e => e,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let k = key;
        match key {
            "seed" => self.seed = parse_value(k, v)?,
            "data.mode" => self.data.mode = parse_value(k, v)?,
            "data.agents" => self.data.agents = parse_value(k, v)?,
            "data.frames" => self.data.frames = parse_value(k, v)?,
            "data.train" => self.data.train = parse_value(k, v)?,
            "data.val" => self.data.val = parse_value(k, v)?,
            "data.test" => self.data.test = parse_value(k, v)?,
            "vqvae.d_vq" => self.vqvae.d_vq = parse_value(k, v)?,
            "vqvae.codebook_size" => self.vqvae.codebook_size = parse_value(k, v)?,
            "vqvae.stride" => self.vqvae.stride = parse_value(k, v)?,
            "vqvae.hidden" => self.vqvae.hidden = parse_value(k, v)?,
            "vqvae.lambda_joint" => self.vqvae.lambda_joint = parse_value(k, v)?,
            "vqvae.lambda_root" => self.vqvae.lambda_root = parse_value(k, v)?,
            "vqvae.smooth_l1_delta" => self.vqvae.smooth_l1_delta = parse_value(k, v)?,
            "vqvae.commitment" => self.vqvae.commitment = parse_value(k, v)?,
            "vqvae.steps" => self.vq_train.steps = parse_value(k, v)?,
            "vqvae.batch_size" => self.vq_train.batch_size = parse_value(k, v)?,
            "vqvae.window" => self.vq_train.window = parse_value(k, v)?,
            "vqvae.lr" => self.vq_train.optimizer.base_lr = parse_value(k, v)?,
            "vqvae.weight_decay" => self.vq_train.optimizer.weight_decay = parse_value(k, v)?,
            "vqvae.max_grad_norm" => {
                let n: f64 = parse_value(k, v)?;
                self.vq_train.max_grad_norm = (n > 0.0).then_some(n);
            }
            "vqvae.dead_after" => self.vq_train.dead_after = parse_value(k, v)?,
            "vqvae.eval_every" => self.vq_train.eval_every = parse_value(k, v)?,
            "dfot.tokenizer" => {
                self.use_vqvae = match v {
                    "vqvae" => true,
                    "raw" => false,
                    _ => return Err(ConfigError::BadValue { key: k.into(), value: v.into() }),
                }
            }
            "dfot.d" => self.dfot.d = parse_value(k, v)?,
            "dfot.layers" => self.dfot.layers = parse_value(k, v)?,
            "dfot.heads" => self.dfot.heads = parse_value(k, v)?,
            "dfot.d_emb" => self.dfot.d_emb = parse_value(k, v)?,
            "dfot.p_max" => self.dfot.layout.p_max = parse_value(k, v)?,
            "dfot.use_partner" => self.dfot.layout.use_partner = parse_value(k, v)?,
            "dfot.lambda_latent" => self.dfot.lambda[0] = parse_value(k, v)?,
            "dfot.lambda_partner" => self.dfot.lambda[1] = parse_value(k, v)?,
            "dfot.lambda_delta" => self.dfot.lambda[2] = parse_value(k, v)?,
            "dfot.lambda_consistency" => self.dfot.lambda[3] = parse_value(k, v)?,
            "dfot.smooth_l1_delta" => self.dfot.smooth_l1_delta = parse_value(k, v)?,
            "dfot.steps" => self.dfot_train.steps = parse_value(k, v)?,
            "dfot.batch_size" => self.dfot_train.batch_size = parse_value(k, v)?,
            "dfot.window" => self.dfot_train.window = parse_value(k, v)?,
            "dfot.lr" => self.dfot_train.optimizer.base_lr = parse_value(k, v)?,
            "dfot.weight_decay" => self.dfot_train.optimizer.weight_decay = parse_value(k, v)?,
            "dfot.max_grad_norm" => {
                let n: f64 = parse_value(k, v)?;
                self.dfot_train.max_grad_norm = (n > 0.0).then_some(n);
            }
            "dfot.mask_prob" => self.dfot_train.mask_prob = parse_value(k, v)?,
            "dfot.shuffle_identities" => self.dfot_train.shuffle_identities = parse_value(k, v)?,
            "dfot.eval_every" => self.dfot_train.eval_every = parse_value(k, v)?,
            "sample.strategy" => {
                self.sample.strategy =
                    v.parse().map_err(|_| ConfigError::BadValue { key: k.into(), value: v.into() })?
            }
            "sample.denoise_steps" => self.sample.denoise_steps = parse_value(k, v)?,
            "sample.history" => self.sample.history = parse_value(k, v)?,
            "sample.agent" => self.sample.agent = parse_value(k, v)?,
            "sample.tt_offset" => {
                let f: f64 = parse_value(k, v)?;
                if !(0.0..=1.0).contains(&f) {
                    return Err(ConfigError::BadValue { key: k.into(), value: v.into() });
                }
                self.sample.tt_offset = f;
            }
            "sample.keyframes" => self.sample.keyframes = parse_list(k, v)?,
            "sample.controller" => self.sample.controller = parse_value(k, v)?,
            "sample.guidance" => {
                self.sample.guidance =
                    GuidanceMode::parse(v).map_err(|_| ConfigError::BadValue { key: k.into(), value: v.into() })?
            }
            "sample.w" => self.sample.w = parse_value(k, v)?,
            "sample.samples" => self.sample.samples = parse_value(k, v)?,
            "sample.window" => self.sample.window = parse_value(k, v)?,
            "sample.overlap" => self.sample.overlap = parse_value(k, v)?,
            "sample.new_steps" => self.sample.new_steps = parse_value(k, v)?,
            "sample.snap" => self.sample.snap = parse_value(k, v)?,
            "sample.seed" => self.sample.seed = parse_value(k, v)?,
            _ => return Err(ConfigError::UnknownKey { line: 0, key: key.into() }),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.data.agents == 0 || self.data.agents > self.dfot.layout.p_max {
            return bad(format!("data.agents = {} must lie in 1..={}", self.data.agents, self.dfot.layout.p_max));
        }
        if self.data.mode == InteractionMode::Mirror && self.data.agents != 2 {
            return bad("mirror data needs exactly 2 agents".into());
        }
        if self.data.train == 0 {
            return bad("data.train must be positive".into());
        }
        if !self.vq_train.window.is_multiple_of(self.vqvae.stride) {
            return bad("vqvae.window must be a multiple of vqvae.stride".into());
        }
        if self.sample.samples == 0 || self.sample.denoise_steps == 0 {
            return bad("sample.samples and sample.denoise_steps must be positive".into());
        }
        if self.sample.agent >= self.data.agents || self.sample.controller >= self.data.agents {
            return bad("sample.agent and sample.controller must name existing agents".into());
        }
        if !self.sample.w.is_finite() {
            return bad("sample.w must be finite".into());
        }
        if self.sample.overlap == 0 || self.sample.overlap >= self.sample.window {
            return bad("sample.overlap must lie in 1..sample.window".into());
        }
        self.vqvae.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Token layout implied by the tokenizer choice.
    pub fn layout(&self) -> TokenLayout {
        let omega = self.vqvae.stride;
        let d_z = if self.use_vqvae { self.vqvae.d_vq } else { raw_latent_width(omega) };
        TokenLayout { d_z, omega, ..self.dfot.layout }
    }

    pub fn vqvae_config(&self) -> VqvaeConfig {
        VqvaeConfig { seed: self.seed, ..self.vqvae.clone() }
    }

    pub fn vq_train_config(&self) -> VqTrainConfig {
        let mut tc = self.vq_train.clone();
        tc.optimizer.total_steps = tc.steps;
        tc.seed = self.seed;
        tc
    }

    pub fn model_config(&self) -> DfotConfig {
        DfotConfig { layout: self.layout(), seed: self.seed, ..self.dfot.clone() }
    }

    pub fn dfot_train_config(&self) -> DfotTrainConfig {
        let mut tc = self.dfot_train.clone();
        tc.optimizer.total_steps = tc.steps;
        tc.seed = self.seed;
        tc
    }

    /// Sampling strategy for a window of `steps` token steps. Ultralong
    /// windows use joint generation over the configured overlap.
    pub fn strategy(&self, steps: usize) -> Strategy {
        let s = &self.sample;
        let history = s.history.min(steps.saturating_sub(1));
        match s.strategy {
            StrategyKind::Inpaint => Strategy::Inpaint { generate: vec![s.agent] },
            StrategyKind::Predict => Strategy::Predict { history, agent: s.agent },
            StrategyKind::Joint => Strategy::Joint { history },
            StrategyKind::AgenticSync => Strategy::AgenticSync { history },
            StrategyKind::AgenticAsync => Strategy::AgenticAsync { history, offset: s.tt_offset },
            StrategyKind::Inbetween => Strategy::Inbetween {
                keyframes: s.keyframes.iter().map(|k| (*k).min(steps.saturating_sub(1))).collect(),
            },
            StrategyKind::Control => Strategy::Control { controller: s.controller, history },
            StrategyKind::Ultralong => Strategy::Joint { history: s.overlap },
        }
    }

    /// Resolved configuration, one documented key per line.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let mut kv = |comment: &str, k: &str, v: String| {
            if !comment.is_empty() {
                let _ = writeln!(o, "# {comment}");
            }
            let _ = writeln!(o, "{k}={v}");
        };
        let (d, vq, vt, m, mt, s) = (&self.data, &self.vqvae, &self.vq_train, &self.dfot, &self.dfot_train, &self.sample);
        kv("base seed for data, initialisation and training", "seed", self.seed.to_string());
        kv("orbit | mirror | approach_retreat | ring", "data.mode", d.mode.name().into());
        kv("", "data.agents", d.agents.to_string());
        kv("frames per sequence at 30 fps", "data.frames", d.frames.to_string());
        kv("number of train / val / test sequences", "data.train", d.train.to_string());
        kv("", "data.val", d.val.to_string());
        kv("", "data.test", d.test.to_string());
        kv("tokenizer latent width and codebook size", "vqvae.d_vq", vq.d_vq.to_string());
        kv("", "vqvae.codebook_size", vq.codebook_size.to_string());
        kv("frames per token", "vqvae.stride", vq.stride.to_string());
        kv("", "vqvae.hidden", vq.hidden.to_string());
        kv("", "vqvae.lambda_joint", vq.lambda_joint.to_string());
        kv("", "vqvae.lambda_root", vq.lambda_root.to_string());
        kv("", "vqvae.smooth_l1_delta", vq.smooth_l1_delta.to_string());
        kv("", "vqvae.commitment", vq.commitment.to_string());
        kv("tokenizer training", "vqvae.steps", vt.steps.to_string());
        kv("", "vqvae.batch_size", vt.batch_size.to_string());
        kv("window in frames", "vqvae.window", vt.window.to_string());
        kv("", "vqvae.lr", vt.optimizer.base_lr.to_string());
        kv("", "vqvae.weight_decay", vt.optimizer.weight_decay.to_string());
        kv("0 disables clipping", "vqvae.max_grad_norm", grad_norm(vt.max_grad_norm).to_string());
        kv("", "vqvae.dead_after", vt.dead_after.to_string());
        kv("", "vqvae.eval_every", vt.eval_every.to_string());
        kv("vqvae | raw", "dfot.tokenizer", if self.use_vqvae { "vqvae" } else { "raw" }.into());
        kv("denoiser width, depth and heads", "dfot.d", m.d.to_string());
        kv("", "dfot.layers", m.layers.to_string());
        kv("", "dfot.heads", m.heads.to_string());
        kv("noise level embedding width", "dfot.d_emb", m.d_emb.to_string());
        kv("", "dfot.p_max", m.layout.p_max.to_string());
        kv("partner transform slots in tokens", "dfot.use_partner", m.layout.use_partner.to_string());
        kv("loss weights", "dfot.lambda_latent", m.lambda[0].to_string());
        kv("", "dfot.lambda_partner", m.lambda[1].to_string());
        kv("", "dfot.lambda_delta", m.lambda[2].to_string());
        kv("", "dfot.lambda_consistency", m.lambda[3].to_string());
        kv("", "dfot.smooth_l1_delta", m.smooth_l1_delta.to_string());
        kv("denoiser training", "dfot.steps", mt.steps.to_string());
        kv("", "dfot.batch_size", mt.batch_size.to_string());
        kv("window in token steps", "dfot.window", mt.window.to_string());
        kv("", "dfot.lr", mt.optimizer.base_lr.to_string());
        kv("", "dfot.weight_decay", mt.optimizer.weight_decay.to_string());
        kv("0 disables clipping", "dfot.max_grad_norm", grad_norm(mt.max_grad_norm).to_string());
        kv("", "dfot.mask_prob", mt.mask_prob.to_string());
        kv("", "dfot.shuffle_identities", mt.shuffle_identities.to_string());
        kv("", "dfot.eval_every", mt.eval_every.to_string());
        let names: Vec<_> = StrategyKind::ALL.iter().map(|k| k.name()).collect();
        kv(&names.join(" | "), "sample.strategy", s.strategy.name().into());
        kv("DDIM steps per token", "sample.denoise_steps", s.denoise_steps.to_string());
        kv("clamped token steps", "sample.history", s.history.to_string());
        kv("generated agent for inpaint / predict", "sample.agent", s.agent.to_string());
        kv("turn-taking offset in [0, 1]", "sample.tt_offset", s.tt_offset.to_string());
        let kf: Vec<String> = s.keyframes.iter().map(|k| k.to_string()).collect();
        kv("token steps clamped when in-betweening", "sample.keyframes", kf.join(","));
        kv("", "sample.controller", s.controller.to_string());
        kv("none | hg | shg | phg", "sample.guidance", s.guidance.name().into());
        kv("guidance weight", "sample.w", s.w.to_string());
        kv("", "sample.samples", s.samples.to_string());
        kv("rollout window and overlap in token steps", "sample.window", s.window.to_string());
        kv("", "sample.overlap", s.overlap.to_string());
        kv("", "sample.new_steps", s.new_steps.to_string());
        kv("snap latents to the codebook before decoding", "sample.snap", s.snap.to_string());
        kv("", "sample.seed", s.seed.to_string());
        o
    }

    pub fn hash(&self) -> String {
        config_hash(&self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_text() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.layout().width(), 179);
    }

    #[test]
    fn overrides_comments_and_errors() {
        let cfg = RunConfig::parse("# comment\nseed = 7  # trailing\nsample.strategy=agentic-async\ndfot.tokenizer=raw\nsample.keyframes=0,3,9\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.sample.strategy, StrategyKind::AgenticAsync);
        assert!(!cfg.use_vqvae);
        assert_eq!(cfg.layout().d_z, 4 * 63);
        assert_eq!(cfg.sample.keyframes, vec![0, 3, 9]);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
        assert_eq!(
            RunConfig::parse("seed=1\nvqvae.colour=3\n"),
            Err(ConfigError::UnknownKey { line: 2, key: "vqvae.colour".into() })
        );
        assert!(matches!(RunConfig::parse("seed"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(RunConfig::parse("sample.guidance=cfg"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(RunConfig::parse("data.mode=mirror\ndata.agents=3"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn strategies_follow_the_sample_block() {
        let mut cfg = RunConfig::default();
        for kind in StrategyKind::ALL {
            cfg.sample.strategy = kind;
            let s = cfg.strategy(16);
            if kind == StrategyKind::Ultralong {
                assert_eq!(s, Strategy::Joint { history: 4 });
            } else {
                assert_eq!(s.name(), kind.name());
            }
        }
    }
}
