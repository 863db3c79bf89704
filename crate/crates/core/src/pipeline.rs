//! End-to-end runs: synthetic splits, training both stages, generating
//! samples for a condition and scoring them.

use thiserror::Error;

use crate::config::{RunConfig, StrategyKind};
use crate::dataset::{generate_interaction, preprocess, crop, DatasetError, GeneratorParams, MotionSequence};
use crate::dfot::{
    agent_latents, assemble_tokens, train_dfot, Dfot, DfotError, DfotTrainLog, TokenDataset, TokenSeq, TokenStats,
};
use crate::metrics::{evaluate, Condition, MetricReport, MetricsError};
use crate::sampler::{
    decode_to_motion, make_plan, rollout_ultralong, sample, Guidance, RolloutConfig, SamplerError,
};
use crate::vqvae::{train_vqvae, VqTrainLog, Vqvae, VqvaeError};

const VAL_OFFSET: u64 = 5_000;
const TEST_OFFSET: u64 = 7_500;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Vqvae(#[from] VqvaeError),
    #[error(transparent)]
    Dfot(#[from] DfotError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<MotionSequence>,
    pub val: Vec<MotionSequence>,
    pub test: Vec<MotionSequence>,
}

/// Deterministic preprocessed train/val/test sequences for a config.
pub fn generate_splits(cfg: &RunConfig) -> Result<Splits, PipelineError> {
    let d = &cfg.data;
    let base = cfg.seed.wrapping_mul(10_000);
    let make = |offset: u64, n: usize| -> Result<Vec<MotionSequence>, PipelineError> {
        (0..n as u64)
            .map(|i| {
                let raw = generate_interaction(d.mode, d.agents, d.frames, base + offset + i, &GeneratorParams::default())?;
                Ok(preprocess(&raw)?)
            })
            .collect()
    };
    Ok(Splits { train: make(0, d.train)?, val: make(VAL_OFFSET, d.val)?, test: make(TEST_OFFSET, d.test)? })
}

/// Trained tokenizer (absent for raw latents), denoiser and token statistics.
#[derive(Debug, Clone)]
pub struct Models {
    pub vqvae: Option<Vqvae<f32>>,
    pub dfot: Dfot<f32>,
    pub stats: TokenStats,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLogs {
    pub vqvae: Option<VqTrainLog>,
    pub dfot: DfotTrainLog,
}

pub fn train_models(cfg: &RunConfig, splits: &Splits) -> Result<(Models, TrainLogs), PipelineError> {
    let (vqvae, vq_log) = if cfg.use_vqvae {
        let (m, log) = train_vqvae(&splits.train, &splits.val, &cfg.vqvae_config(), &cfg.vq_train_config())?;
        (Some(m), Some(log))
    } else {
        (None, None)
    };
    let models = train_denoiser(cfg, splits, vqvae)?;
    Ok((models.0, TrainLogs { vqvae: vq_log, dfot: models.1 }))
}

/// Second stage only, on top of an existing tokenizer.
pub fn train_denoiser(
    cfg: &RunConfig,
    splits: &Splits,
    vqvae: Option<Vqvae<f32>>,
) -> Result<(Models, DfotTrainLog), PipelineError> {
    let data = TokenDataset::build(&splits.train, &splits.val, vqvae.as_ref(), cfg.layout())?;
    let (dfot, log) = train_dfot(&data, &cfg.model_config(), &cfg.dfot_train_config())?;
    Ok((Models { vqvae, dfot, stats: data.stats }, log))
}

impl Models {
    /// Normalized tokens of a preprocessed sequence.
    pub fn tokens(&self, seq: &MotionSequence) -> Result<TokenSeq, PipelineError> {
        let layout = self.dfot.config.layout;
        let latents = agent_latents(seq, self.vqvae.as_ref(), layout.omega)?;
        Ok(self.stats.normalize(&assemble_tokens(seq, &latents, layout)?))
    }

    /// Decodes normalized tokens, anchoring each agent at `anchor`'s
    /// canonical frames at frame `start`.
    pub fn decode(
        &self,
        tokens: &TokenSeq,
        anchor: &MotionSequence,
        start: usize,
        snap: bool,
    ) -> Result<MotionSequence, PipelineError> {
        let canon = anchor.canonical_frames()?;
        let pn = anchor.num_agents;
        let initial: Vec<_> = (0..pn).map(|a| canon[start * pn + a]).collect();
        Ok(decode_to_motion(tokens, &self.stats, self.vqvae.as_ref(), &anchor.beta, &initial, snap)?)
    }
}

/// Output of one generation call.
#[derive(Debug, Clone)]
pub struct Generated {
    pub tokens: TokenSeq,
    pub motion: MotionSequence,
}

fn sample_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add((index as u64).wrapping_mul(0x2545_f491_4f6c_dd1d))
}

/// Generates sample `index` for a conditioning sequence. Non-rollout
/// strategies cover the first `sample.window` token steps; the ultralong
/// rollout starts from the first `overlap` steps and adds `new_steps`.
pub fn generate(
    cfg: &RunConfig,
    models: &Models,
    condition: &MotionSequence,
    index: usize,
    new_steps: usize,
) -> Result<Generated, PipelineError> {
    let all = models.tokens(condition)?;
    let guidance = Guidance::new(cfg.sample.guidance, cfg.sample.w);
    let seed = sample_seed(cfg.sample.seed, index);
    let tokens = if cfg.sample.strategy == StrategyKind::Ultralong {
        let rc = RolloutConfig {
            window: cfg.sample.window,
            overlap: cfg.sample.overlap,
            denoise_steps: cfg.sample.denoise_steps,
            guidance,
        };
        if all.steps < rc.overlap {
            return Err(PipelineError::Invalid(format!("condition has fewer than {} token steps", rc.overlap)));
        }
        rollout_ultralong(&models.dfot, &all.window(0, rc.overlap), new_steps, &rc, seed)?
    } else {
        let template = all.window(0, all.steps.min(cfg.sample.window));
        let plan = make_plan(&cfg.strategy(template.steps), &template.present, template.steps, cfg.sample.denoise_steps)?;
        sample(&models.dfot, &plan, &template, &guidance, seed)?.tokens
    };
    let motion = models.decode(&tokens, condition, 0, cfg.sample.snap && models.vqvae.is_some())?;
    Ok(Generated { tokens, motion })
}

/// Agents whose motion is produced (and therefore scored) by the strategy.
pub fn target_agents(cfg: &RunConfig, seq: &MotionSequence) -> Vec<usize> {
    match cfg.sample.strategy {
        StrategyKind::Inpaint | StrategyKind::Predict => vec![cfg.sample.agent],
        StrategyKind::Control => seq.active_agents().into_iter().filter(|a| *a != cfg.sample.controller).collect(),
        _ => seq.active_agents(),
    }
}

/// Draws `sample.samples` samples per test sequence and scores them.
pub fn evaluate_models(
    cfg: &RunConfig,
    models: &Models,
    test: &[MotionSequence],
    label: &str,
) -> Result<MetricReport, PipelineError> {
    let omega = models.dfot.config.layout.omega;
    let mut conditions = Vec::with_capacity(test.len());
    for (c, seq) in test.iter().enumerate() {
        let steps = (seq.num_frames / omega).min(cfg.sample.window);
        let new_steps = steps.saturating_sub(cfg.sample.overlap);
        let real = preprocess(&crop(seq, 0, steps * omega))?;
        let samples = (0..cfg.sample.samples)
            .map(|k| generate(cfg, models, seq, c * cfg.sample.samples + k, new_steps).map(|g| g.motion))
            .collect::<Result<Vec<_>, _>>()?;
        conditions.push(Condition { targets: target_agents(cfg, &real), real, samples });
    }
    Ok(evaluate(&conditions, label, &cfg.hash())?)
}

/// One ablation row: a label, its config and whether it needs its own models.
#[derive(Debug, Clone)]
pub struct Variant {
    pub label: String,
    pub config: RunConfig,
}

/// Architecture ablations (full model, no partner slots, raw latents) and
/// history-guidance variants evaluated on the full model.
pub fn ablation_variants(base: &RunConfig) -> (Vec<Variant>, Vec<Variant>) {
    use crate::sampler::GuidanceMode;
    let mut no_partner = base.clone();
    no_partner.dfot.layout.use_partner = false;
    let mut raw = base.clone();
    raw.use_vqvae = false;
    let arch = vec![
        Variant { label: "full".into(), config: base.clone() },
        Variant { label: "w/o partner transforms".into(), config: no_partner },
        Variant { label: "w/o vqvae (raw features)".into(), config: raw },
    ];
    let guided = [GuidanceMode::History, GuidanceMode::SelfHistory, GuidanceMode::PartnerHistory]
        .into_iter()
        .map(|mode| {
            let mut c = base.clone();
            c.sample.guidance = mode;
            Variant { label: format!("guidance {}", mode.name()), config: c }
        })
        .collect();
    (arch, guided)
}

/// Trains every architecture variant and evaluates all rows on the test split.
pub fn run_ablations(
    base: &RunConfig,
    splits: &Splits,
    mut progress: impl FnMut(&str),
) -> Result<Vec<MetricReport>, PipelineError> {
    let (arch, guided) = ablation_variants(base);
    let mut reports = Vec::new();
    let mut full = None;
    for v in &arch {
        progress(&format!("training {}", v.label));
        let (models, _) = train_models(&v.config, splits)?;
        progress(&format!("evaluating {}", v.label));
        reports.push(evaluate_models(&v.config, &models, &splits.test, &v.label)?);
        if full.is_none() {
            full = Some(models);
        }
    }
    let full = full.ok_or_else(|| PipelineError::Invalid("no variants".into()))?;
    for v in &guided {
        progress(&format!("evaluating {}", v.label));
        reports.push(evaluate_models(&v.config, &full, &splits.test, &v.label)?);
    }
    Ok(reports)
}
