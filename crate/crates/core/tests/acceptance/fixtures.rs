use std::sync::OnceLock;

use magnet_core::config::RunConfig;
use magnet_core::dataset::{crop, generate_interaction, preprocess, GeneratorParams, InteractionMode, MotionSequence};
use magnet_core::pipeline::{generate_splits, train_models, Models, Splits, TrainLogs};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const VQ_STEPS: usize = 800;
pub const DFOT_STEPS: usize = 2000;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Preprocessed generator output; lengths under the generator minimum are cropped.
pub fn seq(mode: InteractionMode, agents: usize, frames: usize, seed: u64) -> MotionSequence {
    let full = generate_interaction(mode, agents, frames.max(64), seed, &GeneratorParams::default()).unwrap();
    preprocess(&crop(&full, 0, frames)).unwrap()
}

/// Desk model sizes on four training sequences of one interaction mode.
pub fn desk_config(mode: &str) -> RunConfig {
    let text = format!(
        "data.mode={mode}\ndata.agents=2\ndata.frames=64\ndata.train=4\ndata.val=1\ndata.test=2\n\
         vqvae.steps={VQ_STEPS}\nvqvae.eval_every=100\ndfot.steps={DFOT_STEPS}\ndfot.eval_every=250\n"
    );
    RunConfig::parse(&text).unwrap()
}

pub struct Trained {
    pub cfg: RunConfig,
    pub splits: Splits,
    pub models: Models,
    pub logs: TrainLogs,
}

fn train(mode: &str) -> Trained {
    let cfg = desk_config(mode);
    let splits = generate_splits(&cfg).unwrap();
    let (models, logs) = train_models(&cfg, &splits).unwrap();
    Trained { cfg, splits, models, logs }
}

/// Overfit desk model on orbit data, trained once per process.
pub fn orbit() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| train("orbit"))
}

/// Overfit desk model on mirror data.
pub fn mirror() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| train("mirror"))
}
