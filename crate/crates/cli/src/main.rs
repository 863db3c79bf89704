use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use magnet_core::config::{RunConfig, StrategyKind};
use magnet_core::dataset::{self, MotionSequence};
use magnet_core::dfot::Dfot;
use magnet_core::nn::{load_checkpoint, save_checkpoint};
use magnet_core::pipeline::{self, Models, Splits};
use magnet_core::vqvae::{train_vqvae, Vqvae};

mod plot;

const RUN_DIR_ENV: &str = "MAGNET_RUN_DIR";
const DEFAULT_ROOT: &str = "runs";

#[derive(Parser)]
#[command(name = "magnet", version, about = "Multi-agent motion generation toolkit")]
struct Cli {
    /// Config file of key=value lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set dfot.steps=200.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run directory name under the output root (defaults to the command name).
    #[arg(long, global = true)]
    run: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/val/test interaction sequences.
    GenData {
        #[arg(long, value_parser = ["orbit", "mirror", "approach_retreat", "ring"])]
        mode: Option<String>,
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the motion tokenizer.
    TrainVqvae {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the denoiser on tokenized data.
    TrainDfot {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vqvae: Option<PathBuf>,
    },
    /// Generate motion for one conditioning sequence.
    Sample {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        condition: Option<PathBuf>,
        #[command(flatten)]
        sampling: SamplingArgs,
        /// Also write a top-down trajectory plot per sample.
        #[arg(long)]
        plot: bool,
    },
    /// Score samples against the test split.
    Evaluate {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long, default_value = "model")]
        label: String,
    },
    /// Train and score the architecture and guidance ablations.
    Ablate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Measure generated frames per second.
    Bench {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        condition: Option<PathBuf>,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    dfot: PathBuf,
    #[arg(long)]
    vqvae: Option<PathBuf>,
}

#[derive(Args)]
struct SamplingArgs {
    #[arg(long, value_parser = StrategyKind::ALL.map(|k| k.name()))]
    strategy: Option<String>,
    #[arg(long, value_parser = ["none", "hg", "shg", "phg"])]
    guidance: Option<String>,
    /// Guidance weight.
    #[arg(long)]
    w: Option<f64>,
    /// Agentic-async offset fraction in [0, 1].
    #[arg(long)]
    tt_offset: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("usage error: {m}"),
                CliError::Runtime(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(e.code())
        }
    }
}

/// Sets a config key from a command-line flag, blaming the flag on failure.
fn set_flag(cfg: &mut RunConfig, flag: &str, key: &str, value: Option<String>) -> Result<(), CliError> {
    if let Some(v) = value {
        cfg.set(key, &v).map_err(|e| CliError::Usage(format!("{flag}: {e}")))?;
    }
    Ok(())
}

fn apply_sampling(cfg: &mut RunConfig, s: &SamplingArgs) -> Result<(), CliError> {
    set_flag(cfg, "--strategy", "sample.strategy", s.strategy.clone())?;
    set_flag(cfg, "--guidance", "sample.guidance", s.guidance.clone())?;
    set_flag(cfg, "--w", "sample.w", s.w.map(|v| v.to_string()))?;
    set_flag(cfg, "--tt-offset", "sample.tt_offset", s.tt_offset.map(|v| v.to_string()))?;
    set_flag(cfg, "--seed", "sample.seed", s.seed.map(|v| v.to_string()))?;
    set_flag(cfg, "--samples", "sample.samples", s.samples.map(|v| v.to_string()))
}

fn base_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("--config {}: {e}", p.display())))?;
            RunConfig::parse(&text).map_err(|e| CliError::Usage(format!("--config {}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got '{o}'")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| CliError::Usage(format!("--set {o}: {e}")))?;
    }
    Ok(cfg)
}

fn require_file(flag: &str, path: Option<&Path>) -> Result<PathBuf, CliError> {
    let p = path.ok_or_else(|| CliError::Usage(format!("{flag} is required")))?;
    if !p.is_file() {
        return Err(CliError::Usage(format!("{flag}: no such file '{}'", p.display())));
    }
    Ok(p.to_path_buf())
}

fn require_dir(flag: &str, path: &Path) -> Result<(), CliError> {
    if !path.is_dir() {
        return Err(CliError::Usage(format!("{flag}: no such directory '{}'", path.display())));
    }
    Ok(())
}

fn run_dir(cli: &Cli, command: &str) -> Result<PathBuf, CliError> {
    let root = std::env::var_os(RUN_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT));
    let dir = root.join(cli.run.as_deref().unwrap_or(command));
    fs::create_dir_all(&dir).map_err(|e| runtime(format!("creating {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| runtime(format!("writing {}: {e}", path.display())))
}

fn finish(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    write(&dir.join("config.txt"), &cfg.to_text())?;
    eprintln!("outputs in {}", dir.display());
    Ok(())
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

fn split_name(split: &str, i: usize) -> String {
    format!("{split}-{i:03}.motion")
}

fn load_splits(dir: &Path) -> Result<Splits, CliError> {
    require_dir("--data", dir)?;
    let mut parts: [Vec<MotionSequence>; 3] = Default::default();
    for (k, split) in SPLITS.iter().enumerate() {
        for i in 0.. {
            let p = dir.join(split_name(split, i));
            if !p.is_file() {
                break;
            }
            parts[k].push(load_motion(&p)?);
        }
    }
    if parts[0].is_empty() {
        return Err(CliError::Usage(format!("--data: no training sequences in '{}'", dir.display())));
    }
    let [train, val, test] = parts;
    Ok(Splits { train, val, test })
}

fn load_motion(p: &Path) -> Result<MotionSequence, CliError> {
    let seq = dataset::load(p).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
    dataset::preprocess(&seq).map_err(|e| runtime(format!("{}: {e}", p.display())))
}

fn load_models(cfg: &RunConfig, args: &ModelArgs) -> Result<Models, CliError> {
    let dfot_path = require_file("--dfot", Some(&args.dfot))?;
    let ck = load_checkpoint(&dfot_path).map_err(|e| runtime(format!("--dfot: {e}")))?;
    let (dfot, stats) = Dfot::<f32>::from_checkpoint(&ck).map_err(|e| runtime(format!("--dfot: {e}")))?;
    let vqvae = match (&args.vqvae, cfg.use_vqvae) {
        (Some(p), _) => {
            let p = require_file("--vqvae", Some(p))?;
            let ck = load_checkpoint(&p).map_err(|e| runtime(format!("--vqvae: {e}")))?;
            Some(Vqvae::<f32>::from_checkpoint(&ck).map_err(|e| runtime(format!("--vqvae: {e}")))?)
        }
        (None, true) => {
            return Err(CliError::Usage("--vqvae is required unless dfot.tokenizer=raw".into()));
        }
        (None, false) => None,
    };
    Ok(Models { vqvae, dfot, stats })
}

fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = base_config(&cli)?;
    match &cli.command {
        Command::GenData { mode, agents, frames, seed } => {
            set_flag(&mut cfg, "--mode", "data.mode", mode.clone())?;
            set_flag(&mut cfg, "--agents", "data.agents", agents.map(|v| v.to_string()))?;
            set_flag(&mut cfg, "--frames", "data.frames", frames.map(|v| v.to_string()))?;
            set_flag(&mut cfg, "--seed", "seed", seed.map(|v| v.to_string()))?;
            validate(&cfg)?;
            let dir = run_dir(&cli, "gen-data")?;
            let data = dir.join("data");
            fs::create_dir_all(&data).map_err(runtime)?;
            let splits = pipeline::generate_splits(&cfg).map_err(runtime)?;
            for (split, seqs) in SPLITS.iter().zip([&splits.train, &splits.val, &splits.test]) {
                for (i, s) in seqs.iter().enumerate() {
                    write(&data.join(split_name(split, i)), &dataset::to_text(s))?;
                }
            }
            println!("wrote {} sequences to {}", splits.train.len() + splits.val.len() + splits.test.len(), data.display());
            finish(&dir, &cfg)
        }
        Command::TrainVqvae { data } => {
            validate(&cfg)?;
            let splits = load_splits(data)?;
            let dir = run_dir(&cli, "train-vqvae")?;
            let (model, log) =
                train_vqvae(&splits.train, &splits.val, &cfg.vqvae_config(), &cfg.vq_train_config()).map_err(runtime)?;
            save_checkpoint(&dir.join("vqvae.ckpt"), &model.to_checkpoint(None)).map_err(runtime)?;
            let mut text = String::from("step total rotation translation codebook commitment\n");
            for (i, p) in log.step_losses.iter().enumerate() {
                text += &format!("{i} {:.6e} {:.6e} {:.6e} {:.6e} {:.6e}\n", p.total, p.rotation, p.translation, p.codebook, p.commitment);
            }
            write(&dir.join("vqvae-log.txt"), &text)?;
            println!("best step {} of {}", log.best_step, log.step_losses.len());
            finish(&dir, &cfg)
        }
        Command::TrainDfot { data, vqvae } => {
            validate(&cfg)?;
            let splits = load_splits(data)?;
            let vq = match (vqvae, cfg.use_vqvae) {
                (Some(p), true) => {
                    let p = require_file("--vqvae", Some(p))?;
                    let ck = load_checkpoint(&p).map_err(|e| runtime(format!("--vqvae: {e}")))?;
                    Some(Vqvae::<f32>::from_checkpoint(&ck).map_err(|e| runtime(format!("--vqvae: {e}")))?)
                }
                (None, true) => return Err(CliError::Usage("--vqvae is required unless dfot.tokenizer=raw".into())),
                (Some(_), false) => return Err(CliError::Usage("--vqvae given but dfot.tokenizer=raw".into())),
                (None, false) => None,
            };
            let dir = run_dir(&cli, "train-dfot")?;
            let (models, log) = pipeline::train_denoiser(&cfg, &splits, vq).map_err(runtime)?;
            save_checkpoint(&dir.join("dfot.ckpt"), &models.dfot.to_checkpoint(&models.stats, None)).map_err(runtime)?;
            let mut text = String::from("step total latent partner delta consistency\n");
            for (i, p) in log.step_losses.iter().enumerate() {
                let c = p.components;
                text += &format!("{i} {:.6e} {:.6e} {:.6e} {:.6e} {:.6e}\n", p.total, c[0], c[1], c[2], c[3]);
            }
            write(&dir.join("dfot-log.txt"), &text)?;
            println!("best step {} of {}", log.best_step, log.step_losses.len());
            finish(&dir, &cfg)
        }
        Command::Sample { models, condition, sampling, plot } => {
            apply_sampling(&mut cfg, sampling)?;
            validate(&cfg)?;
            let cond_path = require_file("--condition", condition.as_deref())?;
            let models = load_models(&cfg, models)?;
            let cond = load_motion(&cond_path)?;
            let dir = run_dir(&cli, "sample")?;
            for k in 0..cfg.sample.samples {
                let g = pipeline::generate(&cfg, &models, &cond, k, cfg.sample.new_steps).map_err(runtime)?;
                write(&dir.join(format!("sample-{k:03}.motion")), &dataset::to_text(&g.motion))?;
                if *plot {
                    write(&dir.join(format!("sample-{k:03}.svg")), &plot::trajectory_svg(&g.motion))?;
                }
            }
            println!("wrote {} samples ({})", cfg.sample.samples, cfg.sample.strategy.name());
            finish(&dir, &cfg)
        }
        Command::Evaluate { models, data, sampling, label } => {
            apply_sampling(&mut cfg, sampling)?;
            validate(&cfg)?;
            let models = load_models(&cfg, models)?;
            let splits = load_splits(data)?;
            if splits.test.is_empty() {
                return Err(CliError::Usage(format!("--data: no test sequences in '{}'", data.display())));
            }
            let dir = run_dir(&cli, "evaluate")?;
            let report = pipeline::evaluate_models(&cfg, &models, &splits.test, label).map_err(runtime)?;
            let text = report.to_text();
            print!("{text}");
            write(&dir.join("report.txt"), &text)?;
            finish(&dir, &cfg)
        }
        Command::Ablate { data } => {
            validate(&cfg)?;
            let splits = load_splits(data)?;
            if splits.test.is_empty() {
                return Err(CliError::Usage(format!("--data: no test sequences in '{}'", data.display())));
            }
            let dir = run_dir(&cli, "ablate")?;
            let reports = pipeline::run_ablations(&cfg, &splits, |m| eprintln!("{m}")).map_err(runtime)?;
            let text: String = reports.iter().map(|r| r.to_text() + "\n").collect();
            print!("{text}");
            write(&dir.join("ablation.txt"), &text)?;
            finish(&dir, &cfg)
        }
        Command::Bench { models, condition, sampling } => {
            apply_sampling(&mut cfg, sampling)?;
            validate(&cfg)?;
            let cond_path = require_file("--condition", condition.as_deref())?;
            let models = load_models(&cfg, models)?;
            let cond = load_motion(&cond_path)?;
            let dir = run_dir(&cli, "bench")?;
            let start = Instant::now();
            let mut frames = 0usize;
            for k in 0..cfg.sample.samples {
                let g = pipeline::generate(&cfg, &models, &cond, k, cfg.sample.new_steps).map_err(runtime)?;
                frames += g.motion.num_frames;
            }
            let secs = start.elapsed().as_secs_f64();
            let text = format!(
                "strategy={}\nsamples={}\nframes={frames}\nseconds={secs:.4}\nfps={:.3}\nconfig_hash={}\n",
                cfg.sample.strategy.name(),
                cfg.sample.samples,
                frames as f64 / secs.max(1e-9),
                cfg.hash()
            );
            print!("{text}");
            write(&dir.join("bench.txt"), &text)?;
            finish(&dir, &cfg)
        }
    }
}
