use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use more_core::amp::{gen_reference_clip, ClipGait, ClipParams};
use more_core::bench::{self, ModulationRow};
use more_core::checkpoint::{read_policy, Archive};
use more_core::config::{Ablation, RunConfig};
use more_core::gait::Gait;
use more_core::latents::{analyze_latents, export_residual_latents};
use more_core::policy::{LatentRow, Policy};
use more_core::trainer::{self, IterationMetrics, Trainer};
use more_core::Error;

#[derive(Parser, Debug)]
#[command(name = "more", version, about = "Residual-expert locomotion training and evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    ablation: Option<Ablation>,
    /// Mean-action evaluation and sequential execution.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Attribute {
    Squat,
    KneeLift,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the base locomotion policy.
    TrainStage1 {
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, default_value_t = 50)]
        checkpoint_every: usize,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Attach the residual experts and train with style and gait rewards.
    TrainStage2 {
        /// Stage-1 checkpoint directory (not needed for more-os).
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, default_value_t = 50)]
        checkpoint_every: usize,
    },
    /// Succ./Dist. benchmark of a checkpoint.
    EvalBench {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Method label in the report.
        #[arg(long, default_value = "MoRE")]
        method: String,
        /// Override the trial count of every suite entry.
        #[arg(long)]
        trials: Option<usize>,
        /// Write per-trial episode traces.
        #[arg(long)]
        traces: bool,
    },
    /// Write the synthetic reference clips.
    GenRefs,
    /// Export residual latents of a stage-2 checkpoint.
    ExportLatents {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Projection, silhouette and gate usage of exported latents.
    AnalyzeLatents {
        #[arg(long)]
        input: PathBuf,
    },
    /// Achieved gait attribute for checkpoints trained with different targets.
    GaitModulation {
        #[arg(long, value_enum, default_value = "squat")]
        attribute: Attribute,
        #[arg(long, required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value_t = 10)]
        rollouts: usize,
        #[arg(long, default_value_t = 500)]
        steps: usize,
    },
    /// Print the resolved configuration and its hash.
    InspectConfig,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Stdout writes that tolerate a closed pipe.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

type CliResult<T> = std::result::Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(Error::io(path, e))
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            if !path.exists() {
                return Err(Failure::Usage(format!("config file {} does not exist", path.display())));
            }
            RunConfig::load(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(a) = common.ablation {
        a.apply(&mut cfg);
    }
    if common.deterministic {
        cfg.bench.deterministic = true;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn progress(m: &IterationMetrics) {
    eprintln!(
        "iter {:5} stage {} reward {:8.3} tracking {:6.3} episodes {:4}",
        m.iteration,
        m.stage,
        m.mean_reward,
        m.term(more_core::rewards::Term::TrackLinVel),
        m.episodes
    );
}

/// Policy from a policy or training checkpoint, plus the run config stored
/// with a training checkpoint.
fn load_policy(dir: &Path) -> CliResult<(Policy, Option<RunConfig>)> {
    if !dir.join(more_core::checkpoint::MANIFEST_FILE).exists() {
        return Err(Failure::Usage(format!("{} is not a checkpoint directory", dir.display())));
    }
    let archive = Archive::load(dir)?;
    let policy = read_policy(&archive, "")?;
    let cfg = match archive.meta.get("config") {
        Some(v) => Some(serde_json::from_value(v.clone()).map_err(Error::from)?),
        None => None,
    };
    Ok((policy, cfg))
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    let nested = path.join("checkpoint");
    if nested.join(more_core::checkpoint::MANIFEST_FILE).exists() {
        nested
    } else {
        path.to_path_buf()
    }
}

fn finish_training(trainer: &mut Trainer, cfg: &RunConfig, iterations: usize, out: &Path, every: usize) -> CliResult<()> {
    create_out(out)?;
    write(&out.join("config.toml"), &cfg.to_toml()?)?;
    let metrics = trainer::run_iterations(trainer, cfg, iterations, Some(out), every, progress)?;
    if let Some(last) = metrics.last() {
        eprintln!("finished {} iterations; last mean reward {:.3}", metrics.len(), last.mean_reward);
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let common = &cli.common;
    match cli.command {
        Command::TrainStage1 {
            iterations,
            checkpoint_every,
            resume,
        } => {
            let (mut trainer, cfg) = match resume {
                Some(dir) => {
                    let (t, cfg) = trainer::load_trainer(checkpoint_dir(&dir))?;
                    (t, cfg)
                }
                None => {
                    let cfg = load_config(common)?;
                    (trainer::stage1_trainer(&cfg, common.seed)?, cfg)
                }
            };
            let n = iterations.unwrap_or(cfg.train.iterations);
            finish_training(&mut trainer, &cfg, n, &common.out, checkpoint_every)
        }
        Command::TrainStage2 {
            stage1,
            iterations,
            checkpoint_every,
        } => {
            let cfg = load_config(common)?;
            let base = match (&stage1, cfg.stage2.one_stage) {
                (_, true) => None,
                (Some(dir), false) => Some(load_policy(&checkpoint_dir(dir))?.0),
                (None, false) => return Err(Failure::Usage("train-stage2 needs --stage1 unless --ablation more-os".into())),
            };
            let mut trainer = trainer::stage2_trainer(&cfg, base, common.seed)?;
            let warm = trainer::warmup_discriminators(&mut trainer)?;
            for s in &warm {
                eprintln!(
                    "warm-up gait {}: D(real) {:.3} D(policy) {:.3}",
                    s.gait, s.mean_real, s.mean_fake
                );
            }
            let n = iterations.unwrap_or(cfg.stage2.iterations);
            finish_training(&mut trainer, &cfg, n, &common.out, checkpoint_every)
        }
        Command::EvalBench {
            checkpoint,
            method,
            trials,
            traces,
        } => {
            let (policy, stored) = load_policy(&checkpoint_dir(&checkpoint))?;
            let mut cfg = match (&common.config, stored) {
                (None, Some(stored)) => stored,
                _ => load_config(common)?,
            };
            if common.deterministic {
                cfg.bench.deterministic = true;
            }
            if let Some(n) = trials {
                if n == 0 {
                    return Err(Failure::Usage("--trials must be at least 1".into()));
                }
                cfg.bench.suite.iter_mut().for_each(|s| s.trials = n);
            }
            cfg.bench.traces |= traces;
            create_out(&common.out)?;
            let trace_dir = common.out.join("traces");
            let report = bench::run_benchmark(
                &policy,
                &cfg.train.env,
                &cfg.train.rewards,
                &cfg.bench,
                &method,
                &cfg.hash(),
                common.seed,
                cfg.bench.traces.then_some(trace_dir.as_path()),
            )?;
            write(&common.out.join("report.json"), &report.to_json()?)?;
            let text = report.to_text();
            write(&common.out.join("report.txt"), &text)?;
            out!("{text}");
            Ok(())
        }
        Command::GenRefs => {
            let cfg = load_config(common)?;
            create_out(&common.out)?;
            let clips: Vec<ClipParams> = if cfg.amp.clips.is_empty() {
                ClipGait::ALL.iter().map(|g| ClipParams::preset(*g)).collect()
            } else {
                cfg.amp.clips.clone()
            };
            for (k, params) in clips.iter().enumerate() {
                let clip = gen_reference_clip(params, &cfg.train.env.robot, common.seed.wrapping_add(k as u64))?;
                let path = common.out.join(format!("{}.json", params.gait.as_str()));
                clip.save(&path)?;
                outln!("{} ({} frames, gait id {})", path.display(), clip.frames.len(), clip.gait_id);
            }
            Ok(())
        }
        Command::ExportLatents { checkpoint } => {
            let (policy, stored) = load_policy(&checkpoint_dir(&checkpoint))?;
            let cfg = match (&common.config, stored) {
                (None, Some(stored)) => stored,
                _ => load_config(common)?,
            };
            let terrains = [(more_core::env::TerrainKind::Flat, 0.0)];
            let rows = export_residual_latents(&policy, &cfg.train.env, &cfg.latents, &terrains, common.seed)?;
            create_out(&common.out)?;
            let path = common.out.join("latents.jsonl");
            let mut text = String::new();
            for r in &rows {
                text.push_str(&serde_json::to_string(r).map_err(Error::from)?);
                text.push('\n');
            }
            write(&path, &text)?;
            outln!("{} rows -> {}", rows.len(), path.display());
            Ok(())
        }
        Command::AnalyzeLatents { input } => {
            let text = fs::read_to_string(&input).map_err(|_| Failure::Usage(format!("cannot read {}", input.display())))?;
            let rows = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str::<LatentRow>(l).map_err(Error::from))
                .collect::<Result<Vec<_>, _>>()?;
            let report = analyze_latents(&rows)?;
            create_out(&common.out)?;
            write(
                &common.out.join("latent_report.json"),
                &serde_json::to_string_pretty(&report).map_err(Error::from)?,
            )?;
            match report.silhouette {
                Some(s) => outln!("silhouette {s:.4} over {} samples", rows.len()),
                None => outln!("silhouette undefined (degenerate: {})", report.degenerate),
            }
            for g in &report.gate_usage {
                let w: Vec<String> = g.mean_weight.iter().map(|w| format!("{w:.3}")).collect();
                outln!("gait {} mean gate [{}] argmax {:?}", g.gait, w.join(", "), g.argmax_counts);
            }
            Ok(())
        }
        Command::GaitModulation {
            attribute,
            checkpoints,
            rollouts,
            steps,
        } => {
            if rollouts == 0 {
                return Err(Failure::Usage("--rollouts must be at least 1".into()));
            }
            let mut rows = Vec::new();
            for dir in &checkpoints {
                let (policy, stored) = load_policy(&checkpoint_dir(dir))?;
                let cfg = match (&common.config, stored) {
                    (None, Some(stored)) => stored,
                    _ => load_config(common)?,
                };
                let (gait, name, target, reference) = match attribute {
                    Attribute::Squat => (
                        Gait::Squat,
                        "squat_height",
                        cfg.train.rewards.squat_target,
                        ClipParams::preset(ClipGait::Squat).base_height,
                    ),
                    Attribute::KneeLift => (
                        Gait::HighKnees,
                        "knee_height",
                        cfg.train.rewards.knee_target,
                        ClipParams::preset(ClipGait::HighKnees).knee_lift.unwrap_or(0.0),
                    ),
                };
                let values = bench::measure_gait_attribute(
                    &policy,
                    &cfg.train.env,
                    gait,
                    cfg.latents.lin_vel,
                    rollouts,
                    steps,
                    50,
                    common.seed,
                )?;
                let (mean, std) = bench::mean_std(&values);
                rows.push(ModulationRow {
                    attribute: name.to_string(),
                    reference,
                    target,
                    mean,
                    std,
                    rollouts: values.len(),
                });
            }
            create_out(&common.out)?;
            write(
                &common.out.join("modulation.json"),
                &serde_json::to_string_pretty(&rows).map_err(Error::from)?,
            )?;
            let text = bench::modulation_text(&rows);
            write(&common.out.join("modulation.txt"), &text)?;
            out!("{text}");
            Ok(())
        }
        Command::InspectConfig => {
            let cfg = load_config(common)?;
            out!("{}", cfg.to_toml()?);
            outln!("# hash {}", cfg.hash());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
