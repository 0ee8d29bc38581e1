//! `s2ap` command-line driver.
//!
//! Each subcommand reads a flat configuration file, runs one pipeline stage
//! and writes its artifacts into `--out`. Stages hand over through
//! checkpoints: `pretrain` writes `pretrained.ckpt`, `prune` reads it and
//! writes `pruned.ckpt` plus `prune.json`, `finetune` reads `pruned.ckpt`.
//!
//! Exit status: 0 on success, 1 on invalid input, 2 on runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use s2ap::checkpoint::Checkpoint;
use s2ap::data::Split;
use s2ap::diagnostics::{hamming_trace, lambda_max, LossDiffConfig, LossDiffProbe, MaskTrace, SurrogateObjective};
use s2ap::losses::adversarial_examples;
use s2ap::pruner::PruneMode;
use s2ap::runner::pipeline::{
    derive_seed, evaluate_stage, finetune_stage, load_dataset, pretrain_stage, prune_stage,
};
use s2ap::runner::report::{csv_text, emit_gamma_sweep, emit_report};
use s2ap::runner::{run_paired, sweep_gamma, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "s2ap", version, about = "Sharpness-aware adversarial pruning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// Configuration file (`section.key = value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; overrides `run.seeds`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Mode {
    Baseline,
    S2ap,
    Awp,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Measure {
    Lambda,
    Lossdiff,
    Hamming,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dense adversarial training; writes pretrained.ckpt.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Mask search on a pretrained checkpoint; writes pruned.ckpt and prune.json.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Input checkpoint (default: <out>/pretrained.ckpt).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Weight finetuning under the pruned mask; writes finetuned.ckpt and finetune.json.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Input checkpoint (default: <out>/pruned.ckpt).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Sharpness and stability measurements on a pruned checkpoint.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        measure: Measure,
        /// Input checkpoint (default: <out>/pruned.ckpt).
        #[arg(long)]
        from: Option<PathBuf>,
        /// Second prune.json whose mask trace is compared against <out>/prune.json.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Prunes at every γ of the grid and reports mask robust accuracy.
    SweepGamma {
        #[command(flatten)]
        common: Common,
    },
    /// Paired baseline and S2AP pipelines plus every report file.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct PruneSummary {
    mode: String,
    seed: u64,
    mask_clean_acc: f64,
    mask_robust_acc: f64,
    best_loss: f64,
    epoch_losses: Vec<f64>,
    lambda_max: Vec<f64>,
    hamming: Vec<f64>,
    trace: MaskTrace,
}

#[derive(Debug, Serialize, Deserialize)]
struct FinetuneSummary {
    seed: u64,
    clean_acc: f64,
    pgd50_acc: f64,
    epoch_losses: Vec<f64>,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    cfg.out = Some(common.out.clone());
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common } => {
            let cfg = load_config(&common)?;
            let seed = cfg.seeds[0];
            let data = load_dataset(&cfg.data)?;
            ensure_dir(&common.out)?;
            let net = pretrain_stage(&cfg, &data, seed)?;
            let path = common.out.join("pretrained.ckpt");
            Checkpoint::new(net, cfg.to_text()).save(&path)?;
            println!("wrote {}", path.display());
        }
        Command::Prune { common, mode, from } => {
            let mut cfg = load_config(&common)?;
            if let Some(mode) = mode {
                cfg.prune.mode = match mode {
                    Mode::Baseline => PruneMode::Baseline,
                    Mode::S2ap => PruneMode::S2ap,
                    Mode::Awp => PruneMode::AwpPrune,
                };
            }
            cfg.validate()?;
            let seed = cfg.seeds[0];
            let data = load_dataset(&cfg.data)?;
            ensure_dir(&common.out)?;
            let from = from.unwrap_or_else(|| common.out.join("pretrained.ckpt"));
            let mut net = if from.exists() {
                Checkpoint::load(&from)?.network
            } else if cfg.prune.rlth {
                pretrain_stage(&cfg, &data, seed)?
            } else {
                anyhow::bail!("{} not found; run `s2ap pretrain` first", from.display());
            };
            let outcome = prune_stage(&cfg, &data, &mut net, seed)?;
            let path = common.out.join("pruned.ckpt");
            Checkpoint::new(net.clone(), cfg.to_text()).save(&path)?;
            let (clean, robust) = evaluate_stage(&cfg, &data, &net, seed, "eval-mask")?;
            let summary = PruneSummary {
                mode: cfg.prune.mode.name().into(),
                seed,
                mask_clean_acc: clean,
                mask_robust_acc: robust,
                best_loss: outcome.best_loss,
                epoch_losses: outcome.epoch_losses,
                lambda_max: outcome.lambda_max,
                hamming: hamming_trace(&outcome.trace)?,
                trace: outcome.trace,
            };
            write_json(&common.out.join("prune.json"), &summary)?;
            println!(
                "{} mask: clean {:.2}%, robust {:.2}%; wrote {}",
                summary.mode,
                clean,
                robust,
                path.display()
            );
        }
        Command::Finetune { common, from } => {
            let cfg = load_config(&common)?;
            let seed = cfg.seeds[0];
            let data = load_dataset(&cfg.data)?;
            ensure_dir(&common.out)?;
            let from = from.unwrap_or_else(|| common.out.join("pruned.ckpt"));
            let mut net = Checkpoint::load(&from)?.network;
            let ft = finetune_stage(&cfg, &data, &mut net, seed)?;
            let path = common.out.join("finetuned.ckpt");
            Checkpoint::new(net.clone(), cfg.to_text()).save(&path)?;
            let (clean, robust) = evaluate_stage(&cfg, &data, &net, seed, "eval-final")?;
            write_json(
                &common.out.join("finetune.json"),
                &FinetuneSummary {
                    seed,
                    clean_acc: clean,
                    pgd50_acc: robust,
                    epoch_losses: ft.epoch_losses,
                },
            )?;
            println!("finetuned: clean {clean:.2}%, pgd50 {robust:.2}%; wrote {}", path.display());
        }
        Command::Diagnose {
            common,
            measure,
            from,
            compare,
        } => {
            let cfg = load_config(&common)?;
            let seed = cfg.seeds[0];
            ensure_dir(&common.out)?;
            match measure {
                Measure::Hamming => {
                    let own: PruneSummary = read_json(&common.out.join("prune.json"))?;
                    let h = hamming_trace(&own.trace)?;
                    let (header, rows): (&[&str], Vec<Vec<f64>>) = match compare {
                        Some(other) => {
                            let other: PruneSummary = read_json(&other)?;
                            let h2 = hamming_trace(&other.trace)?;
                            let diff = s2ap::diagnostics::paired_difference(&h, &h2)?;
                            (
                                &["epoch", "h_orig", "h_s2ap", "diff"],
                                (0..h.len()).map(|i| vec![(i + 1) as f64, h[i], h2[i], diff[i]]).collect(),
                            )
                        }
                        None => (&["epoch", "h"], h.iter().enumerate().map(|(i, v)| vec![(i + 1) as f64, *v]).collect()),
                    };
                    write_text(&common.out.join("hamming.csv"), &csv_text(header, &rows))?;
                }
                Measure::Lambda | Measure::Lossdiff => {
                    let data = load_dataset(&cfg.data)?;
                    let from = from.unwrap_or_else(|| common.out.join("pruned.ckpt"));
                    let net = Checkpoint::load(&from)?.network;
                    let batch = data.subset(Split::Test)?.head(cfg.diagnostics.probe_samples.max(1));
                    if let Measure::Lambda = measure {
                        let masks = net.stored_masks();
                        let view = net.finetune_view(false);
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "lambda"));
                        let x_adv = adversarial_examples(&view, &batch, cfg.loss, &cfg.attack, &mut rng)?;
                        let objective = SurrogateObjective::new(&net, &masks, &batch, &x_adv, cfg.loss);
                        let est = lambda_max(
                            &objective,
                            &net.prunable_scores_flat(),
                            cfg.prune.lambda_iterations,
                            derive_seed(seed, "lambda-start"),
                        )?;
                        write_json(&common.out.join("lambda.json"), &est)?;
                        println!("lambda_max {:.6} (flat: {})", est.value, est.flat);
                    } else {
                        let ld = LossDiffConfig {
                            seed: derive_seed(seed, "lossdiff"),
                            ..cfg.diagnostics.loss_diff
                        };
                        let mut probe = LossDiffProbe::new(&net, &batch, cfg.loss, &cfg.attack, ld.seed)?;
                        let grid = probe.grid(&cfg.diagnostics.rho_grid, &ld)?;
                        let rows: Vec<Vec<f64>> = grid.iter().map(|(r, v)| vec![*r, *v]).collect();
                        write_text(&common.out.join("sharpness.csv"), &csv_text(&["rho", "value"], &rows))?;
                    }
                }
            }
        }
        Command::SweepGamma { common } => {
            let cfg = load_config(&common)?;
            let sweep = sweep_gamma(&cfg, &cfg.gamma_grid)?;
            emit_gamma_sweep(&sweep, &common.out)?;
            println!("best gamma {}", sweep.best_gamma);
        }
        Command::Report { common } => {
            let cfg = load_config(&common)?;
            let paired = run_paired(&cfg)?;
            emit_report(&[paired.baseline.clone(), paired.s2ap.clone()], Some(&paired.diff), &common.out)?;
            println!(
                "mask robust accuracy: baseline {:.2} ± {:.2}, s2ap {:.2} ± {:.2}",
                paired.baseline.mask_robust_acc.mean,
                paired.baseline.mask_robust_acc.std,
                paired.s2ap.mask_robust_acc.mean,
                paired.s2ap.mask_robust_acc.std
            );
        }
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
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
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.chain().any(|c| c.downcast_ref::<s2ap::Error>().is_some_and(|e| e.is_validation()));
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}
