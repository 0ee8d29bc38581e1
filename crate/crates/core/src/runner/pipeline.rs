//! Pretrain → prune → mask evaluation → finetune → final evaluation.
//!
//! Every stage draws from its own RNG stream derived from the run seed, so a
//! baseline and an S2AP run on the same seed see the same pretrained network,
//! the same minibatch order and the same attack randomness until their score
//! updates diverge.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::evaluate;
use crate::checkpoint::Checkpoint;
use crate::data::{gen_two_moons, idx_to_dataset, parse_idx_images, parse_idx_labels, Dataset, Split};
use crate::diagnostics::{hamming_trace, paired_difference, LossDiffConfig, LossDiffProbe, MaskTrace, SharpnessReport};
use crate::error::{Error, Result};
use crate::finetune::{finetune, pretrain, FinetuneOutcome};
use crate::model::Network;
use crate::pruner::{prune, PruneMode, PruneOutcome};

use super::config::{DataSpec, RunConfig};

/// Per-stage RNG seed derived from the run seed (SplitMix64 finaliser over a
/// stage tag).
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let tag = stage
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    let mut z = seed.wrapping_add(tag).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(spec: &DataSpec) -> Result<Dataset> {
    match spec {
        DataSpec::TwoMoons { n, noise, seed } => gen_two_moons(*n, *noise, *seed),
        DataSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = idx_to_dataset(
                &parse_idx_images(&read(train_images)?)?,
                &parse_idx_labels(&read(train_labels)?)?,
                Split::Train,
            )?;
            let test = idx_to_dataset(
                &parse_idx_images(&read(test_images)?)?,
                &parse_idx_labels(&read(test_labels)?)?,
                Split::Test,
            )?;
            if train.dim() != test.dim() {
                return Err(Error::Length(format!(
                    "train images have {} pixels, test images {}",
                    train.dim(),
                    test.dim()
                )));
            }
            let (a, b) = (train.all(), test.all());
            let mut x = a.x.into_data();
            x.extend_from_slice(b.x.data());
            let n = a.y.len() + b.y.len();
            let mut y = a.y;
            y.extend(b.y);
            let mut split = vec![Split::Train; train.len()];
            split.extend(vec![Split::Test; test.len()]);
            Dataset::new(
                crate::autodiff::Tensor::new(vec![n, train.dim()], x)?,
                y,
                train.classes().max(test.classes()),
                split,
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Clean accuracy of the final model, percent.
    pub clean_acc: f64,
    /// Robust accuracy of the final model under the evaluation attack.
    pub pgd50_acc: f64,
    /// Robust accuracy of the pruned model before finetuning.
    pub mask_robust_acc: f64,
    pub mask_clean_acc: f64,
    pub best_prune_loss: f64,
    pub prune_epoch_losses: Vec<f64>,
    pub finetune_epoch_losses: Vec<f64>,
    pub lambda_max: Vec<f64>,
    pub hamming: Vec<f64>,
    pub loss_diff: Vec<(f64, f64)>,
    pub trace: MaskTrace,
    pub stages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub label: String,
    pub clean_acc: Summary,
    pub pgd50_acc: Summary,
    pub mask_robust_acc: Summary,
    /// Seed-averaged diagnostics.
    pub sharpness: SharpnessReport,
    pub hamming: Vec<f64>,
    pub seeds: Vec<SeedResult>,
}

fn mean_series(series: &[&[f64]]) -> Vec<f64> {
    let len = series.iter().map(|s| s.len()).min().unwrap_or(0);
    (0..len)
        .map(|i| series.iter().map(|s| s[i]).sum::<f64>() / series.len() as f64)
        .collect()
}

impl ExperimentResult {
    pub fn from_seeds(label: &str, config_text: &str, seeds: Vec<SeedResult>) -> Self {
        let pick = |f: fn(&SeedResult) -> f64| Summary::of(&seeds.iter().map(f).collect::<Vec<_>>());
        let lambda = mean_series(&seeds.iter().map(|s| s.lambda_max.as_slice()).collect::<Vec<_>>());
        let hamming = mean_series(&seeds.iter().map(|s| s.hamming.as_slice()).collect::<Vec<_>>());
        let loss_diff = seeds
            .first()
            .map(|first| {
                first
                    .loss_diff
                    .iter()
                    .enumerate()
                    .map(|(i, &(rho, _))| {
                        let vals: Vec<f64> = seeds.iter().map(|s| s.loss_diff[i].1).collect();
                        (rho, vals.iter().sum::<f64>() / vals.len() as f64)
                    })
                    .collect()
            })
            .unwrap_or_default();
        Self {
            label: label.to_string(),
            clean_acc: pick(|s| s.clean_acc),
            pgd50_acc: pick(|s| s.pgd50_acc),
            mask_robust_acc: pick(|s| s.mask_robust_acc),
            sharpness: SharpnessReport {
                label: label.to_string(),
                lambda_max: lambda,
                loss_diff,
                hamming: hamming.clone(),
                maximizer: "pgd".into(),
                config: config_text.to_string(),
            },
            hamming,
            seeds,
        }
    }
}

fn timed<T>(stage: &'static str, seed: u64, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| e.in_stage(stage));
    log::info!("seed {seed}: {stage} took {:.2?}", start.elapsed());
    out
}

fn seed_dir(cfg: &RunConfig, label: &str, seed: u64) -> Result<Option<PathBuf>> {
    let Some(out) = &cfg.out else { return Ok(None) };
    let dir = out.join(label).join(format!("seed{seed}"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(Some(dir))
}

/// Freshly initialised network for `seed`.
pub fn init_network(cfg: &RunConfig, data: &Dataset, seed: u64) -> Result<Network> {
    let mut dims = vec![data.dim()];
    dims.extend(&cfg.hidden);
    dims.push(data.classes());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init"));
    Network::new(&dims, &mut rng)
}

/// Dense adversarial pretraining; skipped (random init returned) in RLTH mode.
pub fn pretrain_stage(cfg: &RunConfig, data: &Dataset, seed: u64) -> Result<Network> {
    let mut net = init_network(cfg, data, seed)?;
    if cfg.prune.rlth {
        return Ok(net);
    }
    let train = data.subset(Split::Train)?;
    let pcfg = crate::finetune::PretrainConfig {
        seed: derive_seed(seed, "pretrain"),
        loss_kind: cfg.loss,
        ..cfg.pretrain.clone()
    };
    timed("pretrain", seed, || pretrain(&mut net, &train, &pcfg, &cfg.attack))?;
    Ok(net)
}

/// Score initialisation plus the mask search selected by `cfg.prune.mode`.
pub fn prune_stage(cfg: &RunConfig, data: &Dataset, net: &mut Network, seed: u64) -> Result<PruneOutcome> {
    let train = data.subset(Split::Train)?;
    let pcfg = crate::pruner::PruneConfig {
        seed: derive_seed(seed, "prune"),
        loss_kind: cfg.loss,
        ..cfg.prune.clone()
    };
    timed("prune", seed, || {
        net.ranking = pcfg.ranking;
        net.apply_sparsity(pcfg.sparsity, pcfg.exempt)?;
        net.init_scores();
        prune(net, &train, &pcfg, &cfg.attack)
    })
}

pub fn finetune_stage(cfg: &RunConfig, data: &Dataset, net: &mut Network, seed: u64) -> Result<FinetuneOutcome> {
    let train = data.subset(Split::Train)?;
    let fcfg = crate::finetune::FinetuneConfig {
        seed: derive_seed(seed, "finetune"),
        loss_kind: cfg.loss,
        ..cfg.finetune.clone()
    };
    timed("finetune", seed, || finetune(net, &train, &fcfg, &cfg.attack))
}

/// `(clean, robust)` accuracy of the masked network on the test split.
pub fn evaluate_stage(cfg: &RunConfig, data: &Dataset, net: &Network, seed: u64, tag: &str) -> Result<(f64, f64)> {
    let test = data.subset(Split::Test)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag));
    let acc = timed("evaluate", seed, || evaluate(&net.finetune_view(false), &test.all(), &cfg.eval, &mut rng))?;
    Ok((acc.clean, acc.robust))
}

/// Loss-difference sharpness of the pruned scores on the first test samples.
pub fn loss_diff_stage(cfg: &RunConfig, data: &Dataset, net: &Network, seed: u64) -> Result<Vec<(f64, f64)>> {
    if cfg.diagnostics.rho_grid.is_empty() {
        return Ok(Vec::new());
    }
    let test = data.subset(Split::Test)?;
    let batch = test.head(cfg.diagnostics.probe_samples.max(1));
    let ld = LossDiffConfig {
        seed: derive_seed(seed, "lossdiff"),
        ..cfg.diagnostics.loss_diff
    };
    timed("diagnose", seed, || {
        let mut probe = LossDiffProbe::new(net, &batch, cfg.loss, &cfg.attack, ld.seed)?;
        probe.grid(&cfg.diagnostics.rho_grid, &ld)
    })
}

fn save(dir: &Option<PathBuf>, name: &str, net: &Network, cfg: &RunConfig) -> Result<()> {
    if let Some(dir) = dir {
        Checkpoint::new(net.clone(), cfg.to_text()).save(&dir.join(name))?;
    }
    Ok(())
}

/// One seed of the pipeline starting from an already pretrained network.
pub fn run_seed_from(cfg: &RunConfig, data: &Dataset, pretrained: &Network, seed: u64) -> Result<SeedResult> {
    let label = cfg.prune.mode.name();
    let dir = seed_dir(cfg, label, seed)?;
    let mut stages = Vec::new();
    if !cfg.prune.rlth {
        stages.push("pretrain".to_string());
        save(&dir, "pretrained.ckpt", pretrained, cfg)?;
    }

    let mut net = pretrained.clone();
    let outcome = prune_stage(cfg, data, &mut net, seed)?;
    stages.push("prune".into());
    save(&dir, "pruned.ckpt", &net, cfg)?;
    let (mask_clean, mask_robust) = evaluate_stage(cfg, data, &net, seed, "eval-mask")?;
    stages.push("evaluate".into());
    let loss_diff = loss_diff_stage(cfg, data, &net, seed)?;
    let hamming = hamming_trace(&outcome.trace).map_err(|e| e.in_stage("diagnose"))?;

    let (clean, robust, ft_losses) = if cfg.prune.rlth {
        (mask_clean, mask_robust, Vec::new())
    } else {
        let ft = finetune_stage(cfg, data, &mut net, seed)?;
        stages.push("finetune".into());
        save(&dir, "finetuned.ckpt", &net, cfg)?;
        let (c, r) = evaluate_stage(cfg, data, &net, seed, "eval-final")?;
        stages.push("evaluate".into());
        (c, r, ft.epoch_losses)
    };

    Ok(SeedResult {
        seed,
        clean_acc: clean,
        pgd50_acc: robust,
        mask_robust_acc: mask_robust,
        mask_clean_acc: mask_clean,
        best_prune_loss: outcome.best_loss,
        prune_epoch_losses: outcome.epoch_losses,
        finetune_epoch_losses: ft_losses,
        lambda_max: outcome.lambda_max,
        hamming,
        loss_diff,
        trace: outcome.trace,
        stages,
    })
}

/// Runs the full pipeline for every configured seed.
pub fn run_pipeline(cfg: &RunConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let data = load_dataset(&cfg.data)?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let pre = pretrain_stage(cfg, &data, seed)?;
        seeds.push(run_seed_from(cfg, &data, &pre, seed)?);
    }
    Ok(ExperimentResult::from_seeds(cfg.prune.mode.name(), &cfg.to_text(), seeds))
}

/// Baseline and S2AP runs sharing one pretrained network per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedResult {
    pub baseline: ExperimentResult,
    pub s2ap: ExperimentResult,
    pub diff: PairedDiff,
}

/// `s2ap − baseline` for accuracies; `baseline − s2ap` for the stability and
/// sharpness series, so positive values favour S2AP throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDiff {
    pub mask_robust_acc: Vec<f64>,
    pub pgd50_acc: Vec<f64>,
    pub clean_acc: Vec<f64>,
    pub hamming: Vec<f64>,
    pub lambda_max: Vec<f64>,
    pub loss_diff: Vec<(f64, f64)>,
}

pub fn paired_diff(baseline: &ExperimentResult, s2ap: &ExperimentResult) -> Result<PairedDiff> {
    let per_seed = |f: fn(&SeedResult) -> f64| -> Result<Vec<f64>> {
        let a: Vec<f64> = s2ap.seeds.iter().map(f).collect();
        let b: Vec<f64> = baseline.seeds.iter().map(f).collect();
        paired_difference(&a, &b)
    };
    let ld_b: Vec<f64> = baseline.sharpness.loss_diff.iter().map(|p| p.1).collect();
    let ld_s: Vec<f64> = s2ap.sharpness.loss_diff.iter().map(|p| p.1).collect();
    Ok(PairedDiff {
        mask_robust_acc: per_seed(|s| s.mask_robust_acc)?,
        pgd50_acc: per_seed(|s| s.pgd50_acc)?,
        clean_acc: per_seed(|s| s.clean_acc)?,
        hamming: paired_difference(&baseline.hamming, &s2ap.hamming)?,
        lambda_max: paired_difference(&baseline.sharpness.lambda_max, &s2ap.sharpness.lambda_max)?,
        loss_diff: baseline
            .sharpness
            .loss_diff
            .iter()
            .map(|p| p.0)
            .zip(paired_difference(&ld_b, &ld_s)?)
            .collect(),
    })
}

pub fn run_paired(cfg: &RunConfig) -> Result<PairedResult> {
    cfg.validate()?;
    let data = load_dataset(&cfg.data)?;
    let base_cfg = RunConfig {
        prune: crate::pruner::PruneConfig {
            mode: PruneMode::Baseline,
            ..cfg.prune.clone()
        },
        ..cfg.clone()
    };
    let s2ap_cfg = RunConfig {
        prune: crate::pruner::PruneConfig {
            mode: PruneMode::S2ap,
            ..cfg.prune.clone()
        },
        ..cfg.clone()
    };
    let (mut b, mut s) = (Vec::new(), Vec::new());
    for &seed in &cfg.seeds {
        let pre = pretrain_stage(cfg, &data, seed)?;
        b.push(run_seed_from(&base_cfg, &data, &pre, seed)?);
        s.push(run_seed_from(&s2ap_cfg, &data, &pre, seed)?);
    }
    let baseline = ExperimentResult::from_seeds("baseline", &base_cfg.to_text(), b);
    let s2ap = ExperimentResult::from_seeds("s2ap", &s2ap_cfg.to_text(), s);
    let diff = paired_diff(&baseline, &s2ap)?;
    Ok(PairedResult { baseline, s2ap, diff })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub gamma: f64,
    pub mask_robust_acc: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSweep {
    pub best_gamma: f64,
    pub rows: Vec<GammaRow>,
}

/// Index of the best accuracy; ties go to the smaller γ.
pub fn select_gamma(rows: &[GammaRow]) -> Option<f64> {
    rows.iter()
        .fold(None::<&GammaRow>, |best, r| match best {
            Some(b)
                if b.mask_robust_acc.mean > r.mask_robust_acc.mean
                    || (b.mask_robust_acc.mean == r.mask_robust_acc.mean && b.gamma <= r.gamma) =>
            {
                Some(b)
            }
            _ => Some(r),
        })
        .map(|r| r.gamma)
}

/// Prunes with S2AP at every γ of the grid and picks the one with the highest
/// mean mask robust accuracy.
pub fn sweep_gamma(cfg: &RunConfig, grid: &[f64]) -> Result<GammaSweep> {
    if grid.is_empty() {
        return Err(Error::Config("gamma grid is empty".into()));
    }
    cfg.validate()?;
    let data = load_dataset(&cfg.data)?;
    let pretrained: Vec<(u64, Network)> = cfg
        .seeds
        .iter()
        .map(|&s| pretrain_stage(cfg, &data, s).map(|n| (s, n)))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(grid.len());
    for &gamma in grid {
        let gcfg = RunConfig {
            prune: crate::pruner::PruneConfig {
                gamma,
                mode: PruneMode::S2ap,
                ..cfg.prune.clone()
            },
            ..cfg.clone()
        };
        gcfg.validate()?;
        let mut accs = Vec::new();
        for (seed, pre) in &pretrained {
            let mut net = pre.clone();
            prune_stage(&gcfg, &data, &mut net, *seed)?;
            accs.push(evaluate_stage(&gcfg, &data, &net, *seed, "eval-mask")?.1);
        }
        log::info!("gamma {gamma}: mask robust accuracy {:?}", Summary::of(&accs));
        rows.push(GammaRow {
            gamma,
            mask_robust_acc: Summary::of(&accs),
        });
    }
    let best_gamma = select_gamma(&rows).expect("grid is nonempty");
    Ok(GammaSweep { best_gamma, rows })
}
