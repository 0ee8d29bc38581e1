//! Flat `section.key = value` run configuration.
//!
//! Blank lines and everything after `#` are ignored. Lists are comma
//! separated. Unknown keys are rejected. [`RunConfig::to_text`] renders every
//! key, and parsing that text reproduces the configuration exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, EvalConfig};
use crate::diagnostics::{LossDiffConfig, DEFAULT_RHO_GRID};
use crate::error::{Error, Result};
use crate::finetune::{FinetuneConfig, FinetuneMode, PretrainConfig};
use crate::losses::LossKind;
use crate::model::Ranking;
use crate::pruner::{BestTracking, PruneConfig, PruneMode};

/// Hidden widths used for IDX image data unless `model.hidden` is given.
pub const IDX_HIDDEN: [usize; 2] = [128, 64];

pub const DEFAULT_GAMMA_GRID: [f64; 6] = [0.00075, 0.001, 0.0025, 0.005, 0.0075, 0.01];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    TwoMoons {
        n: usize,
        noise: f64,
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::TwoMoons {
            n: 600,
            noise: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsConfig {
    pub rho_grid: Vec<f64>,
    pub loss_diff: LossDiffConfig,
    /// Test samples used by the loss-difference probe.
    pub probe_samples: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            rho_grid: DEFAULT_RHO_GRID.to_vec(),
            loss_diff: LossDiffConfig::default(),
            probe_samples: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSpec,
    pub hidden: Vec<usize>,
    pub loss: LossKind,
    pub pretrain: PretrainConfig,
    pub prune: PruneConfig,
    pub finetune: FinetuneConfig,
    pub attack: AttackConfig,
    pub eval: EvalConfig,
    pub diagnostics: DiagnosticsConfig,
    pub gamma_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSpec::default(),
            hidden: vec![32, 32],
            loss: LossKind::default(),
            pretrain: PretrainConfig::default(),
            prune: PruneConfig {
                lambda_samples: 4,
                ..PruneConfig::default()
            },
            finetune: FinetuneConfig::default(),
            attack: AttackConfig::default(),
            eval: EvalConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            gamma_grid: DEFAULT_GAMMA_GRID.to_vec(),
            seeds: vec![0],
            out: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|t| parse_num(key, t.trim())).collect()
}

fn list<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ")
}

fn list_f(items: &[f64]) -> String {
    items.iter().map(|i| format!("{i:?}")).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut beta = match cfg.loss {
            LossKind::Trades { beta } => beta,
            _ => crate::losses::DEFAULT_TRADES_BETA,
        };
        let mut loss_name = cfg.loss.name().to_string();
        let mut idx = [None, None, None, None];
        let mut moons = (600usize, 0.1f64, 0u64);
        let mut data_kind = "two_moons".to_string();
        let mut hidden_set = false;

        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = key;
            match key {
                "data.kind" => data_kind = value.to_string(),
                "data.n" => moons.0 = parse_num(k, value)?,
                "data.noise" => moons.1 = parse_num(k, value)?,
                "data.seed" => moons.2 = parse_num(k, value)?,
                "data.train_images" => idx[0] = Some(PathBuf::from(value)),
                "data.train_labels" => idx[1] = Some(PathBuf::from(value)),
                "data.test_images" => idx[2] = Some(PathBuf::from(value)),
                "data.test_labels" => idx[3] = Some(PathBuf::from(value)),
                "model.hidden" => {
                    cfg.hidden = parse_list(k, value)?;
                    hidden_set = true;
                }
                "loss.kind" => loss_name = value.to_string(),
                "loss.beta" => beta = parse_num(k, value)?,
                "pretrain.epochs" => cfg.pretrain.epochs = parse_num(k, value)?,
                "pretrain.lr" => cfg.pretrain.lr = parse_num(k, value)?,
                "pretrain.momentum" => cfg.pretrain.momentum = parse_num(k, value)?,
                "pretrain.batch_size" => cfg.pretrain.batch_size = parse_num(k, value)?,
                "prune.sparsity" => cfg.prune.sparsity = parse_num(k, value)?,
                "prune.gamma" => cfg.prune.gamma = parse_num(k, value)?,
                "prune.eta" => cfg.prune.eta = parse_num(k, value)?,
                "prune.epochs" => cfg.prune.epochs = parse_num(k, value)?,
                "prune.warmup_epochs" => cfg.prune.warmup_epochs = parse_num(k, value)?,
                "prune.batch_size" => cfg.prune.batch_size = parse_num(k, value)?,
                "prune.rlth" => cfg.prune.rlth = parse_bool(k, value)?,
                "prune.exempt_first" => cfg.prune.exempt.first = parse_bool(k, value)?,
                "prune.exempt_last" => cfg.prune.exempt.last = parse_bool(k, value)?,
                "prune.lambda_samples" => cfg.prune.lambda_samples = parse_num(k, value)?,
                "prune.lambda_iterations" => cfg.prune.lambda_iterations = parse_num(k, value)?,
                "prune.mode" => {
                    cfg.prune.mode = match value {
                        "baseline" => PruneMode::Baseline,
                        "s2ap" => PruneMode::S2ap,
                        "awp" => PruneMode::AwpPrune,
                        _ => return Err(Error::Config(format!("{k}: unknown mode {value:?}"))),
                    }
                }
                "prune.best_tracking" => {
                    cfg.prune.best_tracking = match value {
                        "epoch" => BestTracking::Epoch,
                        "iteration" => BestTracking::Iteration,
                        _ => return Err(Error::Config(format!("{k}: unknown tracking {value:?}"))),
                    }
                }
                "prune.ranking" => {
                    cfg.prune.ranking = match value {
                        "magnitude" => Ranking::Magnitude,
                        "signed" => Ranking::Signed,
                        _ => return Err(Error::Config(format!("{k}: unknown ranking {value:?}"))),
                    }
                }
                "finetune.epochs" => cfg.finetune.epochs = parse_num(k, value)?,
                "finetune.eta" => cfg.finetune.eta = parse_num(k, value)?,
                "finetune.gamma" => cfg.finetune.gamma = parse_num(k, value)?,
                "finetune.batch_size" => cfg.finetune.batch_size = parse_num(k, value)?,
                "finetune.step_decay" => cfg.finetune.step_decay = parse_bool(k, value)?,
                "finetune.mode" => {
                    cfg.finetune.mode = match value {
                        "standard" => FinetuneMode::Standard,
                        "s2ap_awp" => FinetuneMode::S2apAwp,
                        _ => return Err(Error::Config(format!("{k}: unknown mode {value:?}"))),
                    }
                }
                "attack.epsilon" => cfg.attack.epsilon = parse_num(k, value)?,
                "attack.alpha" => cfg.attack.alpha = parse_num(k, value)?,
                "attack.steps" => cfg.attack.steps = parse_num(k, value)?,
                "attack.random_start" => cfg.attack.random_start = parse_bool(k, value)?,
                "attack.clamp_lo" => cfg.attack.clamp_lo = parse_num(k, value)?,
                "attack.clamp_hi" => cfg.attack.clamp_hi = parse_num(k, value)?,
                "eval.epsilon" => cfg.eval.attack.epsilon = parse_num(k, value)?,
                "eval.alpha" => cfg.eval.attack.alpha = parse_num(k, value)?,
                "eval.steps" => cfg.eval.attack.steps = parse_num(k, value)?,
                "eval.restarts" => cfg.eval.restarts = parse_num(k, value)?,
                "diagnostics.rho" => cfg.diagnostics.rho_grid = parse_list(k, value)?,
                "diagnostics.steps" => cfg.diagnostics.loss_diff.steps = parse_num(k, value)?,
                "diagnostics.restarts" => cfg.diagnostics.loss_diff.restarts = parse_num(k, value)?,
                "diagnostics.probe_samples" => cfg.diagnostics.probe_samples = parse_num(k, value)?,
                "run.gamma_grid" => cfg.gamma_grid = parse_list(k, value)?,
                "run.seeds" => cfg.seeds = parse_list(k, value)?,
                "run.out" => cfg.out = Some(PathBuf::from(value)),
                _ => return Err(Error::Config(format!("line {}: unknown key {key:?}", n + 1))),
            }
        }

        cfg.loss = match loss_name.as_str() {
            "trades" => LossKind::Trades { beta },
            "pgd_at" => LossKind::PgdAt,
            "clean_ce" => LossKind::CleanCe,
            other => return Err(Error::Config(format!("loss.kind: unknown loss {other:?}"))),
        };
        cfg.data = match data_kind.as_str() {
            "two_moons" => DataSpec::TwoMoons {
                n: moons.0,
                noise: moons.1,
                seed: moons.2,
            },
            "idx" => {
                if !hidden_set {
                    cfg.hidden = IDX_HIDDEN.to_vec();
                }
                let [Some(a), Some(b), Some(c), Some(d)] = idx else {
                    return Err(Error::Config(
                        "data.kind = idx needs data.train_images, data.train_labels, data.test_images and data.test_labels"
                            .into(),
                    ));
                };
                DataSpec::Idx {
                    train_images: a,
                    train_labels: b,
                    test_images: c,
                    test_labels: d,
                }
            }
            other => return Err(Error::Config(format!("data.kind: unknown dataset {other:?}"))),
        };
        cfg.sync_loss();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Copies the shared loss into every stage.
    pub fn sync_loss(&mut self) {
        self.pretrain.loss_kind = self.loss;
        self.prune.loss_kind = self.loss;
        self.finetune.loss_kind = self.loss;
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("run.seeds must not be empty".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("model.hidden widths must be >= 1".into()));
        }
        if self.gamma_grid.is_empty() {
            return Err(Error::Config("run.gamma_grid must not be empty".into()));
        }
        if self.gamma_grid.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::Config("run.gamma_grid values must be > 0".into()));
        }
        if self.diagnostics.rho_grid.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(Error::Config("diagnostics.rho values must be >= 0".into()));
        }
        if let DataSpec::TwoMoons { n, noise, .. } = self.data {
            if n < 10 || n % 2 != 0 {
                return Err(Error::Config(format!("data.n = {n} must be even and >= 10")));
            }
            if !(noise >= 0.0 && noise.is_finite()) {
                return Err(Error::Config(format!("data.noise = {noise} must be >= 0")));
            }
        }
        self.loss.validate()?;
        self.pretrain.validate()?;
        self.prune.validate()?;
        self.finetune.validate()?;
        self.attack.validate()?;
        self.eval.attack.validate()?;
        if self.eval.restarts == 0 {
            return Err(Error::Config("eval.restarts must be >= 1".into()));
        }
        Ok(())
    }

    /// Every key, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        match &self.data {
            DataSpec::TwoMoons { n, noise, seed } => {
                kv("data.kind", "two_moons".into());
                kv("data.n", n.to_string());
                kv("data.noise", format!("{noise:?}"));
                kv("data.seed", seed.to_string());
            }
            DataSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                kv("data.kind", "idx".into());
                kv("data.train_images", train_images.display().to_string());
                kv("data.train_labels", train_labels.display().to_string());
                kv("data.test_images", test_images.display().to_string());
                kv("data.test_labels", test_labels.display().to_string());
            }
        }
        kv("model.hidden", list(&self.hidden));
        kv("loss.kind", self.loss.name().into());
        if let LossKind::Trades { beta } = self.loss {
            kv("loss.beta", format!("{beta:?}"));
        }
        let p = &self.pretrain;
        kv("pretrain.epochs", p.epochs.to_string());
        kv("pretrain.lr", format!("{:?}", p.lr));
        kv("pretrain.momentum", format!("{:?}", p.momentum));
        kv("pretrain.batch_size", p.batch_size.to_string());
        let p = &self.prune;
        kv("prune.mode", p.mode.name().into());
        kv("prune.sparsity", format!("{:?}", p.sparsity));
        kv("prune.gamma", format!("{:?}", p.gamma));
        kv("prune.eta", format!("{:?}", p.eta));
        kv("prune.epochs", p.epochs.to_string());
        kv("prune.warmup_epochs", p.warmup_epochs.to_string());
        kv("prune.batch_size", p.batch_size.to_string());
        kv(
            "prune.best_tracking",
            match p.best_tracking {
                BestTracking::Epoch => "epoch",
                BestTracking::Iteration => "iteration",
            }
            .into(),
        );
        kv(
            "prune.ranking",
            match p.ranking {
                Ranking::Magnitude => "magnitude",
                Ranking::Signed => "signed",
            }
            .into(),
        );
        kv("prune.rlth", p.rlth.to_string());
        kv("prune.exempt_first", p.exempt.first.to_string());
        kv("prune.exempt_last", p.exempt.last.to_string());
        kv("prune.lambda_samples", p.lambda_samples.to_string());
        kv("prune.lambda_iterations", p.lambda_iterations.to_string());
        let f = &self.finetune;
        kv(
            "finetune.mode",
            match f.mode {
                FinetuneMode::Standard => "standard",
                FinetuneMode::S2apAwp => "s2ap_awp",
            }
            .into(),
        );
        kv("finetune.epochs", f.epochs.to_string());
        kv("finetune.eta", format!("{:?}", f.eta));
        kv("finetune.gamma", format!("{:?}", f.gamma));
        kv("finetune.batch_size", f.batch_size.to_string());
        kv("finetune.step_decay", f.step_decay.to_string());
        let a = &self.attack;
        kv("attack.epsilon", format!("{:?}", a.epsilon));
        kv("attack.alpha", format!("{:?}", a.alpha));
        kv("attack.steps", a.steps.to_string());
        kv("attack.random_start", a.random_start.to_string());
        kv("attack.clamp_lo", format!("{:?}", a.clamp_lo));
        kv("attack.clamp_hi", format!("{:?}", a.clamp_hi));
        let e = &self.eval;
        kv("eval.epsilon", format!("{:?}", e.attack.epsilon));
        kv("eval.alpha", format!("{:?}", e.attack.alpha));
        kv("eval.steps", e.attack.steps.to_string());
        kv("eval.restarts", e.restarts.to_string());
        let d = &self.diagnostics;
        kv("diagnostics.rho", list_f(&d.rho_grid));
        kv("diagnostics.steps", d.loss_diff.steps.to_string());
        kv("diagnostics.restarts", d.loss_diff.restarts.to_string());
        kv("diagnostics.probe_samples", d.probe_samples.to_string());
        kv("run.gamma_grid", list_f(&self.gamma_grid));
        kv("run.seeds", list(&self.seeds));
        if let Some(out) = &self.out {
            kv("run.out", out.display().to_string());
        }
        o
    }
}
