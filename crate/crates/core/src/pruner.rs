//! Score-based mask search.
//!
//! All three modes share one loop over minibatches: craft adversarial inputs on
//! the currently masked model, evaluate the robust loss at the current scores,
//! then take a globally-normalised descent step on the scores. They differ in
//! where that descent gradient is evaluated:
//!
//! * `Baseline` at the scores themselves;
//! * `S2ap` at `scores + z`, where `z` is a single normalised ascent step in
//!   score space projected layer-wise onto `‖z_l‖ ≤ γ‖s_l‖`;
//! * `AwpPrune` at weights `w + ν`, with the ascent/projection done in weight
//!   space instead (`‖ν_l‖ ≤ γ‖w_l‖`).
//!
//! Perturbations start from zero every iteration and only become active after
//! the warm-up epochs. Weights are never written by any mode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::autodiff::{l2_norm, Tensor};
use crate::data::{Batch, Dataset};
use crate::diagnostics::{lambda_max, MaskTrace, PackedMask, SurrogateObjective};
use crate::error::{Error, Result};
use crate::losses::{adversarial_examples, loss_with_grads, LossKind};
use crate::model::{Exemptions, Network, ParamView, Ranking, ScoreSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    Baseline,
    #[default]
    S2ap,
    AwpPrune,
}

impl PruneMode {
    pub fn name(&self) -> &'static str {
        match self {
            PruneMode::Baseline => "baseline",
            PruneMode::S2ap => "s2ap",
            PruneMode::AwpPrune => "awp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BestTracking {
    /// Per-iteration batch loss at the pre-update scores.
    Iteration,
    /// Epoch-mean robust loss, scores snapshotted at epoch end.
    #[default]
    Epoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub sparsity: f64,
    pub gamma: f64,
    pub eta: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub mode: PruneMode,
    pub best_tracking: BestTracking,
    pub rlth: bool,
    pub loss_kind: LossKind,
    pub seed: u64,
    pub batch_size: usize,
    pub ranking: Ranking,
    pub exempt: Exemptions,
    /// Iterations per epoch at which λ_max is measured (0 disables).
    pub lambda_samples: usize,
    pub lambda_iterations: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            sparsity: 0.9,
            gamma: 0.00075,
            eta: 0.1,
            epochs: 20,
            warmup_epochs: 5,
            mode: PruneMode::S2ap,
            best_tracking: BestTracking::Epoch,
            rlth: false,
            loss_kind: LossKind::default(),
            seed: 0,
            batch_size: 64,
            ranking: Ranking::Magnitude,
            exempt: Exemptions::default(),
            lambda_samples: 0,
            lambda_iterations: 10,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("prune epochs must be >= 1".into());
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "warm-up epochs {} exceed total epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.mode != PruneMode::Baseline && !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma {} must be > 0 for {}", self.gamma, self.mode.name()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("prune eta {} must be > 0", self.eta));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return bad(format!("sparsity {} outside [0, 1)", self.sparsity));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        self.loss_kind.validate()
    }
}

/// Global L2 norm over a set of per-layer vectors.
pub fn global_norm(parts: &[Vec<f64>]) -> f64 {
    parts.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales `perturbation[l]` onto `‖·‖ ≤ gamma·reference_norms[l]` when it
/// exceeds the bound; returns which layers were rescaled.
pub fn project_layerwise(perturbation: &mut [Vec<f64>], reference_norms: &[f64], gamma: f64) -> Vec<bool> {
    perturbation
        .iter_mut()
        .zip(reference_norms)
        .map(|(p, &r)| {
            let bound = gamma * r;
            let norm = l2_norm(p);
            if norm > bound {
                let scale = bound / norm;
                p.iter_mut().for_each(|v| *v *= scale);
                true
            } else {
                false
            }
        })
        .collect()
}

/// `eta * g / ‖g‖` with the norm taken globally; `None` if the gradient vanishes.
fn normalized_step(grads: &[Vec<f64>], eta: f64) -> Option<Vec<Vec<f64>>> {
    let norm = global_norm(grads);
    if norm <= 0.0 || !norm.is_finite() {
        return None;
    }
    Some(
        grads
            .iter()
            .map(|g| g.iter().map(|v| eta * v / norm).collect())
            .collect(),
    )
}

/// A minibatch whose adversarial inputs were already crafted.
#[derive(Debug, Clone)]
pub struct AdvBatch {
    pub batch: Batch,
    pub x_adv: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbStatus {
    Applied,
    ZeroGradient,
}

/// Sets `z` from a score gradient taken at `s + 0`: one normalised ascent step
/// of length `eta`, then the layer-wise `γ‖s_l‖` projection.
pub fn apply_score_perturbation(network: &mut Network, score_grads: &[Vec<f64>], gamma: f64, eta: f64) -> PerturbStatus {
    let Some(step) = normalized_step(score_grads, eta) else {
        log::debug!("score perturbation skipped: zero gradient");
        return PerturbStatus::ZeroGradient;
    };
    let mut z: Vec<Vec<f64>> = network
        .layers
        .iter()
        .zip(step)
        .map(|(l, st)| {
            l.score_perturbation
                .data()
                .iter()
                .zip(st)
                .map(|(z, s)| if l.prunable { z + s } else { 0.0 })
                .collect()
        })
        .collect();
    let norms: Vec<f64> = network.layers.iter().map(|l| l.scores.norm()).collect();
    project_layerwise(&mut z, &norms, gamma);
    for (l, zl) in network.layers.iter_mut().zip(z) {
        l.score_perturbation.data_mut().copy_from_slice(&zl);
    }
    PerturbStatus::Applied
}

/// One sharpness-aware ascent step in score space: zeroes `z`, evaluates the
/// STE score gradient of the robust loss at `s + z`, and applies
/// [`apply_score_perturbation`].
pub fn perturb_scores(
    network: &mut Network,
    batch: &AdvBatch,
    gamma: f64,
    eta: f64,
    loss_kind: LossKind,
) -> Result<PerturbStatus> {
    network.clear_perturbations();
    let view = network.search_view(ScoreSource::Perturbed, false)?;
    let lg = loss_with_grads(&view, &batch.batch, &batch.x_adv, loss_kind)?;
    let grads = network.ste_score_grads(&lg.weights, false);
    Ok(apply_score_perturbation(network, &grads, gamma, eta))
}

/// Sets `ν` from an effective-weight gradient: the gradient w.r.t. `ν` of
/// `L((w + ν) ⊙ m)` is `grad ⊙ m`.
fn apply_weight_perturbation(
    network: &mut Network,
    eff_grads: &[Vec<f64>],
    masks: &[Vec<f64>],
    gamma: f64,
    eta: f64,
) -> PerturbStatus {
    let grads: Vec<Vec<f64>> = eff_grads
        .iter()
        .zip(masks)
        .map(|(g, m)| g.iter().zip(m).map(|(g, m)| g * m).collect())
        .collect();
    let Some(mut nu) = normalized_step(&grads, eta) else {
        log::debug!("weight perturbation skipped: zero gradient");
        return PerturbStatus::ZeroGradient;
    };
    let norms: Vec<f64> = network.layers.iter().map(|l| l.weights.norm()).collect();
    project_layerwise(&mut nu, &norms, gamma);
    for (l, n) in network.layers.iter_mut().zip(nu) {
        l.weight_perturbation.data_mut().copy_from_slice(&n);
    }
    PerturbStatus::Applied
}

/// What the loop exposes to an observer after each iteration.
#[derive(Debug)]
pub struct IterationRecord<'a> {
    pub epoch: usize,
    pub iteration: usize,
    /// Robust loss at the pre-update scores.
    pub loss: f64,
    /// Scores before the update.
    pub scores_entry: &'a [Vec<f64>],
    /// Scores after the update (and perturbation removal).
    pub scores_exit: &'a [Vec<f64>],
    /// `eta * ĝ` actually applied (zero if the step was skipped).
    pub step: &'a [Vec<f64>],
    /// Whether the sharpness-aware perturbation was active.
    pub perturbed: bool,
    pub network: &'a Network,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneOutcome {
    /// Returned mask `M(s*, k)` per layer.
    pub mask: Vec<Vec<f64>>,
    pub best_scores: Vec<Vec<f64>>,
    pub best_loss: f64,
    pub final_scores: Vec<Vec<f64>>,
    /// Loss of every candidate considered by best tracking, in order.
    pub candidates: Vec<f64>,
    pub iteration_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub trace: MaskTrace,
    /// Mean λ_max per epoch (empty when disabled).
    pub lambda_max: Vec<f64>,
    pub zero_grad_events: usize,
    /// Largest deviation of the restored scores from `s_entry − η·ĝ`.
    pub restore_error: f64,
}

fn sampled_iterations(n_batches: usize, samples: usize) -> Vec<usize> {
    let s = samples.min(n_batches);
    let mut idx: Vec<usize> = (0..s).map(|j| j * n_batches / s.max(1)).collect();
    idx.dedup();
    idx
}

fn lambda_seed(seed: u64, epoch: usize, iteration: usize) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul((epoch as u64 + 1) * 1_000_003 + iteration as u64)
}

/// Runs the mask search selected by `cfg.mode`.
pub fn prune(network: &mut Network, data: &Dataset, cfg: &PruneConfig, attack: &AttackConfig) -> Result<PruneOutcome> {
    prune_observed(network, data, cfg, attack, |_| {})
}

pub fn s2ap_prune(network: &mut Network, data: &Dataset, cfg: &PruneConfig, attack: &AttackConfig) -> Result<PruneOutcome> {
    prune(network, data, &PruneConfig { mode: PruneMode::S2ap, ..cfg.clone() }, attack)
}

pub fn baseline_prune(network: &mut Network, data: &Dataset, cfg: &PruneConfig, attack: &AttackConfig) -> Result<PruneOutcome> {
    prune(network, data, &PruneConfig { mode: PruneMode::Baseline, ..cfg.clone() }, attack)
}

pub fn awp_prune(network: &mut Network, data: &Dataset, cfg: &PruneConfig, attack: &AttackConfig) -> Result<PruneOutcome> {
    prune(network, data, &PruneConfig { mode: PruneMode::AwpPrune, ..cfg.clone() }, attack)
}

/// The shared search loop; `observer` sees every iteration.
pub fn prune_observed(
    network: &mut Network,
    data: &Dataset,
    cfg: &PruneConfig,
    attack: &AttackConfig,
    mut observer: impl FnMut(&IterationRecord<'_>),
) -> Result<PruneOutcome> {
    cfg.validate()?;
    attack.validate()?;
    network.ranking = cfg.ranking;
    network.apply_sparsity(cfg.sparsity, cfg.exempt)?;
    network.clear_perturbations();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let reference = PackedMask::from_mask(&network.prunable_mask_flat());
    let mut trace = MaskTrace::new(reference);

    let mut best_scores = network.scores();
    let mut best_loss = f64::INFINITY;
    let mut candidates = Vec::new();
    let mut iteration_losses = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut lambda_per_epoch = Vec::new();
    let mut zero_grad_events = 0;
    let mut restore_error: f64 = 0.0;

    for epoch in 0..cfg.epochs {
        let active = cfg.mode != PruneMode::Baseline && epoch >= cfg.warmup_epochs;
        let batches = data.shuffled_batches(cfg.batch_size, &mut rng);
        let n_batches = batches.len();
        let lambda_at = if cfg.lambda_samples > 0 {
            sampled_iterations(batches.len(), cfg.lambda_samples)
        } else {
            Vec::new()
        };
        let mut lambdas = Vec::new();
        let mut epoch_sum = 0.0;

        for (it, batch) in batches.into_iter().enumerate() {
            // adversarial examples on the currently pruned model
            let masks = network.search_masks(ScoreSource::Scores)?;
            let view = network.view_with_masks(&masks, false);
            let x_adv = adversarial_examples(&view, &batch, cfg.loss_kind, attack, &mut rng)?;
            let lg = loss_with_grads(&view, &batch, &x_adv, cfg.loss_kind)?;
            let loss = lg.loss;

            if lambda_at.contains(&it) {
                let objective = SurrogateObjective::new(network, &masks, &batch, &x_adv, cfg.loss_kind);
                let s = network.prunable_scores_flat();
                let est = lambda_max(&objective, &s, cfg.lambda_iterations, lambda_seed(cfg.seed, epoch, it))?;
                lambdas.push(est.value);
            }

            let entry = network.scores();
            let descent_grads = if !active {
                network.ste_score_grads(&lg.weights, false)
            } else {
                match cfg.mode {
                    PruneMode::S2ap => {
                        network.clear_perturbations();
                        let g0 = network.ste_score_grads(&lg.weights, false);
                        if apply_score_perturbation(network, &g0, cfg.gamma, cfg.eta) == PerturbStatus::ZeroGradient {
                            zero_grad_events += 1;
                        }
                        let pview = network.search_view(ScoreSource::Perturbed, false)?;
                        let lg2 = loss_with_grads(&pview, &batch, &x_adv, cfg.loss_kind)?;
                        network.ste_score_grads(&lg2.weights, false)
                    }
                    PruneMode::AwpPrune => {
                        network.clear_perturbations();
                        if apply_weight_perturbation(network, &lg.weights, &masks, cfg.gamma, cfg.eta)
                            == PerturbStatus::ZeroGradient
                        {
                            zero_grad_events += 1;
                        }
                        let pview: ParamView = network.view_with_masks(&masks, true);
                        let lg2 = loss_with_grads(&pview, &batch, &x_adv, cfg.loss_kind)?;
                        network.ste_score_grads(&lg2.weights, true)
                    }
                    PruneMode::Baseline => unreachable!("baseline is never active"),
                }
            };

            let step = match normalized_step(&descent_grads, cfg.eta) {
                Some(step) => step,
                None => {
                    zero_grad_events += 1;
                    descent_grads.iter().map(|g| vec![0.0; g.len()]).collect()
                }
            };
            for (l, st) in network.layers.iter_mut().zip(&step) {
                let z = l.score_perturbation.data().to_vec();
                let s = l.scores.data_mut();
                if active && cfg.mode == PruneMode::S2ap {
                    // move to s + z, descend there, then take z back out
                    s.iter_mut().zip(&z).for_each(|(s, z)| *s += z);
                    s.iter_mut().zip(st).for_each(|(s, d)| *s -= d);
                    s.iter_mut().zip(&z).for_each(|(s, z)| *s -= z);
                } else {
                    s.iter_mut().zip(st).for_each(|(s, d)| *s -= d);
                }
            }
            network.clear_perturbations();

            let exit = network.scores();
            for ((e, x), st) in entry.iter().zip(&exit).zip(&step) {
                for ((e, x), d) in e.iter().zip(x).zip(st) {
                    restore_error = restore_error.max((x - (e - d)).abs());
                }
            }

            observer(&IterationRecord {
                epoch,
                iteration: it,
                loss,
                scores_entry: &entry,
                scores_exit: &exit,
                step: &step,
                perturbed: active,
                network,
            });

            iteration_losses.push(loss);
            epoch_sum += loss;
            if cfg.best_tracking == BestTracking::Iteration {
                candidates.push(loss);
                if loss < best_loss {
                    best_loss = loss;
                    best_scores = entry;
                }
            }
        }

        let epoch_mean = epoch_sum / n_batches.max(1) as f64;
        epoch_losses.push(epoch_mean);
        if cfg.best_tracking == BestTracking::Epoch {
            candidates.push(epoch_mean);
            if epoch_mean < best_loss {
                best_loss = epoch_mean;
                best_scores = network.scores();
            }
        }

        let epoch_masks = network.search_masks(ScoreSource::Scores)?;
        let flat: Vec<bool> = network
            .layers
            .iter()
            .zip(&epoch_masks)
            .filter(|(l, _)| l.prunable)
            .flat_map(|(_, m)| m.iter().map(|&v| v != 0.0))
            .collect();
        trace.push(PackedMask::from_mask(&flat))?;
        if !lambdas.is_empty() {
            lambda_per_epoch.push(lambdas.iter().sum::<f64>() / lambdas.len() as f64);
        }
    }

    let final_scores = network.scores();
    network.set_scores(&best_scores);
    network.refresh_masks()?;
    Ok(PruneOutcome {
        mask: network.stored_masks(),
        best_scores,
        best_loss,
        final_scores,
        candidates,
        iteration_losses,
        epoch_losses,
        trace,
        lambda_max: lambda_per_epoch,
        zero_grad_events,
        restore_error,
    })
}
