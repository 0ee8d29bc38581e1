//! Flatness and mask-stability diagnostics.
//!
//! * [`hvp`] and [`lambda_max`]: finite-difference Hessian-vector products and
//!   power iteration for the top Hessian eigenvalue of a score objective.
//! * [`LossDiffProbe`]: worst-case loss increase under bounded, score-relative
//!   perturbations, found by sign-gradient ascent with restarts.
//! * [`PackedMask`] and [`MaskTrace`]: bit-packed masks and per-epoch Hamming
//!   distance to a reference mask.
//!
//! The hard top-k mask makes the robust loss piecewise constant in the scores,
//! so curvature is measured on the straight-through surrogate
//! `w ⊙ (m + (s − s₀))`, whose gradient at `s₀` equals the STE score gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::autodiff::{l2_norm, Tensor};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::losses::{adversarial_examples, loss_value, loss_with_grads, LossKind};
use crate::model::{Network, ParamView, ScoreSource, ViewLayer};

/// A differentiable scalar function of a flat score vector.
pub trait ScoreObjective {
    fn dim(&self) -> usize;
    fn value_and_grad(&self, scores: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn value(&self, scores: &[f64]) -> Result<f64> {
        Ok(self.value_and_grad(scores)?.0)
    }
}

/// `½ sᵀ A s` for a symmetric `A` (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    pub dim: usize,
    pub matrix: Vec<f64>,
}

impl QuadraticObjective {
    pub fn new(dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != dim * dim {
            return Err(Error::Length(format!(
                "quadratic objective: {} entries for dim {dim}",
                matrix.len()
            )));
        }
        Ok(Self { dim, matrix })
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.matrix
            .chunks(self.dim)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }
}

impl ScoreObjective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_and_grad(&self, s: &[f64]) -> Result<(f64, Vec<f64>)> {
        let g = self.apply(s);
        let v = 0.5 * s.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
        Ok((v, g))
    }
}

/// Robust loss of a network on a fixed adversarial batch as a function of the
/// prunable scores, with the mask frozen at `masks` and the top-k selector
/// replaced by the identity around the current scores.
pub struct SurrogateObjective<'a> {
    network: &'a Network,
    masks: &'a [Vec<f64>],
    batch: &'a Batch,
    x_adv: &'a Tensor,
    kind: LossKind,
    origin: Vec<f64>,
}

impl<'a> SurrogateObjective<'a> {
    pub fn new(
        network: &'a Network,
        masks: &'a [Vec<f64>],
        batch: &'a Batch,
        x_adv: &'a Tensor,
        kind: LossKind,
    ) -> Self {
        Self {
            network,
            masks,
            batch,
            x_adv,
            kind,
            origin: network.prunable_scores_flat(),
        }
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    fn view_at(&self, s: &[f64]) -> Result<ParamView> {
        if s.len() != self.origin.len() {
            return Err(Error::Length(format!(
                "surrogate objective expects {} scores, got {}",
                self.origin.len(),
                s.len()
            )));
        }
        let mut offset = 0;
        let layers = self
            .network
            .layers
            .iter()
            .zip(self.masks)
            .map(|(l, m)| {
                let w = l.weights.data();
                let eff: Vec<f64> = if l.prunable {
                    let n = l.numel();
                    let (sl, s0) = (&s[offset..offset + n], &self.origin[offset..offset + n]);
                    offset += n;
                    (0..n).map(|i| w[i] * (m[i] + (sl[i] - s0[i]))).collect()
                } else {
                    w.iter().zip(m).map(|(w, m)| w * m).collect()
                };
                ViewLayer {
                    weight: Tensor::new(l.weights.shape().to_vec(), eff).expect("weight shape"),
                    bias: l.bias.clone(),
                }
            })
            .collect();
        Ok(ParamView { layers })
    }
}

impl ScoreObjective for SurrogateObjective<'_> {
    fn dim(&self) -> usize {
        self.origin.len()
    }

    fn value_and_grad(&self, s: &[f64]) -> Result<(f64, Vec<f64>)> {
        let view = self.view_at(s)?;
        let lg = loss_with_grads(&view, self.batch, self.x_adv, self.kind)?;
        let grad = self
            .network
            .layers
            .iter()
            .zip(&lg.weights)
            .filter(|(l, _)| l.prunable)
            .flat_map(|(l, g)| l.weights.data().iter().zip(g).map(|(w, g)| w * g).collect::<Vec<_>>())
            .collect();
        Ok((lg.loss, grad))
    }

    fn value(&self, s: &[f64]) -> Result<f64> {
        loss_value(&self.view_at(s)?, self.batch, self.x_adv, self.kind)
    }
}

/// Central-difference Hessian-vector product
/// `(∇L(s + εv) − ∇L(s − εv)) / 2ε` with `ε = 1e-4·‖s‖/‖v‖`
/// (`1e-4/‖v‖` when `s = 0`).
pub fn hvp(objective: &dyn ScoreObjective, s: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if s.len() != objective.dim() || v.len() != s.len() {
        return Err(Error::Length(format!(
            "hvp: objective dim {}, scores {}, direction {}",
            objective.dim(),
            s.len(),
            v.len()
        )));
    }
    let vn = l2_norm(v);
    if vn == 0.0 {
        return Ok(vec![0.0; s.len()]);
    }
    let sn = l2_norm(s);
    let eps = 1e-4 * if sn > 0.0 { sn } else { 1.0 } / vn;
    let plus: Vec<f64> = s.iter().zip(v).map(|(a, b)| a + eps * b).collect();
    let minus: Vec<f64> = s.iter().zip(v).map(|(a, b)| a - eps * b).collect();
    let (_, gp) = objective.value_and_grad(&plus)?;
    let (_, gm) = objective.value_and_grad(&minus)?;
    Ok(gp.iter().zip(&gm).map(|(p, m)| (p - m) / (2.0 * eps)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaEstimate {
    /// Rayleigh quotient at the final iterate; 0 when flat.
    pub value: f64,
    /// The Hessian-vector product vanished (`‖Hv‖ < 1e-12`).
    pub flat: bool,
}

pub const DEFAULT_POWER_ITERATIONS: usize = 10;

fn random_unit(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = l2_norm(&v);
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Power iteration on the finite-difference Hessian from a seeded random unit
/// start.
pub fn lambda_max(objective: &dyn ScoreObjective, s: &[f64], iterations: usize, seed: u64) -> Result<LambdaEstimate> {
    lambda_max_from(objective, s, iterations, random_unit(s.len(), seed))
}

/// As [`lambda_max`] from an explicit starting direction.
pub fn lambda_max_from(
    objective: &dyn ScoreObjective,
    s: &[f64],
    iterations: usize,
    start: Vec<f64>,
) -> Result<LambdaEstimate> {
    let flat = LambdaEstimate { value: 0.0, flat: true };
    let n0 = l2_norm(&start);
    if s.is_empty() || n0 == 0.0 {
        return Ok(flat);
    }
    let mut v: Vec<f64> = start.iter().map(|x| x / n0).collect();
    for _ in 0..iterations {
        let hv = hvp(objective, s, &v)?;
        let n = l2_norm(&hv);
        if n < 1e-12 || !n.is_finite() {
            log::debug!("power iteration: Hessian-vector product vanished");
            return Ok(flat);
        }
        v = hv.into_iter().map(|x| x / n).collect();
    }
    let hv = hvp(objective, s, &v)?;
    if l2_norm(&hv) < 1e-12 {
        return Ok(flat);
    }
    let value = v.iter().zip(&hv).map(|(a, b)| a * b).sum();
    Ok(LambdaEstimate { value, flat: false })
}

/// Sign-gradient ascent settings for [`LossDiffProbe`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossDiffConfig {
    pub steps: usize,
    pub restarts: usize,
    /// Step size as a fraction of `ρ` (per coordinate, times `|s_i|`).
    pub step_fraction: f64,
    pub seed: u64,
}

impl Default for LossDiffConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            restarts: 2,
            step_fraction: 0.25,
            seed: 0,
        }
    }
}

pub const DEFAULT_RHO_GRID: [f64; 5] = [0.001, 0.0025, 0.005, 0.0075, 0.01];

const SCALE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossDiffOutcome {
    pub value: f64,
    /// Maximising perturbation (flat, prunable layers).
    pub perturbation: Vec<f64>,
}

/// Loss-difference sharpness `max_{|ν_i| ≤ ρ(|s_i| + 1e-12)} L(s + ν) − L(s)`
/// with masks recomputed from `s + ν` and adversarial inputs held fixed at
/// those crafted against the unperturbed masked model.
pub struct LossDiffProbe {
    work: Network,
    batch: Batch,
    x_adv: Tensor,
    kind: LossKind,
    origin: Vec<f64>,
    base_loss: f64,
}

impl LossDiffProbe {
    pub fn new(network: &Network, batch: &Batch, kind: LossKind, attack: &AttackConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let view = network.search_view(ScoreSource::Scores, false)?;
        let x_adv = adversarial_examples(&view, batch, kind, attack, &mut rng)?;
        let base_loss = loss_value(&view, batch, &x_adv, kind)?;
        Ok(Self {
            work: network.clone(),
            batch: batch.clone(),
            x_adv,
            kind,
            origin: network.prunable_scores_flat(),
            base_loss,
        })
    }

    pub fn base_loss(&self) -> f64 {
        self.base_loss
    }

    fn set_offset(&mut self, nu: &[f64]) {
        let mut offset = 0;
        for l in self.work.layers.iter_mut().filter(|l| l.prunable) {
            let n = l.numel();
            for (i, s) in l.scores.data_mut().iter_mut().enumerate() {
                *s = self.origin[offset + i] + nu[offset + i];
            }
            offset += n;
        }
    }

    /// Loss difference at `s + ν` and its STE gradient w.r.t. `ν`.
    fn eval(&mut self, nu: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.set_offset(nu);
        let view = self.work.search_view(ScoreSource::Scores, false)?;
        let lg = loss_with_grads(&view, &self.batch, &self.x_adv, self.kind)?;
        let grads = self.work.ste_score_grads(&lg.weights, false);
        let flat = self
            .work
            .layers
            .iter()
            .zip(grads)
            .filter(|(l, _)| l.prunable)
            .flat_map(|(_, g)| g)
            .collect();
        Ok((lg.loss - self.base_loss, flat))
    }

    fn ascend(
        &mut self,
        rho: f64,
        cfg: &LossDiffConfig,
        warm: Option<&LossDiffOutcome>,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossDiffOutcome> {
        let dim = self.origin.len();
        let scale: Vec<f64> = self.origin.iter().map(|s| s.abs() + SCALE_FLOOR).collect();
        let (v0, _) = self.eval(&vec![0.0; dim])?;
        let mut best = LossDiffOutcome {
            value: v0,
            perturbation: vec![0.0; dim],
        };
        if rho == 0.0 {
            return Ok(best);
        }
        let step = cfg.step_fraction * rho;
        for restart in 0..cfg.restarts.max(1) {
            let mut nu: Vec<f64> = match (restart, warm) {
                (0, Some(w)) => w.perturbation.clone(),
                (0, None) => vec![0.0; dim],
                _ => scale.iter().map(|c| rng.random_range(-rho * c..=rho * c)).collect(),
            };
            for it in 0..=cfg.steps {
                let (v, g) = self.eval(&nu)?;
                if v > best.value {
                    best = LossDiffOutcome {
                        value: v,
                        perturbation: nu.clone(),
                    };
                }
                if it == cfg.steps {
                    break;
                }
                for ((n, g), c) in nu.iter_mut().zip(&g).zip(&scale) {
                    let dir = if *g > 0.0 {
                        1.0
                    } else if *g < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *n = (*n + step * c * dir).clamp(-rho * c, rho * c);
                }
            }
        }
        Ok(best)
    }

    pub fn sharpness(&mut self, rho: f64, cfg: &LossDiffConfig) -> Result<LossDiffOutcome> {
        check_rho(rho)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        self.ascend(rho, cfg, None, &mut rng)
    }

    /// Sharpness at every radius; each radius warm-starts from the previous
    /// maximiser, so values are non-decreasing in `ρ`. Results follow the
    /// order of `rhos`.
    pub fn grid(&mut self, rhos: &[f64], cfg: &LossDiffConfig) -> Result<Vec<(f64, f64)>> {
        for &r in rhos {
            check_rho(r)?;
        }
        let mut order: Vec<usize> = (0..rhos.len()).collect();
        order.sort_by(|&a, &b| rhos[a].total_cmp(&rhos[b]));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut values = vec![0.0; rhos.len()];
        let mut prev: Option<LossDiffOutcome> = None;
        for i in order {
            let out = self.ascend(rhos[i], cfg, prev.as_ref(), &mut rng)?;
            values[i] = out.value;
            prev = Some(out);
        }
        Ok(rhos.iter().copied().zip(values).collect())
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho.is_finite() && rho >= 0.0) {
        return Err(Error::Config(format!("rho {rho} must be >= 0")));
    }
    Ok(())
}

/// Single-radius loss-difference sharpness of `network` on `batch`.
pub fn loss_diff_sharpness(
    network: &Network,
    batch: &Batch,
    rho: f64,
    kind: LossKind,
    attack: &AttackConfig,
    cfg: &LossDiffConfig,
) -> Result<f64> {
    Ok(LossDiffProbe::new(network, batch, kind, attack, cfg.seed)?
        .sharpness(rho, cfg)?
        .value)
}

/// Bit-packed binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedMask {
    len: usize,
    words: Vec<u64>,
}

impl PackedMask {
    pub fn from_mask(bits: &[bool]) -> Self {
        let mut words = vec![0u64; bits.len().div_ceil(64)];
        for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
            words[i / 64] |= 1 << (i % 64);
        }
        Self { len: bits.len(), words }
    }

    /// Packs a `{0, 1}`-valued float mask (any nonzero counts as 1).
    pub fn from_values(values: &[f64]) -> Self {
        Self::from_mask(&values.iter().map(|&v| v != 0.0).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        i < self.len && (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    /// Fraction of positions where the masks differ.
    pub fn hamming(&self, other: &PackedMask) -> Result<f64> {
        if self.len != other.len {
            return Err(Error::Length(format!(
                "hamming: mask lengths {} and {}",
                self.len, other.len
            )));
        }
        if self.len == 0 {
            return Err(Error::Length("hamming: empty masks".into()));
        }
        let diff: u32 = self.words.iter().zip(&other.words).map(|(a, b)| (a ^ b).count_ones()).sum();
        Ok(diff as f64 / self.len as f64)
    }
}

/// Reference mask plus one mask per search epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskTrace {
    pub reference: PackedMask,
    pub epochs: Vec<PackedMask>,
}

impl MaskTrace {
    pub fn new(reference: PackedMask) -> Self {
        Self {
            reference,
            epochs: Vec::new(),
        }
    }

    pub fn push(&mut self, mask: PackedMask) -> Result<()> {
        if mask.len() != self.reference.len() {
            return Err(Error::Length(format!(
                "mask trace: epoch mask has {} entries, reference {}",
                mask.len(),
                self.reference.len()
            )));
        }
        self.epochs.push(mask);
        Ok(())
    }
}

/// `h_t = d(m₀, m_t) / len` for every epoch mask of the trace.
pub fn hamming_trace(trace: &MaskTrace) -> Result<Vec<f64>> {
    if trace.epochs.is_empty() {
        return Err(Error::Length("mask trace needs at least one epoch mask".into()));
    }
    trace.epochs.iter().map(|m| trace.reference.hamming(m)).collect()
}

/// Element-wise `first − second` of two equally long series.
pub fn paired_difference(first: &[f64], second: &[f64]) -> Result<Vec<f64>> {
    if first.len() != second.len() {
        return Err(Error::Length(format!(
            "paired series lengths differ: {} vs {}",
            first.len(),
            second.len()
        )));
    }
    Ok(first.iter().zip(second).map(|(a, b)| a - b).collect())
}

/// Everything the diagnostics produce for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessReport {
    pub label: String,
    /// Mean λ_max per search epoch.
    pub lambda_max: Vec<f64>,
    /// `(ρ, loss difference)` pairs.
    pub loss_diff: Vec<(f64, f64)>,
    pub hamming: Vec<f64>,
    pub maximizer: String,
    /// Configuration text the run was made with.
    pub config: String,
}
