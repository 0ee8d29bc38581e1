//! Weight training on a fixed mask, and dense adversarial pretraining.
//!
//! Finetuning updates only the retained weights (and biases) with globally
//! normalised steps. In `S2apAwp` mode the descent gradient is taken at
//! `(w + ν) ⊙ m`, where `ν` is one normalised ascent step on the retained
//! weights projected onto `‖ν_l‖ ≤ γ‖w_l‖`. `ν` only ever lives in the
//! temporary effective weights, so pruned weights are never written.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{adversarial_examples, loss_with_grads, LossKind};
use crate::model::Network;
use crate::pruner::{global_norm, project_layerwise};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    Standard,
    #[default]
    S2apAwp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub eta: f64,
    pub gamma: f64,
    pub mode: FinetuneMode,
    pub loss_kind: LossKind,
    pub seed: u64,
    pub batch_size: usize,
    /// Multiply `eta` by 0.1 for the second half of training.
    pub step_decay: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            eta: 0.05,
            gamma: 0.005,
            mode: FinetuneMode::S2apAwp,
            loss_kind: LossKind::default(),
            seed: 0,
            batch_size: 64,
            step_decay: true,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("finetune eta {} must be > 0", self.eta)));
        }
        if self.mode == FinetuneMode::S2apAwp && !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("finetune gamma {} must be > 0", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        self.loss_kind.validate()
    }

    fn eta_at(&self, epoch: usize) -> f64 {
        if self.step_decay && self.epochs >= 2 && epoch >= self.epochs / 2 {
            self.eta * 0.1
        } else {
            self.eta
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub epoch_losses: Vec<f64>,
    pub zero_grad_events: usize,
    /// Largest deviation of the restored weights from `w − η·ĝ`.
    pub restore_error: f64,
}

pub fn standard_finetune(network: &mut Network, data: &Dataset, cfg: &FinetuneConfig, attack: &AttackConfig) -> Result<FinetuneOutcome> {
    finetune(network, data, &FinetuneConfig { mode: FinetuneMode::Standard, ..cfg.clone() }, attack)
}

pub fn s2ap_finetune(network: &mut Network, data: &Dataset, cfg: &FinetuneConfig, attack: &AttackConfig) -> Result<FinetuneOutcome> {
    finetune(network, data, &FinetuneConfig { mode: FinetuneMode::S2apAwp, ..cfg.clone() }, attack)
}

/// Trains the retained weights of `network` under its stored masks.
pub fn finetune(network: &mut Network, data: &Dataset, cfg: &FinetuneConfig, attack: &AttackConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    attack.validate()?;
    network.clear_perturbations();
    let masks = network.stored_masks();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut zero_grad_events = 0;
    let mut restore_error: f64 = 0.0;

    for epoch in 0..cfg.epochs {
        let eta = cfg.eta_at(epoch);
        let batches = data.shuffled_batches(cfg.batch_size, &mut rng);
        let mut sum = 0.0;
        for batch in &batches {
            let view = network.finetune_view(false);
            let x_adv = adversarial_examples(&view, batch, cfg.loss_kind, attack, &mut rng)?;
            let lg = loss_with_grads(&view, batch, &x_adv, cfg.loss_kind)?;
            sum += lg.loss;

            let lg = if cfg.mode == FinetuneMode::S2apAwp {
                let ascent: Vec<Vec<f64>> = lg
                    .weights
                    .iter()
                    .zip(&masks)
                    .map(|(g, m)| g.iter().zip(m).map(|(g, m)| g * m).collect())
                    .collect();
                let norm = global_norm(&ascent);
                if norm > 0.0 && norm.is_finite() {
                    let mut nu: Vec<Vec<f64>> = ascent
                        .iter()
                        .map(|g| g.iter().map(|v| eta * v / norm).collect())
                        .collect();
                    let norms: Vec<f64> = network.layers.iter().map(|l| l.weights.norm()).collect();
                    project_layerwise(&mut nu, &norms, cfg.gamma);
                    for (l, n) in network.layers.iter_mut().zip(nu) {
                        l.weight_perturbation.data_mut().copy_from_slice(&n);
                    }
                } else {
                    zero_grad_events += 1;
                }
                let pview = network.finetune_view(true);
                loss_with_grads(&pview, batch, &x_adv, cfg.loss_kind)?
            } else {
                lg
            };

            // ∂L/∂w = ∂L/∂W_eff ⊙ m; biases are trained directly
            let wgrads: Vec<Vec<f64>> = lg
                .weights
                .iter()
                .zip(&masks)
                .map(|(g, m)| g.iter().zip(m).map(|(g, m)| g * m).collect())
                .collect();
            let bgrads: Vec<Vec<f64>> = lg.biases.iter().map(|b| b.clone().unwrap_or_default()).collect();
            let norm = (global_norm(&wgrads).powi(2) + global_norm(&bgrads).powi(2)).sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                zero_grad_events += 1;
                network.clear_perturbations();
                continue;
            }
            for ((layer, g), m) in network.layers.iter_mut().zip(&wgrads).zip(&masks) {
                let nu = layer.weight_perturbation.data().to_vec();
                for (i, w) in layer.weights.data_mut().iter_mut().enumerate() {
                    if m[i] == 0.0 {
                        continue;
                    }
                    let entry = *w;
                    let step = eta * g[i] / norm;
                    // w + ν − η·ĝ − ν
                    *w += nu[i];
                    *w -= step;
                    *w -= nu[i];
                    restore_error = restore_error.max((*w - (entry - step)).abs());
                }
            }
            for (layer, g) in network.layers.iter_mut().zip(&bgrads) {
                if let Some(b) = layer.bias.as_mut() {
                    for (b, g) in b.data_mut().iter_mut().zip(g) {
                        *b -= eta * g / norm;
                    }
                }
            }
            network.clear_perturbations();
        }
        epoch_losses.push(sum / batches.len().max(1) as f64);
    }
    Ok(FinetuneOutcome {
        epoch_losses,
        zero_grad_events,
        restore_error,
    })
}

/// Dense adversarial pretraining with momentum SGD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub loss_kind: LossKind,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.1,
            momentum: 0.9,
            batch_size: 64,
            loss_kind: LossKind::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("pretrain lr {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        self.loss_kind.validate()
    }
}

/// Trains every weight and bias of `network` densely; returns epoch-mean losses.
pub fn pretrain(network: &mut Network, data: &Dataset, cfg: &PretrainConfig, attack: &AttackConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    attack.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut vel_w: Vec<Vec<f64>> = network.layers.iter().map(|l| vec![0.0; l.numel()]).collect();
    let mut vel_b: Vec<Vec<f64>> = network
        .layers
        .iter()
        .map(|l| vec![0.0; l.bias.as_ref().map_or(0, |b| b.numel())])
        .collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let batches = data.shuffled_batches(cfg.batch_size, &mut rng);
        let mut sum = 0.0;
        for batch in &batches {
            let view = network.dense_view();
            let x_adv = adversarial_examples(&view, batch, cfg.loss_kind, attack, &mut rng)?;
            let lg = loss_with_grads(&view, batch, &x_adv, cfg.loss_kind)?;
            sum += lg.loss;
            for (((layer, g), vw), (gb, vb)) in network
                .layers
                .iter_mut()
                .zip(&lg.weights)
                .zip(&mut vel_w)
                .zip(lg.biases.iter().zip(&mut vel_b))
            {
                for ((w, g), v) in layer.weights.data_mut().iter_mut().zip(g).zip(vw.iter_mut()) {
                    *v = cfg.momentum * *v + g;
                    *w -= cfg.lr * *v;
                }
                if let (Some(b), Some(gb)) = (layer.bias.as_mut(), gb) {
                    for ((b, g), v) in b.data_mut().iter_mut().zip(gb).zip(vb.iter_mut()) {
                        *v = cfg.momentum * *v + g;
                        *b -= cfg.lr * *v;
                    }
                }
            }
        }
        losses.push(sum / batches.len().max(1) as f64);
    }
    Ok(losses)
}
