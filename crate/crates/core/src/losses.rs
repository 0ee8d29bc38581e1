//! Training objectives: clean cross-entropy, PGD adversarial training and TRADES.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_attack, AttackConfig, AttackObjective};
use crate::autodiff::{Graph, Tensor};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::ParamView;

pub const DEFAULT_TRADES_BETA: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    CleanCe,
    PgdAt,
    Trades { beta: f64 },
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::Trades {
            beta: DEFAULT_TRADES_BETA,
        }
    }
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            LossKind::Trades { beta } if !(beta.is_finite() && *beta >= 0.0) => {
                Err(Error::Config(format!("TRADES beta {beta} must be >= 0")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::CleanCe => "clean_ce",
            LossKind::PgdAt => "pgd_at",
            LossKind::Trades { .. } => "trades",
        }
    }
}

/// Inputs the loss is evaluated on. `clean_ce` never attacks; `pgd_at` maximises
/// cross-entropy; `trades` maximises the KL term against the clean prediction.
pub fn adversarial_examples<R: Rng>(
    view: &ParamView,
    batch: &Batch,
    kind: LossKind,
    attack: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor> {
    match kind {
        LossKind::CleanCe => Ok(batch.x.clone()),
        LossKind::PgdAt => pgd_attack(
            view,
            &batch.x,
            &batch.y,
            attack,
            AttackObjective::CrossEntropy,
            rng,
        ),
        LossKind::Trades { .. } => {
            let clean_logp = log_probs(view, &batch.x)?;
            pgd_attack(
                view,
                &batch.x,
                &batch.y,
                attack,
                AttackObjective::Kl {
                    clean_logp: &clean_logp,
                },
                rng,
            )
        }
    }
}

pub fn log_probs(view: &ParamView, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let t = view.forward_graph(&mut g, xv, false, false)?;
    let lp = g.log_softmax(t.logits)?;
    Ok(g.value(lp).clone())
}

/// Loss value and gradients with respect to the effective parameters of a view.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Option<Vec<f64>>>,
}

fn record_loss(
    g: &mut Graph,
    view: &ParamView,
    batch: &Batch,
    x_adv: &Tensor,
    kind: LossKind,
    track: bool,
) -> Result<(crate::autodiff::Var, crate::model::ParamVars)> {
    let params = view.register(g, track, track);
    let loss = match kind {
        LossKind::CleanCe | LossKind::PgdAt => {
            let input = if kind == LossKind::CleanCe { &batch.x } else { x_adv };
            let xv = g.constant(input.clone());
            let logits = view.forward_with(g, &params, xv)?;
            let lp = g.log_softmax(logits)?;
            let nll = g.nll(lp, &batch.y)?;
            g.mean(nll)?
        }
        LossKind::Trades { beta } => {
            let xc = g.constant(batch.x.clone());
            let xa = g.constant(x_adv.clone());
            let lc = view.forward_with(g, &params, xc)?;
            let la = view.forward_with(g, &params, xa)?;
            let lpc = g.log_softmax(lc)?;
            let lpa = g.log_softmax(la)?;
            let nll = g.nll(lpc, &batch.y)?;
            let ce = g.mean(nll)?;
            let kl_rows = g.kl_div(lpc, lpa)?;
            let kl = g.mean(kl_rows)?;
            let b = g.constant(Tensor::scalar(beta));
            let weighted = g.mul(kl, b)?;
            g.add(ce, weighted)?
        }
    };
    Ok((loss, params))
}

/// Loss on a batch whose adversarial inputs are already fixed.
pub fn loss_value(view: &ParamView, batch: &Batch, x_adv: &Tensor, kind: LossKind) -> Result<f64> {
    let mut g = Graph::new();
    let (loss, _) = record_loss(&mut g, view, batch, x_adv, kind, false)?;
    Ok(g.value(loss).item())
}

pub fn loss_with_grads(
    view: &ParamView,
    batch: &Batch,
    x_adv: &Tensor,
    kind: LossKind,
) -> Result<LossGrad> {
    let mut g = Graph::new();
    let (loss, params) = record_loss(&mut g, view, batch, x_adv, kind, true)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    Ok(LossGrad {
        loss: value,
        weights: params.weights.iter().map(|&w| grads.wrt(w)).collect(),
        biases: params.biases.iter().map(|b| b.map(|b| grads.wrt(b))).collect(),
    })
}

/// Generates adversarial inputs for `kind` and returns the resulting mean loss.
pub fn robust_loss<R: Rng>(
    view: &ParamView,
    batch: &Batch,
    kind: LossKind,
    attack: &AttackConfig,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("robust_loss on an empty batch".into()));
    }
    let x_adv = adversarial_examples(view, batch, kind, attack, rng)?;
    loss_value(view, batch, &x_adv, kind)
}
