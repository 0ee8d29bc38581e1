//! ℓ∞ projected-gradient attacks and robust-accuracy evaluation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{argmax, ParamView};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.08,
            alpha: 0.02,
            steps: 10,
            random_start: true,
            clamp_lo: 0.0,
            clamp_hi: 1.0,
        }
    }
}

impl AttackConfig {
    /// Zero-budget configuration: attacks return their input unchanged.
    pub fn none() -> Self {
        Self {
            epsilon: 0.0,
            alpha: 1.0,
            steps: 1,
            random_start: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return bad(format!("attack epsilon {} must be >= 0", self.epsilon));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("attack alpha {} must be > 0", self.alpha));
        }
        if self.epsilon > 0.0 && self.alpha > self.epsilon {
            return bad(format!(
                "attack alpha {} exceeds epsilon {}",
                self.alpha, self.epsilon
            ));
        }
        if self.steps == 0 {
            return bad("attack steps must be >= 1".into());
        }
        if self.clamp_lo >= self.clamp_hi {
            return bad(format!(
                "clamp box [{}, {}] is empty",
                self.clamp_lo, self.clamp_hi
            ));
        }
        Ok(())
    }
}

/// What the attacker maximises.
#[derive(Debug, Clone, Copy)]
pub enum AttackObjective<'a> {
    /// Mean cross-entropy against the true labels.
    CrossEntropy,
    /// Mean `KL(clean || adversarial)` against fixed clean log-probabilities.
    Kl { clean_logp: &'a Tensor },
}

fn objective_input_grad(
    view: &ParamView,
    x: &Tensor,
    y: &[usize],
    objective: AttackObjective<'_>,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_requires_grad(true));
    let params = view.register(&mut g, false, false);
    let logits = view.forward_with(&mut g, &params, xv)?;
    let logp = g.log_softmax(logits)?;
    let per_row = match objective {
        AttackObjective::CrossEntropy => g.nll(logp, y)?,
        AttackObjective::Kl { clean_logp } => {
            let clean = g.constant(clean_logp.clone());
            g.kl_div(clean, logp)?
        }
    };
    let loss = g.mean(per_row)?;
    Ok(g.backward(loss)?.wrt(xv))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// PGD: `x ← clamp_box(proj_ε(x + α·sign(∇_x ℓ)))`, optionally from a uniform
/// random start in the ε-ball.
pub fn pgd_attack<R: Rng>(
    view: &ParamView,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    objective: AttackObjective<'_>,
    rng: &mut R,
) -> Result<Tensor> {
    pgd_attack_traced(view, x, y, cfg, objective, rng, |_, _| {})
}

/// As [`pgd_attack`], calling `on_step(step, x_adv)` after the random start
/// (step 0) and after every projected step.
pub fn pgd_attack_traced<R: Rng>(
    view: &ParamView,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    objective: AttackObjective<'_>,
    rng: &mut R,
    mut on_step: impl FnMut(usize, &Tensor),
) -> Result<Tensor> {
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let (eps, lo, hi) = (cfg.epsilon, cfg.clamp_lo, cfg.clamp_hi);
    let project = |orig: f64, v: f64| v.clamp(orig - eps, orig + eps).clamp(lo, hi);

    let mut adv = x.clone();
    if cfg.random_start {
        for (a, &o) in adv.data_mut().iter_mut().zip(x.data()) {
            *a = project(o, o + rng.random_range(-eps..=eps));
        }
    }
    on_step(0, &adv);
    for step in 1..=cfg.steps {
        let grad = objective_input_grad(view, &adv, y, objective)?;
        for ((a, &o), g) in adv.data_mut().iter_mut().zip(x.data()).zip(&grad) {
            *a = project(o, *a + cfg.alpha * sign(*g));
        }
        on_step(step, &adv);
    }
    Ok(adv)
}

/// Evaluation attack: PGD with several random restarts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub attack: AttackConfig,
    pub restarts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            attack: AttackConfig {
                steps: 50,
                random_start: true,
                ..AttackConfig::default()
            },
            restarts: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    /// Percent correct on clean inputs.
    pub clean: f64,
    /// Percent correct under every restart of the attack.
    pub robust: f64,
}

pub fn clean_accuracy(view: &ParamView, batch: &Batch) -> Result<f64> {
    let pred = view.predict(&batch.x)?;
    let correct = pred.iter().zip(&batch.y).filter(|(p, y)| p == y).count();
    Ok(100.0 * correct as f64 / batch.len().max(1) as f64)
}

pub fn evaluate<R: Rng>(
    view: &ParamView,
    batch: &Batch,
    eval: &EvalConfig,
    rng: &mut R,
) -> Result<Accuracy> {
    let clean_pred = view.predict(&batch.x)?;
    let mut robust: Vec<bool> = clean_pred.iter().zip(&batch.y).map(|(p, y)| p == y).collect();
    let clean = 100.0 * robust.iter().filter(|&&c| c).count() as f64 / batch.len().max(1) as f64;
    for _ in 0..eval.restarts.max(1) {
        let adv = pgd_attack(
            view,
            &batch.x,
            &batch.y,
            &eval.attack,
            AttackObjective::CrossEntropy,
            rng,
        )?;
        let logits = view.logits(&adv)?;
        for (i, r) in robust.iter_mut().enumerate() {
            *r &= argmax(logits.row(i)) == batch.y[i];
        }
    }
    let robust = 100.0 * robust.iter().filter(|&&c| c).count() as f64 / batch.len().max(1) as f64;
    Ok(Accuracy { clean, robust })
}
