//! Prunable feed-forward networks.
//!
//! Each [`PrunableLayer`] carries its weights together with importance scores,
//! a binary top-k mask and two perturbation buffers (one in score space, one in
//! weight space). During mask search the effective weight is
//! `weights ⊙ topk(scores)`; during finetuning it is `(weights + ν) ⊙ mask`.
//! Gradients reach the scores through a straight-through estimator: the
//! derivative of the top-k selector is taken to be the identity, so the score
//! gradient is `∂L/∂W_eff ⊙ weights` at every position, retained or not.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// How scores are ranked when building a top-k mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    /// Largest `|s|` first.
    #[default]
    Magnitude,
    /// Largest signed `s` first.
    Signed,
}

/// Binary mask with exactly `k` ones at the highest-ranked entries; ties go to
/// the lowest flat index.
pub fn topk_mask(scores: &[f64], k: usize, ranking: Ranking) -> Result<Vec<f64>> {
    if k == 0 || k > scores.len() {
        return Err(Error::KOutOfRange {
            k,
            len: scores.len(),
        });
    }
    let key = |v: f64| match ranking {
        Ranking::Magnitude => v.abs(),
        Ranking::Signed => v,
    };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| key(scores[b]).total_cmp(&key(scores[a])).then(a.cmp(&b)));
    let mut mask = vec![0.0; scores.len()];
    for &i in &order[..k] {
        mask[i] = 1.0;
    }
    Ok(mask)
}

/// Retained count for a layer of `len` weights at the given pruned fraction.
pub fn retained_count(sparsity: f64, len: usize) -> usize {
    (((1.0 - sparsity) * len as f64).round() as usize).clamp(1, len.max(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsitySpec {
    pub sparsity: f64,
    /// Retained count per layer; non-prunable layers keep every weight.
    pub retained: Vec<usize>,
}

/// Which layers are excluded from pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Exemptions {
    pub first: bool,
    pub last: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunableLayer {
    /// `(in, out)` weight matrix.
    pub weights: Tensor,
    pub scores: Tensor,
    pub mask: Tensor,
    pub score_perturbation: Tensor,
    pub weight_perturbation: Tensor,
    pub bias: Option<Tensor>,
    pub prunable: bool,
    pub retained: usize,
}

impl PrunableLayer {
    pub fn new(weights: Tensor, bias: Option<Tensor>) -> Self {
        let shape = weights.shape().to_vec();
        let n = weights.numel();
        Self {
            scores: weights.clone(),
            mask: Tensor::ones(&shape),
            score_perturbation: Tensor::zeros(&shape),
            weight_perturbation: Tensor::zeros(&shape),
            weights,
            bias,
            prunable: true,
            retained: n,
        }
    }

    pub fn numel(&self) -> usize {
        self.weights.numel()
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    fn mask_for(&self, scores: &[f64], ranking: Ranking) -> Result<Vec<f64>> {
        if self.prunable {
            topk_mask(scores, self.retained, ranking)
        } else {
            Ok(vec![1.0; self.numel()])
        }
    }
}

/// Source of the scores used to build masks during search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreSource {
    Scores,
    /// `scores + score_perturbation`.
    Perturbed,
}

/// Which effective weights a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Dense,
    /// `weights ⊙ topk(source)`, masks recomputed on every call.
    Search(ScoreSource),
    /// `(weights + weight_perturbation) ⊙ mask` with the stored mask.
    Finetune,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<PrunableLayer>,
    pub ranking: Ranking,
}

impl Network {
    /// Uniform fan-in initialisation, `U(-1/sqrt(in), 1/sqrt(in))` for weights and biases.
    pub fn new<R: Rng>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer dims {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|pair| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut sample =
                    |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>();
                let w = Tensor::new(vec![fan_in, fan_out], sample(fan_in * fan_out))
                    .expect("weight shape");
                let b = Tensor::vector(sample(fan_out));
                PrunableLayer::new(w, Some(b))
            })
            .collect();
        Ok(Self {
            layers,
            ranking: Ranking::default(),
        })
    }

    pub fn from_layers(layers: Vec<PrunableLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Config(format!(
                    "layer dims do not conform: {:?} then {:?}",
                    pair[0].weights.shape(),
                    pair[1].weights.shape()
                )));
            }
        }
        Ok(Self {
            layers,
            ranking: Ranking::default(),
        })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim()];
        dims.extend(self.layers.iter().map(|l| l.out_dim()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map(|l| l.out_dim()).unwrap_or(0)
    }

    /// Total count of prunable weights.
    pub fn prunable_params(&self) -> usize {
        self.layers.iter().filter(|l| l.prunable).map(|l| l.numel()).sum()
    }

    /// Marks layers prunable and sets retained counts; masks are rebuilt from scores.
    pub fn apply_sparsity(&mut self, sparsity: f64, exempt: Exemptions) -> Result<SparsitySpec> {
        if !(0.0..1.0).contains(&sparsity) {
            return Err(Error::Config(format!("sparsity {sparsity} outside [0, 1)")));
        }
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.prunable = !((i == 0 && exempt.first) || (i == last && exempt.last));
            layer.retained = if layer.prunable {
                retained_count(sparsity, layer.numel())
            } else {
                layer.numel()
            };
        }
        self.refresh_masks()?;
        Ok(SparsitySpec {
            sparsity,
            retained: self.layers.iter().map(|l| l.retained).collect(),
        })
    }

    /// `scores = weights / max|weights|` per prunable layer. Returns the indices
    /// of layers whose weights are all zero (their scores are set to zero).
    pub fn init_scores(&mut self) -> Vec<usize> {
        let mut degenerate = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let max = layer.weights.data().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let scores = layer.scores.data_mut();
            if max == 0.0 {
                scores.iter_mut().for_each(|s| *s = 0.0);
                if layer.prunable {
                    log::warn!("layer {i}: all weights are zero, scores left at zero");
                    degenerate.push(i);
                }
            } else {
                for (s, w) in scores.iter_mut().zip(layer.weights.data()) {
                    *s = w / max;
                }
            }
        }
        degenerate
    }

    /// Rebuilds every stored mask from the current scores.
    pub fn refresh_masks(&mut self) -> Result<()> {
        let ranking = self.ranking;
        for layer in &mut self.layers {
            let mask = layer.mask_for(layer.scores.data(), ranking)?;
            layer.mask.data_mut().copy_from_slice(&mask);
        }
        Ok(())
    }

    /// Masks implied by `source` without touching stored state.
    pub fn search_masks(&self, source: ScoreSource) -> Result<Vec<Vec<f64>>> {
        self.layers
            .iter()
            .map(|l| match source {
                ScoreSource::Scores => l.mask_for(l.scores.data(), self.ranking),
                ScoreSource::Perturbed => {
                    let s: Vec<f64> = l
                        .scores
                        .data()
                        .iter()
                        .zip(l.score_perturbation.data())
                        .map(|(s, z)| s + z)
                        .collect();
                    l.mask_for(&s, self.ranking)
                }
            })
            .collect()
    }

    pub fn stored_masks(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|l| l.mask.data().to_vec()).collect()
    }

    pub fn dense_view(&self) -> ParamView {
        self.view_from(|l| l.weights.data().to_vec())
    }

    /// `(weights [+ ν]) ⊙ masks`.
    pub fn view_with_masks(&self, masks: &[Vec<f64>], perturb_weights: bool) -> ParamView {
        let mut i = 0;
        self.view_from(|l| {
            let m = &masks[i];
            i += 1;
            l.weights
                .data()
                .iter()
                .zip(l.weight_perturbation.data())
                .zip(m)
                .map(|((w, nu), m)| if perturb_weights { (w + nu) * m } else { w * m })
                .collect()
        })
    }

    pub fn search_view(&self, source: ScoreSource, perturb_weights: bool) -> Result<ParamView> {
        Ok(self.view_with_masks(&self.search_masks(source)?, perturb_weights))
    }

    pub fn finetune_view(&self, perturb_weights: bool) -> ParamView {
        self.view_with_masks(&self.stored_masks(), perturb_weights)
    }

    pub fn view(&self, mode: ForwardMode) -> Result<ParamView> {
        match mode {
            ForwardMode::Dense => Ok(self.dense_view()),
            ForwardMode::Search(source) => self.search_view(source, false),
            ForwardMode::Finetune => Ok(self.finetune_view(true)),
        }
    }

    fn view_from(&self, mut eff: impl FnMut(&PrunableLayer) -> Vec<f64>) -> ParamView {
        ParamView {
            layers: self
                .layers
                .iter()
                .map(|l| ViewLayer {
                    weight: Tensor::new(l.weights.shape().to_vec(), eff(l)).expect("weight shape"),
                    bias: l.bias.clone(),
                })
                .collect(),
        }
    }

    /// Logits `(batch, classes)` under the given effective weights.
    pub fn masked_forward(&self, x: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        self.view(mode)?.logits(x)
    }

    /// Straight-through score gradients: `grad_eff ⊙ base` per prunable layer,
    /// where `base` is the weight the mask multiplies. Non-prunable layers get zeros.
    pub fn ste_score_grads(&self, weight_grads: &[Vec<f64>], perturb_weights: bool) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .zip(weight_grads)
            .map(|(l, g)| {
                if !l.prunable {
                    return vec![0.0; l.numel()];
                }
                l.weights
                    .data()
                    .iter()
                    .zip(l.weight_perturbation.data())
                    .zip(g)
                    .map(|((w, nu), g)| if perturb_weights { g * (w + nu) } else { g * w })
                    .collect()
            })
            .collect()
    }

    pub fn weights_flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.data().iter().copied()).collect()
    }

    pub fn scores(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|l| l.scores.data().to_vec()).collect()
    }

    pub fn set_scores(&mut self, scores: &[Vec<f64>]) {
        for (l, s) in self.layers.iter_mut().zip(scores) {
            l.scores.data_mut().copy_from_slice(s);
        }
    }

    /// Concatenated scores of prunable layers.
    pub fn prunable_scores_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .filter(|l| l.prunable)
            .flat_map(|l| l.scores.data().iter().copied())
            .collect()
    }

    /// Concatenated stored masks of prunable layers.
    pub fn prunable_mask_flat(&self) -> Vec<bool> {
        self.layers
            .iter()
            .filter(|l| l.prunable)
            .flat_map(|l| l.mask.data().iter().map(|&m| m != 0.0))
            .collect()
    }

    pub fn clear_perturbations(&mut self) {
        for l in &mut self.layers {
            l.score_perturbation.data_mut().iter_mut().for_each(|v| *v = 0.0);
            l.weight_perturbation.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Snapshot of effective parameters; what attacks and losses evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamView {
    pub layers: Vec<ViewLayer>,
}

/// Parameter leaves registered on a graph by [`ParamView::register`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Option<Var>>,
}

/// Handles produced by [`ParamView::forward_graph`].
#[derive(Debug, Clone)]
pub struct Tracked {
    pub logits: Var,
    pub params: ParamVars,
}

impl ParamView {
    pub fn register(&self, g: &mut Graph, track_weights: bool, track_biases: bool) -> ParamVars {
        let weights = self
            .layers
            .iter()
            .map(|l| g.leaf(l.weight.clone().with_requires_grad(track_weights)))
            .collect();
        let biases = self
            .layers
            .iter()
            .map(|l| l.bias.as_ref().map(|b| g.leaf(b.clone().with_requires_grad(track_biases))))
            .collect();
        ParamVars { weights, biases }
    }

    /// Records the relu MLP on `g` using already-registered parameters.
    pub fn forward_with(&self, g: &mut Graph, params: &ParamVars, x: Var) -> Result<Var> {
        let last = params.weights.len() - 1;
        let mut h = x;
        for (i, (&w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
            h = g.matmul(h, w)?;
            if let Some(b) = b {
                h = g.add(h, *b)?;
            }
            if i < last {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph,
        x: Var,
        track_weights: bool,
        track_biases: bool,
    ) -> Result<Tracked> {
        let params = self.register(g, track_weights, track_biases);
        let logits = self.forward_with(g, &params, x)?;
        Ok(Tracked { logits, params })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let t = self.forward_graph(&mut g, xv, false, false)?;
        Ok(g.value(t.logits).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
