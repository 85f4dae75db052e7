//! Loss terms for labels-at-server semi-supervised training.
//!
//! Server side: weighted cross-entropy on labeled data. Client side: a
//! composite of cross-entropy against confident pseudo-labels, consistency
//! between two perturbed views, and a squared-distance pull towards the
//! server's supervised model.
//!
//! Every term reports its value and, via [`crate::nn::backprop`], its exact
//! gradient. Terms are combined in a [`LossSpec`] and differentiated by
//! [`crate::nn::backward`].

use serde::{Deserialize, Serialize};

use crate::augment::{apply, augmentation_set, AugmentFamily, AugmentSpec};
use crate::nn::{
    argmax_rows, backprop, backward, forward, forward_cached, gather_rows, Batch, LossEvaluation, Matrix, ModelParams,
    PROB_CLAMP,
};
use crate::rng::derive_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub lambda_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_s: 1.0,
            lambda_1: 1.0,
            lambda_2: 1.0,
            lambda_l1: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_s", self.lambda_s),
            ("lambda_1", self.lambda_1),
            ("lambda_2", self.lambda_2),
            ("lambda_l1", self.lambda_l1),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoLabelConfig {
    /// Confidence threshold on the normalized summed prediction.
    pub tau: f64,
    /// Number of augmented views summed per sample.
    pub augment_count: usize,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig {
            tau: 0.80,
            augment_count: 5,
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must be in (0, 1], got {}", self.tau)));
        }
        if self.augment_count == 0 {
            return Err(Error::Config("augment_count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which distance the client consistency term uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyKind {
    /// Squared L2 distance between the two views' outputs.
    #[default]
    L2,
    /// KL divergence of the perturbed view from the clean input.
    Kl,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelBatch {
    pub accepted_inputs: Matrix,
    pub one_hot_labels: Matrix,
    pub accepted_mask: Vec<bool>,
    /// Argmax class of the summed prediction for every sample.
    pub predicted: Vec<usize>,
    /// Normalized max of the summed prediction for every sample.
    pub confidence: Vec<f64>,
    pub acceptance_rate: f64,
}

impl PseudoLabelBatch {
    pub fn accepted_count(&self) -> usize {
        self.accepted_mask.iter().filter(|&&a| a).count()
    }

    /// Labels of accepted samples, in sample order.
    pub fn accepted_labels(&self) -> Vec<usize> {
        self.accepted_mask
            .iter()
            .zip(&self.predicted)
            .filter(|(a, _)| **a)
            .map(|(_, &y)| y)
            .collect()
    }
}

/// One differentiable loss term. Values are unweighted.
#[derive(Debug, Clone, Copy)]
pub enum LossTerm<'a> {
    /// Mean over rows of `−Σ_c y_c log p_c`. Zero rows give zero loss.
    CrossEntropy { inputs: &'a Matrix, targets: &'a Matrix },
    /// Mean over rows of `‖f(view1) − f(view2)‖²`.
    ConsistencyL2 { view1: &'a Matrix, view2: &'a Matrix },
    /// Mean over rows of `Σ_c p_c log(p_c / q_c)`, `p = f(clean)`,
    /// `q = f(perturbed)`. Gradient flows through both sides.
    ConsistencyKl { clean: &'a Matrix, perturbed: &'a Matrix },
    /// `‖θ − anchor‖²`.
    Proximal { anchor: &'a ModelParams },
}

#[derive(Debug, Clone, Copy)]
pub struct WeightedTerm<'a> {
    pub weight: f64,
    pub term: LossTerm<'a>,
}

impl<'a> WeightedTerm<'a> {
    pub fn new(weight: f64, term: LossTerm<'a>) -> Self {
        WeightedTerm { weight, term }
    }
}

/// Weighted sum of loss terms.
#[derive(Debug, Clone, Default)]
pub struct LossSpec<'a> {
    pub terms: Vec<WeightedTerm<'a>>,
}

impl<'a> LossSpec<'a> {
    pub fn single(weight: f64, term: LossTerm<'a>) -> Self {
        LossSpec {
            terms: vec![WeightedTerm::new(weight, term)],
        }
    }

    pub fn push(&mut self, weight: f64, term: LossTerm<'a>) -> &mut Self {
        self.terms.push(WeightedTerm::new(weight, term));
        self
    }
}

fn clamp(p: f64) -> f64 {
    p.max(PROB_CLAMP)
}

fn clamp_slope(p: f64) -> f64 {
    if p >= PROB_CLAMP {
        1.0
    } else {
        0.0
    }
}

fn check_pair(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "views {:?} and {:?} differ in shape",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn check_targets(inputs: &Matrix, targets: &Matrix, model: &ModelParams) -> Result<()> {
    if targets.nrows() != inputs.nrows() || targets.ncols() != model.class_count() {
        return Err(Error::Shape(format!(
            "targets {:?} do not match {} rows x {} classes",
            targets.dim(),
            inputs.nrows(),
            model.class_count()
        )));
    }
    Ok(())
}

fn cross_entropy_value(p: &Matrix, targets: &Matrix) -> f64 {
    let n = p.nrows() as f64;
    let total: f64 = p
        .iter()
        .zip(targets.iter())
        .filter(|(_, &y)| y != 0.0)
        .map(|(&pv, &y)| -y * clamp(pv).ln())
        .sum();
    total / n
}

fn l2_value(p: &Matrix, q: &Matrix) -> f64 {
    let n = p.nrows() as f64;
    p.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n
}

fn kl_value(p: &Matrix, q: &Matrix) -> f64 {
    let n = p.nrows() as f64;
    p.iter()
        .zip(q.iter())
        .filter(|(&pv, _)| pv != 0.0)
        .map(|(&pv, &qv)| pv * (clamp(pv).ln() - clamp(qv).ln()))
        .sum::<f64>()
        / n
}

impl LossTerm<'_> {
    pub fn value(&self, model: &ModelParams) -> Result<f64> {
        match *self {
            LossTerm::CrossEntropy { inputs, targets } => {
                if inputs.nrows() == 0 {
                    return Ok(0.0);
                }
                check_targets(inputs, targets, model)?;
                Ok(cross_entropy_value(&forward(model, inputs)?, targets))
            }
            LossTerm::ConsistencyL2 { view1, view2 } => {
                check_pair(view1, view2)?;
                if view1.nrows() == 0 {
                    return Ok(0.0);
                }
                Ok(l2_value(&forward(model, view1)?, &forward(model, view2)?))
            }
            LossTerm::ConsistencyKl { clean, perturbed } => {
                check_pair(clean, perturbed)?;
                if clean.nrows() == 0 {
                    return Ok(0.0);
                }
                Ok(kl_value(&forward(model, clean)?, &forward(model, perturbed)?))
            }
            LossTerm::Proximal { anchor } => model.squared_distance(anchor),
        }
    }

    pub fn value_and_gradient(&self, model: &ModelParams) -> Result<(f64, ModelParams)> {
        match *self {
            LossTerm::CrossEntropy { inputs, targets } => {
                if inputs.nrows() == 0 {
                    return Ok((0.0, model.zeros_like()));
                }
                check_targets(inputs, targets, model)?;
                let cache = forward_cached(model, inputs)?;
                let n = inputs.nrows() as f64;
                let mut d = Matrix::zeros(cache.probs.dim());
                for ((g, &p), &y) in d.iter_mut().zip(cache.probs.iter()).zip(targets.iter()) {
                    if y != 0.0 {
                        *g = -y * clamp_slope(p) / clamp(p) / n;
                    }
                }
                let value = cross_entropy_value(&cache.probs, targets);
                Ok((value, backprop(model, inputs, &cache, &d)?))
            }
            LossTerm::ConsistencyL2 { view1, view2 } => {
                check_pair(view1, view2)?;
                if view1.nrows() == 0 {
                    return Ok((0.0, model.zeros_like()));
                }
                let c1 = forward_cached(model, view1)?;
                let c2 = forward_cached(model, view2)?;
                let n = view1.nrows() as f64;
                let d1 = (&c1.probs - &c2.probs) * (2.0 / n);
                let d2 = -&d1;
                let mut grad = backprop(model, view1, &c1, &d1)?;
                grad.add_scaled(&backprop(model, view2, &c2, &d2)?, 1.0)?;
                Ok((l2_value(&c1.probs, &c2.probs), grad))
            }
            LossTerm::ConsistencyKl { clean, perturbed } => {
                check_pair(clean, perturbed)?;
                if clean.nrows() == 0 {
                    return Ok((0.0, model.zeros_like()));
                }
                let cp = forward_cached(model, clean)?;
                let cq = forward_cached(model, perturbed)?;
                let n = clean.nrows() as f64;
                let mut dp = Matrix::zeros(cp.probs.dim());
                let mut dq = Matrix::zeros(cq.probs.dim());
                for (((gp, gq), &p), &q) in dp
                    .iter_mut()
                    .zip(dq.iter_mut())
                    .zip(cp.probs.iter())
                    .zip(cq.probs.iter())
                {
                    if p != 0.0 {
                        *gp = (clamp(p).ln() - clamp(q).ln() + p * clamp_slope(p) / clamp(p)) / n;
                        *gq = -p * clamp_slope(q) / clamp(q) / n;
                    }
                }
                let mut grad = backprop(model, clean, &cp, &dp)?;
                grad.add_scaled(&backprop(model, perturbed, &cq, &dq)?, 1.0)?;
                Ok((kl_value(&cp.probs, &cq.probs), grad))
            }
            LossTerm::Proximal { anchor } => {
                let diff = model.sub(anchor)?;
                let value = diff.values().iter().map(|v| v * v).sum();
                Ok((value, diff.scaled(2.0)))
            }
        }
    }
}

/// `λ_s ·` mean cross-entropy on a labeled batch, with its gradient.
pub fn supervised_loss(model: &ModelParams, batch: &Batch, weights: &LossWeights) -> Result<LossEvaluation> {
    let targets = batch
        .targets
        .as_ref()
        .ok_or_else(|| Error::Contract("supervised loss needs a batch with targets".into()))?;
    backward(
        model,
        &LossSpec::single(
            weights.lambda_s,
            LossTerm::CrossEntropy {
                inputs: &batch.inputs,
                targets,
            },
        ),
    )
}

/// `weight ·` mean squared distance between outputs on two augmented views
/// of `u`. The views use sub-seeds 1 and 2 of `seed`.
pub fn consistency_loss_l2(
    model: &ModelParams,
    u: &Matrix,
    aug1: &AugmentSpec,
    aug2: &AugmentSpec,
    seed: u64,
    weight: f64,
) -> Result<f64> {
    if u.nrows() == 0 {
        return Err(Error::Precondition("consistency loss needs at least one sample".into()));
    }
    let v1 = apply(aug1, u, derive_seed(seed, &[1]))?;
    let v2 = apply(aug2, u, derive_seed(seed, &[2]))?;
    Ok(weight * LossTerm::ConsistencyL2 { view1: &v1, view2: &v2 }.value(model)?)
}

/// Mean KL divergence between outputs on `u` and on its augmentation.
pub fn consistency_loss_kl(model: &ModelParams, u: &Matrix, aug: &AugmentSpec, seed: u64) -> Result<f64> {
    if u.nrows() == 0 {
        return Err(Error::Precondition("consistency loss needs at least one sample".into()));
    }
    let perturbed = apply(aug, u, derive_seed(seed, &[1]))?;
    LossTerm::ConsistencyKl {
        clean: u,
        perturbed: &perturbed,
    }
    .value(model)
}

/// Argmax pseudo-labels from `A` augmented views.
///
/// Predictions over the views are summed and divided by `A`, so the
/// threshold compares against a probability. Samples whose normalized max
/// reaches `tau` are accepted with a one-hot label at the argmax (ties go
/// to the lowest class).
pub fn make_pseudo_labels(
    model: &ModelParams,
    u: &Matrix,
    config: &PseudoLabelConfig,
    family: &AugmentFamily,
    seed: u64,
) -> Result<PseudoLabelBatch> {
    config.validate().map_err(|e| Error::Precondition(e.to_string()))?;
    let views = augmentation_set(u, config.augment_count, family, seed)?;
    let mut summed = Matrix::zeros((u.nrows(), model.class_count()));
    for v in &views {
        summed += &forward(model, v)?;
    }
    summed /= config.augment_count as f64;

    let predicted = argmax_rows(&summed);
    let confidence: Vec<f64> = summed
        .outer_iter()
        .zip(&predicted)
        .map(|(row, &c)| row[c] / row.sum())
        .collect();
    let accepted_mask: Vec<bool> = confidence.iter().map(|&c| c >= config.tau).collect();
    let rows: Vec<usize> = (0..u.nrows()).filter(|&i| accepted_mask[i]).collect();
    let mut one_hot_labels = Matrix::zeros((rows.len(), model.class_count()));
    for (r, &i) in rows.iter().enumerate() {
        one_hot_labels[[r, predicted[i]]] = 1.0;
    }
    let acceptance_rate = if u.nrows() == 0 {
        0.0
    } else {
        rows.len() as f64 / u.nrows() as f64
    };
    Ok(PseudoLabelBatch {
        accepted_inputs: gather_rows(u, &rows),
        one_hot_labels,
        accepted_mask,
        predicted,
        confidence,
        acceptance_rate,
    })
}

/// `λ_L1 · ‖ψ − σ‖²`.
pub fn proximal_penalty(psi: &ModelParams, sigma: &ModelParams, lambda_l1: f64) -> Result<f64> {
    Ok(lambda_l1 * psi.squared_distance(sigma)?)
}

/// Breakdown of one evaluation of the client objective.
#[derive(Debug, Clone)]
pub struct UnsupervisedEvaluation {
    pub total: f64,
    pub pseudo_ce: f64,
    pub consistency: f64,
    pub proximal: f64,
    pub gradient: ModelParams,
}

/// Perturbed views for one client mini-batch.
#[derive(Debug, Clone)]
pub struct ConsistencyViews {
    pub first: Matrix,
    pub second: Matrix,
}

impl ConsistencyViews {
    /// `(π1(u), π2(u))` for L2 consistency, `(u, π(u))` for KL.
    pub fn build(u: &Matrix, family: &AugmentFamily, kind: ConsistencyKind, seed: u64) -> Result<Self> {
        let (pi1, pi2) = family.consistency_views();
        match kind {
            ConsistencyKind::L2 => Ok(ConsistencyViews {
                first: apply(&pi1, u, derive_seed(seed, &[1]))?,
                second: apply(&pi2, u, derive_seed(seed, &[2]))?,
            }),
            ConsistencyKind::Kl => Ok(ConsistencyViews {
                first: u.clone(),
                second: apply(&pi1, u, derive_seed(seed, &[1]))?,
            }),
        }
    }
}

/// Builds the client objective from precomputed pseudo-labels and views.
/// Pseudo-label targets are plain constants here.
pub fn unsupervised_spec<'a>(
    labels: &'a PseudoLabelBatch,
    views: &'a ConsistencyViews,
    kind: ConsistencyKind,
    sigma: &'a ModelParams,
    weights: &LossWeights,
) -> LossSpec<'a> {
    let mut spec = LossSpec::default();
    spec.push(
        weights.lambda_1,
        LossTerm::CrossEntropy {
            inputs: &labels.accepted_inputs,
            targets: &labels.one_hot_labels,
        },
    );
    let consistency = match kind {
        ConsistencyKind::L2 => LossTerm::ConsistencyL2 {
            view1: &views.first,
            view2: &views.second,
        },
        ConsistencyKind::Kl => LossTerm::ConsistencyKl {
            clean: &views.first,
            perturbed: &views.second,
        },
    };
    spec.push(weights.lambda_2, consistency);
    spec.push(weights.lambda_l1, LossTerm::Proximal { anchor: sigma });
    spec
}

pub(crate) fn evaluate_unsupervised(model: &ModelParams, spec: &LossSpec<'_>) -> Result<UnsupervisedEvaluation> {
    let eval = backward(model, spec)?;
    Ok(UnsupervisedEvaluation {
        total: eval.total,
        pseudo_ce: eval.terms[0],
        consistency: eval.terms[1],
        proximal: eval.terms[2],
        gradient: eval.gradient,
    })
}

/// Client objective on a batch of unlabeled inputs: `λ_1 ·` CE against
/// confident pseudo-labels from `model` (mean over accepted samples, zero
/// if none), `+ λ_2 ·` consistency, `+ λ_L1 · ‖model − σ‖²`.
#[allow(clippy::too_many_arguments)]
pub fn unsupervised_loss(
    model: &ModelParams,
    u: &Matrix,
    sigma: &ModelParams,
    weights: &LossWeights,
    pl_config: &PseudoLabelConfig,
    family: &AugmentFamily,
    kind: ConsistencyKind,
    seed: u64,
) -> Result<(UnsupervisedEvaluation, PseudoLabelBatch)> {
    let labels = make_pseudo_labels(model, u, pl_config, family, derive_seed(seed, &[10]))?;
    let views = ConsistencyViews::build(u, family, kind, derive_seed(seed, &[11]))?;
    let spec = unsupervised_spec(&labels, &views, kind, sigma, weights);
    Ok((evaluate_unsupervised(model, &spec)?, labels))
}
