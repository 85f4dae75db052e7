//! Minimal dense classifier: tanh hidden layers, softmax output, manual
//! backpropagation and plain SGD.
//!
//! Parameters live in one flat `f64` vector ([`ModelParams`]) so that the
//! federation layer can add, scale and mix whole models without caring
//! about layer structure. Each layer stores its weight matrix row-major
//! (`rows` = outputs, `cols` = inputs) followed by its bias vector.
//!
//! Gradients are computed in two stages: a loss term reports the gradient
//! of its value with respect to the output probabilities, and [`backprop`]
//! pushes that through the softmax and the dense stack. Every loss term in
//! [`crate::ssl_loss`] plugs into the same path.

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{rng_for, tag, Rng};
use crate::ssl_loss::LossSpec;
use crate::{Error, Result};

pub type Matrix = ndarray::Array2<f64>;

/// Probabilities are clamped to this floor before any logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    /// Output width.
    pub rows: usize,
    /// Input width.
    pub cols: usize,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        self.rows * self.cols + self.rows
    }
}

/// Builds the layer layout for a stack of widths `[input, hidden.., classes]`.
pub fn layout_for(dims: &[usize]) -> Result<Vec<LayerShape>> {
    if dims.len() < 2 {
        return Err(Error::Shape(format!(
            "need at least input and output widths, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::Shape(format!("zero-width layer in {dims:?}")));
    }
    Ok(dims.windows(2).map(|w| LayerShape { rows: w[1], cols: w[0] }).collect())
}

/// Flat parameter vector with its layer layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    layout: Vec<LayerShape>,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn new(layout: Vec<LayerShape>, values: Vec<f64>) -> Result<Self> {
        if layout.is_empty() {
            return Err(Error::Shape("empty layout".into()));
        }
        for (l, pair) in layout.windows(2).enumerate() {
            if pair[0].rows != pair[1].cols {
                return Err(Error::Shape(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    l,
                    pair[0].rows,
                    l + 1,
                    pair[1].cols
                )));
            }
        }
        let expected: usize = layout.iter().map(LayerShape::param_count).sum();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "layout needs {expected} values, got {}",
                values.len()
            )));
        }
        let params = ModelParams { layout, values };
        params.check_finite()?;
        Ok(params)
    }

    pub fn zeros(layout: Vec<LayerShape>) -> Result<Self> {
        let n = layout.iter().map(LayerShape::param_count).sum();
        ModelParams::new(layout, vec![0.0; n])
    }

    /// Uniform Glorot initialization, `r = sqrt(6 / (fan_in + fan_out))`,
    /// zero biases.
    pub fn glorot(dims: &[usize], seed: u64) -> Result<Self> {
        let layout = layout_for(dims)?;
        let mut rng = rng_for(seed, &[tag::INIT]);
        let mut values = Vec::with_capacity(layout.iter().map(LayerShape::param_count).sum());
        for shape in &layout {
            let r = (6.0 / (shape.rows + shape.cols) as f64).sqrt();
            values.extend((0..shape.rows * shape.cols).map(|_| rng.random_range(-r..=r)));
            values.extend(std::iter::repeat_n(0.0, shape.rows));
        }
        ModelParams::new(layout, values)
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            layout: self.layout.clone(),
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn layout(&self) -> &[LayerShape] {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.layout[0].cols
    }

    pub fn class_count(&self) -> usize {
        self.layout[self.layout.len() - 1].rows
    }

    pub fn layer_count(&self) -> usize {
        self.layout.len()
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.layout[..layer].iter().map(LayerShape::param_count).sum()
    }

    /// Index range of layer `layer` (weights then biases) in the flat vector.
    pub fn layer_range(&self, layer: usize) -> std::ops::Range<usize> {
        let start = self.layer_offset(layer);
        start..start + self.layout[layer].param_count()
    }

    pub fn weights(&self, layer: usize) -> ArrayView2<'_, f64> {
        let shape = self.layout[layer];
        let start = self.layer_offset(layer);
        ArrayView2::from_shape(
            (shape.rows, shape.cols),
            &self.values[start..start + shape.rows * shape.cols],
        )
        .expect("layout checked at construction")
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        let shape = self.layout[layer];
        let start = self.layer_offset(layer) + shape.rows * shape.cols;
        ArrayView1::from(&self.values[start..start + shape.rows])
    }

    pub fn check_same_layout(&self, other: &ModelParams) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::Shape(format!(
                "layout mismatch: {:?} vs {:?}",
                self.layout, other.layout
            )));
        }
        Ok(())
    }

    /// First layer holding a non-finite value, if any.
    pub fn first_non_finite_layer(&self) -> Option<usize> {
        (0..self.layout.len()).find(|&l| self.values[self.layer_range(l)].iter().any(|v| !v.is_finite()))
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite_layer() {
            Some(layer) => Err(Error::Numerical {
                layer,
                context: "parameter is NaN or infinite".into(),
            }),
            None => Ok(()),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) -> Result<()> {
        self.check_same_layout(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scaled(&self, scale: f64) -> ModelParams {
        ModelParams {
            layout: self.layout.clone(),
            values: self.values.iter().map(|v| v * scale).collect(),
        }
    }

    pub fn sub(&self, other: &ModelParams) -> Result<ModelParams> {
        self.check_same_layout(other)?;
        Ok(ModelParams {
            layout: self.layout.clone(),
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn squared_distance(&self, other: &ModelParams) -> Result<f64> {
        self.check_same_layout(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A mini-batch. `targets`, when present, holds one simplex row per input.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Option<Matrix>,
    pub sample_ids: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Option<Matrix>, sample_ids: Vec<usize>) -> Result<Self> {
        if sample_ids.len() != inputs.nrows() {
            return Err(Error::Shape(format!(
                "{} sample ids for {} rows",
                sample_ids.len(),
                inputs.nrows()
            )));
        }
        if let Some(t) = &targets {
            if t.nrows() != inputs.nrows() {
                return Err(Error::Shape(format!(
                    "{} target rows for {} inputs",
                    t.nrows(),
                    inputs.nrows()
                )));
            }
            for (i, row) in t.outer_iter().enumerate() {
                let sum: f64 = row.sum();
                if row.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::Contract(format!(
                        "target row {i} is not a probability vector (sum {sum})"
                    )));
                }
            }
        }
        Ok(Batch {
            inputs,
            targets,
            sample_ids,
        })
    }

    pub fn labeled(inputs: Matrix, labels: &[usize], classes: usize, sample_ids: Vec<usize>) -> Result<Self> {
        Batch::new(inputs, Some(one_hot(labels, classes)?), sample_ids)
    }

    pub fn unlabeled(inputs: Matrix, sample_ids: Vec<usize>) -> Result<Self> {
        Batch::new(inputs, None, sample_ids)
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros((labels.len(), classes));
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Shape(format!("label {y} outside {classes} classes")));
        }
        m[[i, y]] = 1.0;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be a non-negative finite number, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Hidden activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Output of each hidden layer (after tanh), in order.
    pub hidden: Vec<Matrix>,
    pub probs: Matrix,
}

fn check_input(model: &ModelParams, inputs: &Matrix) -> Result<()> {
    if inputs.ncols() != model.input_dim() {
        return Err(Error::Shape(format!(
            "inputs have {} columns, model expects {}",
            inputs.ncols(),
            model.input_dim()
        )));
    }
    Ok(())
}

pub fn forward_cached(model: &ModelParams, inputs: &Matrix) -> Result<ForwardCache> {
    check_input(model, inputs)?;
    let last = model.layer_count() - 1;
    let mut hidden: Vec<Matrix> = Vec::with_capacity(last);
    for l in 0..=last {
        let a = if l == 0 { inputs } else { &hidden[l - 1] };
        let mut z = a.dot(&model.weights(l).t());
        z += &model.bias(l);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                layer: l,
                context: "pre-activation overflow in forward pass".into(),
            });
        }
        if l < last {
            z.mapv_inplace(f64::tanh);
            hidden.push(z);
        } else {
            return Ok(ForwardCache {
                hidden,
                probs: softmax_rows(&z),
            });
        }
    }
    unreachable!("layout is non-empty")
}

/// Class probabilities, one simplex row per input row.
pub fn forward(model: &ModelParams, inputs: &Matrix) -> Result<Matrix> {
    Ok(forward_cached(model, inputs)?.probs)
}

/// Pushes `d_probs` (gradient of a scalar loss with respect to the output
/// probabilities) back through the softmax and every dense layer.
pub fn backprop(model: &ModelParams, inputs: &Matrix, cache: &ForwardCache, d_probs: &Matrix) -> Result<ModelParams> {
    let p = &cache.probs;
    if d_probs.dim() != p.dim() {
        return Err(Error::Shape(format!(
            "output gradient {:?} does not match outputs {:?}",
            d_probs.dim(),
            p.dim()
        )));
    }
    // softmax Jacobian-vector product: p ⊙ (g − <g, p>)
    let inner = (d_probs * p).sum_axis(Axis(1)).insert_axis(Axis(1));
    let mut dz = p * &(d_probs - &inner);

    let mut grad = model.zeros_like();
    for l in (0..model.layer_count()).rev() {
        let a_prev = if l == 0 { inputs } else { &cache.hidden[l - 1] };
        let dw = dz.t().dot(a_prev);
        let db: Array1<f64> = dz.sum_axis(Axis(0));
        if dw.iter().chain(db.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                layer: l,
                context: "gradient overflow in backward pass".into(),
            });
        }
        let range = grad.layer_range(l);
        let slot = &mut grad.values[range];
        let (w_slot, b_slot) = slot.split_at_mut(dw.len());
        w_slot.iter_mut().zip(dw.iter()).for_each(|(s, v)| *s = *v);
        b_slot.iter_mut().zip(db.iter()).for_each(|(s, v)| *s = *v);

        if l > 0 {
            let da = dz.dot(&model.weights(l));
            let h = &cache.hidden[l - 1];
            dz = da * &h.mapv(|v| 1.0 - v * v);
        }
    }
    Ok(grad)
}

/// Result of evaluating a composite loss.
#[derive(Debug, Clone)]
pub struct LossEvaluation {
    pub total: f64,
    /// Weighted value of each term, in push order.
    pub terms: Vec<f64>,
    pub gradient: ModelParams,
}

/// Value and gradient of a weighted sum of loss terms.
///
/// The gradient is accumulated term by term, so it is exactly the weighted
/// sum of the per-term gradients. Zero-weighted terms are skipped and
/// contribute an exact zero.
pub fn backward(model: &ModelParams, spec: &LossSpec<'_>) -> Result<LossEvaluation> {
    let mut gradient = model.zeros_like();
    let mut terms = Vec::with_capacity(spec.terms.len());
    for term in &spec.terms {
        if term.weight == 0.0 {
            terms.push(0.0);
            continue;
        }
        let (value, g) = term.term.value_and_gradient(model)?;
        gradient.add_scaled(&g, term.weight)?;
        terms.push(term.weight * value);
    }
    if let Some(layer) = gradient.first_non_finite_layer() {
        return Err(Error::Numerical {
            layer,
            context: "composite gradient is not finite".into(),
        });
    }
    Ok(LossEvaluation {
        total: terms.iter().sum(),
        terms,
        gradient,
    })
}

/// Value of a composite loss without gradients.
pub fn loss_value(model: &ModelParams, spec: &LossSpec<'_>) -> Result<f64> {
    let mut total = 0.0;
    for term in &spec.terms {
        if term.weight != 0.0 {
            total += term.weight * term.term.value(model)?;
        }
    }
    Ok(total)
}

/// `model − learning_rate · gradient`.
pub fn sgd_step(model: &ModelParams, gradient: &ModelParams, config: &SgdConfig) -> Result<ModelParams> {
    let mut next = model.clone();
    next.add_scaled(gradient, -config.learning_rate)?;
    if let Some(layer) = next.first_non_finite_layer() {
        return Err(Error::Numerical {
            layer,
            context: "SGD update produced a non-finite parameter".into(),
        });
    }
    Ok(next)
}

/// Shuffled mini-batch index lists covering `0..n`.
pub fn minibatches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn gather_rows(m: &Matrix, rows: &[usize]) -> Matrix {
    m.select(Axis(0), rows)
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.outer_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
