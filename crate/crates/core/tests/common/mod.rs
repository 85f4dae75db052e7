//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use fedmix::nn::{forward, layout_for, Matrix, ModelParams};
use fedmix::ssl_loss::LossTerm;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A model with uniform random parameters in `[-scale, scale]`.
pub fn random_model(dims: &[usize], scale: f64, r: &mut ChaCha8Rng) -> ModelParams {
    let layout = layout_for(dims).unwrap();
    let n: usize = layout.iter().map(|l| l.param_count()).sum();
    let values = (0..n).map(|_| r.random_range(-scale..=scale)).collect();
    ModelParams::new(layout, values).unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, r: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| r.random_range(-scale..=scale))
}

/// Random rows on the probability simplex.
pub fn random_targets(rows: usize, classes: usize, r: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::from_shape_fn((rows, classes), |_| r.random_range(0.01..1.0));
    for mut row in m.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    m
}

pub const FD_STEP: f64 = 1e-5;

/// Central differences of `term` at every parameter coordinate.
pub fn numeric_gradient(term: &LossTerm<'_>, model: &ModelParams) -> Vec<f64> {
    let mut probe = model.clone();
    (0..model.len())
        .map(|i| {
            let x = model.values()[i];
            probe.values_mut()[i] = x + FD_STEP;
            let up = term.value(&probe).unwrap();
            probe.values_mut()[i] = x - FD_STEP;
            let down = term.value(&probe).unwrap();
            probe.values_mut()[i] = x;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Mean cross-entropy computed row by row from softmax outputs.
pub fn oracle_cross_entropy(model: &ModelParams, inputs: &Matrix, targets: &Matrix) -> f64 {
    if inputs.nrows() == 0 {
        return 0.0;
    }
    let p = forward(model, inputs).unwrap();
    let mut total = 0.0;
    for i in 0..inputs.nrows() {
        for c in 0..targets.ncols() {
            let y = targets[[i, c]];
            if y != 0.0 {
                total -= y * p[[i, c]].max(1e-12).ln();
            }
        }
    }
    total / inputs.nrows() as f64
}

pub fn oracle_l2(model: &ModelParams, a: &Matrix, b: &Matrix) -> f64 {
    let pa = forward(model, a).unwrap();
    let pb = forward(model, b).unwrap();
    let s: f64 = pa.iter().zip(pb.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    s / a.nrows() as f64
}

pub fn oracle_sq_distance(a: &ModelParams, b: &ModelParams) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The FedFreq rule written exactly as stated: `p = q / Σq`,
/// `w = (1 − p) / (|S| − 1)`.
pub fn oracle_fedfreq(q: &[u64]) -> Vec<f64> {
    let total: u64 = q.iter().sum();
    let s = q.len() as f64;
    q.iter()
        .map(|&qk| (1.0 - qk as f64 / total as f64) / (s - 1.0))
        .collect()
}

/// Three hand-made CIFAR-10 records: labels 3, 0, 9; pixel byte `j` of
/// record `i` is `(31·i + 7·j) mod 256`.
pub fn cifar_fixture_bytes() -> Vec<u8> {
    let labels = [3u8, 0, 9];
    let mut bytes = Vec::with_capacity(3 * 3073);
    for (i, &label) in labels.iter().enumerate() {
        bytes.push(label);
        bytes.extend((0..3072).map(|j| ((31 * i + 7 * j) % 256) as u8));
    }
    bytes
}

pub fn fixture_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("fixtures")
        .join(name)
}
