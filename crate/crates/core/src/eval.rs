//! Accuracy, pseudo-label quality and partition diagnostics.

use serde::{Deserialize, Serialize};

use crate::data::{histogram, Dataset, PartitionPlan, UnlabeledPool};
use crate::nn::{argmax_rows, forward, Matrix, ModelParams};
use crate::ssl_loss::PseudoLabelBatch;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` for classes absent from the evaluation set.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

/// Scores argmax predictions (lowest class wins ties) against `labels`.
pub fn evaluate_inputs(model: &ModelParams, inputs: &Matrix, labels: &[usize], classes: usize) -> Result<EvalReport> {
    if inputs.nrows() == 0 {
        return Err(Error::Precondition("evaluation set is empty".into()));
    }
    if labels.len() != inputs.nrows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            inputs.nrows()
        )));
    }
    if model.class_count() != classes {
        return Err(Error::Shape(format!(
            "model predicts {} classes, data has {classes}",
            model.class_count()
        )));
    }
    let predicted = argmax_rows(&forward(model, inputs)?);
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&y, &p) in labels.iter().zip(&predicted) {
        confusion[y][p] += 1;
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    Ok(EvalReport {
        accuracy: correct as f64 / labels.len() as f64,
        per_class_accuracy,
        confusion,
    })
}

pub fn evaluate(model: &ModelParams, test: &Dataset) -> Result<EvalReport> {
    evaluate_inputs(model, test.inputs(), test.labels(), test.class_count())
}

/// Model accuracy on an unlabeled pool, scored against its sealed labels.
pub fn evaluate_unlabeled(model: &ModelParams, pool: &UnlabeledPool) -> Result<EvalReport> {
    evaluate_inputs(model, pool.inputs(), pool.sealed().reveal(), pool.class_count())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelQuality {
    /// Fraction of accepted labels that match the truth; 1.0 when nothing
    /// was accepted.
    pub precision: f64,
    pub acceptance_rate: f64,
    pub accepted: usize,
    /// True when no label was accepted and `precision` is the vacuous 1.0.
    pub vacuous: bool,
}

/// Precision of accepted pseudo-labels against `truth` (one entry per
/// sample in the batch, in order).
pub fn pseudo_label_quality(pl: &PseudoLabelBatch, truth: &[usize]) -> Result<PseudoLabelQuality> {
    if truth.len() != pl.accepted_mask.len() {
        return Err(Error::Shape(format!(
            "{} truth labels for {} pseudo-labeled samples",
            truth.len(),
            pl.accepted_mask.len()
        )));
    }
    let mut accepted = 0;
    let mut correct = 0;
    for ((&a, &p), &y) in pl.accepted_mask.iter().zip(&pl.predicted).zip(truth) {
        if a {
            accepted += 1;
            if p == y {
                correct += 1;
            }
        }
    }
    Ok(PseudoLabelQuality {
        precision: if accepted == 0 {
            1.0
        } else {
            correct as f64 / accepted as f64
        },
        acceptance_rate: pl.acceptance_rate,
        accepted,
        vacuous: accepted == 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    /// `histograms[client][class]`.
    pub histograms: Vec<Vec<usize>>,
    /// Classes with at least one sample, per client.
    pub effective_classes: Vec<usize>,
    pub totals: Vec<usize>,
}

pub fn partition_report(plan: &PartitionPlan, pool: &UnlabeledPool) -> Result<PartitionReport> {
    let truth = pool.sealed().reveal();
    if plan.class_count != pool.class_count() {
        return Err(Error::Consistency(format!(
            "plan has {} classes, pool has {}",
            plan.class_count,
            pool.class_count()
        )));
    }
    let mut histograms = Vec::with_capacity(plan.clients.len());
    for (k, client) in plan.clients.iter().enumerate() {
        if let Some(&bad) = client.sample_indices.iter().find(|&&i| i >= truth.len()) {
            return Err(Error::Consistency(format!(
                "client {k} holds index {bad}, pool has {} samples",
                truth.len()
            )));
        }
        let labels: Vec<usize> = client.sample_indices.iter().map(|&i| truth[i]).collect();
        histograms.push(histogram(&labels, plan.class_count));
    }
    Ok(PartitionReport {
        effective_classes: histograms
            .iter()
            .map(|h| h.iter().filter(|&&n| n > 0).count())
            .collect(),
        totals: histograms.iter().map(|h| h.iter().sum()).collect(),
        histograms,
    })
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;
    use crate::data::{dirichlet_partition, make_synthetic, split_labeled, DirichletConfig};
    use crate::nn::layout_for;

    fn identity_logits(classes: usize) -> ModelParams {
        let mut m = ModelParams::zeros(layout_for(&[classes, classes]).unwrap()).unwrap();
        for c in 0..classes {
            m.values_mut()[c * classes + c] = 1.0;
        }
        m
    }

    #[test]
    fn perfect_model_scores_one() {
        let ds = make_synthetic(3, 4, 3, 0.0, 1).unwrap();
        let report = evaluate(&identity_logits(3), &ds).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.total(), 12);
        assert_eq!(report.confusion[1], vec![0, 4, 0]);
    }

    #[test]
    fn zero_model_predicts_class_zero() {
        let ds = make_synthetic(4, 5, 4, 0.3, 1).unwrap();
        let zero = ModelParams::zeros(layout_for(&[4, 4]).unwrap()).unwrap();
        let report = evaluate(&zero, &ds).unwrap();
        assert_eq!(report.accuracy, 0.25);
        for (c, row) in report.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), 5);
            assert_eq!(row[0], 5, "class {c}");
        }
        let trace: usize = (0..4).map(|c| report.confusion[c][c]).sum();
        assert_eq!(report.accuracy, trace as f64 / report.total() as f64);
    }

    #[test]
    fn evaluate_rejects_wrong_width() {
        let ds = make_synthetic(2, 3, 5, 0.3, 1).unwrap();
        assert!(matches!(evaluate(&identity_logits(2), &ds), Err(Error::Shape(_))));
    }

    #[test]
    fn quality_counts_accepted_only() {
        let pl = PseudoLabelBatch {
            accepted_inputs: Matrix::zeros((2, 1)),
            one_hot_labels: array![[1.0, 0.0], [0.0, 1.0]],
            accepted_mask: vec![true, false, true],
            predicted: vec![0, 1, 1],
            confidence: vec![0.9, 0.5, 0.95],
            acceptance_rate: 2.0 / 3.0,
        };
        let q = pseudo_label_quality(&pl, &[0, 0, 1]).unwrap();
        assert_eq!(q.precision, 1.0);
        assert_eq!(q.accepted, 2);
        let q = pseudo_label_quality(&pl, &[1, 1, 1]).unwrap();
        assert_eq!(q.precision, 0.5);

        let none = PseudoLabelBatch {
            accepted_mask: vec![false; 3],
            acceptance_rate: 0.0,
            ..pl
        };
        let q = pseudo_label_quality(&none, &[0, 0, 0]).unwrap();
        assert!(q.vacuous);
        assert_eq!(q.precision, 1.0);
        assert_eq!(q.acceptance_rate, 0.0);
    }

    #[test]
    fn partition_report_conserves_counts() {
        let ds = make_synthetic(4, 31, 3, 0.5, 2).unwrap();
        let (_, pool) = split_labeled(&ds, 4, 2).unwrap();
        let single = dirichlet_partition(
            &pool,
            &DirichletConfig {
                mu: 1.0,
                client_count: 1,
                seed: 3,
                quantity_imbalance: false,
            },
        )
        .unwrap();
        let report = partition_report(&single, &pool).unwrap();
        assert_eq!(report.histograms[0], histogram(pool.sealed().reveal(), 4));

        let plan = dirichlet_partition(
            &pool,
            &DirichletConfig {
                mu: 0.5,
                client_count: 6,
                seed: 3,
                quantity_imbalance: false,
            },
        )
        .unwrap();
        let report = partition_report(&plan, &pool).unwrap();
        assert_eq!(report.totals, plan.client_sizes());
        assert_eq!(report.totals.iter().sum::<usize>(), pool.len());

        let mut broken = plan.clone();
        broken.clients[0].sample_indices.push(10_000);
        assert!(matches!(partition_report(&broken, &pool), Err(Error::Consistency(_))));
    }
}
