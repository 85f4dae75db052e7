//! Builds data, runs federations and persists their metrics.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DatasetSpec, ExperimentConfig};
use crate::augment::AugmentFamily;
use crate::data::{
    dirichlet_partition, load_cifar10, load_cifar10_files, make_synthetic, split_labeled, split_stratified, Dataset,
    DirichletConfig, UnlabeledPool,
};
use crate::eval::{evaluate, partition_report, EvalReport};
use crate::federation::{Aggregator, Federation, MixWeights, RoundMetrics};
use crate::nn::ModelParams;
use crate::rng::{derive_seed, tag};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub const METRIC_COLUMNS: [&str; 16] = [
    "round",
    "acc_global",
    "acc_supervised",
    "acc_unsup_global",
    "loss_supervised",
    "loss_pseudo_ce",
    "loss_consistency",
    "loss_proximal",
    "pseudo_label_acceptance",
    "pseudo_label_precision",
    "probe_acceptance",
    "probe_precision",
    "probe_accuracy",
    "selected_clients",
    "dropped_clients",
    "q_snapshot",
];

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub labeled: Dataset,
    pub pool: UnlabeledPool,
    pub test: Dataset,
    pub family: AugmentFamily,
}

/// The labeled server set, unlabeled pool, test set and augmentation
/// family for one seed.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    let (rest, test) = match &cfg.dataset {
        DatasetSpec::Synthetic {
            classes,
            input_dim,
            spread,
            unlabeled,
        } => {
            let per_class = (unlabeled + cfg.split.labeled + cfg.split.test) / classes;
            let all = make_synthetic(*classes, per_class, *input_dim, *spread, seed)?;
            let (test, rest) = split_stratified(&all, cfg.split.test, seed)?;
            (rest, test)
        }
        DatasetSpec::Cifar10 { path } => {
            let train: Vec<PathBuf> = (1..=5).map(|i| path.join(format!("data_batch_{i}.bin"))).collect();
            let test_path = path.join("test_batch.bin");
            let missing: Vec<PathBuf> = train
                .iter()
                .chain([&test_path])
                .filter(|p| !p.is_file())
                .cloned()
                .collect();
            if !missing.is_empty() {
                return Err(Error::MissingFiles(missing));
            }
            let rest = load_cifar10_files(&train)?;
            let full_test = load_cifar10(&test_path)?;
            let test = if cfg.split.test >= full_test.len() {
                full_test
            } else {
                split_stratified(&full_test, cfg.split.test, seed)?.0
            };
            (rest, test)
        }
    };
    let (labeled, pool) = split_labeled(&rest, cfg.split.labeled, seed)?;
    let family = match pool.image_shape() {
        Some(shape) => AugmentFamily::Image {
            shape,
            shift_fraction: cfg.augment.shift_fraction,
        },
        None => AugmentFamily::jitter_for(pool.inputs(), cfg.augment.jitter_scale),
    };
    Ok(PreparedData {
        labeled,
        pool,
        test,
        family,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub client_sizes: Vec<usize>,
    pub effective_classes: Vec<usize>,
    pub class_shortfall: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub seed: u64,
    pub aggregator: Aggregator,
    pub mu: f64,
    pub mix: MixWeights,
    pub labeled: usize,
    pub rounds: usize,
    /// Test accuracy of the initial global model.
    pub initial_accuracy: f64,
    /// Test accuracy of the global model after the last round.
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    /// 0 when no round beat the initial model.
    pub best_round: usize,
    pub final_report: EvalReport,
    pub dropped_clients: usize,
    pub final_q: Vec<u64>,
    pub partition: PartitionSummary,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: Vec<RoundMetrics>,
    pub summary: RunSummary,
}

/// One complete federation for `seed`, in memory.
pub fn simulate(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = prepare_data(cfg, seed)?;
    let plan = dirichlet_partition(
        &data.pool,
        &DirichletConfig {
            mu: cfg.partition.mu,
            client_count: cfg.federation.client_count,
            seed: derive_seed(seed, &[tag::PARTITION]),
            quantity_imbalance: cfg.partition.quantity_imbalance,
        },
    )?;
    let report = partition_report(&plan, &data.pool)?;
    let initial = ModelParams::glorot(&cfg.model_dims(data.pool.input_dim()), derive_seed(seed, &[tag::INIT]))?;
    let mut fed = Federation::new(
        cfg.federation_config(seed),
        cfg.loss,
        cfg.pseudo_label,
        data.family,
        initial,
        data.labeled,
        data.pool,
        &plan,
        data.test,
    )?
    .with_probe(cfg.metrics.probe);

    let initial_accuracy = fed.global_accuracy()?;
    let metrics = fed.run()?;
    let final_report = evaluate(&fed.server.omega, fed.test_set())?;
    let (best_round, best_accuracy) =
        metrics
            .iter()
            .map(|m| (m.round, m.acc_global))
            .fold(
                (0, initial_accuracy),
                |best, cur| if cur.1 > best.1 { cur } else { best },
            );
    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        seed,
        aggregator: cfg.federation.aggregator,
        mu: cfg.partition.mu,
        mix: cfg.federation.mix,
        labeled: cfg.split.labeled,
        rounds: cfg.federation.rounds,
        initial_accuracy,
        final_accuracy: final_report.accuracy,
        best_accuracy,
        best_round,
        final_report,
        dropped_clients: metrics.iter().map(|m| m.dropped.len()).sum(),
        final_q: fed.frequency_table(),
        partition: PartitionSummary {
            client_sizes: report.totals,
            effective_classes: report.effective_classes,
            class_shortfall: plan.class_shortfall.clone(),
        },
    };
    Ok(RunOutcome { metrics, summary })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn joined<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

/// Metrics as CSV text with the fixed column set.
pub fn metrics_csv(metrics: &[RoundMetrics]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRIC_COLUMNS)?;
    for m in metrics {
        w.write_record([
            m.round.to_string(),
            m.acc_global.to_string(),
            m.acc_supervised.to_string(),
            cell(m.acc_unsup_global),
            m.loss_supervised.to_string(),
            cell(m.loss_pseudo_ce),
            cell(m.loss_consistency),
            cell(m.loss_proximal),
            cell(m.pseudo_label_acceptance),
            cell(m.pseudo_label_precision),
            cell(m.probe_acceptance),
            cell(m.probe_precision),
            cell(m.probe_accuracy),
            joined(&m.selected),
            joined(&m.dropped),
            joined(&m.q_snapshot),
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::io("<metrics buffer>", e.into_error()))
}

/// Writes through a sibling `.partial` file so readers never see half a file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut partial = path.as_os_str().to_owned();
    partial.push(".partial");
    let partial = PathBuf::from(partial);
    fs::write(&partial, bytes).map_err(|e| Error::io(&partial, e))?;
    fs::rename(&partial, path).map_err(|e| Error::io(path, e))
}

pub fn run_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// `config.toml`, `metrics.csv` and `summary.json` for one run.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, outcome: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut snapshot = cfg.clone();
    snapshot.run.seeds = vec![outcome.summary.seed];
    snapshot.grid = Default::default();
    write_atomic(&dir.join("config.toml"), snapshot.to_toml()?.as_bytes())?;
    write_atomic(&dir.join("metrics.csv"), &metrics_csv(&outcome.metrics)?)?;
    let mut json = serde_json::to_vec_pretty(&outcome.summary)?;
    json.push(b'\n');
    write_atomic(&dir.join("summary.json"), &json)
}

/// Every seed of `cfg`, written under `out/seed-N/`. Seeds run in parallel.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    cfg.run
        .seeds
        .par_iter()
        .map(|&seed| {
            let outcome = simulate(cfg, seed)?;
            write_run(&run_dir(out, seed), cfg, &outcome)?;
            Ok(outcome)
        })
        .collect()
}

/// One point of a sweep.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub name: String,
    pub config: ExperimentConfig,
}

fn push_axis<T: Clone>(cells: Vec<GridCell>, values: &[T], apply: impl Fn(&mut GridCell, &T)) -> Vec<GridCell> {
    if values.is_empty() {
        return cells;
    }
    let mut out = Vec::with_capacity(cells.len() * values.len());
    for c in cells {
        for v in values {
            let mut next = c.clone();
            apply(&mut next, v);
            out.push(next);
        }
    }
    out
}

/// Cartesian product of the grid axes, in a fixed order.
pub fn grid_cells(cfg: &ExperimentConfig) -> Vec<GridCell> {
    let base = GridCell {
        name: String::new(),
        config: ExperimentConfig {
            grid: Default::default(),
            ..cfg.clone()
        },
    };
    let add = |name: &mut String, part: String| {
        if !name.is_empty() {
            name.push('_');
        }
        name.push_str(&part);
    };
    let g = &cfg.grid;
    let mut cells = vec![base];
    cells = push_axis(cells, &g.mu, |c, mu| {
        c.config.partition.mu = *mu;
        add(&mut c.name, format!("mu-{mu}"));
    });
    cells = push_axis(cells, &g.mix, |c, m| {
        c.config.federation.mix = *m;
        add(&mut c.name, format!("mix-{}-{}-{}", m.alpha, m.beta, m.gamma));
    });
    cells = push_axis(cells, &g.labeled, |c, n| {
        c.config.split.labeled = *n;
        add(&mut c.name, format!("labeled-{n}"));
    });
    cells = push_axis(cells, &g.aggregator, |c, a| {
        c.config.federation.aggregator = *a;
        add(&mut c.name, a.name().to_string());
    });
    for c in &mut cells {
        if c.name.is_empty() {
            c.name = "base".into();
        }
    }
    cells
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    pub name: String,
    pub seeds: Vec<u64>,
    pub final_accuracy: Vec<f64>,
    pub best_accuracy: Vec<f64>,
    pub final_mean: f64,
    pub final_std: f64,
}

/// Runs every cell × seed (in parallel) under `out/<cell>/seed-N/` and
/// writes `out/grid.json`.
pub fn run_grid(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<CellSummary>> {
    cfg.validate()?;
    let cells = grid_cells(cfg);
    for c in &cells {
        c.config.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|i| cfg.run.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<(usize, RunSummary)> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let c = &cells[i];
            let outcome = simulate(&c.config, seed)?;
            write_run(&run_dir(&out.join(&c.name), seed), &c.config, &outcome)?;
            Ok((i, outcome.summary))
        })
        .collect::<Result<_>>()?;
    let summaries: Vec<CellSummary> = cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let runs: Vec<&RunSummary> = results.iter().filter(|(j, _)| *j == i).map(|(_, s)| s).collect();
            let finals: Vec<f64> = runs.iter().map(|s| s.final_accuracy).collect();
            let (final_mean, final_std) = mean_std(&finals);
            CellSummary {
                name: c.name.clone(),
                seeds: runs.iter().map(|s| s.seed).collect(),
                best_accuracy: runs.iter().map(|s| s.best_accuracy).collect(),
                final_accuracy: finals,
                final_mean,
                final_std,
            }
        })
        .collect();
    let mut json = serde_json::to_vec_pretty(&serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "cells": summaries,
    }))?;
    json.push(b'\n');
    write_atomic(&out.join("grid.json"), &json)?;
    Ok(summaries)
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub aggregator: Aggregator,
    pub seed: u64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub best_round: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorStats {
    pub aggregator: Aggregator,
    pub final_mean: f64,
    pub final_std: f64,
    pub best_mean: f64,
    pub best_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub schema_version: u32,
    pub rows: Vec<ComparisonRow>,
    pub stats: Vec<AggregatorStats>,
}

impl ComparisonTable {
    pub fn row(&self, aggregator: Aggregator, seed: u64) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.aggregator == aggregator && r.seed == seed)
    }

    /// Fixed-width text rendering.
    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.aggregator.name().len())
            .max()
            .unwrap_or(10)
            .max(10);
        let mut s = format!(
            "{:<width$}  {:>6}  {:>8}  {:>8}  {:>5}\n",
            "aggregator", "seed", "final", "best", "round"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<width$}  {:>6}  {:>8.4}  {:>8.4}  {:>5}\n",
                r.aggregator.name(),
                r.seed,
                r.final_accuracy,
                r.best_accuracy,
                r.best_round
            ));
        }
        s.push('\n');
        s.push_str(&format!(
            "{:<width$}  {:>17}  {:>17}\n",
            "aggregator", "final mean ± std", "best mean ± std"
        ));
        for a in &self.stats {
            s.push_str(&format!(
                "{:<width$}  {:>8.4} ± {:<6.4}  {:>8.4} ± {:<6.4}\n",
                a.aggregator.name(),
                a.final_mean,
                a.final_std,
                a.best_mean,
                a.best_std
            ));
        }
        s
    }
}

/// Runs each listed aggregator on every seed with otherwise identical
/// data, partition and initialization, and writes `compare.json` and
/// `compare.txt` next to the per-run directories.
pub fn compare_aggregators(cfg: &ExperimentConfig, aggregators: &[Aggregator], out: &Path) -> Result<ComparisonTable> {
    if aggregators.len() < 2 {
        return Err(Error::Config("compare needs at least two aggregators".into()));
    }
    cfg.validate()?;
    let mut unique = aggregators.to_vec();
    unique.sort_by_key(|a| a.name());
    unique.dedup();
    let jobs: Vec<(Aggregator, u64)> = unique
        .iter()
        .flat_map(|&a| cfg.run.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let done: Vec<ComparisonRow> = jobs
        .par_iter()
        .map(|&(aggregator, seed)| {
            let mut c = cfg.clone();
            c.federation.aggregator = aggregator;
            c.grid = Default::default();
            let outcome = simulate(&c, seed)?;
            write_run(&run_dir(&out.join(aggregator.name()), seed), &c, &outcome)?;
            Ok(ComparisonRow {
                aggregator,
                seed,
                final_accuracy: outcome.summary.final_accuracy,
                best_accuracy: outcome.summary.best_accuracy,
                best_round: outcome.summary.best_round,
            })
        })
        .collect::<Result<_>>()?;
    let rows: Vec<ComparisonRow> = aggregators
        .iter()
        .flat_map(|a| cfg.run.seeds.iter().map(move |s| (a, s)))
        .map(|(a, s)| {
            done.iter()
                .find(|r| r.aggregator == *a && r.seed == *s)
                .cloned()
                .expect("every job produced a row")
        })
        .collect();
    let stats = aggregators
        .iter()
        .map(|&aggregator| {
            let mine: Vec<&ComparisonRow> = rows.iter().filter(|r| r.aggregator == aggregator).collect();
            let (final_mean, final_std) = mean_std(&mine.iter().map(|r| r.final_accuracy).collect::<Vec<_>>());
            let (best_mean, best_std) = mean_std(&mine.iter().map(|r| r.best_accuracy).collect::<Vec<_>>());
            AggregatorStats {
                aggregator,
                final_mean,
                final_std,
                best_mean,
                best_std,
            }
        })
        .collect();
    let table = ComparisonTable {
        schema_version: SCHEMA_VERSION,
        rows,
        stats,
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut json = serde_json::to_vec_pretty(&table)?;
    json.push(b'\n');
    write_atomic(&out.join("compare.json"), &json)?;
    write_atomic(&out.join("compare.txt"), table.to_text().as_bytes())?;
    Ok(table)
}
