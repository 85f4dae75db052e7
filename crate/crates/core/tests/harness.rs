use std::fs;
use std::path::Path;

use fedmix::federation::Aggregator;
use fedmix::harness::{
    compare_aggregators, curves_csv, export_curves, run_experiment, run_grid, DatasetSpec, ExperimentConfig,
    METRIC_COLUMNS,
};
use fedmix::Error;

fn tiny(rounds: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk_default();
    cfg.dataset = DatasetSpec::Synthetic {
        classes: 4,
        input_dim: 6,
        spread: 0.3,
        unlabeled: 120,
    };
    cfg.split.labeled = 20;
    cfg.split.test = 40;
    cfg.federation.client_count = 6;
    cfg.federation.participation = 0.5;
    cfg.federation.rounds = rounds;
    cfg.model.hidden = vec![8];
    cfg.run.seeds = vec![42];
    cfg
}

#[test]
fn one_round_one_row() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&tiny(1), dir.path()).unwrap();
    let run = dir.path().join("seed-42");
    let text = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], METRIC_COLUMNS.join(","));
    assert!(run.join("config.toml").is_file());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["seed"], 42);
    let leftovers: Vec<_> = fs::read_dir(&run)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".partial"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn snapshot_reloads_to_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(2);
    run_experiment(&cfg, dir.path()).unwrap();
    let snap = ExperimentConfig::load(dir.path().join("seed-42").join("config.toml")).unwrap();
    assert_eq!(snap.run.seeds, vec![42]);
    assert_eq!(snap.federation, cfg.federation);
    let again = tempfile::tempdir().unwrap();
    run_experiment(&snap, again.path()).unwrap();
    assert_eq!(
        fs::read(dir.path().join("seed-42/metrics.csv")).unwrap(),
        fs::read(again.path().join("seed-42/metrics.csv")).unwrap()
    );
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = tiny(3);
    cfg.run.seeds = vec![1, 2];
    run_experiment(&cfg, a.path()).unwrap();
    run_experiment(&cfg, b.path()).unwrap();
    for seed in [1, 2] {
        for file in ["metrics.csv", "summary.json", "config.toml"] {
            let rel = format!("seed-{seed}/{file}");
            assert_eq!(
                fs::read(a.path().join(&rel)).unwrap(),
                fs::read(b.path().join(&rel)).unwrap(),
                "{rel}"
            );
        }
    }
}

#[test]
fn mu_grid_gives_four_runs_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(1);
    cfg.grid.mu = vec![0.1, 1.0, 10.0, 100.0];
    cfg.run.seeds = vec![7, 8];
    let cells = run_grid(&cfg, dir.path()).unwrap();
    assert_eq!(cells.len(), 4);
    for c in &cells {
        assert_eq!(c.seeds, vec![7, 8]);
        for seed in [7, 8] {
            assert!(dir
                .path()
                .join(&c.name)
                .join(format!("seed-{seed}"))
                .join("metrics.csv")
                .is_file());
        }
    }
    assert!(dir.path().join("grid.json").is_file());
}

#[test]
fn duplicate_aggregators_give_identical_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(2);
    cfg.run.seeds = vec![3, 4];
    let table = compare_aggregators(
        &cfg,
        &[
            Aggregator::FedMixFedFreq,
            Aggregator::FedMixFedFreq,
            Aggregator::FedAvgSupervisedOnly,
        ],
        dir.path(),
    )
    .unwrap();
    assert_eq!(table.rows.len(), 6);
    assert_eq!(table.rows[0], table.rows[2]);
    assert_eq!(table.rows[1], table.rows[3]);
    assert_eq!(table.stats[0], table.stats[1]);
    let text = fs::read_to_string(dir.path().join("compare.txt")).unwrap();
    assert!(text.contains("fedavg-supervised-only"));
    assert!(dir.path().join("compare.json").is_file());
    assert!(matches!(
        compare_aggregators(&cfg, &[Aggregator::FedMixFedFreq], dir.path()),
        Err(Error::Config(_))
    ));
}

fn write_metrics(dir: &Path, run: &str, rounds: usize) {
    let d = dir.join(run);
    fs::create_dir_all(&d).unwrap();
    let mut text = String::from(
        "round,acc_global,acc_supervised,loss_supervised,loss_proximal,pseudo_label_acceptance,selected_clients\n",
    );
    for t in 1..=rounds {
        text.push_str(&format!("{t},0.{t},0.2,1.5,0.01,0.3,1;2\n"));
    }
    fs::write(d.join("metrics.csv"), text).unwrap();
}

#[test]
fn export_counts_rows_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    write_metrics(dir.path(), "a/seed-1", 3);
    write_metrics(dir.path(), "b/seed-1", 3);
    let path = export_curves(dir.path(), None).unwrap();
    let first = fs::read(&path).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    // 2 runs × 3 rounds × 5 numeric metrics, plus the header
    assert_eq!(text.lines().count(), 31);
    assert_eq!(text.lines().next().unwrap(), "run,round,metric,value");
    assert_eq!(text.lines().nth(1).unwrap(), "a/seed-1,1,acc_global,0.1");
    export_curves(dir.path(), None).unwrap();
    assert_eq!(fs::read(&path).unwrap(), first);
}

#[test]
fn export_of_real_runs_skips_empty_cells() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(2);
    cfg.federation.aggregator = Aggregator::FedAvgSupervisedOnly;
    cfg.metrics.probe = false;
    run_experiment(&cfg, dir.path()).unwrap();
    let text = String::from_utf8(curves_csv(dir.path()).unwrap()).unwrap();
    // round-wise: acc_global, acc_supervised, loss_supervised only
    assert_eq!(text.lines().count(), 1 + 2 * 3);
}

#[test]
fn export_errors_name_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    match export_curves(dir.path(), None) {
        Err(Error::MissingFiles(p)) => assert_eq!(p.len(), 1),
        other => panic!("{other:?}"),
    }
    let gone = dir.path().join("nope");
    match export_curves(&gone, None) {
        Err(Error::MissingFiles(p)) => assert_eq!(p, vec![gone.clone()]),
        other => panic!("{other:?}"),
    }
    let run = dir.path().join("cell/seed-1");
    fs::create_dir_all(&run).unwrap();
    fs::write(run.join("summary.json"), "{}").unwrap();
    write_metrics(dir.path(), "other/seed-1", 1);
    match export_curves(dir.path(), None) {
        Err(e @ Error::MissingFiles(_)) => assert!(e.to_string().contains("cell/seed-1/metrics.csv"), "{e}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn shipped_configs_parse_and_round_trip() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap();
            let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg, "{}", path.display());
            seen += 1;
        }
    }
    assert!(seen >= 1);
    let desk = ExperimentConfig::load(root.join("desk.toml")).unwrap();
    let mut expected = ExperimentConfig::desk_default();
    expected.run = desk.run.clone();
    assert_eq!(desk, expected);
}

#[test]
fn missing_cifar_files_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(1);
    cfg.dataset = DatasetSpec::Cifar10 {
        path: dir.path().to_path_buf(),
    };
    match fedmix::harness::simulate(&cfg, 1) {
        Err(Error::MissingFiles(p)) => assert_eq!(p.len(), 6),
        other => panic!("{:?}", other.map(|_| ())),
    }
}
