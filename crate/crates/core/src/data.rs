//! Datasets, the CIFAR-10 binary loader, labeled/unlabeled splitting and
//! Dirichlet non-IID partitioning.
//!
//! Unlabeled data keeps its ground truth in [`SealedLabels`]. Training code
//! only ever receives the input matrix; the labels exist so that the
//! simulator can measure pseudo-label quality and build partitions.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::ImageShape;
use crate::nn::{gather_rows, Matrix};
use crate::rng::{rng_for, tag, Rng};
use crate::{Error, Result};

/// Labeled samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    labels: Vec<usize>,
    class_count: usize,
    image_shape: Option<ImageShape>,
}

impl Dataset {
    pub fn new(
        inputs: Matrix,
        labels: Vec<usize>,
        class_count: usize,
        image_shape: Option<ImageShape>,
    ) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::Precondition("dataset must not be empty".into()));
        }
        if labels.len() != inputs.nrows() {
            return Err(Error::Shape(format!(
                "{} labels for {} samples",
                labels.len(),
                inputs.nrows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Precondition(format!(
                "label {bad} outside {class_count} classes"
            )));
        }
        if let Some(shape) = image_shape {
            if shape.len() != inputs.ncols() {
                return Err(Error::Shape(format!(
                    "image shape holds {} values, rows have {}",
                    shape.len(),
                    inputs.ncols()
                )));
            }
        }
        Ok(Dataset {
            inputs,
            labels,
            class_count,
            image_shape,
        })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn image_shape(&self) -> Option<ImageShape> {
        self.image_shape
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        histogram(&self.labels, self.class_count)
    }

    fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        Dataset::new(
            gather_rows(&self.inputs, rows),
            rows.iter().map(|&i| self.labels[i]).collect(),
            self.class_count,
            self.image_shape,
        )
    }
}

pub(crate) fn histogram(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for &y in labels {
        h[y] += 1;
    }
    h
}

/// Ground-truth labels of unlabeled data, for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct SealedLabels(Vec<usize>);

impl SealedLabels {
    /// Ground truth. Evaluation and partitioning only; never feed these to
    /// a training loss.
    pub fn reveal(&self) -> &[usize] {
        &self.0
    }
}

/// Unlabeled pool: inputs plus sealed ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledPool {
    inputs: Matrix,
    sealed: SealedLabels,
    class_count: usize,
    image_shape: Option<ImageShape>,
}

impl UnlabeledPool {
    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn sealed(&self) -> &SealedLabels {
        &self.sealed
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn image_shape(&self) -> Option<ImageShape> {
        self.image_shape
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inputs of the given samples.
    pub fn shard_inputs(&self, indices: &[usize]) -> Matrix {
        gather_rows(&self.inputs, indices)
    }
}

/// `classes` Gaussian blobs of `per_class` samples each. Class means are
/// the scaled unit vectors `e_c` when `input_dim ≥ classes` and seeded
/// random points on the unit sphere otherwise; `spread` is the per-feature
/// noise standard deviation. Samples are ordered class by class.
pub fn make_synthetic(classes: usize, per_class: usize, input_dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || per_class == 0 || input_dim == 0 {
        return Err(Error::Precondition(format!(
            "need classes >= 2, per_class >= 1, input_dim >= 1 (got {classes}, {per_class}, {input_dim})"
        )));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::Precondition(format!(
            "spread must be non-negative, got {spread}"
        )));
    }
    let mut rng = rng_for(seed, &[tag::DATA]);
    let means: Vec<Vec<f64>> = if input_dim >= classes {
        (0..classes)
            .map(|c| (0..input_dim).map(|j| if j == c { 1.0 } else { 0.0 }).collect())
            .collect()
    } else {
        (0..classes)
            .map(|_| {
                let v: Vec<f64> = (0..input_dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect()
    };
    let noise = Normal::new(0.0, spread.max(0.0)).expect("non-negative spread");
    let n = classes * per_class;
    let mut inputs = Matrix::zeros((n, input_dim));
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for i in 0..per_class {
            let mut row = inputs.row_mut(c * per_class + i);
            for (j, m) in mean.iter().enumerate() {
                row[j] = if spread == 0.0 { *m } else { m + noise.sample(&mut rng) };
            }
            labels.push(c);
        }
    }
    Dataset::new(inputs, labels, classes, None)
}

pub const CIFAR10_RECORD: usize = 1 + 3072;

/// Parses CIFAR-10 binary records: one label byte then 3072 channel-planar
/// pixel bytes, scaled to `[0, 1]`.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::Format {
            offset: 0,
            reason: "empty file".into(),
        });
    }
    let whole = bytes.len() / CIFAR10_RECORD;
    let tail = bytes.len() % CIFAR10_RECORD;
    if tail != 0 {
        let offset = (whole * CIFAR10_RECORD) as u64;
        return Err(Error::Format {
            offset,
            reason: format!(
                "truncated record: {tail} of {CIFAR10_RECORD} bytes present (file is {} bytes)",
                bytes.len()
            ),
        });
    }
    let mut inputs = Matrix::zeros((whole, 3072));
    let mut labels = Vec::with_capacity(whole);
    for (i, record) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
        let label = record[0];
        if label > 9 {
            return Err(Error::Format {
                offset: (i * CIFAR10_RECORD) as u64,
                reason: format!("label byte {label} is not a CIFAR-10 class"),
            });
        }
        labels.push(label as usize);
        for (dst, &px) in inputs.row_mut(i).iter_mut().zip(&record[1..]) {
            *dst = f64::from(px) / 255.0;
        }
    }
    Dataset::new(inputs, labels, 10, Some(ImageShape::CIFAR10))
}

pub fn load_cifar10(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10(&bytes)
}

/// Loads and concatenates several CIFAR-10 batch files.
pub fn load_cifar10_files<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::Precondition("no CIFAR-10 files given".into()));
    }
    let mut bytes = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let chunk = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        // validate each file on its own so offsets name the right file
        parse_cifar10(&chunk)?;
        bytes.extend(chunk);
    }
    parse_cifar10(&bytes)
}

/// Class-balanced split: `count / C` samples of every class go to the
/// first dataset, the rest to the second (in original order).
fn stratified_indices(
    labels: &[usize],
    classes: usize,
    count: usize,
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !count.is_multiple_of(classes) {
        return Err(Error::Capacity(format!(
            "{count} samples cannot be split evenly over {classes} classes"
        )));
    }
    let quota = count / classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut taken = vec![false; labels.len()];
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.len() < quota {
            return Err(Error::Capacity(format!(
                "class {c} has {} samples, quota is {quota}",
                members.len()
            )));
        }
        members.shuffle(rng);
        for &i in &members[..quota] {
            taken[i] = true;
        }
    }
    let (mut head, mut rest) = (Vec::with_capacity(count), Vec::new());
    for (i, t) in taken.into_iter().enumerate() {
        if t {
            head.push(i);
        } else {
            rest.push(i);
        }
    }
    Ok((head, rest))
}

/// Holds out `count` class-balanced samples (e.g. a test set).
pub fn split_stratified(pool: &Dataset, count: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut rng = rng_for(seed, &[tag::SPLIT_TEST]);
    let (head, rest) = stratified_indices(&pool.labels, pool.class_count, count, &mut rng)?;
    if head.is_empty() || rest.is_empty() {
        return Err(Error::Capacity("both sides of a split must be non-empty".into()));
    }
    Ok((pool.subset(&head)?, pool.subset(&rest)?))
}

/// Splits `pool` into a class-balanced labeled server set of `n_labeled`
/// samples and an unlabeled remainder.
pub fn split_labeled(pool: &Dataset, n_labeled: usize, seed: u64) -> Result<(Dataset, UnlabeledPool)> {
    if n_labeled == 0 || n_labeled > pool.len() {
        return Err(Error::Capacity(format!(
            "cannot take {n_labeled} labeled samples from a pool of {}",
            pool.len()
        )));
    }
    let mut rng = rng_for(seed, &[tag::SPLIT_LABELED]);
    let (head, rest) = stratified_indices(&pool.labels, pool.class_count, n_labeled, &mut rng)?;
    if rest.is_empty() {
        return Err(Error::Capacity("unlabeled remainder would be empty".into()));
    }
    let labeled = pool.subset(&head)?;
    let unlabeled = UnlabeledPool {
        inputs: gather_rows(&pool.inputs, &rest),
        sealed: SealedLabels(rest.iter().map(|&i| pool.labels[i]).collect()),
        class_count: pool.class_count,
        image_shape: pool.image_shape,
    };
    Ok((labeled, unlabeled))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirichletConfig {
    /// Symmetric concentration shared by every class.
    pub mu: f64,
    pub client_count: usize,
    pub seed: u64,
    /// Also draw per-client sample totals from a Dirichlet over clients.
    pub quantity_imbalance: bool,
}

impl DirichletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return Err(Error::Config(format!("mu must be positive, got {}", self.mu)));
        }
        if self.client_count == 0 {
            return Err(Error::Config("client_count must be at least 1".into()));
        }
        Ok(())
    }
}

/// One client's share of the unlabeled pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientPartition {
    /// Realized class proportions of the assigned samples.
    pub class_proportions: Vec<f64>,
    /// The Dirichlet draw the allocation aimed for.
    pub target_proportions: Vec<f64>,
    /// Sorted pool indices.
    pub sample_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub class_count: usize,
    pub pool_size: usize,
    pub clients: Vec<ClientPartition>,
    /// Per class, demand that exceeded the class supply and was filled
    /// from other classes instead.
    pub class_shortfall: Vec<usize>,
    /// Pool samples not assigned to any client.
    pub unassigned: usize,
}

impl PartitionPlan {
    pub fn client_sizes(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.sample_indices.len()).collect()
    }

    /// Golden-file form: client → sorted indices, proportions at 6 decimals.
    pub fn to_json(&self) -> serde_json::Value {
        let round6 = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| (x * 1e6).round() / 1e6).collect() };
        serde_json::json!({
            "class_count": self.class_count,
            "pool_size": self.pool_size,
            "unassigned": self.unassigned,
            "class_shortfall": self.class_shortfall,
            "clients": self.clients.iter().enumerate().map(|(k, c)| serde_json::json!({
                "client": k,
                "class_proportions": round6(&c.class_proportions),
                "target_proportions": round6(&c.target_proportions),
                "sample_indices": c.sample_indices,
            })).collect::<Vec<_>>(),
        })
    }
}

/// Symmetric Dirichlet draw via normalized Gamma(μ, 1) variates.
pub fn sample_dirichlet(mu: f64, dim: usize, rng: &mut Rng) -> Vec<f64> {
    let gamma = Gamma::new(mu, 1.0).expect("mu validated positive");
    let draws: Vec<f64> = (0..dim).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|g| g / sum).collect()
    } else {
        // every Gamma variate underflowed: all mass on one coordinate
        let hot = rng.random_range(0..dim);
        (0..dim).map(|i| if i == hot { 1.0 } else { 0.0 }).collect()
    }
}

/// Rounds `total · w_i / Σw` to integers summing to `total`, giving the
/// leftover units to the largest fractional parts (ties: lowest index).
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if sum.is_nan() || sum <= 0.0 {
        let mut out = vec![0; weights.len()];
        out[0] = total;
        return out;
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Splits the unlabeled pool across clients with Dirichlet class mixes.
///
/// Each client draws class proportions from a symmetric Dirichlet(μ) and
/// its sample total is rounded into per-class demands. Classes with more
/// demand than supply are shared proportionally to demand; clients left
/// short are then topped up from the remaining supply in proportion to
/// what is left, so every pool sample is assigned.
pub fn dirichlet_partition(pool: &UnlabeledPool, config: &DirichletConfig) -> Result<PartitionPlan> {
    config.validate()?;
    let n = pool.len();
    let k_count = config.client_count;
    let classes = pool.class_count;
    if n == 0 {
        return Err(Error::Precondition("unlabeled pool is empty".into()));
    }
    if n < k_count {
        return Err(Error::Capacity(format!(
            "{n} samples cannot give {k_count} clients a non-empty shard"
        )));
    }
    let mut rng = rng_for(config.seed, &[tag::PARTITION]);

    let totals: Vec<usize> = if config.quantity_imbalance {
        let shares = sample_dirichlet(config.mu, k_count, &mut rng);
        largest_remainder(n - k_count, &shares)
            .into_iter()
            .map(|t| t + 1)
            .collect()
    } else {
        largest_remainder(n, &vec![1.0; k_count])
    };

    let targets: Vec<Vec<f64>> = (0..k_count)
        .map(|_| sample_dirichlet(config.mu, classes, &mut rng))
        .collect();
    let demand: Vec<Vec<usize>> = targets
        .iter()
        .zip(&totals)
        .map(|(phi, &t)| largest_remainder(t, phi))
        .collect();

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in pool.sealed.reveal().iter().enumerate() {
        by_class[y].push(i);
    }
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }

    let mut alloc = vec![vec![0usize; classes]; k_count];
    let mut class_shortfall = vec![0usize; classes];
    let mut leftover = vec![0usize; classes];
    for c in 0..classes {
        let supply = by_class[c].len();
        let wanted: usize = demand.iter().map(|d| d[c]).sum();
        if wanted <= supply {
            for k in 0..k_count {
                alloc[k][c] = demand[k][c];
            }
            leftover[c] = supply - wanted;
        } else {
            let weights: Vec<f64> = demand.iter().map(|d| d[c] as f64).collect();
            for (k, share) in largest_remainder(supply, &weights).into_iter().enumerate() {
                alloc[k][c] = share;
            }
            class_shortfall[c] = wanted - supply;
        }
    }

    for k in 0..k_count {
        let have: usize = alloc[k].iter().sum();
        let deficit = totals[k].saturating_sub(have);
        let available: usize = leftover.iter().sum();
        if deficit == 0 || available == 0 {
            continue;
        }
        let weights: Vec<f64> = leftover.iter().map(|&l| l as f64).collect();
        let top_up = largest_remainder(deficit.min(available), &weights);
        for c in 0..classes {
            alloc[k][c] += top_up[c];
            leftover[c] -= top_up[c];
        }
    }

    let mut cursor = vec![0usize; classes];
    let mut clients = Vec::with_capacity(k_count);
    for (k, target) in targets.into_iter().enumerate() {
        let mut indices = Vec::with_capacity(totals[k]);
        for c in 0..classes {
            let take = alloc[k][c];
            indices.extend_from_slice(&by_class[c][cursor[c]..cursor[c] + take]);
            cursor[c] += take;
        }
        indices.sort_unstable();
        let size = indices.len();
        let class_proportions = if size == 0 {
            target.clone()
        } else {
            alloc[k].iter().map(|&a| a as f64 / size as f64).collect()
        };
        clients.push(ClientPartition {
            class_proportions,
            target_proportions: target,
            sample_indices: indices,
        });
    }
    let assigned: usize = clients.iter().map(|c| c.sample_indices.len()).sum();
    Ok(PartitionPlan {
        class_count: classes,
        pool_size: n,
        clients,
        class_shortfall,
        unassigned: n - assigned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced_pool(classes: usize, per_class: usize) -> UnlabeledPool {
        let ds = make_synthetic(classes, per_class + 1, 3, 0.5, 9).unwrap();
        let (_, pool) = split_labeled(&ds, classes, 1).unwrap();
        pool
    }

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat_n(fill, 3072));
        r
    }

    #[test]
    fn synthetic_counts_and_degenerate_spread() {
        let ds = make_synthetic(2, 5, 2, 0.0, 1).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.class_histogram(), vec![5, 5]);
        for (row, &y) in ds.inputs().outer_iter().zip(ds.labels()) {
            let expected = if y == 0 { [1.0, 0.0] } else { [0.0, 1.0] };
            assert_eq!(row.to_vec(), expected.to_vec());
        }
        assert_eq!(
            make_synthetic(3, 4, 2, 0.3, 5).unwrap(),
            make_synthetic(3, 4, 2, 0.3, 5).unwrap()
        );
        assert!(make_synthetic(1, 4, 2, 0.3, 5).is_err());
    }

    #[test]
    fn cifar_two_records() {
        let mut bytes = record(3, 0);
        bytes.extend(record(7, 255));
        let ds = parse_cifar10(&bytes).unwrap();
        assert_eq!(ds.labels(), &[3, 7]);
        assert_eq!(ds.input_dim(), 3072);
        assert_eq!(ds.class_count(), 10);
        assert_eq!(ds.inputs()[[1, 100]], 1.0);
        assert_eq!(ds.inputs()[[0, 100]], 0.0);
    }

    #[test]
    fn cifar_errors() {
        assert!(matches!(parse_cifar10(&[]), Err(Error::Format { offset: 0, .. })));
        let mut bytes = record(1, 4);
        bytes.extend(&[2, 0, 0]);
        match parse_cifar10(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("expected format error, got {other:?}"),
        }
        let mut bad = record(1, 4);
        bad.extend(record(10, 4));
        match parse_cifar10(&bad) {
            Err(Error::Format { offset, reason }) => {
                assert_eq!(offset, 3073);
                assert!(reason.contains("10"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn split_quota_arithmetic() {
        let pool = make_synthetic(10, 10, 4, 0.2, 3).unwrap();
        let (labeled, unlabeled) = split_labeled(&pool, 10, 8).unwrap();
        assert_eq!(labeled.class_histogram(), vec![1; 10]);
        assert_eq!(unlabeled.len(), 90);
        assert_eq!(histogram(unlabeled.sealed().reveal(), 10), vec![9; 10]);
        assert!(matches!(split_labeled(&pool, 100, 8), Err(Error::Capacity(_))));
        assert!(matches!(split_labeled(&pool, 15, 8), Err(Error::Capacity(_))));
    }

    #[test]
    fn split_is_disjoint() {
        let pool = make_synthetic(3, 7, 2, 1.0, 3).unwrap();
        let (labeled, unlabeled) = split_labeled(&pool, 6, 2).unwrap();
        let all: Vec<Vec<u64>> = pool
            .inputs()
            .outer_iter()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut seen = std::collections::HashSet::new();
        for row in labeled.inputs().outer_iter().chain(unlabeled.inputs().outer_iter()) {
            let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
            assert!(all.contains(&key));
            assert!(seen.insert(key));
        }
        assert_eq!(seen.len(), pool.len());
    }

    #[test]
    fn largest_remainder_sums_to_total() {
        assert_eq!(largest_remainder(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(largest_remainder(5, &[0.5, 0.25, 0.25]), vec![3, 1, 1]);
        assert_eq!(largest_remainder(0, &[0.3, 0.7]), vec![0, 0]);
    }

    #[test]
    fn single_client_gets_pool() {
        let pool = balanced_pool(4, 10);
        let plan = dirichlet_partition(
            &pool,
            &DirichletConfig {
                mu: 0.3,
                client_count: 1,
                seed: 5,
                quantity_imbalance: false,
            },
        )
        .unwrap();
        assert_eq!(plan.clients[0].sample_indices, (0..pool.len()).collect::<Vec<_>>());
        for p in &plan.clients[0].class_proportions {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn near_iid_for_huge_mu() {
        let pool = balanced_pool(5, 200);
        let plan = dirichlet_partition(
            &pool,
            &DirichletConfig {
                mu: 1e6,
                client_count: 4,
                seed: 11,
                quantity_imbalance: false,
            },
        )
        .unwrap();
        for c in &plan.clients {
            for p in &c.class_proportions {
                assert!((p - 0.2).abs() < 0.02, "{p}");
            }
        }
        assert_eq!(plan.unassigned, 0);
    }

    #[test]
    fn small_mu_produces_narrow_clients() {
        let pool = balanced_pool(10, 200);
        let mut seeds_with_narrow = 0;
        let mut near_single = 0;
        for seed in 0..5 {
            let plan = dirichlet_partition(
                &pool,
                &DirichletConfig {
                    mu: 0.1,
                    client_count: 100,
                    seed,
                    quantity_imbalance: false,
                },
            )
            .unwrap();
            // effective class count as the perplexity of the proportions
            let narrow = plan.clients.iter().any(|c| {
                let h: f64 = c
                    .target_proportions
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| -p * p.ln())
                    .sum();
                h.exp() < 2.0
            });
            if narrow {
                seeds_with_narrow += 1;
            }
            near_single += plan
                .clients
                .iter()
                .filter(|c| c.target_proportions.iter().filter(|&&p| p >= 0.01).count() < 2)
                .count();
        }
        assert_eq!(seeds_with_narrow, 5);
        assert!(near_single > 0);
    }

    #[test]
    fn quantity_imbalance_varies_sizes() {
        let pool = balanced_pool(10, 100);
        let plan = dirichlet_partition(
            &pool,
            &DirichletConfig {
                mu: 0.5,
                client_count: 10,
                seed: 2,
                quantity_imbalance: true,
            },
        )
        .unwrap();
        let sizes = plan.client_sizes();
        assert_eq!(sizes.iter().sum::<usize>(), pool.len());
        assert!(sizes.iter().all(|&s| s >= 1));
        assert!(sizes.iter().max() > sizes.iter().min());
    }

    #[test]
    fn partition_json_rounds_proportions() {
        let pool = balanced_pool(3, 4);
        let plan = dirichlet_partition(
            &pool,
            &DirichletConfig {
                mu: 1.0,
                client_count: 2,
                seed: 1,
                quantity_imbalance: false,
            },
        )
        .unwrap();
        let json = plan.to_json();
        let props = json["clients"][0]["class_proportions"].as_array().unwrap();
        for p in props {
            let v = p.as_f64().unwrap();
            assert_eq!(v, (v * 1e6).round() / 1e6);
        }
    }
}
