//! The round engine.
//!
//! One round:
//!
//! 1. the server copies the global model `ω_t` into `σ` and trains it on the
//!    labeled set;
//! 2. `max(⌊F·K⌋, 1)` clients are sampled without replacement and their
//!    participation counters `q` are incremented;
//! 3. each selected client starts from `ω_t` and trains on its unlabeled
//!    shard against pseudo-labels, consistency and a proximal pull towards
//!    the fresh `σ` (clients run in parallel);
//! 4. client models are aggregated into `ψ` (FedFreq or sample-count
//!    weights) and the new global model is `α·ψ + β·σ + γ·ω_t`.
//!
//! All randomness is keyed by `(seed, round, client, purpose)`, and every
//! aggregation runs in ascending client-id order, so results do not depend
//! on thread scheduling or on the order clients are listed in.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentFamily;
use crate::data::{Dataset, PartitionPlan, UnlabeledPool};
use crate::eval::{evaluate, evaluate_unlabeled, pseudo_label_quality};
use crate::nn::{gather_rows, minibatches, sgd_step, Batch, Matrix, ModelParams, SgdConfig};
use crate::rng::{derive_seed, rng_for, tag};
use crate::ssl_loss::{
    evaluate_unsupervised, make_pseudo_labels, supervised_loss, unsupervised_spec, ConsistencyKind, ConsistencyViews,
    LossWeights, PseudoLabelBatch, PseudoLabelConfig,
};
use crate::{Error, Result};

pub type ClientId = usize;

/// How client models and the supervised model become the next global model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Aggregator {
    /// FedFreq client weights, FedMix three-way mixing.
    #[serde(rename = "fedmix+fedfreq")]
    FedMixFedFreq,
    /// Sample-count client weights, FedMix three-way mixing.
    #[serde(rename = "fedmix+fedavg-weights")]
    FedMixFedAvgWeights,
    /// Sample-count client weights, `ω = ½ψ + ½σ` with no history term.
    #[serde(rename = "naive-decomposition")]
    NaiveDecomposition,
    /// No clients: the global model is the supervised model.
    #[serde(rename = "fedavg-supervised-only")]
    FedAvgSupervisedOnly,
}

impl Aggregator {
    pub const ALL: [Aggregator; 4] = [
        Aggregator::FedMixFedFreq,
        Aggregator::FedMixFedAvgWeights,
        Aggregator::NaiveDecomposition,
        Aggregator::FedAvgSupervisedOnly,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Aggregator::FedMixFedFreq => "fedmix+fedfreq",
            Aggregator::FedMixFedAvgWeights => "fedmix+fedavg-weights",
            Aggregator::NaiveDecomposition => "naive-decomposition",
            Aggregator::FedAvgSupervisedOnly => "fedavg-supervised-only",
        }
    }

    pub fn uses_clients(&self) -> bool {
        !matches!(self, Aggregator::FedAvgSupervisedOnly)
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Aggregator::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown aggregator {s:?}; expected one of {}",
                Aggregator::ALL.map(|a| a.name()).join(", ")
            ))
        })
    }
}

/// Convex weights of `(ψ, σ, ω_prev)` in the global update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for MixWeights {
    fn default() -> Self {
        MixWeights {
            alpha: 0.5,
            beta: 0.3,
            gamma: 0.2,
        }
    }
}

impl MixWeights {
    pub const NAIVE: MixWeights = MixWeights {
        alpha: 0.5,
        beta: 0.5,
        gamma: 0.0,
    };

    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let m = MixWeights { alpha, beta, gamma };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.alpha, self.beta, self.gamma];
        if parts.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("mixing weights must be non-negative: {parts:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixing weights sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub client_count: usize,
    /// Fraction of clients sampled per round, in `(0, 1]`.
    pub participation: f64,
    pub rounds: usize,
    pub mix: MixWeights,
    pub aggregator: Aggregator,
    pub server_sgd: SgdConfig,
    pub client_sgd: SgdConfig,
    #[serde(default)]
    pub consistency: ConsistencyKind,
    pub seed: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.client_count == 0 {
            return Err(Error::Config("client_count must be at least 1".into()));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::Config(format!(
                "participation must be in (0, 1], got {}",
                self.participation
            )));
        }
        self.mix.validate()?;
        self.server_sgd.validate()?;
        self.client_sgd.validate()
    }

    /// `max(⌊F·K⌋, 1)`.
    pub fn selected_count(&self) -> usize {
        // the epsilon keeps products like 0.05 · 100 from flooring to 4
        let m = (self.participation * self.client_count as f64 + 1e-9).floor() as usize;
        m.clamp(1, self.client_count)
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: ClientId,
    /// Unlabeled inputs only.
    pub shard: Matrix,
    /// Pool indices of the shard rows.
    pub shard_indices: Vec<usize>,
    /// Rounds in which this client was selected.
    pub q: u64,
}

impl ClientState {
    pub fn new(id: ClientId, shard: Matrix, shard_indices: Vec<usize>) -> Self {
        ClientState {
            id,
            shard,
            shard_indices,
            q: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.shard.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Clients built from a partition plan, each holding only its inputs.
pub fn clients_from_plan(pool: &UnlabeledPool, plan: &PartitionPlan) -> Vec<ClientState> {
    plan.clients
        .iter()
        .enumerate()
        .map(|(k, part)| ClientState::new(k, pool.shard_inputs(&part.sample_indices), part.sample_indices.clone()))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub omega: ModelParams,
    pub sigma: ModelParams,
    pub labeled: Dataset,
    /// Completed rounds.
    pub round: usize,
}

impl ServerState {
    pub fn new(omega: ModelParams, labeled: Dataset) -> Result<Self> {
        if labeled.input_dim() != omega.input_dim() || labeled.class_count() != omega.class_count() {
            return Err(Error::Shape(format!(
                "labeled data is {}→{}, model is {}→{}",
                labeled.input_dim(),
                labeled.class_count(),
                omega.input_dim(),
                omega.class_count()
            )));
        }
        Ok(ServerState {
            sigma: omega.clone(),
            omega,
            labeled,
            round: 0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ServerTrainOutcome {
    pub sigma: ModelParams,
    /// Supervised loss of the trained model on the full labeled set.
    pub loss: f64,
}

/// `σ ← ω`, then `epochs` passes of mini-batch SGD on the weighted
/// supervised loss.
pub fn server_train(
    state: &ServerState,
    sgd: &SgdConfig,
    weights: &LossWeights,
    seed: u64,
) -> Result<ServerTrainOutcome> {
    let data = &state.labeled;
    if data.is_empty() {
        return Err(Error::Precondition("server has no labeled data".into()));
    }
    let mut rng = rng_for(seed, &[tag::SERVER]);
    let mut sigma = state.omega.clone();
    for epoch in 0..sgd.epochs {
        for idx in minibatches(data.len(), sgd.batch_size, &mut rng) {
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
            let batch = Batch::labeled(gather_rows(data.inputs(), &idx), &labels, data.class_count(), idx)?;
            let eval = supervised_loss(&sigma, &batch, weights)?;
            if !eval.total.is_finite() {
                return Err(Error::Numerical {
                    layer: sigma.layer_count() - 1,
                    context: format!("server loss is {} in epoch {epoch}", eval.total),
                });
            }
            sigma = sgd_step(&sigma, &eval.gradient, sgd)?;
        }
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let full = Batch::labeled(data.inputs().clone(), data.labels(), data.class_count(), all)?;
    let loss = supervised_loss(&sigma, &full, weights)?.total;
    Ok(ServerTrainOutcome { sigma, loss })
}

/// Samples `max(⌊F·K⌋, 1)` distinct clients and bumps their counters.
/// Returned ids are ascending.
pub fn select_clients(clients: &mut [ClientState], config: &FederationConfig, round_seed: u64) -> Vec<ClientId> {
    let mut rng = rng_for(round_seed, &[tag::SELECT]);
    let m = config.selected_count().min(clients.len());
    let mut picked: Vec<usize> = sample(&mut rng, clients.len(), m).into_vec();
    picked.sort_unstable();
    for &i in &picked {
        clients[i].q += 1;
    }
    picked.into_iter().map(|i| clients[i].id).collect()
}

/// Everything a client needs besides the models.
#[derive(Debug, Clone, Copy)]
pub struct ClientSetup {
    pub sgd: SgdConfig,
    pub weights: LossWeights,
    pub pseudo_label: PseudoLabelConfig,
    pub family: AugmentFamily,
    pub consistency: ConsistencyKind,
}

#[derive(Debug, Clone)]
pub struct ClientOutcome {
    pub id: ClientId,
    pub psi: ModelParams,
    pub sample_count: usize,
    /// Pseudo-labels of the first epoch (made by `ω_t`), over the shard.
    pub initial_labels: PseudoLabelBatch,
    pub mean_pseudo_ce: f64,
    pub mean_consistency: f64,
    pub mean_proximal: f64,
}

fn restrict_labels(labels: &PseudoLabelBatch, shard: &Matrix, idx: &[usize]) -> PseudoLabelBatch {
    let accepted: Vec<usize> = idx.iter().copied().filter(|&i| labels.accepted_mask[i]).collect();
    let classes = labels.one_hot_labels.ncols();
    let mut one_hot = Matrix::zeros((accepted.len(), classes));
    for (r, &i) in accepted.iter().enumerate() {
        one_hot[[r, labels.predicted[i]]] = 1.0;
    }
    PseudoLabelBatch {
        accepted_inputs: gather_rows(shard, &accepted),
        one_hot_labels: one_hot,
        accepted_mask: idx.iter().map(|&i| labels.accepted_mask[i]).collect(),
        predicted: idx.iter().map(|&i| labels.predicted[i]).collect(),
        confidence: idx.iter().map(|&i| labels.confidence[i]).collect(),
        acceptance_rate: accepted.len() as f64 / idx.len().max(1) as f64,
    }
}

/// `ψ ← ω`, then local SGD on the unsupervised objective with `sigma` as
/// the proximal anchor. Pseudo-labels are recomputed from the current `ψ`
/// at the start of every local epoch.
pub fn client_update(
    client: &ClientState,
    omega: &ModelParams,
    sigma: &ModelParams,
    setup: &ClientSetup,
    seed: u64,
) -> Result<ClientOutcome> {
    if client.is_empty() {
        return Err(Error::Precondition(format!("client {} has an empty shard", client.id)));
    }
    omega.check_same_layout(sigma)?;
    let mut rng = rng_for(seed, &[tag::CLIENT]);
    let mut psi = omega.clone();
    let initial_labels = make_pseudo_labels(
        omega,
        &client.shard,
        &setup.pseudo_label,
        &setup.family,
        derive_seed(seed, &[0, 0]),
    )?;
    let (mut ce, mut cons, mut prox, mut steps) = (0.0, 0.0, 0.0, 0usize);
    for epoch in 0..setup.sgd.epochs {
        let labels = if epoch == 0 {
            initial_labels.clone()
        } else {
            make_pseudo_labels(
                &psi,
                &client.shard,
                &setup.pseudo_label,
                &setup.family,
                derive_seed(seed, &[epoch as u64, 0]),
            )?
        };
        for (b, idx) in minibatches(client.len(), setup.sgd.batch_size, &mut rng)
            .into_iter()
            .enumerate()
        {
            let u = gather_rows(&client.shard, &idx);
            let batch_labels = restrict_labels(&labels, &client.shard, &idx);
            let views = ConsistencyViews::build(
                &u,
                &setup.family,
                setup.consistency,
                derive_seed(seed, &[epoch as u64, 1, b as u64]),
            )?;
            let spec = unsupervised_spec(&batch_labels, &views, setup.consistency, sigma, &setup.weights);
            let eval = evaluate_unsupervised(&psi, &spec)?;
            if !eval.total.is_finite() {
                return Err(Error::Numerical {
                    layer: psi.layer_count() - 1,
                    context: format!("client {} loss is {} in epoch {epoch}", client.id, eval.total),
                });
            }
            ce += eval.pseudo_ce;
            cons += eval.consistency;
            prox += eval.proximal;
            steps += 1;
            psi = sgd_step(&psi, &eval.gradient, &setup.sgd)?;
        }
    }
    let steps = steps.max(1) as f64;
    Ok(ClientOutcome {
        id: client.id,
        psi,
        sample_count: client.len(),
        initial_labels,
        mean_pseudo_ce: ce / steps,
        mean_consistency: cons / steps,
        mean_proximal: prox / steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreqEntry {
    pub client: ClientId,
    pub q: u64,
    /// Relative frequency `q / Σq`.
    pub p: f64,
    /// Aggregation weight `(1 − p) / (|S| − 1)`.
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreqWeights {
    pub entries: Vec<FreqEntry>,
}

impl FreqWeights {
    pub fn weight_of(&self, client: ClientId) -> Option<f64> {
        self.entries.iter().find(|e| e.client == client).map(|e| e.w)
    }
}

/// FedFreq weights from `(client, q)` pairs.
///
/// `w_k = (1 − p_k) / (|S| − 1)` with `p_k = q_k / Q`, evaluated as
/// `(Q − q_k) / ((|S| − 1) · Q)` on integers so equal counts give exactly
/// `1 / |S|`. A single client gets weight 1.
pub fn fedfreq_from_counts(counts: &[(ClientId, u64)]) -> Result<FreqWeights> {
    if counts.is_empty() {
        return Err(Error::Precondition("no clients to weight".into()));
    }
    if let Some((id, _)) = counts.iter().find(|(_, q)| *q == 0) {
        return Err(Error::Precondition(format!(
            "client {id} has q = 0; selection must be counted first"
        )));
    }
    let mut sorted = counts.to_vec();
    sorted.sort_by_key(|(id, _)| *id);
    let total: u64 = sorted.iter().map(|(_, q)| q).sum();
    if sorted.len() == 1 {
        let (client, q) = sorted[0];
        return Ok(FreqWeights {
            entries: vec![FreqEntry {
                client,
                q,
                p: 1.0,
                w: 1.0,
            }],
        });
    }
    let denom = ((sorted.len() as u64 - 1) * total) as f64;
    Ok(FreqWeights {
        entries: sorted
            .into_iter()
            .map(|(client, q)| FreqEntry {
                client,
                q,
                p: q as f64 / total as f64,
                w: (total - q) as f64 / denom,
            })
            .collect(),
    })
}

pub fn fedfreq_weights(selected: &[&ClientState]) -> Result<FreqWeights> {
    let counts: Vec<(ClientId, u64)> = selected.iter().map(|c| (c.id, c.q)).collect();
    fedfreq_from_counts(&counts)
}

/// `Σ w_k · model_k` for convex weights. Each coordinate is clamped into
/// the range spanned by the inputs so rounding can never leave the hull.
/// Identical weights are evaluated as the plain mean `Σ model_k / n`, so
/// uniform weighting reproduces arithmetic averaging bit for bit.
pub fn weighted_average(entries: &[(&ModelParams, f64)]) -> Result<ModelParams> {
    let (first, w0) = entries
        .first()
        .ok_or_else(|| Error::Precondition("nothing to average".into()))?;
    let mut out = first.zeros_like();
    for (m, _) in entries {
        first.check_same_layout(m)?;
    }
    let uniform = entries.iter().all(|(_, w)| w == w0);
    let n = entries.len() as f64;
    let values = out.values_mut();
    for (j, slot) in values.iter_mut().enumerate() {
        let mut acc = 0.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (m, w) in entries {
            let v = m.values()[j];
            acc += if uniform { v } else { w * v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if uniform {
            acc /= n;
        }
        *slot = acc.clamp(lo, hi);
    }
    Ok(out)
}

/// `ψ = Σ w_k ψ_k` with FedFreq weights, summed in client-id order.
pub fn aggregate_unsupervised(models: &[(ClientId, ModelParams)], weights: &FreqWeights) -> Result<ModelParams> {
    let sum: f64 = weights.entries.iter().map(|e| e.w).sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!("weights sum to {sum}")));
    }
    let mut entries = Vec::with_capacity(weights.entries.len());
    for e in &weights.entries {
        let model = models
            .iter()
            .find(|(id, _)| *id == e.client)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Precondition(format!("no model uploaded by client {}", e.client)))?;
        entries.push((e.client, model, e.w));
    }
    entries.sort_by_key(|(id, _, _)| *id);
    let refs: Vec<(&ModelParams, f64)> = entries.into_iter().map(|(_, m, w)| (m, w)).collect();
    weighted_average(&refs)
}

/// `α·ψ + β·σ + γ·ω_prev`, clamped per coordinate into the hull of the
/// three inputs.
pub fn fedmix_mix(
    psi: &ModelParams,
    sigma: &ModelParams,
    omega_prev: &ModelParams,
    mix: &MixWeights,
) -> Result<ModelParams> {
    mix.validate()?;
    weighted_average(&[(psi, mix.alpha), (sigma, mix.beta), (omega_prev, mix.gamma)])
}

/// Sample-count weighted average `Σ (D_k / D) · model_k`.
pub fn fedavg_aggregate(models: &[&ModelParams], counts: &[usize]) -> Result<ModelParams> {
    if models.len() != counts.len() {
        return Err(Error::Shape(format!(
            "{} models, {} counts",
            models.len(),
            counts.len()
        )));
    }
    if counts.contains(&0) {
        return Err(Error::Precondition("sample counts must be positive".into()));
    }
    let total: usize = counts.iter().sum();
    let entries: Vec<(&ModelParams, f64)> = models
        .iter()
        .zip(counts)
        .map(|(m, &c)| (*m, c as f64 / total as f64))
        .collect();
    weighted_average(&entries)
}

/// Baseline update: count-weighted `ψ`, then `½ψ + ½σ`. `omega_prev` has
/// no influence; it is accepted so the call shape matches FedMix.
pub fn naive_decomposition_round(
    uploads: &[(ClientId, &ModelParams, usize)],
    sigma: &ModelParams,
    omega_prev: &ModelParams,
) -> Result<ModelParams> {
    let mut sorted = uploads.to_vec();
    sorted.sort_by_key(|(id, _, _)| *id);
    let models: Vec<&ModelParams> = sorted.iter().map(|(_, m, _)| *m).collect();
    let counts: Vec<usize> = sorted.iter().map(|(_, _, c)| *c).collect();
    let psi = fedavg_aggregate(&models, &counts)?;
    fedmix_mix(&psi, sigma, omega_prev, &MixWeights::NAIVE)
}

/// Per-round measurements. Optional fields are `None` when the quantity
/// does not exist for the run (e.g. no clients in the supervised-only
/// ablation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// 1-based index of the completed round.
    pub round: usize,
    pub acc_global: f64,
    pub acc_supervised: f64,
    pub acc_unsup_global: Option<f64>,
    pub loss_supervised: f64,
    pub loss_pseudo_ce: Option<f64>,
    pub loss_consistency: Option<f64>,
    pub loss_proximal: Option<f64>,
    /// Mean acceptance rate over the selected clients' first-epoch labels.
    pub pseudo_label_acceptance: Option<f64>,
    /// Precision of those labels against sealed truth (pooled).
    pub pseudo_label_precision: Option<f64>,
    /// Acceptance rate of the new global model over the whole unlabeled pool.
    pub probe_acceptance: Option<f64>,
    pub probe_precision: Option<f64>,
    /// Accuracy of the new global model on the unlabeled pool.
    pub probe_accuracy: Option<f64>,
    pub selected: Vec<ClientId>,
    pub dropped: Vec<ClientId>,
    pub q_snapshot: Vec<u64>,
}

/// A complete simulated federation.
#[derive(Debug, Clone)]
pub struct Federation {
    pub config: FederationConfig,
    pub setup: ClientSetup,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pool: UnlabeledPool,
    test: Dataset,
    probe: bool,
}

impl Federation {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: FederationConfig,
        weights: LossWeights,
        pseudo_label: PseudoLabelConfig,
        family: AugmentFamily,
        initial: ModelParams,
        labeled: Dataset,
        pool: UnlabeledPool,
        plan: &PartitionPlan,
        test: Dataset,
    ) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        pseudo_label.validate()?;
        if plan.clients.len() != config.client_count {
            return Err(Error::Config(format!(
                "partition has {} clients, federation expects {}",
                plan.clients.len(),
                config.client_count
            )));
        }
        if test.input_dim() != initial.input_dim() {
            return Err(Error::Shape("test set width does not match the model".into()));
        }
        let clients = clients_from_plan(&pool, plan);
        Ok(Federation {
            setup: ClientSetup {
                sgd: config.client_sgd,
                weights,
                pseudo_label,
                family,
                consistency: config.consistency,
            },
            config,
            server: ServerState::new(initial, labeled)?,
            clients,
            pool,
            test,
            probe: true,
        })
    }

    /// Turns the per-round whole-pool pseudo-label probe on or off.
    pub fn with_probe(mut self, probe: bool) -> Self {
        self.probe = probe;
        self
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn pool(&self) -> &UnlabeledPool {
        &self.pool
    }

    pub fn frequency_table(&self) -> Vec<u64> {
        self.clients.iter().map(|c| c.q).collect()
    }

    pub fn global_accuracy(&self) -> Result<f64> {
        Ok(evaluate(&self.server.omega, &self.test)?.accuracy)
    }

    /// Runs one round and advances the server state.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let t = self.server.round;
        let round_seed = derive_seed(self.config.seed, &[t as u64]);
        let trained = server_train(&self.server, &self.config.server_sgd, &self.setup.weights, round_seed)?;
        let sigma = trained.sigma;
        let omega = &self.server.omega;

        let mut selected = Vec::new();
        let mut dropped = Vec::new();
        let mut outcomes: Vec<ClientOutcome> = Vec::new();
        if self.config.aggregator.uses_clients() {
            selected = select_clients(&mut self.clients, &self.config, round_seed);
            let setup = &self.setup;
            let clients = &self.clients;
            let results: Vec<(ClientId, Result<ClientOutcome>)> = selected
                .par_iter()
                .map(|&id| {
                    let seed = derive_seed(round_seed, &[tag::CLIENT, id as u64]);
                    (id, client_update(&clients[id], omega, &sigma, setup, seed))
                })
                .collect();
            for (id, r) in results {
                match r {
                    Ok(o) => outcomes.push(o),
                    Err(Error::Numerical { .. }) => dropped.push(id),
                    Err(e) => return Err(e),
                }
            }
        }

        let psi = if outcomes.is_empty() {
            None
        } else {
            Some(match self.config.aggregator {
                Aggregator::FedMixFedFreq => {
                    let survivors: Vec<&ClientState> = outcomes.iter().map(|o| &self.clients[o.id]).collect();
                    let weights = fedfreq_weights(&survivors)?;
                    let uploads: Vec<(ClientId, ModelParams)> =
                        outcomes.iter().map(|o| (o.id, o.psi.clone())).collect();
                    aggregate_unsupervised(&uploads, &weights)?
                }
                _ => {
                    let models: Vec<&ModelParams> = outcomes.iter().map(|o| &o.psi).collect();
                    let counts: Vec<usize> = outcomes.iter().map(|o| o.sample_count).collect();
                    fedavg_aggregate(&models, &counts)?
                }
            })
        };

        let omega_next = match (self.config.aggregator, &psi) {
            (Aggregator::FedAvgSupervisedOnly, _) => sigma.clone(),
            // every selected client failed: nothing uploaded, ψ falls back to ω_t
            (agg, None) => {
                let mix = if agg == Aggregator::NaiveDecomposition {
                    MixWeights::NAIVE
                } else {
                    self.config.mix
                };
                fedmix_mix(omega, &sigma, omega, &mix)?
            }
            (Aggregator::NaiveDecomposition, Some(psi)) => fedmix_mix(psi, &sigma, omega, &MixWeights::NAIVE)?,
            (_, Some(psi)) => fedmix_mix(psi, &sigma, omega, &self.config.mix)?,
        };

        let metrics = self.measure(
            t + 1,
            &omega_next,
            &sigma,
            psi.as_ref(),
            trained.loss,
            &outcomes,
            selected,
            dropped,
            round_seed,
        )?;
        self.server.omega = omega_next;
        self.server.sigma = sigma;
        self.server.round += 1;
        Ok(metrics)
    }

    #[allow(clippy::too_many_arguments)]
    fn measure(
        &self,
        round: usize,
        omega: &ModelParams,
        sigma: &ModelParams,
        psi: Option<&ModelParams>,
        loss_supervised: f64,
        outcomes: &[ClientOutcome],
        selected: Vec<ClientId>,
        dropped: Vec<ClientId>,
        round_seed: u64,
    ) -> Result<RoundMetrics> {
        let truth = self.pool.sealed().reveal();
        let mean = |f: &dyn Fn(&ClientOutcome) -> f64| -> Option<f64> {
            (!outcomes.is_empty()).then(|| outcomes.iter().map(f).sum::<f64>() / outcomes.len() as f64)
        };
        let pseudo_label_precision = if outcomes.is_empty() {
            None
        } else {
            let (mut hit, mut acc) = (0usize, 0usize);
            for o in outcomes {
                let shard_truth: Vec<usize> = self.clients[o.id].shard_indices.iter().map(|&i| truth[i]).collect();
                let q = pseudo_label_quality(&o.initial_labels, &shard_truth)?;
                acc += q.accepted;
                hit += (q.precision * q.accepted as f64).round() as usize;
            }
            Some(if acc == 0 { 1.0 } else { hit as f64 / acc as f64 })
        };
        let (probe_acceptance, probe_precision, probe_accuracy) = if self.probe {
            let pl = make_pseudo_labels(
                omega,
                self.pool.inputs(),
                &self.setup.pseudo_label,
                &self.setup.family,
                derive_seed(round_seed, &[tag::PROBE]),
            )?;
            let q = pseudo_label_quality(&pl, truth)?;
            (
                Some(q.acceptance_rate),
                Some(q.precision),
                Some(evaluate_unlabeled(omega, &self.pool)?.accuracy),
            )
        } else {
            (None, None, None)
        };
        Ok(RoundMetrics {
            round,
            acc_global: evaluate(omega, &self.test)?.accuracy,
            acc_supervised: evaluate(sigma, &self.test)?.accuracy,
            acc_unsup_global: psi.map(|p| evaluate(p, &self.test).map(|r| r.accuracy)).transpose()?,
            loss_supervised,
            loss_pseudo_ce: mean(&|o| o.mean_pseudo_ce),
            loss_consistency: mean(&|o| o.mean_consistency),
            loss_proximal: mean(&|o| o.mean_proximal),
            pseudo_label_acceptance: mean(&|o| o.initial_labels.acceptance_rate),
            pseudo_label_precision,
            probe_acceptance,
            probe_precision,
            probe_accuracy,
            selected,
            dropped,
            q_snapshot: self.frequency_table(),
        })
    }

    /// Runs the configured number of rounds.
    pub fn run(&mut self) -> Result<Vec<RoundMetrics>> {
        (0..self.config.rounds).map(|_| self.run_round()).collect()
    }
}
