//! Round protocol: client sampling, extractor broadcast, two-phase local
//! training, data-volume weighted extractor aggregation, and the Standalone
//! and homogeneous FedAvg baselines.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{BatchPlan, ClientPartition, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{self, client_round_flops, evaluate, CostLedger, LedgerEntry, RoundReport};
use crate::model::{build_cnn, build_extractor, GradMode, Model, ModelSpec};
use crate::ops::{cross_entropy_rows, softmax_cross_entropy_batch};
use crate::params::{sgd_step, Manifest, ParamSet};
use crate::rng::{self, derive_seed, Domain, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Shared-extractor protocol.
    PFedES,
    /// Local training only, nothing transmitted.
    Standalone,
    /// Whole-model averaging over homogeneous clients.
    FedAvg,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::PFedES => "pfedes",
            Mode::Standalone => "standalone",
            Mode::FedAvg => "fedavg",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "pfedes" => Ok(Mode::PFedES),
            "standalone" => Ok(Mode::Standalone),
            "fedavg" => Ok(Mode::FedAvg),
            other => Err(format!("unknown mode `{other}` (expected pfedes, standalone or fedavg)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub num_clients: usize,
    /// Fraction of clients sampled per round.
    pub client_fraction: f64,
    pub rounds: usize,
    /// Local model epochs per round.
    pub local_epochs: usize,
    /// Extractor epochs per round.
    pub extractor_epochs: usize,
    pub lr_model: f64,
    pub lr_extractor: f64,
    /// Weight of the enhanced-input loss, in `(0, 0.5]`.
    pub mu: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            num_clients: 10,
            client_fraction: 1.0,
            rounds: 20,
            local_epochs: 1,
            extractor_epochs: 5,
            lr_model: 0.01,
            lr_extractor: 0.01,
            mu: 0.2,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl Hyperparams {
    /// `K = round(C·N)`, at least one.
    pub fn clients_per_round(&self) -> usize {
        ((self.client_fraction * self.num_clients as f64).round() as usize).clamp(1, self.num_clients.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Err(Error::config(key, reason));
        if self.num_clients == 0 {
            return bad("num_clients", "must be at least 1".into());
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return bad("client_fraction", format!("must be in (0, 1], got {}", self.client_fraction));
        }
        if self.rounds == 0 {
            return bad("rounds", "must be at least 1".into());
        }
        if self.local_epochs == 0 {
            return bad("local_epochs", "must be at least 1".into());
        }
        if self.extractor_epochs == 0 {
            return bad("extractor_epochs", "must be at least 1".into());
        }
        for (key, lr) in [("lr_model", self.lr_model), ("lr_extractor", self.lr_extractor)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(key, format!("must be positive, got {lr}"));
            }
        }
        if !(self.mu > 0.0 && self.mu <= 0.5) {
            return bad("mu", format!("must be in (0, 0.5], got {}", self.mu));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        Ok(())
    }
}

/// Uniform sample of `k` of `n` clients without replacement, fixed by
/// `(seed, round)`. Returned ascending.
pub fn sample_clients(n: usize, k: usize, round: usize, seed: u64) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::arg(format!("cannot sample {k} of {n} clients")));
    }
    let mut rng = rng::stream(seed, Domain::Sampler, round as u64);
    let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Runs the extractor on `x` (`[C,H,W]` or `[B,C,H,W]`); output has `x`'s shape.
pub fn enhance(extractor: &Model, x: &Tensor) -> Result<Tensor> {
    if x.rank() == 3 {
        let single = x.clone().reshape([1, x.shape()[0], x.shape()[1], x.shape()[2]])?;
        extractor.forward(&single)?.reshape(x.shape().to_vec())
    } else {
        extractor.forward(x)
    }
}

/// Loss and gradient of the model-training phase for one batch.
#[derive(Debug, Clone)]
pub struct ModelStep {
    /// `mu·enhanced_loss + (1 - mu)·original_loss`.
    pub loss: f64,
    pub enhanced_loss: f64,
    pub original_loss: f64,
    /// Gradient w.r.t. the model parameters.
    pub grads: ParamSet,
}

/// Loss and gradient of a single-objective step.
#[derive(Debug, Clone)]
pub struct Step {
    pub loss: f64,
    pub grads: ParamSet,
}

/// Combined loss of the model on enhanced and original inputs, with the
/// extractor frozen. Both paths run as one stacked batch.
pub fn model_loss_and_grad(
    model: &Model,
    extractor: &Model,
    x: &Tensor,
    labels: &[usize],
    mu: f64,
) -> Result<ModelStep> {
    let b = labels.len();
    let enhanced = extractor.forward(x)?;
    let mut stacked_shape = x.shape().to_vec();
    stacked_shape[0] *= 2;
    let mut stacked = enhanced.into_data();
    stacked.extend_from_slice(x.data());
    let stacked = Tensor::new(stacked_shape, stacked)?;
    let doubled: Vec<usize> = labels.iter().chain(labels).copied().collect();

    let (logits, trace) = model.forward_traced(&stacked)?;
    let (losses, mut grad) = cross_entropy_rows(&logits, &doubled)?;
    let enhanced_loss = metrics::mean(&losses[..b]);
    let original_loss = metrics::mean(&losses[b..]);
    let classes = logits.shape()[1];
    let (w_enh, w_orig) = (mu / b as f64, (1.0 - mu) / b as f64);
    for (row, g) in grad.data_mut().chunks_exact_mut(classes).enumerate() {
        let w = if row < b { w_enh } else { w_orig };
        g.iter_mut().for_each(|v| *v *= w);
    }
    let (grads, _) = model.backward(&trace, grad, GradMode::Full)?;
    Ok(ModelStep {
        loss: mu * enhanced_loss + (1.0 - mu) * original_loss,
        enhanced_loss,
        original_loss,
        grads: grads.expect("full gradients"),
    })
}

/// Cross-entropy of the frozen model on enhanced inputs, differentiated
/// w.r.t. the extractor parameters through the model.
pub fn extractor_loss_and_grad(
    model: &Model,
    extractor: &Model,
    x: &Tensor,
    labels: &[usize],
) -> Result<Step> {
    let (enhanced, ext_trace) = extractor.forward_traced(x)?;
    let (logits, model_trace) = model.forward_traced(&enhanced)?;
    let (loss, grad) = softmax_cross_entropy_batch(&logits, labels)?;
    let (_, upstream) = model.backward(&model_trace, grad, GradMode::InputOnly)?;
    let (grads, _) = extractor.backward(&ext_trace, upstream, GradMode::Full)?;
    Ok(Step {
        loss,
        grads: grads.expect("full gradients"),
    })
}

/// Plain cross-entropy step on original inputs (Standalone and FedAvg).
pub fn plain_loss_and_grad(model: &Model, x: &Tensor, labels: &[usize]) -> Result<Step> {
    let (logits, trace) = model.forward_traced(x)?;
    let (loss, grad) = softmax_cross_entropy_batch(&logits, labels)?;
    let (grads, _) = model.backward(&trace, grad, GradMode::Full)?;
    Ok(Step {
        loss,
        grads: grads.expect("full gradients"),
    })
}

/// Batch-averaged loss of one training phase.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhaseStats {
    pub mean_loss: f64,
    pub batches: usize,
    pub samples: usize,
}

impl PhaseStats {
    fn add(&mut self, loss: f64, samples: usize) {
        self.mean_loss += loss;
        self.batches += 1;
        self.samples += samples;
    }

    fn finish(mut self) -> Self {
        if self.batches > 0 {
            self.mean_loss /= self.batches as f64;
        }
        self
    }
}

/// What a client hands back to the server after one round.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client: usize,
    /// The locally trained extractor.
    pub extractor: ParamSet,
    pub data_volume: usize,
    pub model_stats: PhaseStats,
    pub extractor_stats: PhaseStats,
}

/// A client's private state. The local model stays here; only extractor
/// parameters are handed out by [`ClientState::client_update`].
#[derive(Debug, Clone)]
pub struct ClientState {
    id: usize,
    variant: u8,
    model: Model,
    partition: ClientPartition,
    rng: Rng,
}

impl ClientState {
    pub fn new(id: usize, variant: u8, model: Model, partition: ClientPartition, seed: u64) -> Self {
        Self {
            id,
            variant,
            model,
            partition,
            rng: rng::stream(seed, Domain::ClientTrain, id as u64),
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn variant(&self) -> u8 {
        self.variant
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn partition(&self) -> &ClientPartition {
        &self.partition
    }

    fn training_error(&self, what: &'static str, round: usize, batch: usize) -> Error {
        Error::Training {
            what,
            round,
            client: self.id,
            batch,
        }
    }

    /// Trains the local model for `local_epochs` on original and enhanced
    /// inputs with the extractor frozen.
    pub fn train_local_model(
        &mut self,
        ds: &Dataset,
        extractor: &Model,
        hp: &Hyperparams,
        round: usize,
    ) -> Result<PhaseStats> {
        let mut stats = PhaseStats::default();
        for _ in 0..hp.local_epochs {
            let plan = BatchPlan::new(&self.partition.train, hp.batch_size, &mut self.rng)?;
            for batch in plan.batches() {
                let (x, labels) = ds.gather(batch);
                let step = model_loss_and_grad(&self.model, extractor, &x, &labels, hp.mu)?;
                if !step.loss.is_finite() {
                    return Err(self.training_error("model", round, stats.batches));
                }
                let next = sgd_step(self.model.params(), &step.grads, hp.lr_model)?;
                self.model.set_params(next)?;
                stats.add(step.loss, batch.len());
            }
        }
        Ok(stats.finish())
    }

    /// Trains a copy of `start` for `extractor_epochs` through the frozen
    /// local model and returns the new extractor parameters.
    pub fn train_extractor(
        &mut self,
        ds: &Dataset,
        start: &Model,
        hp: &Hyperparams,
        round: usize,
    ) -> Result<(ParamSet, PhaseStats)> {
        let mut extractor = start.clone();
        let mut stats = PhaseStats::default();
        for _ in 0..hp.extractor_epochs {
            let plan = BatchPlan::new(&self.partition.train, hp.batch_size, &mut self.rng)?;
            for batch in plan.batches() {
                let (x, labels) = ds.gather(batch);
                let step = extractor_loss_and_grad(&self.model, &extractor, &x, &labels)?;
                if !step.loss.is_finite() {
                    return Err(self.training_error("extractor", round, stats.batches));
                }
                let next = sgd_step(extractor.params(), &step.grads, hp.lr_extractor)?;
                extractor.set_params(next)?;
                stats.add(step.loss, batch.len());
            }
        }
        Ok((extractor.into_params(), stats.finish()))
    }

    /// Plain local training for `local_epochs` on original inputs.
    pub fn train_plain(&mut self, ds: &Dataset, hp: &Hyperparams, round: usize) -> Result<PhaseStats> {
        let mut stats = PhaseStats::default();
        for _ in 0..hp.local_epochs {
            let plan = BatchPlan::new(&self.partition.train, hp.batch_size, &mut self.rng)?;
            for batch in plan.batches() {
                let (x, labels) = ds.gather(batch);
                let step = plain_loss_and_grad(&self.model, &x, &labels)?;
                if !step.loss.is_finite() {
                    return Err(self.training_error("model", round, stats.batches));
                }
                let next = sgd_step(self.model.params(), &step.grads, hp.lr_model)?;
                self.model.set_params(next)?;
                stats.add(step.loss, batch.len());
            }
        }
        Ok(stats.finish())
    }

    /// One round of local iterative training: model phase, then extractor phase.
    pub fn client_update(
        &mut self,
        ds: &Dataset,
        global_extractor: &Model,
        hp: &Hyperparams,
        round: usize,
    ) -> Result<ClientUpdate> {
        let model_stats = self.train_local_model(ds, global_extractor, hp, round)?;
        let (extractor, extractor_stats) = self.train_extractor(ds, global_extractor, hp, round)?;
        Ok(ClientUpdate {
            client: self.id,
            extractor,
            data_volume: self.partition.data_volume(),
            model_stats,
            extractor_stats,
        })
    }

    /// FedAvg: adopt the received global model, train it, return it.
    fn fedavg_update(
        &mut self,
        ds: &Dataset,
        global: &ParamSet,
        hp: &Hyperparams,
        round: usize,
    ) -> Result<(ParamSet, PhaseStats)> {
        self.model.set_params(global.clone())?;
        let stats = self.train_plain(ds, hp, round)?;
        Ok((self.model.params().clone(), stats))
    }
}

/// `n_k / Σ n_j` over the contributing clients.
pub fn aggregation_weights(volumes: &[usize]) -> Result<Vec<f64>> {
    if volumes.is_empty() {
        return Err(Error::arg("no contributions to aggregate"));
    }
    if volumes.contains(&0) {
        return Err(Error::arg("every contribution needs a positive data volume"));
    }
    let total: usize = volumes.iter().sum();
    Ok(volumes.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Data-volume weighted mean of compatible parameter sets, summed in the
/// given order. Computed as `θ_0 + Σ w_k (θ_k − θ_0)`, so identical inputs
/// come back bit-identical.
pub fn aggregate_extractors(contributions: &[(ParamSet, usize)]) -> Result<ParamSet> {
    let volumes: Vec<usize> = contributions.iter().map(|c| c.1).collect();
    let weights = aggregation_weights(&volumes)?;
    let anchor = &contributions[0].0;
    for (p, _) in &contributions[1..] {
        anchor.ensure_compatible(p)?;
    }
    let mut out = anchor.clone();
    let base = anchor.values();
    for ((p, _), &w) in contributions.iter().zip(&weights).skip(1) {
        for ((o, &v), &a) in out.values_mut().iter_mut().zip(p.values()).zip(base) {
            *o += w * (v - a);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Download,
    Upload,
}

/// One parameter set crossing the client/server interface.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transfer {
    pub round: usize,
    pub client: usize,
    pub direction: Direction,
    pub params: usize,
    /// Digest of the carried manifest.
    pub manifest: [u8; 32],
}

/// The client/server interface. Only parameter sets with the allowed
/// manifest may cross, and every crossing is logged.
#[derive(Debug, Clone)]
pub struct Boundary {
    allowed: Arc<Manifest>,
    log: Vec<Transfer>,
}

impl Boundary {
    pub fn new(allowed: Arc<Manifest>) -> Self {
        Self {
            allowed,
            log: Vec::new(),
        }
    }

    pub fn allowed(&self) -> &Arc<Manifest> {
        &self.allowed
    }

    pub fn carry(
        &mut self,
        round: usize,
        client: usize,
        direction: Direction,
        params: &ParamSet,
    ) -> Result<()> {
        if **params.manifest() != *self.allowed {
            return Err(Error::Boundary(format!(
                "round {round}, client {client}: refusing to carry [{}]",
                params.manifest()
            )));
        }
        self.log.push(Transfer {
            round,
            client,
            direction,
            params: params.len(),
            manifest: params.manifest().digest(),
        });
        Ok(())
    }

    pub fn transfers(&self) -> &[Transfer] {
        &self.log
    }

    fn round_totals(&self, round: usize) -> (usize, usize, u64, u64) {
        let mut totals = (0, 0, 0u64, 0u64);
        for t in self.log.iter().filter(|t| t.round == round) {
            match t.direction {
                Direction::Download => {
                    totals.0 += 1;
                    totals.2 += t.params as u64;
                }
                Direction::Upload => {
                    totals.1 += 1;
                    totals.3 += t.params as u64;
                }
            }
        }
        totals
    }
}

/// Everything needed to start a run.
#[derive(Debug, Clone)]
pub struct TrainingSetup {
    pub dataset: Arc<Dataset>,
    pub partitions: Vec<ClientPartition>,
    /// CNN variant (1..=5) of each client.
    pub variants: Vec<u8>,
    pub hp: Hyperparams,
    /// Worker threads for client updates; 1 runs them inline.
    pub workers: usize,
}

/// Server-side state.
#[derive(Debug, Clone)]
pub struct ServerState {
    /// Global extractor (pfedes) or global model (fedavg).
    pub global: Option<Model>,
    /// Rounds completed.
    pub round: usize,
}

/// Final state of a run.
#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub mode: Mode,
    pub reports: Vec<RoundReport>,
    /// Parameters each client uses for inference: its own model, or the
    /// global model under FedAvg.
    pub client_models: Vec<ParamSet>,
    pub variants: Vec<u8>,
    /// Final global extractor (pfedes) or global model (fedavg).
    pub global: Option<ParamSet>,
    pub transfers: Vec<Transfer>,
    pub ledger: CostLedger,
}

/// A simulated federation stepping through rounds.
pub struct Federation {
    mode: Mode,
    hp: Hyperparams,
    dataset: Arc<Dataset>,
    clients: Vec<ClientState>,
    extractor_spec: Arc<ModelSpec>,
    server: ServerState,
    boundary: Option<Boundary>,
    ledger: CostLedger,
    reports: Vec<RoundReport>,
    pool: Option<rayon::ThreadPool>,
}

impl fmt::Debug for Federation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Federation")
            .field("mode", &self.mode)
            .field("clients", &self.clients.len())
            .field("round", &self.server.round)
            .finish()
    }
}

fn run_on<T, F>(clients: &mut [ClientState], selected: &[usize], pool: Option<&rayon::ThreadPool>, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut ClientState) -> Result<T> + Sync,
{
    let mut picked: Vec<&mut ClientState> = clients
        .iter_mut()
        .filter(|c| selected.binary_search(&c.id).is_ok())
        .collect();
    match pool {
        Some(pool) => pool.install(|| picked.par_iter_mut().map(|c| f(c)).collect()),
        None => picked.iter_mut().map(|c| f(c)).collect(),
    }
}

impl Federation {
    pub fn new(mode: Mode, setup: TrainingSetup) -> Result<Self> {
        let TrainingSetup {
            dataset,
            partitions,
            variants,
            hp,
            workers,
        } = setup;
        hp.validate()?;
        if partitions.len() != hp.num_clients || variants.len() != hp.num_clients {
            return Err(Error::arg(format!(
                "{} clients configured but {} partitions and {} variants given",
                hp.num_clients,
                partitions.len(),
                variants.len()
            )));
        }
        if mode == Mode::FedAvg && variants.iter().any(|&v| v != variants[0]) {
            return Err(Error::config("variants", "fedavg requires every client on the same CNN variant"));
        }
        let shape = dataset.sample_shape();
        let mut specs: [Option<Arc<ModelSpec>>; 5] = Default::default();
        for &v in &variants {
            if !(1..=5).contains(&v) {
                return Err(Error::config("variants", format!("unknown CNN variant {v}")));
            }
            if specs[v as usize - 1].is_none() {
                specs[v as usize - 1] = Some(Arc::new(build_cnn(v, dataset.num_classes(), shape)?));
            }
        }
        let clients: Vec<ClientState> = partitions
            .into_iter()
            .zip(&variants)
            .enumerate()
            .map(|(k, (partition, &v))| {
                let spec = specs[v as usize - 1].clone().expect("spec built above");
                let model = Model::init(spec, derive_seed(hp.seed, Domain::ModelInit, k as u64));
                ClientState::new(k, v, model, partition, hp.seed)
            })
            .collect();
        let extractor_spec = Arc::new(build_extractor(shape));
        let (global, boundary) = match mode {
            Mode::PFedES => {
                let seed = derive_seed(hp.seed, Domain::ExtractorInit, 0);
                let g = Model::init(extractor_spec.clone(), seed);
                let b = Boundary::new(extractor_spec.manifest().clone());
                (Some(g), Some(b))
            }
            Mode::FedAvg => {
                let spec = clients[0].model.spec().clone();
                let seed = derive_seed(hp.seed, Domain::ModelInit, u64::MAX);
                let b = Boundary::new(spec.manifest().clone());
                (Some(Model::init(spec, seed)), Some(b))
            }
            Mode::Standalone => (None, None),
        };
        let pool = if workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| Error::arg(format!("cannot start {workers} workers: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            mode,
            hp,
            dataset,
            clients,
            extractor_spec,
            server: ServerState { global, round: 0 },
            boundary,
            ledger: CostLedger::default(),
            reports: Vec::new(),
            pool,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn extractor_spec(&self) -> &Arc<ModelSpec> {
        &self.extractor_spec
    }

    pub fn reports(&self) -> &[RoundReport] {
        &self.reports
    }

    pub fn transfers(&self) -> &[Transfer] {
        self.boundary.as_ref().map_or(&[], Boundary::transfers)
    }

    /// Sample → broadcast → local updates → aggregate → evaluate all clients.
    pub fn run_round(&mut self) -> Result<&RoundReport> {
        let started = Instant::now();
        let round = self.server.round + 1;
        let n = self.hp.num_clients;
        let selected = match self.mode {
            Mode::Standalone => (0..n).collect(),
            _ => sample_clients(n, self.hp.clients_per_round(), round, self.hp.seed)?,
        };
        let (ds, hp, pool) = (&*self.dataset, &self.hp, self.pool.as_ref());
        let mut model_loss = vec![None; n];
        let mut extractor_loss = vec![None; n];

        match self.mode {
            Mode::PFedES => {
                let global = self.server.global.as_mut().expect("pfedes has a global extractor");
                let boundary = self.boundary.as_mut().expect("pfedes has a boundary");
                for &k in &selected {
                    boundary.carry(round, k, Direction::Download, global.params())?;
                }
                let broadcast = &*global;
                let updates = run_on(&mut self.clients, &selected, pool, |c| {
                    c.client_update(ds, broadcast, hp, round)
                })?;
                let mut contributions = Vec::with_capacity(updates.len());
                for u in updates {
                    boundary.carry(round, u.client, Direction::Upload, &u.extractor)?;
                    model_loss[u.client] = Some(u.model_stats.mean_loss);
                    extractor_loss[u.client] = Some(u.extractor_stats.mean_loss);
                    contributions.push((u.extractor, u.data_volume));
                }
                global.set_params(aggregate_extractors(&contributions)?)?;
            }
            Mode::Standalone => {
                let stats = run_on(&mut self.clients, &selected, pool, |c| {
                    c.train_plain(ds, hp, round).map(|s| (c.id, s))
                })?;
                for (k, s) in stats {
                    model_loss[k] = Some(s.mean_loss);
                }
            }
            Mode::FedAvg => {
                let global = self.server.global.as_mut().expect("fedavg has a global model");
                let boundary = self.boundary.as_mut().expect("fedavg has a boundary");
                for &k in &selected {
                    boundary.carry(round, k, Direction::Download, global.params())?;
                }
                let broadcast = global.params();
                let updates = run_on(&mut self.clients, &selected, pool, |c| {
                    c.fedavg_update(ds, broadcast, hp, round)
                        .map(|(p, s)| (c.id, p, c.partition.data_volume(), s))
                })?;
                let mut contributions = Vec::with_capacity(updates.len());
                for (k, params, volume, stats) in updates {
                    boundary.carry(round, k, Direction::Upload, &params)?;
                    model_loss[k] = Some(stats.mean_loss);
                    contributions.push((params, volume));
                }
                global.set_params(aggregate_extractors(&contributions)?)?;
            }
        }

        let accuracies = self.evaluate_all()?;
        let flops: u64 = selected
            .iter()
            .map(|&k| {
                let c = &self.clients[k];
                client_round_flops(
                    self.mode,
                    c.model.spec(),
                    &self.extractor_spec,
                    c.partition.train.len(),
                    &self.hp,
                )
            })
            .sum();
        let (downloads, uploads, params_down, params_up) = self
            .boundary
            .as_ref()
            .map_or((0, 0, 0, 0), |b| b.round_totals(round));
        self.ledger.record_round(LedgerEntry {
            round,
            params_down,
            params_up,
            flops,
        });
        self.server.round = round;
        self.reports.push(RoundReport {
            round,
            selected,
            average_accuracy: metrics::mean(&accuracies),
            accuracies,
            model_loss,
            extractor_loss,
            downloads,
            uploads,
            params_down,
            params_up,
            params_cumulative: self.ledger.cumulative_params(),
            flops,
            flops_cumulative: self.ledger.cumulative_flops(),
            wall_time: started.elapsed(),
        });
        Ok(self.reports.last().expect("just pushed"))
    }

    /// Test accuracy of every client's inference model.
    pub fn evaluate_all(&self) -> Result<Vec<f64>> {
        let ds = &*self.dataset;
        let global = match self.mode {
            Mode::FedAvg => self.server.global.as_ref(),
            _ => None,
        };
        let eval = |c: &ClientState| evaluate(global.unwrap_or(&c.model), ds, &c.partition.test);
        match self.pool.as_ref() {
            Some(pool) => pool.install(|| self.clients.par_iter().map(eval).collect()),
            None => self.clients.iter().map(eval).collect(),
        }
    }

    pub fn run(mut self) -> Result<TrainingOutcome> {
        while self.server.round < self.hp.rounds {
            self.run_round()?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> TrainingOutcome {
        let global = self.server.global.map(Model::into_params);
        let client_models = match (self.mode, &global) {
            (Mode::FedAvg, Some(g)) => vec![g.clone(); self.clients.len()],
            _ => self.clients.iter().map(|c| c.model.params().clone()).collect(),
        };
        TrainingOutcome {
            mode: self.mode,
            reports: self.reports,
            variants: self.clients.iter().map(|c| c.variant).collect(),
            client_models,
            global,
            transfers: self.boundary.map(|b| b.log).unwrap_or_default(),
            ledger: self.ledger,
        }
    }
}

/// Runs all configured rounds of `mode`.
pub fn run_training(mode: Mode, setup: TrainingSetup) -> Result<TrainingOutcome> {
    Federation::new(mode, setup)?.run()
}
