//! Client updates, server aggregation and the synchronous round loop.
//!
//! All algorithms share one loop: sample clients, broadcast the global model
//! (and, for FedGen, the global mask logits), run local SGD, then replace the
//! global state with the `n_k/N`-weighted average of the returned states.
//! Clients are processed and summed in ascending id order, so a run is a pure
//! function of its configuration and seed.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{self, Dataset, Environment, PartitionScheme};
use crate::error::{Error, Result};
use crate::masking::{self, MaskSettings, MaskState, MaskUpdate};
use crate::model::{self, fedgen_loss, LossBreakdown, ModelParams};
use crate::seed;
use crate::theorychecks::{self, ClientGradient, DescentSummary, Observation};

const SEED_INIT: u64 = 1;
const SEED_SERVER: u64 = 2;
const SEED_PARTITION: u64 = 3;
const SEED_SHUFFLE: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    #[serde(rename = "fedgen")]
    FedGen,
    #[serde(rename = "erm")]
    Erm,
    #[serde(rename = "inv-fedavg")]
    InvFedAvg,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::FedAvg,
        Algorithm::FedProx,
        Algorithm::FedGen,
        Algorithm::Erm,
        Algorithm::InvFedAvg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx => "fedprox",
            Algorithm::FedGen => "fedgen",
            Algorithm::Erm => "erm",
            Algorithm::InvFedAvg => "inv-fedavg",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown algorithm '{s}'")))
    }
}

/// Switches that remove one FedGen component each.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Use `alpha = 1` in the mask update.
    pub disable_scaling: bool,
    /// Feed raw inputs; masks are still tracked but never applied.
    pub disable_mask: bool,
    /// Drop the invariance penalty.
    pub disable_penalty: bool,
}

impl Ablation {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.disable_scaling {
            parts.push("-scaling");
        }
        if self.disable_mask {
            parts.push("-mask");
        }
        if self.disable_penalty {
            parts.push("-penalty");
        }
        if parts.is_empty() {
            "full".to_string()
        } else {
            parts.join(",")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub clients: usize,
    pub client_fraction: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub eta: f64,
    pub lambda: f64,
    pub l1_weight: f64,
    pub mu: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub mask: MaskSettings,
    pub ablation: Ablation,
    pub partition: PartitionScheme,
    pub seed: u64,
    /// Stop after this many consecutive rounds of rising test loss.
    pub patience: Option<usize>,
    pub theory_checks: bool,
    /// Fixed smoothness constant; estimated from the trajectory when unset.
    pub smoothness: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            algorithm: Algorithm::FedGen,
            clients: 10,
            client_fraction: 1.0,
            rounds: 30,
            local_epochs: 20,
            eta: 0.001,
            lambda: 1.0,
            l1_weight: 1e-6,
            mu: 1e-3,
            batch_size: 64,
            hidden: vec![50, 50],
            mask: MaskSettings::default(),
            ablation: Ablation::default(),
            partition: PartitionScheme::Stratified,
            seed: 0,
            patience: None,
            theory_checks: false,
            smoothness: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        positive("clients", self.clients)?;
        positive("rounds", self.rounds)?;
        positive("local_epochs", self.local_epochs)?;
        positive("batch_size", self.batch_size)?;
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "client_fraction must be in (0, 1], got {}",
                self.client_fraction
            )));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        for (name, v) in [("lambda", self.lambda), ("l1_weight", self.l1_weight), ("mu", self.mu)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "hidden layer widths must be positive, got {:?}",
                self.hidden
            )));
        }
        if let Some(l) = self.smoothness {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("smoothness must be non-negative, got {l}")));
            }
        }
        self.mask.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Mask settings after applying the ablation switches.
    pub fn effective_mask(&self) -> MaskSettings {
        let mut m = self.mask;
        if self.ablation.disable_scaling {
            m.alpha = 1.0;
        }
        m
    }

    /// Penalty weight after applying the ablation switches.
    pub fn effective_lambda(&self) -> f64 {
        if self.ablation.disable_penalty {
            0.0
        } else {
            self.lambda
        }
    }

    fn gating(&self) -> bool {
        self.algorithm == Algorithm::FedGen && !self.ablation.disable_mask
    }
}

/// Where a client's minibatch order comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShuffleKey {
    pub seed: u64,
    pub client: usize,
    pub round: usize,
}

impl ShuffleKey {
    fn rng(&self, epoch: usize) -> ChaCha8Rng {
        seed::rng(
            self.seed,
            &[SEED_SHUFFLE, self.client as u64, self.round as u64, epoch as u64],
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalOptions {
    pub epochs: usize,
    pub eta: f64,
    pub batch_size: usize,
}

/// Result of one client's local training.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalUpdate {
    pub params: ModelParams,
    pub mask: Option<MaskState>,
    /// Sample-weighted loss components over the last local epoch.
    pub loss: LossBreakdown,
    pub mask_updates: usize,
    pub warmup_skips: usize,
}

struct Objective<'a> {
    mask_gating: bool,
    lambda: f64,
    l1_weight: f64,
    prox: Option<(f64, &'a ModelParams)>,
}

fn local_train(
    data: &Dataset,
    start: &ModelParams,
    mut mask: Option<MaskState>,
    objective: &Objective<'_>,
    opts: &LocalOptions,
    key: ShuffleKey,
) -> Result<LocalUpdate> {
    if data.is_empty() {
        return Err(Error::invalid(format!("client {} holds no data", key.client)));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let mut params = start.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last = LossBreakdown::default();
    let (mut mask_updates, mut warmup_skips) = (0, 0);
    if let Some(m) = mask.as_mut() {
        m.begin_round();
    }
    for epoch in 0..opts.epochs {
        order.sort_unstable();
        order.shuffle(&mut key.rng(epoch));
        let mut acc = LossBreakdown::default();
        for rows in order.chunks(opts.batch_size) {
            let batch = data.batch(rows)?;
            let logits = match (&mask, objective.mask_gating) {
                (Some(m), true) => Some(m.logits()),
                _ => None,
            };
            let lg = fedgen_loss(&params, &batch, logits, objective.lambda, objective.l1_weight)?;
            let b = lg.breakdown;
            if !b.total.is_finite() {
                return Err(Error::NonFinite { index: 0, value: b.total });
            }
            let w = rows.len() as f64 / data.len() as f64;
            acc.loc += w * b.loc;
            acc.l1 += w * b.l1;
            acc.pen += w * b.pen;
            acc.total += w * b.total;
            let mut grads = lg.gradients()?;
            if let Some((mu, anchor)) = objective.prox {
                grads.axpy(mu, &params)?;
                grads.axpy(-mu, anchor)?;
            }
            model::sgd_step_in_place(&mut params, &grads, opts.eta)?;
        }
        if let Some(m) = mask.as_mut() {
            m.ema_update(&params.first_layer_by_feature())?;
            match m.mask_update() {
                MaskUpdate::Applied(_) => mask_updates += 1,
                MaskUpdate::WarmUp => warmup_skips += 1,
            }
        }
        last = acc;
    }
    Ok(LocalUpdate {
        params,
        mask,
        loss: last,
        mask_updates,
        warmup_skips,
    })
}

/// `E` epochs of minibatch SGD on the cross-entropy alone.
pub fn client_update_fedavg(
    data: &Dataset,
    w_t: &ModelParams,
    opts: &LocalOptions,
    key: ShuffleKey,
) -> Result<LocalUpdate> {
    let objective = Objective {
        mask_gating: false,
        lambda: 0.0,
        l1_weight: 0.0,
        prox: None,
    };
    local_train(data, w_t, None, &objective, opts, key)
}

/// FedAvg plus the proximal term `(μ/2)‖w − w_t‖²`.
pub fn client_update_fedprox(
    data: &Dataset,
    w_t: &ModelParams,
    mu: f64,
    opts: &LocalOptions,
    key: ShuffleKey,
) -> Result<LocalUpdate> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::invalid(format!("mu must be non-negative, got {mu}")));
    }
    let objective = Objective {
        mask_gating: false,
        lambda: 0.0,
        l1_weight: 0.0,
        prox: Some((mu, w_t)),
    };
    local_train(data, w_t, None, &objective, opts, key)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FedGenOptions {
    pub lambda: f64,
    pub l1_weight: f64,
    pub gating: bool,
}

/// Local FedGen training. `mask` must already hold the broadcast logits; its
/// EMA statistics carry over from earlier rounds.
pub fn client_update_fedgen(
    data: &Dataset,
    w_t: &ModelParams,
    mask: MaskState,
    fedgen: &FedGenOptions,
    opts: &LocalOptions,
    key: ShuffleKey,
) -> Result<LocalUpdate> {
    if mask.features() != w_t.input_dim() || mask.width() != w_t.first_layer_width() {
        return Err(Error::ShapeMismatch {
            op: "client_update_fedgen",
            shapes: vec![
                vec![mask.features(), mask.width()],
                vec![w_t.input_dim(), w_t.first_layer_width()],
            ],
        });
    }
    let objective = Objective {
        mask_gating: fedgen.gating,
        lambda: fedgen.lambda,
        l1_weight: fedgen.l1_weight,
        prox: None,
    };
    local_train(data, w_t, Some(mask), &objective, opts, key)
}

/// `Σ (n_k/N) w_k` accumulated in the given order.
pub fn aggregate_weights(entries: &[(&ModelParams, usize)]) -> Result<ModelParams> {
    let (first, _) = entries
        .first()
        .ok_or_else(|| Error::invalid("nothing to aggregate"))?;
    let total: usize = entries.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::invalid("total sample count is zero"));
    }
    let mut out = first.zeros_like();
    for (p, n) in entries {
        first.check_same_shape(p, "aggregate_weights")?;
        out.axpy(*n as f64 / total as f64, p)?;
    }
    Ok(out)
}

/// `⌈fraction·K⌉` distinct client ids in ascending order.
pub fn sample_clients(rng: &mut ChaCha8Rng, clients: usize, fraction: f64) -> Vec<usize> {
    let count = ((fraction * clients as f64) - 1e-9).ceil().clamp(1.0, clients as f64) as usize;
    if count >= clients {
        return (0..clients).collect();
    }
    let mut ids = rand::seq::index::sample(rng, clients, count).into_vec();
    ids.sort_unstable();
    ids
}

/// One client's persistent state on the simulated device.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub data: Dataset,
    pub env_ids: Vec<usize>,
    pub mask: Option<MaskState>,
}

impl ClientState {
    pub fn n_k(&self) -> usize {
        self.data.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub params: ModelParams,
    pub mask_logits: Option<Vec<f64>>,
    pub round: usize,
}

/// Training and test data for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunData {
    pub train: Vec<Environment>,
    pub test: Environment,
}

impl From<datasets::SyntheticData> for RunData {
    fn from(d: datasets::SyntheticData) -> Self {
        RunData {
            train: d.train,
            test: d.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// One-based round number.
    pub round: usize,
    pub algorithm: Algorithm,
    pub participants: Vec<usize>,
    pub train_accuracy: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    /// Sample-weighted local objective over the participants' last epoch.
    pub loss: LossBreakdown,
    /// Global `σ(m)` after aggregation.
    pub gates: Option<Vec<f64>>,
    pub warmup_skips: usize,
    pub b_est: Option<f64>,
    pub eps_est: Option<f64>,
    pub bound_satisfied: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub config: RunConfig,
    pub reports: Vec<RoundReport>,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub observations: Vec<Observation>,
    pub theory: Option<DescentSummary>,
    pub stopped_early: bool,
}

impl RunResult {
    pub fn final_report(&self) -> &RoundReport {
        self.reports.last().expect("a run has at least one round")
    }

    /// Largest test accuracy over all rounds.
    pub fn best_test_accuracy(&self) -> f64 {
        self.reports.iter().map(|r| r.test_accuracy).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Data as seen by the algorithm: spurious columns zeroed for the
/// invariant-feature oracle.
fn prepared(config: &RunConfig, data: &RunData) -> (Vec<Environment>, Environment) {
    if config.algorithm == Algorithm::InvFedAvg {
        (
            data.train.iter().map(datasets::strip_spurious).collect(),
            datasets::strip_spurious(&data.test),
        )
    } else {
        (data.train.clone(), data.test.clone())
    }
}

fn build_clients(config: &RunConfig, train: &[Environment], first_width: usize) -> Result<Vec<ClientState>> {
    let shards = if config.algorithm == Algorithm::Erm {
        let pooled = Dataset::concat(train.iter().map(|e| &e.data))?;
        vec![datasets::Shard {
            data: pooled,
            env_ids: train.iter().map(|e| e.env_id).collect(),
        }]
    } else {
        datasets::partition_clients(
            train,
            config.clients,
            config.partition,
            seed::derive(config.seed, &[SEED_PARTITION]),
        )?
    };
    shards
        .into_iter()
        .enumerate()
        .map(|(id, s)| {
            let mask = if config.algorithm == Algorithm::FedGen {
                Some(MaskState::new(s.data.features(), first_width, config.effective_mask())?)
            } else {
                None
            };
            Ok(ClientState {
                id,
                data: s.data,
                env_ids: s.env_ids,
                mask,
            })
        })
        .collect()
}

/// Full-batch value and gradient of each client's local objective at the
/// global point, combined into one observation.
fn observe(
    config: &RunConfig,
    server: &ServerState,
    clients: &[ClientState],
    participating: &[usize],
) -> Result<Observation> {
    let gating = if config.gating() {
        server.mask_logits.as_deref()
    } else {
        None
    };
    let (lambda, l1) = if config.algorithm == Algorithm::FedGen {
        (config.effective_lambda(), config.l1_weight)
    } else {
        (0.0, 0.0)
    };
    let total: usize = clients.iter().map(ClientState::n_k).sum();
    let mut f_value = 0.0;
    let mut per_client = Vec::with_capacity(clients.len());
    for c in clients {
        let lg = fedgen_loss(&server.params, &c.data.full_batch()?, gating, lambda, l1)?;
        f_value += c.n_k() as f64 / total as f64 * lg.breakdown.total;
        per_client.push(ClientGradient {
            grad: lg.gradients()?.to_flat(),
            n_k: c.n_k(),
        });
    }
    let grad = theorychecks::weighted_gradient(&per_client)?;
    Ok(Observation {
        f_value,
        grad_norm_sq: grad.iter().map(|g| g * g).sum(),
        b_est: theorychecks::estimate_b(&per_client)?,
        eps_est: theorychecks::estimate_eps(&per_client, participating)?,
        params: server.params.to_flat(),
        grad,
    })
}

fn diverged(round: usize, client: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Diverged { round, client },
        other => other,
    }
}

/// Called after every round with the report and the new global state.
pub type RoundObserver<'a> = dyn FnMut(&RoundReport, &ServerState, &[ClientState]) -> Result<()> + 'a;

pub fn run_training(config: &RunConfig, data: &RunData) -> Result<RunResult> {
    run_training_with(config, data, &mut |_, _, _| Ok(()))
}

/// The synchronous round loop. Returns [`Error::Diverged`] if any local
/// update produces a non-finite value.
pub fn run_training_with(
    config: &RunConfig,
    data: &RunData,
    observer: &mut RoundObserver<'_>,
) -> Result<RunResult> {
    config.validate()?;
    let (train, test) = prepared(config, data);
    let features = test.data.features();
    let classes = test.data.classes();
    if let Some(env) = train
        .iter()
        .find(|e| e.data.features() != features || e.data.classes() != classes)
    {
        return Err(Error::invalid(format!(
            "environment {} does not match the test environment's shape",
            env.env_id
        )));
    }
    let mut dims = vec![features];
    dims.extend(&config.hidden);
    dims.push(classes);
    let params = ModelParams::init(seed::derive(config.seed, &[SEED_INIT]), &dims)?;
    let mut clients = build_clients(config, &train, params.first_layer_width())?;
    let mut server = ServerState {
        mask_logits: clients[0].mask.as_ref().map(|m| m.logits().to_vec()),
        params,
        round: 0,
    };
    let pooled = Dataset::concat(train.iter().map(|e| &e.data))?;
    let mut rng = seed::rng(config.seed, &[SEED_SERVER]);
    let opts = LocalOptions {
        epochs: config.local_epochs,
        eta: config.eta,
        batch_size: config.batch_size,
    };
    let fedgen = FedGenOptions {
        lambda: config.effective_lambda(),
        l1_weight: config.l1_weight,
        gating: config.gating(),
    };

    let mut reports = Vec::with_capacity(config.rounds);
    let mut observations = Vec::new();
    let mut rising = 0usize;
    let mut stopped_early = false;
    for t in 0..config.rounds {
        let selected = sample_clients(&mut rng, clients.len(), config.client_fraction);
        if config.theory_checks {
            observations.push(observe(config, &server, &clients, &selected)?);
        }

        let mut updates = Vec::with_capacity(selected.len());
        for &k in &selected {
            let client = &mut clients[k];
            let key = ShuffleKey {
                seed: config.seed,
                client: k,
                round: t,
            };
            let update = match config.algorithm {
                Algorithm::FedAvg | Algorithm::Erm | Algorithm::InvFedAvg => {
                    client_update_fedavg(&client.data, &server.params, &opts, key)
                }
                Algorithm::FedProx => {
                    client_update_fedprox(&client.data, &server.params, config.mu, &opts, key)
                }
                Algorithm::FedGen => {
                    let mut mask = client.mask.take().expect("FedGen clients carry a mask");
                    mask.set_logits(server.mask_logits.as_deref().expect("FedGen server holds masks"))?;
                    client_update_fedgen(&client.data, &server.params, mask, &fedgen, &opts, key)
                }
            }
            .map_err(diverged(t + 1, k))?;
            client.mask = update.mask.clone();
            updates.push((k, update));
        }

        let entries: Vec<(&ModelParams, usize)> = updates
            .iter()
            .map(|(k, u)| (&u.params, clients[*k].n_k()))
            .collect();
        server.params = aggregate_weights(&entries)?;
        if config.algorithm == Algorithm::FedGen {
            let masks: Vec<(&[f64], usize)> = updates
                .iter()
                .map(|(k, u)| {
                    let m = u.mask.as_ref().expect("FedGen update returns a mask");
                    (m.logits(), clients[*k].n_k())
                })
                .collect();
            server.mask_logits = Some(masking::aggregate_masks(&masks)?);
        }
        server.round = t + 1;

        let n_sel: usize = updates.iter().map(|(k, _)| clients[*k].n_k()).sum();
        let mut loss = LossBreakdown::default();
        for (k, u) in &updates {
            let w = clients[*k].n_k() as f64 / n_sel as f64;
            loss.loc += w * u.loss.loc;
            loss.l1 += w * u.loss.l1;
            loss.pen += w * u.loss.pen;
            loss.total += w * u.loss.total;
        }
        let gating = if config.gating() {
            server.mask_logits.as_deref()
        } else {
            None
        };
        let (train_accuracy, train_loss) = model::evaluate(&server.params, pooled.x(), pooled.y(), gating)?;
        let (test_accuracy, test_loss) = model::evaluate(&server.params, test.data.x(), test.data.y(), gating)?;
        if !test_loss.is_finite() {
            return Err(Error::Diverged {
                round: t + 1,
                client: selected[0],
            });
        }
        let obs = observations.last();
        let report = RoundReport {
            round: t + 1,
            algorithm: config.algorithm,
            participants: selected.clone(),
            train_accuracy,
            train_loss,
            test_accuracy,
            test_loss,
            loss,
            gates: server
                .mask_logits
                .as_ref()
                .map(|m| m.iter().map(|&x| crate::autodiff::sigmoid(x)).collect()),
            warmup_skips: updates.iter().map(|(_, u)| u.warmup_skips).sum(),
            b_est: obs.and_then(|o| o.b_est),
            eps_est: obs.and_then(|o| o.eps_est),
            bound_satisfied: None,
        };
        let previous = reports.last().map(|r: &RoundReport| r.test_loss);
        observer(&report, &server, &clients)?;
        reports.push(report);

        if let Some(patience) = config.patience {
            if previous.is_some_and(|p| test_loss > p) {
                rising += 1;
            } else {
                rising = 0;
            }
            if rising >= patience {
                stopped_early = t + 1 < config.rounds;
                break;
            }
        }
    }

    let theory = if config.theory_checks {
        let all: Vec<usize> = (0..clients.len()).collect();
        observations.push(observe(config, &server, &clients, &all)?);
        let l = config
            .smoothness
            .or_else(|| theorychecks::estimate_smoothness(&observations))
            .unwrap_or(0.0);
        let summary = theorychecks::descent_check(&observations, config.eta, l)?;
        for (report, check) in reports.iter_mut().zip(&summary.reports) {
            report.bound_satisfied = Some(check.bound_satisfied);
        }
        Some(summary)
    } else {
        None
    };

    Ok(RunResult {
        config: config.clone(),
        reports,
        server,
        clients,
        observations,
        theory,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_synthetic, DatasetSpec};

    fn small_data() -> RunData {
        gen_synthetic(&DatasetSpec {
            n_invariant: 4,
            samples_per_env: 60,
            ..DatasetSpec::default()
        })
        .unwrap()
        .into()
    }

    fn small_config(algorithm: Algorithm) -> RunConfig {
        RunConfig {
            algorithm,
            clients: 4,
            rounds: 3,
            local_epochs: 7,
            eta: 0.05,
            hidden: vec![8],
            batch_size: 16,
            ..RunConfig::default()
        }
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("sgd".parse::<Algorithm>().is_err());
    }

    #[test]
    fn sampling_counts() {
        let mut rng = seed::rng(0, &[]);
        assert_eq!(sample_clients(&mut rng, 10, 1.0), (0..10).collect::<Vec<_>>());
        let s = sample_clients(&mut rng, 10, 0.25);
        assert_eq!(s.len(), 3);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_clients(&mut rng, 100, 0.1).len(), 10);
        assert_eq!(sample_clients(&mut rng, 5, 0.01).len(), 1);
    }

    #[test]
    fn aggregation_of_identical_models_is_identity() {
        let p = ModelParams::init(3, &[3, 4, 2]).unwrap();
        let agg = aggregate_weights(&[(&p, 5), (&p, 11), (&p, 2)]).unwrap();
        for (a, b) in agg.values().zip(p.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(aggregate_weights(&[]).is_err());
    }

    #[test]
    fn fedprox_with_zero_mu_matches_fedavg() {
        let data = small_data();
        let d = &data.train[0].data;
        let w = ModelParams::init(1, &[5, 6, 2]).unwrap();
        let opts = LocalOptions {
            epochs: 2,
            eta: 0.1,
            batch_size: 10,
        };
        let key = ShuffleKey {
            seed: 1,
            client: 0,
            round: 0,
        };
        let a = client_update_fedavg(d, &w, &opts, key).unwrap();
        let b = client_update_fedprox(d, &w, 0.0, &opts, key).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn fedgen_warm_up_is_per_round() {
        let data = small_data();
        let config = small_config(Algorithm::FedGen);
        let result = run_training(&config, &data).unwrap();
        // e_init = 5 of 7 epochs are skipped in every round by every client.
        for r in &result.reports {
            assert_eq!(r.warmup_skips, 5 * 4);
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let data = small_data();
        for a in Algorithm::ALL {
            let config = small_config(a);
            let x = run_training(&config, &data).unwrap();
            let y = run_training(&config, &data).unwrap();
            assert_eq!(x.reports, y.reports, "{a}");
            assert_eq!(x.server, y.server, "{a}");
        }
    }

    #[test]
    fn erm_uses_one_client() {
        let data = small_data();
        let result = run_training(&small_config(Algorithm::Erm), &data).unwrap();
        assert_eq!(result.clients.len(), 1);
        assert_eq!(result.clients[0].n_k(), 120);
        assert!(result.reports.iter().all(|r| r.participants == [0]));
    }

    #[test]
    fn huge_step_diverges() {
        let data = small_data();
        let config = RunConfig {
            eta: 1e200,
            ..small_config(Algorithm::FedAvg)
        };
        match run_training(&config, &data) {
            Err(Error::Diverged { round: 1, .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn patience_stops_on_rising_test_loss() {
        let data = small_data();
        let config = RunConfig {
            rounds: 40,
            patience: Some(1),
            eta: 0.5,
            ..small_config(Algorithm::FedAvg)
        };
        let result = run_training(&config, &data).unwrap();
        let n = result.reports.len();
        if result.stopped_early {
            assert!(result.reports[n - 1].test_loss > result.reports[n - 2].test_loss);
        } else {
            assert_eq!(n, 40);
        }
    }
}
