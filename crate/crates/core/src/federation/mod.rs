//! Round-based federated training.
//!
//! Each round the server samples clients, broadcasts the global model,
//! trains every participant independently (possibly in parallel), and folds
//! the updates back in client-id order. Client work depends only on the
//! broadcast model, its own shard and round-keyed random streams, so the
//! result does not depend on the number of worker threads.

mod bank;
pub mod checkpoint;
mod local;

use rayon::prelude::*;

use crate::attacks::AttackConfig;
use crate::data::AugmentationSpec;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::rng::{Purpose, RngStream};

pub use bank::{aggregate_feature_banks, ClassFeature, FeatureAccumulator, FeatureBank};
pub use local::{
    asd_loss, compute_local_feature_bank, fedbat_batch_step, hybrid_at_loss, local_update_fedavg, local_update_fedbat,
    local_update_fedpgd, local_update_mixfat, mixfat_adversarial_count, mixfat_assignment, ClientState, FedBatStep,
    LocalUpdate,
};

const SERVER_STREAM: u64 = 0x7365_7276_6572;

/// FedBAT knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FedBatParams {
    /// Weight of the adversarial cross-entropy head, in `[0, 1]`.
    pub lambda: f64,
    /// Weight of the feature distillation term.
    pub asd_weight: f64,
    /// Apply one shared augmentation to each clean/adversarial pair.
    pub augment: bool,
}

impl FedBatParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda", format!("must be in [0, 1], got {}", self.lambda)));
        }
        if !(self.asd_weight.is_finite() && self.asd_weight >= 0.0) {
            return Err(Error::config("asd_weight", format!("must be >= 0, got {}", self.asd_weight)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainerVariant {
    FedAvg,
    FedPgd,
    MixFat { adv_fraction: f64 },
    FedBat(FedBatParams),
}

impl TrainerVariant {
    pub fn name(&self) -> &'static str {
        match self {
            TrainerVariant::FedAvg => "fedavg",
            TrainerVariant::FedPgd => "fedpgd",
            TrainerVariant::MixFat { .. } => "mixfat",
            TrainerVariant::FedBat(_) => "fedbat",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TrainerVariant::MixFat { adv_fraction } if !(0.0..=1.0).contains(adv_fraction) => Err(Error::config(
                "adv_fraction",
                format!("must be in [0, 1], got {adv_fraction}"),
            )),
            TrainerVariant::FedBat(p) => p.validate(),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub rounds: usize,
    /// Attack used to craft training examples.
    pub attack: AttackConfig,
    pub participation_rate: f64,
    /// Augmentations FedBAT draws from when its `augment` flag is set.
    pub augmentation: AugmentationSpec,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lr: 0.01,
            batch_size: 64,
            local_epochs: 1,
            rounds: 100,
            attack: AttackConfig::new(0.3, 0.01, 10),
            participation_rate: 1.0,
            augmentation: AugmentationSpec::default(),
        }
    }
}

impl Hyperparams {
    pub fn validate(&self, n_clients: usize) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("lr", format!("must be >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs", "must be positive"));
        }
        check_participation(n_clients, self.participation_rate)?;
        self.attack.validate()?;
        self.augmentation.validate()
    }
}

fn check_participation(n_clients: usize, rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::config("participation_rate", format!("must be in (0, 1], got {rate}")));
    }
    if (rate * n_clients as f64).round() < 1.0 {
        return Err(Error::config(
            "participation_rate",
            format!("{rate} of {n_clients} clients selects nobody"),
        ));
    }
    Ok(())
}

/// Uniform selection without replacement of `round(rate * n)` client ids,
/// returned in ascending order. Fixed by `(rng_key, round)`.
pub fn sample_clients(n_clients: usize, participation_rate: f64, round: usize, rng_key: RngStream) -> Result<Vec<usize>> {
    check_participation(n_clients, participation_rate)?;
    let k = ((participation_rate * n_clients as f64).round() as usize).min(n_clients);
    if k == n_clients {
        return Ok((0..n_clients).collect());
    }
    let mut ids = rng_key
        .for_purpose(Purpose::ClientSampling)
        .derive(round as u64)
        .choose_indices(n_clients, k);
    ids.sort_unstable();
    Ok(ids)
}

/// Sample-size weighted parameter average. The fold runs in the order given.
pub fn aggregate_models(updates: &[(Network, usize)]) -> Result<Network> {
    let ((first, _), rest) = updates
        .split_first()
        .ok_or_else(|| Error::Aggregation("no updates to aggregate".into()))?;
    if rest.iter().any(|(n, _)| !n.same_architecture(first)) {
        return Err(Error::Aggregation("updates have different architectures".into()));
    }
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::Aggregation("updates carry zero samples in total".into()));
    }
    let weight = |n: usize| n as f64 / total as f64;
    let mut out = first.clone();
    let w0 = weight(updates[0].1);
    for layer in out.layers_mut() {
        layer.weights_mut().iter_mut().for_each(|v| *v *= w0);
        layer.bias_mut().iter_mut().for_each(|v| *v *= w0);
    }
    for (net, n) in rest {
        let w = weight(*n);
        for (dst, src) in out.layers_mut().iter_mut().zip(net.layers()) {
            for (a, b) in dst.weights_mut().iter_mut().zip(src.weights()) {
                *a += w * b;
            }
            for (a, b) in dst.bias_mut().iter_mut().zip(src.bias()) {
                *a += w * b;
            }
        }
    }
    Ok(out)
}

/// Global state owned by the server between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    /// Number of completed rounds.
    pub round: usize,
    pub global_net: Network,
    pub global_bank: Option<FeatureBank>,
}

impl ServerState {
    pub fn new(global_net: Network) -> Self {
        Self {
            round: 0,
            global_net,
            global_bank: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// 1-based index of the round just run.
    pub round: usize,
    pub participants: Vec<usize>,
    pub sizes: Vec<usize>,
    pub losses: Vec<f64>,
    pub adversarial: Vec<bool>,
}

impl RoundReport {
    /// Unweighted mean of the participants' local losses.
    pub fn mean_loss(&self) -> f64 {
        if self.losses.is_empty() {
            0.0
        } else {
            self.losses.iter().sum::<f64>() / self.losses.len() as f64
        }
    }
}

/// Clients, training variant and schedule for one simulation.
#[derive(Debug)]
pub struct Federation {
    clients: Vec<ClientState>,
    variant: TrainerVariant,
    hp: Hyperparams,
    key: RngStream,
    pool: rayon::ThreadPool,
}

impl Federation {
    /// Client ids must equal their position in `clients`. `workers` is the
    /// number of threads client updates fan out to.
    pub fn new(clients: Vec<ClientState>, variant: TrainerVariant, hp: Hyperparams, seed: u64, workers: usize) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::config("n_clients", "need at least one client"));
        }
        if let Some((pos, c)) = clients.iter().enumerate().find(|(i, c)| c.id() != *i) {
            return Err(Error::config("clients", format!("client at position {pos} has id {}", c.id())));
        }
        variant.validate()?;
        hp.validate(clients.len())?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::config("workers", e.to_string()))?;
        Ok(Self {
            clients,
            variant,
            hp,
            key: RngStream::new(seed).derive(SERVER_STREAM),
            pool,
        })
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn variant(&self) -> &TrainerVariant {
        &self.variant
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// Ids taking part in the given 1-based round.
    pub fn participants(&self, round: usize) -> Result<Vec<usize>> {
        sample_clients(self.clients.len(), self.hp.participation_rate, round, self.key)
    }

    /// Runs round `server.round + 1`. A failing client aborts the round and
    /// leaves no partial aggregate.
    pub fn run_round(&self, server: &ServerState) -> Result<(ServerState, RoundReport)> {
        let round = server.round + 1;
        let ids = self.participants(round)?;
        let adversarial = match self.variant {
            TrainerVariant::FedAvg => vec![false; ids.len()],
            TrainerVariant::FedPgd | TrainerVariant::FedBat(_) => vec![true; ids.len()],
            TrainerVariant::MixFat { adv_fraction } => mixfat_assignment(
                ids.len(),
                adv_fraction,
                self.key.for_purpose(Purpose::MixFat).derive(round as u64),
            ),
        };
        let net = &server.global_net;
        let bank = server.global_bank.as_ref();
        let results: Vec<Result<LocalUpdate>> = self.pool.install(|| {
            ids.par_iter()
                .zip(adversarial.par_iter())
                .map(|(&id, &adv)| {
                    let client = &self.clients[id];
                    let update = match self.variant {
                        TrainerVariant::FedBat(p) => local_update_fedbat(client, net, bank, &self.hp, &p, round),
                        _ if adv => local_update_fedpgd(client, net, &self.hp, round),
                        _ => local_update_fedavg(client, net, &self.hp, round),
                    };
                    update.map_err(|e| Error::Client {
                        client: id,
                        source: Box::new(e),
                    })
                })
                .collect()
        });
        let updates = results.into_iter().collect::<Result<Vec<_>>>()?;

        let report = RoundReport {
            round,
            participants: ids,
            sizes: updates.iter().map(|u| u.n_samples).collect(),
            losses: updates.iter().map(|u| u.mean_loss).collect(),
            adversarial,
        };
        let banks: Vec<FeatureBank> = updates.iter().filter_map(|u| u.bank.clone()).collect();
        let pairs: Vec<(Network, usize)> = updates.into_iter().map(|u| (u.net, u.n_samples)).collect();
        let global_net = aggregate_models(&pairs)?;
        let global_bank = if banks.is_empty() {
            server.global_bank.clone()
        } else {
            Some(aggregate_feature_banks(&banks)?)
        };
        Ok((
            ServerState {
                round,
                global_net,
                global_bank,
            },
            report,
        ))
    }

    /// Runs rounds until `server.round` reaches `until`, calling `on_round`
    /// after each.
    pub fn run_until<F>(&self, mut server: ServerState, until: usize, mut on_round: F) -> Result<ServerState>
    where
        F: FnMut(&ServerState, &RoundReport) -> Result<()>,
    {
        while server.round < until {
            let (next, report) = self.run_round(&server)?;
            on_round(&next, &report)?;
            server = next;
        }
        Ok(server)
    }
}
