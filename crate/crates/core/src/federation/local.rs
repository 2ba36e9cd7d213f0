//! Client-side training: one call trains a copy of the global model on the
//! client's shard for `local_epochs` epochs.

use crate::attacks::pgd;
use crate::data::{draw_transform, AugmentationSpec, Dataset, Transform};
use crate::error::{Error, Result};
use crate::nn::{
    mse_feature_loss, param_gradients, softmax_cross_entropy, ForwardTrace, GradientBundle, GradientEntry, Network,
};
use crate::rng::{Purpose, RngStream};
use crate::tensor::Tensor;

use super::bank::{FeatureAccumulator, FeatureBank};
use super::{FedBatParams, Hyperparams};

const CLIENT_STREAM: u64 = 0x636c_6965_6e74;

/// One federated participant and its private shard.
#[derive(Debug, Clone)]
pub struct ClientState {
    id: usize,
    data: Dataset,
    key: RngStream,
}

impl ClientState {
    pub fn new(id: usize, data: Dataset, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::config("client", format!("client {id} has no samples")));
        }
        Ok(Self {
            id,
            data,
            key: RngStream::new(seed).derive(CLIENT_STREAM).derive(id as u64),
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn n_samples(&self) -> usize {
        self.data.len()
    }

    fn round_stream(&self, round: usize) -> RngStream {
        self.key.derive(round as u64)
    }

    /// Sample order for one local epoch; a fixed function of
    /// `(seed, client, round, epoch)`.
    pub fn batch_order(&self, round: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        self.round_stream(round)
            .for_purpose(Purpose::Shuffle)
            .derive(epoch as u64)
            .shuffle(&mut order);
        order
    }

    /// Stream for the PGD random start of one batch.
    pub fn attack_stream(&self, round: usize, epoch: usize, batch: usize) -> RngStream {
        self.round_stream(round)
            .for_purpose(Purpose::AttackStart)
            .derive_all(&[epoch as u64, batch as u64])
    }

    /// Stream for the augmentation draw of one batch.
    pub fn augment_stream(&self, round: usize, epoch: usize, batch: usize) -> RngStream {
        self.round_stream(round)
            .for_purpose(Purpose::Augment)
            .derive_all(&[epoch as u64, batch as u64])
    }
}

/// Result of one client's local training.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub client: usize,
    pub net: Network,
    pub n_samples: usize,
    /// Mean of the per-batch training losses.
    pub mean_loss: f64,
    /// Local feature bank (FedBAT only).
    pub bank: Option<FeatureBank>,
    /// Whether adversarial examples were used.
    pub adversarial: bool,
}

/// Position of the current mini-batch inside a local update.
#[derive(Debug, Clone, Copy)]
struct BatchPos {
    epoch: usize,
    index: usize,
}

/// Mini-batch SGD over the client's shard; `step` maps a batch to its loss
/// and parameter gradient.
fn local_sgd<F>(client: &ClientState, net: &Network, hp: &Hyperparams, round: usize, mut step: F) -> Result<(Network, f64)>
where
    F: FnMut(&Network, &Tensor, &[usize], BatchPos) -> Result<(f64, GradientBundle)>,
{
    let mut net = net.clone();
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for epoch in 0..hp.local_epochs {
        let order = client.batch_order(round, epoch);
        for (index, chunk) in order.chunks(hp.batch_size).enumerate() {
            let (x, y) = client.data.batch(chunk);
            let (loss, grads) = step(&net, &x, &y, BatchPos { epoch, index })?;
            net = net.sgd_step(&grads, hp.lr)?;
            loss_sum += loss;
            batches += 1;
        }
    }
    let mean = if batches == 0 { 0.0 } else { loss_sum / batches as f64 };
    Ok((net, mean))
}

fn ce_step(net: &Network, x: &Tensor, y: &[usize]) -> Result<(f64, GradientBundle)> {
    let (logits, trace) = net.forward(x)?;
    let (loss, d) = softmax_cross_entropy(&logits, y)?;
    Ok((loss, param_gradients(net, &trace, &d, GradientEntry::Logits)?))
}

pub fn local_update_fedavg(client: &ClientState, net: &Network, hp: &Hyperparams, round: usize) -> Result<LocalUpdate> {
    let (net, mean_loss) = local_sgd(client, net, hp, round, |net, x, y, _| ce_step(net, x, y))?;
    Ok(LocalUpdate {
        client: client.id,
        net,
        n_samples: client.n_samples(),
        mean_loss,
        bank: None,
        adversarial: false,
    })
}

/// Adversarial training: every batch is replaced by PGD examples crafted
/// against the current local parameters.
pub fn local_update_fedpgd(client: &ClientState, net: &Network, hp: &Hyperparams, round: usize) -> Result<LocalUpdate> {
    let (net, mean_loss) = local_sgd(client, net, hp, round, |net, x, y, pos| {
        let x_adv = pgd(net, x, y, &hp.attack, client.attack_stream(round, pos.epoch, pos.index))?;
        ce_step(net, &x_adv, y)
    })?;
    Ok(LocalUpdate {
        client: client.id,
        net,
        n_samples: client.n_samples(),
        mean_loss,
        bank: None,
        adversarial: true,
    })
}

/// Number of adversarial clients among `k` participants.
pub fn mixfat_adversarial_count(k: usize, adv_fraction: f64) -> usize {
    // the small slack keeps products like 0.4 * 5 from rounding up to 3
    let raw = (adv_fraction * k as f64 - 1e-9).ceil();
    (raw.max(0.0) as usize).min(k)
}

/// Marks `ceil(adv_fraction * k)` of `k` participants adversarial.
pub fn mixfat_assignment(k: usize, adv_fraction: f64, rng: RngStream) -> Vec<bool> {
    let mut rng = rng;
    let mut flags = vec![false; k];
    for i in rng.choose_indices(k, mixfat_adversarial_count(k, adv_fraction)) {
        flags[i] = true;
    }
    flags
}

/// Mixed round: the adversarial subset runs FedPGD, the rest FedAvg.
pub fn local_update_mixfat(
    clients: &[&ClientState],
    net: &Network,
    hp: &Hyperparams,
    adv_fraction: f64,
    round: usize,
    rng: RngStream,
) -> Result<Vec<LocalUpdate>> {
    if !(0.0..=1.0).contains(&adv_fraction) {
        return Err(Error::config("adv_fraction", format!("must be in [0, 1], got {adv_fraction}")));
    }
    mixfat_assignment(clients.len(), adv_fraction, rng)
        .into_iter()
        .zip(clients)
        .map(|(adv, c)| {
            if adv {
                local_update_fedpgd(c, net, hp, round)
            } else {
                local_update_fedavg(c, net, hp, round)
            }
        })
        .collect()
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::config("lambda", format!("must be in [0, 1], got {lambda}")))
    }
}

/// `(1 - lambda) * CE(clean) + lambda * CE(adv)` from already computed
/// forward passes. A head with weight zero is skipped entirely.
fn hybrid_from_passes(
    net: &Network,
    clean: (&Tensor, &ForwardTrace),
    adv: (&Tensor, &ForwardTrace),
    labels: &[usize],
    lambda: f64,
) -> Result<(f64, GradientBundle)> {
    check_lambda(lambda)?;
    let mut loss = 0.0;
    let mut grads: Option<GradientBundle> = None;
    for ((logits, trace), w) in [(clean, 1.0 - lambda), (adv, lambda)] {
        if w == 0.0 {
            continue;
        }
        let (l, mut d) = softmax_cross_entropy(logits, labels)?;
        d.scale_in_place(w);
        let g = param_gradients(net, trace, &d, GradientEntry::Logits)?;
        loss += w * l;
        match grads.as_mut() {
            Some(acc) => acc.accumulate(&g)?,
            None => grads = Some(g),
        }
    }
    Ok((loss, grads.expect("lambda in [0, 1] leaves one head active")))
}

/// Hybrid adversarial loss on a paired clean/adversarial batch.
pub fn hybrid_at_loss(
    net: &Network,
    clean_batch: &Tensor,
    adv_batch: &Tensor,
    labels: &[usize],
    lambda: f64,
) -> Result<(f64, GradientBundle)> {
    check_lambda(lambda)?;
    clean_batch.check_same_shape(adv_batch, "adversarial batch")?;
    let (lc, tc) = net.forward(clean_batch)?;
    let (la, ta) = net.forward(adv_batch)?;
    hybrid_from_passes(net, (&lc, &tc), (&la, &ta), labels, lambda)
}

fn asd_from_trace(
    net: &Network,
    trace: &ForwardTrace,
    labels: &[usize],
    bank: &FeatureBank,
    weight: f64,
) -> Result<(f64, GradientBundle)> {
    if !(weight.is_finite() && weight >= 0.0) {
        return Err(Error::config("asd_weight", format!("must be >= 0, got {weight}")));
    }
    let fd = net.feature_dim();
    if bank.feature_dim() != fd {
        return Err(Error::Shape(format!(
            "feature bank width {} does not match network embedding width {fd}",
            bank.feature_dim()
        )));
    }
    if labels.len() != trace.batch_size() {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            trace.batch_size()
        )));
    }
    let present: Vec<usize> = (0..labels.len()).filter(|&i| bank.class(labels[i]).is_some()).collect();
    if weight == 0.0 || present.is_empty() {
        return Ok((0.0, GradientBundle::zeros_like(net)));
    }
    let z = trace.embedding().select_rows(&present);
    let targets: Vec<Vec<f64>> = present
        .iter()
        .map(|&i| bank.class(labels[i]).expect("filtered to present classes").mean.clone())
        .collect();
    let (loss, d) = mse_feature_loss(&z, &Tensor::from_rows(&targets)?)?;
    let mut upstream = Tensor::zeros(vec![labels.len(), fd]);
    for (r, &i) in present.iter().enumerate() {
        for (u, v) in upstream.row_mut(i).iter_mut().zip(d.row(r)) {
            *u = weight * v;
        }
    }
    let grads = param_gradients(net, trace, &upstream, GradientEntry::Embedding)?;
    Ok((weight * loss, grads))
}

/// Feature distillation: pulls the embeddings of augmented adversarial
/// samples toward the global per-class means. Samples whose class is absent
/// from the bank do not count; if none remain the loss and bundle are zero.
pub fn asd_loss(
    net: &Network,
    adv_aug_batch: &Tensor,
    labels: &[usize],
    global_bank: &FeatureBank,
    weight: f64,
) -> Result<(f64, GradientBundle)> {
    let (_, trace) = net.forward(adv_aug_batch)?;
    asd_from_trace(net, &trace, labels, global_bank, weight)
}

/// Per-class mean embeddings of a shard, taken batch by batch in dataset
/// order with batch `b` augmented by a transform drawn from
/// `augment_rng.derive(b)`. `None` skips augmentation.
pub fn compute_local_feature_bank(
    net: &Network,
    data: &Dataset,
    batch_size: usize,
    augment: Option<&AugmentationSpec>,
    augment_rng: RngStream,
) -> Result<FeatureBank> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let mut acc = FeatureAccumulator::new(data.num_classes(), net.feature_dim());
    let order: Vec<usize> = (0..data.len()).collect();
    for (b, chunk) in order.chunks(batch_size).enumerate() {
        let (x, y) = data.batch(chunk);
        let x = match augment {
            Some(spec) => draw_transform(spec, &mut augment_rng.derive(b as u64)).apply(&x)?,
            None => x,
        };
        acc.add(&net.embed(&x)?, &y)?;
    }
    Ok(acc.finish())
}

/// Everything one FedBAT mini-batch produces.
#[derive(Debug, Clone)]
pub struct FedBatStep {
    pub hybrid_loss: f64,
    pub asd_loss: f64,
    pub loss: f64,
    pub grads: GradientBundle,
    /// Embeddings of the (augmented) clean batch, for the local bank.
    pub clean_embedding: Tensor,
    pub transform: Transform,
}

/// One FedBAT batch: PGD on the raw batch, one augmentation applied to both
/// halves of the pair, hybrid loss plus (when a global bank exists) the
/// distillation term.
#[allow(clippy::too_many_arguments)]
pub fn fedbat_batch_step(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    global_bank: Option<&FeatureBank>,
    params: &FedBatParams,
    hp: &Hyperparams,
    attack_rng: RngStream,
    augment_rng: RngStream,
) -> Result<FedBatStep> {
    let x_adv = pgd(net, batch, labels, &hp.attack, attack_rng)?;
    let transform = if params.augment {
        let mut rng = augment_rng;
        draw_transform(&hp.augmentation, &mut rng)
    } else {
        Transform::Identity
    };
    let (x_hat, x_adv_hat) = match transform {
        Transform::Identity => (batch.clone(), x_adv),
        t => (t.apply(batch)?, t.apply(&x_adv)?),
    };
    let (clean_logits, clean_trace) = net.forward(&x_hat)?;
    let (adv_logits, adv_trace) = net.forward(&x_adv_hat)?;
    let (hybrid_loss, mut grads) = hybrid_from_passes(
        net,
        (&clean_logits, &clean_trace),
        (&adv_logits, &adv_trace),
        labels,
        params.lambda,
    )?;
    let mut asd = 0.0;
    if let Some(bank) = global_bank {
        if params.asd_weight > 0.0 {
            let (l, g) = asd_from_trace(net, &adv_trace, labels, bank, params.asd_weight)?;
            asd = l;
            grads.accumulate(&g)?;
        }
    }
    Ok(FedBatStep {
        hybrid_loss,
        asd_loss: asd,
        loss: hybrid_loss + asd,
        grads,
        clean_embedding: clean_trace.embedding(),
        transform,
    })
}

/// FedBAT local training. Returns the update together with the local
/// feature bank collected from the evolving model during the epoch.
pub fn local_update_fedbat(
    client: &ClientState,
    net: &Network,
    global_bank: Option<&FeatureBank>,
    hp: &Hyperparams,
    params: &FedBatParams,
    round: usize,
) -> Result<LocalUpdate> {
    params.validate()?;
    let mut acc = FeatureAccumulator::new(client.data.num_classes(), net.feature_dim());
    let (net, mean_loss) = local_sgd(client, net, hp, round, |net, x, y, pos| {
        let step = fedbat_batch_step(
            net,
            x,
            y,
            global_bank,
            params,
            hp,
            client.attack_stream(round, pos.epoch, pos.index),
            client.augment_stream(round, pos.epoch, pos.index),
        )?;
        acc.add(&step.clean_embedding, y)?;
        Ok((step.loss, step.grads))
    })?;
    Ok(LocalUpdate {
        client: client.id,
        net,
        n_samples: client.n_samples(),
        mean_loss,
        bank: Some(acc.finish()),
        adversarial: true,
    })
}
