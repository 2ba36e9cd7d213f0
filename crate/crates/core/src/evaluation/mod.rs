//! Clean and robust accuracy, cluster quality of embeddings, and embedding
//! export.

mod embeddings;
mod vscore;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attacks::{bim, fgsm, pgd, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::rng::{Purpose, RngStream};
use crate::tensor::Tensor;

pub use embeddings::{export_embeddings, read_embeddings, EmbeddingDump, SampleKind};
pub use vscore::{homogeneity_completeness_v, v_score, VScore};

/// Rows per evaluation batch. Results do not depend on it.
pub const EVAL_BATCH: usize = 500;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn predict(net: &Network, batch: &Tensor) -> Result<Vec<usize>> {
    let logits = net.logits(batch)?;
    Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
}

fn chunks(ds: &Dataset, batch_size: usize) -> Result<Vec<Vec<usize>>> {
    if ds.is_empty() {
        return Err(Error::Metric("accuracy of an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::config("eval_batch", "must be positive"));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

fn count_hits(net: &Network, x: &Tensor, labels: &[usize]) -> Result<usize> {
    Ok(predict(net, x)?.iter().zip(labels).filter(|(p, l)| p == l).count())
}

pub fn clean_accuracy(net: &Network, ds: &Dataset) -> Result<f64> {
    clean_accuracy_batched(net, ds, EVAL_BATCH)
}

pub fn clean_accuracy_batched(net: &Network, ds: &Dataset, batch_size: usize) -> Result<f64> {
    let mut hits = 0;
    for c in chunks(ds, batch_size)? {
        let (x, y) = ds.batch(&c);
        hits += count_hits(net, &x, &y)?;
    }
    Ok(hits as f64 / ds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMethod {
    Fgsm,
    Bim,
    Pgd,
}

impl AttackMethod {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "fgsm" => Ok(AttackMethod::Fgsm),
            "bim" => Ok(AttackMethod::Bim),
            "pgd" => Ok(AttackMethod::Pgd),
            other => Err(Error::config("attack", format!("unknown attack `{other}`"))),
        }
    }

    /// Perturbs one batch. PGD random starts come from `rng`.
    pub fn perturb(
        self,
        net: &Network,
        x: &Tensor,
        labels: &[usize],
        cfg: &AttackConfig,
        rng: RngStream,
    ) -> Result<Tensor> {
        match self {
            AttackMethod::Fgsm => fgsm(net, x, labels, cfg.epsilon, cfg.clamp),
            AttackMethod::Bim => bim(net, x, labels, cfg),
            AttackMethod::Pgd => pgd(net, x, labels, cfg, rng),
        }
    }
}

/// Accuracy on white-box adversarial inputs crafted against `net` itself.
/// `attack` is one of `fgsm`, `bim`, `pgd`. Random starts, if enabled, are
/// drawn per sample so the result does not depend on batching.
pub fn robust_accuracy(net: &Network, ds: &Dataset, attack: &str, cfg: &AttackConfig) -> Result<f64> {
    robust_accuracy_batched(net, ds, attack, cfg, EVAL_BATCH)
}

pub fn robust_accuracy_batched(
    net: &Network,
    ds: &Dataset,
    attack: &str,
    cfg: &AttackConfig,
    batch_size: usize,
) -> Result<f64> {
    let method = AttackMethod::parse(attack)?;
    cfg.validate()?;
    let mut hits = 0;
    for c in chunks(ds, batch_size)? {
        let (x, y) = ds.batch(&c);
        let x_adv = if method == AttackMethod::Pgd && cfg.random_start {
            // one stream per sample keeps the start independent of batching
            let mut rows = Vec::with_capacity(x.len());
            for (r, &i) in c.iter().enumerate() {
                let xi = x.select_rows(&[r]);
                let rng = RngStream::new(0).for_purpose(Purpose::Evaluation).derive(i as u64);
                rows.extend_from_slice(method.perturb(net, &xi, &y[r..=r], cfg, rng)?.data());
            }
            Tensor::new(x.shape().to_vec(), rows)?
        } else {
            method.perturb(net, &x, &y, cfg, RngStream::new(0))?
        };
        hits += count_hits(net, &x_adv, &y)?;
    }
    Ok(hits as f64 / ds.len() as f64)
}

/// A named evaluation attack, such as `pgd40`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalAttack {
    pub key: String,
    pub method: AttackMethod,
    pub config: AttackConfig,
}

/// Keys understood by [`EvalAttack::from_key`], in report order.
pub const EVAL_ATTACK_KEYS: [&str; 4] = ["fgsm", "bim", "pgd40", "pgd100"];

impl EvalAttack {
    /// `fgsm` (one step of size epsilon), `bim` (10 steps), `pgd40`,
    /// `pgd100`; all share the given epsilon and step size.
    pub fn from_key(key: &str, epsilon: f64, alpha: f64, random_start: bool) -> Result<Self> {
        let (method, steps) = match key {
            "fgsm" => (AttackMethod::Fgsm, 1),
            "bim" => (AttackMethod::Bim, 10),
            "pgd40" => (AttackMethod::Pgd, 40),
            "pgd100" => (AttackMethod::Pgd, 100),
            other => {
                return Err(Error::config(
                    "eval.attacks",
                    format!("unknown attack `{other}`, expected one of {EVAL_ATTACK_KEYS:?}"),
                ))
            }
        };
        let config = AttackConfig {
            random_start: random_start && method == AttackMethod::Pgd,
            ..AttackConfig::new(epsilon, alpha, steps)
        };
        config.validate()?;
        Ok(Self {
            key: key.to_string(),
            method,
            config,
        })
    }

    pub fn accuracy(&self, net: &Network, ds: &Dataset) -> Result<f64> {
        let name = match self.method {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Bim => "bim",
            AttackMethod::Pgd => "pgd",
        };
        robust_accuracy(net, ds, name, &self.config)
    }
}

/// One evaluated round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub round: usize,
    pub variant: String,
    pub clean_acc: f64,
    /// Robust accuracy keyed by attack key (`fgsm`, `bim`, `pgd40`, `pgd100`).
    pub robust: BTreeMap<String, f64>,
    /// Mean local training loss of the round; 0 before any training.
    pub mean_loss: f64,
    /// Wall-clock seconds of the round's training and evaluation.
    pub seconds: f64,
}

impl MetricRow {
    /// Mean over the attacks that were evaluated, if any.
    pub fn mean_robust(&self) -> Option<f64> {
        (!self.robust.is_empty()).then(|| self.robust.values().sum::<f64>() / self.robust.len() as f64)
    }
}

/// Clean accuracy and every attack's robust accuracy.
pub fn evaluate(net: &Network, ds: &Dataset, attacks: &[EvalAttack]) -> Result<(f64, BTreeMap<String, f64>)> {
    let clean = clean_accuracy(net, ds)?;
    let mut robust = BTreeMap::new();
    for a in attacks {
        robust.insert(a.key.clone(), a.accuracy(net, ds)?);
    }
    Ok((clean, robust))
}
