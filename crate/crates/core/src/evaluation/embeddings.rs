use std::path::Path;

use crate::attacks::{pgd, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::rng::{Purpose, RngStream};
use crate::tensor::Tensor;

use super::{argmax, EVAL_BATCH};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Clean,
    Adv,
}

impl SampleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleKind::Clean => "clean",
            SampleKind::Adv => "adv",
        }
    }
}

/// Per-sample embeddings with true and predicted labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    /// `rows x feature_dim`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub preds: Vec<usize>,
    pub kinds: Vec<SampleKind>,
}

impl EmbeddingDump {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.row_len()
    }
}

fn embed_rows(net: &Network, x: &Tensor, dump: &mut EmbeddingDump, feats: &mut Vec<f64>, kind: SampleKind) -> Result<()> {
    let (logits, trace) = net.forward(x)?;
    let z = trace.embedding();
    feats.extend_from_slice(z.data());
    for i in 0..logits.rows() {
        dump.preds.push(argmax(logits.row(i)));
        dump.kinds.push(kind);
    }
    Ok(())
}

/// Embeds every sample of `ds` (and, with an attack, its PGD counterpart)
/// and writes a CSV with columns `feature_0..feature_{F-1},label,pred,kind`.
/// Clean rows come first, then adversarial rows in the same sample order.
pub fn export_embeddings(
    net: &Network,
    ds: &Dataset,
    attack: Option<&AttackConfig>,
    path: impl AsRef<Path>,
) -> Result<EmbeddingDump> {
    let mut dump = EmbeddingDump {
        features: Tensor::zeros(vec![0, net.feature_dim()]),
        labels: Vec::new(),
        preds: Vec::new(),
        kinds: Vec::new(),
    };
    let mut feats = Vec::new();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let passes: &[SampleKind] = if attack.is_some() {
        &[SampleKind::Clean, SampleKind::Adv]
    } else {
        &[SampleKind::Clean]
    };
    for &kind in passes {
        for (b, chunk) in idx.chunks(EVAL_BATCH).enumerate() {
            let (x, y) = ds.batch(chunk);
            let x = match (kind, attack) {
                (SampleKind::Adv, Some(cfg)) => {
                    let rng = RngStream::new(0).for_purpose(Purpose::Evaluation).derive(b as u64);
                    pgd(net, &x, &y, cfg, rng)?
                }
                _ => x,
            };
            embed_rows(net, &x, &mut dump, &mut feats, kind)?;
            dump.labels.extend_from_slice(&y);
        }
    }
    dump.features = Tensor::new(vec![dump.labels.len(), net.feature_dim()], feats)?;
    write_embeddings(&dump, path.as_ref())?;
    Ok(dump)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("{other:?}"),
        },
    }
}

fn write_embeddings(dump: &EmbeddingDump, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let f = dump.feature_dim();
    let mut header: Vec<String> = (0..f).map(|i| format!("feature_{i}")).collect();
    header.extend(["label", "pred", "kind"].map(String::from));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..dump.len() {
        let mut rec: Vec<String> = dump.features.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(dump.labels[i].to_string());
        rec.push(dump.preds[i].to_string());
        rec.push(dump.kinds[i].as_str().to_string());
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses a file written by [`export_embeddings`].
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingDump> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let n_cols = header.len();
    let tail: Vec<&str> = header.iter().skip(n_cols.saturating_sub(3)).collect();
    if n_cols < 3 || tail != ["label", "pred", "kind"] {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: "header must end with label,pred,kind".into(),
        });
    }
    let f = n_cols - 3;
    let bad = |line: u64, what: &str| Error::Format {
        path: path.to_path_buf(),
        offset: line,
        message: format!("bad {what}"),
    };
    let mut feats = Vec::new();
    let (mut labels, mut preds, mut kinds) = (Vec::new(), Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let pos = rec.position().map_or(0, |p| p.byte());
        for v in rec.iter().take(f) {
            feats.push(v.parse::<f64>().map_err(|_| bad(pos, "feature"))?);
        }
        labels.push(rec[f].parse().map_err(|_| bad(pos, "label"))?);
        preds.push(rec[f + 1].parse().map_err(|_| bad(pos, "pred"))?);
        kinds.push(match &rec[f + 2] {
            "clean" => SampleKind::Clean,
            "adv" => SampleKind::Adv,
            _ => return Err(bad(pos, "kind")),
        });
    }
    Ok(EmbeddingDump {
        features: Tensor::new(vec![labels.len(), f], feats)?,
        labels,
        preds,
        kinds,
    })
}
