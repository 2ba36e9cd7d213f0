//! End-to-end experiments: data preparation, the round loop with periodic
//! evaluation, and the files a run leaves behind (`metrics.csv`,
//! `manifest.toml`, `curve.svg`, `final.ckpt`).

pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{dirichlet_partition, load_idx, subsample_fraction, synthesize_blobs_split, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, export_embeddings, EmbeddingDump, EvalAttack, MetricRow};
use crate::federation::{checkpoint, ClientState, Federation, ServerState};
use crate::nn::Network;

pub use config::{lambda_from_rho, DatasetKind, ExperimentConfig, DATA_DIR_ENV};
pub use report::{learning_curve_svg, read_metrics_csv, write_learning_curve_svg, write_metrics_csv};

/// Number of final evaluated rounds averaged into the headline numbers.
pub const HEADLINE_WINDOW: usize = 5;

const TEST_SUBSAMPLE_SALT: u64 = 0x7465_7374;

/// Train and test splits for a config, before subsampling.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    match d.dataset {
        DatasetKind::Blobs => {
            let make = |per_class, split| {
                synthesize_blobs_split(d.blob_classes, per_class, d.blob_dim, d.blob_spread, cfg.seed, split)
            };
            Ok((make(d.blob_train_per_class, 0)?, make(d.blob_test_per_class, 1)?))
        }
        DatasetKind::Mnist | DatasetKind::FashionMnist => {
            let dir = cfg.data_dir();
            let train = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
            let test = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
            Ok((train, test))
        }
    }
}

/// Everything needed to run the rounds of one config.
#[derive(Debug)]
pub struct Experiment {
    cfg: ExperimentConfig,
    federation: Federation,
    test: Dataset,
    attacks: Vec<EvalAttack>,
    initial: Network,
}

impl Experiment {
    /// Loads and subsamples data, partitions it across clients and builds
    /// the initial model.
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, test) = load_splits(cfg)?;
        let train = subsample_fraction(&train, cfg.data.subsample_frac, cfg.seed)?;
        let test = subsample_fraction(&test, cfg.eval.test_frac, cfg.seed ^ TEST_SUBSAMPLE_SALT)?;
        let num_classes = train.num_classes();
        let plan = dirichlet_partition(train.labels(), cfg.data.n_clients, cfg.data.gamma, cfg.seed)?;
        let clients = plan
            .client_indices()
            .iter()
            .enumerate()
            .map(|(i, idx)| ClientState::new(i, train.subset(idx), cfg.seed))
            .collect::<Result<Vec<_>>>()?;
        let initial = Network::init(&cfg.layer_dims(train.input_dim(), num_classes), cfg.seed)?;
        let federation = Federation::new(clients, cfg.trainer_variant()?, cfg.hyperparams(), cfg.seed, cfg.workers)?;
        Ok(Self {
            cfg: cfg.clone(),
            federation,
            test,
            attacks: cfg.eval_attacks()?,
            initial,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn federation(&self) -> &Federation {
        &self.federation
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn initial_state(&self) -> ServerState {
        ServerState::new(self.initial.clone())
    }

    fn is_eval_round(&self, round: usize) -> bool {
        round.is_multiple_of(self.cfg.eval.every) || round == self.cfg.train.rounds
    }

    fn metric_row(&self, server: &ServerState, mean_loss: f64, seconds: f64) -> Result<MetricRow> {
        let (clean_acc, robust) = evaluate(&server.global_net, &self.test, &self.attacks)?;
        Ok(MetricRow {
            round: server.round,
            variant: self.federation.variant().name().to_string(),
            clean_acc,
            robust,
            mean_loss,
            seconds: if self.cfg.output.timing { seconds } else { 0.0 },
        })
    }

    /// Runs from `start` (the initial model when `None`) to the configured
    /// round count, evaluating the starting point and every scheduled
    /// round. Writes nothing; `observer` sees each metric row as it is made.
    pub fn run<F>(&self, start: Option<ServerState>, observer: F) -> Result<(ServerState, RunManifest)>
    where
        F: FnMut(&MetricRow),
    {
        self.run_inner(start, observer, None)
    }

    /// Like [`Experiment::run`] but also writes per-round checkpoints as
    /// configured and every output file into `cfg.output.dir`.
    pub fn run_and_write<F>(&self, start: Option<ServerState>, observer: F) -> Result<RunManifest>
    where
        F: FnMut(&MetricRow),
    {
        let dir = self.cfg.output.dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (server, manifest) = self.run_inner(start, observer, Some(&dir))?;
        write_outputs(&dir, &server, &manifest, &self.cfg)?;
        Ok(manifest)
    }

    fn run_inner<F>(
        &self,
        start: Option<ServerState>,
        mut observer: F,
        ckpt_dir: Option<&Path>,
    ) -> Result<(ServerState, RunManifest)>
    where
        F: FnMut(&MetricRow),
    {
        let mut server = start.unwrap_or_else(|| self.initial_state());
        let rounds = self.cfg.train.rounds;
        if server.round > rounds {
            return Err(Error::config(
                "train.rounds",
                format!("checkpoint is at round {} but only {rounds} rounds are configured", server.round),
            ));
        }
        let mut manifest = RunManifest {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            variant: self.federation.variant().name().to_string(),
            start_round: server.round,
            rounds_executed: 0,
            round_seconds: Vec::new(),
            metrics: Vec::new(),
            config: self.cfg.to_toml(),
        };
        let t0 = Instant::now();
        let row = self.metric_row(&server, 0.0, t0.elapsed().as_secs_f64())?;
        observer(&row);
        manifest.metrics.push(row);

        let every = self.cfg.output.checkpoint_every;
        while server.round < rounds {
            let t = Instant::now();
            let (next, report) = self.federation.run_round(&server)?;
            server = next;
            manifest.rounds_executed += 1;
            if self.is_eval_round(server.round) {
                let row = self.metric_row(&server, report.mean_loss(), t.elapsed().as_secs_f64())?;
                observer(&row);
                manifest.metrics.push(row);
            }
            if let Some(dir) = ckpt_dir.filter(|_| every > 0 && server.round.is_multiple_of(every)) {
                checkpoint::save(dir.join(format!("round_{}.ckpt", server.round)), &server, &manifest.config)?;
            }
            let secs = if self.cfg.output.timing { t.elapsed().as_secs_f64() } else { 0.0 };
            manifest.round_seconds.push(secs);
        }
        Ok((server, manifest))
    }
}

fn write_outputs(dir: &Path, server: &ServerState, manifest: &RunManifest, cfg: &ExperimentConfig) -> Result<()> {
    write_metrics_csv(&manifest.metrics, dir.join("metrics.csv"))?;
    manifest.save(dir.join("manifest.toml"))?;
    checkpoint::save(dir.join("final.ckpt"), server, &manifest.config)?;
    let attacks: Vec<String> = cfg.eval_attacks()?.into_iter().map(|a| a.key).collect();
    let title = format!("{} on {}", manifest.variant, cfg.data.dataset.dir_name());
    write_learning_curve_svg(&manifest.metrics, &attacks, &title, dir.join("curve.svg"))
}

/// Record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub variant: String,
    /// Round the run started from (non-zero when resumed).
    pub start_round: usize,
    pub rounds_executed: usize,
    /// Wall-clock seconds of every executed round, including evaluation.
    pub round_seconds: Vec<f64>,
    pub metrics: Vec<MetricRow>,
    /// Fully resolved config; parsing it reproduces the run.
    pub config: String,
}

/// Averages over the final evaluated rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Headline {
    pub clean_acc: f64,
    pub robust: BTreeMap<String, f64>,
    pub rounds: Vec<usize>,
}

impl Headline {
    /// Mean over attacks of the robust accuracies.
    pub fn mean_robust(&self) -> f64 {
        if self.robust.is_empty() {
            0.0
        } else {
            self.robust.values().sum::<f64>() / self.robust.len() as f64
        }
    }
}

impl RunManifest {
    pub fn final_row(&self) -> &MetricRow {
        self.metrics.last().expect("a manifest always holds the starting evaluation")
    }

    /// Mean of the last `window` evaluated rounds.
    pub fn headline(&self, window: usize) -> Headline {
        let rows = &self.metrics[self.metrics.len().saturating_sub(window.max(1))..];
        let n = rows.len() as f64;
        let mut robust: BTreeMap<String, f64> = BTreeMap::new();
        for r in rows {
            for (k, v) in &r.robust {
                *robust.entry(k.clone()).or_default() += v / n;
            }
        }
        Headline {
            clean_acc: rows.iter().map(|r| r.clean_acc).sum::<f64>() / n,
            robust,
            rounds: rows.iter().map(|r| r.round).collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(self).map_err(|e| Error::config("manifest", e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: e.span().map_or(0, |s| s.start as u64),
            message: e.message().to_string(),
        })
    }
}

/// Prepares and runs `cfg`, writing outputs to `cfg.output.dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    Experiment::prepare(cfg)?.run_and_write(None, |_| {})
}

/// Continues the run stored in a checkpoint. The checkpoint's own config
/// is used unless `cfg` is given.
pub fn resume_experiment(ckpt: impl AsRef<Path>, cfg: Option<&ExperimentConfig>) -> Result<RunManifest> {
    let ck = checkpoint::load(ckpt)?;
    let cfg = match cfg {
        Some(c) => c.clone(),
        None => ExperimentConfig::parse(&ck.config, &[])?,
    };
    Experiment::prepare(&cfg)?.run_and_write(Some(ck.server), |_| {})
}

/// One FedBAT run per robustness ratio, sharing the seed. Each run writes
/// into `<output.dir>/rho_<value>/`; `sweep.csv` in `output.dir` lists the
/// final round's clean and mean robust accuracy.
pub fn run_sweep<F>(cfg: &ExperimentConfig, rhos: &[f64], mut observer: F) -> Result<(Vec<RunManifest>, PathBuf)>
where
    F: FnMut(f64, &MetricRow),
{
    if cfg.variant.name != config::VariantName::Fedbat {
        return Err(Error::config("variant.name", "a rho sweep needs the fedbat variant"));
    }
    if rhos.is_empty() {
        return Err(Error::config("rho", "give at least one value"));
    }
    let base = cfg.output.dir.clone();
    let mut manifests = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        let mut c = cfg.clone();
        c.variant.lambda = None;
        c.variant.rho = Some(rho);
        c.output.dir = base.join(format!("rho_{rho}"));
        c.validate()?;
        let m = Experiment::prepare(&c)?.run_and_write(None, |row| observer(rho, row))?;
        manifests.push(m);
    }
    let path = base.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format {
        path: path.clone(),
        offset: 0,
        message: e.to_string(),
    })?;
    let io = |e: csv::Error| Error::Format {
        path: path.clone(),
        offset: 0,
        message: e.to_string(),
    };
    w.write_record(["rho", "clean_acc", "mean_robust_acc"]).map_err(io)?;
    for (rho, m) in rhos.iter().zip(&manifests) {
        let last = m.final_row();
        let robust = last.mean_robust().map_or_else(String::new, |v| format!("{v:.6}"));
        w.write_record([rho.to_string(), format!("{:.6}", last.clean_acc), robust])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok((manifests, path))
}

/// Embeds the config's evaluation split with a checkpointed model. Rows
/// for the training attack's adversarial examples follow the clean rows.
pub fn export_checkpoint_embeddings(ckpt: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<EmbeddingDump> {
    let ck = checkpoint::load(ckpt)?;
    let cfg = ExperimentConfig::parse(&ck.config, &[])?;
    let (_, test) = load_splits(&cfg)?;
    let test = subsample_fraction(&test, cfg.eval.test_frac, cfg.seed ^ TEST_SUBSAMPLE_SALT)?;
    export_embeddings(&ck.server.global_net, &test, Some(&cfg.train_attack()), out)
}
