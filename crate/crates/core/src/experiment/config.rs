//! Experiment configuration.
//!
//! A config is a TOML file with a few top-level keys and flat sections:
//!
//! ```toml
//! preset = "mnist-fedbat"   # optional starting point, see `preset_table`
//! seed = 0
//! workers = 1
//!
//! [data]     dataset, dir, subsample_frac, n_clients, gamma, blob_* keys
//! [model]    hidden
//! [variant]  name, lambda | rho, asd_weight, augment, adv_fraction
//! [train]    lr, batch_size, local_epochs, rounds, participation_rate
//! [attack]   epsilon, alpha, train_steps, random_start
//! [augment]  crop_pad, hflip_prob, rotate_max_deg, scale_min, scale_max
//! [eval]     attacks, every, test_frac, random_start
//! [output]   dir, timing, checkpoint_every
//! ```
//!
//! Resolution order is: built-in defaults, then the preset, then the file,
//! then `section.key=value` overrides. Unknown keys are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::attacks::AttackConfig;
use crate::data::AugmentationSpec;
use crate::error::{Error, Result};
use crate::evaluation::{EvalAttack, EVAL_ATTACK_KEYS};
use crate::federation::{FedBatParams, Hyperparams, TrainerVariant};

/// Environment variable naming the directory that holds `mnist/` and
/// `fashion_mnist/` IDX files.
pub const DATA_DIR_ENV: &str = "FEDBAT_DATA_DIR";

pub const PRESET_DATASETS: [&str; 3] = ["mnist", "fashion", "blobs"];
pub const PRESET_VARIANTS: [&str; 4] = ["fedavg", "fedpgd", "mixfat", "fedbat"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Blobs,
}

impl DatasetKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion_mnist",
            DatasetKind::Blobs => "blobs",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dataset: DatasetKind,
    /// Directory with the four IDX files; defaults to
    /// `$FEDBAT_DATA_DIR/<dataset>` or `data/<dataset>`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub subsample_frac: f64,
    pub n_clients: usize,
    pub gamma: f64,
    pub blob_classes: usize,
    pub blob_train_per_class: usize,
    pub blob_test_per_class: usize,
    pub blob_dim: usize,
    pub blob_spread: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            dir: None,
            subsample_frac: 0.1,
            n_clients: 5,
            gamma: 0.5,
            blob_classes: 10,
            blob_train_per_class: 100,
            blob_test_per_class: 50,
            blob_dim: 64,
            blob_spread: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Hidden layer widths; the last one is the embedding width.
    pub hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden: vec![256, 128] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantName {
    Fedavg,
    Fedpgd,
    Mixfat,
    Fedbat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantSection {
    pub name: VariantName,
    /// Adversarial loss weight. Mutually exclusive with `rho`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Robustness-to-accuracy ratio `lambda / (1 - lambda)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    pub asd_weight: f64,
    pub augment: bool,
    pub adv_fraction: f64,
}

impl Default for VariantSection {
    fn default() -> Self {
        Self {
            name: VariantName::Fedbat,
            lambda: None,
            rho: None,
            asd_weight: 1.0,
            augment: true,
            adv_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub rounds: usize,
    pub participation_rate: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 0.01,
            batch_size: 64,
            local_epochs: 1,
            rounds: 100,
            participation_rate: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub epsilon: f64,
    pub alpha: f64,
    pub train_steps: usize,
    pub random_start: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            epsilon: 0.3,
            alpha: 0.01,
            train_steps: 10,
            random_start: false,
        }
    }
}

/// Augmentation ops; a zero (or a `1..1` scale range) switches an op off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub crop_pad: usize,
    pub hflip_prob: f64,
    pub rotate_max_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let d = AugmentationSpec::default();
        let (scale_min, scale_max) = d.scale_range.unwrap_or((1.0, 1.0));
        Self {
            crop_pad: d.crop_pad.unwrap_or(0),
            hflip_prob: d.hflip_prob.unwrap_or(0.0),
            rotate_max_deg: d.rotate_max_deg.unwrap_or(0.0),
            scale_min,
            scale_max,
        }
    }
}

impl AugmentSection {
    pub fn spec(&self) -> AugmentationSpec {
        AugmentationSpec {
            crop_pad: (self.crop_pad > 0).then_some(self.crop_pad),
            hflip_prob: (self.hflip_prob > 0.0).then_some(self.hflip_prob),
            rotate_max_deg: (self.rotate_max_deg > 0.0).then_some(self.rotate_max_deg),
            scale_range: (self.scale_min != 1.0 || self.scale_max != 1.0).then_some((self.scale_min, self.scale_max)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Any of `fgsm`, `bim`, `pgd40`, `pgd100`.
    pub attacks: Vec<String>,
    /// Evaluate every this many rounds (and always at round 0 and the end).
    pub every: usize,
    /// Fraction of the test split used for evaluation.
    pub test_frac: f64,
    pub random_start: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            attacks: EVAL_ATTACK_KEYS.iter().map(|s| s.to_string()).collect(),
            every: 5,
            test_frac: 1.0,
            random_start: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Record wall-clock seconds; when off the column is written as zero
    /// so repeated runs produce identical files.
    pub timing: bool,
    /// Also write `round_<t>.ckpt` every this many rounds (0: final only).
    pub checkpoint_every: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            timing: true,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub seed: u64,
    /// Threads for client updates. Results do not depend on it.
    pub workers: usize,
    pub data: DataSection,
    pub model: ModelSection,
    pub variant: VariantSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub augment: AugmentSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: None,
            seed: 0,
            workers: 1,
            data: DataSection::default(),
            model: ModelSection::default(),
            variant: VariantSection::default(),
            train: TrainSection::default(),
            attack: AttackSection::default(),
            augment: AugmentSection::default(),
            eval: EvalSection::default(),
            output: OutputSection::default(),
        }
    }
}

/// Converts a robustness-to-accuracy ratio to the adversarial weight.
pub fn lambda_from_rho(rho: f64) -> Result<f64> {
    if !(rho.is_finite() && rho >= 0.0) {
        return Err(Error::config("variant.rho", format!("must be >= 0, got {rho}")));
    }
    Ok(rho / (1.0 + rho))
}

/// Built-in preset `<dataset>-<variant>` as a TOML table.
pub fn preset_table(name: &str) -> Result<Table> {
    let unknown = || {
        Error::config(
            "preset",
            format!(
                "unknown preset `{name}`; use <dataset>-<variant> with dataset in {PRESET_DATASETS:?} \
                 and variant in {PRESET_VARIANTS:?}"
            ),
        )
    };
    let (dataset, variant) = name.split_once('-').ok_or_else(unknown)?;
    if !PRESET_VARIANTS.contains(&variant) {
        return Err(unknown());
    }
    let text = match dataset {
        "mnist" => {
            "[data]\ndataset = \"mnist\"\n\
             [attack]\nepsilon = 0.3\nalpha = 0.01\n\
             [variant]\nrho = 10.0\n"
        }
        "fashion" => {
            "[data]\ndataset = \"fashion_mnist\"\n\
             [attack]\nepsilon = 0.12549019607843137\nalpha = 0.03137254901960784\n\
             [variant]\nrho = 7.0\n"
        }
        "blobs" => {
            "[data]\ndataset = \"blobs\"\nsubsample_frac = 1.0\n\
             [model]\nhidden = [32, 16]\n\
             [train]\nrounds = 10\nlr = 0.05\nbatch_size = 32\n\
             [attack]\nepsilon = 0.1\nalpha = 0.025\n\
             [augment]\nrotate_max_deg = 0.0\nhflip_prob = 0.0\n\
             [variant]\nrho = 4.0\n"
        }
        _ => return Err(unknown()),
    };
    let mut t: Table = toml::from_str(text).map_err(|e| Error::config("preset", e.to_string()))?;
    apply_override(&mut t, &format!("variant.name=\"{variant}\""))?;
    apply_override(&mut t, &format!("output.dir=\"runs/{name}\""))?;
    Ok(t)
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies one `key=value` or `section.key=value` override.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    let value = parse_value(raw.trim());
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(key, "empty key"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Path of the first unknown key in `t` relative to the known layout.
fn unknown_key(t: &Table) -> Option<String> {
    let known = toml::Value::try_from(ExperimentConfig::default()).ok()?;
    let known = known.as_table()?;
    const OPTIONAL: [&str; 4] = ["preset", "data.dir", "variant.lambda", "variant.rho"];
    for (k, v) in t {
        match (known.get(k), v) {
            (Some(Value::Table(kt)), Value::Table(vt)) => {
                for sk in vt.keys() {
                    let path = format!("{k}.{sk}");
                    if !kt.contains_key(sk) && !OPTIONAL.contains(&path.as_str()) {
                        return Some(path);
                    }
                }
            }
            (Some(_), _) => {}
            (None, _) if OPTIONAL.contains(&k.as_str()) => {}
            (None, _) => return Some(k.clone()),
        }
    }
    None
}

impl ExperimentConfig {
    /// Builds a config from TOML text plus overrides and validates it.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut file: Table = toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut file, o)?;
        }
        let mut table = match file.get("preset") {
            Some(Value::String(name)) => preset_table(name)?,
            Some(_) => return Err(Error::config("preset", "must be a string")),
            None => Table::new(),
        };
        // a file-level lambda replaces the preset's rho rather than clashing with it
        let file_sets_lambda = file
            .get("variant")
            .and_then(Value::as_table)
            .is_some_and(|v| v.contains_key("lambda"));
        if file_sets_lambda {
            if let Some(Value::Table(v)) = table.get_mut("variant") {
                v.remove("rho");
            }
        }
        merge(&mut table, file);
        if let Some(key) = unknown_key(&table) {
            return Err(Error::config(key, "unknown key"));
        }
        let cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<std::path::Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    /// Built-in preset with defaults applied.
    pub fn preset(name: &str) -> Result<Self> {
        Self::parse(&format!("preset = \"{name}\"\n"), &[])
    }

    /// Fully resolved TOML; parsing it reproduces this config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Adversarial weight after resolving `rho`/`lambda`. Without either,
    /// the dataset's tuned ratio is used (10 for MNIST, 7 for Fashion-MNIST).
    pub fn lambda(&self) -> Result<f64> {
        match (self.variant.lambda, self.variant.rho) {
            (Some(_), Some(_)) => Err(Error::config("variant.rho", "set either lambda or rho, not both")),
            (Some(l), None) if (0.0..=1.0).contains(&l) => Ok(l),
            (Some(l), None) => Err(Error::config("variant.lambda", format!("must be in [0, 1], got {l}"))),
            (None, Some(r)) => lambda_from_rho(r),
            (None, None) => lambda_from_rho(match self.data.dataset {
                DatasetKind::FashionMnist => 7.0,
                _ => 10.0,
            }),
        }
    }

    pub fn trainer_variant(&self) -> Result<TrainerVariant> {
        let v = match self.variant.name {
            VariantName::Fedavg => TrainerVariant::FedAvg,
            VariantName::Fedpgd => TrainerVariant::FedPgd,
            VariantName::Mixfat => TrainerVariant::MixFat {
                adv_fraction: self.variant.adv_fraction,
            },
            VariantName::Fedbat => TrainerVariant::FedBat(FedBatParams {
                lambda: self.lambda()?,
                asd_weight: self.variant.asd_weight,
                augment: self.variant.augment,
            }),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn train_attack(&self) -> AttackConfig {
        AttackConfig {
            random_start: self.attack.random_start,
            ..AttackConfig::new(self.attack.epsilon, self.attack.alpha, self.attack.train_steps)
        }
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            local_epochs: self.train.local_epochs,
            rounds: self.train.rounds,
            attack: self.train_attack(),
            participation_rate: self.train.participation_rate,
            augmentation: self.augment.spec(),
        }
    }

    /// Evaluation attacks in report order.
    pub fn eval_attacks(&self) -> Result<Vec<EvalAttack>> {
        for (i, key) in self.eval.attacks.iter().enumerate() {
            if !EVAL_ATTACK_KEYS.contains(&key.as_str()) {
                return Err(Error::config(
                    "eval.attacks",
                    format!("unknown attack `{key}`, expected one of {EVAL_ATTACK_KEYS:?}"),
                ));
            }
            if self.eval.attacks[..i].contains(key) {
                return Err(Error::config("eval.attacks", format!("`{key}` listed twice")));
            }
        }
        EVAL_ATTACK_KEYS
            .iter()
            .filter(|k| self.eval.attacks.iter().any(|s| s == *k))
            .map(|k| EvalAttack::from_key(k, self.attack.epsilon, self.attack.alpha, self.eval.random_start))
            .collect()
    }

    /// Directory holding the IDX files for the configured dataset.
    pub fn data_dir(&self) -> PathBuf {
        if let Some(d) = &self.data.dir {
            return d.clone();
        }
        let root = std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from);
        root.join(self.data.dataset.dir_name())
    }

    /// Layer widths: input, hidden..., classes.
    pub fn layer_dims(&self, input_dim: usize, num_classes: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.model.hidden);
        dims.push(num_classes);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(d.subsample_frac > 0.0 && d.subsample_frac <= 1.0) {
            return Err(Error::config("data.subsample_frac", format!("must be in (0, 1], got {}", d.subsample_frac)));
        }
        if d.n_clients == 0 {
            return Err(Error::config("data.n_clients", "must be positive"));
        }
        if !(d.gamma.is_finite() && d.gamma > 0.0) {
            return Err(Error::config("data.gamma", format!("must be positive, got {}", d.gamma)));
        }
        if d.dataset == DatasetKind::Blobs {
            if d.blob_classes < 2 || d.blob_train_per_class == 0 || d.blob_test_per_class == 0 || d.blob_dim == 0 {
                return Err(Error::config("data.blob_classes", "blob sizes must be positive with >= 2 classes"));
            }
            if !(d.blob_spread.is_finite() && d.blob_spread >= 0.0) {
                return Err(Error::config("data.blob_spread", "must be >= 0"));
            }
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "layer widths must be positive"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers", "must be positive"));
        }
        if self.eval.every == 0 {
            return Err(Error::config("eval.every", "must be positive"));
        }
        if !(self.eval.test_frac > 0.0 && self.eval.test_frac <= 1.0) {
            return Err(Error::config("eval.test_frac", format!("must be in (0, 1], got {}", self.eval.test_frac)));
        }
        let aug = self.augment.spec();
        aug.validate().map_err(|e| match e {
            Error::Config { key, message } => Error::config(key.replace("augment.scale_range", "augment.scale_min"), message),
            other => other,
        })?;
        self.trainer_variant()?;
        self.eval_attacks()?;
        self.train_attack().validate()?;
        let hp = self.hyperparams();
        hp.validate(self.data.n_clients).map_err(|e| match e {
            Error::Config { key, message } if !key.contains('.') => Error::config(format!("train.{key}"), message),
            other => other,
        })
    }
}
