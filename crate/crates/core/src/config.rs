//! Experiment configuration: a flat `key = value` file.
//!
//! ```text
//! # comments run to end of line
//! mode = pfedes
//! dataset = synthetic
//! num_clients = 10
//! rounds = 20
//! seed = 7
//! ```
//!
//! | key | default | notes |
//! |-----|---------|-------|
//! | `mode` | required | `pfedes`, `standalone`, `fedavg` |
//! | `dataset` | required | `synthetic`, `cifar10`, `idx` |
//! | `dataset_path` | — | cifar10: batch directory; idx: image file |
//! | `dataset_labels` | — | idx: label file |
//! | `synthetic_classes` | 10 | |
//! | `synthetic_per_class` | 200 | |
//! | `synthetic_shape` | `1x16x16` | `CxHxW` |
//! | `synthetic_sigma` | 0.15 | |
//! | `partition` | `noniid` | `noniid` or `iid` |
//! | `classes_per_client` | 2 | non-IID only |
//! | `num_clients` | 10 | |
//! | `client_fraction` | 1.0 | in `(0, 1]` |
//! | `rounds` | 20 | |
//! | `local_epochs` | 1 | |
//! | `extractor_epochs` | 5 | |
//! | `lr_model` | 0.01 | |
//! | `lr_extractor` | 0.01 | |
//! | `mu` | 0.2 | in `(0, 0.5]` |
//! | `batch_size` | 64 | |
//! | `variants` | `uniform` | `uniform` (seeded draw from 1..=5) or a variant id |
//! | `seed` | 0 | |
//! | `target_accuracy` | empty | comma-separated fractions in `(0, 1]` |
//! | `out_dir` | `runs` | not part of the config hash |
//! | `workers` | 1 | not part of the config hash |

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::data::{self, ClientPartition, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::ImageShape;
use crate::protocol::{Hyperparams, Mode, TrainingSetup};
use crate::rng::{self, derive_seed, Domain};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    /// Directory holding the six CIFAR-10 binary batches.
    Cifar10 { dir: PathBuf },
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionScheme {
    NonIid,
    Iid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantRule {
    /// Each client draws its variant uniformly from 1..=5.
    Uniform,
    /// Every client uses this variant.
    Fixed(u8),
}

impl VariantRule {
    pub fn resolve(self, num_clients: usize, seed: u64) -> Vec<u8> {
        match self {
            VariantRule::Fixed(v) => vec![v; num_clients],
            VariantRule::Uniform => {
                let mut r = rng::stream(seed, Domain::Variant, 0);
                (0..num_clients).map(|_| r.random_range(1..=5u8)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub dataset: DatasetSpec,
    pub partition: PartitionScheme,
    pub classes_per_client: usize,
    pub hp: Hyperparams,
    pub variants: VariantRule,
    pub target_accuracy: Vec<f64>,
    pub out_dir: PathBuf,
    pub workers: usize,
}

/// Dataset, partitions and variants resolved from a config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Arc<Dataset>,
    pub partitions: Vec<ClientPartition>,
    pub variants: Vec<u8>,
}

const KEYS: &[&str] = &[
    "mode",
    "dataset",
    "dataset_path",
    "dataset_labels",
    "synthetic_classes",
    "synthetic_per_class",
    "synthetic_shape",
    "synthetic_sigma",
    "partition",
    "classes_per_client",
    "num_clients",
    "client_fraction",
    "rounds",
    "local_epochs",
    "extractor_epochs",
    "lr_model",
    "lr_extractor",
    "mu",
    "batch_size",
    "variants",
    "seed",
    "target_accuracy",
    "out_dir",
    "workers",
];

/// Keys that do not change what a run computes.
const NON_SEMANTIC: &[&str] = &["out_dir", "workers"];

fn parse_value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| Error::config(key, format!("cannot parse `{raw}`: {e}")))
}

struct Entries(Vec<(String, String)>);

impl Entries {
    fn take(&mut self, key: &str) -> Option<String> {
        let i = self.0.iter().position(|(k, _)| k == key)?;
        Some(self.0.remove(i).1)
    }

    fn get<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.take(key).map_or(Ok(default), |raw| parse_value(key, &raw))
    }

    fn path(&mut self, key: &str, kind: &str) -> Result<PathBuf> {
        self.take(key)
            .map(PathBuf::from)
            .ok_or_else(|| Error::config(key, format!("required for dataset = {kind}")))
    }
}

impl ExperimentConfig {
    /// Parses config text. Unknown keys, duplicates and out-of-range values
    /// are errors naming the key.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(
                    line,
                    format!("line {}: expected `key = value`", lineno + 1),
                ));
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::config(key, "unknown key"));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "given more than once"));
            }
            entries.push((key.to_string(), value.to_string()));
        }
        let mut e = Entries(entries);

        let mode: Mode = e
            .take("mode")
            .ok_or_else(|| Error::config("mode", "required"))
            .and_then(|raw| parse_value("mode", &raw))?;
        let kind = e.take("dataset").ok_or_else(|| Error::config("dataset", "required"))?;
        let synthetic = SyntheticSpec {
            num_classes: e.get("synthetic_classes", 10)?,
            per_class: e.get("synthetic_per_class", 200)?,
            shape: e.get("synthetic_shape", ImageShape::new(1, 16, 16))?,
            noise_sigma: e.get("synthetic_sigma", 0.15)?,
        };
        let dataset = match kind.as_str() {
            "synthetic" => DatasetSpec::Synthetic(synthetic),
            "cifar10" => DatasetSpec::Cifar10 {
                dir: e.path("dataset_path", "cifar10")?,
            },
            "idx" => DatasetSpec::Idx {
                images: e.path("dataset_path", "idx")?,
                labels: e.path("dataset_labels", "idx")?,
            },
            other => {
                return Err(Error::config(
                    "dataset",
                    format!("unknown dataset `{other}` (expected synthetic, cifar10 or idx)"),
                ))
            }
        };
        if let Some(stray) = e.0.iter().find(|(k, _)| k.starts_with("synthetic_") || k.starts_with("dataset_")) {
            return Err(Error::config(stray.0.clone(), format!("not used by dataset = {kind}")));
        }
        let partition = match e.take("partition").as_deref() {
            None | Some("noniid") => PartitionScheme::NonIid,
            Some("iid") => PartitionScheme::Iid,
            Some(other) => {
                return Err(Error::config("partition", format!("expected noniid or iid, got `{other}`")))
            }
        };
        let classes_per_client = e.get("classes_per_client", 2)?;
        let d = Hyperparams::default();
        let hp = Hyperparams {
            num_clients: e.get("num_clients", d.num_clients)?,
            client_fraction: e.get("client_fraction", d.client_fraction)?,
            rounds: e.get("rounds", d.rounds)?,
            local_epochs: e.get("local_epochs", d.local_epochs)?,
            extractor_epochs: e.get("extractor_epochs", d.extractor_epochs)?,
            lr_model: e.get("lr_model", d.lr_model)?,
            lr_extractor: e.get("lr_extractor", d.lr_extractor)?,
            mu: e.get("mu", d.mu)?,
            batch_size: e.get("batch_size", d.batch_size)?,
            seed: e.get("seed", d.seed)?,
        };
        let variants = match e.take("variants").as_deref() {
            None | Some("uniform") => VariantRule::Uniform,
            Some(raw) => VariantRule::Fixed(parse_value("variants", raw)?),
        };
        let target_accuracy = match e.take("target_accuracy") {
            None => Vec::new(),
            Some(raw) if raw.is_empty() => Vec::new(),
            Some(raw) => raw
                .split(',')
                .map(|v| parse_value("target_accuracy", v.trim()))
                .collect::<Result<_>>()?,
        };
        let config = Self {
            mode,
            dataset,
            partition,
            classes_per_client,
            hp,
            variants,
            target_accuracy,
            out_dir: e.get("out_dir", PathBuf::from("runs"))?,
            workers: e.get("workers", 1)?,
        };
        debug_assert!(e.0.is_empty(), "every known key is consumed");
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if let DatasetSpec::Synthetic(s) = &self.dataset {
            if s.num_classes < 2 {
                return Err(Error::config("synthetic_classes", "need at least 2 classes"));
            }
            if s.per_class == 0 {
                return Err(Error::config("synthetic_per_class", "must be at least 1"));
            }
            if !(s.noise_sigma >= 0.0 && s.noise_sigma.is_finite()) {
                return Err(Error::config("synthetic_sigma", "must be a finite value >= 0"));
            }
            if self.partition == PartitionScheme::NonIid && self.classes_per_client > s.num_classes {
                return Err(Error::config(
                    "classes_per_client",
                    format!("exceeds the {} synthetic classes", s.num_classes),
                ));
            }
        }
        if self.classes_per_client == 0 {
            return Err(Error::config("classes_per_client", "must be at least 1"));
        }
        if let VariantRule::Fixed(v) = self.variants {
            if !(1..=5).contains(&v) {
                return Err(Error::config("variants", format!("variant must be 1..=5, got {v}")));
            }
        }
        if self.mode == Mode::FedAvg && self.variants == VariantRule::Uniform && self.hp.num_clients > 1 {
            return Err(Error::config("variants", "fedavg needs a single fixed variant"));
        }
        if let Some(t) = self.target_accuracy.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::config("target_accuracy", format!("{t} is not in (0, 1]")));
        }
        if self.workers == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        Ok(())
    }

    /// Same config with a different seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.hp.seed = seed;
        self
    }

    fn canonical_pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![("mode", self.mode.to_string())];
        match &self.dataset {
            DatasetSpec::Synthetic(s) => {
                out.push(("dataset", "synthetic".into()));
                out.push(("synthetic_classes", s.num_classes.to_string()));
                out.push(("synthetic_per_class", s.per_class.to_string()));
                out.push(("synthetic_shape", s.shape.to_string()));
                out.push(("synthetic_sigma", s.noise_sigma.to_string()));
            }
            DatasetSpec::Cifar10 { dir } => {
                out.push(("dataset", "cifar10".into()));
                out.push(("dataset_path", dir.display().to_string()));
            }
            DatasetSpec::Idx { images, labels } => {
                out.push(("dataset", "idx".into()));
                out.push(("dataset_path", images.display().to_string()));
                out.push(("dataset_labels", labels.display().to_string()));
            }
        }
        let hp = &self.hp;
        out.extend([
            (
                "partition",
                match self.partition {
                    PartitionScheme::NonIid => "noniid".to_string(),
                    PartitionScheme::Iid => "iid".to_string(),
                },
            ),
            ("classes_per_client", self.classes_per_client.to_string()),
            ("num_clients", hp.num_clients.to_string()),
            ("client_fraction", hp.client_fraction.to_string()),
            ("rounds", hp.rounds.to_string()),
            ("local_epochs", hp.local_epochs.to_string()),
            ("extractor_epochs", hp.extractor_epochs.to_string()),
            ("lr_model", hp.lr_model.to_string()),
            ("lr_extractor", hp.lr_extractor.to_string()),
            ("mu", hp.mu.to_string()),
            ("batch_size", hp.batch_size.to_string()),
            (
                "variants",
                match self.variants {
                    VariantRule::Uniform => "uniform".to_string(),
                    VariantRule::Fixed(v) => v.to_string(),
                },
            ),
            ("seed", hp.seed.to_string()),
            (
                "target_accuracy",
                self.target_accuracy
                    .iter()
                    .map(f64::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("out_dir", self.out_dir.display().to_string()),
            ("workers", self.workers.to_string()),
        ]);
        out
    }

    /// Every key, explicit, in a fixed order. Parses back to an equal config.
    pub fn to_canonical_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.canonical_pairs() {
            writeln!(s, "{k} = {v}").expect("writing to a String");
        }
        s
    }

    /// SHA-256 (hex) of the canonical text minus `out_dir` and `workers`.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.canonical_pairs() {
            if !NON_SEMANTIC.contains(&k) {
                h.update(format!("{k} = {v}\n"));
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSpec::Synthetic(s) => data::generate_synthetic(s, self.hp.seed),
            DatasetSpec::Cifar10 { dir } => data::load_cifar10(dir),
            DatasetSpec::Idx { images, labels } => data::load_idx(images, labels),
        }
    }

    pub fn partition(&self, ds: &Dataset) -> Result<Vec<ClientPartition>> {
        let seed = derive_seed(self.hp.seed, Domain::Partition, 0);
        match self.partition {
            PartitionScheme::NonIid => data::partition_noniid(ds, self.hp.num_clients, self.classes_per_client, seed),
            PartitionScheme::Iid => data::partition_iid(ds, self.hp.num_clients, seed),
        }
    }

    /// Loads the dataset, partitions it and assigns variants.
    pub fn prepare(&self) -> Result<Prepared> {
        let ds = self.load_dataset()?;
        let partitions = self.partition(&ds)?;
        Ok(Prepared {
            dataset: Arc::new(ds),
            partitions,
            variants: self.variants.resolve(self.hp.num_clients, self.hp.seed),
        })
    }

    pub fn training_setup(&self) -> Result<TrainingSetup> {
        let p = self.prepare()?;
        Ok(TrainingSetup {
            dataset: p.dataset,
            partitions: p.partitions,
            variants: p.variants,
            hp: self.hp.clone(),
            workers: self.workers,
        })
    }
}
