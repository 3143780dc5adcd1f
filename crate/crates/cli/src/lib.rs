//! Subcommands behind the `pfedes` binary.
//!
//! Every artifact written here is a pure function of the config file and
//! seed, so two runs of the same command produce identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pfedes_core::codec::{deserialize_params, serialize_params};
use pfedes_core::config::ExperimentConfig;
use pfedes_core::data::{audit_partitions, choose_samples};
use pfedes_core::metrics::{cost_to_target, export_csv, export_enhanced_images};
use pfedes_core::protocol::{run_training, Mode, TrainingOutcome};
use pfedes_core::{build_extractor, Model};

#[derive(Debug, Parser)]
#[command(name = "pfedes", version, about = "Federated learning with a shared feature extractor")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write per-round reports plus final parameters.
    Run(Common),
    /// Write the per-client partition audit.
    Partition(Common),
    /// Dump original/enhanced image pairs from a saved extractor.
    ExportEnhanced {
        #[command(flatten)]
        common: Common,
        /// Extractor payload written by `run`.
        #[arg(long)]
        extractor: PathBuf,
        #[arg(long, default_value_t = 8)]
        samples: usize,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `<out_dir>/<mode>-<hash prefix>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    pub fn load(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::from_file(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            config = config.with_seed(seed);
        }
        Ok(config)
    }

    pub fn out_dir(&self, config: &ExperimentConfig) -> PathBuf {
        match &self.out {
            Some(dir) => dir.clone(),
            None => config.out_dir.join(format!("{}-{}", config.mode, &config.config_hash()[..12])),
        }
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(c) => {
            let config = c.load()?;
            let out = c.out_dir(&config);
            let summary = cmd_run(&config, &out)?;
            print!("{summary}");
        }
        Command::Partition(c) => {
            let config = c.load()?;
            let out = c.out_dir(&config);
            let path = cmd_partition(&config, &out)?;
            println!("partition audit written to {}", path.display());
        }
        Command::ExportEnhanced { common, extractor, samples } => {
            let config = common.load()?;
            let out = common.out_dir(&config).join("enhanced");
            let written = cmd_export_enhanced(&config, &extractor, samples, &out)?;
            println!("{} images written to {}", written.len(), out.display());
        }
    }
    Ok(())
}

/// Runs training and writes `rounds.csv`, `client_XX.bin`, `extractor.bin`
/// (pfedes) or `global.bin` (fedavg), and `manifest.txt`. Returns a short
/// human-readable summary.
pub fn cmd_run(config: &ExperimentConfig, out: &Path) -> Result<String> {
    config.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let outcome = run_training(config.mode, config.training_setup()?)?;
    export_csv(&outcome.reports, &out.join("rounds.csv"))?;
    for (k, params) in outcome.client_models.iter().enumerate() {
        fs::write(out.join(format!("client_{k:02}.bin")), serialize_params(params))?;
    }
    if let Some(global) = &outcome.global {
        let name = if config.mode == Mode::PFedES { "extractor.bin" } else { "global.bin" };
        fs::write(out.join(name), serialize_params(global))?;
    }
    let manifest = run_manifest(config, &outcome);
    fs::write(out.join("manifest.txt"), &manifest)?;
    Ok(format!("{}results in {}\n", summary(&outcome, config), out.display()))
}

fn summary(outcome: &TrainingOutcome, config: &ExperimentConfig) -> String {
    let mut s = String::new();
    if let Some(last) = outcome.reports.last() {
        let _ = writeln!(
            s,
            "{} rounds: average accuracy {:.4}, params {}, flops {}",
            last.round, last.average_accuracy, last.params_cumulative, last.flops_cumulative
        );
    }
    for &t in &config.target_accuracy {
        let _ = match cost_to_target(&outcome.reports, t) {
            Some(c) => writeln!(s, "target {t}: round {}, params {}, flops {}", c.round, c.params, c.flops),
            None => writeln!(s, "target {t}: not reached"),
        };
    }
    s
}

/// Everything needed to reproduce a run, plus target-accuracy costs.
fn run_manifest(config: &ExperimentConfig, outcome: &TrainingOutcome) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "config_hash = {}", config.config_hash());
    let _ = writeln!(s, "seed = {}", config.hp.seed);
    let _ = writeln!(s, "crate_version = {}", env!("CARGO_PKG_VERSION"));
    let variants: Vec<String> = outcome.variants.iter().map(u8::to_string).collect();
    let _ = writeln!(s, "client_variants = {}", variants.join(","));
    s.push_str(&summary(outcome, config));
    s.push_str("\n[config]\n");
    s.push_str(&config.to_canonical_string());
    s
}

/// Writes `partition.csv` with one row per client; fails if the audit finds
/// overlapping assignments.
pub fn cmd_partition(config: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let prepared = config.prepare()?;
    let audit = audit_partitions(&prepared.dataset, &prepared.partitions);
    if !audit.disjoint {
        bail!("partition audit failed: a sample is assigned twice");
    }
    fs::create_dir_all(out)?;
    let path = out.join("partition.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["client", "variant", "classes", "train", "val", "test", "class_counts"])?;
    for (c, variant) in audit.clients.iter().zip(&prepared.variants) {
        let classes: Vec<String> = c.classes.iter().map(usize::to_string).collect();
        let counts: Vec<String> = c.class_counts.iter().map(|(k, n)| format!("{k}:{n}")).collect();
        w.write_record([
            c.client.to_string(),
            variant.to_string(),
            classes.join(" "),
            c.train.to_string(),
            c.val.to_string(),
            c.test.to_string(),
            counts.join(" "),
        ])?;
    }
    w.flush()?;
    Ok(path)
}

/// Loads an extractor payload and writes `2 * samples` PPM images for a
/// seeded choice of dataset samples.
pub fn cmd_export_enhanced(
    config: &ExperimentConfig,
    extractor: &Path,
    samples: usize,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let ds = config.load_dataset()?;
    let spec = Arc::new(build_extractor(ds.sample_shape()));
    let bytes = fs::read(extractor).with_context(|| format!("reading {}", extractor.display()))?;
    let params = deserialize_params(&bytes, spec.manifest())
        .with_context(|| format!("{} is not an extractor for this dataset", extractor.display()))?;
    let model = Model::new(spec, params)?;
    let pool: Vec<usize> = (0..ds.len()).collect();
    let chosen = choose_samples(&pool, samples, config.hp.seed);
    Ok(export_enhanced_images(&model, &ds, &chosen, out)?)
}
