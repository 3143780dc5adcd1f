//! Accuracy evaluation, communication/computation ledgers, convergence
//! monitoring, CSV reports and PPM image export.

use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{estimate_flops, Model, ModelSpec};
use crate::protocol::{Hyperparams, Mode};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 256;

/// Fraction of `test` samples whose arg-max prediction matches the label.
pub fn evaluate(model: &Model, ds: &Dataset, test: &[usize]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty test set"));
    }
    let mut correct = 0usize;
    for chunk in test.chunks(EVAL_CHUNK) {
        let (x, labels) = ds.gather(chunk);
        let preds = model.predict(&x)?;
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Per-round record of accuracy, losses and costs.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// 1-based round index.
    pub round: usize,
    /// Clients that trained this round, ascending.
    pub selected: Vec<usize>,
    /// Test accuracy of every client's model.
    pub accuracies: Vec<f64>,
    pub average_accuracy: f64,
    /// Mean model-training loss per client over the round's batches; `None`
    /// for clients that did not train.
    pub model_loss: Vec<Option<f64>>,
    /// Mean extractor-training loss per client.
    pub extractor_loss: Vec<Option<f64>>,
    pub downloads: usize,
    pub uploads: usize,
    pub params_down: u64,
    pub params_up: u64,
    pub params_cumulative: u64,
    pub flops: u64,
    pub flops_cumulative: u64,
    pub wall_time: Duration,
}

impl RoundReport {
    pub fn params_transmitted(&self) -> u64 {
        self.params_down + self.params_up
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LedgerEntry {
    pub round: usize,
    pub params_down: u64,
    pub params_up: u64,
    pub flops: u64,
}

/// Append-only per-round communication and computation costs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostLedger {
    entries: Vec<LedgerEntry>,
}

impl CostLedger {
    pub fn record_round(&mut self, entry: LedgerEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn cumulative_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params_down + e.params_up).sum()
    }

    pub fn cumulative_flops(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }
}

/// Cumulative costs at the first round reaching a target average accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetCost {
    pub round: usize,
    pub params: u64,
    pub flops: u64,
}

/// `None` when no round reaches `target`.
pub fn cost_to_target(reports: &[RoundReport], target: f64) -> Option<TargetCost> {
    reports
        .iter()
        .find(|r| r.average_accuracy >= target)
        .map(|r| TargetCost {
            round: r.round,
            params: r.params_cumulative,
            flops: r.flops_cumulative,
        })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Convergence {
    pub passed: bool,
    pub first_mean: f64,
    pub last_mean: f64,
}

/// Default window: `max(3, rounds / 10)`.
pub fn default_window(rounds: usize) -> usize {
    (rounds / 10).max(3)
}

/// Passes iff the mean of the last `window` values is below the mean of the first `window`.
pub fn convergence_check(series: &[f64], window: usize) -> Result<Convergence> {
    if window == 0 || series.len() < 2 * window {
        return Err(Error::arg(format!(
            "convergence check needs at least {} points, got {}",
            2 * window.max(1),
            series.len()
        )));
    }
    let first_mean = mean(&series[..window]);
    let last_mean = mean(&series[series.len() - window..]);
    Ok(Convergence {
        passed: last_mean < first_mean,
        first_mean,
        last_mean,
    })
}

/// Forward-plus-backward FLOPs one client spends in one round of `mode`
/// over `train_samples` samples. Backward is costed at twice its forward.
///
/// - pfedes: `E·(F_e + 2F_m + 2·2F_m) + E_fe·3·(F_e + F_m)` per sample
///   (frozen extractor forward, model on enhanced and original inputs, then
///   extractor training through the frozen model).
/// - standalone / fedavg: `E·3F_m` per sample.
pub fn client_round_flops(
    mode: Mode,
    model: &ModelSpec,
    extractor: &ModelSpec,
    train_samples: usize,
    hp: &Hyperparams,
) -> u64 {
    let fm = estimate_flops(model);
    let fe = estimate_flops(extractor);
    let e = hp.local_epochs as u64;
    let per_sample = match mode {
        Mode::PFedES => e * (fe + 6 * fm) + hp.extractor_epochs as u64 * 3 * (fe + fm),
        Mode::Standalone | Mode::FedAvg => e * 3 * fm,
    };
    per_sample * train_samples as u64
}

/// Column order of the per-round CSV, followed by one `acc_client_<k>`
/// column per client.
pub const CSV_COLUMNS: [&str; 13] = [
    "round",
    "avg_accuracy",
    "min_accuracy",
    "max_accuracy",
    "mean_model_loss",
    "mean_extractor_loss",
    "downloads",
    "uploads",
    "params_down",
    "params_up",
    "params_cumulative",
    "flops",
    "flops_cumulative",
];

fn fmt_opt_mean(values: &[Option<f64>]) -> String {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        String::new()
    } else {
        mean(&present).to_string()
    }
}

/// Writes one header row and one row per report. Wall time is left out so
/// identical runs produce identical bytes.
pub fn write_csv<W: Write>(reports: &[RoundReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let clients = reports.first().map_or(0, |r| r.accuracies.len());
    let mut header: Vec<String> = CSV_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..clients).map(|k| format!("acc_client_{k}")));
    w.write_record(&header)?;
    for r in reports {
        let min = r.accuracies.iter().copied().fold(f64::INFINITY, f64::min);
        let max = r.accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut row = vec![
            r.round.to_string(),
            r.average_accuracy.to_string(),
            min.to_string(),
            max.to_string(),
            fmt_opt_mean(&r.model_loss),
            fmt_opt_mean(&r.extractor_loss),
            r.downloads.to_string(),
            r.uploads.to_string(),
            r.params_down.to_string(),
            r.params_up.to_string(),
            r.params_cumulative.to_string(),
            r.flops.to_string(),
            r.flops_cumulative.to_string(),
        ];
        row.extend(r.accuracies.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_csv(reports: &[RoundReport], path: &Path) -> Result<()> {
    write_csv(reports, BufWriter::new(File::create(path)?))
}

/// 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Min-max normalizes a `[C, H, W]` tensor over all its values to `0..=255`.
/// One channel is replicated to grey; three are taken as RGB. A constant
/// image maps to zero.
pub fn normalize_to_rgb8(image: &Tensor) -> Result<Rgb8> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::dim(format!("image must be [C,H,W], got {:?}", image.shape())));
    };
    if c != 1 && c != 3 {
        return Err(Error::dim(format!("cannot render {c} channels as RGB")));
    }
    let data = image.data();
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let q = |v: f64| -> u8 {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    };
    let plane = h * w;
    let mut pixels = Vec::with_capacity(plane * 3);
    for p in 0..plane {
        for ch in 0..3 {
            let src = if c == 1 { 0 } else { ch };
            pixels.push(q(data[src * plane + p]));
        }
    }
    Ok(Rgb8 {
        width: w,
        height: h,
        pixels,
    })
}

pub fn write_ppm<W: Write>(img: &Rgb8, mut out: W) -> io::Result<()> {
    write!(out, "P6\n{} {}\n255\n", img.width, img.height)?;
    out.write_all(&img.pixels)?;
    out.flush()
}

/// Reads a binary P6 image with maxval 255.
pub fn read_ppm(path: &Path) -> Result<Rgb8> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |why: &str| Error::Codec(format!("{}: {why}", path.display()));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("not an 8-bit P6 image"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let body = &bytes[pos + 1..];
    if body.len() != width * height * 3 {
        return Err(bad("pixel data length does not match header"));
    }
    Ok(Rgb8 {
        width,
        height,
        pixels: body.to_vec(),
    })
}

/// Writes `original_<i>.ppm` and `enhanced_<i>.ppm` for each sample, the
/// enhanced image being the extractor's output. Returns the paths written.
pub fn export_enhanced_images(
    extractor: &Model,
    ds: &Dataset,
    samples: &[usize],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(samples.len() * 2);
    for &i in samples {
        let original = ds.image(i);
        let (batch, _) = ds.gather(&[i]);
        let enhanced = extractor.forward(&batch)?;
        let enhanced = enhanced.reshape(original.shape().to_vec())?;
        for (tag, img) in [("original", &original), ("enhanced", &enhanced)] {
            let path = dir.join(format!("{tag}_{i:05}.ppm"));
            write_ppm(&normalize_to_rgb8(img)?, BufWriter::new(File::create(&path)?))?;
            written.push(path);
        }
    }
    Ok(written)
}
