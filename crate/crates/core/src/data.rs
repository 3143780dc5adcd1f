//! Dataset ingestion, class-restricted non-IID partitioning, stratified
//! 8:1:1 splits and mini-batch planning.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::ImageShape;
use crate::rng::{self, Domain, Rng};
use crate::tensor::Tensor;

/// Labelled images with pixels scaled to `[0, 1]`, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sample_shape: ImageShape,
    pixels: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        sample_shape: ImageShape,
        pixels: Vec<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if pixels.len() != labels.len() * sample_shape.len() {
            return Err(Error::dim(format!(
                "{} pixels for {} samples of shape {sample_shape}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::arg(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self {
            sample_shape,
            pixels,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> ImageShape {
        self.sample_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self, index: usize) -> &[f64] {
        let n = self.sample_shape.len();
        &self.pixels[index * n..][..n]
    }

    pub fn image(&self, index: usize) -> Tensor {
        Tensor::from_parts(self.sample_shape.dims().to_vec(), self.pixels(index).to_vec())
    }

    /// Stacks the given samples into a `[B, C, H, W]` batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.sample_shape.len());
        for &i in indices {
            data.extend_from_slice(self.pixels(i));
        }
        let [c, h, w] = self.sample_shape.dims();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_parts(vec![indices.len(), c, h, w], data), labels)
    }

    fn append(&mut self, other: Dataset) {
        self.pixels.extend(other.pixels);
        self.labels.extend(other.labels);
        self.num_classes = self.num_classes.max(other.num_classes);
    }
}

fn ingestion(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| ingestion(path, e.to_string()))
}

const CIFAR_SHAPE: ImageShape = ImageShape::new(3, 32, 32);
const CIFAR_RECORD: usize = 1 + 3072;

/// The six binary batches of the CIFAR-10 distribution, in load order.
pub const CIFAR10_FILES: [&str; 6] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
    "test_batch.bin",
];

/// One CIFAR-10 binary batch file: records of one label byte followed by
/// 3072 channel-major pixel bytes.
pub fn load_cifar10_batch(path: &Path) -> Result<Dataset> {
    let bytes = read_file(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(ingestion(
            path,
            format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
        ));
    }
    let records = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(records);
    let mut pixels = Vec::with_capacity(records * 3072);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] >= 10 {
            return Err(ingestion(path, format!("label byte {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&p| p as f64 / 255.0));
    }
    Dataset::new(CIFAR_SHAPE, pixels, labels, 10)
}

/// All 60,000 CIFAR-10 samples from a directory holding [`CIFAR10_FILES`].
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let mut all: Option<Dataset> = None;
    for name in CIFAR10_FILES {
        let part = load_cifar10_batch(&dir.join(name))?;
        match all.as_mut() {
            Some(ds) => ds.append(part),
            None => all = Some(part),
        }
    }
    Ok(all.expect("at least one batch file"))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// MNIST-style IDX pair: `0x00000803` image file and `0x00000801` label file.
pub fn load_idx(image_file: &Path, label_file: &Path) -> Result<Dataset> {
    let images = read_file(image_file)?;
    let labels = read_file(label_file)?;
    if images.len() < 16 || be_u32(&images, 0) != 0x0000_0803 {
        return Err(ingestion(image_file, "missing IDX image magic 0x00000803"));
    }
    if labels.len() < 8 || be_u32(&labels, 0) != 0x0000_0801 {
        return Err(ingestion(label_file, "missing IDX label magic 0x00000801"));
    }
    let count = be_u32(&images, 4) as usize;
    let (rows, cols) = (be_u32(&images, 8) as usize, be_u32(&images, 12) as usize);
    let label_count = be_u32(&labels, 4) as usize;
    if count != label_count {
        return Err(ingestion(
            label_file,
            format!("{label_count} labels for {count} images"),
        ));
    }
    if count == 0 || rows == 0 || cols == 0 {
        return Err(ingestion(image_file, "empty IDX image file"));
    }
    if images.len() != 16 + count * rows * cols {
        return Err(ingestion(
            image_file,
            format!("expected {} bytes, found {}", 16 + count * rows * cols, images.len()),
        ));
    }
    if labels.len() != 8 + count {
        return Err(ingestion(
            label_file,
            format!("expected {} bytes, found {}", 8 + count, labels.len()),
        ));
    }
    let labels: Vec<usize> = labels[8..].iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    let pixels = images[16..].iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new(ImageShape::new(1, rows, cols), pixels, labels, num_classes)
}

/// Parameters of the synthetic stand-in dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub shape: ImageShape,
    pub noise_sigma: f64,
}

/// Each class gets a random `U[0,1]` template; samples add Gaussian noise of
/// `noise_sigma` and are clamped back into `[0, 1]`. Class-major order.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.per_class == 0 {
        return Err(Error::arg("synthetic dataset needs at least one class and sample"));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(Error::arg(format!("noise sigma must be >= 0, got {}", spec.noise_sigma)));
    }
    let n = spec.shape.len();
    let mut template_rng = rng::stream(seed, Domain::Synthetic, 0);
    let templates: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..n).map(|_| template_rng.random::<f64>()).collect())
        .collect();
    let mut noise_rng = rng::stream(seed, Domain::Synthetic, 1);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let mut pixels = Vec::with_capacity(spec.num_classes * spec.per_class * n);
    let mut labels = Vec::with_capacity(spec.num_classes * spec.per_class);
    for (class, template) in templates.iter().enumerate() {
        for _ in 0..spec.per_class {
            if spec.noise_sigma == 0.0 {
                pixels.extend_from_slice(template);
            } else {
                pixels.extend(
                    template
                        .iter()
                        .map(|&t| (t + noise.sample(&mut noise_rng)).clamp(0.0, 1.0)),
                );
            }
            labels.push(class);
        }
    }
    Dataset::new(spec.shape, pixels, labels, spec.num_classes)
}

/// One client's share of the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientPartition {
    pub client: usize,
    /// Sorted class indices this client holds.
    pub classes: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClientPartition {
    /// Local data volume used to weight aggregation: the training-set size.
    pub fn data_volume(&self) -> usize {
        self.train.len()
    }

    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// Assigns each client exactly `classes_per_client` classes by walking a
/// seeded class permutation round-robin, splits every class's samples evenly
/// among the clients holding it, then cuts each client's pool 8:1:1.
pub fn partition_noniid(
    ds: &Dataset,
    num_clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<Vec<ClientPartition>> {
    let classes = ds.num_classes();
    if num_clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if classes_per_client == 0 || classes_per_client > classes {
        return Err(Error::Partition(format!(
            "cannot give each client {classes_per_client} of {classes} classes"
        )));
    }
    let mut perm: Vec<usize> = (0..classes).collect();
    perm.shuffle(&mut rng::stream(seed, Domain::Partition, 0));

    let client_classes: Vec<Vec<usize>> = (0..num_clients)
        .map(|k| {
            let mut cs: Vec<usize> = (0..classes_per_client)
                .map(|j| perm[(k * classes_per_client + j) % classes])
                .collect();
            cs.sort_unstable();
            cs
        })
        .collect();

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for (class, mut samples) in by_class.into_iter().enumerate() {
        let owners: Vec<usize> = (0..num_clients)
            .filter(|&k| client_classes[k].binary_search(&class).is_ok())
            .collect();
        if owners.is_empty() {
            continue;
        }
        samples.shuffle(&mut rng::stream(seed, Domain::Partition, 1 + class as u64));
        let (base, extra) = (samples.len() / owners.len(), samples.len() % owners.len());
        let mut start = 0;
        for (j, &k) in owners.iter().enumerate() {
            let take = base + usize::from(j < extra);
            pools[k].extend_from_slice(&samples[start..start + take]);
            start += take;
        }
    }

    pools
        .into_iter()
        .zip(client_classes)
        .enumerate()
        .map(|(k, (pool, classes))| {
            if pool.len() < MIN_CLIENT_SAMPLES {
                return Err(Error::Partition(format!(
                    "dataset too small for {num_clients} clients: client {k} gets {} samples, needs {MIN_CLIENT_SAMPLES}",
                    pool.len()
                )));
            }
            let mut split_rng = rng::stream(seed, Domain::Split, k as u64);
            let (train, val, test) = split_811(&pool, ds.labels(), &mut split_rng)?;
            Ok(ClientPartition {
                client: k,
                classes,
                train,
                val,
                test,
            })
        })
        .collect()
}

/// IID partitioning: every class is shuffled and dealt evenly across all
/// clients, so each client sees the global label mix. Pools are cut 8:1:1.
pub fn partition_iid(ds: &Dataset, num_clients: usize, seed: u64) -> Result<Vec<ClientPartition>> {
    partition_noniid(ds, num_clients, ds.num_classes(), seed)
}

const MIN_CLIENT_SAMPLES: usize = 10;

/// Split sizes for `n` samples: `(n - 2r, r, r)` with `r = round(n / 10)`.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let r = (n + 5) / 10;
    (n - 2 * r, r, r)
}

/// Stratified 8:1:1 cut. Samples are shuffled within each class, then
/// interleaved by fractional rank so every contiguous segment carries each
/// class in proportion (±1 sample); the segments become train, val and test.
pub fn split_811(
    indices: &[usize],
    labels: &[usize],
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if indices.len() < MIN_CLIENT_SAMPLES {
        return Err(Error::Partition(format!(
            "8:1:1 split needs at least {MIN_CLIENT_SAMPLES} samples, got {}",
            indices.len()
        )));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        groups.entry(labels[i]).or_default().push(i);
    }
    // (rank numerator 2i+1, class size 2m, label, sample)
    let mut keyed = Vec::with_capacity(indices.len());
    for (&label, group) in groups.iter_mut() {
        group.shuffle(rng);
        let m = group.len() as u128;
        for (i, &sample) in group.iter().enumerate() {
            keyed.push((2 * i as u128 + 1, 2 * m, label, sample));
        }
    }
    keyed.sort_by(|a, b| (a.0 * b.1).cmp(&(b.0 * a.1)).then(a.2.cmp(&b.2)));
    let order: Vec<usize> = keyed.into_iter().map(|k| k.3).collect();
    let (n_train, n_val, _) = split_sizes(order.len());
    Ok((
        order[..n_train].to_vec(),
        order[n_train..n_train + n_val].to_vec(),
        order[n_train + n_val..].to_vec(),
    ))
}

/// Per-client summary produced by [`audit_partitions`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientAudit {
    pub client: usize,
    pub classes: Vec<usize>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Samples per held class across all three splits.
    pub class_counts: BTreeMap<usize, usize>,
    /// Held labels actually observed in the client's samples.
    pub observed_classes: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionAudit {
    pub clients: Vec<ClientAudit>,
    /// No sample index appears twice across clients and splits.
    pub disjoint: bool,
    pub total_samples: usize,
}

/// Exhaustive scan of a partitioning: disjointness, label sets and counts.
pub fn audit_partitions(ds: &Dataset, parts: &[ClientPartition]) -> PartitionAudit {
    let mut seen = vec![false; ds.len()];
    let mut disjoint = true;
    let mut clients = Vec::with_capacity(parts.len());
    for p in parts {
        let mut class_counts = BTreeMap::new();
        for &i in p.train.iter().chain(&p.val).chain(&p.test) {
            if std::mem::replace(&mut seen[i], true) {
                disjoint = false;
            }
            *class_counts.entry(ds.labels()[i]).or_insert(0) += 1;
        }
        clients.push(ClientAudit {
            client: p.client,
            classes: p.classes.clone(),
            train: p.train.len(),
            val: p.val.len(),
            test: p.test.len(),
            observed_classes: class_counts.keys().copied().collect(),
            class_counts,
        });
    }
    PartitionAudit {
        clients,
        disjoint,
        total_samples: parts.iter().map(ClientPartition::total).sum(),
    }
}

/// One epoch's shuffled visiting order over a client's training indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    batch_size: usize,
    order: Vec<usize>,
}

impl BatchPlan {
    pub fn new(train: &[usize], batch_size: usize, rng: &mut Rng) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        let mut order = train.to_vec();
        order.shuffle(rng);
        Ok(Self { batch_size, order })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Batches of `batch_size`; the last one may be smaller.
    pub fn batches(&self) -> std::slice::Chunks<'_, usize> {
        self.order.chunks(self.batch_size)
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

/// Picks `count` distinct samples from `pool` in a seeded order.
pub fn choose_samples(pool: &[usize], count: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng::stream(seed, Domain::Export, 0);
    let picks = rand::seq::index::sample(&mut rng, pool.len(), count.min(pool.len()));
    picks.into_iter().map(|i| pool[i]).collect()
}
