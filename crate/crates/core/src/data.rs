//! Datasets, client partitioning and synthetic data.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, Tensor};
use crate::rng::{self, Stream};

pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];
const CIFAR_PIXELS: usize = 3 * 32 * 32;
const CIFAR_RECORD: usize = CIFAR_PIXELS + 1;
const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Images `(N, C, H, W)` in `[0, 1]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!(
                "label {l} out of range for {class_count} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Gathers the listed samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let [c, h, w] = self.image_shape();
        let plane = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * plane..(i + 1) * plane]);
        }
        let images = Tensor::new(vec![indices.len(), c, h, w], data).expect("gathered shape");
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Batch::new(images, labels).expect("gathered batch")
    }
}

/// A subset of a shared dataset, addressed by sample index.
#[derive(Debug, Clone)]
pub struct DataView {
    pub dataset: Arc<Dataset>,
    pub indices: Vec<usize>,
}

impl DataView {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Batch made of the view's samples at the given positions.
    pub fn batch(&self, positions: &[usize]) -> Batch {
        let idx: Vec<usize> = positions.iter().map(|&p| self.indices[p]).collect();
        self.dataset.batch(&idx)
    }

    /// Consecutive batches in view order; the last one may be short.
    pub fn sequential_batches(&self, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
        self.indices
            .chunks(batch_size.max(1))
            .map(|chunk| self.dataset.batch(chunk))
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.dataset.class_count];
        for &i in &self.indices {
            counts[self.dataset.labels[i]] += 1;
        }
        counts
    }

    pub fn distinct_labels(&self) -> usize {
        self.label_counts().iter().filter(|&&c| c > 0).count()
    }
}

/// One client's local data.
#[derive(Debug, Clone)]
pub struct ClientShard {
    pub client_id: usize,
    pub train: DataView,
    pub test: DataView,
}

impl ClientShard {
    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    pub fn n_test(&self) -> usize {
        self.test.len()
    }
}

/// Shuffled mini-batches covering `0..n` once.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

// ---------------------------------------------------------------- CIFAR-10

/// Parses concatenated CIFAR-10 binary records: one label byte followed by
/// 3072 pixel bytes (red plane, green plane, blue plane, each row-major).
pub fn parse_cifar_records(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = record[0];
        if label as usize >= CIFAR_CLASSES {
            return Err(Error::Format(format!("record {i} has label byte {label}")));
        }
        labels.push(label as usize);
        pixels.extend(record[1..].iter().map(|&p| p as f64 / 255.0));
    }
    let [c, h, w] = CIFAR_SHAPE;
    Dataset::new(
        Tensor::new(vec![n, c, h, w], pixels)?,
        labels,
        CIFAR_CLASSES,
    )
}

fn read_cifar_file(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_records(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let class_count = parts.first().map_or(CIFAR_CLASSES, |d| d.class_count);
    let n: usize = parts.iter().map(Dataset::len).sum();
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for p in parts {
        labels.extend_from_slice(&p.labels);
        data.extend(p.images.into_data());
    }
    let [c, h, w] = CIFAR_SHAPE;
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, class_count)
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = CIFAR_TRAIN_FILES
        .iter()
        .map(|f| read_cifar_file(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let test = read_cifar_file(&dir.join(CIFAR_TEST_FILE))?;
    Ok((concat(train)?, test))
}

// ---------------------------------------------------------------- partitioning

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    Iid,
    #[serde(alias = "non_iid", alias = "non-iid")]
    Noniid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub clients: usize,
    /// Distinct labels per client in non-IID mode.
    #[serde(default = "default_classes_per_client")]
    pub classes_per_client: usize,
    /// Overrides the partition stream derived from the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_classes_per_client() -> usize {
    5
}

/// Sizes of `k` near-equal parts of `n` items; the first `n % k` get one extra.
fn even_split(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

/// Random disjoint shards with sizes differing by at most one.
pub fn partition_iid<R: Rng + ?Sized>(
    dataset: &Arc<Dataset>,
    clients: usize,
    rng: &mut R,
) -> Result<Vec<DataView>> {
    if clients == 0 || clients > dataset.len() {
        return Err(Error::Config(format!(
            "cannot split {} samples across {clients} clients",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    let mut views = Vec::with_capacity(clients);
    let mut start = 0;
    for size in even_split(order.len(), clients) {
        views.push(DataView {
            dataset: Arc::clone(dataset),
            indices: order[start..start + size].to_vec(),
        });
        start += size;
    }
    Ok(views)
}

const MAX_ASSIGNMENT_ATTEMPTS: usize = 10_000;

/// Draws `per_client` distinct classes for every client, redrawing until
/// every class is held by at least one client. Class lists come back sorted.
pub fn assign_classes<R: Rng + ?Sized>(
    clients: usize,
    per_client: usize,
    class_count: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if clients == 0 || per_client == 0 || per_client > class_count {
        return Err(Error::Config(format!(
            "cannot give {clients} clients {per_client} of {class_count} classes each"
        )));
    }
    if clients * per_client < class_count {
        return Err(Error::Config(format!(
            "{clients} clients × {per_client} classes cannot cover all {class_count} classes"
        )));
    }
    let all: Vec<usize> = (0..class_count).collect();
    for _ in 0..MAX_ASSIGNMENT_ATTEMPTS {
        let assignment: Vec<Vec<usize>> = (0..clients)
            .map(|_| {
                let mut picked: Vec<usize> =
                    all.choose_multiple(rng, per_client).copied().collect();
                picked.sort_unstable();
                picked
            })
            .collect();
        let mut covered = vec![false; class_count];
        assignment.iter().flatten().for_each(|&c| covered[c] = true);
        if covered.iter().all(|&c| c) {
            return Ok(assignment);
        }
    }
    Err(Error::Config(format!(
        "no covering class assignment found for {clients} clients × {per_client} of \
         {class_count} classes after {MAX_ASSIGNMENT_ATTEMPTS} draws"
    )))
}

/// Splits each class's samples evenly among the clients holding it.
pub fn partition_by_classes<R: Rng + ?Sized>(
    dataset: &Arc<Dataset>,
    assignment: &[Vec<usize>],
    rng: &mut R,
) -> Result<Vec<DataView>> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.class_count];
    for (i, &l) in dataset.labels.iter().enumerate() {
        per_class[l].push(i);
    }
    let mut indices: Vec<Vec<usize>> = vec![Vec::new(); assignment.len()];
    for (class, samples) in per_class.iter_mut().enumerate() {
        let holders: Vec<usize> = (0..assignment.len())
            .filter(|&k| assignment[k].contains(&class))
            .collect();
        if holders.is_empty() {
            if samples.is_empty() {
                continue;
            }
            return Err(Error::Config(format!(
                "class {class} is not assigned to any client"
            )));
        }
        if samples.len() < holders.len() {
            return Err(Error::Config(format!(
                "class {class} has {} samples for {} holders",
                samples.len(),
                holders.len()
            )));
        }
        samples.shuffle(rng);
        let mut start = 0;
        for (&k, size) in holders.iter().zip(even_split(samples.len(), holders.len())) {
            indices[k].extend_from_slice(&samples[start..start + size]);
            start += size;
        }
    }
    Ok(indices
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            DataView {
                dataset: Arc::clone(dataset),
                indices: idx,
            }
        })
        .collect())
}

/// Label-skewed shards: every client holds exactly `classes_per_client` labels.
pub fn partition_noniid<R: Rng + ?Sized>(
    dataset: &Arc<Dataset>,
    clients: usize,
    classes_per_client: usize,
    rng: &mut R,
) -> Result<Vec<DataView>> {
    let assignment = assign_classes(clients, classes_per_client, dataset.class_count, rng)?;
    partition_by_classes(dataset, &assignment, rng)
}

/// Splits train and test data across clients with the same scheme. In
/// non-IID mode both splits share one class assignment, so a client's test
/// labels match its training labels.
pub fn make_client_shards(
    train: Arc<Dataset>,
    test: Arc<Dataset>,
    spec: &PartitionSpec,
    master_seed: u64,
) -> Result<Vec<ClientShard>> {
    let seed = spec.seed.unwrap_or(master_seed);
    let mut assign_rng = rng::stream(seed, Stream::Partition, &[0]);
    let mut train_rng = rng::stream(seed, Stream::Partition, &[1]);
    let mut test_rng = rng::stream(seed, Stream::Partition, &[2]);
    let (train_views, test_views) = match spec.mode {
        PartitionMode::Iid => (
            partition_iid(&train, spec.clients, &mut train_rng)?,
            partition_iid(&test, spec.clients, &mut test_rng)?,
        ),
        PartitionMode::Noniid => {
            let assignment = assign_classes(
                spec.clients,
                spec.classes_per_client,
                train.class_count,
                &mut assign_rng,
            )?;
            (
                partition_by_classes(&train, &assignment, &mut train_rng)?,
                partition_by_classes(&test, &assignment, &mut test_rng)?,
            )
        }
    };
    Ok(train_views
        .into_iter()
        .zip(test_views)
        .enumerate()
        .map(|(client_id, (train, test))| ClientShard {
            client_id,
            train,
            test,
        })
        .collect())
}

// ---------------------------------------------------------------- synthetic

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    /// `(C, H, W)`
    pub image_shape: [usize; 3],
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn desk() -> Self {
        SyntheticSpec {
            class_count: 4,
            train_samples: 1280,
            test_samples: 320,
            image_shape: [3, 8, 8],
            noise: 0.6,
        }
    }
}

/// Noise-free image of each class: a centred Gaussian blob whose colour and
/// width depend on the class.
pub fn class_prototypes<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Vec<Vec<f64>> {
    let [c, h, w] = spec.image_shape;
    let k = spec.class_count;
    (0..k)
        .map(|class| {
            let phase = 2.0 * PI * class as f64 / k as f64;
            let jitter = (rng.random::<f64>() - 0.5) * 0.5;
            let (cy, cx) = (
                (h as f64 - 1.0) / 2.0 + jitter,
                (w as f64 - 1.0) / 2.0 - jitter,
            );
            let sigma = (h.min(w) as f64) * (0.2 + 0.15 * (class % 2) as f64);
            let mut img = Vec::with_capacity(c * h * w);
            for ch in 0..c {
                let amp = 0.5 + 0.45 * (phase + 2.0 * PI * ch as f64 / c as f64).cos();
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        img.push(amp * (-d2 / (2.0 * sigma * sigma)).exp());
                    }
                }
            }
            img
        })
        .collect()
}

fn synthetic_split<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    prototypes: &[Vec<f64>],
    samples: usize,
    rng: &mut R,
) -> Result<Dataset> {
    let [c, h, w] = spec.image_shape;
    let mut labels: Vec<usize> = (0..samples).map(|i| i % spec.class_count).collect();
    labels.shuffle(rng);
    let mut data = Vec::with_capacity(samples * c * h * w);
    for &l in &labels {
        for &p in &prototypes[l] {
            let noise: f64 = if spec.noise > 0.0 {
                spec.noise * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            data.push((p + noise).clamp(0.0, 1.0));
        }
    }
    Dataset::new(
        Tensor::new(vec![samples, c, h, w], data)?,
        labels,
        spec.class_count,
    )
}

/// Class-conditional blob images, returned as `(train, test)`.
pub fn synthetic_dataset<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    rng: &mut R,
) -> Result<(Dataset, Dataset)> {
    if spec.class_count == 0 || spec.train_samples < spec.class_count {
        return Err(Error::Config(format!(
            "synthetic data needs at least one training sample per class ({} < {})",
            spec.train_samples, spec.class_count
        )));
    }
    if spec.image_shape.contains(&0) || !(spec.noise >= 0.0) {
        return Err(Error::Config(
            "synthetic image shape and noise must be valid".into(),
        ));
    }
    let prototypes = class_prototypes(spec, rng);
    let train = synthetic_split(spec, &prototypes, spec.train_samples, rng)?;
    let test = synthetic_split(spec, &prototypes, spec.test_samples, rng)?;
    Ok((train, test))
}
