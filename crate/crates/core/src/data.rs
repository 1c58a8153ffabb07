//! Dataset ingestion, normalization and deterministic batching.
//!
//! Two dataset kinds are supported: CIFAR-10 binary shards and Gaussian blobs.
//! Pixels are stored as `f32` to keep a full CIFAR-10 split in memory; batches
//! are widened to `f64` tensors on the way out.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR10_RECORD_BYTES: usize = 3073;
pub const CIFAR10_CLASSES: usize = 10;
const CIFAR10_SIDE: usize = 32;
const CIFAR10_PLANE: usize = CIFAR10_SIDE * CIFAR10_SIDE;

pub const CIFAR10_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR10_TEST_FILE: &str = "test_batch.bin";
pub const SYNTHETIC_TRAIN_FILE: &str = "train.txt";
pub const SYNTHETIC_TEST_FILE: &str = "test.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cifar10,
    Synthetic,
}

/// Per-channel standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Channel statistics over every sample of `dataset` (channel = leading sample axis).
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyInput(
                "cannot fit normalization on an empty dataset".into(),
            ));
        }
        let channels = dataset.sample_shape[0];
        let plane = dataset.sample_len() / channels;
        let mut sum = vec![0.0f64; channels];
        let mut sq = vec![0.0f64; channels];
        for sample in dataset.pixels.chunks_exact(dataset.sample_len()) {
            for (c, chunk) in sample.chunks_exact(plane).enumerate() {
                for &v in chunk {
                    let v = v as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (dataset.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / count - m * m).max(0.0).sqrt().max(1e-12))
            .collect();
        Ok(Self { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    kind: DatasetKind,
    sample_shape: Vec<usize>,
    pixels: Vec<f32>,
    labels: Option<Vec<usize>>,
    num_classes: usize,
    normalization: Option<Normalization>,
}

/// One mini-batch; `indices[i]` is the dataset index of input row `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub inputs: Tensor,
}

impl Dataset {
    pub fn new(
        kind: DatasetKind,
        sample_shape: Vec<usize>,
        pixels: Vec<f32>,
        labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        let sample_len: usize = sample_shape.iter().product();
        if sample_shape.is_empty() || sample_len == 0 {
            return Err(Error::InvalidArgument(format!(
                "bad sample shape {sample_shape:?}"
            )));
        }
        if pixels.len() % sample_len != 0 {
            return Err(Error::Shape(format!(
                "{} values do not divide into samples of {sample_len}",
                pixels.len()
            )));
        }
        let n = pixels.len() / sample_len;
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::Shape(format!(
                    "{} labels for {n} samples",
                    labels.len()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
                return Err(Error::Label {
                    label: bad,
                    classes: num_classes,
                });
            }
        }
        Ok(Self {
            kind,
            sample_shape,
            pixels,
            labels,
            num_classes,
            normalization: None,
        })
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.sample_len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, index: usize) -> &[f32] {
        let w = self.sample_len();
        &self.pixels[index * w..(index + 1) * w]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    /// Standardizes every channel in place with the given statistics.
    pub fn normalize(&mut self, stats: &Normalization) -> Result<()> {
        if self.normalization.is_some() {
            return Err(Error::InvalidArgument(
                "dataset is already normalized".into(),
            ));
        }
        let channels = self.sample_shape[0];
        if stats.mean.len() != channels || stats.std.len() != channels {
            return Err(Error::Shape(format!(
                "normalization for {} channels applied to {channels}",
                stats.mean.len()
            )));
        }
        let plane = self.sample_len() / channels;
        let sample_len = self.sample_len();
        for sample in self.pixels.chunks_exact_mut(sample_len) {
            for (c, chunk) in sample.chunks_exact_mut(plane).enumerate() {
                for v in chunk {
                    *v = ((*v as f64 - stats.mean[c]) / stats.std[c]) as f32;
                }
            }
        }
        self.normalization = Some(stats.clone());
        Ok(())
    }

    /// Appends `other`'s samples after this dataset's.
    pub fn concat(mut self, other: Dataset) -> Result<Dataset> {
        if self.kind != other.kind
            || self.sample_shape != other.sample_shape
            || self.num_classes != other.num_classes
            || self.normalization != other.normalization
        {
            return Err(Error::InvalidArgument(
                "cannot concatenate incompatible datasets".into(),
            ));
        }
        self.pixels.extend_from_slice(&other.pixels);
        self.labels = match (self.labels, other.labels) {
            (Some(mut a), Some(b)) => {
                a.extend(b);
                Some(a)
            }
            (None, None) => None,
            _ => {
                return Err(Error::InvalidArgument(
                    "cannot mix labelled and unlabelled data".into(),
                ))
            }
        };
        Ok(self)
    }

    /// Materializes the given samples as a `[B, sample_shape...]` batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let w = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend(self.sample(i).iter().map(|&v| v as f64));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Batch {
            indices: indices.to_vec(),
            inputs: Tensor::from_vec(&shape, data).expect("batch shape"),
        }
    }

    /// Consecutive batches in index order, for inference passes.
    pub fn sequential_batches(&self, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
        let n = self.len();
        let batch_size = batch_size.max(1);
        (0..n).step_by(batch_size).map(move |start| {
            let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
            self.batch(&idx)
        })
    }
}

/// Parses one CIFAR-10 binary shard; pixels are scaled to `[0, 1]`.
pub fn parse_cifar10_file(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR10_RECORD_BYTES != 0 {
        return Err(Error::MalformedFile {
            offset: bytes.len() - bytes.len() % CIFAR10_RECORD_BYTES,
            len: bytes.len(),
        });
    }
    let n = bytes.len() / CIFAR10_RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * (CIFAR10_RECORD_BYTES - 1));
    let mut labels = Vec::with_capacity(n);
    for (index, record) in bytes.chunks_exact(CIFAR10_RECORD_BYTES).enumerate() {
        let label = record[0];
        if label as usize >= CIFAR10_CLASSES {
            return Err(Error::CorruptRecord { index, label });
        }
        labels.push(label as usize);
        pixels.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(
        DatasetKind::Cifar10,
        vec![3, CIFAR10_SIDE, CIFAR10_SIDE],
        pixels,
        Some(labels),
        CIFAR10_CLASSES,
    )
}

/// Inverse of [`parse_cifar10_file`] for an unnormalized shard.
pub fn cifar10_to_bytes(dataset: &Dataset) -> Result<Vec<u8>> {
    if dataset.kind != DatasetKind::Cifar10 || dataset.normalization.is_some() {
        return Err(Error::InvalidArgument(
            "only unnormalized CIFAR-10 datasets serialize to the binary layout".into(),
        ));
    }
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::InvalidArgument("CIFAR-10 records need labels".into()))?;
    let mut out = Vec::with_capacity(dataset.len() * CIFAR10_RECORD_BYTES);
    for (i, &label) in labels.iter().enumerate() {
        out.push(label as u8);
        out.extend(
            dataset
                .sample(i)
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    debug_assert_eq!(out.len(), dataset.len() * (3 * CIFAR10_PLANE + 1));
    Ok(out)
}

pub fn read_cifar10_file(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10_file(&bytes)
}

/// Train and (optional) test splits of one data directory.
#[derive(Clone, Debug)]
pub struct DataSplits {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

/// Loads a data directory holding either CIFAR-10 shards or synthetic text files.
///
/// CIFAR-10 splits are standardized with `stats` when given, otherwise with
/// statistics fitted on the train split. Synthetic data is used as-is.
pub fn load_data_dir(dir: &Path, stats: Option<&Normalization>) -> Result<DataSplits> {
    if dir.join(CIFAR10_TRAIN_FILES[0]).is_file() {
        let mut train: Option<Dataset> = None;
        for name in CIFAR10_TRAIN_FILES {
            let path = dir.join(name);
            if !path.is_file() {
                continue;
            }
            let shard = read_cifar10_file(&path)?;
            train = Some(match train {
                Some(t) => t.concat(shard)?,
                None => shard,
            });
        }
        let mut train = train.expect("first shard exists");
        let stats = match stats {
            Some(s) => s.clone(),
            None => Normalization::fit(&train)?,
        };
        train.normalize(&stats)?;
        let test_path = dir.join(CIFAR10_TEST_FILE);
        let test = if test_path.is_file() {
            let mut t = read_cifar10_file(&test_path)?;
            t.normalize(&stats)?;
            Some(t)
        } else {
            None
        };
        return Ok(DataSplits { train, test });
    }
    let train_path = dir.join(SYNTHETIC_TRAIN_FILE);
    if train_path.is_file() {
        let train = read_synthetic(&train_path)?;
        let test_path = dir.join(SYNTHETIC_TEST_FILE);
        let test = if test_path.is_file() {
            Some(read_synthetic(&test_path)?)
        } else {
            None
        };
        return Ok(DataSplits { train, test });
    }
    Err(Error::io(
        dir,
        std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!(
                "no dataset found (expected {} or {})",
                CIFAR10_TRAIN_FILES[0], SYNTHETIC_TRAIN_FILE
            ),
        ),
    ))
}

/// Parameters of a Gaussian-blob dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub n_per_class: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    /// Three classes of 200 points in 16 dimensions, centres at least 10 apart.
    fn default() -> Self {
        Self {
            n_per_class: 200,
            num_classes: 3,
            dim: 16,
            separation: 10.0,
            seed: 0,
        }
    }
}

impl BlobSpec {
    fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 || self.num_classes == 0 || self.dim == 0 {
            return Err(Error::InvalidArgument(
                "blob counts and dimension must be at least 1".into(),
            ));
        }
        if !(self.separation > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "blob separation must be > 0, got {}",
                self.separation
            )));
        }
        Ok(())
    }

    /// Class centres, pairwise at Euclidean distance ≥ `separation`.
    pub fn centers(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(0);
        // Rejection sampling in a cube whose side grows until the centres fit.
        let mut half_side = self.separation;
        loop {
            for _ in 0..64 {
                let mut centers: Vec<Vec<f64>> = Vec::with_capacity(self.num_classes);
                let mut ok = true;
                for _ in 0..self.num_classes {
                    let mut placed = false;
                    for _ in 0..256 {
                        let c: Vec<f64> = (0..self.dim)
                            .map(|_| rng.random_range(-half_side..half_side))
                            .collect();
                        if centers.iter().all(|o| euclidean(o, &c) >= self.separation) {
                            centers.push(c);
                            placed = true;
                            break;
                        }
                    }
                    if !placed {
                        ok = false;
                        break;
                    }
                }
                if ok {
                    return Ok(centers);
                }
            }
            half_side *= 1.5;
        }
    }

    /// Samples split `split` (0 = train, 1 = test, ...) around the shared centres.
    pub fn generate(&self, split: u64) -> Result<Dataset> {
        let centers = self.centers()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1 + split);
        let n = self.n_per_class * self.num_classes;
        let mut pixels = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for (label, center) in centers.iter().enumerate() {
            for _ in 0..self.n_per_class {
                for &c in center {
                    let noise: f64 = rng.sample(StandardNormal);
                    pixels.push((c + noise) as f32);
                }
                labels.push(label);
            }
        }
        Dataset::new(
            DatasetKind::Synthetic,
            vec![self.dim],
            pixels,
            Some(labels),
            self.num_classes,
        )
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Isotropic unit-variance Gaussian blobs; the train split of [`BlobSpec`].
pub fn make_synthetic_blobs(
    n_per_class: usize,
    num_classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    BlobSpec {
        n_per_class,
        num_classes,
        dim,
        separation,
        seed,
    }
    .generate(0)
}

/// Serializes a flat-vector dataset as text.
///
/// Line 1 is `n dim num_classes`; every following line is
/// `index label v_1 ... v_dim` with `-` for a missing label. Values use the
/// shortest decimal form that parses back to the identical `f32`.
pub fn synthetic_to_string(dataset: &Dataset) -> Result<String> {
    if dataset.sample_shape.len() != 1 {
        return Err(Error::InvalidArgument(
            "only flat-vector datasets use the synthetic text format".into(),
        ));
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} {} {}",
        dataset.len(),
        dataset.sample_len(),
        dataset.num_classes
    );
    for i in 0..dataset.len() {
        let _ = write!(out, "{i} ");
        match dataset.labels() {
            Some(l) => {
                let _ = write!(out, "{}", l[i]);
            }
            None => out.push('-'),
        }
        for v in dataset.sample(i) {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_synthetic(text: &str) -> Result<Dataset> {
    let bad = |line: usize, msg: &str| {
        Error::InvalidArgument(format!("synthetic data line {line}: {msg}"))
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::EmptyInput("synthetic data file".into()))?;
    let head: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad(1, "header must be three integers: n dim num_classes"))?;
    let [n, dim, num_classes] = head[..] else {
        return Err(bad(1, "header must be three integers: n dim num_classes"));
    };
    let mut pixels = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut any_missing = false;
    let mut rows = 0;
    for (lineno, line) in lines {
        let lineno = lineno + 1;
        let mut fields = line.split_whitespace();
        let index: usize = fields
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(lineno, "missing index"))?;
        if index != rows {
            return Err(bad(
                lineno,
                &format!("expected index {rows}, found {index}"),
            ));
        }
        match fields.next() {
            Some("-") => any_missing = true,
            Some(t) => labels.push(t.parse().map_err(|_| bad(lineno, "bad label"))?),
            None => return Err(bad(lineno, "missing label")),
        }
        let before = pixels.len();
        for t in fields {
            pixels.push(t.parse::<f32>().map_err(|_| bad(lineno, "bad value"))?);
        }
        if pixels.len() - before != dim {
            return Err(bad(lineno, &format!("expected {dim} values")));
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::InvalidArgument(format!(
            "synthetic data header declares {n} rows, found {rows}"
        )));
    }
    if any_missing && !labels.is_empty() {
        return Err(Error::InvalidArgument(
            "labels must be all present or all absent".into(),
        ));
    }
    let labels = (!any_missing).then_some(labels);
    Dataset::new(
        DatasetKind::Synthetic,
        vec![dim],
        pixels,
        labels,
        num_classes,
    )
}

pub fn write_synthetic(path: &Path, dataset: &Dataset) -> Result<()> {
    fs::write(path, synthetic_to_string(dataset)?).map_err(|e| Error::io(path, e))
}

pub fn read_synthetic(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_synthetic(&text).map_err(|e| match e {
        Error::InvalidArgument(msg) => Error::InvalidArgument(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Writes `train.txt` and `test.txt` for a blob dataset into `dir`.
pub fn write_blob_dir(dir: &Path, spec: &BlobSpec, test_per_class: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let train = spec.generate(0)?;
    let test = BlobSpec {
        n_per_class: test_per_class,
        ..*spec
    }
    .generate(1)?;
    let train_path = dir.join(SYNTHETIC_TRAIN_FILE);
    let test_path = dir.join(SYNTHETIC_TEST_FILE);
    write_synthetic(&train_path, &train)?;
    write_synthetic(&test_path, &test)?;
    Ok(vec![train_path, test_path])
}

/// Permutation of `0..n` keyed by `(seed, epoch)`.
///
/// ChaCha8 with the epoch as stream id is a counter-based generator, so the
/// order is reproducible across runs and platforms.
pub fn epoch_permutation(n: usize, epoch: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Lazily materialized batches of one epoch.
pub struct EpochBatches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl EpochBatches<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for EpochBatches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.dataset.batch(&self.order[self.cursor..end]);
        self.cursor = end;
        Some(batch)
    }
}

/// Shuffled batches for one epoch; the final batch may be short.
pub fn epoch_batches(
    dataset: &Dataset,
    batch_size: usize,
    epoch: usize,
    seed: u64,
) -> Result<EpochBatches<'_>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument(
            "batch size must be at least 1".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyInput("cannot batch an empty dataset".into()));
    }
    Ok(EpochBatches {
        dataset,
        order: epoch_permutation(dataset.len(), epoch, seed),
        batch_size,
        cursor: 0,
    })
}
