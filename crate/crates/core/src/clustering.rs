//! Spherical k-means over teacher embeddings and the per-epoch pseudo-label table.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{BankSet, Mode, MultiExitModel};
use crate::tensor::{dot, norm, normalize_in_place, Tensor};

/// Largest-cluster share above which a collapse warning is emitted.
pub const COLLAPSE_FRACTION: f64 = 0.9;
const UNIT_TOLERANCE: f64 = 1e-5;

/// Cluster assignment of every sample, fixed for one epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabelTable {
    pub epoch: usize,
    pub labels: Vec<usize>,
    pub cluster_sizes: Vec<usize>,
}

impl PseudoLabelTable {
    pub fn new(epoch: usize, labels: Vec<usize>, num_clusters: usize) -> Result<Self> {
        let mut cluster_sizes = vec![0; num_clusters];
        for &l in &labels {
            if l >= num_clusters {
                return Err(Error::Label {
                    label: l,
                    classes: num_clusters,
                });
            }
            cluster_sizes[l] += 1;
        }
        Ok(Self {
            epoch,
            labels,
            cluster_sizes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        self.cluster_sizes.len()
    }

    pub fn min_size(&self) -> usize {
        self.cluster_sizes.iter().copied().min().unwrap_or(0)
    }

    pub fn max_size(&self) -> usize {
        self.cluster_sizes.iter().copied().max().unwrap_or(0)
    }

    /// Shannon entropy (nats) of the cluster-size distribution.
    pub fn size_entropy(&self) -> f64 {
        size_entropy(&self.cluster_sizes)
    }

    pub fn is_collapsed(&self) -> bool {
        !self.is_empty() && self.max_size() as f64 / self.len() as f64 > COLLAPSE_FRACTION
    }

    /// `sample_index,label` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_index,label\n");
        for (i, l) in self.labels.iter().enumerate() {
            let _ = writeln!(out, "{i},{l}");
        }
        out
    }
}

pub(crate) fn size_entropy(sizes: &[usize]) -> f64 {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    -sizes
        .iter()
        .filter(|&&s| s > 0)
        .map(|&s| {
            let p = s as f64 / total;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Per-head embedding matrices from one inference pass, rows in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBank {
    pub epoch: usize,
    /// Students in exit order, then the teacher.
    pub heads: Vec<Tensor>,
    /// Pooled teacher backbone features.
    pub pooled_teacher: Tensor,
}

impl EmbeddingBank {
    pub fn teacher(&self) -> &Tensor {
        self.heads.last().expect("at least one head")
    }
}

/// Runs the model over every sample in inference mode.
pub fn extract_embeddings(
    model: &MultiExitModel,
    banks: &BankSet,
    dataset: &Dataset,
    batch_size: usize,
    epoch: usize,
) -> Result<EmbeddingBank> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("cannot embed an empty dataset".into()));
    }
    let heads = model.config().num_heads();
    let mut per_head: Vec<Vec<Tensor>> = vec![Vec::new(); heads];
    let mut pooled = Vec::new();
    for batch in dataset.sequential_batches(batch_size) {
        let (out, _) = model.forward(banks, &batch, Mode::Eval)?;
        for (h, exit) in out
            .students
            .into_iter()
            .chain([out.teacher.clone()])
            .enumerate()
        {
            per_head[h].push(exit.embedding);
        }
        pooled.push(out.teacher.pooled);
    }
    Ok(EmbeddingBank {
        epoch,
        heads: per_head
            .iter()
            .map(|parts| Tensor::concat_rows(parts))
            .collect::<Result<_>>()?,
        pooled_teacher: Tensor::concat_rows(&pooled)?,
    })
}

/// Outcome of [`spherical_kmeans`].
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// Unit-norm centroids whose assignment step produced `labels`.
    pub centroids: Tensor,
    pub labels: Vec<usize>,
    /// Objective after every centroid update.
    pub objective_history: Vec<f64>,
    pub converged: bool,
}

/// `Σᵢ cos(zᵢ, centroid[labelᵢ])` for unit-norm rows.
pub fn kmeans_objective(z: &Tensor, centroids: &Tensor, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| dot(z.row(i), centroids.row(l)))
        .sum()
}

fn check_unit_rows(z: &Tensor) -> Result<()> {
    if z.shape().len() != 2 {
        return Err(Error::Shape(format!("embedding matrix {:?}", z.shape())));
    }
    for r in 0..z.rows() {
        let n = norm(z.row(r));
        if !n.is_finite() {
            return Err(Error::Numeric(format!("embedding row {r}")));
        }
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "embedding row {r} has norm {n}, expected unit norm"
            )));
        }
    }
    Ok(())
}

/// Index of the most similar centroid, ties toward the lowest index.
fn nearest(row: &[f64], centroids: &Tensor) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for k in 0..centroids.rows() {
        let s = dot(row, centroids.row(k));
        if s > best_sim {
            best_sim = s;
            best = k;
        }
    }
    best
}

fn assign(z: &Tensor, centroids: &Tensor) -> Vec<usize> {
    (0..z.rows())
        .map(|i| nearest(z.row(i), centroids))
        .collect()
}

/// Normalized member means; a zero mean is nudged toward its first member.
fn member_means(z: &Tensor, labels: &[usize], k: usize) -> Result<Tensor> {
    let d = z.row_len();
    let mut sums = Tensor::zeros(&[k, d]);
    let mut counts = vec![0usize; k];
    let mut first = vec![usize::MAX; k];
    for (i, &l) in labels.iter().enumerate() {
        for (s, v) in sums.row_mut(l).iter_mut().zip(z.row(i)) {
            *s += v;
        }
        counts[l] += 1;
        if first[l] == usize::MAX {
            first[l] = i;
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            return Err(Error::EmptyCluster(c));
        }
        let row = sums.row_mut(c);
        if norm(row) <= 1e-12 {
            for (s, v) in row.iter_mut().zip(z.row(first[c])) {
                *s += 1e-6 * v;
            }
        }
        if normalize_in_place(row) <= 0.0 {
            row.iter_mut().for_each(|v| *v = 0.0);
            row[0] = 1.0;
        }
    }
    Ok(sums)
}

/// Gives every empty cluster one point.
///
/// Each empty cluster (lowest index first) takes the member of the currently
/// largest cluster that is least similar to that cluster's centroid; its own
/// centroid becomes that point. Ties break toward the lowest index.
pub fn repair_empty_clusters(
    mut centroids: Tensor,
    mut labels: Vec<usize>,
    z: &Tensor,
) -> Result<(Tensor, Vec<usize>)> {
    let k = centroids.rows();
    if k > z.rows() {
        return Err(Error::InsufficientPoints {
            points: z.rows(),
            clusters: k,
        });
    }
    let mut sizes = vec![0usize; k];
    for &l in &labels {
        sizes[l] += 1;
    }
    while let Some(empty) = sizes.iter().position(|&s| s == 0) {
        let mut largest = 0;
        for c in 1..k {
            if sizes[c] > sizes[largest] {
                largest = c;
            }
        }
        let mut far = usize::MAX;
        let mut far_sim = f64::INFINITY;
        for (i, &l) in labels.iter().enumerate() {
            if l == largest {
                let s = dot(z.row(i), centroids.row(largest));
                if s < far_sim {
                    far_sim = s;
                    far = i;
                }
            }
        }
        centroids.row_mut(empty).copy_from_slice(z.row(far));
        normalize_in_place(centroids.row_mut(empty));
        labels[far] = empty;
        sizes[largest] -= 1;
        sizes[empty] += 1;
    }
    Ok((centroids, labels))
}

/// Lloyd iterations on the unit sphere with cosine-similarity assignment.
///
/// Initial centroids are `k` distinct rows sampled with `seed`. Iteration
/// stops after `max_iters` centroid updates or when an assignment repeats.
pub fn spherical_kmeans(z: &Tensor, k: usize, max_iters: usize, seed: u64) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "k-means needs at least one cluster".into(),
        ));
    }
    check_unit_rows(z)?;
    let n = z.rows();
    if n < k {
        return Err(Error::InsufficientPoints {
            points: n,
            clusters: k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init: Vec<usize> = rand::seq::index::sample(&mut rng, n, k).into_vec();
    let mut centroids = z.select_rows(&init);

    let assign_repair =
        |centroids: Tensor| repair_empty_clusters(centroids.clone(), assign(z, &centroids), z);
    let (c, mut labels) = assign_repair(centroids)?;
    centroids = c;
    let mut history = Vec::with_capacity(max_iters);
    let mut converged = false;
    for _ in 0..max_iters {
        centroids = member_means(z, &labels, k)?;
        history.push(kmeans_objective(z, &centroids, &labels));
        let (c, next) = assign_repair(centroids)?;
        centroids = c;
        let same = next == labels;
        labels = next;
        if same {
            converged = true;
            break;
        }
    }
    Ok(KMeansResult {
        centroids,
        labels,
        objective_history: history,
        converged,
    })
}

/// Normalized per-cluster means of one head's embeddings under shared labels.
pub fn head_centroids(z: &Tensor, labels: &[usize], k: usize) -> Result<Tensor> {
    if labels.len() != z.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} embedding rows",
            labels.len(),
            z.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label {
            label: bad,
            classes: k,
        });
    }
    member_means(z, labels, k)
}
