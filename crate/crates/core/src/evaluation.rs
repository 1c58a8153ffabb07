//! Linear probe on frozen features and clustering diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::clustering::{extract_embeddings, PseudoLabelTable};
use crate::config::{FeatureSource, ProbeConfig};
use crate::data::{epoch_permutation, Dataset};
use crate::error::{Error, Result};
use crate::losses::log_softmax;
use crate::model::{BankSet, MultiExitModel};
use crate::optim::Adam;
use crate::tensor::{gemm, Layout, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub epochs_run: usize,
    pub feature_source: FeatureSource,
}

impl ProbeResult {
    pub fn to_kv_string(&self) -> String {
        format!(
            "train_accuracy = {}\ntest_accuracy = {}\nepochs_run = {}\nfeature_source = {}\n",
            self.train_accuracy,
            self.test_accuracy,
            self.epochs_run,
            self.feature_source.name()
        )
    }

    pub fn to_delimited(&self) -> String {
        format!(
            "train_accuracy,test_accuracy,epochs_run,feature_source\n{},{},{},{}\n",
            self.train_accuracy,
            self.test_accuracy,
            self.epochs_run,
            self.feature_source.name()
        )
    }
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_and_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyInput("no values to summarize".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// Accuracy table over seeds, headed by a comment stating the spread convention.
pub fn seed_summary_report(rows: &[(u64, ProbeResult)]) -> Result<String> {
    let acc: Vec<f64> = rows.iter().map(|(_, r)| r.test_accuracy).collect();
    let (mean, std) = mean_and_std(&acc)?;
    let mut s =
        String::from("# test_accuracy summary: mean +- sample standard deviation over seeds\n");
    s.push_str("seed,train_accuracy,test_accuracy\n");
    for (seed, r) in rows {
        let _ = writeln!(s, "{seed},{},{}", r.train_accuracy, r.test_accuracy);
    }
    let _ = writeln!(s, "mean,,{mean}\nstd,,{std}");
    Ok(s)
}

/// Teacher features of every sample, rows in dataset order.
pub fn probe_features(
    model: &MultiExitModel,
    banks: &BankSet,
    dataset: &Dataset,
    source: FeatureSource,
    batch_size: usize,
) -> Result<Tensor> {
    let bank = extract_embeddings(model, banks, dataset, batch_size, 0)?;
    Ok(match source {
        FeatureSource::PooledTeacher => bank.pooled_teacher,
        FeatureSource::ProjectedTeacher => bank.teacher().clone(),
    })
}

fn required_labels(dataset: &Dataset, what: &str) -> Result<Vec<usize>> {
    dataset
        .labels()
        .map(<[usize]>::to_vec)
        .ok_or_else(|| Error::InvalidArgument(format!("{what} split has no labels")))
}

/// Trains a linear classifier on frozen teacher features and reports accuracies.
pub fn linear_probe(
    model: &MultiExitModel,
    banks: &BankSet,
    train: &Dataset,
    test: &Dataset,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    let train_y = required_labels(train, "training")?;
    let test_y = required_labels(test, "test")?;
    let classes = config.num_classes.unwrap_or(train.num_classes());
    if classes != train.num_classes() || classes != test.num_classes() {
        return Err(Error::Config(format!(
            "probe has {classes} outputs but the data has {} training and {} test classes",
            train.num_classes(),
            test.num_classes()
        )));
    }
    let before = model.checksum();
    let train_x = probe_features(
        model,
        banks,
        train,
        config.feature_source,
        config.batch_size,
    )?;
    let test_x = probe_features(model, banks, test, config.feature_source, config.batch_size)?;
    let result = fit_linear_probe(&train_x, &train_y, &test_x, &test_y, classes, config)?;
    assert_eq!(model.checksum(), before, "probing modified the encoder");
    Ok(result)
}

/// Softmax regression `W x + b` trained with Adam on mini-batches.
pub fn fit_linear_probe(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    if train_x.rows() == 0 || test_x.rows() == 0 {
        return Err(Error::EmptyInput(
            "probe needs nonempty train and test sets".into(),
        ));
    }
    if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() {
        return Err(Error::Shape("feature rows and label counts differ".into()));
    }
    if train_x.row_len() != test_x.row_len() {
        return Err(Error::Shape(format!(
            "train features have width {}, test features {}",
            train_x.row_len(),
            test_x.row_len()
        )));
    }
    if let Some(&bad) = train_y.iter().chain(test_y).find(|&&l| l >= classes) {
        return Err(Error::Config(format!(
            "label {bad} does not fit a probe with {classes} outputs"
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "probe batch size must be at least 1".into(),
        ));
    }
    let d = train_x.row_len();
    let mut w = vec![0.0; classes * d];
    let mut b = vec![0.0; classes];
    let mut opt = Adam::new(config.lr, &[w.len(), b.len()]);
    let n = train_x.rows();
    for epoch in 0..config.epochs {
        let order = epoch_permutation(n, epoch, config.seed);
        for chunk in order.chunks(config.batch_size) {
            let x = train_x.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let logits = affine(&x, &w, &b, classes);
            let m = chunk.len() as f64;
            // d(mean CE)/d logits = (softmax - onehot) / m
            let mut dz = vec![0.0; chunk.len() * classes];
            for (r, &label) in y.iter().enumerate() {
                let lp = log_softmax(&logits[r * classes..(r + 1) * classes]);
                for c in 0..classes {
                    dz[r * classes + c] = (lp[c].exp() - if c == label { 1.0 } else { 0.0 }) / m;
                }
            }
            let mut gw = vec![0.0; classes * d];
            gemm(
                classes,
                chunk.len(),
                d,
                &dz,
                Layout::T,
                x.data(),
                Layout::N,
                0.0,
                &mut gw,
            );
            let mut gb = vec![0.0; classes];
            for r in 0..chunk.len() {
                for c in 0..classes {
                    gb[c] += dz[r * classes + c];
                }
            }
            opt.step(
                &mut [w.as_mut_slice(), b.as_mut_slice()],
                &[gw.as_slice(), gb.as_slice()],
            );
        }
    }
    Ok(ProbeResult {
        train_accuracy: accuracy(train_x, train_y, &w, &b, classes),
        test_accuracy: accuracy(test_x, test_y, &w, &b, classes),
        epochs_run: config.epochs,
        feature_source: config.feature_source,
    })
}

fn affine(x: &Tensor, w: &[f64], b: &[f64], classes: usize) -> Vec<f64> {
    let rows = x.rows();
    let mut out: Vec<f64> = (0..rows).flat_map(|_| b.iter().copied()).collect();
    gemm(
        rows,
        x.row_len(),
        classes,
        x.data(),
        Layout::N,
        w,
        Layout::T,
        1.0,
        &mut out,
    );
    out
}

fn accuracy(x: &Tensor, y: &[usize], w: &[f64], b: &[f64], classes: usize) -> f64 {
    let logits = affine(x, w, b, classes);
    let correct = y
        .iter()
        .enumerate()
        .filter(|&(r, &label)| argmax(&logits[r * classes..(r + 1) * classes]) == label)
        .count();
    correct as f64 / y.len() as f64
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringDiagnostics {
    pub nmi: f64,
    pub cluster_entropy: f64,
}

impl ClusteringDiagnostics {
    pub fn to_kv_string(&self) -> String {
        format!(
            "nmi = {}\ncluster_entropy = {}\n",
            self.nmi, self.cluster_entropy
        )
    }
}

fn entropy_of_counts<'a>(counts: impl Iterator<Item = &'a usize>, n: f64) -> f64 {
    counts
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization.
///
/// Two single-block partitions agree perfectly and score 1.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("NMI needs at least one sample".into()));
    }
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "NMI over {} and {} labels",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ca: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let ha = entropy_of_counts(ca.values(), n);
    let hb = entropy_of_counts(cb.values(), n);
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            pxy * (pxy * n * n / (ca[&x] as f64 * cb[&y] as f64)).ln()
        })
        .sum();
    Ok((mi / (0.5 * (ha + hb))).clamp(0.0, 1.0))
}

pub fn clustering_diagnostics(
    table: &PseudoLabelTable,
    true_labels: &[usize],
) -> Result<ClusteringDiagnostics> {
    Ok(ClusteringDiagnostics {
        nmi: nmi(&table.labels, true_labels)?,
        cluster_entropy: table.size_entropy(),
    })
}
