//! Loss terms of the self-distillation objective and their weighted sum.
//!
//! Every term is a pure function over values. The autograd tape reuses these
//! for its forward values and supplies the matching gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(what.to_string()))
    }
}

/// Log-softmax with max subtraction.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("softmax over zero logits".into()));
    }
    check_finite(logits, "logits")?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(out)
}

/// Cross-entropy `-log softmax(logits)[label]`.
pub fn ce_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Label {
            label,
            classes: logits.len(),
        });
    }
    check_finite(logits, "logits")?;
    Ok(-log_softmax(logits)[label])
}

/// Batch-mean cross-entropy over the rows of a `[B, K]` logit matrix.
pub fn ce_loss_batch(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let batch = logits.rows();
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels for {batch} logit rows",
            labels.len()
        )));
    }
    if batch == 0 {
        return Err(Error::EmptyInput(
            "cross-entropy over an empty batch".into(),
        ));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        total += ce_loss(logits.row(i), y)?;
    }
    Ok(total / batch as f64)
}

/// `KL(softmax(teacher) || softmax(student))`.
pub fn kl_loss(teacher_logits: &[f64], student_logits: &[f64]) -> Result<f64> {
    if teacher_logits.len() != student_logits.len() {
        return Err(Error::Shape(format!(
            "teacher has {} logits, student has {}",
            teacher_logits.len(),
            student_logits.len()
        )));
    }
    check_finite(teacher_logits, "teacher logits")?;
    check_finite(student_logits, "student logits")?;
    let lt = log_softmax(teacher_logits);
    let ls = log_softmax(student_logits);
    Ok(lt.iter().zip(&ls).map(|(&t, &s)| t.exp() * (t - s)).sum())
}

/// Batch-mean KL divergence between row-aligned teacher and student logits.
pub fn kl_loss_batch(teacher_logits: &Tensor, student_logits: &Tensor) -> Result<f64> {
    if teacher_logits.shape() != student_logits.shape() {
        return Err(Error::Shape(format!(
            "teacher logits {:?} vs student logits {:?}",
            teacher_logits.shape(),
            student_logits.shape()
        )));
    }
    let batch = teacher_logits.rows();
    if batch == 0 {
        return Err(Error::EmptyInput("KL over an empty batch".into()));
    }
    let mut total = 0.0;
    for i in 0..batch {
        total += kl_loss(teacher_logits.row(i), student_logits.row(i))?;
    }
    Ok(total / batch as f64)
}

/// Distance used by the feature-hint term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HintsDistance {
    Squared,
    Euclidean,
}

impl HintsDistance {
    pub fn name(self) -> &'static str {
        match self {
            HintsDistance::Squared => "squared",
            HintsDistance::Euclidean => "euclidean",
        }
    }
}

impl std::str::FromStr for HintsDistance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(HintsDistance::Squared),
            "euclidean" => Ok(HintsDistance::Euclidean),
            other => Err(Error::Config(format!(
                "unknown hints distance '{other}' (expected squared or euclidean)"
            ))),
        }
    }
}

/// Per-sample distance between flattened feature tensors, averaged over the batch.
pub fn hints_loss_with(student: &Tensor, teacher: &Tensor, distance: HintsDistance) -> Result<f64> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape(format!(
            "hint features {:?} vs teacher features {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let batch = student.rows();
    if batch == 0 {
        return Err(Error::EmptyInput("hints over an empty batch".into()));
    }
    let mut total = 0.0;
    for i in 0..batch {
        let sq: f64 = student
            .row(i)
            .iter()
            .zip(teacher.row(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += match distance {
            HintsDistance::Squared => sq,
            HintsDistance::Euclidean => sq.sqrt(),
        };
    }
    Ok(total / batch as f64)
}

/// Squared-distance hints loss, the default form.
pub fn hints_loss(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    hints_loss_with(student, teacher, HintsDistance::Squared)
}

/// The component losses of one objective evaluation and their weighted total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_teacher: f64,
    pub l_students: Vec<f64>,
    pub l_kl: f64,
    pub l_hints: f64,
    pub total: f64,
    pub alpha: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn student_sum(&self) -> f64 {
        self.l_students.iter().sum()
    }

    /// Recomputes the weighted total from the stored components.
    pub fn recomposed(&self) -> f64 {
        compose(
            self.l_teacher,
            self.student_sum(),
            self.l_kl,
            self.l_hints,
            self.alpha,
            self.lambda,
        )
    }
}

fn compose(
    l_teacher: f64,
    student_sum: f64,
    l_kl: f64,
    l_hints: f64,
    alpha: f64,
    lambda: f64,
) -> f64 {
    l_teacher + (1.0 - alpha) * student_sum + alpha * l_kl + lambda * l_hints
}

/// `L_c + (1 - alpha) * sum(L_i) + alpha * L_KL + lambda * L_hints`.
///
/// `l_kl` and `l_hints` are already reduced over the student exits.
pub fn total_loss(
    l_teacher: f64,
    l_students: &[f64],
    l_kl: f64,
    l_hints: f64,
    alpha: f64,
    lambda: f64,
) -> Result<LossBreakdown> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} outside [0, 1]"
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda {lambda} must be >= 0"
        )));
    }
    if !l_teacher.is_finite() {
        return Err(Error::Numeric("teacher cross-entropy".into()));
    }
    if let Some(i) = l_students.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("student {i} cross-entropy")));
    }
    if !l_kl.is_finite() {
        return Err(Error::Numeric("KL divergence".into()));
    }
    if !l_hints.is_finite() {
        return Err(Error::Numeric("hints loss".into()));
    }
    let student_sum: f64 = l_students.iter().sum();
    Ok(LossBreakdown {
        l_teacher,
        l_students: l_students.to_vec(),
        l_kl,
        l_hints,
        total: compose(l_teacher, student_sum, l_kl, l_hints, alpha, lambda),
        alpha,
        lambda,
    })
}
