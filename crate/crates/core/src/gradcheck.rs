//! Central-difference verification of the training objective's gradient.

use crate::autograd::ParamKey;
use crate::config::{DistillReduction, TrainConfig};
use crate::data::Batch;
use crate::error::Result;
use crate::losses::{ce_loss_batch, hints_loss_with, kl_loss_batch, total_loss};
use crate::model::{BankSet, Mode, MultiExitModel};
use crate::tensor::Tensor;
use crate::trainer::objective;

/// Smallest denominator of the relative error.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)`.
    pub max_relative_error: f64,
    /// Name of the tensor holding the worst entry.
    pub worst_tensor: String,
    /// Scalars perturbed, banks included.
    pub entries: usize,
}

/// Objective value with the teacher's logits and feature map replaced by fixed targets.
pub fn loss_with_fixed_targets(
    model: &MultiExitModel,
    banks: &BankSet,
    batch: &Batch,
    labels: &[usize],
    config: &TrainConfig,
    teacher_logits: &Tensor,
    teacher_features: &Tensor,
) -> Result<f64> {
    let (out, _) = model.forward(banks, batch, Mode::Train)?;
    let l_c = ce_loss_batch(&out.teacher.logits, labels)?;
    if !config.distill {
        return Ok(l_c);
    }
    let mut ce = Vec::with_capacity(out.students.len());
    let (mut kl, mut hints) = (0.0, 0.0);
    for s in &out.students {
        ce.push(ce_loss_batch(&s.logits, labels)?);
        kl += kl_loss_batch(teacher_logits, &s.logits)?;
        hints += hints_loss_with(&s.adapted, teacher_features, config.hints_distance)?;
    }
    let r = match config.distill_reduction {
        DistillReduction::Sum => 1.0,
        DistillReduction::Mean => 1.0 / out.students.len() as f64,
    };
    Ok(total_loss(l_c, &ce, r * kl, r * hints, config.alpha, config.lambda)?.total)
}

/// Compares the tape gradient of the objective with central differences of
/// step `h` for every parameter and prototype entry.
///
/// The teacher's logits and features are held at their unperturbed values
/// inside the distillation terms, which is the function the detached
/// objective differentiates.
pub fn check_objective_gradient(
    model: &MultiExitModel,
    banks: &BankSet,
    batch: &Batch,
    labels: &[usize],
    config: &TrainConfig,
    h: f64,
) -> Result<GradCheckReport> {
    let obj = objective(model, banks, &batch.inputs, labels, config, Mode::Train)?;
    let grads = obj.tape.backward(obj.root)?;
    let (out, _) = model.forward(banks, batch, Mode::Train)?;
    let (t_logits, t_feat) = (out.teacher.logits, out.teacher.raw);
    let (mut model, mut banks) = (model.clone(), banks.clone());
    let loss = |m: &MultiExitModel, b: &BankSet| {
        loss_with_fixed_targets(m, b, batch, labels, config, &t_logits, &t_feat)
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_tensor: String::new(),
        entries: 0,
    };
    let mut record = |name: &str, analytic: f64, numeric: f64| {
        let err =
            (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_tensor = name.to_string();
        }
        report.entries += 1;
    };
    for i in 0..model.params().len() {
        let name = model.params()[i].name.clone();
        let g = grads.get(ParamKey::Weight(i)).cloned();
        for j in 0..model.params()[i].tensor.len() {
            let orig = model.params()[i].tensor.data()[j];
            model.param_mut(i).data_mut()[j] = orig + h;
            let up = loss(&model, &banks)?;
            model.param_mut(i).data_mut()[j] = orig - h;
            let down = loss(&model, &banks)?;
            model.param_mut(i).data_mut()[j] = orig;
            record(
                &name,
                g.as_ref().map_or(0.0, |g| g.data()[j]),
                (up - down) / (2.0 * h),
            );
        }
    }
    for hd in 0..banks.len() {
        let g = grads.get(ParamKey::Bank(hd)).cloned();
        let name = format!("bank{hd}");
        for j in 0..banks.get(hd).prototypes().len() {
            let orig = banks.get(hd).prototypes().data()[j];
            banks.get_mut(hd).prototypes_mut().data_mut()[j] = orig + h;
            let up = loss(&model, &banks)?;
            banks.get_mut(hd).prototypes_mut().data_mut()[j] = orig - h;
            let down = loss(&model, &banks)?;
            banks.get_mut(hd).prototypes_mut().data_mut()[j] = orig;
            record(
                &name,
                g.as_ref().map_or(0.0, |g| g.data()[j]),
                (up - down) / (2.0 * h),
            );
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_blobs;
    use crate::model::{init_model, ModelConfig};

    #[test]
    fn gradient_matches_with_and_without_distillation() {
        let ds = make_synthetic_blobs(2, 2, 3, 3.0, 1).unwrap();
        let batch = ds.batch(&[0, 1, 2, 3]);
        let mut cfg = TrainConfig {
            model: ModelConfig {
                hidden_dim: 4,
                feature_dim: 3,
                backbone_width: 4,
                num_prototypes: 3,
                ..ModelConfig::tiny_mlp(3)
            },
            ..TrainConfig::default()
        };
        let (m, b) = init_model(&cfg.model, 0).unwrap();
        let labels = [0, 1, 2, 0];
        let ok = check_objective_gradient(&m, &b, &batch, &labels, &cfg, 1e-5).unwrap();
        assert!(ok.max_relative_error < 1e-4, "{ok:?}");
        cfg.distill = false;
        let plain = check_objective_gradient(&m, &b, &batch, &labels, &cfg, 1e-5).unwrap();
        assert!(plain.max_relative_error < 1e-4, "{plain:?}");
    }
}
