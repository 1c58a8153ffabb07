use dcsd_core::autograd::{ParamKey, Tape};
use dcsd_core::config::{DistillReduction, TrainConfig};
use dcsd_core::data::{make_synthetic_blobs, Batch};
use dcsd_core::gradcheck::{check_objective_gradient, GradCheckReport};
use dcsd_core::losses::{kl_loss_batch, HintsDistance};
use dcsd_core::model::{init_model, Mode, ModelConfig};

fn config() -> TrainConfig {
    TrainConfig {
        alpha: 0.9,
        lambda: 1e-5,
        model: ModelConfig {
            hidden_dim: 8,
            feature_dim: 4,
            backbone_width: 6,
            num_prototypes: 4,
            ..ModelConfig::tiny_mlp(3)
        },
        ..TrainConfig::default()
    }
}

fn batch() -> Batch {
    let ds = make_synthetic_blobs(3, 2, 3, 3.0, 9).unwrap();
    ds.batch(&(0..ds.len()).collect::<Vec<_>>())
}

fn check(cfg: &TrainConfig) -> GradCheckReport {
    let (m, b) = init_model(&cfg.model, 4).unwrap();
    let labels: Vec<usize> = (0..6)
        .map(|i| (i * 7 + 1) % cfg.model.num_prototypes)
        .collect();
    check_objective_gradient(&m, &b, &batch(), &labels, cfg, 1e-5).unwrap()
}

#[test]
fn hint_weight_and_mean_reduction() {
    let mut cfg = config();
    cfg.lambda = 0.5;
    cfg.model.num_student_exits = 2;
    cfg.distill_reduction = DistillReduction::Mean;
    let r = check(&cfg);
    assert!(r.max_relative_error <= 1e-4, "{r:?}");
    cfg.hints_distance = HintsDistance::Euclidean;
    let r = check(&cfg);
    assert!(r.max_relative_error <= 1e-4, "{r:?}");
}

#[test]
fn kl_sends_no_gradient_into_teacher() {
    let cfg = config();
    let batch = batch();
    let (mut model, banks) = init_model(&cfg.model, 2).unwrap();

    let mut tape = Tape::new();
    let x = tape.constant(batch.inputs.clone());
    let (vars, _) = model
        .forward_on_tape(&mut tape, x, &banks, Mode::Train)
        .unwrap();
    let kl = tape
        .kl_div(vars.teacher.logits, vars.students[0].logits)
        .unwrap();
    let grads = tape.backward(kl).unwrap();
    let teacher_only: Vec<usize> = model
        .param_indices("teacher.")
        .into_iter()
        .chain(model.param_indices("backbone.block2."))
        .collect();
    assert!(!teacher_only.is_empty());
    for i in &teacher_only {
        if let Some(g) = grads.get(ParamKey::Weight(*i)) {
            assert!(
                g.data().iter().all(|&v| v == 0.0),
                "{}",
                model.params()[*i].name
            );
        }
    }
    assert!(grads.get(ParamKey::Bank(banks.teacher_index())).is_none());
    assert!(model
        .param_indices("student1.")
        .iter()
        .any(|&i| grads.get(ParamKey::Weight(i)).is_some()));

    // The value still depends on the teacher.
    let kl_value = |m: &dcsd_core::model::MultiExitModel| {
        let (o, _) = m.forward(&banks, &batch, Mode::Train).unwrap();
        kl_loss_batch(&o.teacher.logits, &o.students[0].logits).unwrap()
    };
    let before = kl_value(&model);
    for i in model.param_indices("teacher.head.fc2") {
        for v in model.param_mut(i).data_mut() {
            *v *= -1.3;
        }
    }
    let after = kl_value(&model);
    assert!((after - before).abs() > 1e-6, "{before} vs {after}");
}
