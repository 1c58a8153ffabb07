//! The alternating assign/optimize loop.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::clustering::{
    extract_embeddings, head_centroids, spherical_kmeans, PseudoLabelTable, COLLAPSE_FRACTION,
};
use crate::config::{DistillReduction, TrainConfig};
use crate::data::{epoch_batches, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::model::{init_model, Backbone, BankSet, Mode, MultiExitModel, StatUpdates};
use crate::optim::{lr_at, Sgd};
use crate::rundir::RunDirectory;
use crate::tensor::Tensor;

/// Column names of the metrics file, in order.
pub const METRICS_COLUMNS: [&str; 12] = [
    "epoch",
    "step",
    "lr",
    "loss_total",
    "loss_teacher_ce",
    "loss_student_ce_sum",
    "loss_kl",
    "loss_hints",
    "cluster_min",
    "cluster_max",
    "cluster_entropy",
    "seconds",
];

/// Batch-size weighted means of one epoch's losses plus bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Global optimizer steps completed at the end of the epoch.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub loss_total: f64,
    pub loss_teacher_ce: f64,
    pub loss_student_ce_sum: f64,
    pub loss_kl: f64,
    pub loss_hints: f64,
    pub cluster_min: usize,
    pub cluster_max: usize,
    pub cluster_entropy: f64,
    /// Wall time written to the metrics file; 0 unless wall time recording is on.
    pub seconds: f64,
    /// Measured wall time of the epoch, always populated.
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl MetricsRecord {
    pub fn csv_header() -> String {
        METRICS_COLUMNS.join(",")
    }

    pub fn to_csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.lr,
            self.loss_total,
            self.loss_teacher_ce,
            self.loss_student_ce_sum,
            self.loss_kl,
            self.loss_hints,
            self.cluster_min,
            self.cluster_max,
            self.cluster_entropy,
            self.seconds
        );
        s
    }

    /// `loss_total` recomputed from the component columns.
    pub fn recomposed_total(&self, alpha: f64, lambda: f64) -> f64 {
        self.loss_teacher_ce
            + (1.0 - alpha) * self.loss_student_ce_sum
            + alpha * self.loss_kl
            + lambda * self.loss_hints
    }
}

/// One recorded evaluation of the training objective.
pub struct Objective {
    pub tape: Tape,
    pub root: Var,
    pub breakdown: LossBreakdown,
    pub stats: StatUpdates,
}

/// Records the full objective for one batch on a fresh tape.
///
/// The teacher's logits and features enter the KL and hint terms detached.
/// Without distillation only the teacher cross-entropy is recorded and the
/// other components are reported as 0.
pub fn objective(
    model: &MultiExitModel,
    banks: &BankSet,
    inputs: &Tensor,
    labels: &[usize],
    config: &TrainConfig,
    mode: Mode,
) -> Result<Objective> {
    let mut tape = Tape::new();
    let x = tape.constant(inputs.clone());
    let (vars, stats) = model.forward_on_tape(&mut tape, x, banks, mode)?;
    let l_c = tape.cross_entropy(vars.teacher.logits, labels)?;
    let n_students = vars.students.len();
    if !config.distill {
        let l_teacher = tape.value(l_c).item();
        let breakdown = total_loss(
            l_teacher,
            &vec![0.0; n_students],
            0.0,
            0.0,
            config.alpha,
            config.lambda,
        )?;
        let root = tape.weighted_sum(&[(l_c, 1.0)])?;
        return Ok(Objective {
            tape,
            root,
            breakdown,
            stats,
        });
    }

    let reduce = match config.distill_reduction {
        DistillReduction::Sum => 1.0,
        DistillReduction::Mean => 1.0 / n_students as f64,
    };
    let (alpha, lambda) = (config.alpha, config.lambda);
    let teacher_logits = tape.detach(vars.teacher.logits);
    let teacher_features = tape.detach(vars.teacher.raw);
    let mut terms = vec![(l_c, 1.0)];
    let mut l_students = Vec::with_capacity(n_students);
    let (mut l_kl, mut l_hints) = (0.0, 0.0);
    for s in &vars.students {
        let ce = tape.cross_entropy(s.logits, labels)?;
        let kl = tape.kl_div(teacher_logits, s.logits)?;
        let hints = tape.hints(s.adapted, teacher_features, config.hints_distance)?;
        l_students.push(tape.value(ce).item());
        l_kl += tape.value(kl).item();
        l_hints += tape.value(hints).item();
        terms.push((ce, 1.0 - alpha));
        terms.push((kl, alpha * reduce));
        terms.push((hints, lambda * reduce));
    }
    let breakdown = total_loss(
        tape.value(l_c).item(),
        &l_students,
        reduce * l_kl,
        reduce * l_hints,
        alpha,
        lambda,
    )?;
    let root = tape.weighted_sum(&terms)?;
    Ok(Objective {
        tape,
        root,
        breakdown,
        stats,
    })
}

/// Sets the model's input size from the dataset's sample shape.
pub fn resolve_input_dim(config: &mut TrainConfig, dataset: &Dataset) {
    config.model.input_dim = match config.model.backbone {
        Backbone::TinyMlp => dataset.sample_len(),
        Backbone::ResNet18 => dataset.sample_shape()[0],
    };
}

fn kmeans_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (epoch as u64).wrapping_add(0x5851_f42d_4c95_7f2d)
}

/// Owns the model, banks and optimizer state of one training run.
pub struct Trainer<'a> {
    config: TrainConfig,
    dataset: &'a Dataset,
    model: MultiExitModel,
    banks: BankSet,
    sgd: Sgd,
    global_step: usize,
    epochs_done: usize,
}

impl<'a> Trainer<'a> {
    /// Validates `config` (after resolving the input size) and builds the initial model.
    pub fn new(mut config: TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyInput("training dataset has no samples".into()));
        }
        resolve_input_dim(&mut config, dataset);
        config.validate()?;
        if dataset.len() < config.model.num_prototypes {
            return Err(Error::Config(format!(
                "{} samples cannot populate {} clusters",
                dataset.len(),
                config.model.num_prototypes
            )));
        }
        let (model, banks) = init_model(&config.model, config.seed)?;
        let sgd = Sgd::new(config.momentum, config.weight_decay);
        Ok(Self {
            config,
            dataset,
            model,
            banks,
            sgd,
            global_step: 0,
            epochs_done: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &MultiExitModel {
        &self.model
    }

    pub fn banks(&self) -> &BankSet {
        &self.banks
    }

    pub fn global_step(&self) -> usize {
        self.global_step
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.dataset.len().div_ceil(self.config.batch_size)
    }

    pub fn checkpoint(&self, normalization: Option<&Normalization>) -> Checkpoint {
        Checkpoint::capture(
            &self.config,
            &self.model,
            &self.banks,
            self.global_step,
            self.epochs_done,
            normalization,
        )
    }

    pub fn into_parts(self) -> (MultiExitModel, BankSet) {
        (self.model, self.banks)
    }

    /// Clusters teacher embeddings of the current model and overwrites every
    /// bank with its head's centroids under the resulting labels.
    pub fn assign(&mut self) -> Result<PseudoLabelTable> {
        let epoch = self.epochs_done + 1;
        let k = self.config.model.num_prototypes;
        let bank = extract_embeddings(
            &self.model,
            &self.banks,
            self.dataset,
            self.config.batch_size,
            epoch,
        )?;
        if !bank.heads.iter().all(Tensor::is_finite) {
            return Err(Error::Diverged {
                epoch,
                step: self.global_step,
                last_good: None,
            });
        }
        let km = spherical_kmeans(
            bank.teacher(),
            k,
            self.config.kmeans_iters,
            kmeans_seed(self.config.seed, epoch),
        )
        .map_err(|e| match e {
            Error::InsufficientPoints { points, clusters } => Error::Config(format!(
                "{points} samples cannot populate {clusters} clusters"
            )),
            other => other,
        })?;
        for (h, z) in bank.heads.iter().enumerate() {
            let centroids = head_centroids(z, &km.labels, k)?;
            self.banks.get_mut(h).reinitialize(centroids)?;
        }
        self.sgd.reset_banks();
        let table = PseudoLabelTable::new(epoch, km.labels, k)?;
        if table.is_collapsed() {
            log::warn!(
                "epoch {epoch}: largest cluster holds {} of {} samples (over {:.0}%), pseudo-labels may be collapsing",
                table.max_size(),
                table.len(),
                COLLAPSE_FRACTION * 100.0
            );
        }
        Ok(table)
    }

    /// One pass of SGD over shuffled batches with labels fixed by `table`.
    pub fn run_epoch(&mut self, table: &PseudoLabelTable) -> Result<MetricsRecord> {
        let started = Instant::now();
        let epoch = self.epochs_done + 1;
        if table.epoch != epoch || table.len() != self.dataset.len() {
            return Err(Error::InvalidArgument(format!(
                "pseudo-label table for epoch {} with {} rows does not match epoch {epoch} with {} samples",
                table.epoch,
                table.len(),
                self.dataset.len()
            )));
        }
        let spe = self.steps_per_epoch();
        let cfg = &self.config;
        let mut sums = [0.0f64; 5];
        let mut lr = 0.0;
        for batch in epoch_batches(self.dataset, cfg.batch_size, epoch, cfg.seed)? {
            let labels: Vec<usize> = batch.indices.iter().map(|&i| table.labels[i]).collect();
            self.banks
                .set_frozen(self.global_step < cfg.frozen_proto_iters);
            lr = lr_at(self.global_step, spe, cfg);
            let obj = match objective(
                &self.model,
                &self.banks,
                &batch.inputs,
                &labels,
                cfg,
                Mode::Train,
            ) {
                Ok(o) if o.tape.value(o.root).is_finite() => o,
                Ok(_) | Err(Error::Numeric(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        step: self.global_step,
                        last_good: None,
                    })
                }
                Err(e) => return Err(e),
            };
            let grads = obj.tape.backward(obj.root)?;
            self.sgd.step(&mut self.model, &mut self.banks, &grads, lr);
            self.model.apply_stat_updates(obj.stats);
            let w = batch.indices.len() as f64;
            let b = &obj.breakdown;
            for (acc, v) in
                sums.iter_mut()
                    .zip([b.total, b.l_teacher, b.student_sum(), b.l_kl, b.l_hints])
            {
                *acc += w * v;
            }
            self.global_step += 1;
        }
        self.epochs_done = epoch;
        let n = self.dataset.len() as f64;
        let wall = started.elapsed().as_secs_f64();
        Ok(MetricsRecord {
            epoch,
            step: self.global_step,
            lr,
            loss_total: sums[0] / n,
            loss_teacher_ce: sums[1] / n,
            loss_student_ce_sum: sums[2] / n,
            loss_kl: sums[3] / n,
            loss_hints: sums[4] / n,
            cluster_min: table.min_size(),
            cluster_max: table.max_size(),
            cluster_entropy: table.size_entropy(),
            seconds: if cfg.record_wall_time { wall } else { 0.0 },
            wall_seconds: wall,
        })
    }
}

/// Result of [`train`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
    /// Pseudo-labels used in the last epoch.
    pub last_table: Option<PseudoLabelTable>,
}

/// Runs every epoch of assignment and optimization.
///
/// With a run directory, the resolved configuration is written before the
/// first step, metrics are appended and a checkpoint is saved after every
/// epoch, and `final.ckpt` is written at the end.
pub fn train(
    config: TrainConfig,
    dataset: &Dataset,
    run: Option<&RunDirectory>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, dataset)?;
    if let Some(run) = run {
        run.begin(trainer.config())?;
    }
    let mut metrics = Vec::with_capacity(trainer.config().epochs);
    let mut last_table = None;
    let mut last_good: Option<PathBuf> = None;
    for epoch in 1..=trainer.config().epochs {
        let with_last_good = |e: Error| match e {
            Error::Diverged { epoch, step, .. } => Error::Diverged {
                epoch,
                step,
                last_good: last_good.clone(),
            },
            other => other,
        };
        let table = trainer.assign().map_err(with_last_good)?;
        if let (Some(run), true) = (run, trainer.config().dump_assignments) {
            run.write_assignments(&table)?;
        }
        let record = trainer.run_epoch(&table).map_err(with_last_good)?;
        log::info!(
            "epoch {epoch}/{}: loss {:.5} (teacher ce {:.5}), clusters {}..{}",
            trainer.config().epochs,
            record.loss_total,
            record.loss_teacher_ce,
            record.cluster_min,
            record.cluster_max
        );
        if let Some(run) = run {
            run.append_metrics(&record)?;
            let ck = trainer.checkpoint(dataset.normalization());
            last_good = Some(run.save_epoch_checkpoint(&ck)?);
        }
        metrics.push(record);
        last_table = Some(table);
    }
    let checkpoint = trainer.checkpoint(dataset.normalization());
    if let Some(run) = run {
        checkpoint.save(&run.final_checkpoint_path())?;
    }
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        last_table,
    })
}
