//! Training configuration and its flat `key = value` file format.
//!
//! Every field of [`TrainConfig`] and its nested [`ModelConfig`] is one
//! top-level key. Lines starting with `#` are comments. Unknown or repeated
//! keys are errors.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::HintsDistance;
use crate::model::ModelConfig;

/// How KL and hint terms combine across student exits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillReduction {
    Sum,
    Mean,
}

impl DistillReduction {
    pub fn name(self) -> &'static str {
        match self {
            DistillReduction::Sum => "sum",
            DistillReduction::Mean => "mean",
        }
    }
}

impl FromStr for DistillReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(DistillReduction::Sum),
            "mean" => Ok(DistillReduction::Mean),
            other => Err(Error::Config(format!(
                "unknown distill reduction '{other}' (expected sum or mean)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: usize,
    pub warmup_start_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global optimizer steps during which prototype banks receive no updates.
    pub frozen_proto_iters: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub seed: u64,
    /// When false only the teacher cross-entropy is optimized.
    pub distill: bool,
    pub distill_reduction: DistillReduction,
    pub hints_distance: HintsDistance,
    pub kmeans_iters: usize,
    /// Write elapsed seconds into the metrics file instead of 0.
    pub record_wall_time: bool,
    pub dump_assignments: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 6e-2,
            final_lr: 3e-4,
            warmup_epochs: 5,
            warmup_start_lr: 1e-6,
            momentum: 0.9,
            weight_decay: 1e-6,
            epochs: 150,
            batch_size: 256,
            frozen_proto_iters: 5000,
            alpha: 0.9,
            lambda: 1e-5,
            seed: 0,
            distill: true,
            distill_reduction: DistillReduction::Sum,
            hints_distance: HintsDistance::Squared,
            kmeans_iters: 10,
            record_wall_time: false,
            dump_assignments: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Tiny-mlp setup for Gaussian blobs: 6 prototypes, 30 epochs, other values at their defaults.
    pub fn desk_scale(input_dim: usize) -> Self {
        Self {
            epochs: 30,
            model: ModelConfig {
                num_prototypes: 6,
                ..ModelConfig::tiny_mlp(input_dim)
            },
            ..Self::default()
        }
    }

    /// Plain clustering baseline: teacher cross-entropy only.
    pub fn without_distillation(mut self) -> Self {
        self.distill = false;
        self.alpha = 0.0;
        self.lambda = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return fail(format!(
                "warmup_epochs ({}) must be < epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("final_lr", self.final_lr),
            ("warmup_start_lr", self.warmup_start_lr),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return fail(format!("{name} must be > 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must be in [0, 1], got {}", self.alpha));
        }
        if !(self.lambda >= 0.0) {
            return fail(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        self.model.validate()
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
        }
        let m = &mut self.model;
        match key {
            "base_lr" => self.base_lr = parse(key, value)?,
            "final_lr" => self.final_lr = parse(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "warmup_start_lr" => self.warmup_start_lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "frozen_proto_iters" => self.frozen_proto_iters = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "distill" => self.distill = parse(key, value)?,
            "distill_reduction" => self.distill_reduction = value.parse()?,
            "hints_distance" => self.hints_distance = value.parse()?,
            "kmeans_iters" => self.kmeans_iters = parse(key, value)?,
            "record_wall_time" => self.record_wall_time = parse(key, value)?,
            "dump_assignments" => self.dump_assignments = parse(key, value)?,
            "backbone" => m.backbone = value.parse()?,
            "num_student_exits" => m.num_student_exits = parse(key, value)?,
            "feature_dim" => m.feature_dim = parse(key, value)?,
            "hidden_dim" => m.hidden_dim = parse(key, value)?,
            "num_prototypes" => m.num_prototypes = parse(key, value)?,
            "temperature" => m.temperature = parse(key, value)?,
            "backbone_width" => m.backbone_width = parse(key, value)?,
            "input_dim" => m.input_dim = parse(key, value)?,
            "head_norm" => m.head_norm = value.parse()?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    ///
    /// Choosing a backbone without naming `num_student_exits` or `head_norm`
    /// also selects that backbone's defaults for them.
    pub fn apply_kv_str(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key '{key}'",
                    lineno + 1
                )));
            }
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip_prefix(e))))?;
        }
        if seen.contains("backbone") {
            if !seen.contains("num_student_exits") {
                self.model.num_student_exits = self.model.backbone.default_student_exits();
            }
            if !seen.contains("head_norm") {
                self.model.head_norm = self.model.backbone.default_head_norm();
            }
        }
        Ok(())
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv_str(text)?;
        Ok(cfg)
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn to_kv_string(&self) -> String {
        let m = &self.model;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("base_lr", self.base_lr.to_string());
        put("final_lr", self.final_lr.to_string());
        put("warmup_epochs", self.warmup_epochs.to_string());
        put("warmup_start_lr", self.warmup_start_lr.to_string());
        put("momentum", self.momentum.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("frozen_proto_iters", self.frozen_proto_iters.to_string());
        put("alpha", self.alpha.to_string());
        put("lambda", self.lambda.to_string());
        put("seed", self.seed.to_string());
        put("distill", self.distill.to_string());
        put("distill_reduction", self.distill_reduction.name().into());
        put("hints_distance", self.hints_distance.name().into());
        put("kmeans_iters", self.kmeans_iters.to_string());
        put("record_wall_time", self.record_wall_time.to_string());
        put("dump_assignments", self.dump_assignments.to_string());
        put("backbone", m.backbone.name().into());
        put("num_student_exits", m.num_student_exits.to_string());
        put("feature_dim", m.feature_dim.to_string());
        put("hidden_dim", m.hidden_dim.to_string());
        put("num_prototypes", m.num_prototypes.to_string());
        put("temperature", m.temperature.to_string());
        put("backbone_width", m.backbone_width.to_string());
        put("input_dim", m.input_dim.to_string());
        put("head_norm", m.head_norm.name().into());
        out
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// Settings of the frozen-encoder linear classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub feature_source: FeatureSource,
    /// Output size of the classifier; taken from the training split when unset.
    pub num_classes: Option<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 200,
            batch_size: 256,
            seed: 0,
            feature_source: FeatureSource::PooledTeacher,
            num_classes: None,
        }
    }
}

/// Which teacher representation feeds the linear probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    PooledTeacher,
    ProjectedTeacher,
}

impl FeatureSource {
    pub fn name(self) -> &'static str {
        match self {
            FeatureSource::PooledTeacher => "pooled_teacher",
            FeatureSource::ProjectedTeacher => "projected_teacher",
        }
    }
}

impl FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled_teacher" => Ok(FeatureSource::PooledTeacher),
            "projected_teacher" => Ok(FeatureSource::ProjectedTeacher),
            other => Err(Error::Config(format!(
                "unknown feature source '{other}' (expected pooled_teacher or projected_teacher)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Backbone, HeadNorm};

    #[test]
    fn defaults_follow_reference_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.base_lr, 6e-2);
        assert_eq!(c.final_lr, 3e-4);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.weight_decay, 1e-6);
        assert_eq!(c.epochs, 150);
        assert_eq!(c.batch_size, 256);
        assert_eq!(c.warmup_epochs, 5);
        assert_eq!(c.warmup_start_lr, 1e-6);
        assert_eq!(c.frozen_proto_iters, 5000);
        assert_eq!((c.alpha, c.lambda), (0.9, 1e-5));
        assert_eq!(c.model.num_prototypes, 60);
        assert_eq!(c.model.temperature, 0.5);
        assert_eq!(c.model.feature_dim, 128);
        assert_eq!(c.model.hidden_dim, 1024);
        let p = ProbeConfig::default();
        assert_eq!((p.lr, p.epochs), (1e-3, 200));
        c.validate().unwrap();
    }

    #[test]
    fn kv_round_trip() {
        let mut c = TrainConfig::desk_scale(16);
        c.seed = 99;
        c.lambda = 1.25e-7;
        let text = c.to_kv_string();
        assert_eq!(TrainConfig::from_kv_str(&text).unwrap(), c);
    }

    #[test]
    fn backbone_selects_its_defaults() {
        let c = TrainConfig::from_kv_str("backbone = tiny-mlp\n").unwrap();
        assert_eq!(c.model.num_student_exits, 1);
        assert_eq!(c.model.head_norm, HeadNorm::None);
        let c = TrainConfig::from_kv_str("backbone = tiny-mlp\nnum_student_exits = 2").unwrap();
        assert_eq!(c.model.num_student_exits, 2);
        assert_eq!(c.model.backbone, Backbone::TinyMlp);
    }

    #[test]
    fn unknown_and_duplicate_keys_fail() {
        let err = TrainConfig::from_kv_str("# comment\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("line 2") && err.to_string().contains("learning_rate"));
        assert!(TrainConfig::from_kv_str("seed = 1\nseed = 2\n").is_err());
        assert!(TrainConfig::from_kv_str("seed 1\n").is_err());
        assert!(TrainConfig::from_kv_str("alpha = lots\n").is_err());
    }

    #[test]
    fn validation() {
        let mut c = TrainConfig::default();
        c.warmup_epochs = 150;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.alpha = 1.5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.epochs = 0;
        c.validate().unwrap();
    }

    #[test]
    fn no_distill_zeroes_weights() {
        let c = TrainConfig::default().without_distillation();
        assert!(!c.distill);
        assert_eq!((c.alpha, c.lambda), (0.0, 0.0));
    }
}
