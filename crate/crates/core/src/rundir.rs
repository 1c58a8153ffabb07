//! On-disk layout of one training run.
//!
//! ```text
//! <root>/config.cfg            resolved configuration, written before training
//! <root>/run_meta.json         configuration plus every fixed design choice
//! <root>/metrics.csv           one row per epoch, append-only
//! <root>/timings.csv           measured wall time per epoch
//! <root>/checkpoints/          epoch_NNN.ckpt (last two kept) and final.ckpt
//! <root>/assignments/          epoch_NNN.csv when assignment dumps are on
//! <root>/reports/              probe and diagnostics reports
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::clustering::PseudoLabelTable;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::trainer::MetricsRecord;

pub const CHECKPOINTS_KEPT: usize = 2;

/// Writes `bytes` to a temporary sibling file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[derive(Clone, Debug)]
pub struct RunDirectory {
    root: PathBuf,
}

impl RunDirectory {
    /// Creates the directory tree; existing directories are reused.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for dir in [root.clone(), root.join("checkpoints"), root.join("reports")] {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(Self { root })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.cfg")
    }

    pub fn meta_path(&self) -> PathBuf {
        self.root.join("run_meta.json")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn timings_path(&self) -> PathBuf {
        self.root.join("timings.csv")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.checkpoints_dir()
            .join(format!("epoch_{epoch:03}.ckpt"))
    }

    pub fn final_checkpoint_path(&self) -> PathBuf {
        self.checkpoints_dir().join("final.ckpt")
    }

    pub fn assignments_dir(&self) -> PathBuf {
        self.root.join("assignments")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    /// Writes the resolved configuration and run metadata, and starts fresh
    /// metrics and timing files.
    pub fn begin(&self, config: &TrainConfig) -> Result<()> {
        write_atomic(&self.config_path(), config.to_kv_string().as_bytes())?;
        let meta = serde_json::to_string_pretty(&run_metadata(config))
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        write_atomic(&self.meta_path(), meta.as_bytes())?;
        write_atomic(
            &self.metrics_path(),
            format!("{}\n", MetricsRecord::csv_header()).as_bytes(),
        )?;
        write_atomic(&self.timings_path(), b"epoch,seconds\n")
    }

    pub fn append_metrics(&self, record: &MetricsRecord) -> Result<()> {
        append_line(&self.metrics_path(), &record.to_csv_row())?;
        append_line(
            &self.timings_path(),
            &format!("{},{}", record.epoch, record.wall_seconds),
        )
    }

    pub fn write_assignments(&self, table: &PseudoLabelTable) -> Result<PathBuf> {
        let dir = self.assignments_dir();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("epoch_{:03}.csv", table.epoch));
        write_atomic(&path, table.to_csv().as_bytes())?;
        Ok(path)
    }

    /// Saves an epoch checkpoint and deletes all but the newest few.
    pub fn save_epoch_checkpoint(&self, checkpoint: &Checkpoint) -> Result<PathBuf> {
        let path = self.checkpoint_path(checkpoint.epoch);
        checkpoint.save(&path)?;
        if checkpoint.epoch > CHECKPOINTS_KEPT {
            let old = self.checkpoint_path(checkpoint.epoch - CHECKPOINTS_KEPT);
            if old.exists() {
                fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
            }
        }
        Ok(path)
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}")
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}

/// Resolved configuration together with the fixed design choices of this implementation.
pub fn run_metadata(config: &TrainConfig) -> serde_json::Value {
    serde_json::json!({
        "package_version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "choices": {
            "assignment_features": "teacher_embeddings",
            "assignment_pass": "full_pass_inference_mode_each_epoch",
            "kmeans_init": "seeded_distinct_rows",
            "kmeans_restarts": 0,
            "kmeans_iters": config.kmeans_iters,
            "empty_cluster_repair": "farthest_member_of_largest_cluster",
            "prototype_banks": "one_per_head_reinitialized_from_centroids",
            "distill_reduction": config.distill_reduction.name(),
            "hints_distance": config.hints_distance.name(),
            "teacher_detached_in_kl_and_hints": true,
            "loss_batch_reduction": "mean",
            "weight_decay_scope": "all_parameters_except_prototype_banks",
            "frozen_prototypes": "all_banks_by_global_step",
            "lr_schedule": "linear_warmup_then_cosine",
            "head_norm": config.model.head_norm.name(),
            "checkpoint_retention": "last_2_epochs_plus_final",
            "probe_features_default": "pooled_teacher",
            "metrics_seconds_column": if config.record_wall_time { "wall_time" } else { "zero" },
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(write_atomic(&dir.path().join("missing/x"), b"").is_err());
    }

    #[test]
    fn begin_writes_snapshot_and_headers() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDirectory::create(dir.path().join("run")).unwrap();
        let c = TrainConfig::desk_scale(16);
        run.begin(&c).unwrap();
        let text = fs::read_to_string(run.config_path()).unwrap();
        assert_eq!(TrainConfig::from_kv_str(&text).unwrap(), c);
        let meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(run.meta_path()).unwrap()).unwrap();
        assert_eq!(meta["choices"]["distill_reduction"], "sum");
        assert_eq!(
            fs::read_to_string(run.metrics_path()).unwrap().trim(),
            MetricsRecord::csv_header()
        );
        assert!(run.reports_dir().is_dir() && run.checkpoints_dir().is_dir());
    }
}
