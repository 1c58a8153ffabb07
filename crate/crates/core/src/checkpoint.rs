//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "DCSDCKPT"
//! version    u32
//! header_len u64
//! header     header_len bytes of UTF-8 JSON (configuration, counters,
//!            normalization statistics, tensor table)
//! payload    f64 values of every tensor in table order
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a save/load cycle is bit-exact.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::model::{init_model, BankSet, MultiExitModel, NamedTensor, PrototypeBank};
use crate::rundir::write_atomic;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DCSDCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum TensorKind {
    Param,
    Buffer,
    Bank,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    seed: u64,
    global_step: usize,
    epoch: usize,
    normalization: Option<Normalization>,
    tensors: Vec<TableEntry>,
}

/// Everything needed to rebuild a trained model and its banks.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub seed: u64,
    pub global_step: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub normalization: Option<Normalization>,
    pub params: Vec<NamedTensor>,
    pub buffers: Vec<NamedTensor>,
    /// One matrix per head, students first.
    pub banks: Vec<Tensor>,
}

impl Checkpoint {
    pub fn capture(
        config: &TrainConfig,
        model: &MultiExitModel,
        banks: &BankSet,
        global_step: usize,
        epoch: usize,
        normalization: Option<&Normalization>,
    ) -> Self {
        Self {
            config: config.clone(),
            seed: config.seed,
            global_step,
            epoch,
            normalization: normalization.cloned(),
            params: model.params().to_vec(),
            buffers: model.buffers().to_vec(),
            banks: banks.iter().map(|b| b.prototypes().clone()).collect(),
        }
    }

    /// Rebuilds the model and banks; banks come back unfrozen.
    pub fn restore(&self) -> Result<(MultiExitModel, BankSet)> {
        let (mut model, _) = init_model(&self.config.model, self.seed)?;
        model.load_state(self.params.clone(), self.buffers.clone())?;
        if self.banks.len() != self.config.model.num_heads() {
            return Err(Error::Shape(format!(
                "{} banks stored for {} heads",
                self.banks.len(),
                self.config.model.num_heads()
            )));
        }
        let banks = self
            .banks
            .iter()
            .map(|t| PrototypeBank::from_raw(t.clone(), false))
            .collect();
        Ok((model, BankSet::new(banks)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let entry = |kind, name: &str, t: &Tensor| TableEntry {
            name: name.to_string(),
            kind,
            shape: t.shape().to_vec(),
        };
        tensors.extend(
            self.params
                .iter()
                .map(|p| entry(TensorKind::Param, &p.name, &p.tensor)),
        );
        tensors.extend(
            self.buffers
                .iter()
                .map(|p| entry(TensorKind::Buffer, &p.name, &p.tensor)),
        );
        tensors.extend(
            self.banks
                .iter()
                .enumerate()
                .map(|(h, t)| entry(TensorKind::Bank, &format!("bank{h}"), t)),
        );
        let header = Header {
            config: self.config.clone(),
            seed: self.seed,
            global_step: self.global_step,
            epoch: self.epoch,
            normalization: self.normalization.clone(),
            tensors,
        };
        let json =
            serde_json::to_vec(&header).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let values = self
            .params
            .iter()
            .chain(&self.buffers)
            .map(|p| &p.tensor)
            .chain(&self.banks);
        let payload: usize = values.clone().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * payload);
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION)?;
        out.write_u64::<LittleEndian>(json.len() as u64)?;
        out.extend_from_slice(&json);
        for t in values {
            for &v in t.data() {
                out.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(out)
    }

    /// Parses a container; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic)
            .map_err(|_| bad("file too short".into()))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic bytes)".into()));
        }
        let version = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| bad("truncated header".into()))?;
        if version != VERSION {
            return Err(bad(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let len = cur
            .read_u64::<LittleEndian>()
            .map_err(|_| bad("truncated header".into()))? as usize;
        let start = cur.position() as usize;
        let json = bytes
            .get(start..start.saturating_add(len))
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| bad(format!("bad header: {e}")))?;
        cur.set_position((start + len) as u64);

        let mut ck = Checkpoint {
            config: header.config,
            seed: header.seed,
            global_step: header.global_step,
            epoch: header.epoch,
            normalization: header.normalization,
            params: Vec::new(),
            buffers: Vec::new(),
            banks: Vec::new(),
        };
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut data = vec![0.0; n];
            cur.read_f64_into::<LittleEndian>(&mut data)
                .map_err(|_| bad(format!("payload ends inside tensor {}", entry.name)))?;
            let tensor = Tensor::from_vec(&entry.shape, data)?;
            match entry.kind {
                TensorKind::Param => ck.params.push(NamedTensor {
                    name: entry.name,
                    tensor,
                }),
                TensorKind::Buffer => ck.buffers.push(NamedTensor {
                    name: entry.name,
                    tensor,
                }),
                TensorKind::Bank => ck.banks.push(tensor),
            }
        }
        if (cur.position() as usize) != bytes.len() {
            return Err(bad(format!(
                "{} trailing bytes after payload",
                bytes.len() - cur.position() as usize
            )));
        }
        Ok(ck)
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;

    fn sample() -> (TrainConfig, MultiExitModel, BankSet) {
        let mut c = TrainConfig::desk_scale(5);
        c.model.hidden_dim = 12;
        c.model.feature_dim = 4;
        c.model.backbone_width = 6;
        c.seed = 11;
        let (m, b) = init_model(&c.model, c.seed).unwrap();
        (c, m, b)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (c, m, b) = sample();
        let norm = Normalization {
            mean: vec![0.1, 0.2],
            std: vec![1.0 / 3.0, 7.0],
        };
        let ck = Checkpoint::capture(&c, &m, &b, 42, 3, Some(&norm));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
        let (m2, b2) = back.restore().unwrap();
        assert_eq!(m2.checksum(), m.checksum());
        for (x, y) in b2.iter().zip(b.iter()) {
            assert_eq!(x.prototypes(), y.prototypes());
        }
    }

    #[test]
    fn restored_model_computes_identical_outputs() {
        let (c, m, b) = sample();
        let ck = Checkpoint::capture(&c, &m, &b, 0, 0, None);
        let (m2, b2) = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), Path::new("mem"))
            .unwrap()
            .restore()
            .unwrap();
        let ds = crate::data::make_synthetic_blobs(3, 2, 5, 4.0, 0).unwrap();
        let batch = ds.batch(&[0, 1, 2, 3]);
        assert_eq!(
            m.forward(&b, &batch, Mode::Eval).unwrap().0,
            m2.forward(&b2, &batch, Mode::Eval).unwrap().0
        );
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let (c, m, b) = sample();
        let bytes = Checkpoint::capture(&c, &m, &b, 0, 0, None)
            .to_bytes()
            .unwrap();
        let p = Path::new("bad.ckpt");
        assert!(Checkpoint::from_bytes(b"short", p).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong, p)
            .unwrap_err()
            .to_string()
            .contains("bad.ckpt"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, p).is_err());
        let mut version = bytes;
        version[8] = 9;
        assert!(Checkpoint::from_bytes(&version, p)
            .unwrap_err()
            .to_string()
            .contains("version"));
        assert!(matches!(
            Checkpoint::load(Path::new("/nonexistent/x.ckpt")),
            Err(Error::Io { .. })
        ));
    }
}
