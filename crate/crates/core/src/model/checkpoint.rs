//! Checkpoint directories.
//!
//! A checkpoint is a directory holding `meta.json` and one `branch_{k}.bin`
//! blob per branch. A blob is little-endian:
//!
//! ```text
//! magic   4 bytes  "RCMB"
//! version u32      1
//! count   u32      number of tensors
//! count times:
//!   key_len u32, key (UTF-8, key_len bytes)
//!   ndim    u32, dims (ndim x u64)
//!   data    f32 x prod(dims), row-major
//! ```
//!
//! Keys are the dotted tensor names of the branch, e.g.
//! `backbone.stage2.attn.fc1.weight`, in the model's fixed order.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Module, Real};

use super::{ModelConfig, MultiExpertModel};

const MAGIC: &[u8; 4] = b"RCMB";
const VERSION: u32 = 1;

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub class_counts: Vec<u64>,
    pub config_hash: String,
    pub epoch: usize,
    pub model: ModelConfig,
}

pub fn branch_blob_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("branch_{k}.bin"))
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint blob",
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn write_blob<T: Real>(path: &Path, tensors: &[(String, &ArrayD<T>)]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (key, t) in tensors {
        w.write_all(&(key.len() as u32).to_le_bytes())?;
        w.write_all(key.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.iter() {
            w.write_all(&(Real::to_f64(*v) as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_blob(path: &Path) -> Result<Vec<(String, ArrayD<f32>)>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let bad = |m: &str| format_err(path, m);
    let mut magic = [0; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r).map_err(|_| bad("truncated header"))?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r).map_err(|_| bad("truncated header"))?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let trunc = |_| bad("truncated tensor record");
        let key_len = read_u32(&mut r).map_err(trunc)? as usize;
        let mut key = vec![0; key_len];
        r.read_exact(&mut key).map_err(trunc)?;
        let key = String::from_utf8(key).map_err(|_| bad("key is not UTF-8"))?;
        let ndim = read_u32(&mut r).map_err(trunc)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0; 8];
            r.read_exact(&mut b).map_err(trunc)?;
            dims.push(u64::from_le_bytes(b) as usize);
        }
        let len: usize = dims.iter().product();
        let mut raw = vec![0u8; len * 4];
        r.read_exact(&mut raw).map_err(trunc)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((key, ArrayD::from_shape_vec(IxDyn(&dims), data).expect("length matches dims")));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

/// Writes `meta.json` and one blob per branch into `dir`.
pub fn save_checkpoint<T: Real>(model: &MultiExpertModel<T>, meta: &CheckpointMeta, dir: &Path) -> Result<()> {
    if meta.k != model.num_branches() || meta.c != model.num_classes() || meta.d != model.embedding_dim() {
        return Err(Error::invalid("checkpoint metadata does not describe the model"));
    }
    fs::create_dir_all(dir)?;
    for (k, b) in model.branches.iter().enumerate() {
        let mut ts = Vec::new();
        b.tensors("", &mut ts);
        write_blob(&branch_blob_path(dir, k), &ts)?;
    }
    let json = serde_json::to_string_pretty(meta)?;
    fs::write(dir.join("meta.json"), json + "\n")?;
    Ok(())
}

pub fn load_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "checkpoint metadata",
        path,
        message: e.to_string(),
    })
}

/// Rebuilds the model described by `meta.json` and fills in every tensor.
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<(MultiExpertModel<T>, CheckpointMeta)> {
    let meta = load_meta(dir)?;
    let mut model = MultiExpertModel::<T>::new(&meta.model, 0)?;
    if meta.k != model.num_branches() || meta.c != model.num_classes() || meta.d != model.embedding_dim() {
        return Err(Error::Format {
            what: "checkpoint metadata",
            path: dir.join("meta.json"),
            message: "K/C/D disagree with the model config".into(),
        });
    }
    for (k, b) in model.branches.iter_mut().enumerate() {
        let path = branch_blob_path(dir, k);
        let stored = read_blob(&path)?;
        let mut slots = Vec::new();
        b.tensors_mut("", &mut slots);
        if stored.len() != slots.len() {
            return Err(format_err(
                &path,
                format!("{} tensors stored, model has {}", stored.len(), slots.len()),
            ));
        }
        for ((key, value), (name, slot)) in stored.into_iter().zip(slots) {
            if key != name || value.shape() != slot.shape() {
                return Err(format_err(
                    &path,
                    format!("tensor {key} {:?} where {name} {:?} was expected", value.shape(), slot.shape()),
                ));
            }
            slot.zip_mut_with(&value, |s, &v| *s = <T as Real>::from_f64(v as f64));
        }
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use crate::model::{BackboneId, SmallCnnConfig};
    use ndarray::Array4;

    fn config() -> ModelConfig {
        ModelConfig {
            branches: 2,
            num_classes: 4,
            head_scale: 16.0,
            backbone: BackboneId::SmallCnn,
            small_cnn: SmallCnnConfig {
                image_size: 8,
                in_channels: 1,
                widths: vec![3, 5],
                attention: vec![AttentionKind::RcAttnPerQuadrant, AttentionKind::Cbam],
                reduction: 2,
            },
        }
    }

    fn meta(model: &MultiExpertModel<f32>, cfg: &ModelConfig) -> CheckpointMeta {
        CheckpointMeta {
            k: model.num_branches(),
            c: model.num_classes(),
            d: model.embedding_dim(),
            class_counts: vec![5, 4, 3, 1],
            config_hash: "abc".into(),
            epoch: 3,
            model: cfg.clone(),
        }
    }

    #[test]
    fn round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config();
        let mut m = MultiExpertModel::<f32>::new(&cfg, 11).unwrap();
        let x = Array4::from_shape_fn((3, 8, 8, 1), |(b, i, j, _)| ((b * 7 + i * 3 + j) % 5) as f32 - 2.0);
        m.forward(&x, true).unwrap();
        save_checkpoint(&m, &meta(&m, &cfg), dir.path()).unwrap();
        let (mut back, md) = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(md.epoch, 3);
        assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("meta.json")).unwrap()).unwrap();
        for key in ["K", "C", "D", "class_counts", "config_hash", "epoch"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn rejects_corrupt_blob() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config();
        let m = MultiExpertModel::<f32>::new(&cfg, 1).unwrap();
        save_checkpoint(&m, &meta(&m, &cfg), dir.path()).unwrap();
        let p = branch_blob_path(dir.path(), 1);
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, &bytes).unwrap();
        let err = load_checkpoint::<f32>(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        fs::write(&p, b"XXXX").unwrap();
        assert!(load_checkpoint::<f32>(dir.path()).is_err());
    }

    #[test]
    fn blob_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let t = ArrayD::from_shape_vec(IxDyn(&[2, 1]), vec![1.5f32, -2.0]).unwrap();
        write_blob(&p, &[("a.b".to_string(), &t)]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"RCMB");
        assert_eq!(bytes.len(), 4 + 4 + 4 + 4 + 3 + 4 + 16 + 8);
        assert_eq!(read_blob(&p).unwrap(), vec![("a.b".to_string(), t)]);
    }
}
