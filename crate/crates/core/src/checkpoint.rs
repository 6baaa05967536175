//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "L2SA" | version u16 | element width u8 (4|8)
//! graph text length u32 | graph text (JSON: layer graph + metadata)
//! tensor count u32
//! per tensor: name length u32 | name bytes | rank u8 | extents u64 each
//!             | raw element bytes
//! ```
//!
//! Raw element bytes are the exact in-memory values, so save → load is
//! bit-identical. The element width in the header must match the width the
//! loader was asked for.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::LayerGraph;
use crate::model::Model;
use crate::tensor::{ElemWidth, Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"L2SA";
pub const VERSION: u16 = 1;

/// Training provenance stored beside the graph.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub seed: u64,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    graph: LayerGraph,
    meta: CheckpointMeta,
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    graph: &LayerGraph,
    params: &BTreeMap<String, Tensor<T>>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let doc = serde_json::to_string(&GraphDoc { graph: graph.clone(), meta: meta.clone() })
        .map_err(|e| Error::Checkpoint(format!("graph serialization failed: {e}")))?;

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::WIDTH.bytes() as u8);
    out.extend_from_slice(&(doc.len() as u32).to_le_bytes());
    out.extend_from_slice(doc.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            v.write_le(&mut out);
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_header<'a>(cur: &mut Cursor<'a>) -> Result<u8> {
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:02x?}, not a checkpoint file")));
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, this build reads {VERSION}"
        )));
    }
    cur.u8()
}

/// Element width recorded in a checkpoint header, without reading the body.
pub fn checkpoint_width(path: &Path) -> Result<ElemWidth> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    match read_header(&mut cur)? {
        4 => Ok(ElemWidth::F32),
        8 => Ok(ElemWidth::F64),
        other => Err(Error::Checkpoint(format!("unknown element width {other}"))),
    }
}

pub fn load_checkpoint<T: Scalar>(
    path: &Path,
) -> Result<(LayerGraph, BTreeMap<String, Tensor<T>>, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let width = read_header(&mut cur)?;
    if width as usize != T::WIDTH.bytes() {
        return Err(Error::Checkpoint(format!(
            "element width mismatch: file holds {width}-byte values, loader wants {}",
            T::WIDTH.bytes()
        )));
    }

    let doc_len = cur.u32()? as usize;
    let doc: GraphDoc = serde_json::from_slice(cur.take(doc_len)?)
        .map_err(|e| Error::Checkpoint(format!("graph description unreadable: {e}")))?;

    let count = cur.u32()? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let elem = T::WIDTH.bytes();
        let raw = cur.take(n * elem)?;
        let data: Vec<T> = raw.chunks_exact(elem).map(T::read_le).collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        params.insert(name, tensor);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - cur.pos
        )));
    }
    Ok((doc.graph, params, doc.meta))
}

impl<T: Scalar> Model<T> {
    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        save_checkpoint(path, &self.graph, &self.params, meta)
    }

    /// Load and validate against the stored graph.
    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (graph, params, meta) = load_checkpoint::<T>(path)?;
        Ok((Model::from_parts(graph, params)?, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_l2sa_shaped, BackboneShape};

    fn small_model(seed: u64) -> Model<f64> {
        let shape = BackboneShape {
            channels: [4, 6, 8],
            kernels: [5, 3, 3],
            pools: [4, 2, 2],
            head_width: 16,
        };
        let graph = build_l2sa_shaped((3, 32, 32), 3, &[5, 3, 3], true, &shape).unwrap();
        Model::init(graph, seed).unwrap()
    }

    fn meta() -> CheckpointMeta {
        let mut metrics = BTreeMap::new();
        metrics.insert("val_accuracy".into(), 0.9657);
        metrics.insert("val_loss".into(), 0.123456789012345678);
        CheckpointMeta { epoch: 17, seed: 42, metrics }
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.l2sa");
        let model = small_model(9);
        model.save(&path, &meta()).unwrap();
        let (loaded, m) = Model::<f64>::load(&path).unwrap();
        assert_eq!(m, meta());
        assert_eq!(loaded.graph, model.graph);
        for (name, t) in &model.params {
            let l = &loaded.params[name];
            assert_eq!(t.shape(), l.shape(), "{name}");
            for (a, b) in t.data().iter().zip(l.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name} not bit-identical");
            }
        }
    }

    #[test]
    fn f32_roundtrip_and_width_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model32.l2sa");
        let shape = BackboneShape {
            channels: [4, 6, 8],
            kernels: [5, 3, 3],
            pools: [4, 2, 2],
            head_width: 16,
        };
        let graph = build_l2sa_shaped((3, 32, 32), 3, &[5, 3, 3], false, &shape).unwrap();
        let model = Model::<f32>::init(graph, 3).unwrap();
        model.save(&path, &CheckpointMeta::default()).unwrap();

        assert_eq!(checkpoint_width(&path).unwrap(), ElemWidth::F32);
        let (loaded, _) = Model::<f32>::load(&path).unwrap();
        for (name, t) in &model.params {
            for (a, b) in t.data().iter().zip(loaded.params[name].data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
        }
        let err = Model::<f64>::load(&path).unwrap_err();
        assert!(err.to_string().contains("width mismatch"), "{err}");
    }

    #[test]
    fn corrupt_magic_and_truncation_are_structured_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.l2sa");
        small_model(1).save(&path, &CheckpointMeta::default()).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = Model::<f64>::load(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        bytes[0] = b'L';
        bytes.truncate(bytes.len() / 2);
        std::fs::write(&path, &bytes).unwrap();
        let err = Model::<f64>::load(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.l2sa");
        small_model(1).save(&path, &CheckpointMeta::default()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        let err = Model::<f64>::load(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn loaded_model_reproduces_outputs_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.l2sa");
        let model = small_model(5);
        let x = Tensor::from_fn(&[2, 3, 32, 32], |i| ((i * 29 % 97) as f64 - 48.0) / 48.0);
        let before = model.logits(&x).unwrap();
        model.save(&path, &CheckpointMeta::default()).unwrap();
        let (loaded, _) = Model::<f64>::load(&path).unwrap();
        let after = loaded.logits(&x).unwrap();
        for (a, b) in before.data().iter().zip(after.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = Model::<f64>::load(Path::new("/nonexistent/model.l2sa")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }
}
