//! Named parameter storage, gradient buffers and the flat tensor archive.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Mat;
use super::EncoderError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Adapter,
    LayerNorm,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    pub group: ParamGroup,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Mat, group: ParamGroup) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate {name}");
        self.params.push(Param {
            name,
            value,
            group,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Copies all values from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        assert_eq!(self.params.len(), other.params.len());
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            debug_assert_eq!(a.name, b.name);
            a.value.data.copy_from_slice(&b.value.data);
        }
    }

    /// Writes every tensor as `name, rows, cols, f64 LE values`.
    pub fn write_archive(&self, path: &Path) -> Result<(), EncoderError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(ARCHIVE_MAGIC);
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(p.name.as_bytes());
            buf.extend_from_slice(&(p.value.rows as u32).to_le_bytes());
            buf.extend_from_slice(&(p.value.cols as u32).to_le_bytes());
            for v in &p.value.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = fs::File::create(path).map_err(|e| EncoderError::io(path, e))?;
        file.write_all(&buf).map_err(|e| EncoderError::io(path, e))
    }

    /// Loads values by name into an existing layout; every name must match.
    pub fn read_archive(&mut self, path: &Path) -> Result<(), EncoderError> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| EncoderError::io(path, e))?;
        let bad = |m: &str| EncoderError::Checkpoint(format!("{}: {m}", path.display()));
        let mut cursor = Cursor { bytes: &bytes, pos: 0 };
        if cursor.take(ARCHIVE_MAGIC.len()).ok_or_else(|| bad("truncated"))? != ARCHIVE_MAGIC {
            return Err(bad("not a weight archive"));
        }
        let count = cursor.u32().ok_or_else(|| bad("truncated"))? as usize;
        let mut seen = BTreeSet::new();
        for _ in 0..count {
            let len = cursor.u32().ok_or_else(|| bad("truncated"))? as usize;
            let name = std::str::from_utf8(cursor.take(len).ok_or_else(|| bad("truncated"))?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let rows = cursor.u32().ok_or_else(|| bad("truncated"))? as usize;
            let cols = cursor.u32().ok_or_else(|| bad("truncated"))? as usize;
            let id = self
                .find(&name)
                .ok_or_else(|| bad(&format!("unexpected tensor {name}")))?;
            let target = &mut self.params[id.0].value;
            if target.shape() != (rows, cols) {
                return Err(bad(&format!(
                    "tensor {name} is {rows}x{cols}, model expects {}x{}",
                    target.rows, target.cols
                )));
            }
            let raw = cursor.take(rows * cols * 8).ok_or_else(|| bad("truncated"))?;
            for (dst, chunk) in target.data.iter_mut().zip(raw.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            seen.insert(name);
        }
        if seen.len() != self.params.len() {
            return Err(bad("archive does not cover every model tensor"));
        }
        Ok(())
    }
}

const ARCHIVE_MAGIC: &[u8] = b"LXJW\x01";

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Gradient buffers, one per parameter, allocated on first use.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads {
    grads: Vec<Option<Mat>>,
}

impl ParamGrads {
    pub fn new(store: &ParamStore) -> Self {
        ParamGrads {
            grads: vec![None; store.len()],
        }
    }

    pub fn slot(&mut self, id: ParamId, shape: (usize, usize)) -> &mut Mat {
        self.grads[id.0].get_or_insert_with(|| Mat::zeros(shape.0, shape.1))
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    pub fn clear(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            g.data.fill(0.0);
        }
    }
}
