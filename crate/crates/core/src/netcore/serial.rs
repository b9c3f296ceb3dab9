//! Checkpoint tensor container: `KIVI-CK1`, a u32 LE manifest length, a JSON
//! manifest, then the raw little-endian f32 buffers in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Mat, Module};

pub const MAGIC: &[u8; 8] = b"KIVI-CK1";
pub const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SerialError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint layout version {got}, this build reads {expected}")]
    Version { expected: u32, got: u32 },
    #[error("tensor `{0}` missing from checkpoint")]
    Missing(String),
    #[error("tensor `{name}` has shape {got:?}, expected {expected:?}")]
    Shape { name: String, expected: Vec<usize>, got: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    layout_version: u32,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// In-memory checkpoint; tensors keep insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorStore {
    pub layout_version: u32,
    pub meta: serde_json::Value,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Default for TensorStore {
    fn default() -> Self {
        Self::new()
    }
}

impl TensorStore {
    pub fn new() -> Self {
        Self { layout_version: LAYOUT_VERSION, meta: serde_json::Value::Null, names: Vec::new(), tensors: Vec::new() }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Inserts or replaces a tensor; values are rounded to f32.
    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: &[f64]) {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "tensor `{name}` shape/len mismatch");
        let t = Tensor { shape, data: values.iter().map(|&v| v as f32).collect() };
        match self.names.iter().position(|n| n == name) {
            Some(i) => self.tensors[i] = t,
            None => {
                self.names.push(name.to_string());
                self.tensors.push(t);
            }
        }
    }

    pub fn insert_mat(&mut self, name: &str, m: &Mat) {
        let data: Vec<f64> = m.iter().copied().collect();
        self.insert(name, vec![m.nrows(), m.ncols()], &data);
    }

    /// Reads a tensor back as f64, checking its shape.
    pub fn read(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>, SerialError> {
        let t = self.get(name).ok_or_else(|| SerialError::Missing(name.to_string()))?;
        if t.shape != shape {
            return Err(SerialError::Shape { name: name.to_string(), expected: shape.to_vec(), got: t.shape.clone() });
        }
        Ok(t.data.iter().map(|&v| v as f64).collect())
    }

    pub fn insert_module(&mut self, prefix: &str, m: &dyn Module) {
        m.visit(prefix, &mut |name, p| self.insert_mat(name, &p.value));
    }

    /// Loads every parameter of `m` (names and shapes must match); returns
    /// the number of tensors read.
    pub fn load_module(&self, prefix: &str, m: &mut dyn Module) -> Result<usize, SerialError> {
        let mut err = None;
        let mut count = 0;
        m.visit_mut(prefix, &mut |name, p| {
            if err.is_some() {
                return;
            }
            match self.read(name, &[p.value.nrows(), p.value.ncols()]) {
                Ok(v) => {
                    p.value.iter_mut().zip(v).for_each(|(d, s)| *d = s);
                    count += 1;
                }
                Err(e) => err = Some(e),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(count),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), SerialError> {
        let mut offset = 0;
        let tensors = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| {
                let e = TensorEntry { name: name.clone(), shape: t.shape.clone(), dtype: "f32".into(), offset };
                offset += t.data.len() * 4;
                e
            })
            .collect();
        let manifest = Manifest { layout_version: self.layout_version, tensors, meta: self.meta.clone() };
        let json = serde_json::to_vec(&manifest).map_err(|e| SerialError::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::with_capacity(offset);
        for t in &self.tensors {
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, SerialError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(SerialError::Format("bad magic".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let manifest: Manifest = serde_json::from_slice(&json).map_err(|e| SerialError::Format(e.to_string()))?;
        if manifest.layout_version != LAYOUT_VERSION {
            return Err(SerialError::Version { expected: LAYOUT_VERSION, got: manifest.layout_version });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        let mut store = TensorStore { layout_version: manifest.layout_version, meta: manifest.meta, ..Self::new() };
        for e in manifest.tensors {
            if e.dtype != "f32" {
                return Err(SerialError::Format(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let bytes = rest
                .get(e.offset..e.offset + 4 * n)
                .ok_or_else(|| SerialError::Format(format!("tensor `{}` runs past end of file", e.name)))?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            store.names.push(e.name);
            store.tensors.push(Tensor { shape: e.shape, data });
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), SerialError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SerialError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}
