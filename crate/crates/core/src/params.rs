//! Named parameter collections and the binary checkpoint format.
//!
//! A checkpoint is a single header line
//!
//! ```text
//! REPORTGEN-CKPT 1 <count> <name>:<d0>x<d1>... <name>:<d0>...
//! ```
//!
//! followed by every parameter's values as little-endian IEEE-754 `f64`,
//! in manifest order.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "REPORTGEN-CKPT";
const FORMAT_VERSION: u32 = 1;

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter. Names must be unique and free of whitespace.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(
            !name.contains(char::is_whitespace) && !name.contains(':'),
            "bad parameter name `{name}`"
        );
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let idx = self.names.len();
        self.index.insert(name.clone(), idx);
        self.names.push(name);
        self.tensors.push(value);
        idx
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// `(name, shape)` pairs in order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC} {FORMAT_VERSION} {}", self.len());
        for (name, t) in self.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!(" {name}:{}", dims.join("x")));
        }
        header.push('\n');
        let mut out = header.into_bytes();
        out.reserve(self.numel() * 8);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptData {
            path: origin.to_path_buf(),
            reason,
        };
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| corrupt("header is not utf-8".into()))?;
        let mut fields = header.split(' ');
        if fields.next() != Some(MAGIC) {
            return Err(corrupt("bad magic".into()));
        }
        let version: u32 = fields
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| corrupt("bad version field".into()))?;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let count: usize = fields
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| corrupt("bad count field".into()))?;
        let mut manifest = Vec::with_capacity(count);
        for entry in fields {
            let (name, dims) = entry
                .split_once(':')
                .ok_or_else(|| corrupt(format!("bad manifest entry `{entry}`")))?;
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| corrupt(format!("bad shape in `{entry}`")))?;
            manifest.push((name.to_string(), shape));
        }
        if manifest.len() != count {
            return Err(corrupt(format!(
                "header announces {count} parameters, lists {}",
                manifest.len()
            )));
        }
        let body = &bytes[nl + 1..];
        let total: usize = manifest.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if body.len() != total * 8 {
            return Err(corrupt(format!(
                "expected {} payload bytes, found {}",
                total * 8,
                body.len()
            )));
        }
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut store = ParamStore::new();
        for (name, shape) in manifest {
            let n = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            let t = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
            store.insert(name, t);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Fails unless `other` has exactly the same names and shapes in order.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        let (a, b) = (self.manifest(), other.manifest());
        if a.len() != b.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        for ((na, sa), (nb, sb)) in a.iter().zip(&b) {
            if na != nb || sa != sb {
                return Err(Error::Config(format!(
                    "parameter mismatch: {na}{sa:?} vs {nb}{sb:?}"
                )));
            }
        }
        Ok(())
    }
}
