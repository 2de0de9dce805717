//! Named parameter containers and the portable `FDLW` weight file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FDLW" | version: u32 | count: u32 |
//!   count × ( name_len: u16 | name: utf-8 | rank: u8 | dims: rank × u32 | data: f32 × Πdims )
//! ```

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const MAGIC: &[u8; 4] = b"FDLW";
pub const FORMAT_VERSION: u32 = 1;

/// Ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

/// Parameters of a [`WeightStore`] pushed onto one tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::usage(format!("no parameter named `{name}`")))
    }

    pub fn get_opt(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Binds `name` to `var`, replacing any previous binding.
    pub fn with(mut self, name: &str, var: Var) -> Self {
        self.vars.insert(name.to_owned(), var);
        self
    }

    /// Merges two bindings (e.g. coarse and fine models on one tape).
    pub fn merged(mut self, other: &Bound) -> Self {
        self.vars
            .extend(other.vars.iter().map(|(k, v)| (k.clone(), *v)));
        self
    }

    /// Collects the tape gradient of every bound parameter; parameters the
    /// loss did not reach get zeros.
    pub fn grads<T: Real>(&self, tape: &Tape<T>) -> WeightStore<T> {
        WeightStore {
            tensors: self
                .vars
                .iter()
                .map(|(name, &v)| {
                    let g = tape
                        .grad(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
                    (name.clone(), g)
                })
                .collect(),
        }
    }
}

impl<T: Real> WeightStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total number of scalars.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Pushes every tensor onto `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Bound> {
        let mut vars = IndexMap::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            vars.insert(name.clone(), tape.leaf(t.clone(), trainable)?);
        }
        Ok(Bound { vars })
    }

    /// Union of two stores; names in `other` win on collision.
    pub fn merged(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.tensors
            .extend(other.tensors.iter().map(|(k, v)| (k.clone(), v.clone())));
        out
    }

    /// Tensors whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Euclidean norm over all elements.
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Real>(&self) -> WeightStore<U> {
        WeightStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Adds `other` elementwise, scaled by `k`. Both stores must have the
    /// same names and shapes.
    pub fn add_scaled(&mut self, other: &Self, k: T) -> Result<()> {
        for (name, t) in &mut self.tensors {
            let o = other
                .get(name)
                .ok_or_else(|| Error::usage(format!("missing `{name}`")))?;
            if o.shape() != t.shape() {
                return Err(Error::dim(format!(
                    "`{name}`: {:?} vs {:?}",
                    t.shape(),
                    o.shape()
                )));
            }
            t.data_mut()
                .iter_mut()
                .zip(o.data())
                .for_each(|(a, &b)| *a += k * b);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len())
                .map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
            let rank = u8::try_from(t.shape().len())
                .map_err(|_| Error::Format(format!("rank too large for `{name}`")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(rank);
            for &d in t.shape() {
                let d =
                    u32::try_from(d).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        fn take<'a>(b: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
            if b.len() < n {
                return Err(Error::Format("truncated weight file".into()));
            }
            let (head, tail) = b.split_at(n);
            *b = tail;
            Ok(head)
        }
        fn u32_le(b: &mut &[u8]) -> Result<u32> {
            Ok(u32::from_le_bytes(take(b, 4)?.try_into().expect("4 bytes")))
        }

        if take(&mut bytes, 4)? != MAGIC {
            return Err(Error::Format("bad magic, not an FDLW weight file".into()));
        }
        let version = u32_le(&mut bytes)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported weight format version {version}"
            )));
        }
        let count = u32_le(&mut bytes)?;
        let mut store = Self::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(take(&mut bytes, 2)?.try_into().expect("2 bytes"));
            let name = std::str::from_utf8(take(&mut bytes, len as usize)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_owned();
            let rank = take(&mut bytes, 1)?[0] as usize;
            let dims = (0..rank)
                .map(|_| u32_le(&mut bytes).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = take(&mut bytes, 4 * n)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect();
            store.insert(name, Tensor::from_vec(&dims, data)?);
        }
        if !bytes.is_empty() {
            return Err(Error::Format("trailing bytes after weight tensors".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
