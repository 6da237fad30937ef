//! Dense row-major tensors, named parameter storage, and the reverse-mode
//! tape that differentiates every learnable operation in the network.

mod backward;
mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::{
    analytic_gradients, check_gradients, compare_gradients, numeric_gradients, GradCheckEntry,
    GradCheckReport,
};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use indexmap::IndexMap;
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;

/// Dense row-major tensor. Values are kept finite by construction; every
/// operation that could produce NaN/Inf reports an error instead.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    /// Build from a shape and row-major data. Errors if the extents do not
    /// multiply out to the data length, an extent is zero, or a value is
    /// non-finite.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("zero extent in shape {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} has {numel} elements, data has {}", data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor", index: i });
        }
        Ok(Self { shape: shape.to_vec(), data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![S::zero(); numel], grad: None, requires_grad: false }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; numel], grad: None, requires_grad: false }
    }

    pub fn scalar(v: S) -> Self {
        Self { shape: vec![1], data: vec![v], grad: None, requires_grad: false }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Uniform random tensor in `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| S::c(rng.gen_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated (zeroed, same shape) on first use.
    pub fn grad_mut(&mut self) -> &mut [S] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![S::zero(); n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    /// Element at a 2-D index; the tensor must be rank 2.
    pub fn at2(&self, r: usize, c: usize) -> S {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// Row-wise argmax for a rank-2 tensor.
    pub fn argmax_rows(&self) -> Vec<usize> {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        self.data
            .chunks_exact(cols)
            .map(|row| {
                let mut best = 0usize;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Ordered map of uniquely named learnable tensors.
///
/// Names are dot-separated hierarchies such as `enc2.block1.ssm.a_log`; the
/// insertion order is fixed by the model builder, which makes checkpoints and
/// gradient reports stable across runs for a fixed config.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar = f64> {
    entries: IndexMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: &str, mut t: Tensor<S>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        t.set_requires_grad(true);
        self.entries.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.entries.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.entries.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Total number of scalar parameters.
    pub fn total_params(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.grad_mut();
            t.zero_grad();
        }
    }

    /// Copy values from another store; the name sets and shapes must match.
    pub fn copy_values_from(&mut self, src: &ParamStore<S>) -> Result<()> {
        if self.len() != src.len() {
            return Err(Error::Format(format!(
                "parameter count mismatch: expected {}, checkpoint has {}",
                self.len(),
                src.len()
            )));
        }
        for (name, t) in self.entries.iter_mut() {
            let other = src
                .entries
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint missing parameter {name}")))?;
            if other.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "shape mismatch for {name}: expected {:?}, checkpoint has {:?}",
                    t.shape(),
                    other.shape()
                )));
            }
            t.data.copy_from_slice(other.data());
        }
        Ok(())
    }

    /// Write the store in the SPMB binary checkpoint format.
    ///
    /// Layout: magic `SPMB`, version u32, entry count u32, then per entry:
    /// name length u16, UTF-8 name, rank u8, extents u32 each, little-endian
    /// f64 payload.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"SPMB");
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize {
                return Err(Error::Format(format!("parameter name too long: {name}")));
            }
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(t.rank() as u8);
            for &e in t.shape() {
                buf.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.f64().to_le_bytes());
            }
        }
        let tmp = path.with_extension("spmb.tmp");
        std::fs::write(&tmp, &buf)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Load a store from the SPMB format written by [`ParamStore::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        let mut r = Cursor { buf: &buf, pos: 0 };
        let magic = r.take(4)?;
        if magic != b"SPMB" {
            return Err(Error::Format("bad magic, not an SPMB checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let count = r.u32()? as usize;
        let mut store = Self::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let raw = r.take(8)?;
                data.push(S::c(f64::from_le_bytes(raw.try_into().unwrap())));
            }
            store.insert(&name, Tensor::from_vec(&shape, data)?)?;
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(store)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Dummy writer import guard; `Write` is used by `save` via `std::fs::write`.
#[allow(unused)]
fn _uses_write<W: Write>(_: W) {}
