//! Dense row-major tensors and the `TFGT` binary container.
//!
//! A `TFGT` record is the 4-byte magic `TFGT`, a little-endian `u32` rank,
//! `rank` little-endian `u32` extents, then every element as a little-endian
//! `f64` in row-major order. Files may hold several records back to back.

use std::fmt::{Debug, Display};
use std::fs;
use std::io::{Read, Write};
use std::iter::Sum;
use std::path::Path;

use num_traits::Float;

use crate::error::{Error, Result};

pub const TFGT_MAGIC: &[u8; 4] = b"TFGT";

/// Element type of a tensor. Implemented for `f32` (training) and `f64`
/// (gradient checks and oracles).
pub trait Scalar: Float + Default + Debug + Display + Sum + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[inline]
pub(crate) fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// Row-major matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Self::new([rows.len(), cols], data).expect("valid matrix")
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Contract(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} outside {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let cols = *self.shape.last().unwrap();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Attach a zeroed gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.grad = on.then(|| vec![T::zero(); self.data.len()]);
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Slice of the leading axis, e.g. one image out of a batch.
    pub fn index_outer(&self, i: usize) -> Result<Tensor<T>> {
        if self.rank() < 2 {
            return Err(Error::Contract("index_outer needs rank >= 2".into()));
        }
        if i >= self.shape[0] {
            return Err(Error::Index {
                what: "outer",
                index: i,
                limit: self.shape[0],
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        Tensor::new(self.shape[1..].to_vec(), self.data[i * inner..(i + 1) * inner].to_vec())
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    pub fn write_tfgt<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        out.write_all(TFGT_MAGIC)?;
        out.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &self.data {
            out.write_all(&v.as_f64().to_le_bytes())?;
        }
        Ok(())
    }

    /// Encoded size of this tensor as one `TFGT` record.
    pub fn tfgt_len(&self) -> usize {
        4 + 4 + 4 * self.shape.len() + 8 * self.data.len()
    }

    pub fn to_tfgt_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.tfgt_len());
        self.write_tfgt(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Decode one record from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn from_tfgt_bytes(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
        let mut cursor = bytes;
        let t = Self::read_tfgt(&mut cursor)?;
        Ok((t, bytes.len() - cursor.len()))
    }

    pub fn read_tfgt<R: Read>(input: &mut R) -> Result<Tensor<T>> {
        let bad = |detail: String| Error::Format {
            what: "TFGT record",
            detail,
        };
        let mut magic = [0u8; 4];
        input
            .read_exact(&mut magic)
            .map_err(|e| bad(format!("missing magic: {e}")))?;
        if &magic != TFGT_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        let mut read_u32 = |input: &mut R| -> Result<u32> {
            input
                .read_exact(&mut word)
                .map_err(|e| bad(format!("truncated header: {e}")))?;
            Ok(u32::from_le_bytes(word))
        };
        let rank = read_u32(input)? as usize;
        if rank == 0 || rank > 16 {
            return Err(bad(format!("unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(input)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| bad(format!("invalid extents {shape:?}")))?;
        let mut raw = vec![0u8; numel * 8];
        input
            .read_exact(&mut raw)
            .map_err(|e| bad(format!("truncated payload: {e}")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Tensor::new(shape, data)
    }
}

/// Write tensors back to back as `TFGT` records.
pub fn save_tfgt<T: Scalar>(path: &Path, tensors: &[&Tensor<T>]) -> Result<()> {
    let mut buf = Vec::new();
    for t in tensors {
        t.write_tfgt(&mut buf).expect("in-memory write");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Read every `TFGT` record in a file.
pub fn load_tfgt<T: Scalar>(path: &Path) -> Result<Vec<Tensor<T>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0;
    while offset < bytes.len() {
        let (t, used) = Tensor::from_tfgt_bytes(&bytes[offset..])?;
        out.push(t);
        offset += used;
    }
    if out.is_empty() {
        return Err(Error::Format {
            what: "TFGT file",
            detail: format!("{} holds no records", path.display()),
        });
    }
    Ok(out)
}
