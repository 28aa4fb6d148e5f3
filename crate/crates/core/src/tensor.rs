//! Dense row-major `f64` tensors and the TNSR1 on-disk format.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::exec;

/// Storage precision for TNSR1 payloads. Arithmetic is always carried out in
/// `f64`; `F32` only narrows what is written to disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::F32),
            other => Err(Error::InvalidData(format!("unknown dtype tag {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into (outer, axis_len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Result shape of an elementwise op under trailing-axes broadcasting: one
/// operand's shape must be a suffix of the other's.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.len() >= b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(Error::shape(op, a, b))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(
                "tensor",
                format!("zero-sized dimension in {shape:?}"),
            ));
        }
        if numel(&shape) != data.len() {
            return Err(Error::InvalidArgument {
                op: "tensor",
                msg: format!(
                    "shape {:?} needs {} values, got {}",
                    shape,
                    numel(&shape),
                    data.len()
                ),
            });
        }
        Ok(Self { shape, data })
    }

    /// Constructor for internal kernels where the length is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::from_parts(vec![data.len()], data)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![v; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        Self::from_parts(shape.to_vec(), (0..numel(shape)).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    /// In-place `self += other` for equal shapes.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn broadcast_binary(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let shape = broadcast_shape(op, &self.shape, &other.shape)?;
        let n = numel(&shape);
        let (la, lb) = (self.len(), other.len());
        let data = if la == n && lb == n {
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect()
        } else if la == n {
            let mut out = Vec::with_capacity(n);
            for chunk in self.data.chunks(lb) {
                out.extend(chunk.iter().zip(&other.data).map(|(&a, &b)| f(a, b)));
            }
            out
        } else if lb == n {
            let mut out = Vec::with_capacity(n);
            for chunk in other.data.chunks(la) {
                out.extend(self.data.iter().zip(chunk).map(|(&a, &b)| f(a, b)));
            }
            out
        } else {
            (0..n)
                .map(|i| f(self.data[i % la], other.data[i % lb]))
                .collect()
        };
        Ok(Self::from_parts(shape, data))
    }

    /// Sums a broadcast result back down to `shape` (a suffix of `self.shape`).
    pub fn reduce_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let m = numel(shape);
        let mut out = vec![0.0; m];
        for chunk in self.data.chunks(m) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        Self::from_parts(shape.to_vec(), out)
    }

    /// `[.., k] x [k, n] -> [.., n]`, or `[m, k] x [k] -> [m]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let err = || Error::shape("matmul", &self.shape, &other.shape);
        if self.rank() < 1 || other.rank() < 1 || other.rank() > 2 {
            return Err(err());
        }
        let k = *self.shape.last().unwrap();
        if other.shape[0] != k {
            return Err(err());
        }
        let n = if other.rank() == 2 { other.shape[1] } else { 1 };
        let m = self.len() / k;
        let mut shape = self.shape[..self.rank() - 1].to_vec();
        if other.rank() == 2 {
            shape.push(n);
        }
        let data = matmul_kernel(&self.data, &other.data, m, k, n);
        Ok(Self::from_parts(shape, data))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() < 2 {
            return Err(Error::invalid(
                "transpose",
                format!("rank {} < 2", self.rank()),
            ));
        }
        let r = self.rank();
        let (rows, cols) = (self.shape[r - 2], self.shape[r - 1]);
        let batch = self.len() / (rows * cols);
        let mut out = vec![0.0; self.len()];
        for b in 0..batch {
            let src = &self.data[b * rows * cols..(b + 1) * rows * cols];
            let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Ok(Self::from_parts(shape, out))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::invalid(
                op,
                format!("axis {axis} out of range for {:?}", self.shape),
            ));
        }
        Ok(())
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis("sum_axis", axis)?;
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &self.data[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Self::from_parts(shape, out))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let len = self.shape.get(axis).copied().unwrap_or(1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / len))
    }

    /// Inverse of `sum_axis`: repeats `self` along a new `axis` of length `len`.
    pub fn expand_axis(&self, axis: usize, len: usize) -> Tensor {
        let mut shape = self.shape.clone();
        shape.insert(axis, len);
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = &self.data[o * inner..(o + 1) * inner];
            for _ in 0..len {
                out.extend_from_slice(src);
            }
        }
        Self::from_parts(shape, out)
    }

    pub fn softmax_last(&self) -> Result<Tensor> {
        let c = self.last_dim("softmax")?;
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    /// Row-wise `x - logsumexp(x)` over the last axis.
    pub fn log_softmax_last(&self) -> Result<Tensor> {
        let c = self.last_dim("log_softmax")?;
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    fn last_dim(&self, op: &'static str) -> Result<usize> {
        self.shape
            .last()
            .copied()
            .ok_or_else(|| Error::invalid(op, "needs rank >= 1"))
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        first.check_axis("concat", axis)?;
        for p in &parts[1..] {
            let ok = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &first.shape, &p.shape));
            }
        }
        let (outer, _, inner) = split_axis(&first.shape, axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = p.shape[axis];
                out.extend_from_slice(&p.data[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self::from_parts(shape, out))
    }

    /// `[start, end)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        self.check_axis("slice", axis)?;
        if start >= end || end > self.shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!(
                    "range {start}..{end} invalid for axis {axis} of {:?}",
                    self.shape
                ),
            ));
        }
        let idx: Vec<usize> = (start..end).collect();
        self.gather_axis(axis, &idx)
    }

    /// Selects `indices` along `axis`; indices may repeat.
    pub fn gather_axis(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        self.check_axis("gather", axis)?;
        let (outer, len, inner) = split_axis(&self.shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::invalid(
                "gather",
                format!("index {bad} out of range for axis length {len}"),
            ));
        }
        if indices.is_empty() {
            return Err(Error::invalid("gather", "empty index list"));
        }
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let at = (o * len + i) * inner;
                out.extend_from_slice(&self.data[at..at + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Ok(Self::from_parts(shape, out))
    }

    /// Adjoint of `gather_axis`: scatters-adds rows back into an axis of length `len`.
    pub fn scatter_add_axis(&self, axis: usize, indices: &[usize], len: usize) -> Tensor {
        let (outer, n_idx, inner) = split_axis(&self.shape, axis);
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for (k, &i) in indices.iter().enumerate().take(n_idx) {
                let src = &self.data[(o * n_idx + k) * inner..(o * n_idx + k + 1) * inner];
                let dst = &mut out[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        Self::from_parts(shape, out)
    }

    pub fn reverse_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis("reverse", axis)?;
        let idx: Vec<usize> = (0..self.shape[axis]).rev().collect();
        self.gather_axis(axis, &idx)
    }
}

/// Row-major `[m, k] x [k, n]`, parallel over output rows for large products.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let row = |i: usize, dst: &mut [f64]| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(br) {
                *d += av * bv;
            }
        }
    };
    if m * k * n >= 1 << 15 {
        let rows_per_chunk = (4096 / (k * n).max(1)).max(1);
        exec::for_each_chunk_mut(&mut out, rows_per_chunk * n, |c, chunk| {
            for (r, dst) in chunk.chunks_mut(n).enumerate() {
                row(c * rows_per_chunk + r, dst);
            }
        });
    } else {
        for (i, dst) in out.chunks_mut(n).enumerate() {
            row(i, dst);
        }
    }
    out
}

/// `a^T b` for row-major `a: [m, k]`, `b: [m, n]`, giving `[k, n]`. Each
/// output row sums over `m` in index order.
pub(crate) fn matmul_tn_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    let row = |p: usize, dst: &mut [f64]| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (d, &bv) in dst.iter_mut().zip(&b[i * n..(i + 1) * n]) {
                *d += av * bv;
            }
        }
    };
    if m * k * n >= 1 << 15 {
        exec::for_each_chunk_mut(&mut out, n, |p, dst| row(p, dst));
    } else {
        for (p, dst) in out.chunks_mut(n).enumerate() {
            row(p, dst);
        }
    }
    out
}

/// `a b^T` for row-major `a: [m, n]`, `b: [k, n]`, giving `[m, k]`.
pub(crate) fn matmul_nt_kernel(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    let row = |i: usize, dst: &mut [f64]| {
        let ar = &a[i * n..(i + 1) * n];
        for (p, d) in dst.iter_mut().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            *d = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    };
    if m * k * n >= 1 << 15 {
        let rows_per_chunk = (4096 / (k * n).max(1)).max(1);
        exec::for_each_chunk_mut(&mut out, rows_per_chunk * k, |c, chunk| {
            for (r, dst) in chunk.chunks_mut(k).enumerate() {
                row(c * rows_per_chunk + r, dst);
            }
        });
    } else {
        for (i, dst) in out.chunks_mut(k).enumerate() {
            row(i, dst);
        }
    }
    out
}

const TNSR_MAGIC: &[u8; 4] = b"TNSR";
const TNSR_VERSION: u8 = 1;

pub(crate) fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated,
        _ => Error::Io(e),
    })
}

/// Writes one TNSR1 record: magic, version, dtype tag, rank, u32 LE dims, payload.
pub fn write_tnsr(w: &mut impl Write, t: &Tensor, dtype: Dtype) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::invalid("write_tnsr", "rank exceeds 255"));
    }
    w.write_all(TNSR_MAGIC)?;
    w.write_all(&[TNSR_VERSION, dtype.tag(), t.rank() as u8])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::invalid("write_tnsr", "dim exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    match dtype {
        Dtype::F64 => t
            .data()
            .iter()
            .for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        Dtype::F32 => t
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads one TNSR1 record; returns the tensor and its stored dtype.
pub fn read_tnsr(r: &mut impl Read) -> Result<(Tensor, Dtype)> {
    let mut head = [0u8; 7];
    read_exact_or_truncated(r, &mut head)?;
    if &head[..4] != TNSR_MAGIC {
        return Err(Error::BadMagic { expected: "TNSR" });
    }
    if head[4] != TNSR_VERSION {
        return Err(Error::UnsupportedVersion {
            found: head[4],
            expected: TNSR_VERSION,
        });
    }
    let dtype = Dtype::from_tag(head[5])?;
    let rank = head[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 4];
        read_exact_or_truncated(r, &mut d)?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    let n = numel(&shape);
    let width = match dtype {
        Dtype::F64 => 8,
        Dtype::F32 => 4,
    };
    let mut payload = vec![0u8; n * width];
    read_exact_or_truncated(r, &mut payload)?;
    let data = match dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Ok((Tensor::new(shape, data)?, dtype))
}

pub fn save_tnsr(path: &std::path::Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tnsr(&mut f, t, dtype)?;
    f.flush()?;
    Ok(())
}

pub fn load_tnsr(path: &std::path::Path) -> Result<Tensor> {
    let f = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok(read_tnsr(&mut std::io::BufReader::new(f))?.0)
}
