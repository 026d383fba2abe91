use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};

/// Magic bytes opening a binary tensor blob.
pub const MXN1_MAGIC: &[u8; 4] = b"MXN1";

/// Dense row-major array. Rank-4 tensors are laid out `N×C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Checked constructor: rejects length mismatches, zero extents and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        if let Some(index) = t.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(t)
    }

    /// Like [`Tensor::new`] but skips the finiteness scan.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeData {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "tensor extents must be positive"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Leading (batch) extent.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Channel extent (axis 1); rank-1 tensors have one channel.
    pub fn channels(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    /// Product of the extents after the channel axis (`H·W`, or 1 for rank 2).
    pub fn spatial(&self) -> usize {
        self.shape.iter().skip(2).product()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape.to_vec(), self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| cast(v)).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape())?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Inner product of two same-shaped tensors.
    pub fn dot(&self, other: &Self) -> Result<T> {
        self.expect_shape(other.shape())?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::ShapeMismatch(format!(
                "expected {shape:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.shape[1..].iter().product::<usize>();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let cols = self.shape[1..].iter().product::<usize>();
        &mut self.data[i * cols..(i + 1) * cols]
    }

    /// Gathers the given leading-axis slices into a new tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        let mut data = Vec::with_capacity(rows.len() * self.len() / self.batch());
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self::from_vec(shape, data)
    }

    /// Reduces over `axes` with the arithmetic mean; the reduced axes are
    /// dropped from the output shape (a full reduction yields shape `[1]`).
    pub fn mean_axes(&self, axes: &[usize]) -> Result<Self> {
        let (out_shape, count) = self.reduced_shape(axes)?;
        let mut sums = vec![T::zero(); out_shape.iter().product()];
        self.for_each_reduced(axes, |flat, out| sums[out] += self.data[flat]);
        let n = T::from_usize_lossy(count);
        Tensor::from_vec(out_shape, sums.into_iter().map(|s| s / n).collect())
    }

    /// Biased (population) variance over `axes`.
    pub fn var_axes(&self, axes: &[usize]) -> Result<Self> {
        let mean = self.mean_axes(axes)?;
        let (out_shape, count) = self.reduced_shape(axes)?;
        let mut acc = vec![T::zero(); out_shape.iter().product()];
        self.for_each_reduced(axes, |flat, out| {
            let d = self.data[flat] - mean.data[out];
            acc[out] += d * d;
        });
        let n = T::from_usize_lossy(count);
        Tensor::from_vec(out_shape, acc.into_iter().map(|s| s / n).collect())
    }

    /// Per-channel mean and biased variance over every non-channel axis.
    pub fn channel_moments(&self) -> (Vec<T>, Vec<T>) {
        let axes: Vec<usize> = (0..self.rank()).filter(|&a| a != 1).collect();
        if self.rank() < 2 {
            let m = self.mean_axes(&[0]).expect("rank-1 reduce");
            let v = self.var_axes(&[0]).expect("rank-1 reduce");
            return (m.data, v.data);
        }
        let m = self.mean_axes(&axes).expect("channel reduce");
        let v = self.var_axes(&axes).expect("channel reduce");
        (m.data, v.data)
    }

    fn reduced_shape(&self, axes: &[usize]) -> Result<(Vec<usize>, usize)> {
        if let Some(&a) = axes.iter().find(|&&a| a >= self.rank()) {
            return Err(Error::InvalidArgument(format!(
                "axis {a} out of range for rank {}",
                self.rank()
            )));
        }
        let mut out = Vec::new();
        let mut count = 1;
        for (a, &e) in self.shape.iter().enumerate() {
            if axes.contains(&a) {
                count *= e;
            } else {
                out.push(e);
            }
        }
        if out.is_empty() {
            out.push(1);
        }
        Ok((out, count))
    }

    fn for_each_reduced(&self, axes: &[usize], mut f: impl FnMut(usize, usize)) {
        let rank = self.rank();
        let mut idx = vec![0usize; rank];
        for flat in 0..self.data.len() {
            let mut out = 0;
            for a in 0..rank {
                if !axes.contains(&a) {
                    out = out * self.shape[a] + idx[a];
                }
            }
            f(flat, out);
            for a in (0..rank).rev() {
                idx[a] += 1;
                if idx[a] < self.shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&self, b: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                self.shape, b.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &a) in arow.iter().enumerate() {
                let brow = &b.data[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        Tensor::from_vec(vec![m, n], out)
    }

    /// `a (m×k) · bᵀ` with `b` stored `n×k`.
    pub fn matmul_bt(&self, b: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (n, k2) = b.dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul_bt {:?} x {:?}ᵀ",
                self.shape, b.shape
            )));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b.data[j * k..(j + 1) * k];
                out.push(arow.iter().zip(brow).map(|(&x, &y)| x * y).sum());
            }
        }
        Tensor::from_vec(vec![m, n], out)
    }

    /// `aᵀ · b` with `a` stored `k×m` and `b` stored `k×n`.
    pub fn matmul_at(&self, b: &Self) -> Result<Self> {
        let (k, m) = self.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul_at {:?}ᵀ x {:?}",
                self.shape, b.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        for p in 0..k {
            let arow = &self.data[p * m..(p + 1) * m];
            let brow = &b.data[p * n..(p + 1) * n];
            for (i, &a) in arow.iter().enumerate() {
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        Tensor::from_vec(vec![m, n], out)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::ShapeMismatch(format!("expected rank 2, got {s:?}"))),
        }
    }

    /// Writes the versioned binary form: magic, `u32` rank, `u32` extents,
    /// then raw little-endian `f32` values.
    pub fn write_mxn1<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MXN1_MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_mxn1(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 + 4 * self.rank() + 4 * self.len());
        self.write_mxn1(&mut buf).expect("write to Vec");
        buf
    }

    pub fn read_mxn1<R: Read>(mut r: R) -> Result<Self> {
        let mut word = [0u8; 4];
        let mut next = |r: &mut R| -> Result<[u8; 4]> {
            r.read_exact(&mut word)
                .map_err(|e| Error::Format(format!("truncated MXN1 blob: {e}")))?;
            Ok(word)
        };
        if &next(&mut r)? != MXN1_MAGIC {
            return Err(Error::Format("bad MXN1 magic".into()));
        }
        let rank = u32::from_le_bytes(next(&mut r)?) as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("unsupported MXN1 rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(next(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(T::lit(f32::from_le_bytes(next(&mut r)?) as f64));
        }
        Self::new(shape, data)
    }

    pub fn from_mxn1(bytes: &[u8]) -> Result<Self> {
        Self::read_mxn1(bytes)
    }

    /// CSV view: a `# shape=` comment line, then one row per leading-axis
    /// slice with every trailing value flattened into columns.
    pub fn to_csv(&self) -> String {
        let dims: Vec<String> = self.shape.iter().map(|e| e.to_string()).collect();
        let mut out = format!("# shape={}\n", dims.join("x"));
        for i in 0..self.batch() {
            let row: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|l| l.strip_prefix("# shape="))
            .ok_or_else(|| Error::Format("missing '# shape=' header".into()))?;
        let shape = header
            .split('x')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("bad shape header: {e}")))?;
        let mut data = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            for cell in line.split(',') {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|e| Error::Format(format!("bad value {cell:?}: {e}")))?;
                data.push(T::lit(v));
            }
        }
        Self::new(shape, data)
    }
}
