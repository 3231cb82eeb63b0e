//! Dense row-major tensors and the handful of numeric kernels the rest of
//! the crate is built on.
//!
//! Tensors are immutable values. Every constructor and public operation
//! guarantees that the stored scalars are finite, so NaN or infinity never
//! leaks out of this module.

mod io;

use std::fmt::{Debug, Display};

use num_traits::Float;
use rayon::prelude::*;
use thiserror::Error;

pub use io::{decode_tensor, encode_tensor, read_any, read_tensor, write_tensor, AnyTensor};

/// Magic bytes at the start of every tensor file.
pub const MAGIC: [u8; 4] = *b"VMTB";
/// Current tensor file format version.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: non-finite value produced at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("bad magic bytes {found:?}, expected \"VMTB\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u32),
    #[error("file holds {found} data but {expected} was requested")]
    DtypeMismatch { expected: DType, found: DType },
    #[error("truncated payload: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("extents {0:?} overflow the addressable element count")]
    ExtentOverflow(Vec<u64>),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// On-disk scalar type tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u32 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(TensorError::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

/// Floating point element type. `f32` is the working precision; `f64` runs
/// the same code paths for gradient checking.
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + std::iter::Sum + 'static
{
    const DTYPE: DType;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("f64 converts to any float")
    }

    fn as_f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).expect("float converts to f64")
    }

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte chunk"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"))
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("dtype", &std::any::type_name::<T>())
            .field("shape", &self.shape)
            .finish_non_exhaustive()
    }
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TensorError::NonFinite { op, index }),
        None => Ok(()),
    }
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, rejecting length mismatches and non-finite data.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        check_finite("Tensor::new", &data)?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds a rank-2 tensor from a generator over `(row, col)`.
    pub fn from_fn2(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new([rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank {
                op: "dims2",
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    /// Row `i` of a rank-2 tensor. Panics when out of range.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        let cols = self.shape[1];
        self.data[i * cols + j]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: self.data.len(),
            });
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data,
        })
    }

    pub fn scale(&self, factor: T) -> Result<Self> {
        let data: Vec<T> = self.data.iter().map(|&v| v * factor).collect();
        check_finite("scale", &data)?;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data: Vec<T> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        check_finite("add", &data)?;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Column-wise sum of a rank-2 tensor.
    pub fn column_sums(&self) -> Result<Vec<T>> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                *o = *o + v;
            }
        }
        Ok(out)
    }

    /// Columns `[start, start + width)` of a rank-2 tensor.
    pub fn column_slice(&self, start: usize, width: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start + width > c {
            return Err(TensorError::ShapeMismatch {
                op: "column_slice",
                left: self.shape.clone(),
                right: vec![start, width],
            });
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        Ok(Self {
            shape: vec![r, width],
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "max_abs_diff",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.as_f64()))
                .collect(),
        }
    }
}

const DOT_LANES: usize = 8;

/// Dot product with a fixed accumulation order: element `i` goes to lane
/// `i % 8`, lanes are reduced pairwise in a fixed tree, and the remainder is
/// added last. The order depends only on the length.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); DOT_LANES];
    let mut ca = a.chunks_exact(DOT_LANES);
    let mut cb = b.chunks_exact(DOT_LANES);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..DOT_LANES {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    let tail = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |t, (&x, &y)| t + x * y);
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7])) + tail
}

/// `c = a · b` for rank-2 tensors. Rows of `c` are computed independently, so
/// the result does not depend on the worker count.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut data = vec![T::zero(); m * n];
    if n > 0 {
        data.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
            let a_row = &a.data[i * k..(i + 1) * k];
            for (p, &a_ip) in a_row.iter().enumerate() {
                let b_row = &b.data[p * n..(p + 1) * n];
                for (o, &b_pj) in out.iter_mut().zip(b_row) {
                    *o = *o + a_ip * b_pj;
                }
            }
        });
    }
    check_finite("matmul", &data)?;
    Ok(Tensor {
        shape: vec![m, n],
        data,
    })
}

/// `c = a · bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_nt",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut data = vec![T::zero(); m * n];
    if n > 0 {
        data.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
            let a_row = &a.data[i * k..(i + 1) * k];
            for (j, o) in out.iter_mut().enumerate() {
                *o = dot(a_row, &b.data[j * k..(j + 1) * k]);
            }
        });
    }
    check_finite("matmul_nt", &data)?;
    Ok(Tensor {
        shape: vec![m, n],
        data,
    })
}

/// In-place softmax of `scale · v` over a slice; returns the log-sum-exp of
/// the scaled logits. Entries equal to negative infinity get zero weight.
pub fn softmax_in_place<T: Scalar>(v: &mut [T], scale: T) -> T {
    let mut max = T::neg_infinity();
    for x in v.iter_mut() {
        *x = *x * scale;
        max = max.max(*x);
    }
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
    max + sum.ln()
}

/// Numerically stable softmax of `scale · v` for a rank-1 tensor.
pub fn stable_softmax<T: Scalar>(v: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    if v.ndim() != 1 {
        return Err(TensorError::Rank {
            op: "stable_softmax",
            expected: 1,
            shape: v.shape.clone(),
        });
    }
    if v.is_empty() {
        return Err(TensorError::Empty {
            op: "stable_softmax",
        });
    }
    let mut data = v.data.clone();
    softmax_in_place(&mut data, scale);
    check_finite("stable_softmax", &data)?;
    Ok(Tensor {
        shape: v.shape.clone(),
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn2(rows, cols, |_, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn triple_loop(a: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.at2(i, p) as f64 * b.at2(p, j) as f64;
                }
            }
        }
        out
    }

    #[test]
    fn identity_leaves_matrix_unchanged() {
        let b = random(3, 4, 1);
        assert_eq!(matmul(&Tensor::eye(3), &b).unwrap(), b);
        assert_eq!(matmul(&b, &Tensor::eye(4)).unwrap(), b);
    }

    #[test]
    fn zero_annihilates() {
        let c = matmul(&Tensor::<f32>::zeros([2, 5]), &random(5, 2, 2)).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(8, 8, 3);
        let b = random(8, 8, 4);
        let c = matmul(&a, &b).unwrap();
        for (x, y) in c.data().iter().zip(triple_loop(&a, &b)) {
            assert!((*x as f64 - y).abs() < 1e-6, "{x} vs {y}");
        }
        let bt = b.transpose().unwrap();
        let c2 = matmul_nt(&a, &bt).unwrap();
        assert!(c.max_abs_diff(&c2).unwrap() < 1e-6);
    }

    #[test]
    fn matmul_rejects_bad_inner_dims() {
        let err = matmul(&random(2, 3, 5), &random(4, 2, 6)).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "matmul", .. }));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn matmul_overflow_is_reported() {
        let a = Tensor::full([1, 2], 3.0e38f32).unwrap();
        let b = Tensor::full([2, 1], 3.0e38f32).unwrap();
        assert!(matches!(
            matmul(&a, &b),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn softmax_uniform() {
        let v = Tensor::new([4], vec![2.5f32; 4]).unwrap();
        for scale in [0.1, 1.0, 7.0] {
            let p = stable_softmax(&v, scale).unwrap();
            assert!(p.data().iter().all(|&x| (x - 0.25).abs() < 1e-7));
        }
    }

    #[test]
    fn softmax_overflow_guard() {
        let v = Tensor::new([2], vec![1e4f32, 0.0]).unwrap();
        let p = stable_softmax(&v, 1.0).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_empty() {
        let v = Tensor::<f32>::new([0], vec![]).unwrap();
        assert!(matches!(
            stable_softmax(&v, 1.0),
            Err(TensorError::Empty { .. })
        ));
    }

    #[test]
    fn constructor_rejects_nan_and_bad_length() {
        assert!(matches!(
            Tensor::new([2], vec![1.0f32, f32::NAN]),
            Err(TensorError::NonFinite { index: 1, .. })
        ));
        assert!(matches!(
            Tensor::new([2, 2], vec![1.0f32; 3]),
            Err(TensorError::LengthMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant_probability(
            raw in prop::collection::vec(-1280i32..1280, 1..40),
            scale in prop::sample::select(vec![0.25f32, 0.5, 1.0, 2.0, 4.0]),
        ) {
            // multiples of 1/64 keep the +100 shift exact in f32
            let v: Vec<f32> = raw.iter().map(|&r| r as f32 / 64.0).collect();
            let t = Tensor::new([v.len()], v.clone()).unwrap();
            let shifted = Tensor::new([v.len()], v.iter().map(|x| x + 100.0).collect()).unwrap();
            let p = stable_softmax(&t, scale).unwrap();
            let q = stable_softmax(&shifted, scale).unwrap();
            let sum: f32 = p.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6 + 1e-7 * v.len() as f32);
            prop_assert!(p.data().iter().all(|&x| x >= 0.0));
            prop_assert!(p.max_abs_diff(&q).unwrap() < 1e-6);
        }

        #[test]
        fn identity_is_exact(rows in 1usize..7, cols in 1usize..7, seed in any::<u64>()) {
            let x = random(rows, cols, seed);
            prop_assert_eq!(&matmul(&Tensor::eye(rows), &x).unwrap(), &x);
            prop_assert_eq!(&matmul(&x, &Tensor::eye(cols)).unwrap(), &x);
        }
    }
}
