use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
///
/// Matrices are stored as `[rows, cols]`; vectors used by the model are kept
/// as `[1, k]` rows so that every linear map is a plain matmul. Storage is
/// shared between clones and copied on first write.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Domain {
                op: "tensor",
                reason: format!("dimensions must be positive, got {shape:?}"),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    /// A `[1, k]` row vector.
    pub fn row(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: Arc::new(values),
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<f64> {
        Arc::unwrap_or_clone(self.data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[1]
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in Arc::make_mut(&mut self.data).iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }
}

/// `out += a · b` for row-major `a: [m, k]`, `b: [k, p]`, `out: [m, p]`.
#[inline(always)]
fn matmul_acc_generic(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    const BLOCK: usize = 32;
    let full = p - p % BLOCK;
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * p..(i + 1) * p];
        // Column blocks keep their partial sums in registers across k.
        for j0 in (0..full).step_by(BLOCK) {
            let mut acc = [0.0; BLOCK];
            acc.copy_from_slice(&out_row[j0..j0 + BLOCK]);
            for (kk, &aik) in a_row.iter().enumerate() {
                let b_blk = &b[kk * p + j0..kk * p + j0 + BLOCK];
                for l in 0..BLOCK {
                    acc[l] += aik * b_blk[l];
                }
            }
            out_row[j0..j0 + BLOCK].copy_from_slice(&acc);
        }
        if full < p {
            let tail = &mut out_row[full..];
            for (kk, &aik) in a_row.iter().enumerate() {
                for (o, &bv) in tail.iter_mut().zip(&b[kk * p + full..(kk + 1) * p]) {
                    *o += aik * bv;
                }
            }
        }
    }
}

/// Inner product with sixteen interleaved partial sums, reduced pairwise.
#[inline(always)]
fn dot_generic(a: &[f64], b: &[f64]) -> f64 {
    const LANES: usize = 16;
    let mut acc = [0.0; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut width = LANES / 2;
    while width > 0 {
        for l in 0..width {
            acc[l] += acc[l + width];
        }
        width /= 2;
    }
    acc[0] + tail
}

/// `out += a · bᵀ` for `a: [m, k]`, `b: [p, k]`, `out: [m, p]`.
#[inline(always)]
fn matmul_nt_acc_generic(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..p {
            out[i * p + j] += dot_generic(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out += aᵀ · b` for `a: [m, k]`, `b: [m, p]`, `out: [k, p]`.
#[inline(always)]
fn matmul_tn_acc_generic(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let b_row = &b[i * p..(i + 1) * p];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            let out_row = &mut out[kk * p..(kk + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

// Kernels are compiled twice: once for the baseline target and once with
// AVX2 enabled, selected at runtime. Both perform the same operations in the
// same order, so results are bit-identical.
macro_rules! dispatch {
    ($(#[$doc:meta])* $name:ident, $generic:ident, $avx:ident, ($($arg:ident: $ty:ty),*) $(-> $ret:ty)?) => {
        $(#[$doc])*
        pub(crate) fn $name($($arg: $ty),*) $(-> $ret)? {
            #[cfg(target_arch = "x86_64")]
            {
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the CPU supports AVX2.
                    return unsafe { $avx($($arg),*) };
                }
            }
            $generic($($arg),*)
        }

        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        unsafe fn $avx($($arg: $ty),*) $(-> $ret)? {
            $generic($($arg),*)
        }
    };
}

dispatch!(
    /// `out += a · b` for row-major `a: [m, k]`, `b: [k, p]`, `out: [m, p]`.
    matmul_acc, matmul_acc_generic, matmul_acc_avx2,
    (a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize)
);
dispatch!(
    /// `out += a · bᵀ` for `a: [m, k]`, `b: [p, k]`, `out: [m, p]`.
    matmul_nt_acc, matmul_nt_acc_generic, matmul_nt_acc_avx2,
    (a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize)
);
dispatch!(
    /// `out += aᵀ · b` for `a: [m, k]`, `b: [m, p]`, `out: [k, p]`.
    matmul_tn_acc, matmul_tn_acc_generic, matmul_tn_acc_avx2,
    (a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize)
);
dispatch!(
    /// Inner product with sixteen interleaved partial sums.
    dot, dot_generic, dot_avx2,
    (a: &[f64], b: &[f64]) -> f64
);
