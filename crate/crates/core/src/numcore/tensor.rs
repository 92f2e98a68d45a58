//! Dense row-major 2-D tensors over `f32` or `f64`.
//!
//! The engine is rank-2 throughout: matrices are `[rows, cols]`, vectors are
//! `[1, n]` and scalars `[1, 1]`. `f32` is the production element type;
//! the `f64` instantiation exists so gradients can be verified against
//! central finite differences at tight tolerances.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

/// Scalar element type for tensors. Implemented for `f32` and `f64`.
pub trait Elem:
    Copy
    + PartialOrd
    + fmt::Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// `c = alpha * op(a) * op(b) + beta * c` on raw row-major buffers with
    /// explicit strides. Thin wrapper over the BLAS-style kernel.
    ///
    /// # Safety
    /// Pointers must reference buffers valid for the given dimensions and
    /// strides; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_elem {
    ($t:ty, $gemm:path) => {
        impl Elem for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn maximum(self, other: Self) -> Self {
                self.max(other)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[allow(clippy::too_many_arguments)]
            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
            }
        }
    };
}

impl_elem!(f32, matrixmultiply::sgemm);
impl_elem!(f64, matrixmultiply::dgemm);

/// Dense row-major matrix of `E`.
#[derive(Clone, PartialEq)]
pub struct TensorOf<E> {
    rows: usize,
    cols: usize,
    data: Vec<E>,
}

/// The production tensor type.
pub type Tensor = TensorOf<f32>;

impl<E: Elem> TensorOf<E> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![E::ZERO; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: E) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<E>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length {} does not match shape [{rows}, {cols}]",
            data.len()
        );
        Self { rows, cols, data }
    }

    pub fn scalar(value: E) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Shape as a dimension list `[rows, cols]`.
    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    #[inline]
    pub fn data(&self) -> &[E] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> E {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: E) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[E] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [E] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> E {
        assert!(self.is_scalar(), "item() on non-scalar tensor {:?}", self.shape());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale_assign(&mut self, c: E) {
        for v in &mut self.data {
            *v = *v * c;
        }
    }

    pub fn map<F: Fn(E) -> E>(&self, f: F) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-type conversion, used to lift `f32` parameters into the
    /// `f64` world for gradient verification.
    pub fn cast<T: Elem>(&self) -> TensorOf<T> {
        TensorOf {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    /// `self * op(other)` into a fresh tensor, with optional transposition
    /// of either operand (applied via strides, no data movement).
    pub fn matmul(&self, trans_a: bool, other: &Self, trans_b: bool) -> Self {
        let (m, ka) = if trans_a {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        };
        let (kb, n) = if trans_b {
            (other.cols, other.rows)
        } else {
            (other.rows, other.cols)
        };
        assert_eq!(
            ka, kb,
            "matmul inner-dimension mismatch: {:?} (trans={}) x {:?} (trans={})",
            self.shape(),
            trans_a,
            other.shape(),
            trans_b
        );
        let mut out = Self::zeros(m, n);
        out.gemm_accum(self, trans_a, other, trans_b, E::ONE, E::ZERO);
        out
    }

    /// `self = alpha * op(a) * op(b) + beta * self`.
    pub fn gemm_accum(
        &mut self,
        a: &Self,
        trans_a: bool,
        b: &Self,
        trans_b: bool,
        alpha: E,
        beta: E,
    ) {
        let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let n = if trans_b { b.rows } else { b.cols };
        let kb = if trans_b { b.cols } else { b.rows };
        assert_eq!(k, kb, "gemm inner-dimension mismatch");
        assert_eq!([self.rows, self.cols], [m, n], "gemm output shape mismatch");
        if m == 0 || n == 0 {
            return;
        }
        let (rsa, csa) = if trans_a {
            (1isize, a.cols as isize)
        } else {
            (a.cols as isize, 1isize)
        };
        let (rsb, csb) = if trans_b {
            (1isize, b.cols as isize)
        } else {
            (b.cols as isize, 1isize)
        };
        if k == 0 {
            // Kernel contract requires k >= 1; an empty contraction is beta-scaling only.
            self.scale_assign(beta);
            return;
        }
        unsafe {
            E::gemm(
                m,
                k,
                n,
                alpha,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                beta,
                self.data.as_mut_ptr(),
                self.cols as isize,
                1,
            );
        }
    }
}

impl<E: Elem> fmt::Debug for TensorOf<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TensorOf[{} x {}]", self.rows, self.cols)?;
        if self.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}
