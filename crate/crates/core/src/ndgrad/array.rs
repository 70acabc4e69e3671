use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Floating-point element type of the compute core.
///
/// `f32` is the working precision; `f64` exists for the finite-difference
/// verification path.
pub trait Real: Float + FromPrimitive + Sum + Debug + Default + Send + Sync + 'static {
    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
}

macro_rules! check_extent {
    ($m:expr, $n:expr, $buf:expr, $rs:expr, $cs:expr) => {
        if $m > 0 && $n > 0 {
            let last = ($m as isize - 1) * $rs + ($n as isize - 1) * $cs;
            assert!(last >= 0 && (last as usize) < $buf.len(), "gemm operand out of bounds");
        }
    };
}

impl Real for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        check_extent!(m, k, a, rsa, csa);
        check_extent!(k, n, b, rsb, csb);
        check_extent!(m, n, c, rsc, csc);
        // SAFETY: all three operand extents were bounds-checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

impl Real for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        check_extent!(m, k, a, rsa, csa);
        check_extent!(k, n, b, rsb, csb);
        check_extent!(m, n, c, rsc, csc);
        // SAFETY: all three operand extents were bounds-checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

/// Dense `(batch, channels, height, width)` tensor, width fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Array4<T = f32> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Array4<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    /// Wraps `data`; panics if its length disagrees with `shape`.
    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    pub fn channels(&self) -> usize {
        self.shape[1]
    }
    pub fn height(&self) -> usize {
        self.shape[2]
    }
    pub fn width(&self) -> usize {
        self.shape[3]
    }
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }
    pub fn image_len(&self) -> usize {
        self.shape[1] * self.plane_len()
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
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// All channels of batch item `n`.
    pub fn image(&self, n: usize) -> &[T] {
        let len = self.image_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn image_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.image_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let len = self.plane_len();
        let start = (n * self.shape[1] + c) * len;
        &self.data[start..start + len]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Batch index of the first non-finite entry, if any.
    pub fn first_non_finite_batch(&self) -> Option<usize> {
        let len = self.image_len().max(1);
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|i| i / len)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Copy of batch items `range` as a new array.
    pub fn slice_batch(&self, start: usize, end: usize) -> Self {
        let len = self.image_len();
        Self {
            shape: [end - start, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[start * len..end * len].to_vec(),
        }
    }

    /// Stacks single images of identical shape along the batch axis.
    pub fn stack(items: &[&Self]) -> Self {
        assert!(!items.is_empty());
        let [_, c, h, w] = items[0].shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for item in items {
            assert_eq!(&item.shape[1..], &[c, h, w]);
            data.extend_from_slice(&item.data);
            n += item.shape[0];
        }
        Self {
            shape: [n, c, h, w],
            data,
        }
    }

    pub fn cast<U: Real>(&self) -> Array4<U> {
        Array4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }
}
