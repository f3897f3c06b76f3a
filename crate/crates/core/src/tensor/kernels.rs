//! Raw numeric kernels shared by the forward and backward rules.

use super::{lit, Real};

/// Logical matrix view over a row-major buffer, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// The transpose of this view, without copying.
    pub fn t(self) -> Self {
        Mat {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            transposed: !self.transposed,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out (+)= a · b` where `out` is row-major `a.rows × b.cols`.
pub(crate) fn gemm_into<T: Real>(a: Mat<'_, T>, b: Mat<'_, T>, out: &mut [T], accumulate: bool) {
    debug_assert_eq!(a.cols, b.rows);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        a.rows,
        a.cols,
        b.cols,
        T::one(),
        a.data,
        rsa,
        csa,
        b.data,
        rsb,
        csb,
        beta,
        out,
        b.cols as isize,
        1,
    );
}

pub(crate) fn gemm<T: Real>(a: Mat<'_, T>, b: Mat<'_, T>) -> Vec<T> {
    let mut out = vec![T::zero(); a.rows * b.cols];
    if a.cols == 0 {
        return out;
    }
    gemm_into(a, b, &mut out, false);
    out
}

/// Softmax over `n`-long slices laid out as `[outer, n, inner]`.
pub(crate) fn softmax<T: Real>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..n {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                sum = sum + e;
            }
            for j in 0..n {
                out[at(j)] = out[at(j)] / sum;
            }
        }
    }
    out
}

/// Per-row mean and reciprocal standard deviation over the last axis.
pub(crate) fn row_moments<T: Real>(row: &[T], eps: T) -> (T, T) {
    let d = lit::<T>(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
    (mean, (var + eps).sqrt().recip())
}

/// Corner indices and weights for one bilinear lookup.
///
/// Cell `(i, j)` of an `h × w` grid has its center at normalized
/// `((j + 0.5) / w, (i + 0.5) / h)`; coordinates beyond the outermost centers
/// are clamped onto them. `dx`/`dy` are d(pixel coordinate)/d(normalized
/// coordinate), zero where clamping is active.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTap<T> {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
    pub wy: T,
    pub wx: T,
    pub dy: T,
    pub dx: T,
}

pub(crate) fn bilinear_tap<T: Real>(h: usize, w: usize, x: T, y: T) -> BilinearTap<T> {
    let half = lit::<T>(0.5);
    let axis = |coord: T, size: usize| -> (usize, usize, T, T) {
        let scale = lit::<T>(size as f64);
        let mut p = coord * scale - half;
        // Snap round-off so that cell centers hit their cell exactly.
        let nearest = p.round();
        if (p - nearest).abs() <= lit::<T>(4.0) * T::epsilon() * nearest.abs().max(T::one()) {
            p = nearest;
        }
        let max = lit::<T>((size - 1) as f64);
        let (p, deriv) = if p <= T::zero() {
            (T::zero(), T::zero())
        } else if p >= max {
            (max, T::zero())
        } else {
            (p, scale)
        };
        let lo = p.floor();
        let i0 = lo.to_usize().unwrap_or(0).min(size - 1);
        let i1 = (i0 + 1).min(size - 1);
        (i0, i1, p - lo, deriv)
    };
    let (x0, x1, wx, dx) = axis(x, w);
    let (y0, y1, wy, dy) = axis(y, h);
    BilinearTap {
        y0,
        y1,
        x0,
        x1,
        wy,
        wx,
        dy,
        dx,
    }
}
