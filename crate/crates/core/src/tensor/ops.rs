use super::kernels::{self, bilinear_tap, gemm, Mat};
use super::tape::BackCtx;
use super::{lit, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Boxes produced by [`Var::refine_boxes`] stay inside `[BOX_EPS, 1 - BOX_EPS]`.
pub const BOX_EPS: f64 = 1e-5;

fn matrix_dims(op: &'static str, t: &Tensor<impl Real>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension(format!("{op} expects a matrix, got shape {s:?}"))),
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl<'t, T: Real> Var<'t, T> {
    fn unary<F, D>(self, f: F, df: D) -> Var<'t, T>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        self.tape
            .record(
                &[self],
                |v| {
                    let x = v[0];
                    Tensor::new(x.shape(), x.data().iter().map(|&a| f(a)).collect())
                },
                move |ctx: &BackCtx<'_, T>| {
                    let x = ctx.inputs[0].data();
                    let y = ctx.output.data();
                    let g = ctx
                        .grad
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(&g, (&x, &y))| g * df(x, y))
                        .collect();
                    vec![Some(g)]
                },
            )
            .expect("elementwise op is shape-preserving")
    }

    fn binary<F, DA, DB>(self, rhs: Var<'t, T>, op: &'static str, f: F, da: DA, db: DB) -> Result<Var<'t, T>>
    where
        F: Fn(T, T) -> T,
        DA: Fn(T, T, T) -> T + 'static,
        DB: Fn(T, T, T) -> T + 'static,
    {
        self.tape.record(
            &[self, rhs],
            |v| {
                same_shape(op, v[0], v[1])?;
                let data = v[0].data().iter().zip(v[1].data()).map(|(&a, &b)| f(a, b)).collect();
                Tensor::new(v[0].shape(), data)
            },
            move |ctx: &BackCtx<'_, T>| {
                let a = ctx.inputs[0].data();
                let b = ctx.inputs[1].data();
                let y = ctx.output.data();
                let grad_for = |d: &dyn Fn(T, T, T) -> T| -> Vec<T> {
                    (0..a.len()).map(|i| ctx.grad[i] * d(a[i], b[i], y[i])).collect()
                };
                vec![
                    ctx.needs[0].then(|| grad_for(&da)),
                    ctx.needs[1].then(|| grad_for(&db)),
                ]
            },
        )
    }

    /// Matrix product `[m×k] · [k×n]`.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.record(
            &[self, rhs],
            |v| {
                let (m, k) = matrix_dims("matmul", v[0])?;
                let (k2, n) = matrix_dims("matmul", v[1])?;
                if k != k2 {
                    return Err(Error::shape("matmul", v[0].shape(), v[1].shape()));
                }
                let out = gemm(Mat::new(v[0].data(), m, k), Mat::new(v[1].data(), k, n));
                Tensor::new(vec![m, n], out)
            },
            |ctx: &BackCtx<'_, T>| {
                let (m, k) = (ctx.inputs[0].shape()[0], ctx.inputs[0].shape()[1]);
                let n = ctx.inputs[1].shape()[1];
                let g = Mat::new(ctx.grad, m, n);
                let a = Mat::new(ctx.inputs[0].data(), m, k);
                let b = Mat::new(ctx.inputs[1].data(), k, n);
                vec![
                    ctx.needs[0].then(|| gemm(g, b.t())),
                    ctx.needs[1].then(|| gemm(a.t(), g)),
                ]
            },
        )
    }

    /// `self · rhsᵀ` for `[m×k]` and `[n×k]`.
    pub fn matmul_nt(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.record(
            &[self, rhs],
            |v| {
                let (m, k) = matrix_dims("matmul_nt", v[0])?;
                let (n, k2) = matrix_dims("matmul_nt", v[1])?;
                if k != k2 {
                    return Err(Error::shape("matmul_nt", v[0].shape(), v[1].shape()));
                }
                let out = gemm(Mat::new(v[0].data(), m, k), Mat::new(v[1].data(), n, k).t());
                Tensor::new(vec![m, n], out)
            },
            |ctx: &BackCtx<'_, T>| {
                let (m, k) = (ctx.inputs[0].shape()[0], ctx.inputs[0].shape()[1]);
                let n = ctx.inputs[1].shape()[0];
                let g = Mat::new(ctx.grad, m, n);
                let a = Mat::new(ctx.inputs[0].data(), m, k);
                let b = Mat::new(ctx.inputs[1].data(), n, k);
                vec![
                    ctx.needs[0].then(|| gemm(g, b)),
                    ctx.needs[1].then(|| gemm(g.t(), a)),
                ]
            },
        )
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        self.tape.record(
            &[self],
            |v| {
                let (r, c) = matrix_dims("transpose", v[0])?;
                let x = v[0].data();
                let data = (0..r * c).map(|i| x[(i % r) * c + i / r]).collect();
                Tensor::new(vec![c, r], data)
            },
            |ctx: &BackCtx<'_, T>| {
                let (r, c) = (ctx.inputs[0].shape()[0], ctx.inputs[0].shape()[1]);
                let g = ctx.grad;
                vec![Some((0..r * c).map(|i| g[(i % c) * r + i / c]).collect())]
            },
        )
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "add", |a, b| a + b, |_, _, _| T::one(), |_, _, _| T::one())
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "sub", |a, b| a - b, |_, _, _| T::one(), |_, _, _| -T::one())
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "mul", |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "div", |a, b| a / b, |_, b, _| b.recip(), |_, b, y| -y / b)
    }

    /// Elementwise minimum; ties send the gradient to `self`.
    pub fn minimum(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(
            rhs,
            "minimum",
            |a, b| if a <= b { a } else { b },
            |a, b, _| if a <= b { T::one() } else { T::zero() },
            |a, b, _| if a <= b { T::zero() } else { T::one() },
        )
    }

    /// Elementwise maximum; ties send the gradient to `self`.
    pub fn maximum(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(
            rhs,
            "maximum",
            |a, b| if a >= b { a } else { b },
            |a, b, _| if a >= b { T::one() } else { T::zero() },
            |a, b, _| if a >= b { T::zero() } else { T::one() },
        )
    }

    /// Adds a `[d]` vector to every row of a `[..×d]` tensor.
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.record(
            &[self, bias],
            |v| {
                let d = v[0].last_dim();
                if v[1].numel() != d {
                    return Err(Error::shape("add_bias", v[0].shape(), v[1].shape()));
                }
                let b = v[1].data();
                let data = v[0].data().iter().enumerate().map(|(i, &x)| x + b[i % d]).collect();
                Tensor::new(v[0].shape(), data)
            },
            |ctx: &BackCtx<'_, T>| {
                let d = ctx.inputs[1].numel();
                let gb = ctx.needs[1].then(|| {
                    let mut gb = vec![T::zero(); d];
                    for row in ctx.grad.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
                    }
                    gb
                });
                vec![ctx.needs[0].then(|| ctx.grad.to_vec()), gb]
            },
        )
    }

    /// Multiplies row `i` of a `[r×d]` tensor by `col[i]`.
    pub fn mul_col(self, col: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.record(
            &[self, col],
            |v| {
                let d = v[0].last_dim();
                if v[1].numel() != v[0].rows() {
                    return Err(Error::shape("mul_col", v[0].shape(), v[1].shape()));
                }
                let c = v[1].data();
                let data = v[0].data().iter().enumerate().map(|(i, &x)| x * c[i / d]).collect();
                Tensor::new(v[0].shape(), data)
            },
            |ctx: &BackCtx<'_, T>| {
                let x = ctx.inputs[0].data();
                let c = ctx.inputs[1].data();
                let d = ctx.inputs[0].last_dim();
                let gx = ctx.needs[0].then(|| ctx.grad.iter().enumerate().map(|(i, &g)| g * c[i / d]).collect());
                let gc = ctx.needs[1].then(|| {
                    (0..c.len())
                        .map(|r| (0..d).map(|j| ctx.grad[r * d + j] * x[r * d + j]).sum())
                        .collect()
                });
                vec![gx, gc]
            },
        )
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        let c = lit::<T>(c);
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let c = lit::<T>(c);
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    /// `ln σ(x)`, stable for large `|x|`.
    pub fn log_sigmoid(self) -> Var<'t, T> {
        self.unary(
            |x| {
                // ln σ(x) = min(x, 0) - ln(1 + e^{-|x|})
                x.min(T::zero()) - (-x.abs()).exp().ln_1p()
            },
            |x, _| sigmoid(-x),
        )
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'t, T> {
        self.unary(|x| x.ln(), |x, _| x.recip())
    }

    pub fn abs(self) -> Var<'t, T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn powf(self, p: f64) -> Var<'t, T> {
        let pt = lit::<T>(p);
        self.unary(
            move |x| x.powf(pt),
            move |x, _| if p == 0.0 { T::zero() } else { pt * x.powf(pt - T::one()) },
        )
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t, T> {
        let (lo, hi) = (lit::<T>(lo), lit::<T>(hi));
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let layout = move |shape: &[usize]| -> Result<(usize, usize, usize)> {
            if axis >= shape.len() || shape[axis] == 0 {
                return Err(Error::Dimension(format!("softmax axis {axis} on shape {shape:?}")));
            }
            let outer = shape[..axis].iter().product();
            let inner = shape[axis + 1..].iter().product();
            Ok((outer, shape[axis], inner))
        };
        self.tape.record(
            &[self],
            |v| {
                let x = v[0];
                if !x.all_finite() {
                    return Err(Error::Numeric("softmax input is not finite".into()));
                }
                let (outer, n, inner) = layout(x.shape())?;
                Tensor::new(x.shape(), kernels::softmax(x.data(), outer, n, inner))
            },
            move |ctx: &BackCtx<'_, T>| {
                let (outer, n, inner) = layout(ctx.output.shape()).expect("validated in forward");
                let y = ctx.output.data();
                let g = ctx.grad;
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            },
        )
    }

    /// Normalizes every last-axis vector to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let eps = lit::<T>(eps);
        self.tape.record(
            &[self, gain, bias],
            |v| {
                let d = v[0].last_dim();
                if v[1].numel() != d || v[2].numel() != d {
                    return Err(Error::shape("layer_norm", v[0].shape(), v[1].shape()));
                }
                let (g, b) = (v[1].data(), v[2].data());
                let mut out = Vec::with_capacity(v[0].numel());
                for row in v[0].data().chunks(d) {
                    let (mean, inv) = kernels::row_moments(row, eps);
                    out.extend(row.iter().enumerate().map(|(j, &x)| (x - mean) * inv * g[j] + b[j]));
                }
                Tensor::new(v[0].shape(), out)
            },
            move |ctx: &BackCtx<'_, T>| {
                let x = ctx.inputs[0].data();
                let gain = ctx.inputs[1].data();
                let d = gain.len();
                let dn = lit::<T>(d as f64);
                let mut gx = ctx.needs[0].then(|| vec![T::zero(); x.len()]);
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for (r, row) in x.chunks(d).enumerate() {
                    let (mean, inv) = kernels::row_moments(row, eps);
                    let grow = &ctx.grad[r * d..(r + 1) * d];
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * inv;
                        dxhat[j] = grow[j] * gain[j];
                        gg[j] = gg[j] + grow[j] * xhat[j];
                        gb[j] = gb[j] + grow[j];
                    }
                    if let Some(gx) = gx.as_mut() {
                        let m1 = dxhat.iter().copied().sum::<T>() / dn;
                        let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for j in 0..d {
                            gx[r * d + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                vec![gx, ctx.needs[1].then_some(gg), ctx.needs[2].then_some(gb)]
            },
        )
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(self) -> Var<'t, T> {
        self.tape
            .record(
                &[self],
                |v| Ok(Tensor::scalar(v[0].data().iter().copied().sum())),
                |ctx: &BackCtx<'_, T>| vec![Some(vec![ctx.grad[0]; ctx.inputs[0].numel()])],
            )
            .expect("sum is total")
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let shape = shape.into();
        self.tape.record(
            &[self],
            move |v| v[0].clone().reshape(shape),
            |ctx: &BackCtx<'_, T>| vec![Some(ctx.grad.to_vec())],
        )
    }

    /// Rows `start..end` of a `[r×d]` tensor.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        self.tape.record(
            &[self],
            |v| {
                let (r, d) = matrix_dims("slice_rows", v[0])?;
                if start > end || end > r {
                    return Err(Error::Dimension(format!("row slice {start}..{end} of {r} rows")));
                }
                Tensor::new(vec![end - start, d], v[0].data()[start * d..end * d].to_vec())
            },
            move |ctx: &BackCtx<'_, T>| {
                let d = ctx.inputs[0].last_dim();
                let mut g = vec![T::zero(); ctx.inputs[0].numel()];
                g[start * d..end * d].copy_from_slice(ctx.grad);
                vec![Some(g)]
            },
        )
    }

    /// Rows picked by `index` (repeats allowed).
    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'t, T>> {
        let index = index.to_vec();
        let idx = index.clone();
        self.tape.record(
            &[self],
            move |v| {
                let (r, d) = matrix_dims("gather_rows", v[0])?;
                if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
                    return Err(Error::Dimension(format!("row index {bad} out of {r}")));
                }
                let x = v[0].data();
                let data = idx.iter().flat_map(|&i| x[i * d..(i + 1) * d].iter().copied()).collect();
                Tensor::new(vec![idx.len(), d], data)
            },
            move |ctx: &BackCtx<'_, T>| {
                let d = ctx.inputs[0].last_dim();
                let mut g = vec![T::zero(); ctx.inputs[0].numel()];
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..d {
                        g[i * d + j] = g[i * d + j] + ctx.grad[k * d + j];
                    }
                }
                vec![Some(g)]
            },
        )
    }

    /// Stacks `[rᵢ×d]` blocks vertically.
    pub fn concat_rows(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat_rows of nothing".into()))?;
        first.tape.record(
            parts,
            |v| {
                let d = v[0].last_dim();
                let mut data = Vec::new();
                let mut rows = 0;
                for t in v {
                    let (r, c) = matrix_dims("concat_rows", t)?;
                    if c != d {
                        return Err(Error::shape("concat_rows", v[0].shape(), t.shape()));
                    }
                    rows += r;
                    data.extend_from_slice(t.data());
                }
                Tensor::new(vec![rows, d], data)
            },
            |ctx: &BackCtx<'_, T>| {
                let mut offset = 0;
                ctx.inputs
                    .iter()
                    .zip(ctx.needs)
                    .map(|(t, &need)| {
                        let n = t.numel();
                        let g = need.then(|| ctx.grad[offset..offset + n].to_vec());
                        offset += n;
                        g
                    })
                    .collect()
            },
        )
    }

    /// Columns `start..end` of a `[r×d]` tensor.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        self.tape.record(
            &[self],
            |v| {
                let (r, d) = matrix_dims("slice_cols", v[0])?;
                if start > end || end > d {
                    return Err(Error::Dimension(format!("column slice {start}..{end} of {d} columns")));
                }
                let x = v[0].data();
                let data = (0..r).flat_map(|i| x[i * d + start..i * d + end].iter().copied()).collect();
                Tensor::new(vec![r, end - start], data)
            },
            move |ctx: &BackCtx<'_, T>| {
                let d = ctx.inputs[0].last_dim();
                let w = end - start;
                let mut g = vec![T::zero(); ctx.inputs[0].numel()];
                for (i, row) in ctx.grad.chunks(w.max(1)).enumerate().take(ctx.inputs[0].rows()) {
                    g[i * d + start..i * d + end].copy_from_slice(&row[..w]);
                }
                vec![Some(g)]
            },
        )
    }

    /// Places `[r×dᵢ]` blocks side by side.
    pub fn concat_cols(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat_cols of nothing".into()))?;
        first.tape.record(
            parts,
            |v| {
                let r = v[0].rows();
                let mut widths = Vec::with_capacity(v.len());
                for t in v {
                    let (rt, c) = matrix_dims("concat_cols", t)?;
                    if rt != r {
                        return Err(Error::shape("concat_cols", v[0].shape(), t.shape()));
                    }
                    widths.push(c);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(r * total);
                for i in 0..r {
                    for (t, &c) in v.iter().zip(&widths) {
                        data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
                    }
                }
                Tensor::new(vec![r, total], data)
            },
            |ctx: &BackCtx<'_, T>| {
                let total = ctx.output.last_dim();
                let r = ctx.output.rows();
                let mut offset = 0;
                ctx.inputs
                    .iter()
                    .zip(ctx.needs)
                    .map(|(t, &need)| {
                        let c = t.last_dim();
                        let g = need.then(|| {
                            (0..r)
                                .flat_map(|i| ctx.grad[i * total + offset..i * total + offset + c].iter().copied())
                                .collect()
                        });
                        offset += c;
                        g
                    })
                    .collect()
            },
        )
    }

    /// Bilinear lookup of `[P×2]` normalized `(x, y)` points in an
    /// `[H×W×d]` grid, returning `[P×d]`. Gradients reach both the grid and
    /// the points.
    pub fn bilinear_sample(grid: Var<'t, T>, points: Var<'t, T>) -> Result<Var<'t, T>> {
        let dims = |g: &Tensor<T>, p: &Tensor<T>| -> Result<(usize, usize, usize, usize)> {
            let [h, w, d] = g.shape() else {
                return Err(Error::Dimension(format!("bilinear grid must be H×W×d, got {:?}", g.shape())));
            };
            let [np, 2] = p.shape() else {
                return Err(Error::Dimension(format!("bilinear points must be P×2, got {:?}", p.shape())));
            };
            if *h == 0 || *w == 0 {
                return Err(Error::Dimension("bilinear grid is empty".into()));
            }
            Ok((*h, *w, *d, *np))
        };
        grid.tape.record(
            &[grid, points],
            |v| {
                let (h, w, d, np) = dims(v[0], v[1])?;
                if !v[1].all_finite() {
                    return Err(Error::Numeric("non-finite sampling point".into()));
                }
                let g = v[0].data();
                let pts = v[1].data();
                let mut out = vec![T::zero(); np * d];
                for p in 0..np {
                    let tap = bilinear_tap(h, w, pts[2 * p], pts[2 * p + 1]);
                    let one = T::one();
                    let corners = [
                        (tap.y0, tap.x0, (one - tap.wy) * (one - tap.wx)),
                        (tap.y0, tap.x1, (one - tap.wy) * tap.wx),
                        (tap.y1, tap.x0, tap.wy * (one - tap.wx)),
                        (tap.y1, tap.x1, tap.wy * tap.wx),
                    ];
                    let dst = &mut out[p * d..(p + 1) * d];
                    for (yy, xx, wgt) in corners {
                        if wgt == T::zero() {
                            continue;
                        }
                        let src = &g[(yy * w + xx) * d..(yy * w + xx + 1) * d];
                        dst.iter_mut().zip(src).for_each(|(o, &s)| *o = *o + wgt * s);
                    }
                }
                Tensor::new(vec![np, d], out)
            },
            move |ctx: &BackCtx<'_, T>| {
                let (h, w, d, np) = dims(ctx.inputs[0], ctx.inputs[1]).expect("validated in forward");
                let g = ctx.inputs[0].data();
                let pts = ctx.inputs[1].data();
                let mut ggrid = ctx.needs[0].then(|| vec![T::zero(); g.len()]);
                let mut gpts = ctx.needs[1].then(|| vec![T::zero(); pts.len()]);
                let one = T::one();
                for p in 0..np {
                    let tap = bilinear_tap(h, w, pts[2 * p], pts[2 * p + 1]);
                    let up = &ctx.grad[p * d..(p + 1) * d];
                    let cell = |yy: usize, xx: usize| &g[(yy * w + xx) * d..(yy * w + xx + 1) * d];
                    if let Some(gg) = ggrid.as_mut() {
                        let corners = [
                            (tap.y0, tap.x0, (one - tap.wy) * (one - tap.wx)),
                            (tap.y0, tap.x1, (one - tap.wy) * tap.wx),
                            (tap.y1, tap.x0, tap.wy * (one - tap.wx)),
                            (tap.y1, tap.x1, tap.wy * tap.wx),
                        ];
                        for (yy, xx, wgt) in corners {
                            let base = (yy * w + xx) * d;
                            for j in 0..d {
                                gg[base + j] = gg[base + j] + wgt * up[j];
                            }
                        }
                    }
                    if let Some(gp) = gpts.as_mut() {
                        let (v00, v01) = (cell(tap.y0, tap.x0), cell(tap.y0, tap.x1));
                        let (v10, v11) = (cell(tap.y1, tap.x0), cell(tap.y1, tap.x1));
                        let mut sx = T::zero();
                        let mut sy = T::zero();
                        for j in 0..d {
                            let ddx = (one - tap.wy) * (v01[j] - v00[j]) + tap.wy * (v11[j] - v10[j]);
                            let ddy = (one - tap.wx) * (v10[j] - v00[j]) + tap.wx * (v11[j] - v01[j]);
                            sx = sx + up[j] * ddx;
                            sy = sy + up[j] * ddy;
                        }
                        gp[2 * p] = sx * tap.dx;
                        gp[2 * p + 1] = sy * tap.dy;
                    }
                }
                vec![ggrid, gpts]
            },
        )
    }

    /// Moves reference boxes by offsets in logit space:
    /// `σ(σ⁻¹(reference) + offsets)`, clamped to `[BOX_EPS, 1 - BOX_EPS]`.
    ///
    /// The result is written as `reference + Δ` with `Δ` exactly zero for a
    /// zero offset, so a zero box head reproduces its reference bit for bit.
    pub fn refine_boxes(reference: Var<'t, T>, offsets: Var<'t, T>) -> Result<Var<'t, T>> {
        let (lo, hi) = (lit::<T>(BOX_EPS), lit::<T>(1.0 - BOX_EPS));
        reference.tape.record(
            &[reference, offsets],
            move |v| {
                same_shape("refine_boxes", v[0], v[1])?;
                let data = v[0]
                    .data()
                    .iter()
                    .zip(v[1].data())
                    .map(|(&r, &o)| shifted_sigmoid(r, o).max(lo).min(hi))
                    .collect();
                Tensor::new(v[0].shape(), data)
            },
            move |ctx: &BackCtx<'_, T>| {
                let r = ctx.inputs[0].data();
                let o = ctx.inputs[1].data();
                let one = T::one();
                let mut gr = vec![T::zero(); r.len()];
                let mut go = vec![T::zero(); r.len()];
                for i in 0..r.len() {
                    let s = shifted_sigmoid(r[i], o[i]);
                    if s < lo || s > hi {
                        continue;
                    }
                    let ds = s * (one - s);
                    go[i] = ctx.grad[i] * ds;
                    gr[i] = ctx.grad[i] * ds / (r[i] * (one - r[i]));
                }
                vec![ctx.needs[0].then_some(gr), ctx.needs[1].then_some(go)]
            },
        )
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `σ(σ⁻¹(r) + δ)` evaluated as `r + Δ` with `Δ(r, 0) = 0` exactly.
fn shifted_sigmoid<T: Real>(r: T, delta: T) -> T {
    let one = T::one();
    if delta >= T::zero() {
        let e = (-delta).exp();
        let num = r * (one - r) * (one - e);
        r + num / (r + (one - r) * e)
    } else {
        let em1 = delta.exp_m1();
        let num = r * (one - r) * em1;
        r + num / (one + r * em1)
    }
}
