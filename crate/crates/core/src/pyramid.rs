//! Toy backbone: patch embedding at stride 4 followed by pooled projections
//! down to stride 32, plus the 2-D sine positional encoding shared by grid
//! tokens and sampled points.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{lit, BackCtx, Real, Tensor, Var};

/// Stride of the finest pyramid level.
pub const BASE_STRIDE: usize = 4;
/// Strides of the four pyramid levels, finest first.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];
/// Largest stride; image sides must be multiples of it.
pub const MAX_STRIDE: usize = 32;

/// RGB image with values in `[0, 1]`, stored `H×W×3` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || height % MAX_STRIDE != 0 || width % MAX_STRIDE != 0 {
            return Err(Error::Dimension(format!(
                "image sides must be positive multiples of {MAX_STRIDE}, got {height}×{width}"
            )));
        }
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::Dimension(format!(
                "{height}×{width}×3 image needs {} values, got {}",
                height * width * Self::CHANNELS,
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Image::new(height, width, vec![0.0; height * width * Self::CHANNELS])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Mirror left-right.
    pub fn flipped(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(&self.pixel(y, x));
            }
        }
        Image {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Flattens non-overlapping `stride×stride` patches into rows of a
/// `[(H/stride)·(W/stride)] × [stride·stride·3]` matrix, in row-major patch
/// order with pixels row-major inside each patch.
pub fn extract_patches<T: Real>(img: &Image, stride: usize) -> Result<Tensor<T>> {
    if stride == 0 || img.height % stride != 0 || img.width % stride != 0 {
        return Err(Error::Dimension(format!(
            "{}×{} image is not divisible by stride {stride}",
            img.height, img.width
        )));
    }
    let (gh, gw) = (img.height / stride, img.width / stride);
    let patch = stride * stride * 3;
    let mut data = Vec::with_capacity(gh * gw * patch);
    for py in 0..gh {
        for px in 0..gw {
            for y in py * stride..(py + 1) * stride {
                let start = (y * img.width + px * stride) * 3;
                data.extend(img.data[start..start + stride * 3].iter().map(|&v| lit::<T>(v as f64)));
            }
        }
    }
    Tensor::new(vec![gh * gw, patch], data)
}

/// Projects each `stride×stride` patch to `d` features:
/// `[H/stride × W/stride × d]`.
pub fn patch_embed<'t, T: Real>(
    img: &Image,
    stride: usize,
    weight: Var<'t, T>,
    bias: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let patches = extract_patches::<T>(img, stride)?;
    let d = weight.shape().last().copied().unwrap_or(0);
    let tape = weight.tape();
    let out = tape.constant(patches).matmul(weight)?.add_bias(bias)?;
    out.reshape(vec![img.height / stride, img.width / stride, d])
}

/// Learned map applied after each 2×2 pooling step.
#[derive(Clone, Copy, Debug)]
pub struct LevelProjection<'t, T: Real> {
    pub weight: Var<'t, T>,
    pub bias: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct PyramidLevel<'t, T: Real> {
    pub stride: usize,
    /// `[H_s × W_s × d]`.
    pub grid: Var<'t, T>,
}

impl<T: Real> PyramidLevel<'_, T> {
    pub fn height(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[1]
    }
}

/// Feature maps at strictly increasing strides sharing one feature width.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<'t, T: Real> {
    pub levels: Vec<PyramidLevel<'t, T>>,
}

impl<'t, T: Real> FeaturePyramid<'t, T> {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// The coarsest level.
    pub fn coarsest(&self) -> &PyramidLevel<'t, T> {
        self.levels.last().expect("pyramid has levels")
    }

    pub fn token_count(&self) -> usize {
        self.levels.iter().map(|l| l.height() * l.width()).sum()
    }
}

/// Builds the pyramid from the stride-4 map: each coarser level is a 2×2
/// average pool of the previous one followed by `relu(x·W + b)`.
pub fn build_pyramid<'t, T: Real>(
    base: Var<'t, T>,
    projections: &[LevelProjection<'t, T>],
) -> Result<FeaturePyramid<'t, T>> {
    let shape = base.shape();
    let [h, w, d] = shape[..] else {
        return Err(Error::Dimension(format!("pyramid base must be H×W×d, got {shape:?}")));
    };
    let factor = 1usize << projections.len();
    if h < factor || w < factor || h % factor != 0 || w % factor != 0 {
        return Err(Error::Dimension(format!(
            "pyramid base {h}×{w} cannot be pooled {} times (needs multiples of {factor})",
            projections.len()
        )));
    }
    let mut levels = vec![PyramidLevel {
        stride: BASE_STRIDE,
        grid: base,
    }];
    let mut current = base;
    let (mut ch, mut cw) = (h, w);
    for (i, proj) in projections.iter().enumerate() {
        ch /= 2;
        cw /= 2;
        let pooled = avg_pool2(current)?.reshape(vec![ch * cw, d])?;
        current = pooled
            .matmul(proj.weight)?
            .add_bias(proj.bias)?
            .relu()
            .reshape(vec![ch, cw, d])?;
        levels.push(PyramidLevel {
            stride: BASE_STRIDE << (i + 1),
            grid: current,
        });
    }
    Ok(FeaturePyramid { levels })
}

/// 2×2 average pooling of an `[H×W×d]` grid.
pub fn avg_pool2<'t, T: Real>(grid: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = grid.shape();
    let [h, w, d] = shape[..] else {
        return Err(Error::Dimension(format!("pooling needs H×W×d, got {shape:?}")));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!("cannot 2×2-pool a {h}×{w} grid")));
    }
    // Pooling is linear: express it as a sum of four strided row gathers.
    let (oh, ow) = (h / 2, w / 2);
    let flat = grid.reshape(vec![h * w, d])?;
    let mut acc: Option<Var<'t, T>> = None;
    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let idx: Vec<usize> = (0..oh * ow)
            .map(|o| (2 * (o / ow) + dy) * w + 2 * (o % ow) + dx)
            .collect();
        let part = flat.gather_rows(&idx)?;
        acc = Some(match acc {
            None => part,
            Some(a) => a.add(part)?,
        });
    }
    acc.expect("four taps").scale(0.25).reshape(vec![oh, ow, d])
}

/// Token counts for a set of strides over an `h×w` image.
pub fn tokens_at_strides(h: usize, w: usize, strides: &[usize]) -> usize {
    strides.iter().map(|s| (h / s) * (w / s)).sum()
}

/// Temperature of the sine encoding.
pub const POSITION_TEMPERATURE: f64 = 20.0;

/// 2-D sine/cosine encoding of one normalized point: the first `d/2`
/// components encode `y`, the rest `x`; within each half, frequency `k`
/// contributes `(sin, cos)` of `2π·coord / T^(2k/(d/2))`.
pub fn sine_encode(x: f64, y: f64, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Dimension(format!(
            "positional width must be a positive multiple of 4, got {d}"
        )));
    }
    let freqs = frequencies(d);
    let mut out = Vec::with_capacity(d);
    for coord in [y, x] {
        for &freq in &freqs {
            let phase = coord * freq;
            out.push(phase.sin());
            out.push(phase.cos());
        }
    }
    Ok(out)
}

/// Normalized center of grid cell `(i, j)` in an `h×w` grid, as `(x, y)`.
pub fn cell_center(i: usize, j: usize, h: usize, w: usize) -> (f64, f64) {
    ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64)
}

/// Encodings of all `h·w` cell centers, row-major: `[h·w × d]`.
pub fn grid_positions<T: Real>(h: usize, w: usize, d: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(h * w * d);
    for i in 0..h {
        for j in 0..w {
            let (x, y) = cell_center(i, j, h, w);
            data.extend(sine_encode(x, y, d)?.into_iter().map(lit::<T>));
        }
    }
    Tensor::new(vec![h * w, d], data)
}

fn frequencies(d: usize) -> Vec<f64> {
    let half = d / 2;
    (0..half / 2)
        .map(|k| 2.0 * PI / POSITION_TEMPERATURE.powf(2.0 * k as f64 / half as f64))
        .collect()
}

/// Encodings of `[P×2]` points held on a tape, differentiable with respect
/// to the coordinates. Values match [`point_positions`] exactly.
pub fn point_positions_var<'t, T: Real>(points: Var<'t, T>, d: usize) -> Result<Var<'t, T>> {
    points.tape().record(
        &[points],
        move |v| {
            let [_, 2] = v[0].shape() else {
                return Err(Error::Dimension(format!("points must be P×2, got {:?}", v[0].shape())));
            };
            let pts: Vec<(f64, f64)> = v[0]
                .to_f64_vec()
                .chunks(2)
                .map(|c| (c[0], c[1]))
                .collect();
            point_positions::<T>(&pts, d)
        },
        move |ctx: &BackCtx<'_, T>| {
            let freqs = frequencies(d);
            let quarter = freqs.len();
            let out = ctx.output.data();
            let n = ctx.inputs[0].numel() / 2;
            let mut g = vec![T::zero(); 2 * n];
            for p in 0..n {
                let row = p * d;
                // First half encodes y (coordinate 1), second half x (coordinate 0).
                for (half, coord) in [(0, 1), (1, 0)] {
                    let mut acc = T::zero();
                    for (k, &f) in freqs.iter().enumerate() {
                        let at = row + half * 2 * quarter + 2 * k;
                        let f = lit::<T>(f);
                        acc = acc + ctx.grad[at] * f * out[at + 1] - ctx.grad[at + 1] * f * out[at];
                    }
                    g[2 * p + coord] = acc;
                }
            }
            vec![Some(g)]
        },
    )
}

/// Encodings of arbitrary points: `[P × d]`.
pub fn point_positions<T: Real>(points: &[(f64, f64)], d: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(points.len() * d);
    for &(x, y) in points {
        data.extend(sine_encode(x, y, d)?.into_iter().map(lit::<T>));
    }
    Tensor::new(vec![points.len(), d], data)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{check_gradients, GradCheckOptions, Tape};

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::new(h, w, (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn image_requires_stride_multiple() {
        assert!(matches!(Image::zeros(48, 64), Err(Error::Dimension(_))));
        assert!(Image::zeros(64, 32).is_ok());
    }

    #[test]
    fn patch_embed_shapes_and_zero_case() {
        let tape = Tape::<f64>::new();
        let img = Image::zeros(32, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = tape.param(Tensor::from_fn(vec![48, 8], |_| rng.gen_range(-1.0..1.0)));
        let b = tape.param(Tensor::zeros(vec![8]));
        let out = patch_embed(&img, 4, w, b).unwrap();
        assert_eq!(out.shape(), vec![8, 8, 8]);
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_embed_rejects_indivisible_stride() {
        let tape = Tape::<f64>::new();
        let img = Image::zeros(32, 32).unwrap();
        let w = tape.param(Tensor::zeros(vec![75, 8]));
        let b = tape.param(Tensor::zeros(vec![8]));
        assert!(matches!(patch_embed(&img, 5, w, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn patch_embed_matches_per_patch_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 32, 64);
        let (stride, d) = (4, 6);
        let w = Tensor::from_fn(vec![stride * stride * 3, d], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(vec![d], |_| rng.gen_range(-1.0..1.0));
        let tape = Tape::<f64>::new();
        let out = patch_embed(&img, stride, tape.param(w.clone()), tape.param(b.clone())).unwrap();
        let out = out.value();
        for py in 0..8 {
            for px in 0..16 {
                for c in 0..d {
                    let mut acc = b.data()[c];
                    let mut k = 0;
                    for y in 0..stride {
                        for x in 0..stride {
                            let pix = img.pixel(py * stride + y, px * stride + x);
                            for ch in pix {
                                acc += ch as f64 * w.data()[k * d + c];
                                k += 1;
                            }
                        }
                    }
                    let got = out.data()[(py * 16 + px) * d + c];
                    assert!((got - acc).abs() < 1e-6, "{got} vs {acc}");
                }
            }
        }
    }

    fn identity_projections<'t>(tape: &'t Tape<f64>, d: usize, n: usize) -> Vec<LevelProjection<'t, f64>> {
        (0..n)
            .map(|_| LevelProjection {
                weight: tape.param(Tensor::from_fn(vec![d, d], |i| if i % (d + 1) == 0 { 1.0 } else { 0.0 })),
                bias: tape.param(Tensor::zeros(vec![d])),
            })
            .collect()
    }

    #[test]
    fn pyramid_shapes_follow_stride_arithmetic() {
        let tape = Tape::<f64>::new();
        let base = tape.constant(Tensor::full(vec![64, 64, 4], 0.7));
        let pyr = build_pyramid(base, &identity_projections(&tape, 4, 3)).unwrap();
        let dims: Vec<_> = pyr.levels.iter().map(|l| (l.stride, l.height(), l.width())).collect();
        assert_eq!(dims, vec![(4, 64, 64), (8, 32, 32), (16, 16, 16), (32, 8, 8)]);
        for level in &pyr.levels {
            assert!(level.grid.value().data().iter().all(|&v| v == 0.7));
        }
        assert_eq!(pyr.token_count(), 4096 + 1024 + 256 + 64);
        // 85× the single-scale token count.
        assert_eq!(pyr.token_count(), 85 * 64 - 0);
        assert_eq!(tokens_at_strides(256, 256, &[4, 8, 16, 32]), 85 * 64);
        assert_eq!(tokens_at_strides(256, 256, &[8, 16, 32]), 21 * 64);
    }

    #[test]
    fn pyramid_rejects_small_base() {
        let tape = Tape::<f64>::new();
        let base = tape.constant(Tensor::zeros(vec![4, 4, 2]));
        assert!(matches!(
            build_pyramid(base, &identity_projections(&tape, 2, 3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn pyramid_gradient_check_on_coarsest_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let mut inputs = vec![Tensor::from_fn(vec![16, 16, d], |_| rng.gen_range(-1.0..1.0))];
        for _ in 0..3 {
            inputs.push(Tensor::from_fn(vec![d, d], |_| rng.gen_range(-1.0..1.0)));
            inputs.push(Tensor::from_fn(vec![d], |_| rng.gen_range(0.0..0.5)));
        }
        let direction = Tensor::from_fn(vec![2, 2, d], |_| rng.gen_range(-1.0..1.0));
        let report = check_gradients(
            |tape, v| {
                let projections: Vec<_> = v[1..]
                    .chunks(2)
                    .map(|p| LevelProjection { weight: p[0], bias: p[1] })
                    .collect();
                let pyr = build_pyramid(v[0], &projections)?;
                Ok(pyr.coarsest().grid.mul(tape.constant(direction.clone()))?.sum())
            },
            &inputs,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn point_encoding_equals_grid_encoding_at_centers() {
        let (h, w, d) = (5, 7, 16);
        let grid = grid_positions::<f64>(h, w, d).unwrap();
        for i in 0..h {
            for j in 0..w {
                let (x, y) = cell_center(i, j, h, w);
                let p = point_positions::<f64>(&[(x, y)], d).unwrap();
                assert_eq!(p.data(), grid.row(i * w + j));
            }
        }
        assert!(grid.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn point_encoding_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = Tensor::from_fn(vec![3, 2], |_| rng.gen_range(0.0..1.0));
        let direction = Tensor::from_fn(vec![3, 16], |_| rng.gen_range(-1.0..1.0));
        let report = check_gradients(
            |tape, v| Ok(point_positions_var(v[0], 16)?.mul(tape.constant(direction.clone()))?.sum()),
            &[pts],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn sine_encoding_rejects_bad_width() {
        assert!(matches!(sine_encode(0.1, 0.2, 6), Err(Error::Dimension(_))));
    }

    #[test]
    fn distinct_points_have_distinct_encodings() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut min_gap = f64::INFINITY;
        for _ in 0..10_000 {
            let a: (f64, f64) = (rng.gen(), rng.gen());
            let b: (f64, f64) = (rng.gen(), rng.gen());
            if a == b {
                continue;
            }
            let ea = sine_encode(a.0, a.1, 64).unwrap();
            let eb = sine_encode(b.0, b.1, 64).unwrap();
            let gap = ea.iter().zip(&eb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            min_gap = min_gap.min(gap);
        }
        assert!(min_gap > 0.0);
    }
}
