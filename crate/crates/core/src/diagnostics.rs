//! Finite-difference gradient checks over every operation class and over
//! the full staged pipeline, shared by the `gradcheck` command and the
//! acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::imfa::{dynamic_ffn, init_params, run_pipeline, ForwardOptions, ModelConfig};
use crate::matching::{deep_supervision, focal_loss, giou_rows, LossWeights, Targets};
use crate::params::BoundParams;
use crate::pyramid::{point_positions_var, Image};
use crate::tensor::{check_gradients, GradCheckOptions, Tape, Tensor, Var};
use crate::transformer::{mha, AttentionParams, LayerNorm, Linear};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub max_rel_err: f64,
    pub checked: usize,
    pub failing: usize,
    pub tol: f64,
}

type Check = Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>;

/// Uniform in `±[lo, hi]` with random sign, keeping inputs away from the
/// kinks of `relu`, `abs`, `min` and `max` at zero.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Projects any output onto a fixed random direction so every output
/// coordinate contributes to the checked scalar.
fn project<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = uniform(&mut rng, &out.shape(), -1.0, 1.0);
    Ok(out.mul(tape.constant(dir))?.sum())
}

fn run(name: &str, inputs: Vec<Tensor<f64>>, f: Check, opts: GradCheckOptions) -> Result<CheckResult> {
    let report = check_gradients(|tape, v| f(tape, v), &inputs, opts)?;
    Ok(CheckResult {
        name: name.to_string(),
        passed: report.passed(),
        max_rel_err: report.max_rel_err,
        checked: report.checked,
        failing: report.failing.len(),
        tol: report.tol,
    })
}

/// Grid points whose pixel coordinates stay at least 0.15 from cell
/// centers, where bilinear interpolation has kinks.
fn bilinear_points(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(vec![n, 2], |i| {
        let side = if i % 2 == 0 { w } else { h };
        let cell = rng.gen_range(0..side - 1) as f64;
        (cell + 0.5 + rng.gen_range(0.15..0.85)) / side as f64
    })
}

/// Gradient checks of every differentiable operation at relative
/// tolerance 1e-4 in double precision.
pub fn op_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions::default();
    let mut out = Vec::new();
    macro_rules! check {
        ($name:expr, [$($input:expr),*], |$tape:ident, $v:ident| $body:expr) => {{
            let inputs = vec![$($input),*];
            let f: Check = Box::new(move |$tape, $v| {
                let o = $body;
                project($tape, o, 99)
            });
            out.push(run($name, inputs, f, opts.clone())?);
        }};
    }
    let r = &mut rng;
    check!("matmul", [signed(r, &[5, 4], 0.1, 1.0), signed(r, &[4, 3], 0.1, 1.0)], |_t, v| v[0].matmul(v[1])?);
    check!("matmul_nt", [signed(r, &[5, 4], 0.1, 1.0), signed(r, &[3, 4], 0.1, 1.0)], |_t, v| v[0].matmul_nt(v[1])?);
    check!("transpose", [signed(r, &[3, 5], 0.1, 1.0)], |_t, v| v[0].transpose()?);
    check!("add", [signed(r, &[3, 4], 0.1, 1.0), signed(r, &[3, 4], 0.1, 1.0)], |_t, v| v[0].add(v[1])?);
    check!("sub", [signed(r, &[3, 4], 0.1, 1.0), signed(r, &[3, 4], 0.1, 1.0)], |_t, v| v[0].sub(v[1])?);
    check!("mul", [signed(r, &[3, 4], 0.1, 1.0), signed(r, &[3, 4], 0.1, 1.0)], |_t, v| v[0].mul(v[1])?);
    check!("div", [signed(r, &[3, 4], 0.1, 1.0), uniform(r, &[3, 4], 0.5, 2.0)], |_t, v| v[0].div(v[1])?);
    {
        // Well-separated operands so that no probe flips the comparison.
        let a = signed(r, &[3, 4], 0.1, 1.0);
        let b = Tensor::from_fn(vec![3, 4], |i| a.data()[i] + if i % 2 == 0 { 0.3 } else { -0.3 });
        check!("minimum", [a.clone(), b.clone()], |_t, v| v[0].minimum(v[1])?);
        check!("maximum", [a, b], |_t, v| v[0].maximum(v[1])?);
    }
    check!("add_bias", [signed(r, &[3, 4], 0.1, 1.0), signed(r, &[4], 0.1, 1.0)], |_t, v| v[0].add_bias(v[1])?);
    check!("mul_col", [signed(r, &[3, 4], 0.1, 1.0), signed(r, &[3, 1], 0.1, 1.0)], |_t, v| v[0].mul_col(v[1])?);
    check!("scale", [signed(r, &[3, 4], 0.1, 1.0)], |_t, v| v[0].scale(-1.7).add_scalar(0.3).neg());
    check!("relu", [signed(r, &[3, 4], 0.1, 1.0)], |_t, v| v[0].relu());
    check!("sigmoid", [signed(r, &[3, 4], 0.1, 3.0)], |_t, v| v[0].sigmoid());
    check!("log_sigmoid", [signed(r, &[3, 4], 0.1, 8.0)], |_t, v| v[0].log_sigmoid());
    check!("exp", [signed(r, &[3, 4], 0.1, 2.0)], |_t, v| v[0].exp());
    check!("ln", [uniform(r, &[3, 4], 0.2, 3.0)], |_t, v| v[0].ln());
    check!("abs", [signed(r, &[3, 4], 0.1, 1.0)], |_t, v| v[0].abs());
    check!("powf", [uniform(r, &[3, 4], 0.2, 2.0)], |_t, v| v[0].powf(1.7));
    check!("square", [signed(r, &[3, 4], 0.1, 1.0)], |_t, v| v[0].square());
    check!("clamp", [signed(r, &[3, 4], 0.1, 1.0)], |_t, v| v[0].clamp(-0.55, 0.45));
    check!("softmax", [signed(r, &[3, 5], 0.1, 2.0)], |_t, v| v[0].softmax(1)?);
    check!(
        "layer_norm",
        [signed(r, &[4, 6], 0.1, 2.0), uniform(r, &[6], 0.5, 1.5), signed(r, &[6], 0.1, 0.5)],
        |_t, v| v[0].layer_norm(v[1], v[2], 1e-5)?
    );
    check!("sum_mean", [signed(r, &[3, 4], 0.1, 1.0)], |_t, v| v[0].sum().add(v[0].mean())?);
    check!("reshape", [signed(r, &[3, 4], 0.1, 1.0)], |_t, v| v[0].reshape(vec![2, 6])?);
    check!("slice_rows", [signed(r, &[5, 3], 0.1, 1.0)], |_t, v| v[0].slice_rows(1, 4)?);
    check!("gather_rows", [signed(r, &[5, 3], 0.1, 1.0)], |_t, v| v[0].gather_rows(&[4, 0, 4, 2])?);
    check!("slice_cols", [signed(r, &[3, 5], 0.1, 1.0)], |_t, v| v[0].slice_cols(1, 4)?);
    check!("concat_rows", [signed(r, &[2, 3], 0.1, 1.0), signed(r, &[3, 3], 0.1, 1.0)], |_t, v| Var::concat_rows(&[v[0], v[1]])?);
    check!("concat_cols", [signed(r, &[3, 2], 0.1, 1.0), signed(r, &[3, 3], 0.1, 1.0)], |_t, v| Var::concat_cols(&[v[0], v[1]])?);
    check!(
        "bilinear_sample",
        [signed(r, &[4, 5, 3], 0.1, 1.0), bilinear_points(r, 6, 4, 5)],
        |_t, v| Var::bilinear_sample(v[0], v[1])?
    );
    check!(
        "refine_boxes",
        [uniform(r, &[4, 4], 0.1, 0.9), signed(r, &[4, 4], 0.1, 1.0)],
        |_t, v| Var::refine_boxes(v[0], v[1])?
    );
    check!("sine_positions", [uniform(r, &[3, 2], 0.05, 0.95)], |_t, v| point_positions_var(v[0], 8)?);

    // Composite operations.
    let attn_inputs = {
        let mut xs = vec![signed(r, &[3, 8], 0.1, 1.0), signed(r, &[5, 8], 0.1, 1.0), signed(r, &[5, 8], 0.1, 1.0)];
        for _ in 0..4 {
            xs.push(signed(r, &[8, 8], 0.05, 0.5));
            xs.push(signed(r, &[8], 0.05, 0.5));
        }
        xs
    };
    out.push(run(
        "multi_head_attention",
        attn_inputs,
        Box::new(|tape, v| {
            let lin = |i: usize| Linear { weight: v[3 + 2 * i], bias: v[4 + 2 * i] };
            let p = AttentionParams { q: lin(0), k: lin(1), v: lin(2), o: lin(3) };
            project(tape, mha(v[0], v[1], v[2], &p, 2)?, 7)
        }),
        opts.clone(),
    )?);
    let (d, hidden, m) = (8, 2, 3);
    out.push(run(
        "dynamic_ffn",
        vec![
            signed(r, &[2 * m, d], 0.1, 1.0),
            signed(r, &[2, d], 0.1, 1.0),
            signed(r, &[d, 2 * d * hidden], 0.05, 0.5),
            signed(r, &[2 * d * hidden], 0.05, 0.5),
            uniform(r, &[d], 0.5, 1.5),
            signed(r, &[d], 0.05, 0.5),
        ],
        Box::new(move |tape, v| {
            let psi = Linear { weight: v[2], bias: v[3] };
            let norm = LayerNorm { gain: v[4], bias: v[5] };
            project(tape, dynamic_ffn(v[0], v[1], &psi, &norm, m, hidden)?, 8)
        }),
        opts.clone(),
    )?);
    let targets = Tensor::from_fn(vec![4, 3], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
    out.push(run(
        "focal_loss",
        vec![signed(r, &[4, 3], 0.1, 3.0)],
        Box::new(move |_t, v| focal_loss(v[0], &targets, 0.25, 2.0)),
        opts.clone(),
    )?);
    out.push(run(
        "giou",
        vec![uniform(r, &[4, 4], 0.2, 0.6), uniform(r, &[4, 4], 0.2, 0.6)],
        Box::new(|tape, v| project(tape, giou_rows(v[0], v[1])?, 9)),
        opts,
    )?);
    Ok(out)
}

/// Model used by the full-pipeline check: three stages, 32×32 input,
/// width 16.
pub fn pipeline_check_config() -> ModelConfig {
    ModelConfig {
        d: 16,
        heads: 2,
        num_stages: 3,
        num_queries: 4,
        sampling_ratio: 0.5,
        keypoints: 2,
        image_size: 32,
        ..ModelConfig::default()
    }
}

/// Deep-supervision loss of the whole pipeline against central differences
/// at relative tolerance 1e-3, probing at most `max_coords` coordinates per
/// parameter tensor (`None` probes all).
pub fn pipeline_check(seed: u64, max_coords: Option<usize>) -> Result<CheckResult> {
    let cfg = pipeline_check_config();
    let params = init_params::<f64>(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = Image::new(32, 32, (0..32 * 32 * 3).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let targets = Targets {
        boxes: vec![[0.3, 0.35, 0.3, 0.25], [0.7, 0.6, 0.2, 0.35]],
        classes: vec![0, 2],
    };
    let names = params.names().to_vec();
    let w = LossWeights::default();
    run(
        "full_pipeline",
        params.tensors().to_vec(),
        Box::new(move |_t, v| {
            let bound = BoundParams::from_parts(&names, v);
            let out = run_pipeline(&img, &cfg, &bound, ForwardOptions::default())?;
            Ok(deep_supervision(&out.predictions(), &targets, &w)?.total)
        }),
        GradCheckOptions {
            tol: 1e-3,
            max_coords,
            ..GradCheckOptions::default()
        },
    )
}
