use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y} (tol {tol})");
    }
}

#[test]
fn matmul_identity_and_hand_case() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 3]);
    let eye = Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let out = tape.constant(eye).matmul(tape.constant(a.clone())).unwrap();
    assert_eq!(out.to_tensor(), a);

    let lhs = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let rhs = tape.constant(t64(&[2, 1], &[1.0, 1.0]));
    let out = lhs.matmul(rhs).unwrap();
    assert_eq!(out.shape(), vec![2, 1]);
    assert_eq!(out.value().data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    let err = a.matmul(b).unwrap_err();
    match &err {
        Error::Shape { lhs, rhs, .. } => {
            assert_eq!(lhs, &vec![2, 3]);
            assert_eq!(rhs, &vec![2, 3]);
        }
        other => panic!("unexpected error {other:?}"),
    }
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn matmul_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[5, 4]);
    let b = rand_tensor(&mut rng, &[4, 3]);
    let w = rand_tensor(&mut rng, &[5, 3]);
    let report = check_gradients(
        |tape, xs| Ok(xs[0].matmul(xs[1])?.mul(tape.constant(w.clone()))?.sum()),
        &[a, b],
        GradCheckOptions {
            h: 1e-6,
            tol: 1e-5,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    assert_eq!(report.checked, 20 + 12);
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let s = tape.constant(t64(&[4], &[0.0; 4])).softmax(0).unwrap();
    assert_eq!(s.value().data(), &[0.25; 4]);

    let s = tape.constant(t64(&[2], &[1000.0, 0.0])).softmax(0).unwrap();
    assert_close(s.value().data(), &[1.0, 0.0], 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_fn(vec![7, 9], |_| rng.gen_range(-20.0..20.0));
    let s = tape.constant(x).softmax(1).unwrap();
    for row in s.value().data().chunks(9) {
        let total: f64 = row.iter().sum();
        assert!((total - 1.0).abs() <= 1e-12);
        assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
    }
}

#[test]
fn softmax_along_leading_axis() {
    let tape = Tape::new();
    let x = t64(&[2, 3], &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0]);
    let s = tape.constant(x).softmax(0).unwrap();
    assert_close(s.value().data(), &[0.5; 6], 1e-15);
}

#[test]
fn softmax_rejects_non_finite_input() {
    let tape = Tape::new();
    let err = tape.constant(t64(&[2], &[f64::NAN, 0.0])).softmax(0).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
}

#[test]
fn layer_norm_examples() {
    let tape = Tape::new();
    let ones = tape.constant(Tensor::full(vec![6], 1.0));
    let zeros = tape.constant(Tensor::zeros(vec![6]));
    let c = tape.constant(Tensor::full(vec![2, 6], 3.5));
    let y = c.layer_norm(ones, zeros, 1e-5).unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = tape.constant(rand_tensor(&mut rng, &[3, 6]));
    let bias = rand_tensor(&mut rng, &[6]);
    let y = x.layer_norm(zeros, tape.constant(bias.clone()), 1e-5).unwrap();
    for row in y.value().data().chunks(6) {
        assert_eq!(row, bias.data());
    }

    // The normalized variance is σ²/(σ²+eps); inputs need σ² well above 10
    // for eps=1e-5 to stay inside 1e-6.
    let x = tape.constant(Tensor::from_fn(vec![5, 64], |_| rng.gen_range(-20.0..20.0)));
    let ones = tape.constant(Tensor::full(vec![64], 1.0));
    let zeros = tape.constant(Tensor::zeros(vec![64]));
    let y = x.layer_norm(ones, zeros, 1e-5).unwrap();
    for row in y.value().data().chunks(64) {
        let mean = row.iter().sum::<f64>() / 64.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
        assert!(mean.abs() <= 1e-10);
        assert!((var - 1.0).abs() <= 1e-6);
    }
}

/// Plain four-corner bilinear interpolation over cell centers, written
/// independently of the kernel.
fn four_corner_oracle(grid: &Tensor<f64>, x: f64, y: f64) -> Vec<f64> {
    let (h, w, d) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    let px = (x * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let py = (y * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (px.floor() as usize, py.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (px - x0 as f64, py - y0 as f64);
    let at = |i: usize, j: usize, c: usize| grid.data()[(i * w + j) * d + c];
    (0..d)
        .map(|c| {
            at(y0, x0, c) * (1.0 - fx) * (1.0 - fy)
                + at(y0, x1, c) * fx * (1.0 - fy)
                + at(y1, x0, c) * (1.0 - fx) * fy
                + at(y1, x1, c) * fx * fy
        })
        .collect()
}

#[test]
fn bilinear_exact_at_cell_centers() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &(h, w) in &[(4usize, 4usize), (3, 5), (7, 2), (1, 1)] {
        let grid = rand_tensor(&mut rng, &[h, w, 3]);
        let tape = Tape::new();
        let mut pts = Vec::new();
        for i in 0..h {
            for j in 0..w {
                pts.push((j as f64 + 0.5) / w as f64);
                pts.push((i as f64 + 0.5) / h as f64);
            }
        }
        let p = tape.constant(t64(&[h * w, 2], &pts));
        let out = Var::bilinear_sample(tape.constant(grid.clone()), p).unwrap();
        assert_eq!(out.value().data(), grid.data());
    }
}

#[test]
fn bilinear_midpoint_is_linear() {
    let tape = Tape::new();
    let grid = tape.constant(t64(&[2, 1, 1], &[0.0, 1.0]));
    let p = tape.constant(t64(&[1, 2], &[0.5, 0.5]));
    let out = Var::bilinear_sample(grid, p).unwrap();
    assert_eq!(out.value().data(), &[0.5]);
}

#[test]
fn bilinear_matches_four_corner_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let (h, w, d) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..5));
        let grid = rand_tensor(&mut rng, &[h, w, d]);
        let np = 20;
        let pts = Tensor::from_fn(vec![np, 2], |_| rng.gen_range(-0.2..1.2));
        let tape = Tape::new();
        let out = Var::bilinear_sample(tape.constant(grid.clone()), tape.constant(pts.clone())).unwrap();
        for p in 0..np {
            let want = four_corner_oracle(&grid, pts.data()[2 * p], pts.data()[2 * p + 1]);
            assert_close(out.value().row(p), &want, 1e-12);
        }
    }
}

#[test]
fn bilinear_gradient_reaches_grid_and_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let grid = rand_tensor(&mut rng, &[4, 5, 3]);
    let pts = Tensor::from_fn(vec![6, 2], |_| rng.gen_range(0.15..0.85));
    let w = rand_tensor(&mut rng, &[6, 3]);
    let report = check_gradients(
        |tape, xs| Ok(Var::bilinear_sample(xs[0], xs[1])?.mul(tape.constant(w.clone()))?.sum()),
        &[grid, pts],
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let p = tape.param(Tensor::from_fn(vec![2, 3], |i| i as f64));
    let q = tape.param(Tensor::full(vec![3], 2.0));
    let detached = p.detach();
    let loss = p.sum().add(detached.sum()).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(p).data(), &[1.0; 6]);
    assert_eq!(grads.wrt(q).data(), &[0.0; 3]);
    assert!(!grads.reached(q));
    assert_eq!(grads.wrt(detached).data(), &[0.0; 6]);
}

#[test]
fn backward_rejects_non_scalar_and_reuse() {
    let tape = Tape::new();
    let p = tape.param(Tensor::<f64>::full(vec![3], 1.0));
    assert!(matches!(tape.backward(p), Err(Error::Contract(_))));
    let loss = p.sum();
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
}

#[test]
fn matmul_chain_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xs = [
        rand_tensor(&mut rng, &[3, 4]),
        rand_tensor(&mut rng, &[4, 5]),
        rand_tensor(&mut rng, &[5, 2]),
    ];
    let report = check_gradients(
        |_, v| Ok(v[0].matmul(v[1])?.matmul(v[2])?.square().sum()),
        &xs,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn check_gradient_on_half_squared_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[10]);
    let report = check_gradient(|_, v| Ok(v.square().sum().scale(0.5)), &x, 1e-6, 1e-8).unwrap();
    assert!(report.passed(), "{report:?}");

    let tape = Tape::new();
    let v = tape.param(x.clone());
    let g = tape.backward(v.square().sum().scale(0.5)).unwrap();
    assert_close(g.wrt(v).data(), x.data(), 1e-15);
}

#[test]
fn check_gradient_on_softmax_of_constant() {
    let x = Tensor::full(vec![5], 0.3);
    let w = t64(&[5], &[0.1, -0.4, 0.9, 0.2, -0.7]);
    let report = check_gradient(
        |tape, v| Ok(v.softmax(0)?.mul(tape.constant(w.clone()))?.sum()),
        &x,
        1e-6,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

/// Every differentiable primitive against central differences on seeded
/// random inputs.
#[test]
fn every_op_matches_finite_differences() {
    type Build = for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>]) -> crate::Result<Var<'t, f64>>;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("matmul_nt", vec![vec![3, 4], vec![5, 4]], |_, v| v[0].matmul_nt(v[1])),
        ("transpose", vec![vec![3, 4]], |_, v| v[0].transpose()),
        ("add", vec![vec![3, 4], vec![3, 4]], |_, v| v[0].add(v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |_, v| v[0].sub(v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |_, v| v[0].mul(v[1])),
        ("div", vec![vec![3, 4], vec![3, 4]], |_, v| v[0].div(v[1].square().add_scalar(0.5))),
        ("minimum", vec![vec![3, 4], vec![3, 4]], |_, v| v[0].minimum(v[1])),
        ("maximum", vec![vec![3, 4], vec![3, 4]], |_, v| v[0].maximum(v[1])),
        ("add_bias", vec![vec![3, 4], vec![4]], |_, v| v[0].add_bias(v[1])),
        ("mul_col", vec![vec![3, 4], vec![3]], |_, v| v[0].mul_col(v[1])),
        ("relu", vec![vec![3, 4]], |_, v| Ok(v[0].relu())),
        ("sigmoid", vec![vec![3, 4]], |_, v| Ok(v[0].sigmoid())),
        ("log_sigmoid", vec![vec![3, 4]], |_, v| Ok(v[0].scale(8.0).log_sigmoid())),
        ("exp", vec![vec![3, 4]], |_, v| Ok(v[0].exp())),
        ("ln", vec![vec![3, 4]], |_, v| Ok(v[0].square().add_scalar(0.1).ln())),
        ("abs", vec![vec![3, 4]], |_, v| Ok(v[0].abs())),
        ("powf", vec![vec![3, 4]], |_, v| Ok(v[0].sigmoid().powf(2.5))),
        ("clamp", vec![vec![3, 4]], |_, v| Ok(v[0].clamp(-0.5, 0.5))),
        ("softmax", vec![vec![3, 4]], |_, v| v[0].softmax(1)),
        ("layer_norm", vec![vec![3, 4], vec![4], vec![4]], |_, v| v[0].layer_norm(v[1], v[2], 1e-5)),
        ("mean", vec![vec![3, 4]], |_, v| Ok(v[0].mean())),
        ("reshape", vec![vec![3, 4]], |_, v| v[0].reshape(vec![2, 6])),
        ("slice_rows", vec![vec![5, 4]], |_, v| v[0].slice_rows(1, 4)),
        ("gather_rows", vec![vec![5, 4]], |_, v| v[0].gather_rows(&[4, 0, 4, 2])),
        ("concat_rows", vec![vec![2, 4], vec![3, 4]], |_, v| Var::concat_rows(&[v[0], v[1]])),
        ("slice_cols", vec![vec![3, 5]], |_, v| v[0].slice_cols(1, 4)),
        ("concat_cols", vec![vec![3, 2], vec![3, 4]], |_, v| Var::concat_cols(&[v[0], v[1]])),
        ("refine_boxes", vec![vec![3, 4], vec![3, 4]], |_, v| {
            Var::refine_boxes(v[0].sigmoid(), v[1].scale(2.0))
        }),
    ];
    for (name, shapes, build) in cases {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        // Project the op output onto a fixed random direction to get a scalar.
        let probe_tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| probe_tape.constant(x.clone())).collect();
        let out_shape = build(&probe_tape, &vars).unwrap().shape();
        let direction = rand_tensor(&mut rng, &out_shape);
        let report = check_gradients(
            |tape, v| Ok(build(tape, v)?.mul(tape.constant(direction.clone()))?.sum()),
            &inputs,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{name}: {report:?}");
    }
}

#[test]
fn refine_boxes_zero_offset_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let reference = Tensor::from_fn(vec![50, 4], |_| rng.gen_range(0.01..0.99f32));
    let tape = Tape::new();
    let out = Var::refine_boxes(tape.constant(reference.clone()), tape.constant(Tensor::zeros(vec![50, 4]))).unwrap();
    assert_eq!(out.to_tensor(), reference);
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let tape = Tape::<f32>::new();
        let a = tape.param(Tensor::from_fn(vec![16, 8], |_| rng.gen_range(-1.0..1.0)));
        let b = tape.param(Tensor::from_fn(vec![8, 8], |_| rng.gen_range(-1.0..1.0)));
        let y = a.matmul(b).unwrap().softmax(1).unwrap().matmul_nt(a).unwrap().sum();
        let g = tape.backward(y).unwrap();
        (g.wrt(a), g.wrt(b))
    };
    assert_eq!(run(), run());
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(data in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let tape = Tape::new();
            let s = tape.constant(Tensor::new(vec![3, 4], data).unwrap()).softmax(1).unwrap();
            for row in s.value().data().chunks(4) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
            }
        }

        #[test]
        fn bilinear_is_linear_between_adjacent_centers(
            a in -5.0f64..5.0, b in -5.0f64..5.0, t in 0.0f64..1.0, row in 0usize..3
        ) {
            // Along x between the centers of cells (row, 1) and (row, 2).
            let mut values = vec![0.0; 3 * 4];
            values[row * 4 + 1] = a;
            values[row * 4 + 2] = b;
            let tape = Tape::new();
            let grid = tape.constant(Tensor::new(vec![3, 4, 1], values).unwrap());
            let x = (1.5 + t) / 4.0;
            let y = (row as f64 + 0.5) / 3.0;
            let out = Var::bilinear_sample(grid, tape.constant(Tensor::new(vec![1, 2], vec![x, y]).unwrap())).unwrap();
            let want = a + (b - a) * t;
            prop_assert!((out.item() - want).abs() <= 1e-12);
        }
    }
}
