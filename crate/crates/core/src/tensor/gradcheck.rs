use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Denominator floor of the relative error, so that coordinates whose
    /// true gradient is ~0 are judged on an absolute scale.
    pub floor: f64,
    /// Probe at most this many evenly spaced coordinates per input.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-6,
            tol: 1e-4,
            floor: 1e-4,
            max_coords: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, coordinate)` pairs above tolerance.
    pub failing: Vec<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
    /// `(input, coordinate, analytic, numeric)` at the largest error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failing.is_empty() && self.max_rel_err.is_finite()
    }
}

fn probe_coords(numel: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(k) if k < numel => {
            let k = k.max(1);
            (0..k).map(|i| i * numel / k).collect()
        }
        _ => (0..numel).collect(),
    }
}

/// Compares tape gradients of a scalar function of several inputs with
/// central differences `(f(x + h·e) - f(x - h·e)) / 2h`.
pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        if v.numel() != 1 {
            return Err(Error::Contract(format!("gradcheck needs a scalar function, got {:?}", v.shape())));
        }
        Ok(v.data()[0])
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut report = GradCheckReport {
        tol: opts.tol,
        ..Default::default()
    };
    let mut probe = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        for c in probe_coords(x.numel(), opts.max_coords) {
            let orig = x.data()[c];
            probe[i].data_mut()[c] = orig + opts.h;
            let plus = eval(&probe)?;
            probe[i].data_mut()[c] = orig - opts.h;
            let minus = eval(&probe)?;
            probe[i].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic[i].data()[c];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            let err = if err.is_nan() { f64::INFINITY } else { err };
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((i, c, a, numeric));
            }
            report.checked += 1;
            if err > opts.tol {
                report.failing.push((i, c));
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`check_gradients`].
pub fn check_gradient<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let opts = GradCheckOptions {
        h,
        tol,
        ..Default::default()
    };
    check_gradients(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), opts)
}
