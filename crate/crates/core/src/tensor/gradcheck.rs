//! Central finite-difference checks of tape gradients (64-bit).

use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// `(f(+h) - f(-h)) / 2h`, where `f(delta)` evaluates the objective with
/// one coordinate displaced by `delta`.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    Ok((f(h)? - f(-h)?) / (2.0 * h))
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is zero are compared in absolute terms.
    pub floor: f64,
    /// Coordinates to check; all of them when `None`.
    pub indices: Option<Vec<usize>>,
}

impl GradCheckOptions {
    pub fn new(h: f64) -> Self {
        GradCheckOptions {
            h,
            floor: 1e-10,
            indices: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    let t = tape.value(out);
    if t.numel() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Compares the tape gradient of `f` at `x` against central differences.
pub fn finite_diff_check_with<F>(f: F, x: &Tensor<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let zeros = Tensor::zeros(x.shape().to_vec());
    let grad = tape.grad(v).unwrap_or(&zeros);

    let indices: Vec<usize> = match &opts.indices {
        Some(ix) => ix.clone(),
        None => (0..x.numel()).collect(),
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: Vec::with_capacity(indices.len()),
        numeric: Vec::with_capacity(indices.len()),
    };
    let mut probe = x.clone();
    for &i in &indices {
        let orig = probe.data()[i];
        let numeric = central_difference(
            |d| {
                probe.data_mut()[i] = orig + d;
                eval(&f, &probe)
            },
            opts.h,
        )?;
        probe.data_mut()[i] = orig;
        let analytic = grad.data()[i];
        let err = relative_error(analytic, numeric, opts.floor);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}

/// Maximum relative error between autodiff and central differences over
/// every element of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    Ok(finite_diff_check_with(f, x, &GradCheckOptions::new(h))?.max_rel_error)
}
