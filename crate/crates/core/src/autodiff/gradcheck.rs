//! Central finite-difference oracle for tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Largest absolute disagreement divided by the gradient scale (the larger
    /// of the two max-norms). Zero when both gradients vanish.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Scale-relative disagreement between two gradient vectors.
pub fn compare(analytic: &[f64], numeric: &[f64], tol: f64) -> GradReport {
    let mut max_abs = 0.0f64;
    let mut scale = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        max_abs = max_abs.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    let rel = if scale == 0.0 { 0.0 } else { max_abs / scale };
    GradReport {
        max_rel_error: rel,
        max_abs_error: max_abs,
        coords_checked: analytic.len(),
        tol,
        passed: rel <= tol && rel.is_finite(),
    }
}

/// Central difference of `eval` at each listed coordinate of `x`.
///
/// The denominator is the step actually representable in `f32` around each
/// coordinate, not the nominal `2h`.
pub fn central_differences<F>(x: &[f32], coords: &[usize], h: f32, mut eval: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f32]) -> Result<f64>,
{
    let mut work = x.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = work[i];
        let plus = orig + h;
        let minus = orig - h;
        work[i] = plus;
        let fp = eval(&work)?;
        work[i] = minus;
        let fm = eval(&work)?;
        work[i] = orig;
        out.push((fp - fm) / (plus as f64 - minus as f64));
    }
    Ok(out)
}

/// Checks the gradient of a scalar tape function `f` at `x`.
///
/// `f` receives a fresh tape and the input variable and must return a `1x1`
/// node; anything else is a contract error.
pub fn check_gradients<F>(f: F, x: &Tensor, h: f32, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let (r, c) = x.matrix_dims()?;
    let mut tape = Tape::new();
    let xv = tape.variable(r, c, x.data().to_vec())?;
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<f64> = match grads.get(xv) {
        Some(g) => g.iter().map(|&v| v as f64).collect(),
        None => vec![0.0; x.numel()],
    };
    let coords: Vec<usize> = (0..x.numel()).collect();
    let numeric = central_differences(x.data(), &coords, h, |vals| {
        let mut tape = Tape::new();
        let xv = tape.variable(r, c, vals.to_vec())?;
        let out = f(&mut tape, xv)?;
        Ok(tape.scalar(out)? as f64)
    })?;
    Ok(compare(&analytic, &numeric, tol))
}

impl GradReport {
    pub fn into_result(self) -> Result<GradReport> {
        if self.passed {
            Ok(self)
        } else {
            Err(Error::contract(format!(
                "gradient check failed: rel error {:.3e} > {:.1e}",
                self.max_rel_error, self.tol
            )))
        }
    }
}
