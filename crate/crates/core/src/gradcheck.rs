//! Central-difference gradient checking against the tape.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gradient magnitude under which a coordinate is treated as zero: its
/// relative error is dominated by the finite-difference rounding noise.
pub const SCALE_FLOOR: f64 = 1e-6;

/// At most one coordinate in this many may be excluded as nonsmooth.
pub const MAX_NONSMOOTH_DENOM: usize = 20;

/// Outcome of [`gradcheck`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
    /// Coordinates whose probe interval straddles a kink or jump of the
    /// forward function; excluded from the error maxima.
    pub nonsmooth: usize,
    /// `|a - n| / max(|a|, |n|)` over the whole gradient vector, nonsmooth
    /// coordinates included.
    pub norm_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub tol: f64,
    pub passed: bool,
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(Tape<f64>, Vec<Var>, Var, f64)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let mut out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        out = tape.sum(out)?;
    }
    let v = tape.value(out).data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite("gradcheck objective".into()));
    }
    Ok((tape, vars, out, v))
}

/// Compare tape gradients of `f` (sum-reduced if not scalar) against central
/// differences for every coordinate of every input.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [1e-6, 1e-4]")));
    }
    let (tape, vars, out, center) = eval(&f, inputs)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();
    drop(tape);

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coordinates: 0,
        nonsmooth: 0,
        norm_rel_error: 0.0,
        worst: None,
        tol,
        passed: true,
    };
    let (mut diff_sq, mut a_sq, mut n_sq) = (0.0f64, 0.0f64, 0.0f64);
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        for ci in 0..input.len() {
            let orig = input.data()[ci];
            probe[ii].data_mut()[ci] = orig + eps;
            let plus = eval(&f, &probe)?.3;
            probe[ii].data_mut()[ci] = orig - eps;
            let minus = eval(&f, &probe)?.3;
            probe[ii].data_mut()[ci] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ii].data()[ci];
            let abs = (a - numeric).abs();
            diff_sq += abs * abs;
            a_sq += a * a;
            n_sq += numeric * numeric;
            report.coordinates += 1;
            let scale = a.abs().max(numeric.abs());
            if scale < SCALE_FLOOR {
                report.max_abs_error = report.max_abs_error.max(abs);
                continue;
            }
            let rel = abs / scale;
            // A kink inside [x-eps, x+eps] makes the one-sided slopes differ by
            // about twice the central-difference error; a wrong backward rule
            // leaves them equal.
            let asymmetry = ((plus - center) / eps - (center - minus) / eps).abs();
            if rel >= tol && asymmetry > abs {
                report.nonsmooth += 1;
                continue;
            }
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((ii, ci));
            }
        }
    }
    let scale = a_sq.max(n_sq).sqrt();
    report.norm_rel_error = if scale > 0.0 { diff_sq.sqrt() / scale } else { 0.0 };
    report.passed = report.max_rel_error < tol && report.nonsmooth * MAX_NONSMOOTH_DENOM <= report.coordinates;
    Ok(report)
}
