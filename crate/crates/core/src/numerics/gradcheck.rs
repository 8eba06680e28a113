use super::tape::{Tape, Var};
use super::tensor::DiffTensor;
use super::NumericsError;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor, so coordinates with near-zero gradients are
    /// compared on an absolute scale instead of amplifying rounding noise.
    pub floor: f64,
    /// Restricts the check to these flat coordinates (all when `None`).
    pub coordinates: Option<Vec<usize>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tol: 1e-4,
            floor: 1e-3,
            coordinates: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(coordinate, analytic, numeric, relative error)` per checked entry.
    pub entries: Vec<(usize, f64, f64, f64)>,
    pub max_rel_error: f64,
    pub worst_coordinate: Option<usize>,
    pub tol: f64,
    pub passed: bool,
}

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, floor)`.
pub fn finite_difference_check<T, F>(
    f: F,
    x: &DiffTensor<T>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, crate::Error>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var, crate::Error>,
{
    if !(opts.step > 0.0) {
        return Err(NumericsError::InvalidStep(opts.step).into());
    }
    let mut tape = Tape::new();
    let xv = tape.variable(x);
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(&tape, xv);

    let eval = |values: Vec<T>| -> Result<f64, crate::Error> {
        let mut t = Tape::new();
        let v = t.constant(x.shape().to_vec(), values)?;
        let o = f(&mut t, v)?;
        Ok(t.scalar(o).as_f64())
    };

    let coords: Vec<usize> = match &opts.coordinates {
        Some(c) => c.clone(),
        None => (0..x.len()).collect(),
    };
    let h = T::lit(opts.step);
    let mut entries = Vec::with_capacity(coords.len());
    let mut max_rel = 0.0f64;
    let mut worst = None;
    for &i in &coords {
        if i >= x.len() {
            return Err(NumericsError::IndexOutOfRange {
                op: "finite_difference_check",
                index: i,
                len: x.len(),
            }
            .into());
        }
        let mut plus = x.values().to_vec();
        plus[i] += h;
        let mut minus = x.values().to_vec();
        minus[i] -= h;
        let fp = eval(plus)?;
        if !fp.is_finite() {
            return Err(NumericsError::NonFinite {
                coordinate: i,
                step: opts.step,
            }
            .into());
        }
        let fm = eval(minus)?;
        if !fm.is_finite() {
            return Err(NumericsError::NonFinite {
                coordinate: i,
                step: -opts.step,
            }
            .into());
        }
        let numeric = (fp - fm) / (2.0 * opts.step);
        let a = analytic[i].as_f64();
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        if rel > max_rel || worst.is_none() || rel.is_nan() {
            max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
            worst = Some(i);
        }
        entries.push((i, a, numeric, rel));
    }
    Ok(GradCheckReport {
        entries,
        max_rel_error: max_rel,
        worst_coordinate: worst,
        tol: opts.tol,
        passed: max_rel < opts.tol,
    })
}
