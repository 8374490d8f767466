use super::{AutodiffError, ParamStore, Tape, Var};
use crate::Scalar;

/// Gradients smaller than this are compared on absolute rather than
/// relative error. Central differences in double precision carry roughly
/// 1e-10 of round-off, which would otherwise dominate near-zero entries.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// One coordinate whose analytic and numeric gradients disagree.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares backward-pass gradients of the scalar built by `f` against
/// central finite differences for every coordinate of every parameter.
///
/// `f` must bind `store` onto the tape it is given (see [`Tape::bind`]) and
/// be deterministic. Parameter values are restored afterwards; gradients in
/// `store` are left holding the analytic result.
pub fn grad_check<S, E, F>(store: &mut ParamStore<S>, step: f64, tol: f64, f: F) -> Result<GradCheckReport, E>
where
    S: Scalar,
    E: From<AutodiffError>,
    F: Fn(&mut Tape<S>, &ParamStore<S>) -> Result<Var, E>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;
    drop(tape);

    let eval = |store: &ParamStore<S>| -> Result<f64, E> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        Ok(tape.scalar(loss).to_f64_lossy())
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        tolerance: tol,
        failures: Vec::new(),
    };
    for p in 0..store.len() {
        let len = store.params()[p].value.len();
        for k in 0..len {
            let original = store.params()[p].value.as_slice()[k];
            store.params_mut()[p].value.as_mut_slice()[k] = S::of(original.to_f64_lossy() + step);
            let plus = eval(store);
            store.params_mut()[p].value.as_mut_slice()[k] = S::of(original.to_f64_lossy() - step);
            let minus = eval(store);
            store.params_mut()[p].value.as_mut_slice()[k] = original;
            let numeric = (plus? - minus?) / (2.0 * step);
            let analytic = store.params()[p].grad.as_slice()[k].to_f64_lossy();

            let abs = (analytic - numeric).abs();
            let rel = relative_error(analytic, numeric);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel.is_nan() || rel >= tol {
                report.failures.push(GradMismatch {
                    param: store.params()[p].name.clone(),
                    index: k,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
