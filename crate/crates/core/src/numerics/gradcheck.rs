use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// `(analytic, numeric)` at the worst coordinate.
    pub worst_values: Option<(f64, f64)>,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares tape gradients of a scalar function against central finite
/// differences for every coordinate of every trainable parameter.
///
/// `f` must build the same deterministic scalar on each call (dropout masks
/// fixed by the caller). Parameter values are restored before returning.
pub fn grad_check<F>(store: &mut ParamStore, epsilon: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(store);
        let out = f(&mut tape)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::shape("grad_check", "function must return a scalar"));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let saved: Vec<_> = store.iter().map(|p| p.gradient.clone()).collect();
    store.zero_grad();
    {
        let snapshot = store.clone();
        let mut tape = Tape::with_params(&snapshot);
        let out = f(&mut tape)?;
        tape.backward_into(out, store)?;
    }
    let analytic: Vec<_> = store.iter().map(|p| p.gradient.clone()).collect();
    for (p, g) in store.iter_mut().zip(saved) {
        p.gradient = g;
    }

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        worst_values: None,
        coordinates: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        for k in 0..store.get(id).value.len() {
            let original = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = original + epsilon;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[k] = original - epsilon;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[k] = original;
            let numeric = (plus? - minus?) / (2.0 * epsilon);
            let a = analytic[id.index()].data()[k];
            if !a.is_finite() {
                return Err(Error::NonFinite(format!(
                    "analytic gradient of {}",
                    store.get(id).name
                )));
            }
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((store.get(id).name.clone(), k));
                report.worst_values = Some((a, numeric));
            }
        }
    }
    Ok(report)
}
