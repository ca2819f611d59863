//! Central finite-difference gradient checking against [`Tape::backward`].

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{Bound, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of `loss` with respect to every entry of
/// every parameter in `store` against `(L(x+h) - L(x-h)) / 2h`.
pub fn check_params<F>(store: &ParamStore, h: f64, floor: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, false);
        let l = loss(&mut tape, &p)?;
        tape.value(l).item()
    };

    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, true);
    let l = loss(&mut tape, &bound)?;
    let mut grads = tape.backward(l)?;

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for id in store.ids() {
        let analytic = grads.take(bound.var(id));
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
