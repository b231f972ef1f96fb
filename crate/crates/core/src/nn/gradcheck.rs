use super::graph::Gradients;
use super::layers::{ParamId, ParamSet};

/// Worst coordinate found by [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares reverse-mode gradients with central differences. `coords`
/// restricts the check to `(param, flat index)` pairs; `None` checks all.
pub fn grad_check<F>(f: F, params: &ParamSet, eps: f64, coords: Option<&[(ParamId, usize)]>) -> GradCheckReport
where
    F: Fn(&ParamSet) -> (f64, Gradients),
{
    let (_, grads) = f(params);
    let all: Vec<(ParamId, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = params
                .ids()
                .flat_map(|id| (0..params.get(id).len()).map(move |j| (id, j)))
                .collect();
            &all
        }
    };
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for &(id, j) in coords {
        let x0 = params.get(id).data()[j];
        let mut at = |dx: f64| {
            work.get_mut(id).data_mut()[j] = x0 + dx;
            f(&work).0
        };
        let (f2, f1, m1, m2) = (at(2.0 * eps), at(eps), at(-eps), at(-2.0 * eps));
        work.get_mut(id).data_mut()[j] = x0;
        // five-point stencil, truncation error O(eps^4)
        let numeric = (8.0 * (f1 - m1) - (f2 - m2)) / (12.0 * eps);
        let analytic = grads.get(id).data()[j];
        let e = rel_error(analytic, numeric);
        report.checked += 1;
        if e >= report.max_rel_error {
            report.max_rel_error = e;
            report.worst = Some((params.name(id).to_string(), j, analytic, numeric));
        }
    }
    report
}
