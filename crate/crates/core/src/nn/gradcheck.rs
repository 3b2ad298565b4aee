//! Central-difference gradient checking.

use super::Parameters;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Flat index (in `tensors()` order) of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates left out because the difference stencil crossed a ReLU kink.
    pub skipped: usize,
}

/// Compares `analytic` against `(f(θ+h) − f(θ−h)) / 2h` for every coordinate.
///
/// Relative error is `|a − n| / max(|a|, |n|, floor)`; the floor keeps coordinates
/// whose true gradient is essentially zero from dominating through round-off.
pub fn check_gradient<P, F>(params: &P, analytic: &P, h: f64, floor: f64, mut loss: F) -> GradCheck
where
    P: Parameters + Clone,
    F: FnMut(&P) -> f64,
{
    check_gradient_piecewise(params, analytic, h, floor, |p| (loss(p), Vec::new()))
}

/// Like [`check_gradient`] for piecewise-smooth losses. `loss` also returns the
/// activation pattern (e.g. ReLU signs); a coordinate whose perturbations change the
/// pattern has no two-sided derivative to compare against and is skipped.
pub fn check_gradient_piecewise<P, F>(params: &P, analytic: &P, h: f64, floor: f64, mut loss: F) -> GradCheck
where
    P: Parameters + Clone,
    F: FnMut(&P) -> (f64, Vec<bool>),
{
    let grads: Vec<f64> = analytic.tensors().iter().flat_map(|t| t.iter().copied()).collect();
    let base_pattern = loss(params).1;
    let mut probe = params.clone();
    let mut out = GradCheck { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, checked: 0, skipped: 0 };
    let mut flat = 0;
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    for (ti, &len) in shapes.iter().enumerate() {
        for i in 0..len {
            let orig = probe.tensors()[ti][i];
            probe.tensors_mut()[ti][i] = orig + h;
            let (up, pu) = loss(&probe);
            probe.tensors_mut()[ti][i] = orig - h;
            let (down, pd) = loss(&probe);
            probe.tensors_mut()[ti][i] = orig;
            let a = grads[flat];
            flat += 1;
            if pu != base_pattern || pd != base_pattern {
                out.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err > out.max_rel_error || out.checked == 0 {
                out.max_rel_error = err;
                out.worst_index = flat - 1;
                out.analytic = a;
                out.numeric = numeric;
            }
            out.checked += 1;
        }
    }
    out
}
