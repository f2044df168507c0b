//! Central finite-difference checks of analytic gradients.
//!
//! A probe whose `x + h` or `x - h` evaluation takes a different branch than
//! the base point (see [`crate::Tape::with_branch_tracking`]) is skipped:
//! the difference quotient straddles a kink and says nothing about the
//! derivative on either side.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ParamStore, Tensor};

/// Gradients below this magnitude are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Coordinate with the largest error: (name, flat index, analytic, numeric).
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            if err >= self.max_rel_error {
                self.max_rel_error = err;
                self.worst = Some((name.to_string(), index, analytic, numeric));
            }
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            if other.worst.is_some() {
                self.worst = other.worst;
            }
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Evaluation callback: `(input, want_gradient) -> (loss, branch signature, gradient)`.
pub type InputEval<'a> = dyn Fn(&Tensor, bool) -> (f64, u64, Option<Tensor>) + 'a;

/// Checks every coordinate of `x`.
pub fn check_input_gradient(
    x: &Tensor,
    step: f64,
    eval: impl Fn(&Tensor, bool) -> (f64, u64, Option<Tensor>),
) -> GradCheckReport {
    let coords: Vec<usize> = (0..x.len()).collect();
    check_input_coords(x, &coords, step, &eval)
}

/// Checks the listed coordinates of `x`.
pub fn check_input_coords(
    x: &Tensor,
    coords: &[usize],
    step: f64,
    eval: &InputEval<'_>,
) -> GradCheckReport {
    let (_, sig0, grad) = eval(x, true);
    let grad = grad.expect("evaluation must return a gradient when asked");
    let mut report = GradCheckReport::default();
    for &i in coords {
        let mut xp = x.clone();
        xp.data_mut()[i] += step;
        let (lp, sp, _) = eval(&xp, false);
        let mut xm = x.clone();
        xm.data_mut()[i] -= step;
        let (lm, sm, _) = eval(&xm, false);
        if sp != sig0 || sm != sig0 {
            report.skipped += 1;
            continue;
        }
        report.record("input", i, grad.data()[i], (lp - lm) / (2.0 * step));
    }
    report
}

/// Parameter evaluation callback: `(store, want_gradients) -> (loss, signature, gradients)`.
pub type ParamEval<'a> =
    dyn Fn(&ParamStore, bool) -> (f64, u64, Option<BTreeMap<String, Tensor>>) + 'a;

/// Checks the given `(name, flat index)` coordinates. Missing analytic
/// entries count as zero gradient.
pub fn check_param_coords(
    store: &ParamStore,
    coords: &[(String, usize)],
    step: f64,
    eval: &ParamEval<'_>,
) -> GradCheckReport {
    let (_, sig0, grads) = eval(store, true);
    let grads = grads.expect("evaluation must return gradients when asked");
    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    for (name, i) in coords {
        let original = store.get(name).expect("coordinate names must exist").value.data()[*i];
        probe.get_mut(name).unwrap().value.data_mut()[*i] = original + step;
        let (lp, sp, _) = eval(&probe, false);
        probe.get_mut(name).unwrap().value.data_mut()[*i] = original - step;
        let (lm, sm, _) = eval(&probe, false);
        probe.get_mut(name).unwrap().value.data_mut()[*i] = original;
        if sp != sig0 || sm != sig0 {
            report.skipped += 1;
            continue;
        }
        let analytic = grads.get(name).map(|g| g.data()[*i]).unwrap_or(0.0);
        report.record(name, *i, analytic, (lp - lm) / (2.0 * step));
    }
    report
}

/// Samples `per_tensor` coordinates (with replacement when the tensor is
/// small) from each named tensor.
pub fn sample_coords(
    store: &ParamStore,
    names: &[String],
    per_tensor: usize,
    seed: u64,
) -> Vec<(String, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for name in names {
        let n = store.get(name).map(|p| p.value.len()).unwrap_or(0);
        if n == 0 {
            continue;
        }
        if n <= per_tensor {
            out.extend((0..n).map(|i| (name.clone(), i)));
        } else {
            out.extend((0..per_tensor).map(|_| (name.clone(), rng.gen_range(0..n))));
        }
    }
    out
}
