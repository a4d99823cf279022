//! Central finite-difference verification of backward passes.
//!
//! The scalar objective is `Σ out ⊙ R` with `R` a fixed pseudo-random tensor,
//! so every output element contributes to the checked gradient.

use crate::error::Result;
use crate::harness::rng::CitRng;
use crate::kernel::graph::{Graph, Var};
use crate::kernel::params::{ParamId, ParamStore};
use crate::kernel::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub const DEFAULT_EPS: f64 = 1e-4;

const PROJECTION_SEED: u64 = 0x6772_6164;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// NaN when the objective produced a non-finite value.
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(leaf, element, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn projection(shape: &[usize]) -> Tensor {
    let mut rng = CitRng::new(PROJECTION_SEED);
    Tensor::from_fn(shape, |_| rng.normal())
}

struct Tracker {
    max: f64,
    checked: usize,
    worst: Option<(usize, usize, f64, f64)>,
    non_finite: bool,
}

impl Tracker {
    fn new() -> Self {
        Tracker {
            max: 0.0,
            checked: 0,
            worst: None,
            non_finite: false,
        }
    }

    fn record(&mut self, leaf: usize, elem: usize, a: f64, n: f64) {
        self.checked += 1;
        if !a.is_finite() || !n.is_finite() {
            self.non_finite = true;
            return;
        }
        let e = relative_error(a, n);
        if e > self.max || self.worst.is_none() {
            self.max = self.max.max(e);
            self.worst = Some((leaf, elem, a, n));
        }
    }

    fn finish(self) -> GradCheckReport {
        GradCheckReport {
            max_rel_err: if self.non_finite { f64::NAN } else { self.max },
            checked: self.checked,
            worst: self.worst,
        }
    }
}

/// Checks d(op)/d(inputs) against central differences with step `eps`.
pub fn finite_diff_check<F>(inputs: &[Tensor], eps: f64, op: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let objective = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = op(&mut g, &vars)?;
        let r = projection(g.shape(out));
        Ok(g.value(out).zip_map(&r, |a, b| a * b)?.sum())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    if !g.value(out).is_finite() {
        return Ok(Tracker {
            non_finite: true,
            ..Tracker::new()
        }
        .finish());
    }
    let r = projection(g.shape(out));
    let loss = g.weighted_sum(out, &r)?;
    let grads = g.backward(loss)?;

    let mut tracker = Tracker::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (leaf, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[leaf].shape()));
        for elem in 0..inputs[leaf].len() {
            let orig = inputs[leaf].data()[elem];
            work[leaf].data_mut()[elem] = orig + eps;
            let plus = objective(&work)?;
            work[leaf].data_mut()[elem] = orig - eps;
            let minus = objective(&work)?;
            work[leaf].data_mut()[elem] = orig;
            tracker.record(leaf, elem, analytic.data()[elem], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(tracker.finish())
}

/// Checks parameter gradients of a model objective built by `forward`.
///
/// `per_param` caps how many elements of each parameter are probed (evenly strided).
pub fn param_grad_check<F>(store: &ParamStore, eps: f64, per_param: Option<usize>, forward: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let objective = |s: &ParamStore, r: &Tensor| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let out = forward(&mut g)?;
        Ok(g.value(out).zip_map(r, |a, b| a * b)?.sum())
    };

    let mut g = Graph::with_params(store);
    let out = forward(&mut g)?;
    if !g.value(out).is_finite() {
        return Ok(Tracker {
            non_finite: true,
            ..Tracker::new()
        }
        .finish());
    }
    let r = projection(g.shape(out));
    let loss = g.weighted_sum(out, &r)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Option<Tensor>> = {
        let mut v = vec![None; store.len()];
        for (id, t) in grads.params() {
            v[id.index()] = Some(t.clone());
        }
        v
    };
    drop(g);

    let mut tracker = Tracker::new();
    let mut work = store.clone();
    for id in store.ids() {
        let n = store.value(id).len();
        let step = per_param.map_or(1, |cap| n.div_ceil(cap.max(1)));
        for elem in (0..n).step_by(step) {
            let a = analytic[id.index()].as_ref().map_or(0.0, |t| t.data()[elem]);
            let numeric = perturbed(&mut work, id, elem, eps, |s| objective(s, &r))?;
            tracker.record(id.index(), elem, a, numeric);
        }
    }
    Ok(tracker.finish())
}

fn perturbed(
    work: &mut ParamStore,
    id: ParamId,
    elem: usize,
    eps: f64,
    objective: impl Fn(&ParamStore) -> Result<f64>,
) -> Result<f64> {
    let orig = work.value(id).data()[elem];
    work.value_mut(id).data_mut()[elem] = orig + eps;
    let plus = objective(work)?;
    work.value_mut(id).data_mut()[elem] = orig - eps;
    let minus = objective(work)?;
    work.value_mut(id).data_mut()[elem] = orig;
    Ok((plus - minus) / (2.0 * eps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::from_vec(vec![0.3, -0.7]);
        // Correct op.
        let ok = finite_diff_check(std::slice::from_ref(&x), DEFAULT_EPS, |g, v| Ok(g.square(v[0]))).unwrap();
        assert!(ok.passes(1e-6), "{ok:?}");
        // An op whose backward ignores the chain rule factor of 2.
        let bad = finite_diff_check(&[x], DEFAULT_EPS, |g, v| {
            let val = g.value(v[0]).map(|a| a * a);
            Ok(g.push(val, &[v[0]], Box::new(|c| vec![Some(c.grad.zip_map(c.inputs[0], |g, x| g * x).unwrap())])))
        })
        .unwrap();
        assert!(!bad.passes(1e-2));
    }

    #[test]
    fn non_finite_output_reports_nan() {
        let x = Tensor::from_vec(vec![-1.0]);
        let r = finite_diff_check(&[x], DEFAULT_EPS, |g, v| {
            let val = g.value(v[0]).map(f64::sqrt);
            Ok(g.push(val, &[v[0]], Box::new(|c| vec![Some(c.grad.clone())])))
        })
        .unwrap();
        assert!(r.max_rel_err.is_nan());
        assert!(!r.passes(1.0));
    }
}
