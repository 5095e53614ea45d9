//! Central-difference verification of tape gradients.

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::NumericsError;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over entries of `|analytic − fd| / max(1, |fd|)`
    pub max_rel_err: f64,
    /// parameter name and flat index where `max_rel_err` was attained
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Pins a closure to the higher-ranked signature the checker expects, so
/// closures can be bound to a `let` before use.
pub fn objective<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Var<'t>,
{
    f
}

/// Analytic gradient of the scalar built by `f`, one tensor per parameter.
pub fn analytic_gradients<F>(store: &ParamStore, f: &F) -> Result<(f64, Vec<Tensor>), NumericsError>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let loss = f(&tape, &bound);
    let value = loss.item();
    let grads = loss.backward()?;
    let per_param = bound.vars().iter().map(|&v| grads.get_or_zeros(v)).collect();
    Ok((value, per_param))
}

fn eval<F>(store: &ParamStore, f: &F) -> f64
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let bound = store.bind_frozen(&tape);
    f(&tape, &bound).item()
}

/// Compares the tape gradient of `f` against central differences with step
/// `h` over every entry of every parameter in `store`.
pub fn finite_diff_check<F>(store: &ParamStore, h: f64, f: F) -> Result<GradCheckReport, NumericsError>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Var<'t>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let (value, analytic) = analytic_gradients(store, &f)?;
    if !value.is_finite() {
        return Err(NumericsError::NonFinite("objective"));
    }
    let mut work = store.clone();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, entries_checked: 0 };
    for id in store.ids() {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).values()[k];
            work.get_mut(id).values_mut()[k] = orig + h;
            let up = eval(&work, &f);
            work.get_mut(id).values_mut()[k] = orig - h;
            let down = eval(&work, &f);
            work.get_mut(id).values_mut()[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(NumericsError::NonFinite("perturbed objective"));
            }
            let fd = (up - down) / (2.0 * h);
            let a = analytic[id.0].values()[k];
            let err = (a - fd).abs() / fd.abs().max(1.0);
            report.entries_checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((store.name(id).to_string(), k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn half_squared_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("p", Tensor::new(vec![2, 3], (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()));
        let f = objective(|_, b| {
            let p = b.vars()[0];
            p.mul(p).sum().scale(0.5)
        });
        let (_, g) = analytic_gradients(&store, &f).unwrap();
        assert!(g[0].max_abs_diff(store.get(crate::numerics::ParamId(0))) < 1e-15);
        let rep = finite_diff_check(&store, DEFAULT_FD_STEP, f).unwrap();
        assert!(rep.max_rel_err < 1e-8, "{rep:?}");
        assert_eq!(rep.entries_checked, 6);
    }

    #[test]
    fn softmax_cross_entropy_logits() {
        let mut store = ParamStore::new();
        store.insert("logits", Tensor::new(vec![1, 3], vec![0.3, -1.2, 2.0]));
        let ce = objective(|_, b| b.vars()[0].softmax_rows().gather(&[1]).ln().scale(-1.0).sum());
        let rep = finite_diff_check(&store, DEFAULT_FD_STEP, ce).unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::vector(vec![1.0]));
        let f = objective(|_, b| b.vars()[0].scale(f64::INFINITY).sum());
        assert!(finite_diff_check(&store, DEFAULT_FD_STEP, f).is_err());
    }
}
