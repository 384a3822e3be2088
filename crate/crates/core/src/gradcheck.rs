//! Central-difference gradient checking against the tape's reverse sweep.

use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::parallel::{self, Execution};
use crate::params::{GradStore, ParamId, ParamStore};

/// A deterministic scalar function of a parameter store.
pub trait Objective: Sync {
    fn loss(&self, params: &ParamStore) -> Result<f64>;
    fn loss_and_grad(&self, params: &ParamStore) -> Result<(f64, GradStore)>;
}

/// Adapts a single-tape closure into an [`Objective`].
pub struct TapeObjective<F>(pub F);

impl<F> Objective for TapeObjective<F>
where
    F: for<'s> Fn(&mut Tape<'s>) -> Result<Var> + Sync,
{
    fn loss(&self, params: &ParamStore) -> Result<f64> {
        let mut tape = Tape::with_params(params);
        let l = (self.0)(&mut tape)?;
        Ok(tape.value(l).item())
    }

    fn loss_and_grad(&self, params: &ParamStore) -> Result<(f64, GradStore)> {
        let mut tape = Tape::with_params(params);
        let l = (self.0)(&mut tape)?;
        tape.backward(l)?;
        Ok((tape.value(l).item(), tape.param_grads()))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error (strict `<`).
    pub tol: f64,
    /// Denominator floor: relative error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    pub exec: Execution,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-6,
            floor: 1e-4,
            exec: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst element.
    pub worst: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Worst relative error per group, where a parameter's group is chosen by
    /// `group_of(name)`. Groups keep first-seen order.
    pub fn grouped(&self, group_of: impl Fn(&str) -> String) -> Vec<(String, f64, bool)> {
        let mut out: Vec<(String, f64, bool)> = Vec::new();
        for p in &self.params {
            let g = group_of(&p.name);
            match out.iter_mut().find(|(n, _, _)| *n == g) {
                Some(entry) => {
                    entry.1 = entry.1.max(p.max_rel_err);
                    entry.2 &= p.passed;
                }
                None => out.push((g, p.max_rel_err, p.passed)),
            }
        }
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the autograd gradient of `f` with `(f(p+h) - f(p-h)) / 2h`
/// elementwise for each listed parameter.
pub fn grad_check<O: Objective + ?Sized>(
    f: &O,
    store: &ParamStore,
    params: &[ParamId],
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let (base, grads) = f.loss_and_grad(store)?;
    let again = f.loss(store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "two evaluations at the same point differ: {base:e} vs {again:e}"
        )));
    }

    let jobs: Vec<(ParamId, usize)> = params
        .iter()
        .flat_map(|&id| (0..store.get(id).len()).map(move |i| (id, i)))
        .collect();
    let numeric = parallel::try_map(opts.exec, &jobs, |&(id, i)| {
        let mut probe = store.clone();
        let x0 = probe.get(id).data()[i];
        probe.get_mut(id).data_mut()[i] = x0 + opts.step;
        let plus = f.loss(&probe)?;
        probe.get_mut(id).data_mut()[i] = x0 - opts.step;
        let minus = f.loss(&probe)?;
        Ok((plus - minus) / (2.0 * opts.step))
    })?;

    let mut checks = Vec::with_capacity(params.len());
    let mut offset = 0;
    for &id in params {
        let n = store.get(id).len();
        let analytic = grads.get(id);
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            elements: n,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst: 0,
            passed: true,
        };
        for i in 0..n {
            let a = analytic.map_or(0.0, |g| g.data()[i]);
            let num = numeric[offset + i];
            let rel = relative_error(a, num, opts.floor);
            check.max_abs_err = check.max_abs_err.max((a - num).abs());
            if rel > check.max_rel_err || rel.is_nan() {
                check.max_rel_err = rel;
                check.worst = i;
            }
        }
        check.passed = check.max_rel_err < opts.tol;
        offset += n;
        checks.push(check);
    }
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: checks.iter().all(|c| c.passed),
        params: checks,
        max_rel_err,
        tol: opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn square_at_one() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(1.0));
        let f = TapeObjective(move |t: &mut Tape| {
            let v = t.param(x)?;
            t.mul(v, v)
        });
        let (_, g) = f.loss_and_grad(&store).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 2.0);
        let r = grad_check(&f, &store, &[x], GradCheckOptions::default()).unwrap();
        assert!(r.passed);
        assert!(r.max_rel_err < 1e-9, "{}", r.max_rel_err);
    }

    #[test]
    fn zero_tolerance_always_fails() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0));
        let f = TapeObjective(move |t: &mut Tape| t.param(x));
        let opts = GradCheckOptions {
            tol: 0.0,
            ..Default::default()
        };
        let r = grad_check(&f, &store, &[x], opts).unwrap();
        assert!(!r.passed);
        assert_eq!(r.params.len(), 1);
    }

    struct Flaky(std::sync::atomic::AtomicU64);

    impl Objective for Flaky {
        fn loss(&self, _: &ParamStore) -> Result<f64> {
            Ok(self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst) as f64)
        }
        fn loss_and_grad(&self, p: &ParamStore) -> Result<(f64, GradStore)> {
            Ok((self.loss(p)?, GradStore::for_store(p)))
        }
    }

    #[test]
    fn nondeterminism_aborts() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0));
        let f = Flaky(Default::default());
        let r = grad_check(&f, &store, &[x], GradCheckOptions::default());
        assert!(matches!(r, Err(Error::NonDeterministic(_))));
    }
}
