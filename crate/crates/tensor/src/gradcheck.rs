//! Central finite-difference gradient checking against the tape.

use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares tape gradients of `objective` against central differences for
/// every element of every parameter in `store`.
///
/// `objective` must be deterministic; it is evaluated twice up front and the
/// check is refused if the two values differ. Existing gradients in `store`
/// are cleared.
pub fn grad_check<F>(store: &mut ParamStore, objective: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = objective(store, &mut tape)?;
        tape.value(out).item()
    };

    store.zero_grad();
    let mut tape = Tape::new();
    let loss_var = objective(store, &mut tape)?;
    let loss = tape.value(loss_var).item()?;
    tape.backward(loss_var, store)?;
    drop(tape);

    let again = eval(store)?;
    if again.to_bits() != loss.to_bits() {
        return Err(TensorError::NonDeterministic { first: loss, second: again });
    }

    let mut checks = Vec::with_capacity(store.len());
    for pi in 0..store.len() {
        let id = ParamId(pi);
        let n = store.get(id).value.len();
        let analytic = store.get(id).grad.clone();
        let mut worst = 0.0f64;
        let mut worst_index = 0;
        for e in 0..n {
            let orig = store.get(id).value.data()[e];
            store.get_mut(id).value.data_mut()[e] = orig + opts.step;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[e] = orig - opts.step;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic.data()[e], numeric);
            if err > worst || err.is_nan() {
                worst = err;
                worst_index = e;
            }
        }
        checks.push(ParamCheck {
            name: store.get(id).name.clone(),
            elements: n,
            max_rel_error: worst,
            worst_index,
            passed: worst <= opts.tolerance,
        });
    }
    Ok(GradCheckReport { loss, params: checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::Tensor;

    #[test]
    fn linear_objective_is_exact() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![0.5, -1.5, 2.0]));
        let report = grad_check(
            &mut store,
            |s, t| {
                let w = t.param(s, w);
                let c = t.constant(Tensor::vector(vec![3.0, 1.0, -2.0]));
                let p = t.mul(w, c)?;
                Ok(t.sum(p))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-10, "{report:?}");
    }

    #[test]
    fn corrupted_backward_rule_fails() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![0.7, -0.2]));
        let report = grad_check(
            &mut store,
            |s, t| {
                let w = t.param(s, w);
                // x^2 with a wrong derivative (x instead of 2x)
                let sq = t.custom_unary(
                    w,
                    |x| Tensor::new(x.shape(), x.data().iter().map(|v| v * v).collect()).unwrap(),
                    Box::new(|x, _, g| {
                        Tensor::new(x.shape(), x.data().iter().zip(g.data()).map(|(v, g)| v * g).collect()).unwrap()
                    }),
                )?;
                Ok(t.sum(sq))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.all_passed());
    }

    #[test]
    fn nondeterminism_is_detected() {
        use std::cell::Cell;
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![1.0]));
        let calls = Cell::new(0u64);
        let res = grad_check(
            &mut store,
            |s, t| {
                calls.set(calls.get() + 1);
                let w = t.param(s, w);
                let drift = t.constant(Tensor::vector(vec![calls.get() as f64]));
                let x = t.add(w, drift)?;
                Ok(t.sum(x))
            },
            GradCheckOptions::default(),
        );
        assert!(matches!(res, Err(TensorError::NonDeterministic { .. })));
    }
}
