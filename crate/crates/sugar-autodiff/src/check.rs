use crate::error::{AutodiffError, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (parameter name, flat component index, analytic, numeric) of the worst
    /// component.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn assert_below(&self, tol: f64) {
        assert!(
            self.max_rel_err < tol,
            "gradient check failed: max rel err {:.3e} >= {:.3e} at {:?} ({} components)",
            self.max_rel_err,
            tol,
            self.worst,
            self.checked
        );
    }
}

/// Compare analytic gradients against central finite differences for the
/// given parameters. The builder must be a pure function of the store.
///
/// Components where both gradients are below 1e-8 in magnitude are compared
/// absolutely; otherwise the error is `|a-n| / max(|a|, |n|)`.
pub fn check_gradients<F, E>(
    store: &mut ParamStore,
    ids: &[ParamId],
    eps: f64,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape, &mut Binding) -> std::result::Result<Var, E>,
    E: std::fmt::Display,
{
    let mut run =
        move |store: &ParamStore, tape: &mut Tape, binding: &mut Binding| -> Result<Var> {
            build(store, tape, binding).map_err(|e| AutodiffError::GradCheck(e.to_string()))
        };
    let mut tape = Tape::new();
    let mut binding = Binding::new(store);
    let loss = run(store, &mut tape, &mut binding)?;
    if tape.value(loss).len() != 1 {
        return Err(AutodiffError::InvalidOp(
            "gradient check loss must be scalar".into(),
        ));
    }
    let grads = tape.backward(loss)?;

    let mut analytic: Vec<Vec<f64>> = Vec::with_capacity(ids.len());
    for &id in ids {
        let var = binding
            .bound()
            .find(|(pid, _)| *pid == id)
            .map(|(_, v)| v)
            .ok_or_else(|| {
                AutodiffError::GradCheck(format!(
                    "parameter {} not used by the forward pass",
                    store.name(id)
                ))
            })?;
        let g = grads
            .get(var)
            .map(|g| g.iter().cloned().collect())
            .unwrap_or_else(|| vec![0.0; store.value(id).len()]);
        analytic.push(g);
    }

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let mut binding = Binding::new(store);
        let loss = run(store, &mut tape, &mut binding)?;
        Ok(tape.scalar_value(loss))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    for (slot, &id) in ids.iter().enumerate() {
        let len = store.value(id).len();
        for k in 0..len {
            let orig = store.value(id).as_slice().unwrap()[k];
            store.value_mut(id).as_slice_mut().unwrap()[k] = orig + eps;
            let plus = eval(store)?;
            store.value_mut(id).as_slice_mut().unwrap()[k] = orig - eps;
            let minus = eval(store)?;
            store.value_mut(id).as_slice_mut().unwrap()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[slot][k];
            let denom = a.abs().max(numeric.abs());
            let err = if denom < 1e-8 {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / denom
            };
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((store.name(id).to_string(), k, a, numeric));
            }
        }
    }
    Ok(report)
}
