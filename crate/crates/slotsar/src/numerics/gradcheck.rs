//! Central-difference verification of reverse-mode gradients.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Precision;

/// Verification outcome for one parameter.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub pass: bool,
}

/// Per-parameter report; failures are reported, never thrown.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn worst(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Compare reverse-mode gradients of a scalar loss against central finite
/// differences, parameter by parameter, element by element.
///
/// `build` must construct the loss from scratch on the given graph so it
/// can be re-evaluated under perturbed parameters. Runs in 64-bit mode.
pub fn grad_check<F>(
    build: F,
    params: &ParamStore,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    grad_check_eval(
        |store, want_grads| {
            let mut g = Graph::new(Precision::F64);
            let loss = build(&mut g, store)?;
            let value = g.value(loss).item();
            let grads = if want_grads {
                Some(g.backward(loss)?)
            } else {
                None
            };
            Ok((value, grads))
        },
        params,
        step,
        tol,
    )
}

/// Generalized checker for losses evaluated outside a caller-owned graph
/// (whole-model forwards). `eval(store, want_grads)` returns the scalar
/// loss and, when asked, the reverse-mode gradients; the evaluation must
/// be deterministic given the store.
pub fn grad_check_eval<F>(
    eval: F,
    params: &ParamStore,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, bool) -> Result<(f64, Option<crate::numerics::graph::Gradients>)>,
{
    if !(1e-7..=1e-4).contains(&step) {
        return Err(Error::Param(format!(
            "grad_check step {step} outside [1e-7, 1e-4]"
        )));
    }
    let (_, grads) = eval(params, true)?;
    let grads = grads.ok_or_else(|| Error::Data("eval returned no gradients".to_string()))?;

    let eval = |store: &ParamStore| -> Result<f64> { Ok(eval(store, false)?.0) };

    let mut report = GradCheckReport::default();
    for (name, param) in params.iter() {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::Data(format!("no gradient entry for {name}")))?;
        let mut max_rel = 0.0_f64;
        let mut max_abs = 0.0_f64;
        for k in 0..param.numel() {
            let orig = param.data()[k];
            let mut store = params.clone();
            {
                let t = store.get_mut(name)?;
                t.data_mut()[k] = orig + step;
            }
            let lp = eval(&store)?;
            {
                let t = store.get_mut(name)?;
                t.data_mut()[k] = orig - step;
            }
            let lm = eval(&store)?;
            let numeric = (lp - lm) / (2.0 * step);
            let a = analytic.data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-6);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        report.entries.push(GradCheckEntry {
            name: name.clone(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            pass: max_rel < tol,
        });
    }
    Ok(report)
}

/// Convenience for single-tensor checks in tests: wraps one named tensor
/// into a store.
pub fn single_param_store(name: &str, t: crate::numerics::tensor::Tensor) -> ParamStore {
    let mut store = ParamStore::new();
    store.insert(name, t);
    store
}

/// Fetch a parameter as a graph leaf.
pub fn bind(g: &mut Graph, store: &ParamStore, name: &str) -> Result<Var> {
    Ok(g.param(name, Arc::clone(store.get(name)?)))
}
