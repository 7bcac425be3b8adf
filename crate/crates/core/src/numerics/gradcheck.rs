use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::NumericsError;

/// Central-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-4;
/// Absolute disagreements below this are treated as exact agreement.
pub const GRAD_CHECK_ABS_FLOOR: f64 = 1e-8;

/// Worst disagreement found by [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// `|a - n| / max(|a|, |n|)`, or zero when `|a - n|` is under the absolute floor.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= GRAD_CHECK_ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64, NumericsError>
where
    F: for<'g> Fn(&'g Graph, &'g ParamStore) -> Result<Var<'g>, NumericsError>,
{
    let graph = Graph::new();
    let out = f(&graph, store)?;
    let value = out.item();
    if !value.is_finite() {
        let op = graph.first_non_finite().unwrap_or("output");
        return Err(NumericsError::NonFinite { op });
    }
    Ok(value)
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with step `h`, over every entry of the selected parameters
/// (all parameters when `only` is `None`).
pub fn grad_check<F>(
    store: &ParamStore,
    h: f64,
    only: Option<&[ParamId]>,
    f: F,
) -> Result<GradCheckReport, NumericsError>
where
    F: for<'g> Fn(&'g Graph, &'g ParamStore) -> Result<Var<'g>, NumericsError>,
{
    let analytic = {
        let graph = Graph::new();
        let out = f(&graph, store)?;
        if !out.item().is_finite() {
            let op = graph.first_non_finite().unwrap_or("output");
            return Err(NumericsError::NonFinite { op });
        }
        graph.backward(out)?.param_grads(store)
    };
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    for id in ids {
        for i in 0..store.value(id).len() {
            let original = store.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = original + h;
            let plus = evaluate(&work, &f)?;
            work.value_mut(id).data_mut()[i] = original - h;
            let minus = evaluate(&work, &f)?;
            work.value_mut(id).data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id)[i];
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if report.entries_checked == 1 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn linear_function_is_exact() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap()).unwrap();
        let report = grad_check(&store, GRAD_CHECK_STEP, None, |g, s| {
            let w = g.param(s, s.get("w").unwrap());
            let c = g.constant(Tensor::new(&[3], vec![1.5, -2.0, 0.25]).unwrap());
            Ok(w.mul(c)?.sum())
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-10, "{report:?}");
        assert_eq!(report.entries_checked, 3);
    }

    #[test]
    fn sigmoid_chain_depth_five() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::new(&[4], vec![-1.0, 0.2, 0.9, 2.5]).unwrap()).unwrap();
        let report = grad_check(&store, GRAD_CHECK_STEP, None, |g, s| {
            let mut v = g.param(s, s.get("x").unwrap());
            for _ in 0..5 {
                v = v.scale(3.0).sigmoid();
            }
            Ok(v.sum())
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn blocked_path_has_zero_analytic_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(0.8)).unwrap();
        let graph = Graph::new();
        let x = graph.param(&store, id);
        let out = x.tanh().stop_gradient().mul(graph.scalar(2.0)).unwrap().sum();
        let grads = graph.backward(out).unwrap().param_grads(&store);
        assert_eq!(grads.get(id), &[0.0]);
        // The severed probe: with the blocked path removed, the output no longer
        // depends on x, so its finite difference is zero as well.
        let severed = |v: f64| 2.0 * 0.8f64.tanh() + 0.0 * v;
        let fd = (severed(0.8 + 1e-4) - severed(0.8 - 1e-4)) / 2e-4;
        assert_eq!(fd, 0.0);
    }

    #[test]
    fn non_finite_forward_names_op() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(-1.0)).unwrap();
        let err = grad_check(&store, GRAD_CHECK_STEP, None, |g, s| Ok(g.param(s, s.get("x").unwrap()).log().sum()))
            .unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { op: "log" }), "{err}");
    }
}
