//! Central finite-difference check of tape gradients.

use std::collections::BTreeMap;

use super::{Graph, Result, Tensor, Var};

/// Worst disagreement between analytic and numerical partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so that gradients which
/// are numerically zero are compared in absolute terms.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Compares the tape gradient of the scalar `f` against central differences
/// with step `h` for every element of every parameter.
///
/// `f` must be deterministic in its inputs (reseed any RNG inside it).
pub fn check_gradients<F>(params: &BTreeMap<String, Tensor>, h: f64, f: F) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph, &BTreeMap<String, Var<'g>>) -> Result<Var<'g>>,
{
    let analytic = {
        let graph = Graph::new();
        let vars: BTreeMap<String, Var<'_>> = params
            .iter()
            .map(|(k, v)| (k.clone(), graph.param(v.clone())))
            .collect();
        let root = f(&graph, &vars)?;
        let grads = graph.backward(root)?;
        vars.iter()
            .map(|(k, v)| (k.clone(), grads.get(*v).expect("leaf gradient")))
            .collect::<BTreeMap<_, _>>()
    };

    let eval = |p: &BTreeMap<String, Tensor>| -> Result<f64> {
        let graph = Graph::new();
        let vars: BTreeMap<String, Var<'_>> = p
            .iter()
            .map(|(k, v)| (k.clone(), graph.constant(v.clone())))
            .collect();
        Ok(f(&graph, &vars)?.item())
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work = params.clone();
    for (name, tensor) in params {
        for i in 0..tensor.numel() {
            let orig = tensor.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[name].data()[i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report = GradCheck {
                    max_rel_error: err,
                    worst_param: name.clone(),
                    worst_index: i,
                    analytic: a,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}
