//! Finite-difference verification of the tape's reverse-mode gradients.

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Magnitudes below this are treated as this size when forming the relative
/// error, so gradients that are zero analytically and numerically score 0.
/// Central differences at `FD_STEP` carry about 1e-10 of rounding noise, so
/// a smaller floor would score structurally zero gradients (a bias feeding
/// batch statistics) on noise alone.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Location of the worst element, e.g. `param enc.ff.inner.weight[3]`.
    pub worst: String,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares reverse-mode gradients of the scalar `f` against central finite
/// differences for every trainable parameter in `store` and every tensor in
/// `inputs`. Returns the maximum relative error.
pub fn gradient_check<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>, xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, s, &vars)?;
        scalar(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = f(&mut g, store, &vars)?;
    scalar(&g, out)?;
    g.backward(out)?;
    let param_grads = g.param_grads(store);
    let input_grads: Vec<Option<Tensor<f64>>> = vars.iter().map(|&v| g.grad(v)).collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: String::new(), checked: 0 };
    let record = |label: String, analytic: f64, numeric: f64, report: &mut GradCheckReport| {
        let e = relative_error(analytic, numeric);
        report.checked += 1;
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = e;
            report.worst = label;
        }
    };

    let mut probe = store.clone();
    for (id, grad) in store.ids().zip(&param_grads) {
        let entry = store.entry(id);
        if !entry.trainable {
            continue;
        }
        for i in 0..entry.value.len() {
            let orig = entry.value.data()[i];
            probe.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let plus = eval(&probe, inputs)?;
            probe.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let minus = eval(&probe, inputs)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let analytic = grad.as_ref().map_or(0.0, |g| g.data()[i]);
            record(format!("param {}[{i}]", entry.name), analytic, numeric, &mut report);
        }
    }

    let mut xs = inputs.to_vec();
    for (k, grad) in input_grads.iter().enumerate() {
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            xs[k].data_mut()[i] = orig + FD_STEP;
            let plus = eval(store, &xs)?;
            xs[k].data_mut()[i] = orig - FD_STEP;
            let minus = eval(store, &xs)?;
            xs[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let analytic = grad.as_ref().map_or(0.0, |g| g.data()[i]);
            record(format!("input {k}[{i}]"), analytic, numeric, &mut report);
        }
    }
    Ok(report)
}

fn scalar(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(NnError::Shape(format!("gradient check needs a scalar function, got {:?}", t.shape())));
    }
    Ok(t.data()[0])
}
