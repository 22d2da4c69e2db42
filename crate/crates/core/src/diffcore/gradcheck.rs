//! Central-difference verification of reverse-mode gradients, in `f64`.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// (input index, coordinate) of the worst coordinate
    pub worst: (usize, usize),
    pub checked: usize,
}

fn eval_scalar<F>(f: &F, points: &[Tensor<f64>]) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Graph(format!(
            "gradient check needs a scalar function, got shape {:?}",
            g.value(out).shape()
        )));
    }
    Ok((g, vars, out))
}

/// Checks `f` w.r.t. several input tensors. `coords` restricts the check to
/// `(input, index)` pairs; `None` checks every coordinate of every input.
pub fn finite_diff_check_multi<F>(
    f: F,
    points: &[Tensor<f64>],
    eps: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = eval_scalar(&f, points)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = points
                .iter()
                .enumerate()
                .flat_map(|(t, p)| (0..p.len()).map(move |i| (t, i)))
                .collect();
            &all
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = points.to_vec();
    for &(t, i) in coords {
        let orig = points[t].data()[i];
        probe[t].data_mut()[i] = orig + eps;
        let (gp, _, op) = eval_scalar(&f, &probe)?;
        let plus = gp.value(op).data()[0];
        probe[t].data_mut()[i] = orig - eps;
        let (gm, _, om) = eval_scalar(&f, &probe)?;
        let minus = gm.value(om).data()[0];
        probe[t].data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[t][i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst = (t, i);
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Max relative error between the analytic gradient of scalar `f` at `point`
/// and its central-difference estimate.
pub fn finite_diff_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let report = finite_diff_check_multi(|g, vars| f(g, vars[0]), std::slice::from_ref(point), eps, None)?;
    Ok(report.max_rel_error)
}
