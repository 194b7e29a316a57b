//! Central finite-difference verification of graph gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of [`finite_diff_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub elements: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.constant(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let root = f(&mut g, &vars)?;
    g.scalar_value(root)
}

/// Compares reverse-mode gradients of `f(params)` against central differences
/// with step `h`. The error of one element is
/// `|g_ad − g_fd| / max(|g_ad|, |g_fd|, 1e-12)`.
pub fn finite_diff_report<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let first = evaluate(&f, params)?;
    let second = evaluate(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.leaf(p.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        elements: 0,
    };
    let mut probe: Vec<Tensor<f64>> = params.to_vec();
    for (pi, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("every leaf has a gradient");
        for ei in 0..params[pi].numel() {
            let x = params[pi].data()[ei];
            probe[pi].data_mut()[ei] = x + h;
            let up = evaluate(&f, &probe)?;
            probe[pi].data_mut()[ei] = x - h;
            let down = evaluate(&f, &probe)?;
            probe[pi].data_mut()[ei] = x;
            let fd = (up - down) / (2.0 * h);
            let ad = analytic.data()[ei];
            let err = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-12);
            report.elements += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((pi, ei));
                report.analytic = ad;
                report.numeric = fd;
            }
        }
    }
    Ok(report)
}

/// Maximum relative error of [`finite_diff_report`].
pub fn finite_diff_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    finite_diff_report(f, params, h).map(|r| r.max_rel_error)
}
