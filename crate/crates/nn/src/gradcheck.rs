use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Magnitude floor in the relative-error denominator.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input index, element index)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares analytic gradients of the scalar built by `f` against central finite
/// differences with step [`GRAD_CHECK_STEP`], for every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(NnError::Shape("grad_check needs a scalar output".into()));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        checked: 0,
        tolerance,
        passed: true,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.len() {
            let x0 = t.data()[ei];
            work[ti].data_mut()[ei] = x0 + GRAD_CHECK_STEP;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = x0 - GRAD_CHECK_STEP;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = x0;
            let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
            let a = analytic[ti].data()[ei];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((ti, ei));
            }
        }
    }
    report.passed = report.max_rel_err <= tolerance;
    Ok(report)
}
