use super::array::Array;
use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Relative-error floor in the denominator.
const DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Max relative error per parameter array.
    pub per_param: Vec<f64>,
    pub step: f64,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.iter().copied().fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Array]) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    if g.value(root).len() != 1 {
        return Err(Error::NonScalarRoot(g.shape(root).to_vec()));
    }
    Ok((g, vars, root))
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central differences with the given `step`.
pub fn finite_diff_check<F>(f: F, params: &[Array], step: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step {step} must be > 0"
        )));
    }
    let (mut g, vars, root) = evaluate(&f, params)?;
    g.backward(root)?;
    let analytic: Vec<Array> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut work = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (p, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..work[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let plus = evaluate(&f, &work)?;
            let fp = plus.0.value(plus.2).item();
            work[p].data_mut()[i] = orig - step;
            let minus = evaluate(&f, &work)?;
            let fm = minus.0.value(minus.2).item();
            work[p].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
        per_param.push(worst);
    }
    Ok(GradReport { per_param, step })
}
