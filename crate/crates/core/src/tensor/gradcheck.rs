use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Numerical derivative of a scalar graph function by central differences.
pub fn central_difference<F>(f: &F, point: &Tensor, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |vals: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(point.shape().to_vec(), vals)?);
        let y = f(&mut g, x)?;
        g.value(y).item()
    };
    let base = point.values();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.to_vec();
        plus[i] += eps;
        let mut minus = base.to_vec();
        minus[i] -= eps;
        let d = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        if !d.is_finite() {
            return Err(Error::numeric("gradient_check", format!("central difference at {i}")));
        }
        out.push(d);
    }
    Ok(out)
}

/// Max over coordinates of `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
///
/// `f` must build a scalar from the single input var it is handed.
pub fn gradient_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::contract(format!("gradient_check eps {eps} outside [1e-6, 1e-4]")));
    }
    let mut g = Graph::new();
    let x = g.param(point);
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic = g
        .grad(x)
        .map(|s| s.to_vec())
        .unwrap_or_else(|| vec![0.0; point.numel()]);
    let numeric = central_difference(&f, point, eps)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max))
}
