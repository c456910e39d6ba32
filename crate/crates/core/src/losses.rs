//! Reconstruction and regularization objectives.
//!
//! `l1` and `mse` are mean-reduced so values are comparable across
//! resolutions; `bce` and `kld` are sum-reduced.

use crate::error::{dim_err, Error, Result};
use crate::tensor::Var;

/// Predictions are clamped into `[BCE_EPS, 1 - BCE_EPS]` before the logs.
pub const BCE_EPS: f64 = 1e-7;

/// How far outside `[0, 1]` a prediction may stray before `bce` rejects it.
pub const BCE_RANGE_TOLERANCE: f64 = 1e-6;

fn same_shape(a: Var<'_>, b: Var<'_>, what: &str) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(dim_err(format!("{what}: {sa:?} vs {sb:?}")));
    }
    Ok(())
}

pub fn l1<'t>(x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    same_shape(x, y, "l1")?;
    Ok(x.sub(y)?.abs().mean())
}

pub fn mse<'t>(x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    same_shape(x, y, "mse")?;
    Ok(x.sub(y)?.square().mean())
}

/// Binary cross entropy `-Σ(x ln y + (1-x) ln(1-y))` of target `x` and
/// prediction `y`.
pub fn bce<'t>(x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    same_shape(x, y, "bce")?;
    let lo = -BCE_RANGE_TOLERANCE;
    let hi = 1.0 + BCE_RANGE_TOLERANCE;
    if let Some(v) = x.value().data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("bce target {v} outside [0, 1]")));
    }
    if let Some(v) = y.value().data().iter().find(|v| !(lo..=hi).contains(*v)) {
        return Err(Error::Domain(format!("bce prediction {v} outside (0, 1)")));
    }
    let yc = y.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let log_y = yc.log()?;
    let log_not_y = yc.neg().add_scalar(1.0).log()?;
    let not_x = x.neg().add_scalar(1.0);
    let ll = x.mul(log_y)?.add(not_x.mul(log_not_y)?)?;
    Ok(ll.sum().neg())
}

/// KL divergence of `N(m, exp(n))` from the standard normal, summed:
/// `-0.5 Σ(1 + n - m² - exp(n))` where `n` is the log-variance.
pub fn kld<'t>(m: Var<'t>, n: Var<'t>) -> Result<Var<'t>> {
    same_shape(m, n, "kld")?;
    let inner = n.add_scalar(1.0).sub(m.square())?.sub(n.exp())?;
    Ok(inner.sum().scale(-0.5))
}
