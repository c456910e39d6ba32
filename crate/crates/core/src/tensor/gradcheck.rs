//! Central finite-difference verification of reverse-mode gradients.

use super::tape::{ParamStore, Tape, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

fn scalar_of(v: Var<'_>) -> Result<f64> {
    let t = v.value();
    if t.len() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// Maximum relative error between the reverse-mode gradient of `f` at `x`
/// and central differences with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if h.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Contract(format!("step must be positive, got {h}")));
    }
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&tape, leaf)?;
    scalar_of(out)?;
    let grads = tape.backward(out, &mut ParamStore::new())?;
    let analytic = grads
        .get(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let tape = Tape::no_grad();
        let v = tape.constant(t);
        scalar_of(f(&tape, v)?)
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Per-parameter maximum relative error of d`loss`/dθ against central
/// differences. At most `max_elements` evenly spaced entries of each
/// parameter tensor are perturbed.
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    loss: F,
    h: f64,
    max_elements: usize,
) -> Result<Vec<(String, f64)>>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    store.zero_grad();
    {
        let tape = Tape::new();
        let out = loss(&tape, store)?;
        scalar_of(out)?;
        tape.backward(out, store)?;
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::no_grad();
        scalar_of(loss(&tape, s)?)
    };
    let ids: Vec<_> = (0..store.len()).map(super::tape::ParamId).collect();
    let mut report = Vec::with_capacity(ids.len());
    for id in ids {
        let original = (*store.get(id).value).clone();
        let analytic = store.get(id).grad.clone();
        let n = original.len();
        let step = n.div_ceil(max_elements.max(1)).max(1);
        let mut worst: f64 = 0.0;
        for i in (0..n).step_by(step) {
            let mut p = original.clone();
            p.data_mut()[i] += h;
            store.set_value(id, p)?;
            let up = eval(store)?;
            let mut p = original.clone();
            p.data_mut()[i] -= h;
            store.set_value(id, p)?;
            let down = eval(store)?;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        store.set_value(id, original)?;
        report.push((store.get(id).name.clone(), worst));
    }
    Ok(report)
}
