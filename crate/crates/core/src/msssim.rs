//! Multi-scale structural similarity (MS-SSIM) and the NMS loss built on it.
//!
//! Per scale, local statistics come from an 11-tap Gaussian window applied
//! in valid mode; contrast-structure terms are averaged per image, the
//! luminance term enters only at the coarsest scale, and scales are joined
//! by a weighted geometric mean. Negative per-scale terms are clipped to zero
//! before exponentiation. Images are halved by 2x2 mean pooling between
//! scales.

use std::rc::Rc;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Clone, Debug, PartialEq)]
pub struct MsSsim {
    /// Number of scales; `None` picks the largest count (up to 5) the image supports.
    pub scales: Option<usize>,
    /// Dynamic range of pixel values (1 for `[0, 1]` images).
    pub data_range: f64,
    pub k1: f64,
    pub k2: f64,
    pub sigma: f64,
    pub window: usize,
}

impl Default for MsSsim {
    fn default() -> Self {
        MsSsim {
            scales: None,
            data_range: 1.0,
            k1: 0.01,
            k2: 0.03,
            sigma: 1.5,
            window: 11,
        }
    }
}

/// Largest scale count (capped at 5) such that every halving keeps at least
/// `window` pixels on the shorter side.
pub fn max_scales(min_side: usize, window: usize) -> usize {
    let mut count = 0;
    while count < DEFAULT_SCALE_WEIGHTS.len() && min_side >= window << count {
        count += 1;
    }
    count
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

impl MsSsim {
    /// Exponent weights for an `h x w` image, renormalized to sum to 1 when
    /// fewer than five scales are used.
    pub fn weights_for(&self, h: usize, w: usize) -> Result<Vec<f64>> {
        let supported = max_scales(h.min(w), self.window);
        let count = match self.scales {
            Some(s) if s == 0 || s > DEFAULT_SCALE_WEIGHTS.len() => {
                return Err(Error::Config(format!("scale count {s} must be in 1..=5")));
            }
            Some(s) if s > supported => {
                return Err(Error::Config(format!(
                    "{h}x{w} image is too small for {s} scales; use at most {supported}"
                )));
            }
            Some(s) => s,
            None if supported == 0 => {
                return Err(Error::Config(format!(
                    "{h}x{w} image is smaller than the {}-pixel window",
                    self.window
                )));
            }
            None => supported,
        };
        let w = &DEFAULT_SCALE_WEIGHTS[..count];
        let total: f64 = w.iter().sum();
        Ok(w.iter().map(|v| v / total).collect())
    }

    /// Per-image MS-SSIM of `[N, 1, H, W]` batches, shaped `[N, 1, 1, 1]`.
    pub fn per_image<'t>(&self, x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
        let (sx, sy) = (x.shape(), y.shape());
        if sx != sy {
            return Err(dim_err(format!("ms_ssim of {sx:?} and {sy:?}")));
        }
        if sx.len() != 4 || sx[1] != 1 {
            return Err(dim_err(format!(
                "ms_ssim expects single-channel [N, 1, H, W] images, got {sx:?}"
            )));
        }
        let weights = self.weights_for(sx[2], sx[3])?;
        let kernel: Rc<[f64]> = Rc::from(gaussian_window(self.window, self.sigma));
        let c1 = (self.k1 * self.data_range).powi(2);
        let c2 = (self.k2 * self.data_range).powi(2);
        let per_image = [sx[0], 1, 1, 1];

        let (mut x, mut y) = (x, y);
        let mut result: Option<Var<'t>> = None;
        for (scale, &weight) in weights.iter().enumerate() {
            if scale > 0 {
                x = x.avg_pool2()?;
                y = y.avg_pool2()?;
            }
            let blur = |v: Var<'t>| v.separable_filter(kernel.clone());
            let mu_x = blur(x)?;
            let mu_y = blur(y)?;
            let mu_xx = mu_x.square();
            let mu_yy = mu_y.square();
            let mu_xy = mu_x.mul(mu_y)?;
            let var_x = blur(x.square())?.sub(mu_xx)?;
            let var_y = blur(y.square())?.sub(mu_yy)?;
            let cov = blur(x.mul(y)?)?.sub(mu_xy)?;
            let cs_map = cov
                .scale(2.0)
                .add_scalar(c2)
                .div(var_x.add(var_y)?.add_scalar(c2))?;
            let plane = {
                let s = cs_map.shape();
                (s[2] * s[3]) as f64
            };
            let term_map = if scale + 1 == weights.len() {
                let lum = mu_xy
                    .scale(2.0)
                    .add_scalar(c1)
                    .div(mu_xx.add(mu_yy)?.add_scalar(c1))?;
                lum.mul(cs_map)?
            } else {
                cs_map
            };
            let term = term_map.sum_to(&per_image)?.scale(1.0 / plane);
            let factor = term.powf_pos(weight);
            result = Some(match result {
                None => factor,
                Some(acc) => acc.mul(factor)?,
            });
        }
        result.ok_or_else(|| Error::Config("no scales".into()))
    }

    /// Batch-mean MS-SSIM as a scalar.
    pub fn evaluate<'t>(&self, x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
        Ok(self.per_image(x, y)?.mean())
    }

    /// `(1 - MS-SSIM) * 100`.
    pub fn nms<'t>(&self, x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
        Ok(nms_from_similarity(self.evaluate(x, y)?))
    }
}

pub fn nms_from_similarity(ms: Var<'_>) -> Var<'_> {
    ms.neg().add_scalar(1.0).scale(100.0)
}

pub fn ms_ssim<'t>(x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    MsSsim::default().evaluate(x, y)
}

pub fn nms<'t>(x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    MsSsim::default().nms(x, y)
}

/// Non-differentiable convenience: batch-mean MS-SSIM of two tensors.
pub fn ms_ssim_value(x: &Tensor, y: &Tensor, cfg: &MsSsim) -> Result<f64> {
    let tape = Tape::no_grad();
    let v = cfg.evaluate(tape.constant(x.clone()), tape.constant(y.clone()))?;
    let out = v.value().item();
    #[allow(clippy::let_and_return)] // the temporary borrowing `tape` must drop first
    out
}
