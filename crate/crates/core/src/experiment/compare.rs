use serde::Serialize;

use crate::dct::Truncation;
use crate::error::{dim_err, Result};
use crate::models::{Autoencoder, AutoencoderNet, Noise};
use crate::rrae::{residual, rrae_forward, RraeConfig, VISUAL_OFFSET};
use crate::tensor::{Tape, Tensor};

/// Code lengths and errors of the autoencoder and the DCT prefix code that
/// first matches its L1 error.
#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub latent_size: usize,
    pub rrae_l1: f64,
    pub dct_k: usize,
    pub dct_l1: f64,
    /// `(x - y)/2 + 0.5` for each method, `[H, W]`.
    #[serde(skip)]
    pub rrae_residual: Tensor,
    #[serde(skip)]
    pub dct_residual: Tensor,
}

/// `image` is `[1, 1, H, W]` in `[0, 1]`. The autoencoder output is clamped
/// before measuring.
pub fn compare_compression(
    image: &Tensor,
    model: &Autoencoder,
    config: &RraeConfig,
) -> Result<Comparison> {
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 1 {
        return Err(dim_err(format!(
            "expected one [1, 1, H, W] image, got {s:?}"
        )));
    }
    let (h, w) = (s[2], s[3]);
    let tape = Tape::no_grad();
    let out = rrae_forward(model, &tape, image, None, config, &mut Noise::Zero)?;
    let y = out.output.reconstruction.value().map(|v| v.clamp(0.0, 1.0));
    let n = image.len() as f64;
    let rrae_l1 = image
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n;

    let plane = image.clone().reshape(&[h, w])?;
    let trunc = Truncation::new(&plane)?;
    let (dct_k, dct_l1) = trunc.smallest_k_for_l1(rrae_l1)?;
    let dct_y = crate::dct::decode_topk(&trunc.encode(dct_k)?)?;
    Ok(Comparison {
        latent_size: model.latent_dim(),
        rrae_l1,
        dct_k,
        dct_l1,
        rrae_residual: residual(&plane, &y.reshape(&[h, w])?, VISUAL_OFFSET)?,
        dct_residual: residual(&plane, &dct_y, VISUAL_OFFSET)?,
    })
}
