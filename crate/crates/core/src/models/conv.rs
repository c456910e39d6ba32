use rand::Rng;

use super::{
    reparameterize, Init, Latent, ModelOutput, ModelSpec, Noise, DEFAULT_BASE_CHANNELS,
    GROUP_NORM_EPS, HEAD_INIT,
};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

const KERNEL: usize = 4;
/// Spatial extent of the deepest feature map.
const BOTTOM: usize = 4;

/// Padding of each stride-2 stage from `resolution` down to 4x4.
///
/// Powers of two times four halve exactly with padding 1; 28 takes one
/// padded stage (28 → 16) and then halves.
pub fn conv_paddings(resolution: usize) -> Result<Vec<usize>> {
    if resolution == 28 {
        return Ok(vec![3, 1, 1]);
    }
    if resolution >= 2 * BOTTOM
        && resolution.is_multiple_of(BOTTOM)
        && (resolution / BOTTOM).is_power_of_two()
    {
        let stages = (resolution / BOTTOM).trailing_zeros() as usize;
        return Ok(vec![1; stages]);
    }
    Err(Error::Config(format!(
        "convolutional models support 28 or 4·2^k (k ≥ 1) pixels, got {resolution}"
    )))
}

/// Channel ladder starting at 16 and doubling per stage.
pub fn default_channels(resolution: usize) -> Result<Vec<usize>> {
    let stages = conv_paddings(resolution)?.len();
    Ok((0..stages).map(|i| DEFAULT_BASE_CHANNELS << i).collect())
}

fn groups_for(channels: usize) -> usize {
    let (mut a, mut b) = (8usize, channels);
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

struct Norm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl Norm {
    fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, channels: usize) -> Self {
        Norm {
            gamma: init.constant(&format!("{name}.gamma"), &[channels], 1.0),
            beta: init.constant(&format!("{name}.beta"), &[channels], 0.0),
            groups: groups_for(channels),
        }
    }

    fn apply<'t>(&self, store: &ParamStore, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        x.group_norm(
            self.groups,
            tape.param(store, self.gamma),
            tape.param(store, self.beta),
            GROUP_NORM_EPS,
        )
    }
}

struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    padding: usize,
}

/// Encoder stages, latent head(s), and the mirrored decoder.
pub(crate) struct ConvLayers {
    down: Vec<(Conv, Norm)>,
    mu: Conv,
    log_var: Option<Conv>,
    up_in: (Conv, Norm),
    up: Vec<(Conv, Norm)>,
    out: Conv,
}

impl ConvLayers {
    pub fn build<R: Rng>(
        spec: &ModelSpec,
        channels: &[usize],
        init: &mut Init<'_, R>,
    ) -> Result<Self> {
        let paddings = conv_paddings(spec.resolution)?;
        let stages = paddings.len();
        let widths = &channels[..stages];
        let k2 = KERNEL * KERNEL;
        let z = spec.latent_dim;

        let mut down = Vec::with_capacity(stages);
        let mut cin = spec.input_channels;
        for (i, (&c, &p)) in widths.iter().zip(&paddings).enumerate() {
            let name = format!("enc.{i}");
            let conv = Conv {
                w: init.kaiming(
                    &format!("{name}.w"),
                    &[c, cin, KERNEL, KERNEL],
                    (cin * k2) as f64,
                ),
                b: init.constant(&format!("{name}.b"), &[c], 0.0),
                stride: 2,
                padding: p,
            };
            down.push((conv, Norm::new(init, &format!("{name}.gn"), c)));
            cin = c;
        }
        let last = widths[stages - 1];
        let head = |init: &mut Init<'_, R>, name: &str| Conv {
            w: init.uniform(&format!("{name}.w"), &[z, last, BOTTOM, BOTTOM], HEAD_INIT),
            b: init.uniform(&format!("{name}.b"), &[z], HEAD_INIT),
            stride: 1,
            padding: 0,
        };
        let mu = head(init, "enc.mu");
        let log_var = spec
            .kind
            .is_variational()
            .then(|| head(init, "enc.log_var"));

        // Transposed-conv weights are [Cin, Cout, k, k].
        let up_in = (
            Conv {
                w: init.kaiming(
                    "dec.in.w",
                    &[z, last, BOTTOM, BOTTOM],
                    (z * BOTTOM * BOTTOM) as f64,
                ),
                b: init.constant("dec.in.b", &[last], 0.0),
                stride: 1,
                padding: 0,
            },
            Norm::new(init, "dec.in.gn", last),
        );
        let mut up = Vec::with_capacity(stages - 1);
        for i in (1..stages).rev() {
            let (ci, co) = (widths[i], widths[i - 1]);
            let name = format!("dec.{}", stages - 1 - i);
            let conv = Conv {
                w: init.kaiming(
                    &format!("{name}.w"),
                    &[ci, co, KERNEL, KERNEL],
                    (ci * k2 / 4) as f64,
                ),
                b: init.constant(&format!("{name}.b"), &[co], 0.0),
                stride: 2,
                padding: paddings[i],
            };
            up.push((conv, Norm::new(init, &format!("{name}.gn"), co)));
        }
        let out = Conv {
            w: init.uniform("dec.out.w", &[widths[0], 1, KERNEL, KERNEL], HEAD_INIT),
            b: init.constant("dec.out.b", &[1], 0.0),
            stride: 2,
            padding: paddings[0],
        };
        Ok(ConvLayers {
            down,
            mu,
            log_var,
            up_in,
            up,
            out,
        })
    }

    pub fn forward<'t>(
        &self,
        spec: &ModelSpec,
        store: &ParamStore,
        tape: &'t Tape,
        x: Var<'t>,
        noise: &mut Noise<'_>,
    ) -> Result<ModelOutput<'t>> {
        let n = x.shape()[0];
        // Image channel: (x - mean) / std. Residual channels: r / std, so a
        // zero residual stays zero.
        let t = spec.input_channels;
        let inv = 1.0 / spec.norm_std;
        let scale = Tensor::new(vec![1, t, 1, 1], vec![inv; t])?;
        let mut shift = vec![0.0; t];
        shift[0] = -spec.norm_mean * inv;
        let shift = Tensor::new(vec![1, t, 1, 1], shift)?;
        let mut h = x.mul(tape.constant(scale))?.add(tape.constant(shift))?;

        for (conv, norm) in &self.down {
            h = conv_fwd(conv, store, tape, h)?;
            h = norm.apply(store, tape, h)?.relu();
        }
        let z = spec.latent_dim;
        let mu = conv_fwd(&self.mu, store, tape, h)?.reshape(&[n, z])?;
        let (log_var, sample) = match &self.log_var {
            Some(head) => {
                let lv = conv_fwd(head, store, tape, h)?.reshape(&[n, z])?;
                (Some(lv), reparameterize(mu, lv, noise)?)
            }
            None => (None, mu),
        };
        let reconstruction = self.decode(spec, store, tape, sample)?;
        Ok(ModelOutput {
            reconstruction,
            latent: Latent {
                mu,
                log_var,
                sample,
            },
        })
    }

    pub fn decode<'t>(
        &self,
        spec: &ModelSpec,
        store: &ParamStore,
        tape: &'t Tape,
        z: Var<'t>,
    ) -> Result<Var<'t>> {
        let n = z.shape()[0];
        let mut h = z.reshape(&[n, spec.latent_dim, 1, 1])?;
        h = convt_fwd(&self.up_in.0, store, tape, h)?;
        h = self.up_in.1.apply(store, tape, h)?.relu();
        for (conv, norm) in &self.up {
            h = convt_fwd(conv, store, tape, h)?;
            h = norm.apply(store, tape, h)?.relu();
        }
        let out = convt_fwd(&self.out, store, tape, h)?;
        Ok(out.scale(spec.norm_std).add_scalar(spec.norm_mean))
    }
}

fn conv_fwd<'t>(c: &Conv, store: &ParamStore, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    x.conv2d(
        tape.param(store, c.w),
        Some(tape.param(store, c.b)),
        c.stride,
        c.padding,
    )
}

fn convt_fwd<'t>(c: &Conv, store: &ParamStore, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    x.conv_transpose2d(
        tape.param(store, c.w),
        Some(tape.param(store, c.b)),
        c.stride,
        c.padding,
    )
}
