use rand::Rng;

use super::{
    one_hot, reparameterize, Init, Latent, ModelKind, ModelOutput, ModelSpec, Noise, HEAD_INIT,
};
use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn kaiming<R: Rng>(init: &mut Init<'_, R>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: init.kaiming(&format!("{name}.w"), &[fan_in, fan_out], fan_in as f64),
            b: init.constant(&format!("{name}.b"), &[1, fan_out], 0.0),
        }
    }

    fn head<R: Rng>(init: &mut Init<'_, R>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: init.uniform(&format!("{name}.w"), &[fan_in, fan_out], HEAD_INIT),
            b: init.uniform(&format!("{name}.b"), &[1, fan_out], HEAD_INIT),
        }
    }

    fn apply<'t>(&self, store: &ParamStore, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(tape.param(store, self.w))?
            .add(tape.param(store, self.b))
    }
}

/// flatten(T·r²) [+ one-hot] → hidden → ReLU → heads; z [+ one-hot] →
/// hidden → ReLU → r² → sigmoid.
pub(crate) struct FcLayers {
    enc_hidden: Linear,
    mu: Linear,
    log_var: Option<Linear>,
    dec_hidden: Linear,
    dec_out: Linear,
}

impl FcLayers {
    pub fn build<R: Rng>(spec: &ModelSpec, hidden: usize, init: &mut Init<'_, R>) -> Self {
        let pixels = spec.resolution * spec.resolution;
        let c = spec.condition_classes;
        let z = spec.latent_dim;
        let enc_in = spec.input_channels * pixels + c;
        FcLayers {
            enc_hidden: Linear::kaiming(init, "enc.hidden", enc_in, hidden),
            mu: Linear::head(init, "enc.mu", hidden, z),
            log_var: spec
                .kind
                .is_variational()
                .then(|| Linear::head(init, "enc.log_var", hidden, z)),
            dec_hidden: Linear::kaiming(init, "dec.hidden", z + c, hidden),
            dec_out: Linear::head(init, "dec.out", hidden, pixels),
        }
    }

    pub fn forward<'t>(
        &self,
        spec: &ModelSpec,
        store: &ParamStore,
        tape: &'t Tape,
        x: Var<'t>,
        condition: Option<&[usize]>,
        noise: &mut Noise<'_>,
    ) -> Result<ModelOutput<'t>> {
        let n = x.shape()[0];
        let mut flat = x.reshape(&[n, spec.input_channels * spec.resolution * spec.resolution])?;
        if spec.kind == ModelKind::ConditionalVariational {
            let labels = condition.expect("checked by caller");
            flat = Var::concat(&[flat, one_hot(tape, labels, spec.condition_classes)?], 1)?;
        }
        let h = self.enc_hidden.apply(store, tape, flat)?.relu();
        let mu = self.mu.apply(store, tape, h)?;
        let (log_var, sample) = match &self.log_var {
            Some(lv) => {
                let lv = lv.apply(store, tape, h)?;
                (Some(lv), reparameterize(mu, lv, noise)?)
            }
            None => (None, mu),
        };
        let reconstruction = self.decode(spec, store, tape, sample, condition)?;
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
        condition: Option<&[usize]>,
    ) -> Result<Var<'t>> {
        let n = z.shape()[0];
        let mut input = z;
        if spec.kind == ModelKind::ConditionalVariational {
            let labels = condition.expect("checked by caller");
            input = Var::concat(&[z, one_hot(tape, labels, spec.condition_classes)?], 1)?;
        }
        let h = self.dec_hidden.apply(store, tape, input)?.relu();
        let logits = self.dec_out.apply(store, tape, h)?;
        logits
            .sigmoid()
            .reshape(&[n, 1, spec.resolution, spec.resolution])
    }
}
