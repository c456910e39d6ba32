//! Residual-recursion wrapper around any [`AutoencoderNet`].
//!
//! Trial `t` sees `[r0 = x, r1, …, r(t-1), 0, …, 0]`, where
//! `r(t) = (x - y(t)) / 2 + offset` and `y(t)` is trial `t`'s
//! reconstruction. Only the final trial's output is supervised.

use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::losses;
use crate::models::{AutoencoderNet, ModelOutput, Noise};
use crate::msssim::MsSsim;
use crate::optim::Adam;
use crate::tensor::{Tape, Tensor, Var};

pub const MAX_TRIALS: usize = 4;
/// Offset that maps residuals of `[0, 1]` images back into `[0, 1]` for display.
pub const VISUAL_OFFSET: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RraeConfig {
    pub trials: usize,
    #[serde(default)]
    pub residual_offset: f64,
    #[serde(default = "default_detach")]
    pub detach_trials: bool,
}

fn default_detach() -> bool {
    true
}

impl RraeConfig {
    pub fn new(trials: usize) -> Self {
        RraeConfig {
            trials,
            residual_offset: 0.0,
            detach_trials: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_TRIALS).contains(&self.trials) {
            return Err(Error::Config(format!(
                "trial count must be in 1..={MAX_TRIALS}, got {}",
                self.trials
            )));
        }
        if !self.residual_offset.is_finite() {
            return Err(Error::Config("residual offset must be finite".into()));
        }
        Ok(())
    }
}

/// `(x - y) / 2 + offset`.
pub fn residual(x: &Tensor, y: &Tensor, offset: f64) -> Result<Tensor> {
    if x.shape() != y.shape() {
        return Err(dim_err(format!(
            "residual of {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    x.zip_map(y, |a, b| (a - b) / 2.0 + offset)
}

fn residual_var<'t>(x: Var<'t>, y: Var<'t>, offset: f64) -> Result<Var<'t>> {
    Ok(x.sub(y)?.scale(0.5).add_scalar(offset))
}

fn check_image_batch(x: &[usize]) -> Result<()> {
    if x.len() != 4 || x[1] != 1 {
        return Err(dim_err(format!(
            "expected an [N, 1, H, W] image batch, got {x:?}"
        )));
    }
    Ok(())
}

/// `[x, residuals…, zeros…]` as an `[N, T, H, W]` tensor.
pub fn build_trial_input(x: &Tensor, residuals: &[Tensor], trials: usize) -> Result<Tensor> {
    check_image_batch(x.shape())?;
    if trials == 0 || residuals.len() > trials - 1 {
        return Err(Error::Contract(format!(
            "{} residuals do not fit a {trials}-trial input",
            residuals.len()
        )));
    }
    let zeros = Tensor::zeros(x.shape());
    let mut parts: Vec<&Tensor> = Vec::with_capacity(trials);
    parts.push(x);
    for r in residuals {
        if r.shape() != x.shape() {
            return Err(dim_err(format!(
                "residual {:?} does not match image {:?}",
                r.shape(),
                x.shape()
            )));
        }
        parts.push(r);
    }
    parts.resize(trials, &zeros);
    Tensor::concat(&parts, 1)
}

/// Per-trial record of one recursive forward pass.
#[derive(Clone, Debug)]
pub struct TrialTrace {
    /// `y1 … yT`.
    pub reconstructions: Vec<Tensor>,
    /// `r1 … r(T-1)`, as fed to later trials.
    pub residuals: Vec<Tensor>,
    /// Latent sample of the final trial.
    pub latent: Tensor,
}

impl TrialTrace {
    /// Display residuals `(x - yt)/2 + 0.5` for every trial, including the last.
    pub fn visual_residuals(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.reconstructions
            .iter()
            .map(|y| residual(x, y, VISUAL_OFFSET))
            .collect()
    }
}

pub struct RraeOutput<'t> {
    /// Final trial's model output; its vars live on the caller's tape.
    pub output: ModelOutput<'t>,
    pub trace: TrialTrace,
}

/// Run all `T` trials. With `detach_trials`, trials before the last run on
/// a gradient-free tape and their residuals enter the final trial as
/// constants.
pub fn rrae_forward<'t, M: AutoencoderNet + ?Sized>(
    model: &M,
    tape: &'t Tape,
    x: &Tensor,
    condition: Option<&[usize]>,
    config: &RraeConfig,
    noise: &mut Noise<'_>,
) -> Result<RraeOutput<'t>> {
    config.validate()?;
    if model.input_channels() != config.trials {
        return Err(Error::Config(format!(
            "model takes {} input channels but the recursion runs {} trials",
            model.input_channels(),
            config.trials
        )));
    }
    check_image_batch(x.shape())?;
    let t_total = config.trials;
    let mut reconstructions = Vec::with_capacity(t_total);

    let (output, residuals) = if config.detach_trials {
        let mut residuals = Vec::with_capacity(t_total - 1);
        for _ in 1..t_total {
            let scratch = Tape::no_grad();
            let input = scratch.constant(build_trial_input(x, &residuals, t_total)?);
            let y = (*model
                .forward(&scratch, input, condition, noise)?
                .reconstruction
                .value())
            .clone();
            residuals.push(residual(x, &y, config.residual_offset)?);
            reconstructions.push(y);
        }
        let input = tape.constant(build_trial_input(x, &residuals, t_total)?);
        let output = model.forward(tape, input, condition, noise)?;
        (output, residuals)
    } else {
        let xv = tape.constant(x.clone());
        let zeros = tape.constant(Tensor::zeros(x.shape()));
        let mut residuals: Vec<Var<'t>> = Vec::with_capacity(t_total - 1);
        let input_of = |rs: &[Var<'t>]| -> Result<Var<'t>> {
            let mut parts = Vec::with_capacity(t_total);
            parts.push(xv);
            parts.extend_from_slice(rs);
            parts.resize(t_total, zeros);
            Var::concat(&parts, 1)
        };
        for _ in 1..t_total {
            let y = model
                .forward(tape, input_of(&residuals)?, condition, noise)?
                .reconstruction;
            residuals.push(residual_var(xv, y, config.residual_offset)?);
            reconstructions.push((*y.value()).clone());
        }
        let output = model.forward(tape, input_of(&residuals)?, condition, noise)?;
        (
            output,
            residuals.iter().map(|r| (*r.value()).clone()).collect(),
        )
    };
    reconstructions.push((*output.reconstruction.value()).clone());
    Ok(RraeOutput {
        trace: TrialTrace {
            reconstructions,
            residuals,
            latent: (*output.latent.sample.value()).clone(),
        },
        output,
    })
}

/// Training objective applied to the final trial.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    L1,
    Mse,
    /// Per-sample average of summed BCE plus KL divergence.
    #[serde(rename = "bce+kld", alias = "vae")]
    BceKld,
    Nms,
}

impl LossKind {
    pub fn id(self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::Mse => "mse",
            LossKind::BceKld => "bce+kld",
            LossKind::Nms => "nms",
        }
    }

    pub fn loss<'t>(self, x: &Tensor, out: &ModelOutput<'t>) -> Result<Var<'t>> {
        let y = out.reconstruction;
        let target = y.tape().constant(x.clone());
        match self {
            LossKind::L1 => losses::l1(target, y),
            LossKind::Mse => losses::mse(target, y),
            LossKind::Nms => MsSsim::default().nms(target, y),
            LossKind::BceKld => {
                let log_var = out
                    .latent
                    .log_var
                    .ok_or_else(|| Error::Config("bce+kld needs a variational model".into()))?;
                let n = x.shape()[0] as f64;
                let total = losses::bce(target, y)?.add(losses::kld(out.latent.mu, log_var)?)?;
                Ok(total.scale(1.0 / n))
            }
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(LossKind::L1),
            "mse" => Ok(LossKind::Mse),
            "bce+kld" | "vae" => Ok(LossKind::BceKld),
            "nms" => Ok(LossKind::Nms),
            other => Err(Error::Config(format!(
                "unknown loss {other:?}; expected l1, mse, vae (bce+kld) or nms"
            ))),
        }
    }
}

fn apply_update<M: AutoencoderNet + ?Sized>(
    model: &mut M,
    tape: &Tape,
    loss: Var<'_>,
    optimizer: &mut Adam,
) -> Result<f64> {
    let value = loss.value().item()?;
    if !value.is_finite() {
        return Err(Error::Training {
            iteration: optimizer.steps() + 1,
            reason: format!("loss is {value}"),
        });
    }
    model.params_mut().zero_grad();
    tape.backward(loss, model.params_mut())?;
    optimizer.step(model.params_mut())?;
    Ok(value)
}

/// One optimizer step on the final trial's loss. Returns the loss before
/// the update.
#[allow(clippy::too_many_arguments)]
pub fn rrae_train_step<M: AutoencoderNet + ?Sized>(
    model: &mut M,
    x: &Tensor,
    condition: Option<&[usize]>,
    config: &RraeConfig,
    loss: LossKind,
    optimizer: &mut Adam,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let tape = Tape::new();
    let out = rrae_forward(
        &*model,
        &tape,
        x,
        condition,
        config,
        &mut Noise::Sample(rng),
    )?;
    let l = loss.loss(x, &out.output)?;
    apply_update(model, &tape, l, optimizer)
}

/// Ordinary autoencoder step on `x` alone, without the recursion wrapper.
pub fn plain_train_step<M: AutoencoderNet + ?Sized>(
    model: &mut M,
    x: &Tensor,
    condition: Option<&[usize]>,
    loss: LossKind,
    optimizer: &mut Adam,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let tape = Tape::new();
    let out = model.forward(
        &tape,
        tape.constant(x.clone()),
        condition,
        &mut Noise::Sample(rng),
    )?;
    let l = loss.loss(x, &out)?;
    apply_update(model, &tape, l, optimizer)
}
