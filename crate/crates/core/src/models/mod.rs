//! Autoencoder families: fully-connected (conditional) VAEs with sigmoid
//! outputs and convolutional autoencoders with linear, denormalized outputs.
//! Every model takes a `T`-channel input: the image followed by `T - 1`
//! residual channels.

mod conv;
mod fc;

use std::path::Path;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub use conv::{conv_paddings, default_channels};

pub const GROUP_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_HIDDEN: usize = 512;
pub const DEFAULT_BASE_CHANNELS: usize = 16;
/// Half-width of the uniform init used for latent heads and output layers.
pub const HEAD_INIT: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Plain,
    Variational,
    ConditionalVariational,
}

impl ModelKind {
    pub fn is_variational(self) -> bool {
        !matches!(self, ModelKind::Plain)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    FullyConnected { hidden: usize },
    Convolutional { channels: Vec<usize> },
}

/// Everything needed to rebuild a model's layer graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub latent_dim: usize,
    pub input_channels: usize,
    pub resolution: usize,
    #[serde(default)]
    pub condition_classes: usize,
    pub architecture: Architecture,
    /// Dataset statistics used to normalize conv inputs and denormalize outputs.
    pub norm_mean: f64,
    pub norm_std: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.input_channels == 0 {
            return Err(Error::Config(format!(
                "latent dimension ({}) and input channels ({}) must be positive",
                self.latent_dim, self.input_channels
            )));
        }
        if self.norm_std.is_nan() || self.norm_std <= 0.0 || !self.norm_mean.is_finite() {
            return Err(Error::Config(format!(
                "normalization needs finite mean and positive std, got {} / {}",
                self.norm_mean, self.norm_std
            )));
        }
        let conditional = self.kind == ModelKind::ConditionalVariational;
        if conditional != (self.condition_classes > 0) {
            return Err(Error::Config(
                "condition classes must be set exactly for conditional models".into(),
            ));
        }
        match &self.architecture {
            Architecture::FullyConnected { hidden } => {
                if *hidden == 0 || self.resolution == 0 {
                    return Err(Error::Config(
                        "hidden width and resolution must be positive".into(),
                    ));
                }
            }
            Architecture::Convolutional { channels } => {
                if conditional {
                    return Err(Error::Config(
                        "conditional models are fully-connected only".into(),
                    ));
                }
                let stages = conv_paddings(self.resolution)?.len();
                if channels.len() < stages || channels.contains(&0) {
                    return Err(Error::Config(format!(
                        "resolution {} needs {stages} positive channel widths, got {channels:?}",
                        self.resolution
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Source of reparameterization noise.
pub enum Noise<'r> {
    /// Evaluation: the latent sample is the posterior mean.
    Zero,
    Sample(&'r mut dyn RngCore),
}

impl Noise<'_> {
    pub(crate) fn draw(&mut self, shape: &[usize]) -> Option<Tensor> {
        match self {
            Noise::Zero => None,
            Noise::Sample(rng) => Some(Tensor::from_fn(shape, |_| {
                StandardNormal.sample(&mut **rng)
            })),
        }
    }
}

pub struct Latent<'t> {
    pub mu: Var<'t>,
    pub log_var: Option<Var<'t>>,
    pub sample: Var<'t>,
}

pub struct ModelOutput<'t> {
    /// `[N, 1, H, W]`.
    pub reconstruction: Var<'t>,
    pub latent: Latent<'t>,
}

/// The contract the residual-recursion loop relies on.
pub trait AutoencoderNet {
    fn input_channels(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn kind(&self) -> ModelKind;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        condition: Option<&[usize]>,
        noise: &mut Noise<'_>,
    ) -> Result<ModelOutput<'t>>;

    /// Decoder-only pass from latent codes `[N, z]`.
    fn decode<'t>(
        &self,
        tape: &'t Tape,
        z: Var<'t>,
        condition: Option<&[usize]>,
    ) -> Result<Var<'t>>;
}

enum Layers {
    Fc(fc::FcLayers),
    Conv(conv::ConvLayers),
}

/// A concrete autoencoder built from a [`ModelSpec`].
pub struct Autoencoder {
    spec: ModelSpec,
    params: ParamStore,
    layers: Layers,
}

/// Fully-connected VAE (or CVAE when `condition_classes` is given).
pub fn build_fc_vae(
    latent_dim: usize,
    trials: usize,
    resolution: usize,
    condition_classes: Option<usize>,
    rng: &mut impl Rng,
) -> Result<Autoencoder> {
    let (kind, classes) = match condition_classes {
        Some(c) => (ModelKind::ConditionalVariational, c),
        None => (ModelKind::Variational, 0),
    };
    Autoencoder::new(
        ModelSpec {
            kind,
            latent_dim,
            input_channels: trials,
            resolution,
            condition_classes: classes,
            architecture: Architecture::FullyConnected {
                hidden: DEFAULT_HIDDEN,
            },
            norm_mean: 0.0,
            norm_std: 1.0,
        },
        rng,
    )
}

/// Convolutional autoencoder with the default channel ladder.
pub fn build_conv_ae(
    latent_dim: usize,
    trials: usize,
    resolution: usize,
    norm_mean: f64,
    norm_std: f64,
    rng: &mut impl Rng,
) -> Result<Autoencoder> {
    Autoencoder::new(
        ModelSpec {
            kind: ModelKind::Plain,
            latent_dim,
            input_channels: trials,
            resolution,
            condition_classes: 0,
            architecture: Architecture::Convolutional {
                channels: default_channels(resolution)?,
            },
            norm_mean,
            norm_std,
        },
        rng,
    )
}

pub(crate) struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    /// Kaiming-uniform weights for ReLU stacks: `U(-b, b)`, `b = sqrt(6 / fan_in)`.
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: f64) -> ParamId {
        let bound = (6.0 / fan_in).sqrt();
        self.uniform(name, shape, bound)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| dist.sample(rng));
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, value))
    }
}

pub(crate) fn one_hot<'t>(tape: &'t Tape, labels: &[usize], classes: usize) -> Result<Var<'t>> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(dim_err(format!("label {l} outside {classes} classes")));
        }
        data[i * classes + l] = 1.0;
    }
    Ok(tape.constant(Tensor::new(vec![labels.len(), classes], data)?))
}

/// `mu + exp(0.5 * log_var) * eps`, or `mu` itself when no noise is drawn.
pub(crate) fn reparameterize<'t>(
    mu: Var<'t>,
    log_var: Var<'t>,
    noise: &mut Noise<'_>,
) -> Result<Var<'t>> {
    match noise.draw(&mu.shape()) {
        None => Ok(mu),
        Some(eps) => {
            let eps = mu.tape().constant(eps);
            mu.add(log_var.scale(0.5).exp().mul(eps)?)
        }
    }
}

impl Autoencoder {
    pub fn new(spec: ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng,
        };
        let layers = match &spec.architecture {
            Architecture::FullyConnected { hidden } => {
                Layers::Fc(fc::FcLayers::build(&spec, *hidden, &mut init))
            }
            Architecture::Convolutional { channels } => {
                Layers::Conv(conv::ConvLayers::build(&spec, channels, &mut init)?)
            }
        };
        Ok(Autoencoder {
            spec,
            params,
            layers,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn resolution(&self) -> usize {
        self.spec.resolution
    }

    /// Write a checkpoint: a JSON manifest followed by the parameter arrays.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn to_container(&self) -> Result<Container> {
        let manifest = serde_json::json!({
            "format": "rrae-model",
            "spec": self.spec,
        });
        let arrays = self
            .params
            .iter()
            .map(|p| (p.name.clone(), (*p.value).clone()))
            .collect();
        Ok(Container { manifest, arrays })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.manifest.get("format").and_then(|v| v.as_str()) != Some("rrae-model") {
            return Err(Error::Config("checkpoint is not an rrae model".into()));
        }
        let spec: ModelSpec = serde_json::from_value(c.manifest["spec"].clone())
            .map_err(|e| Error::Config(format!("bad model manifest: {e}")))?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Autoencoder::new(spec, &mut rng)?;
        model.load_arrays(&c.arrays)?;
        Ok(model)
    }

    /// Overwrite parameters with the given arrays, which must list every
    /// parameter in declaration order.
    pub fn load_arrays(&mut self, arrays: &[(String, Tensor)]) -> Result<()> {
        if arrays.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} arrays, model has {} parameters",
                arrays.len(),
                self.params.len()
            )));
        }
        for (i, (name, value)) in arrays.iter().enumerate() {
            let id = ParamId(i);
            if &self.params.get(id).name != name {
                return Err(Error::Config(format!(
                    "checkpoint array {i} is {name}, expected {}",
                    self.params.get(id).name
                )));
            }
            self.params.set_value(id, value.clone())?;
        }
        Ok(())
    }

    /// Encoder only: latent mean (the code itself for plain models).
    pub fn encode_mean<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        condition: Option<&[usize]>,
    ) -> Result<Var<'t>> {
        Ok(self
            .forward(tape, x, condition, &mut Noise::Zero)?
            .latent
            .mu)
    }

    /// Forward pass reading weights from `params`, which must share this
    /// model's layout (for example a clone being perturbed).
    pub fn forward_with<'t>(
        &self,
        params: &ParamStore,
        tape: &'t Tape,
        x: Var<'t>,
        condition: Option<&[usize]>,
        noise: &mut Noise<'_>,
    ) -> Result<ModelOutput<'t>> {
        self.check_store(params)?;
        let shape = x.shape();
        self.check_input(&shape)?;
        self.check_condition(shape[0], condition)?;
        match &self.layers {
            Layers::Fc(l) => l.forward(&self.spec, params, tape, x, condition, noise),
            Layers::Conv(l) => l.forward(&self.spec, params, tape, x, noise),
        }
    }

    pub fn decode_with<'t>(
        &self,
        params: &ParamStore,
        tape: &'t Tape,
        z: Var<'t>,
        condition: Option<&[usize]>,
    ) -> Result<Var<'t>> {
        self.check_store(params)?;
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != self.spec.latent_dim {
            return Err(dim_err(format!(
                "decode expects [N, {}] codes, got {shape:?}",
                self.spec.latent_dim
            )));
        }
        self.check_condition(shape[0], condition)?;
        match &self.layers {
            Layers::Fc(l) => l.decode(&self.spec, params, tape, z, condition),
            Layers::Conv(l) => l.decode(&self.spec, params, tape, z),
        }
    }

    fn check_store(&self, params: &ParamStore) -> Result<()> {
        let same = params.len() == self.params.len()
            && params
                .iter()
                .zip(self.params.iter())
                .all(|(a, b)| a.value.shape() == b.value.shape());
        if same {
            Ok(())
        } else {
            Err(Error::Contract(
                "parameter store does not match the model".into(),
            ))
        }
    }

    fn check_input(&self, x: &[usize]) -> Result<()> {
        let r = self.spec.resolution;
        if x.len() != 4 || x[1] != self.spec.input_channels || x[2] != r || x[3] != r {
            return Err(dim_err(format!(
                "model expects [N, {}, {r}, {r}] input, got {x:?}",
                self.spec.input_channels
            )));
        }
        Ok(())
    }

    fn check_condition(&self, n: usize, condition: Option<&[usize]>) -> Result<()> {
        match (self.spec.kind, condition) {
            (ModelKind::ConditionalVariational, Some(c)) if c.len() == n => Ok(()),
            (ModelKind::ConditionalVariational, _) => Err(Error::Contract(format!(
                "conditional model needs {n} labels"
            ))),
            (_, _) => Ok(()),
        }
    }
}

impl AutoencoderNet for Autoencoder {
    fn input_channels(&self) -> usize {
        self.spec.input_channels
    }

    fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        condition: Option<&[usize]>,
        noise: &mut Noise<'_>,
    ) -> Result<ModelOutput<'t>> {
        self.forward_with(&self.params, tape, x, condition, noise)
    }

    fn decode<'t>(
        &self,
        tape: &'t Tape,
        z: Var<'t>,
        condition: Option<&[usize]>,
    ) -> Result<Var<'t>> {
        self.decode_with(&self.params, tape, z, condition)
    }
}
