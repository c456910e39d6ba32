//! Experiment orchestration: configuration, the epoch loop with per-epoch
//! evaluation and resumable state, sample dumps, sweeps and reports.

mod compare;
mod report;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::data::{load_mnist, load_mnist_hires, load_sii, Dataset, ImageSet, Subset};
use crate::error::{Error, Result};
use crate::imageio::{tile, Gray};
use crate::models::{
    build_conv_ae, build_fc_vae, Architecture, Autoencoder, AutoencoderNet, ModelKind, ModelSpec,
    Noise,
};
use crate::msssim::MsSsim;
use crate::optim::{Adam, AdamConfig};
use crate::rrae::{residual, rrae_forward, rrae_train_step, LossKind, RraeConfig, VISUAL_OFFSET};
use crate::tensor::{Tape, Tensor};

pub use compare::{compare_compression, Comparison};
pub use report::{build_report, compute_dr, read_report, report_csv, write_report, ReportRow};

pub const RESULT_FILE: &str = "result.json";
pub const STATE_FILE: &str = "state.ckpt";
pub const BEST_FILE: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const SAMPLES_DIR: &str = "samples";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetId {
    Mnist,
    MnistHires,
    Sii,
}

impl DatasetId {
    pub fn id(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::MnistHires => "mnist-hires",
            DatasetId::Sii => "sii",
        }
    }

    pub fn default_resolution(self) -> usize {
        match self {
            DatasetId::Mnist => 28,
            DatasetId::MnistHires | DatasetId::Sii => 64,
        }
    }
}

impl std::str::FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetId::Mnist),
            "mnist-hires" => Ok(DatasetId::MnistHires),
            "sii" => Ok(DatasetId::Sii),
            other => Err(Error::Config(format!(
                "unknown dataset {other:?}; expected mnist, mnist-hires or sii"
            ))),
        }
    }
}

fn default_batch() -> usize {
    64
}

fn default_eval_batch() -> usize {
    256
}

fn default_true() -> bool {
    true
}

/// Everything one training run depends on. Missing optimizer settings take
/// the profile of the model family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: DatasetId,
    pub data_dir: PathBuf,
    #[serde(default)]
    pub resolution: Option<usize>,
    pub z: usize,
    #[serde(rename = "T", alias = "trials")]
    pub trials: usize,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub weight_decay: Option<f64>,
    pub loss: LossKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub detach_trials: bool,
    /// Run directory; sweeps resolve it relative to the sweep output.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Train a conditional VAE (MNIST only).
    #[serde(default)]
    pub conditional: bool,
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    /// Seed for SII subset selection, kept apart from the training seed so
    /// runs with different seeds can share data.
    #[serde(default)]
    pub data_seed: u64,
    /// Conv channel widths; defaults to 16 doubling per stage.
    #[serde(default)]
    pub channels: Option<Vec<usize>>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    #[serde(default = "default_true")]
    pub dump_samples: bool,
}

impl TrainConfig {
    pub fn new(
        dataset: DatasetId,
        data_dir: impl Into<PathBuf>,
        z: usize,
        trials: usize,
        loss: LossKind,
    ) -> Self {
        TrainConfig {
            dataset,
            data_dir: data_dir.into(),
            resolution: None,
            z,
            trials,
            epochs: 1,
            batch_size: default_batch(),
            learning_rate: None,
            weight_decay: None,
            loss,
            seed: 0,
            detach_trials: true,
            out_dir: None,
            conditional: false,
            train_limit: None,
            test_limit: None,
            data_seed: 0,
            channels: None,
            eval_batch: default_eval_batch(),
            dump_samples: true,
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution.unwrap_or(self.dataset.default_resolution())
    }

    pub fn variational(&self) -> bool {
        self.loss == LossKind::BceKld
    }

    /// Name of the evaluation metric: MSE for variational models, otherwise
    /// the training loss.
    pub fn metric(&self) -> &'static str {
        match self.loss {
            LossKind::BceKld | LossKind::Mse => "mse",
            LossKind::L1 => "l1",
            LossKind::Nms => "nms",
        }
    }

    pub fn adam(&self) -> AdamConfig {
        let profile = if self.variational() {
            AdamConfig::variational()
        } else {
            AdamConfig::autoencoder()
        };
        AdamConfig {
            lr: self.learning_rate.unwrap_or(profile.lr),
            weight_decay: self.weight_decay.unwrap_or(profile.weight_decay),
            ..profile
        }
    }

    pub fn rrae(&self) -> RraeConfig {
        RraeConfig {
            detach_trials: self.detach_trials,
            ..RraeConfig::new(self.trials)
        }
    }

    /// Dataset column of reports; conditional runs get their own label so
    /// they never share a baseline with unconditional ones.
    pub fn dataset_label(&self) -> String {
        if self.conditional {
            format!("{}-cond", self.dataset.id())
        } else {
            self.dataset.id().to_owned()
        }
    }

    /// Directory name used when a sweep entry gives none.
    pub fn default_run_name(&self) -> String {
        format!(
            "{}_{}_z{}_T{}_s{}",
            self.dataset_label(),
            self.loss.id().replace('+', ""),
            self.z,
            self.trials,
            self.seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.z == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return bad("z, batch_size and eval_batch must be positive".into());
        }
        self.rrae().validate()?;
        self.adam().validate()?;
        if self.train_limit == Some(0) || self.test_limit == Some(0) {
            return bad("subset limits must be positive".into());
        }
        if self.conditional && (!self.variational() || self.dataset != DatasetId::Mnist) {
            return bad("conditional models need the vae loss on mnist".into());
        }
        if self.variational() && self.dataset != DatasetId::Mnist {
            return bad("the vae loss is for 28x28 mnist".into());
        }
        if self.dataset == DatasetId::Mnist && self.resolution() != 28 {
            return bad("mnist runs at 28x28; use mnist-hires for larger images".into());
        }
        Ok(())
    }

    fn subset(&self) -> Subset {
        Subset {
            train: self.train_limit,
            test: self.test_limit,
        }
    }

    /// Identity of the loaded data, for sharing across runs.
    fn data_key(&self) -> (DatasetId, PathBuf, usize, Option<usize>, Option<usize>, u64) {
        (
            self.dataset,
            self.data_dir.clone(),
            self.resolution(),
            self.train_limit,
            self.test_limit,
            self.data_seed,
        )
    }

    /// Config equality ignoring the epoch budget and output placement, used
    /// to decide whether saved state can be resumed.
    fn resumable_from(&self, other: &TrainConfig) -> bool {
        let strip = |c: &TrainConfig| TrainConfig {
            epochs: 0,
            out_dir: None,
            dump_samples: true,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

pub fn load_dataset(config: &TrainConfig) -> Result<Dataset> {
    let dir = &config.data_dir;
    match config.dataset {
        DatasetId::Mnist => load_mnist(dir, config.subset()),
        DatasetId::MnistHires => load_mnist_hires(dir, config.resolution(), config.subset()),
        DatasetId::Sii => load_sii(dir, config.resolution(), config.subset(), config.data_seed),
    }
}

pub fn build_model(config: &TrainConfig, data: &Dataset) -> Result<Autoencoder> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let r = config.resolution();
    if config.variational() {
        let classes = config.conditional.then_some(10);
        return build_fc_vae(config.z, config.trials, r, classes, &mut rng);
    }
    match &config.channels {
        None => build_conv_ae(config.z, config.trials, r, data.mean, data.std, &mut rng),
        Some(ch) => Autoencoder::new(
            ModelSpec {
                kind: ModelKind::Plain,
                latent_dim: config.z,
                input_channels: config.trials,
                resolution: r,
                condition_classes: 0,
                architecture: Architecture::Convolutional {
                    channels: ch.clone(),
                },
                norm_mean: data.mean,
                norm_std: data.std,
            },
            &mut rng,
        ),
    }
}

/// Test metric of a model in evaluation mode (zero noise). Fully-connected
/// outputs are already bounded; convolutional outputs are clamped to
/// `[0, 1]` first.
pub fn evaluate(model: &Autoencoder, set: &ImageSet, config: &TrainConfig) -> Result<f64> {
    let clamp = !config.variational();
    let rrae = config.rrae();
    let ms = MsSsim::default();
    let n = set.len();
    let mut total = 0.0;
    for start in (0..n).step_by(config.eval_batch) {
        let idx: Vec<usize> = (start..(start + config.eval_batch).min(n)).collect();
        let (x, labels) = set.batch(&idx)?;
        let tape = Tape::no_grad();
        let out = rrae_forward(model, &tape, &x, labels.as_deref(), &rrae, &mut Noise::Zero)?;
        let mut y = out.output.reconstruction;
        if clamp {
            y = y.clamp(0.0, 1.0);
        }
        let xv = tape.constant(x);
        let batch_metric = match config.metric() {
            "mse" => crate::losses::mse(xv, y)?,
            "l1" => crate::losses::l1(xv, y)?,
            _ => ms.nms(xv, y)?,
        };
        total += batch_metric.value().item()? * idx.len() as f64;
    }
    Ok(total / n as f64)
}

/// Mean `|r_t|` with `r_t = (x - y_t) / 2` for every trial, over a whole set.
pub fn residual_profile(
    model: &Autoencoder,
    set: &ImageSet,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    let rrae = config.rrae();
    let mut sums = vec![0.0; config.trials];
    let n = set.len();
    for start in (0..n).step_by(config.eval_batch) {
        let idx: Vec<usize> = (start..(start + config.eval_batch).min(n)).collect();
        let (x, labels) = set.batch(&idx)?;
        let tape = Tape::no_grad();
        let out = rrae_forward(model, &tape, &x, labels.as_deref(), &rrae, &mut Noise::Zero)?;
        for (t, y) in out.trace.reconstructions.iter().enumerate() {
            sums[t] += residual(&x, y, 0.0)?
                .data()
                .iter()
                .map(|v| v.abs())
                .sum::<f64>();
        }
    }
    let count = set.images.len() as f64;
    Ok(sums.into_iter().map(|s| s / count).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_metric: f64,
}

/// Outcome of one run, stored as `result.json` in its directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub dataset: String,
    pub z: usize,
    #[serde(rename = "T")]
    pub trials: usize,
    pub metric: String,
    pub best_value: f64,
    /// 0 when the untrained model was evaluated.
    pub best_epoch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub config: TrainConfig,
}

struct State {
    next_epoch: usize,
    best: Option<(f64, usize)>,
    history: Vec<EpochRecord>,
}

fn save_state(
    path: &Path,
    config: &TrainConfig,
    model: &Autoencoder,
    adam: &Adam,
    state: &State,
) -> Result<()> {
    let mut c = model.to_container()?;
    c.arrays.extend(adam.state_arrays(model.params()));
    c.manifest = serde_json::json!({
        "format": "rrae-train-state",
        "spec": model.spec(),
        "config": config,
        "next_epoch": state.next_epoch,
        "best": state.best,
        "adam_steps": adam.steps(),
        "history": state.history,
    });
    c.write(path)
}

fn load_state(
    path: &Path,
    config: &TrainConfig,
    model: &mut Autoencoder,
) -> Result<Option<(Adam, State)>> {
    if !path.is_file() {
        return Ok(None);
    }
    let c = Container::read(path)?;
    let m = &c.manifest;
    let bad = |what: &str| Error::Config(format!("train state {}: {what}", path.display()));
    if m.get("format").and_then(|v| v.as_str()) != Some("rrae-train-state") {
        return Err(bad("not a training state file"));
    }
    let saved: TrainConfig =
        serde_json::from_value(m["config"].clone()).map_err(|e| bad(&e.to_string()))?;
    if !config.resumable_from(&saved) {
        return Err(bad("was written by a different configuration"));
    }
    let n = model.params().len();
    if c.arrays.len() < n {
        return Err(bad("parameter arrays missing"));
    }
    model.load_arrays(&c.arrays[..n])?;
    let steps = m["adam_steps"]
        .as_u64()
        .ok_or_else(|| bad("adam_steps missing"))?;
    let adam = Adam::restore(config.adam(), steps, model.params(), &c.arrays[n..])?;
    let state = State {
        next_epoch: m["next_epoch"]
            .as_u64()
            .ok_or_else(|| bad("next_epoch missing"))? as usize,
        best: serde_json::from_value(m["best"].clone()).map_err(|e| bad(&e.to_string()))?,
        history: serde_json::from_value(m["history"].clone()).map_err(|e| bad(&e.to_string()))?,
    };
    Ok(Some((adam, state)))
}

/// Generator for one epoch's shuffling and noise, derived from the run seed
/// so a resumed run continues exactly.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn train_epoch(
    model: &mut Autoencoder,
    adam: &mut Adam,
    data: &ImageSet,
    config: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let mut rng = epoch_rng(config.seed, epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let rrae = config.rrae();
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(config.batch_size) {
        let (x, labels) = data.batch(chunk)?;
        total += rrae_train_step(
            model,
            &x,
            labels.as_deref(),
            &rrae,
            config.loss,
            adam,
            &mut rng,
        )?;
        batches += 1;
    }
    Ok(total / batches as f64)
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for h in history {
        w.serialize(h).expect("in-memory write");
    }
    let bytes = w.into_inner().expect("in-memory flush");
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Train, evaluate after every epoch, keep the best checkpoint, and dump
/// sample images. Resumes from `state.ckpt` when the run directory holds
/// one written by the same configuration.
pub fn run_experiment(config: &TrainConfig) -> Result<RunResult> {
    config.validate()?;
    let data = load_dataset(config)?;
    run_experiment_on(config, &data)
}

pub fn run_experiment_on(config: &TrainConfig, data: &Dataset) -> Result<RunResult> {
    config.validate()?;
    let out = config
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("run needs an output directory".into()))?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut model = build_model(config, data)?;
    let state_path = out.join(STATE_FILE);
    let best_path = out.join(BEST_FILE);

    let (mut adam, mut state) = match load_state(&state_path, config, &mut model)? {
        Some(resumed) => resumed,
        None => (
            Adam::new(config.adam(), model.params())?,
            State {
                next_epoch: 0,
                best: None,
                history: Vec::new(),
            },
        ),
    };

    if config.epochs == 0 && state.best.is_none() {
        let metric = evaluate(&model, &data.test, config)?;
        state.best = Some((metric, 0));
        model.save(&best_path)?;
    }
    for epoch in state.next_epoch..config.epochs {
        let train_loss = train_epoch(&mut model, &mut adam, &data.train, config, epoch)?;
        let test_metric = evaluate(&model, &data.test, config)?;
        if !test_metric.is_finite() {
            return Err(Error::Training {
                iteration: adam.steps(),
                reason: format!("test metric is {test_metric} after epoch {}", epoch + 1),
            });
        }
        state.history.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            test_metric,
        });
        if state.best.is_none_or(|(b, _)| test_metric < b) {
            state.best = Some((test_metric, epoch + 1));
            model.save(&best_path)?;
        }
        state.next_epoch = epoch + 1;
        save_state(&state_path, config, &model, &adam, &state)?;
    }

    let (best_value, best_epoch) = state.best.expect("evaluated at least once");
    write_history(&out.join(HISTORY_FILE), &state.history)?;
    let best = Autoencoder::load(&best_path)?;
    if config.dump_samples {
        dump_samples(&best, &data.test, config, &out.join(SAMPLES_DIR))?;
    }
    let result = RunResult {
        dataset: config.dataset_label(),
        z: config.z,
        trials: config.trials,
        metric: config.metric().to_owned(),
        best_value,
        best_epoch,
        epochs: config.epochs,
        seed: config.seed,
        history: state.history,
        config: config.clone(),
    };
    let path = out.join(RESULT_FILE);
    let json = serde_json::to_string_pretty(&result).expect("serializable result");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(result)
}

/// Per-trial reconstructions and offset residuals of the first test image,
/// plus a grid of test images over their final reconstructions.
pub fn dump_samples(
    model: &Autoencoder,
    test: &ImageSet,
    config: &TrainConfig,
    dir: &Path,
) -> Result<()> {
    let (x, labels) = test.batch(&[0])?;
    let tape = Tape::no_grad();
    let out = rrae_forward(
        model,
        &tape,
        &x,
        labels.as_deref(),
        &config.rrae(),
        &mut Noise::Zero,
    )?;
    let mut strip = vec![Gray::from_unit_tensor(&x)?];
    Gray::from_unit_tensor(&x)?.write_png(&dir.join("original.png"))?;
    for (t, y) in out.trace.reconstructions.iter().enumerate() {
        let r = residual(&x, &y.map(|v| v.clamp(0.0, 1.0)), VISUAL_OFFSET)?;
        let (gy, gr) = (Gray::from_unit_tensor(y)?, Gray::from_unit_tensor(&r)?);
        gy.write_png(&dir.join(format!("trial{}_reconstruction.png", t + 1)))?;
        gr.write_png(&dir.join(format!("trial{}_residual.png", t + 1)))?;
        strip.extend([gy, gr]);
    }
    tile(&strip, strip.len(), 2, 128)?.write_png(&dir.join("trials.png"))?;

    let k = test.len().min(8);
    let idx: Vec<usize> = (0..k).collect();
    let (xs, labels) = test.batch(&idx)?;
    let out = rrae_forward(
        model,
        &tape,
        &xs,
        labels.as_deref(),
        &config.rrae(),
        &mut Noise::Zero,
    )?;
    let recon = out.output.reconstruction.value();
    let mut cells = Vec::with_capacity(2 * k);
    for row in [&xs, &*recon] {
        for i in 0..k {
            cells.push(Gray::from_unit_tensor(&one_image(row, i)?)?);
        }
    }
    tile(&cells, k, 2, 128)?.write_png(&dir.join("grid.png"))
}

fn one_image(batch: &Tensor, i: usize) -> Result<Tensor> {
    let s = batch.shape();
    batch.batch_item(i)?.reshape(&[s[2], s[3]])
}

/// Run every config (data loaded once per distinct source), then write
/// `report.csv` with decrease rates into `out_dir`.
pub fn sweep(configs: &[TrainConfig], out_dir: &Path) -> Result<Vec<ReportRow>> {
    if configs.is_empty() {
        return Err(Error::Config("sweep spec lists no runs".into()));
    }
    for c in configs {
        c.validate()?;
    }
    let placed: Vec<TrainConfig> = configs
        .iter()
        .map(|c| {
            let name = c
                .out_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from(c.default_run_name()));
            TrainConfig {
                out_dir: Some(out_dir.join(name)),
                ..c.clone()
            }
        })
        .collect();
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = placed.iter().find(|c| !seen.insert(c.out_dir.clone())) {
        return Err(Error::Config(format!(
            "two runs share the directory {}",
            dup.out_dir.as_ref().expect("placed").display()
        )));
    }
    // Baselines are checked before any training starts.
    let preview: Vec<RunResult> = placed
        .iter()
        .map(|c| RunResult {
            dataset: c.dataset_label(),
            z: c.z,
            trials: c.trials,
            metric: c.metric().into(),
            best_value: 1.0,
            best_epoch: 0,
            epochs: c.epochs,
            seed: c.seed,
            history: Vec::new(),
            config: c.clone(),
        })
        .collect();
    build_report(&preview)?;

    let mut cache: HashMap<_, Dataset> = HashMap::new();
    let mut results = Vec::with_capacity(placed.len());
    for c in &placed {
        let key = c.data_key();
        if !cache.contains_key(&key) {
            cache.insert(key.clone(), load_dataset(c)?);
        }
        results.push(run_experiment_on(c, &cache[&key])?);
    }
    let rows = build_report(&results)?;
    write_report(&rows, &out_dir.join("report.csv"))?;
    Ok(rows)
}

/// Every `result.json` below `dir`, ordered by path.
pub fn collect_results(dir: &Path) -> Result<Vec<RunResult>> {
    fn walk(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, found)?;
            } else if p.file_name().is_some_and(|n| n == RESULT_FILE) {
                found.push(p);
            }
        }
        Ok(())
    }
    let mut paths = Vec::new();
    walk(dir, &mut paths)?;
    if paths.is_empty() {
        return Err(Error::Config(format!(
            "no {RESULT_FILE} under {}",
            dir.display()
        )));
    }
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Format {
                what: p.display().to_string(),
                offset: 0,
                reason: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
