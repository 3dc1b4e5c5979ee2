//! Optimisation loop: patch batches, Adam, per-epoch logging, checkpoints
//! and sliding-window evaluation.

mod adam;
mod checkpoint;
mod eval;
mod patch;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointMeta, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, LOG_VARS_NAME};
pub use eval::{
    argmax_labels, evaluate, evaluate_with, predict_labels, predict_probs, Evaluation, SampleEvaluation,
};
pub use patch::{crop, sample_patch, Patch, PatchBatch};

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_labels, load_volume, DatasetManifest, LabelMap, Split, Volume};
use crate::error::{Error, Result};
use crate::losses::{
    batch_objective, FilterConfig, FilterStrategy, LossConfig, Method, PartialLabelSet, RampSchedule,
    UncertaintyParams, Weighting,
};
use crate::tensor::{Tape, Tensor};
use crate::unet::{UNetConfig, UNetModel};

pub const CHECKPOINT_FILE: &str = "checkpoint.tctc";
pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.json";

/// Epoch rows kept in checkpoint metadata.
const HISTORY_TAIL: usize = 10;

/// Everything that determines a training run. Field names are the config
/// file keys and the CLI flag names (with `-` for `_`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_size: [usize; 3],
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub base_width: usize,
    pub method: Method,
    pub filter: FilterStrategy,
    pub fixed_threshold: f64,
    pub binarize_level: f64,
    pub weighting: Weighting,
    pub w_max: f64,
    /// `None` ramps over 40% of `epochs`.
    pub ramp_epochs: Option<f64>,
    pub exclude_self_from_background: bool,
    /// Chance that a training crop is centred on labeled foreground.
    pub foreground_prob: f64,
    /// Checkpoint whose model parameters initialise the network.
    pub init: Option<PathBuf>,
    /// Evaluate on the test split every `k` epochs and at the end; 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let filter = FilterConfig::default();
        Self {
            epochs: 40,
            batch_size: 4,
            patch_size: [32, 32, 32],
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            seed: 0,
            base_width: 8,
            method: Method::Tct,
            filter: filter.strategy,
            fixed_threshold: filter.fixed_threshold,
            binarize_level: filter.binarize_level,
            weighting: Weighting::Uauwl,
            w_max: RampSchedule::default().w_max,
            ramp_epochs: None,
            exclude_self_from_background: false,
            foreground_prob: 0.5,
            init: None,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.patch_size.iter().any(|&d| d == 0 || d % 16 != 0) {
            return bad(format!("patch_size {:?} must be positive multiples of 16", self.patch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.eps > 0.0) {
            return bad(format!("lr and eps must be positive, got {} and {}", self.lr, self.eps));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.w_max >= 0.0) || self.ramp_epochs.is_some_and(|r| !(r >= 0.0)) {
            return bad("w_max and ramp_epochs must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.foreground_prob) {
            return bad(format!("foreground_prob must lie in [0, 1], got {}", self.foreground_prob));
        }
        self.filter_config().validate()?;
        self.unet_config(1).validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            strategy: self.filter,
            fixed_threshold: self.fixed_threshold,
            binarize_level: self.binarize_level,
        }
    }

    pub fn ramp(&self) -> RampSchedule {
        RampSchedule {
            w_max: self.w_max,
            ramp_epochs: self.ramp_epochs.unwrap_or(0.4 * self.epochs as f64),
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            method: self.method,
            filter: self.filter_config(),
            weighting: self.weighting,
            ramp: self.ramp(),
            exclude_self_from_background: self.exclude_self_from_background,
        }
    }

    pub fn unet_config(&self, num_classes: usize) -> UNetConfig {
        UNetConfig {
            in_channels: 1,
            num_classes,
            base_width: self.base_width,
            patch_size: self.patch_size,
        }
    }

    /// True if the uncertainty log-variances enter the objective.
    fn uses_log_vars(&self) -> bool {
        self.method == Method::Tct && self.weighting != Weighting::Fixed
    }
}

/// One CSV row. Losses, `theta` and `retained` are means over the epoch's
/// steps; TAL logs 0 for every TCT-only column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub l_main: f64,
    pub l_aux: f64,
    pub l_con: f64,
    pub w: f64,
    pub theta: f64,
    pub retained: f64,
    pub total: f64,
    /// Mean test DSC per class on evaluation epochs.
    pub dsc: Option<Vec<f64>>,
}

pub fn csv_header(dsc_classes: usize) -> String {
    let mut h = String::from("epoch,L_main,L_aux,L_con,w,theta,retained,total");
    for j in 1..=dsc_classes {
        h += &format!(",dsc_class_{j}");
    }
    h
}

impl EpochLog {
    /// Row matching [`csv_header`]`(dsc_classes)`; DSC cells are empty off
    /// evaluation epochs.
    pub fn csv_row(&self, dsc_classes: usize) -> String {
        let mut row = format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.l_main, self.l_aux, self.l_con, self.w, self.theta, self.retained, self.total
        );
        for j in 0..dsc_classes {
            row.push(',');
            if let Some(d) = self.dsc.as_ref().and_then(|d| d.get(j)) {
                row += &d.to_string();
            }
        }
        row
    }
}

/// A training sample with its sub-dataset's annotated set.
#[derive(Clone, Debug)]
pub struct TrainSample {
    /// Standardized intensities, as fed to the network.
    pub volume: Volume,
    pub labels: LabelMap,
    pub set: PartialLabelSet,
}

/// Loads every training-split sample, pooled across sub-datasets in
/// manifest order.
pub fn load_training_samples(manifest: &DatasetManifest) -> Result<Vec<TrainSample>> {
    let n = manifest.num_classes();
    let mut out = Vec::new();
    for (d, s) in manifest.samples(Split::Train) {
        let set = PartialLabelSet::new(&d.annotated, n)?;
        let volume = load_volume(&manifest.resolve(&s.volume))?;
        let labels = load_labels(&manifest.resolve(&s.labels))?;
        if labels.dims != volume.dims {
            return Err(Error::Shape(format!(
                "{}: labels {:?} do not match volume {:?}",
                s.labels, labels.dims, volume.dims
            )));
        }
        labels.check_classes(n)?;
        out.push(TrainSample {
            labels: labels.restricted_to(&set),
            volume: volume.standardized(),
            set,
        });
    }
    if out.is_empty() {
        return Err(Error::Config("manifest has no training samples".into()));
    }
    Ok(out)
}

/// Model, optimizer and sampling state of a run in progress.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    model: UNetModel<f32>,
    uncertainty: UncertaintyParams<f32>,
    adam: AdamState<f32>,
    rng: ChaCha8Rng,
    epoch: usize,
    history: Vec<EpochLog>,
}

impl Trainer {
    /// Fresh state: He-initialised network (or `config.init`'s parameters),
    /// zero log-variances, zero moments.
    pub fn new(config: TrainConfig, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let mut model = UNetModel::build(config.unet_config(num_classes), config.seed)?;
        if let Some(init) = &config.init {
            Checkpoint::load(init)?.load_model_params(&mut model)?;
        }
        let uncertainty = UncertaintyParams::new(config.weighting, num_classes);
        let adam = AdamState::new(
            model
                .params()
                .iter()
                .map(|(_, t)| t.shape())
                .chain([uncertainty.log_vars.shape()]),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // keep sampling independent of the weight-initialisation stream
        rng.set_stream(1);
        Ok(Self {
            config,
            model,
            uncertainty,
            adam,
            rng,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = &ckpt.meta;
        let mut config = meta.config.clone();
        // parameters come from the checkpoint itself
        config.init = None;
        let mut t = Self::new(config, meta.num_classes)?;
        t.config.init = meta.config.init.clone();
        ckpt.load_model_params(&mut t.model)?;
        let want = t.uncertainty.log_vars.shape().to_vec();
        match ckpt.tensor(LOG_VARS_NAME) {
            Some(s) if s.shape() == want => t.uncertainty.log_vars = s.clone(),
            other => {
                return Err(Error::Shape(format!(
                    "{LOG_VARS_NAME}: checkpoint {:?}, expected {want:?}",
                    other.map(|s| s.shape().to_vec())
                )))
            }
        }
        let names = t.param_names();
        for (k, name) in names.iter().enumerate() {
            for (prefix, slot) in [("adam.m.", &mut t.adam.m[k]), ("adam.v.", &mut t.adam.v[k])] {
                let key = format!("{prefix}{name}");
                match ckpt.tensor(&key) {
                    Some(m) if m.shape() == slot.shape() => *slot = m.clone(),
                    _ => return Err(Error::Shape(format!("{key}: missing or wrong shape in checkpoint"))),
                }
            }
        }
        t.adam.t = meta.adam_step;
        t.rng = meta.rng.restore()?;
        t.epoch = meta.epoch;
        t.history = meta.history.clone();
        Ok(t)
    }

    fn param_names(&self) -> Vec<String> {
        self.model
            .params()
            .iter()
            .map(|(n, _)| n.clone())
            .chain([LOG_VARS_NAME.to_owned()])
            .collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor<f32>)> = self.model.params().to_vec();
        tensors.push((LOG_VARS_NAME.into(), self.uncertainty.log_vars.clone()));
        for (k, name) in self.param_names().iter().enumerate() {
            tensors.push((format!("adam.m.{name}"), self.adam.m[k].clone()));
            tensors.push((format!("adam.v.{name}"), self.adam.v[k].clone()));
        }
        Checkpoint {
            meta: CheckpointMeta {
                config: self.config.clone(),
                num_classes: self.model.config().num_classes,
                epoch: self.epoch,
                adam_step: self.adam.t,
                rng: RngState::capture(&self.rng),
                history: self.history.clone(),
            },
            tensors,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &UNetModel<f32> {
        &self.model
    }

    pub fn uncertainty(&self) -> &UncertaintyParams<f32> {
        &self.uncertainty
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// The most recent epoch rows.
    pub fn history(&self) -> &[EpochLog] {
        &self.history
    }

    /// One pass over `samples` in a freshly shuffled order. On error the
    /// state may be partially updated and should be discarded.
    pub fn train_epoch(&mut self, samples: &[TrainSample]) -> Result<EpochLog> {
        let num_classes = self.model.config().num_classes;
        if let Some(s) = samples.iter().find(|s| s.set.num_classes() != num_classes) {
            return Err(Error::Config(format!(
                "sample annotates {} classes, model has {num_classes}",
                s.set.num_classes()
            )));
        }
        let loss_cfg = self.config.loss_config();
        let adam_cfg = self.config.adam();
        let patch = self.config.patch_size;
        let t = self.epoch as f64;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);

        let mut sums = [0.0f64; 6];
        let mut steps = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let patches: Vec<(Patch, PartialLabelSet)> = chunk
                .iter()
                .map(|&i| {
                    let s = &samples[i];
                    let p = sample_patch(&s.volume, &s.labels, patch, self.config.foreground_prob, &mut self.rng);
                    (p, s.set.clone())
                })
                .collect();
            let batch = PatchBatch::new(&patches, patch)?;

            let mut tape = Tape::new();
            let input = tape.constant(batch.input.clone());
            let (output, vars) = match self.config.method {
                Method::Tal => self.model.forward_main(&mut tape, input)?,
                Method::Tct => self.model.forward_full(&mut tape, input)?,
            };
            let log_vars = self
                .config
                .uses_log_vars()
                .then(|| tape.param(self.uncertainty.log_vars.clone()));
            let (total, parts) = batch_objective(&mut tape, &output, &batch.targets, &loss_cfg, t, log_vars, None)?;
            if !parts.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "total loss {} at epoch {} step {}",
                    parts.total,
                    self.epoch + 1,
                    steps + 1
                )));
            }
            let grads = tape.backward(total)?;
            let mut grad_refs: Vec<Option<&Tensor<f32>>> =
                vars.0.iter().map(|v| v.and_then(|v| grads.get(v))).collect();
            grad_refs.push(log_vars.and_then(|v| grads.get(v)));
            let (model_params, log_vars_tensor) = (self.model.params_mut(), &mut self.uncertainty.log_vars);
            let mut params: Vec<(&str, &mut Tensor<f32>)> = model_params
                .iter_mut()
                .map(|(n, p)| (n.as_str(), p))
                .chain([(LOG_VARS_NAME, log_vars_tensor)])
                .collect();
            adam_step(&mut params, &grad_refs, &mut self.adam, &adam_cfg)?;

            let (theta, retained) = parts
                .filter
                .as_ref()
                .map_or((0.0, 0.0), |f| (f.theta, f.retained_count() as f64));
            for (acc, v) in sums
                .iter_mut()
                .zip([parts.l_main, parts.l_aux, parts.l_con, theta, retained, parts.total])
            {
                *acc += v;
            }
            steps += 1;
        }
        let mean = |k: usize| sums[k] / steps as f64;
        self.epoch += 1;
        let row = EpochLog {
            epoch: self.epoch,
            l_main: mean(0),
            l_aux: mean(1),
            l_con: mean(2),
            w: match self.config.method {
                Method::Tal => 0.0,
                Method::Tct => crate::losses::ramp_weight(t, &loss_cfg.ramp),
            },
            theta: mean(3),
            retained: mean(4),
            total: mean(5),
            dsc: None,
        };
        self.push_history(row.clone());
        Ok(row)
    }

    fn push_history(&mut self, row: EpochLog) {
        self.history.push(row);
        if self.history.len() > HISTORY_TAIL {
            self.history.remove(0);
        }
    }

    /// Attaches evaluation DSCs to the latest history row.
    fn record_dsc(&mut self, dsc: Vec<f64>) {
        if let Some(last) = self.history.last_mut() {
            last.dsc = Some(dsc);
        }
    }
}

/// Knobs that shape a run without being part of its configuration.
#[derive(Default)]
pub struct RunControl<'a> {
    /// Continue from this checkpoint; its config must equal the run's.
    pub resume: Option<PathBuf>,
    /// Save and return after this many completed epochs.
    pub stop_after: Option<usize>,
    /// Called after every logged epoch.
    pub on_epoch: Option<Box<dyn FnMut(&EpochLog) + 'a>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    /// Rows produced by this invocation.
    pub epochs: Vec<EpochLog>,
    pub last_evaluation: Option<Evaluation>,
}

/// Trains on the manifest's training split, writing `config.json`, a
/// per-epoch CSV log and `checkpoint.tctc` under `out_dir`.
///
/// The checkpoint is rewritten on evaluation epochs, at `stop_after` and at
/// the end. A non-finite loss aborts the run and leaves the last written
/// checkpoint in place.
pub fn train_run(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    out_dir: &Path,
    mut control: RunControl,
) -> Result<TrainOutcome> {
    config.validate()?;
    let samples = load_training_samples(manifest)?;
    let mut trainer = match &control.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.meta.config != *config {
                return Err(Error::Config(format!(
                    "{} was written with a different config",
                    path.display()
                )));
            }
            Trainer::from_checkpoint(&ckpt)?
        }
        None => Trainer::new(config.clone(), manifest.num_classes())?,
    };
    if trainer.model().config().num_classes != manifest.num_classes() {
        return Err(Error::Config(format!(
            "checkpoint has {} classes, dataset {}",
            trainer.model().config().num_classes,
            manifest.num_classes()
        )));
    }
    let has_test = manifest.samples(Split::Test).next().is_some();
    let dsc_columns = if config.eval_every > 0 && has_test {
        manifest.num_classes()
    } else {
        0
    };

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_path = out_dir.join(CONFIG_FILE);
    let text = serde_json::to_string_pretty(config).map_err(|e| Error::Json {
        path: config_path.clone(),
        source: e,
    })?;
    std::fs::write(&config_path, text + "\n").map_err(|e| Error::io(&config_path, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log = open_log(&log_path, &csv_header(dsc_columns), trainer.epoch())?;
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);

    let last = control.stop_after.map_or(config.epochs, |s| s.min(config.epochs));
    let mut epochs = Vec::new();
    let mut last_evaluation = None;
    while trainer.epoch() < last {
        let mut row = trainer.train_epoch(&samples)?;
        let done = trainer.epoch() == config.epochs;
        let eval_now = dsc_columns > 0 && (trainer.epoch() % config.eval_every == 0 || done);
        if eval_now {
            let evaluation = evaluate(trainer.model(), manifest, Split::Test)?;
            row.dsc = Some(evaluation.summary.mean_dsc.clone());
            trainer.record_dsc(evaluation.summary.mean_dsc.clone());
            last_evaluation = Some(evaluation);
        }
        writeln!(log, "{}", row.csv_row(dsc_columns)).map_err(|e| Error::io(&log_path, e))?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        if eval_now || trainer.epoch() == last {
            trainer.checkpoint().save(&checkpoint_path)?;
        }
        if let Some(f) = control.on_epoch.as_mut() {
            f(&row);
        }
        epochs.push(row);
    }
    if epochs.is_empty() {
        trainer.checkpoint().save(&checkpoint_path)?;
    }
    Ok(TrainOutcome {
        checkpoint_path,
        log_path,
        epochs,
        last_evaluation,
    })
}

/// Opens the CSV log for appending after `completed` epochs, dropping any
/// rows beyond them. Starts a new file when none exists or on a fresh run.
fn open_log(path: &Path, header: &str, completed: usize) -> Result<std::fs::File> {
    let mut lines = vec![header.to_owned()];
    if completed > 0 {
        if let Ok(text) = std::fs::read_to_string(path) {
            lines.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e <= completed))
                    .map(str::to_owned),
            );
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for l in &lines {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

#[cfg(test)]
mod tests;
