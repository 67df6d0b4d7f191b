//! Optimization loop: Adam with a poly learning-rate decay and separate encoder/decoder
//! base rates, JSON Lines logging, validation and checkpoints.

mod checkpoint;
mod optim;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use checkpoint::{decode, encode, write_atomic, Checkpoint, Payload, TrainState, FORMAT_VERSION, MAGIC};
pub use optim::{adam_step, poly_lr, AdamConfig, GroupRates, OptimizerState};

use crate::autodiff::Tape;
use crate::data::{batches_per_epoch, epoch_order, load_batch, AugmentConfig, SampleSource};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossBreakdown, LossConfig};
use crate::metrics::{binarize, evaluate_dataset, Mask, MetricsReport};
use crate::network::{Mode, Model, NetworkConfig, ParameterSet};
use crate::ops::pointwise::derive_seed;
use crate::ops::{bilinear_resize_forward, nearest_resize, BN_MOMENTUM};
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const VALIDATION_FILE: &str = "val_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.slsd";
pub const BEST_CHECKPOINT: &str = "best.slsd";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr_encoder: f64,
    pub base_lr_decoder: f64,
    pub poly_power: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Save a checkpoint every this many iterations; 0 saves only the final one.
    pub checkpoint_every: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr_encoder: 0.001,
            base_lr_decoder: 0.01,
            poly_power: 0.9,
            epochs: 100,
            batch_size: 16,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr_encoder > 0.0 && self.base_lr_decoder > 0.0) {
            return bad("train.base_lr_encoder and train.base_lr_decoder must be positive".into());
        }
        for (k, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("train.{k} = {b} outside [0, 1)"));
            }
        }
        if self.adam_eps <= 0.0 {
            return bad("train.adam_eps must be positive".into());
        }
        if self.poly_power < 0.0 {
            return bad("train.poly_power must be non-negative".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("train.epochs and train.batch_size must be at least 1".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }

    /// Scheduled rates before iteration `iter` (0-based).
    pub fn rates(&self, iter: u64, max_iter: u64) -> GroupRates {
        GroupRates {
            encoder: poly_lr(self.base_lr_encoder, iter, max_iter, self.poly_power),
            decoder: poly_lr(self.base_lr_decoder, iter, max_iter, self.poly_power),
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// 1-based iteration.
    pub iter: u64,
    pub lr_enc: f64,
    pub lr_dec: f64,
    pub l_log: f64,
    pub l_epe: f64,
    pub l_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub epoch: u64,
    pub iter: u64,
    pub report: MetricsReport,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Where logs and checkpoints go; nothing is written when `None`.
    pub out_dir: Option<&'a Path>,
    pub validation: Option<&'a dyn SampleSource>,
    pub resume: Option<Checkpoint>,
    /// Stop (with a checkpoint) once this many iterations have completed.
    pub stop_after: Option<u64>,
}

pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    pub validation: Vec<ValidationRecord>,
    pub params: ParameterSet<f32>,
    pub optimizer: OptimizerState,
    pub state: TrainState,
    pub last_checkpoint: Option<PathBuf>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, network: &NetworkConfig) -> Checkpoint {
        Checkpoint {
            network: network.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            state: self.state.clone(),
        }
    }
}

struct LogWriter {
    file: Option<fs::File>,
}

impl LogWriter {
    /// Opens `path`, keeping the first `keep` lines of an existing log.
    fn open(path: Option<PathBuf>, keep: u64) -> Result<Self> {
        let Some(path) = path else { return Ok(LogWriter { file: None }) };
        let mut kept = String::new();
        if keep > 0 {
            let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            for line in BufReader::new(f).lines().take(keep as usize) {
                kept.push_str(&line.map_err(|e| Error::io(&path, e))?);
                kept.push('\n');
            }
        }
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        file.write_all(kept.as_bytes()).map_err(|e| Error::io(&path, e))?;
        Ok(LogWriter { file: Some(file) })
    }

    fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        if let Some(f) = &mut self.file {
            let mut line = serde_json::to_vec(record)?;
            line.push(b'\n');
            f.write_all(&line).map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

/// Runs (or resumes) training. Per iteration: forward in training mode, total loss,
/// backward, scheduled rates, Adam step and running-statistics update. The learning-rate
/// decay spans `epochs × ceil(len / batch_size)` iterations.
pub fn train(
    model: &Model,
    params: ParameterSet<f32>,
    data: &dyn SampleSource,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    augment_cfg: &AugmentConfig,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    augment_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let per_epoch = batches_per_epoch(data.len(), cfg.batch_size) as u64;
    let max_iter = cfg.epochs * per_epoch;
    let (mut params, mut optimizer, mut state) = match opts.resume {
        Some(c) => {
            if c.state.max_iter != max_iter || c.state.seed != cfg.seed {
                return Err(Error::Config(format!(
                    "checkpoint was taken with seed {} and {} total iterations; this run has seed {} and {max_iter}",
                    c.state.seed, c.state.max_iter, cfg.seed
                )));
            }
            c.params.check_compatible(&params)?;
            (c.params, c.optimizer, c.state)
        }
        None => {
            let opt = OptimizerState::new(&params);
            (params, opt, TrainState { iter: 0, max_iter, seed: cfg.seed, optimizer_steps: 0, best_val_jac: None })
        }
    };
    let out_path = |name: &str| opts.out_dir.map(|d| d.join(name));
    let mut log_file = LogWriter::open(out_path(LOG_FILE), state.iter)?;
    let completed_epochs = state.iter / per_epoch;
    let mut val_file = LogWriter::open(
        out_path(VALIDATION_FILE),
        if opts.validation.is_some() { completed_epochs } else { 0 },
    )?;
    let adam = cfg.adam();
    let shuffle_seed = cfg.shuffle.then(|| derive_seed(cfg.seed, &[SHUFFLE_STREAM]));
    let dropout_seed = derive_seed(cfg.seed, &[DROPOUT_STREAM]);
    let mut log = Vec::new();
    let mut validation = Vec::new();
    let mut last_checkpoint: Option<PathBuf> = None;

    let save = |name: &str, params: &ParameterSet<f32>, opt: &OptimizerState, state: &TrainState| -> Result<Option<PathBuf>> {
        let Some(path) = out_path(name) else { return Ok(None) };
        let ck = Checkpoint { network: model.config().clone(), params: params.clone(), optimizer: opt.clone(), state: state.clone() };
        ck.save(&path)?;
        Ok(Some(path))
    };

    while state.iter < max_iter {
        if opts.stop_after.is_some_and(|k| state.iter >= k) {
            last_checkpoint = save(&format!("checkpoint_{:08}.slsd", state.iter), &params, &optimizer, &state)?.or(last_checkpoint);
            break;
        }
        let epoch = state.iter / per_epoch;
        let b = (state.iter % per_epoch) as usize;
        let order = epoch_order(data.len(), shuffle_seed, epoch);
        let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(order.len())];
        let batch = load_batch(data, idx, augment_cfg, epoch)?;

        let k = state.iter;
        let rates = cfg.rates(k, max_iter);
        let (grads, breakdown, stats) = {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let x = tape.constant(batch.images);
            let out = model.forward(&mut tape, &bound, x, Mode::Train { seed: dropout_seed, step: k })?;
            let (loss, breakdown) = total_loss(&mut tape, out.probs, &batch.masks, loss_cfg)?;
            if !breakdown.l_total.is_finite() {
                return Err(Error::NonFiniteLoss { iter: k + 1, last_good: last_checkpoint });
            }
            tape.backward(loss)?;
            let mut grads = BTreeMap::new();
            for (name, var) in bound.iter() {
                if let Some(g) = tape.take_grad(var) {
                    grads.insert(name.to_string(), g);
                }
            }
            (grads, breakdown, out.batch_stats)
        };
        adam_step(&mut params, &grads, &mut optimizer, rates, &adam)?;
        params.apply_batch_stats(&stats, BN_MOMENTUM)?;
        state.iter += 1;
        state.optimizer_steps = optimizer.t;

        let LossBreakdown { l_log, l_epe, l_total } = breakdown;
        let record = LogRecord { iter: state.iter, lr_enc: rates.encoder, lr_dec: rates.decoder, l_log, l_epe, l_total };
        log_file.write(&record)?;
        log.push(record);
        log::debug!("iter {} l_total {l_total:.6}", state.iter);

        if state.iter % per_epoch == 0 {
            if let Some(val) = opts.validation {
                let report = evaluate(model, &params, val, cfg.batch_size)?;
                let jac = report.aggregate.jac;
                let rec = ValidationRecord { epoch: epoch + 1, iter: state.iter, report };
                val_file.write(&rec)?;
                validation.push(rec);
                log::info!("epoch {} validation JAC {jac:.4}", epoch + 1);
                if state.best_val_jac.is_none_or(|b| jac > b) {
                    state.best_val_jac = Some(jac);
                    save(BEST_CHECKPOINT, &params, &optimizer, &state)?;
                }
            }
        }
        if cfg.checkpoint_every > 0 && state.iter % cfg.checkpoint_every == 0 && state.iter < max_iter {
            last_checkpoint = save(&format!("checkpoint_{:08}.slsd", state.iter), &params, &optimizer, &state)?.or(last_checkpoint);
        }
    }
    if state.iter >= max_iter {
        last_checkpoint = save(FINAL_CHECKPOINT, &params, &optimizer, &state)?.or(last_checkpoint);
    }
    Ok(TrainOutcome { log, validation, params, optimizer, state, last_checkpoint })
}

/// Scores evaluation-mode predictions against the masks of `source` at network resolution.
pub fn evaluate(model: &Model, params: &ParameterSet<f32>, source: &dyn SampleSource, batch_size: usize) -> Result<MetricsReport> {
    let mut pairs = Vec::with_capacity(source.len());
    let all: Vec<usize> = (0..source.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let batch = load_batch(source, chunk, &AugmentConfig::disabled(), 0)?;
        let probs = model.predict(params, &batch.images)?;
        let preds = binarize(&probs)?;
        for (j, pred) in preds.into_iter().enumerate() {
            let gt = Mask::from_tensor(&batch.masks.batch_item(j))?;
            let name = match &batch.provenance[j].image {
                Some(p) => p.display().to_string(),
                None => format!("#{}", chunk[j]),
            };
            pairs.push((name, pred, gt));
        }
    }
    evaluate_dataset(&pairs, true)
}

/// Foreground mask for a source-resolution image `(1, 3, H, W)`: resized to the network
/// input, predicted in evaluation mode, thresholded and brought back to `H × W` by
/// nearest-neighbour sampling.
pub fn segment(model: &Model, params: &ParameterSet<f32>, image: &Tensor<f32>) -> Result<Mask> {
    let s = image.shape();
    let (h, w) = model.config().input_size;
    let x = bilinear_resize_forward(image, h, w)?;
    let probs = model.predict(params, &x)?;
    let small = binarize(&probs)?.remove(0);
    let t: Tensor<f32> = small.to_tensor();
    Mask::from_tensor(&nearest_resize(&t, s.h, s.w)?)
}
