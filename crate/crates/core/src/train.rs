//! Adam training of either variant on a circles dataset.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::evaluate_decomposition;
use crate::model::{apply_bn_stats, Checkpoint, ModelConfig, ModelParams, RefineConfig, Session, SetAutoencoder, Variant};
use crate::nn::{self, BatchNormMode};
use crate::scenes::{scene_seed, Dataset};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    pub refine: RefineConfig,
    pub model: ModelConfig,
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    /// JSONL log; defaults to the checkpoint path with a `.log.jsonl` suffix.
    pub log: Option<PathBuf>,
    /// Global gradient-norm clip.
    pub clip_grad_norm: Option<f64>,
    /// Measure decomposition on the validation split after each epoch.
    pub eval_decomposition: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            batch_size: 32,
            epochs: 50,
            seed: 0,
            variant: Variant::Srn,
            refine: RefineConfig::default(),
            model: ModelConfig::default(),
            data: PathBuf::from("data"),
            checkpoint: PathBuf::from("model.ckpt"),
            log: None,
            clip_grad_norm: None,
            eval_decomposition: true,
        }
    }
}

impl TrainConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })
    }

    pub fn log_path(&self) -> PathBuf {
        self.log.clone().unwrap_or_else(|| {
            let mut s = self.checkpoint.clone().into_os_string();
            s.push(".log.jsonl");
            PathBuf::from(s)
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.model.batch_norm && self.batch_size < 2 {
            return Err(Error::Config("batch norm needs a batch size of at least 2".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("Adam betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        self.model.validate()
    }
}

/// First and second moments for every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (n, t) in params {
            m.insert(n.to_string(), Tensor::zeros(t.shape()));
            v.insert(n.to_string(), Tensor::zeros(t.shape()));
        }
        AdamState { m, v, step: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig { lr: c.lr, beta1: c.betas.0, beta2: c.betas.1, eps: c.eps }
    }
}

/// One bias-corrected Adam update. Every gradient is checked before any
/// parameter changes.
pub fn adam_step(
    params: &mut ModelParams<f32>,
    grads: &[(String, Tensor<f32>)],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {} is not finite", name)));
        }
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("gradient of {} has shape {:?}, expected {:?}", name, g.shape(), p.shape())));
        }
        if !state.m.contains_key(name) {
            return Err(Error::Config(format!("optimizer has no state for {}", name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let m = state.m.get_mut(name).expect("checked above");
        let v = state.v.get_mut(name).expect("checked above");
        let p = params.get_mut(name)?;
        for (((pi, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            let gi = gi as f64;
            let mn = cfg.beta1 * *mi as f64 + (1.0 - cfg.beta1) * gi;
            let vn = cfg.beta2 * *vi as f64 + (1.0 - cfg.beta2) * gi * gi;
            *mi = mn as f32;
            *vi = vn as f32;
            let update = cfg.lr * (mn / bc1) / ((vn / bc2).sqrt() + cfg.eps);
            *pi = (*pi as f64 - update) as f32;
        }
    }
    Ok(())
}

fn clip_global_norm(grads: &mut [(String, Tensor<f32>)], max_norm: f64) {
    let sq: f64 = grads.iter().flat_map(|(_, g)| g.data()).map(|&v| (v as f64) * (v as f64)).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub decomposition_success_by_count: BTreeMap<usize, f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochLog>,
}

/// One optimizer step on `x`; returns the batch reconstruction loss.
pub fn train_step(
    model: &SetAutoencoder,
    params: &mut ModelParams<f32>,
    state: &mut AdamState,
    x: Tensor<f32>,
    cfg: &AdamConfig,
    clip: Option<f64>,
) -> Result<f64> {
    let (loss, mut grads, stats) = {
        let mut sess = Session::new(params, BatchNormMode::Train);
        let xv = sess.tape.constant(x);
        let out = model.forward(&mut sess, xv, false)?;
        let loss = nn::mse(&mut sess.tape, out.recon, xv)?;
        let value = sess.tape.value(loss).item() as f64;
        if !value.is_finite() || value < 0.0 {
            return Err(Error::NonFinite(format!("reconstruction loss {value}")));
        }
        let grads = sess.param_grads(loss)?;
        (value, grads, sess.take_bn_stats())
    };
    if let Some(c) = clip {
        clip_global_norm(&mut grads, c);
    }
    adam_step(params, &grads, state, cfg)?;
    apply_bn_stats(params, &stats)?;
    Ok(loss)
}

/// Mean reconstruction MSE over `indices` with running batch-norm stats.
pub fn validation_loss(
    model: &SetAutoencoder,
    params: &ModelParams<f32>,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<f64> {
    if indices.is_empty() {
        return Ok(f64::NAN);
    }
    Ok(evaluate_decomposition(model, params, dataset, indices, batch_size)?.mse)
}

/// Batches of one epoch. A trailing batch of one image is dropped because
/// batch norm cannot normalize it.
pub fn epoch_batches(train: &[usize], batch_size: usize, seed: u64, epoch: usize, min_batch: usize) -> Vec<Vec<usize>> {
    let mut order = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(seed ^ 0x5452_4149_4e00_0000, epoch as u64));
    order.shuffle(&mut rng);
    order.chunks(batch_size).filter(|c| c.len() >= min_batch).map(|c| c.to_vec()).collect()
}

/// Trains from scratch. `on_epoch` sees every log entry as it is written.
pub fn train(cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = Dataset::load(&cfg.data)?;
    let model = SetAutoencoder::new(cfg.model.clone(), cfg.variant, cfg.refine)?;
    if dataset.image_size() != cfg.model.image_size {
        return Err(Error::Config(format!(
            "dataset images are {}px but the model is configured for {}px",
            dataset.image_size(),
            cfg.model.image_size
        )));
    }
    let mut params: ModelParams<f32> = model.init_params(cfg.seed)?;
    let trainable = params.trainable_names();
    let mut state = AdamState::new(trainable.iter().map(|n| (n.as_str(), params.get(n).expect("own name"))));
    let adam = AdamConfig::from(cfg);
    let (train_idx, val_idx) = dataset.split();
    let min_batch = if cfg.model.batch_norm { 2 } else { 1 };

    let log_path = cfg.log_path();
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut total = 0.0;
        let mut seen = 0usize;
        for batch in epoch_batches(&train_idx, cfg.batch_size, cfg.seed, epoch, min_batch) {
            let loss = train_step(&model, &mut params, &mut state, dataset.batch(&batch), &adam, cfg.clip_grad_norm)?;
            total += loss * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = if seen == 0 { f64::NAN } else { total / seen as f64 };
        let (val_loss, by_count) = if val_idx.is_empty() {
            (f64::NAN, BTreeMap::new())
        } else if cfg.eval_decomposition {
            let r = evaluate_decomposition(&model, &params, &dataset, &val_idx, cfg.batch_size)?;
            (r.mse, r.success_by_count.iter().map(|(k, s)| (*k, s.rate)).collect())
        } else {
            (validation_loss(&model, &params, &dataset, &val_idx, cfg.batch_size)?, BTreeMap::new())
        };
        let ck = Checkpoint { model: model.clone(), params: params.clone() };
        ck.save(&cfg.checkpoint)?;
        let entry = EpochLog {
            epoch,
            train_loss,
            val_loss,
            decomposition_success_by_count: by_count,
            seconds: start.elapsed().as_secs_f64(),
        };
        let line = serde_json::to_string(&entry).expect("log entry serializes");
        writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| Error::io(&log_path, e))?;
        on_epoch(&entry);
        epochs.push(entry);
    }
    Ok(TrainOutcome { checkpoint: Checkpoint { model, params }, epochs })
}

/// Reads a JSONL training log.
pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Json { path: path.to_path_buf(), source: e }))
        .collect()
}
