//! Baseline and set-refiner image autoencoders.
//!
//! Both variants share the set generator (a conv trunk whose final feature
//! map is cut into equal groups, one per set element) and the set decoder
//! (per-element transposed convolutions combined by a softmax over the set
//! axis). The refiner variant additionally embeds the trunk features into a
//! target `z` and runs a few steps of gradient descent on the set so that a
//! permutation-invariant encoder of the set reproduces `z`.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{self, BatchNormMode, BatchStats, FSPoolSpec, LayerSpec};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Srn,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "srn" => Ok(Variant::Srn),
            other => Err(Error::Config(format!("unknown model variant '{}'", other))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Srn => "srn",
        })
    }
}

/// Inner gradient descent on the latent set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub steps: usize,
    pub inner_lr: f64,
    /// Treat inner gradients as constants in the outer backward pass.
    pub truncate_grad: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { steps: 5, inner_lr: 0.1, truncate_grad: false }
    }
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub set_size: usize,
    pub elem_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub fspool_pieces: usize,
    pub encoder_channels: [usize; 4],
    pub decoder_channels: [usize; 3],
    pub batch_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            set_size: 16,
            elem_dim: 64,
            embed_dim: 100,
            hidden_dim: 512,
            fspool_pieces: 20,
            encoder_channels: [64, 128, 256, 512],
            decoder_channels: [1024, 512, 256],
            batch_norm: true,
        }
    }
}

impl ModelConfig {
    /// Divides every convolutional width by `div` (at least one channel).
    pub fn with_width_divisor(mut self, div: usize) -> Self {
        let div = div.max(1);
        for c in self.encoder_channels.iter_mut().chain(self.decoder_channels.iter_mut()) {
            *c = (*c / div).max(1);
        }
        self
    }

    pub fn encoder_layers(&self) -> [LayerSpec; 4] {
        let c = self.encoder_channels;
        [
            LayerSpec::conv2d(3, c[0], 4, 2, 1),
            LayerSpec::conv2d(c[0], c[1], 4, 2, 1),
            LayerSpec::conv2d(c[1], c[2], 4, 2, 1),
            LayerSpec::conv2d(c[2], c[3], 4, 4, 1),
        ]
    }

    pub fn decoder_layers(&self) -> [LayerSpec; 3] {
        let c = self.decoder_channels;
        [
            LayerSpec::conv_transpose2d(c[0], c[1], 4, 2, 1),
            LayerSpec::conv_transpose2d(c[1], c[2], 4, 2, 1),
            LayerSpec::conv_transpose2d(c[2], 3, 4, 4, 0),
        ]
    }

    /// Side of the final trunk feature map.
    pub fn trunk_spatial(&self) -> Option<usize> {
        self.encoder_layers().iter().try_fold(self.image_size, |s, l| l.output_len(s).filter(|&v| v > 0))
    }

    pub fn trunk_features(&self) -> usize {
        let s = self.trunk_spatial().unwrap_or(0);
        self.encoder_channels[3] * s * s
    }

    /// Spatial side of the decoder's first feature map.
    pub fn decoder_start(&self) -> usize {
        self.image_size / 16
    }

    pub fn fspool(&self) -> FSPoolSpec {
        FSPoolSpec { feature_dim: self.embed_dim, pieces: self.fspool_pieces }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(_) = self.trunk_spatial() else {
            return Err(Error::Config(format!(
                "image size {} is incompatible with the encoder stride chain",
                self.image_size
            )));
        };
        if !self.image_size.is_multiple_of(16) || self.decoder_start() == 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of 16 for the decoder",
                self.image_size
            )));
        }
        let f = self.trunk_features();
        if self.set_size == 0 || !f.is_multiple_of(self.set_size) {
            return Err(Error::Config(format!(
                "set size {} must divide the {} trunk features",
                self.set_size, f
            )));
        }
        if self.elem_dim == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("element, embedding and hidden sizes must be positive".into()));
        }
        Ok(())
    }
}

const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

pub fn is_buffer(name: &str) -> bool {
    BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s))
}

/// Named, ordered table of every tensor a model variant owns: trainable
/// parameters and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    crate::scenes::scene_seed(seed, h)
}

impl<T: Real> ModelParams<T> {
    pub fn from_entries(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, (name, t)) in entries.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate parameter name {}", name)));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter {} is not finite", name)));
            }
        }
        Ok(ModelParams { entries, index })
    }

    /// Fresh parameters. Each tensor draws from its own stream derived from
    /// `(seed, name)`, so the variants share identical values for the
    /// parameters they have in common.
    pub fn init(cfg: &ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut entries: Vec<(String, Tensor<T>)> = Vec::new();
        let weight = |entries: &mut Vec<(String, Tensor<T>)>, name: String, spec: &LayerSpec| {
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &name));
            entries.push((name, spec.init_weight(&mut rng)));
        };
        let bn = |entries: &mut Vec<(String, Tensor<T>)>, prefix: &str, c: usize| {
            entries.push((format!("{prefix}.weight"), Tensor::ones(&[c])));
            entries.push((format!("{prefix}.bias"), Tensor::zeros(&[c])));
            entries.push((format!("{prefix}.running_mean"), Tensor::zeros(&[c])));
            entries.push((format!("{prefix}.running_var"), Tensor::ones(&[c])));
        };

        for (i, l) in cfg.encoder_layers().iter().enumerate() {
            weight(&mut entries, format!("enc.conv{}.weight", i + 1), l);
            if i > 0 && cfg.batch_norm {
                bn(&mut entries, &format!("enc.bn{}", i + 1), l.out_channels);
            }
        }
        let group = cfg.trunk_features() / cfg.set_size;
        let proj = LayerSpec::conv1d(group, cfg.elem_dim);
        weight(&mut entries, "enc.project.weight".into(), &proj);
        entries.push(("enc.project.bias".into(), Tensor::zeros(&[cfg.elem_dim])));

        if variant == Variant::Srn {
            let embed = LayerSpec::linear(cfg.trunk_features(), cfg.embed_dim);
            weight(&mut entries, "embed.weight".into(), &embed);
            entries.push(("embed.bias".into(), Tensor::zeros(&[cfg.embed_dim])));
            let dims = [cfg.elem_dim, cfg.hidden_dim, cfg.hidden_dim, cfg.embed_dim];
            for i in 0..3 {
                let l = LayerSpec::linear(dims[i], dims[i + 1]);
                weight(&mut entries, format!("agg.fc{}.weight", i + 1), &l);
                entries.push((format!("agg.fc{}.bias", i + 1), Tensor::zeros(&[dims[i + 1]])));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, "agg.fspool.weight"));
            entries.push(("agg.fspool.weight".into(), cfg.fspool().init_weights(&mut rng)));
        }

        let s0 = cfg.decoder_start();
        let c0 = cfg.decoder_channels[0];
        let fc = LayerSpec::linear(cfg.elem_dim, c0 * s0 * s0);
        weight(&mut entries, "dec.fc.weight".into(), &fc);
        entries.push(("dec.fc.bias".into(), Tensor::zeros(&[c0 * s0 * s0])));
        if cfg.batch_norm {
            bn(&mut entries, "dec.bn0", c0 * s0 * s0);
        }
        for (i, l) in cfg.decoder_layers().iter().enumerate() {
            weight(&mut entries, format!("dec.tconv{}.weight", i + 1), l);
            if i < 2 && cfg.batch_norm {
                bn(&mut entries, &format!("dec.bn{}", i + 1), l.out_channels);
            }
        }
        Self::from_entries(entries)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::Config(format!("missing parameter {}", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(Error::Config(format!("missing parameter {}", name))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries.iter().filter(|(n, _)| !is_buffer(n)).map(|(n, _)| n.clone()).collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|(n, _)| !is_buffer(n)).map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }
}

/// Model definition plus its parameters, as stored in a checkpoint.
/// An `f64` as four 16-bit chunks of its bit pattern, each exact in `f32`.
fn f64_bits(v: f64) -> Tensor<f32> {
    let b = v.to_bits();
    Tensor::from_vec((0..4).map(|k| ((b >> (16 * k)) & 0xffff) as f32).collect())
}

fn f64_from_bits(t: &Tensor<f32>) -> Option<f64> {
    if t.numel() != 4 || t.data().iter().any(|&c| !(0.0..65536.0).contains(&c) || c.fract() != 0.0) {
        return None;
    }
    Some(f64::from_bits(t.data().iter().enumerate().fold(0u64, |acc, (k, &c)| acc | (c as u64) << (16 * k))))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SetAutoencoder,
    pub params: ModelParams<f32>,
}

impl Checkpoint {
    fn meta_entries(&self) -> Vec<(String, Tensor<f32>)> {
        let m = &self.model;
        let c = &m.config;
        let scalar = |v: f64| Tensor::scalar(v as f32);
        let vec = |v: &[usize]| Tensor::from_vec(v.iter().map(|&x| x as f32).collect());
        vec![
            ("meta.variant".into(), scalar(if m.variant == Variant::Srn { 1.0 } else { 0.0 })),
            ("meta.image_size".into(), scalar(c.image_size as f64)),
            ("meta.set_size".into(), scalar(c.set_size as f64)),
            ("meta.elem_dim".into(), scalar(c.elem_dim as f64)),
            ("meta.embed_dim".into(), scalar(c.embed_dim as f64)),
            ("meta.hidden_dim".into(), scalar(c.hidden_dim as f64)),
            ("meta.fspool_pieces".into(), scalar(c.fspool_pieces as f64)),
            ("meta.encoder_channels".into(), vec(&c.encoder_channels)),
            ("meta.decoder_channels".into(), vec(&c.decoder_channels)),
            ("meta.batch_norm".into(), scalar(if c.batch_norm { 1.0 } else { 0.0 })),
            ("meta.inner_steps".into(), scalar(m.refine.steps as f64)),
            ("meta.inner_lr".into(), f64_bits(m.refine.inner_lr)),
            ("meta.truncate_grad".into(), scalar(if m.refine.truncate_grad { 1.0 } else { 0.0 })),
        ]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = self.meta_entries();
        entries.extend(self.params.entries().iter().cloned());
        checkpoint::write_entries(path, &entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = checkpoint::read_entries(path)?;
        let (meta, params): (Vec<_>, Vec<_>) = entries.into_iter().partition(|(n, _)| n.starts_with("meta."));
        let meta: HashMap<String, Tensor<f32>> = meta.into_iter().collect();
        let get = |k: &str| -> Result<&Tensor<f32>> {
            meta.get(k).ok_or_else(|| Error::format(path, format!("missing {}", k)))
        };
        let int = |k: &str| -> Result<usize> { Ok(get(k)?.item() as usize) };
        let arr = |k: &str| -> Result<Vec<usize>> { Ok(get(k)?.data().iter().map(|&v| v as usize).collect()) };
        let enc = arr("meta.encoder_channels")?;
        let dec = arr("meta.decoder_channels")?;
        if enc.len() != 4 || dec.len() != 3 {
            return Err(Error::format(path, "bad channel metadata"));
        }
        let config = ModelConfig {
            image_size: int("meta.image_size")?,
            set_size: int("meta.set_size")?,
            elem_dim: int("meta.elem_dim")?,
            embed_dim: int("meta.embed_dim")?,
            hidden_dim: int("meta.hidden_dim")?,
            fspool_pieces: int("meta.fspool_pieces")?,
            encoder_channels: [enc[0], enc[1], enc[2], enc[3]],
            decoder_channels: [dec[0], dec[1], dec[2]],
            batch_norm: get("meta.batch_norm")?.item() != 0.0,
        };
        let variant = if get("meta.variant")?.item() != 0.0 { Variant::Srn } else { Variant::Baseline };
        let refine = RefineConfig {
            steps: int("meta.inner_steps")?,
            inner_lr: f64_from_bits(get("meta.inner_lr")?).ok_or_else(|| Error::format(path, "bad inner_lr metadata"))?,
            truncate_grad: get("meta.truncate_grad")?.item() != 0.0,
        };
        let model = SetAutoencoder { config, variant, refine };
        let params = ModelParams::from_entries(params)?;
        model.check_params(&params)?;
        Ok(Checkpoint { model, params })
    }
}

/// Graph-building context for one forward evaluation.
pub struct Session<'p, T: Real> {
    pub tape: Tape<T>,
    params: &'p ModelParams<T>,
    bound: HashMap<String, Var>,
    mode: BatchNormMode,
    outer_grad: bool,
    bn_stats: Vec<(String, BatchStats<T>)>,
}

impl<'p, T: Real> Session<'p, T> {
    /// `Train` mode uses batch statistics and keeps the full graph for an
    /// outer backward pass; `Eval` uses running statistics.
    pub fn new(params: &'p ModelParams<T>, mode: BatchNormMode) -> Self {
        let mut tape = Tape::new();
        let bound = params
            .entries()
            .iter()
            .map(|(n, t)| {
                let v = if is_buffer(n) { tape.constant(t.clone()) } else { tape.leaf(t.clone()) };
                (n.clone(), v)
            })
            .collect();
        Session { tape, params, bound, mode, outer_grad: mode == BatchNormMode::Train, bn_stats: Vec::new() }
    }

    /// Whether the inner loop keeps its gradients differentiable.
    pub fn set_outer_grad(&mut self, on: bool) {
        self.outer_grad = on;
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        self.bound.get(name).copied().ok_or_else(|| Error::Config(format!("missing parameter {}", name)))
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.bound.contains_key(name)
    }

    pub fn mode(&self) -> BatchNormMode {
        self.mode
    }

    fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let rm = self.params.get(&format!("{prefix}.running_mean"))?;
        let rv = self.params.get(&format!("{prefix}.running_var"))?;
        let (y, stats) = nn::batch_norm(&mut self.tape, x, g, b, rm, rv, self.mode)?;
        if let Some(s) = stats {
            self.bn_stats.push((prefix.to_string(), s));
        }
        Ok(y)
    }

    /// Batch statistics gathered by training-mode batch norms, by layer prefix.
    pub fn take_bn_stats(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.bn_stats)
    }

    /// Gradients of `loss` for every trainable parameter, in table order.
    pub fn param_grads(&mut self, loss: Var) -> Result<Vec<(String, Tensor<T>)>> {
        let names = self.params.trainable_names();
        let vars: Vec<Var> = names.iter().map(|n| self.bound[n]).collect();
        let table = self.tape.backward(loss, &vars, false)?;
        Ok(names
            .into_iter()
            .zip(vars)
            .map(|(n, v)| (n, table.get(v).expect("gradient for every requested var").clone()))
            .collect())
    }
}

/// Applies collected batch statistics to the running buffers.
pub fn apply_bn_stats<T: Real>(params: &mut ModelParams<T>, stats: &[(String, BatchStats<T>)]) -> Result<()> {
    for (prefix, s) in stats {
        nn::update_running(params.get_mut(&format!("{prefix}.running_mean"))?, &s.mean, nn::BN_MOMENTUM);
        nn::update_running(params.get_mut(&format!("{prefix}.running_var"))?, &s.var, nn::BN_MOMENTUM);
    }
    Ok(())
}

/// Per-step inner losses, one value per batch item.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefineTrace {
    /// `losses[i][b]` is `||H_agg(S_i) - z||^2` for item `b`.
    pub losses: Vec<Vec<f64>>,
}

pub struct ForwardOutput {
    /// Reconstruction `B x 3 x H x W`.
    pub recon: Var,
    /// Set passed to the decoder, `B x n x d`.
    pub latents: Var,
    /// Set produced by the generator, `B x n x d`.
    pub initial: Var,
    /// Per-slot images `sigmoid(I_i)`, `B x n x 3 x H x W`.
    pub slots: Var,
    /// Embedding target (refiner variant only).
    pub z: Option<Var>,
    pub trace: RefineTrace,
}

/// The two set autoencoders.
#[derive(Debug, Clone, PartialEq)]
pub struct SetAutoencoder {
    pub config: ModelConfig,
    pub variant: Variant,
    pub refine: RefineConfig,
}

impl SetAutoencoder {
    pub fn new(config: ModelConfig, variant: Variant, refine: RefineConfig) -> Result<Self> {
        config.validate()?;
        if !(refine.inner_lr.is_finite() && refine.inner_lr >= 0.0) {
            return Err(Error::Config(format!("inner learning rate {} invalid", refine.inner_lr)));
        }
        Ok(SetAutoencoder { config, variant, refine })
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ModelParams<T>> {
        ModelParams::init(&self.config, self.variant, seed)
    }

    /// Checks that `params` holds every tensor of this variant with the
    /// expected shape.
    pub fn check_params<T: Real>(&self, params: &ModelParams<T>) -> Result<()> {
        let reference: ModelParams<f32> = ModelParams::init(&self.config, self.variant, 0)?;
        for (name, t) in reference.entries() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    name,
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Conv trunk and grouped projection: returns `(S0: B x n x d, trunk)`
    /// where `trunk` is the final `B x C x s x s` feature map.
    pub fn set_generator<T: Real>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let xs = sess.tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != 3 || xs[2] != cfg.image_size || xs[3] != cfg.image_size {
            return Err(Error::Shape(format!(
                "set generator expects B x 3 x {s} x {s} images, got {:?}",
                xs,
                s = cfg.image_size
            )));
        }
        let b = xs[0];
        let mut h = x;
        for (i, l) in cfg.encoder_layers().iter().enumerate() {
            let w = sess.param(&format!("enc.conv{}.weight", i + 1))?;
            h = nn::conv2d(&mut sess.tape, h, w, None, l)?;
            if i > 0 && cfg.batch_norm {
                h = sess.batch_norm(h, &format!("enc.bn{}", i + 1))?;
            }
            h = sess.tape.relu(h)?;
        }
        let trunk = h;
        let n = cfg.set_size;
        let group = cfg.trunk_features() / n;
        let grouped = sess.tape.reshape(trunk, &[b, n, group])?;
        let grouped = sess.tape.permute(grouped, &[0, 2, 1])?;
        let w = sess.param("enc.project.weight")?;
        let bias = sess.param("enc.project.bias")?;
        let proj = LayerSpec::conv1d(group, cfg.elem_dim);
        let s = nn::conv1d_group_project(&mut sess.tape, grouped, w, Some(bias), &proj)?;
        let s = sess.tape.permute(s, &[0, 2, 1])?;
        Ok((s, trunk))
    }

    /// Linear embedding of the flattened trunk features.
    pub fn embed<T: Real>(&self, sess: &mut Session<'_, T>, trunk: Var) -> Result<Var> {
        let b = sess.tape.shape(trunk)[0];
        let flat = sess.tape.reshape(trunk, &[b, self.config.trunk_features()])?;
        let w = sess.param("embed.weight")?;
        let bias = sess.param("embed.bias")?;
        nn::linear(&mut sess.tape, flat, w, Some(bias))
    }

    /// Permutation-invariant set encoder: shared 3-layer MLP per element,
    /// then FSPool.
    pub fn aggregate<T: Real>(&self, sess: &mut Session<'_, T>, s: Var) -> Result<Var> {
        let ss = sess.tape.shape(s).to_vec();
        if ss.len() != 3 || ss[2] != self.config.elem_dim {
            return Err(Error::Shape(format!(
                "set encoder expects B x n x {} sets, got {:?}",
                self.config.elem_dim, ss
            )));
        }
        let (b, n) = (ss[0], ss[1]);
        let mut h = sess.tape.reshape(s, &[b * n, ss[2]])?;
        for i in 1..=3 {
            let w = sess.param(&format!("agg.fc{i}.weight"))?;
            let bias = sess.param(&format!("agg.fc{i}.bias"))?;
            h = nn::linear(&mut sess.tape, h, w, Some(bias))?;
            if i < 3 {
                h = sess.tape.relu(h)?;
            }
        }
        let h = sess.tape.reshape(h, &[b, n, self.config.embed_dim])?;
        let table = sess.param("agg.fspool.weight")?;
        nn::fspool(&mut sess.tape, h, table, &self.config.fspool())
    }

    /// `r` steps of `S <- S - lr * d/dS ||H_agg(S) - z||^2`.
    ///
    /// With `record_final` the loss at the returned set is appended to the
    /// trace.
    pub fn refine<T: Real>(
        &self,
        sess: &mut Session<'_, T>,
        s0: Var,
        z: Var,
        cfg: &RefineConfig,
        record_final: bool,
    ) -> Result<(Var, RefineTrace)> {
        let mut trace = RefineTrace::default();
        let mut s = s0;
        for step in 1..=cfg.steps {
            let was_enabled = sess.tape.set_grad_enabled(true);
            if !sess.tape.requires_grad(s) {
                let v = sess.tape.value(s).clone();
                s = sess.tape.leaf(v);
            }
            let (loss, per_item) = self.inner_loss(sess, s, z)?;
            if !sess.tape.value(loss).item().is_finite() {
                return Err(Error::NonFinite(format!("inner loss at refinement step {} is not finite", step)));
            }
            trace.losses.push(per_item);
            let create = sess.outer_grad && !cfg.truncate_grad;
            let grads = sess.tape.backward(loss, &[s], create)?;
            let g = match grads.node(s) {
                Some(g) => g,
                None => sess.tape.constant(grads.get(s).expect("requested gradient").clone()),
            };
            sess.tape.set_grad_enabled(was_enabled);
            let delta = sess.tape.scale(g, cfg.inner_lr)?;
            s = sess.tape.sub(s, delta)?;
        }
        if record_final {
            let (_, per_item) = self.inner_loss(sess, s, z)?;
            trace.losses.push(per_item);
        }
        Ok((s, trace))
    }

    /// Sum-of-squares inner objective and its per-item values.
    pub fn inner_loss<T: Real>(&self, sess: &mut Session<'_, T>, s: Var, z: Var) -> Result<(Var, Vec<f64>)> {
        let h = self.aggregate(sess, s)?;
        if sess.tape.shape(h) != sess.tape.shape(z) {
            return Err(Error::Shape(format!(
                "set encoder output {:?} does not match embedding {:?}",
                sess.tape.shape(h),
                sess.tape.shape(z)
            )));
        }
        let d = sess.tape.sub(h, z)?;
        let sq = sess.tape.square(d)?;
        let v = sess.tape.value(sq);
        let width = v.shape()[1];
        let per_item = v.data().chunks(width).map(|r| r.iter().map(|x| x.as_f64()).sum()).collect();
        Ok((sess.tape.sum(sq)?, per_item))
    }

    /// Decodes every element to logits `I_i` and combines
    /// `sum_i softmax_i(I) * sigmoid(I_i)`. Returns `(recon, slots)`.
    pub fn decode<T: Real>(&self, sess: &mut Session<'_, T>, s: Var) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let ss = sess.tape.shape(s).to_vec();
        if ss.len() != 3 || ss[2] != cfg.elem_dim {
            return Err(Error::Shape(format!("decoder expects B x n x {} sets, got {:?}", cfg.elem_dim, ss)));
        }
        let (b, n) = (ss[0], ss[1]);
        let s0 = cfg.decoder_start();
        let c0 = cfg.decoder_channels[0];
        let flat = sess.tape.reshape(s, &[b * n, cfg.elem_dim])?;
        let w = sess.param("dec.fc.weight")?;
        let bias = sess.param("dec.fc.bias")?;
        let mut h = nn::linear(&mut sess.tape, flat, w, Some(bias))?;
        if cfg.batch_norm {
            h = sess.batch_norm(h, "dec.bn0")?;
        }
        h = sess.tape.relu(h)?;
        h = sess.tape.reshape(h, &[b * n, c0, s0, s0])?;
        for (i, l) in cfg.decoder_layers().iter().enumerate() {
            let w = sess.param(&format!("dec.tconv{}.weight", i + 1))?;
            h = nn::conv_transpose2d(&mut sess.tape, h, w, None, l)?;
            if i < 2 {
                if cfg.batch_norm {
                    h = sess.batch_norm(h, &format!("dec.bn{}", i + 1))?;
                }
                h = sess.tape.relu(h)?;
            }
        }
        let size = cfg.image_size;
        let logits = sess.tape.reshape(h, &[b, n, 3, size, size])?;
        let weights = nn::softmax(&mut sess.tape, logits, 1)?;
        let slots = sess.tape.sigmoid(logits)?;
        let mixed = sess.tape.mul(weights, slots)?;
        let recon = sess.tape.sum_axis(mixed, 1, true)?;
        let recon = sess.tape.reshape(recon, &[b, 3, size, size])?;
        Ok((recon, slots))
    }

    /// Full pipeline on an image batch.
    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, x: Var, record_final: bool) -> Result<ForwardOutput> {
        let (initial, trunk) = self.set_generator(sess, x)?;
        let (latents, z, trace) = match self.variant {
            Variant::Baseline => (initial, None, RefineTrace::default()),
            Variant::Srn => {
                let z = self.embed(sess, trunk)?;
                let (s, trace) = self.refine(sess, initial, z, &self.refine, record_final)?;
                (s, Some(z), trace)
            }
        };
        let (recon, slots) = self.decode(sess, latents)?;
        Ok(ForwardOutput { recon, latents, initial, slots, z, trace })
    }
}
