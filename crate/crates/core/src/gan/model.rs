use std::collections::HashMap;

use crate::autodiff::{Graph, Var};
use crate::capsnet::{capsule_norms, margin_loss, primary_capsules, uniform_targets, CapsuleLayer};
use crate::datasets::batches;
use crate::optim::AdamState;
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor;

use super::config::{
    CapsuleDiscriminatorConfig, ConvDiscriminatorConfig, DiscriminatorConfig, GanConfig,
    GeneratorConfig,
};
use super::GanError;

type Result<T> = std::result::Result<T, GanError>;

const INIT_PURPOSE: u64 = 0x1417_0000;
const D_LATENT_PURPOSE: u64 = 0xd1a7_0000;
const G_LATENT_PURPOSE: u64 = 0x91a7_0000;
const EVAL_CHUNK: usize = 256;
const UP_KERNEL: usize = 4;

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }
}

/// Glorot-uniform sample with the given fans.
fn glorot(rng: &mut SeededRng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng.uniform_tensor(shape, -limit, limit)
}

fn conv_out(len: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || len + 2 * pad < kernel {
        return Err(GanError::Config(format!(
            "kernel {kernel} (stride {stride}, padding {pad}) does not fit input length {len}"
        )));
    }
    Ok((len + 2 * pad - kernel) / stride + 1)
}

fn init_generator(cfg: &GeneratorConfig, rng: &mut SeededRng) -> ParamSet {
    let (h0, w0) = cfg.base_size();
    let proj = cfg.base_channels * h0 * w0;
    let mut p = ParamSet::new();
    p.push(
        "project.w",
        glorot(rng, &[cfg.latent_dim, proj], cfg.latent_dim, proj),
    );
    p.push("project.b", Tensor::zeros(&[proj]));
    let mut cin = cfg.base_channels;
    let outs = cfg.hidden_channels.iter().copied().chain([cfg.output[0]]);
    for (i, cout) in outs.enumerate() {
        let k2 = UP_KERNEL * UP_KERNEL;
        p.push(
            format!("up{i}.k"),
            glorot(rng, &[cin, cout, UP_KERNEL, UP_KERNEL], cout * k2, cin * k2),
        );
        p.push(format!("up{i}.b"), Tensor::zeros(&[cout]));
        cin = cout;
    }
    p
}

fn generator_forward(g: &mut Graph, cfg: &GeneratorConfig, p: &[Var], z: Var) -> Result<Var> {
    let n = g.value(z).shape()[0];
    let (h0, w0) = cfg.base_size();
    let mut x = g.matmul(z, p[0])?;
    x = g.bias_add(x, p[1])?;
    x = g.leaky_relu(x, cfg.leaky_slope)?;
    x = g.reshape(x, &[n, cfg.base_channels, h0, w0])?;
    let layers = cfg.upsamplings();
    for i in 0..layers {
        x = g.conv2d_transpose(x, p[2 + 2 * i], 2, 1)?;
        x = g.bias_add(x, p[3 + 2 * i])?;
        x = if i + 1 < layers {
            g.leaky_relu(x, cfg.leaky_slope)?
        } else {
            g.tanh(x)?
        };
    }
    Ok(x)
}

/// Number of primary capsules the front end produces.
fn primary_count(cfg: &CapsuleDiscriminatorConfig) -> Result<usize> {
    let [_, h, w] = cfg.input;
    let h1 = conv_out(h, cfg.conv_kernel, cfg.conv_stride, cfg.conv_pad)?;
    let w1 = conv_out(w, cfg.conv_kernel, cfg.conv_stride, cfg.conv_pad)?;
    let ps = &cfg.primary;
    let h2 = conv_out(h1, ps.kernel, ps.stride, ps.pad)?;
    let w2 = conv_out(w1, ps.kernel, ps.stride, ps.pad)?;
    Ok(h2 * w2 * ps.channels)
}

fn capsule_layer(cfg: &CapsuleDiscriminatorConfig) -> Result<CapsuleLayer> {
    Ok(CapsuleLayer {
        in_caps: primary_count(cfg)?,
        out_caps: 1,
        in_dim: cfg.primary.capsule_dim,
        out_dim: cfg.final_dim,
        routing: cfg.routing,
    })
}

fn init_capsule_disc(cfg: &CapsuleDiscriminatorConfig, rng: &mut SeededRng) -> Result<ParamSet> {
    if cfg.conv_filters == 0
        || cfg.final_dim == 0
        || cfg.primary.capsule_dim == 0
        || cfg.primary.channels == 0
    {
        return Err(GanError::Config(
            "capsule discriminator sizes must be positive".into(),
        ));
    }
    let c = cfg.input[0];
    let k = cfg.conv_kernel;
    let f = cfg.conv_filters;
    let pk = cfg.primary.kernel;
    let pf = cfg.primary.filters();
    let layer = capsule_layer(cfg)?;
    let ws = layer.weight_shape();
    let mut p = ParamSet::new();
    p.push("conv.k", glorot(rng, &[f, c, k, k], c * k * k, f * k * k));
    p.push("conv.b", Tensor::zeros(&[f]));
    p.push(
        "primary.k",
        glorot(rng, &[pf, f, pk, pk], f * pk * pk, pf * pk * pk),
    );
    p.push("primary.b", Tensor::zeros(&[pf]));
    // fans follow the usual convention for >2-d weights: the leading axes are
    // the receptive field
    let field = ws[0] * ws[1];
    p.push("route.w", glorot(rng, &ws, ws[2] * field, ws[3] * field));
    Ok(p)
}

fn capsule_disc_forward(
    g: &mut Graph,
    cfg: &CapsuleDiscriminatorConfig,
    p: &[Var],
    x: Var,
) -> Result<Var> {
    let mut h = g.conv2d(x, p[0], cfg.conv_stride, cfg.conv_pad)?;
    h = g.bias_add(h, p[1])?;
    h = g.leaky_relu(h, cfg.leaky_slope)?;
    let caps = primary_capsules(g, h, p[2], Some(p[3]), &cfg.primary)?;
    let v = capsule_layer(cfg)?.forward(g, caps, p[4])?;
    Ok(capsule_norms(g, v)?)
}

fn conv_disc_sizes(cfg: &ConvDiscriminatorConfig) -> Result<usize> {
    let [_, mut h, mut w] = cfg.input;
    for _ in &cfg.channels {
        h = conv_out(h, UP_KERNEL, 2, 1)?;
        w = conv_out(w, UP_KERNEL, 2, 1)?;
    }
    Ok(h * w * cfg.channels.last().copied().unwrap_or(cfg.input[0]))
}

fn init_conv_disc(cfg: &ConvDiscriminatorConfig, rng: &mut SeededRng) -> Result<ParamSet> {
    if cfg.channels.contains(&0) {
        return Err(GanError::Config(
            "convolutional discriminator channels must be positive".into(),
        ));
    }
    let k2 = UP_KERNEL * UP_KERNEL;
    let mut p = ParamSet::new();
    let mut cin = cfg.input[0];
    for (i, &cout) in cfg.channels.iter().enumerate() {
        p.push(
            format!("conv{i}.k"),
            glorot(rng, &[cout, cin, UP_KERNEL, UP_KERNEL], cin * k2, cout * k2),
        );
        p.push(format!("conv{i}.b"), Tensor::zeros(&[cout]));
        cin = cout;
    }
    let flat = conv_disc_sizes(cfg)?;
    p.push("head.w", glorot(rng, &[flat, 1], flat, 1));
    p.push("head.b", Tensor::zeros(&[1]));
    Ok(p)
}

/// Returns logits `[B, 1]`.
fn conv_disc_forward(
    g: &mut Graph,
    cfg: &ConvDiscriminatorConfig,
    p: &[Var],
    x: Var,
) -> Result<Var> {
    let n = g.value(x).shape()[0];
    let mut h = x;
    for i in 0..cfg.channels.len() {
        h = g.conv2d(h, p[2 * i], 2, 1)?;
        h = g.bias_add(h, p[2 * i + 1])?;
        h = g.leaky_relu(h, cfg.leaky_slope)?;
    }
    let flat = g.value(h).len() / n;
    h = g.reshape(h, &[n, flat])?;
    let l = cfg.channels.len();
    let y = g.matmul(h, p[2 * l])?;
    Ok(g.bias_add(y, p[2 * l + 1])?)
}

/// Raw discriminator output: capsule lengths or logits, shape `[B, 1]`.
fn disc_forward(g: &mut Graph, cfg: &DiscriminatorConfig, p: &[Var], x: Var) -> Result<Var> {
    match cfg {
        DiscriminatorConfig::Capsule(c) => capsule_disc_forward(g, c, p, x),
        DiscriminatorConfig::Convolutional(c) => conv_disc_forward(g, c, p, x),
    }
}

/// Loss pushing raw outputs `out` toward the real (`real = true`) or fake
/// class. Capsule variant: margin loss on the single capsule. Convolutional
/// variant: binary cross-entropy written with softplus on logits.
fn class_loss(g: &mut Graph, cfg: &DiscriminatorConfig, out: Var, real: bool) -> Result<Var> {
    let n = g.value(out).shape()[0];
    match cfg {
        DiscriminatorConfig::Capsule(c) => {
            let t = uniform_targets(n, 1, if real { 1.0 } else { 0.0 });
            Ok(margin_loss(g, out, &t, &c.margin)?)
        }
        DiscriminatorConfig::Convolutional(_) => {
            // -log σ(l) = softplus(-l);  -log(1 - σ(l)) = softplus(l)
            let l = if real { g.affine(out, -1.0, 0.0)? } else { out };
            let sp = g.softplus(l)?;
            Ok(g.mean(sp, None)?)
        }
    }
}

/// One training iteration's losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    pub d_loss: Vec<f64>,
    pub g_loss: Vec<f64>,
}

/// A generator/discriminator pair with their optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct GanModel {
    pub config: GanConfig,
    pub generator: ParamSet,
    pub discriminator: ParamSet,
    pub g_opt: AdamState,
    pub d_opt: AdamState,
    /// Completed training iterations.
    pub iteration: u64,
}

impl GanModel {
    /// Fresh model with weights drawn from `config.seed`.
    pub fn new(config: GanConfig) -> Result<Self> {
        config.validate()?;
        let mut g_rng = SeededRng::with_stream(config.seed ^ INIT_PURPOSE, 0);
        let mut d_rng = SeededRng::with_stream(config.seed ^ INIT_PURPOSE, 1);
        let generator = init_generator(&config.generator, &mut g_rng);
        let discriminator = match &config.discriminator {
            DiscriminatorConfig::Capsule(c) => init_capsule_disc(c, &mut d_rng)?,
            DiscriminatorConfig::Convolutional(c) => init_conv_disc(c, &mut d_rng)?,
        };
        let parameters = discriminator.count();
        let budget = config.discriminator.param_budget();
        if parameters > budget {
            return Err(GanError::Budget { parameters, budget });
        }
        Ok(GanModel {
            g_opt: AdamState::new(config.optimizer, generator.tensors()),
            d_opt: AdamState::new(config.optimizer, discriminator.tensors()),
            config,
            generator,
            discriminator,
            iteration: 0,
        })
    }

    fn check_images(&self, x: &Tensor) -> Result<usize> {
        let expected = self.config.image_shape();
        let s = x.shape();
        if s.len() != 4 || s[1..] != expected || s[0] == 0 {
            return Err(GanError::ImageShape {
                expected,
                actual: s.to_vec(),
            });
        }
        Ok(s[0])
    }

    fn latent(&self, n: usize, seed: u64) -> Tensor {
        SeededRng::new(seed).normal_tensor(&[n, self.config.generator.latent_dim])
    }

    fn generate_from(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.generator.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let x = generator_forward(&mut g, &self.config.generator, &p, zv)?;
        Ok(g.value(x).clone())
    }

    /// `n` samples in `[-1, 1]` with latents drawn from `seed`; identical
    /// `(weights, n, seed)` give identical bits.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Tensor> {
        if n == 0 {
            return Err(GanError::Config("cannot generate zero samples".into()));
        }
        let z = self.latent(n, seed);
        let mut parts = Vec::new();
        for start in (0..n).step_by(EVAL_CHUNK) {
            let zc = z.slice_rows(start, (start + EVAL_CHUNK).min(n))?;
            parts.push(self.generate_from(&zc)?);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::concat_rows(&refs)?)
    }

    /// Probability-of-real score per image, in `[0, 1]`.
    pub fn discriminate(&self, x: &Tensor) -> Result<Vec<f64>> {
        let n = self.check_images(x)?;
        let mut scores = Vec::with_capacity(n);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let xc = x.slice_rows(start, (start + EVAL_CHUNK).min(n))?;
            let mut g = Graph::new();
            let p = self.discriminator.bind(&mut g, false);
            let xv = g.constant(xc);
            let mut out = disc_forward(&mut g, &self.config.discriminator, &p, xv)?;
            if matches!(
                self.config.discriminator,
                DiscriminatorConfig::Convolutional(_)
            ) {
                out = g.sigmoid(out)?;
            }
            scores.extend_from_slice(g.value(out).data());
        }
        Ok(scores)
    }

    /// Discriminator loss on `real` plus an equal number of images generated
    /// from latents drawn with `seed`, and its gradient for every
    /// discriminator parameter.
    pub fn discriminator_loss_and_grads(
        &self,
        real: &Tensor,
        seed: u64,
    ) -> Result<(f64, Vec<Tensor>)> {
        let n = self.check_images(real)?;
        let fake = self.generate_from(&self.latent(n, seed))?;
        let cfg = &self.config.discriminator;
        let mut g = Graph::new();
        let p = self.discriminator.bind(&mut g, true);
        let xr = g.constant(real.clone());
        let xf = g.constant(fake);
        let out_r = disc_forward(&mut g, cfg, &p, xr)?;
        let out_f = disc_forward(&mut g, cfg, &p, xf)?;
        let lr = class_loss(&mut g, cfg, out_r, true)?;
        let lf = class_loss(&mut g, cfg, out_f, false)?;
        let loss = g.add(lr, lf)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        Ok((value, p.iter().map(|&v| grads.get(v)).collect()))
    }

    /// Generator loss on `batch_size` samples drawn with `seed`, and its
    /// gradient for every generator parameter.
    pub fn generator_loss_and_grads(&self, seed: u64) -> Result<(f64, Vec<Tensor>)> {
        let z = self.latent(self.config.batch_size, seed);
        let mut g = Graph::new();
        let gp = self.generator.bind(&mut g, true);
        let dp = self.discriminator.bind(&mut g, false);
        let zv = g.constant(z);
        let fake = generator_forward(&mut g, &self.config.generator, &gp, zv)?;
        let out = disc_forward(&mut g, &self.config.discriminator, &dp, fake)?;
        let loss = class_loss(&mut g, &self.config.discriminator, out, true)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        Ok((value, gp.iter().map(|&v| grads.get(v)).collect()))
    }

    /// One discriminator update; the generator is untouched. Returns the
    /// loss before the update.
    pub fn train_discriminator_step(&mut self, real: &Tensor, seed: u64) -> Result<f64> {
        let step = self.d_opt.step + 1;
        let (loss, grads) = self.discriminator_loss_and_grads(real, seed)?;
        if !loss.is_finite() {
            return Err(GanError::Divergence {
                step,
                phase: "discriminator",
                loss,
            });
        }
        self.d_opt.step(self.discriminator.tensors_mut(), &grads)?;
        if !self.discriminator.is_finite() {
            return Err(GanError::Divergence {
                step,
                phase: "discriminator",
                loss: f64::NAN,
            });
        }
        Ok(loss)
    }

    /// One generator update toward samples being classified real; the
    /// discriminator is untouched. Returns the loss before the update.
    pub fn train_generator_step(&mut self, seed: u64) -> Result<f64> {
        let step = self.g_opt.step + 1;
        let (loss, grads) = self.generator_loss_and_grads(seed)?;
        if !loss.is_finite() {
            return Err(GanError::Divergence {
                step,
                phase: "generator",
                loss,
            });
        }
        self.g_opt.step(self.generator.tensors_mut(), &grads)?;
        if !self.generator.is_finite() {
            return Err(GanError::Divergence {
                step,
                phase: "generator",
                loss: f64::NAN,
            });
        }
        Ok(loss)
    }

    /// Run `steps` iterations of `d_steps` discriminator updates followed by
    /// `g_steps` generator updates over shuffled minibatches of `images`
    /// (already in `[-1, 1]`). Every random draw is a function of the config
    /// seed and the iteration index, so a run resumed from a checkpoint
    /// matches an uninterrupted one.
    ///
    /// `on_step` sees each iteration's mean losses and the updated model.
    pub fn train(
        &mut self,
        images: &Tensor,
        steps: u64,
        mut on_step: impl FnMut(&StepRecord, &GanModel),
    ) -> Result<LossHistory> {
        if steps == 0 {
            return Err(GanError::ZeroSteps);
        }
        let n = self.check_images(images)?;
        let bs = self.config.batch_size;
        let per_epoch = batches(n, bs, self.config.seed, 0)?.len() as u64;
        let sched = self.config.schedule;
        let mut epochs: HashMap<u64, Vec<Vec<usize>>> = HashMap::new();
        let mut history = LossHistory::default();
        for _ in 0..steps {
            let it = self.iteration;
            let relabel = |e: GanError| match e {
                GanError::Divergence { phase, loss, .. } => GanError::Divergence {
                    step: it,
                    phase,
                    loss,
                },
                other => other,
            };
            let mut d_total = 0.0;
            for k in 0..sched.d_steps as u64 {
                let b = it * sched.d_steps as u64 + k;
                let epoch = b / per_epoch;
                if !epochs.contains_key(&epoch) {
                    epochs.clear();
                    epochs.insert(epoch, batches(n, bs, self.config.seed, epoch)?);
                }
                let idx = &epochs[&epoch][(b % per_epoch) as usize];
                let real = images.select_rows(idx)?;
                let seed = derive_seed(self.config.seed, D_LATENT_PURPOSE, b);
                d_total += self
                    .train_discriminator_step(&real, seed)
                    .map_err(relabel)?;
            }
            let mut g_total = 0.0;
            for k in 0..sched.g_steps as u64 {
                let seed = derive_seed(
                    self.config.seed,
                    G_LATENT_PURPOSE,
                    it * sched.g_steps as u64 + k,
                );
                g_total += self.train_generator_step(seed).map_err(relabel)?;
            }
            let rec = StepRecord {
                step: it,
                d_loss: d_total / sched.d_steps as f64,
                g_loss: g_total / sched.g_steps as f64,
            };
            self.iteration += 1;
            history.d_loss.push(rec.d_loss);
            history.g_loss.push(rec.g_loss);
            log::debug!(
                "step {} d_loss {:.6} g_loss {:.6}",
                rec.step,
                rec.d_loss,
                rec.g_loss
            );
            on_step(&rec, self);
        }
        Ok(history)
    }
}
