//! Inner-loop feedback: an extra backbone-shaped block whose output is fed
//! back, scaled per block, into an earlier span of the frozen backbone.
//!
//! One feedback forward runs blocks `0..=e` at `cond(t)`, evaluates the
//! feedback block on `f_e`, then re-runs the loop `b..=e` with the scaled
//! feedback added to each block input, and finishes the tail and head at
//! `cond(t_post)`. Cost: `n + m + 1` block forwards.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{patchify_pixels, unpatchify, Backbone, DiTBlock};
use crate::data::{BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::numerics::gradcheck::{directional_probe, tilted_direction, Probe};
use crate::numerics::{AdamState, Tape, Tensor, Var};
use crate::schedule::{LoopRange, NoiseSchedule};

/// Trainable feedback parameters: one block plus a scale per loop block.
#[derive(Debug, Clone)]
pub struct FeedbackState {
    pub block: DiTBlock,
    /// `s_b..=s_e`, zero at initialization.
    pub scales: Tensor,
    pub loop_range: LoopRange,
}

impl FeedbackState {
    /// Copies the backbone's block shape. Shift/scale modulation is random,
    /// gates and `scales` start at zero, so the fresh state reproduces the
    /// backbone exactly.
    pub fn new<R: Rng + ?Sized>(backbone: &Backbone, loop_range: LoopRange, rng: &mut R) -> Result<Self> {
        LoopRange::new(loop_range.start, loop_range.end, backbone.n_blocks())?;
        let c = &backbone.config;
        Ok(Self {
            block: DiTBlock::new_random_modulation(c.hidden_dim, c.n_heads, rng),
            scales: Tensor::zeros(&[loop_range.len()]).into_param(),
            loop_range,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<_> = self
            .block
            .named_params()
            .into_iter()
            .map(|(n, t)| (format!("block.{n}"), t))
            .collect();
        out.push(("scales".to_string(), &self.scales));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<_> = self
            .block
            .named_params_mut()
            .into_iter()
            .map(|(n, t)| (format!("block.{n}"), t))
            .collect();
        out.push(("scales".to_string(), &mut self.scales));
        out
    }

    /// Block forwards for one feedback pass through an `n`-block backbone.
    pub fn cost(&self, n_blocks: usize) -> usize {
        n_blocks + self.loop_range.len() + 1
    }
}

/// Tape handles for one feedback forward.
#[derive(Debug, Clone, Copy)]
pub struct IlfOutput {
    /// Noise prediction in patch layout.
    pub eps: Var,
    /// Output of block `e` after the feedback pass through the loop.
    pub loop_out: Var,
    pub block_forwards: usize,
}

pub fn ilf_forward_on<'p>(
    tape: &mut Tape<'p>,
    backbone: &'p Backbone,
    fs: &'p FeedbackState,
    x_t: &Tensor,
    t: &[f64],
    t_post: &[f64],
    classes: &[usize],
) -> Result<IlfOutput> {
    let LoopRange { start: b, end: e } = fs.loop_range;
    if b > e {
        return Err(Error::invalid(format!("loop start {b} > loop end {e}")));
    }
    if e >= backbone.n_blocks() || fs.scales.numel() != e - b + 1 {
        return Err(Error::invalid(format!(
            "loop [{b}, {e}] with {} scales does not fit {} blocks",
            fs.scales.numel(),
            backbone.n_blocks()
        )));
    }
    if t.len() != t_post.len() {
        return Err(Error::shape(
            "ilf_forward",
            format!("{} t vs {} t_post", t.len(), t_post.len()),
        ));
    }
    if let Some((a, p)) = t.iter().zip(t_post).find(|(a, p)| p > a) {
        return Err(Error::invalid(format!("t_post {p} exceeds t {a}")));
    }
    let n = backbone.n_blocks();
    let cond_t = backbone.condition_on(tape, t, classes)?;
    let cond_post = backbone.condition_on(tape, t_post, classes)?;
    let mut h = backbone.embed_tokens_on(tape, x_t)?;
    let mut before_loop = h;
    let mut count = 0;
    for i in 0..=e {
        h = backbone.block_on(tape, i, h, cond_t)?.out;
        count += 1;
        if i + 1 == b {
            before_loop = h;
        }
    }
    let batch = classes.len();
    let feed = fs.block.forward_on(tape, h, cond_t, batch)?.out;
    count += 1;
    let scales = tape.param(&fs.scales);
    let mut h = before_loop;
    for i in b..=e {
        let injected = tape.scale_by(feed, scales, i - b)?;
        let input = tape.add(injected, h)?;
        h = backbone.block_on(tape, i, input, cond_post)?.out;
        count += 1;
    }
    let loop_out = h;
    for i in e + 1..n {
        h = backbone.block_on(tape, i, h, cond_post)?.out;
        count += 1;
    }
    let eps = backbone.final_layer_on(tape, h, cond_post)?;
    Ok(IlfOutput {
        eps,
        loop_out,
        block_forwards: count,
    })
}

/// Gradient-free feedback forward: `[b, c, h, w]` noise prediction and the
/// number of block forwards spent.
pub fn ilf_forward(
    backbone: &Backbone,
    fs: &FeedbackState,
    x_t: &Tensor,
    t: &[f64],
    t_post: &[f64],
    classes: &[usize],
) -> Result<(Tensor, usize)> {
    let mut tape = Tape::no_grad();
    let out = ilf_forward_on(&mut tape, backbone, fs, x_t, t, t_post, classes)?;
    let c = &backbone.config;
    let eps = unpatchify(tape.value(out.eps), c.channels, c.image_size, c.patch_size)?;
    Ok((eps, out.block_forwards))
}

/// Conditioning time for the student's post-feedback computation during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainTPost {
    /// `floor(t / 2)`, the teacher's timestep.
    #[default]
    Half,
    /// The input timestep itself.
    Same,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f32,
    pub iterations: usize,
    pub w_recon: f32,
    pub w_distill: f32,
    pub tpost_mode_training: TrainTPost,
    /// DDIM teacher passes from `t` down to `t / 2`; 1 noises `x0` directly.
    pub teacher_steps: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-4,
            iterations: 2000,
            w_recon: 1.0,
            w_distill: 1.0,
            tpost_mode_training: TrainTPost::Half,
            teacher_steps: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, message: &str| {
            Err(Error::Config {
                path: format!("ilf.train.{path}"),
                message: message.to_string(),
            })
        };
        if self.w_recon < 0.0 || self.w_distill < 0.0 {
            return fail("w_recon", "loss weights must be non-negative");
        }
        if self.w_recon == 0.0 && self.w_distill == 0.0 {
            return fail("w_distill", "loss weights cannot both be zero");
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be >= 1");
        }
        if self.teacher_steps == 0 {
            return fail("teacher_steps", "must be >= 1");
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return fail("lr", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub recon: f32,
    pub distill: f32,
    pub total: f32,
}

#[allow(clippy::too_many_arguments)]
fn teacher_prediction(
    backbone: &Backbone,
    ns: &NoiseSchedule,
    x0: &Tensor,
    x_t: &Tensor,
    t: &[f64],
    t_half: &[f64],
    eps: &Tensor,
    classes: &[usize],
    steps: usize,
) -> Result<Tensor> {
    let x_half = if steps <= 1 {
        ns.noise_sample(x0, t_half, eps)?
    } else {
        let mut x = x_t.clone();
        let frac = |j: usize| -> Vec<f64> {
            t.iter()
                .zip(t_half)
                .map(|(&a, &h)| a - (a - h) * j as f64 / steps as f64)
                .collect()
        };
        for j in 0..steps {
            let (from, to) = (frac(j), frac(j + 1));
            let (pred, _) = backbone.forward(&x, &from, classes, false)?;
            x = ddim_step_batch(ns, &x, &pred, &from, &to)?;
        }
        x
    };
    let (pred, _) = backbone.forward(&x_half, t_half, classes, false)?;
    Ok(pred)
}

fn ddim_step_batch(ns: &NoiseSchedule, x: &Tensor, eps: &Tensor, t: &[f64], t_next: &[f64]) -> Result<Tensor> {
    let batch = t.len();
    let mut parts = Vec::with_capacity(batch);
    for b in 0..batch {
        let xb = x.narrow_leading(b, 1)?;
        if t_next[b] >= t[b] {
            parts.push(xb);
            continue;
        }
        let eb = eps.narrow_leading(b, 1)?;
        parts.push(ns.ddim_step(&xb, &eb, t[b], t_next[b])?);
    }
    Tensor::cat_leading(&parts)
}

/// One fast-approximate-distillation step on a batch of clean images.
///
/// The backbone must be frozen; only `fs` is updated.
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng + ?Sized>(
    backbone: &Backbone,
    fs: &mut FeedbackState,
    adam: &mut AdamState,
    ns: &NoiseSchedule,
    x0: &Tensor,
    classes: &[usize],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LossComponents> {
    if backbone.named_params().iter().any(|(_, p)| p.requires_grad) {
        return Err(Error::invalid("feedback training requires a frozen backbone"));
    }
    let batch = classes.len();
    let timesteps = ns.timesteps();
    let t_int: Vec<usize> = (0..batch).map(|_| rng.gen_range(1..=timesteps)).collect();
    let t: Vec<f64> = t_int.iter().map(|&v| v as f64).collect();
    let t_half: Vec<f64> = t_int.iter().map(|&v| (v / 2) as f64).collect();
    let eps = Tensor::randn(x0.shape(), 1.0, rng);
    let x_t = ns.noise_sample(x0, &t, &eps)?;
    let teacher = teacher_prediction(backbone, ns, x0, &x_t, &t, &t_half, &eps, classes, cfg.teacher_steps)?;
    let t_post = match cfg.tpost_mode_training {
        TrainTPost::Half => t_half.clone(),
        TrainTPost::Same => t.clone(),
    };
    let patch = backbone.config.patch_size;
    let (losses, grads) = {
        let mut tape = Tape::new();
        let out = ilf_forward_on(&mut tape, backbone, fs, &x_t, &t, &t_post, classes)?;
        let target = tape.constant(patchify_pixels(&eps, patch)?);
        let teacher = tape.constant(patchify_pixels(&teacher, patch)?);
        let recon = tape.mse(out.eps, target)?;
        let distill = tape.mse(out.eps, teacher)?;
        let a = tape.scale(recon, cfg.w_recon);
        let b = tape.scale(distill, cfg.w_distill);
        let total = tape.add(a, b)?;
        let losses = LossComponents {
            recon: tape.value(recon).data()[0],
            distill: tape.value(distill).data()[0],
            total: tape.value(total).data()[0],
        };
        if !losses.total.is_finite() {
            return Err(Error::NonFinite(format!("feedback loss {:?}", losses)));
        }
        tape.backward(total)?;
        let grads: Vec<Option<Vec<f32>>> = fs
            .named_params()
            .iter()
            .map(|(_, p)| tape.grad_of(p).map(<[f32]>::to_vec))
            .collect();
        (losses, grads)
    };
    let mut params: Vec<&mut Tensor> = fs.named_params_mut().into_iter().map(|(_, p)| p).collect();
    for (p, g) in params.iter_mut().zip(grads) {
        p.grad = g;
    }
    adam.step(&mut params)?;
    Ok(losses)
}

/// Runs `cfg.iterations` feedback training steps, calling `on_step(step, fs)`
/// after each one (steps are 1-based).
pub fn train<R, F>(
    backbone: &Backbone,
    fs: &mut FeedbackState,
    ns: &NoiseSchedule,
    dataset: &Dataset,
    cfg: &TrainConfig,
    rng: &mut R,
    mut on_step: F,
) -> Result<Vec<LossComponents>>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &FeedbackState) -> Result<()>,
{
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let mut curve = Vec::with_capacity(cfg.iterations);
    if cfg.iterations == 0 {
        return Ok(curve);
    }
    let mut adam = AdamState::new(cfg.lr);
    let mut stream = BatchStream::new(dataset, cfg.batch_size, rng)?;
    for step in 1..=cfg.iterations {
        let (x0, labels) = stream.next_batch(rng);
        curve.push(train_step(backbone, fs, &mut adam, ns, &x0, &labels, cfg, rng)?);
        on_step(step, fs)?;
    }
    Ok(curve)
}

/// Central-difference probes of `d/dθ sum(w * eps_hat)` with fixed random
/// weights `w`, where `θ` is every feedback parameter (block and scales)
/// concatenated in `named_params` order. One probe per random direction.
#[allow(clippy::too_many_arguments)]
pub fn probe_feedback_gradients<R: Rng + ?Sized>(
    backbone: &Backbone,
    fs: &FeedbackState,
    x_t: &Tensor,
    t: &[f64],
    t_post: &[f64],
    classes: &[usize],
    probes: usize,
    h: f32,
    rng: &mut R,
) -> Result<Vec<Probe>> {
    let weights = {
        let mut tape = Tape::no_grad();
        let out = ilf_forward_on(&mut tape, backbone, fs, x_t, t, t_post, classes)?;
        Tensor::uniform(tape.value(out.eps).shape(), -1.0, 1.0, rng)
    };
    let grad: Vec<f32> = {
        let mut tape = Tape::new();
        let out = ilf_forward_on(&mut tape, backbone, fs, x_t, t, t_post, classes)?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out.eps, w)?;
        let loss = tape.sum(prod);
        tape.backward(loss)?;
        fs.named_params()
            .iter()
            .flat_map(|(_, p)| tape.grad_of(p).map_or_else(|| vec![0.0; p.numel()], <[f32]>::to_vec))
            .collect()
    };
    let theta: Vec<f32> = fs.named_params().iter().flat_map(|(_, p)| p.data().to_vec()).collect();
    let loss_at = |values: &[f32]| -> Result<f64> {
        let mut state = fs.clone();
        let mut offset = 0;
        for (_, p) in state.named_params_mut() {
            let n = p.numel();
            p.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        let mut tape = Tape::no_grad();
        let out = ilf_forward_on(&mut tape, backbone, &state, x_t, t, t_post, classes)?;
        Ok(tape
            .value(out.eps)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum())
    };
    let mut result = Vec::with_capacity(probes);
    for _ in 0..probes {
        let noise = Tensor::randn(&[theta.len()], 1.0, rng);
        let dir = tilted_direction(&grad, noise.data());
        let mut failure = None;
        let probe = directional_probe(&theta, &grad, &dir, h, |values| {
            loss_at(values).unwrap_or_else(|e| {
                failure = Some(e);
                f64::NAN
            })
        });
        if let Some(e) = failure {
            return Err(e);
        }
        result.push(probe);
    }
    Ok(result)
}

#[cfg(test)]
mod tests;
