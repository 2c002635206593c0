//! Standard epsilon-prediction pretraining for the backbone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Tape, Tensor};
use crate::schedule::NoiseSchedule;

use super::{patchify_pixels, Backbone};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub lr: f32,
    pub iterations: usize,
    /// Probability of replacing a label with the null class.
    pub class_dropout: f64,
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-3,
            iterations: 3000,
            class_dropout: 0.1,
            checkpoint_every: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, message: &str| {
            Err(Error::Config {
                path: format!("backbone_train.{path}"),
                message: message.to_string(),
            })
        };
        if self.batch_size == 0 {
            return fail("batch_size", "must be >= 1");
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return fail("lr", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.class_dropout) {
            return fail("class_dropout", "must be within [0, 1]");
        }
        Ok(())
    }
}

/// One Adam step on the noise-prediction MSE. Returns the loss.
pub fn pretrain_step<R: Rng + ?Sized>(
    backbone: &mut Backbone,
    adam: &mut AdamState,
    ns: &NoiseSchedule,
    x0: &Tensor,
    labels: &[usize],
    class_dropout: f64,
    rng: &mut R,
) -> Result<f32> {
    let batch = labels.len();
    let null = backbone.null_class();
    let classes: Vec<usize> = labels
        .iter()
        .map(|&c| if rng.gen_bool(class_dropout) { null } else { c })
        .collect();
    let t: Vec<f64> = (0..batch).map(|_| rng.gen_range(1..=ns.timesteps()) as f64).collect();
    let eps = Tensor::randn(x0.shape(), 1.0, rng);
    let x_t = ns.noise_sample(x0, &t, &eps)?;
    let target = patchify_pixels(&eps, backbone.config.patch_size)?;
    let (loss, grads) = {
        let mut tape = Tape::new();
        let (pred, _) = backbone.forward_on(&mut tape, &x_t, &t, &classes)?;
        let target = tape.constant(target);
        let loss = tape.mse(pred, target)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("backbone loss {value}")));
        }
        tape.backward(loss)?;
        let grads: Vec<Option<Vec<f32>>> = backbone
            .named_params()
            .iter()
            .map(|(_, p)| tape.grad_of(p).map(<[f32]>::to_vec))
            .collect();
        (value, grads)
    };
    let mut params: Vec<&mut Tensor> = backbone.named_params_mut().into_iter().map(|(_, p)| p).collect();
    for (p, g) in params.iter_mut().zip(grads) {
        p.grad = g;
    }
    adam.step(&mut params)?;
    Ok(loss)
}

/// Trains for `cfg.iterations` steps, calling `on_step(step, backbone)` after
/// each (1-based). Returns the loss curve.
pub fn pretrain<R, F>(
    backbone: &mut Backbone,
    ns: &NoiseSchedule,
    dataset: &Dataset,
    cfg: &PretrainConfig,
    rng: &mut R,
    mut on_step: F,
) -> Result<Vec<f32>>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &Backbone) -> Result<()>,
{
    cfg.validate()?;
    let mut curve = Vec::with_capacity(cfg.iterations);
    if cfg.iterations == 0 {
        return Ok(curve);
    }
    backbone.set_trainable(true);
    let mut adam = AdamState::new(cfg.lr);
    let mut stream = BatchStream::new(dataset, cfg.batch_size, rng)?;
    for step in 1..=cfg.iterations {
        let (x0, labels) = stream.next_batch(rng);
        curve.push(pretrain_step(
            backbone,
            &mut adam,
            ns,
            &x0,
            &labels,
            cfg.class_dropout,
            rng,
        )?);
        on_step(step, backbone)?;
    }
    Ok(curve)
}
