use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

use super::{params, params_mut};

const MAX_PERIOD: f64 = 10_000.0;

/// Interleaved sinusoidal features of a real-valued timestep:
/// `[sin(t f_0), cos(t f_0), sin(t f_1), cos(t f_1), ...]` with
/// `f_k = 10000^(-k / (dim / 2))`.
pub fn timestep_features(t: f64, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = MAX_PERIOD.powf(-(k as f64) / half as f64);
        let arg = t * freq;
        out[2 * k] = arg.sin() as f32;
        out[2 * k + 1] = arg.cos() as f32;
    }
    out
}

/// Time MLP over sinusoidal features plus a learned class table whose last
/// row is the null (unconditional) class.
#[derive(Debug, Clone)]
pub struct ConditionEmbedding {
    pub time_w1: Tensor,
    pub time_b1: Tensor,
    pub time_w2: Tensor,
    pub time_b2: Tensor,
    pub class_table: Tensor,
}

impl ConditionEmbedding {
    pub fn new<R: Rng + ?Sized>(d: usize, n_classes: usize, rng: &mut R) -> Self {
        Self {
            time_w1: Tensor::randn(&[d, d], 0.02, rng).into_param(),
            time_b1: Tensor::zeros(&[d]).into_param(),
            time_w2: Tensor::randn(&[d, d], 0.02, rng).into_param(),
            time_b2: Tensor::zeros(&[d]).into_param(),
            class_table: Tensor::randn(&[n_classes + 1, d], 0.02, rng).into_param(),
        }
    }

    pub fn null_class(&self) -> usize {
        self.class_table.shape()[0] - 1
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        params!(self, [time_w1, time_b1, time_w2, time_b2, class_table])
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        params_mut!(self, [time_w1, time_b1, time_w2, time_b2, class_table])
    }

    /// `[batch, d]` condition vectors for per-sample timesteps and classes.
    pub fn forward_on<'p>(&'p self, tape: &mut Tape<'p>, t: &[f64], classes: &[usize]) -> Result<Var> {
        if t.len() != classes.len() {
            return Err(Error::shape(
                "embed_condition",
                format!("{} timesteps for {} classes", t.len(), classes.len()),
            ));
        }
        if let Some(&c) = classes.iter().find(|&&c| c > self.null_class()) {
            return Err(Error::invalid(format!(
                "class {c} out of range [0, {}]",
                self.null_class()
            )));
        }
        let d = self.time_b1.numel();
        let feats: Vec<f32> = t.iter().flat_map(|&ti| timestep_features(ti, d)).collect();
        let x = tape.constant(Tensor::new(&[t.len(), d], feats)?);
        let (w, b) = (tape.param(&self.time_w1), tape.param(&self.time_b1));
        let x = tape.linear(x, w, Some(b))?;
        let x = tape.silu(x);
        let (w, b) = (tape.param(&self.time_w2), tape.param(&self.time_b2));
        let time = tape.linear(x, w, Some(b))?;
        let table = tape.param(&self.class_table);
        let class = tape.gather_rows(table, classes)?;
        tape.add(time, class)
    }
}
