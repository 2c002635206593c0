//! Noise schedule, timestep spacing, deterministic DDIM updates, the
//! post-feedback time rules and feedback skip plans.

mod sample;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use sample::{plan_cost, sample, CostReport, ModelKind, SampleOutput, SampleRequest};

/// Linear beta schedule over `T` training steps.
///
/// `alpha_bar` is indexed by timestep with `alpha_bar[0] = 1`; real-valued
/// timesteps interpolate `ln(alpha_bar)` linearly between integer neighbours.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    timesteps: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(timesteps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )));
    }
    let betas: Vec<f64> = (0..timesteps)
        .map(|i| {
            if timesteps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (timesteps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(timesteps + 1);
    alpha_bars.push(1.0);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule {
        timesteps,
        betas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    /// `beta_t` for integer `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// `alpha_bar` at integer timesteps `0..=T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        let max = self.timesteps as f64;
        if !(0.0..=max).contains(&t) {
            return Err(Error::invalid(format!("timestep {t} outside [0, {max}]")));
        }
        let lo = t.floor() as usize;
        let frac = t - lo as f64;
        if frac == 0.0 {
            return Ok(self.alpha_bars[lo]);
        }
        let (a, b) = (self.alpha_bars[lo].ln(), self.alpha_bars[lo + 1].ln());
        Ok((a + frac * (b - a)).exp())
    }

    /// Noised sample `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`, one timestep per batch item.
    pub fn noise_sample(&self, x0: &Tensor, t: &[f64], eps: &Tensor) -> Result<Tensor> {
        if x0.shape() != eps.shape() {
            return Err(Error::shape(
                "noise_sample",
                format!("{:?} vs {:?}", x0.shape(), eps.shape()),
            ));
        }
        let batch = *x0.shape().first().unwrap_or(&0);
        if t.len() != batch {
            return Err(Error::shape(
                "noise_sample",
                format!("{} timesteps for batch {batch}", t.len()),
            ));
        }
        let item = x0.numel() / batch.max(1);
        let mut out = vec![0.0; x0.numel()];
        for (b, &tb) in t.iter().enumerate() {
            let ab = self.alpha_bar(tb)?;
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            for (j, o) in out.iter_mut().enumerate().skip(b * item).take(item) {
                *o = (sa * f64::from(x0.data()[j]) + sn * f64::from(eps.data()[j])) as f32;
            }
        }
        Tensor::new(x0.shape(), out)
    }

    /// Deterministic (eta = 0) DDIM update from `t` to `t_next`, keyed only on
    /// the scheduler timesteps.
    pub fn ddim_step(&self, x_t: &Tensor, eps_hat: &Tensor, t: f64, t_next: f64) -> Result<Tensor> {
        if !(t > t_next && t_next >= 0.0) {
            return Err(Error::invalid(format!(
                "ddim step needs t > t_next >= 0, got {t} -> {t_next}"
            )));
        }
        if x_t.shape() != eps_hat.shape() {
            return Err(Error::shape(
                "ddim_step",
                format!("{:?} vs {:?}", x_t.shape(), eps_hat.shape()),
            ));
        }
        let ab = self.alpha_bar(t)?;
        if ab <= 0.0 {
            return Err(Error::invalid(format!("alpha_bar({t}) is zero")));
        }
        let ab_next = self.alpha_bar(t_next)?;
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (na, nn) = (ab_next.sqrt(), (1.0 - ab_next).sqrt());
        let data = x_t
            .data()
            .iter()
            .zip(eps_hat.data())
            .map(|(&x, &e)| {
                let (x, e) = (f64::from(x), f64::from(e));
                let x0 = (x - sn * e) / sa;
                (na * x0 + nn * e) as f32
            })
            .collect();
        Tensor::new(x_t.shape(), data)
    }
}

/// Trailing-uniform spacing: `t_k = T (S - k + 1) / S` for `k = 1..=S`.
pub fn spacing(steps: usize, timesteps: usize) -> Result<Vec<f64>> {
    if steps < 1 || steps > timesteps {
        return Err(Error::invalid(format!(
            "need 1 <= S <= T, got S={steps}, T={timesteps}"
        )));
    }
    let (s, t) = (steps as f64, timesteps as f64);
    Ok((1..=steps).map(|k| t * (s - k as f64 + 1.0) / s).collect())
}

pub fn t_post_uniform(t: f64, gap: f64) -> f64 {
    t - gap / 2.0
}

/// Loop-size weighted post-feedback time: `t - gap * m / n`.
pub fn t_post_rescaled(t: f64, gap: f64, m: usize, n: usize) -> Result<f64> {
    if m == 0 || m > n {
        return Err(Error::invalid(format!("need 0 < m <= n, got m={m}, n={n}")));
    }
    Ok(t - gap * (m as f64 / n as f64))
}

/// Which loop-size ratio the annealed rule multiplies by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RatioOrientation {
    /// `n / m`, the ratio as printed for the annealed rule.
    #[default]
    NOverM,
    /// `m / n`, matching the rescaled rule.
    MOverN,
}

/// Annealed post-feedback time `t - max(gap * ratio * t / T, 10)`, clamped at 0.
pub fn t_post_annealed(
    t: f64,
    gap: f64,
    m: usize,
    n: usize,
    orientation: RatioOrientation,
    timesteps: usize,
) -> Result<f64> {
    if m == 0 || m > n {
        return Err(Error::invalid(format!("need 0 < m <= n, got m={m}, n={n}")));
    }
    let ratio = match orientation {
        RatioOrientation::NOverM => n as f64 / m as f64,
        RatioOrientation::MOverN => m as f64 / n as f64,
    };
    let shift = (gap * ratio * (t / timesteps as f64)).max(10.0);
    Ok((t - shift).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TPostMode {
    /// Post-feedback computation keeps the step's own timestep.
    Unchanged,
    Uniform,
    #[default]
    Rescaled,
    Annealed,
}

/// Which steps perform feedback. Names follow the skipped region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SkipPreset {
    /// Feedback on every step.
    #[default]
    All,
    /// No feedback at all.
    None,
    /// Skip the inner steps: feedback on the first two and last two.
    SkipInner,
    /// Skip only the first steps: feedback on the last four.
    FirstOnly,
    /// Skip only the last steps: feedback on the first four.
    LastOnly,
    /// Skip the outer two steps at each end: the complement of `SkipInner`.
    OuterOnly,
    /// Feedback on every other step, starting with the first.
    Alternating,
}

impl SkipPreset {
    pub fn flags(self, steps: usize) -> Result<Vec<bool>> {
        let need = |min: usize| {
            if steps < min {
                Err(Error::invalid(format!(
                    "preset {self:?} needs at least {min} steps, got {steps}"
                )))
            } else {
                Ok(())
            }
        };
        let s = steps;
        Ok(match self {
            SkipPreset::All => vec![true; s],
            SkipPreset::None => vec![false; s],
            SkipPreset::SkipInner => {
                need(4)?;
                (0..s).map(|k| k < 2 || k >= s - 2).collect()
            }
            SkipPreset::OuterOnly => {
                need(5)?;
                (0..s).map(|k| !(k < 2 || k >= s - 2)).collect()
            }
            SkipPreset::FirstOnly => {
                need(5)?;
                (0..s).map(|k| k >= s - 4).collect()
            }
            SkipPreset::LastOnly => {
                need(5)?;
                (0..s).map(|k| k < 4).collect()
            }
            SkipPreset::Alternating => {
                need(2)?;
                (0..s).map(|k| k % 2 == 0).collect()
            }
        })
    }
}

/// Inner loop `[start, end]` (inclusive block indices).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopRange {
    pub start: usize,
    pub end: usize,
}

impl LoopRange {
    pub fn new(start: usize, end: usize, n_blocks: usize) -> Result<Self> {
        if start > end {
            return Err(Error::invalid(format!("loop start {start} > loop end {end}")));
        }
        if end >= n_blocks {
            return Err(Error::invalid(format!("loop end {end} outside {n_blocks} blocks")));
        }
        Ok(Self { start, end })
    }

    /// Blocks in the loop, `m = e - b + 1`.
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Ordered sampling steps with per-step feedback flags and the t_post rule.
#[derive(Debug, Clone, PartialEq)]
pub struct InferencePlan {
    pub steps: Vec<f64>,
    pub feedback: Vec<bool>,
    pub tpost_mode: TPostMode,
    pub orientation: RatioOrientation,
    pub loop_range: LoopRange,
    pub n_blocks: usize,
    pub timesteps: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct PlanSpec {
    pub steps: usize,
    pub timesteps: usize,
    pub tpost_mode: TPostMode,
    pub preset: SkipPreset,
    pub orientation: RatioOrientation,
    pub loop_range: LoopRange,
    pub n_blocks: usize,
}

pub fn make_plan(spec: PlanSpec) -> Result<InferencePlan> {
    LoopRange::new(spec.loop_range.start, spec.loop_range.end, spec.n_blocks)?;
    Ok(InferencePlan {
        steps: spacing(spec.steps, spec.timesteps)?,
        feedback: spec.preset.flags(spec.steps)?,
        tpost_mode: spec.tpost_mode,
        orientation: spec.orientation,
        loop_range: spec.loop_range,
        n_blocks: spec.n_blocks,
        timesteps: spec.timesteps,
    })
}

impl InferencePlan {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Timestep after step `k`; zero after the last.
    pub fn next(&self, k: usize) -> f64 {
        self.steps.get(k + 1).copied().unwrap_or(0.0)
    }

    /// Gap `i` to the next scheduled step (`t_S` for the final step).
    pub fn gap(&self, k: usize) -> f64 {
        self.steps[k] - self.next(k)
    }

    pub fn feedback_steps(&self) -> usize {
        self.feedback.iter().filter(|&&f| f).count()
    }

    /// Post-feedback conditioning time for step `k`, clamped to `[0, t]`.
    /// The annealed rule falls back to the rescaled rule on the first step.
    pub fn t_post(&self, k: usize) -> Result<f64> {
        let t = self.steps[k];
        let gap = self.gap(k);
        let (m, n) = (self.loop_range.len(), self.n_blocks);
        let raw = match self.tpost_mode {
            TPostMode::Unchanged => t,
            TPostMode::Uniform => t_post_uniform(t, gap),
            TPostMode::Rescaled => t_post_rescaled(t, gap, m, n)?,
            TPostMode::Annealed if k == 0 => t_post_rescaled(t, gap, m, n)?,
            TPostMode::Annealed => t_post_annealed(t, gap, m, n, self.orientation, self.timesteps)?,
        };
        Ok(raw.clamp(0.0, t))
    }

    pub fn without_feedback(&self) -> Self {
        Self {
            feedback: vec![false; self.steps.len()],
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests;
