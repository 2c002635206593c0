use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeatureTap};
use crate::caching::{cached_forward, CacheConfig, CacheStore};
use crate::error::{Error, Result};
use crate::ilf::{ilf_forward, FeedbackState};
use crate::numerics::Tensor;

use super::{InferencePlan, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Baseline,
    Ilf,
    Cached,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::Ilf => "ilf",
            ModelKind::Cached => "cached",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SampleRequest<'a> {
    pub kind: ModelKind,
    pub backbone: &'a Backbone,
    pub schedule: &'a NoiseSchedule,
    pub plan: &'a InferencePlan,
    pub feedback: Option<&'a FeedbackState>,
    pub cache: Option<&'a CacheConfig>,
    /// One class per generated image.
    pub classes: &'a [usize],
    /// Seeds the initial noise.
    pub seed: u64,
    /// Record per-block features at every step.
    pub tap: bool,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// `[b, c, h, w]` final images.
    pub images: Tensor,
    pub block_forwards: usize,
    /// Per-step features when requested.
    pub taps: Vec<FeatureTap>,
    /// `(t, t_next)` of every DDIM update, in order.
    pub ddim_calls: Vec<(f64, f64)>,
    /// `t_post` used at each step, `None` where no feedback ran.
    pub t_posts: Vec<Option<f64>>,
    pub wall_ms: f64,
}

/// One row of the cost report. For cached runs `m` counts cached blocks and
/// `feedback_steps` counts refresh steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub kind: ModelKind,
    #[serde(rename = "S")]
    pub steps: usize,
    pub n: usize,
    pub m: usize,
    pub feedback_steps: usize,
    pub block_forwards: usize,
    pub wall_ms: f64,
    pub seed: u64,
}

impl CostReport {
    pub fn new(req: &SampleRequest<'_>, out: &SampleOutput) -> Self {
        let (m, feedback_steps) =
            shape_columns(req.kind, req.plan, req.feedback.map(|f| f.loop_range.len()), req.cache);
        Self {
            kind: req.kind,
            steps: req.plan.len(),
            n: req.plan.n_blocks,
            m,
            feedback_steps,
            block_forwards: out.block_forwards,
            wall_ms: out.wall_ms,
            seed: req.seed,
        }
    }
}

fn shape_columns(
    kind: ModelKind,
    plan: &InferencePlan,
    m: Option<usize>,
    cache: Option<&CacheConfig>,
) -> (usize, usize) {
    match kind {
        ModelKind::Baseline => (0, 0),
        ModelKind::Ilf => (m.unwrap_or(plan.loop_range.len()), plan.feedback_steps()),
        ModelKind::Cached => cache.map_or((0, 0), |c| (c.cached_blocks.len(), c.refresh_steps(plan.len()))),
    }
}

/// Block forwards a run of `kind` would spend, without evaluating any model.
pub fn plan_cost(kind: ModelKind, plan: &InferencePlan, cache: Option<&CacheConfig>) -> Result<usize> {
    let n = plan.n_blocks;
    let s = plan.len();
    match kind {
        ModelKind::Baseline => Ok(n * s),
        ModelKind::Ilf => Ok(n * s + (plan.loop_range.len() + 1) * plan.feedback_steps()),
        ModelKind::Cached => {
            let cache = cache.ok_or_else(|| Error::invalid("cached cost needs a cache config"))?;
            cache.validate(n)?;
            Ok(cache.cost(n, s))
        }
    }
}

fn validate(req: &SampleRequest<'_>) -> Result<()> {
    let n = req.backbone.n_blocks();
    if req.plan.n_blocks != n {
        return Err(Error::invalid(format!(
            "plan built for {} blocks, backbone has {n}",
            req.plan.n_blocks
        )));
    }
    if req.plan.timesteps != req.schedule.timesteps() {
        return Err(Error::invalid(format!(
            "plan uses T={}, schedule has T={}",
            req.plan.timesteps,
            req.schedule.timesteps()
        )));
    }
    if req.classes.is_empty() {
        return Err(Error::invalid("no classes requested"));
    }
    match req.kind {
        ModelKind::Baseline => {}
        ModelKind::Ilf => {
            let fs = req
                .feedback
                .ok_or_else(|| Error::invalid("ilf sampling needs a feedback state"))?;
            if fs.loop_range != req.plan.loop_range {
                return Err(Error::invalid(format!(
                    "feedback trained for loop {:?}, plan uses {:?}",
                    fs.loop_range, req.plan.loop_range
                )));
            }
        }
        ModelKind::Cached => {
            req.cache
                .ok_or_else(|| Error::invalid("cached sampling needs a cache config"))?
                .validate(n)?;
            if req.plan.feedback_steps() > 0 {
                return Err(Error::invalid("cached sampling plan must not request feedback"));
            }
        }
    }
    Ok(())
}

/// Deterministic DDIM sampling from seeded Gaussian noise.
///
/// The DDIM update always uses the plan's `(t, t_next)`; `t_post` only
/// conditions the computation after the feedback block.
pub fn sample(req: &SampleRequest<'_>) -> Result<SampleOutput> {
    validate(req)?;
    let start = Instant::now();
    let backbone = req.backbone;
    let plan = req.plan;
    let batch = req.classes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut x = Tensor::randn(&backbone.config.image_shape(batch), 1.0, &mut rng);
    let mut store = CacheStore::new(backbone.n_blocks());
    let mut out = SampleOutput {
        images: Tensor::zeros(&[0]),
        block_forwards: 0,
        taps: Vec::new(),
        ddim_calls: Vec::with_capacity(plan.len()),
        t_posts: Vec::with_capacity(plan.len()),
        wall_ms: 0.0,
    };
    for k in 0..plan.len() {
        let t = plan.steps[k];
        let t_next = plan.next(k);
        let tv = vec![t; batch];
        let feedback = req.kind == ModelKind::Ilf && plan.feedback[k];
        let (eps, tap) = match (req.kind, req.feedback, req.cache) {
            (ModelKind::Ilf, Some(fs), _) if feedback => {
                let t_post = plan.t_post(k)?;
                let (eps, count) = ilf_forward(backbone, fs, &x, &tv, &vec![t_post; batch], req.classes)?;
                out.block_forwards += count;
                out.t_posts.push(Some(t_post));
                (eps, None)
            }
            (ModelKind::Cached, _, Some(cache)) => {
                let (eps, count, tap) = cached_forward(
                    backbone,
                    &x,
                    &tv,
                    req.classes,
                    cache,
                    &mut store,
                    cache.is_refresh(k),
                    req.tap,
                )?;
                out.block_forwards += count;
                out.t_posts.push(None);
                (eps, tap)
            }
            _ => {
                let (eps, tap) = backbone.forward(&x, &tv, req.classes, req.tap)?;
                out.block_forwards += backbone.n_blocks();
                out.t_posts.push(None);
                (eps, tap)
            }
        };
        if let Some(tap) = tap {
            out.taps.push(tap);
        }
        eps.check_finite("noise prediction")?;
        x = req.schedule.ddim_step(&x, &eps, t, t_next)?;
        out.ddim_calls.push((t, t_next));
    }
    out.images = x;
    out.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(out)
}
