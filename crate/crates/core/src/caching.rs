//! Training-free block caching: on refresh steps a cached block runs in full
//! and stores its gated attention and MLP contributions; on the other steps
//! those stored contributions are added to the fresh input instead.

use serde::{Deserialize, Serialize};

use crate::backbone::{unpatchify, Backbone, FeatureTap};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePreset {
    First,
    Last,
    Outer,
    Inner,
    Alternating,
}

/// Block indices cached by `preset` when caching `c` of `n` blocks, ascending.
pub fn location_preset(preset: CachePreset, c: usize, n: usize) -> Result<Vec<usize>> {
    if c > n {
        return Err(Error::invalid(format!("cannot cache {c} of {n} blocks")));
    }
    Ok(match preset {
        CachePreset::First => (0..c).collect(),
        CachePreset::Last => (n - c..n).collect(),
        CachePreset::Inner => {
            let offset = (n - c) / 2;
            (offset..offset + c).collect()
        }
        CachePreset::Outer => {
            let front = c / 2;
            (0..front).chain(n - (c - front)..n).collect()
        }
        CachePreset::Alternating => (0..c).map(|k| k * n / c).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub cached_blocks: Vec<usize>,
    /// Cached blocks recompute on steps where `step % refresh_period == 0`.
    pub refresh_period: usize,
}

impl CacheConfig {
    pub fn from_preset(preset: CachePreset, c: usize, n: usize, refresh_period: usize) -> Result<Self> {
        let cfg = Self {
            cached_blocks: location_preset(preset, c, n)?,
            refresh_period,
        };
        cfg.validate(n)?;
        Ok(cfg)
    }

    pub fn validate(&self, n_blocks: usize) -> Result<()> {
        if self.refresh_period == 0 {
            return Err(Error::invalid("refresh period must be >= 1"));
        }
        if let Some(&b) = self.cached_blocks.iter().find(|&&b| b >= n_blocks) {
            return Err(Error::invalid(format!("cached block {b} outside {n_blocks} blocks")));
        }
        let mut sorted = self.cached_blocks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.cached_blocks.len() {
            return Err(Error::invalid("cached blocks contain duplicates"));
        }
        Ok(())
    }

    pub fn is_refresh(&self, step: usize) -> bool {
        step.is_multiple_of(self.refresh_period)
    }

    pub fn refresh_steps(&self, steps: usize) -> usize {
        (0..steps).filter(|&k| self.is_refresh(k)).count()
    }

    /// Closed-form block forwards: `(n - c) S + c * #refresh`.
    pub fn cost(&self, n_blocks: usize, steps: usize) -> usize {
        let c = self.cached_blocks.len();
        (n_blocks - c) * steps + c * self.refresh_steps(steps)
    }

    fn is_cached(&self, idx: usize) -> bool {
        self.cached_blocks.contains(&idx)
    }
}

/// Stored gated branch outputs per block, valid after that block's last refresh.
#[derive(Debug, Clone, Default)]
pub struct CacheStore {
    entries: Vec<Option<(Tensor, Tensor)>>,
}

impl CacheStore {
    pub fn new(n_blocks: usize) -> Self {
        Self {
            entries: vec![None; n_blocks],
        }
    }

    pub fn is_valid(&self, idx: usize) -> bool {
        matches!(self.entries.get(idx), Some(Some(_)))
    }

    pub fn invalidate(&mut self) {
        self.entries.iter_mut().for_each(|e| *e = None);
    }

    fn get(&self, idx: usize, rows: usize) -> Result<&(Tensor, Tensor)> {
        match self.entries.get(idx) {
            Some(Some(entry)) if entry.0.rows() == rows => Ok(entry),
            Some(Some(_)) => Err(Error::invalid(format!(
                "cache entry for block {idx} has a different batch shape"
            ))),
            _ => Err(Error::invalid(format!(
                "cache hit on block {idx} without a stored entry"
            ))),
        }
    }

    fn put(&mut self, idx: usize, attn: Tensor, mlp: Tensor) {
        if idx >= self.entries.len() {
            self.entries.resize(idx + 1, None);
        }
        self.entries[idx] = Some((attn, mlp));
    }
}

/// Runs block `idx` in full (`refresh`) or from the store. Returns the block
/// output and the block forwards spent (1 or 0).
pub fn cached_run_block(
    backbone: &Backbone,
    idx: usize,
    h: &Tensor,
    cond: &Tensor,
    store: &mut CacheStore,
    refresh: bool,
) -> Result<(Tensor, usize)> {
    if refresh {
        let (out, attn, mlp) = backbone.run_block_parts(idx, h, cond)?;
        store.put(idx, attn, mlp);
        return Ok((out, 1));
    }
    let (attn, mlp) = store.get(idx, h.rows())?;
    if attn.shape() != h.shape() {
        return Err(Error::shape(
            "cached_run_block",
            format!("{:?} vs {:?}", h.shape(), attn.shape()),
        ));
    }
    let data = h
        .data()
        .iter()
        .zip(attn.data())
        .zip(mlp.data())
        .map(|((&x, &a), &m)| (x + a) + m)
        .collect();
    Ok((Tensor::new(h.shape(), data)?, 0))
}

/// One denoiser evaluation with caching. Uncached blocks always run in full.
/// Returns `[b, c, h, w]` noise, the block forwards spent and optional taps.
#[allow(clippy::too_many_arguments)]
pub fn cached_forward(
    backbone: &Backbone,
    x_t: &Tensor,
    t: &[f64],
    classes: &[usize],
    cfg: &CacheConfig,
    store: &mut CacheStore,
    refresh: bool,
    tap: bool,
) -> Result<(Tensor, usize, Option<FeatureTap>)> {
    let mut tape = Tape::no_grad();
    let cond = backbone.condition_on(&mut tape, t, classes)?;
    let mut h = backbone.embed_tokens_on(&mut tape, x_t)?;
    let mut count = 0;
    let mut taps = Vec::new();
    for i in 0..backbone.n_blocks() {
        if cfg.is_cached(i) && !refresh {
            let (attn, mlp) = store.get(i, tape.value(h).rows())?;
            let (a, m) = (tape.constant(attn.clone()), tape.constant(mlp.clone()));
            let h1 = tape.add(h, a)?;
            h = tape.add(h1, m)?;
        } else {
            let o = backbone.block_on(&mut tape, i, h, cond)?;
            if cfg.is_cached(i) {
                store.put(i, tape.value(o.attn).clone(), tape.value(o.mlp).clone());
            }
            h = o.out;
            count += 1;
        }
        if tap {
            taps.push(tape.value(h).clone());
        }
    }
    let eps = backbone.final_layer_on(&mut tape, h, cond)?;
    let c = &backbone.config;
    let eps = unpatchify(tape.value(eps), c.channels, c.image_size, c.patch_size)?;
    let tap = tap.then(|| FeatureTap {
        features: taps,
        tokens: c.tokens(),
    });
    Ok((eps, count, tap))
}
