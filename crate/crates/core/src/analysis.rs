//! Diagnostics: feature drift over time and over depth, a toy sample-quality
//! metric, and block-forward / wall-clock benchmarking.

use serde::Serialize;

use crate::backbone::{Backbone, FeatureTap};
use crate::caching::CacheConfig;
use crate::error::{Error, Result};
use crate::ilf::FeedbackState;
use crate::numerics::Tensor;
use crate::schedule::{plan_cost, sample, InferencePlan, ModelKind, NoiseSchedule, SampleRequest};

/// `values[b][k]`: drift of block `b` at plan step `k`, divided by `norm`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftMatrix {
    pub values: Vec<Vec<f64>>,
    pub timesteps: Vec<f64>,
    /// Divisor applied to the raw L2 distances; 1 when every distance is 0.
    pub norm: f64,
}

impl DriftMatrix {
    pub fn n_blocks(&self) -> usize {
        self.values.len()
    }

    pub fn n_steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().flatten().copied().fold(0.0, f64::max)
    }
}

fn l2_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("drift", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

fn check_taps(taps: &[FeatureTap]) -> Result<usize> {
    if taps.len() < 2 {
        return Err(Error::invalid(format!(
            "drift needs at least 2 tapped steps, got {}",
            taps.len()
        )));
    }
    let n = taps[0].features.len();
    if n == 0 || taps.iter().any(|t| t.features.len() != n) {
        return Err(Error::invalid("tapped steps disagree on block count"));
    }
    Ok(n)
}

/// Unnormalized `||f_{b,t_k} - f_{b,t_1}||_2` as `[block][step]`.
pub fn raw_drift_over_time(taps: &[FeatureTap]) -> Result<Vec<Vec<f64>>> {
    let n = check_taps(taps)?;
    (0..n)
        .map(|b| {
            taps.iter()
                .map(|t| l2_diff(&t.features[b], &taps[0].features[b]))
                .collect()
        })
        .collect()
}

/// Unnormalized `||f_{b,t_k} - f_{0,t_k}||_2` as `[block][step]`.
pub fn raw_drift_over_blocks(taps: &[FeatureTap]) -> Result<Vec<Vec<f64>>> {
    let n = check_taps(taps)?;
    (0..n)
        .map(|b| taps.iter().map(|t| l2_diff(&t.features[b], &t.features[0])).collect())
        .collect()
}

/// Divides both matrices by the largest entry of either.
pub fn normalize_jointly(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, timesteps: &[f64]) -> Result<(DriftMatrix, DriftMatrix)> {
    let dims = |m: &Vec<Vec<f64>>| (m.len(), m.first().map_or(0, Vec::len));
    if dims(&a) != dims(&b) || dims(&a).1 != timesteps.len() {
        return Err(Error::shape(
            "drift",
            format!("{:?} vs {:?} for {} steps", dims(&a), dims(&b), timesteps.len()),
        ));
    }
    let max = a.iter().chain(&b).flatten().copied().fold(0.0, f64::max);
    let norm = if max > 0.0 { max } else { 1.0 };
    let scale = |m: Vec<Vec<f64>>| DriftMatrix {
        values: m
            .into_iter()
            .map(|row| row.into_iter().map(|v| v / norm).collect())
            .collect(),
        timesteps: timesteps.to_vec(),
        norm,
    };
    Ok((scale(a), scale(b)))
}

/// Drift over time for a pair of runs, jointly normalized.
pub fn drift_over_time(a: &[FeatureTap], b: &[FeatureTap], timesteps: &[f64]) -> Result<(DriftMatrix, DriftMatrix)> {
    normalize_jointly(raw_drift_over_time(a)?, raw_drift_over_time(b)?, timesteps)
}

/// Drift over blocks for a pair of runs, jointly normalized.
pub fn drift_over_blocks(a: &[FeatureTap], b: &[FeatureTap], timesteps: &[f64]) -> Result<(DriftMatrix, DriftMatrix)> {
    normalize_jointly(raw_drift_over_blocks(a)?, raw_drift_over_blocks(b)?, timesteps)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    pub baseline_mean: f64,
    pub cached_mean: f64,
    /// `cached_mean / baseline_mean`; absent when the baseline mean is zero.
    pub ratio: Option<f64>,
    pub degenerate: bool,
    pub blocks: Vec<usize>,
    pub steps: Vec<usize>,
}

/// Mean drift over time across the cached blocks and cache-hit steps. With no
/// cached blocks or no hit steps, all blocks or all steps are averaged instead.
pub fn compare_drift(baseline: &DriftMatrix, cached: &DriftMatrix, cache: &CacheConfig) -> Result<DriftReport> {
    if baseline.n_blocks() != cached.n_blocks() || baseline.n_steps() != cached.n_steps() {
        return Err(Error::shape(
            "compare_drift",
            format!(
                "{}x{} vs {}x{}",
                baseline.n_blocks(),
                baseline.n_steps(),
                cached.n_blocks(),
                cached.n_steps()
            ),
        ));
    }
    cache.validate(baseline.n_blocks())?;
    let mut blocks = cache.cached_blocks.clone();
    blocks.sort_unstable();
    if blocks.is_empty() {
        blocks = (0..baseline.n_blocks()).collect();
    }
    let mut steps: Vec<usize> = (0..baseline.n_steps()).filter(|&k| !cache.is_refresh(k)).collect();
    if steps.is_empty() {
        steps = (0..baseline.n_steps()).collect();
    }
    let mean = |m: &DriftMatrix| {
        let total: f64 = blocks
            .iter()
            .flat_map(|&b| steps.iter().map(move |&k| m.values[b][k]))
            .sum();
        total / (blocks.len() * steps.len()) as f64
    };
    let (baseline_mean, cached_mean) = (mean(baseline), mean(cached));
    let degenerate = baseline_mean == 0.0;
    Ok(DriftReport {
        baseline_mean,
        cached_mean,
        ratio: (!degenerate).then(|| cached_mean / baseline_mean),
        degenerate,
        blocks,
        steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QualityReport {
    /// Biased RBF-kernel MMD^2.
    pub mmd: f64,
    /// Mean over shared classes of the L2 distance between class-mean images.
    pub class_mean_error: f64,
    pub n_samples: usize,
}

fn rows(t: &Tensor) -> Result<(usize, usize)> {
    let n = *t.shape().first().unwrap_or(&0);
    if n == 0 || t.numel() == 0 {
        return Err(Error::invalid("quality needs non-empty sample sets"));
    }
    Ok((n, t.numel() / n))
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

/// Median of the nonzero pairwise distances over the pooled sets, or 1 if
/// every point coincides.
pub fn median_bandwidth(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (nx, p) = rows(x)?;
    let (ny, q) = rows(y)?;
    if p != q {
        return Err(Error::shape("mmd", format!("item sizes {p} vs {q}")));
    }
    let pooled: Vec<&[f32]> = x.data().chunks(p).chain(y.data().chunks(p)).collect();
    let mut dists = Vec::with_capacity((nx + ny) * (nx + ny - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            let d = sq_dist(pooled[i], pooled[j]).sqrt();
            if d > 0.0 {
                dists.push(d);
            }
        }
    }
    if dists.is_empty() {
        return Ok(1.0);
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    Ok(if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    })
}

/// Biased MMD^2 with kernel `exp(-d^2 / (2 sigma^2))`.
pub fn mmd2(x: &Tensor, y: &Tensor, sigma: f64) -> Result<f64> {
    let (_, p) = rows(x)?;
    let (_, q) = rows(y)?;
    if p != q {
        return Err(Error::shape("mmd", format!("item sizes {p} vs {q}")));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::invalid(format!("bandwidth must be positive, got {sigma}")));
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let mean_k = |a: &Tensor, b: &Tensor| {
        let mut total = 0.0;
        for u in a.data().chunks(p) {
            for v in b.data().chunks(p) {
                total += (-gamma * sq_dist(u, v)).exp();
            }
        }
        total / (a.rows() * b.rows()) as f64
    };
    Ok((mean_k(x, x) + mean_k(y, y) - 2.0 * mean_k(x, y)).max(0.0))
}

/// Class-conditional toy quality of `samples` against `reference`.
pub fn toy_quality(
    samples: &Tensor,
    sample_labels: &[usize],
    reference: &Tensor,
    reference_labels: &[usize],
) -> Result<QualityReport> {
    let (ns, p) = rows(samples)?;
    let (nr, q) = rows(reference)?;
    if p != q {
        return Err(Error::shape("toy_quality", format!("item sizes {p} vs {q}")));
    }
    if sample_labels.len() != ns || reference_labels.len() != nr {
        return Err(Error::shape("toy_quality", "label count differs from item count"));
    }
    let sigma = median_bandwidth(samples, reference)?;
    let mmd = mmd2(samples, reference, sigma)?;

    let class_means = |t: &Tensor, labels: &[usize]| {
        let mut sums: std::collections::BTreeMap<usize, (Vec<f64>, usize)> = Default::default();
        for (item, &c) in t.data().chunks(p).zip(labels) {
            let e = sums.entry(c).or_insert_with(|| (vec![0.0; p], 0));
            for (s, &v) in e.0.iter_mut().zip(item) {
                *s += f64::from(v);
            }
            e.1 += 1;
        }
        sums.into_iter()
            .map(|(c, (s, n))| (c, s.into_iter().map(|v| v / n as f64).collect::<Vec<_>>()))
            .collect::<std::collections::BTreeMap<_, _>>()
    };
    let (ms, mr) = (
        class_means(samples, sample_labels),
        class_means(reference, reference_labels),
    );
    let errors: Vec<f64> = ms
        .iter()
        .filter_map(|(c, a)| {
            mr.get(c)
                .map(|b| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        })
        .collect();
    if errors.is_empty() {
        return Err(Error::invalid("samples and reference share no class"));
    }
    Ok(QualityReport {
        mmd,
        class_mean_error: errors.iter().sum::<f64>() / errors.len() as f64,
        n_samples: ns,
    })
}

/// One grid entry of a benchmark.
#[derive(Debug, Clone)]
pub struct BenchEntry {
    pub label: String,
    pub kind: ModelKind,
    pub plan: InferencePlan,
    pub cache: Option<CacheConfig>,
}

/// Trained artifacts for timed runs; absent in mock-cost mode.
#[derive(Debug, Clone, Copy)]
pub struct BenchModels<'a> {
    pub backbone: &'a Backbone,
    pub schedule: &'a NoiseSchedule,
    pub feedback: Option<&'a FeedbackState>,
    pub classes: &'a [usize],
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub kind: ModelKind,
    pub config: String,
    pub block_forwards: usize,
    pub wall_ms: f64,
    /// Block-forward speedup over the reference (first baseline) entry.
    pub speedup: f64,
    pub seed: u64,
}

/// Runs the grid sequentially. Without `models` the block-forward column
/// comes from the closed-form cost and `wall_ms` is 0. With models, each
/// entry is sampled `repeats` times and the median wall time is reported.
pub fn bench(entries: &[BenchEntry], models: Option<BenchModels<'_>>, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(entries.len());
    for e in entries {
        let (block_forwards, wall_ms) = match models {
            None => (plan_cost(e.kind, &e.plan, e.cache.as_ref())?, 0.0),
            Some(m) => {
                let req = SampleRequest {
                    kind: e.kind,
                    backbone: m.backbone,
                    schedule: m.schedule,
                    plan: &e.plan,
                    feedback: m.feedback,
                    cache: e.cache.as_ref(),
                    classes: m.classes,
                    seed,
                    tap: false,
                };
                let mut times = Vec::with_capacity(m.repeats.max(1));
                let mut count = 0;
                for _ in 0..m.repeats.max(1) {
                    let out = sample(&req)?;
                    count = out.block_forwards;
                    times.push(out.wall_ms);
                }
                times.sort_by(f64::total_cmp);
                (count, times[times.len() / 2])
            }
        };
        rows.push(BenchRow {
            kind: e.kind,
            config: e.label.clone(),
            block_forwards,
            wall_ms,
            speedup: 0.0,
            seed,
        });
    }
    let reference = rows
        .iter()
        .find(|r| r.kind == ModelKind::Baseline)
        .or(rows.first())
        .map(|r| r.block_forwards);
    if let Some(base) = reference {
        for r in &mut rows {
            r.speedup = base as f64 / r.block_forwards as f64;
        }
    }
    Ok(rows)
}
