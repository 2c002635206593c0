//! The four run commands. Each reads a [`RunConfig`] file and writes its
//! outputs deterministically; only `wall_ms` columns vary between reruns.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::{
    bench, compare_drift, drift_over_blocks, drift_over_time, BenchEntry, BenchModels, BenchRow, DriftReport,
};
use crate::backbone::train::pretrain;
use crate::backbone::Backbone;
use crate::checkpoint::{load_backbone, load_feedback, save_backbone, save_feedback};
use crate::config::{BenchKind, DataSource, RunConfig};
use crate::data::{gen_shapes, load_idx, Dataset};
use crate::error::{Error, Result};
use crate::ilf::{self, FeedbackState, LossComponents};
use crate::io::{write_csv, write_drift_csv, write_heatmap, write_images, write_json};
use crate::schedule::{make_schedule, sample, CostReport, InferencePlan, ModelKind, NoiseSchedule, SampleRequest};

pub const BACKBONE_FILE: &str = "backbone.ckpt";
pub const FEEDBACK_FILE: &str = "feedback.ckpt";
pub const BACKBONE_LOSS_FILE: &str = "backbone_loss.csv";
pub const FEEDBACK_LOSS_FILE: &str = "feedback_loss.csv";
pub const COST_FILE: &str = "cost.csv";
pub const BENCH_FILE: &str = "bench.csv";

/// Independent random streams derived from the global seed.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    BackboneInit = 0,
    BackboneTrain = 1,
    FeedbackInit = 2,
    FeedbackTrain = 3,
}

pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let b = &cfg.backbone;
    if b.channels != 1 {
        return Err(Error::Config {
            path: "backbone.channels".into(),
            message: "the toy datasets are single-channel".into(),
        });
    }
    match cfg.data.source {
        DataSource::Shapes => gen_shapes(cfg.data.seed, cfg.data.n_per_class, b.n_classes, b.image_size),
        DataSource::Idx => {
            let (Some(images), Some(labels)) = (&cfg.data.idx_images, &cfg.data.idx_labels) else {
                return Err(Error::Config {
                    path: "data.idx_images".into(),
                    message: "idx source needs idx_images and idx_labels".into(),
                });
            };
            load_idx(images, labels, b.image_size, b.n_classes)
        }
    }
}

pub fn schedule_for(cfg: &RunConfig) -> Result<NoiseSchedule> {
    make_schedule(cfg.backbone.timesteps, cfg.backbone.beta_min, cfg.backbone.beta_max)
}

pub fn backbone_path(cfg: &RunConfig) -> PathBuf {
    cfg.backbone_checkpoint
        .clone()
        .unwrap_or_else(|| cfg.run_dir.join(BACKBONE_FILE))
}

pub fn feedback_path(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir.join(FEEDBACK_FILE)
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "missing checkpoint {} (run `train` first)",
            path.display()
        )))
    }
}

/// Frozen backbone from the configured checkpoint.
pub fn load_trained_backbone(cfg: &RunConfig) -> Result<Backbone> {
    let path = backbone_path(cfg);
    require(&path)?;
    load_backbone(&path, &cfg.backbone)
}

/// Feedback state, verified against the backbone it was trained on.
pub fn load_trained_feedback(cfg: &RunConfig, backbone: &Backbone) -> Result<FeedbackState> {
    let path = feedback_path(cfg);
    require(&path)?;
    load_feedback(&path, backbone, cfg.loop_range())
}

fn meta(kind: &str, step: usize) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("kind".to_string(), kind.to_string()),
        ("step".to_string(), step.to_string()),
    ])
}

#[derive(Debug, Serialize)]
struct BackboneLossRow {
    step: usize,
    loss: f32,
}

#[derive(Debug, Serialize)]
struct FeedbackLossRow {
    step: usize,
    recon: f32,
    distill: f32,
    total: f32,
}

fn write_with_header<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub backbone_checkpoint: PathBuf,
    pub feedback_checkpoint: PathBuf,
    /// Empty when the backbone was loaded rather than trained.
    pub backbone_curve: Vec<f32>,
    pub feedback_curve: Vec<LossComponents>,
}

/// Pretrains (or loads) the backbone, then trains the feedback module with
/// the backbone frozen. Writes checkpoints and loss curves into `run_dir`.
pub fn cmd_train(config_path: &Path) -> Result<TrainSummary> {
    let cfg = RunConfig::load(config_path)?;
    train_with(&cfg)
}

pub fn train_with(cfg: &RunConfig) -> Result<TrainSummary> {
    let dataset = load_dataset(cfg)?;
    let ns = schedule_for(cfg)?;
    let run_dir = &cfg.run_dir;

    let (mut backbone, backbone_curve) = match &cfg.backbone_checkpoint {
        Some(path) => (load_backbone(path, &cfg.backbone)?, Vec::new()),
        None => {
            let mut backbone = Backbone::new(cfg.backbone.clone(), &mut rng_for(cfg.seed, Stream::BackboneInit))?;
            let every = cfg.backbone_train.checkpoint_every;
            let curve = pretrain(
                &mut backbone,
                &ns,
                &dataset,
                &cfg.backbone_train,
                &mut rng_for(cfg.seed, Stream::BackboneTrain),
                |step, bb| {
                    if every > 0 && step % every == 0 {
                        save_backbone(
                            &run_dir.join(format!("backbone_step{step:06}.ckpt")),
                            bb,
                            meta("backbone", step),
                        )?;
                    }
                    Ok(())
                },
            )?;
            save_backbone(&run_dir.join(BACKBONE_FILE), &backbone, meta("backbone", curve.len()))?;
            let rows: Vec<_> = curve
                .iter()
                .enumerate()
                .map(|(i, &loss)| BackboneLossRow { step: i + 1, loss })
                .collect();
            write_with_header(&run_dir.join(BACKBONE_LOSS_FILE), &["step", "loss"], &rows)?;
            (backbone, curve)
        }
    };
    backbone.set_trainable(false);

    let mut fs = FeedbackState::new(
        &backbone,
        cfg.loop_range(),
        &mut rng_for(cfg.seed, Stream::FeedbackInit),
    )?;
    let every = cfg.ilf.train.checkpoint_every;
    let curve = ilf::train(
        &backbone,
        &mut fs,
        &ns,
        &dataset,
        &cfg.ilf.train,
        &mut rng_for(cfg.seed, Stream::FeedbackTrain),
        |step, state| {
            if every > 0 && step % every == 0 {
                save_feedback(
                    &run_dir.join(format!("feedback_step{step:06}.ckpt")),
                    state,
                    &backbone,
                    meta("feedback", step),
                )?;
            }
            Ok(())
        },
    )?;
    let feedback_checkpoint = feedback_path(cfg);
    save_feedback(&feedback_checkpoint, &fs, &backbone, meta("feedback", curve.len()))?;
    let rows: Vec<_> = curve
        .iter()
        .enumerate()
        .map(|(i, c)| FeedbackLossRow {
            step: i + 1,
            recon: c.recon,
            distill: c.distill,
            total: c.total,
        })
        .collect();
    write_with_header(
        &run_dir.join(FEEDBACK_LOSS_FILE),
        &["step", "recon", "distill", "total"],
        &rows,
    )?;
    Ok(TrainSummary {
        backbone_checkpoint: backbone_path(cfg),
        feedback_checkpoint,
        backbone_curve,
        feedback_curve: curve,
    })
}

/// The configured plan as run by `kind`: feedback flags only for ILF.
pub fn plan_for(cfg: &RunConfig, kind: ModelKind) -> Result<InferencePlan> {
    let plan = cfg.plan()?;
    Ok(match kind {
        ModelKind::Ilf => plan,
        _ => plan.without_feedback(),
    })
}

/// Samples `sample.n_samples` images with `kind`, writing `sample_NNN.pgm`
/// files and a one-row `cost.csv` into `out_dir`.
pub fn cmd_sample(config_path: &Path, kind: ModelKind, out_dir: &Path) -> Result<CostReport> {
    let cfg = RunConfig::load(config_path)?;
    let backbone = load_trained_backbone(&cfg)?;
    let feedback = match kind {
        ModelKind::Ilf => Some(load_trained_feedback(&cfg, &backbone)?),
        _ => None,
    };
    let cache = match kind {
        ModelKind::Cached => Some(cfg.cache.resolve(backbone.n_blocks())?),
        _ => None,
    };
    let ns = schedule_for(&cfg)?;
    let plan = plan_for(&cfg, kind)?;
    let classes = cfg.sample_classes();
    let req = SampleRequest {
        kind,
        backbone: &backbone,
        schedule: &ns,
        plan: &plan,
        feedback: feedback.as_ref(),
        cache: cache.as_ref(),
        classes: &classes,
        seed: cfg.sample.seed,
        tap: false,
    };
    let out = sample(&req)?;
    write_images(out_dir, "sample", &out.images)?;
    let report = CostReport::new(&req, &out);
    write_csv(&out_dir.join(COST_FILE), std::slice::from_ref(&report))?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftSummary {
    pub report: DriftReport,
    pub time_norm: f64,
    pub blocks_norm: f64,
    pub n_blocks: usize,
    pub steps: usize,
}

/// Baseline vs cached feature drift on the configured plan. Writes four
/// jointly normalized CSVs, their heatmaps and `drift_report.json`.
pub fn cmd_drift(config_path: &Path, out_dir: &Path) -> Result<DriftSummary> {
    let cfg = RunConfig::load(config_path)?;
    let backbone = load_trained_backbone(&cfg)?;
    let ns = schedule_for(&cfg)?;
    let plan = plan_for(&cfg, ModelKind::Baseline)?;
    let cache = cfg.cache.resolve(backbone.n_blocks())?;
    let classes = cfg.sample_classes();
    let run = |kind| {
        sample(&SampleRequest {
            kind,
            backbone: &backbone,
            schedule: &ns,
            plan: &plan,
            feedback: None,
            cache: Some(&cache),
            classes: &classes,
            seed: cfg.sample.seed,
            tap: true,
        })
    };
    let (base, cached) = (run(ModelKind::Baseline)?, run(ModelKind::Cached)?);
    if base.taps.len() != cached.taps.len() {
        return Err(Error::invalid("baseline and cached runs tapped different step counts"));
    }
    let (tb, tc) = drift_over_time(&base.taps, &cached.taps, &plan.steps)?;
    let (bb, bc) = drift_over_blocks(&base.taps, &cached.taps, &plan.steps)?;
    for (name, m) in [
        ("drift_time_baseline", &tb),
        ("drift_time_cached", &tc),
        ("drift_blocks_baseline", &bb),
        ("drift_blocks_cached", &bc),
    ] {
        write_drift_csv(&out_dir.join(format!("{name}.csv")), m)?;
        write_heatmap(&out_dir.join(format!("{name}.pgm")), m)?;
    }
    let summary = DriftSummary {
        report: compare_drift(&tb, &tc, &cache)?,
        time_norm: tb.norm,
        blocks_norm: bb.norm,
        n_blocks: backbone.n_blocks(),
        steps: plan.len(),
    };
    write_json(&out_dir.join("drift_report.json"), &summary)?;
    Ok(summary)
}

/// Runs the bench grid (mock-cost mode when `bench.mock_n_blocks` is set) and
/// writes `bench.csv` into `run_dir`.
pub fn cmd_bench(config_path: &Path) -> Result<Vec<BenchRow>> {
    let cfg = RunConfig::load(config_path)?;
    let rows = bench_with(&cfg)?;
    write_csv(&cfg.run_dir.join(BENCH_FILE), &rows)?;
    Ok(rows)
}

pub fn bench_with(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let n = cfg.bench.mock_n_blocks.unwrap_or(cfg.backbone.n_blocks);
    let cache = cfg.cache.resolve(n)?;
    let entries = cfg
        .bench
        .grid
        .iter()
        .map(|e| {
            let kind = match e.kind {
                BenchKind::Baseline => ModelKind::Baseline,
                BenchKind::Ilf => ModelKind::Ilf,
                BenchKind::Cached => ModelKind::Cached,
            };
            Ok(BenchEntry {
                label: e.label.clone(),
                kind,
                plan: cfg.bench_plan(e)?,
                cache: (kind == ModelKind::Cached).then(|| cache.clone()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if cfg.bench.mock_n_blocks.is_some() {
        return bench(&entries, None, cfg.sample.seed);
    }
    let backbone = load_trained_backbone(cfg)?;
    let feedback = if entries.iter().any(|e| e.kind == ModelKind::Ilf) {
        Some(load_trained_feedback(cfg, &backbone)?)
    } else {
        None
    };
    let ns = schedule_for(cfg)?;
    let classes = cfg.sample_classes();
    let models = BenchModels {
        backbone: &backbone,
        schedule: &ns,
        feedback: feedback.as_ref(),
        classes: &classes,
        repeats: cfg.bench.repeats,
    };
    bench(&entries, Some(models), cfg.sample.seed)
}
