//! JSON run configuration. Every source of randomness has an explicit seed
//! field; those fields are required.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::train::PretrainConfig;
use crate::backbone::BackboneConfig;
use crate::caching::{CacheConfig, CachePreset};
use crate::error::{Error, Result};
use crate::ilf::TrainConfig;
use crate::schedule::{make_plan, InferencePlan, LoopRange, PlanSpec, RatioOrientation, SkipPreset, TPostMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization and training.
    pub seed: u64,
    /// Directory holding checkpoints and training curves.
    pub run_dir: PathBuf,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub backbone_train: PretrainConfig,
    /// Load this backbone instead of pretraining one.
    #[serde(default)]
    pub backbone_checkpoint: Option<PathBuf>,
    pub ilf: IlfSection,
    #[serde(default)]
    pub plan: PlanSection,
    #[serde(default)]
    pub cache: CacheSection,
    pub data: DataSection,
    pub sample: SampleSection,
    #[serde(default)]
    pub bench: BenchSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IlfSection {
    pub loop_start: usize,
    pub loop_end: usize,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSection {
    pub steps: usize,
    pub tpost_mode: TPostMode,
    pub preset: SkipPreset,
    pub orientation: RatioOrientation,
}

impl Default for PlanSection {
    fn default() -> Self {
        Self {
            steps: 8,
            tpost_mode: TPostMode::Rescaled,
            preset: SkipPreset::SkipInner,
            orientation: RatioOrientation::NOverM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheSection {
    pub preset: CachePreset,
    /// Number of cached blocks.
    pub count: usize,
    pub refresh_period: usize,
    /// Explicit block list; overrides `preset` and `count`.
    pub blocks: Option<Vec<usize>>,
}

impl Default for CacheSection {
    fn default() -> Self {
        Self {
            preset: CachePreset::Inner,
            count: 4,
            refresh_period: 2,
            blocks: None,
        }
    }
}

impl CacheSection {
    pub fn resolve(&self, n_blocks: usize) -> Result<CacheConfig> {
        let cfg = match &self.blocks {
            Some(blocks) => CacheConfig {
                cached_blocks: blocks.clone(),
                refresh_period: self.refresh_period,
            },
            None => CacheConfig::from_preset(self.preset, self.count, n_blocks, self.refresh_period)?,
        };
        cfg.validate(n_blocks)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Shapes,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub seed: u64,
    #[serde(default = "default_per_class")]
    pub n_per_class: usize,
    #[serde(default)]
    pub idx_images: Option<PathBuf>,
    #[serde(default)]
    pub idx_labels: Option<PathBuf>,
}

fn default_per_class() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    /// Seeds the initial noise of every sampling run.
    pub seed: u64,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
}

fn default_n_samples() -> usize {
    16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchKind {
    Baseline,
    Ilf,
    Cached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchGridEntry {
    pub label: String,
    pub kind: BenchKind,
    pub steps: usize,
    #[serde(default)]
    pub preset: SkipPreset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub grid: Vec<BenchGridEntry>,
    /// Count block forwards for a model of this depth without running one.
    pub mock_n_blocks: Option<usize>,
    /// Inner loop `[start, end]` for mock ILF entries.
    pub mock_loop: Option<[usize; 2]>,
    pub repeats: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            grid: vec![
                BenchGridEntry {
                    label: "baseline".into(),
                    kind: BenchKind::Baseline,
                    steps: 8,
                    preset: SkipPreset::None,
                },
                BenchGridEntry {
                    label: "ilf".into(),
                    kind: BenchKind::Ilf,
                    steps: 8,
                    preset: SkipPreset::SkipInner,
                },
            ],
            mock_n_blocks: None,
            mock_loop: None,
            repeats: 3,
        }
    }
}

fn invalid(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

impl RunConfig {
    /// Parses `text`; errors name the offending key path and position.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::Config {
                path: if path == "." { String::new() } else { path },
                message: format!("{}: {inner}", origin.display()),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg = Self::parse(&text, path)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative paths relative to the config file's directory.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.run_dir);
        if let Some(p) = &mut self.backbone_checkpoint {
            fix(p);
        }
        if let Some(p) = &mut self.data.idx_images {
            fix(p);
        }
        if let Some(p) = &mut self.data.idx_labels {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.backbone_train.validate()?;
        self.ilf.train.validate()?;
        let n = self.backbone.n_blocks;
        LoopRange::new(self.ilf.loop_start, self.ilf.loop_end, n)
            .map_err(|e| invalid("ilf.loop_end", e.to_string()))?;
        self.plan().map_err(|e| invalid("plan", e.to_string()))?;
        self.cache.resolve(n).map_err(|e| invalid("cache", e.to_string()))?;
        if self.data.source == DataSource::Idx && (self.data.idx_images.is_none() || self.data.idx_labels.is_none()) {
            return Err(invalid("data.idx_images", "idx source needs idx_images and idx_labels"));
        }
        if self.data.n_per_class == 0 {
            return Err(invalid("data.n_per_class", "must be >= 1"));
        }
        if self.sample.n_samples == 0 {
            return Err(invalid("sample.n_samples", "must be >= 1"));
        }
        for (i, e) in self.bench.grid.iter().enumerate() {
            let spec = PlanSpec {
                steps: e.steps,
                preset: e.preset,
                ..self.plan_spec()
            };
            let n_mock = self.bench.mock_n_blocks.unwrap_or(n);
            let loop_range = self.bench_loop()?;
            make_plan(PlanSpec {
                n_blocks: n_mock,
                loop_range,
                ..spec
            })
            .map_err(|err| invalid(&format!("bench.grid[{i}]"), err.to_string()))?;
        }
        Ok(())
    }

    pub fn loop_range(&self) -> LoopRange {
        LoopRange {
            start: self.ilf.loop_start,
            end: self.ilf.loop_end,
        }
    }

    fn plan_spec(&self) -> PlanSpec {
        PlanSpec {
            steps: self.plan.steps,
            timesteps: self.backbone.timesteps,
            tpost_mode: self.plan.tpost_mode,
            preset: self.plan.preset,
            orientation: self.plan.orientation,
            loop_range: self.loop_range(),
            n_blocks: self.backbone.n_blocks,
        }
    }

    /// The configured inference plan (with feedback flags).
    pub fn plan(&self) -> Result<InferencePlan> {
        make_plan(self.plan_spec())
    }

    /// Loop used by bench entries: `mock_loop` in mock mode, else the ILF loop.
    pub fn bench_loop(&self) -> Result<LoopRange> {
        match (self.bench.mock_n_blocks, self.bench.mock_loop) {
            (Some(n), Some([s, e])) => {
                LoopRange::new(s, e, n).map_err(|err| invalid("bench.mock_loop", err.to_string()))
            }
            (Some(_), None) => Err(invalid("bench.mock_loop", "mock mode needs mock_loop")),
            _ => Ok(self.loop_range()),
        }
    }

    /// Plan for one bench grid entry.
    pub fn bench_plan(&self, entry: &BenchGridEntry) -> Result<InferencePlan> {
        let preset = match entry.kind {
            BenchKind::Ilf => entry.preset,
            _ => SkipPreset::None,
        };
        make_plan(PlanSpec {
            steps: entry.steps,
            preset,
            n_blocks: self.bench.mock_n_blocks.unwrap_or(self.backbone.n_blocks),
            loop_range: self.bench_loop()?,
            ..self.plan_spec()
        })
    }

    /// Classes of the sampled images, cycling through all classes.
    pub fn sample_classes(&self) -> Vec<usize> {
        (0..self.sample.n_samples)
            .map(|i| i % self.backbone.n_classes)
            .collect()
    }
}
