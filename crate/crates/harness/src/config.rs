//! Experiment files.
//!
//! An experiment is one TOML document. Top-level keys:
//!
//! ```toml
//! version = 1
//! name = "qsweep"
//! kind = "train"            # or "tta"
//! seeds = [0, 1, 2]          # or `replicates = 3` for seeds 0..3
//! batch_size = 24
//! width = "f64"
//! init = "seeded"           # or "zeros"
//! eval_every = 0             # full-train-set loss every k steps (0: final only)
//!
//! [model]
//! kind = "logistic"         # quadratic | logistic | mlp | seq
//!
//! [data]                    # see zo_core::models::data::DataGenConfig
//! task = "logistic"
//! dim = 5
//!
//! [optimizer]
//! method = "zo"             # or "fo"; remaining keys are the ZO or FO config
//! epsilon = 1e-3
//! lr = 1.6
//! steps = 800
//!
//! [sweep]                   # every present axis multiplies the grid
//! q = [1, 2, 4, 8, 16]
//! forward_budget = 1600      # ZO steps = budget / 2q, FO steps = budget
//! ```
//!
//! `kind = "tta"` experiments also need a `[tta]` table.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use zo_core::fo::FoConfig;
use zo_core::models::data::{DataGenConfig, TaskKind};
use zo_core::tta::{Adapter, ResetMode};
use zo_core::{Combine, ElementWidth, SamplerKind, ZoConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    #[default]
    Train,
    Tta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InitSpec {
    #[default]
    Seeded,
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSpec {
    /// Rotated bowl with a geometric spectrum from 1 to `condition`.
    Quadratic {
        dim: usize,
        #[serde(default = "one")]
        condition: f64,
        #[serde(default)]
        rotation_seed: u64,
    },
    /// Sized from `data.dim` and `data.classes`.
    Logistic,
    Mlp { hidden: Vec<usize> },
    /// Per-frame classifier over `data.frames` frames of width `data.dim`.
    Seq {
        hidden: usize,
        #[serde(default = "one")]
        input_scale: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(default)]
    pub q: Vec<usize>,
    /// Target-stream noise level (`data.noise_sigma`).
    #[serde(default)]
    pub sigma: Vec<f64>,
    #[serde(default)]
    pub sampler: Vec<SamplerKind>,
    #[serde(default)]
    pub combine: Vec<Combine>,
    #[serde(default)]
    pub lr: Vec<f64>,
    /// Derives step counts from an equal loss-evaluation budget.
    #[serde(default)]
    pub forward_budget: Option<u64>,
}

/// Supervised pretraining of the source model for TTA experiments (Adam on
/// the clean training split).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub lr: f64,
    pub steps: usize,
    #[serde(default = "default_source_batch")]
    pub batch_size: usize,
}

fn default_source_batch() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtaSpec {
    pub mask: Vec<String>,
    pub samples: usize,
    #[serde(default = "default_true")]
    pub episodic: bool,
    #[serde(default)]
    pub reset: ResetMode,
    pub source: SourceSpec,
    /// Write one `.zolog` per ZO episode.
    #[serde(default = "default_true")]
    pub save_episode_logs: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    #[serde(default)]
    pub kind: ExperimentKind,
    pub model: ModelSpec,
    #[serde(default)]
    pub data: Option<DataGenConfig>,
    pub optimizer: Adapter,
    #[serde(default)]
    pub sweep: SweepAxes,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub replicates: Option<u64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub width: ElementWidth,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub tta: Option<TtaSpec>,
}

fn default_batch() -> usize {
    24
}

/// One cell of the sweep grid, with `None` on axes that are not swept.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct GridPoint {
    pub q: Option<usize>,
    pub sigma: Option<f64>,
    pub sampler: Option<SamplerKind>,
    pub combine: Option<Combine>,
    pub lr: Option<f64>,
}

impl GridPoint {
    /// Filesystem-safe label such as `q8_lr1.6`; empty for the single-run grid.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(q) = self.q {
            parts.push(format!("q{q}"));
        }
        if let Some(s) = self.sigma {
            parts.push(format!("sigma{s:?}"));
        }
        if let Some(s) = self.sampler {
            parts.push(match s {
                SamplerKind::Full => "full".to_string(),
                SamplerKind::LowRank { rank, normalize } => {
                    format!("lowrank{rank}{}", if normalize { "n" } else { "" })
                }
            });
        }
        if let Some(c) = self.combine {
            parts.push(match c {
                Combine::Accumulate => "accumulate".into(),
                Combine::Mean => "mean".into(),
            });
        }
        if let Some(lr) = self.lr {
            parts.push(format!("lr{lr:?}"));
        }
        parts.join("_")
    }
}

/// A fully resolved run: the grid point and replicate seed applied to the
/// base configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPlan {
    pub run_id: String,
    pub point: GridPoint,
    pub seed: u64,
    pub adapter: Adapter,
    pub data: Option<DataGenConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment configs serialize")
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if !self.seeds.is_empty() {
            self.seeds.clone()
        } else {
            (0..self.replicates.unwrap_or(1)).collect()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            bail!("version: unsupported config version {} (expected {CONFIG_VERSION})", self.version);
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            bail!("name: must be a non-empty file name");
        }
        if !self.seeds.is_empty() && self.replicates.is_some() {
            bail!("seeds: give either `seeds` or `replicates`, not both");
        }
        if self.replicates == Some(0) {
            bail!("replicates: must be >= 1");
        }
        if self.batch_size == 0 {
            bail!("batch_size: must be >= 1");
        }
        match (&self.model, &self.data) {
            (ModelSpec::Quadratic { dim, condition, .. }, _) => {
                if *dim == 0 {
                    bail!("model.dim: must be >= 1");
                }
                if !(*condition >= 1.0) {
                    bail!("model.condition: must be >= 1");
                }
            }
            (_, None) => bail!("data: required for classifier models"),
            (model, Some(data)) => {
                data.validate().context("data")?;
                let ok = match model {
                    ModelSpec::Seq { .. } => data.task == TaskKind::SeqClassify,
                    _ => matches!(data.task, TaskKind::Logistic | TaskKind::MlpClassify),
                };
                if !ok {
                    bail!("data.task: {:?} does not fit model {model:?}", data.task);
                }
                if let ModelSpec::Mlp { hidden } = model {
                    if hidden.contains(&0) {
                        bail!("model.hidden: layer widths must be >= 1");
                    }
                }
            }
        }
        if self.sweep.q.contains(&0) {
            bail!("sweep.q: entries must be >= 1");
        }
        if self.sweep.forward_budget == Some(0) {
            bail!("sweep.forward_budget: must be positive");
        }
        let is_fo = matches!(self.optimizer, Adapter::Fo(_));
        if is_fo && (!self.sweep.q.is_empty() || !self.sweep.sampler.is_empty() || !self.sweep.combine.is_empty()) {
            bail!("sweep: q, sampler and combine axes apply to ZO optimizers only");
        }
        match self.kind {
            ExperimentKind::Train => {
                if self.tta.is_some() {
                    bail!("tta: only valid with kind = \"tta\"");
                }
                if !self.sweep.sigma.is_empty() && matches!(self.model, ModelSpec::Quadratic { .. }) {
                    bail!("sweep.sigma: the quadratic model has no data");
                }
            }
            ExperimentKind::Tta => {
                let Some(tta) = &self.tta else { bail!("tta: required with kind = \"tta\"") };
                if matches!(self.model, ModelSpec::Quadratic { .. }) {
                    bail!("model: TTA needs a classifier");
                }
                if tta.mask.is_empty() {
                    bail!("tta.mask: must name at least one parameter");
                }
                if tta.samples == 0 {
                    bail!("tta.samples: must be >= 1");
                }
                if tta.source.steps == 0 || tta.source.batch_size == 0 {
                    bail!("tta.source: steps and batch_size must be >= 1");
                }
            }
        }
        // Resolving every run surfaces bad grid cells (e.g. a budget smaller
        // than 2q) before anything is executed.
        for plan in self.plans()? {
            let path = format!("optimizer (run {})", plan.run_id);
            match plan.adapter {
                Adapter::Zo(c) => c.validate().context(path)?,
                Adapter::Fo(c) => c.validate().context(path)?,
            }
            if self.kind == ExperimentKind::Tta && plan.adapter.steps() == 0 {
                bail!("optimizer.steps: TTA needs at least one step per sample");
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<GridPoint> {
        fn axis<T: Clone>(v: &[T]) -> Vec<Option<T>> {
            if v.is_empty() {
                vec![None]
            } else {
                v.iter().cloned().map(Some).collect()
            }
        }
        let s = &self.sweep;
        let mut out = Vec::new();
        for q in axis(&s.q) {
            for sigma in axis(&s.sigma) {
                for sampler in axis(&s.sampler) {
                    for combine in axis(&s.combine) {
                        for lr in axis(&s.lr) {
                            out.push(GridPoint { q, sigma, sampler, combine, lr });
                        }
                    }
                }
            }
        }
        out
    }

    /// Every run in grid-major, seed-minor order.
    pub fn plans(&self) -> Result<Vec<RunPlan>> {
        let mut out = Vec::new();
        for point in self.grid() {
            for seed in self.seed_list() {
                let adapter = self.adapter_for(&point, seed)?;
                let data = self.data.as_ref().map(|d| DataGenConfig {
                    noise_sigma: point.sigma.unwrap_or(d.noise_sigma),
                    seed: d.seed.wrapping_add(seed),
                    ..d.clone()
                });
                let label = point.label();
                let run_id = if label.is_empty() { format!("seed{seed}") } else { format!("{label}_seed{seed}") };
                out.push(RunPlan { run_id, point: point.clone(), seed, adapter, data });
            }
        }
        Ok(out)
    }

    fn adapter_for(&self, p: &GridPoint, seed: u64) -> Result<Adapter> {
        let budget = self.sweep.forward_budget;
        Ok(match self.optimizer {
            Adapter::Zo(base) => {
                let q = p.q.unwrap_or(base.q);
                let steps = match budget {
                    Some(b) => {
                        let per_step = 2 * q as u64;
                        if b % per_step != 0 {
                            bail!("sweep.forward_budget: {b} is not a multiple of 2q = {per_step}");
                        }
                        (b / per_step) as usize
                    }
                    None => base.steps,
                };
                Adapter::Zo(ZoConfig {
                    q,
                    steps,
                    lr: p.lr.unwrap_or(base.lr),
                    sampler: p.sampler.unwrap_or(base.sampler),
                    combine: p.combine.unwrap_or(base.combine),
                    master_seed: base.master_seed.wrapping_add(seed),
                    ..base
                })
            }
            Adapter::Fo(base) => Adapter::Fo(FoConfig {
                steps: budget.map_or(base.steps, |b| b as usize),
                lr: p.lr.unwrap_or(base.lr),
                master_seed: base.master_seed.wrapping_add(seed),
                ..base
            }),
        })
    }
}
