//! Episodic test-time adaptation.
//!
//! Each sample of a target stream is adapted on its own: starting from the
//! source parameters, a masked subset is tuned to minimize the entropy of the
//! model's predictions on that one unlabeled sample, the sample is scored,
//! and the parameters are reset before the next one. Predictions are scored
//! only after the last adaptation step.
//!
//! ZO episodes reset by reverting their own seed log; FO episodes (and ZO
//! episodes with [`ResetMode::Snapshot`]) copy the masked tensors back from
//! the source.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ZoError};
use crate::fo::{train_fo, FoConfig};
use crate::models::{per_sample_accuracy, per_sample_entropy, Batch, Classifier, Entropy};
use crate::optimizer::{train, FixedBatch, ZoConfig};
use crate::param_store::{ParamSet, Selection};
use crate::rng::{derive_seed, domain};
use crate::seedlog::SeedLog;

/// Name patterns of the adapted parameters (`"norm.*"`, `"feat.scale"`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AdaptMask(pub Vec<String>);

impl AdaptMask {
    pub fn new<S: Into<String>>(patterns: impl IntoIterator<Item = S>) -> Self {
        Self(patterns.into_iter().map(Into::into).collect())
    }

    pub fn resolve(&self, params: &ParamSet) -> Result<Selection> {
        Selection::from_patterns(params, &self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Adapter {
    Zo(ZoConfig),
    Fo(FoConfig),
}

impl Adapter {
    pub fn steps(&self) -> usize {
        match self {
            Adapter::Zo(c) => c.steps,
            Adapter::Fo(c) => c.steps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ResetMode {
    /// Undo the episode's seed log (ZO only; FO falls back to snapshot).
    #[default]
    Revert,
    /// Copy the masked tensors back from the source parameters.
    Snapshot,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub adapter: Adapter,
    /// Reset to the source after every sample. Turning it off accumulates
    /// adaptation across the stream.
    #[serde(default = "default_true")]
    pub episodic: bool,
    #[serde(default)]
    pub reset: ResetMode,
}

fn default_true() -> bool {
    true
}

impl EpisodeConfig {
    pub fn new(adapter: Adapter) -> Self {
        Self { adapter, episodic: true, reset: ResetMode::Revert }
    }

    pub fn validate(&self) -> Result<()> {
        if self.adapter.steps() == 0 {
            return Err(ZoError::invalid("TTA needs at least one adaptation step"));
        }
        match &self.adapter {
            Adapter::Zo(c) => c.validate(),
            Adapter::Fo(c) => c.validate(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpisodeMetrics {
    pub steps: usize,
    /// Loss evaluations (ZO) or gradient evaluations (FO).
    pub forwards: u64,
    pub wall_nanos: u64,
    pub entropy_before: f64,
    pub entropy_after: f64,
}

#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    /// ZO episodes only; scoped to the masked parameters.
    pub log: Option<SeedLog>,
    pub metrics: EpisodeMetrics,
}

/// Adapts the masked parameters of `params` in place on one unlabeled
/// sample. On error the masked tensors are restored to their values on entry.
pub fn adapt_sample<C: Classifier>(
    clf: &C,
    params: &mut ParamSet,
    selection: &Selection,
    sample: &Batch,
    sample_id: u64,
    config: &EpisodeConfig,
) -> Result<EpisodeOutcome> {
    config.validate()?;
    selection.check(params)?;
    if sample.labels().is_some() {
        return Err(ZoError::invalid("test-time adaptation takes unlabeled samples"));
    }
    let objective = Entropy(clf);
    let entropy_before = mean(&per_sample_entropy(clf, params, sample)?);
    let start = Instant::now();
    let (log, forwards) = match &config.adapter {
        Adapter::Zo(zo) => {
            let zo = ZoConfig {
                master_seed: derive_seed(zo.master_seed, domain::EPISODE, sample_id, 0),
                ..*zo
            };
            match train(&objective, params, selection, &mut FixedBatch(sample.clone()), &zo) {
                Ok(run) => (Some(run.log), run.forwards),
                Err(abort) => {
                    abort.partial.log.revert(params, selection)?;
                    return Err(abort.error);
                }
            }
        }
        Adapter::Fo(fo) => {
            let saved = params.clone();
            match train_fo(&objective, params, selection, &mut FixedBatch(sample.clone()), fo) {
                Ok(m) => (None, m.last().map_or(0, |s| s.gradient_evals)),
                Err(e) => {
                    params.copy_selected_from(&saved, selection)?;
                    return Err(e);
                }
            }
        }
    };
    let wall_nanos = start.elapsed().as_nanos() as u64;
    let entropy_after = mean(&per_sample_entropy(clf, params, sample)?);
    Ok(EpisodeOutcome {
        log,
        metrics: EpisodeMetrics { steps: config.adapter.steps(), forwards, wall_nanos, entropy_before, entropy_after },
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// One line of the episode stream. For single-output samples the two
/// accuracies are 0/1 correctness flags; for sequences they are the fraction
/// of correct frames.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeRecord {
    pub sample_id: u64,
    pub zero_shot_accuracy: f64,
    pub adapted_accuracy: f64,
    pub entropy_before: f64,
    pub entropy_after: f64,
    pub wall_clock_s: f64,
    pub steps: usize,
    pub forwards: u64,
    /// `‖θ_masked − θ_source‖∞` after the reset (0 when not episodic or
    /// reset by snapshot).
    pub reset_drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StreamReport {
    pub samples: usize,
    pub zero_shot_accuracy: f64,
    pub adapted_accuracy: f64,
    pub mean_gain: f64,
    /// Standard error of the per-sample gain.
    pub gain_se: f64,
    pub frac_improved: f64,
    pub frac_worse: f64,
    pub mean_wall_clock_s: f64,
    pub total_forwards: u64,
    pub max_reset_drift: f64,
    #[serde(skip)]
    pub episodes: Vec<EpisodeRecord>,
}

impl StreamReport {
    pub fn from_episodes(episodes: Vec<EpisodeRecord>) -> Self {
        let n = episodes.len();
        let nf = n.max(1) as f64;
        let gains: Vec<f64> = episodes.iter().map(|e| e.adapted_accuracy - e.zero_shot_accuracy).collect();
        let mean_gain = gains.iter().sum::<f64>() / nf;
        let var = if n > 1 {
            gains.iter().map(|g| (g - mean_gain).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            samples: n,
            zero_shot_accuracy: episodes.iter().map(|e| e.zero_shot_accuracy).sum::<f64>() / nf,
            adapted_accuracy: episodes.iter().map(|e| e.adapted_accuracy).sum::<f64>() / nf,
            mean_gain,
            gain_se: (var / nf).sqrt(),
            frac_improved: gains.iter().filter(|&&g| g > 0.0).count() as f64 / nf,
            frac_worse: gains.iter().filter(|&&g| g < 0.0).count() as f64 / nf,
            mean_wall_clock_s: episodes.iter().map(|e| e.wall_clock_s).sum::<f64>() / nf,
            total_forwards: episodes.iter().map(|e| e.forwards).sum(),
            max_reset_drift: episodes.iter().fold(0.0, |m, e| m.max(e.reset_drift)),
            episodes,
        }
    }
}

/// Adapts and scores every `(sample_id, labeled sample)` in order, handing
/// each record and the episode's seed log (ZO only) to `on_episode`. Seeds of
/// each ZO episode derive from its `sample_id`, so in episodic mode an
/// episode's outcome does not depend on where it sits in the stream.
pub fn run_stream<C, I, F>(
    clf: &C,
    source: &ParamSet,
    samples: I,
    mask: &AdaptMask,
    config: &EpisodeConfig,
    mut on_episode: F,
) -> Result<StreamReport>
where
    C: Classifier,
    I: IntoIterator<Item = (u64, Batch)>,
    F: FnMut(&EpisodeRecord, Option<&SeedLog>),
{
    config.validate()?;
    let selection = mask.resolve(source)?;
    let mut params = source.clone();
    let mut episodes = Vec::new();
    for (sample_id, sample) in samples {
        let zero_shot = mean(&per_sample_accuracy(clf, source, &sample)?);
        let unlabeled = sample.without_labels();
        let outcome = adapt_sample(clf, &mut params, &selection, &unlabeled, sample_id, config)?;
        let adapted = mean(&per_sample_accuracy(clf, &params, &sample)?);
        let mut reset_drift = 0.0;
        if config.episodic {
            match (&outcome.log, config.reset) {
                (Some(log), ResetMode::Revert) => {
                    log.revert(&mut params, &selection)?;
                    reset_drift = params.max_abs_diff(source);
                }
                _ => params.copy_selected_from(source, &selection)?,
            }
        }
        let m = outcome.metrics;
        let record = EpisodeRecord {
            sample_id,
            zero_shot_accuracy: zero_shot,
            adapted_accuracy: adapted,
            entropy_before: m.entropy_before,
            entropy_after: m.entropy_after,
            wall_clock_s: m.wall_nanos as f64 * 1e-9,
            steps: m.steps,
            forwards: m.forwards,
            reset_drift,
        };
        on_episode(&record, outcome.log.as_ref());
        episodes.push(record);
    }
    Ok(StreamReport::from_episodes(episodes))
}
