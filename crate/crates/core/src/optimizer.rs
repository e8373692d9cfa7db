//! Two-point randomized gradient estimation and the two-stage ZO-SGD step.
//!
//! One step with `q` queries:
//!
//! 1. for each query `j`, derive `seed_j = query_seed(master, t, j)`, walk
//!    the parameters through `+ε z`, `−2ε z`, `+ε z` in place, and keep only
//!    `g_j = (ℓ⁺ − ℓ⁻) / 2ε`;
//! 2. regenerate each `z_j` from its seed and apply
//!    `θ ← θ − η_eff · g_j · z_j`, where `η_eff = η` (accumulate) or `η / q`
//!    (mean).
//!
//! Nothing but the scalars of stage 1 outlives a query, so the step needs no
//! copy of the parameters and no stored direction.

use std::cell::Cell;
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ZoError};
use crate::models::{Batch, Model};
use crate::param_store::{axpy, perturb_inplace, ElementWidth, ParamSet, ParamShape, Selection};
use crate::rng::{derive_seed, domain, query_seed, DataRng};
use crate::sampler::{PerturbSpec, SamplerKind};
use crate::seedlog::{LogRecord, SeedLog, SeedLogHeader};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    /// Sum the `q` updates without dividing by `q`.
    #[default]
    Accumulate,
    /// Average the `q` estimates.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BatchMode {
    /// All queries of a step see the same batch.
    SharedPerStep,
    /// Each query draws its own batch.
    #[default]
    FreshPerQuery,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoConfig {
    pub epsilon: f64,
    pub lr: f64,
    #[serde(default = "default_q")]
    pub q: usize,
    pub steps: usize,
    #[serde(default)]
    pub sampler: SamplerKind,
    #[serde(default)]
    pub combine: Combine,
    #[serde(default)]
    pub batch_mode: BatchMode,
    #[serde(default)]
    pub master_seed: u64,
    /// Precision at which projected gradients are kept. Live updates use the
    /// rounded value, so a seed log at this precision replays the run
    /// exactly.
    #[serde(default = "default_grad_precision")]
    pub grad_precision: ElementWidth,
}

fn default_q() -> usize {
    1
}

fn default_grad_precision() -> ElementWidth {
    ElementWidth::F32
}

impl ZoConfig {
    pub fn new(epsilon: f64, lr: f64, q: usize, steps: usize) -> Self {
        Self {
            epsilon,
            lr,
            q,
            steps,
            sampler: SamplerKind::Full,
            combine: Combine::Accumulate,
            batch_mode: BatchMode::FreshPerQuery,
            master_seed: 0,
            grad_precision: ElementWidth::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(ZoError::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(ZoError::invalid(format!("lr must be non-negative, got {}", self.lr)));
        }
        if self.q == 0 {
            return Err(ZoError::invalid("q must be >= 1"));
        }
        self.sampler.validate()?;
        Ok(())
    }

    /// Learning rate applied to each query's `g_j · z_j`.
    pub fn effective_lr(&self) -> f64 {
        effective_lr(self.lr, self.q, self.combine)
    }

    pub fn spec(&self, seed: u64) -> Result<PerturbSpec> {
        PerturbSpec::new(seed, self.epsilon, self.sampler)
    }
}

pub(crate) fn effective_lr(lr: f64, q: usize, combine: Combine) -> f64 {
    match combine {
        Combine::Accumulate => lr,
        Combine::Mean => lr / q as f64,
    }
}

pub(crate) fn round_to(value: f64, width: ElementWidth) -> f64 {
    match width {
        ElementWidth::F64 => value,
        ElementWidth::F32 => f64::from(value as f32),
    }
}

/// What one two-point estimate saw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimateDiagnostics {
    pub loss_plus: f64,
    pub loss_minus: f64,
    /// `(loss_plus − loss_minus) / 2ε`, unrounded.
    pub proj_grad: f64,
    pub forward_nanos: [u64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryRecord {
    pub seed: u64,
    /// Rounded to the run's gradient precision.
    pub proj_grad: f64,
    pub loss_plus: f64,
    pub loss_minus: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub queries: Vec<QueryRecord>,
}

impl StepRecord {
    /// Mean of `(ℓ⁺ + ℓ⁻) / 2` over the queries, a free estimate of the loss
    /// at the pre-step parameters.
    pub fn mean_loss(&self) -> f64 {
        let n = self.queries.len().max(1) as f64;
        self.queries.iter().map(|q| 0.5 * (q.loss_plus + q.loss_minus)).sum::<f64>() / n
    }
}

fn timed_loss<M: Model>(model: &M, params: &ParamSet, batch: &Batch) -> (Result<f64>, u64) {
    let start = Instant::now();
    let l = model.loss(params, batch);
    (l, start.elapsed().as_nanos() as u64)
}

/// One two-point estimate along the direction of `spec`.
///
/// The parameters go through `+ε`, `−2ε`, `+ε` in place and are restored
/// (up to rounding) on every path, including errors. A non-finite loss
/// aborts with the seed that produced it.
pub fn rge_proj_grad<M: Model>(
    model: &M,
    params: &mut ParamSet,
    selection: &Selection,
    batch: &Batch,
    spec: &PerturbSpec,
) -> Result<(f64, EstimateDiagnostics)> {
    let eps = spec.epsilon;
    let bad = |value: f64| ZoError::NonFiniteLoss { seed: spec.seed, value };

    perturb_inplace(params, selection, eps, spec)?;
    let (plus, t_plus) = timed_loss(model, params, batch);
    let plus = match plus {
        Ok(l) if l.is_finite() => l,
        other => {
            perturb_inplace(params, selection, -eps, spec)?;
            return Err(other.map_or_else(|e| e, bad));
        }
    };
    perturb_inplace(params, selection, -2.0 * eps, spec)?;
    let (minus, t_minus) = timed_loss(model, params, batch);
    perturb_inplace(params, selection, eps, spec)?;
    let minus = match minus {
        Ok(l) if l.is_finite() => l,
        other => return Err(other.map_or_else(|e| e, bad)),
    };
    let g = (plus - minus) / (2.0 * eps);
    if !g.is_finite() {
        return Err(bad(g));
    }
    Ok((
        g,
        EstimateDiagnostics { loss_plus: plus, loss_minus: minus, proj_grad: g, forward_nanos: [t_plus, t_minus] },
    ))
}

/// Supplies the batch for query `j` of step `t`. Must be deterministic in
/// `(t, j)`.
pub trait BatchSource {
    fn batch(&mut self, step: u64, query: u64) -> Result<&Batch>;
}

/// The same batch for every query (full-batch training, closed-form losses,
/// or a single TTA sample).
#[derive(Clone, Debug)]
pub struct FixedBatch(pub Batch);

impl BatchSource for FixedBatch {
    fn batch(&mut self, _step: u64, _query: u64) -> Result<&Batch> {
        Ok(&self.0)
    }
}

/// Minibatches drawn with replacement from a dataset, with the indices for
/// `(t, j)` taken from `derive_seed(master, BATCH, t, j)`.
#[derive(Clone, Debug)]
pub struct SampledBatches {
    data: Batch,
    batch_size: usize,
    master_seed: u64,
    current: Batch,
}

impl SampledBatches {
    pub fn new(data: Batch, batch_size: usize, master_seed: u64) -> Result<Self> {
        if data.is_empty() || batch_size == 0 {
            return Err(ZoError::invalid("sampled batches need a nonempty dataset and batch_size >= 1"));
        }
        Ok(Self { data, batch_size, master_seed, current: Batch::empty() })
    }

    pub fn indices(&self, step: u64, query: u64) -> Vec<usize> {
        let mut rng = DataRng::new(derive_seed(self.master_seed, domain::BATCH, step, query));
        (0..self.batch_size).map(|_| rng.below(self.data.len())).collect()
    }

    pub fn data(&self) -> &Batch {
        &self.data
    }
}

impl BatchSource for SampledBatches {
    fn batch(&mut self, step: u64, query: u64) -> Result<&Batch> {
        self.current = self.data.select(&self.indices(step, query));
        Ok(&self.current)
    }
}

impl<B: BatchSource + ?Sized> BatchSource for &mut B {
    fn batch(&mut self, step: u64, query: u64) -> Result<&Batch> {
        (**self).batch(step, query)
    }
}

/// Stage 2 for one query: `θ ← θ − η_eff · g · z(seed)`. Shared by live
/// training, replay and (with the sign flipped) revert.
pub(crate) fn apply_query(
    params: &mut ParamSet,
    selection: &Selection,
    seed: u64,
    proj_grad: f64,
    lr_eff: f64,
    epsilon: f64,
    kind: SamplerKind,
) -> Result<()> {
    let spec = PerturbSpec::new(seed, epsilon, kind)?;
    axpy(params, selection, -(lr_eff * proj_grad), &spec)
}

/// Pure stage-2 replay of a recorded step.
pub fn apply_update(
    params: &mut ParamSet,
    selection: &Selection,
    record: &StepRecord,
    config: &ZoConfig,
) -> Result<()> {
    let lr = config.effective_lr();
    for q in &record.queries {
        apply_query(params, selection, q.seed, q.proj_grad, lr, config.epsilon, config.sampler)?;
    }
    Ok(())
}

/// One ZO-SGD iteration. On error the parameters are left at their
/// pre-step values: every started perturbation cycle is completed and stage 2
/// has not run.
pub fn zo_step<M: Model, B: BatchSource>(
    model: &M,
    params: &mut ParamSet,
    selection: &Selection,
    batches: &mut B,
    config: &ZoConfig,
    t: u64,
) -> Result<StepRecord> {
    config.validate()?;
    let mut queries = Vec::with_capacity(config.q);
    for j in 0..config.q as u64 {
        let seed = query_seed(config.master_seed, t, j);
        let spec = config.spec(seed)?;
        let batch_query = match config.batch_mode {
            BatchMode::SharedPerStep => 0,
            BatchMode::FreshPerQuery => j,
        };
        let batch = batches.batch(t, batch_query)?;
        let (g, diag) = rge_proj_grad(model, params, selection, batch, &spec)?;
        let g = round_to(g, config.grad_precision);
        if !g.is_finite() {
            return Err(ZoError::NonFiniteLoss { seed, value: g });
        }
        queries.push(QueryRecord { seed, proj_grad: g, loss_plus: diag.loss_plus, loss_minus: diag.loss_minus });
    }
    let record = StepRecord { step: t, queries };
    apply_update(params, selection, &record, config)?;
    Ok(record)
}

/// Counts loss and gradient evaluations of the wrapped model.
#[derive(Debug)]
pub struct CountingModel<M> {
    inner: M,
    losses: Cell<u64>,
    gradients: Cell<u64>,
}

impl<M> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        Self { inner, losses: Cell::new(0), gradients: Cell::new(0) }
    }

    pub fn loss_calls(&self) -> u64 {
        self.losses.get()
    }

    pub fn gradient_calls(&self) -> u64 {
        self.gradients.get()
    }

    pub fn reset(&self) {
        self.losses.set(0);
        self.gradients.set(0);
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }
}

impl<M: Model> Model for CountingModel<M> {
    fn schema(&self) -> &[ParamShape] {
        self.inner.schema()
    }

    fn loss(&self, params: &ParamSet, batch: &Batch) -> Result<f64> {
        self.losses.set(self.losses.get() + 1);
        self.inner.loss(params, batch)
    }

    fn gradient(&self, params: &ParamSet, batch: &Batch) -> Result<(f64, ParamSet)> {
        self.gradients.set(self.gradients.get() + 1);
        self.inner.gradient(params, batch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    /// [`StepRecord::mean_loss`].
    pub loss: f64,
    pub mean_abs_proj_grad: f64,
    /// Cumulative loss evaluations after this step.
    pub forwards: u64,
    pub wall_nanos: u64,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub log: SeedLog,
    pub metrics: Vec<StepMetrics>,
    pub forwards: u64,
}

/// A run that stopped early. `partial` holds every step completed before the
/// failure; the parameters match its log.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: ZoError,
    pub partial: TrainRun,
}

impl fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "training aborted after {} steps: {}", self.partial.metrics.len(), self.error)
    }
}

impl std::error::Error for TrainAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<TrainAbort> for ZoError {
    fn from(a: TrainAbort) -> Self {
        a.error
    }
}

/// Runs `config.steps` iterations of [`zo_step`].
pub fn train<M: Model, B: BatchSource>(
    model: &M,
    params: &mut ParamSet,
    selection: &Selection,
    batches: &mut B,
    config: &ZoConfig,
) -> std::result::Result<TrainRun, TrainAbort> {
    train_observed(model, params, selection, batches, config, |_, _| {})
}

/// [`train`] with a callback after every completed step.
pub fn train_observed<M: Model, B: BatchSource, F: FnMut(&StepMetrics, &ParamSet)>(
    model: &M,
    params: &mut ParamSet,
    selection: &Selection,
    batches: &mut B,
    config: &ZoConfig,
    mut on_step: F,
) -> std::result::Result<TrainRun, TrainAbort> {
    let header = SeedLogHeader::for_run(config, selection, params.width());
    let mut run = TrainRun { log: SeedLog::new(header), metrics: Vec::with_capacity(config.steps), forwards: 0 };
    if let Err(error) = config.validate().and_then(|_| selection.check(params)) {
        return Err(TrainAbort { error, partial: run });
    }
    let counted = CountingModel::new(model);
    for t in 0..config.steps as u64 {
        let start = Instant::now();
        let record = match zo_step(&counted, params, selection, batches, config, t) {
            Ok(r) => r,
            Err(error) => {
                run.forwards = counted.loss_calls();
                return Err(TrainAbort { error, partial: run });
            }
        };
        let wall_nanos = start.elapsed().as_nanos() as u64;
        for q in &record.queries {
            run.log.push(LogRecord { seed: q.seed, proj_grad: q.proj_grad });
        }
        let m = StepMetrics {
            step: t,
            loss: record.mean_loss(),
            mean_abs_proj_grad: record.queries.iter().map(|q| q.proj_grad.abs()).sum::<f64>() / config.q as f64,
            forwards: counted.loss_calls(),
            wall_nanos,
        };
        on_step(&m, params);
        run.metrics.push(m);
    }
    run.forwards = counted.loss_calls();
    Ok(run)
}
