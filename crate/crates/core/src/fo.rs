//! First-order baselines on analytic gradients: SGD and Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ZoError};
use crate::models::{Batch, Model};
use crate::optimizer::{BatchSource, CountingModel};
use crate::param_store::{ElementWidth, ParamSet, Selection};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FoOptimizer {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps_adam")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps_adam() -> f64 {
    1e-8
}

impl FoOptimizer {
    pub fn adam() -> Self {
        FoOptimizer::Adam { beta1: default_beta1(), beta2: default_beta2(), eps: default_eps_adam() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoConfig {
    pub lr: f64,
    pub optimizer: FoOptimizer,
    pub steps: usize,
    #[serde(default)]
    pub master_seed: u64,
}

impl FoConfig {
    pub fn sgd(lr: f64, steps: usize) -> Self {
        Self { lr, optimizer: FoOptimizer::Sgd, steps, master_seed: 0 }
    }

    pub fn adam(lr: f64, steps: usize) -> Self {
        Self { lr, optimizer: FoOptimizer::adam(), steps, master_seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(ZoError::invalid(format!("lr must be non-negative, got {}", self.lr)));
        }
        if let FoOptimizer::Adam { beta1, beta2, eps } = self.optimizer {
            let unit = |b: f64| b > 0.0 && b < 1.0;
            if !unit(beta1) || !unit(beta2) {
                return Err(ZoError::invalid("Adam betas must lie in (0, 1)"));
            }
            if !(eps >= 0.0) {
                return Err(ZoError::invalid("Adam eps must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Per-tensor Adam moments for the selected tensors.
#[derive(Clone, Debug, Default)]
pub struct FoState {
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl FoState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// One update of the selected tensors. Returns the loss at the pre-step
/// parameters.
pub fn fo_step<M: Model>(
    model: &M,
    params: &mut ParamSet,
    selection: &Selection,
    batch: &Batch,
    config: &FoConfig,
    state: &mut FoState,
) -> Result<f64> {
    selection.check(params)?;
    let (loss, grad) = model.gradient(params, batch)?;
    if !loss.is_finite() {
        return Err(ZoError::NonFiniteLoss { seed: 0, value: loss });
    }
    for slot in selection.slots() {
        if !grad.tensor(slot.index).is_finite() {
            return Err(ZoError::NonFiniteGradient(grad.name(slot.index).to_string()));
        }
    }
    apply_gradient(params, selection, &grad, config, state);
    Ok(loss)
}

fn apply_gradient(params: &mut ParamSet, selection: &Selection, grad: &ParamSet, config: &FoConfig, state: &mut FoState) {
    state.t += 1;
    if state.m.is_empty() {
        state.m = selection.slots().iter().map(|s| vec![0.0; params.tensor(s.index).len()]).collect();
        state.v = state.m.clone();
    }
    for (k, slot) in selection.slots().iter().enumerate() {
        let g = grad.tensor(slot.index).values();
        let p = params.tensor_mut(slot.index);
        match config.optimizer {
            FoOptimizer::Sgd => {
                for (i, gi) in g.iter().enumerate() {
                    p.set(i, p.get(i) - config.lr * gi);
                }
            }
            FoOptimizer::Adam { beta1, beta2, eps } => {
                let (m, v) = (&mut state.m[k], &mut state.v[k]);
                let bc1 = 1.0 - beta1.powf(state.t as f64);
                let bc2 = 1.0 - beta2.powf(state.t as f64);
                for (i, &gi) in g.iter().enumerate() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    if mhat != 0.0 {
                        p.set(i, p.get(i) - config.lr * mhat / (vhat.sqrt() + eps));
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FoStepMetrics {
    pub step: u64,
    pub loss: f64,
    pub gradient_evals: u64,
}

/// `config.steps` FO steps; batch `t` is `batches.batch(t, 0)`, the same
/// batch a ZO run with shared per-step batches would see.
pub fn train_fo<M: Model, B: BatchSource>(
    model: &M,
    params: &mut ParamSet,
    selection: &Selection,
    batches: &mut B,
    config: &FoConfig,
) -> Result<Vec<FoStepMetrics>> {
    config.validate()?;
    let counted = CountingModel::new(model);
    let mut state = FoState::new();
    let mut out = Vec::with_capacity(config.steps);
    for t in 0..config.steps as u64 {
        let batch = batches.batch(t, 0)?;
        let loss = fo_step(&counted, params, selection, batch, config, &mut state)?;
        out.push(FoStepMetrics { step: t, loss, gradient_evals: counted.gradient_calls() });
    }
    Ok(out)
}

/// Central differences, element by element: `(L(θ + h e_i) − L(θ − h e_i)) / 2h`.
pub fn finite_diff_grad<M: Model>(model: &M, params: &ParamSet, batch: &Batch, h: f64) -> Result<ParamSet> {
    if !(h > 0.0) {
        return Err(ZoError::invalid("finite-difference step must be positive"));
    }
    let mut work = params.to_width(ElementWidth::F64);
    let mut grad = work.clone();
    for ti in 0..work.len() {
        for i in 0..work.tensor(ti).len() {
            let x = work.tensor(ti).get(i);
            work.tensor_mut(ti).set(i, x + h);
            let plus = model.loss(&work, batch)?;
            work.tensor_mut(ti).set(i, x - h);
            let minus = model.loss(&work, batch)?;
            work.tensor_mut(ti).set(i, x);
            grad.tensor_mut(ti).set(i, (plus - minus) / (2.0 * h));
        }
    }
    Ok(grad)
}
