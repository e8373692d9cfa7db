//! Synthetic datasets.
//!
//! Everything is a deterministic function of [`DataGenConfig`]. The task
//! definition (teacher weights, class prototypes, domain shift) comes from one
//! generator keyed by `seed`; each split then draws its samples, and its
//! additive noise, from generators of its own.

use serde::{Deserialize, Serialize};

use super::{Batch, Classifier, Mlp};
use crate::error::{invalid_if, Result};
use crate::param_store::ElementWidth;
use crate::rng::{derive_seed, domain, DataRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// No data; the loss is closed-form.
    Quadratic,
    /// Gaussian inputs labelled by a random linear teacher.
    Logistic,
    /// Gaussian inputs labelled by a random tanh-MLP teacher.
    MlpClassify,
    /// Frame sequences around per-class prototypes, one label per frame.
    SeqClassify,
}

/// Fixed per-channel affine shift `x' = gain ⊙ x + offset`, with
/// `gain = exp(gain_log_sd · N(0,1))` and
/// `offset = offset_scale · signal_scale · N(0,1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    #[serde(default = "default_gain_log_sd")]
    pub gain_log_sd: f64,
    #[serde(default = "default_offset_scale")]
    pub offset_scale: f64,
}

fn default_gain_log_sd() -> f64 {
    0.3
}

fn default_offset_scale() -> f64 {
    1.5
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self { gain_log_sd: default_gain_log_sd(), offset_scale: default_offset_scale() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataGenConfig {
    pub task: TaskKind,
    /// Input width, or per-frame feature width for sequences.
    pub dim: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Hidden sizes of the MLP teacher.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// Standard deviation of the additive Gaussian noise on the shifted
    /// stream.
    #[serde(default)]
    pub noise_sigma: f64,
    /// Affine domain shift applied to the shifted stream.
    #[serde(default)]
    pub shift: Option<ShiftConfig>,
    /// Logistic teacher: label by argmax (true) or by sampling the teacher's
    /// softmax (false).
    #[serde(default = "default_true")]
    pub separable: bool,
    /// Sequence tasks: prototype scale and within-class frame noise.
    #[serde(default = "default_amp")]
    pub amp: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_classes() -> usize {
    2
}
fn default_frames() -> usize {
    16
}
fn default_n_train() -> usize {
    2000
}
fn default_n_test() -> usize {
    500
}
fn default_true() -> bool {
    true
}
fn default_amp() -> f64 {
    0.02
}
fn default_tau() -> f64 {
    0.01
}

impl DataGenConfig {
    pub fn new(task: TaskKind, dim: usize) -> Self {
        Self {
            task,
            dim,
            classes: default_classes(),
            hidden: Vec::new(),
            frames: default_frames(),
            n_train: default_n_train(),
            n_test: default_n_test(),
            noise_sigma: 0.0,
            shift: None,
            separable: true,
            amp: default_amp(),
            tau: default_tau(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        invalid_if(self.dim == 0, "data.dim must be positive")?;
        invalid_if(self.task != TaskKind::Quadratic && self.classes < 2, "data.classes must be >= 2")?;
        invalid_if(self.task == TaskKind::SeqClassify && self.frames == 0, "data.frames must be positive")?;
        invalid_if(!(self.noise_sigma >= 0.0), "data.noise_sigma must be non-negative")?;
        Ok(())
    }

    fn outputs_per_sample(&self) -> usize {
        match self.task {
            TaskKind::SeqClassify => self.frames,
            _ => 1,
        }
    }

    fn sample_width(&self) -> usize {
        self.dim * self.outputs_per_sample()
    }

    fn signal_scale(&self) -> f64 {
        match self.task {
            TaskKind::SeqClassify => self.amp,
            _ => 1.0,
        }
    }
}

/// Split identifiers for the per-split generators.
pub mod split {
    pub const TRAIN: u64 = 0;
    pub const TEST: u64 = 1;
    pub const STREAM: u64 = 2;
}

enum Teacher {
    None,
    Linear(Vec<f64>),
    Mlp(Mlp, crate::param_store::ParamSet),
    Prototypes(Vec<f64>),
}

struct TaskDef {
    teacher: Teacher,
    gain: Vec<f64>,
    offset: Vec<f64>,
}

fn task_def(cfg: &DataGenConfig) -> Result<TaskDef> {
    cfg.validate()?;
    let mut rng = DataRng::new(derive_seed(cfg.seed, domain::DATA, 0, 0));
    let (d, c) = (cfg.dim, cfg.classes);
    let teacher = match cfg.task {
        TaskKind::Quadratic => Teacher::None,
        TaskKind::Logistic => Teacher::Linear((0..c * d).map(|_| rng.normal()).collect()),
        TaskKind::MlpClassify => {
            let mut dims = vec![d];
            dims.extend(&cfg.hidden);
            dims.push(c);
            let mlp = Mlp::new(dims)?;
            let params = mlp.init(derive_seed(cfg.seed, domain::DATA, 0, 1), ElementWidth::F64);
            Teacher::Mlp(mlp, params)
        }
        TaskKind::SeqClassify => {
            Teacher::Prototypes((0..c * d).map(|_| rng.normal() * cfg.amp).collect())
        }
    };
    let shift = cfg.shift.unwrap_or_default();
    let gain = (0..d).map(|_| (shift.gain_log_sd * rng.normal()).exp()).collect();
    let offset = (0..d)
        .map(|_| rng.normal() * shift.offset_scale * cfg.signal_scale())
        .collect();
    Ok(TaskDef { teacher, gain, offset })
}

fn softmax_sample(rng: &mut DataRng, logits: &[f64]) -> usize {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let w: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let mut u = rng.uniform() * w.iter().sum::<f64>();
    for (k, &wk) in w.iter().enumerate() {
        if u < wk {
            return k;
        }
        u -= wk;
    }
    w.len() - 1
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

fn clean(cfg: &DataGenConfig, def: &TaskDef, split_id: u64, n: usize) -> Result<Batch> {
    let mut rng = DataRng::new(derive_seed(cfg.seed, domain::DATA, split_id + 1, 0));
    let (d, c) = (cfg.dim, cfg.classes);
    let k = cfg.outputs_per_sample();
    let mut inputs = Vec::with_capacity(n * cfg.sample_width());
    let mut labels = Vec::with_capacity(n * k);
    match &def.teacher {
        Teacher::None => return Batch::new(Vec::new(), d, 1, None),
        Teacher::Linear(w) => {
            for _ in 0..n {
                let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                let logits: Vec<f64> = w.chunks(d).map(|r| r.iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
                labels.push(if cfg.separable { argmax(&logits) } else { softmax_sample(&mut rng, &logits) });
                inputs.extend(x);
            }
        }
        Teacher::Mlp(mlp, params) => {
            for _ in 0..n {
                inputs.extend((0..d).map(|_| rng.normal()));
            }
            let x = Batch::new(inputs, d, 1, None)?;
            labels = super::predict(mlp, params, &x)?;
            inputs = x.inputs().to_vec();
        }
        Teacher::Prototypes(mu) => {
            for _ in 0..n * k {
                let y = rng.below(c);
                labels.push(y);
                inputs.extend(mu[y * d..(y + 1) * d].iter().map(|m| m + cfg.tau * rng.normal()));
            }
        }
    }
    Batch::new(inputs, cfg.sample_width(), k, Some(labels))
}

/// `(train, test)`, both from the clean source distribution.
pub fn gen_data(cfg: &DataGenConfig) -> Result<(Batch, Batch)> {
    let def = task_def(cfg)?;
    Ok((clean(cfg, &def, split::TRAIN, cfg.n_train)?, clean(cfg, &def, split::TEST, cfg.n_test)?))
}

/// The unshifted, noise-free version of the stream split.
pub fn gen_clean_stream(cfg: &DataGenConfig, n: usize) -> Result<Batch> {
    clean(cfg, &task_def(cfg)?, split::STREAM, n)
}

/// Target-domain stream: the stream split with the configured affine shift
/// (if any) followed by additive `N(0, noise_sigma²)` noise. With no shift
/// and `noise_sigma = 0` it equals [`gen_clean_stream`] bit for bit.
pub fn gen_shifted_stream(cfg: &DataGenConfig, n: usize) -> Result<Batch> {
    let def = task_def(cfg)?;
    let mut batch = clean(cfg, &def, split::STREAM, n)?;
    let d = cfg.dim;
    if cfg.shift.is_some() {
        for (i, x) in batch.inputs_mut().iter_mut().enumerate() {
            *x = def.gain[i % d] * *x + def.offset[i % d];
        }
    }
    if cfg.noise_sigma > 0.0 {
        let mut rng = DataRng::new(derive_seed(cfg.seed, domain::DATA, split::STREAM + 1, 1));
        for x in batch.inputs_mut() {
            *x += cfg.noise_sigma * rng.normal();
        }
    }
    Ok(batch)
}
