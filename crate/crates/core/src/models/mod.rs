//! Toy model zoo.
//!
//! A [`Model`] is a forward-only loss evaluator, which is all the zeroth-order
//! optimizer needs. Models that can also produce an analytic gradient do so
//! through [`Model::gradient`]; the FO baselines and the gradient oracles in
//! the tests rely on it.
//!
//! Classifiers ([`Classifier`]) are turned into models by an objective:
//! [`CrossEntropy`] for supervised training and [`Entropy`] for test-time
//! adaptation on unlabeled inputs.

mod classifiers;
pub mod data;
mod toy;

pub use classifiers::{LogisticRegression, Mlp, SeqClassifier};
pub use toy::{ConstantLoss, LinearLoss, QuadraticBowl};

use crate::error::{Result, ZoError};
use crate::param_store::{schema_digest, ElementWidth, ParamSet, ParamShape, Tensor};

/// A batch of row-major samples. Each sample has `width` inputs and produces
/// `outputs_per_sample` predictions, so `labels` (when present) holds
/// `len() * outputs_per_sample` class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    width: usize,
    outputs_per_sample: usize,
    labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn new(
        inputs: Vec<f64>,
        width: usize,
        outputs_per_sample: usize,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if width == 0 || outputs_per_sample == 0 {
            return Err(ZoError::invalid("batch width and outputs per sample must be positive"));
        }
        if !inputs.len().is_multiple_of(width) {
            return Err(ZoError::invalid(format!(
                "{} inputs do not split into rows of {width}",
                inputs.len()
            )));
        }
        let n = inputs.len() / width;
        if let Some(l) = &labels {
            if l.len() != n * outputs_per_sample {
                return Err(ZoError::invalid(format!(
                    "{n} samples need {} labels, got {}",
                    n * outputs_per_sample,
                    l.len()
                )));
            }
        }
        Ok(Self { inputs, width, outputs_per_sample, labels })
    }

    /// A batch with no samples, for models that ignore their input.
    pub fn empty() -> Self {
        Self { inputs: Vec::new(), width: 1, outputs_per_sample: 1, labels: None }
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn outputs_per_sample(&self) -> usize {
        self.outputs_per_sample
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.width..(i + 1) * self.width]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn sample_labels(&self, i: usize) -> Option<&[usize]> {
        let k = self.outputs_per_sample;
        self.labels.as_ref().map(|l| &l[i * k..(i + 1) * k])
    }

    pub fn without_labels(&self) -> Batch {
        Batch { labels: None, ..self.clone() }
    }

    /// The samples at `indices`, in that order (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Batch {
        let k = self.outputs_per_sample;
        let mut inputs = Vec::with_capacity(indices.len() * self.width);
        let mut labels = self.labels.as_ref().map(|_| Vec::with_capacity(indices.len() * k));
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            if let (Some(out), Some(src)) = (labels.as_mut(), self.labels.as_ref()) {
                out.extend_from_slice(&src[i * k..(i + 1) * k]);
            }
        }
        Batch { inputs, width: self.width, outputs_per_sample: k, labels }
    }

    pub fn sample(&self, i: usize) -> Batch {
        self.select(&[i])
    }

    /// The batch as a parameter container (`inputs [len, width]`,
    /// `outputs_per_sample [1]` and, when labelled, `labels [len * k]`), for
    /// dataset snapshots in the same file format as parameters.
    pub fn to_params(&self) -> Result<ParamSet> {
        let mut entries = vec![
            ("inputs".to_string(), Tensor::from_vec(vec![self.len(), self.width], self.inputs.clone())?),
            ("outputs_per_sample".to_string(), Tensor::from_vec(vec![1], vec![self.outputs_per_sample as f64])?),
        ];
        if let Some(l) = &self.labels {
            entries.push(("labels".to_string(), Tensor::from_vec(vec![l.len()], l.iter().map(|&c| c as f64).collect())?));
        }
        ParamSet::new(entries)
    }

    pub fn from_params(p: &ParamSet) -> Result<Batch> {
        let bad = || ZoError::Corrupt("not a dataset snapshot".into());
        let inputs = p.get("inputs").ok_or_else(bad)?;
        let k = p.get("outputs_per_sample").ok_or_else(bad)?.get(0) as usize;
        let &[_, width] = inputs.shape() else { return Err(bad()) };
        let labels = p.get("labels").map(|l| l.values().iter().map(|&c| c as usize).collect());
        Batch::new(inputs.values().into_owned(), width, k, labels)
    }

    pub(crate) fn inputs_mut(&mut self) -> &mut [f64] {
        &mut self.inputs
    }
}

/// A loss `L(θ; batch)`.
pub trait Model {
    fn schema(&self) -> &[ParamShape];

    /// Must be deterministic for fixed parameters and batch.
    fn loss(&self, params: &ParamSet, batch: &Batch) -> Result<f64>;

    /// Loss and analytic gradient. The gradient has the model's schema at
    /// 64-bit width.
    fn gradient(&self, _params: &ParamSet, _batch: &Batch) -> Result<(f64, ParamSet)> {
        Err(ZoError::NoGradient)
    }
}

impl<M: Model + ?Sized> Model for &M {
    fn schema(&self) -> &[ParamShape] {
        (**self).schema()
    }
    fn loss(&self, params: &ParamSet, batch: &Batch) -> Result<f64> {
        (**self).loss(params, batch)
    }
    fn gradient(&self, params: &ParamSet, batch: &Batch) -> Result<(f64, ParamSet)> {
        (**self).gradient(params, batch)
    }
}

/// Cached schema digests at both widths, so a model can check its input
/// without allocating.
#[derive(Clone, Debug)]
pub(crate) struct SchemaCheck {
    shapes: Vec<ParamShape>,
    hash32: u64,
    hash64: u64,
}

impl SchemaCheck {
    pub(crate) fn new(shapes: Vec<ParamShape>) -> Self {
        let digest = |w| schema_digest(shapes.iter().map(|s| (s.name.as_str(), s.shape.as_slice())), w);
        let hash32 = digest(ElementWidth::F32);
        let hash64 = digest(ElementWidth::F64);
        Self { shapes, hash32, hash64 }
    }

    pub(crate) fn shapes(&self) -> &[ParamShape] {
        &self.shapes
    }

    pub(crate) fn check(&self, params: &ParamSet) -> Result<()> {
        let h = params.schema_hash();
        if h == self.hash64 || h == self.hash32 {
            Ok(())
        } else {
            Err(ZoError::SchemaMismatch(format!(
                "model expects {:?}",
                self.shapes.iter().map(|s| &s.name).collect::<Vec<_>>()
            )))
        }
    }

    pub(crate) fn zeros(&self) -> ParamSet {
        ParamSet::zeros(&self.shapes, ElementWidth::F64).expect("model schemas are valid")
    }
}

/// Something that maps a batch to per-output logits.
pub trait Classifier {
    fn schema(&self) -> &[ParamShape];
    fn classes(&self) -> usize;
    fn input_width(&self) -> usize;

    fn outputs_per_sample(&self) -> usize {
        1
    }

    /// Row-major `[len * outputs_per_sample, classes]` logits.
    fn logits(&self, params: &ParamSet, batch: &Batch) -> Result<Vec<f64>>;

    /// Vector-Jacobian product: the gradient of `Σ dlogits · logits` with
    /// respect to the parameters.
    fn logits_vjp(&self, params: &ParamSet, batch: &Batch, dlogits: &[f64]) -> Result<ParamSet>;

    /// Seeded initialization at the given width.
    fn init(&self, seed: u64, width: ElementWidth) -> ParamSet;

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.width() != self.input_width() || batch.outputs_per_sample() != self.outputs_per_sample() {
            return Err(ZoError::invalid(format!(
                "classifier expects width {} with {} outputs per sample, batch has {} and {}",
                self.input_width(),
                self.outputs_per_sample(),
                batch.width(),
                batch.outputs_per_sample()
            )));
        }
        if batch.is_empty() {
            return Err(ZoError::invalid("empty batch"));
        }
        Ok(())
    }
}

impl<C: Classifier + ?Sized> Classifier for &C {
    fn schema(&self) -> &[ParamShape] {
        (**self).schema()
    }
    fn classes(&self) -> usize {
        (**self).classes()
    }
    fn input_width(&self) -> usize {
        (**self).input_width()
    }
    fn outputs_per_sample(&self) -> usize {
        (**self).outputs_per_sample()
    }
    fn logits(&self, params: &ParamSet, batch: &Batch) -> Result<Vec<f64>> {
        (**self).logits(params, batch)
    }
    fn logits_vjp(&self, params: &ParamSet, batch: &Batch, dlogits: &[f64]) -> Result<ParamSet> {
        (**self).logits_vjp(params, batch, dlogits)
    }
    fn init(&self, seed: u64, width: ElementWidth) -> ParamSet {
        (**self).init(seed, width)
    }
}

/// Numerically stable log-softmax of one row, written into `out`.
pub fn log_softmax(row: &[f64], out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

/// Shannon entropy (nats) of `softmax(row)`.
pub fn entropy_of_logits(row: &[f64]) -> f64 {
    let mut lp = vec![0.0; row.len()];
    log_softmax(row, &mut lp);
    -lp.iter().map(|&l| l.exp() * l).sum::<f64>()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per output.
pub fn predict<C: Classifier>(clf: &C, params: &ParamSet, batch: &Batch) -> Result<Vec<usize>> {
    let logits = clf.logits(params, batch)?;
    Ok(logits.chunks(clf.classes()).map(argmax).collect())
}

/// Fraction of correct outputs for each sample.
pub fn per_sample_accuracy<C: Classifier>(clf: &C, params: &ParamSet, batch: &Batch) -> Result<Vec<f64>> {
    let labels = batch
        .labels()
        .ok_or_else(|| ZoError::invalid("accuracy needs a labeled batch"))?;
    let pred = predict(clf, params, batch)?;
    let k = clf.outputs_per_sample();
    Ok(pred
        .chunks(k)
        .zip(labels.chunks(k))
        .map(|(p, y)| p.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / k as f64)
        .collect())
}

pub fn accuracy<C: Classifier>(clf: &C, params: &ParamSet, batch: &Batch) -> Result<f64> {
    let acc = per_sample_accuracy(clf, params, batch)?;
    Ok(acc.iter().sum::<f64>() / acc.len() as f64)
}

/// Mean entropy of each sample's outputs.
pub fn per_sample_entropy<C: Classifier>(clf: &C, params: &ParamSet, batch: &Batch) -> Result<Vec<f64>> {
    let logits = clf.logits(params, batch)?;
    let k = clf.outputs_per_sample();
    let c = clf.classes();
    Ok(logits
        .chunks(c * k)
        .map(|s| s.chunks(c).map(entropy_of_logits).sum::<f64>() / k as f64)
        .collect())
}

/// Mean cross-entropy of the labels under `softmax(logits)`.
#[derive(Clone, Debug)]
pub struct CrossEntropy<C>(pub C);

impl<C: Classifier> Model for CrossEntropy<C> {
    fn schema(&self) -> &[ParamShape] {
        self.0.schema()
    }

    fn loss(&self, params: &ParamSet, batch: &Batch) -> Result<f64> {
        let labels = batch
            .labels()
            .ok_or_else(|| ZoError::invalid("cross-entropy needs labels"))?;
        let logits = self.0.logits(params, batch)?;
        let c = self.0.classes();
        let mut lp = vec![0.0; c];
        let mut total = 0.0;
        for (row, &y) in logits.chunks(c).zip(labels) {
            log_softmax(row, &mut lp);
            total -= lp[y];
        }
        Ok(total / labels.len() as f64)
    }

    fn gradient(&self, params: &ParamSet, batch: &Batch) -> Result<(f64, ParamSet)> {
        let labels = batch
            .labels()
            .ok_or_else(|| ZoError::invalid("cross-entropy needs labels"))?;
        let mut logits = self.0.logits(params, batch)?;
        let c = self.0.classes();
        let count = labels.len() as f64;
        let mut lp = vec![0.0; c];
        let mut total = 0.0;
        for (row, &y) in logits.chunks_mut(c).zip(labels) {
            log_softmax(row, &mut lp);
            total -= lp[y];
            for (g, &l) in row.iter_mut().zip(&lp) {
                *g = l.exp() / count;
            }
            row[y] -= 1.0 / count;
        }
        let grad = self.0.logits_vjp(params, batch, &logits)?;
        Ok((total / count, grad))
    }
}

/// Mean Shannon entropy of the predictive distributions, in nats. Labels, if
/// any, are ignored.
#[derive(Clone, Debug)]
pub struct Entropy<C>(pub C);

impl<C: Classifier> Model for Entropy<C> {
    fn schema(&self) -> &[ParamShape] {
        self.0.schema()
    }

    fn loss(&self, params: &ParamSet, batch: &Batch) -> Result<f64> {
        let logits = self.0.logits(params, batch)?;
        let c = self.0.classes();
        let rows = logits.len() / c;
        Ok(logits.chunks(c).map(entropy_of_logits).sum::<f64>() / rows as f64)
    }

    fn gradient(&self, params: &ParamSet, batch: &Batch) -> Result<(f64, ParamSet)> {
        let mut logits = self.0.logits(params, batch)?;
        let c = self.0.classes();
        let rows = (logits.len() / c) as f64;
        let mut lp = vec![0.0; c];
        let mut total = 0.0;
        for row in logits.chunks_mut(c) {
            log_softmax(row, &mut lp);
            let h = -lp.iter().map(|&l| l.exp() * l).sum::<f64>();
            total += h;
            // dH/dlogit_k = -p_k (log p_k + H)
            for (g, &l) in row.iter_mut().zip(&lp) {
                *g = -l.exp() * (l + h) / rows;
            }
        }
        let grad = self.0.logits_vjp(params, batch, &logits)?;
        Ok((total / rows, grad))
    }
}
