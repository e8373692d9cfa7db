use super::{Batch, Classifier, SchemaCheck};
use crate::error::{invalid_if, Result};
use crate::param_store::{ElementWidth, ParamSet, ParamShape, Tensor};
use crate::rng::{derive_seed, domain, DataRng};

/// Gaussian weights scaled by `1/sqrt(fan_in)` (`fan_in` = second dim),
/// zero vectors.
fn default_init(schema: &[ParamShape], seed: u64, width: ElementWidth) -> ParamSet {
    let mut rng = DataRng::new(derive_seed(seed, domain::INIT, 0, 0));
    let entries = schema
        .iter()
        .map(|p| {
            let n: usize = p.shape.iter().product();
            let data = if p.shape.len() >= 2 {
                let scale = 1.0 / (p.shape[1] as f64).sqrt();
                (0..n).map(|_| rng.normal() * scale).collect()
            } else {
                vec![0.0; n]
            };
            let t = Tensor::from_vec(p.shape.clone(), data).expect("schema shapes are valid");
            (p.name.clone(), t.to_width(width))
        })
        .collect();
    ParamSet::new(entries).expect("schema names are unique")
}

fn fill(set: &mut ParamSet, index: usize) -> &mut [f64] {
    set.tensor_mut(index).as_f64_mut().expect("gradients are 64-bit")
}

/// `y = W x + b`, accumulating into `out`.
#[inline]
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks(n_in).zip(b)) {
        *o = bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Accumulates `dW += dy xᵀ`, `db += dy` and, if asked, `dx = Wᵀ dy`.
#[inline]
fn affine_back(w: &[f64], x: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64], dx: Option<&mut [f64]>) {
    let n_in = x.len();
    for (k, &g) in dy.iter().enumerate() {
        db[k] += g;
        for (d, &xi) in dw[k * n_in..(k + 1) * n_in].iter_mut().zip(x) {
            *d += g * xi;
        }
    }
    if let Some(dx) = dx {
        dx.fill(0.0);
        for (k, &g) in dy.iter().enumerate() {
            for (d, &wi) in dx.iter_mut().zip(&w[k * n_in..(k + 1) * n_in]) {
                *d += g * wi;
            }
        }
    }
}

/// Multinomial logistic regression: `weight` `[C, d]`, `bias` `[C]`.
#[derive(Clone, Debug)]
pub struct LogisticRegression {
    dim: usize,
    classes: usize,
    schema: SchemaCheck,
}

impl LogisticRegression {
    pub fn new(dim: usize, classes: usize) -> Result<Self> {
        invalid_if(dim == 0 || classes < 2, "logistic regression needs d >= 1 and >= 2 classes")?;
        let schema = SchemaCheck::new(vec![
            ParamShape::new("weight", vec![classes, dim]),
            ParamShape::new("bias", vec![classes]),
        ]);
        Ok(Self { dim, classes, schema })
    }
}

impl Classifier for LogisticRegression {
    fn schema(&self) -> &[ParamShape] {
        self.schema.shapes()
    }
    fn classes(&self) -> usize {
        self.classes
    }
    fn input_width(&self) -> usize {
        self.dim
    }

    fn logits(&self, params: &ParamSet, batch: &Batch) -> Result<Vec<f64>> {
        self.schema.check(params)?;
        self.check_batch(batch)?;
        let w = params.tensor(0).values();
        let b = params.tensor(1).values();
        let mut out = vec![0.0; batch.len() * self.classes];
        for (i, o) in out.chunks_mut(self.classes).enumerate() {
            affine(&w, &b, batch.row(i), o);
        }
        Ok(out)
    }

    fn logits_vjp(&self, params: &ParamSet, batch: &Batch, dlogits: &[f64]) -> Result<ParamSet> {
        self.schema.check(params)?;
        self.check_batch(batch)?;
        let w = params.tensor(0).values();
        let mut grad = self.schema.zeros();
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; self.classes];
        for (i, dy) in dlogits.chunks(self.classes).enumerate() {
            affine_back(&w, batch.row(i), dy, &mut dw, &mut db, None);
        }
        fill(&mut grad, 0).copy_from_slice(&dw);
        fill(&mut grad, 1).copy_from_slice(&db);
        Ok(grad)
    }

    fn init(&self, seed: u64, width: ElementWidth) -> ParamSet {
        default_init(self.schema(), seed, width)
    }
}

/// Fully connected tanh network. `dims = [input, hidden.., classes]`; layer
/// `i` has `layer{i}.weight` `[dims[i+1], dims[i]]` and `layer{i}.bias`.
#[derive(Clone, Debug)]
pub struct Mlp {
    dims: Vec<usize>,
    schema: SchemaCheck,
}

impl Mlp {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        invalid_if(dims.len() < 2, "an MLP needs at least input and output sizes")?;
        invalid_if(dims.contains(&0), "MLP layer sizes must be positive")?;
        invalid_if(*dims.last().unwrap() < 2, "an MLP classifier needs >= 2 classes")?;
        let mut shapes = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            shapes.push(ParamShape::new(format!("layer{i}.weight"), vec![w[1], w[0]]));
            shapes.push(ParamShape::new(format!("layer{i}.bias"), vec![w[1]]));
        }
        Ok(Self { dims, schema: SchemaCheck::new(shapes) })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// Activations of every layer for one sample; the last entry is the
    /// logits.
    fn forward(&self, weights: &[(Vec<f64>, Vec<f64>)], x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for (l, (w, b)) in weights.iter().enumerate() {
            let mut y = vec![0.0; self.dims[l + 1]];
            affine(w, b, acts.last().unwrap(), &mut y);
            if l + 1 < self.layers() {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(y);
        }
        acts
    }

    fn weights(&self, params: &ParamSet) -> Vec<(Vec<f64>, Vec<f64>)> {
        (0..self.layers())
            .map(|l| {
                (
                    params.tensor(2 * l).values().into_owned(),
                    params.tensor(2 * l + 1).values().into_owned(),
                )
            })
            .collect()
    }
}

impl Classifier for Mlp {
    fn schema(&self) -> &[ParamShape] {
        self.schema.shapes()
    }
    fn classes(&self) -> usize {
        *self.dims.last().unwrap()
    }
    fn input_width(&self) -> usize {
        self.dims[0]
    }

    fn logits(&self, params: &ParamSet, batch: &Batch) -> Result<Vec<f64>> {
        self.schema.check(params)?;
        self.check_batch(batch)?;
        let weights = self.weights(params);
        let mut out = Vec::with_capacity(batch.len() * self.classes());
        for i in 0..batch.len() {
            out.extend(self.forward(&weights, batch.row(i)).pop().unwrap());
        }
        Ok(out)
    }

    fn logits_vjp(&self, params: &ParamSet, batch: &Batch, dlogits: &[f64]) -> Result<ParamSet> {
        self.schema.check(params)?;
        self.check_batch(batch)?;
        let weights = self.weights(params);
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> =
            weights.iter().map(|(w, b)| (vec![0.0; w.len()], vec![0.0; b.len()])).collect();
        for (i, dy) in dlogits.chunks(self.classes()).enumerate() {
            let acts = self.forward(&weights, batch.row(i));
            let mut delta = dy.to_vec();
            for l in (0..self.layers()).rev() {
                let x = &acts[l];
                let mut dx = vec![0.0; x.len()];
                let (dw, db) = &mut grads[l];
                affine_back(&weights[l].0, x, &delta, dw, db, (l > 0).then_some(dx.as_mut_slice()));
                if l > 0 {
                    // x = tanh(pre)
                    for (d, a) in dx.iter_mut().zip(x) {
                        *d *= 1.0 - a * a;
                    }
                }
                delta = dx;
            }
        }
        let mut grad = self.schema.zeros();
        for (l, (dw, db)) in grads.iter().enumerate() {
            fill(&mut grad, 2 * l).copy_from_slice(dw);
            fill(&mut grad, 2 * l + 1).copy_from_slice(db);
        }
        Ok(grad)
    }

    fn init(&self, seed: u64, width: ElementWidth) -> ParamSet {
        default_init(self.schema(), seed, width)
    }
}

/// Frame-sequence classifier with one prediction per frame.
///
/// Each `feat_dim`-wide frame `x` goes through
///
/// ```text
/// u = feat.scale ⊙ x + feat.shift
/// h = head.proj.weight · u + head.proj.bias
/// a = tanh(norm.gain ⊙ layernorm(h) + norm.bias)
/// logits = head.out.weight · a + head.out.bias
/// ```
///
/// `feat.*` plays the role of a front-end feature extractor and `norm.*` of
/// the normalization layers; together they are the usual adaptation mask.
#[derive(Clone, Debug)]
pub struct SeqClassifier {
    frames: usize,
    feat_dim: usize,
    hidden: usize,
    classes: usize,
    input_scale: f64,
    schema: SchemaCheck,
}

const LN_EPS: f64 = 1e-5;

const FEAT_SCALE: usize = 0;
const FEAT_SHIFT: usize = 1;
const PROJ_W: usize = 2;
const PROJ_B: usize = 3;
const NORM_GAIN: usize = 4;
const NORM_BIAS: usize = 5;
const OUT_W: usize = 6;
const OUT_B: usize = 7;

struct SeqWeights {
    scale: Vec<f64>,
    shift: Vec<f64>,
    proj_w: Vec<f64>,
    proj_b: Vec<f64>,
    gain: Vec<f64>,
    nbias: Vec<f64>,
    out_w: Vec<f64>,
    out_b: Vec<f64>,
}

/// Intermediates of one frame, kept for the backward pass.
struct FrameCache {
    u: Vec<f64>,
    hhat: Vec<f64>,
    inv_std: f64,
    a: Vec<f64>,
}

impl SeqClassifier {
    pub fn new(frames: usize, feat_dim: usize, hidden: usize, classes: usize) -> Result<Self> {
        invalid_if(frames == 0 || feat_dim == 0 || hidden < 2, "sequence classifier dims must be positive (hidden >= 2)")?;
        invalid_if(classes < 2, "sequence classifier needs >= 2 classes")?;
        let schema = SchemaCheck::new(vec![
            ParamShape::new("feat.scale", vec![feat_dim]),
            ParamShape::new("feat.shift", vec![feat_dim]),
            ParamShape::new("head.proj.weight", vec![hidden, feat_dim]),
            ParamShape::new("head.proj.bias", vec![hidden]),
            ParamShape::new("norm.gain", vec![hidden]),
            ParamShape::new("norm.bias", vec![hidden]),
            ParamShape::new("head.out.weight", vec![classes, hidden]),
            ParamShape::new("head.out.bias", vec![classes]),
        ]);
        Ok(Self { frames, feat_dim, hidden, classes, input_scale: 1.0, schema })
    }

    /// Initial value of every `feat.scale` entry (default 1).
    pub fn with_input_scale(mut self, scale: f64) -> Self {
        self.input_scale = scale;
        self
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    fn weights(&self, params: &ParamSet) -> SeqWeights {
        let v = |i: usize| params.tensor(i).values().into_owned();
        SeqWeights {
            scale: v(FEAT_SCALE),
            shift: v(FEAT_SHIFT),
            proj_w: v(PROJ_W),
            proj_b: v(PROJ_B),
            gain: v(NORM_GAIN),
            nbias: v(NORM_BIAS),
            out_w: v(OUT_W),
            out_b: v(OUT_B),
        }
    }

    fn frame(&self, w: &SeqWeights, x: &[f64], logits: &mut [f64]) -> FrameCache {
        let u: Vec<f64> = x
            .iter()
            .zip(w.scale.iter().zip(&w.shift))
            .map(|(x, (s, t))| s * x + t)
            .collect();
        let mut h = vec![0.0; self.hidden];
        affine(&w.proj_w, &w.proj_b, &u, &mut h);
        let n = self.hidden as f64;
        let mean = h.iter().sum::<f64>() / n;
        let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        let hhat: Vec<f64> = h.iter().map(|v| (v - mean) * inv_std).collect();
        let a: Vec<f64> = hhat
            .iter()
            .zip(w.gain.iter().zip(&w.nbias))
            .map(|(h, (g, b))| (g * h + b).tanh())
            .collect();
        affine(&w.out_w, &w.out_b, &a, logits);
        FrameCache { u, hhat, inv_std, a }
    }
}

impl Classifier for SeqClassifier {
    fn schema(&self) -> &[ParamShape] {
        self.schema.shapes()
    }
    fn classes(&self) -> usize {
        self.classes
    }
    fn input_width(&self) -> usize {
        self.frames * self.feat_dim
    }
    fn outputs_per_sample(&self) -> usize {
        self.frames
    }

    fn logits(&self, params: &ParamSet, batch: &Batch) -> Result<Vec<f64>> {
        self.schema.check(params)?;
        self.check_batch(batch)?;
        let w = self.weights(params);
        let mut out = vec![0.0; batch.len() * self.frames * self.classes];
        for (x, o) in batch
            .inputs()
            .chunks(self.feat_dim)
            .zip(out.chunks_mut(self.classes))
        {
            self.frame(&w, x, o);
        }
        Ok(out)
    }

    fn logits_vjp(&self, params: &ParamSet, batch: &Batch, dlogits: &[f64]) -> Result<ParamSet> {
        self.schema.check(params)?;
        self.check_batch(batch)?;
        let w = self.weights(params);
        let (d, hd, c) = (self.feat_dim, self.hidden, self.classes);
        let mut g_scale = vec![0.0; d];
        let mut g_shift = vec![0.0; d];
        let mut g_pw = vec![0.0; hd * d];
        let mut g_pb = vec![0.0; hd];
        let mut g_gain = vec![0.0; hd];
        let mut g_nb = vec![0.0; hd];
        let mut g_ow = vec![0.0; c * hd];
        let mut g_ob = vec![0.0; c];
        let mut logits = vec![0.0; c];
        let mut da = vec![0.0; hd];
        let mut du = vec![0.0; d];
        for (x, dy) in batch.inputs().chunks(d).zip(dlogits.chunks(c)) {
            let cache = self.frame(&w, x, &mut logits);
            affine_back(&w.out_w, &cache.a, dy, &mut g_ow, &mut g_ob, Some(&mut da));
            // through tanh and the gain/bias
            let mut dhhat = vec![0.0; hd];
            for k in 0..hd {
                let dpre = da[k] * (1.0 - cache.a[k] * cache.a[k]);
                g_gain[k] += dpre * cache.hhat[k];
                g_nb[k] += dpre;
                dhhat[k] = dpre * w.gain[k];
            }
            // layer norm: dh = (dĥ - mean(dĥ) - ĥ·mean(dĥ⊙ĥ)) / σ
            let n = hd as f64;
            let m1 = dhhat.iter().sum::<f64>() / n;
            let m2 = dhhat.iter().zip(&cache.hhat).map(|(a, b)| a * b).sum::<f64>() / n;
            let dh: Vec<f64> = dhhat
                .iter()
                .zip(&cache.hhat)
                .map(|(g, h)| (g - m1 - h * m2) * cache.inv_std)
                .collect();
            affine_back(&w.proj_w, &cache.u, &dh, &mut g_pw, &mut g_pb, Some(&mut du));
            for j in 0..d {
                g_scale[j] += du[j] * x[j];
                g_shift[j] += du[j];
            }
        }
        let mut grad = self.schema.zeros();
        for (i, g) in [g_scale, g_shift, g_pw, g_pb, g_gain, g_nb, g_ow, g_ob].iter().enumerate() {
            fill(&mut grad, i).copy_from_slice(g);
        }
        Ok(grad)
    }

    fn init(&self, seed: u64, width: ElementWidth) -> ParamSet {
        let mut p = default_init(self.schema(), seed, ElementWidth::F64);
        fill(&mut p, FEAT_SCALE).fill(self.input_scale);
        fill(&mut p, NORM_GAIN).fill(1.0);
        p.to_width(width)
    }
}
