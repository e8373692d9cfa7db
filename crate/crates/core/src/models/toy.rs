//! Closed-form losses over a single parameter vector `theta`. They ignore
//! their batch.

use super::{Batch, Model, SchemaCheck};
use crate::error::{invalid_if, Result, ZoError};
use crate::param_store::{ParamSet, ParamShape, Tensor};
use crate::rng::DataRng;

fn theta_schema(d: usize) -> SchemaCheck {
    SchemaCheck::new(vec![ParamShape::new("theta", vec![d])])
}

fn gradient_set(values: Vec<f64>) -> ParamSet {
    let d = values.len();
    ParamSet::new(vec![("theta".into(), Tensor::from_vec(vec![d], values).expect("length matches"))])
        .expect("one entry")
}

/// `L(θ) = ½ θᵀAθ − bᵀθ` with `A = Q diag(λ) Qᵀ` positive definite.
#[derive(Clone, Debug)]
pub struct QuadraticBowl {
    schema: SchemaCheck,
    spectrum: Vec<f64>,
    b: Vec<f64>,
    /// Row-major orthogonal `Q`; `None` means `A` is diagonal.
    rotation: Option<Vec<f64>>,
}

impl QuadraticBowl {
    /// `A = I`, `b = 0`, so `∇L = θ`.
    pub fn identity(d: usize) -> Result<Self> {
        Self::diagonal(vec![1.0; d], vec![0.0; d])
    }

    pub fn diagonal(spectrum: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        invalid_if(spectrum.is_empty(), "quadratic bowl needs d >= 1")?;
        invalid_if(spectrum.len() != b.len(), "spectrum and b differ in length")?;
        if let Some(bad) = spectrum.iter().find(|&&l| !(l > 0.0 && l.is_finite())) {
            return Err(ZoError::invalid(format!("spectrum must be positive (got {bad}); A would not be positive definite")));
        }
        Ok(Self { schema: theta_schema(spectrum.len()), spectrum, b, rotation: None })
    }

    /// `A = Q diag(spectrum) Qᵀ` with `Q` a seeded random orthogonal matrix.
    pub fn rotated(spectrum: Vec<f64>, b: Vec<f64>, seed: u64) -> Result<Self> {
        let mut bowl = Self::diagonal(spectrum, b)?;
        bowl.rotation = Some(random_orthogonal(bowl.dim(), seed));
        Ok(bowl)
    }

    /// Geometric spectrum from 1 to `condition`, rotated, with `b = 0`.
    pub fn conditioned(d: usize, condition: f64, seed: u64) -> Result<Self> {
        invalid_if(!(condition >= 1.0), "condition number must be >= 1")?;
        let spectrum = (0..d)
            .map(|i| if d == 1 { 1.0 } else { condition.powf(i as f64 / (d - 1) as f64) })
            .collect();
        Self::rotated(spectrum, vec![0.0; d], seed)
    }

    pub fn dim(&self) -> usize {
        self.spectrum.len()
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    /// `A⁻¹ b`.
    pub fn minimizer(&self) -> Vec<f64> {
        let bq = self.to_eigen(&self.b);
        let y: Vec<f64> = bq.iter().zip(&self.spectrum).map(|(b, l)| b / l).collect();
        self.to_original_basis(&y)
    }

    pub fn minimum(&self) -> f64 {
        let x = self.minimizer();
        -0.5 * x.iter().zip(&self.b).map(|(x, b)| x * b).sum::<f64>()
    }

    /// `A θ`.
    pub fn apply(&self, theta: &[f64]) -> Vec<f64> {
        let y = self.to_eigen(theta);
        let ly: Vec<f64> = y.iter().zip(&self.spectrum).map(|(y, l)| y * l).collect();
        self.to_original_basis(&ly)
    }

    fn to_eigen(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim();
        match &self.rotation {
            None => v.to_vec(),
            // Qᵀ v
            Some(q) => (0..d).map(|k| (0..d).map(|i| q[i * d + k] * v[i]).sum()).collect(),
        }
    }

    fn to_original_basis(&self, y: &[f64]) -> Vec<f64> {
        let d = self.dim();
        match &self.rotation {
            None => y.to_vec(),
            Some(q) => (0..d).map(|i| (0..d).map(|k| q[i * d + k] * y[k]).sum()).collect(),
        }
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let lin: f64 = theta.iter().zip(&self.b).map(|(t, b)| t * b).sum();
        let quad: f64 = match &self.rotation {
            None => theta.iter().zip(&self.spectrum).map(|(t, l)| l * t * t).sum(),
            Some(_) => {
                let y = self.to_eigen(theta);
                y.iter().zip(&self.spectrum).map(|(y, l)| l * y * y).sum()
            }
        };
        0.5 * quad - lin
    }
}

impl Model for QuadraticBowl {
    fn schema(&self) -> &[ParamShape] {
        self.schema.shapes()
    }

    fn loss(&self, params: &ParamSet, _batch: &Batch) -> Result<f64> {
        self.schema.check(params)?;
        Ok(self.value(&params.tensor(0).values()))
    }

    fn gradient(&self, params: &ParamSet, _batch: &Batch) -> Result<(f64, ParamSet)> {
        self.schema.check(params)?;
        let theta = params.tensor(0).values();
        let g: Vec<f64> = self.apply(&theta).iter().zip(&self.b).map(|(a, b)| a - b).collect();
        Ok((self.value(&theta), gradient_set(g)))
    }
}

/// Modified Gram–Schmidt on a Gaussian matrix; columns of the result are
/// orthonormal.
fn random_orthogonal(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = DataRng::new(seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(c) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut q = vec![0.0; d * d];
    for (k, c) in cols.iter().enumerate() {
        for i in 0..d {
            q[i * d + k] = c[i];
        }
    }
    q
}

/// `L(θ) = cᵀθ`.
#[derive(Clone, Debug)]
pub struct LinearLoss {
    schema: SchemaCheck,
    c: Vec<f64>,
}

impl LinearLoss {
    pub fn new(c: Vec<f64>) -> Result<Self> {
        invalid_if(c.is_empty(), "linear loss needs d >= 1")?;
        Ok(Self { schema: theta_schema(c.len()), c })
    }
}

impl Model for LinearLoss {
    fn schema(&self) -> &[ParamShape] {
        self.schema.shapes()
    }

    fn loss(&self, params: &ParamSet, _batch: &Batch) -> Result<f64> {
        self.schema.check(params)?;
        Ok(params.tensor(0).values().iter().zip(&self.c).map(|(t, c)| t * c).sum())
    }

    fn gradient(&self, params: &ParamSet, batch: &Batch) -> Result<(f64, ParamSet)> {
        Ok((self.loss(params, batch)?, gradient_set(self.c.clone())))
    }
}

/// `L ≡ value` over an arbitrary schema.
#[derive(Clone, Debug)]
pub struct ConstantLoss {
    schema: SchemaCheck,
    value: f64,
}

impl ConstantLoss {
    pub fn new(schema: Vec<ParamShape>, value: f64) -> Self {
        Self { schema: SchemaCheck::new(schema), value }
    }
}

impl Model for ConstantLoss {
    fn schema(&self) -> &[ParamShape] {
        self.schema.shapes()
    }

    fn loss(&self, params: &ParamSet, _batch: &Batch) -> Result<f64> {
        self.schema.check(params)?;
        Ok(self.value)
    }

    fn gradient(&self, params: &ParamSet, batch: &Batch) -> Result<(f64, ParamSet)> {
        Ok((self.loss(params, batch)?, self.schema.zeros()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param_store::ElementWidth;

    fn theta(v: Vec<f64>) -> ParamSet {
        gradient_set(v)
    }

    #[test]
    fn diagonal_minimizer_is_b_over_lambda() {
        let bowl = QuadraticBowl::diagonal(vec![1.0, 2.0, 4.0], vec![1.0, 1.0, 2.0]).unwrap();
        assert_eq!(bowl.minimizer(), vec![1.0, 0.5, 0.5]);
        let (_, g) = bowl.gradient(&theta(bowl.minimizer()), &Batch::empty()).unwrap();
        assert!(g.max_abs() < 1e-15);
    }

    #[test]
    fn rejects_non_positive_definite() {
        assert!(QuadraticBowl::diagonal(vec![1.0, 0.0], vec![0.0; 2]).is_err());
        assert!(QuadraticBowl::diagonal(vec![1.0, -3.0], vec![0.0; 2]).is_err());
        assert!(QuadraticBowl::diagonal(vec![], vec![]).is_err());
    }

    #[test]
    fn rotation_is_orthogonal() {
        let d = 6;
        let q = random_orthogonal(d, 3);
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d).map(|k| q[k * d + i] * q[k * d + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotated_minimizer_zeroes_gradient() {
        let bowl = QuadraticBowl::rotated(vec![1.0, 3.0, 10.0, 0.5], vec![1.0, -2.0, 0.3, 4.0], 9).unwrap();
        let (_, g) = bowl.gradient(&theta(bowl.minimizer()), &Batch::empty()).unwrap();
        assert!(g.max_abs() < 1e-12);
        let l = bowl.loss(&theta(bowl.minimizer()), &Batch::empty()).unwrap();
        assert!((l - bowl.minimum()).abs() < 1e-12);
    }

    #[test]
    fn identity_gradient_is_theta() {
        let bowl = QuadraticBowl::identity(3).unwrap();
        let (l, g) = bowl.gradient(&theta(vec![1.0, -2.0, 3.0]), &Batch::empty()).unwrap();
        assert_eq!(l, 7.0);
        assert_eq!(g.tensor(0).values().as_ref(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn accepts_f32_params() {
        let bowl = QuadraticBowl::identity(2).unwrap();
        let p = theta(vec![1.0, 1.0]).to_width(ElementWidth::F32);
        assert_eq!(bowl.loss(&p, &Batch::empty()).unwrap(), 1.0);
    }

    #[test]
    fn schema_mismatch_is_reported() {
        let bowl = QuadraticBowl::identity(3).unwrap();
        let err = bowl.loss(&theta(vec![1.0, 2.0]), &Batch::empty()).unwrap_err();
        assert!(matches!(err, ZoError::SchemaMismatch(_)));
    }
}
