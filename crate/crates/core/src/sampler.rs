//! Perturbation directions.
//!
//! A direction is a pure function of `(seed, shape, kind)`. Each selected
//! tensor owns a slice of one Gaussian stream whose length
//! ([`stream_budget`]) depends only on the tensor's shape, so switching one
//! tensor between `Full` and `LowRank` never moves another tensor's slice.
//!
//! Low-rank layout: a tensor of shape `[m, n, rest..]` is treated as
//! `s = prod(rest)` stacked `m × n` matrices, where slice `c` holds the
//! elements with flat index `(a·n + b)·s + c`. Slice by slice, the stream
//! yields `U` (`m × r'`, row-major) then `W` (`n × r'`), and
//! `z[a, b, c] = Σ_k U[a, k] · W[b, k]` with `r' = min(r, m, n)`.
//! Tensors with fewer than two dimensions, or whose leading dimensions are
//! not both greater than one, use the full Gaussian direction whatever the
//! kind.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ZoError};
use crate::param_store::{checked_numel, ParamSet, Selection, Tensor};
use crate::rng::GaussianStream;

pub const DEFAULT_RANK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SamplerKind {
    /// Elementwise standard normal.
    #[default]
    Full,
    /// `U Wᵀ` per matrix slice. With `normalize`, the product is divided by
    /// `sqrt(r')` so entries have unit variance; off by default.
    LowRank {
        rank: usize,
        #[serde(default)]
        normalize: bool,
    },
}

impl SamplerKind {
    pub fn lowrank(rank: usize) -> Self {
        SamplerKind::LowRank { rank, normalize: false }
    }

    pub fn validate(self) -> Result<Self> {
        match self {
            SamplerKind::LowRank { rank: 0, .. } => Err(ZoError::invalid("low-rank sampler needs rank >= 1")),
            k => Ok(k),
        }
    }
}

/// One reproducible perturbation: seed, scale and sampler.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbSpec {
    pub seed: u64,
    pub epsilon: f64,
    pub kind: SamplerKind,
}

impl PerturbSpec {
    pub fn new(seed: u64, epsilon: f64, kind: SamplerKind) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(ZoError::invalid(format!("epsilon must be positive and finite, got {epsilon}")));
        }
        Ok(Self { seed, epsilon, kind: kind.validate()? })
    }
}

/// `(m, n, stack)` when the shape is treated as stacked matrices.
pub fn matrix_view(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [m, n, rest @ ..] if *m > 1 && *n > 1 => Some((*m, *n, rest.iter().product())),
        _ => None,
    }
}

/// Number of stream positions reserved for a tensor of this shape: enough for
/// either sampler at any rank, rounded up to an even count.
pub fn stream_budget(shape: &[usize]) -> u64 {
    let numel: u64 = shape.iter().map(|&d| d as u64).product();
    let lowrank = matrix_view(shape)
        .map(|(m, n, s)| (s * (m + n) * m.min(n)) as u64)
        .unwrap_or(0);
    let budget = numel.max(lowrank);
    budget + (budget & 1)
}

/// Streams the direction for one tensor, calling `f(flat_index, z)` once per
/// element. The stream must already sit at the tensor's slice.
///
/// Full directions visit elements in order and allocate nothing. Low-rank
/// directions allocate the two factors for one slice.
pub fn visit_direction<F: FnMut(usize, f64)>(
    stream: &mut GaussianStream,
    shape: &[usize],
    kind: SamplerKind,
    mut f: F,
) {
    let (rank, normalize) = match kind {
        SamplerKind::LowRank { rank, normalize } => (rank, normalize),
        SamplerKind::Full => (0, false),
    };
    let view = if rank > 0 { matrix_view(shape) } else { None };
    let Some((m, n, stack)) = view else {
        let numel: usize = shape.iter().product();
        for i in 0..numel {
            f(i, stream.next_normal());
        }
        return;
    };
    let r = rank.min(m).min(n);
    let scale = if normalize { 1.0 / (r as f64).sqrt() } else { 1.0 };
    let mut u = vec![0.0; m * r];
    let mut w = vec![0.0; n * r];
    for c in 0..stack {
        stream.fill(&mut u);
        stream.fill(&mut w);
        for a in 0..m {
            let ua = &u[a * r..(a + 1) * r];
            for b in 0..n {
                let wb = &w[b * r..(b + 1) * r];
                let z: f64 = ua.iter().zip(wb).map(|(x, y)| x * y).sum();
                f((a * n + b) * stack + c, z * scale);
            }
        }
    }
}

/// Standard-normal tensor read from `stream` in row-major order.
pub fn gaussian_fill(stream: &mut GaussianStream, shape: &[usize]) -> Result<Tensor> {
    let n = checked_numel(shape)?;
    let mut data = vec![0.0; n];
    stream.fill(&mut data);
    Tensor::from_vec(shape.to_vec(), data)
}

pub fn sample_full(stream: &mut GaussianStream, shape: &[usize]) -> Result<Tensor> {
    gaussian_fill(stream, shape)
}

/// `U Wᵀ` for a single `m × n` matrix (unnormalized).
pub fn sample_lowrank(stream: &mut GaussianStream, m: usize, n: usize, r: usize) -> Result<Tensor> {
    if r == 0 {
        return Err(ZoError::invalid("low-rank sampler needs rank >= 1"));
    }
    let shape = [m, n];
    checked_numel(&shape)?;
    if m == 1 || n == 1 {
        // matrix_view would fall back; build the product directly.
        let r = r.min(m).min(n);
        let mut u = vec![0.0; m * r];
        let mut w = vec![0.0; n * r];
        stream.fill(&mut u);
        stream.fill(&mut w);
        let mut data = Vec::with_capacity(m * n);
        for a in 0..m {
            for b in 0..n {
                data.push((0..r).map(|k| u[a * r + k] * w[b * r + k]).sum());
            }
        }
        return Tensor::from_vec(shape.to_vec(), data);
    }
    sample_for_tensor(stream, &shape, SamplerKind::lowrank(r))
}

pub fn sample_for_tensor(stream: &mut GaussianStream, shape: &[usize], kind: SamplerKind) -> Result<Tensor> {
    let n = checked_numel(shape)?;
    kind.validate()?;
    let mut data = vec![0.0; n];
    visit_direction(stream, shape, kind, |i, z| data[i] = z);
    Tensor::from_vec(shape.to_vec(), data)
}

/// Materializes the full direction of `spec` over `selection`, one tensor per
/// selected slot. Allocates all of `z`; meant for tests and diagnostics, not
/// for the optimizer.
pub fn materialize(params: &ParamSet, selection: &Selection, spec: &PerturbSpec) -> Result<Vec<Tensor>> {
    selection.check(params)?;
    let mut stream = GaussianStream::new(spec.seed);
    selection
        .slots()
        .iter()
        .map(|slot| {
            stream.seek(slot.stream_offset);
            sample_for_tensor(&mut stream, params.tensor(slot.index).shape(), spec.kind)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn singular_values(t: &Tensor, m: usize, n: usize) -> Vec<f64> {
        let mat = DMatrix::from_row_slice(m, n, &t.values());
        let mut sv: Vec<f64> = mat.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        sv
    }

    fn numerical_rank(sv: &[f64]) -> usize {
        sv.iter().filter(|&&s| s > 1e-10 * sv[0]).count()
    }

    #[test]
    fn budgets() {
        assert_eq!(stream_budget(&[10]), 10);
        assert_eq!(stream_budget(&[3]), 4);
        assert_eq!(stream_budget(&[1, 7]), 8);
        // 4x3: numel 12, factors (4+3)*3 = 21 -> 22
        assert_eq!(stream_budget(&[4, 3]), 22);
        // 64x100: factors (64+100)*64 exceed numel
        assert_eq!(stream_budget(&[64, 100]), 10496);
        assert_eq!(stream_budget(&[3, 2, 5]), 50);
    }

    #[test]
    fn rank_one_minors_vanish() {
        let mut s = GaussianStream::new(11);
        let z = sample_lowrank(&mut s, 4, 3, 1).unwrap();
        let v = z.values();
        let at = |a: usize, b: usize| v[a * 3 + b];
        let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for a in 0..4 {
            for a2 in a + 1..4 {
                for b in 0..3 {
                    for b2 in b + 1..3 {
                        let minor = at(a, b) * at(a2, b2) - at(a, b2) * at(a2, b);
                        assert!(minor.abs() <= 1e-10 * scale * scale, "minor {minor}");
                    }
                }
            }
        }
    }

    #[test]
    fn full_rank_when_rank_covers_dims() {
        let mut s = GaussianStream::new(5);
        let z = sample_lowrank(&mut s, 5, 5, 5).unwrap();
        let sv = singular_values(&z, 5, 5);
        assert!(sv[4] > 1e-6 * sv[0], "{sv:?}");
    }

    #[test]
    fn lowrank_on_6x8_has_rank_at_most_two() {
        for seed in 0..20 {
            let mut s = GaussianStream::new(seed);
            let z = sample_for_tensor(&mut s, &[6, 8], SamplerKind::lowrank(2)).unwrap();
            assert!(numerical_rank(&singular_values(&z, 6, 8)) <= 2);
        }
    }

    #[test]
    fn stacked_slices_each_low_rank() {
        let mut s = GaussianStream::new(9);
        let z = sample_for_tensor(&mut s, &[5, 4, 3], SamplerKind::lowrank(1)).unwrap();
        let v = z.values();
        for c in 0..3 {
            let slice: Vec<f64> = (0..20).map(|i| v[i * 3 + c]).collect();
            let t = Tensor::from_vec(vec![5, 4], slice).unwrap();
            assert_eq!(numerical_rank(&singular_values(&t, 5, 4)), 1);
        }
    }

    #[test]
    fn one_dim_lowrank_falls_back_to_full() {
        let full = sample_full(&mut GaussianStream::new(3), &[10]).unwrap();
        let lr = sample_for_tensor(&mut GaussianStream::new(3), &[10], SamplerKind::lowrank(2)).unwrap();
        assert_eq!(full, lr);
        let thin = sample_for_tensor(&mut GaussianStream::new(3), &[1, 10], SamplerKind::lowrank(2)).unwrap();
        assert_eq!(thin.values(), full.values());
    }

    #[test]
    fn full_kind_matches_sample_full() {
        let a = sample_for_tensor(&mut GaussianStream::new(8), &[3, 4], SamplerKind::Full).unwrap();
        let b = sample_full(&mut GaussianStream::new(8), &[3, 4]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lowrank_entry_variance_is_effective_rank() {
        // E[(U Wᵀ)_ab²] = r' for i.i.d. standard-normal factors.
        let draws = 100_000;
        for (r, expected) in [(1usize, 1.0), (3, 3.0), (9, 4.0)] {
            let mut s = GaussianStream::new(r as u64 + 100);
            let mut sum = 0.0;
            let mut sq = 0.0;
            for _ in 0..draws {
                let z = sample_lowrank(&mut s, 4, 5, r).unwrap();
                let x = z.get(7);
                sum += x;
                sq += x * x;
            }
            let mean = sum / draws as f64;
            let var = sq / draws as f64 - mean * mean;
            assert!((var / expected - 1.0).abs() < 0.03, "r={r} var={var}");
        }
    }

    #[test]
    fn lowrank_normalize_gives_unit_variance() {
        let kind = SamplerKind::LowRank { rank: 3, normalize: true };
        let mut s = GaussianStream::new(77);
        let mut sq = 0.0;
        let draws = 40_000;
        for _ in 0..draws {
            let z = sample_for_tensor(&mut s, &[4, 4], kind).unwrap();
            sq += z.get(5).powi(2);
        }
        assert!((sq / draws as f64 - 1.0).abs() < 0.05);
    }

    #[test]
    fn gaussian_fill_moments() {
        let z = gaussian_fill(&mut GaussianStream::new(2024), &[1_000_000]).unwrap();
        let v = z.values();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 4.0 / n.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn neighbouring_seeds_have_small_independent_means() {
        let a = gaussian_fill(&mut GaussianStream::new(42), &[1000]).unwrap();
        let b = gaussian_fill(&mut GaussianStream::new(43), &[1000]).unwrap();
        let ma = a.values().iter().sum::<f64>() / 1000.0;
        let mb = b.values().iter().sum::<f64>() / 1000.0;
        assert_ne!(ma, mb);
        assert!(ma.abs() < 0.1 && mb.abs() < 0.1);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(PerturbSpec::new(1, 0.0, SamplerKind::Full).is_err());
        assert!(PerturbSpec::new(1, f64::NAN, SamplerKind::Full).is_err());
        assert!(PerturbSpec::new(1, 1e-3, SamplerKind::lowrank(0)).is_err());
        assert!(gaussian_fill(&mut GaussianStream::new(1), &[0]).is_err());
        assert!(gaussian_fill(&mut GaussianStream::new(1), &[]).is_err());
    }
}
