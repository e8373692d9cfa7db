use nalgebra::DMatrix;
use proptest::prelude::*;
use zo_core::param_store::{axpy, perturb_inplace};
use zo_core::rng::GaussianStream;
use zo_core::sampler::{materialize, sample_for_tensor, sample_full, sample_lowrank};
use zo_core::{ElementWidth, ParamSet, PerturbSpec, SamplerKind, Selection, Tensor};

fn build(shapes: &[(&str, Vec<usize>)], fill_seed: u64, width: ElementWidth) -> ParamSet {
    let mut s = GaussianStream::new(fill_seed);
    let entries = shapes
        .iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let v: Vec<f64> = (0..n).map(|_| 3.0 * s.next_normal()).collect();
            (name.to_string(), Tensor::from_vec(shape.clone(), v).unwrap().to_width(width))
        })
        .collect();
    ParamSet::new(entries).unwrap()
}

fn shapes_strategy() -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(1usize..7, 1..4), 1..4)
}

fn named(shapes: &[Vec<usize>]) -> Vec<(String, Vec<usize>)> {
    shapes.iter().enumerate().map(|(i, s)| (format!("t{i}"), s.clone())).collect()
}

fn kind_strategy() -> impl Strategy<Value = SamplerKind> {
    prop_oneof![
        Just(SamplerKind::Full),
        (1usize..4).prop_map(SamplerKind::lowrank),
        (1usize..4).prop_map(|rank| SamplerKind::LowRank { rank, normalize: true }),
    ]
}

fn width_strategy() -> impl Strategy<Value = ElementWidth> {
    prop_oneof![Just(ElementWidth::F64), Just(ElementWidth::F32)]
}

fn as_refs(v: &[(String, Vec<usize>)]) -> Vec<(&str, Vec<usize>)> {
    v.iter().map(|(n, s)| (n.as_str(), s.clone())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cycle_restores_within_bound(
        shapes in shapes_strategy(),
        seed in any::<u64>(),
        fill in any::<u64>(),
        eps in 1e-6f64..1.0,
        kind in kind_strategy(),
        width in width_strategy(),
    ) {
        let names = named(&shapes);
        let original = build(&as_refs(&names), fill, width);
        let mut p = original.clone();
        let sel = Selection::all(&p);
        let spec = PerturbSpec::new(seed, eps, kind).unwrap();
        let z = materialize(&p, &sel, &spec).unwrap();
        perturb_inplace(&mut p, &sel, eps, &spec).unwrap();
        perturb_inplace(&mut p, &sel, -2.0 * eps, &spec).unwrap();
        perturb_inplace(&mut p, &sel, eps, &spec).unwrap();
        let me = width.machine_epsilon();
        for i in 0..p.len() {
            for k in 0..p.tensor(i).len() {
                let theta = original.tensor(i).get(k);
                let bound = 8.0 * me * (theta.abs() + eps * z[i].get(k).abs());
                prop_assert!((p.tensor(i).get(k) - theta).abs() <= bound);
            }
        }
    }

    #[test]
    fn drift_is_at_most_linear_in_cycles(
        seed in any::<u64>(),
        eps in 1e-4f64..0.5,
        kind in kind_strategy(),
        k in 1usize..40,
    ) {
        let original = build(&[("w", vec![5, 4]), ("b", vec![4])], seed ^ 1, ElementWidth::F64);
        let mut p = original.clone();
        let sel = Selection::all(&p);
        let spec = PerturbSpec::new(seed, eps, kind).unwrap();
        let z = materialize(&p, &sel, &spec).unwrap();
        for _ in 0..k {
            perturb_inplace(&mut p, &sel, eps, &spec).unwrap();
            perturb_inplace(&mut p, &sel, -2.0 * eps, &spec).unwrap();
            perturb_inplace(&mut p, &sel, eps, &spec).unwrap();
        }
        for i in 0..p.len() {
            for j in 0..p.tensor(i).len() {
                let theta = original.tensor(i).get(j);
                let bound = k as f64 * 8.0 * f64::EPSILON * (theta.abs() + eps * z[i].get(j).abs());
                prop_assert!((p.tensor(i).get(j) - theta).abs() <= bound);
            }
        }
    }

    #[test]
    fn perturbation_is_deterministic(shapes in shapes_strategy(), seed in any::<u64>(), kind in kind_strategy(), scale in -2.0f64..2.0) {
        let names = named(&shapes);
        let mut a = build(&as_refs(&names), 7, ElementWidth::F64);
        let mut b = a.clone();
        let sel = Selection::all(&a);
        let spec = PerturbSpec::new(seed, 1e-3, kind).unwrap();
        perturb_inplace(&mut a, &sel, scale, &spec).unwrap();
        perturb_inplace(&mut b, &sel, scale, &spec).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn same_schema_same_direction(shapes in shapes_strategy(), seed in any::<u64>(), kind in kind_strategy()) {
        // Two ParamSets with identical schema but different values receive
        // the same z: θ' − θ agrees up to the rounding of each addition.
        let names = named(&shapes);
        let mut a = build(&as_refs(&names), 1, ElementWidth::F64);
        let mut b = build(&as_refs(&names), 2, ElementWidth::F64);
        let (a0, b0) = (a.clone(), b.clone());
        let sel = Selection::all(&a);
        let spec = PerturbSpec::new(seed, 1e-3, kind).unwrap();
        perturb_inplace(&mut a, &sel, 0.5, &spec).unwrap();
        perturb_inplace(&mut b, &sel, 0.5, &spec).unwrap();
        for i in 0..a.len() {
            for k in 0..a.tensor(i).len() {
                let da = a.tensor(i).get(k) - a0.tensor(i).get(k);
                let db = b.tensor(i).get(k) - b0.tensor(i).get(k);
                let scale = a0.tensor(i).get(k).abs().max(b0.tensor(i).get(k).abs()) + da.abs();
                prop_assert!((da - db).abs() <= 4.0 * f64::EPSILON * scale);
            }
        }
    }

    #[test]
    fn axpy_then_negated_axpy_restores(
        shapes in shapes_strategy(),
        seed in any::<u64>(),
        c in -5.0f64..5.0,
        kind in kind_strategy(),
    ) {
        let names = named(&shapes);
        let original = build(&as_refs(&names), seed.rotate_left(7), ElementWidth::F64);
        let mut p = original.clone();
        let sel = Selection::all(&p);
        let spec = PerturbSpec::new(seed, 1e-3, kind).unwrap();
        let z = materialize(&p, &sel, &spec).unwrap();
        axpy(&mut p, &sel, c, &spec).unwrap();
        axpy(&mut p, &sel, -c, &spec).unwrap();
        for i in 0..p.len() {
            for k in 0..p.tensor(i).len() {
                let theta = original.tensor(i).get(k);
                let bound = 4.0 * f64::EPSILON * (theta.abs() + (c * z[i].get(k)).abs());
                prop_assert!((p.tensor(i).get(k) - theta).abs() <= bound);
            }
        }
    }

    #[test]
    fn lowrank_rank_bound(m in 1usize..9, n in 1usize..9, r in 1usize..6, seed in any::<u64>()) {
        let z = sample_lowrank(&mut GaussianStream::new(seed), m, n, r).unwrap();
        let mat = DMatrix::from_row_slice(m, n, &z.values());
        let sv = mat.singular_values();
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        let rp = r.min(m).min(n);
        for &x in &s[rp..] {
            prop_assert!(x <= 1e-10 * s[0], "σ = {:?}", s);
        }
    }

    #[test]
    fn sampler_output_is_a_pure_function(shape in prop::collection::vec(1usize..6, 1..4), seed in any::<u64>(), kind in kind_strategy()) {
        let a = sample_for_tensor(&mut GaussianStream::new(seed), &shape, kind).unwrap();
        let b = sample_for_tensor(&mut GaussianStream::new(seed), &shape, kind).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn axpy_is_the_stage_two_update() {
    let mut p = build(&[("w", vec![3, 4]), ("b", vec![4])], 5, ElementWidth::F64);
    let before = p.clone();
    let sel = Selection::all(&p);
    let spec = PerturbSpec::new(99, 1e-3, SamplerKind::Full).unwrap();
    let z = materialize(&p, &sel, &spec).unwrap();
    let (eta, g) = (0.01, -2.5);
    axpy(&mut p, &sel, -eta * g, &spec).unwrap();
    for i in 0..p.len() {
        for k in 0..p.tensor(i).len() {
            let expected = before.tensor(i).get(k) - eta * g * z[i].get(k);
            assert_eq!(p.tensor(i).get(k), expected);
        }
    }
    axpy(&mut p, &sel, 0.0, &spec).unwrap();
    let q = p.clone();
    assert_eq!(p, q);
}

#[test]
fn construction_order_is_load_bearing() {
    let ab = build(&[("a", vec![4]), ("b", vec![3])], 3, ElementWidth::F64);
    let ba = ParamSet::new(vec![
        ("b".into(), ab.get("b").unwrap().clone()),
        ("a".into(), ab.get("a").unwrap().clone()),
    ])
    .unwrap();
    assert_ne!(ab.schema_hash(), ba.schema_hash());
    let spec = PerturbSpec::new(11, 1e-3, SamplerKind::Full).unwrap();
    let (mut x, mut y) = (ab.clone(), ba.clone());
    perturb_inplace(&mut x, &Selection::all(&ab), 1.0, &spec).unwrap();
    perturb_inplace(&mut y, &Selection::all(&ba), 1.0, &spec).unwrap();
    let delta_a_x: Vec<f64> = (0..4).map(|k| x.get("a").unwrap().get(k) - ab.get("a").unwrap().get(k)).collect();
    let delta_a_y: Vec<f64> = (0..4).map(|k| y.get("a").unwrap().get(k) - ab.get("a").unwrap().get(k)).collect();
    assert_ne!(delta_a_x, delta_a_y, "reordering tensors must change which stream slice each one receives");
}

#[test]
fn later_tensors_ignore_earlier_sampler_kinds() {
    // Vector tensors use the full-Gaussian fallback under LowRank; with
    // shape-derived stream budgets they receive the same slice either way,
    // even behind matrices whose draws differ.
    let p = build(&[("w1", vec![6, 8]), ("v", vec![10]), ("w2", vec![4, 5]), ("c", vec![3])], 0, ElementWidth::F64);
    let sel = Selection::all(&p);
    for seed in [0u64, 1, 12345, u64::MAX] {
        let full = materialize(&p, &sel, &PerturbSpec::new(seed, 1e-3, SamplerKind::Full).unwrap()).unwrap();
        let low = materialize(&p, &sel, &PerturbSpec::new(seed, 1e-3, SamplerKind::lowrank(2)).unwrap()).unwrap();
        assert_ne!(full[0], low[0]);
        assert_eq!(full[1], low[1]);
        assert_ne!(full[2], low[2]);
        assert_eq!(full[3], low[3]);
    }
}

#[test]
fn one_dimensional_lowrank_falls_back_to_full() {
    for seed in 0..50u64 {
        let a = sample_for_tensor(&mut GaussianStream::new(seed), &[10], SamplerKind::lowrank(2)).unwrap();
        let b = sample_full(&mut GaussianStream::new(seed), &[10]).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn directions_have_zero_mean_for_every_kind() {
    let shape = [6usize, 8];
    let n = 20_000;
    for kind in [SamplerKind::Full, SamplerKind::lowrank(1), SamplerKind::lowrank(3), SamplerKind::LowRank { rank: 3, normalize: true }] {
        let sigma = match kind {
            SamplerKind::LowRank { rank, normalize: false } => (rank as f64).sqrt(),
            _ => 1.0,
        };
        let mut sum = vec![0.0; 48];
        for s in 0..n {
            let z = sample_for_tensor(&mut GaussianStream::new(s as u64), &shape, kind).unwrap();
            for (acc, v) in sum.iter_mut().zip(z.values().iter()) {
                *acc += v;
            }
        }
        let band = 4.0 * sigma / (n as f64).sqrt();
        for m in sum.iter().map(|s| s / n as f64) {
            assert!(m.abs() < band, "{kind:?}: mean {m} outside ±{band}");
        }
    }
}
