//! Property tests for the structural invariants of the pipeline.

use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use scaffolding::calibrate::{
    iterative_multicalibrate, meta_algorithm, split_indices, BinnedPredictor, ConstantPredictor, GroupCollection,
    PatchConfig, Predictor,
};
use scaffolding::datagen::{
    clamp_for_law, random_homogeneous, random_orthonormal_rows, random_smooth, sample_dataset, Activation, Dataset,
    InputLaw, MlpSpec,
};
use scaffolding::represent::{normal_residual, ols, procrustes_distance};
use scaffolding::scaffold::{QuantileMode, ReprFn, ScaffoldPartition};
use scaffolding::Seed;

fn gaussian_values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = Seed(seed).rng();
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn mode_of(flag: bool) -> QuantileMode {
    if flag {
        QuantileMode::Conditional
    } else {
        QuantileMode::GlobalGrid
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn partition_is_total_and_balanced(r in 1usize..=3, b in 1usize..=4, extra in 0usize..400, seed: u64, cond: bool) {
        let k = b.pow(r as u32);
        let n = k + extra;
        let values = gaussian_values(n * r, seed);
        let (part, routing) = ScaffoldPartition::from_values(&values, r, b, mode_of(cond)).unwrap();
        prop_assert_eq!(part.k(), k);
        let counts = part.train_counts();
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        prop_assert!(routing.iter().all(|&c| c < k));
        if cond {
            // Each split divides its parent as evenly as the sort allows.
            let (lo, hi) = (n / k, n.div_ceil(k) + r);
            prop_assert!(counts.iter().all(|c| (lo..=hi).contains(c)), "{:?}", counts);
        }
    }

    #[test]
    fn assign_reproduces_training_routing(r in 1usize..=3, b in 1usize..=5, extra in 0usize..300, seed: u64, cond: bool) {
        let n = b.pow(r as u32) + extra;
        // Rounded values force ties at the cut points.
        let values: Vec<f64> = gaussian_values(n * r, seed).iter().map(|v| (v * 4.0).round() / 4.0).collect();
        let (part, routing) = ScaffoldPartition::from_values(&values, r, b, mode_of(cond)).unwrap();
        for (v, c) in values.chunks_exact(r).zip(&routing) {
            prop_assert_eq!(part.assign_value(v), *c);
        }
    }

    #[test]
    fn assign_is_total_on_arbitrary_points(b in 1usize..=4, seed: u64, q in prop::collection::vec(-1e12f64..1e12, 2)) {
        let values = gaussian_values(2 * 100, seed);
        let (part, _) = ScaffoldPartition::from_values(&values, 2, b, QuantileMode::Conditional).unwrap();
        prop_assert!(part.assign_value(&q) < part.k());
    }

    #[test]
    fn partition_json_round_trips(r in 1usize..=3, b in 1usize..=4, seed: u64, cond: bool) {
        let n = b.pow(r as u32) + 50;
        let values = gaussian_values(n * r, seed);
        let (part, _) = ScaffoldPartition::from_values(&values, r, b, mode_of(cond)).unwrap();
        let back = ScaffoldPartition::from_json(&part.to_json(), "partition").unwrap();
        prop_assert_eq!(back, part);
    }

    #[test]
    fn split_is_a_disjoint_cover(m in 2usize..3000, pi in 0.05f64..0.95, seed: u64) {
        let m1 = (pi * m as f64).floor() as usize;
        match split_indices(m, pi, Seed(seed)) {
            Err(_) => prop_assert!(m1 == 0 || m1 == m),
            Ok((a, b)) => {
                prop_assert_eq!(a.len(), m1);
                prop_assert_eq!(a.len() + b.len(), m);
                let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
                all.sort_unstable();
                prop_assert!(all.iter().enumerate().all(|(i, v)| i == *v));
                prop_assert!(a.windows(2).all(|w| w[0] < w[1]) && b.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn procrustes_ignores_rotations(r in 1usize..=4, extra in 0usize..6, seed: u64) {
        let d = r + extra;
        let s = Seed(seed);
        let w = random_orthonormal_rows(r, d, s.derive(1)).unwrap();
        let other = random_orthonormal_rows(r, d, s.derive(2)).unwrap();
        let q = random_orthonormal_rows(r, r, s.derive(3)).unwrap();
        prop_assert!(procrustes_distance(&(&q * &w), &w).unwrap() < 1e-9);
        let d1 = procrustes_distance(&other, &w).unwrap();
        let d2 = procrustes_distance(&(&q * &other), &w).unwrap();
        prop_assert!((d1 - d2).abs() < 1e-9, "{} vs {}", d1, d2);
        prop_assert!(d1 <= 2.0 * (r as f64).sqrt() + 1e-9);
    }

    #[test]
    fn ols_residual_is_orthogonal_to_design(d in 1usize..=8, extra in 5usize..200, seed: u64) {
        let n = d + extra;
        let x = gaussian_values(n * d, seed);
        let mut rng = Seed(seed).derive(9).rng();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fit = ols(&x, d, &y).unwrap();
        let (res, scale) = normal_residual(&x, d, &y, &fit.beta);
        prop_assert!(res <= 1e-9 * scale.max(1.0), "residual {} scale {}", res, scale);
    }

    #[test]
    fn relu_networks_are_positively_homogeneous(d in 1usize..=6, depth in 2usize..=3, seed: u64, c in 0.01f64..100.0) {
        let spec = random_homogeneous(d, depth, 3, Seed(seed)).unwrap();
        let x = gaussian_values(d, seed ^ 0x5eed);
        let cx: Vec<f64> = x.iter().map(|v| c * v).collect();
        let a = spec.eval_raw(&cx).unwrap();
        let b = c * spec.eval_raw(&x).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
    }

    #[test]
    fn clamped_truth_stays_in_unit_interval(d in 1usize..=4, seed: u64, gaussian: bool) {
        let law = if gaussian { InputLaw::standard_gaussian(d).unwrap() } else { InputLaw::uniform_box(d, 1.0).unwrap() };
        let spec = random_smooth(d, &[4], Activation::Softplus, 2.0, Seed(seed)).unwrap();
        let spec = clamp_for_law(&spec, &law, Seed(seed)).unwrap();
        let xs = law.sample(2000, Seed(seed).derive(6));
        for x in xs.chunks_exact(d) {
            let p = spec.eval(x).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
        }
        // Far outside the calibration sample the clamp still holds.
        prop_assert!((0.0..=1.0).contains(&spec.eval(&vec![1e6; d]).unwrap()));
    }

    #[test]
    fn spec_json_round_trips(d in 1usize..=5, w in 1usize..=4, seed: u64) {
        let spec = random_smooth(d, &[w, 2], Activation::Sigmoid, 1.5, Seed(seed)).unwrap();
        let law = InputLaw::uniform_box(d, 1.0).unwrap();
        let spec = clamp_for_law(&spec, &law, Seed(seed)).unwrap();
        let back: MlpSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        prop_assert_eq!(back, spec);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn predictions_stay_in_unit_interval(d in 1usize..=3, n in 50usize..600, b in 1usize..=8, seed: u64, p0 in 0.0f64..=1.0) {
        let law = InputLaw::uniform_box(d, 1.0).unwrap();
        let spec = clamp_for_law(&random_smooth(d, &[3], Activation::Sigmoid, 2.0, Seed(seed)).unwrap(), &law, Seed(seed)).unwrap();
        let data = sample_dataset(&spec, &law, n, Seed(seed).derive(1)).unwrap();
        let h = ReprFn::coordinates(d, &[0]).unwrap();
        let pred = meta_algorithm(&data, &h, b, 0.5, Seed(seed)).unwrap();
        let groups = GroupCollection::from_partition(pred.partition(), pred.repr());
        let patched = iterative_multicalibrate(ConstantPredictor(p0), &groups, &data, PatchConfig::default()).unwrap().predictor;
        let mut probes: Vec<Vec<f64>> = law.sample(200, Seed(seed).derive(2)).chunks_exact(d).map(<[f64]>::to_vec).collect();
        probes.push(vec![1e9; d]);
        probes.push(vec![-1e9; d]);
        for x in &probes {
            prop_assert!((0.0..=1.0).contains(&pred.predict(x)));
            prop_assert!((0.0..=1.0).contains(&patched.predict(x)));
        }
    }

    #[test]
    fn predictor_and_dataset_files_round_trip(d in 1usize..=3, n in 20usize..300, b in 1usize..=4, seed: u64) {
        let law = InputLaw::standard_gaussian(d).unwrap();
        let spec = clamp_for_law(&random_smooth(d, &[2], Activation::Softplus, 1.5, Seed(seed)).unwrap(), &law, Seed(seed)).unwrap();
        let data = sample_dataset(&spec, &law, n, Seed(seed)).unwrap();
        let h = ReprFn::coordinates(d, &[0]).unwrap();
        let pred = meta_algorithm(&data, &h, b, 0.5, Seed(seed)).unwrap();

        let part = ScaffoldPartition::from_json(&pred.partition().to_json(), "partition").unwrap();
        let file = serde_json::from_str(&serde_json::to_string(&pred.to_file("partition.json")).unwrap()).unwrap();
        let back = BinnedPredictor::from_file(file, part).unwrap();
        prop_assert_eq!(&back, &pred);

        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("data.csv");
        data.save(&csv, &data.meta()).unwrap();
        let loaded = Dataset::load(&csv).unwrap();
        prop_assert_eq!(loaded, data);
    }
}
