//! Checks against independently computed values: closed-form moments,
//! hand-rolled forward passes, binomial bounds and brute-force searches.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use scaffolding::calibrate::{
    fit_binned, iterative_multicalibrate, meta_algorithm, no_harm_postprocess, ConstantPredictor, FnPredictor, Group,
    GroupCollection, PatchConfig, Predictor,
};
use scaffolding::datagen::{
    bernoulli_labels, clamp_for_law, corrupt_final_layer, digitlike_levels, level_probability, random_orthonormal_rows,
    random_smooth, sample_dataset, sample_transfer, Activation, Dataset, InputLaw, Layer, MlpSpec, Shift,
    TransferTask, TransferTaskFamily,
};
use scaffolding::experiments::acceptance::{domain_predictor, random_domain};
use scaffolding::experiments::no_harm_slack;
use scaffolding::metrics::{
    calibration_report, calibration_report_groups, exact_calibration_enumerable, mse_vs_truth, sample_enumerable,
};
use scaffolding::represent::{gaussian_moment, multitask_subspace, ols_dataset, symmetric_moment};
use scaffolding::scaffold::{build_partition, QuantileMode, ReprFn, ScaffoldPartition};
use scaffolding::Seed;

fn act(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Relu => z.max(0.0),
        Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        Activation::Softplus => (1.0 + z.exp()).ln(),
        Activation::Identity => z,
    }
}

/// Forward pass written out with explicit loops.
fn reference_eval(spec: &MlpSpec, x: &[f64]) -> f64 {
    let mut cur = x.to_vec();
    for layer in spec.layers() {
        cur = (0..layer.out_dim())
            .map(|i| {
                let z: f64 = layer.row(i).iter().zip(&cur).map(|(w, v)| w * v).sum::<f64>() + layer.bias()[i];
                act(layer.activation(), z)
            })
            .collect();
    }
    match spec.output_affine() {
        Some(a) => (a.scale * cur[0] + a.offset).clamp(0.0, 1.0),
        None => cur[0],
    }
}

fn gaussian_points(n: usize, d: usize, seed: u64) -> Vec<f64> {
    let mut rng = Seed(seed).rng();
    (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn smooth_truth(d: usize, seed: u64) -> (MlpSpec, InputLaw) {
    let law = InputLaw::uniform_box(d, 1.0).unwrap();
    let spec = random_smooth(d, &[4, 3], Activation::Softplus, 1.0, Seed(seed)).unwrap();
    (clamp_for_law(&spec, &law, Seed(seed)).unwrap(), law)
}

#[test]
fn three_layer_network_matches_hand_evaluation() {
    let (spec, _) = smooth_truth(3, 11);
    assert_eq!(spec.depth(), 3);
    for x in gaussian_points(10, 3, 1).chunks_exact(3) {
        let a = spec.eval(x).unwrap();
        let b = reference_eval(&spec, x);
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn prefix_then_suffix_is_the_full_network() {
    let (spec, _) = smooth_truth(4, 12);
    for x in gaussian_points(20, 4, 2).chunks_exact(4) {
        let full = spec.eval(x).unwrap();
        for depth in 1..spec.depth() {
            let hidden = spec.eval_prefix(depth, x).unwrap();
            assert!((spec.eval_suffix(depth, &hidden).unwrap() - full).abs() < 1e-12);
        }
    }
}

#[test]
fn clamped_truth_covers_and_respects_unit_interval() {
    let (spec, law) = smooth_truth(3, 13);
    let xs = law.sample(100_000, Seed(5));
    let p: Vec<f64> = xs.chunks_exact(3).map(|x| spec.eval(x).unwrap()).collect();
    let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(lo >= 0.0 && hi <= 1.0);
    // The clamp stretches the sampled range onto [0.02, 0.98].
    assert!(lo < 0.05 && hi > 0.95, "range [{lo}, {hi}]");
}

#[test]
fn fair_coin_labels_average_one_half() {
    let y = bernoulli_labels(&vec![0.5; 100_000], Seed(3));
    let mean = y.iter().map(|&v| f64::from(v)).sum::<f64>() / y.len() as f64;
    assert!((mean - 0.5).abs() < 0.01, "{mean}");
}

/// Transfer family whose tasks all share one network and one law.
fn identical_family(shift: Shift, d: usize, r: usize, t: usize, n: usize) -> TransferTaskFamily {
    let w1 = random_orthonormal_rows(r, d, Seed(21)).unwrap();
    let rows: Vec<Vec<f64>> = (0..r).map(|i| w1.row(i).iter().copied().collect()).collect();
    let mut suffix = vec![0.0; r];
    suffix[0] = 1.0;
    if r > 1 {
        suffix[1] = -0.5;
    }
    let spec = MlpSpec::new(
        d,
        vec![
            Layer::unbiased(rows, Activation::Identity).unwrap(),
            Layer::new(vec![suffix], vec![0.2], Activation::Sigmoid).unwrap(),
        ],
        1.0,
        false,
    )
    .unwrap();
    let law = InputLaw::standard_gaussian(d).unwrap();
    let tasks = vec![TransferTask { spec, law }; t];
    TransferTaskFamily::new(shift, w1, tasks, n).unwrap()
}

#[test]
fn covariate_tasks_with_equal_laws_are_exchangeable() {
    let t = 4;
    let family = identical_family(Shift::Covariate, 5, 2, t, 2000);
    let seeds = 40;
    // stats[s][t]: label mean of task t under seed s.
    let stats: Vec<Vec<f64>> = (0..seeds)
        .map(|s| sample_transfer(&family, Seed(s)).unwrap().iter().map(Dataset::label_mean).collect())
        .collect();
    let spread = |stats: &[Vec<f64>]| {
        let means: Vec<f64> = (0..t).map(|j| stats.iter().map(|row| row[j]).sum::<f64>() / seeds as f64).collect();
        let grand = means.iter().sum::<f64>() / t as f64;
        means.iter().map(|m| (m - grand).powi(2)).sum::<f64>()
    };
    let observed = spread(&stats);
    // Permutation test: shuffle task labels within each seed.
    let mut rng = Seed(99).rng();
    let reps = 2000;
    let mut shuffled = stats.clone();
    let mut at_least = 0;
    for _ in 0..reps {
        for row in shuffled.iter_mut() {
            row.shuffle(&mut rng);
        }
        if spread(&shuffled) >= observed {
            at_least += 1;
        }
    }
    let p_value = (at_least + 1) as f64 / (reps + 1) as f64;
    assert!(p_value > 0.001, "p = {p_value}");
}

#[test]
fn concept_tasks_with_one_link_give_rank_one_coefficients() {
    let family = identical_family(Shift::Concept, 5, 2, 6, 20_000);
    let tasks = sample_transfer(&family, Seed(4)).unwrap();
    let est = multitask_subspace(&tasks, 2).unwrap();
    let ratio = est.singular_values[1] / est.singular_values[0];
    assert!(ratio < 0.1, "sigma2 / sigma1 = {ratio}");
}

#[test]
fn digitlike_levels_have_their_probabilities() {
    let levels = 4;
    let (data, lv) = digitlike_levels(levels, 3, 100_000, 6.0, Seed(8)).unwrap();
    for l in 0..levels {
        let ys: Vec<f64> = (0..data.len()).filter(|&i| lv[i] == l).map(|i| data.label(i)).collect();
        let p = level_probability(l, levels);
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let sd = (p * (1.0 - p) / ys.len() as f64).sqrt();
        assert!((mean - p).abs() <= 3.0 * sd, "level {l}: {mean} vs {p}");
    }
}

#[test]
fn unseparated_levels_cannot_beat_the_level_variance() {
    let levels = 4;
    let ps: Vec<f64> = (0..levels).map(|l| level_probability(l, levels)).collect();
    let mean = ps.iter().sum::<f64>() / levels as f64;
    let var = ps.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / levels as f64;
    let (data, _) = digitlike_levels(levels, 2, 40_000, 0.0, Seed(9)).unwrap();
    let (fresh, _) = digitlike_levels(levels, 2, 100_000, 0.0, Seed(10)).unwrap();
    let h = ReprFn::coordinates(2, &[0]).unwrap();
    let one = mse_vs_truth(&meta_algorithm(&data, &h, 1, 0.5, Seed(1)).unwrap(), &fresh).unwrap();
    assert!((one - var).abs() < 0.002, "B = 1: {one} vs {var}");
    let eight = mse_vs_truth(&meta_algorithm(&data, &h, 8, 0.5, Seed(1)).unwrap(), &fresh).unwrap();
    assert!(eight > var - 0.002, "B = 8: {eight} vs {var}");
}

#[test]
fn four_gaussian_cells_hold_a_quarter_each() {
    let values = gaussian_points(400, 2, 17);
    let (part, _) = ScaffoldPartition::from_values(&values, 2, 2, QuantileMode::Conditional).unwrap();
    for &c in part.train_counts() {
        assert!((98..=102).contains(&c), "{:?}", part.train_counts());
    }
}

#[test]
fn separating_cells_recover_level_probabilities() {
    let levels = 4;
    let sep = 1000.0;
    // Cuts at 0.5, 1.5, 2.5 on h = x0 / sep isolate each level.
    let anchors: Vec<f64> = [-0.5, 0.5, 1.5, 2.5].iter().flat_map(|&v| std::iter::repeat_n(v, 100)).collect();
    let (part, _) = ScaffoldPartition::from_values(&anchors, 1, 4, QuantileMode::Conditional).unwrap();
    let h = ReprFn::linear(vec![vec![1.0 / sep, 0.0, 0.0]]).unwrap();
    let (data, lv) = digitlike_levels(levels, 3, 40_000, sep, Seed(12)).unwrap();
    let pred = fit_binned(&part, &h, &data).unwrap();
    for l in 0..levels {
        let cell = part.assign_value(&[l as f64]);
        let count = lv.iter().filter(|&&v| v == l).count();
        assert_eq!(pred.counts()[cell], count);
        let p = level_probability(l, levels);
        let sd = (p * (1.0 - p) / count as f64).sqrt();
        assert!((pred.values()[cell] - p).abs() <= 3.0 * sd, "level {l}");
    }
}

#[test]
fn meta_algorithm_is_a_function_of_its_seed() {
    let (spec, law) = smooth_truth(2, 14);
    let data = sample_dataset(&spec, &law, 3000, Seed(1)).unwrap();
    let h = ReprFn::coordinates(2, &[0, 1]).unwrap();
    let a = meta_algorithm(&data, &h, 5, 0.5, Seed(7)).unwrap();
    let b = meta_algorithm(&data, &h, 5, 0.5, Seed(7)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, meta_algorithm(&data, &h, 5, 0.5, Seed(8)).unwrap());
}

#[test]
fn linear_truth_is_learned_on_its_own_coordinate() {
    let spec = MlpSpec::new(
        2,
        vec![
            Layer::new(vec![vec![1.0, 0.0]], vec![0.0], Activation::Identity).unwrap(),
            Layer::new(vec![vec![0.3]], vec![0.5], Activation::Identity).unwrap(),
        ],
        1.0,
        false,
    )
    .unwrap();
    let law = InputLaw::uniform_box(2, 1.0).unwrap();
    let data = sample_dataset(&spec, &law, 20_000, Seed(1)).unwrap();
    let fresh = sample_dataset(&spec, &law, 100_000, Seed(2)).unwrap();
    let pred = meta_algorithm(&data, &ReprFn::coordinates(2, &[0]).unwrap(), 8, 0.5, Seed(3)).unwrap();
    let mse = mse_vs_truth(&pred, &fresh).unwrap();
    assert!(mse < 0.003, "{mse}");
}

#[test]
fn patches_strictly_reduce_squared_error() {
    for i in 0..20u64 {
        let (spec, law) = smooth_truth(2, 100 + i);
        let data = sample_dataset(&spec, &law, 4000, Seed(i)).unwrap();
        let pred = meta_algorithm(&data, &ReprFn::coordinates(2, &[0, 1]).unwrap(), 3, 0.5, Seed(i)).unwrap();
        let mut groups = GroupCollection::from_partition(pred.partition(), pred.repr());
        groups.push(Group::new("left", |x: &[f64]| x[0] < 0.0));
        let p0 = ConstantPredictor(0.1 + 0.04 * i as f64);
        let out = iterative_multicalibrate(p0, &groups, &data, PatchConfig::default()).unwrap();
        let adj = out.predictor.adjustments();
        assert!(!adj.is_empty());
        for w in adj.windows(2) {
            assert!((w[0].sq_err_after - w[1].sq_err_before).abs() < 1e-12);
        }
        assert!(adj.iter().all(|a| a.sq_err_after < a.sq_err_before), "instance {i}");
    }
}

#[test]
fn recalibration_keeps_a_good_start_and_repairs_a_corrupted_one() {
    let (d, r, b, n) = (5, 2, 8, 20_000);
    let law = InputLaw::standard_gaussian(d).unwrap();
    let truth = clamp_for_law(&random_smooth(d, &[r], Activation::Sigmoid, 2.0, Seed(3)).unwrap(), &law, Seed(3)).unwrap();
    let data = sample_dataset(&truth, &law, n, Seed(4)).unwrap();
    let fresh = sample_dataset(&truth, &law, 100_000, Seed(5)).unwrap();
    let slack = no_harm_slack(b, r, n / 2);
    let bad = corrupt_final_layer(&truth, &law, 0.1, Seed(6)).unwrap();
    for (name, p0) in [("truth", &truth), ("corrupted", &bad)] {
        let phat = no_harm_postprocess(p0, 1, &data, b, 0.5, Seed(7)).unwrap();
        let (m0, m1) = (mse_vs_truth(p0, &fresh).unwrap(), mse_vs_truth(&phat, &fresh).unwrap());
        assert!(m1 <= m0 + slack && m1 <= slack, "{name}: {m1} vs {m0}, slack {slack}");
        if name == "corrupted" {
            assert!(m1 < m0 - 0.01, "{m1} vs {m0}");
        }
    }
}

/// `p*(x) = max(0, x_1)` on `U[-1, 1]^2`.
fn relu_on_first_coordinate() -> (MlpSpec, InputLaw) {
    let spec = MlpSpec::new(
        2,
        vec![
            Layer::unbiased(vec![vec![1.0, 0.0]], Activation::Relu).unwrap(),
            Layer::unbiased(vec![vec![1.0]], Activation::Identity).unwrap(),
        ],
        1.0,
        true,
    )
    .unwrap();
    (spec, InputLaw::uniform_box(2, 1.0).unwrap())
}

#[test]
fn relu_moment_matches_closed_form() {
    // E[max(0, x1) x1] = 1/6 and E[max(0, x1) x2] = 0 for uniform inputs.
    let (spec, law) = relu_on_first_coordinate();
    let est = symmetric_moment(&spec, &law, 1_000_000, Seed(1)).unwrap();
    assert!((est.closed_form[0] - 1.0 / 6.0).abs() < 1e-12 && est.closed_form[1].abs() < 1e-12);
    assert!((est.mc[0] - 1.0 / 6.0).abs() < 0.005 && est.mc[1].abs() < 0.005, "{:?}", est.mc);
}

#[test]
fn least_squares_recovers_scaled_relu_direction() {
    // Second moment I/3, so beta = 3 (1/6, 0) = (1/2, 0).
    let (spec, law) = relu_on_first_coordinate();
    let data = sample_dataset(&spec, &law, 1_000_000, Seed(2)).unwrap();
    let beta = ols_dataset(&data).unwrap().beta;
    assert!((beta[0] - 0.5).abs() < 0.02 && beta[1].abs() < 0.02, "{beta:?}");
}

#[test]
fn gaussian_linear_link_moment_is_the_weight_vector() {
    let w = [0.6, -0.8, 0.0];
    let spec = MlpSpec::new(
        3,
        vec![
            Layer::unbiased(vec![w.to_vec()], Activation::Identity).unwrap(),
            Layer::new(vec![vec![1.0]], vec![0.5], Activation::Identity).unwrap(),
        ],
        1.0,
        false,
    )
    .unwrap();
    let law = InputLaw::standard_gaussian(3).unwrap();
    let est = gaussian_moment(&spec, &law, 1_000_000, Seed(3)).unwrap();
    for j in 0..3 {
        assert!((est.closed_form[j] - w[j]).abs() < 1e-6);
        assert!((est.mc[j] - w[j]).abs() <= 3.0 * est.diff_se[j], "coordinate {j}: {}", est.mc[j]);
    }
}

#[test]
fn true_probabilities_are_calibrated() {
    let (levels, sep) = (4, 1000.0);
    let (fresh, _) = digitlike_levels(levels, 3, 100_000, sep, Seed(4)).unwrap();
    let truth = FnPredictor(move |x: &[f64]| level_probability((x[0] / sep).round() as usize, levels));
    let mut groups = GroupCollection::everything();
    for l in 0..levels {
        groups.push(Group::new(format!("level{l}"), move |x: &[f64]| (x[0] / sep).round() as usize == l));
    }
    let report = calibration_report_groups(&truth, &groups, &fresh, 0.1).unwrap();
    assert!(report.excluded.is_empty());
    for s in &report.per_cell {
        assert!(s.gap <= 3.0 * s.se, "{s:?}");
    }
}

#[test]
fn validation_tuned_bins_are_close_to_the_best() {
    // Homogeneous ReLU truth on a symmetric law; h is the OLS direction.
    let d = 5;
    let law = InputLaw::uniform_box(d, 1.0).unwrap();
    let raw = scaffolding::datagen::random_homogeneous(d, 3, 4, Seed(5)).unwrap();
    let spec = clamp_for_law(&raw, &law, Seed(5)).unwrap();
    let n = 20_000;
    let beta = ols_dataset(&sample_dataset(&spec, &law, n, Seed(1)).unwrap()).unwrap().beta;
    let h = ReprFn::linear(vec![beta]).unwrap();
    let data = sample_dataset(&spec, &law, n, Seed(2)).unwrap();
    let valid = sample_dataset(&spec, &law, n, Seed(3)).unwrap();
    let fresh = sample_dataset(&spec, &law, 100_000, Seed(4)).unwrap();
    let brier = |p: &dyn Predictor| {
        valid.rows().enumerate().map(|(i, x)| (valid.label(i) - p.predict(x)).powi(2)).sum::<f64>() / valid.len() as f64
    };
    let grid: Vec<(usize, f64, f64)> = (1..=60)
        .map(|b| {
            let pred = meta_algorithm(&data, &h, b, 0.5, Seed(6)).unwrap();
            (b, brier(&pred), mse_vs_truth(&pred, &fresh).unwrap())
        })
        .collect();
    let best = grid.iter().map(|g| g.2).fold(f64::INFINITY, f64::min);
    let tuned = grid.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    assert!(tuned.2 <= 1.5 * best, "tuned B = {} with {} vs best {}", tuned.0, tuned.2, best);
}

#[test]
fn sampled_report_error_shrinks_at_binomial_rate() {
    let (n1, n2) = (10_000, 1_000_000);
    let mut sq = [0.0, 0.0];
    for i in 0..5 {
        let domain = random_domain(64, Seed(i));
        let pred = domain_predictor(&domain, Seed(i)).unwrap();
        let exact = exact_calibration_enumerable(&domain, &pred, |x| pred.cell_of(x)).unwrap();
        for (k, n) in [n1, n2].into_iter().enumerate() {
            let fresh = sample_enumerable(&domain, n, Seed(100 + i)).unwrap();
            let report = calibration_report(&pred, &fresh).unwrap();
            for cell in &exact.per_cell {
                let s = report.per_cell.iter().find(|s| s.group == cell.cell).unwrap();
                sq[k] += (s.mean_residual - cell.mean_residual).powi(2);
            }
        }
    }
    let ratio = (sq[0] / sq[1]).sqrt();
    let expected = ((n2 / n1) as f64).sqrt();
    assert!(ratio > expected / 2.0 && ratio < expected * 2.0, "ratio {ratio}, expected {expected}");
}

#[test]
fn build_partition_uses_the_representation_values() {
    let (spec, law) = smooth_truth(3, 15);
    let data = sample_dataset(&spec, &law, 1000, Seed(1)).unwrap();
    let h = ReprFn::coordinates(3, &[2]).unwrap();
    let part = build_partition(&h, &data, 4, QuantileMode::Conditional).unwrap();
    let values: Vec<f64> = data.rows().map(|x| x[2]).collect();
    let (direct, _) = ScaffoldPartition::from_values(&values, 1, 4, QuantileMode::Conditional).unwrap();
    assert_eq!(part, direct);
}
