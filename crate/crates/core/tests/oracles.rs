//! Independent reference computations checked against the library.

use cfn_core::experiment::{run_bernstein, run_error_scaling, ExperimentConfig};
use cfn_core::landscape::{
    box_scan, extreme_eigenvalues, hessian_deviation_experiment, population_hessian, HessianSource,
    PopulationMode, ScanOptions, ScanRegion,
};
use cfn_core::likelihood::{
    deterministic_bounds, gradient, hessian, log_likelihood, log_pattern_probability, log_pattern_probability_from,
    magnetizations_all, HessianMatrix, HessianScaleConstants,
};
use cfn_core::model::{
    all_patterns, sample_spins, sample_spins_trial, BoxConstants, EdgeVector, ParamBox,
};
use cfn_core::optimizer::{fit, OptConfig};
use cfn_core::tree::{build_balanced, build_caterpillar, build_random, parse_newick, Tree};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erf;
use std::path::Path;

fn random_theta(tree: &Tree, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> EdgeVector {
    EdgeVector::new((0..tree.n_edges()).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn small_trees() -> Vec<Tree> {
    let mut v = vec![build_balanced(1).unwrap(), build_balanced(2).unwrap(), build_balanced(3).unwrap()];
    v.extend((3..=8).map(|n| build_caterpillar(n).unwrap()));
    v.extend((0..5).map(|s| build_random(4 + s as usize, 100 + s).unwrap()));
    v
}

/// The 2-leaf MLE over [-1, 1] is `2 * agreement - 1`.
fn two_leaf_mle(s: &cfn_core::model::SampleSet) -> f64 {
    let agree: u64 = s
        .patterns()
        .iter()
        .zip(s.counts())
        .filter(|(p, _)| p.spins()[0] == p.spins()[1])
        .map(|(_, c)| c)
        .sum();
    2.0 * agree as f64 / s.m() as f64 - 1.0
}

#[test]
fn two_leaf_fit_is_closed_form_mle() {
    let t = parse_newick("(A,B);").unwrap();
    let star = EdgeVector::uniform(1, 0.8).unwrap();
    let cfg = OptConfig::default();
    for seed in 0..10 {
        let s = sample_spins(&t, &star, seed, 500).unwrap();
        let tr = fit(&t, &EdgeVector::uniform(1, 0.5).unwrap(), s.weighted(), &cfg).unwrap();
        assert!((tr.final_theta()[0] - two_leaf_mle(&s)).abs() < 1e-10);
    }
}

fn two_leaf_config(m: u64, trials: u64, seed: u64) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{"tree": {{"newick": "(A,B);"}}, "theta_star": {{"explicit": [0.8]}}, "m": [{m}], "trials": {trials}, "seed": {seed}}}"#
    ))
    .unwrap()
}

#[test]
fn two_leaf_errors_follow_half_normal() {
    // sqrt(m) |theta_hat - theta| -> |N(0, 1 - theta^2)|, sd 0.6 at theta = 0.8
    let p = two_leaf_config(100_000, 500, 11).prepare(Path::new(".")).unwrap();
    let r = run_error_scaling(&p).unwrap();
    let mut z: Vec<f64> = r.rows.iter().map(|row| row.error * (row.m as f64).sqrt()).collect();
    z.sort_by(f64::total_cmp);
    let n = z.len() as f64;
    let cdf = |x: f64| erf(x / (0.6 * 2f64.sqrt()));
    let ks = z
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks <= 0.1, "KS distance {ks}");
}

#[test]
fn two_leaf_median_error_matches_binomial_oracle() {
    let p = two_leaf_config(10_000, 200, 5).prepare(Path::new(".")).unwrap();
    let r = run_error_scaling(&p).unwrap();
    let expected = 0.6745 * 0.6 / 100.0;
    let med = r.per_m[0].median_error;
    assert!((med / expected - 1.0).abs() <= 0.25, "median {med}, expected {expected}");
}

/// Roots of the characteristic cubic of a symmetric 3x3 matrix, isolated by
/// sign changes on a fine grid and refined by bisection.
fn cubic_eigenvalues(a: &[[f64; 3]; 3]) -> Vec<f64> {
    let tr = a[0][0] + a[1][1] + a[2][2];
    let minors = a[0][0] * a[1][1] - a[0][1] * a[1][0] + a[0][0] * a[2][2] - a[0][2] * a[2][0]
        + a[1][1] * a[2][2]
        - a[1][2] * a[2][1];
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    let p = |x: f64| ((x - tr) * x + minors) * x - det;
    let bound = (0..3).map(|i| (0..3).map(|j| a[i][j].abs()).sum::<f64>()).fold(0.0, f64::max) + 1.0;
    let steps = 200_000;
    let mut roots = Vec::new();
    let mut prev = -bound;
    for k in 1..=steps {
        let x = -bound + 2.0 * bound * k as f64 / steps as f64;
        if p(prev) == 0.0 {
            roots.push(prev);
        } else if p(prev) * p(x) < 0.0 {
            let (mut lo, mut hi) = (prev, x);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if p(lo) * p(mid) <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
        prev = x;
    }
    roots
}

#[test]
fn eigenvalues_match_cubic_roots() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let mut a = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in i..3 {
                let v = rng.random_range(-3.0..3.0);
                a[i][j] = v;
                a[j][i] = v;
            }
        }
        let roots = cubic_eigenvalues(&a);
        assert_eq!(roots.len(), 3, "{a:?}");
        let h = HessianMatrix::from_row_major(3, a.iter().flatten().copied().collect()).unwrap();
        let (lo, hi) = extreme_eigenvalues(&h, 1e-12).unwrap();
        assert!((lo - roots[0]).abs() < 1e-9 && (hi - roots[2]).abs() < 1e-9);
    }
}

#[test]
fn population_hessian_two_leaf_closed_form() {
    let t = parse_newick("(A,B);").unwrap();
    for th in [0.0, 0.5, 0.8, 0.9] {
        let v = EdgeVector::uniform(1, th).unwrap();
        let h = population_hessian(&t, &v, &v, PopulationMode::Exact).unwrap();
        assert!((h.get(0, 0) + 1.0 / (1.0 - th * th)).abs() < 1e-12);
        let zero = EdgeVector::uniform(1, 0.0).unwrap();
        assert!((population_hessian(&t, &v, &zero, PopulationMode::Exact).unwrap().get(0, 0) + 1.0).abs() < 1e-15);
    }
}

#[test]
fn pruning_is_root_invariant_and_flip_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for t in small_trees() {
        let th = random_theta(&t, &mut rng, 0.5, 0.95);
        for pat in all_patterns(t.n_leaves()).into_iter().take(16) {
            let base = log_pattern_probability(&t, &th, &pat).unwrap();
            for root in t.internal_nodes().collect::<Vec<_>>() {
                let trav = t.traversal_from(root);
                assert!((log_pattern_probability_from(&t, &trav, &th, &pat).unwrap() - base).abs() < 1e-12);
            }
            assert!((log_pattern_probability(&t, &th, &pat.negated()).unwrap() - base).abs() < 1e-12);
            let a = magnetizations_all(&t, &th, &pat).unwrap();
            let b = magnetizations_all(&t, &th, &pat.negated()).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((x + y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn one_dimensional_restrictions_are_concave() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = build_random(7, 2).unwrap();
    let th = random_theta(&t, &mut rng, 0.6, 0.9);
    let s = sample_spins(&t, &th, 1, 300).unwrap();
    let h = 1e-3;
    for e in 0..t.n_edges() {
        for k in 1..20 {
            let x = -0.95 + 1.9 * k as f64 / 20.0;
            let f = |v: f64| log_likelihood(&t, &th.with(e, v), s.weighted()).unwrap();
            let second = (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h);
            assert!(second <= 1e-6, "edge {e} at {x}: {second}");
        }
    }
}

#[test]
fn population_diagonal_within_gradient_bound() {
    let t = build_balanced(2).unwrap();
    let c = BoxConstants::default();
    let delta = 0.05;
    let star = c.truth_box(delta).unwrap().center(t.n_edges());
    let est = c.estimation_box(delta).unwrap();
    let region = ScanRegion::from_box(&est, t.n_edges());
    let r = box_scan(&t, &HessianSource::Population { theta_star: star }, &region, Some(delta), &ScanOptions::default())
        .unwrap();
    let g = deterministic_bounds(delta, t.diameter(), c.c_hat_lower, HessianScaleConstants::default()).grad_bound;
    for e in 0..t.n_edges() {
        assert!(r.diag_min[e] >= -g * g && r.diag_max[e] < 0.0);
    }
}

#[test]
fn scanned_aggregates_are_pointwise_extremes() {
    let t = parse_newick("((A,B),(C,D));").unwrap();
    let bx = ParamBox::new(0.05, 1.0, 2.0).unwrap();
    let s = sample_spins(&t, &bx.center(5), 0, 2000).unwrap();
    let r = box_scan(&t, &HessianSource::Empirical(&s), &ScanRegion::from_box(&bx, 5), Some(0.05), &ScanOptions::default())
        .unwrap();
    assert_eq!(r.points.len(), 243);
    assert_eq!(r.scanned_sup_lambda_max, r.lambda_max.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    assert_eq!(r.scanned_inf_lambda_min, r.lambda_min.iter().copied().fold(f64::INFINITY, f64::min));
    assert!(r.lambda_min.iter().zip(&r.lambda_max).all(|(a, b)| a <= b));
}

#[test]
fn balanced3_empirical_landscape_is_concave() {
    let t = build_balanced(3).unwrap();
    let c = BoxConstants::default();
    let star = c.truth_box(0.05).unwrap().center(t.n_edges());
    let s = sample_spins(&t, &star, 4, 100_000).unwrap();
    let region = ScanRegion::from_box(&c.estimation_box(0.05).unwrap(), t.n_edges());
    let r = box_scan(&t, &HessianSource::Empirical(&s), &region, Some(0.05), &ScanOptions::default()).unwrap();
    assert!(r.scanned_sup_lambda_max < 0.0, "{}", r.scanned_sup_lambda_max);
}

fn quartet_deviation_setup() -> (Tree, EdgeVector, ScanRegion, ScanOptions) {
    let t = parse_newick("((A,B),(C,D));").unwrap();
    let c = BoxConstants::default();
    let star = c.truth_box(0.05).unwrap().center(5);
    let region = ScanRegion::from_box(&c.estimation_box(0.05).unwrap(), 5);
    let opts = ScanOptions { grid_points_per_edge: 2, ..ScanOptions::default() };
    (t, star, region, opts)
}

#[test]
fn hessian_deviation_shrinks_with_m_and_obeys_weyl() {
    let (t, star, region, opts) = quartet_deviation_setup();
    let small = hessian_deviation_experiment(&t, &star, &region, &opts, 1000, 20, 8).unwrap();
    let large = hessian_deviation_experiment(&t, &star, &region, &opts, 100_000, 20, 8).unwrap();
    let wins = small.iter().zip(&large).filter(|(a, b)| b.sup_deviation < a.sup_deviation).count();
    assert!(wins >= 18, "{wins}/20");
    assert!(small.iter().chain(&large).all(|r| r.weyl_excess <= 1e-10));
}

#[test]
fn bernstein_level_dominates_observed_deviations() {
    let json = r#"{"tree": {"newick": "((A,B),(C,D));"}, "m": [1000, 10000], "trials": 20, "seed": 2,
                  "scan": {"grid_points_per_edge": 2}}"#;
    let p = ExperimentConfig::from_json(json).unwrap().prepare(Path::new(".")).unwrap();
    let r = run_bernstein(&p).unwrap();
    let (_, at_1e4) = r.deviations.iter().find(|(m, _)| *m == 10_000).unwrap();
    let level = r.levels[1];
    assert!(at_1e4.iter().filter(|&&d| d <= level).count() >= 19);
    let ok = r.rows.iter().filter(|row| row.bound.min(1.0) >= row.exceedance).count();
    assert!(ok * 20 >= r.rows.len() * 19, "{ok}/{}", r.rows.len());
    let med = |v: &[f64]| cfn_core::experiment::median(v);
    assert!(med(&r.deviations[1].1) < med(&r.deviations[0].1));
    // calculator passthrough on a reported row
    let row = &r.rows[0];
    let bp = cfn_core::landscape::BernsteinParams { t: row.t, ..r.params[0] };
    assert_eq!(cfn_core::landscape::bernstein_bound(&bp).unwrap(), row.bound);
}

#[test]
fn samples_for_a_trial_are_prefix_consistent() {
    let t = build_balanced(2).unwrap();
    let th = EdgeVector::uniform(5, 0.8).unwrap();
    let a = sample_spins_trial(&t, &th, 1, 4, 10_000).unwrap();
    let b = sample_spins_trial(&t, &th, 1, 4, 20_000).unwrap();
    for (p, c) in a.patterns().iter().zip(a.counts()) {
        let i = b.patterns().iter().position(|q| q == p).unwrap();
        assert!(b.counts()[i] >= *c);
    }
}

#[test]
fn hessian_fd_residual_is_pure_truncation() {
    // residual of the central difference must shrink as h^2 over a wide parameter range
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for k in 0..20u64 {
        let t = if k % 2 == 0 { build_balanced(2).unwrap() } else { build_balanced(3).unwrap() };
        let th = random_theta(&t, &mut rng, 0.6, 0.95);
        let s = sample_spins(&t, &th, 40 + k, 50).unwrap();
        let h = hessian(&t, &th, s.weighted()).unwrap();
        let residual = |step: f64| {
            let mut w = 0.0f64;
            for e in 0..t.n_edges() {
                let gp = gradient(&t, &th.with(e, th[e] + step), s.weighted()).unwrap();
                let gm = gradient(&t, &th.with(e, th[e] - step), s.weighted()).unwrap();
                for f in 0..t.n_edges() {
                    w = w.max((h.get(e, f) - (gp[f] - gm[f]) / (2.0 * step)).abs());
                }
            }
            w
        };
        let (coarse, fine) = (residual(1e-4), residual(1e-5));
        assert!(fine <= 1e-6, "instance {k}: {fine}");
        assert!(fine <= coarse / 50.0 || fine < 1e-9, "instance {k}: {coarse} -> {fine}");
    }
}
