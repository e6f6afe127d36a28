use cfn_core::landscape::{bernstein_bound, covering_number_bound, sample_complexity, BernsteinParams};
use cfn_core::likelihood::{gradient, hessian, log_likelihood, magnetizations_all, q};
use cfn_core::model::{sample_spins, BoxConstants, EdgeVector, LeafPattern, SampleSet};
use cfn_core::optimizer::{coordinate_derivative, fit, solve_coordinate, Interval, OptConfig, SolutionKind};
use cfn_core::tree::{build_random, parse_newick, Tree};
use proptest::prelude::*;

fn theta_for(tree: &Tree, raw: &[f64]) -> EdgeVector {
    EdgeVector::new((0..tree.n_edges()).map(|e| raw[e % raw.len()]).collect()).unwrap()
}

fn pattern(bits: u64, n: usize) -> LeafPattern {
    LeafPattern::from_index(bits % (1 << n), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn q_is_symmetric_and_bounded(s in -1.0f64..1.0, t in -0.99f64..0.99) {
        let a = q(s, t).unwrap();
        prop_assert_eq!(a, q(t, s).unwrap());
        prop_assert!(a.abs() <= 1.0);
    }

    #[test]
    fn magnetizations_are_bounded(n in 3usize..9, seed in 0u64..1000, bits in any::<u64>(),
                                  raw in prop::collection::vec(-0.95f64..0.95, 1..16)) {
        let t = build_random(n, seed).unwrap();
        let th = theta_for(&t, &raw);
        let table = magnetizations_all(&t, &th, &pattern(bits, n)).unwrap();
        prop_assert!(table.values().iter().all(|z| z.abs() <= 1.0 + 1e-15));
    }

    #[test]
    fn log_likelihood_is_negative_and_flip_invariant(n in 2usize..8, seed in 0u64..1000, bits in any::<u64>(),
                                                      raw in prop::collection::vec(-0.95f64..0.95, 1..16)) {
        let t = build_random(n, seed).unwrap();
        let th = theta_for(&t, &raw);
        let p = pattern(bits, n);
        let a = SampleSet::from_patterns(vec![p.clone()]).unwrap();
        let b = SampleSet::from_patterns(vec![p.negated()]).unwrap();
        let la = log_likelihood(&t, &th, a.weighted()).unwrap();
        prop_assert!(la < 0.0);
        prop_assert!((la - log_likelihood(&t, &th, b.weighted()).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn hessian_is_exactly_symmetric(n in 3usize..8, seed in 0u64..1000, bits in prop::collection::vec(any::<u64>(), 1..6),
                                    raw in prop::collection::vec(0.3f64..0.95, 1..16)) {
        let t = build_random(n, seed).unwrap();
        let th = theta_for(&t, &raw);
        let s = SampleSet::from_patterns(bits.iter().map(|&b| pattern(b, n))).unwrap();
        let h = hessian(&t, &th, s.weighted()).unwrap();
        prop_assert_eq!(h.asymmetry(), 0.0);
        prop_assert!(h.diagonal().iter().all(|&d| d <= 0.0));
    }

    #[test]
    fn coordinate_solution_is_optimal(products in prop::collection::vec(-1.0f64..1.0, 1..8),
                                      weights in prop::collection::vec(0.01f64..1.0, 8),
                                      lo in -0.9f64..0.0, width in 0.05f64..0.9) {
        let w = &weights[..products.len()];
        let dom = Interval::new(lo, lo + width).unwrap();
        let sol = solve_coordinate(&products, w, dom, 1e-12, lo);
        let g = |t| coordinate_derivative(&products, w, t);
        match sol.kind {
            SolutionKind::Interior => {
                prop_assert!(g(sol.value - 1e-9) >= 0.0 && g(sol.value + 1e-9) <= 0.0);
            }
            SolutionKind::LowerBoundary => prop_assert!(sol.value == dom.lo && g(dom.lo) <= 0.0),
            SolutionKind::UpperBoundary => prop_assert!(sol.value == dom.hi && g(dom.hi) >= 0.0),
            SolutionKind::FlatCoordinate => prop_assert!(products.iter().all(|&p| p == 0.0)),
        }
    }

    #[test]
    fn every_fit_ascends(seed in 0u64..500, start in -0.8f64..0.8, star in 0.3f64..0.95, m in 20u64..400) {
        let t = parse_newick("((A,B),(C,(D,E)));").unwrap();
        let s = sample_spins(&t, &EdgeVector::uniform(t.n_edges(), star).unwrap(), seed, m).unwrap();
        let cfg = OptConfig { max_sweeps: 50, ..OptConfig::default() };
        let tr = fit(&t, &EdgeVector::uniform(t.n_edges(), start).unwrap(), s.weighted(), &cfg).unwrap();
        prop_assert!(tr.is_monotone());
        prop_assert!(tr.min_update_gain >= -1e-12);
        prop_assert!(tr.iterates.iter().all(|th| th.len() == t.n_edges()));
    }

    #[test]
    fn converged_interior_fit_is_a_fixed_point(seed in 0u64..200) {
        let t = parse_newick("((A,B),(C,D));").unwrap();
        let star = EdgeVector::uniform(5, 0.85).unwrap();
        let s = sample_spins(&t, &star, seed, 5000).unwrap();
        let cfg = OptConfig::default();
        let tr = fit(&t, &star, s.weighted(), &cfg).unwrap();
        prop_assert!(tr.converged());
        let g = gradient(&t, tr.final_theta(), s.weighted()).unwrap();
        prop_assert!(g.iter().all(|v| v.abs() < 1e-6));
        let again = fit(&t, tr.final_theta(), s.weighted(), &OptConfig { max_sweeps: 1, ..cfg }).unwrap();
        prop_assert!(again.final_theta().linf_distance(tr.final_theta()) <= 1e-10);
    }

    #[test]
    fn newick_roundtrip_preserves_splits(n in 2usize..20, seed in 0u64..10_000) {
        let t = build_random(n, seed).unwrap();
        let back = parse_newick(&t.to_newick()).unwrap();
        prop_assert_eq!(t.splits(), back.splits());
        prop_assert_eq!(back.n_edges(), 2 * n - 3);
    }

    #[test]
    fn sample_csv_roundtrip(n in 2usize..7, seed in 0u64..1000, m in 1u64..500) {
        let t = build_random(n, seed).unwrap();
        let s = sample_spins(&t, &EdgeVector::uniform(t.n_edges(), 0.7).unwrap(), seed, m).unwrap();
        prop_assert_eq!(SampleSet::from_csv(&s.to_csv(), &t).unwrap(), s.clone());
        prop_assert_eq!(s.m(), m);
    }

    #[test]
    fn valid_box_constants_nest(ch in 0.1f64..1.0, gap1 in 0.01f64..1.0, gap2 in 0.01f64..1.0, gap3 in 0.0f64..1.0,
                                delta in 0.001f64..0.05) {
        let c = ch + gap1;
        let cu = c + gap2;
        let chu = (cu + 0.01 + gap3).max(2.0 * ch);
        let bc = BoxConstants { c_hat_lower: ch, c_lower: c, c_upper: cu, c_hat_upper: chu };
        let (Ok(tb), Ok(eb)) = (bc.truth_box(delta), bc.estimation_box(delta)) else {
            return Ok(());
        };
        let (tl, th) = tb.interval();
        let (el, eh) = eb.interval();
        prop_assert!(el < tl && th < eh);
    }

    #[test]
    fn calculators_are_monotone(t in 0.1f64..50.0, d in 1usize..6, diam in 1usize..8, eps in 0.01f64..0.99) {
        let b = BernsteinParams { p: 2, d, n: 100, r: 1.0, l: 0.5, sigma2: 3.0, theta_diam: 1.5, t };
        let v = bernstein_bound(&b).unwrap();
        let wider = BernsteinParams { t: 2.0 * t, ..b };
        let doubled = BernsteinParams { d: 2 * d, ..b };
        prop_assert!(bernstein_bound(&wider).unwrap() < v);
        let dbl = bernstein_bound(&doubled).unwrap();
        prop_assert!((dbl / v - 2.0).abs() < 1e-12);
        prop_assert!(sample_complexity(0.2, diam + 1, eps, 1.0).unwrap() >= sample_complexity(0.2, diam, eps, 1.0).unwrap());
        prop_assert!(covering_number_bound(1.0, d, eps).unwrap() >= 1.0);
    }

    #[test]
    fn sampling_is_reproducible(seed in any::<u64>(), m in 1u64..300) {
        let t = parse_newick("((A,B),(C,D));").unwrap();
        let th = EdgeVector::uniform(5, 0.8).unwrap();
        prop_assert_eq!(sample_spins(&t, &th, seed, m).unwrap(), sample_spins(&t, &th, seed, m).unwrap());
    }
}
