use super::*;
use crate::linalg::from_rows;
use crate::sim_harness::scenarios::{example1, example2, random_toy, ToyShape};
use proptest::prelude::*;
use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;

fn ex1_system(gamma: f64) -> AugmentedSystem<f64> {
    let sc = example1::<f64>(gamma).unwrap();
    AugmentedSystem::new(&sc.model, &sc.schemes[0], 0).unwrap()
}

fn rand_sym(rng: &mut ChaCha8Rng, m: usize) -> Mat<f64> {
    let b = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
    sym(&b)
}

proptest! {
    #[test]
    fn f_is_linear(seed in 0u64..1000, alpha in -3.0f64..3.0) {
        let sys = ex1_system(0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b1 = rand_sym(&mut rng, 4);
        let b2 = rand_sym(&mut rng, 4);
        let lhs = f_operator(&sys, &(&b1 + &b2 * alpha));
        let rhs = f_operator(&sys, &b1) + f_operator(&sys, &b2) * alpha;
        prop_assert!((lhs - rhs).abs().max() < 1e-12);
    }
}

#[test]
fn f_of_zero_is_zero() {
    let sys = ex1_system(0.5);
    assert_eq!(f_operator(&sys, &DMatrix::zeros(4, 4)), DMatrix::zeros(4, 4));
}

#[test]
fn f_is_adjoint_of_mask_enumerated_propagation() {
    let sc = example2::<f64>().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (i, &d) in sc.delays.iter().enumerate() {
        let sys = AugmentedSystem::new(&sc.model, &sc.schemes[i], d).unwrap();
        for _ in 0..5 {
            let b = rand_sym(&mut rng, 8);
            let x = rand_sym(&mut rng, 8);
            let lhs = (&b * moment_propagation(&sys, &x)).trace();
            let rhs = (f_operator(&sys, &b) * &x).trace();
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        }
        let fm = f_matrix(&sys);
        assert!((fm - propagation_matrix(&sys).transpose()).abs().max() < 1e-10);
    }
}

#[test]
fn f_matches_sampled_masks() {
    let sys = ex1_system(0.4);
    let b = from_rows::<f64>(&[
        &[2.0, 0.3, -0.1, 0.0],
        &[0.3, 1.0, 0.2, 0.1],
        &[-0.1, 0.2, 1.5, -0.4],
        &[0.0, 0.1, -0.4, 0.8],
    ]);
    let reals: Vec<Mat<f64>> = sys.masks().iter().map(|h| sys.realization(h)).collect();
    let vals: Vec<Mat<f64>> = reals.iter().map(|a| a.transpose() * &b * a).collect();
    let probs: Vec<f64> = sys.probs().to_vec();
    let dist = WeightedIndex::new(&probs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let samples = 1_000_000;
    let mut s1 = DMatrix::<f64>::zeros(4, 4);
    let mut s2 = DMatrix::<f64>::zeros(4, 4);
    for _ in 0..samples {
        let v = &vals[dist.sample(&mut rng)];
        s1 += v;
        s2 += v.component_mul(v);
    }
    let n = samples as f64;
    let mean = &s1 / n;
    let se = (&s2 / n - mean.component_mul(&mean)).map(|v| (v.max(0.0) / (n - 1.0)).sqrt());
    let fb = f_operator(&sys, &b);
    for a in 0..4 {
        for c in 0..4 {
            assert!((mean[(a, c)] - fb[(a, c)]).abs() <= 3.0 * se[(a, c)] + 1e-12, "({a},{c})");
        }
    }
}

#[test]
fn exact_test_limits() {
    let sys = ex1_system(0.5);
    assert!(exact_ms_test(&sys).unwrap() < 1.0);
    let sc = example1::<f64>(0.5).unwrap();
    let full = SelectionScheme::full_transmission(0, 2);
    let sys = AugmentedSystem::new(&sc.model, &full, 0).unwrap();
    let rho = spectral_radius(&sys.phik).unwrap();
    assert!((exact_ms_test(&sys).unwrap() - rho * rho).abs() < 1e-9);
}

fn iterate_converges(sys: &AugmentedSystem<f64>, init: f64) -> Option<Mat<f64>> {
    let m = 2 * sys.n();
    let q = DMatrix::identity(m, m);
    let d = sys.d;
    let mut hist: std::collections::VecDeque<Mat<f64>> = (0..=d).map(|_| DMatrix::identity(m, m) * init).collect();
    for _ in 0..20_000 {
        let old = hist.pop_front().unwrap();
        let next = moment_propagation(sys, &old) + &q;
        if !next.iter().all(|v| v.is_finite()) || next.abs().max() > 1e12 {
            return None;
        }
        hist.push_back(next);
    }
    let last = hist.back().unwrap().clone();
    let prev = &hist[0];
    ((&last - prev).abs().max() < 1e-8 * last.abs().max()).then_some(last)
}

#[test]
fn exact_test_agrees_with_direct_iteration() {
    let mut checked = 0;
    let mut seed = 0;
    let mut stable = 0;
    while checked < 20 {
        seed += 1;
        let sc = random_toy::<f64>(seed, ToyShape { max_nodes: 1, max_delay: 2, horizon: 8 }).unwrap();
        let sys = AugmentedSystem::new(&sc.model, &sc.schemes[0], sc.delays[0]).unwrap();
        let r = exact_ms_test(&sys).unwrap();
        if (r - 1.0).abs() < 0.02 {
            continue;
        }
        checked += 1;
        let a = iterate_converges(&sys, 1.0);
        let b = iterate_converges(&sys, 100.0);
        if r < 1.0 {
            stable += 1;
            let (a, b) = (a.expect("converges"), b.expect("converges"));
            assert!((&a - &b).abs().max() < 1e-8 * a.abs().max());
        } else {
            assert!(a.is_none() && b.is_none(), "seed {seed} radius {r}");
        }
    }
    assert!(stable > 0 && stable < 20);
}

#[test]
fn lmi_soundness_on_random_instances() {
    for seed in 0..30 {
        let sc = random_toy::<f64>(500 + seed, ToyShape { max_nodes: 1, max_delay: 2, horizon: 8 }).unwrap();
        let sys = AugmentedSystem::new(&sc.model, &sc.schemes[0], sc.delays[0]).unwrap();
        let opts = LmiOptions { restarts: 2, iterations: 500, ..Default::default() };
        let cert = lmi_feasibility(&sys, &opts);
        let r = exact_ms_test(&sys).unwrap();
        if cert.feasible() {
            assert!(r < 1.0);
            let (lxyz, lm, ld, ls) = verify_certificate(&sys, &cert);
            assert!(lxyz >= -1e-9 && lm < 0.0 && ld > 0.0 && ls > 0.0);
        }
    }
}

#[test]
fn lmi_certificate_with_delay() {
    let sc = example2::<f64>().unwrap();
    for i in 0..2 {
        let sys = AugmentedSystem::new(&sc.model, &sc.schemes[i], sc.delays[i]).unwrap();
        let cert = lmi_feasibility(&sys, &LmiOptions::default());
        assert!(cert.feasible());
        assert!(cert.margin > 0.0);
    }
}

#[test]
fn table1_rows() {
    let opts = LmiOptions { restarts: 2, iterations: 500, ..Default::default() };
    for k in 0..=10 {
        let g = k as f64 / 10.0;
        let sc = example1::<f64>(g).unwrap();
        let r = check_a105_b105(&sc.model, &sc.schemes[0], &opts).unwrap();
        assert_eq!(r.a105, (4..=8).contains(&k), "gamma {g}");
        assert!(!r.b105);
        if k == 5 {
            assert!((r.lambda_b105 - 1.5887).abs() < 1e-3);
        }
    }
}

#[test]
fn full_transmission_b105_trivial() {
    let sc = example1::<f64>(0.5).unwrap();
    let full = SelectionScheme::full_transmission(0, 2);
    let r = check_a105_b105(&sc.model, &full, &LmiOptions::default()).unwrap();
    assert!(r.b105 && r.lambda_b105.abs() < 1e-15);
}

#[test]
fn example2_steady_fusion_is_certified() {
    let sc = example2::<f64>().unwrap();
    let rep = check_theorem3(&sc.model, &sc.schemes, &sc.delays, &LmiOptions::default()).unwrap();
    assert!(rep.overall_theorem3);
    assert!((rep.nodes[0].rho_106 - 0.5759).abs() < 1e-3);
    assert!(rep.nodes.iter().all(|r| r.exact_ms_radius < 1.0));
    assert!(rep.to_csv().lines().count() == 3);
}

#[test]
fn nothing_sent_violates_spectral_condition() {
    let sc = example1::<f64>(0.5).unwrap();
    let mut s = sc.schemes[0].clone();
    s.hbar = DMatrix::zeros(2, 2);
    let rho = rho_106(&sc.model, &s, 1).unwrap();
    assert!(rho > 1.0);
}

#[test]
fn example1_probability_search() {
    let sc = example1::<f64>(0.5).unwrap();
    let found = select_probabilities(&sc.model, 0, 1, 0, Criterion::C1, &SearchOptions::default()).unwrap();
    let mut grid: Vec<i64> = found.iter().filter(|c| c.on_grid).map(|c| (c.probs[0] * 10.0).round() as i64).collect();
    grid.sort();
    assert_eq!(grid, vec![4, 5, 6, 7, 8]);
    for w in found.windows(2) {
        assert!(w[0].margin >= w[1].margin);
    }
}

#[test]
fn example2_probabilities_are_found() {
    let sc = example2::<f64>().unwrap();
    for i in 0..2 {
        let found = select_probabilities(&sc.model, i, 2, sc.delays[i], Criterion::C2, &SearchOptions::default()).unwrap();
        let target = &sc.schemes[i].probs;
        assert!(found.iter().any(|c| c.probs.iter().zip(target).all(|(a, b)| (a - b).abs() < 1e-12)), "node {i}");
    }
}

#[test]
fn full_rank_selection_is_feasible_when_filter_stable() {
    let sc = example1::<f64>(0.5).unwrap();
    let found = select_probabilities(&sc.model, 0, 2, 0, Criterion::C2, &SearchOptions::default()).unwrap();
    assert_eq!(found.len(), 1);
}

#[test]
fn augmented_mean_has_zero_lower_left() {
    let sc = example2::<f64>().unwrap();
    let sys = AugmentedSystem::new(&sc.model, &sc.schemes[1], 2).unwrap();
    assert_eq!(sys.abar.view((4, 0), (4, 4)).abs().max(), 0.0);
}

#[test]
fn reference_d1_satisfies_no_delay_condition() {
    let d1 = from_rows::<f64>(&[
        &[1.3284, 0.1730, -0.0731, -0.0395],
        &[0.1730, 0.3727, 0.0009, -0.0782],
        &[-0.0731, 0.0009, 1.0315, -0.5204],
        &[-0.0395, -0.0782, -0.5204, 1.9647],
    ]);
    let sys = ex1_system(0.5);
    assert!(lambda_min(&d1) > 0.0);
    assert!(a105_gap(&sys, &d1) < 1e-2);
}
