use super::*;
use crate::reduction_channel::build_scheme;
use crate::sim_harness::oracle::{enumerate, ENUM_CAP};
use crate::sim_harness::scenarios::{example2, random_toy, ToyShape};
use crate::sim_harness::Scenario;

fn close(a: &Mat<f64>, b: &Mat<f64>, tol: f64) -> bool {
    let scale = a.abs().max().max(b.abs().max()).max(1.0);
    (a - b).abs().max() <= tol * scale
}

fn ledger(sc: &Scenario<f64>, route: Route) -> CovarianceLedger<f64> {
    let mut l = CovarianceLedger::new(&sc.model, &sc.schemes, &sc.delays, &sc.p0).unwrap();
    l.route = route;
    l
}

fn check_against_oracle(sc: &Scenario<f64>, horizon: usize) {
    let o = enumerate(sc, horizon, ENUM_CAP).unwrap();
    let mut led = ledger(sc, Route::Direct);
    let l = sc.num_nodes();
    for t in 0..=horizon {
        if t > 0 {
            led.advance().unwrap();
        }
        let tt = t as Time;
        for i in 0..l {
            for j in 0..l {
                assert!(close(&led.p_ij(i, j, tt).unwrap(), &o.p_ij(i, j, t), 1e-9), "P_{i}{j}({t})");
                assert!(close(&led.gamma(i, tt, j, tt).unwrap(), &o.gamma(i, t, j, t), 1e-9), "Γ_{i}{j}({t}) {}", sc.name);
                assert!(close(&led.xi(i, tt, j, tt).unwrap(), &o.xi(i, t, j, t), 1e-9), "Ξ_{i}{j}({t}) {}", sc.name);
                if let Some(p) = o.psi(i, j, t) {
                    let di = sc.delays[i] as Time;
                    let dj = sc.delays[j] as Time;
                    assert!(close(&led.gamma(i, tt - di, j, tt - dj - 1).unwrap(), &p, 1e-9), "Ψ_{i}{j}({t})");
                }
                if let Some(u) = o.upsilon(i, j, t) {
                    let di = sc.delays[i] as Time;
                    let dj = sc.delays[j] as Time;
                    assert!(close(&led.xi(i, tt - di - 1, j, tt - dj - 1).unwrap(), &u, 1e-9), "Υ_{i}{j}({t})");
                }
                for s in 0..t {
                    let ss = s as Time;
                    assert!(close(&led.xi(i, tt, j, ss).unwrap(), &o.xi(i, t, j, s), 1e-9), "Ξ_{i}{j}({t},{s})");
                    assert!(close(&led.gamma(i, ss, j, tt).unwrap(), &o.gamma(i, s, j, t), 1e-9), "Γ_{i}{j}({s},{t})");
                }
            }
        }
    }
}

#[test]
fn direct_route_matches_enumeration_on_toys() {
    for seed in 0..12 {
        let sc = random_toy::<f64>(seed, ToyShape::default()).unwrap();
        check_against_oracle(&sc, 8);
    }
}

#[test]
fn direct_route_matches_enumeration_single_node_delay_one() {
    let mut sc = random_toy::<f64>(100, ToyShape { max_nodes: 1, max_delay: 0, horizon: 6 }).unwrap();
    sc.delays = vec![1];
    check_against_oracle(&sc, 6);
}

#[test]
fn direct_route_matches_enumeration_on_short_example2() {
    let sc = example2::<f64>().unwrap();
    check_against_oracle(&sc, 5);
}

#[test]
fn lemma_route_matches_direct_route() {
    let shapes = [(example2::<f64>().unwrap(), 0)];
    let toys: Vec<_> = (20..26).map(|s| (random_toy::<f64>(s, ToyShape::default()).unwrap(), 0)).collect();
    for (sc, _) in shapes.iter().chain(toys.iter()) {
        let mut lem = ledger(sc, Route::Lemma);
        let mut dir = ledger(sc, Route::Direct);
        let until = lem.warm_time() + 3 * lem.lcm_period() + 10;
        for _ in 0..until {
            lem.advance().unwrap();
            dir.advance().unwrap();
            let a = lem.assemble_xi().unwrap();
            let b = dir.assemble_xi().unwrap();
            assert!(close(&a, &b, 1e-9), "{} t = {}", sc.name, lem.time());
        }
    }
}

#[test]
fn lemma_steps_match_direct_values() {
    let sc = example2::<f64>().unwrap();
    let mut led = ledger(&sc, Route::Direct);
    let t_end = led.warm_time() + 7;
    for _ in 0..t_end {
        led.advance().unwrap();
    }
    let t = t_end as Time;
    for i in 0..2 {
        for j in 0..2 {
            let g = led.gamma_step(i, j, t).unwrap();
            assert!(close(&g, &led.gamma(i, t, j, t).unwrap(), 1e-10));
            let di = led.nodes[i].d as Time;
            let dj = led.nodes[j].d as Time;
            let psi = led.psi_step(i, j, t).unwrap();
            assert!(close(&psi, &led.gamma(i, t - di, j, t - dj - 1).unwrap(), 1e-10), "Ψ_{i}{j}");
            let (ups, _) = led.upsilon_step(i, j, t).unwrap();
            assert!(close(&ups, &led.xi(i, t - di - 1, j, t - dj - 1).unwrap(), 1e-10), "Υ_{i}{j}");
        }
        let xd = led.xi_diag_step(i, t).unwrap();
        assert!(close(&xd, &led.xi(i, t, i, t).unwrap(), 1e-10));
    }
    let xo = led.xi_offdiag_step(0, 1, t).unwrap();
    assert!(close(&xo, &led.xi(0, t, 1, t).unwrap(), 1e-10));
    let xo = led.xi_offdiag_step(1, 0, t).unwrap();
    assert!(close(&xo, &led.xi(1, t, 0, t).unwrap(), 1e-10));
}

#[test]
fn uncorrected_offdiag_form_disagrees() {
    let sc = example2::<f64>().unwrap();
    let mut led = ledger(&sc, Route::Direct);
    let t_end = led.warm_time() + 3;
    for _ in 0..t_end {
        led.advance().unwrap();
    }
    let t = t_end as Time;
    let exact = led.xi(0, t, 1, t).unwrap();
    let uncorrected = led.xi_offdiag_uncorrected(0, 1, t).unwrap();
    assert!((exact - uncorrected).abs().max() > 1e-6);
}

#[test]
fn unrolled_noise_correlation_matches_recursion() {
    let sc = example2::<f64>().unwrap();
    let mut led = ledger(&sc, Route::Direct);
    for _ in 0..30 {
        led.advance().unwrap();
    }
    for i in 0..2 {
        for t2 in 10..29 {
            let a = led.theta_w_unrolled(i, 29, t2).unwrap();
            let b = led.theta_w(i, 29, t2).unwrap();
            assert!(close(&a, &b, 1e-12), "node {i} t2 {t2}");
        }
    }
}

#[test]
fn full_transmission_without_delay_reproduces_local_covariance() {
    let mut sc = random_toy::<f64>(5, ToyShape { max_nodes: 2, max_delay: 0, horizon: 8 }).unwrap();
    let l = sc.num_nodes();
    sc.schemes = (0..l).map(|i| SelectionScheme::full_transmission(i, 2)).collect();
    for route in [Route::Direct, Route::Lemma] {
        let mut led = ledger(&sc, route);
        for _ in 0..60 {
            led.advance().unwrap();
            let t = led.time() as Time;
            for i in 0..l {
                for j in 0..l {
                    assert!(close(&led.xi(i, t, j, t).unwrap(), &led.p_ij(i, j, t).unwrap(), 1e-10));
                }
            }
        }
    }
}

#[test]
fn period_constants() {
    let p = PairPeriod::new(1, 2).unwrap();
    assert_eq!((p.tau, p.tau_di, p.tau_dj, p.eta), (6, 3, 2, 1));
    let p = PairPeriod::new(4, 1).unwrap();
    assert_eq!((p.tau, p.eta), (10, 2));
    assert_eq!(chi(1, 10, 5).unwrap(), 3);
    assert_eq!(chi(0, 4, 4).unwrap(), 0);
}

#[test]
fn assembled_matrix_is_symmetric_psd() {
    let sc = example2::<f64>().unwrap();
    let mut led = ledger(&sc, Route::Lemma);
    for _ in 0..80 {
        led.advance().unwrap();
        let x = led.assemble_xi().unwrap();
        assert!(crate::linalg::lambda_min(&x) > -1e-9);
    }
}

#[test]
fn rejects_mismatched_inputs() {
    let sc = example2::<f64>().unwrap();
    let s = build_scheme(0, 4, 2, &[0.3, 0.2, 0.1, 0.1, 0.1, 0.2]).unwrap();
    assert!(CovarianceLedger::new(&sc.model, &[s], &[1, 2], &sc.p0).is_err());
}
