use std::f64::consts::FRAC_PI_2;

use proptest::prelude::*;

use corner_expand::cli::{to_json, RunConfig};
use corner_expand::geometry::CornerProblem;
use corner_expand::rhoseries::{ModeEntry, RhoLogExpansion, SField};
use corner_expand::specfun::{gegenbauer, hyp2f1, HypParams};
use corner_expand::sturm::{greens_solve, root_distance, spectrum, GreensSolver, IndicialParams};
use corner_expand::thetagrid::{sin_over_theta, LogThetaSeries, ThetaFn, ThetaGrid};

type Scalar = RhoLogExpansion<f64>;

const ORDER: usize = 5;

/// Series with no log terms at rho^0, so rho_derivative is defined.
fn series() -> impl Strategy<Value = Scalar> {
    prop::collection::vec((0..=ORDER, 0..3usize, -2.0..2.0f64), 0..8).prop_map(|terms| {
        let mut s = Scalar::zero(ORDER);
        for (j, k, c) in terms {
            s.insert_add(j, if j == 0 { 0 } else { k }, c);
        }
        s
    })
}

fn dist(a: &Scalar, b: &Scalar) -> f64 {
    let d = a.sub(b);
    d.terms.values().fold(0.0f64, |m, c| m.max(c.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn series_ring_axioms(a in series(), b in series(), c in series()) {
        prop_assert!(dist(&a.mul(&b).mul(&c), &a.mul(&b.mul(&c))) < 1e-12);
        prop_assert!(dist(&a.mul(&b.add(&c)), &a.mul(&b).add(&a.mul(&c))) < 1e-12);
        prop_assert!(dist(&a.mul(&b), &b.mul(&a)) < 1e-12);
    }

    #[test]
    fn rho_derivative_leibniz(a in series(), b in series()) {
        let lhs = a.mul(&b).rho_derivative().unwrap();
        let rhs = a.rho_derivative().unwrap().mul(&b).add(&a.mul(&b.rho_derivative().unwrap()));
        prop_assert!(dist(&lhs, &rhs) < 1e-10);
    }

    #[test]
    fn gegenbauer_parity(k in 0..=12usize, alpha in 0.1..4.0f64, x in -1.0..1.0f64) {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let (p, m) = (gegenbauer(k, alpha, x), gegenbauer(k, alpha, -x));
        prop_assert!((m - sign * p).abs() <= 1e-12 * p.abs().max(1.0));
    }

    #[test]
    fn hyp2f1_terminates(m in 0..6usize, b in -2.0..3.0f64, c in 0.5..4.0f64, x in 0.0..0.95f64) {
        let a = -(m as f64);
        let mut direct = 0.0;
        let mut term = 1.0;
        for i in 0..=m {
            direct += term;
            let fi = i as f64;
            term *= (a + fi) * (b + fi) / ((c + fi) * (fi + 1.0)) * x;
        }
        let got = hyp2f1(HypParams::new(a, b, c, x)).unwrap();
        prop_assert!((got - direct).abs() < 1e-12 * direct.abs().max(1.0));
    }

    #[test]
    fn float_reports_round_trip(x in prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO) {
        let text = to_json(&serde_json::json!({ "x": x }));
        let back: serde_json::Value = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back["x"].as_f64().unwrap().to_bits(), x.to_bits());
    }

    #[test]
    fn run_config_round_trip(
        order in 0..10usize,
        tol in 1e-14..1e-2f64,
        modes in prop::collection::vec((-2..=2i32, -2..=2i32, -1.0..1.0f64, -1.0..1.0f64), 0..4),
    ) {
        let mut p = CornerProblem::new(3, FRAC_PI_2);
        p.s = Some(3.0);
        p.psi_boundary = SField {
            entries: modes.iter().map(|&(a, b, re, im)| ModeEntry { mode: vec![a, b], component: vec![], re, im }).collect(),
        };
        let cfg = RunConfig { problem: Some(p), order: Some(order), tol: Some(tol), ..Default::default() };
        let text = serde_json::to_string(&cfg).unwrap();
        prop_assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn lowest_eigenvalue_above_lower_bound(n in 2..=4usize, ds in 0.2..2.0f64, t0 in 0.6..2.5f64) {
        let s = n as f64 / 2.0 + ds;
        let r = spectrum(n, s, t0, 1).unwrap();
        let nf = n as f64;
        prop_assert!(r.entries[0].lambda > (s - 1.0) * (s - nf));
    }

    #[test]
    fn green_boundary_conditions(n in 2..=4usize, ds in 0.2..2.0f64, t0 in 0.7..2.3f64, dnu in -0.5..3.0f64, c in -1.0..1.0f64) {
        let s = n as f64 / 2.0 + ds;
        let nu = s + dnu;
        prop_assume!(root_distance(n, s, t0, nu).unwrap() > 0.05);
        let p = IndicialParams::new(n, s, t0, nu).unwrap();
        let a = p.a();
        let g = ThetaGrid::new(t0, 48).unwrap();
        let f = LogThetaSeries::smooth(a, ThetaFn::from_fn(&g, |t| sin_over_theta(t).powf(a) * t * (1.0 + c * t * t)));
        let u = greens_solve(&p, &f).unwrap();
        // v'(theta0) = 0 is the Robin condition for u = sin^{n-s} v; read it off
        // the collocation solution, where the theta^beta kernel part is exact
        let solver = GreensSolver::for_params(&g, &p).unwrap();
        let big_f: Vec<f64> = g.nodes.iter().map(|&t| t * (1.0 + c * t * t)).collect();
        let sol = solver.solve_levels(&[big_f]).unwrap();
        let kq = solver.kernel();
        let vp: Vec<f64> = sol.levels[0].iter().zip(&kq.q).map(|(v, q)| v - sol.q_mult[0] * q).collect();
        let last = g.len() - 1;
        let robin = g.deriv(&vp)[last] + sol.q_mult[0] * kq.dq[last];
        prop_assert!(robin.abs() < 1e-8, "robin {}", robin);
        prop_assert!(sol.levels[0][0].abs() < 1e-8, "dirichlet {}", sol.levels[0][0]);
        // sin^{s-n} u -> 0: the lowest term sits strictly above theta^a or has zero coefficient
        if (u.alpha - a).abs() < 1e-12 {
            prop_assert!(u.terms[&0].values[0].abs() < 1e-8);
        } else {
            prop_assert!(u.alpha > a);
        }
    }
}
