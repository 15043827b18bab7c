mod common;

use common::{qp_oracle, random_qp};
use hvac_tune::qp::{
    kkt_residuals, solve_qp, solve_qp_warm, QpProblem, QpSettings, QpStatus, WarmStart,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_enumeration_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let settings = QpSettings::default();
    for case in 0..60 {
        let n = rng.random_range(2..=8);
        let m = rng.random_range(0..=12);
        let p = random_qp(&mut rng, n, m);
        let (_, obj) = qp_oracle(&p).expect("feasible by construction");
        let sol = solve_qp(&p, &settings).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal, "case {case}");
        assert!(
            (sol.objective - obj).abs() <= 1e-5 * (1.0 + obj.abs()),
            "case {case}: {} vs {obj}",
            sol.objective
        );
        assert!(kkt_residuals(&p, &sol.x, &sol.duals).within(1e-6));
    }
}

#[test]
fn warm_start_reaches_same_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let settings = QpSettings::default();
    for _ in 0..10 {
        let p = random_qp(&mut rng, 6, 8);
        let cold = solve_qp(&p, &settings).unwrap();
        let warm = WarmStart {
            x: cold.x.clone(),
            duals: Some(cold.duals.clone()),
        };
        let hot = solve_qp_warm(&p, &settings, Some(&warm)).unwrap();
        assert_eq!(hot.status, QpStatus::Optimal);
        assert!((hot.x - &cold.x).amax() < 1e-5);
        assert!(hot.iterations <= cold.iterations);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn optimal_points_satisfy_kkt(seed in any::<u64>(), n in 1usize..7, m in 0usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_qp(&mut rng, n, m);
        let sol = solve_qp(&p, &QpSettings::default()).unwrap();
        prop_assert_eq!(sol.status, QpStatus::Optimal);
        let r = kkt_residuals(&p, &sol.x, &sol.duals);
        prop_assert!(r.within(1e-6), "{:?}", r);
    }

    #[test]
    fn no_feasible_sample_beats_optimum(seed in any::<u64>(), n in 1usize..6, m in 0usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_qp(&mut rng, n, m);
        let sol = solve_qp(&p, &QpSettings::default()).unwrap();
        for _ in 0..200 {
            let x = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
            let feasible = (&p.a_ineq * &x - &p.b_ineq).iter().all(|v| *v <= 0.0)
                && (0..n).all(|j| x[j] >= p.lb[j] && x[j] <= p.ub[j]);
            if feasible {
                prop_assert!(p.objective(&x) >= sol.objective - 1e-6);
            }
        }
    }

    #[test]
    fn positive_cost_scaling_keeps_minimizer(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_qp(&mut rng, 4, 5);
        let scaled = QpProblem::new(&p.h * c, &p.f * c, p.a_ineq.clone(), p.b_ineq.clone(), p.lb.clone(), p.ub.clone()).unwrap();
        let a = solve_qp(&p, &QpSettings::default()).unwrap();
        let b = solve_qp(&scaled, &QpSettings::default()).unwrap();
        prop_assert!((a.x - b.x).amax() < 1e-4);
    }

    #[test]
    fn dump_parse_round_trips(seed in any::<u64>(), n in 1usize..5, m in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_qp(&mut rng, n, m);
        let q = hvac_tune::qp::parse_qp_dump(p.to_dump().as_bytes()).unwrap();
        prop_assert_eq!(p, q);
    }
}

#[test]
fn disjoint_box_and_row_is_infeasible() {
    let p = QpProblem::new(
        DMatrix::identity(3, 3),
        DVector::zeros(3),
        DMatrix::from_row_slice(1, 3, &[-1.0, -1.0, -1.0]),
        DVector::from_vec(vec![-4.0]),
        DVector::from_element(3, -1.0),
        DVector::from_element(3, 1.0),
    )
    .unwrap();
    assert!(qp_oracle(&p).is_none());
    assert_eq!(
        solve_qp(&p, &QpSettings::default()).unwrap().status,
        QpStatus::Infeasible
    );
}
