use std::convert::Infallible;

use hvac_tune::config_opt::{run_config, ConfigParams, Domain};
use proptest::prelude::*;

fn toy_1d(t: &[f64]) -> Result<(f64, f64), Infallible> {
    Ok(((t[0] - 0.3).powi(2), 0.5 - t[0]))
}

fn toy_2d(t: &[f64]) -> Result<(f64, f64), Infallible> {
    Ok(((t[0] - 0.7).powi(2) + (t[1] - 0.2).powi(2), 0.25 - t[0]))
}

#[test]
fn one_dimensional_toy_reaches_constraint_boundary() {
    let mut hits = 0;
    for seed in 0..5 {
        let p = ConfigParams {
            seed,
            max_iters: 30,
            ..Default::default()
        };
        let r = run_config(toy_1d, &p).unwrap();
        let best = r.best_feasible.unwrap();
        println!("seed {seed}: best theta {:?} j {}", best.theta, best.j_eur);
        if (best.theta[0] - 0.5).abs() <= 0.05 {
            hits += 1;
        }
    }
    assert!(hits >= 4, "{hits}/5");
}

#[test]
fn two_dimensional_toy_finds_interior_optimum() {
    let mut hits = 0;
    for seed in 0..5 {
        let p = ConfigParams {
            seed,
            max_iters: 40,
            domain: Domain::unit(2),
            ..Default::default()
        };
        let r = run_config(toy_2d, &p).unwrap();
        let best = r.best_feasible.unwrap();
        println!("seed {seed}: best theta {:?}", best.theta);
        if (best.theta[0] - 0.7).hypot(best.theta[1] - 0.2) <= 0.05 {
            hits += 1;
        }
    }
    assert!(hits >= 4, "{hits}/5");
}

#[test]
fn always_violated_constraint_is_declared_infeasible() {
    for seed in 0..5 {
        let p = ConfigParams {
            seed,
            max_iters: 25,
            ..Default::default()
        };
        let r = run_config(|t: &[f64]| Ok::<_, Infallible>((t[0], 1.0)), &p).unwrap();
        assert!(r.infeasibility_declared, "seed {seed}");
        assert!(r.history.len() < 25);
        assert!(r.best_feasible.is_none());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn proposals_stay_in_box_and_incumbent_is_monotone(seed in any::<u64>(), lo in -5.0f64..0.0, width in 0.1f64..10.0) {
        let p = ConfigParams {
            seed,
            max_iters: 14,
            domain: Domain::new(vec![lo, 0.0], vec![lo + width, 1.0]).unwrap(),
            ..Default::default()
        };
        let r = run_config(|t: &[f64]| Ok::<_, Infallible>((t[0].sin() + t[1], 0.3 - t[1])), &p).unwrap();
        prop_assert!(r.history.len() <= 14);
        for rec in &r.history {
            prop_assert!(p.domain.contains(&rec.theta));
        }
        let trace = r.incumbent_trace();
        for w in trace.windows(2) {
            if let (Some(a), Some(b)) = (w[0], w[1]) {
                prop_assert!(b <= a);
            }
        }
        if let Some(best) = &r.best_feasible {
            let min = r.history.iter().filter(|x| x.feasible).map(|x| x.j_eur).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(best.j_eur, min);
        }
    }
}
