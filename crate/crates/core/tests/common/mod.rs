#![allow(dead_code)]

use hvac_tune::qp::QpProblem;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Strictly convex random QP that is feasible by construction.
pub fn random_qp(rng: &mut ChaCha8Rng, n: usize, m: usize) -> QpProblem {
    let mut normal = || -> f64 { StandardNormal.sample(&mut *rng) };
    let mm = DMatrix::from_fn(n, n, |_, _| normal());
    let h = mm.tr_mul(&mm) + DMatrix::identity(n, n) * 0.1;
    let h = (&h + h.transpose()) * 0.5;
    let f = DVector::from_fn(n, |_, _| 5.0 * normal());
    let a = DMatrix::from_fn(m, n, |_, _| normal());
    let xf = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let b = &a * &xf + DVector::from_fn(m, |_, _| rng.random_range(0.0..1.0));
    let mut lb = DVector::from_element(n, f64::NEG_INFINITY);
    let mut ub = DVector::from_element(n, f64::INFINITY);
    for j in 0..n {
        if rng.random_bool(0.5) {
            lb[j] = xf[j] - rng.random_range(0.1..1.0);
            ub[j] = xf[j] + rng.random_range(0.1..1.0);
        }
    }
    QpProblem::new(h, f, a, b, lb, ub).unwrap()
}

/// Exact minimizer of a strictly convex QP by active-set enumeration.
///
/// Every constraint (rows of `A` plus each finite bound) is turned into a row
/// `gᵀx ≤ c`. Subsets are visited in order of increasing size; for each one the
/// equality-constrained KKT system is solved and the first point that is both
/// primal and dual feasible is the unique optimum. Returns `None` if no subset
/// qualifies, i.e. the problem is infeasible.
pub fn qp_oracle(p: &QpProblem) -> Option<(DVector<f64>, f64)> {
    let n = p.n();
    let mut rows: Vec<(DVector<f64>, f64, Option<usize>)> = Vec::new();
    for i in 0..p.m() {
        rows.push((p.a_ineq.row(i).transpose(), p.b_ineq[i], None));
    }
    for j in 0..n {
        if p.ub[j].is_finite() {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            rows.push((e, p.ub[j], Some(j)));
        }
        if p.lb[j].is_finite() {
            let mut e = DVector::zeros(n);
            e[j] = -1.0;
            rows.push((e, -p.lb[j], Some(j)));
        }
    }
    let total = rows.len();
    let tol = 1e-9;
    for size in 0..=n.min(total) {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            let clash = idx
                .windows(2)
                .any(|w| rows[w[0]].2.is_some() && rows[w[0]].2 == rows[w[1]].2);
            if !clash {
                let dim = n + size;
                let mut k = DMatrix::zeros(dim, dim);
                let mut rhs = DVector::zeros(dim);
                k.view_mut((0, 0), (n, n)).copy_from(&p.h);
                for j in 0..n {
                    rhs[j] = -p.f[j];
                }
                for (r, &c) in idx.iter().enumerate() {
                    for j in 0..n {
                        k[(n + r, j)] = rows[c].0[j];
                        k[(j, n + r)] = rows[c].0[j];
                    }
                    rhs[n + r] = rows[c].1;
                }
                if let Some(sol) = k.lu().solve(&rhs) {
                    let x = sol.rows(0, n).into_owned();
                    let dual_ok = (0..size).all(|r| sol[n + r] >= -tol);
                    let primal_ok = rows
                        .iter()
                        .all(|(g, c, _)| g.dot(&x) <= c + tol * (1.0 + c.abs()));
                    if dual_ok && primal_ok && sol.iter().all(|v| v.is_finite()) {
                        let obj = p.objective(&x);
                        return Some((x, obj));
                    }
                }
            }
            if !next_combination(&mut idx, total) {
                break;
            }
        }
    }
    None
}

/// Advances `idx` to the next k-subset of `0..total` in lexicographic order.
pub fn next_combination(idx: &mut [usize], total: usize) -> bool {
    let k = idx.len();
    for i in (0..k).rev() {
        if idx[i] < total - k + i {
            idx[i] += 1;
            for t in i + 1..k {
                idx[t] = idx[t - 1] + 1;
            }
            return true;
        }
    }
    false
}
