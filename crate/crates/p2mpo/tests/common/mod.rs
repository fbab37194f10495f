//! Shared oracles and fixtures for the integration suites. Everything here
//! is deliberately independent of the library's dual/backup code paths: the
//! LP oracles go through a simplex solver, the grid oracles enumerate.

#![allow(dead_code)]

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use p2mpo::model::{Model, TabularRmdp};
use p2mpo::rng::CounterRng;
use std::path::PathBuf;

pub fn testdata(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("testdata").join(name)
}

/// The 4-state reference model used by the calibration and rate criteria.
pub fn reference_model() -> TabularRmdp {
    match p2mpo::model::load_model(testdata("chain4.json"), Some("tabular")).unwrap() {
        Model::Tabular(m) => m,
        _ => unreachable!(),
    }
}

/// Estimation constants calibrated once for the reference experiment family.
pub fn reference_constants() -> p2mpo::estimation::EstimationConstants {
    p2mpo::estimation::EstimationConstants {
        c1: 1.0,
        c2: 1.0,
        c_dec: 0.25,
    }
}

/// Random distribution with entries bounded away from zero.
pub fn random_dist(rng: &mut CounterRng, m: usize, floor: f64) -> Vec<f64> {
    let mut row: Vec<f64> = (0..m).map(|_| rng.next_f64() + floor).collect();
    let sum: f64 = row.iter().sum();
    row.iter_mut().for_each(|x| *x /= sum);
    row
}

pub fn random_values(rng: &mut CounterRng, m: usize) -> Vec<f64> {
    (0..m).map(|_| rng.next_f64()).collect()
}

/// LP oracle for `min q.v` over the TV ball (half-L1 radius `rho`).
pub fn tv_lp_inf(p: &[f64], v: &[f64], rho: f64) -> f64 {
    let m = p.len();
    let mut prob = Problem::new(OptimizationDirection::Minimize);
    let q: Vec<_> = (0..m).map(|i| prob.add_var(v[i], (0.0, 1.0))).collect();
    let u: Vec<_> = (0..m).map(|_| prob.add_var(0.0, (0.0, 2.0))).collect();
    prob.add_constraint(q.iter().map(|&x| (x, 1.0)), ComparisonOp::Eq, 1.0);
    for i in 0..m {
        // u_i >= |q_i - p_i|
        prob.add_constraint([(q[i], 1.0), (u[i], -1.0)], ComparisonOp::Le, p[i]);
        prob.add_constraint([(q[i], -1.0), (u[i], -1.0)], ComparisonOp::Le, -p[i]);
    }
    prob.add_constraint(u.iter().map(|&x| (x, 1.0)), ComparisonOp::Le, 2.0 * rho);
    prob.solve().expect("tv lp feasible").objective()
}

/// LP oracle for the exact two-ball composition: `min ptilde.v` over
/// `p_mid` in the eps-ball around `p_hat` and `ptilde` in the rho-ball
/// around `p_mid` (both half-L1).
pub fn two_ball_lp_inf(p_hat: &[f64], v: &[f64], eps: f64, rho: f64) -> f64 {
    let m = p_hat.len();
    let mut prob = Problem::new(OptimizationDirection::Minimize);
    let mid: Vec<_> = (0..m).map(|_| prob.add_var(0.0, (0.0, 1.0))).collect();
    let tilde: Vec<_> = (0..m).map(|i| prob.add_var(v[i], (0.0, 1.0))).collect();
    let u: Vec<_> = (0..m).map(|_| prob.add_var(0.0, (0.0, 2.0))).collect();
    let w: Vec<_> = (0..m).map(|_| prob.add_var(0.0, (0.0, 2.0))).collect();
    prob.add_constraint(mid.iter().map(|&x| (x, 1.0)), ComparisonOp::Eq, 1.0);
    prob.add_constraint(tilde.iter().map(|&x| (x, 1.0)), ComparisonOp::Eq, 1.0);
    for i in 0..m {
        prob.add_constraint([(mid[i], 1.0), (u[i], -1.0)], ComparisonOp::Le, p_hat[i]);
        prob.add_constraint([(mid[i], -1.0), (u[i], -1.0)], ComparisonOp::Le, -p_hat[i]);
        prob.add_constraint([(tilde[i], 1.0), (mid[i], -1.0), (w[i], -1.0)], ComparisonOp::Le, 0.0);
        prob.add_constraint([(tilde[i], -1.0), (mid[i], 1.0), (w[i], -1.0)], ComparisonOp::Le, 0.0);
    }
    prob.add_constraint(u.iter().map(|&x| (x, 1.0)), ComparisonOp::Le, 2.0 * eps);
    prob.add_constraint(w.iter().map(|&x| (x, 1.0)), ComparisonOp::Le, 2.0 * rho);
    prob.solve().expect("two-ball lp feasible").objective()
}

/// Random tabular model with floor-mixed kernels (every row well inside the
/// simplex) and uniform random rewards.
pub fn random_model(seed: u64, s: usize, a: usize, h: usize, robust: p2mpo::model::RobustSpec) -> TabularRmdp {
    let mut rng = CounterRng::new(seed, 0);
    let rows = s * a;
    let mut kernels = Vec::new();
    let mut rewards = Vec::new();
    for _ in 0..h {
        let step: Vec<Vec<f64>> = (0..rows).map(|_| random_dist(&mut rng, s, 0.05)).collect();
        kernels.push(step);
        rewards.push(random_values(&mut rng, rows));
    }
    TabularRmdp {
        num_states: s,
        num_actions: a,
        horizon: h,
        kernels,
        rewards,
        robust,
        initial_state: 0,
    }
}

/// Random stochastic policy.
pub fn random_policy(seed: u64, s: usize, a: usize, h: usize) -> p2mpo::model::Policy {
    let mut rng = CounterRng::new(seed, 1);
    let probs = (0..h)
        .map(|_| (0..s).map(|_| random_dist(&mut rng, a, 0.01)).collect())
        .collect();
    p2mpo::model::Policy { probs }
}
