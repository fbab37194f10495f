//! The doubly pessimistic value estimator and policy optimizer: one backup
//! composes data uncertainty (a half-L1 ball of radius `eps` around the
//! estimated row) with environment uncertainty (the divergence ball of
//! radius `rho` around each candidate row).
//!
//! For TV robust sets the two balls merge: a point within `rho` of a point
//! within `eps` of the center is within `rho + eps` of the center, and
//! conversely any distribution in the merged ball is reachable through the
//! segment toward the center, so the merged radius `min(1, rho + eps)` is
//! used directly. For KL there is no triangle inequality; instead, for each
//! dual variable the inner minimization over the data ball of the linear
//! functional `E_P[exp(-v/lambda)]` is solved in closed form by shifting
//! `eps` mass from the largest-`v` outcomes onto the global argmin, which is
//! the same shift for every `lambda`, so the outer scalar search proceeds on
//! the shifted row.

use serde::Serialize;

use crate::dp::{robust_evaluate, robust_plan};
use crate::duals::{kl_dual_inf, tv_dual_inf, tv_primal_inf};
use crate::error::{Error, Result};
use crate::estimation::{confidence_region, ConfidenceRegion, EstimationConstants};
use crate::model::{Divergence, Policy, RobustSpec, TabularRmdp, ValueTable};
use crate::offline::{coverage_coefficient, generate};

/// One doubly pessimistic backup: `inf` over the composed uncertainty of
/// `E[v]` around the estimated row `p_hat` with data radius `eps`.
pub fn doubly_pessimistic_backup(
    p_hat: &[f64],
    eps: f64,
    v: &[f64],
    robust: &RobustSpec,
    value_cap: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::invalid(format!("data radius must be in [0, 1], got {eps}")));
    }
    match robust.divergence {
        Divergence::Tv => {
            let merged = (robust.rho + eps).min(1.0);
            Ok(tv_dual_inf(p_hat, v, merged, value_cap)?.value)
        }
        Divergence::Kl => {
            if eps == 0.0 {
                return Ok(kl_dual_inf(
                    p_hat,
                    v,
                    robust.rho,
                    robust.lambda_floor_or_default(),
                    value_cap,
                )?
                .value);
            }
            let (_, shifted) = tv_primal_inf(p_hat, v, eps)?;
            Ok(kl_dual_inf(
                &shifted,
                v,
                robust.rho,
                robust.lambda_floor_or_default(),
                value_cap,
            )?
            .value)
        }
    }
}

type PessSweep = (ValueTable, Option<Vec<Vec<usize>>>);

fn pessimistic_sweep(
    rewards: &[Vec<f64>],
    region: &ConfidenceRegion,
    robust: &RobustSpec,
    pi: Option<&Policy>,
) -> Result<PessSweep> {
    let (s_count, a_count, horizon) = (region.num_states, region.num_actions, region.horizon);
    if rewards.len() != horizon || rewards.iter().any(|r| r.len() != s_count * a_count) {
        return Err(Error::shape("reward table does not match the region dimensions"));
    }
    if let Some(pi) = pi {
        pi.validate(horizon, s_count, a_count)?;
    }
    let mut v = vec![vec![0.0; s_count]; horizon + 1];
    let mut q = vec![vec![vec![0.0; a_count]; s_count]; horizon];
    let mut actions = pi.is_none().then(|| vec![vec![0usize; s_count]; horizon]);
    for h in (0..horizon).rev() {
        let cap = (horizon - h - 1) as f64;
        for s in 0..s_count {
            for a in 0..a_count {
                let row = s * a_count + a;
                let inf = doubly_pessimistic_backup(
                    &region.center[h][row],
                    region.per_sa_radius[h][row],
                    &v[h + 1],
                    robust,
                    cap,
                )?;
                q[h][s][a] = rewards[h][row] + inf;
            }
            v[h][s] = match pi {
                Some(pi) => (0..a_count).map(|a| pi.probs[h][s][a] * q[h][s][a]).sum(),
                None => {
                    let mut best = 0;
                    for a in 1..a_count {
                        if q[h][s][a] > q[h][s][best] {
                            best = a;
                        }
                    }
                    actions.as_mut().unwrap()[h][s] = best;
                    q[h][s][best]
                }
            };
            // Pessimism floor: rewards are nonnegative, so is the value.
            v[h][s] = v[h][s].max(0.0);
        }
    }
    Ok((ValueTable { v, q: Some(q) }, actions))
}

/// Doubly pessimistic policy evaluation: the `J` table of `pi` under the
/// region and robust set; `J` at the initial state is the scalar estimator
/// the optimizer maximizes.
pub fn doubly_pessimistic_evaluate(
    rewards: &[Vec<f64>],
    region: &ConfidenceRegion,
    robust: &RobustSpec,
    pi: &Policy,
) -> Result<ValueTable> {
    Ok(pessimistic_sweep(rewards, region, robust, Some(pi))?.0)
}

/// Greedy maximization of the doubly pessimistic value, ties to the lowest
/// action index. The backup is itself a rectangular robust backup, so the
/// greedy policy attains the maximum over Markovian policies.
pub fn optimize(
    rewards: &[Vec<f64>],
    region: &ConfidenceRegion,
    robust: &RobustSpec,
) -> Result<(Policy, ValueTable)> {
    let (values, actions) = pessimistic_sweep(rewards, region, robust, None)?;
    let policy = Policy::deterministic(&actions.expect("plan mode"), region.num_actions);
    Ok((policy, values))
}

/// Post-hoc diagnostics of one end-to-end run.
#[derive(Debug, Clone, Serialize)]
pub struct RunDiagnostics {
    /// Whether the nominal kernel passed the exact averaged membership test.
    pub nominal_in_region: bool,
    /// Per-step averaged-L1 statistics of the nominal kernel.
    pub membership_statistic: Vec<f64>,
    pub xi: f64,
    /// Monte-Carlo lower bound on the robust partial coverage coefficient.
    pub coverage_estimate: f64,
    pub min_row_count: u64,
}

/// End-to-end result of `run_p2mpo`.
#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub policy: Policy,
    pub pessimistic_value: f64,
    pub subopt: f64,
    pub diagnostics: RunDiagnostics,
}

/// Full pipeline on a known model: sample data under the behavior policy,
/// estimate, optimize, and score the learned policy's robust suboptimality
/// against the robust plan.
pub fn run_p2mpo(
    model: &TabularRmdp,
    pi_b: &Policy,
    n: usize,
    delta: f64,
    seed: u64,
    constants: &EstimationConstants,
) -> Result<RunOutcome> {
    let plan = robust_plan(model)?;
    let data = generate(model, pi_b, n, seed)?;
    let region = confidence_region(&data, delta, constants)?;
    let (policy, values) = optimize(&model.rewards, &region, &model.robust)?;
    let learned = robust_evaluate(model, &policy)?;
    let subopt = plan.values.initial(model.initial_state) - learned.initial(model.initial_state);
    let membership_statistic = region.statistic(&model.kernels)?;
    let nominal_in_region = membership_statistic.iter().all(|&s| s <= region.xi);
    let coverage_estimate = coverage_coefficient(model, pi_b, &plan.policy, 8, seed ^ 0x5eed)?;
    let min_row_count = region
        .counts
        .iter()
        .flat_map(|step| step.iter().copied())
        .min()
        .unwrap_or(0);
    Ok(RunOutcome {
        policy,
        pessimistic_value: values.initial(model.initial_state),
        subopt,
        diagnostics: RunDiagnostics {
            nominal_in_region,
            membership_statistic,
            xi: region.xi,
            coverage_estimate,
            min_row_count,
        },
    })
}
