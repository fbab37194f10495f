//! Robust policy evaluation and planning by backward induction.
//!
//! Each backup takes the robust expectation of the next-step value over the
//! per-(s,a) ambiguity ball. Per-row backups within a step are independent
//! and run data-parallel; the result is bitwise identical to a sequential
//! sweep because every row only writes its own slot.

use rayon::prelude::*;

use crate::duals::{self, dual_inf, dual_inf_with_rho, tv_primal_inf};
use crate::error::{Error, Result};
use crate::model::{Divergence, Policy, RobustSpec, TabularRmdp, ValueTable};
use crate::rng::CounterRng;

/// Value tables plus, for TV robust sets, the extracted worst-case kernels.
pub type CertifiedValues = (ValueTable, Option<Vec<Vec<Vec<f64>>>>);

/// Planning output: greedy policy, its value tables, and (TV only) the
/// worst-case kernels certifying the values.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PlanResult {
    pub policy: Policy,
    pub values: ValueTable,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worst_kernels: Option<Vec<Vec<Vec<f64>>>>,
}

fn check_shapes(m: &TabularRmdp, pi: &Policy) -> Result<()> {
    m.validate()?;
    pi.validate(m.horizon, m.num_states, m.num_actions)
}

/// Robust evaluation of `pi`: backward recursion
/// `Q_h(s,a) = R_h(s,a) + inf E[V_{h+1}]`, `V_h(s) = sum_a pi(a|s) Q_h(s,a)`.
pub fn robust_evaluate(m: &TabularRmdp, pi: &Policy) -> Result<ValueTable> {
    Ok(robust_evaluate_certified(m, pi)?.0)
}

/// As `robust_evaluate`, additionally extracting the per-step worst-case
/// kernels when the robust set is a TV ball (the minimizer is closed-form).
pub fn robust_evaluate_certified(m: &TabularRmdp, pi: &Policy) -> Result<CertifiedValues> {
    check_shapes(m, pi)?;
    sweep(m, Some(pi)).map(|(vt, _, wk)| (vt, wk))
}

/// Robust optimal planning: greedy backups with ties broken to the lowest
/// action index.
pub fn robust_plan(m: &TabularRmdp) -> Result<PlanResult> {
    m.validate()?;
    let (values, actions, worst_kernels) = sweep(m, None)?;
    let policy = Policy::deterministic(&actions.expect("plan mode yields actions"), m.num_actions);
    Ok(PlanResult {
        policy,
        values,
        worst_kernels,
    })
}

type SweepOut = (ValueTable, Option<Vec<Vec<usize>>>, Option<Vec<Vec<Vec<f64>>>>);

// Shared backward sweep; `pi = None` plans greedily.
fn sweep(m: &TabularRmdp, pi: Option<&Policy>) -> Result<SweepOut> {
    let (s_count, a_count, horizon) = (m.num_states, m.num_actions, m.horizon);
    let extract = m.robust.divergence == Divergence::Tv;
    let mut v = vec![vec![0.0; s_count]; horizon + 1];
    let mut q = vec![vec![vec![0.0; a_count]; s_count]; horizon];
    let mut actions = pi.is_none().then(|| vec![vec![0usize; s_count]; horizon]);
    let mut worst = extract.then(|| vec![vec![Vec::new(); s_count * a_count]; horizon]);

    for h in (0..horizon).rev() {
        let cap = (horizon - h - 1) as f64;
        let v_next = &v[h + 1];
        let per_row: Vec<(f64, Vec<f64>)> = (0..s_count * a_count)
            .into_par_iter()
            .map(|row| -> Result<(f64, Vec<f64>)> {
                let p = &m.kernels[h][row];
                let d = dual_inf(p, v_next, &m.robust, cap)?;
                let wq = if extract {
                    tv_primal_inf(p, v_next, m.robust.rho)?.1
                } else {
                    Vec::new()
                };
                Ok((m.rewards[h][row] + d.value, wq))
            })
            .collect::<Result<_>>()?;
        for s in 0..s_count {
            for a in 0..a_count {
                q[h][s][a] = per_row[s * a_count + a].0;
            }
            v[h][s] = match pi {
                Some(pi) => (0..a_count).map(|a| pi.probs[h][s][a] * q[h][s][a]).sum(),
                None => {
                    let mut best_a = 0;
                    for a in 1..a_count {
                        if q[h][s][a] > q[h][s][best_a] {
                            best_a = a;
                        }
                    }
                    actions.as_mut().unwrap()[h][s] = best_a;
                    q[h][s][best_a]
                }
            };
        }
        if let Some(w) = worst.as_mut() {
            for (row, item) in per_row.into_iter().enumerate() {
                w[h][row] = item.1;
            }
        }
    }
    let vt = ValueTable { v, q: Some(q) };
    Ok((vt, actions, worst))
}

/// Standard (non-robust) policy evaluation under explicit kernels.
pub fn standard_evaluate(
    kernels: &[Vec<Vec<f64>>],
    rewards: &[Vec<f64>],
    pi: &Policy,
    num_states: usize,
    num_actions: usize,
) -> Result<ValueTable> {
    let horizon = kernels.len();
    pi.validate(horizon, num_states, num_actions)?;
    let mut v = vec![vec![0.0; num_states]; horizon + 1];
    let mut q = vec![vec![vec![0.0; num_actions]; num_states]; horizon];
    for h in (0..horizon).rev() {
        for s in 0..num_states {
            for a in 0..num_actions {
                let row = s * num_actions + a;
                let exp: f64 = kernels[h][row]
                    .iter()
                    .zip(&v[h + 1])
                    .map(|(p, x)| p * x)
                    .sum();
                q[h][s][a] = rewards[h][row] + exp;
            }
            v[h][s] = (0..num_actions)
                .map(|a| pi.probs[h][s][a] * q[h][s][a])
                .sum();
        }
    }
    Ok(ValueTable { v, q: Some(q) })
}

/// Standard (non-robust) optimal planning under explicit kernels.
pub fn standard_plan(
    kernels: &[Vec<Vec<f64>>],
    rewards: &[Vec<f64>],
    num_states: usize,
    num_actions: usize,
) -> (Policy, ValueTable) {
    let horizon = kernels.len();
    let mut v = vec![vec![0.0; num_states]; horizon + 1];
    let mut q = vec![vec![vec![0.0; num_actions]; num_states]; horizon];
    let mut actions = vec![vec![0usize; num_states]; horizon];
    for h in (0..horizon).rev() {
        for s in 0..num_states {
            let mut best = 0;
            for a in 0..num_actions {
                let row = s * num_actions + a;
                let exp: f64 = kernels[h][row]
                    .iter()
                    .zip(&v[h + 1])
                    .map(|(p, x)| p * x)
                    .sum();
                q[h][s][a] = rewards[h][row] + exp;
                if q[h][s][a] > q[h][s][best] {
                    best = a;
                }
            }
            actions[h][s] = best;
            v[h][s] = q[h][s][best];
        }
    }
    (
        Policy::deterministic(&actions, num_actions),
        ValueTable { v, q: Some(q) },
    )
}

/// Largest robust Bellman residual `|Q_h - R_h - inf E[V_{h+1}]|` of a value
/// table against a model.
pub fn bellman_residual(m: &TabularRmdp, vt: &ValueTable) -> Result<f64> {
    let q = vt
        .q
        .as_ref()
        .ok_or_else(|| Error::shape("value table carries no Q entries"))?;
    let mut worst = 0.0f64;
    for h in 0..m.horizon {
        let cap = (m.horizon - h - 1) as f64;
        for s in 0..m.num_states {
            for a in 0..m.num_actions {
                let row = s * m.num_actions + a;
                let d = dual_inf(&m.kernels[h][row], &vt.v[h + 1], &m.robust, cap)?;
                worst = worst.max((q[h][s][a] - m.rewards[h][row] - d.value).abs());
            }
        }
    }
    Ok(worst)
}

/// Suboptimality gap of `pi_hat` at the initial state: optimal robust value
/// minus the policy's robust value.
pub fn suboptimality(m: &TabularRmdp, pi_hat: &Policy) -> Result<f64> {
    let plan = robust_plan(m)?;
    let eval = robust_evaluate(m, pi_hat)?;
    Ok(plan.values.initial(m.initial_state) - eval.initial(m.initial_state))
}

/// One-step robust backup for a product-of-factors ambiguity set.
///
/// Minimizes `E_{q_1 x .. x q_d}[v]` over per-factor balls by coordinate
/// descent: with the other factors fixed, the inner problem for factor `j`
/// is a single-factor dual on the marginalized value and is solved exactly.
/// The objective is nonconvex in the joint factors, so the sweep restarts
/// from `restarts` random feasible initializations (plus the nominal one)
/// and the return is the best value found -- an upper bound on the exact
/// infimum whose gap is measured, not assumed, by the test suite.
pub fn factored_robust_backup(
    factor_dists: &[Vec<f64>],
    spec: &RobustSpec,
    v: &[f64],
    value_cap: f64,
    restarts: u32,
    seed: u64,
) -> Result<f64> {
    let d = factor_dists.len();
    if d == 0 {
        return Err(Error::shape("no factors given"));
    }
    let o = factor_dists[0].len();
    for (i, p) in factor_dists.iter().enumerate() {
        if p.len() != o {
            return Err(Error::shape(format!("factor {i} has {} outcomes, expected {o}", p.len())));
        }
    }
    let states = o
        .checked_pow(d as u32)
        .ok_or_else(|| Error::invalid("outcome grid overflows"))?;
    if v.len() != states {
        return Err(Error::shape(format!("value vector has {} entries, expected {states}", v.len())));
    }
    if states > crate::model::MAX_EXPANDED_STATES {
        return Err(Error::invalid("outcome grid exceeds the expansion bound"));
    }
    if d == 1 {
        return Ok(dual_inf_with_rho(&factor_dists[0], v, spec, spec.factor_rho(0), value_cap)?.value);
    }

    let marginal = |qs: &[Vec<f64>], j: usize| -> Vec<f64> {
        let mut out = vec![0.0; o];
        for (state, &val) in v.iter().enumerate() {
            let fac = crate::model::state_to_factors(state, d, o);
            let mut w = 1.0;
            for (i, q) in qs.iter().enumerate() {
                if i != j {
                    w *= q[fac[i]];
                }
            }
            out[fac[j]] += w * val;
        }
        out
    };

    let mut best = f64::INFINITY;
    for restart in 0..=restarts {
        let mut rng = CounterRng::new(seed, restart as u64);
        let mut qs: Vec<Vec<f64>> = if restart == 0 {
            factor_dists.to_vec()
        } else {
            (0..d)
                .map(|i| sample_in_ball(&factor_dists[i], spec, spec.factor_rho(i), &mut rng))
                .collect()
        };
        let mut value = f64::INFINITY;
        for _sweep in 0..200 {
            let previous = value;
            for j in 0..d {
                let upsilon = marginal(&qs, j);
                let rho_j = spec.factor_rho(j);
                let (val, q_new) = match spec.divergence {
                    Divergence::Tv => tv_primal_inf(&factor_dists[j], &upsilon, rho_j)?,
                    Divergence::Kl => {
                        let (res, q) = duals::kl_worst_case(
                            &factor_dists[j],
                            &upsilon,
                            rho_j,
                            spec.lambda_floor_or_default(),
                            value_cap,
                        )?;
                        (res.value, q)
                    }
                };
                qs[j] = q_new;
                value = val;
            }
            if (previous - value).abs() <= 1e-8 * value.abs().max(1.0) {
                break;
            }
        }
        best = best.min(value);
    }
    Ok(best)
}

/// Draw a random distribution inside the ball of radius `rho` around `p`.
pub(crate) fn sample_in_ball(
    p: &[f64],
    spec: &RobustSpec,
    rho: f64,
    rng: &mut CounterRng,
) -> Vec<f64> {
    match spec.divergence {
        Divergence::Tv => {
            // Shift a random sub-budget of mass onto one random outcome,
            // donated proportionally by the others.
            let target = rng.next_u64() as usize % p.len();
            let budget = (rng.next_f64() * rho).min(1.0 - p[target]);
            let mut q = p.to_vec();
            let pool = 1.0 - p[target];
            if pool > 0.0 && budget > 0.0 {
                for (i, x) in q.iter_mut().enumerate() {
                    if i != target {
                        *x -= budget * p[i] / pool;
                    }
                }
                q[target] += budget;
            }
            q
        }
        Divergence::Kl => {
            // Random exponential tilt rescaled into the ball by bisection
            // on the tilt temperature.
            let dirs: Vec<f64> = (0..p.len()).map(|_| rng.next_f64() - 0.5).collect();
            let tilt = |eta: f64| -> Vec<f64> {
                let mut q: Vec<f64> = p
                    .iter()
                    .zip(&dirs)
                    .map(|(pi, g)| pi * (eta * g).exp())
                    .collect();
                let z: f64 = q.iter().sum();
                q.iter_mut().for_each(|x| *x /= z);
                q
            };
            let kl = |q: &[f64]| -> f64 {
                q.iter()
                    .zip(p)
                    .filter(|(qi, pi)| **qi > 0.0 && **pi > 0.0)
                    .map(|(qi, pi)| qi * (qi / pi).ln())
                    .sum()
            };
            let mut eta = rng.next_f64() * 4.0;
            for _ in 0..40 {
                if kl(&tilt(eta)) <= rho {
                    break;
                }
                eta *= 0.5;
            }
            tilt(eta)
        }
    }
}

/// One-step d-rectangular robust backup for linear models:
/// `sum_i phi_i(s,a) * inf E_{mu_i-ball}[v]`, exact because the nonnegative
/// simplex features decouple the per-factor infima.
pub fn linear_robust_backup(
    phi_sa: &[f64],
    mus: &[Vec<f64>],
    v: &[f64],
    spec: &RobustSpec,
    value_cap: f64,
) -> Result<f64> {
    if phi_sa.len() != mus.len() {
        return Err(Error::shape("feature and measure dimensions differ"));
    }
    let sum: f64 = phi_sa.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || phi_sa.iter().any(|&x| x < 0.0) {
        return Err(Error::invalid("feature vector must lie on the simplex"));
    }
    let mut acc = 0.0;
    for (phi_i, mu) in phi_sa.iter().zip(mus) {
        if *phi_i == 0.0 {
            continue;
        }
        acc += phi_i * dual_inf(mu, v, spec, value_cap)?.value;
    }
    Ok(acc)
}
