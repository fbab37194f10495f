//! One-step distributionally robust expectations.
//!
//! Each function evaluates `inf E_q[v]` over an ambiguity ball of
//! distributions `q` around a nominal `p`, via the convex dual of the
//! constrained problem. The TV dual is piecewise linear in the dual variable
//! and is solved exactly at its breakpoints; the KL dual is smooth and
//! concave and is solved by golden-section search on the bracketed dual
//! variable. `brute_force_inf` and `tv_primal_inf` are slow or structural
//! counterparts kept as independent cross-checks.

use crate::error::{Error, Result};
use crate::model::{Divergence, RobustSpec};

/// Outcome of a dual evaluation.
///
/// `lambda_star` is the maximizing dual variable: in `[0, cap/rho]` for KL
/// (`f64::INFINITY` when `rho == 0`, where the dual flattens) and in
/// `[0, cap]` for TV. `iterations` counts scalar-search steps and is 0 for
/// closed-form paths.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct DualResult {
    pub value: f64,
    pub lambda_star: f64,
    pub iterations: u32,
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid("empty distribution"));
    }
    let mut sum = 0.0;
    for (i, &x) in p.iter().enumerate() {
        if !x.is_finite() || x < 0.0 {
            return Err(Error::invalid(format!("p[{i}] = {x} is not a probability")));
        }
        sum += x;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("p sums to {sum}")));
    }
    Ok(())
}

fn check_values(v: &[f64], len: usize, cap: f64) -> Result<()> {
    if !cap.is_finite() || cap < 0.0 {
        return Err(Error::invalid(format!("value cap must be finite and >= 0, got {cap}")));
    }
    if v.len() != len {
        return Err(Error::shape(format!("value vector has {} entries, expected {len}", v.len())));
    }
    for (i, &x) in v.iter().enumerate() {
        if !x.is_finite() || x < -1e-6 || x > cap + 1e-6 {
            return Err(Error::invalid(format!("v[{i}] = {x} outside [0, {cap}]")));
        }
    }
    Ok(())
}

fn expectation(p: &[f64], v: &[f64]) -> f64 {
    p.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Maximize a unimodal `f` on `[lo, hi]` by golden-section search.
///
/// Returns `(x, f(x), evaluations)`; the bracket endpoints are evaluated by
/// the caller.
fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64, u32) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    let mut evals = 2u32;
    while hi - lo > tol && evals < 400 {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
        evals += 1;
    }
    if f1 >= f2 {
        (x1, f1, evals)
    } else {
        (x2, f2, evals)
    }
}

/// Robust expectation over the TV ball of half-L1 radius `rho`.
///
/// The dual objective
/// `g(l) = l - E_p[(l - v)_+] - rho * (l - min v)_+`
/// is piecewise linear and concave, so the supremum sits at a breakpoint;
/// evaluating `g` at `{0} ∪ {v_i}` is exact.
pub fn tv_dual_inf(p: &[f64], v: &[f64], rho: f64, value_cap: f64) -> Result<DualResult> {
    check_distribution(p)?;
    check_values(v, p.len(), value_cap)?;
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("tv radius must be in [0, 1], got {rho}")));
    }
    if rho == 0.0 {
        let vmax = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        return Ok(DualResult {
            value: expectation(p, v),
            lambda_star: vmax,
            iterations: 0,
        });
    }
    let vmin = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let g = |l: f64| {
        let mut acc = l;
        for (pi, vi) in p.iter().zip(v) {
            acc -= pi * (l - vi).max(0.0);
        }
        acc - rho * (l - vmin).max(0.0)
    };
    let mut best = (0.0f64, g(0.0));
    for &cand in v {
        let val = g(cand);
        if val > best.1 {
            best = (cand, val);
        }
    }
    Ok(DualResult {
        value: best.1,
        lambda_star: best.0,
        iterations: 0,
    })
}

/// Exact minimizer over the TV ball: shift `min(rho, 1 - p[argmin v])` mass
/// from outcomes in decreasing-`v` order onto the global argmin of `v`
/// (lowest index on ties). Returns the optimal value and the minimizing
/// distribution.
pub fn tv_primal_inf(p: &[f64], v: &[f64], rho: f64) -> Result<(f64, Vec<f64>)> {
    check_distribution(p)?;
    if v.len() != p.len() {
        return Err(Error::shape("p and v length mismatch".to_string()));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("tv radius must be in [0, 1], got {rho}")));
    }
    let target = v
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let mut q = p.to_vec();
    let mut budget = rho.min(1.0 - p[target]);
    q[target] += budget;
    let mut donors: Vec<usize> = (0..p.len()).filter(|&i| i != target).collect();
    donors.sort_by(|&i, &j| v[j].partial_cmp(&v[i]).unwrap().then(i.cmp(&j)));
    for i in donors {
        if budget <= 0.0 {
            break;
        }
        let take = p[i].min(budget);
        q[i] -= take;
        budget -= take;
    }
    Ok((expectation(&q, v), q))
}

/// Robust expectation over the KL ball of radius `rho`.
///
/// The dual objective `g(l) = -l * ln E_p[exp(-v/l)] - l * rho` is concave
/// on `l > 0` with `g(0+) = min v` over the support of `p` and maximizer
/// bounded by `value_cap / rho`. The log-sum-exp is shifted by the support
/// minimum so small `l` does not underflow. Search runs on
/// `[max(lambda_floor, 1e-8), value_cap / rho]` with the `l -> 0` limit and
/// both endpoints evaluated explicitly.
pub fn kl_dual_inf(
    p: &[f64],
    v: &[f64],
    rho: f64,
    lambda_floor: f64,
    value_cap: f64,
) -> Result<DualResult> {
    check_distribution(p)?;
    check_values(v, p.len(), value_cap)?;
    if rho.is_nan() || rho < 0.0 {
        return Err(Error::invalid(format!("kl radius must be >= 0, got {rho}")));
    }
    if lambda_floor <= 0.0 {
        return Err(Error::invalid("lambda_floor must be > 0"));
    }
    if rho == 0.0 {
        return Ok(DualResult {
            value: expectation(p, v),
            lambda_star: f64::INFINITY,
            iterations: 0,
        });
    }
    let support: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
    let vmin = support.iter().map(|&i| v[i]).fold(f64::INFINITY, f64::min);
    let vmax = support.iter().map(|&i| v[i]).fold(f64::NEG_INFINITY, f64::max);
    if vmax - vmin <= 0.0 {
        // Constant value over the support: the dual is vmin - l * rho.
        return Ok(DualResult {
            value: vmin,
            lambda_star: 0.0,
            iterations: 0,
        });
    }
    let g = |l: f64| {
        let mut z = 0.0;
        for &i in &support {
            z += p[i] * (-(v[i] - vmin) / l).exp();
        }
        vmin - l * z.ln() - l * rho
    };
    let lo = lambda_floor.max(1e-8);
    let hi = value_cap / rho;
    let mut best = (0.0f64, vmin);
    let mut iterations = 0;
    if hi > lo {
        let (x, fx, evals) = golden_max(g, lo, hi, 1e-10);
        iterations = evals;
        for (cand, val) in [(x, fx), (lo, g(lo)), (hi, g(hi))] {
            if val > best.1 {
                best = (cand, val);
            }
        }
    } else if hi > 0.0 {
        let val = g(hi);
        if val > best.1 {
            best = (hi, val);
        }
    }
    debug_assert!(best.1 <= expectation(p, v) + 1e-9);
    Ok(DualResult {
        value: best.1,
        lambda_star: best.0,
        iterations,
    })
}

/// KL worst case with its minimizing distribution.
///
/// At an interior dual optimum the minimizer is the exponential tilt
/// `q ∝ p * exp(-v / lambda_star)`; in the `lambda -> 0` limit it is `p`
/// conditioned on the argmin set of its support. Used by the factored
/// coordinate-descent backup, which has to move its iterate.
pub(crate) fn kl_worst_case(
    p: &[f64],
    v: &[f64],
    rho: f64,
    lambda_floor: f64,
    value_cap: f64,
) -> Result<(DualResult, Vec<f64>)> {
    let res = kl_dual_inf(p, v, rho, lambda_floor, value_cap)?;
    if !res.lambda_star.is_finite() {
        return Ok((res, p.to_vec()));
    }
    let support: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
    let vmin = support.iter().map(|&i| v[i]).fold(f64::INFINITY, f64::min);
    let mut q = vec![0.0; p.len()];
    if res.lambda_star <= 0.0 {
        for &i in &support {
            if v[i] <= vmin + 1e-12 {
                q[i] = p[i];
            }
        }
    } else {
        for &i in &support {
            q[i] = p[i] * (-(v[i] - vmin) / res.lambda_star).exp();
        }
    }
    let z: f64 = q.iter().sum();
    q.iter_mut().for_each(|x| *x /= z);
    Ok((res, q))
}

/// Dispatch on the ambiguity-set divergence.
pub fn dual_inf(p: &[f64], v: &[f64], spec: &RobustSpec, value_cap: f64) -> Result<DualResult> {
    match spec.divergence {
        Divergence::Tv => tv_dual_inf(p, v, spec.rho, value_cap),
        Divergence::Kl => kl_dual_inf(p, v, spec.rho, spec.lambda_floor_or_default(), value_cap),
    }
}

/// As `dual_inf` but with an explicit radius override (factored case).
pub(crate) fn dual_inf_with_rho(
    p: &[f64],
    v: &[f64],
    spec: &RobustSpec,
    rho: f64,
    value_cap: f64,
) -> Result<DualResult> {
    match spec.divergence {
        Divergence::Tv => tv_dual_inf(p, v, rho, value_cap),
        Divergence::Kl => kl_dual_inf(p, v, rho, spec.lambda_floor_or_default(), value_cap),
    }
}

/// JSON request of the `duals eval` debug command.
#[derive(Debug, Clone, serde::Deserialize)]
pub struct DualsRequest {
    pub p: Vec<f64>,
    pub v: Vec<f64>,
    pub spec: RobustSpec,
    /// Value-range cap bounding the dual bracket; defaults to `max(v)`.
    #[serde(default)]
    pub value_cap: Option<f64>,
}

/// Parse and evaluate a `duals eval` request.
pub fn eval_request_json(text: &str) -> Result<DualResult> {
    let req: DualsRequest =
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    req.spec.validate()?;
    let cap = req
        .value_cap
        .unwrap_or_else(|| req.v.iter().cloned().fold(0.0, f64::max));
    dual_inf(&req.p, &req.v, &req.spec, cap)
}

/// Grid-search oracle: minimum of `q . v` over simplex grid points
/// satisfying the divergence constraint, with `q = p` always included as a
/// candidate. The result is an upper bound on the true infimum that
/// converges as the step shrinks.
pub fn brute_force_inf(p: &[f64], v: &[f64], spec: &RobustSpec, grid_step: f64) -> Result<f64> {
    check_distribution(p)?;
    let m = p.len();
    if v.len() != m {
        return Err(Error::shape("p and v length mismatch".to_string()));
    }
    if m > 6 {
        return Err(Error::invalid(format!("brute force limited to m <= 6, got {m}")));
    }
    if !(grid_step > 0.0 && grid_step <= 1e-2) {
        return Err(Error::invalid(format!("grid_step must be in (0, 1e-2], got {grid_step}")));
    }
    let n = (1.0 / grid_step).round() as usize;
    let rho = spec.rho;

    // Per-coordinate contribution tables over counts k = 0..=n:
    // divergence term and objective term for q_i = k / n.
    let ln_over_n: Vec<f64> = (0..=n)
        .map(|k| if k == 0 { 0.0 } else { (k as f64 / n as f64).ln() })
        .collect();
    let mut div_tab: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut obj_tab: Vec<Vec<f64>> = Vec::with_capacity(m);
    for i in 0..m {
        let mut dt = vec![0.0; n + 1];
        let mut ot = vec![0.0; n + 1];
        for k in 0..=n {
            let q = k as f64 / n as f64;
            dt[k] = match spec.divergence {
                Divergence::Kl => {
                    if k == 0 {
                        0.0
                    } else if p[i] <= 0.0 {
                        f64::INFINITY
                    } else {
                        q * (ln_over_n[k] - p[i].ln())
                    }
                }
                Divergence::Tv => 0.5 * (q - p[i]).abs(),
            };
            ot[k] = q * v[i];
        }
        div_tab.push(dt);
        obj_tab.push(ot);
    }

    let mut best = expectation(p, v); // q = p is always feasible
    let tol = 1e-12;

    #[allow(clippy::too_many_arguments)]
    fn recurse(
        level: usize,
        remaining: usize,
        acc_div: f64,
        acc_obj: f64,
        div_tab: &[Vec<f64>],
        obj_tab: &[Vec<f64>],
        rho: f64,
        tol: f64,
        best: &mut f64,
    ) {
        let m = div_tab.len();
        if level == m - 1 {
            let d = acc_div + div_tab[level][remaining];
            if d <= rho + tol {
                let o = acc_obj + obj_tab[level][remaining];
                if o < *best {
                    *best = o;
                }
            }
            return;
        }
        for k in 0..=remaining {
            recurse(
                level + 1,
                remaining - k,
                acc_div + div_tab[level][k],
                acc_obj + obj_tab[level][k],
                div_tab,
                obj_tab,
                rho,
                tol,
                best,
            );
        }
    }
    recurse(0, n, 0.0, 0.0, &div_tab, &obj_tab, rho, tol, &mut best);
    Ok(best)
}
