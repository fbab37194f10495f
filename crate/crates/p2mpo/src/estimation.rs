//! Model estimation from offline data: empirical kernels with confidence
//! regions (tabular and factored) and the ridge estimator with a test-class
//! confidence check for linear models.
//!
//! The tabular region carries two views of the same uncertainty: the exact
//! dataset-averaged membership test (used for validation and diagnostics)
//! and per-(s,a) half-L1 radii (used by the planner, which needs a
//! rectangular set). Soundness of the decomposed radii against the averaged
//! test is established empirically by the test suite, not assumed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Divergence, FactoredRmdp, Policy, state_to_factors};
use crate::offline::OfflineDataset;
use crate::rng::CounterRng;

/// Per-step kernels, `[h][s * num_actions + a][s']`.
pub type StepKernels = Vec<Vec<Vec<f64>>>;

/// Tuning constants of the region schedules. `c1`/`c2` scale the global
/// budget, `c_dec` scales the decomposed per-(s,a) radii; all are
/// calibration surface, defaults are `1, 1, 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationConstants {
    pub c1: f64,
    pub c2: f64,
    pub c_dec: f64,
}

impl Default for EstimationConstants {
    fn default() -> Self {
        EstimationConstants {
            c1: 1.0,
            c2: 1.0,
            c_dec: 2.0,
        }
    }
}

/// Count-based empirical transition estimator. Rows with no visits fall
/// back to the uniform distribution.
pub fn empirical_estimate(data: &OfflineDataset) -> Result<(StepKernels, Vec<Vec<u64>>)> {
    data.validate()?;
    let rows = data.num_states * data.num_actions;
    let mut kernels = vec![vec![vec![0.0f64; data.num_states]; rows]; data.horizon];
    let mut counts = vec![vec![0u64; rows]; data.horizon];
    for h in 0..data.horizon {
        for t in &data.steps[h] {
            let row = t.state * data.num_actions + t.action;
            counts[h][row] += 1;
            kernels[h][row][t.next_state] += 1.0;
        }
        for row in 0..rows {
            if counts[h][row] == 0 {
                let u = 1.0 / data.num_states as f64;
                kernels[h][row].iter_mut().for_each(|x| *x = u);
            } else {
                let n = counts[h][row] as f64;
                kernels[h][row].iter_mut().for_each(|x| *x /= n);
            }
        }
    }
    Ok((kernels, counts))
}

/// Global budget of the averaged-L1 confidence region for the tabular
/// estimator: `c1 * (2 |S|^2 |A| ln n + ln(c2 H / delta)) / n`.
pub fn xi_schedule(
    n: usize,
    delta: f64,
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    constants: &EstimationConstants,
) -> f64 {
    let (s, a, h) = (num_states as f64, num_actions as f64, horizon as f64);
    constants.c1 * (2.0 * s * s * a * (n as f64).ln() + (constants.c2 * h / delta).ln()) / n as f64
}

fn decomposed_radius(
    count: u64,
    n: usize,
    delta: f64,
    support: usize,
    contexts: usize,
    horizon: usize,
    c_dec: f64,
) -> f64 {
    if count == 0 {
        return 1.0;
    }
    let log_term =
        support as f64 * (n as f64).ln() + (2.0 * horizon as f64 * contexts as f64 / delta).ln();
    (c_dec * log_term / count as f64).sqrt().min(1.0)
}

/// Estimated kernel with both the exact averaged membership test and the
/// decomposed per-(s,a) half-L1 radii used by the planner.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceRegion {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub n: usize,
    pub delta: f64,
    /// Empirical kernels, `center[h][s * num_actions + a][s']`.
    pub center: Vec<Vec<Vec<f64>>>,
    /// Global averaged-L1 budget per step.
    pub xi: f64,
    /// Half-L1 radius per row, `per_sa_radius[h][s * num_actions + a]`.
    pub per_sa_radius: Vec<Vec<f64>>,
    pub counts: Vec<Vec<u64>>,
    pub constants: EstimationConstants,
}

impl ConfidenceRegion {
    /// Exact membership test: for every step, the dataset-weighted mean of
    /// `||center - candidate||_1^2` at the visited rows stays within `xi`.
    pub fn contains(&self, kernels: &[Vec<Vec<f64>>]) -> bool {
        self.statistic(kernels)
            .map(|per_step| per_step.into_iter().all(|s| s <= self.xi))
            .unwrap_or(false)
    }

    /// The per-step averaged-L1 statistics behind `contains`.
    pub fn statistic(&self, kernels: &[Vec<Vec<f64>>]) -> Result<Vec<f64>> {
        if kernels.len() != self.horizon {
            return Err(Error::shape("candidate kernel horizon mismatch"));
        }
        let rows = self.num_states * self.num_actions;
        let mut out = Vec::with_capacity(self.horizon);
        for h in 0..self.horizon {
            if kernels[h].len() != rows {
                return Err(Error::shape("candidate kernel row-count mismatch"));
            }
            let mut acc = 0.0;
            for row in 0..rows {
                if self.counts[h][row] == 0 {
                    continue;
                }
                let l1: f64 = self.center[h][row]
                    .iter()
                    .zip(&kernels[h][row])
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                acc += self.counts[h][row] as f64 * l1 * l1;
            }
            out.push(acc / self.n as f64);
        }
        Ok(out)
    }

    /// Half-L1 radius of row `(s, a)` at step `h`.
    pub fn radius(&self, h: usize, s: usize, a: usize) -> f64 {
        self.per_sa_radius[h][s * self.num_actions + a]
    }

    /// Copy with all per-row radii forced to zero (plain plug-in planning).
    pub fn with_zero_radii(&self) -> Self {
        let mut out = self.clone();
        out.per_sa_radius
            .iter_mut()
            .for_each(|step| step.iter_mut().for_each(|r| *r = 0.0));
        out
    }
}

/// Build the tabular confidence region from an offline dataset.
pub fn confidence_region(
    data: &OfflineDataset,
    delta: f64,
    constants: &EstimationConstants,
) -> Result<ConfidenceRegion> {
    if !(0.0 < delta && delta < 1.0) {
        return Err(Error::invalid(format!("delta must be in (0, 1), got {delta}")));
    }
    if data.n < 2 {
        return Err(Error::invalid("need n >= 2 for the budget schedule"));
    }
    let (center, counts) = empirical_estimate(data)?;
    let xi = xi_schedule(
        data.n,
        delta,
        data.num_states,
        data.num_actions,
        data.horizon,
        constants,
    );
    let rows = data.num_states * data.num_actions;
    let per_sa_radius = counts
        .iter()
        .map(|step| {
            step.iter()
                .map(|&c| {
                    decomposed_radius(
                        c,
                        data.n,
                        delta,
                        data.num_states,
                        rows,
                        data.horizon,
                        constants.c_dec,
                    )
                })
                .collect()
        })
        .collect();
    Ok(ConfidenceRegion {
        num_states: data.num_states,
        num_actions: data.num_actions,
        horizon: data.horizon,
        n: data.n,
        delta,
        center,
        xi,
        per_sa_radius,
        counts,
        constants: *constants,
    })
}

/// Per-factor budget of the factored region:
/// `c1 * |O|^(1 + |pa_i|) * |A| * ln(c2 n d H / delta) / n`.
#[allow(clippy::too_many_arguments)]
pub fn xi_factored(
    n: usize,
    delta: f64,
    num_outcomes: usize,
    parent_count: usize,
    num_actions: usize,
    num_factors: usize,
    horizon: usize,
    constants: &EstimationConstants,
) -> f64 {
    let o = num_outcomes as f64;
    constants.c1
        * o.powi(1 + parent_count as i32)
        * num_actions as f64
        * (constants.c2 * n as f64 * num_factors as f64 * horizon as f64 / delta).ln()
        / n as f64
}

/// Factored analog of `ConfidenceRegion`: per-factor centers over contexts
/// `(s[pa_i], a)`, per-factor budgets, and per-context radii.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactoredConfidenceRegion {
    pub num_outcomes: usize,
    pub num_factors: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub n: usize,
    pub delta: f64,
    /// `centers[h][i][ctx * num_actions + a][o']`.
    pub centers: Vec<Vec<Vec<Vec<f64>>>>,
    pub xis: Vec<f64>,
    /// `radii[h][i][ctx * num_actions + a]`, half-L1.
    pub radii: Vec<Vec<Vec<f64>>>,
    pub counts: Vec<Vec<Vec<u64>>>,
}

impl FactoredConfidenceRegion {
    /// Exact per-factor averaged membership test against candidate factor
    /// kernels `candidate[h][i][ctx * num_actions + a][o']`.
    pub fn contains(&self, candidate: &[Vec<Vec<Vec<f64>>>]) -> bool {
        for h in 0..self.horizon {
            for i in 0..self.num_factors {
                let mut acc = 0.0;
                for (row, &c) in self.counts[h][i].iter().enumerate() {
                    if c == 0 {
                        continue;
                    }
                    let l1: f64 = self.centers[h][i][row]
                        .iter()
                        .zip(&candidate[h][i][row])
                        .map(|(a, b)| (a - b).abs())
                        .sum();
                    acc += c as f64 * l1 * l1;
                }
                if acc / self.n as f64 > self.xis[i] {
                    return false;
                }
            }
        }
        true
    }
}

/// Per-factor empirical estimation over a factored state space. The dataset
/// stores composite states; contexts are recovered by mixed-radix decoding.
pub fn factored_confidence_region(
    data: &OfflineDataset,
    dims: &FactoredRmdp,
    delta: f64,
    constants: &EstimationConstants,
) -> Result<FactoredConfidenceRegion> {
    if data.num_states != dims.num_states()? || data.num_actions != dims.num_actions {
        return Err(Error::shape("dataset does not match the factored dimensions"));
    }
    if data.horizon != dims.horizon {
        return Err(Error::shape("dataset horizon mismatch"));
    }
    let d = dims.num_factors;
    let o = dims.num_outcomes;
    let mut centers = Vec::with_capacity(data.horizon);
    let mut counts = Vec::with_capacity(data.horizon);
    let mut radii = Vec::with_capacity(data.horizon);
    for h in 0..data.horizon {
        let mut step_centers = Vec::with_capacity(d);
        let mut step_counts = Vec::with_capacity(d);
        let mut step_radii = Vec::with_capacity(d);
        for i in 0..d {
            let rows = dims.context_count(i) * dims.num_actions;
            let mut kern = vec![vec![0.0f64; o]; rows];
            let mut cnt = vec![0u64; rows];
            for t in &data.steps[h] {
                let fac = state_to_factors(t.state, d, o);
                let fac_next = state_to_factors(t.next_state, d, o);
                let row = dims.context_of(&fac, i) * dims.num_actions + t.action;
                cnt[row] += 1;
                kern[row][fac_next[i]] += 1.0;
            }
            for row in 0..rows {
                if cnt[row] == 0 {
                    kern[row].iter_mut().for_each(|x| *x = 1.0 / o as f64);
                } else {
                    let nn = cnt[row] as f64;
                    kern[row].iter_mut().for_each(|x| *x /= nn);
                }
            }
            let rad: Vec<f64> = cnt
                .iter()
                .map(|&c| {
                    decomposed_radius(
                        c,
                        data.n,
                        delta,
                        o,
                        dims.context_count(i) * dims.num_actions * d,
                        data.horizon,
                        constants.c_dec,
                    )
                })
                .collect();
            step_centers.push(kern);
            step_counts.push(cnt);
            step_radii.push(rad);
        }
        centers.push(step_centers);
        counts.push(step_counts);
        radii.push(step_radii);
    }
    let xis = (0..d)
        .map(|i| {
            xi_factored(
                data.n,
                delta,
                o,
                dims.parents[i].len(),
                dims.num_actions,
                d,
                data.horizon,
                constants,
            )
        })
        .collect();
    Ok(FactoredConfidenceRegion {
        num_outcomes: o,
        num_factors: d,
        num_actions: dims.num_actions,
        horizon: data.horizon,
        n: data.n,
        delta,
        centers,
        xis,
        radii,
        counts,
    })
}

// ---------------------------------------------------------------------------
// Linear model estimation
// ---------------------------------------------------------------------------

/// Solve `M x = b` for a small dense symmetric positive-definite `M` by
/// Gaussian elimination with partial pivoting.
fn solve_dense(m: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    let d = b.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut x = b.to_vec();
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-14 {
            return Err(Error::invalid("singular covariance matrix"));
        }
        a.swap(col, pivot);
        x.swap(col, pivot);
        for row in col + 1..d {
            let f = a[row][col] / a[col][col];
            for k in col..d {
                a[row][k] -= f * a[col][k];
            }
            x[row] -= f * x[col];
        }
    }
    for col in (0..d).rev() {
        x[col] /= a[col][col];
        for row in 0..col {
            x[row] -= a[row][col] * x[col];
        }
    }
    Ok(x)
}

/// Regularized covariance `(1/n) sum phi phi^T + (alpha/n) I`.
pub fn covariance_matrix(phis: &[Vec<f64>], alpha: f64) -> Vec<Vec<f64>> {
    let n = phis.len();
    let d = phis[0].len();
    let mut m = vec![vec![0.0; d]; d];
    for phi in phis {
        for i in 0..d {
            for j in 0..d {
                m[i][j] += phi[i] * phi[j];
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    for (i, row) in m.iter_mut().enumerate() {
        row.iter_mut().for_each(|x| *x *= inv_n);
        row[i] += alpha * inv_n;
    }
    m
}

/// Closed-form ridge solution `theta_v = Lambda^{-1} ((1/n) sum phi v(s'))`.
pub fn ridge_estimate(phis: &[Vec<f64>], targets: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if phis.is_empty() || phis.len() != targets.len() {
        return Err(Error::shape("feature/target length mismatch"));
    }
    if alpha <= 0.0 {
        return Err(Error::invalid("ridge weight alpha must be > 0"));
    }
    let d = phis[0].len();
    let lambda = covariance_matrix(phis, alpha);
    let mut rhs = vec![0.0; d];
    for (phi, &t) in phis.iter().zip(targets) {
        for i in 0..d {
            rhs[i] += phi[i] * t;
        }
    }
    rhs.iter_mut().for_each(|x| *x /= phis.len() as f64);
    solve_dense(&lambda, &rhs)
}

/// Largest residual of the normal equations `Lambda theta - rhs`.
pub fn normal_equation_residual(
    phis: &[Vec<f64>],
    targets: &[f64],
    alpha: f64,
    theta: &[f64],
) -> f64 {
    let d = theta.len();
    let lambda = covariance_matrix(phis, alpha);
    let mut worst = 0.0f64;
    for i in 0..d {
        let mut lhs = 0.0;
        for j in 0..d {
            lhs += lambda[i][j] * theta[j];
        }
        let rhs: f64 = phis
            .iter()
            .zip(targets)
            .map(|(phi, &t)| phi[i] * t)
            .sum::<f64>()
            / phis.len() as f64;
        worst = worst.max((lhs - rhs).abs());
    }
    worst
}

/// Finite test-function family for the linear confidence check: directions
/// `w` sampled in the nonnegative orthant with `||w||_2 <= H sqrt(d)` and a
/// log grid of dual variables over the divergence's bracket.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VClass {
    pub divergence: Divergence,
    pub ws: Vec<Vec<f64>>,
    pub lambdas: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn make_v_class(
    divergence: Divergence,
    feature_dim: usize,
    horizon: usize,
    rho: f64,
    lambda_floor: f64,
    n_dirs: usize,
    n_lambdas: usize,
    seed: u64,
) -> VClass {
    let mut rng = CounterRng::new(seed, 0);
    let cap = horizon as f64;
    let mut ws = Vec::with_capacity(n_dirs);
    for _ in 0..n_dirs {
        // Nonnegative direction on the sphere (value-like parameter), then a
        // random radius up to H sqrt(d).
        let mut w: Vec<f64> = (0..feature_dim)
            .map(|_| {
                // |gaussian| via Box-Muller on two uniforms
                let u1 = rng.next_f64().max(1e-12);
                let u2 = rng.next_f64();
                ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()).abs()
            })
            .collect();
        let norm: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let radius = cap * (feature_dim as f64).sqrt() * rng.next_f64();
        w.iter_mut().for_each(|x| *x *= radius / norm.max(1e-12));
        ws.push(w);
    }
    let lambdas = match divergence {
        Divergence::Kl => {
            let lo = lambda_floor.max(1e-6);
            let hi = (cap / rho.max(1e-9)).max(lo * (1.0 + 1e-9));
            log_grid(lo, hi, n_lambdas)
        }
        Divergence::Tv => {
            let mut grid = vec![0.0];
            grid.extend(log_grid(cap / 1000.0, cap, n_lambdas.saturating_sub(1).max(1)));
            grid
        }
    };
    VClass {
        divergence,
        ws,
        lambdas,
    }
}

fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count <= 1 {
        return vec![hi];
    }
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..count)
        .map(|k| (llo + (lhi - llo) * k as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Evaluate one test function over all states given the feature table.
fn eval_v(
    divergence: Divergence,
    w: &[f64],
    lambda: f64,
    features: &[Vec<f64>],
    num_actions: usize,
    out: &mut [f64],
) {
    let num_states = out.len();
    for (s, slot) in out.iter_mut().enumerate().take(num_states) {
        let mut best = f64::NEG_INFINITY;
        for a in 0..num_actions {
            let dot: f64 = features[s * num_actions + a]
                .iter()
                .zip(w)
                .map(|(p, wi)| p * wi)
                .sum();
            best = best.max(dot);
        }
        *slot = match divergence {
            Divergence::Kl => (-best / lambda.max(1e-12)).exp(),
            Divergence::Tv => (lambda - best).max(0.0),
        };
    }
}

/// Budget of the linear confidence region.
#[allow(clippy::too_many_arguments)]
pub fn linear_xi_schedule(
    divergence: Divergence,
    n: usize,
    feature_dim: usize,
    horizon: usize,
    delta: f64,
    rho: f64,
    lambda_floor: f64,
    constants: &EstimationConstants,
) -> f64 {
    let (nf, d, h) = (n as f64, feature_dim as f64, horizon as f64);
    match divergence {
        Divergence::Tv => constants.c1 * d * d * h * h * (constants.c2 * nf * d * h / delta).ln() / nf,
        Divergence::Kl => {
            let lam = lambda_floor.max(1e-9);
            constants.c1
                * d * d
                * ((1.0 + constants.c2 * nf * h / delta).ln()
                    + (1.0 + nf * d * h / (rho.max(1e-9) * lam * lam)).ln())
                / nf
        }
    }
}

/// Sup over the finite test class of the averaged squared gap between the
/// candidate's integral of `v` and the ridge prediction.
pub fn linear_confidence_statistic(
    candidate_mu: &[Vec<f64>],
    phis: &[Vec<f64>],
    next_states: &[usize],
    features: &[Vec<f64>],
    num_actions: usize,
    v_class: &VClass,
    alpha: f64,
) -> Result<f64> {
    if phis.len() != next_states.len() || phis.is_empty() {
        return Err(Error::shape("feature/next-state length mismatch"));
    }
    let d = phis[0].len();
    if candidate_mu.len() != d {
        return Err(Error::shape("candidate measure dimension mismatch"));
    }
    let n = phis.len();
    let num_states = candidate_mu[0].len();
    let lambda_mat = covariance_matrix(phis, alpha);
    let mut v = vec![0.0; num_states];
    let mut sup = 0.0f64;
    for w in &v_class.ws {
        for &lam in &v_class.lambdas {
            eval_v(v_class.divergence, w, lam, features, num_actions, &mut v);
            // theta_v from the ridge closed form.
            let mut rhs = vec![0.0; d];
            for (phi, &sp) in phis.iter().zip(next_states) {
                for i in 0..d {
                    rhs[i] += phi[i] * v[sp];
                }
            }
            rhs.iter_mut().for_each(|x| *x /= n as f64);
            let theta = solve_dense(&lambda_mat, &rhs)?;
            // Candidate integral per factor.
            let mv: Vec<f64> = (0..d)
                .map(|i| candidate_mu[i].iter().zip(&v).map(|(m, vv)| m * vv).sum())
                .collect();
            let mut acc = 0.0;
            for phi in phis {
                let diff: f64 = phi
                    .iter()
                    .zip(mv.iter().zip(&theta))
                    .map(|(p, (m, t))| p * (m - t))
                    .sum();
                acc += diff * diff;
            }
            sup = sup.max(acc / n as f64);
        }
    }
    Ok(sup)
}

/// Membership test for the linear region: sup statistic against `xi`.
#[allow(clippy::too_many_arguments)]
pub fn linear_confidence_check(
    candidate_mu: &[Vec<f64>],
    phis: &[Vec<f64>],
    next_states: &[usize],
    features: &[Vec<f64>],
    num_actions: usize,
    v_class: &VClass,
    xi: f64,
    alpha: f64,
) -> Result<bool> {
    let stat = linear_confidence_statistic(
        candidate_mu,
        phis,
        next_states,
        features,
        num_actions,
        v_class,
        alpha,
    )?;
    Ok(stat <= xi)
}

/// Per-step record needed by the linear estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearConfidenceRegion {
    pub feature_dim: usize,
    pub alpha: f64,
    pub xi: f64,
    /// `covariance[h]` is the regularized matrix at step `h`.
    pub covariance: Vec<Vec<Vec<f64>>>,
    pub v_class: VClass,
}

/// Behavior-policy helper used by CLI defaults and experiments.
pub fn mixed_behavior(pi_star: &Policy, eps_mix: f64) -> Policy {
    pi_star.mix_with_uniform(eps_mix)
}
