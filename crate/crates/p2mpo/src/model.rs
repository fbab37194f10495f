//! Robust MDP model types, validation, and the JSON model file format.
//!
//! Conventions used everywhere in this crate:
//! * states, actions, and outcomes are 0-based dense indices;
//! * kernel and reward rows are indexed by `s * num_actions + a`;
//! * factored states use a mixed-radix encoding with factor 0 least
//!   significant, and factor-kernel rows are indexed by
//!   `ctx * num_actions + a` where `ctx` is the mixed-radix index of the
//!   parent coordinates in listed order;
//! * step indices run `0..horizon` and value tables carry `horizon + 1`
//!   entries with the terminal row identically zero.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-sum tolerance for transition kernels and factor measures.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Expanded factored/linear models are rejected beyond this state count.
pub const MAX_EXPANDED_STATES: usize = 1 << 20;

/// Divergence defining the ambiguity ball around a nominal distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Divergence {
    Kl,
    Tv,
}

/// Ambiguity-set description: divergence kind plus radius.
///
/// `rho` is a half-L1 radius for `Tv` (so `rho <= 1`) and a KL radius for
/// `Kl`. `lambda_floor` is the lower bracket of the KL dual-variable search
/// and is required whenever `divergence == Kl` and `rho > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustSpec {
    pub divergence: Divergence,
    pub rho: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_floor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_factor_rho: Option<Vec<f64>>,
    /// Set by `expand_factored`/`linear_to_tabular`: the tabular robust set
    /// is NOT equivalent to the source model's robust set, only the nominal
    /// kernel carries over.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub nominal_only: bool,
}

impl RobustSpec {
    pub fn tv(rho: f64) -> Self {
        RobustSpec {
            divergence: Divergence::Tv,
            rho,
            lambda_floor: None,
            per_factor_rho: None,
            nominal_only: false,
        }
    }

    pub fn kl(rho: f64, lambda_floor: f64) -> Self {
        RobustSpec {
            divergence: Divergence::Kl,
            rho,
            lambda_floor: Some(lambda_floor),
            per_factor_rho: None,
            nominal_only: false,
        }
    }

    pub fn with_rho(&self, rho: f64) -> Self {
        let mut s = self.clone();
        s.rho = rho;
        s
    }

    /// KL dual search floor; defaults to 1e-8 when unset.
    pub fn lambda_floor_or_default(&self) -> f64 {
        self.lambda_floor.unwrap_or(1e-8)
    }

    /// Radius of factor `i`, falling back to the global radius.
    pub fn factor_rho(&self, i: usize) -> f64 {
        self.per_factor_rho
            .as_ref()
            .and_then(|v| v.get(i).copied())
            .unwrap_or(self.rho)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho.is_nan() || self.rho < 0.0 {
            return Err(Error::invalid(format!("robust.rho must be >= 0, got {}", self.rho)));
        }
        if self.divergence == Divergence::Tv && self.rho > 1.0 {
            return Err(Error::invalid(format!(
                "robust.rho must be <= 1 for tv (half-L1 convention), got {}",
                self.rho
            )));
        }
        if self.divergence == Divergence::Kl && self.rho > 0.0 {
            match self.lambda_floor {
                Some(l) if l > 0.0 => {}
                _ => {
                    return Err(Error::invalid(
                        "robust.lambda_floor must be > 0 for kl with rho > 0",
                    ))
                }
            }
        }
        if let Some(rhos) = &self.per_factor_rho {
            for (i, &r) in rhos.iter().enumerate() {
                if r.is_nan() || r < 0.0 {
                    return Err(Error::invalid(format!("per_factor_rho[{i}] must be >= 0, got {r}")));
                }
                if self.divergence == Divergence::Tv && r > 1.0 {
                    return Err(Error::invalid(format!("per_factor_rho[{i}] must be <= 1 for tv")));
                }
            }
        }
        Ok(())
    }
}

/// Finite-horizon tabular robust MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularRmdp {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    /// `kernels[h][s * num_actions + a][s']`, each row a distribution.
    pub kernels: Vec<Vec<Vec<f64>>>,
    /// `rewards[h][s * num_actions + a]` in `[0, 1]`.
    pub rewards: Vec<Vec<f64>>,
    pub robust: RobustSpec,
    pub initial_state: usize,
}

impl TabularRmdp {
    pub fn num_rows(&self) -> usize {
        self.num_states * self.num_actions
    }

    #[inline]
    pub fn row(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_states == 0 || self.num_actions == 0 {
            return Err(Error::invalid("num_states and num_actions must be positive"));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be >= 1"));
        }
        if self.initial_state >= self.num_states {
            return Err(Error::invalid(format!(
                "initial_state {} out of range for {} states",
                self.initial_state, self.num_states
            )));
        }
        self.robust.validate()?;
        let rows = self.num_rows();
        if self.kernels.len() != self.horizon || self.rewards.len() != self.horizon {
            return Err(Error::invalid(format!(
                "kernels/rewards must have horizon {} entries, got {}/{}",
                self.horizon,
                self.kernels.len(),
                self.rewards.len()
            )));
        }
        for h in 0..self.horizon {
            if self.kernels[h].len() != rows {
                return Err(Error::invalid(format!(
                    "kernels[{h}] must have {rows} rows, got {}",
                    self.kernels[h].len()
                )));
            }
            for (r, row) in self.kernels[h].iter().enumerate() {
                validate_distribution_row(row, self.num_states, STOCHASTIC_TOL)
                    .map_err(|e| Error::invalid(format!("kernels[{h}] row {r}: {e}")))?;
            }
            if self.rewards[h].len() != rows {
                return Err(Error::invalid(format!(
                    "rewards[{h}] must have {rows} entries, got {}",
                    self.rewards[h].len()
                )));
            }
            for (r, &x) in self.rewards[h].iter().enumerate() {
                if !(-1e-12..=1.0 + 1e-12).contains(&x) || !x.is_finite() {
                    return Err(Error::invalid(format!(
                        "rewards[{h}][{r}] = {x} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Factored robust MDP over `S = O^d` with per-factor parent sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactoredRmdp {
    pub num_outcomes: usize,
    pub num_factors: usize,
    pub num_actions: usize,
    pub horizon: usize,
    /// `parents[i]` lists the factor indices feeding factor `i`.
    pub parents: Vec<Vec<usize>>,
    /// `factor_kernels[h][i][ctx * num_actions + a][o']`.
    pub factor_kernels: Vec<Vec<Vec<Vec<f64>>>>,
    /// Rewards over the expanded state space, `rewards[h][s * num_actions + a]`.
    pub rewards: Vec<Vec<f64>>,
    pub robust: RobustSpec,
    pub initial_state: usize,
}

impl FactoredRmdp {
    pub fn num_states(&self) -> Result<usize> {
        self.num_outcomes
            .checked_pow(self.num_factors as u32)
            .filter(|&s| s <= MAX_EXPANDED_STATES)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "|O|^d = {}^{} exceeds the expanded-state bound {MAX_EXPANDED_STATES}",
                    self.num_outcomes, self.num_factors
                ))
            })
    }

    pub fn context_count(&self, i: usize) -> usize {
        self.num_outcomes.pow(self.parents[i].len() as u32)
    }

    /// Mixed-radix index of the parent coordinates of factor `i`.
    pub fn context_of(&self, state_factors: &[usize], i: usize) -> usize {
        let mut ctx = 0;
        let mut base = 1;
        for &p in &self.parents[i] {
            ctx += state_factors[p] * base;
            base *= self.num_outcomes;
        }
        ctx
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_outcomes == 0 || self.num_factors == 0 || self.num_actions == 0 {
            return Err(Error::invalid("num_outcomes, num_factors, num_actions must be positive"));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be >= 1"));
        }
        self.robust.validate()?;
        if let Some(rhos) = &self.robust.per_factor_rho {
            if rhos.len() != self.num_factors {
                return Err(Error::invalid(format!(
                    "per_factor_rho has {} entries for {} factors",
                    rhos.len(),
                    self.num_factors
                )));
            }
        }
        if self.parents.len() != self.num_factors {
            return Err(Error::invalid("parents must list one set per factor"));
        }
        for (i, pa) in self.parents.iter().enumerate() {
            for &p in pa {
                if p >= self.num_factors {
                    return Err(Error::invalid(format!("parents[{i}] references factor {p}")));
                }
            }
        }
        let num_states = self.num_states()?;
        if self.initial_state >= num_states {
            return Err(Error::invalid(format!(
                "initial_state {} out of range for {num_states} states",
                self.initial_state
            )));
        }
        if self.factor_kernels.len() != self.horizon || self.rewards.len() != self.horizon {
            return Err(Error::invalid("factor_kernels/rewards must have horizon entries"));
        }
        for h in 0..self.horizon {
            if self.factor_kernels[h].len() != self.num_factors {
                return Err(Error::invalid(format!(
                    "factor_kernels[{h}] must have one block per factor"
                )));
            }
            for i in 0..self.num_factors {
                let rows = self.context_count(i) * self.num_actions;
                if self.factor_kernels[h][i].len() != rows {
                    return Err(Error::invalid(format!(
                        "factor_kernels[{h}][{i}] must have {rows} rows, got {}",
                        self.factor_kernels[h][i].len()
                    )));
                }
                for (r, row) in self.factor_kernels[h][i].iter().enumerate() {
                    validate_distribution_row(row, self.num_outcomes, STOCHASTIC_TOL)
                        .map_err(|e| Error::invalid(format!("factor_kernels[{h}][{i}] row {r}: {e}")))?;
                }
            }
            let rows = num_states * self.num_actions;
            if self.rewards[h].len() != rows {
                return Err(Error::invalid(format!(
                    "rewards[{h}] must have {rows} entries over the expanded space"
                )));
            }
            for (r, &x) in self.rewards[h].iter().enumerate() {
                if !(-1e-12..=1.0 + 1e-12).contains(&x) || !x.is_finite() {
                    return Err(Error::invalid(format!("rewards[{h}][{r}] = {x} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }
}

/// Robust linear MDP with simplex features and per-factor measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRmdp {
    pub feature_dim: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    /// `features[s * num_actions + a][i]`, each row on the simplex.
    pub features: Vec<Vec<f64>>,
    /// `factor_measures[h][i][s']`, each a distribution over states.
    pub factor_measures: Vec<Vec<Vec<f64>>>,
    /// `reward_params[h][i]` with `R_h(s,a) = phi(s,a) . reward_params[h]`.
    pub reward_params: Vec<Vec<f64>>,
    pub robust: RobustSpec,
    pub initial_state: usize,
}

impl LinearRmdp {
    pub fn num_rows(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.num_states == 0 || self.num_actions == 0 {
            return Err(Error::invalid("feature_dim, num_states, num_actions must be positive"));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be >= 1"));
        }
        if self.initial_state >= self.num_states {
            return Err(Error::invalid("initial_state out of range"));
        }
        self.robust.validate()?;
        let rows = self.num_rows();
        if self.features.len() != rows {
            return Err(Error::invalid(format!("features must have {rows} rows")));
        }
        for (r, row) in self.features.iter().enumerate() {
            validate_distribution_row(row, self.feature_dim, 1e-9)
                .map_err(|e| Error::invalid(format!("features row {r}: {e}")))?;
        }
        if self.factor_measures.len() != self.horizon || self.reward_params.len() != self.horizon {
            return Err(Error::invalid("factor_measures/reward_params must have horizon entries"));
        }
        for h in 0..self.horizon {
            if self.factor_measures[h].len() != self.feature_dim {
                return Err(Error::invalid(format!(
                    "factor_measures[{h}] must have {} entries",
                    self.feature_dim
                )));
            }
            for (i, mu) in self.factor_measures[h].iter().enumerate() {
                validate_distribution_row(mu, self.num_states, STOCHASTIC_TOL)
                    .map_err(|e| Error::invalid(format!("factor_measures[{h}][{i}]: {e}")))?;
            }
            if self.reward_params[h].len() != self.feature_dim {
                return Err(Error::invalid(format!("reward_params[{h}] has wrong dimension")));
            }
            let norm2: f64 = self.reward_params[h].iter().map(|x| x * x).sum();
            if norm2 > self.feature_dim as f64 + 1e-9 {
                return Err(Error::invalid(format!(
                    "reward_params[{h}] has norm {} > sqrt(d)",
                    norm2.sqrt()
                )));
            }
        }
        // Induced rewards must land in [0, 1].
        for h in 0..self.horizon {
            for (r, phi) in self.features.iter().enumerate() {
                let rew: f64 = phi.iter().zip(&self.reward_params[h]).map(|(p, t)| p * t).sum();
                if !(-1e-9..=1.0 + 1e-9).contains(&rew) {
                    return Err(Error::invalid(format!(
                        "induced reward at step {h} row {r} is {rew}, outside [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A step-indexed Markovian policy, `probs[h][s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub probs: Vec<Vec<Vec<f64>>>,
}

impl Policy {
    /// Uniform policy over `num_actions` at every state and step.
    pub fn uniform(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        let p = 1.0 / num_actions as f64;
        Policy {
            probs: vec![vec![vec![p; num_actions]; num_states]; horizon],
        }
    }

    /// Deterministic policy from per-step action choices `actions[h][s]`.
    pub fn deterministic(actions: &[Vec<usize>], num_actions: usize) -> Self {
        let probs = actions
            .iter()
            .map(|per_state| {
                per_state
                    .iter()
                    .map(|&a| {
                        let mut row = vec![0.0; num_actions];
                        row[a] = 1.0;
                        row
                    })
                    .collect()
            })
            .collect();
        Policy { probs }
    }

    /// Pointwise mixture `(1 - eps) * self + eps * uniform`.
    pub fn mix_with_uniform(&self, eps: f64) -> Self {
        let probs = self
            .probs
            .iter()
            .map(|per_state| {
                per_state
                    .iter()
                    .map(|row| {
                        let u = 1.0 / row.len() as f64;
                        row.iter().map(|&p| (1.0 - eps) * p + eps * u).collect()
                    })
                    .collect()
            })
            .collect();
        Policy { probs }
    }

    pub fn horizon(&self) -> usize {
        self.probs.len()
    }

    pub fn validate(&self, horizon: usize, num_states: usize, num_actions: usize) -> Result<()> {
        if self.probs.len() != horizon {
            return Err(Error::shape(format!(
                "policy has {} steps, model horizon is {horizon}",
                self.probs.len()
            )));
        }
        for (h, per_state) in self.probs.iter().enumerate() {
            if per_state.len() != num_states {
                return Err(Error::shape(format!("policy step {h} has {} states", per_state.len())));
            }
            for (s, row) in per_state.iter().enumerate() {
                validate_distribution_row(row, num_actions, 1e-9)
                    .map_err(|e| Error::invalid(format!("policy step {h} state {s}: {e}")))?;
            }
        }
        Ok(())
    }
}

/// Step-indexed value tables; `v[h][s]` for `h` in `0..=horizon`, `v[horizon]`
/// identically zero, and optionally `q[h][s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub v: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<Vec<f64>>>>,
}

impl ValueTable {
    pub fn horizon(&self) -> usize {
        self.v.len().saturating_sub(1)
    }

    /// Value of the initial state at the first step.
    pub fn initial(&self, s1: usize) -> f64 {
        self.v[0][s1]
    }
}

/// Any of the supported model kinds, tagged by `"kind"` in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Model {
    Tabular(TabularRmdp),
    Factored(FactoredRmdp),
    Linear(LinearRmdp),
}

impl Model {
    pub fn validate(&self) -> Result<()> {
        match self {
            Model::Tabular(m) => m.validate(),
            Model::Factored(m) => m.validate(),
            Model::Linear(m) => m.validate(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Model::Tabular(_) => "tabular",
            Model::Factored(_) => "factored",
            Model::Linear(_) => "linear",
        }
    }
}

fn validate_distribution_row(row: &[f64], len: usize, tol: f64) -> std::result::Result<(), String> {
    if row.len() != len {
        return Err(format!("expected {len} entries, got {}", row.len()));
    }
    let mut sum = 0.0;
    for (i, &p) in row.iter().enumerate() {
        if !p.is_finite() || p < 0.0 {
            return Err(format!("entry {i} is {p}"));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > tol {
        return Err(format!("row sums to {sum}, expected 1 within {tol}"));
    }
    Ok(())
}

/// Parse and validate a model from JSON text.
pub fn parse_model(json: &str) -> Result<Model> {
    let model: Model = serde_json::from_str(json).map_err(|e| Error::Parse(e.to_string()))?;
    model.validate()?;
    Ok(model)
}

/// Load and validate a model file, checking the expected kind when given.
pub fn load_model(path: impl AsRef<Path>, kind: Option<&str>) -> Result<Model> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let model = parse_model(&text)?;
    if let Some(k) = kind {
        if model.kind() != k {
            return Err(Error::invalid(format!(
                "expected a {k} model, file contains {}",
                model.kind()
            )));
        }
    }
    Ok(model)
}

pub fn save_model(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(model).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_policy(path: impl AsRef<Path>) -> Result<Policy> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))
}

/// Known quantities handed to the learner: dimensions, the reward table,
/// and the start state. This is the `--model-dims` file of the estimate and
/// optimize commands; `rewards` may be omitted when only estimating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    #[serde(default)]
    pub initial_state: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<Vec<Vec<f64>>>,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.num_states == 0 || self.num_actions == 0 || self.horizon == 0 {
            return Err(Error::invalid("dimensions must be positive"));
        }
        if self.initial_state >= self.num_states {
            return Err(Error::invalid("initial_state out of range"));
        }
        if let Some(rewards) = &self.rewards {
            if rewards.len() != self.horizon {
                return Err(Error::invalid("rewards must have horizon entries"));
            }
            let rows = self.num_states * self.num_actions;
            for (h, step) in rewards.iter().enumerate() {
                if step.len() != rows {
                    return Err(Error::invalid(format!("rewards[{h}] must have {rows} entries")));
                }
                for (r, &x) in step.iter().enumerate() {
                    if !x.is_finite() || !(-1e-12..=1.0 + 1e-12).contains(&x) {
                        return Err(Error::invalid(format!("rewards[{h}][{r}] outside [0, 1]")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_tabular(m: &TabularRmdp) -> Self {
        ModelDims {
            num_states: m.num_states,
            num_actions: m.num_actions,
            horizon: m.horizon,
            initial_state: m.initial_state,
            rewards: Some(m.rewards.clone()),
        }
    }
}

pub fn parse_dims(json: &str) -> Result<ModelDims> {
    let dims: ModelDims = serde_json::from_str(json).map_err(|e| Error::Parse(e.to_string()))?;
    dims.validate()?;
    Ok(dims)
}

pub fn load_dims(path: impl AsRef<Path>) -> Result<ModelDims> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dims(&text)
}

/// Mixed-radix decode of a composite state, factor 0 least significant.
pub fn state_to_factors(mut s: usize, num_factors: usize, num_outcomes: usize) -> Vec<usize> {
    let mut out = vec![0; num_factors];
    for slot in out.iter_mut() {
        *slot = s % num_outcomes;
        s /= num_outcomes;
    }
    out
}

/// Mixed-radix encode, factor 0 least significant.
pub fn factors_to_state(factors: &[usize], num_outcomes: usize) -> usize {
    factors
        .iter()
        .rev()
        .fold(0, |acc, &f| acc * num_outcomes + f)
}

/// Expand a factored model to tabular form.
///
/// Only the nominal kernels carry over; the product-of-balls robust set has
/// no tabular equivalent, so the result's robust spec is marked
/// `nominal_only`.
pub fn expand_factored(m: &FactoredRmdp) -> Result<TabularRmdp> {
    m.validate()?;
    let num_states = m.num_states()?;
    let rows = num_states * m.num_actions;
    let mut kernels = vec![vec![vec![0.0; num_states]; rows]; m.horizon];
    for h in 0..m.horizon {
        for s in 0..num_states {
            let fac = state_to_factors(s, m.num_factors, m.num_outcomes);
            for a in 0..m.num_actions {
                let row = &mut kernels[h][s * m.num_actions + a];
                for (sp, slot) in row.iter_mut().enumerate() {
                    let fac_next = state_to_factors(sp, m.num_factors, m.num_outcomes);
                    let mut p = 1.0;
                    for i in 0..m.num_factors {
                        let ctx = m.context_of(&fac, i);
                        p *= m.factor_kernels[h][i][ctx * m.num_actions + a][fac_next[i]];
                    }
                    *slot = p;
                }
            }
        }
    }
    let mut robust = m.robust.clone();
    robust.nominal_only = true;
    robust.per_factor_rho = None;
    let out = TabularRmdp {
        num_states,
        num_actions: m.num_actions,
        horizon: m.horizon,
        kernels,
        rewards: m.rewards.clone(),
        robust,
        initial_state: m.initial_state,
    };
    out.validate()?;
    Ok(out)
}

/// Materialize a linear model's induced kernel `P(s'|s,a) = phi(s,a) . mu(s')`.
///
/// As with `expand_factored`, d-rectangular robust sets do not carry over;
/// the result is marked `nominal_only`.
pub fn linear_to_tabular(m: &LinearRmdp) -> Result<TabularRmdp> {
    m.validate()?;
    let rows = m.num_rows();
    if m.num_states > MAX_EXPANDED_STATES {
        return Err(Error::invalid("state space exceeds the expansion bound"));
    }
    let mut kernels = vec![vec![vec![0.0; m.num_states]; rows]; m.horizon];
    let mut rewards = vec![vec![0.0; rows]; m.horizon];
    for h in 0..m.horizon {
        for r in 0..rows {
            let phi = &m.features[r];
            for sp in 0..m.num_states {
                kernels[h][r][sp] = (0..m.feature_dim)
                    .map(|i| phi[i] * m.factor_measures[h][i][sp])
                    .sum();
            }
            rewards[h][r] = phi
                .iter()
                .zip(&m.reward_params[h])
                .map(|(p, t)| p * t)
                .sum::<f64>()
                .clamp(0.0, 1.0);
        }
    }
    let mut robust = m.robust.clone();
    robust.nominal_only = true;
    let out = TabularRmdp {
        num_states: m.num_states,
        num_actions: m.num_actions,
        horizon: m.horizon,
        kernels,
        rewards,
        robust,
        initial_state: m.initial_state,
    };
    out.validate()?;
    Ok(out)
}

/// FNV-1a hash of a model's canonical JSON, used to tie datasets to the
/// model that generated them.
pub fn model_id(model: &Model) -> String {
    let text = serde_json::to_string(model).expect("model serializes");
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}
