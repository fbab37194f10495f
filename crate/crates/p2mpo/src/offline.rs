//! Offline dataset generation, visitation distributions, and the robust
//! partial coverage diagnostic.
//!
//! Datasets are always sampled from the nominal kernel; the robust set only
//! enters through planning and through the coverage diagnostic's sampled
//! perturbations. Trajectory `tau` draws from substream `(seed, tau)`, so
//! parallel generation is bitwise identical to sequential generation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::sample_in_ball;
use crate::error::{Error, Result};
use crate::model::{Model, Policy, TabularRmdp};
use crate::rng::CounterRng;

/// One logged step `(s_h, a_h, r_h, s_{h+1})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

/// `n` trajectories of horizon `H`, stored step-major: `steps[h][tau]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineDataset {
    pub n: usize,
    pub horizon: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub seed: u64,
    pub model_id: String,
    pub behavior: Policy,
    pub steps: Vec<Vec<Transition>>,
}

impl OfflineDataset {
    pub fn validate(&self) -> Result<()> {
        if self.steps.len() != self.horizon {
            return Err(Error::invalid(format!(
                "dataset has {} step lists for horizon {}",
                self.steps.len(),
                self.horizon
            )));
        }
        for (h, step) in self.steps.iter().enumerate() {
            if step.len() != self.n {
                return Err(Error::invalid(format!(
                    "step {h} has {} transitions, expected n = {}",
                    step.len(),
                    self.n
                )));
            }
            for (tau, t) in step.iter().enumerate() {
                if t.state >= self.num_states
                    || t.next_state >= self.num_states
                    || t.action >= self.num_actions
                {
                    return Err(Error::invalid(format!("index out of range at h={h} tau={tau}")));
                }
                if !t.reward.is_finite() {
                    return Err(Error::invalid(format!("non-finite reward at h={h} tau={tau}")));
                }
            }
        }
        Ok(())
    }
}

/// Sample `n` trajectories from the nominal kernel under `pi_b`.
pub fn generate(m: &TabularRmdp, pi_b: &Policy, n: usize, seed: u64) -> Result<OfflineDataset> {
    m.validate()?;
    pi_b.validate(m.horizon, m.num_states, m.num_actions)?;
    if n == 0 {
        return Err(Error::invalid("need at least one trajectory"));
    }
    let trajectories: Vec<Vec<Transition>> = (0..n)
        .into_par_iter()
        .map(|tau| {
            let mut rng = CounterRng::new(seed, tau as u64);
            let mut s = m.initial_state;
            let mut traj = Vec::with_capacity(m.horizon);
            for h in 0..m.horizon {
                let a = rng.sample_index(&pi_b.probs[h][s]);
                let row = s * m.num_actions + a;
                let next = rng.sample_index(&m.kernels[h][row]);
                traj.push(Transition {
                    state: s,
                    action: a,
                    reward: m.rewards[h][row],
                    next_state: next,
                });
                s = next;
            }
            traj
        })
        .collect();
    let mut steps = vec![Vec::with_capacity(n); m.horizon];
    for traj in &trajectories {
        for (h, t) in traj.iter().enumerate() {
            steps[h].push(*t);
        }
    }
    Ok(OfflineDataset {
        n,
        horizon: m.horizon,
        num_states: m.num_states,
        num_actions: m.num_actions,
        seed,
        model_id: crate::model::model_id(&Model::Tabular(m.clone())),
        behavior: pi_b.clone(),
        steps,
    })
}

/// Exact state-action visitation distributions `d_h(s,a)` per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitationTable {
    /// `d[h][s * num_actions + a]`, each step summing to 1.
    pub d: Vec<Vec<f64>>,
    pub num_actions: usize,
}

/// Forward visitation recursion under explicit kernels.
pub fn visitation_with_kernels(
    kernels: &[Vec<Vec<f64>>],
    pi: &Policy,
    num_states: usize,
    num_actions: usize,
    initial_state: usize,
) -> Result<VisitationTable> {
    let horizon = kernels.len();
    pi.validate(horizon, num_states, num_actions)?;
    let rows = num_states * num_actions;
    let mut d = vec![vec![0.0; rows]; horizon];
    let mut state_dist = vec![0.0; num_states];
    state_dist[initial_state] = 1.0;
    for h in 0..horizon {
        for s in 0..num_states {
            for a in 0..num_actions {
                d[h][s * num_actions + a] = state_dist[s] * pi.probs[h][s][a];
            }
        }
        let mut next = vec![0.0; num_states];
        for s in 0..num_states {
            for a in 0..num_actions {
                let w = d[h][s * num_actions + a];
                if w == 0.0 {
                    continue;
                }
                for (sp, &p) in kernels[h][s * num_actions + a].iter().enumerate() {
                    next[sp] += w * p;
                }
            }
        }
        state_dist = next;
    }
    for (h, row) in d.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("visitation at step {h} sums to {sum}")));
        }
    }
    Ok(VisitationTable { d, num_actions })
}

/// Visitation of `pi` under the model's nominal kernel.
pub fn visitation(m: &TabularRmdp, pi: &Policy) -> Result<VisitationTable> {
    visitation_with_kernels(&m.kernels, pi, m.num_states, m.num_actions, m.initial_state)
}

/// Monte-Carlo lower bound on the robust partial coverage coefficient: the
/// largest chi-square-style ratio `E_b[(d*_P / d_b)^2]` over the nominal
/// kernel and `n_perturb` kernels sampled from the robust set. Returns
/// `f64::INFINITY` when the behavior visitation misses a state-action pair
/// the optimal policy reaches. This is a diagnostic estimate, never an input
/// to learning.
pub fn coverage_coefficient(
    m: &TabularRmdp,
    pi_b: &Policy,
    pi_star: &Policy,
    n_perturb: usize,
    seed: u64,
) -> Result<f64> {
    let d_b = visitation(m, pi_b)?;
    let ratio_for = |kernels: &[Vec<Vec<f64>>]| -> Result<f64> {
        let d_star = visitation_with_kernels(kernels, pi_star, m.num_states, m.num_actions, m.initial_state)?;
        let mut worst = 0.0f64;
        for h in 0..m.horizon {
            let mut acc = 0.0;
            for row in 0..m.num_states * m.num_actions {
                let num = d_star.d[h][row];
                let den = d_b.d[h][row];
                if num > 0.0 && den <= 0.0 {
                    return Ok(f64::INFINITY);
                }
                if den > 0.0 {
                    acc += num * num / den;
                }
            }
            worst = worst.max(acc);
        }
        Ok(worst)
    };
    let mut best = ratio_for(&m.kernels)?;
    for k in 0..n_perturb {
        let mut rng = CounterRng::new(seed, k as u64 + 1);
        let perturbed: Vec<Vec<Vec<f64>>> = m
            .kernels
            .iter()
            .map(|step| {
                step.iter()
                    .map(|row| sample_in_ball(row, &m.robust, m.robust.rho, &mut rng))
                    .collect()
            })
            .collect();
        best = best.max(ratio_for(&perturbed)?);
        if best.is_infinite() {
            break;
        }
    }
    Ok(best)
}

const DATA_COLUMNS: &str = "h,tau,s,a,r,s_next";

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    n: usize,
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    seed: u64,
    model_id: String,
    behavior: Policy,
}

/// Serialize a dataset: one JSON header line, a CSV column line, then one
/// row per transition.
pub fn dataset_to_string(data: &OfflineDataset) -> Result<String> {
    let header = DatasetHeader {
        format: "p2mpo-dataset/1".to_string(),
        n: data.n,
        horizon: data.horizon,
        num_states: data.num_states,
        num_actions: data.num_actions,
        seed: data.seed,
        model_id: data.model_id.clone(),
        behavior: data.behavior.clone(),
    };
    let mut out = serde_json::to_string(&header).map_err(|e| Error::Parse(e.to_string()))?;
    out.push('\n');
    out.push_str(DATA_COLUMNS);
    out.push('\n');
    for (h, step) in data.steps.iter().enumerate() {
        for (tau, t) in step.iter().enumerate() {
            writeln!(out, "{h},{tau},{},{},{},{}", t.state, t.action, t.reward, t.next_state)
                .expect("string write");
        }
    }
    Ok(out)
}

/// Parse a dataset from its on-disk text form.
pub fn parse_dataset(text: &str) -> Result<OfflineDataset> {
    let mut lines = text.lines();
    let header_line = lines.next().ok_or_else(|| Error::Parse("empty dataset file".into()))?;
    let header: DatasetHeader =
        serde_json::from_str(header_line).map_err(|e| Error::Parse(format!("header: {e}")))?;
    if header.format != "p2mpo-dataset/1" {
        return Err(Error::Parse(format!("unknown dataset format {:?}", header.format)));
    }
    // Declared sizes come from untrusted input; bound them by the body size
    // before allocating anything proportional to them.
    let body_budget = text.len() / 8 + 16;
    if header.horizon == 0
        || header.n == 0
        || header
            .horizon
            .checked_mul(header.n)
            .map(|cells| cells > body_budget)
            .unwrap_or(true)
    {
        return Err(Error::Parse(format!(
            "header declares {} x {} transitions, more than the file can hold",
            header.horizon, header.n
        )));
    }
    let columns = lines.next().ok_or_else(|| Error::Parse("missing column line".into()))?;
    if columns.trim() != DATA_COLUMNS {
        return Err(Error::Parse(format!("unexpected columns {columns:?}")));
    }
    let mut steps = vec![Vec::with_capacity(header.n); header.horizon];
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let mut next_field = |name: &str| -> Result<&str> {
            fields
                .next()
                .ok_or_else(|| Error::Parse(format!("line {}: missing {name}", lineno + 3)))
        };
        let h: usize = parse_field(next_field("h")?, lineno, "h")?;
        let tau: usize = parse_field(next_field("tau")?, lineno, "tau")?;
        let state: usize = parse_field(next_field("s")?, lineno, "s")?;
        let action: usize = parse_field(next_field("a")?, lineno, "a")?;
        let reward: f64 = parse_field(next_field("r")?, lineno, "r")?;
        let next_state: usize = parse_field(next_field("s_next")?, lineno, "s_next")?;
        if h >= header.horizon {
            return Err(Error::Parse(format!("line {}: step {h} out of range", lineno + 3)));
        }
        if tau != steps[h].len() {
            return Err(Error::Parse(format!(
                "line {}: trajectories must appear in order, got tau {tau}",
                lineno + 3
            )));
        }
        steps[h].push(Transition {
            state,
            action,
            reward,
            next_state,
        });
    }
    let data = OfflineDataset {
        n: header.n,
        horizon: header.horizon,
        num_states: header.num_states,
        num_actions: header.num_actions,
        seed: header.seed,
        model_id: header.model_id,
        behavior: header.behavior,
        steps,
    };
    data.validate()?;
    Ok(data)
}

fn parse_field<T: std::str::FromStr>(raw: &str, lineno: usize, name: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {}: bad {name} field {raw:?}", lineno + 3)))
}

pub fn write_dataset(path: impl AsRef<Path>, data: &OfflineDataset) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset_to_string(data)?).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<OfflineDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RobustSpec;

    fn deterministic_model() -> TabularRmdp {
        TabularRmdp {
            num_states: 2,
            num_actions: 1,
            horizon: 2,
            kernels: vec![
                vec![vec![0.0, 1.0], vec![1.0, 0.0]],
                vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            ],
            rewards: vec![vec![0.25, 0.75], vec![0.5, 1.0]],
            robust: RobustSpec::tv(0.1),
            initial_state: 0,
        }
    }

    fn mixing_model(seed: u64, s: usize, a: usize, h: usize) -> TabularRmdp {
        let mut rng = CounterRng::new(seed, 0);
        let rows = s * a;
        let mut kernels = Vec::new();
        let mut rewards = Vec::new();
        for _ in 0..h {
            let mut step = Vec::new();
            for _ in 0..rows {
                let mut row: Vec<f64> = (0..s).map(|_| rng.next_f64() + 0.1).collect();
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= sum);
                step.push(row);
            }
            kernels.push(step);
            rewards.push((0..rows).map(|_| rng.next_f64()).collect());
        }
        TabularRmdp {
            num_states: s,
            num_actions: a,
            horizon: h,
            kernels,
            rewards,
            robust: RobustSpec::tv(0.1),
            initial_state: 0,
        }
    }

    #[test]
    fn deterministic_system_gives_identical_trajectories() {
        let m = deterministic_model();
        let pi = Policy::uniform(2, 2, 1);
        let data = generate(&m, &pi, 16, 3).unwrap();
        for h in 0..2 {
            for t in &data.steps[h] {
                assert_eq!(*t, data.steps[h][0]);
            }
        }
        assert_eq!(data.steps[0][0].state, 0);
        assert_eq!(data.steps[0][0].next_state, 1);
        assert_eq!(data.steps[0][0].reward, 0.25);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let m = mixing_model(5, 3, 2, 3);
        let pi = Policy::uniform(3, 3, 2);
        let a = generate(&m, &pi, 64, 42).unwrap();
        let b = generate(&m, &pi, 64, 42).unwrap();
        assert_eq!(a, b);
        let c = generate(&m, &pi, 64, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empirical_frequencies_match_visitation() {
        let m = mixing_model(9, 2, 2, 2);
        let pi = Policy::uniform(2, 2, 2);
        let n = 100_000;
        let data = generate(&m, &pi, n, 7).unwrap();
        let vis = visitation(&m, &pi).unwrap();
        for h in 0..2 {
            let mut counts = [0usize; 4];
            for t in &data.steps[h] {
                counts[t.state * 2 + t.action] += 1;
            }
            for row in 0..4 {
                let p = vis.d[h][row];
                let freq = counts[row] as f64 / n as f64;
                let sigma = (p * (1.0 - p) / n as f64).sqrt();
                assert!(
                    (freq - p).abs() <= 3.0 * sigma + 1e-9,
                    "h={h} row={row}: freq {freq} vs visitation {p}"
                );
            }
        }
    }

    #[test]
    fn visitation_initial_step_concentrates_on_s1() {
        let m = mixing_model(13, 3, 2, 1);
        let mut pi = Policy::uniform(1, 3, 2);
        pi.probs[0][0] = vec![0.2, 0.8];
        let vis = visitation(&m, &pi).unwrap();
        assert!((vis.d[0][0] - 0.2).abs() < 1e-15);
        assert!((vis.d[0][1] - 0.8).abs() < 1e-15);
        for row in 2..6 {
            assert_eq!(vis.d[0][row], 0.0);
        }
    }

    #[test]
    fn uniform_symmetric_case_stays_uniform() {
        // Doubly stochastic kernel + uniform policy keeps the state marginal
        // uniform, except at step 0 where the start state is fixed.
        let m = TabularRmdp {
            num_states: 2,
            num_actions: 2,
            horizon: 3,
            kernels: vec![vec![vec![0.5, 0.5]; 4]; 3],
            rewards: vec![vec![0.5; 4]; 3],
            robust: RobustSpec::tv(0.0),
            initial_state: 0,
        };
        let pi = Policy::uniform(3, 2, 2);
        let vis = visitation(&m, &pi).unwrap();
        for h in 1..3 {
            for row in 0..4 {
                assert!((vis.d[h][row] - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coverage_is_one_for_matching_policies_at_zero_radius() {
        let mut m = mixing_model(17, 3, 2, 2);
        m.robust = RobustSpec::tv(0.0);
        let pi = Policy::uniform(2, 3, 2);
        let c = coverage_coefficient(&m, &pi, &pi, 8, 5).unwrap();
        assert!((c - 1.0).abs() < 1e-9, "identical policies give ratio 1, got {c}");
    }

    #[test]
    fn coverage_closed_form_for_deterministic_target() {
        let mut m = mixing_model(19, 2, 2, 2);
        m.robust = RobustSpec::tv(0.0);
        let pi_b = Policy::uniform(2, 2, 2);
        let pi_star = Policy::deterministic(&[vec![0, 1], vec![1, 0]], 2);
        let got = coverage_coefficient(&m, &pi_b, &pi_star, 0, 1).unwrap();
        let db = visitation(&m, &pi_b).unwrap();
        let ds = visitation(&m, &pi_star).unwrap();
        let mut expect = 0.0f64;
        for h in 0..2 {
            let mut acc = 0.0;
            for row in 0..4 {
                if db.d[h][row] > 0.0 {
                    acc += ds.d[h][row] * ds.d[h][row] / db.d[h][row];
                }
            }
            expect = expect.max(acc);
        }
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn coverage_hole_returns_infinity() {
        let m = deterministic_model();
        let mut m2 = m.clone();
        m2.num_actions = 2;
        m2.kernels = m
            .kernels
            .iter()
            .map(|step| step.iter().flat_map(|r| [r.clone(), r.clone()]).collect())
            .collect();
        m2.rewards = m
            .rewards
            .iter()
            .map(|step| step.iter().flat_map(|&r| [r, r]).collect())
            .collect();
        let pi_b = Policy::deterministic(&[vec![0, 0], vec![0, 0]], 2);
        let pi_star = Policy::deterministic(&[vec![1, 1], vec![1, 1]], 2);
        let c = coverage_coefficient(&m2, &pi_b, &pi_star, 0, 1).unwrap();
        assert!(c.is_infinite());
    }

    #[test]
    fn coverage_estimate_monotone_in_perturbation_count() {
        let m = mixing_model(23, 3, 2, 2);
        let pi_b = Policy::uniform(2, 3, 2);
        let pi_star = Policy::deterministic(&[vec![0, 1, 0], vec![1, 0, 1]], 2);
        let mut last = 0.0;
        for k in [0, 2, 8, 16] {
            let c = coverage_coefficient(&m, &pi_b, &pi_star, k, 99).unwrap();
            assert!(c >= last - 1e-12, "running maximum must not decrease");
            last = c;
        }
        assert!(last >= 1.0 - 1e-9, "full-support coverage ratio is at least 1");
    }

    #[test]
    fn dataset_round_trips_through_text() {
        let m = mixing_model(29, 3, 2, 2);
        let pi = Policy::uniform(2, 3, 2);
        let data = generate(&m, &pi, 32, 11).unwrap();
        let text = dataset_to_string(&data).unwrap();
        let back = parse_dataset(&text).unwrap();
        assert_eq!(data, back);
    }

    #[test]
    fn malformed_dataset_lines_are_rejected() {
        let m = mixing_model(31, 2, 1, 1);
        let data = generate(&m, &Policy::uniform(1, 2, 1), 4, 0).unwrap();
        let text = dataset_to_string(&data).unwrap();
        let truncated: String = text.lines().take(2).collect::<Vec<_>>().join("\n");
        assert!(parse_dataset(&truncated).is_err(), "missing rows must fail validation");
        let corrupt = text.replace("0,0,", "0,9,");
        assert!(parse_dataset(&corrupt).is_err());
    }
}
