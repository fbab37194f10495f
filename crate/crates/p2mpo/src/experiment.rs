//! Reproducible experiment harness: suboptimality-vs-n rate experiments,
//! pessimism ablations, and CSV/JSON emission.
//!
//! Every cell `(method, n, seed)` is an independent pure job seeded from the
//! config, so cells run in parallel and the emitted CSV is byte-identical
//! across reruns of the same config.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::{robust_evaluate, robust_plan};
use crate::error::{Error, Result};
use crate::estimation::{confidence_region, ConfidenceRegion, EstimationConstants};
use crate::model::{load_model, load_policy, Model, Policy, RobustSpec, TabularRmdp};
use crate::offline::{generate, OfflineDataset};
use crate::pessimism;

/// Pipeline variants: the full doubly pessimistic optimizer and the two
/// ablations that drop one pessimism source each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Robust planning on the plug-in estimate, no data pessimism.
    MleGreedy,
    /// Data pessimism only, robust radius forced to zero.
    SinglePessimism,
    /// Both pessimism sources.
    P2mpo,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::MleGreedy => "mle_greedy",
            Method::SinglePessimism => "single_pessimism",
            Method::P2mpo => "p2mpo",
        }
    }
}

fn default_eps_mix() -> f64 {
    0.3
}

fn default_baselines() -> Vec<Method> {
    vec![Method::P2mpo]
}

/// Declarative experiment description, loaded from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Path to the tabular model file, relative to the config file.
    pub model: String,
    /// Optional behavior policy file; when absent the behavior is
    /// `(1 - eps_mix) * robust-optimal + eps_mix * uniform`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior: Option<String>,
    #[serde(default = "default_eps_mix")]
    pub eps_mix: f64,
    pub n_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub delta: f64,
    /// Overrides the model file's robust spec when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robust: Option<RobustSpec>,
    #[serde(default)]
    pub constants: EstimationConstants,
    #[serde(default = "default_baselines")]
    pub baselines: Vec<Method>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("n_grid must be nonempty and strictly increasing"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("seeds must be nonempty"));
        }
        if !(0.0..=1.0).contains(&self.eps_mix) {
            return Err(Error::invalid("eps_mix must lie in [0, 1]"));
        }
        if !(0.0 < self.delta && self.delta < 1.0) {
            return Err(Error::invalid("delta must lie in (0, 1)"));
        }
        if self.baselines.is_empty() {
            return Err(Error::invalid("baselines must be nonempty"));
        }
        Ok(())
    }
}

pub fn load_experiment_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Config with its referenced files loaded and the robust override applied.
pub struct ResolvedExperiment {
    pub cfg: ExperimentConfig,
    pub model: TabularRmdp,
    pub behavior: Policy,
}

/// Load the model and behavior policy referenced by a config, resolving
/// paths relative to `base_dir`.
pub fn resolve_experiment(cfg: ExperimentConfig, base_dir: &Path) -> Result<ResolvedExperiment> {
    cfg.validate()?;
    let model_path = base_dir.join(&cfg.model);
    let model = match load_model(&model_path, Some("tabular"))? {
        Model::Tabular(mut m) => {
            if let Some(robust) = &cfg.robust {
                m.robust = robust.clone();
                m.validate()?;
            }
            m
        }
        _ => unreachable!("kind checked by load_model"),
    };
    let behavior = match &cfg.behavior {
        Some(rel) => {
            let p = load_policy(base_dir.join(rel))?;
            p.validate(model.horizon, model.num_states, model.num_actions)?;
            p
        }
        None => robust_plan(&model)?.policy.mix_with_uniform(cfg.eps_mix),
    };
    Ok(ResolvedExperiment {
        cfg,
        model,
        behavior,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub method: Method,
    pub n: usize,
    pub seed: u64,
    pub subopt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub method: Method,
    pub slope: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub points_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub rows: Vec<RateRow>,
    pub aggregates: Vec<Aggregate>,
    pub slopes: Vec<SlopeFit>,
}

/// Fit `ln(mean subopt)` against `ln n` by least squares, dropping the two
/// smallest `n` (pre-asymptotic transient) and any nonpositive means. The
/// interval is the normal-approximation 95% band.
fn fit_slope(method: Method, aggregates: &[Aggregate]) -> Option<SlopeFit> {
    let mut pts: Vec<(f64, f64)> = aggregates
        .iter()
        .filter(|a| a.method == method)
        .skip(2)
        .filter(|a| a.mean > 0.0)
        .map(|a| ((a.n as f64).ln(), a.mean.ln()))
        .collect();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let k = pts.len();
    if k < 4 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k as f64;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = pts
        .iter()
        .map(|p| {
            let e = p.1 - (intercept + slope * p.0);
            e * e
        })
        .sum();
    let se = (sse / (k as f64 - 2.0) / sxx).sqrt();
    Some(SlopeFit {
        method,
        slope,
        ci_low: slope - 1.96 * se,
        ci_high: slope + 1.96 * se,
        points_used: k,
    })
}

/// Policy learned by one method from a shared confidence region.
fn policy_for_method(
    method: Method,
    rewards: &[Vec<f64>],
    region: &ConfidenceRegion,
    robust: &RobustSpec,
) -> Result<Policy> {
    match method {
        Method::MleGreedy => Ok(pessimism::optimize(rewards, &region.with_zero_radii(), robust)?.0),
        Method::SinglePessimism => {
            Ok(pessimism::optimize(rewards, region, &robust.with_rho(0.0))?.0)
        }
        Method::P2mpo => Ok(pessimism::optimize(rewards, region, robust)?.0),
    }
}

/// One ablation or full run on an existing dataset.
pub fn run_baseline(
    method: Method,
    data: &OfflineDataset,
    rewards: &[Vec<f64>],
    robust: &RobustSpec,
    delta: f64,
    constants: &EstimationConstants,
) -> Result<Policy> {
    let region = confidence_region(data, delta, constants)?;
    policy_for_method(method, rewards, &region, robust)
}

pub const RATE_CSV_HEADER: &str = "method,n,seed,subopt";

/// Run the full grid. Rows stream to `sink` (when given) as each `(method,
/// n)` batch finishes, so partial results survive a late failure.
pub fn run_rate_experiment(
    rx: &ResolvedExperiment,
    mut sink: Option<&mut dyn Write>,
) -> Result<RateReport> {
    let model = &rx.model;
    let plan = robust_plan(model)?;
    let plan_value = plan.values.initial(model.initial_state);
    if let Some(w) = sink.as_deref_mut() {
        writeln!(w, "{RATE_CSV_HEADER}").map_err(|e| Error::io("<csv sink>", e))?;
    }
    let mut rows = Vec::new();
    for &method in &rx.cfg.baselines {
        for &n in &rx.cfg.n_grid {
            let batch: Vec<RateRow> = rx
                .cfg
                .seeds
                .par_iter()
                .map(|&seed| -> Result<RateRow> {
                    let data = generate(model, &rx.behavior, n, seed)?;
                    let region = confidence_region(&data, rx.cfg.delta, &rx.cfg.constants)?;
                    let policy = policy_for_method(method, &model.rewards, &region, &model.robust)?;
                    let learned = robust_evaluate(model, &policy)?;
                    Ok(RateRow {
                        method,
                        n,
                        seed,
                        subopt: plan_value - learned.initial(model.initial_state),
                    })
                })
                .collect::<Result<_>>()?;
            if let Some(w) = sink.as_deref_mut() {
                for r in &batch {
                    writeln!(w, "{},{},{},{}", r.method.name(), r.n, r.seed, r.subopt)
                        .map_err(|e| Error::io("<csv sink>", e))?;
                }
                w.flush().map_err(|e| Error::io("<csv sink>", e))?;
            }
            rows.extend(batch);
        }
    }
    let mut aggregates = Vec::new();
    for &method in &rx.cfg.baselines {
        for &n in &rx.cfg.n_grid {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == method && r.n == n)
                .map(|r| r.subopt)
                .collect();
            let k = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / k;
            let var = if vals.len() > 1 {
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0)
            } else {
                0.0
            };
            aggregates.push(Aggregate {
                method,
                n,
                mean,
                stderr: (var / k).sqrt(),
            });
        }
    }
    let slopes = rx
        .cfg
        .baselines
        .iter()
        .filter_map(|&m| fit_slope(m, &aggregates))
        .collect();
    Ok(RateReport {
        rows,
        aggregates,
        slopes,
    })
}

/// Write the per-cell CSV and the JSON summary (aggregates and slopes).
pub fn emit_report(report: &RateReport, csv_path: &Path, summary_path: &Path) -> Result<()> {
    let mut csv = String::from(RATE_CSV_HEADER);
    csv.push('\n');
    for r in &report.rows {
        csv.push_str(&format!("{},{},{},{}\n", r.method.name(), r.n, r.seed, r.subopt));
    }
    fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))?;
    let summary = serde_json::json!({
        "aggregates": report.aggregates,
        "slopes": report.slopes,
    });
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(summary_path, text).map_err(|e| Error::io(summary_path, e))
}

/// Parse a summary back; used by round-trip checks.
pub fn parse_summary(text: &str) -> Result<(Vec<Aggregate>, Vec<SlopeFit>)> {
    #[derive(Deserialize)]
    struct Summary {
        aggregates: Vec<Aggregate>,
        slopes: Vec<SlopeFit>,
    }
    let s: Summary = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    Ok((s.aggregates, s.slopes))
}
