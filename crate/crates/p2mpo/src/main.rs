//! Command-line front end: planning, data generation, estimation, offline
//! policy optimization, dual evaluation, and the rate-experiment harness.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use p2mpo::dp::robust_plan;
use p2mpo::duals;
use p2mpo::error::{Error, Result};
use p2mpo::estimation::{confidence_region, EstimationConstants};
use p2mpo::experiment::{
    emit_report, load_experiment_config, resolve_experiment, run_rate_experiment,
};
use p2mpo::model::{
    load_dims, load_model, load_policy, Divergence, Model, Policy, RobustSpec,
};
use p2mpo::offline::{generate, read_dataset, write_dataset};
use p2mpo::pessimism;

#[derive(Parser)]
#[command(name = "p2mpo", disable_version_flag = true)]
#[command(about = "Robust offline RL: doubly pessimistic model-based policy optimization")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConstantArgs {
    /// Budget-schedule constant C1.
    #[arg(long, default_value_t = 1.0)]
    c1: f64,
    /// Budget-schedule constant C2.
    #[arg(long, default_value_t = 1.0)]
    c2: f64,
    /// Decomposed per-(s,a) radius constant.
    #[arg(long, default_value_t = 2.0)]
    c_dec: f64,
}

impl ConstantArgs {
    fn to_constants(&self) -> EstimationConstants {
        EstimationConstants {
            c1: self.c1,
            c2: self.c2,
            c_dec: self.c_dec,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Robust optimal planning on a tabular model file.
    Plan {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample an offline dataset from the nominal kernel.
    GenData {
        #[arg(long)]
        model: PathBuf,
        /// Behavior policy file; defaults to the eps-mix of the robust
        /// optimal policy with the uniform one.
        #[arg(long)]
        behavior: Option<PathBuf>,
        #[arg(long, default_value_t = 0.3)]
        eps_mix: f64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate a confidence region from a dataset.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model_dims: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[command(flatten)]
        constants: ConstantArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a policy from a dataset by doubly pessimistic optimization.
    Optimize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model_dims: PathBuf,
        #[arg(long)]
        rho: f64,
        #[arg(long, value_parser = parse_divergence)]
        divergence: Divergence,
        /// KL dual-variable search floor (ignored for tv).
        #[arg(long, default_value_t = 1e-6)]
        lambda_floor: f64,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[command(flatten)]
        constants: ConstantArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Debug helpers for the one-step robust duals.
    Duals {
        #[command(subcommand)]
        cmd: DualsCmd,
    },
    /// Reproducible experiment harness.
    Experiment {
        #[command(subcommand)]
        cmd: ExperimentCmd,
    },
}

#[derive(Subcommand)]
enum DualsCmd {
    /// Evaluate one robust expectation from a JSON request
    /// `{"p": [...], "v": [...], "spec": {...}}`.
    Eval {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Subcommand)]
enum ExperimentCmd {
    /// Suboptimality-vs-n rate experiment over a seed grid.
    Rate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn parse_divergence(raw: &str) -> std::result::Result<Divergence, String> {
    match raw {
        "tv" => Ok(Divergence::Tv),
        "kl" => Ok(Divergence::Kl),
        other => Err(format!("unknown divergence {other:?}, expected tv or kl")),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Plan { model, out } => {
            let m = match load_model(&model, Some("tabular"))? {
                Model::Tabular(m) => m,
                _ => unreachable!(),
            };
            let plan = robust_plan(&m)?;
            write_json(&out, &plan)?;
            println!(
                "planned: robust value at s1 = {}",
                plan.values.initial(m.initial_state)
            );
        }
        Cmd::GenData {
            model,
            behavior,
            eps_mix,
            n,
            seed,
            out,
        } => {
            let m = match load_model(&model, Some("tabular"))? {
                Model::Tabular(m) => m,
                _ => unreachable!(),
            };
            let pi_b: Policy = match behavior {
                Some(path) => load_policy(path)?,
                None => robust_plan(&m)?.policy.mix_with_uniform(eps_mix),
            };
            let data = generate(&m, &pi_b, n, seed)?;
            write_dataset(&out, &data)?;
            println!("wrote {n} trajectories to {}", out.display());
        }
        Cmd::Estimate {
            data,
            model_dims,
            delta,
            constants,
            out,
        } => {
            let dims = load_dims(&model_dims)?;
            let dataset = read_dataset(&data)?;
            if dataset.num_states != dims.num_states
                || dataset.num_actions != dims.num_actions
                || dataset.horizon != dims.horizon
            {
                return Err(Error::shape("dataset does not match --model-dims"));
            }
            let region = confidence_region(&dataset, delta, &constants.to_constants())?;
            write_json(&out, &region)?;
            println!("estimated region: xi = {}", region.xi);
        }
        Cmd::Optimize {
            data,
            model_dims,
            rho,
            divergence,
            lambda_floor,
            delta,
            constants,
            out,
        } => {
            let dims = load_dims(&model_dims)?;
            let rewards = dims
                .rewards
                .clone()
                .ok_or_else(|| Error::invalid("--model-dims must carry rewards for optimize"))?;
            let dataset = read_dataset(&data)?;
            if dataset.num_states != dims.num_states
                || dataset.num_actions != dims.num_actions
                || dataset.horizon != dims.horizon
            {
                return Err(Error::shape("dataset does not match --model-dims"));
            }
            let robust = match divergence {
                Divergence::Tv => RobustSpec::tv(rho),
                Divergence::Kl => RobustSpec::kl(rho, lambda_floor),
            };
            robust.validate()?;
            let region = confidence_region(&dataset, delta, &constants.to_constants())?;
            let (policy, values) = pessimism::optimize(&rewards, &region, &robust)?;
            write_json(&out, &policy)?;
            println!(
                "optimized: pessimistic value at s1 = {}",
                values.initial(dims.initial_state)
            );
        }
        Cmd::Duals { cmd } => match cmd {
            DualsCmd::Eval { input } => {
                let text = fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
                let result = duals::eval_request_json(&text)?;
                let out =
                    serde_json::to_string_pretty(&result).map_err(|e| Error::Parse(e.to_string()))?;
                println!("{out}");
            }
        },
        Cmd::Experiment { cmd } => match cmd {
            ExperimentCmd::Rate { config, out_dir } => {
                let cfg = load_experiment_config(&config)?;
                let base = config.parent().unwrap_or_else(|| Path::new("."));
                let rx = resolve_experiment(cfg, base)?;
                fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
                let csv_path = out_dir.join("rate.csv");
                let mut sink =
                    fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
                let report = run_rate_experiment(&rx, Some(&mut sink))?;
                sink.flush().map_err(|e| Error::io(&csv_path, e))?;
                drop(sink);
                emit_report(&report, &csv_path, &out_dir.join("summary.json"))?;
                for fit in &report.slopes {
                    println!(
                        "{}: slope {:.3} (95% ci [{:.3}, {:.3}], {} points)",
                        fit.method.name(),
                        fit.slope,
                        fit.ci_low,
                        fit.ci_high,
                        fit.points_used
                    );
                }
                println!("wrote {} and summary.json", csv_path.display());
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().skip(1).any(|a| a == "--version" || a == "-V") {
        println!(
            "p2mpo {} (rng {})",
            env!("CARGO_PKG_VERSION"),
            p2mpo::RNG_VERSION
        );
        return ExitCode::SUCCESS;
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
