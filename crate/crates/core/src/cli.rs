//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 when a runtime invariant or competitive bound
//! is violated, 2 for usage and configuration errors.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Catalog, CostParams, Topology};
use crate::oracle::{solve_exact, Solution, TinyInstance};
use crate::policies::PolicyKind;
use crate::scheduler::{write_audit_csv, StatsScope};
use crate::sim::{self, desk, CellKey, CheckLevel, SimConfig, Summary, SweepGrid, Workload};
use crate::workload::{ingest_trace, TraceMapping, TraceOptions};

#[derive(Debug, Parser)]
#[command(name = "pcache-sim", version, about = "Edge serverless container caching simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one policy and write summary.json and ledger.csv.
    Run(RunArgs),
    /// Run the cartesian product of alphas, betas, policies and seeds.
    Sweep(SweepArgs),
    /// Solve a tiny instance exactly.
    Oracle(OracleArgs),
}

/// Options shared by `run` and `sweep`. Every option may also be set in the
/// TOML file given with `--config`; flags take precedence.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ScenarioArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Node table `id,capacity_mb,cpu_ghz,x,y`; defaults to the built-in
    /// 25-node deployment.
    #[arg(long)]
    pub nodes: Option<PathBuf>,
    /// Explicit communication-cost matrix (CSV, no header).
    #[arg(long)]
    pub comm_matrix: Option<PathBuf>,
    /// Communication cost per unit of coordinate distance.
    #[arg(long)]
    pub comm_scale: Option<f64>,
    /// Invocation trace `interval,node,ftype,count`, used instead of Zipf.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub downscale: Option<u32>,
    /// Trace intervals folded into one simulation interval.
    #[arg(long)]
    pub bin_width: Option<u32>,
    /// Mean requests per node per interval for Zipf workloads.
    #[arg(long)]
    pub mean_rate: Option<f64>,
    #[arg(long)]
    pub horizon: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fixed-caching lifetime in intervals.
    #[arg(long)]
    pub ttl: Option<u32>,
    #[arg(long)]
    pub switch_coeff: Option<f64>,
    #[arg(long)]
    pub run_coeff: Option<f64>,
    /// off, sample or full.
    #[arg(long)]
    pub check: Option<CheckLevel>,
    /// Share invocation statistics across all nodes.
    #[arg(long)]
    #[serde(default)]
    pub global_stats: bool,
    /// Use one popularity ranking for every node.
    #[arg(long)]
    #[serde(default)]
    pub zipf_global: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, conflicts_with = "trace")]
    pub zipf_beta: Option<f64>,
    /// Also write audit.csv with one row per request.
    #[arg(long)]
    pub audit: bool,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    /// Comma-separated; omit with `--trace`.
    #[arg(long, value_delimiter = ',')]
    pub betas: Option<Vec<f64>>,
    /// Comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub policies: Option<Vec<String>>,
    /// Seeds `seed, seed + 1, ..`.
    #[arg(long)]
    pub repeats: Option<u32>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub instance: PathBuf,
    /// Also simulate this policy and report its cost ratio to the optimum.
    #[arg(long)]
    pub compare: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub ttl: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Settings accepted in a `--config` file on top of the scenario options.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct FileConfig {
    #[serde(flatten)]
    scenario: ScenarioArgs,
    policy: Option<String>,
    alpha: Option<f64>,
    zipf_beta: Option<f64>,
    alphas: Option<Vec<f64>>,
    betas: Option<Vec<f64>>,
    policies: Option<Vec<String>>,
    repeats: Option<u32>,
    jobs: Option<usize>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn merge(flags: &ScenarioArgs, file: &ScenarioArgs) -> ScenarioArgs {
    ScenarioArgs {
        config: flags.config.clone(),
        nodes: flags.nodes.clone().or(file.nodes.clone()),
        comm_matrix: flags.comm_matrix.clone().or(file.comm_matrix.clone()),
        comm_scale: flags.comm_scale.or(file.comm_scale),
        trace: flags.trace.clone().or(file.trace.clone()),
        downscale: flags.downscale.or(file.downscale),
        bin_width: flags.bin_width.or(file.bin_width),
        mean_rate: flags.mean_rate.or(file.mean_rate),
        horizon: flags.horizon.or(file.horizon),
        seed: flags.seed.or(file.seed),
        ttl: flags.ttl.or(file.ttl),
        switch_coeff: flags.switch_coeff.or(file.switch_coeff),
        run_coeff: flags.run_coeff.or(file.run_coeff),
        check: flags.check.or(file.check),
        global_stats: flags.global_stats || file.global_stats,
        zipf_global: flags.zipf_global || file.zipf_global,
    }
}

pub fn parse_policy(name: &str) -> Result<PolicyKind> {
    name.trim().parse().map_err(Error::Config)
}

/// Builds the base configuration. `beta` is ignored for trace workloads.
fn build_config(s: &ScenarioArgs, policy: PolicyKind, alpha: f64, beta: Option<f64>) -> Result<SimConfig> {
    let topology = match &s.nodes {
        Some(path) => Topology::load(path, s.comm_matrix.as_deref(), s.comm_scale.unwrap_or(desk::COMM_PER_KM))?,
        None if s.comm_matrix.is_some() => {
            return Err(Error::config("--comm-matrix requires --nodes"));
        }
        None => desk::topology(),
    };
    let catalog = Catalog::function_instances();
    let seed = s.seed.unwrap_or(0);
    let workload = match (&s.trace, beta) {
        (Some(path), _) => {
            let mapping = TraceMapping::identity(topology.len(), catalog.len());
            let opts = TraceOptions {
                downscale: s.downscale.unwrap_or(1),
                bin_width: s.bin_width.unwrap_or(1),
                seed,
            };
            Workload::Batches(Arc::new(ingest_trace(path, &mapping, opts)?))
        }
        (None, Some(beta)) => Workload::Zipf {
            beta,
            mean_rate: s.mean_rate.unwrap_or(desk::MEAN_RATE),
            global_ranking: s.zipf_global,
        },
        (None, None) => return Err(Error::config("either --zipf-beta or --trace is required")),
    };
    let params = CostParams::new(
        alpha,
        s.switch_coeff.unwrap_or(CostParams::DEFAULT_SWITCH_COEFF),
        s.run_coeff.unwrap_or(CostParams::DEFAULT_RUN_COEFF),
    )?;
    let cfg = SimConfig {
        topology: Arc::new(topology),
        catalog: Arc::new(catalog),
        workload,
        policy,
        params,
        ttl: s.ttl.unwrap_or(desk::TTL),
        horizon: s.horizon.unwrap_or(desk::HORIZON),
        seed,
        check: s.check.unwrap_or_default(),
        audit: false,
        stats_scope: if s.global_stats {
            StatsScope::Global
        } else {
            StatsScope::PerNode
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Writes each `(name, bytes)` into `dir` through a temporary file and a
/// rename. On failure nothing written by this call is left behind.
fn write_outputs(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut done: Vec<PathBuf> = Vec::new();
    let mut staged: Vec<(PathBuf, PathBuf)> = Vec::new();
    let result = (|| {
        for (name, bytes) in files {
            let tmp = dir.join(format!(".{name}.partial"));
            staged.push((tmp.clone(), dir.join(name)));
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        for (tmp, dest) in &staged {
            fs::rename(tmp, dest).map_err(|e| Error::io(dest, e))?;
            done.push(dest.clone());
        }
        Ok(())
    })();
    if result.is_err() {
        for (tmp, _) in &staged {
            let _ = fs::remove_file(tmp);
        }
        for path in &done {
            let _ = fs::remove_file(path);
        }
    }
    result
}

fn to_json_line<T: Serialize>(value: &T) -> Vec<u8> {
    let mut line = serde_json::to_vec(value).expect("records serialise");
    line.push(b'\n');
    line
}

pub fn cmd_run(args: &RunArgs) -> Result<Summary> {
    let file = load_file_config(args.scenario.config.as_deref())?;
    let scenario = merge(&args.scenario, &file.scenario);
    let policy = parse_policy(args.policy.as_deref().or(file.policy.as_deref()).unwrap_or("pcache"))?;
    let alpha = args
        .alpha
        .or(file.alpha)
        .ok_or_else(|| Error::config("--alpha is required"))?;
    let beta = args.zipf_beta.or(file.zipf_beta);
    let mut cfg = build_config(&scenario, policy, alpha, beta)?;
    cfg.audit = args.audit;
    let result = sim::run(&cfg)?;

    let mut files = vec![
        ("summary.json", serde_json::to_vec_pretty(&result.summary).expect("summary serialises")),
        ("ledger.csv", {
            let mut buf = Vec::new();
            result
                .ledger
                .write_csv(&mut buf)
                .map_err(|e| Error::config(e.to_string()))?;
            buf
        }),
    ];
    if let Some(audit) = &result.audit {
        let mut buf = Vec::new();
        write_audit_csv(audit, &mut buf).map_err(|e| Error::config(e.to_string()))?;
        files.push(("audit.csv", buf));
    }
    write_outputs(&args.output, &files)?;
    Ok(result.summary)
}

#[derive(Debug, Serialize)]
struct CellError<'a> {
    #[serde(flatten)]
    key: &'a CellKey,
    error: String,
}

/// Outcome of a sweep: number of cells run and number that failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepOutcome {
    pub cells: usize,
    pub failed: usize,
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<SweepOutcome> {
    let file = load_file_config(args.scenario.config.as_deref())?;
    let scenario = merge(&args.scenario, &file.scenario);
    let alphas = args
        .alphas
        .clone()
        .or(file.alphas)
        .ok_or_else(|| Error::config("--alphas is required"))?;
    let betas = args.betas.clone().or(file.betas).unwrap_or_default();
    let policies = args
        .policies
        .clone()
        .or(file.policies)
        .unwrap_or_else(|| vec!["pcache".into(), "lru".into(), "fc".into()])
        .iter()
        .map(|p| parse_policy(p))
        .collect::<Result<Vec<_>>>()?;
    let repeats = args.repeats.or(file.repeats).unwrap_or(1);
    if repeats == 0 {
        return Err(Error::config("--repeats must be >= 1"));
    }
    let jobs = args
        .jobs
        .or(file.jobs)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let first_alpha = *alphas
        .first()
        .ok_or_else(|| Error::config("--alphas must not be empty"))?;
    let first_policy = *policies
        .first()
        .ok_or_else(|| Error::config("--policies must not be empty"))?;
    let first_beta = match (&scenario.trace, betas.first()) {
        (Some(_), _) => None,
        (None, Some(&b)) => Some(b),
        (None, None) => return Err(Error::config("--betas must not be empty")),
    };
    let base = build_config(&scenario, first_policy, first_alpha, first_beta)?;
    let seed = base.seed;
    let grid = SweepGrid {
        alphas,
        betas,
        policies,
        seeds: (0..u64::from(repeats)).map(|i| seed.wrapping_add(i)).collect(),
    };
    let cells = sim::sweep(&grid, &base, jobs)?;

    let mut results = Vec::new();
    let mut errors = Vec::new();
    let mut by_alpha: BTreeMap<(u64, u64, PolicyKind), (f64, u32)> = BTreeMap::new();
    let mut by_beta: BTreeMap<(u64, PolicyKind), (f64, u32)> = BTreeMap::new();
    let beta_key = |b: Option<f64>| b.map_or(0, f64::to_bits);
    for (key, outcome) in &cells {
        match outcome {
            Ok(summary) => {
                results.extend(to_json_line(summary));
                if let Some(x) = summary.normalized_cost {
                    let e = by_alpha
                        .entry((beta_key(key.beta), key.alpha.to_bits(), key.policy))
                        .or_default();
                    e.0 += x;
                    e.1 += 1;
                }
                if let Some(x) = summary.cold_start_frequency {
                    let e = by_beta.entry((beta_key(key.beta), key.policy)).or_default();
                    e.0 += x;
                    e.1 += 1;
                }
            }
            Err(e) => errors.extend(to_json_line(&CellError {
                key,
                error: e.to_string(),
            })),
        }
    }

    let fmt_beta = |bits: u64| {
        if matches!(base.workload, Workload::Batches(_)) {
            String::new()
        } else {
            f64::from_bits(bits).to_string()
        }
    };
    let mut alpha_csv = String::from("beta,alpha,policy,normalized_cost\n");
    let mut rows: Vec<_> = by_alpha.into_iter().collect();
    rows.sort_by(|a, b| {
        f64::from_bits(a.0 .0)
            .total_cmp(&f64::from_bits(b.0 .0))
            .then(f64::from_bits(a.0 .1).total_cmp(&f64::from_bits(b.0 .1)))
            .then(a.0 .2.cmp(&b.0 .2))
    });
    for ((beta, alpha, policy), (sum, count)) in rows {
        alpha_csv.push_str(&format!(
            "{},{},{},{}\n",
            fmt_beta(beta),
            f64::from_bits(alpha),
            policy,
            sum / f64::from(count)
        ));
    }
    let mut beta_csv = String::from("beta,policy,cold_start_frequency\n");
    let mut rows: Vec<_> = by_beta.into_iter().collect();
    rows.sort_by(|a, b| {
        f64::from_bits(a.0 .0)
            .total_cmp(&f64::from_bits(b.0 .0))
            .then(a.0 .1.cmp(&b.0 .1))
    });
    for ((beta, policy), (sum, count)) in rows {
        beta_csv.push_str(&format!("{},{},{}\n", fmt_beta(beta), policy, sum / f64::from(count)));
    }

    let failed = cells.iter().filter(|(_, r)| r.is_err()).count();
    write_outputs(
        &args.output,
        &[
            ("results.jsonl", results),
            ("errors.jsonl", errors),
            ("avg_cost_by_alpha.csv", alpha_csv.into_bytes()),
            ("cold_start_by_beta.csv", beta_csv.into_bytes()),
        ],
    )?;
    Ok(SweepOutcome {
        cells: cells.len(),
        failed,
    })
}

#[derive(Debug, Serialize)]
pub struct Comparison {
    pub policy: PolicyKind,
    pub cost: f64,
    /// `cost / optimum`; absent when the optimum is zero.
    pub ratio: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct OracleReport {
    pub optimum: f64,
    pub witness: Vec<crate::oracle::WitnessStep>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compare: Option<Comparison>,
}

pub fn cmd_oracle(args: &OracleArgs) -> Result<OracleReport> {
    let text = fs::read_to_string(&args.instance).map_err(|e| Error::io(&args.instance, e))?;
    let inst = TinyInstance::from_json(&text)?;
    let Solution { cost, witness } = solve_exact(&inst)?;
    let compare = match &args.compare {
        Some(name) => {
            let policy = parse_policy(name)?;
            let run = inst.run_policy(policy, args.ttl, args.seed)?;
            let total = run.summary.total_cost;
            Some(Comparison {
                policy,
                cost: total,
                ratio: (cost > 0.0).then(|| total / cost),
            })
        }
        None => None,
    };
    Ok(OracleReport {
        optimum: cost,
        witness,
        compare,
    })
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Invariant { .. } | Error::BoundViolation(_) => 1,
        _ => 2,
    }
}

pub fn main_with(cli: Cli) -> ExitCode {
    let outcome = match &cli.command {
        Command::Run(args) => cmd_run(args).map(|s| {
            println!("{}", serde_json::to_string(&s).expect("summary serialises"));
            0
        }),
        Command::Sweep(args) => cmd_sweep(args).map(|o| {
            eprintln!("{} cells, {} failed", o.cells, o.failed);
            u8::from(o.failed > 0)
        }),
        Command::Oracle(args) => cmd_oracle(args).map(|r| {
            println!("{}", serde_json::to_string_pretty(&r).expect("report serialises"));
            0
        }),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
