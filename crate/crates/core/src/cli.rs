//! Command line front end.
//!
//! Subcommands: `train`, `simulate`, `eval-passk`, `metrics-ads`,
//! `advantage-table`, `sweep`. Exit codes: 0 success, 1 usage error
//! (including a missing input file), 2 runtime failure.
//!
//! Experiment configs are JSON:
//!
//! ```json
//! {
//!   "seed": 7,
//!   "suite": { "family": "modsum", "modulus": 4, "vocab": 4, "len": 3, "count": 32 },
//!   "heldout_file": "heldout.jsonl",
//!   "train": { "estimator": { "variant": "agpo", "delta": 2.0 }, "total_steps": 200 },
//!   "simulate": { "learning_rate": 0.5, "temperature": 1.0 },
//!   "sweep": { "deltas": [0.0001, 0.5, 1, 2, 5], "betas": [0] }
//! }
//! ```
//!
//! `suite` may be replaced by `"suite_file": "<tasks.jsonl>"`. Relative paths
//! resolve against the config file's directory. `seed` drives task
//! generation (unless `suite.seed` is given), policy initialisation, batching
//! and sampling.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{advantage_table, advantage_table_csv, EstimatorConfig, EstimatorVariant};
use crate::envs::{build_task_family, FamilySpec, TaskSuite};
use crate::evalkit::{cpc, ctrpi, gmv, passk_curve_from_log, AdsRecord, PromptCounts};
use crate::exactsim::{exact_passk_curve, simulate_suite, FlowConfig, FlowMode, SIM_CSV_HEADER};
use crate::numfmt::{sig7, sig7_opt};
use crate::seeding::grid_seed;
use crate::trainer::{initial_policy, train_run, write_file, TrainConfig, TrainOutcome};
use crate::{LabError, Result};

#[derive(Parser, Debug)]
#[command(name = "agpolab", version, about = "RLVR estimator laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sampled training run: telemetry.csv and checkpoints in --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write rollouts.jsonl.
        #[arg(long)]
        log_rollouts: bool,
    },
    /// Exact flow on the config's suite, one CSV row per step.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// psr, nsr, weighted:<lambda>, grpo or agpo.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean Pass@k of a `{prompt_id, n, c}` JSONL log.
    EvalPassk {
        #[arg(long)]
        log: PathBuf,
        /// Comma separated, e.g. `1,2,4,...,256`.
        #[arg(long)]
        ks: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// CTRPI, CPC, CPM and GMV of an ads JSONL log.
    MetricsAds {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-k advantages of the correct and incorrect classes.
    AdvantageTable {
        #[arg(long = "G")]
        group_size: usize,
        #[arg(long, default_value = "agpo")]
        estimator: EstimatorVariant,
        #[arg(long, default_value_t = 2.0)]
        delta: f64,
        #[arg(long = "r-floor", default_value_t = -1.0, allow_negative_numbers = true)]
        r_floor: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long = "eps-std", default_value_t = 1e-6)]
        eps_std: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Training runs over the config's delta x beta grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Generated suite description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteGen {
    #[serde(flatten)]
    pub family: FamilySpec,
    pub vocab: usize,
    pub len: usize,
    pub count: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    #[serde(default = "one")]
    pub learning_rate: f64,
    #[serde(default = "one")]
    pub temperature: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub deltas: Vec<f64>,
    pub betas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub suite: Option<SuiteGen>,
    #[serde(default)]
    pub suite_file: Option<PathBuf>,
    #[serde(default)]
    pub heldout_file: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig<f64>,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub sweep: Option<SweepGrid>,
}

/// A config with its suites materialised.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub suite: TaskSuite,
    pub heldout: Option<TaskSuite>,
}

impl Experiment {
    /// `train` config with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig<f64> {
        TrainConfig {
            seed: self.config.seed,
            ..self.config.train.clone()
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Usage-level failure: missing inputs and malformed arguments.
#[derive(Debug)]
struct Usage(String);

enum Failure {
    Usage(Usage),
    Runtime(LabError),
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        match e {
            LabError::NotFound(_) => Failure::Usage(Usage(e.to_string())),
            e => Failure::Runtime(e),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<Usage> for Failure {
    fn from(u: Usage) -> Self {
        Failure::Usage(u)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(LabError::NotFound(path.display().to_string()))
    }
}

fn read_text(path: &Path) -> Result<String> {
    require_file(path)?;
    fs::read_to_string(path).map_err(|e| LabError::io(path, e))
}

/// Reads a config and builds or loads its suites.
pub fn load_experiment(path: &Path) -> Result<Experiment> {
    let text = read_text(path)?;
    let mut config: ExperimentConfig = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for p in [&mut config.suite_file, &mut config.heldout_file]
        .into_iter()
        .flatten()
    {
        *p = resolve(base, p);
        require_file(p)?;
    }
    let suite = match (&config.suite, &config.suite_file) {
        (Some(g), None) => build_task_family(
            &g.family,
            g.vocab,
            g.len,
            g.count,
            g.seed.unwrap_or(config.seed),
        )?,
        (None, Some(file)) => TaskSuite::load(file)?,
        _ => {
            return Err(LabError::InvalidConfig(
                "give exactly one of 'suite' and 'suite_file'".into(),
            ))
        }
    };
    let heldout = match &config.heldout_file {
        Some(file) => Some(TaskSuite::load(file)?),
        None => None,
    };
    Ok(Experiment {
        config,
        suite,
        heldout,
    })
}

/// Parses `1,2,4,...,256`: an ellipsis continues the progression of the two
/// preceding values (geometric when their ratio is integral, arithmetic
/// otherwise) up to the value after it.
pub fn parse_ks(spec: &str) -> Result<Vec<u64>> {
    let parts: Vec<&str> = spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    let num = |s: &str| {
        s.parse::<u64>()
            .map_err(|_| LabError::Parse(format!("bad k value '{s}'")))
    };
    let mut out: Vec<u64> = Vec::new();
    let mut i = 0;
    while i < parts.len() {
        if parts[i] == "..." {
            if out.len() < 2 || i + 1 >= parts.len() {
                return Err(LabError::Parse(
                    "'...' needs two values before and one after".into(),
                ));
            }
            let (a, b) = (out[out.len() - 2], out[out.len() - 1]);
            let end = num(parts[i + 1])?;
            if b <= a || end < b {
                return Err(LabError::Parse(
                    "'...' needs an increasing progression".into(),
                ));
            }
            let next = |x: u64| {
                if a > 0 && b % a == 0 {
                    x * (b / a)
                } else {
                    x + (b - a)
                }
            };
            let mut x = next(b);
            while x < end {
                out.push(x);
                x = next(x);
            }
            i += 1;
            continue;
        }
        out.push(num(parts[i])?);
        i += 1;
    }
    if out.is_empty() {
        return Err(LabError::Parse("no k values".into()));
    }
    Ok(out)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))
        }
        _ => Ok(()),
    }
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    write_file(&path.to_path_buf(), text)
}

fn cmd_train(config: &Path, out: &Path, log_rollouts: bool) -> CliResult<()> {
    let exp = load_experiment(config)?;
    let mut cfg = exp.train_config();
    cfg.log_rollouts |= log_rollouts;
    let outcome = train_run(cfg, &exp.suite, exp.heldout.as_ref())?;
    outcome.write_artifacts(out)?;
    Ok(())
}

fn cmd_simulate(config: &Path, mode: &str, steps: usize, out: &Path) -> CliResult<()> {
    let mode: FlowMode<f64> = mode.parse().map_err(|e: LabError| Usage(e.to_string()))?;
    let exp = load_experiment(config)?;
    let train = exp.train_config();
    let sim = &exp.config.simulate;
    let flow = FlowConfig {
        temperature: sim.temperature,
        group_size: train.group_size,
        estimator: train.estimator,
    };
    let policies = exp
        .suite
        .tasks()
        .iter()
        .map(|t| initial_policy(&train.init, t, train.seed))
        .collect::<Result<Vec<_>>>()?;
    let (records, _) = simulate_suite(policies, &exp.suite, mode, &flow, sim.learning_rate, steps)?;
    let mut text = format!("{SIM_CSV_HEADER}\n");
    for r in &records {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    write_out(out, &text)?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = read_text(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(line)
                .map_err(|e| LabError::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(rows)
}

fn cmd_eval_passk(log: &Path, ks: &str, out: &Path) -> CliResult<()> {
    let ks = parse_ks(ks).map_err(|e| Usage(e.to_string()))?;
    let records: Vec<PromptCounts> = read_jsonl(log)?;
    let values = passk_curve_from_log::<f64>(&records, &ks)?;
    let mut text = String::from("k,pass_at_k\n");
    for (k, v) in ks.iter().zip(values) {
        text.push_str(&format!("{k},{}\n", sig7(v)));
    }
    write_out(out, &text)?;
    Ok(())
}

#[derive(Serialize)]
struct AdsReport {
    ctrpi: Option<f64>,
    cpc: Option<f64>,
    cpm: Option<f64>,
    gmv: Option<f64>,
    records: usize,
    impressions: u64,
    clicks: u64,
    purchases: usize,
}

fn cmd_metrics_ads(log: &Path, out: &Path) -> CliResult<()> {
    let records: Vec<AdsRecord> = read_jsonl(log)?;
    let defined = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(LabError::UndefinedMetric(name)) => {
            eprintln!("agpolab: {name} is undefined for this log; written as null");
            Ok(None)
        }
        Err(e) => Err(e),
    };
    let ctr = defined(ctrpi(&records))?;
    let cost = defined(cpc(&records))?;
    let report = AdsReport {
        ctrpi: ctr,
        cpc: cost,
        cpm: ctr.zip(cost).map(|(a, b)| 1000.0 * a * b),
        gmv: defined(gmv(&records))?,
        records: records.len(),
        impressions: records.iter().map(|r| r.impressions).sum(),
        clicks: records.iter().map(|r| r.clicks).sum(),
        purchases: records
            .iter()
            .filter(|r| r.purchase_price.is_some() && r.purchase_qty.is_some())
            .count(),
    };
    write_out(out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(())
}

fn cmd_advantage_table(
    g: usize,
    variant: EstimatorVariant,
    delta: f64,
    r_floor: f64,
    lambda: f64,
    eps_std: f64,
    out: &Path,
) -> CliResult<()> {
    let cfg = EstimatorConfig {
        variant,
        delta,
        r_floor,
        lambda_pos: lambda,
        eps_std,
    };
    let rows = advantage_table(g, &cfg)?;
    write_out(out, &advantage_table_csv(&rows))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub delta: f64,
    pub beta: f64,
    pub final_greedy_acc: f64,
    pub final_entropy: f64,
    pub exact_pass_16: f64,
}

pub const SWEEP_HEADER: &str = "delta,beta,final_greedy_acc,final_entropy,exact_pass_16";

/// Directory name of grid point `index`.
pub fn point_dir(index: usize, delta: f64, beta: f64) -> String {
    format!("point_{index:03}_delta_{}_beta_{}", sig7(delta), sig7(beta))
}

/// Runs every `(delta, beta)` grid point; point `i` (row-major over deltas
/// then betas) trains with seed `grid_seed(seed, i)`.
pub fn run_sweep(exp: &Experiment, out: &Path) -> Result<Vec<SweepRow>> {
    let grid = exp
        .config
        .sweep
        .as_ref()
        .ok_or_else(|| LabError::InvalidConfig("config has no 'sweep' section".into()))?;
    if grid.deltas.is_empty() || grid.betas.is_empty() {
        return Err(LabError::InvalidConfig(
            "sweep lists must be nonempty".into(),
        ));
    }
    let base = exp.train_config();
    let points: Vec<(usize, f64, f64)> = grid
        .deltas
        .iter()
        .flat_map(|&d| grid.betas.iter().map(move |&b| (d, b)))
        .enumerate()
        .map(|(i, (d, b))| (i, d, b))
        .collect();
    let mut rows = points
        .par_iter()
        .map(|&(i, delta, beta)| {
            let wrap = |e: LabError| LabError::AtGridPoint {
                delta,
                beta,
                source: Box::new(e),
            };
            let mut cfg = base.clone();
            cfg.seed = grid_seed(base.seed, i as u64);
            cfg.estimator.delta = delta;
            cfg.clip.kl_coeff = beta;
            let outcome: TrainOutcome<f64> =
                train_run(cfg, &exp.suite, exp.heldout.as_ref()).map_err(wrap)?;
            outcome
                .write_artifacts(&out.join(point_dir(i, delta, beta)))
                .map_err(wrap)?;
            let last = outcome.telemetry.last();
            let mut pass16 = 0.0;
            for (p, t) in outcome.policies.iter().zip(exp.suite.tasks()) {
                pass16 += exact_passk_curve(p, t, &[16]).map_err(wrap)?[0];
            }
            Ok(SweepRow {
                delta,
                beta,
                final_greedy_acc: last
                    .map_or(outcome.initial.heldout_greedy_acc, |r| r.heldout_greedy_acc),
                final_entropy: last.map_or(outcome.initial.mean_entropy, |r| r.mean_entropy),
                exact_pass_16: pass16 / exp.suite.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.delta.total_cmp(&b.delta).then(a.beta.total_cmp(&b.beta)));
    let mut text = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            sig7(r.delta),
            sig7(r.beta),
            sig7(r.final_greedy_acc),
            sig7(r.final_entropy),
            sig7_opt(Some(r.exact_pass_16))
        ));
    }
    write_out(&out.join("sweep_summary.csv"), &text)?;
    Ok(rows)
}

fn cmd_sweep(config: &Path, out: &Path) -> CliResult<()> {
    let exp = load_experiment(config)?;
    run_sweep(&exp, out)?;
    Ok(())
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Train {
            config,
            out,
            log_rollouts,
        } => cmd_train(&config, &out, log_rollouts),
        Command::Simulate {
            config,
            mode,
            steps,
            out,
        } => cmd_simulate(&config, &mode, steps, &out),
        Command::EvalPassk { log, ks, out } => cmd_eval_passk(&log, &ks, &out),
        Command::MetricsAds { log, out } => cmd_metrics_ads(&log, &out),
        Command::AdvantageTable {
            group_size,
            estimator,
            delta,
            r_floor,
            lambda,
            eps_std,
            out,
        } => cmd_advantage_table(group_size, estimator, delta, r_floor, lambda, eps_std, &out),
        Command::Sweep { config, out } => cmd_sweep(&config, &out),
    }
}

fn thread_pool() -> std::result::Result<rayon::ThreadPool, String> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("AGPOLAB_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("AGPOLAB_THREADS must be a positive integer, got '{v}'"))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| e.to_string())
}

/// Runs the tool on `args` (program name first) and returns the exit code.
pub fn run(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let pool = match thread_pool() {
        Ok(p) => p,
        Err(msg) => {
            eprintln!("agpolab: {msg}");
            return 1;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(Failure::Usage(Usage(msg))) => {
            eprintln!("agpolab: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("agpolab: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_with_ellipsis() {
        assert_eq!(
            parse_ks("1,2,4,...,256").unwrap(),
            vec![1, 2, 4, 8, 16, 32, 64, 128, 256]
        );
        assert_eq!(parse_ks("1,3,...,27").unwrap(), vec![1, 3, 9, 27]);
        assert_eq!(parse_ks("2,5,...,11").unwrap(), vec![2, 5, 8, 11]);
        assert_eq!(parse_ks("2").unwrap(), vec![2]);
        assert!(parse_ks("1,...,4").is_err());
        assert!(parse_ks("a").is_err());
    }

    #[test]
    fn config_parses() {
        let c: ExperimentConfig = serde_json::from_str(
            r#"{"seed": 3, "suite": {"family": "modsum", "modulus": 4, "vocab": 4, "len": 3, "count": 8},
                "train": {"estimator": {"variant": "grpo"}, "total_steps": 5, "batch_prompts": 8},
                "sweep": {"deltas": [1, 2], "betas": [0]}}"#,
        )
        .unwrap();
        assert_eq!(c.train.estimator.variant, EstimatorVariant::Grpo);
        assert_eq!(c.suite.unwrap().count, 8);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn usage_exit_codes() {
        let args = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(run(&args(&["agpolab", "frobnicate"])), 1);
        assert_eq!(
            run(&args(&[
                "agpolab",
                "train",
                "--config",
                "/nonexistent/x.json",
                "--out",
                "/tmp/x"
            ])),
            1
        );
    }
}
