//! Config-driven front end: single runs, sweeps, scheme comparisons and
//! the verification suite.
//!
//! ```text
//! gvpo-lab run|sweep|compare --config <path> [--seed N] [--output <dir>] [--parallel P]
//! gvpo-lab verify [SELECTOR] [--config <path>] [--seed N] [--output <dir>]
//! ```
//!
//! Exit status: 0 success, 1 failed verification or I/O error, 2 invalid
//! configuration, 3 training abort.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{LabError, Result};
use crate::numeric::mean;
use crate::policy::PolicyParams;
use crate::rng;
use crate::schemes::Scheme;
use crate::taskenv::{
    make_bandit, make_sequence_task_with_prompts, RewardGenSpec, SequenceRewardRule, TaskSpec,
};
use crate::trainer::{self, FinalMetrics, MetricRow, TrainConfig, TrainOutcome, CSV_HEADER};
use crate::verify::{self, CheckResult, VerifyConfig};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_VAR: &str = "GVPO_LAB_OUTPUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ABORTED: i32 = 3;

/// Task generators usable in place of an explicit task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    Bandit {
        num_prompts: usize,
        num_responses: usize,
        #[serde(default)]
        rewards: RewardGenSpec,
        #[serde(default)]
        seed: u64,
    },
    Sequence {
        #[serde(default = "one")]
        num_prompts: usize,
        vocab: usize,
        length: usize,
        rule: SequenceRewardRule,
        #[serde(default)]
        seed: u64,
    },
}

fn one() -> usize {
    1
}

impl GeneratorSpec {
    pub fn build(&self) -> Result<TaskSpec> {
        match self {
            GeneratorSpec::Bandit {
                num_prompts,
                num_responses,
                rewards,
                seed,
            } => make_bandit(*num_prompts, *num_responses, rewards, *seed),
            GeneratorSpec::Sequence {
                num_prompts,
                vocab,
                length,
                rule,
                seed,
            } => make_sequence_task_with_prompts(*num_prompts, *vocab, *length, rule, *seed),
        }
    }
}

/// Initial (and reference) policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ReferenceSpec {
    #[default]
    Uniform,
    /// Logits uniform in `[-scale, scale)`.
    Random {
        scale: f64,
        seed: u64,
    },
    Explicit {
        policy: PolicyParams,
    },
}

/// One swept parameter: a dotted path into the config and its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub path: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSpec {
    pub schemes: Vec<Scheme>,
    /// Seeds to repeat every scheme over; defaults to `train.seed`.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmitSpec {
    pub csv: bool,
    pub json: bool,
}

impl Default for EmitSpec {
    fn default() -> Self {
        Self {
            csv: true,
            json: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Option<TaskSpec>,
    pub generator: Option<GeneratorSpec>,
    pub reference: ReferenceSpec,
    pub train: TrainConfig,
    pub sweep: Vec<SweepAxis>,
    pub compare: Option<CompareSpec>,
    pub verify: VerifyConfig,
    pub output_dir: Option<PathBuf>,
    pub emit: EmitSpec,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.task, &self.generator) {
            (Some(_), Some(_)) => {
                return Err(LabError::config(
                    "task",
                    "give either task or generator, not both",
                ))
            }
            (None, None) => {
                return Err(LabError::config("task", "a task or generator is required"))
            }
            _ => {}
        }
        self.train.validate()?;
        let resolved = serde_json::to_value(self)?;
        for axis in &self.sweep {
            if axis.values.is_empty() {
                return Err(LabError::config(
                    format!("sweep.{}", axis.path),
                    "value list is empty",
                ));
            }
            if lookup(&resolved, &axis.path).is_none() {
                return Err(LabError::config(
                    format!("sweep.{}", axis.path),
                    "no such config path",
                ));
            }
        }
        Ok(())
    }

    pub fn build_task(&self) -> Result<TaskSpec> {
        match (&self.task, &self.generator) {
            (Some(t), _) => Ok(t.clone()),
            (None, Some(g)) => g.build(),
            (None, None) => Err(LabError::config("task", "a task or generator is required")),
        }
    }

    pub fn build_reference(&self, task: &TaskSpec) -> Result<PolicyParams> {
        let kind = self.train.policy_kind;
        match &self.reference {
            ReferenceSpec::Uniform => PolicyParams::init_uniform(task, kind),
            ReferenceSpec::Random { scale, seed } => {
                PolicyParams::random(task, kind, *scale, &mut rng::seeded(*seed))
            }
            ReferenceSpec::Explicit { policy } => {
                policy.check_task(task)?;
                Ok(policy.clone())
            }
        }
    }

    /// A copy with `path` set to `value`, re-validated.
    pub fn with_override(&self, path: &str, value: &Value) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        let slot = lookup_mut(&mut doc, path)
            .ok_or_else(|| LabError::config(path, "no such config path"))?;
        *slot = value.clone();
        let config: Self =
            serde_json::from_value(doc).map_err(|e| LabError::config(path, e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

fn lookup<'a>(doc: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.')
        .try_fold(doc, |v, key| v.as_object()?.get(key))
}

fn lookup_mut<'a>(doc: &'a mut Value, path: &str) -> Option<&'a mut Value> {
    path.split('.')
        .try_fold(doc, |v, key| v.as_object_mut()?.get_mut(key))
}

/// Resolves the output directory: the explicit flag, then the config's
/// `output_dir` (relative paths land under the output root), then
/// `<root>/<config file stem>`. The root is `$GVPO_LAB_OUTPUT` or `runs`.
pub fn resolve_output(
    flag: Option<&Path>,
    config: Option<&Path>,
    config_path: Option<&Path>,
) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    let root = std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    match config {
        Some(p) if p.is_absolute() => p.to_path_buf(),
        Some(p) => root.join(p),
        None => {
            let stem = config_path
                .and_then(|p| p.file_stem())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "experiment".into());
            root.join(stem)
        }
    }
}

/// Resolved config, final metrics and abort state of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub final_metrics: FinalMetrics,
    pub wall_clock_ms: u128,
    pub aborted: bool,
    pub abort_reason: Option<String>,
    pub abort_state: Option<PolicyParams>,
}

/// Trains once, streaming `metrics.csv` and writing `summary.json` into
/// `dir` as requested by `config.emit`.
pub fn execute_run(config: &ExperimentConfig, dir: &Path) -> Result<(TrainOutcome, RunSummary)> {
    let task = config.build_task()?;
    let init = config.build_reference(&task)?;
    fs::create_dir_all(dir)?;
    let mut writer = if config.emit.csv {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(BufWriter::new(File::create(dir.join("metrics.csv"))?));
        w.write_record(CSV_HEADER)?;
        Some(w)
    } else {
        None
    };
    let outcome = trainer::train_with_sink(&task, &init, &config.train, |row: &MetricRow| {
        if let Some(w) = writer.as_mut() {
            w.serialize(row)?;
        }
        Ok(())
    })?;
    if let Some(mut w) = writer {
        w.flush()?;
    }
    let s = &outcome.report.summary;
    let summary = RunSummary {
        config: config.clone(),
        final_metrics: s.final_metrics.clone(),
        wall_clock_ms: s.wall_clock_ms,
        aborted: s.aborted,
        abort_reason: s.abort_reason.clone(),
        abort_state: s.abort_state.clone(),
    };
    if config.emit.json {
        write_json(&dir.join("summary.json"), &summary)?;
    }
    Ok((outcome, summary))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn exit_for(err: &LabError) -> i32 {
    match err {
        LabError::InvalidConfig { .. }
        | LabError::Json(_)
        | LabError::SupportViolation { .. }
        | LabError::DimensionMismatch { .. }
        | LabError::OutOfRange { .. }
        | LabError::Format(_) => EXIT_CONFIG,
        _ => EXIT_FAILED,
    }
}

fn report_error(err: &LabError) -> i32 {
    eprintln!("error: {err}");
    exit_for(err)
}

fn load_with_seed(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        config.train.seed = seed;
        config.verify.seed = seed;
    }
    Ok(config)
}

fn print_metrics(label: &str, m: &FinalMetrics) {
    println!(
        "{label}steps {} mean_reward {:.6} kl_to_optimal {:.3e} kl_to_aux {:.3e} objective {:.6}",
        m.steps_completed, m.mean_reward, m.kl_to_optimal, m.kl_to_aux, m.objective
    );
}

pub fn cmd_run(args: &CommonArgs) -> i32 {
    let config = match load_with_seed(&args.config, args.seed) {
        Ok(c) => c,
        Err(e) => return report_error(&e),
    };
    let dir = resolve_output(
        args.output.as_deref(),
        config.output_dir.as_deref(),
        Some(&args.config),
    );
    match execute_run(&config, &dir) {
        Ok((_, summary)) => {
            print_metrics("", &summary.final_metrics);
            println!("wrote {}", dir.display());
            if let Some(reason) = summary.abort_reason {
                eprintln!("training aborted: {reason}");
                EXIT_ABORTED
            } else {
                EXIT_OK
            }
        }
        Err(e) => report_error(&e),
    }
}

/// Every cell of the Cartesian product of the sweep axes.
pub fn sweep_cells(config: &ExperimentConfig) -> Vec<Vec<(String, Value)>> {
    config.sweep.iter().fold(vec![Vec::new()], |cells, axis| {
        cells
            .iter()
            .flat_map(|cell| {
                axis.values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.push((axis.path.clone(), v.clone()));
                    c
                })
            })
            .collect()
    })
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Object(m) => m
            .iter()
            .map(|(k, v)| format!("{k}{}", value_label(v)))
            .collect::<Vec<_>>()
            .join("-"),
        Value::Array(a) => a.iter().map(value_label).collect::<Vec<_>>().join("-"),
        other => other.to_string(),
    }
}

/// Directory name of a sweep cell, e.g. `train.beta=0.5,train.k=4`.
pub fn cell_name(cell: &[(String, Value)]) -> String {
    cell.iter()
        .map(|(p, v)| format!("{p}={}", value_label(v)))
        .collect::<Vec<_>>()
        .join(",")
}

/// Outcome of one sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Vec<(String, Value)>,
    pub aborted: bool,
    pub abort_reason: Option<String>,
    pub final_metrics: Option<FinalMetrics>,
}

fn run_cell(base: &ExperimentConfig, cell: &[(String, Value)], root: &Path) -> CellResult {
    let result = cell
        .iter()
        .try_fold(base.clone(), |c, (p, v)| c.with_override(p, v))
        .and_then(|c| execute_run(&c, &root.join(cell_name(cell))));
    match result {
        Ok((_, s)) => CellResult {
            cell: cell.to_vec(),
            aborted: s.aborted,
            abort_reason: s.abort_reason,
            final_metrics: Some(s.final_metrics),
        },
        Err(e) => CellResult {
            cell: cell.to_vec(),
            aborted: true,
            abort_reason: Some(e.to_string()),
            final_metrics: None,
        },
    }
}

/// Runs every cell, sequentially or on `parallel` threads, and writes
/// `sweep.csv`.
pub fn execute_sweep(
    config: &ExperimentConfig,
    dir: &Path,
    parallel: usize,
) -> Result<Vec<CellResult>> {
    if config.sweep.is_empty() {
        return Err(LabError::config("sweep", "no sweep axes defined"));
    }
    fs::create_dir_all(dir)?;
    let cells = sweep_cells(config);
    let results: Vec<CellResult> = if parallel > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| LabError::config("parallel", e.to_string()))?;
        pool.install(|| cells.par_iter().map(|c| run_cell(config, c, dir)).collect())
    } else {
        cells.iter().map(|c| run_cell(config, c, dir)).collect()
    };
    let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
    let mut header: Vec<String> = config.sweep.iter().map(|a| a.path.clone()).collect();
    header.extend(
        [
            "aborted",
            "steps_completed",
            "loss",
            "grad_norm",
            "mean_reward",
            "kl_to_optimal",
            "kl_to_aux",
            "objective",
            "steps_to_kl_1e-3",
            "abort_reason",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;
    for r in &results {
        let mut rec: Vec<String> = r.cell.iter().map(|(_, v)| value_label(v)).collect();
        rec.push(r.aborted.to_string());
        match &r.final_metrics {
            Some(m) => rec.extend([
                m.steps_completed.to_string(),
                m.loss.to_string(),
                m.grad_norm.to_string(),
                m.mean_reward.to_string(),
                m.kl_to_optimal.to_string(),
                m.kl_to_aux.to_string(),
                m.objective.to_string(),
                m.steps_to_kl_1e_3.map_or("n/a".into(), |s| s.to_string()),
            ]),
            None => rec.extend(std::iter::repeat_n(String::new(), 8)),
        }
        rec.push(r.abort_reason.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(results)
}

pub fn cmd_sweep(args: &CommonArgs) -> i32 {
    let config = match load_with_seed(&args.config, args.seed) {
        Ok(c) => c,
        Err(e) => return report_error(&e),
    };
    let dir = resolve_output(
        args.output.as_deref(),
        config.output_dir.as_deref(),
        Some(&args.config),
    );
    match execute_sweep(&config, &dir, args.parallel) {
        Ok(results) => {
            for r in &results {
                match &r.final_metrics {
                    Some(m) if !r.aborted => print_metrics(&format!("{}: ", cell_name(&r.cell)), m),
                    _ => println!(
                        "{}: aborted ({})",
                        cell_name(&r.cell),
                        r.abort_reason.as_deref().unwrap_or("unknown")
                    ),
                }
            }
            println!("wrote {}", dir.join("sweep.csv").display());
            EXIT_OK
        }
        Err(e) => report_error(&e),
    }
}

/// Per-scheme aggregate over seeds; `*_se` are standard errors of the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub scheme: Scheme,
    pub seeds: usize,
    pub aborted_runs: usize,
    pub mean_reward: f64,
    pub mean_reward_se: f64,
    pub kl_to_optimal: f64,
    pub kl_to_optimal_se: f64,
    pub objective: f64,
    pub objective_se: f64,
    /// Mean over seeds that reached the threshold; `None` if none did.
    pub steps_to_kl_1e_3: Option<f64>,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, (var / xs.len() as f64).sqrt())
}

/// Trains every listed scheme on the same task, reference and seeds.
pub fn execute_compare(config: &ExperimentConfig, dir: &Path) -> Result<Vec<CompareRow>> {
    let spec = config
        .compare
        .as_ref()
        .ok_or_else(|| LabError::config("compare", "a compare section is required"))?;
    if spec.schemes.len() < 2 {
        return Err(LabError::config(
            "compare.schemes",
            format!(
                "comparison needs at least 2 schemes, got {}",
                spec.schemes.len()
            ),
        ));
    }
    let seeds = if spec.seeds.is_empty() {
        vec![config.train.seed]
    } else {
        spec.seeds.clone()
    };
    fs::create_dir_all(dir)?;
    let mut rows = Vec::new();
    for &scheme in &spec.schemes {
        let mut finals = Vec::new();
        let mut aborted = 0;
        for &seed in &seeds {
            let mut c = config.clone();
            c.train.scheme = scheme;
            c.train.seed = seed;
            let sub = dir.join(format!("scheme={scheme},seed={seed}"));
            let (_, s) = execute_run(&c, &sub)?;
            aborted += usize::from(s.aborted);
            finals.push(s.final_metrics);
        }
        let col = |f: fn(&FinalMetrics) -> f64| mean_se(&finals.iter().map(f).collect::<Vec<_>>());
        let (mean_reward, mean_reward_se) = col(|m| m.mean_reward);
        let (kl_to_optimal, kl_to_optimal_se) = col(|m| m.kl_to_optimal);
        let (objective, objective_se) = col(|m| m.objective);
        let reached: Vec<f64> = finals
            .iter()
            .filter_map(|m| m.steps_to_kl_1e_3.map(|s| s as f64))
            .collect();
        rows.push(CompareRow {
            scheme,
            seeds: seeds.len(),
            aborted_runs: aborted,
            mean_reward,
            mean_reward_se,
            kl_to_optimal,
            kl_to_optimal_se,
            objective,
            objective_se,
            steps_to_kl_1e_3: (!reached.is_empty()).then(|| mean(&reached)),
        });
    }
    let mut w = csv::Writer::from_path(dir.join("compare.csv"))?;
    w.write_record([
        "scheme",
        "seeds",
        "aborted_runs",
        "mean_reward",
        "mean_reward_se",
        "kl_to_optimal",
        "kl_to_optimal_se",
        "objective",
        "objective_se",
        "steps_to_kl_1e-3",
    ])?;
    for r in &rows {
        w.write_record([
            r.scheme.name().to_string(),
            r.seeds.to_string(),
            r.aborted_runs.to_string(),
            r.mean_reward.to_string(),
            r.mean_reward_se.to_string(),
            r.kl_to_optimal.to_string(),
            r.kl_to_optimal_se.to_string(),
            r.objective.to_string(),
            r.objective_se.to_string(),
            r.steps_to_kl_1e_3.map_or("n/a".into(), |s| s.to_string()),
        ])?;
    }
    w.flush()?;
    if config.emit.json {
        write_json(&dir.join("compare.json"), &rows)?;
    }
    Ok(rows)
}

pub fn cmd_compare(args: &CommonArgs) -> i32 {
    let config = match load_with_seed(&args.config, args.seed) {
        Ok(c) => c,
        Err(e) => return report_error(&e),
    };
    let dir = resolve_output(
        args.output.as_deref(),
        config.output_dir.as_deref(),
        Some(&args.config),
    );
    match execute_compare(&config, &dir) {
        Ok(mut rows) => {
            rows.sort_by(|a, b| b.objective.total_cmp(&a.objective));
            println!(
                "{:<4} {:<6} {:>12} {:>12} {:>12}",
                "rank", "scheme", "objective", "mean_reward", "kl_to_opt"
            );
            for (i, r) in rows.iter().enumerate() {
                println!(
                    "{:<4} {:<6} {:>12.6} {:>12.6} {:>12.3e}",
                    i + 1,
                    r.scheme.name(),
                    r.objective,
                    r.mean_reward,
                    r.kl_to_optimal
                );
            }
            println!("wrote {}", dir.join("compare.csv").display());
            if rows.iter().any(|r| r.aborted_runs > 0) {
                EXIT_ABORTED
            } else {
                EXIT_OK
            }
        }
        Err(e) => report_error(&e),
    }
}

/// Runs the selected checks; returns them with the exit status.
pub fn execute_verify(selector: &str, config: &VerifyConfig) -> Result<(Vec<CheckResult>, i32)> {
    let results = verify::run_selected(selector, config)?;
    let status = if results.iter().all(|r| r.passed) {
        EXIT_OK
    } else {
        EXIT_FAILED
    };
    Ok((results, status))
}

pub fn cmd_verify(args: &VerifyArgs) -> i32 {
    let mut config = match &args.config {
        Some(path) => match ExperimentConfig::load(path) {
            Ok(c) => c.verify,
            Err(e) => return report_error(&e),
        },
        None => VerifyConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if !verify::CHECK_NAMES.contains(&args.selector.as_str()) && args.selector != "all" {
        eprintln!(
            "error: unknown check `{}`\nusage: gvpo-lab verify [all|{}] [--config <path>] [--seed N] [--output <dir>]",
            args.selector,
            verify::CHECK_NAMES.join("|")
        );
        return EXIT_CONFIG;
    }
    match execute_verify(&args.selector, &config) {
        Ok((results, status)) => {
            print!("{}", verify::render_table(&results));
            let written = match &args.output {
                Some(dir) => fs::create_dir_all(dir)
                    .map_err(LabError::from)
                    .and_then(|_| write_json(&dir.join("verify.json"), &results))
                    .map(|_| println!("wrote {}", dir.join("verify.json").display())),
                None => serde_json::to_string_pretty(&results)
                    .map(|s| println!("{s}"))
                    .map_err(LabError::from),
            };
            match written {
                Ok(()) => status,
                Err(e) => report_error(&e),
            }
        }
        Err(e) => report_error(&e),
    }
}

#[derive(Debug, Parser)]
#[command(name = "gvpo-lab", version, about = "Tabular post-training laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train once and write metrics.csv and summary.json.
    Run(CommonArgs),
    /// Train every cell of the configured sweep and write sweep.csv.
    Sweep(CommonArgs),
    /// Run the verification checks.
    Verify(VerifyArgs),
    /// Train several schemes on one task and write compare.csv.
    Compare(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Sweep cells to run concurrently.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// all, zero_sum, cancellation, three_forms, theorem1, theorem2,
    /// stationary or ablation.
    #[arg(default_value = "all")]
    pub selector: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Parses arguments and dispatches; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Compare(a) => cmd_compare(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "generator": {"kind": "bandit", "num_prompts": 2, "num_responses": 4, "seed": 3},
        "train": {"steps": 20}
    }"#;

    #[test]
    fn minimal_config_resolves_defaults() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.train.learning_rate, 0.5);
        assert_eq!(c.train.scheme, Scheme::Gvpo);
        assert!(c.emit.csv && c.emit.json);
        assert_eq!(c.build_task().unwrap().num_responses(), 4);
    }

    #[test]
    fn invalid_beta_names_the_field() {
        let text = MINIMAL.replace(r#""steps": 20"#, r#""steps": 20, "beta": -1"#);
        let err = ExperimentConfig::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("beta"));
        assert_eq!(exit_for(&err), EXIT_CONFIG);
    }

    #[test]
    fn unknown_keys_and_missing_task_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"train": {}}"#).is_err());
        let text = MINIMAL.replace("\"train\"", "\"trian\"");
        assert!(ExperimentConfig::from_json(&text).is_err());
    }

    #[test]
    fn sweep_paths_are_checked() {
        let mut c = ExperimentConfig::from_json(MINIMAL).unwrap();
        c.sweep = vec![SweepAxis {
            path: "train.betta".into(),
            values: vec![1.0.into()],
        }];
        assert!(c.validate().is_err());
        c.sweep[0].path = "train.beta".into();
        assert!(c.validate().is_ok());
        c.sweep[0].values.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn cartesian_cells() {
        let mut c = ExperimentConfig::from_json(MINIMAL).unwrap();
        c.sweep = vec![
            SweepAxis {
                path: "train.scheme".into(),
                values: vec!["gvpo".into(), "grpo".into()],
            },
            SweepAxis {
                path: "train.k".into(),
                values: vec![2.into(), 4.into(), 8.into(), 16.into()],
            },
        ];
        let cells = sweep_cells(&c);
        assert_eq!(cells.len(), 8);
        assert_eq!(cell_name(&cells[1]), "train.scheme=gvpo,train.k=4");
        let o = c.with_override("train.k", &8.into()).unwrap();
        assert_eq!(o.train.k, 8);
    }

    #[test]
    fn mix_ratio_labels() {
        let v: Value = serde_json::json!({"historical": 2, "fresh": 3});
        assert_eq!(value_label(&v), "fresh3-historical2");
    }

    #[test]
    fn output_resolution() {
        let p = resolve_output(Some(Path::new("/tmp/x")), None, None);
        assert_eq!(p, PathBuf::from("/tmp/x"));
        let p = resolve_output(None, Some(Path::new("/abs")), None);
        assert_eq!(p, PathBuf::from("/abs"));
    }

    #[test]
    fn standard_errors() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_se(&[4.0]), (4.0, 0.0));
    }
}
