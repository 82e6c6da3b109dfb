//! Command-line runner: config parsing, estimator dispatch, seeded
//! replication and CSV/JSON result files.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration error
//! (nothing written), 3 estimation failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NoiseProfile, RngStream, F0};
use crate::divergence::GelDivergence;
use crate::error::FgelError;
use crate::experiment::{
    evaluate_fit, fit_estimator, summarize, Estimator, ExperimentPlan, Fit, ModelChoice, Replicate, Settings, Task,
};
use crate::model_selection::{Scorer, TuningGrid, TuningReport};
use crate::verify::{conjugate_lines, duality_lines, gradient_lines, CheckLine};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_ESTIMATION: u8 = 3;

const DEFAULT_OUTPUT: &str = "fgel_output";
const HETEROSKEDASTIC_SIZES: [usize; 6] = [64, 128, 256, 512, 1024, 2048];
const IV_SIZE: usize = 2000;
const ESTIMATE_SIZE: usize = 500;

#[derive(Parser, Debug)]
#[command(name = "fgel", version, about = "Functional generalized empirical likelihood estimation")]
pub struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit one estimator and write estimate.json (plus trace.csv for iterative FGEL fits).
    Estimate,
    /// Replicate a synthetic experiment and write runs.csv and summary.csv.
    Experiment { name: ExperimentName },
    /// Score a hyperparameter grid and write tuning.csv and best.json.
    Tune,
    /// Run a verification suite.
    Verify { suite: Suite },
    /// Same as `verify duality`.
    VerifyDuality,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExperimentName {
    Heteroskedastic,
    Iv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Duality,
    Gradients,
    Conjugates,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

/// Flat JSON configuration. Unknown keys are rejected.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// `heteroskedastic` or `iv`.
    pub experiment: Option<String>,
    pub estimator: Option<OneOrMany<String>>,
    pub divergence: Option<OneOrMany<String>>,
    pub lambda: Option<f64>,
    pub lambda_grid: Option<Vec<f64>>,
    pub n: Option<OneOrMany<usize>>,
    /// Base seed.
    pub seed: Option<u64>,
    /// Number of replicates; same as `replicates`.
    pub seeds: Option<usize>,
    pub replicates: Option<usize>,
    pub f0: Option<OneOrMany<String>>,
    /// `five_square` (default) or `one_plus_square`.
    pub noise: Option<String>,
    pub model: Option<String>,
    pub net_widths: Option<Vec<usize>>,
    pub output_dir: Option<PathBuf>,
    pub noiseless: Option<bool>,
    pub test_size: Option<usize>,
    pub scorer: Option<String>,
    pub record_timings: Option<bool>,
    pub neural_rounds: Option<usize>,
    /// Training CSV for `estimate`, in place of a simulated sample.
    pub data: Option<PathBuf>,
    pub validation_data: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Estimation(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Estimation(_) => EXIT_ESTIMATION,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Estimation(m) => write!(f, "estimation failed: {m}"),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn estimation_err(e: impl std::fmt::Display) -> CliError {
    CliError::Estimation(e.to_string())
}

type CliResult<T> = std::result::Result<T, CliError>;

pub fn load_config(path: &Path) -> CliResult<Config> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn parse_all<T: std::str::FromStr<Err = FgelError>>(names: &[String]) -> CliResult<Vec<T>> {
    names.iter().map(|s| s.parse().map_err(config_err)).collect()
}

fn single<T: Clone>(field: &str, v: &Option<OneOrMany<T>>) -> CliResult<Option<T>> {
    match v {
        None => Ok(None),
        Some(v) => {
            let all = v.to_vec();
            if all.len() == 1 {
                Ok(Some(all[0].clone()))
            } else {
                Err(config_err(format!("`{field}` takes a single value for this command")))
            }
        }
    }
}

fn experiment_name(s: &str) -> CliResult<ExperimentName> {
    match s {
        "heteroskedastic" => Ok(ExperimentName::Heteroskedastic),
        "iv" => Ok(ExperimentName::Iv),
        other => Err(config_err(format!("unknown experiment `{other}`"))),
    }
}

fn noise_profile(cfg: &Config) -> CliResult<NoiseProfile> {
    match cfg.noise.as_deref() {
        None | Some("five_square") => Ok(NoiseProfile::FiveSquare),
        Some("one_plus_square") => Ok(NoiseProfile::OnePlusSquare),
        Some(other) => Err(config_err(format!("unknown noise profile `{other}`"))),
    }
}

/// Tasks for an experiment; f₀ defaults to every regression function.
fn tasks(name: ExperimentName, cfg: &Config) -> CliResult<Vec<Task>> {
    match name {
        ExperimentName::Heteroskedastic => {
            if cfg.f0.is_some() {
                return Err(config_err("`f0` applies to the iv experiment only"));
            }
            Ok(vec![Task::Heteroskedastic { noise: noise_profile(cfg)? }])
        }
        ExperimentName::Iv => {
            if cfg.noise.is_some() {
                return Err(config_err("`noise` applies to the heteroskedastic experiment only"));
            }
            let f0s: Vec<F0> = match &cfg.f0 {
                Some(v) => parse_all(&v.to_vec())?,
                None => F0::ALL.to_vec(),
            };
            if f0s.is_empty() {
                return Err(config_err("`f0` is empty"));
            }
            Ok(f0s.into_iter().map(|f0| Task::Iv { f0 }).collect())
        }
    }
}

fn settings(cfg: &Config) -> CliResult<Settings> {
    let mut s = Settings::default();
    let divergences: Option<Vec<GelDivergence>> = match &cfg.divergence {
        Some(v) => Some(parse_all(&v.to_vec())?),
        None => None,
    };
    if divergences.as_ref().is_some_and(|d| d.is_empty()) {
        return Err(config_err("`divergence` is empty"));
    }
    match (cfg.lambda, &cfg.lambda_grid) {
        (Some(_), Some(_)) => return Err(config_err("give either `lambda` or `lambda_grid`, not both")),
        (Some(lambda), None) => {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(config_err(format!("lambda must be nonnegative, got {lambda}")));
            }
            let d = match divergences.as_deref() {
                None => GelDivergence::Chi2,
                Some([d]) => *d,
                Some(_) => return Err(config_err("a fixed `lambda` takes a single `divergence`")),
            };
            s.lambda = Some(lambda);
            s.divergence = d;
            s.neural_divergence = d;
        }
        (None, grid) => {
            let lambdas = grid.clone().unwrap_or_else(|| s.grid.lambdas.clone());
            let divs = divergences.clone().unwrap_or_else(|| s.grid.divergences.clone());
            s.grid = TuningGrid::new(lambdas, divs.clone()).map_err(config_err)?;
            if divergences.is_some() {
                s.neural_divergence = divs[0];
            }
        }
    }
    if let Some(m) = &cfg.model {
        s.model = m.parse::<ModelChoice>().map_err(config_err)?;
    }
    if let Some(w) = &cfg.net_widths {
        if w.is_empty() || w.contains(&0) {
            return Err(config_err("`net_widths` must be a nonempty list of positive widths"));
        }
        s.net_widths = w.clone();
    }
    if let Some(sc) = &cfg.scorer {
        s.scorer = sc.parse::<Scorer>().map_err(config_err)?;
    }
    s.noiseless = cfg.noiseless.unwrap_or(false);
    if let Some(t) = cfg.test_size {
        if t == 0 {
            return Err(config_err("`test_size` must be positive"));
        }
        s.test_size = t;
    }
    if let Some(r) = cfg.neural_rounds {
        s.neural.max_rounds = r;
    }
    Ok(s)
}

fn replicates(cfg: &Config, default: usize) -> CliResult<usize> {
    let r = match (cfg.seeds, cfg.replicates) {
        (Some(_), Some(_)) => return Err(config_err("give either `seeds` or `replicates`, not both")),
        (Some(r), None) | (None, Some(r)) => r,
        (None, None) => default,
    };
    if r == 0 {
        return Err(config_err("at least one replicate is needed"));
    }
    Ok(r)
}

fn sizes(cfg: &Config, default: &[usize]) -> CliResult<Vec<usize>> {
    let n = cfg.n.as_ref().map(|v| v.to_vec()).unwrap_or_else(|| default.to_vec());
    if n.is_empty() || n.iter().any(|&k| k < 2) {
        return Err(config_err("sample sizes must be at least 2"));
    }
    Ok(n)
}

fn output_dir(cli_output: Option<&Path>, cfg: &Config) -> PathBuf {
    cli_output
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| estimation_err(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| estimation_err(format!("{}: {e}", path.display())))
}

fn csv_bytes<S: Serialize>(rows: &[S]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(estimation_err)?;
    }
    w.into_inner().map_err(estimation_err)
}

fn json_bytes<S: Serialize>(value: &S) -> CliResult<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value).map_err(estimation_err)?;
    out.push(b'\n');
    Ok(out)
}

/// Where the data for `estimate` and `tune` comes from.
enum Source {
    Simulated { task: Task, n: usize },
    Files { train: PathBuf, validation: Option<PathBuf> },
}

struct SingleRun {
    estimator: Estimator,
    source: Source,
    seed: u64,
    settings: Settings,
    record_timings: bool,
    output: PathBuf,
}

fn read_dataset(path: &Path) -> CliResult<Dataset> {
    let file = fs::File::open(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    Dataset::read_csv(file).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn single_run(cfg: &Config, cli_output: Option<&Path>, default_estimator: Option<Estimator>) -> CliResult<SingleRun> {
    let estimator = match (single("estimator", &cfg.estimator)?, default_estimator) {
        (Some(name), _) => name.parse::<Estimator>().map_err(config_err)?,
        (None, Some(e)) => e,
        (None, None) => return Err(config_err("`estimator` is required")),
    };
    let settings = settings(cfg)?;
    if cfg.seeds.is_some() || cfg.replicates.is_some() {
        return Err(config_err("`seeds`/`replicates` apply to the experiment command only"));
    }
    let source = match &cfg.data {
        Some(train) => {
            if cfg.experiment.is_some() || cfg.n.is_some() || cfg.f0.is_some() || cfg.noise.is_some() {
                return Err(config_err("`data` replaces `experiment`, `n`, `f0` and `noise`"));
            }
            Source::Files {
                train: train.clone(),
                validation: cfg.validation_data.clone(),
            }
        }
        None => {
            if cfg.validation_data.is_some() {
                return Err(config_err("`validation_data` needs `data`"));
            }
            let name = experiment_name(cfg.experiment.as_deref().ok_or_else(|| config_err("`experiment` or `data` is required"))?)?;
            let mut all = tasks(name, cfg)?;
            if all.len() != 1 {
                if cfg.f0.is_some() {
                    return Err(config_err("`f0` takes a single value for this command"));
                }
                all = vec![Task::Iv { f0: F0::Abs }];
            }
            let n = single("n", &cfg.n)?.unwrap_or(match name {
                ExperimentName::Heteroskedastic => ESTIMATE_SIZE,
                ExperimentName::Iv => IV_SIZE,
            });
            if n < 2 {
                return Err(config_err("sample size must be at least 2"));
            }
            Source::Simulated { task: all[0], n }
        }
    };
    Ok(SingleRun {
        estimator,
        source,
        seed: cfg.seed.unwrap_or(0),
        settings,
        record_timings: cfg.record_timings.unwrap_or(false),
        output: output_dir(cli_output, cfg),
    })
}

impl SingleRun {
    /// Draws or loads the replicate; the task is `None` for data files.
    fn replicate(&self) -> CliResult<(Option<Task>, Replicate)> {
        match &self.source {
            Source::Simulated { task, n } => {
                let rep = Replicate::draw(task, *n, &self.settings, self.seed, 0).map_err(estimation_err)?;
                Ok((Some(*task), rep))
            }
            Source::Files { train, validation } => {
                let train = read_dataset(train)?;
                let validation = match validation {
                    Some(v) => read_dataset(v)?,
                    None => train.clone(),
                };
                if validation.dx() != train.dx() || validation.dz() != train.dz() {
                    return Err(config_err("training and validation files have different columns"));
                }
                Ok((
                    None,
                    Replicate {
                        train,
                        validation,
                        test: None,
                        init_stream: RngStream::new(self.seed, 1),
                    },
                ))
            }
        }
    }

    /// Model classes for data files follow the IV linear convention (intercept included).
    fn model_task(task: Option<Task>) -> Task {
        task.unwrap_or(Task::Iv { f0: F0::Linear })
    }

    fn fit(&self, task: &Task, rep: &Replicate) -> CliResult<Fit> {
        fit_estimator(self.estimator, task, rep, &self.settings).map_err(estimation_err)
    }
}

#[derive(Serialize)]
struct TuningRow {
    candidate: usize,
    lambda: f64,
    divergence: String,
    val_loss: f64,
    train_seconds: f64,
}

fn tuning_rows(report: &TuningReport, record_timings: bool) -> Vec<TuningRow> {
    report
        .rows
        .iter()
        .map(|r| TuningRow {
            candidate: r.candidate.index,
            lambda: r.candidate.lambda,
            divergence: r.candidate.divergence.name().to_string(),
            val_loss: r.val_loss,
            train_seconds: if record_timings { r.train_seconds } else { 0.0 },
        })
        .collect()
}

#[derive(Serialize)]
struct Diagnostics {
    profile_value: f64,
    termination: String,
    outer_iterations: usize,
    implied_weight_sum: f64,
    min_implied_weight: f64,
}

#[derive(Serialize)]
struct EstimateRecord {
    estimator: String,
    experiment: Option<String>,
    f0: Option<String>,
    n: usize,
    seed: u64,
    theta_hat: Vec<f64>,
    lambda: Option<f64>,
    divergence: Option<String>,
    /// Parameter MSE (heteroskedastic) or test MSE (iv); absent for data files.
    mse: Option<f64>,
    diagnostics: Option<Diagnostics>,
    tuning: Option<Vec<TuningRow>>,
}

fn task_names(task: Option<&Task>) -> (Option<String>, Option<String>) {
    match task {
        None => (None, None),
        Some(Task::Heteroskedastic { .. }) => (Some("heteroskedastic".into()), None),
        Some(Task::Iv { f0 }) => (Some("iv".into()), Some(f0.name().into())),
    }
}

fn trace_csv(p: usize, trace: &[(Vec<f64>, f64)]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["iter".to_string()];
    header.extend((0..p).map(|j| format!("theta{j}")));
    header.push("R_lambda".into());
    w.write_record(&header).map_err(estimation_err)?;
    for (k, (theta, value)) in trace.iter().enumerate() {
        let mut rec = vec![k.to_string()];
        rec.extend(theta.iter().map(|t| t.to_string()));
        rec.push(value.to_string());
        w.write_record(&rec).map_err(estimation_err)?;
    }
    w.into_inner().map_err(estimation_err)
}

pub fn cmd_estimate(cfg: &Config, cli_output: Option<&Path>) -> CliResult<()> {
    let run = single_run(cfg, cli_output, None)?;
    let (task, rep) = run.replicate()?;
    let model_task = SingleRun::model_task(task);
    let fit = run.fit(&model_task, &rep)?;
    let mse = match task {
        Some(t) => Some(evaluate_fit(&t, &rep, &run.settings, &fit.theta).map_err(estimation_err)?),
        None => None,
    };
    let diagnostics = fit.kernel.as_ref().map(|k| Diagnostics {
        profile_value: k.profile_value,
        termination: format!("{:?}", k.termination),
        outer_iterations: k.trace.len().saturating_sub(1),
        implied_weight_sum: k.implied_p.iter().sum(),
        min_implied_weight: k.implied_p.iter().copied().fold(f64::INFINITY, f64::min),
    });
    let (experiment, f0) = task_names(task.as_ref());
    let record = EstimateRecord {
        estimator: run.estimator.name().into(),
        experiment,
        f0,
        n: rep.train.n(),
        seed: run.seed,
        theta_hat: fit.theta.clone(),
        lambda: fit.lambda,
        divergence: fit.divergence.map(|d| d.name().to_string()),
        mse,
        diagnostics,
        tuning: fit.tuning.as_ref().map(|t| tuning_rows(t, run.record_timings)),
    };
    create_dir(&run.output)?;
    write_file(&run.output.join("estimate.json"), &json_bytes(&record)?)?;
    if let Some(k) = &fit.kernel {
        write_file(&run.output.join("trace.csv"), &trace_csv(fit.theta.len(), &k.trace)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct BestRecord {
    estimator: String,
    candidate: usize,
    lambda: f64,
    divergence: String,
    val_loss: f64,
    theta_hat: Vec<f64>,
}

pub fn cmd_tune(cfg: &Config, cli_output: Option<&Path>) -> CliResult<()> {
    let run = single_run(cfg, cli_output, Some(Estimator::KernelFgel))?;
    if !run.estimator.tuned() {
        return Err(config_err(format!("estimator `{}` has no hyperparameters", run.estimator)));
    }
    if run.settings.lambda.is_some() {
        return Err(config_err("`tune` scores a grid; use `lambda_grid` instead of `lambda`"));
    }
    let (task, rep) = run.replicate()?;
    let fit = run.fit(&SingleRun::model_task(task), &rep)?;
    let report = fit.tuning.as_ref().ok_or_else(|| estimation_err("no tuning report"))?;
    let best = report.best();
    let record = BestRecord {
        estimator: run.estimator.name().into(),
        candidate: best.candidate.index,
        lambda: best.candidate.lambda,
        divergence: best.candidate.divergence.name().into(),
        val_loss: best.val_loss,
        theta_hat: report.best_theta().to_vec(),
    };
    create_dir(&run.output)?;
    write_file(&run.output.join("tuning.csv"), &csv_bytes(&tuning_rows(report, run.record_timings))?)?;
    write_file(&run.output.join("best.json"), &json_bytes(&record)?)?;
    for r in report.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("candidate {}: {}", r.candidate.index, r.error.as_deref().unwrap_or_default());
    }
    Ok(())
}

pub fn experiment_plan(name: ExperimentName, cfg: &Config) -> CliResult<ExperimentPlan> {
    if let Some(e) = &cfg.experiment {
        if experiment_name(e)? != name {
            return Err(config_err(format!("config names experiment `{e}`")));
        }
    }
    if cfg.data.is_some() || cfg.validation_data.is_some() {
        return Err(config_err("experiments simulate their data; remove `data`"));
    }
    let estimators: Vec<Estimator> = match &cfg.estimator {
        Some(v) => parse_all(&v.to_vec())?,
        None => vec![Estimator::Lsq, Estimator::KernelFgel],
    };
    if estimators.is_empty() {
        return Err(config_err("`estimator` is empty"));
    }
    let (default_sizes, default_reps): (Vec<usize>, usize) = match name {
        ExperimentName::Heteroskedastic => (HETEROSKEDASTIC_SIZES.to_vec(), 70),
        ExperimentName::Iv => (vec![IV_SIZE], 50),
    };
    let plan = ExperimentPlan {
        tasks: tasks(name, cfg)?,
        estimators,
        sizes: sizes(cfg, &default_sizes)?,
        replicates: replicates(cfg, default_reps)?,
        seed: cfg.seed.unwrap_or(0),
        settings: settings(cfg)?,
        record_timings: cfg.record_timings.unwrap_or(false),
    };
    plan.validate().map_err(config_err)?;
    Ok(plan)
}

pub fn cmd_experiment(name: ExperimentName, cfg: &Config, cli_output: Option<&Path>) -> CliResult<()> {
    let plan = experiment_plan(name, cfg)?;
    let output = output_dir(cli_output, cfg);
    let result = plan.run().map_err(estimation_err)?;
    for e in &result.errors {
        eprintln!("{e}");
    }
    create_dir(&output)?;
    write_file(&output.join("runs.csv"), &csv_bytes(&result.rows)?)?;
    write_file(&output.join("summary.csv"), &csv_bytes(&summarize(&result.rows))?)?;
    Ok(())
}

/// Prints one line per check; true iff all pass.
pub fn cmd_verify(suite: Suite, out: &mut impl Write) -> std::result::Result<bool, String> {
    let lines: Vec<CheckLine> = match suite {
        Suite::Duality => duality_lines(10),
        Suite::Conjugates => conjugate_lines(),
        Suite::Gradients => gradient_lines(20),
    }
    .map_err(|e| e.to_string())?;
    for l in &lines {
        writeln!(out, "{}", l.render()).map_err(|e| e.to_string())?;
    }
    let passed = lines.iter().filter(|l| l.passed).count();
    writeln!(out, "{passed}/{} checks passed", lines.len()).map_err(|e| e.to_string())?;
    Ok(passed == lines.len())
}

fn with_config(cli: &Cli) -> CliResult<Config> {
    let path = cli.config.as_deref().ok_or_else(|| config_err("--config is required"))?;
    load_config(path)
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let out = cli.output.as_deref();
    match &cli.command {
        Command::Estimate => cmd_estimate(&with_config(cli)?, out),
        Command::Tune => cmd_tune(&with_config(cli)?, out),
        Command::Experiment { name } => cmd_experiment(*name, &with_config(cli)?, out),
        Command::Verify { .. } | Command::VerifyDuality => unreachable!(),
    }
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("configuration error: --jobs must be positive");
            return ExitCode::from(EXIT_CONFIG);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("configuration error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let suite = match cli.command {
        Command::Verify { suite } => Some(suite),
        Command::VerifyDuality => Some(Suite::Duality),
        _ => None,
    };
    if let Some(suite) = suite {
        return match cmd_verify(suite, &mut std::io::stdout()) {
            Ok(true) => ExitCode::from(EXIT_OK),
            Ok(false) => ExitCode::from(EXIT_VERIFY),
            Err(e) => {
                eprintln!("verification error: {e}");
                ExitCode::from(EXIT_VERIFY)
            }
        };
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
