//! Seeded replication of the heteroskedastic regression and IV tasks across
//! estimators and sample sizes.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    cue_estimate, kernel_vmm_estimate, least_squares, lsq_estimate, mmr_estimate, owgmm_estimate,
    FiniteMomentProblem, PolynomialBasis, Weighting,
};
use crate::data::{
    Dataset, HeteroskedasticDgp, HingeModel, IvDgp, LinearModel, Model, MomentFunction, NoiseProfile,
    ResidualMoment, RngStream, F0, HETEROSKEDASTIC_THETA,
};
use crate::divergence::GelDivergence;
use crate::error::{FgelError, Result};
use crate::fgel_kernel::{estimate, KernelFgelOptions, KernelFgelProblem, KernelFgelResult};
use crate::fgel_neural::{neural_estimate, Mlp, MlpModel, NeuralFgelOptions, NeuralFgelProblem};
use crate::kernel::GramSet;
use crate::model_selection::{tune, Candidate, Scorer, TuningGrid, TuningReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Lsq,
    KernelFgel,
    NeuralFgel,
    Cue,
    Owgmm,
    Mmr,
    KernelVmm,
}

impl Estimator {
    pub const ALL: [Estimator; 7] = [
        Estimator::Lsq,
        Estimator::KernelFgel,
        Estimator::NeuralFgel,
        Estimator::Cue,
        Estimator::Owgmm,
        Estimator::Mmr,
        Estimator::KernelVmm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Lsq => "lsq",
            Estimator::KernelFgel => "kernel_fgel",
            Estimator::NeuralFgel => "neural_fgel",
            Estimator::Cue => "cue",
            Estimator::Owgmm => "owgmm",
            Estimator::Mmr => "mmr",
            Estimator::KernelVmm => "kernel_vmm",
        }
    }

    pub fn tuned(self) -> bool {
        matches!(self, Estimator::KernelFgel | Estimator::NeuralFgel | Estimator::KernelVmm)
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = FgelError;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| FgelError::UnknownName {
                kind: "estimator",
                name: s.to_string(),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    /// Linear for the heteroskedastic task and for f₀ = linear, hinge otherwise.
    #[default]
    Auto,
    Linear,
    Hinge,
    Mlp,
}

impl FromStr for ModelChoice {
    type Err = FgelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(ModelChoice::Auto),
            "linear" => Ok(ModelChoice::Linear),
            "hinge" => Ok(ModelChoice::Hinge),
            "mlp" => Ok(ModelChoice::Mlp),
            other => Err(FgelError::UnknownName {
                kind: "model",
                name: other.to_string(),
            }),
        }
    }
}

/// Regression function classes for residual moments y − f_θ(x).
#[derive(Clone, Debug)]
pub enum AnyModel {
    Linear(LinearModel),
    Hinge(HingeModel),
    Mlp(MlpModel),
}

impl Model for AnyModel {
    fn n_params(&self) -> usize {
        match self {
            AnyModel::Linear(m) => m.n_params(),
            AnyModel::Hinge(m) => m.n_params(),
            AnyModel::Mlp(m) => m.n_params(),
        }
    }

    fn predict(&self, x: &[f64], theta: &[f64]) -> f64 {
        match self {
            AnyModel::Linear(m) => m.predict(x, theta),
            AnyModel::Hinge(m) => m.predict(x, theta),
            AnyModel::Mlp(m) => m.predict(x, theta),
        }
    }

    fn predict_with_gradient(&self, x: &[f64], theta: &[f64], grad: &mut [f64]) -> f64 {
        match self {
            AnyModel::Linear(m) => m.predict_with_gradient(x, theta, grad),
            AnyModel::Hinge(m) => m.predict_with_gradient(x, theta, grad),
            AnyModel::Mlp(m) => m.predict_with_gradient(x, theta, grad),
        }
    }

    fn features(&self, x: &[f64]) -> Option<Vec<f64>> {
        match self {
            AnyModel::Linear(m) => m.features(x),
            AnyModel::Hinge(m) => m.features(x),
            AnyModel::Mlp(m) => m.features(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Task {
    Heteroskedastic { noise: NoiseProfile },
    Iv { f0: F0 },
}

impl Task {
    pub fn f0_label(&self) -> &'static str {
        match self {
            Task::Heteroskedastic { .. } => "none",
            Task::Iv { f0 } => f0.name(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Settings {
    /// Fixed regularization; tuned over `grid` when absent.
    pub lambda: Option<f64>,
    /// Divergence used with a fixed λ.
    pub divergence: GelDivergence,
    pub grid: TuningGrid,
    pub neural_divergence: GelDivergence,
    pub scorer: Scorer,
    pub model: ModelChoice,
    pub net_widths: Vec<usize>,
    pub neural: NeuralFgelOptions,
    pub kernel: KernelFgelOptions,
    pub noiseless: bool,
    pub test_size: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            lambda: None,
            divergence: GelDivergence::Chi2,
            grid: TuningGrid::default(),
            neural_divergence: GelDivergence::Chi2,
            scorer: Scorer::Mmr,
            model: ModelChoice::Auto,
            net_widths: vec![20, 3],
            neural: NeuralFgelOptions::default(),
            kernel: KernelFgelOptions::default(),
            noiseless: false,
            test_size: 20_000,
        }
    }
}

impl Settings {
    pub fn build_model(&self, task: &Task) -> Result<AnyModel> {
        let choice = match (self.model, task) {
            (ModelChoice::Auto, Task::Heteroskedastic { .. }) => return Ok(AnyModel::Linear(LinearModel::new(1, false))),
            (ModelChoice::Auto, Task::Iv { f0: F0::Linear }) => ModelChoice::Linear,
            (ModelChoice::Auto, Task::Iv { .. }) => ModelChoice::Hinge,
            (c, _) => c,
        };
        Ok(match choice {
            ModelChoice::Linear => AnyModel::Linear(LinearModel::new(1, matches!(task, Task::Iv { .. }))),
            ModelChoice::Hinge => AnyModel::Hinge(HingeModel::unit_grid()),
            ModelChoice::Mlp => AnyModel::Mlp(MlpModel::new(1, &self.net_widths)?),
            ModelChoice::Auto => unreachable!(),
        })
    }
}

/// One replicate's training, validation and (IV only) test samples.
pub struct Replicate {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Option<Dataset>,
    /// Seed material for network initialization.
    pub init_stream: RngStream,
}

impl Replicate {
    pub fn draw(task: &Task, n: usize, settings: &Settings, seed: u64, stream: u64) -> Result<Self> {
        let mut rng = RngStream::new(seed, 2 * stream);
        let init_stream = RngStream::new(seed, 2 * stream + 1);
        match task {
            Task::Heteroskedastic { noise } => {
                let dgp = HeteroskedasticDgp {
                    noise: *noise,
                    noise_scale: if settings.noiseless { 0.0 } else { 1.0 },
                };
                let (train, _) = dgp.sample(n, &mut rng)?;
                let (validation, _) = dgp.sample(n, &mut rng)?;
                Ok(Self {
                    train,
                    validation,
                    test: None,
                    init_stream,
                })
            }
            Task::Iv { f0 } => {
                let dgp = if settings.noiseless {
                    IvDgp::noiseless(*f0)
                } else {
                    IvDgp::new(*f0)
                };
                let train = dgp.sample(n, &mut rng)?;
                let validation = dgp.sample(n, &mut rng)?;
                let test = dgp.sample(settings.test_size, &mut rng)?;
                Ok(Self {
                    train,
                    validation,
                    test: Some(test),
                    init_stream,
                })
            }
        }
    }
}

/// Fitted parameters with the diagnostics of the chosen fit.
#[derive(Clone, Debug)]
pub struct Fit {
    pub theta: Vec<f64>,
    pub lambda: Option<f64>,
    pub divergence: Option<GelDivergence>,
    pub kernel: Option<KernelFgelResult>,
    pub tuning: Option<TuningReport>,
}

impl Fit {
    fn plain(theta: Vec<f64>) -> Self {
        Self {
            theta,
            lambda: None,
            divergence: None,
            kernel: None,
            tuning: None,
        }
    }
}

fn initial_theta(model: &AnyModel, moments: &dyn MomentFunction, train: &Dataset, rng: &mut RngStream) -> Result<Vec<f64>> {
    match model {
        AnyModel::Linear(LinearModel { intercept: false, .. }) => lsq_estimate(train),
        AnyModel::Mlp(m) => {
            let start = m.net.init(rng);
            least_squares(train, moments, &start)
        }
        _ => least_squares(train, moments, &vec![0.0; model.n_params()]),
    }
}

fn fgel_problem<'a>(
    train: &'a Dataset,
    moments: &'a dyn MomentFunction,
    grams: &'a GramSet,
    divergence: GelDivergence,
    lambda: f64,
    theta0: &[f64],
    settings: &Settings,
) -> Result<KernelFgelProblem<'a>> {
    Ok(KernelFgelProblem::new(train, moments, grams, divergence, lambda, theta0.to_vec())?
        .with_options(settings.kernel.clone()))
}

fn fixed_or_tuned(
    estimator: Estimator,
    rep: &Replicate,
    moments: &dyn MomentFunction,
    settings: &Settings,
    fit: impl Fn(&Candidate) -> Result<Vec<f64>> + Sync,
) -> Result<(Vec<f64>, Candidate, Option<TuningReport>)> {
    let divergence = match estimator {
        Estimator::NeuralFgel => settings.neural_divergence,
        Estimator::KernelVmm => GelDivergence::VmmEquiv,
        _ => settings.divergence,
    };
    if let Some(lambda) = settings.lambda {
        let c = Candidate {
            index: 0,
            lambda,
            divergence,
        };
        return Ok((fit(&c)?, c, None));
    }
    let grid = match estimator {
        Estimator::KernelFgel => settings.grid.clone(),
        _ => TuningGrid::new(settings.grid.lambdas.clone(), vec![divergence])?,
    };
    let report = tune(&rep.validation, moments, &grid, settings.scorer, fit)?;
    let best = report.best();
    Ok((report.best_theta().to_vec(), best.candidate, Some(report)))
}

/// Fits one estimator on a replicate's training data, tuning on its validation data.
pub fn fit_estimator(estimator: Estimator, task: &Task, rep: &Replicate, settings: &Settings) -> Result<Fit> {
    let model = settings.build_model(task)?;
    let moments = ResidualMoment::new(model.clone());
    let train = &rep.train;
    match estimator {
        Estimator::Lsq => Ok(Fit::plain(initial_theta(&model, &moments, train, &mut rep.init_stream.clone())?)),
        Estimator::Cue | Estimator::Owgmm => {
            let theta0 = initial_theta(&model, &moments, train, &mut rep.init_stream.clone())?;
            let basis = PolynomialBasis::for_params(moments.n_params());
            let problem = FiniteMomentProblem::new(train, &moments, basis, Weighting::InverseCovariance)?;
            let theta = if estimator == Estimator::Cue {
                cue_estimate(&problem, &theta0)?
            } else {
                owgmm_estimate(&problem, &theta0)?
            };
            Ok(Fit::plain(theta))
        }
        Estimator::Mmr => {
            let theta0 = initial_theta(&model, &moments, train, &mut rep.init_stream.clone())?;
            let grams = GramSet::median_rbf(train, 1)?;
            Ok(Fit::plain(mmr_estimate(train, &moments, &grams, &theta0)?))
        }
        Estimator::KernelVmm => {
            let theta0 = initial_theta(&model, &moments, train, &mut rep.init_stream.clone())?;
            let grams = GramSet::median_rbf(train, 1)?;
            let (theta, c, tuning) = fixed_or_tuned(estimator, rep, &moments, settings, |c| {
                kernel_vmm_estimate(train, &moments, &grams, c.lambda, &theta0)
            })?;
            Ok(Fit {
                theta,
                lambda: Some(c.lambda),
                divergence: None,
                kernel: None,
                tuning,
            })
        }
        Estimator::KernelFgel => {
            let theta0 = initial_theta(&model, &moments, train, &mut rep.init_stream.clone())?;
            let grams = GramSet::median_rbf(train, 1)?;
            let (_, c, tuning) = fixed_or_tuned(estimator, rep, &moments, settings, |c| {
                estimate(&fgel_problem(train, &moments, &grams, c.divergence, c.lambda, &theta0, settings)?)
                    .map(|r| r.theta_hat)
            })?;
            // Refit the winner for its diagnostics; fits are deterministic.
            let result = estimate(&fgel_problem(train, &moments, &grams, c.divergence, c.lambda, &theta0, settings)?)?;
            Ok(Fit {
                theta: result.theta_hat.clone(),
                lambda: Some(c.lambda),
                divergence: Some(c.divergence),
                kernel: Some(result),
                tuning,
            })
        }
        Estimator::NeuralFgel => {
            let (theta, c, tuning) = fixed_or_tuned(estimator, rep, &moments, settings, |c| {
                let mut rng = rep.init_stream.clone();
                let theta0 = match &model {
                    AnyModel::Mlp(m) => m.net.init(&mut rng),
                    _ => initial_theta(&model, &moments, train, &mut rng)?,
                };
                let instrument = Mlp::new(train.dz(), &settings.net_widths, moments.dim())?;
                let problem = NeuralFgelProblem::new(train, &moments, instrument, c.divergence, c.lambda, theta0, &mut rng)?
                    .with_options(settings.neural);
                Ok(neural_estimate(&problem)?.theta_hat)
            })?;
            Ok(Fit {
                theta,
                lambda: Some(c.lambda),
                divergence: Some(c.divergence),
                kernel: None,
                tuning,
            })
        }
    }
}

/// Parameter MSE for the heteroskedastic task, test prediction MSE for IV.
pub fn evaluate_fit(task: &Task, rep: &Replicate, settings: &Settings, theta: &[f64]) -> Result<f64> {
    match task {
        Task::Heteroskedastic { .. } => Ok((theta[0] - HETEROSKEDASTIC_THETA).powi(2)),
        Task::Iv { f0 } => {
            let model = settings.build_model(task)?;
            let test = rep.test.as_ref().expect("IV replicate has a test set");
            let s: f64 = (0..test.n())
                .map(|i| {
                    let x = &test.x_row(i)[..1];
                    (model.predict(x, theta) - f0.eval(x[0])).powi(2)
                })
                .sum();
            Ok(s / test.n() as f64)
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentPlan {
    pub tasks: Vec<Task>,
    pub estimators: Vec<Estimator>,
    pub sizes: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    pub settings: Settings,
    pub record_timings: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRow {
    pub run: usize,
    pub estimator: String,
    pub n: usize,
    pub f0: String,
    /// NaN when the fit failed.
    pub mse: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub estimator: String,
    pub n: usize,
    pub f0: String,
    pub runs: usize,
    pub failures: usize,
    pub mean: f64,
    pub stderr: f64,
}

/// Per-row failures are reported through `errors` and leave NaN in the row.
pub struct ExperimentOutput {
    pub rows: Vec<RunRow>,
    pub errors: Vec<String>,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() || self.estimators.is_empty() || self.sizes.is_empty() || self.replicates == 0 {
            return Err(FgelError::InvalidArgument("experiment needs tasks, estimators, sizes and replicates".into()));
        }
        if self.sizes.iter().any(|&n| n < 2) {
            return Err(FgelError::InvalidArgument("sample sizes must be at least 2".into()));
        }
        Ok(())
    }

    /// Runs every (task, replicate, size) cell in parallel; rows come back in
    /// task, replicate, size, estimator order.
    pub fn run(&self) -> Result<ExperimentOutput> {
        self.validate()?;
        let mut cells = Vec::new();
        for (t, task) in self.tasks.iter().enumerate() {
            for run in 0..self.replicates {
                for (s, &n) in self.sizes.iter().enumerate() {
                    cells.push((t, task, run, s, n));
                }
            }
        }
        let results: Vec<(Vec<RunRow>, Vec<String>)> = cells
            .par_iter()
            .map(|&(t, task, run, s, n)| {
                let stream = ((t * self.replicates + run) * self.sizes.len() + s) as u64;
                self.run_cell(task, run, n, stream)
            })
            .collect();
        let mut rows = Vec::new();
        let mut errors = Vec::new();
        for (r, e) in results {
            rows.extend(r);
            errors.extend(e);
        }
        Ok(ExperimentOutput { rows, errors })
    }

    fn run_cell(&self, task: &Task, run: usize, n: usize, stream: u64) -> (Vec<RunRow>, Vec<String>) {
        let mut rows = Vec::new();
        let mut errors = Vec::new();
        let rep = match Replicate::draw(task, n, &self.settings, self.seed, stream) {
            Ok(r) => r,
            Err(e) => {
                for est in &self.estimators {
                    errors.push(format!("run {run}, n {n}, {est}: {e}"));
                    rows.push(self.row(run, *est, n, task, f64::NAN, 0.0));
                }
                return (rows, errors);
            }
        };
        for &est in &self.estimators {
            let start = Instant::now();
            let outcome = fit_estimator(est, task, &rep, &self.settings)
                .and_then(|fit| evaluate_fit(task, &rep, &self.settings, &fit.theta));
            let seconds = if self.record_timings {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            };
            let mse = match outcome {
                Ok(v) => v,
                Err(e) => {
                    errors.push(format!("run {run}, n {n}, {}, {est}: {e}", task.f0_label()));
                    f64::NAN
                }
            };
            rows.push(self.row(run, est, n, task, mse, seconds));
        }
        (rows, errors)
    }

    fn row(&self, run: usize, est: Estimator, n: usize, task: &Task, mse: f64, seconds: f64) -> RunRow {
        RunRow {
            run,
            estimator: est.name().to_string(),
            n,
            f0: task.f0_label().to_string(),
            mse,
            seconds,
        }
    }
}

/// Mean and standard error (sample sd / √R) per (estimator, n, f0) over
/// successful runs, in order of first appearance.
pub fn summarize(rows: &[RunRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, usize, String)> = Vec::new();
    for r in rows {
        let k = (r.estimator.clone(), r.n, r.f0.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(estimator, n, f0)| {
            let group: Vec<&RunRow> = rows.iter().filter(|r| r.estimator == estimator && r.n == n && r.f0 == f0).collect();
            let vals: Vec<f64> = group.iter().map(|r| r.mse).filter(|v| v.is_finite()).collect();
            let (mean, stderr) = mean_stderr(&vals);
            SummaryRow {
                estimator,
                n,
                f0,
                runs: vals.len(),
                failures: group.len() - vals.len(),
                mean,
                stderr,
            }
        })
        .collect()
}

pub fn mean_stderr(vals: &[f64]) -> (f64, f64) {
    let k = vals.len();
    if k == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = vals.iter().sum::<f64>() / k as f64;
    if k == 1 {
        return (mean, f64::NAN);
    }
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    (mean, (var / k as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(tasks: Vec<Task>, estimators: Vec<Estimator>, sizes: Vec<usize>, replicates: usize) -> ExperimentPlan {
        ExperimentPlan {
            tasks,
            estimators,
            sizes,
            replicates,
            seed: 7,
            settings: Settings {
                lambda: Some(0.1),
                test_size: 2000,
                ..Settings::default()
            },
            record_timings: false,
        }
    }

    #[test]
    fn names_roundtrip() {
        for e in Estimator::ALL {
            assert_eq!(e.name().parse::<Estimator>().unwrap(), e);
        }
        assert!("gmm".parse::<Estimator>().is_err());
        assert!(Estimator::KernelFgel.tuned() && !Estimator::Lsq.tuned());
    }

    #[test]
    fn bookkeeping_row_count() {
        let p = plan(
            vec![Task::Heteroskedastic {
                noise: NoiseProfile::FiveSquare,
            }],
            vec![Estimator::Lsq, Estimator::KernelFgel],
            vec![64, 128],
            30,
        );
        let out = p.run().unwrap();
        assert_eq!(out.rows.len(), 120);
        assert!(out.errors.is_empty(), "{:?}", out.errors);
        assert_eq!(out.rows[0].run, 0);
        assert_eq!(out.rows[0].estimator, "lsq");
        assert_eq!(out.rows[1].estimator, "kernel_fgel");
        assert_eq!(out.rows[2].n, 128);
        assert!(out.rows.iter().all(|r| r.mse.is_finite() && r.seconds == 0.0));
        assert_eq!(p.run().unwrap().rows, out.rows);
    }

    #[test]
    fn noiseless_linear_iv_all_estimators() {
        let mut p = plan(vec![Task::Iv { f0: F0::Linear }], Estimator::ALL.to_vec(), vec![500], 1);
        p.settings.noiseless = true;
        p.settings.lambda = None;
        let out = p.run().unwrap();
        assert!(out.errors.is_empty(), "{:?}", out.errors);
        for r in &out.rows {
            assert!(r.mse < 1e-3, "{} mse {}", r.estimator, r.mse);
        }
    }

    #[test]
    fn summary_matches_naive_recomputation() {
        let rows: Vec<RunRow> = [1.0, 2.0, 4.0, f64::NAN]
            .iter()
            .enumerate()
            .map(|(run, &mse)| RunRow {
                run,
                estimator: "lsq".into(),
                n: 10,
                f0: "none".into(),
                mse,
                seconds: 0.0,
            })
            .collect();
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].runs, s[0].failures), (3, 1));
        let mean = 7.0 / 3.0;
        let sd = (((1.0f64 - mean).powi(2) + (2.0 - mean).powi(2) + (4.0 - mean).powi(2)) / 2.0).sqrt();
        assert!((s[0].mean - mean).abs() < 1e-15);
        assert!((s[0].stderr - sd / 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn auto_model_choice() {
        let s = Settings::default();
        let h = Task::Heteroskedastic {
            noise: NoiseProfile::FiveSquare,
        };
        assert_eq!(s.build_model(&h).unwrap().n_params(), 1);
        assert_eq!(s.build_model(&Task::Iv { f0: F0::Linear }).unwrap().n_params(), 2);
        assert_eq!(s.build_model(&Task::Iv { f0: F0::Abs }).unwrap().n_params(), 5);
    }
}
