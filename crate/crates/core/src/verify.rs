//! Verification suites shared by the `verify` subcommand and the test
//! targets: primal-dual gaps, conjugate tables and finite-difference checks
//! of the analytic gradients.

use rand::Rng;

use crate::data::{Dataset, HingeModel, IvDgp, MomentFunction, ResidualMoment, RngStream, F0};
use crate::divergence::GelDivergence;
use crate::error::Result;
use crate::fgel_kernel::{inner_solve, profile_gradient, KernelFgelProblem};
use crate::fgel_neural::{neural_objective, Mlp, MlpModel, NeuralFgelProblem};
use crate::kernel::GramSet;
use crate::oracle::{conjugate_suite, duality_suite};

pub const DUALITY_GAP_TOL: f64 = 1e-4;
pub const WEIGHT_TOL: f64 = 1e-3;
pub const CONJUGATE_TOL: f64 = 1e-4;
pub const GRADIENT_TOL: f64 = 1e-4;

/// One named pass/fail line of a suite.
#[derive(Clone, Debug)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckLine {
    pub fn render(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Clone, Debug)]
pub struct GradientCheck {
    pub name: String,
    pub probes: usize,
    /// Largest over probes of max_j |fd_j − g_j| / max_j |g_j|.
    pub max_rel_error: f64,
}

fn rel_error(fd: &[f64], g: &[f64]) -> f64 {
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    fd.iter().zip(g).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
}

fn central_difference(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        xp[j] = x[j] + h;
        let fp = f(&xp)?;
        xp[j] = x[j] - h;
        let fm = f(&xp)?;
        xp[j] = x[j];
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Envelope gradient of the kernel profile against central differences of
/// the inner optimum, on a hinge model over an IV sample.
pub fn danskin_checks(probes: usize) -> Result<Vec<GradientCheck>> {
    let data = IvDgp::new(F0::Abs).sample(40, &mut RngStream::new(7, 0))?;
    let moments = ResidualMoment::new(HingeModel::unit_grid());
    let grams = GramSet::median_rbf(&data, 1)?;
    GelDivergence::ALL
        .iter()
        .map(|&d| {
            let p = moments.n_params();
            let problem = KernelFgelProblem::new(&data, &moments, &grams, d, 0.1, vec![0.0; p])?;
            let mut rng = RngStream::new(11, d as u64);
            let mut worst: f64 = 0.0;
            for _ in 0..probes {
                let theta: Vec<f64> = (0..p).map(|_| rng.random_range(-0.5..0.5)).collect();
                let (_, g) = profile_gradient(&problem, &theta)?;
                let fd = central_difference(|t| Ok(inner_solve(&problem, t)?.value), &theta, 1e-5)?;
                worst = worst.max(rel_error(&fd, &g));
            }
            Ok(GradientCheck {
                name: format!("kernel profile gradient ({d})"),
                probes,
                max_rel_error: worst,
            })
        })
        .collect()
}

/// θ- and ω-gradients of the neural game objective against central
/// differences, spread over the four divergences.
pub fn neural_checks(probes: usize) -> Result<Vec<GradientCheck>> {
    let data: Dataset = IvDgp::new(F0::Step).sample(30, &mut RngStream::new(8, 0))?;
    let moments = ResidualMoment::new(MlpModel::new(1, &[4, 3])?);
    let mut worst_theta: f64 = 0.0;
    let mut worst_omega: f64 = 0.0;
    for k in 0..probes {
        let d = GelDivergence::ALL[k % GelDivergence::ALL.len()];
        let mut rng = RngStream::new(12, k as u64);
        let theta0 = moments.model.net.init(&mut rng);
        let instrument = Mlp::new(1, &[4, 3], 1)?;
        let mut problem = NeuralFgelProblem::new(&data, &moments, instrument, d, 0.3, theta0, &mut rng)?;
        problem.omega0.iter_mut().for_each(|w| *w *= 0.3);
        let (theta, omega) = (problem.theta0.clone(), problem.omega0.clone());
        let (_, gt, go) = neural_objective(&problem, &theta, &omega)?;
        let fdt = central_difference(|t| Ok(neural_objective(&problem, t, &omega)?.0), &theta, 1e-6)?;
        let fdo = central_difference(|w| Ok(neural_objective(&problem, &theta, w)?.0), &omega, 1e-6)?;
        worst_theta = worst_theta.max(rel_error(&fdt, &gt));
        worst_omega = worst_omega.max(rel_error(&fdo, &go));
    }
    Ok(vec![
        GradientCheck {
            name: "neural model gradient".into(),
            probes,
            max_rel_error: worst_theta,
        },
        GradientCheck {
            name: "neural instrument gradient".into(),
            probes,
            max_rel_error: worst_omega,
        },
    ])
}

pub fn duality_lines(count: usize) -> Result<Vec<CheckLine>> {
    Ok(duality_suite(count)?
        .into_iter()
        .map(|c| CheckLine {
            name: format!("duality seed {} n {}", c.seed, c.n),
            passed: c.gap <= DUALITY_GAP_TOL && c.weight_deviation <= WEIGHT_TOL,
            detail: format!(
                "primal {:.9} dual {:.9} gap {:.3e} weight deviation {:.3e}",
                c.primal, c.dual, c.gap, c.weight_deviation
            ),
        })
        .collect())
}

pub fn conjugate_lines() -> Result<Vec<CheckLine>> {
    let mut lines: Vec<CheckLine> = conjugate_suite()?
        .into_iter()
        .map(|c| CheckLine {
            name: format!("conjugate {}", c.divergence),
            passed: c.max_error <= CONJUGATE_TOL,
            detail: format!("{} points, max error {:.3e}", c.points, c.max_error),
        })
        .collect();
    for d in [GelDivergence::Chi2, GelDivergence::El, GelDivergence::Kl] {
        let (p1, p2) = (d.phi1(0.0), d.phi2(0.0));
        lines.push(CheckLine {
            name: format!("derivatives at zero {d}"),
            passed: p1 == -1.0 && p2 == -1.0,
            detail: format!("phi1(0) = {p1}, phi2(0) = {p2}"),
        });
    }
    Ok(lines)
}

pub fn gradient_lines(probes: usize) -> Result<Vec<CheckLine>> {
    let mut checks = danskin_checks(probes)?;
    checks.extend(neural_checks(probes)?);
    Ok(checks
        .into_iter()
        .map(|c| CheckLine {
            passed: c.max_rel_error <= GRADIENT_TOL,
            detail: format!("{} probes, max relative error {:.3e}", c.probes, c.max_rel_error),
            name: c.name,
        })
        .collect())
}
