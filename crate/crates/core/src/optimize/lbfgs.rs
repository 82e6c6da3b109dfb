use std::collections::VecDeque;

use nalgebra::DVector;

use crate::error::{FgelError, Result};

#[derive(Clone, Debug)]
pub struct LbfgsConfig {
    pub memory: usize,
    /// Stop when ‖∇f‖∞ ≤ grad_tol.
    pub grad_tol: f64,
    pub max_iters: usize,
    pub armijo: f64,
    pub shrink: f64,
    pub max_halvings: usize,
    /// Optional stop on |f_k − f_{k+1}| ≤ value_tol·(1 + |f_k|).
    pub value_tol: Option<f64>,
    /// Keep every accepted iterate in the result.
    pub record_path: bool,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            grad_tol: 1e-8,
            max_iters: 500,
            armijo: 1e-4,
            shrink: 0.5,
            max_halvings: 60,
            value_tol: None,
            record_path: false,
        }
    }
}

impl LbfgsConfig {
    fn validate(&self) -> Result<()> {
        if self.memory == 0 {
            return Err(FgelError::InvalidArgument("L-BFGS memory must be at least 1".into()));
        }
        if !(self.grad_tol > 0.0) || self.value_tol.is_some_and(|t| !(t > 0.0)) {
            return Err(FgelError::InvalidArgument("L-BFGS tolerances must be positive".into()));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) || !(self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(FgelError::InvalidArgument("bad line-search constants".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    ValueTolerance,
    MaxIterations,
    /// No acceptable step along steepest descent; the iterate is the best found.
    Stalled,
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Objective value at x0 and after each iteration.
    pub history: Vec<f64>,
    /// Accepted iterates, when `record_path` is set.
    pub path: Vec<DVector<f64>>,
}

/// Minimizes `f`, which returns (value, gradient) or an error for points
/// outside its domain.
pub fn lbfgs_minimize<F>(f: F, x0: DVector<f64>, cfg: &LbfgsConfig) -> Result<LbfgsResult>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    lbfgs_minimize_feasible(f, |_| true, x0, cfg)
}

/// As [`lbfgs_minimize`], rejecting trial points for which `feasible` is
/// false or `f` errs or is non-finite.
pub fn lbfgs_minimize_feasible<F, C>(
    mut f: F,
    feasible: C,
    x0: DVector<f64>,
    cfg: &LbfgsConfig,
) -> Result<LbfgsResult>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
    C: Fn(&DVector<f64>) -> bool,
{
    cfg.validate()?;
    if !feasible(&x0) {
        return Err(FgelError::Infeasible("initial point rejected by feasibility check".into()));
    }
    let (mut fx, mut g) = f(&x0)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(FgelError::NonFinite("objective at initial point"));
    }
    if g.len() != x0.len() {
        return Err(FgelError::DimensionMismatch {
            context: "gradient",
            expected: x0.len(),
            actual: g.len(),
        });
    }
    let mut x = x0;
    let mut evaluations = 1;
    let mut history = vec![fx];
    let mut path = Vec::new();
    if cfg.record_path {
        path.push(x.clone());
    }
    let mut mem: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::with_capacity(cfg.memory);

    let mut iter = 0;
    let termination = loop {
        if g.amax() <= cfg.grad_tol {
            break Termination::GradientTolerance;
        }
        if iter >= cfg.max_iters {
            break Termination::MaxIterations;
        }

        let mut accepted = None;
        for attempt in 0..2 {
            if attempt == 1 {
                if mem.is_empty() {
                    break;
                }
                mem.clear();
            }
            let mut d = two_loop(&g, &mem);
            let mut gd = g.dot(&d);
            if !(gd < 0.0) {
                mem.clear();
                d = -&g;
                gd = g.dot(&d);
            }
            let t0 = if mem.is_empty() { (1.0 / g.amax()).min(1.0) } else { 1.0 };
            let (res, evals) = line_search(&mut f, &feasible, &x, fx, &d, gd, t0, cfg);
            evaluations += evals;
            if let Some(r) = res {
                accepted = Some(r);
                break;
            }
        }

        let Some((xn, fn_, gn)) = accepted else {
            if iter == 0 {
                return Err(FgelError::LineSearch {
                    iteration: 0,
                    halvings: cfg.max_halvings,
                });
            }
            break Termination::Stalled;
        };

        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if mem.len() == cfg.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        } else {
            mem.clear();
        }
        let prev = fx;
        x = xn;
        fx = fn_;
        g = gn;
        iter += 1;
        history.push(fx);
        if cfg.record_path {
            path.push(x.clone());
        }
        if let Some(tol) = cfg.value_tol {
            if (prev - fx).abs() <= tol * (1.0 + prev.abs()) {
                break Termination::ValueTolerance;
            }
        }
    };

    Ok(LbfgsResult {
        x,
        value: fx,
        gradient: g,
        iterations: iter,
        evaluations,
        termination,
        history,
        path,
    })
}

fn two_loop(g: &DVector<f64>, mem: &VecDeque<(DVector<f64>, DVector<f64>, f64)>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y, rho) in mem.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    if let Some((s, y, _)) = mem.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y, rho), a) in mem.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    -q
}

type Trial = (DVector<f64>, f64, DVector<f64>);

#[allow(clippy::too_many_arguments)]
fn line_search<F, C>(
    f: &mut F,
    feasible: &C,
    x: &DVector<f64>,
    fx: f64,
    d: &DVector<f64>,
    gd: f64,
    t0: f64,
    cfg: &LbfgsConfig,
) -> (Option<Trial>, usize)
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
    C: Fn(&DVector<f64>) -> bool,
{
    let mut evals = 0;
    let mut try_point = |t: f64, evals: &mut usize| -> Option<Trial> {
        let xt = x + d * t;
        if !feasible(&xt) {
            return None;
        }
        *evals += 1;
        match f(&xt) {
            Ok((v, g)) if v.is_finite() && g.iter().all(|c| c.is_finite()) => Some((xt, v, g)),
            _ => None,
        }
    };
    let mut t = t0;
    for k in 0..=cfg.max_halvings {
        if let Some(trial) = try_point(t, &mut evals) {
            if k == 0 {
                // Quadratic interpolation through f(x), f'(x; d) and f(x + t d).
                let curv = trial.1 - fx - gd * t;
                if curv > 0.0 {
                    let ts = -gd * t * t / (2.0 * curv);
                    if ts.is_finite() && ts > 0.0 && ts <= 100.0 * t && (ts - t).abs() > 1e-12 * t {
                        if let Some(alt) = try_point(ts, &mut evals) {
                            if alt.1 < trial.1 && alt.1 < fx && alt.1 <= fx + cfg.armijo * ts * gd {
                                return (Some(alt), evals);
                            }
                        }
                    }
                }
            }
            // Strict decrease: a step that leaves f unchanged in floating point is no progress.
            if trial.1 < fx && trial.1 <= fx + cfg.armijo * t * gd {
                return (Some(trial), evals);
            }
        }
        t *= cfg.shrink;
    }
    (None, evals)
}
