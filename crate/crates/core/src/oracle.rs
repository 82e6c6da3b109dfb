//! Brute-force small-instance solvers: the χ² primal profile problem, the
//! dual with Lagrange parameter μ and norm penalty, and numeric Legendre
//! transforms of the divergence generators.
//!
//! Instruments are restricted to the span of kernel sections at the sample,
//! which is exact for the evaluation functionals in the constraint. Weights
//! satisfy Σp_i = 1 and the constraint reads ‖Σ p_i Ψ_i‖ ≤ λ, i.e. the
//! averaged form with weights q_i = n·p_i of mean one.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::data::{Dataset, MeanMoment, MomentFunction, MomentTable, RngStream};
use crate::divergence::{conjugate_value, GelDivergence};
use crate::error::{FgelError, Result};
use crate::kernel::{median_heuristic, GramSet};
use crate::optimize::{lbfgs_minimize_feasible, LbfgsConfig};

const NORM_SMOOTHING: f64 = 1e-12;

/// Gram metric of the constraint: M = Σ_r D_r K_r D_r.
fn constraint_metric(table: &MomentTable, grams: &GramSet) -> DMatrix<f64> {
    let n = table.n();
    let mut m = DMatrix::zeros(n, n);
    for (r, k) in grams.mats().iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] += table.psi(i, r) * k[(i, j)] * table.psi(j, r);
            }
        }
    }
    m
}

fn check_small(data: &Dataset, grams: &GramSet, lambda: f64) -> Result<()> {
    if data.n() > 10 {
        return Err(FgelError::InvalidArgument("oracle instances are limited to 10 samples".into()));
    }
    if grams.n() != data.n() {
        return Err(FgelError::DimensionMismatch {
            context: "Gram size",
            expected: data.n(),
            actual: grams.n(),
        });
    }
    if !(lambda >= 0.0) {
        return Err(FgelError::InvalidArgument("lambda must be nonnegative".into()));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PrimalSolution {
    pub value: f64,
    pub p: Vec<f64>,
    /// Multiplier of the norm constraint (0 when slack).
    pub nu: f64,
}

/// min (1/n)Σ ½(np_i − 1)² s.t. Σp_i = 1, pᵀMp ≤ λ².
///
/// Stationarity gives p ∝ (nI + νM)⁻¹1 for a multiplier ν ≥ 0, and pᵀMp is
/// non-increasing in ν, so ν is found by bisection on log ν.
pub fn primal_profile_chi2(
    data: &Dataset,
    moments: &dyn MomentFunction,
    theta: &[f64],
    lambda: f64,
    grams: &GramSet,
) -> Result<PrimalSolution> {
    check_small(data, grams, lambda)?;
    let table = MomentTable::evaluate(data, moments, theta, false)?;
    let n = table.n();
    let nf = n as f64;
    let metric = constraint_metric(&table, grams);
    let ones = DVector::from_element(n, 1.0);
    let weights = |nu: f64| -> Option<DVector<f64>> {
        let a = (DMatrix::identity(n, n) * nf + &metric * nu).lu().solve(&ones)?;
        let s = a.sum();
        (s.abs() > 0.0).then(|| a / s)
    };
    let excess = |p: &DVector<f64>| p.dot(&(&metric * p)) - lambda * lambda;
    let value = |p: &DVector<f64>| p.iter().map(|&x| 0.5 * (nf * x - 1.0).powi(2)).sum::<f64>() / nf;

    let uniform = weights(0.0).ok_or(FgelError::Singular("primal system"))?;
    if excess(&uniform) <= 0.0 {
        return Ok(PrimalSolution {
            value: value(&uniform),
            p: uniform.iter().copied().collect(),
            nu: 0.0,
        });
    }
    let (mut lo, mut hi) = (-30.0f64, 14.0f64);
    let top = weights(10f64.powf(hi)).ok_or(FgelError::Singular("primal system"))?;
    if excess(&top) > 0.0 {
        return Err(FgelError::Infeasible(format!(
            "no weights satisfy the norm constraint at lambda = {lambda}"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let p = weights(10f64.powf(mid)).ok_or(FgelError::Singular("primal system"))?;
        if excess(&p) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    let nu = 10f64.powf(hi);
    let p = weights(nu).ok_or(FgelError::Singular("primal system"))?;
    Ok(PrimalSolution {
        value: value(&p),
        p: p.iter().copied().collect(),
        nu,
    })
}

#[derive(Clone, Debug)]
pub struct DualSolution {
    pub value: f64,
    pub mu: f64,
    /// Ψ_i(ĥ) at the dual solution.
    pub v: Vec<f64>,
    pub h_norm: f64,
}

/// sup_{h, μ} μ − (1/n)Σ f*(Ψ_i(h) + μ) − λ‖h‖, with f* the Legendre
/// transform of the normalized generator (the closed-form conjugate minus its
/// documented offset) and ‖h‖ smoothed as √(‖h‖² + ε) − √ε, ε = 1e-12.
pub fn dual_profile(
    data: &Dataset,
    moments: &dyn MomentFunction,
    theta: &[f64],
    lambda: f64,
    grams: &GramSet,
    divergence: GelDivergence,
) -> Result<DualSolution> {
    check_small(data, grams, lambda)?;
    let table = MomentTable::evaluate(data, moments, theta, false)?;
    let n = table.n();
    let m = table.m();
    // Whitening by symmetric eigendecomposition: K_r = B_r B_rᵀ.
    let bases: Vec<DMatrix<f64>> = grams
        .mats()
        .iter()
        .map(|k| {
            let eig = k.clone().symmetric_eigen();
            let top = eig.eigenvalues.max().max(0.0);
            let keep: Vec<usize> = (0..n).filter(|&c| eig.eigenvalues[c] > 1e-12 * top).collect();
            DMatrix::from_fn(n, keep.len(), |i, c| {
                eig.eigenvectors[(i, keep[c])] * eig.eigenvalues[keep[c]].sqrt()
            })
        })
        .collect();
    let mut offsets = vec![0];
    for b in &bases {
        offsets.push(offsets.last().unwrap() + b.ncols());
    }
    let dim = offsets[m];
    let offset = divergence.conjugate_offset();
    let psi: Vec<DVector<f64>> = (0..m).map(|r| DVector::from_vec(table.component(r))).collect();

    let v_of = |x: &DVector<f64>| -> DVector<f64> {
        let mut v = DVector::zeros(n);
        for r in 0..m {
            let u = &bases[r] * x.rows(offsets[r], offsets[r + 1] - offsets[r]);
            v += u.component_mul(&psi[r]);
        }
        v
    };
    let objective = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let mu = x[dim];
        let v = v_of(x);
        let beta = x.rows(0, dim);
        let norm = (beta.norm_squared() + NORM_SMOOTHING).sqrt();
        let mut fsum = 0.0;
        let mut w = DVector::zeros(n);
        for i in 0..n {
            let a = v[i] + mu;
            fsum += conjugate_value(divergence, a)? - offset;
            w[i] = divergence.implied_weight(a) / n as f64;
        }
        let value = mu - fsum / n as f64 - lambda * (norm - NORM_SMOOTHING.sqrt());
        let mut grad = DVector::zeros(dim + 1);
        for r in 0..m {
            let g = bases[r].tr_mul(&w.component_mul(&psi[r]));
            grad.rows_mut(offsets[r], g.len()).copy_from(&(-g));
        }
        for c in 0..dim {
            grad[c] -= lambda * x[c] / norm;
        }
        grad[dim] = 1.0 - w.sum();
        Ok((-value, -grad))
    };
    let feasible = |x: &DVector<f64>| match divergence.domain_upper() {
        None => true,
        Some(u) => {
            let mu = x[dim];
            v_of(x).iter().all(|&v| v + mu < u)
        }
    };
    let cfg = LbfgsConfig {
        grad_tol: 1e-10,
        max_iters: 5000,
        ..LbfgsConfig::default()
    };
    let res = lbfgs_minimize_feasible(objective, feasible, DVector::zeros(dim + 1), &cfg)?;
    let v = v_of(&res.x);
    Ok(DualSolution {
        value: -res.value,
        mu: res.x[dim],
        v: v.iter().copied().collect(),
        h_norm: res.x.rows(0, dim).norm(),
    })
}

/// Weights p_i = (f*)′(Ψ_i(ĥ) + μ̂)/n recovered from a dual solution.
pub fn dual_weights(sol: &DualSolution, divergence: GelDivergence) -> Vec<f64> {
    let n = sol.v.len() as f64;
    sol.v.iter().map(|&v| divergence.implied_weight(v + sol.mu) / n).collect()
}

/// Largest elementwise gap between the χ² primal weights and those recovered
/// from the dual solution.
pub fn implied_weights_roundtrip(instance: &DualityInstance) -> Result<f64> {
    let primal = instance.primal()?;
    let dual = instance.dual(GelDivergence::Chi2)?;
    let pd = dual_weights(&dual, GelDivergence::Chi2);
    Ok(primal.p.iter().zip(&pd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// A seeded random χ² duality instance with a two-dimensional mean moment.
pub struct DualityInstance {
    pub data: Dataset,
    pub grams: GramSet,
    pub moments: MeanMoment,
    pub theta: Vec<f64>,
    pub lambda: f64,
}

impl DualityInstance {
    /// λ is set to a fraction of the constraint norm at uniform weights so
    /// that the constraint binds, while staying above the smallest feasible
    /// norm.
    pub fn random(seed: u64, n: usize) -> Result<Self> {
        if !(2..=10).contains(&n) {
            return Err(FgelError::InvalidArgument("duality instances need 2..=10 samples".into()));
        }
        let mut rng = RngStream::new(seed, 0);
        let mut x = Vec::with_capacity(2 * n);
        let mut z = Vec::with_capacity(n);
        for _ in 0..n {
            let zi: f64 = rng.random_range(-2.0..2.0);
            x.push(zi + rng.random_range(-1.0..1.0));
            x.push(0.5 * zi * zi + rng.random_range(-1.0..1.0));
            z.push(zi);
        }
        let data = Dataset::from_rows(n, 2, x, 1, z)?;
        let gamma = median_heuristic(&data.z_matrix())?;
        let grams = GramSet::rbf(&data.z_matrix(), 2, gamma)?;
        let moments = MeanMoment { dims: 2 };
        let theta = vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
        let table = MomentTable::evaluate(&data, &moments, &theta, false)?;
        let metric = constraint_metric(&table, &grams);
        let u = DVector::from_element(n, 1.0 / n as f64);
        let at_uniform = u.dot(&(&metric * &u)).sqrt();
        let floor = metric
            .clone()
            .cholesky()
            .map(|c| (1.0 / c.solve(&DVector::from_element(n, 1.0)).sum()).sqrt())
            .unwrap_or(0.0);
        let frac: f64 = rng.random_range(0.3..0.8);
        let lambda = floor + frac * (at_uniform - floor);
        Ok(Self {
            data,
            grams,
            moments,
            theta,
            lambda,
        })
    }

    pub fn primal(&self) -> Result<PrimalSolution> {
        primal_profile_chi2(&self.data, &self.moments, &self.theta, self.lambda, &self.grams)
    }

    pub fn dual(&self, divergence: GelDivergence) -> Result<DualSolution> {
        dual_profile(&self.data, &self.moments, &self.theta, self.lambda, &self.grams, divergence)
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self {
            data: self.data.clone(),
            grams: GramSet::from_matrices(self.grams.mats().to_vec()).expect("valid Grams"),
            moments: self.moments,
            theta: self.theta.clone(),
            lambda,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DualityCheck {
    pub seed: u64,
    pub n: usize,
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
    pub weight_deviation: f64,
}

/// The seeded duality suite: `count` instances with n cycling through 4..=8.
pub fn duality_suite(count: usize) -> Result<Vec<DualityCheck>> {
    (0..count)
        .map(|k| {
            let seed = 1000 + k as u64;
            let n = 4 + k % 5;
            let inst = DualityInstance::random(seed, n)?;
            let primal = inst.primal()?;
            let dual = inst.dual(GelDivergence::Chi2)?;
            let pd = dual_weights(&dual, GelDivergence::Chi2);
            let dev = primal.p.iter().zip(&pd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            Ok(DualityCheck {
                seed,
                n,
                primal: primal.value,
                dual: dual.value,
                gap: (primal.value - dual.value).abs(),
                weight_deviation: dev,
            })
        })
        .collect()
}

/// Normalized generator f with f(1) = 0 and f′(1) = 0 whose Legendre
/// transform is conjugate_value − conjugate_offset; `None` outside dom f.
pub fn generator(d: GelDivergence, p: f64) -> Option<f64> {
    match d {
        GelDivergence::Chi2 => Some(0.5 * (p - 1.0) * (p - 1.0)),
        GelDivergence::El => (p > 0.0).then(|| -p.ln() + p - 1.0),
        GelDivergence::Kl => {
            if p > 0.0 {
                Some(p * p.ln() - p + 1.0)
            } else if p == 0.0 {
                Some(1.0)
            } else {
                None
            }
        }
        GelDivergence::VmmEquiv => Some((p - 1.0) * (p - 1.0)),
    }
}

fn generator_bracket(d: GelDivergence) -> (f64, f64) {
    match d {
        GelDivergence::Chi2 | GelDivergence::VmmEquiv => (-1e3, 1e3),
        GelDivergence::El => (1e-12, 1e4),
        GelDivergence::Kl => (0.0, 1e4),
    }
}

/// sup_p p·v − f(p) by a coarse scan followed by golden-section refinement.
pub fn numeric_conjugate(d: GelDivergence, v: f64) -> f64 {
    let (lo, hi) = generator_bracket(d);
    let obj = |p: f64| generator(d, p).map_or(f64::NEG_INFINITY, |f| p * v - f);
    // Log-spaced scan on each side of p = 1 keeps resolution near the optimum.
    let mut grid = vec![lo, 1.0, hi];
    for k in 0..=400 {
        let s = 10f64.powf(-8.0 + 12.0 * k as f64 / 400.0);
        grid.push(1.0 + s);
        grid.push(1.0 - s);
    }
    grid.retain(|&p| p >= lo && p <= hi);
    grid.sort_by(f64::total_cmp);
    let best = (0..grid.len())
        .max_by(|&a, &b| obj(grid[a]).total_cmp(&obj(grid[b])))
        .unwrap();
    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(grid.len() - 1)];
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut e = a + ratio * (b - a);
    for _ in 0..200 {
        if obj(c) > obj(e) {
            b = e;
        } else {
            a = c;
        }
        c = b - ratio * (b - a);
        e = a + ratio * (b - a);
        if (b - a).abs() < 1e-14 * (1.0 + a.abs()) {
            break;
        }
    }
    obj(grid[best]).max(obj(0.5 * (a + b)))
}

#[derive(Clone, Debug)]
pub struct ConjugateCheck {
    pub divergence: GelDivergence,
    pub points: usize,
    pub max_error: f64,
}

/// Grid of 50 points inside dom(φ*) for each divergence.
pub fn conjugate_grid(d: GelDivergence) -> Vec<f64> {
    let (lo, hi) = match d {
        GelDivergence::El => (-3.0, 0.9),
        _ => (-3.0, 2.0),
    };
    (0..50).map(|k| lo + (hi - lo) * k as f64 / 49.0).collect()
}

/// Compares closed-form conjugates (shifted by their offsets) with
/// [`numeric_conjugate`] on [`conjugate_grid`].
pub fn conjugate_suite() -> Result<Vec<ConjugateCheck>> {
    GelDivergence::ALL
        .iter()
        .map(|&d| {
            let grid = conjugate_grid(d);
            let mut max_error: f64 = 0.0;
            for &v in &grid {
                let closed = conjugate_value(d, v)? - d.conjugate_offset();
                max_error = max_error.max((closed - numeric_conjugate(d, v)).abs());
            }
            Ok(ConjugateCheck {
                divergence: d,
                points: grid.len(),
                max_error,
            })
        })
        .collect()
}
