//! Comparison estimators: least squares, GMM with a finite instrument basis
//! (continuously updated and two-step optimally weighted), the MMR
//! V-statistic minimizer and kernel VMM.

use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, MomentFunction, MomentTable};
use crate::error::{FgelError, Result};
use crate::fgel_kernel::{inner_objective, KernelFgelProblem};
use crate::kernel::GramSet;
use crate::optimize::{lbfgs_minimize, LbfgsConfig};

/// Ridge added to every GMM covariance estimate.
pub const COVARIANCE_RIDGE: f64 = 1e-8;

fn outer_config() -> LbfgsConfig {
    LbfgsConfig {
        grad_tol: 1e-9,
        max_iters: 1000,
        ..LbfgsConfig::default()
    }
}

fn to_vec(x: &DVector<f64>) -> Vec<f64> {
    x.iter().copied().collect()
}

/// Least squares of the target (last x column) on the remaining x columns,
/// without intercept, via the normal equations.
pub fn lsq_estimate(data: &Dataset) -> Result<Vec<f64>> {
    let k = data.dx().checked_sub(1).filter(|&k| k > 0).ok_or_else(|| {
        FgelError::InvalidArgument("least squares needs at least one regressor column".into())
    })?;
    let n = data.n();
    let x = DMatrix::from_fn(n, k, |i, j| data.x_row(i)[j]);
    let y = DVector::from_fn(n, |i, _| data.target(i));
    let xtx = x.tr_mul(&x);
    let chol = xtx.cholesky().ok_or(FgelError::Singular("least-squares design is rank deficient"))?;
    Ok(to_vec(&chol.solve(&x.tr_mul(&y))))
}

/// Minimizes (1/n)Σ‖ψ(x_i; θ)‖² from `theta0`; least squares for residual moments.
pub fn least_squares(data: &Dataset, moments: &dyn MomentFunction, theta0: &[f64]) -> Result<Vec<f64>> {
    let n = data.n() as f64;
    let res = lbfgs_minimize(
        |th| {
            let t = MomentTable::evaluate(data, moments, th.as_slice(), true)?;
            let mut value = 0.0;
            let mut g = DVector::zeros(t.p());
            for i in 0..t.n() {
                for r in 0..t.m() {
                    let e = t.psi(i, r);
                    value += e * e;
                    for j in 0..t.p() {
                        g[j] += 2.0 * e * t.jac(i, r, j);
                    }
                }
            }
            Ok((value / n, g / n))
        },
        DVector::from_column_slice(theta0),
        &LbfgsConfig {
            grad_tol: 1e-10,
            max_iters: 2000,
            ..LbfgsConfig::default()
        },
    )?;
    Ok(to_vec(&res.x))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    Identity,
    InverseCovariance,
}

/// Fixed instrument functions b(z): 1 and z_k^d for d = 1..=degree.
#[derive(Clone, Copy, Debug)]
pub struct PolynomialBasis {
    pub degree: usize,
}

impl PolynomialBasis {
    pub fn len(&self, dz: usize) -> usize {
        1 + dz * self.degree
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn eval(&self, z: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.push(1.0);
        for &zk in z {
            let mut p = 1.0;
            for _ in 0..self.degree {
                p *= zk;
                out.push(p);
            }
        }
    }

    /// Degree max(3, p − 1), so the stacked moment count m·(1 + d_z·degree)
    /// is at least p.
    pub fn for_params(p: usize) -> Self {
        Self {
            degree: 3.max(p.saturating_sub(1)),
        }
    }
}

/// Unconditional moments g_i(θ) = ψ(x_i; θ) ⊗ b(z_i).
pub struct FiniteMomentProblem<'a> {
    pub data: &'a Dataset,
    pub moments: &'a dyn MomentFunction,
    pub basis: PolynomialBasis,
    pub weighting: Weighting,
    basis_values: Vec<Vec<f64>>,
}

struct Stacked {
    /// n × q matrix of g_i.
    g: DMatrix<f64>,
    /// Per parameter j, the n × q matrix of ∂g_i/∂θ_j.
    dg: Vec<DMatrix<f64>>,
}

impl<'a> FiniteMomentProblem<'a> {
    pub fn new(
        data: &'a Dataset,
        moments: &'a dyn MomentFunction,
        basis: PolynomialBasis,
        weighting: Weighting,
    ) -> Result<Self> {
        let q = moments.dim() * basis.len(data.dz());
        if q < moments.n_params() {
            return Err(FgelError::InvalidArgument(format!(
                "{q} stacked moments cannot identify {} parameters",
                moments.n_params()
            )));
        }
        let mut basis_values = Vec::with_capacity(data.n());
        let mut buf = Vec::new();
        for i in 0..data.n() {
            basis.eval(data.z_row(i), &mut buf);
            basis_values.push(buf.clone());
        }
        Ok(Self {
            data,
            moments,
            basis,
            weighting,
            basis_values,
        })
    }

    pub fn stacked_dim(&self) -> usize {
        self.moments.dim() * self.basis.len(self.data.dz())
    }

    fn stack(&self, theta: &[f64]) -> Result<Stacked> {
        let t = MomentTable::evaluate(self.data, self.moments, theta, true)?;
        let b = self.basis.len(self.data.dz());
        let q = t.m() * b;
        let mut g = DMatrix::zeros(t.n(), q);
        let mut dg = vec![DMatrix::zeros(t.n(), q); t.p()];
        for i in 0..t.n() {
            let bi = &self.basis_values[i];
            for r in 0..t.m() {
                for (k, &bk) in bi.iter().enumerate() {
                    g[(i, r * b + k)] = t.psi(i, r) * bk;
                    for (j, dgj) in dg.iter_mut().enumerate() {
                        dgj[(i, r * b + k)] = t.jac(i, r, j) * bk;
                    }
                }
            }
        }
        Ok(Stacked { g, dg })
    }

    /// Ω̂_θ = (1/n)Σ g_i g_iᵀ + ridge·I.
    pub fn covariance(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        let s = self.stack(theta)?;
        Ok(covariance_of(&s.g))
    }

    pub fn mean_moment(&self, theta: &[f64]) -> Result<DVector<f64>> {
        let s = self.stack(theta)?;
        Ok(column_means(&s.g))
    }

    /// ĝᵀWĝ and its gradient for a fixed weight matrix.
    pub fn weighted_objective(&self, theta: &[f64], w: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
        let s = self.stack(theta)?;
        let gbar = column_means(&s.g);
        let wg = w * &gbar;
        let grad = DVector::from_fn(s.dg.len(), |j, _| 2.0 * column_means(&s.dg[j]).dot(&wg));
        Ok((gbar.dot(&wg), grad))
    }

    /// ĝᵀΩ̂_θ⁻¹ĝ and its gradient 2aᵀ∂ĝ − (2/n)Σ(aᵀ∂g_i)(aᵀg_i), a = Ω̂_θ⁻¹ĝ.
    pub fn cue_objective(&self, theta: &[f64]) -> Result<(f64, DVector<f64>)> {
        let s = self.stack(theta)?;
        let n = s.g.nrows() as f64;
        let gbar = column_means(&s.g);
        let chol = covariance_of(&s.g)
            .cholesky()
            .ok_or(FgelError::Singular("moment covariance"))?;
        let a = chol.solve(&gbar);
        let ga = &s.g * &a;
        let grad = DVector::from_fn(s.dg.len(), |j, _| {
            let dga = &s.dg[j] * &a;
            2.0 * column_means(&s.dg[j]).dot(&a) - 2.0 * dga.dot(&ga) / n
        });
        Ok((gbar.dot(&a), grad))
    }
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_fn(m.ncols(), |c, _| m.column(c).sum() / n)
}

fn covariance_of(g: &DMatrix<f64>) -> DMatrix<f64> {
    let n = g.nrows() as f64;
    let q = g.ncols();
    g.tr_mul(g) / n + DMatrix::identity(q, q) * COVARIANCE_RIDGE
}

pub fn cue_estimate(problem: &FiniteMomentProblem, theta0: &[f64]) -> Result<Vec<f64>> {
    let res = lbfgs_minimize(
        |th| problem.cue_objective(th.as_slice()),
        DVector::from_column_slice(theta0),
        &outer_config(),
    )?;
    Ok(to_vec(&res.x))
}

/// Two-step GMM: identity weighting, then the inverse covariance at the
/// first-step estimate held fixed.
pub fn owgmm_estimate(problem: &FiniteMomentProblem, theta0: &[f64]) -> Result<Vec<f64>> {
    let q = problem.stacked_dim();
    let step1 = gmm_fixed_weight(problem, &DMatrix::identity(q, q), theta0)?;
    if problem.weighting == Weighting::Identity {
        return Ok(step1);
    }
    let w = problem
        .covariance(&step1)?
        .try_inverse()
        .ok_or(FgelError::Singular("moment covariance"))?;
    gmm_fixed_weight(problem, &w, &step1)
}

pub fn gmm_fixed_weight(problem: &FiniteMomentProblem, w: &DMatrix<f64>, theta0: &[f64]) -> Result<Vec<f64>> {
    let res = lbfgs_minimize(
        |th| problem.weighted_objective(th.as_slice(), w),
        DVector::from_column_slice(theta0),
        &outer_config(),
    )?;
    Ok(to_vec(&res.x))
}

/// ℓ(θ) = (1/n²) Σ_r ψ_rᵀK_rψ_r and its gradient, through the Gram factors.
pub fn mmr_objective(data: &Dataset, moments: &dyn MomentFunction, grams: &GramSet, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
    let t = MomentTable::evaluate(data, moments, theta, true)?;
    if grams.n() != t.n() || grams.m() != t.m() {
        return Err(FgelError::DimensionMismatch {
            context: "Gram set",
            expected: t.n(),
            actual: grams.n(),
        });
    }
    let n2 = (t.n() * t.n()) as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; t.p()];
    for (r, f) in grams.factors().iter().enumerate() {
        let psi = DVector::from_vec(t.component(r));
        let c = f.apply_t(&psi);
        value += c.norm_squared();
        let kpsi = f.apply(&c);
        for (j, gj) in grad.iter_mut().enumerate() {
            *gj += 2.0 * (0..t.n()).map(|i| t.jac(i, r, j) * kpsi[i]).sum::<f64>();
        }
    }
    Ok((value / n2, grad.into_iter().map(|g| g / n2).collect()))
}

pub fn mmr_estimate(data: &Dataset, moments: &dyn MomentFunction, grams: &GramSet, theta0: &[f64]) -> Result<Vec<f64>> {
    let res = lbfgs_minimize(
        |th| {
            let (v, g) = mmr_objective(data, moments, grams, th.as_slice())?;
            Ok((v, DVector::from_vec(g)))
        },
        DVector::from_column_slice(theta0),
        &outer_config(),
    )?;
    Ok(to_vec(&res.x))
}

/// (lhs, rhs) with lhs the FGEL inner objective under φ(v) = −(1 + v/2)² at
/// α, and rhs = Ê[ψᵀh] − ¼Ê[(ψᵀh)²] − (λ̃/4)‖h‖², λ̃ = 2λ, at the reflected
/// instrument h = −h_α. They satisfy lhs = rhs − 1.
pub fn kernel_vmm_objective_identity(
    problem: &KernelFgelProblem,
    theta: &[f64],
    alpha: &[DVector<f64>],
) -> Result<(f64, f64)> {
    let vmm = KernelFgelProblem {
        divergence: crate::divergence::GelDivergence::VmmEquiv,
        theta0: problem.theta0.clone(),
        options: problem.options.clone(),
        ..*problem
    };
    let (lhs, _) = inner_objective(&vmm, theta, alpha)?;
    let t = MomentTable::evaluate(problem.data, problem.moments, theta, false)?;
    let mats = problem.grams.mats();
    let n = t.n() as f64;
    let mut v = DVector::zeros(t.n());
    let mut norm = 0.0;
    for (r, (a, k)) in alpha.iter().zip(mats).enumerate() {
        let u = -(k * a);
        norm += a.dot(&(k * a));
        v += u.component_mul(&DVector::from_vec(t.component(r)));
    }
    let lambda_tilde = 2.0 * problem.lambda;
    let rhs = v.sum() / n - 0.25 * v.norm_squared() / n - 0.25 * lambda_tilde * norm;
    Ok((lhs, rhs))
}

/// Maximizer over h of the rhs form, returned as u_r = K_rα_r at the sample:
/// (λI + (1/2n) D_r Σ_s D_s K_s) α = (1/n) ψ_r.
pub fn vmm_rhs_argmax(problem: &KernelFgelProblem, theta: &[f64]) -> Result<Vec<DVector<f64>>> {
    if !(problem.lambda > 0.0) {
        return Err(FgelError::IllPosed);
    }
    let t = MomentTable::evaluate(problem.data, problem.moments, theta, false)?;
    let (n, m) = (t.n(), t.m());
    let nf = n as f64;
    let mats = problem.grams.mats();
    let mut a = DMatrix::zeros(n * m, n * m);
    let mut b = DVector::zeros(n * m);
    for r in 0..m {
        for i in 0..n {
            b[r * n + i] = t.psi(i, r) / nf;
            a[(r * n + i, r * n + i)] += problem.lambda;
            for s in 0..m {
                let c = t.psi(i, r) * t.psi(i, s) / (2.0 * nf);
                for j in 0..n {
                    a[(r * n + i, s * n + j)] += c * mats[s][(i, j)];
                }
            }
        }
    }
    let x = a.lu().solve(&b).ok_or(FgelError::Singular("vmm first-order system"))?;
    Ok((0..m).map(|r| &mats[r] * x.rows(r * n, n)).collect())
}

/// Kernel VMM: θ ↦ max_h Ê[ψᵀh] − ¼Ê[(ψᵀh)²] − (λ/2)‖h‖² with the inner
/// maximum in closed form over the whitened coefficients.
pub fn kernel_vmm_objective(
    data: &Dataset,
    moments: &dyn MomentFunction,
    grams: &GramSet,
    lambda: f64,
    theta: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if !(lambda > 0.0) {
        return Err(FgelError::IllPosed);
    }
    let t = MomentTable::evaluate(data, moments, theta, true)?;
    let n = t.n();
    let nf = n as f64;
    let factors = grams.factors();
    let total: usize = factors.iter().map(|f| f.rank()).sum();
    let mut design = DMatrix::zeros(n, total);
    let mut off = 0;
    for (r, f) in factors.iter().enumerate() {
        for c in 0..f.rank() {
            for i in 0..n {
                design[(i, off + c)] = t.psi(i, r) * f.l()[(i, c)];
            }
        }
        off += f.rank();
    }
    let ones = DVector::from_element(n, 1.0);
    let lhs = design.tr_mul(&design) / (2.0 * nf) + DMatrix::identity(total, total) * lambda;
    let rhs = design.tr_mul(&ones) / nf;
    let beta = lhs.cholesky().ok_or(FgelError::Singular("vmm inner system"))?.solve(&rhs);
    let v = &design * &beta;
    let value = v.sum() / nf - 0.25 * v.norm_squared() / nf - 0.5 * lambda * beta.norm_squared();
    // Envelope gradient through ψ.
    let mut grad = vec![0.0; t.p()];
    let mut off = 0;
    for (r, f) in factors.iter().enumerate() {
        let u = f.apply(&beta.rows(off, f.rank()).into_owned());
        off += f.rank();
        for i in 0..n {
            let w = (1.0 - 0.5 * v[i]) / nf * u[i];
            for (j, gj) in grad.iter_mut().enumerate() {
                *gj += w * t.jac(i, r, j);
            }
        }
    }
    Ok((value, grad))
}

pub fn kernel_vmm_estimate(
    data: &Dataset,
    moments: &dyn MomentFunction,
    grams: &GramSet,
    lambda: f64,
    theta0: &[f64],
) -> Result<Vec<f64>> {
    let res = lbfgs_minimize(
        |th| {
            let (v, g) = kernel_vmm_objective(data, moments, grams, lambda, th.as_slice())?;
            Ok((v, DVector::from_vec(g)))
        },
        DVector::from_column_slice(theta0),
        &LbfgsConfig {
            grad_tol: 1e-7,
            max_iters: 200,
            max_halvings: 30,
            ..LbfgsConfig::default()
        },
    )?;
    Ok(to_vec(&res.x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{HeteroskedasticDgp, LinearModel, MeanMoment, ResidualMoment, RngStream};
    use crate::divergence::GelDivergence;
    use crate::fgel_kernel::{estimate, inner_solve};
    use crate::testutil::random_instance;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn mean_data(values: &[f64]) -> Dataset {
        Dataset::from_rows(values.len(), 1, values.to_vec(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn lsq_exact_line() {
        let d = Dataset::from_rows(2, 2, vec![1.0, 2.0, 2.0, 4.0], 1, vec![0.0, 0.0]).unwrap();
        assert!((lsq_estimate(&d).unwrap()[0] - 2.0).abs() < 1e-14);
        let (d, _) = HeteroskedasticDgp::noiseless().sample(100, &mut RngStream::new(1, 0)).unwrap();
        assert!((lsq_estimate(&d).unwrap()[0] - 1.7).abs() < 1e-10);
        let zero = Dataset::from_rows(2, 2, vec![0.0, 1.0, 0.0, 2.0], 1, vec![0.0, 0.0]).unwrap();
        assert!(lsq_estimate(&zero).is_err());
    }

    #[test]
    fn lsq_matches_grid_search() {
        let mut rng = RngStream::new(2, 0);
        let n = 40;
        let mut x = Vec::new();
        for _ in 0..n {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            let e: f64 = rng.sample(StandardNormal);
            x.extend([a, b, 0.7 * a - 0.4 * b + 0.3 * e]);
        }
        let d = Dataset::from_rows(n, 3, x, 1, vec![0.0; n]).unwrap();
        let theta = lsq_estimate(&d).unwrap();
        let sse = |t0: f64, t1: f64| {
            (0..n)
                .map(|i| {
                    let r = d.x_row(i);
                    (r[2] - t0 * r[0] - t1 * r[1]).powi(2)
                })
                .sum::<f64>()
        };
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=400 {
            for j in 0..=400 {
                let (t0, t1) = (-1.0 + 0.005 * i as f64, -1.0 + 0.005 * j as f64);
                let s = sse(t0, t1);
                if s < best.0 {
                    best = (s, t0, t1);
                }
            }
        }
        assert!((theta[0] - best.1).abs() < 5e-3 && (theta[1] - best.2).abs() < 5e-3);
        let generic = least_squares(&d, &ResidualMoment::new(LinearModel::new(2, false)), &[0.0, 0.0]).unwrap();
        assert!((generic[0] - theta[0]).abs() < 1e-7 && (generic[1] - theta[1]).abs() < 1e-7);
    }

    #[test]
    fn just_identified_mean() {
        let d = mean_data(&[1.0, 2.0, 3.0]);
        let mf = MeanMoment { dims: 1 };
        let basis = PolynomialBasis { degree: 0 };
        for w in [Weighting::Identity, Weighting::InverseCovariance] {
            let p = FiniteMomentProblem::new(&d, &mf, basis, w).unwrap();
            assert!((cue_estimate(&p, &[0.0]).unwrap()[0] - 2.0).abs() < 1e-6);
            assert!((owgmm_estimate(&p, &[0.0]).unwrap()[0] - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn underidentified_basis_rejected() {
        let d = mean_data(&[1.0, 2.0]);
        let mf = ResidualMoment::new(crate::data::HingeModel::unit_grid());
        let dd = Dataset::from_rows(2, 2, vec![1.0, 2.0, 3.0, 4.0], 1, vec![0.0, 1.0]).unwrap();
        assert!(FiniteMomentProblem::new(&dd, &mf, PolynomialBasis { degree: 3 }, Weighting::Identity).is_err());
        assert!(FiniteMomentProblem::new(&dd, &mf, PolynomialBasis::for_params(5), Weighting::Identity).is_ok());
        let _ = d;
    }

    fn iv_toy(n: usize, seed: u64) -> Dataset {
        // y = 1.5x + e, x = z₁ + z₂ + e, two instruments.
        let mut rng = RngStream::new(seed, 0);
        let mut x = Vec::new();
        let mut z = Vec::new();
        for _ in 0..n {
            let z1: f64 = rng.random_range(-1.0..1.0);
            let z2: f64 = rng.random_range(-1.0..1.0);
            let e: f64 = rng.sample(StandardNormal);
            let xi = z1 + 0.5 * z2 + 0.5 * e;
            x.extend([xi, 1.5 * xi + e * (1.0 + z1 * z1)]);
            z.extend([z1, z2]);
        }
        Dataset::from_rows(n, 2, x, 2, z).unwrap()
    }

    #[test]
    fn cue_matches_grid_on_overidentified_toy() {
        let d = iv_toy(200, 3);
        let mf = ResidualMoment::new(LinearModel::new(1, false));
        let p = FiniteMomentProblem::new(&d, &mf, PolynomialBasis { degree: 1 }, Weighting::InverseCovariance).unwrap();
        let theta = cue_estimate(&p, &[0.0]).unwrap()[0];
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=40_000 {
            let t = 0.0 + 3.0 * k as f64 / 40_000.0;
            let v = p.cue_objective(&[t]).unwrap().0;
            if v < best.0 {
                best = (v, t);
            }
        }
        assert!((theta - best.1).abs() < 1e-3, "{theta} vs {}", best.1);
        let lsq = lsq_estimate(&d).unwrap();
        assert!(p.cue_objective(&[theta]).unwrap().0 <= p.cue_objective(&lsq).unwrap().0);
    }

    #[test]
    fn cue_gradient_matches_finite_differences() {
        let d = iv_toy(50, 4);
        let mf = ResidualMoment::new(LinearModel::new(1, true));
        let p = FiniteMomentProblem::new(&d, &mf, PolynomialBasis { degree: 2 }, Weighting::InverseCovariance).unwrap();
        for theta in [[0.1, 0.5], [-0.3, 1.2], [0.4, 2.0]] {
            let (_, g) = p.cue_objective(&theta).unwrap();
            for j in 0..2 {
                let h = 1e-6;
                let mut tp = theta;
                let mut tm = theta;
                tp[j] += h;
                tm[j] -= h;
                let fd = (p.cue_objective(&tp).unwrap().0 - p.cue_objective(&tm).unwrap().0) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-5 * (1.0 + g[j].abs()), "{fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn identity_step_is_unweighted_minimizer() {
        let d = iv_toy(100, 5);
        let mf = ResidualMoment::new(LinearModel::new(1, false));
        let p = FiniteMomentProblem::new(&d, &mf, PolynomialBasis { degree: 1 }, Weighting::Identity).unwrap();
        let theta = owgmm_estimate(&p, &[0.0]).unwrap()[0];
        // ĝ(θ) = a − θc is linear, so the identity-weighted minimizer is aᵀc / cᵀc.
        let a = p.mean_moment(&[0.0]).unwrap();
        let c = &a - p.mean_moment(&[1.0]).unwrap();
        assert!((theta - a.dot(&c) / c.dot(&c)).abs() < 1e-8);
    }

    #[test]
    fn two_step_and_cue_agree_at_large_n() {
        let d = iv_toy(10_000, 6);
        let mf = ResidualMoment::new(LinearModel::new(1, false));
        let p = FiniteMomentProblem::new(&d, &mf, PolynomialBasis { degree: 1 }, Weighting::InverseCovariance).unwrap();
        let a = cue_estimate(&p, &[0.0]).unwrap()[0];
        let b = owgmm_estimate(&p, &[0.0]).unwrap()[0];
        assert!((a - b).abs() < 2e-2, "{a} vs {b}");
    }

    #[test]
    fn mmr_objective_matches_double_sum() {
        let inst = random_instance(9, 7);
        let mf = crate::testutil::TwoMoment;
        let theta = [0.2, -0.3];
        let (v, g) = mmr_objective(&inst.data, &mf, &inst.grams, &theta).unwrap();
        let t = MomentTable::evaluate(&inst.data, &mf, &theta, false).unwrap();
        let mats = inst.grams.mats();
        let mut naive = 0.0;
        for r in 0..2 {
            for i in 0..9 {
                for j in 0..9 {
                    naive += t.psi(i, r) * mats[r][(i, j)] * t.psi(j, r);
                }
            }
        }
        naive /= 81.0;
        assert!((v - naive).abs() < 1e-10);
        assert!(v >= 0.0);
        let h = 1e-6;
        for j in 0..2 {
            let mut tp = theta;
            let mut tm = theta;
            tp[j] += h;
            tm[j] -= h;
            let fd = (mmr_objective(&inst.data, &mf, &inst.grams, &tp).unwrap().0
                - mmr_objective(&inst.data, &mf, &inst.grams, &tm).unwrap().0)
                / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-6 * (1.0 + g[j].abs()));
        }
    }

    #[test]
    fn mmr_recovers_noiseless_theta() {
        let (d, _) = HeteroskedasticDgp::noiseless().sample(100, &mut RngStream::new(8, 0)).unwrap();
        let mf = ResidualMoment::new(LinearModel::new(1, false));
        let grams = GramSet::median_rbf(&d, 1).unwrap();
        assert!(mmr_objective(&d, &mf, &grams, &[1.7]).unwrap().0.abs() < 1e-20);
        assert!((mmr_estimate(&d, &mf, &grams, &[0.0]).unwrap()[0] - 1.7).abs() < 1e-6);
    }

    #[test]
    fn mmr_objective_permutation_invariant() {
        let inst = random_instance(10, 9);
        let perm: Vec<usize> = (0..10).map(|i| (3 * i + 1) % 10).collect();
        let pd = inst.data.permuted(&perm).unwrap();
        let pg = GramSet::rbf(&pd.z_matrix(), 2, inst.grams.gammas()[0]).unwrap();
        let mf = crate::testutil::TwoMoment;
        let a = mmr_objective(&inst.data, &mf, &inst.grams, &[0.1, 0.1]).unwrap().0;
        let b = mmr_objective(&pd, &mf, &pg, &[0.1, 0.1]).unwrap().0;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn vmm_identity_holds() {
        let inst = random_instance(8, 10);
        let p = inst.problem(GelDivergence::VmmEquiv, 0.3);
        let zero = vec![DVector::zeros(8); 2];
        let (l, r) = kernel_vmm_objective_identity(&p, &[0.0, 0.0], &zero).unwrap();
        assert_eq!((l, r), (-1.0, 0.0));
        let mut rng = RngStream::new(11, 0);
        for _ in 0..20 {
            let theta = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let alpha: Vec<DVector<f64>> = (0..2).map(|_| DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0))).collect();
            let (l, r) = kernel_vmm_objective_identity(&p, &theta, &alpha).unwrap();
            assert!((l - r + 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn vmm_argmax_agrees() {
        let inst = random_instance(10, 12);
        let p = inst.problem(GelDivergence::VmmEquiv, 0.1);
        let theta = [0.3, -0.2];
        let sol = inner_solve(&p, &theta).unwrap();
        let u = vmm_rhs_argmax(&p, &theta).unwrap();
        for r in 0..2 {
            assert!((&sol.u[r] + &u[r]).amax() < 1e-6);
        }
    }

    #[test]
    fn kernel_vmm_matches_fgel_vmm_equiv() {
        let (d, _) = HeteroskedasticDgp::default().sample(80, &mut RngStream::new(13, 0)).unwrap();
        let mf = ResidualMoment::new(LinearModel::new(1, false));
        let grams = GramSet::median_rbf(&d, 1).unwrap();
        let fgel = estimate(&KernelFgelProblem::new(&d, &mf, &grams, GelDivergence::VmmEquiv, 0.05, vec![1.0]).unwrap()).unwrap();
        let vmm = kernel_vmm_estimate(&d, &mf, &grams, 0.05, &[1.0]).unwrap();
        assert!((fgel.theta_hat[0] - vmm[0]).abs() < 1e-4, "{:?} vs {vmm:?}", fgel.theta_hat);
        let (rv, _) = kernel_vmm_objective(&d, &mf, &grams, 0.05, &vmm).unwrap();
        assert!((fgel.profile_value - (rv - 1.0)).abs() < 1e-8);
    }
}
