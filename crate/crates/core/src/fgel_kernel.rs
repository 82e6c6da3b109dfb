//! Kernel-FGEL: instruments in a product of RBF spaces, an inner concave
//! maximization over representer coefficients and an outer minimization of
//! the profile divergence R_λ(θ) driven by the envelope (Danskin) gradient.
//!
//! The inner problem is solved in whitened coordinates β_r = L_rᵀα_r where
//! K_r = L_rL_rᵀ is a pivoted Cholesky factor. Then K_rα_r = L_rβ_r and
//! α_rᵀK_rα_r = ‖β_r‖², so the objective is unchanged while its dimension
//! drops to the numerical rank of the Gram matrices.

use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, MomentFunction, MomentTable};
use crate::divergence::{implied_probabilities, GelDivergence};
use crate::error::{FgelError, Result};
use crate::kernel::GramSet;
use crate::optimize::{lbfgs_minimize, lbfgs_minimize_feasible, LbfgsConfig, Termination};

#[derive(Clone, Debug)]
pub struct KernelFgelOptions {
    pub inner: LbfgsConfig,
    pub outer: LbfgsConfig,
    /// Start each inner solve from the previous maximizer instead of zero.
    pub warm_start: bool,
}

impl Default for KernelFgelOptions {
    fn default() -> Self {
        Self {
            inner: LbfgsConfig::default(),
            outer: LbfgsConfig {
                grad_tol: 1e-7,
                max_iters: 200,
                max_halvings: 30,
                record_path: true,
                ..LbfgsConfig::default()
            },
            warm_start: false,
        }
    }
}

pub struct KernelFgelProblem<'a> {
    pub data: &'a Dataset,
    pub moments: &'a dyn MomentFunction,
    pub grams: &'a GramSet,
    pub divergence: GelDivergence,
    pub lambda: f64,
    pub theta0: Vec<f64>,
    pub options: KernelFgelOptions,
}

impl<'a> KernelFgelProblem<'a> {
    pub fn new(
        data: &'a Dataset,
        moments: &'a dyn MomentFunction,
        grams: &'a GramSet,
        divergence: GelDivergence,
        lambda: f64,
        theta0: Vec<f64>,
    ) -> Result<Self> {
        if grams.n() != data.n() {
            return Err(FgelError::DimensionMismatch {
                context: "Gram size",
                expected: data.n(),
                actual: grams.n(),
            });
        }
        if grams.m() != moments.dim() {
            return Err(FgelError::DimensionMismatch {
                context: "Gram components",
                expected: moments.dim(),
                actual: grams.m(),
            });
        }
        if theta0.len() != moments.n_params() {
            return Err(FgelError::DimensionMismatch {
                context: "initial parameters",
                expected: moments.n_params(),
                actual: theta0.len(),
            });
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(FgelError::InvalidArgument(format!("lambda must be nonnegative, got {lambda}")));
        }
        Ok(Self {
            data,
            moments,
            grams,
            divergence,
            lambda,
            theta0,
            options: KernelFgelOptions::default(),
        })
    }

    pub fn with_options(mut self, options: KernelFgelOptions) -> Self {
        self.options = options;
        self
    }

    fn table(&self, theta: &[f64], with_jacobian: bool) -> Result<MomentTable> {
        MomentTable::evaluate(self.data, self.moments, theta, with_jacobian)
    }

    fn check_alpha(&self, alpha: &[DVector<f64>]) -> Result<()> {
        if alpha.len() != self.grams.m() {
            return Err(FgelError::DimensionMismatch {
                context: "instrument components",
                expected: self.grams.m(),
                actual: alpha.len(),
            });
        }
        if let Some(a) = alpha.iter().find(|a| a.len() != self.data.n()) {
            return Err(FgelError::DimensionMismatch {
                context: "representer coefficients",
                expected: self.data.n(),
                actual: a.len(),
            });
        }
        Ok(())
    }

    fn domain_check(&self, v: &[f64]) -> Result<()> {
        if let Some(upper) = self.divergence.feasible_upper(v.len()) {
            if let Some(&bad) = v.iter().find(|&&x| !(x <= upper)) {
                return Err(FgelError::Domain {
                    divergence: self.divergence.name(),
                    value: bad,
                    upper,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct KernelFgelResult {
    pub theta_hat: Vec<f64>,
    pub alpha_hat: Vec<DVector<f64>>,
    pub profile_value: f64,
    pub implied_p: Vec<f64>,
    /// (θ, R_λ(θ)) at the start and after every outer iteration.
    pub trace: Vec<(Vec<f64>, f64)>,
    pub termination: Termination,
}

/// Inner maximizer at a fixed θ.
#[derive(Clone, Debug)]
pub struct InnerSolution {
    /// Whitened coefficients β_r.
    pub beta: Vec<DVector<f64>>,
    /// u_r = K_rα_r, the instrument components at the samples.
    pub u: Vec<DVector<f64>>,
    pub v: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
}

impl InnerSolution {
    /// Representer coefficients α_r (supported on the factor pivots).
    pub fn alpha(&self, grams: &GramSet) -> Vec<DVector<f64>> {
        self.beta
            .iter()
            .zip(grams.factors())
            .map(|(b, f)| f.coefficients(b))
            .collect()
    }
}

/// v_i = Σ_r (K_rα_r)_i ψ_r(x_i; θ).
pub fn moment_values(problem: &KernelFgelProblem, theta: &[f64], alpha: &[DVector<f64>]) -> Result<Vec<f64>> {
    problem.check_alpha(alpha)?;
    let table = problem.table(theta, false)?;
    let u: Vec<DVector<f64>> = alpha.iter().zip(problem.grams.mats()).map(|(a, k)| k * a).collect();
    Ok(contract(&table, &u))
}

fn contract(table: &MomentTable, u: &[DVector<f64>]) -> Vec<f64> {
    (0..table.n())
        .map(|i| u.iter().enumerate().map(|(r, ur)| ur[i] * table.psi(i, r)).sum())
        .collect()
}

/// Value (1/n)Σφ(v_i) − (λ/2)Σα_rᵀK_rα_r and its gradient in α, using the
/// dense Gram matrices. Errs with `Domain` when some v_i is infeasible.
pub fn inner_objective(
    problem: &KernelFgelProblem,
    theta: &[f64],
    alpha: &[DVector<f64>],
) -> Result<(f64, Vec<DVector<f64>>)> {
    problem.check_alpha(alpha)?;
    let table = problem.table(theta, false)?;
    let mats = problem.grams.mats();
    let u: Vec<DVector<f64>> = alpha.iter().zip(mats).map(|(a, k)| k * a).collect();
    let v = contract(&table, &u);
    problem.domain_check(&v)?;
    let n = v.len() as f64;
    let d = problem.divergence;
    let fit: f64 = v.iter().map(|&x| d.phi(x)).sum::<f64>() / n;
    let norm: f64 = alpha.iter().zip(&u).map(|(a, ku)| a.dot(ku)).sum();
    let w: Vec<f64> = v.iter().map(|&x| d.phi1(x)).collect();
    let grad = (0..alpha.len())
        .map(|r| {
            let s = DVector::from_fn(v.len(), |i, _| w[i] * table.psi(i, r) / n);
            &mats[r] * s - &u[r] * problem.lambda
        })
        .collect();
    Ok((fit - 0.5 * problem.lambda * norm, grad))
}

struct Whitened<'p> {
    factors: &'p [crate::kernel::GramFactor],
    psi: Vec<DVector<f64>>,
    offsets: Vec<usize>,
    divergence: GelDivergence,
    lambda: f64,
    upper: Option<f64>,
}

impl<'p> Whitened<'p> {
    fn new(problem: &'p KernelFgelProblem, table: &MomentTable) -> Self {
        let factors = problem.grams.factors();
        let mut offsets = vec![0];
        for f in factors {
            offsets.push(offsets.last().unwrap() + f.rank());
        }
        Self {
            factors,
            psi: (0..table.m()).map(|r| DVector::from_vec(table.component(r))).collect(),
            offsets,
            divergence: problem.divergence,
            lambda: problem.lambda,
            upper: problem.divergence.feasible_upper(table.n()),
        }
    }

    fn dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    fn block(&self, x: &DVector<f64>, r: usize) -> DVector<f64> {
        x.rows(self.offsets[r], self.offsets[r + 1] - self.offsets[r]).into_owned()
    }

    fn state(&self, x: &DVector<f64>) -> (Vec<DVector<f64>>, DVector<f64>) {
        let n = self.psi[0].len();
        let mut v = DVector::zeros(n);
        let u: Vec<DVector<f64>> = self
            .factors
            .iter()
            .enumerate()
            .map(|(r, f)| f.apply(&self.block(x, r)))
            .collect();
        for (ur, pr) in u.iter().zip(&self.psi) {
            v += ur.component_mul(pr);
        }
        (u, v)
    }

    fn feasible(&self, x: &DVector<f64>) -> bool {
        match self.upper {
            None => true,
            Some(upper) => self.state(x).1.iter().all(|&v| v <= upper),
        }
    }

    /// Negated inner objective and gradient in β.
    fn neg_objective(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (_, v) = self.state(x);
        if let Some(upper) = self.upper {
            if let Some(&bad) = v.iter().find(|&&t| !(t <= upper)) {
                return Err(FgelError::Domain {
                    divergence: self.divergence.name(),
                    value: bad,
                    upper,
                });
            }
        }
        let n = v.len() as f64;
        let d = self.divergence;
        let fit = v.iter().map(|&t| d.phi(t)).sum::<f64>() / n;
        let value = fit - 0.5 * self.lambda * x.norm_squared();
        let w = v.map(|t| d.phi1(t) / n);
        let mut grad = DVector::zeros(self.dim());
        for (r, f) in self.factors.iter().enumerate() {
            let g = f.apply_t(&w.component_mul(&self.psi[r]));
            grad.rows_mut(self.offsets[r], f.rank()).copy_from(&g);
        }
        grad.axpy(-self.lambda, x, 1.0);
        Ok((-value, -grad))
    }
}

fn solve_table(
    problem: &KernelFgelProblem,
    table: &MomentTable,
    start: Option<&[DVector<f64>]>,
) -> Result<InnerSolution> {
    if !(problem.lambda > 0.0) {
        return Err(FgelError::IllPosed);
    }
    let w = Whitened::new(problem, table);
    let mut x0 = DVector::zeros(w.dim());
    if let Some(start) = start {
        for (r, b) in start.iter().enumerate() {
            x0.rows_mut(w.offsets[r], b.len()).copy_from(b);
        }
        if !w.feasible(&x0) {
            x0.fill(0.0);
        }
    }
    let res = lbfgs_minimize_feasible(|x| w.neg_objective(x), |x| w.feasible(x), x0, &problem.options.inner)
        .map_err(|e| FgelError::Optimizer {
            message: format!("inner solve: {e}"),
            trace: Vec::new(),
        })?;
    let (u, v) = w.state(&res.x);
    Ok(InnerSolution {
        beta: (0..w.factors.len()).map(|r| w.block(&res.x, r)).collect(),
        u,
        v: v.iter().copied().collect(),
        value: -res.value,
        iterations: res.iterations,
    })
}

/// Maximizes the inner objective over α from α = 0; returns the maximizer and R_λ(θ).
pub fn inner_solve(problem: &KernelFgelProblem, theta: &[f64]) -> Result<InnerSolution> {
    let table = problem.table(theta, false)?;
    solve_table(problem, &table, None)
}

/// χ² inner maximizer from the first-order conditions
/// λα_r + (1/n) D_r Σ_s D_s K_s α_s = −(1/n) ψ_r, with D_r = diag(ψ_r).
pub fn chi2_inner_closed_form(problem: &KernelFgelProblem, theta: &[f64]) -> Result<Vec<DVector<f64>>> {
    if problem.divergence != GelDivergence::Chi2 {
        return Err(FgelError::InvalidArgument("closed form requires the chi2 divergence".into()));
    }
    if !(problem.lambda > 0.0) {
        return Err(FgelError::IllPosed);
    }
    let table = problem.table(theta, false)?;
    let (n, m) = (table.n(), table.m());
    let nf = n as f64;
    let mats = problem.grams.mats();
    let mut a = DMatrix::zeros(n * m, n * m);
    let mut b = DVector::zeros(n * m);
    for r in 0..m {
        for i in 0..n {
            let pri = table.psi(i, r);
            b[r * n + i] = -pri / nf;
            a[(r * n + i, r * n + i)] += problem.lambda;
            for s in 0..m {
                let c = pri * table.psi(i, s) / nf;
                if c != 0.0 {
                    for j in 0..n {
                        a[(r * n + i, s * n + j)] += c * mats[s][(i, j)];
                    }
                }
            }
        }
    }
    let x = a.lu().solve(&b).ok_or(FgelError::Singular("chi2 first-order system"))?;
    Ok((0..m).map(|r| x.rows(r * n, n).into_owned()).collect())
}

fn danskin(table: &MomentTable, sol: &InnerSolution, d: GelDivergence) -> Vec<f64> {
    let (n, m, p) = (table.n(), table.m(), table.p());
    let mut g = vec![0.0; p];
    for i in 0..n {
        let w = d.phi1(sol.v[i]);
        for r in 0..m {
            let c = w * sol.u[r][i];
            for (j, gj) in g.iter_mut().enumerate() {
                *gj += c * table.jac(i, r, j);
            }
        }
    }
    g.iter_mut().for_each(|x| *x /= n as f64);
    g
}

fn profile_at(
    problem: &KernelFgelProblem,
    theta: &[f64],
    start: Option<&[DVector<f64>]>,
) -> Result<(f64, Vec<f64>, InnerSolution)> {
    let table = problem.table(theta, true)?;
    let sol = solve_table(problem, &table, start)?;
    let g = danskin(&table, &sol, problem.divergence);
    Ok((sol.value, g, sol))
}

/// R_λ(θ) and ∇R_λ(θ)_j = (1/n) Σ_i φ₁(v_i) Σ_r (K_rα*_r)_i ∂ψ_r(x_i; θ)/∂θ_j.
pub fn profile_gradient(problem: &KernelFgelProblem, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (value, g, _) = profile_at(problem, theta, None)?;
    Ok((value, g))
}

/// Minimizes R_λ over θ from `theta0`.
pub fn estimate(problem: &KernelFgelProblem) -> Result<KernelFgelResult> {
    let mut evaluated: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut last_beta: Option<Vec<DVector<f64>>> = None;
    let warm = problem.options.warm_start;
    let mut cfg = problem.options.outer.clone();
    cfg.record_path = true;
    let outcome = lbfgs_minimize(
        |th: &DVector<f64>| {
            let theta: Vec<f64> = th.iter().copied().collect();
            let start = if warm { last_beta.as_deref() } else { None };
            let (value, g, sol) = profile_at(problem, &theta, start)?;
            evaluated.push((theta, value));
            if warm {
                last_beta = Some(sol.beta);
            }
            Ok((value, DVector::from_vec(g)))
        },
        DVector::from_vec(problem.theta0.clone()),
        &cfg,
    );
    let res = match outcome {
        Ok(r) => r,
        Err(e) => {
            return Err(FgelError::Optimizer {
                message: format!("outer minimization: {e}"),
                trace: evaluated,
            })
        }
    };
    let theta_hat: Vec<f64> = res.x.iter().copied().collect();
    let trace = res
        .path
        .iter()
        .zip(&res.history)
        .map(|(x, &f)| (x.iter().copied().collect(), f))
        .collect();
    let (profile_value, _, sol) = profile_at(problem, &theta_hat, None).map_err(|e| FgelError::Optimizer {
        message: format!("final inner solve: {e}"),
        trace: evaluated.clone(),
    })?;
    let implied_p = implied_probabilities(problem.divergence, &sol.v)?;
    Ok(KernelFgelResult {
        alpha_hat: sol.alpha(problem.grams),
        theta_hat,
        profile_value,
        implied_p,
        trace,
        termination: res.termination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{HeteroskedasticDgp, LinearModel, MeanMoment, ResidualMoment, RngStream};
    use crate::testutil::{random_instance, TwoMoment};
    use rand::Rng;

    fn scalar_problem<'a>(
        data: &'a Dataset,
        mf: &'a MeanMoment,
        grams: &'a GramSet,
        lambda: f64,
    ) -> KernelFgelProblem<'a> {
        KernelFgelProblem::new(data, mf, grams, GelDivergence::Chi2, lambda, vec![0.0]).unwrap()
    }

    fn unit() -> (Dataset, MeanMoment, GramSet) {
        (
            Dataset::from_rows(1, 1, vec![1.0], 1, vec![0.0]).unwrap(),
            MeanMoment { dims: 1 },
            GramSet::from_matrices(vec![DMatrix::from_element(1, 1, 1.0)]).unwrap(),
        )
    }

    #[test]
    fn moment_values_small_cases() {
        let (data, mf, grams) = unit();
        let p = scalar_problem(&data, &mf, &grams, 1.0);
        assert_eq!(moment_values(&p, &[0.0], &[DVector::zeros(1)]).unwrap(), vec![0.0]);
        // ψ = 1 − θ = 3 at θ = −2
        assert_eq!(moment_values(&p, &[-2.0], &[DVector::from_element(1, 0.7)]).unwrap(), vec![0.7 * 3.0]);
        assert!(moment_values(&p, &[0.0], &[DVector::zeros(2)]).is_err());
    }

    #[test]
    fn moment_values_match_naive_loop() {
        let inst = random_instance(5, 31);
        let p = inst.problem(GelDivergence::Chi2, 0.1);
        let mut rng = RngStream::new(32, 0);
        let alpha: Vec<DVector<f64>> = (0..2).map(|_| DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0))).collect();
        let theta = [0.3, -0.2];
        let v = moment_values(&p, &theta, &alpha).unwrap();
        let mats = inst.grams.mats();
        let mut psi = [0.0; 2];
        for i in 0..5 {
            TwoMoment.eval(inst.data.x_row(i), &theta, &mut psi);
            let mut naive = 0.0;
            for r in 0..2 {
                for j in 0..5 {
                    naive += alpha[r][j] * mats[r][(j, i)] * psi[r];
                }
            }
            assert!((v[i] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn inner_scalar_closed_form() {
        let (data, mf, grams) = unit();
        let p = scalar_problem(&data, &mf, &grams, 1.0);
        let (v0, _) = inner_objective(&p, &[0.0], &[DVector::zeros(1)]).unwrap();
        assert_eq!(v0, -0.5);
        let (v, g) = inner_objective(&p, &[0.0], &[DVector::from_element(1, -0.5)]).unwrap();
        assert!((v + 0.25).abs() < 1e-15);
        assert!(g[0][0].abs() < 1e-15);
        let a = chi2_inner_closed_form(&p, &[0.0]).unwrap();
        assert!((a[0][0] + 0.5).abs() < 1e-15);
        let sol = inner_solve(&p, &[0.0]).unwrap();
        assert!((sol.value + 0.25).abs() < 1e-12);
        assert!((sol.alpha(&grams)[0][0] + 0.5).abs() < 1e-8);
    }

    #[test]
    fn zero_lambda_is_ill_posed() {
        let (data, mf, grams) = unit();
        let p = scalar_problem(&data, &mf, &grams, 0.0);
        assert!(matches!(chi2_inner_closed_form(&p, &[0.0]), Err(FgelError::IllPosed)));
        assert!(matches!(inner_solve(&p, &[0.0]), Err(FgelError::IllPosed)));
        assert_eq!(FgelError::IllPosed.to_string(), "ill-posed: regularization required");
    }

    #[test]
    fn inner_gradient_matches_finite_differences() {
        let inst = random_instance(7, 33);
        let mut rng = RngStream::new(34, 0);
        for d in [GelDivergence::Chi2, GelDivergence::El, GelDivergence::Kl, GelDivergence::VmmEquiv] {
            let p = inst.problem(d, 0.05);
            for _ in 0..5 {
                let theta = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let alpha: Vec<DVector<f64>> =
                    (0..2).map(|_| DVector::from_fn(7, |_, _| rng.random_range(-0.1..0.1))).collect();
                let (_, g) = inner_objective(&p, &theta, &alpha).unwrap();
                let h = 1e-6;
                for r in 0..2 {
                    for i in 0..7 {
                        let mut ap = alpha.clone();
                        let mut am = alpha.clone();
                        ap[r][i] += h;
                        am[r][i] -= h;
                        let fd = (inner_objective(&p, &theta, &ap).unwrap().0
                            - inner_objective(&p, &theta, &am).unwrap().0)
                            / (2.0 * h);
                        assert!((fd - g[r][i]).abs() <= 1e-6 * (1.0 + g[r][i].abs()), "{d}: {fd} vs {}", g[r][i]);
                    }
                }
            }
        }
    }

    #[test]
    fn inner_objective_is_concave() {
        let inst = random_instance(6, 35);
        let mut rng = RngStream::new(36, 0);
        for d in [GelDivergence::Chi2, GelDivergence::El, GelDivergence::Kl] {
            let p = inst.problem(d, 0.1);
            for _ in 0..10 {
                let theta = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let alpha: Vec<DVector<f64>> =
                    (0..2).map(|_| DVector::from_fn(6, |_, _| rng.random_range(-0.1..0.1))).collect();
                let dir: Vec<DVector<f64>> =
                    (0..2).map(|_| DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0))).collect();
                let h = 1e-5;
                let shift = |s: f64| -> Vec<DVector<f64>> {
                    alpha.iter().zip(&dir).map(|(a, e)| a + e * s).collect()
                };
                let (_, gp) = inner_objective(&p, &theta, &shift(h)).unwrap();
                let (_, gm) = inner_objective(&p, &theta, &shift(-h)).unwrap();
                let quad: f64 = (0..2).map(|r| dir[r].dot(&(&gp[r] - &gm[r])) / (2.0 * h)).sum();
                assert!(quad < 0.0, "{d}: {quad}");
            }
        }
    }

    #[test]
    fn heavy_regularization_pins_alpha_to_zero() {
        let inst = random_instance(8, 37);
        let p = inst.problem(GelDivergence::Chi2, 1e6);
        let theta = [0.4, 0.1];
        let a = chi2_inner_closed_form(&p, &theta).unwrap();
        assert!(a.iter().all(|x| x.amax() < 1e-6));
        let sol = inner_solve(&p, &theta).unwrap();
        assert!((sol.value + 0.5).abs() < 1e-6);
        assert!(sol.alpha(&inst.grams).iter().all(|x| x.amax() < 1e-6));
    }

    #[test]
    fn iterative_inner_matches_closed_form() {
        let mut rng = RngStream::new(38, 0);
        for k in 0..10 {
            let n = 5 + 3 * (k % 5);
            let inst = random_instance(n, 100 + k as u64);
            let lambda = [0.01, 0.1, 1.0][k % 3];
            let p = inst.problem(GelDivergence::Chi2, lambda);
            let theta = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let closed = chi2_inner_closed_form(&p, &theta).unwrap();
            let (cv, _) = inner_objective(&p, &theta, &closed).unwrap();
            let sol = inner_solve(&p, &theta).unwrap();
            assert!((cv - sol.value).abs() <= 1e-6, "closed {cv} vs iterative {}", sol.value);
            assert!(sol.value >= -0.5 - 1e-12);
        }
    }

    #[test]
    fn inner_value_bounded_below_by_zero_instrument() {
        let inst = random_instance(9, 39);
        for d in GelDivergence::ALL {
            let p = inst.problem(d, 0.05);
            let sol = inner_solve(&p, &[0.2, -0.4]).unwrap();
            assert!(sol.value >= d.phi(0.0) - 1e-12);
            if let Some(u) = d.feasible_upper(9) {
                assert!(sol.v.iter().all(|&v| v <= u));
            }
        }
    }

    #[test]
    fn danskin_gradient_matches_finite_differences() {
        let inst = random_instance(10, 40);
        let mut rng = RngStream::new(41, 0);
        for d in GelDivergence::ALL {
            let p = inst.problem(d, 0.1);
            for _ in 0..3 {
                let theta = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let (_, g) = profile_gradient(&p, &theta).unwrap();
                let h = 1e-5;
                for j in 0..2 {
                    let mut tp = theta;
                    let mut tm = theta;
                    tp[j] += h;
                    tm[j] -= h;
                    let fd = (inner_solve(&p, &tp).unwrap().value - inner_solve(&p, &tm).unwrap().value) / (2.0 * h);
                    assert!((fd - g[j]).abs() <= 1e-4 * g[j].abs().max(1e-3), "{d}: fd {fd} vs {}", g[j]);
                }
            }
        }
    }

    #[test]
    fn perfect_fit_is_stationary() {
        let (data, _) = HeteroskedasticDgp::noiseless().sample(30, &mut RngStream::new(42, 0)).unwrap();
        let mf = ResidualMoment::new(LinearModel::new(1, false));
        let grams = GramSet::median_rbf(&data, 1).unwrap();
        let p = KernelFgelProblem::new(&data, &mf, &grams, GelDivergence::Kl, 0.1, vec![0.0]).unwrap();
        let (r, g) = profile_gradient(&p, &[1.7]).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
        assert!(g[0].abs() < 1e-12);
    }

    #[test]
    fn profile_is_permutation_invariant() {
        let inst = random_instance(12, 43);
        let perm: Vec<usize> = (0..12).rev().collect();
        let pdata = inst.data.permuted(&perm).unwrap();
        let pgrams = GramSet::rbf(&pdata.z_matrix(), 2, inst.grams.gammas()[0]).unwrap();
        for d in [GelDivergence::Chi2, GelDivergence::Kl] {
            let a = inst.problem(d, 0.1);
            let b = KernelFgelProblem::new(&pdata, &TwoMoment, &pgrams, d, 0.1, vec![0.0, 0.0]).unwrap();
            let (ra, ga) = profile_gradient(&a, &[0.3, 0.2]).unwrap();
            let (rb, gb) = profile_gradient(&b, &[0.3, 0.2]).unwrap();
            assert!((ra - rb).abs() < 1e-10);
            assert!(ga.iter().zip(&gb).all(|(x, y)| (x - y).abs() < 1e-10), "{ga:?} {gb:?}");
        }
    }

    #[test]
    fn noiseless_heteroskedastic_recovers_theta() {
        let (data, _) = HeteroskedasticDgp::noiseless().sample(200, &mut RngStream::new(44, 0)).unwrap();
        let mf = ResidualMoment::new(LinearModel::new(1, false));
        let grams = GramSet::median_rbf(&data, 1).unwrap();
        for d in GelDivergence::ALL {
            let p = KernelFgelProblem::new(&data, &mf, &grams, d, 0.01, vec![0.5]).unwrap();
            let res = estimate(&p).unwrap();
            assert!((res.theta_hat[0] - 1.7).abs() < 1e-4, "{d}: {:?}", res.theta_hat);
            let s: f64 = res.implied_p.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(res.trace.windows(2).all(|w| w[1].1 <= w[0].1));
        }
    }

    #[test]
    fn estimate_is_permutation_invariant() {
        let (data, _) = HeteroskedasticDgp::default().sample(60, &mut RngStream::new(45, 0)).unwrap();
        let perm: Vec<usize> = (0..60).map(|i| (i * 7) % 60).collect();
        let pdata = data.permuted(&perm).unwrap();
        let mf = ResidualMoment::new(LinearModel::new(1, false));
        let ga = GramSet::median_rbf(&data, 1).unwrap();
        let gb = GramSet::median_rbf(&pdata, 1).unwrap();
        let a = estimate(&KernelFgelProblem::new(&data, &mf, &ga, GelDivergence::Chi2, 0.01, vec![1.0]).unwrap()).unwrap();
        let b = estimate(&KernelFgelProblem::new(&pdata, &mf, &gb, GelDivergence::Chi2, 0.01, vec![1.0]).unwrap()).unwrap();
        assert!((a.theta_hat[0] - b.theta_hat[0]).abs() < 1e-8, "{:?} {:?}", a.theta_hat, b.theta_hat);
    }

    #[test]
    fn problem_validates_dimensions() {
        let (data, mf, grams) = unit();
        assert!(KernelFgelProblem::new(&data, &mf, &grams, GelDivergence::Chi2, 1.0, vec![]).is_err());
        assert!(KernelFgelProblem::new(&data, &mf, &grams, GelDivergence::Chi2, -1.0, vec![0.0]).is_err());
        let g2 = GramSet::from_matrices(vec![DMatrix::identity(2, 2)]).unwrap();
        assert!(KernelFgelProblem::new(&data, &mf, &g2, GelDivergence::Chi2, 1.0, vec![0.0]).is_err());
    }
}
