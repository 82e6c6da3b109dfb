//! RBF kernels on the instruments, the median-heuristic bandwidth, and Gram
//! matrices in the representer coordinates used by the kernel estimators.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{FgelError, Result};

/// Residual diagonal (relative to the largest kernel diagonal) at which the
/// pivoted Cholesky factorization stops. Entries of the dropped remainder are
/// bounded by this value, which is below the solver tolerances used here.
pub const FACTOR_TOL: f64 = 1e-13;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rows_of(z: &DMatrix<f64>) -> Vec<f64> {
    (0..z.nrows()).flat_map(|i| z.row(i).iter().copied().collect::<Vec<_>>()).collect()
}

fn median_from_rows(z: &[f64], n: usize, d: usize) -> Result<f64> {
    if n < 2 {
        return Err(FgelError::InvalidArgument("median heuristic needs two rows".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(FgelError::NonFinite("instrument sample"));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let s = sq_dist(&z[i * d..(i + 1) * d], &z[j * d..(j + 1) * d]);
            if s > 0.0 {
                dists.push(s);
            }
        }
    }
    if dists.is_empty() {
        return Err(FgelError::DegenerateSample);
    }
    let k = dists.len();
    let mid = k / 2;
    let (_, upper, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    let median = if k % 2 == 1 {
        upper
    } else {
        let lower = dists[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    Ok(1.0 / (2.0 * median))
}

/// γ = 1 / (2 · median of the nonzero pairwise squared distances).
pub fn median_heuristic(z: &DMatrix<f64>) -> Result<f64> {
    median_from_rows(&rows_of(z), z.nrows(), z.ncols())
}

fn rbf_from_rows(z: &[f64], n: usize, d: usize, gamma: f64) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        k[(j, j)] = 1.0;
        for i in 0..j {
            let v = (-gamma * sq_dist(&z[i * d..(i + 1) * d], &z[j * d..(j + 1) * d])).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(FgelError::InvalidArgument(format!("bandwidth must be positive, got {gamma}")));
    }
    Ok(())
}

/// K_ij = exp(−γ‖z_i − z_j‖²), filled from the upper triangle so the result is
/// exactly symmetric.
pub fn gram_matrix(z: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    check_gamma(gamma)?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(FgelError::NonFinite("instrument sample"));
    }
    Ok(rbf_from_rows(&rows_of(z), z.nrows(), z.ncols(), gamma))
}

/// Σ_r α_rᵀ K_r α_r, the squared RKHS norm of h = Σ_r Σ_i α_{r,i} k_r(z_i, ·) e_r.
pub fn rkhs_norm_sq(alpha: &[DVector<f64>], grams: &GramSet) -> Result<f64> {
    if alpha.len() != grams.m() {
        return Err(FgelError::DimensionMismatch {
            context: "instrument components",
            expected: grams.m(),
            actual: alpha.len(),
        });
    }
    let mut total = 0.0;
    for (a, k) in alpha.iter().zip(grams.mats()) {
        if a.len() != grams.n() {
            return Err(FgelError::DimensionMismatch {
                context: "representer coefficients",
                expected: grams.n(),
                actual: a.len(),
            });
        }
        total += a.dot(&(k * a));
    }
    Ok(total)
}

/// Low-rank factor K ≈ L Lᵀ from pivoted Cholesky.
///
/// The pivot rows of L form a lower-triangular block T, so α supported on the
/// pivots with Tᵀα_piv = β satisfies Lᵀα = β and Kα = Lβ.
#[derive(Clone, Debug)]
pub struct GramFactor {
    l: DMatrix<f64>,
    pivots: Vec<usize>,
}

impl GramFactor {
    pub fn rank(&self) -> usize {
        self.l.ncols()
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn pivots(&self) -> &[usize] {
        &self.pivots
    }

    /// L β
    pub fn apply(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.l * beta
    }

    /// Lᵀ w
    pub fn apply_t(&self, w: &DVector<f64>) -> DVector<f64> {
        self.l.tr_mul(w)
    }

    /// Representer coefficients α with Lᵀα = β, supported on the pivots.
    pub fn coefficients(&self, beta: &DVector<f64>) -> DVector<f64> {
        let r = self.rank();
        let mut tri = DMatrix::zeros(r, r);
        for (k, &p) in self.pivots.iter().enumerate() {
            for c in 0..r {
                tri[(k, c)] = self.l[(p, c)];
            }
        }
        // T is lower triangular; solve Tᵀ a = β.
        let a = tri
            .tr_solve_lower_triangular(beta)
            .unwrap_or_else(|| DVector::zeros(r));
        let mut alpha = DVector::zeros(self.l.nrows());
        for (k, &p) in self.pivots.iter().enumerate() {
            alpha[p] = a[k];
        }
        alpha
    }
}

/// Pivoted Cholesky of an n × n PSD matrix given by its diagonal and columns.
/// Ties in the pivot choice go to the smallest index.
fn pivoted_cholesky<F>(n: usize, diag: Vec<f64>, mut column: F, rel_tol: f64) -> GramFactor
where
    F: FnMut(usize, &mut [f64]),
{
    let mut d = diag;
    let max_diag = d.iter().copied().fold(0.0, f64::max);
    let tol = rel_tol * max_diag;
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut pivots = Vec::new();
    let mut used = vec![false; n];
    let mut kcol = vec![0.0; n];
    while pivots.len() < n {
        let mut best = None;
        for i in 0..n {
            if !used[i] && best.is_none_or(|b: usize| d[i] > d[b]) {
                best = Some(i);
            }
        }
        let Some(piv) = best else { break };
        if d[piv] <= tol {
            break;
        }
        column(piv, &mut kcol);
        let s = d[piv].sqrt();
        let mut new_col = kcol.clone();
        for prev in &cols {
            let lp = prev[piv];
            if lp != 0.0 {
                for (v, &q) in new_col.iter_mut().zip(prev) {
                    *v -= lp * q;
                }
            }
        }
        for (i, v) in new_col.iter_mut().enumerate() {
            *v = if used[i] { 0.0 } else { *v / s };
        }
        new_col[piv] = s;
        used[piv] = true;
        for i in 0..n {
            if used[i] {
                d[i] = 0.0;
            } else {
                d[i] -= new_col[i] * new_col[i];
            }
        }
        cols.push(new_col);
        pivots.push(piv);
    }
    let r = cols.len();
    let l = DMatrix::from_fn(n, r, |i, c| cols[c][i]);
    GramFactor { l, pivots }
}

#[derive(Clone, Debug)]
enum Source {
    Rbf { z: Vec<f64>, dz: usize },
    Explicit,
}

/// Per-component Gram matrices K_r on a common sample, with bandwidths.
///
/// Dense matrices and low-rank factors are built lazily; the estimators only
/// need the factors, the small-instance checks use the matrices.
#[derive(Debug)]
pub struct GramSet {
    n: usize,
    gammas: Vec<f64>,
    source: Source,
    mats: OnceLock<Vec<DMatrix<f64>>>,
    factors: OnceLock<Vec<GramFactor>>,
}

impl GramSet {
    /// m RBF components on the rows of `z`, all with bandwidth `gamma`.
    pub fn rbf(z: &DMatrix<f64>, m: usize, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(FgelError::NonFinite("instrument sample"));
        }
        if m == 0 || z.nrows() == 0 {
            return Err(FgelError::InvalidArgument("empty Gram set".into()));
        }
        Ok(Self {
            n: z.nrows(),
            gammas: vec![gamma; m],
            source: Source::Rbf {
                z: rows_of(z),
                dz: z.ncols(),
            },
            mats: OnceLock::new(),
            factors: OnceLock::new(),
        })
    }

    /// RBF Grams on the dataset's instruments with the median-heuristic bandwidth.
    pub fn median_rbf(data: &Dataset, m: usize) -> Result<Self> {
        let z = data.z_matrix();
        let gamma = median_heuristic(&z)?;
        Self::rbf(&z, m, gamma)
    }

    /// Wraps given symmetric PSD matrices (bandwidths recorded as NaN).
    pub fn from_matrices(mats: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = mats.first().map(|k| k.nrows()).unwrap_or(0);
        if n == 0 {
            return Err(FgelError::InvalidArgument("empty Gram set".into()));
        }
        for k in &mats {
            if k.nrows() != n || k.ncols() != n {
                return Err(FgelError::DimensionMismatch {
                    context: "Gram matrix",
                    expected: n,
                    actual: k.ncols(),
                });
            }
            if k.iter().any(|v| !v.is_finite()) {
                return Err(FgelError::NonFinite("Gram matrix"));
            }
            if (0..n).any(|i| (0..i).any(|j| k[(i, j)] != k[(j, i)])) {
                return Err(FgelError::InvalidArgument("Gram matrix not symmetric".into()));
            }
        }
        let gammas = vec![f64::NAN; mats.len()];
        let cell = OnceLock::new();
        let _ = cell.set(mats);
        Ok(Self {
            n,
            gammas,
            source: Source::Explicit,
            mats: cell,
            factors: OnceLock::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.gammas.len()
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn mats(&self) -> &[DMatrix<f64>] {
        self.mats.get_or_init(|| match &self.source {
            Source::Rbf { z, dz } => {
                let mut out: Vec<DMatrix<f64>> = Vec::with_capacity(self.m());
                for (r, &g) in self.gammas.iter().enumerate() {
                    match self.gammas[..r].iter().position(|&h| h == g) {
                        Some(prev) => {
                            let k = out[prev].clone();
                            out.push(k);
                        }
                        None => out.push(rbf_from_rows(z, self.n, *dz, g)),
                    }
                }
                out
            }
            Source::Explicit => unreachable!("explicit Gram sets are built with matrices"),
        })
    }

    pub fn factors(&self) -> &[GramFactor] {
        self.factors.get_or_init(|| {
            let n = self.n;
            let mut out: Vec<GramFactor> = Vec::with_capacity(self.m());
            for r in 0..self.m() {
                if let Source::Rbf { .. } = self.source {
                    if let Some(prev) = self.gammas[..r].iter().position(|&h| h == self.gammas[r]) {
                        let f = out[prev].clone();
                        out.push(f);
                        continue;
                    }
                }
                let f = match &self.source {
                    Source::Rbf { z, dz } => {
                        let g = self.gammas[r];
                        let d = *dz;
                        pivoted_cholesky(
                            n,
                            vec![1.0; n],
                            |j, col| {
                                let zj = &z[j * d..(j + 1) * d];
                                for (i, c) in col.iter_mut().enumerate() {
                                    *c = (-g * sq_dist(&z[i * d..(i + 1) * d], zj)).exp();
                                }
                            },
                            FACTOR_TOL,
                        )
                    }
                    Source::Explicit => {
                        let k = &self.mats()[r];
                        pivoted_cholesky(
                            n,
                            k.diagonal().iter().copied().collect(),
                            |j, col| col.copy_from_slice(k.column(j).as_slice()),
                            FACTOR_TOL,
                        )
                    }
                };
                out.push(f);
            }
            out
        })
    }
}
