use super::Dataset;
use crate::error::{FgelError, Result};

/// ψ: (sample, θ) ↦ ℝ^m together with its parameter Jacobian.
pub trait MomentFunction: Send + Sync {
    /// Number of restrictions m.
    fn dim(&self) -> usize;

    /// Number of parameters p.
    fn n_params(&self) -> usize;

    fn eval(&self, row: &[f64], theta: &[f64], out: &mut [f64]);

    /// Writes ∂ψ_r/∂θ_j at `out[r * p + j]`.
    fn jacobian(&self, row: &[f64], theta: &[f64], out: &mut [f64]);
}

/// ψ and (optionally) ∇_θψ evaluated on every sample of a dataset.
#[derive(Clone, Debug)]
pub struct MomentTable {
    n: usize,
    m: usize,
    p: usize,
    psi: Vec<f64>,
    jac: Option<Vec<f64>>,
}

impl MomentTable {
    pub fn evaluate(
        data: &Dataset,
        moments: &dyn MomentFunction,
        theta: &[f64],
        with_jacobian: bool,
    ) -> Result<Self> {
        let (n, m, p) = (data.n(), moments.dim(), moments.n_params());
        if theta.len() != p {
            return Err(FgelError::DimensionMismatch {
                context: "parameter vector",
                expected: p,
                actual: theta.len(),
            });
        }
        let mut psi = vec![0.0; n * m];
        for (i, chunk) in psi.chunks_mut(m).enumerate() {
            moments.eval(data.x_row(i), theta, chunk);
        }
        if psi.iter().any(|v| !v.is_finite()) {
            return Err(FgelError::NonFinite("moment function"));
        }
        let jac = if with_jacobian {
            let mut jac = vec![0.0; n * m * p];
            if p > 0 {
                for (i, chunk) in jac.chunks_mut(m * p).enumerate() {
                    moments.jacobian(data.x_row(i), theta, chunk);
                }
            }
            if jac.iter().any(|v| !v.is_finite()) {
                return Err(FgelError::NonFinite("moment jacobian"));
            }
            Some(jac)
        } else {
            None
        };
        Ok(Self { n, m, p, psi, jac })
    }

    /// Builds a table directly from ψ values (n × m, row-major); used when ψ
    /// is given rather than computed.
    pub fn from_values(n: usize, m: usize, psi: Vec<f64>) -> Result<Self> {
        if psi.len() != n * m {
            return Err(FgelError::DimensionMismatch {
                context: "moment values",
                expected: n * m,
                actual: psi.len(),
            });
        }
        Ok(Self {
            n,
            m,
            p: 0,
            psi,
            jac: None,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn psi(&self, i: usize, r: usize) -> f64 {
        self.psi[i * self.m + r]
    }

    pub fn psi_row(&self, i: usize) -> &[f64] {
        &self.psi[i * self.m..(i + 1) * self.m]
    }

    /// Component r across samples.
    pub fn component(&self, r: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.psi(i, r)).collect()
    }

    /// ∂ψ_r(x_i)/∂θ_j; panics if the table was built without Jacobians.
    #[inline]
    pub fn jac(&self, i: usize, r: usize, j: usize) -> f64 {
        self.jac.as_ref().expect("table built without jacobian")[(i * self.m + r) * self.p + j]
    }

    pub fn has_jacobian(&self) -> bool {
        self.jac.is_some()
    }
}

/// A scalar regression function f_θ(x).
pub trait Model: Send + Sync {
    fn n_params(&self) -> usize;

    fn predict(&self, x: &[f64], theta: &[f64]) -> f64;

    /// Returns f_θ(x) and writes ∇_θ f_θ(x) into `grad`.
    fn predict_with_gradient(&self, x: &[f64], theta: &[f64], grad: &mut [f64]) -> f64;

    /// Basis expansion for models that are linear in θ.
    fn features(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// ψ(x, y; θ) = y − f_θ(x), where y is the last entry of the row.
#[derive(Clone, Debug)]
pub struct ResidualMoment<M> {
    pub model: M,
}

impl<M: Model> ResidualMoment<M> {
    pub fn new(model: M) -> Self {
        Self { model }
    }
}

impl<M: Model> MomentFunction for ResidualMoment<M> {
    fn dim(&self) -> usize {
        1
    }

    fn n_params(&self) -> usize {
        self.model.n_params()
    }

    fn eval(&self, row: &[f64], theta: &[f64], out: &mut [f64]) {
        let (x, y) = row.split_at(row.len() - 1);
        out[0] = y[0] - self.model.predict(x, theta);
    }

    fn jacobian(&self, row: &[f64], theta: &[f64], out: &mut [f64]) {
        let x = &row[..row.len() - 1];
        self.model.predict_with_gradient(x, theta, out);
        out.iter_mut().for_each(|g| *g = -*g);
    }
}

/// f_θ(x) = θᵀx (+ intercept as the first parameter).
#[derive(Clone, Copy, Debug)]
pub struct LinearModel {
    pub inputs: usize,
    pub intercept: bool,
}

impl LinearModel {
    pub fn new(inputs: usize, intercept: bool) -> Self {
        Self { inputs, intercept }
    }
}

impl Model for LinearModel {
    fn n_params(&self) -> usize {
        self.inputs + usize::from(self.intercept)
    }

    fn predict(&self, x: &[f64], theta: &[f64]) -> f64 {
        let (b, w) = if self.intercept {
            (theta[0], &theta[1..])
        } else {
            (0.0, theta)
        };
        b + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    fn predict_with_gradient(&self, x: &[f64], theta: &[f64], grad: &mut [f64]) -> f64 {
        let feats = self.features(x).expect("linear model");
        grad.copy_from_slice(&feats);
        self.predict(x, theta)
    }

    fn features(&self, x: &[f64]) -> Option<Vec<f64>> {
        let mut f = Vec::with_capacity(self.n_params());
        if self.intercept {
            f.push(1.0);
        }
        f.extend_from_slice(&x[..self.inputs]);
        Some(f)
    }
}

/// Piecewise-linear scalar model
/// f_θ(x) = θ₀ + θ₁x + Σ_k θ_{k+2}·max(0, x − t_k).
#[derive(Clone, Debug)]
pub struct HingeModel {
    pub knots: Vec<f64>,
}

impl HingeModel {
    pub fn new(knots: Vec<f64>) -> Self {
        Self { knots }
    }

    /// Knots at −1, 0, 1.
    pub fn unit_grid() -> Self {
        Self::new(vec![-1.0, 0.0, 1.0])
    }
}

impl Model for HingeModel {
    fn n_params(&self) -> usize {
        2 + self.knots.len()
    }

    fn predict(&self, x: &[f64], theta: &[f64]) -> f64 {
        self.features(x)
            .expect("hinge model")
            .iter()
            .zip(theta)
            .map(|(f, t)| f * t)
            .sum()
    }

    fn predict_with_gradient(&self, x: &[f64], theta: &[f64], grad: &mut [f64]) -> f64 {
        let feats = self.features(x).expect("hinge model");
        grad.copy_from_slice(&feats);
        feats.iter().zip(theta).map(|(f, t)| f * t).sum()
    }

    fn features(&self, x: &[f64]) -> Option<Vec<f64>> {
        let x = x[0];
        let mut f = Vec::with_capacity(self.n_params());
        f.push(1.0);
        f.push(x);
        f.extend(self.knots.iter().map(|t| (x - t).max(0.0)));
        Some(f)
    }
}

/// ψ_r(x; θ) = x_r − θ_r for the first `dims` columns.
#[derive(Clone, Copy, Debug)]
pub struct MeanMoment {
    pub dims: usize,
}

impl MomentFunction for MeanMoment {
    fn dim(&self) -> usize {
        self.dims
    }

    fn n_params(&self) -> usize {
        self.dims
    }

    fn eval(&self, row: &[f64], theta: &[f64], out: &mut [f64]) {
        for r in 0..self.dims {
            out[r] = row[r] - theta[r];
        }
    }

    fn jacobian(&self, _row: &[f64], _theta: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..self.dims {
            out[r * self.dims + r] = -1.0;
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{HeteroskedasticDgp, RngStream};
    use rand::Rng;

    /// Central-difference Jacobian, row-major m × p.
    pub(crate) fn fd_jacobian(mf: &dyn MomentFunction, row: &[f64], theta: &[f64], h: f64) -> Vec<f64> {
        let (m, p) = (mf.dim(), mf.n_params());
        let mut out = vec![0.0; m * p];
        let mut plus = vec![0.0; m];
        let mut minus = vec![0.0; m];
        let mut t = theta.to_vec();
        for j in 0..p {
            t[j] = theta[j] + h;
            mf.eval(row, &t, &mut plus);
            t[j] = theta[j] - h;
            mf.eval(row, &t, &mut minus);
            t[j] = theta[j];
            for r in 0..m {
                out[r * p + j] = (plus[r] - minus[r]) / (2.0 * h);
            }
        }
        out
    }

    fn check_jacobian(mf: &dyn MomentFunction, rows: &[Vec<f64>], thetas: &[Vec<f64>]) {
        let p = mf.n_params();
        let mut an = vec![0.0; mf.dim() * p];
        for (row, theta) in rows.iter().zip(thetas) {
            mf.jacobian(row, theta, &mut an);
            let fd = fd_jacobian(mf, row, theta, 1e-5);
            for (a, f) in an.iter().zip(&fd) {
                assert!((a - f).abs() <= 1e-5 * (1.0 + a.abs()), "analytic {a} vs fd {f}");
            }
        }
    }

    #[test]
    fn linear_residual_jacobian_matches_fd() {
        let mut rng = RngStream::new(11, 0);
        let mf = ResidualMoment::new(LinearModel::new(2, true));
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..3).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let thetas: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        check_jacobian(&mf, &rows, &thetas);
    }

    #[test]
    fn hinge_residual_jacobian_matches_fd() {
        let mut rng = RngStream::new(12, 0);
        let mf = ResidualMoment::new(HingeModel::unit_grid());
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0)])
            .collect();
        let thetas: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..mf.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        check_jacobian(&mf, &rows, &thetas);
    }

    #[test]
    fn residual_vanishes_on_noiseless_data() {
        let (ds, theta0) = HeteroskedasticDgp::noiseless()
            .sample(200, &mut RngStream::new(1, 1))
            .unwrap();
        let mf = ResidualMoment::new(LinearModel::new(1, false));
        let table = MomentTable::evaluate(&ds, &mf, &[theta0], true).unwrap();
        assert!((0..ds.n()).all(|i| table.psi(i, 0) == 0.0));
        assert_eq!(table.jac(3, 0, 0), -ds.x_row(3)[0]);
    }

    #[test]
    fn mean_moment() {
        let mf = MeanMoment { dims: 2 };
        let mut out = [0.0; 2];
        mf.eval(&[3.0, 5.0], &[1.0, 1.0], &mut out);
        assert_eq!(out, [2.0, 4.0]);
        let mut jac = [9.0; 4];
        mf.jacobian(&[3.0, 5.0], &[1.0, 1.0], &mut jac);
        assert_eq!(jac, [-1.0, 0.0, 0.0, -1.0]);
    }

    #[test]
    fn table_rejects_wrong_theta() {
        let (ds, _) = HeteroskedasticDgp::default()
            .sample(4, &mut RngStream::new(1, 1))
            .unwrap();
        let mf = ResidualMoment::new(LinearModel::new(1, false));
        assert!(MomentTable::evaluate(&ds, &mf, &[1.0, 2.0], false).is_err());
    }
}
