//! Shared fixtures for unit tests.

use rand::Rng;

use crate::data::{Dataset, MomentFunction, RngStream};
use crate::divergence::GelDivergence;
use crate::fgel_kernel::KernelFgelProblem;
use crate::kernel::{median_heuristic, GramSet};

/// Two restrictions, two parameters, nonlinear in θ₁:
/// ψ₁ = y − θ₀x − θ₁x², ψ₂ = (y − θ₀x)·cos θ₁ − θ₁.
pub struct TwoMoment;

impl MomentFunction for TwoMoment {
    fn dim(&self) -> usize {
        2
    }

    fn n_params(&self) -> usize {
        2
    }

    fn eval(&self, row: &[f64], theta: &[f64], out: &mut [f64]) {
        let (x, y) = (row[0], row[1]);
        out[0] = y - theta[0] * x - theta[1] * x * x;
        out[1] = (y - theta[0] * x) * theta[1].cos() - theta[1];
    }

    fn jacobian(&self, row: &[f64], theta: &[f64], out: &mut [f64]) {
        let (x, y) = (row[0], row[1]);
        out[0] = -x;
        out[1] = -x * x;
        out[2] = -x * theta[1].cos();
        out[3] = -(y - theta[0] * x) * theta[1].sin() - 1.0;
    }
}

pub struct Instance {
    pub data: Dataset,
    pub grams: GramSet,
}

impl Instance {
    pub fn problem(&self, d: GelDivergence, lambda: f64) -> KernelFgelProblem<'_> {
        KernelFgelProblem::new(&self.data, &TwoMoment, &self.grams, d, lambda, vec![0.0, 0.0]).unwrap()
    }
}

pub fn random_instance(n: usize, seed: u64) -> Instance {
    let mut rng = RngStream::new(seed, 0);
    let mut x = Vec::with_capacity(2 * n);
    let mut z = Vec::with_capacity(n);
    for _ in 0..n {
        let xi: f64 = rng.random_range(-1.0..1.0);
        x.push(xi);
        x.push(0.5 * xi + 0.3 * rng.random_range(-1.0..1.0));
        z.push(xi + 0.2 * rng.random_range(-1.0..1.0));
    }
    let data = Dataset::from_rows(n, 2, x, 1, z).unwrap();
    let zm = data.z_matrix();
    let grams = GramSet::rbf(&zm, 2, median_heuristic(&zm).unwrap()).unwrap();
    Instance { data, grams }
}
