use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::{Dataset, RngStream};
use crate::error::{FgelError, Result};

/// True slope of the heteroskedastic regression problem.
pub const HETEROSKEDASTIC_THETA: f64 = 1.7;

/// Conditional noise standard deviation of the heteroskedastic problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NoiseProfile {
    /// σ(x) = 5x²
    #[default]
    FiveSquare,
    /// σ(x) = 1 + x²; keeps the conditional variance bounded away from zero.
    OnePlusSquare,
}

impl NoiseProfile {
    pub fn sd(self, x: f64) -> f64 {
        match self {
            NoiseProfile::FiveSquare => 5.0 * x * x,
            NoiseProfile::OnePlusSquare => 1.0 + x * x,
        }
    }
}

/// y = θ₀x + ε, x ~ U[-1.5, 1.5], ε | x ~ N(0, σ(x)²), instrument z = x.
#[derive(Clone, Copy, Debug)]
pub struct HeteroskedasticDgp {
    pub noise: NoiseProfile,
    /// Multiplies ε; zero gives noiseless data.
    pub noise_scale: f64,
}

impl Default for HeteroskedasticDgp {
    fn default() -> Self {
        Self {
            noise: NoiseProfile::FiveSquare,
            noise_scale: 1.0,
        }
    }
}

impl HeteroskedasticDgp {
    pub fn noiseless() -> Self {
        Self {
            noise_scale: 0.0,
            ..Self::default()
        }
    }

    /// Returns the dataset (x-block `[x, y]`, z-block `[x]`) and θ₀.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<(Dataset, f64)> {
        if n == 0 {
            return Err(FgelError::InvalidArgument("n must be at least 1".into()));
        }
        let unif = Uniform::new_inclusive(-1.5, 1.5).expect("valid range");
        let mut x = Vec::with_capacity(2 * n);
        let mut z = Vec::with_capacity(n);
        for _ in 0..n {
            let xi: f64 = unif.sample(rng);
            let eps: f64 = StandardNormal.sample(rng);
            let yi = xi * HETEROSKEDASTIC_THETA + self.noise_scale * self.noise.sd(xi) * eps;
            x.push(xi);
            x.push(yi);
            z.push(xi);
        }
        Ok((Dataset::from_rows(n, 2, x, 1, z)?, HETEROSKEDASTIC_THETA))
    }
}

pub fn gen_heteroskedastic(n: usize, rng: &mut RngStream) -> Result<(Dataset, f64)> {
    HeteroskedasticDgp::default().sample(n, rng)
}

/// Structural functions of the IV problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum F0 {
    Sin,
    Abs,
    Linear,
    Step,
}

impl F0 {
    pub const ALL: [F0; 4] = [F0::Abs, F0::Step, F0::Sin, F0::Linear];

    pub fn eval(self, x: f64) -> f64 {
        match self {
            F0::Sin => x.sin(),
            F0::Abs => x.abs(),
            F0::Linear => x,
            F0::Step => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            F0::Sin => "sin",
            F0::Abs => "abs",
            F0::Linear => "linear",
            F0::Step => "step",
        }
    }
}

impl fmt::Display for F0 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for F0 {
    type Err = FgelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sin" => Ok(F0::Sin),
            "abs" => Ok(F0::Abs),
            "linear" => Ok(F0::Linear),
            "step" => Ok(F0::Step),
            other => Err(FgelError::UnknownName {
                kind: "f0",
                name: other.to_string(),
            }),
        }
    }
}

/// y = f₀(x) + e + δ, x = z + e + γ, z ~ U[-3, 3], e ~ N(0, 1),
/// γ, δ ~ N(0, perturbation_sd²).
#[derive(Clone, Copy, Debug)]
pub struct IvDgp {
    pub f0: F0,
    /// Multiplies e, γ and δ; zero gives noiseless data.
    pub noise_scale: f64,
    pub perturbation_sd: f64,
}

impl IvDgp {
    pub fn new(f0: F0) -> Self {
        Self {
            f0,
            noise_scale: 1.0,
            perturbation_sd: 0.1,
        }
    }

    pub fn noiseless(f0: F0) -> Self {
        Self {
            noise_scale: 0.0,
            ..Self::new(f0)
        }
    }

    /// Returns the dataset with x-block `[x, y]` and z-block `[z]`.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Dataset> {
        if n == 0 {
            return Err(FgelError::InvalidArgument("n must be at least 1".into()));
        }
        let unif = Uniform::new_inclusive(-3.0, 3.0).expect("valid range");
        let mut x = Vec::with_capacity(2 * n);
        let mut z = Vec::with_capacity(n);
        for _ in 0..n {
            let zi: f64 = unif.sample(rng);
            let e: f64 = rng.sample(StandardNormal);
            let gamma: f64 = rng.sample(StandardNormal);
            let delta: f64 = rng.sample(StandardNormal);
            let s = self.noise_scale;
            let xi = zi + s * (e + self.perturbation_sd * gamma);
            let yi = self.f0.eval(xi) + s * (e + self.perturbation_sd * delta);
            x.push(xi);
            x.push(yi);
            z.push(zi);
        }
        Dataset::from_rows(n, 2, x, 1, z)
    }
}

pub fn gen_iv(n: usize, f0: F0, rng: &mut RngStream) -> Result<Dataset> {
    IvDgp::new(f0).sample(n, rng)
}
