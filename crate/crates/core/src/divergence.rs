//! GEL functions φ for the χ², empirical-likelihood and exponential-tilting
//! (KL) divergences, plus the quadratic member equivalent to kernel VMM.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FgelError, Result};

/// A concave GEL function φ normalized so that φ₁(0) = φ₂(0) = −1
/// (VMM-equivalent member excepted, which has φ₂ = −½).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GelDivergence {
    Chi2,
    El,
    Kl,
    VmmEquiv,
}

impl GelDivergence {
    pub const ALL: [GelDivergence; 4] = [Self::Chi2, Self::El, Self::Kl, Self::VmmEquiv];

    pub fn name(self) -> &'static str {
        match self {
            Self::Chi2 => "chi2",
            Self::El => "el",
            Self::Kl => "kl",
            Self::VmmEquiv => "vmm_equiv",
        }
    }

    /// φ(v); `-inf` outside the domain.
    pub fn phi(self, v: f64) -> f64 {
        match self {
            Self::Chi2 => -0.5 * (1.0 + v) * (1.0 + v),
            Self::El => {
                if v < 1.0 {
                    (-v).ln_1p()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Self::Kl => -v.exp(),
            Self::VmmEquiv => {
                let a = 1.0 + 0.5 * v;
                -a * a
            }
        }
    }

    pub fn phi1(self, v: f64) -> f64 {
        match self {
            Self::Chi2 => -(1.0 + v),
            Self::El => -1.0 / (1.0 - v),
            Self::Kl => -v.exp(),
            Self::VmmEquiv => -(1.0 + 0.5 * v),
        }
    }

    pub fn phi2(self, v: f64) -> f64 {
        match self {
            Self::Chi2 => -1.0,
            Self::El => -1.0 / ((1.0 - v) * (1.0 - v)),
            Self::Kl => -v.exp(),
            Self::VmmEquiv => -0.5,
        }
    }

    /// Open upper bound of dom(φ), if any.
    pub fn domain_upper(self) -> Option<f64> {
        match self {
            Self::El => Some(1.0),
            _ => None,
        }
    }

    /// Upper bound on v enforced during estimation on n samples.
    pub fn feasible_upper(self, n: usize) -> Option<f64> {
        match self {
            Self::El => {
                let slack = if n >= 2 { 1.0 / n as f64 } else { 0.0 };
                Some(1.0 - slack - 1e-10)
            }
            _ => None,
        }
    }

    pub fn in_domain(self, v: f64) -> bool {
        v.is_finite() && self.domain_upper().is_none_or(|u| v < u)
    }

    /// Unnormalized implied weight −φ₁(v) = (φ*)′(v).
    pub fn implied_weight(self, v: f64) -> f64 {
        -self.phi1(v)
    }

    /// Constant c with (Legendre transform of the normalized generator)(v) =
    /// conjugate_value(v) − c. Generators: χ² ½(p−1)², EL −log p + p − 1,
    /// KL p log p − p + 1, VMM (p−1)².
    pub fn conjugate_offset(self) -> f64 {
        match self {
            Self::Chi2 => 0.5,
            Self::El => 0.0,
            Self::Kl => 1.0,
            Self::VmmEquiv => 1.0,
        }
    }
}

impl fmt::Display for GelDivergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GelDivergence {
    type Err = FgelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chi2" => Ok(Self::Chi2),
            "el" => Ok(Self::El),
            "kl" => Ok(Self::Kl),
            "vmm_equiv" => Ok(Self::VmmEquiv),
            other => Err(FgelError::UnknownName {
                kind: "divergence",
                name: other.to_string(),
            }),
        }
    }
}

pub fn make_divergence(name: &str) -> Result<GelDivergence> {
    name.parse()
}

/// φ*(v) = −φ(v): χ² ½(1+v)², EL −log(1−v), KL eᵛ, VMM (1+v/2)².
pub fn conjugate_value(d: GelDivergence, v: f64) -> Result<f64> {
    if !d.in_domain(v) {
        return Err(FgelError::Domain {
            divergence: d.name(),
            value: v,
            upper: d.domain_upper().unwrap_or(f64::INFINITY),
        });
    }
    Ok(-d.phi(v))
}

/// Normalized weights w_i / Σw with w_i = −φ₁(v_i).
pub fn implied_probabilities(d: GelDivergence, v: &[f64]) -> Result<Vec<f64>> {
    let mut w = Vec::with_capacity(v.len());
    for &vi in v {
        if !d.in_domain(vi) {
            return Err(FgelError::Domain {
                divergence: d.name(),
                value: vi,
                upper: d.domain_upper().unwrap_or(f64::INFINITY),
            });
        }
        w.push(d.implied_weight(vi));
    }
    let total: f64 = w.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(FgelError::NonpositiveWeight(total));
    }
    for x in &mut w {
        *x /= total;
    }
    Ok(w)
}
