//! Hyperparameter selection by validation loss over a grid of
//! (λ, divergence) candidates.

use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MomentFunction, MomentTable};
use crate::divergence::GelDivergence;
use crate::error::{FgelError, Result};
use crate::kernel::GramSet;

/// Validation MMR loss (1/n²) Σ_r ψ_rᵀK_rψ_r with the dense Gram matrices.
pub fn mmr_validation_loss(theta: &[f64], data: &Dataset, moments: &dyn MomentFunction, grams: &GramSet) -> Result<f64> {
    let t = MomentTable::evaluate(data, moments, theta, false)?;
    if grams.n() != t.n() || grams.m() != t.m() {
        return Err(FgelError::DimensionMismatch {
            context: "validation Gram set",
            expected: t.n(),
            actual: grams.n(),
        });
    }
    let n = t.n();
    let mut total = 0.0;
    for (r, k) in grams.mats().iter().enumerate() {
        let psi = t.component(r);
        for i in 0..n {
            let ki = k.column(i);
            let inner: f64 = (0..n).map(|j| ki[j] * psi[j]).sum();
            total += psi[i] * inner;
        }
    }
    Ok(total / (n * n) as f64)
}

/// Mean squared moment (1/n) Σ_i ‖ψ(x_i; θ)‖².
pub fn mse_validation_loss(theta: &[f64], data: &Dataset, moments: &dyn MomentFunction) -> Result<f64> {
    let t = MomentTable::evaluate(data, moments, theta, false)?;
    let s: f64 = (0..t.n()).map(|i| t.psi_row(i).iter().map(|v| v * v).sum::<f64>()).sum();
    Ok(s / t.n() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    #[default]
    Mmr,
    Mse,
}

impl FromStr for Scorer {
    type Err = FgelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mmr" => Ok(Scorer::Mmr),
            "mse" => Ok(Scorer::Mse),
            other => Err(FgelError::UnknownName {
                kind: "scorer",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuningGrid {
    pub lambdas: Vec<f64>,
    pub divergences: Vec<GelDivergence>,
}

impl Default for TuningGrid {
    fn default() -> Self {
        Self {
            lambdas: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            divergences: vec![GelDivergence::Chi2, GelDivergence::El, GelDivergence::Kl],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub index: usize,
    pub lambda: f64,
    pub divergence: GelDivergence,
}

impl TuningGrid {
    pub fn new(lambdas: Vec<f64>, divergences: Vec<GelDivergence>) -> Result<Self> {
        if lambdas.is_empty() || divergences.is_empty() {
            return Err(FgelError::InvalidArgument("tuning grid is empty".into()));
        }
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(FgelError::InvalidArgument("grid lambdas must be finite and nonnegative".into()));
        }
        Ok(Self { lambdas, divergences })
    }

    /// Divergence-major order.
    pub fn candidates(&self) -> Vec<Candidate> {
        let mut out = Vec::with_capacity(self.lambdas.len() * self.divergences.len());
        for &divergence in &self.divergences {
            for &lambda in &self.lambdas {
                out.push(Candidate {
                    index: out.len(),
                    lambda,
                    divergence,
                });
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct CandidateReport {
    pub candidate: Candidate,
    pub theta: Option<Vec<f64>>,
    /// Infinite when the fit or the scoring failed.
    pub val_loss: f64,
    pub train_seconds: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct TuningReport {
    pub rows: Vec<CandidateReport>,
    pub best: usize,
}

impl TuningReport {
    pub fn best(&self) -> &CandidateReport {
        &self.rows[self.best]
    }

    pub fn best_theta(&self) -> &[f64] {
        self.rows[self.best].theta.as_deref().expect("winner has a fit")
    }
}

/// Fits every candidate on the training data through `fit`, scores it on the
/// validation data and returns the report in grid order. The first minimal
/// loss wins.
pub fn tune<F>(
    validation: &Dataset,
    moments: &dyn MomentFunction,
    grid: &TuningGrid,
    scorer: Scorer,
    fit: F,
) -> Result<TuningReport>
where
    F: Fn(&Candidate) -> Result<Vec<f64>> + Sync,
{
    let candidates = grid.candidates();
    if candidates.is_empty() {
        return Err(FgelError::InvalidArgument("tuning grid is empty".into()));
    }
    let val_grams = match scorer {
        Scorer::Mmr => Some(GramSet::median_rbf(validation, moments.dim())?),
        Scorer::Mse => None,
    };
    let score = |theta: &[f64]| match &val_grams {
        Some(g) => mmr_validation_loss(theta, validation, moments, g),
        None => mse_validation_loss(theta, validation, moments),
    };
    let rows: Vec<CandidateReport> = candidates
        .par_iter()
        .map(|c| {
            let start = Instant::now();
            let fitted = fit(c);
            let train_seconds = start.elapsed().as_secs_f64();
            let scored = fitted.and_then(|theta| {
                let loss = score(&theta)?;
                if !loss.is_finite() {
                    return Err(FgelError::NonFinite("validation loss"));
                }
                Ok((theta, loss))
            });
            match scored {
                Ok((theta, loss)) => CandidateReport {
                    candidate: *c,
                    theta: Some(theta),
                    val_loss: loss,
                    train_seconds,
                    error: None,
                },
                Err(e) => CandidateReport {
                    candidate: *c,
                    theta: None,
                    val_loss: f64::INFINITY,
                    train_seconds,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let mut best: Option<usize> = None;
    for (k, row) in rows.iter().enumerate() {
        if row.theta.is_some() && best.is_none_or(|b| row.val_loss < rows[b].val_loss) {
            best = Some(k);
        }
    }
    let best = best.ok_or(FgelError::AllCandidatesFailed)?;
    Ok(TuningReport { rows, best })
}
