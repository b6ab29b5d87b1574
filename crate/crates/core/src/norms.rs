//! Conventional Layernorm, RMSNorm and max-shifted Softmax, together with the
//! collective reductions (the denominators) that the fused paths defer.

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::tensor::RowVector;

/// Trainable Layernorm scale `γ`, bias `β` and the stabilizer `ε > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayerNormRepr", into = "LayerNormRepr")]
pub struct LayerNormParams {
    gamma: RowVector,
    beta: RowVector,
    epsilon: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerNormRepr {
    gamma: RowVector,
    beta: RowVector,
    epsilon: f64,
}

impl TryFrom<LayerNormRepr> for LayerNormParams {
    type Error = Error;

    fn try_from(r: LayerNormRepr) -> Result<Self> {
        Self::new(r.gamma, r.beta, r.epsilon)
    }
}

impl From<LayerNormParams> for LayerNormRepr {
    fn from(p: LayerNormParams) -> Self {
        Self {
            gamma: p.gamma,
            beta: p.beta,
            epsilon: p.epsilon,
        }
    }
}

impl LayerNormParams {
    pub fn new(gamma: RowVector, beta: RowVector, epsilon: f64) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(mismatch("layernorm params", gamma.len(), beta.len()));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "layernorm epsilon must be positive and finite, got {epsilon}"
            )));
        }
        Ok(Self {
            gamma,
            beta,
            epsilon,
        })
    }

    /// `γ = 1⃗`, `β = 0⃗`.
    pub fn identity(n: usize, epsilon: f64) -> Result<Self> {
        Self::new(RowVector::filled(n, 1.0), RowVector::zeros(n), epsilon)
    }

    pub fn gamma(&self) -> &RowVector {
        &self.gamma
    }

    pub fn beta(&self) -> &RowVector {
        &self.beta
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }
}

/// RMSNorm scale `γ` and an optional stabilizer `ε ≥ 0` (zero unless set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RmsNormRepr", into = "RmsNormRepr")]
pub struct RmsNormParams {
    gamma: RowVector,
    epsilon: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RmsNormRepr {
    gamma: RowVector,
    #[serde(default)]
    epsilon: f64,
}

impl TryFrom<RmsNormRepr> for RmsNormParams {
    type Error = Error;

    fn try_from(r: RmsNormRepr) -> Result<Self> {
        Self::new(r.gamma, r.epsilon)
    }
}

impl From<RmsNormParams> for RmsNormRepr {
    fn from(p: RmsNormParams) -> Self {
        Self {
            gamma: p.gamma,
            epsilon: p.epsilon,
        }
    }
}

impl RmsNormParams {
    pub fn new(gamma: RowVector, epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "rmsnorm epsilon must be non-negative and finite, got {epsilon}"
            )));
        }
        Ok(Self { gamma, epsilon })
    }

    pub fn gamma(&self) -> &RowVector {
        &self.gamma
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }
}

/// Population mean and variance of a row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentStats {
    pub mean: f64,
    pub variance: f64,
}

/// Mean and population variance (divisor `n`), computed in two passes.
pub fn moments(x: &RowVector) -> MomentStats {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let variance = x.iter().map(|v| v - mean).fold(0.0, |acc, d| acc + d * d) / n;
    MomentStats { mean, variance }
}

/// The Layernorm collective: `√(σ²(x) + ε)`.
pub fn layernorm_denominator(x: &RowVector, epsilon: f64) -> f64 {
    (moments(x).variance + epsilon).sqrt()
}

/// The RMSNorm collective: `√(x·xᵀ/n + ε)`.
pub fn rms_denominator(x: &RowVector, epsilon: f64) -> Result<f64> {
    let r = (x.dot_self() / x.len() as f64 + epsilon).sqrt();
    if r > 0.0 {
        Ok(r)
    } else {
        Err(Error::InvalidInput(
            "rmsnorm of an all-zero vector with epsilon = 0 divides by zero".into(),
        ))
    }
}

/// `((x − x̄1) / √(σ² + ε)) ⊙ γ + β`.
pub fn layernorm(x: &RowVector, p: &LayerNormParams) -> Result<RowVector> {
    if x.len() != p.dim() {
        return Err(mismatch("layernorm", p.dim(), x.len()));
    }
    let stats = moments(x);
    let denom = (stats.variance + p.epsilon).sqrt();
    Ok(RowVector::from_raw(
        x.iter()
            .zip(p.gamma.iter().zip(p.beta.iter()))
            .map(|(v, (g, b))| (v - stats.mean) / denom * g + b)
            .collect(),
    ))
}

/// `(x / √(x·xᵀ/n + ε)) ⊙ γ`.
pub fn rmsnorm(x: &RowVector, p: &RmsNormParams) -> Result<RowVector> {
    if x.len() != p.dim() {
        return Err(mismatch("rmsnorm", p.dim(), x.len()));
    }
    let r = rms_denominator(x, p.epsilon)?;
    Ok(RowVector::from_raw(
        x.iter()
            .zip(p.gamma.iter())
            .map(|(v, g)| v / r * g)
            .collect(),
    ))
}

/// Shifted exponentials `e^{xᵢ − max x}` and their sum.
///
/// The sum is the Softmax collective; the numerators are the element-wise part.
pub fn softmax_numerators(x: &RowVector) -> (RowVector, f64) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let numerators: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let denominator = numerators.iter().fold(0.0, |acc, v| acc + v);
    (RowVector::from_raw(numerators), denominator)
}

/// Softmax with max subtraction. Finite for every finite input.
pub fn softmax_stable(x: &RowVector) -> RowVector {
    let (numerators, denominator) = softmax_numerators(x);
    RowVector::from_raw(numerators.iter().map(|v| v / denominator).collect())
}
