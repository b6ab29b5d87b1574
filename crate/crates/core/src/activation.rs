//! Point-wise MLP activations.

/// `√(2/π)`, the tanh-approximation GELU coefficient.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh-approximation GELU.
pub const GELU_CUBIC: f64 = 0.044_715;

/// `z · σ(z) = z / (1 + e^{−z})`.
pub fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

/// `0.5·z·(1 + tanh(√(2/π)·(z + 0.044715·z³)))`.
pub fn gelu_tanh(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_SQRT_2_OVER_PI * (z + GELU_CUBIC * z * z * z)).tanh())
}
