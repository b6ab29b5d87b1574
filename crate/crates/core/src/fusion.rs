//! Deferred normalization.
//!
//! Each normalization followed by a linear map is split into an element-wise
//! part, which is folded into the weights ahead of time or applied directly to
//! the input, and a scalar collective (the denominator). Because the linear map
//! commutes with a scalar, the matmul runs on the unnormalized row and the
//! denominator is applied to its output. Inside every fused function the
//! collective and the matmul read only the input row and never each other; the
//! two results meet only in [`deferred_scale`].

use serde::{Deserialize, Serialize};

use crate::activation::silu;
use crate::error::{mismatch, Error, Result};
use crate::norms::{
    layernorm_denominator, rms_denominator, softmax_numerators, LayerNormParams, RmsNormParams,
};
use crate::tensor::{hadamard, Matrix, RowVector};

/// Layernorm folded into the following linear layer:
/// `folded_weight = (I − E/n)·Γ·F`, `folded_bias = β·F`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldedLinear {
    pub folded_weight: Matrix,
    pub folded_bias: RowVector,
}

/// RMSNorm folded into the following linear layer: `folded_weight = Γ·F`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmsFoldedLinear {
    pub folded_weight: Matrix,
}

/// Gate, up and down projections of a SwiGLU MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LlamaMlpRepr", into = "LlamaMlpRepr")]
pub struct LlamaMlpWeights {
    w_gate: Matrix,
    w_up: Matrix,
    w_down: Matrix,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LlamaMlpRepr {
    w_gate: Matrix,
    w_up: Matrix,
    w_down: Matrix,
}

impl TryFrom<LlamaMlpRepr> for LlamaMlpWeights {
    type Error = Error;

    fn try_from(r: LlamaMlpRepr) -> Result<Self> {
        Self::new(r.w_gate, r.w_up, r.w_down)
    }
}

impl From<LlamaMlpWeights> for LlamaMlpRepr {
    fn from(w: LlamaMlpWeights) -> Self {
        Self {
            w_gate: w.w_gate,
            w_up: w.w_up,
            w_down: w.w_down,
        }
    }
}

impl LlamaMlpWeights {
    pub fn new(w_gate: Matrix, w_up: Matrix, w_down: Matrix) -> Result<Self> {
        if w_gate.shape() != w_up.shape() {
            return Err(mismatch(
                "llama mlp gate/up",
                format!("{:?}", w_gate.shape()),
                format!("{:?}", w_up.shape()),
            ));
        }
        if w_down.shape() != (w_gate.cols(), w_gate.rows()) {
            return Err(mismatch(
                "llama mlp down",
                format!("{:?}", (w_gate.cols(), w_gate.rows())),
                format!("{:?}", w_down.shape()),
            ));
        }
        Ok(Self {
            w_gate,
            w_up,
            w_down,
        })
    }

    pub fn w_gate(&self) -> &Matrix {
        &self.w_gate
    }

    pub fn w_up(&self) -> &Matrix {
        &self.w_up
    }

    pub fn w_down(&self) -> &Matrix {
        &self.w_down
    }

    pub fn hidden(&self) -> usize {
        self.w_gate.cols()
    }
}

/// Fold Layernorm's static matrices into `f` ahead of time.
///
/// `(I − E/n)·M` subtracts the column mean of `M` from every row, so the fold
/// is computed in `O(n·m)` without materializing `E`.
pub fn fold_layernorm_linear(p: &LayerNormParams, f: &Matrix) -> Result<FoldedLinear> {
    let n = p.dim();
    if f.rows() != n {
        return Err(mismatch("fold_layernorm_linear", n, f.rows()));
    }
    let scaled = scale_rows(p.gamma(), f);
    let means: Vec<f64> = scaled.column_sums().iter().map(|s| s / n as f64).collect();
    let mut data = Vec::with_capacity(n * f.cols());
    for row in scaled.rows_iter() {
        data.extend(row.iter().zip(&means).map(|(v, m)| v - m));
    }
    let folded_weight = Matrix::new(n, f.cols(), data)?;
    let folded_bias = p.beta().matmul(f)?;
    if !folded_bias.is_finite() {
        return Err(Error::InvalidInput("folded bias overflowed".into()));
    }
    Ok(FoldedLinear {
        folded_weight,
        folded_bias,
    })
}

/// `Γ·f`: row `i` of `f` scaled by `γᵢ`.
pub fn fold_rmsnorm_linear(p: &RmsNormParams, f: &Matrix) -> Result<RmsFoldedLinear> {
    if f.rows() != p.dim() {
        return Err(mismatch("fold_rmsnorm_linear", p.dim(), f.rows()));
    }
    let folded_weight = scale_rows(p.gamma(), f);
    if !folded_weight.is_finite() {
        return Err(Error::InvalidInput("folded weight overflowed".into()));
    }
    Ok(RmsFoldedLinear { folded_weight })
}

fn scale_rows(gamma: &RowVector, f: &Matrix) -> Matrix {
    let mut data = Vec::with_capacity(f.rows() * f.cols());
    for (row, g) in f.rows_iter().zip(gamma.iter()) {
        data.extend(row.iter().map(|v| g * v));
    }
    Matrix::from_raw(f.rows(), f.cols(), data)
}

/// Join of the two independent tasks: `partial / denominator + bias`.
pub fn deferred_scale(
    partial: &RowVector,
    denominator: f64,
    bias: Option<&RowVector>,
) -> Result<RowVector> {
    if !(denominator.is_finite() && denominator > 0.0) {
        return Err(Error::InvalidInput(format!(
            "deferred denominator {denominator} is not positive and finite"
        )));
    }
    let scaled = partial.iter().map(|v| v / denominator);
    let out = match bias {
        Some(b) => {
            if b.len() != partial.len() {
                return Err(mismatch("deferred bias", partial.len(), b.len()));
            }
            scaled.zip(b.iter()).map(|(v, b)| v + b).collect()
        }
        None => scaled.collect(),
    };
    Ok(RowVector::from_raw(out))
}

/// `layernorm(x)·F` evaluated as `(x·folded_weight) / √(σ²+ε) + β·F`.
pub fn fused_layernorm_matmul(x: &RowVector, fl: &FoldedLinear, epsilon: f64) -> Result<RowVector> {
    if x.len() != fl.folded_weight.rows() {
        return Err(mismatch(
            "fused_layernorm_matmul",
            fl.folded_weight.rows(),
            x.len(),
        ));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "layernorm epsilon must be positive, got {epsilon}"
        )));
    }
    // matrix engine
    let partial = x.matmul(&fl.folded_weight)?;
    // vector engine
    let denominator = layernorm_denominator(x, epsilon);
    deferred_scale(&partial, denominator, Some(&fl.folded_bias))
}

/// `softmax(x)·V` evaluated as `(e^{x−max}·V) / Σ e^{x−max}`.
pub fn fused_softmax_matmul(x: &RowVector, v: &Matrix) -> Result<RowVector> {
    if x.len() != v.rows() {
        return Err(mismatch("fused_softmax_matmul", v.rows(), x.len()));
    }
    let (numerators, denominator) = softmax_numerators(x);
    let partial = numerators.matmul(v)?;
    deferred_scale(&partial, denominator, None)
}

/// `rmsnorm(x)·F` evaluated as `(x·Γ·F) / √(x·xᵀ/n + ε)`.
pub fn fused_rmsnorm_matmul(
    x: &RowVector,
    fl: &RmsFoldedLinear,
    epsilon: f64,
) -> Result<RowVector> {
    if x.len() != fl.folded_weight.rows() {
        return Err(mismatch(
            "fused_rmsnorm_matmul",
            fl.folded_weight.rows(),
            x.len(),
        ));
    }
    let partial = x.matmul(&fl.folded_weight)?;
    let r = rms_denominator(x, epsilon)?;
    deferred_scale(&partial, r, None)
}

/// Conventional SwiGLU MLP on an already-normalized row:
/// `(silu(h·W_gate) ⊙ (h·W_up))·W_down`.
pub fn llama_mlp(h: &RowVector, w: &LlamaMlpWeights) -> Result<RowVector> {
    let gate = h.matmul(&w.w_gate)?;
    let up = h.matmul(&w.w_up)?;
    let activated = RowVector::from_raw(gate.iter().map(|&g| silu(g)).collect());
    hadamard(&activated, &up)?.matmul(&w.w_down)
}

/// RMSNorm followed by a SwiGLU MLP, with the RMS reduction deferred past the
/// gate and up projections.
///
/// `1/r` must be applied before `silu`, so only the gate and up matmuls
/// overlap the reduction; the down projection waits for the scaled, gated row.
pub fn fused_rmsnorm_llama_mlp(
    x: &RowVector,
    gate_folded: &RmsFoldedLinear,
    up_folded: &RmsFoldedLinear,
    w_down: &Matrix,
    epsilon: f64,
) -> Result<RowVector> {
    let (gw, uw) = (&gate_folded.folded_weight, &up_folded.folded_weight);
    if gw.shape() != uw.shape() {
        return Err(mismatch(
            "fused llama mlp gate/up",
            format!("{:?}", gw.shape()),
            format!("{:?}", uw.shape()),
        ));
    }
    if x.len() != gw.rows() {
        return Err(mismatch("fused llama mlp input", gw.rows(), x.len()));
    }
    if w_down.rows() != gw.cols() {
        return Err(mismatch("fused llama mlp down", gw.cols(), w_down.rows()));
    }
    let gate_partial = x.matmul(gw)?;
    let up_partial = x.matmul(uw)?;
    let r = rms_denominator(x, epsilon)?;
    let gate = deferred_scale(&gate_partial, r, None)?;
    let up = deferred_scale(&up_partial, r, None)?;
    let activated = RowVector::from_raw(gate.iter().map(|&g| silu(g)).collect());
    hadamard(&activated, &up)?.matmul(w_down)
}

/// A SwiGLU MLP whose gate and up projections carry a folded RMSNorm scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldedLlamaMlp {
    pub gate: RmsFoldedLinear,
    pub up: RmsFoldedLinear,
    pub w_down: Matrix,
    pub epsilon: f64,
}

impl FoldedLlamaMlp {
    pub fn fold(norm: &RmsNormParams, w: &LlamaMlpWeights) -> Result<Self> {
        Ok(Self {
            gate: fold_rmsnorm_linear(norm, &w.w_gate)?,
            up: fold_rmsnorm_linear(norm, &w.w_up)?,
            w_down: w.w_down.clone(),
            epsilon: norm.epsilon(),
        })
    }

    pub fn apply(&self, x: &RowVector) -> Result<RowVector> {
        fused_rmsnorm_llama_mlp(x, &self.gate, &self.up, &self.w_down, self.epsilon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norms::{layernorm, rmsnorm, softmax_stable};
    use crate::tensor::{diag, matmul, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(v: &[f64]) -> RowVector {
        RowVector::new(v.to_vec()).unwrap()
    }

    fn rand_row(rng: &mut ChaCha8Rng, n: usize) -> RowVector {
        RowVector::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn fold_of_identity_is_centering_matrix() {
        let p = LayerNormParams::identity(2, 1e-12).unwrap();
        let fl = fold_layernorm_linear(&p, &Matrix::identity(2)).unwrap();
        assert_eq!(fl.folded_weight.as_slice(), &[0.5, -0.5, -0.5, 0.5]);
        assert_eq!(fl.folded_bias.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_beta_gives_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = LayerNormParams::new(rand_row(&mut rng, 5), RowVector::zeros(5), 1e-5).unwrap();
        let fl = fold_layernorm_linear(&p, &rand_matrix(&mut rng, 5, 3)).unwrap();
        assert_eq!(fl.folded_bias, RowVector::zeros(3));
    }

    #[test]
    fn fold_matches_explicit_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, m) = (8, 4);
        let gamma = rand_row(&mut rng, n);
        let beta = rand_row(&mut rng, n);
        let f = rand_matrix(&mut rng, n, m);
        let p = LayerNormParams::new(gamma.clone(), beta.clone(), 1e-5).unwrap();
        let fl = fold_layernorm_linear(&p, &f).unwrap();

        let e = Matrix::ones(n, n);
        let centering = Matrix::new(
            n,
            n,
            Matrix::identity(n)
                .as_slice()
                .iter()
                .zip(e.as_slice())
                .map(|(i, e)| i - e / n as f64)
                .collect(),
        )
        .unwrap();
        let explicit = matmul(&matmul(&centering, &diag(&gamma)).unwrap(), &f).unwrap();
        assert!(max_rel_err(fl.folded_weight.as_slice(), explicit.as_slice()) <= 1e-14);
        let bias = matmul(&Matrix::new(1, n, beta.into_vec()).unwrap(), &f).unwrap();
        assert_eq!(fl.folded_bias.as_slice(), bias.as_slice());
    }

    #[test]
    fn fold_rejects_mismatch() {
        let p = LayerNormParams::identity(3, 1e-5).unwrap();
        assert!(fold_layernorm_linear(&p, &Matrix::zeros(2, 2)).is_err());
        let r = RmsNormParams::new(RowVector::filled(3, 1.0), 0.0).unwrap();
        assert!(fold_rmsnorm_linear(&r, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn fused_layernorm_constant_input_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = LayerNormParams::new(rand_row(&mut rng, 6), rand_row(&mut rng, 6), 1e-5).unwrap();
        let fl = fold_layernorm_linear(&p, &rand_matrix(&mut rng, 6, 3)).unwrap();
        let y = fused_layernorm_matmul(&RowVector::filled(6, 2.5), &fl, 1e-5).unwrap();
        for (a, b) in y.iter().zip(fl.folded_bias.iter()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn fused_layernorm_two_element_case() {
        let p = LayerNormParams::identity(2, 1e-12).unwrap();
        let fl = fold_layernorm_linear(&p, &Matrix::identity(2)).unwrap();
        let y = fused_layernorm_matmul(&row(&[1.0, -1.0]), &fl, 1e-12).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-11 && (y[1] + 1.0).abs() < 1e-11);
    }

    #[test]
    fn fused_layernorm_matches_conventional() {
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        for _ in 0..200 {
            let n = rng.gen_range(8..=256);
            let m = rng.gen_range(1..=16);
            let x = rand_row(&mut rng, n);
            let p =
                LayerNormParams::new(rand_row(&mut rng, n), rand_row(&mut rng, n), 1e-5).unwrap();
            let f = rand_matrix(&mut rng, n, m);
            let expected = layernorm(&x, &p).unwrap().matmul(&f).unwrap();
            let fl = fold_layernorm_linear(&p, &f).unwrap();
            let got = fused_layernorm_matmul(&x, &fl, p.epsilon()).unwrap();
            assert!(max_rel_err(got.as_slice(), expected.as_slice()) <= 1e-10);
        }
    }

    #[test]
    fn fused_layernorm_near_constant_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let n = 64;
        let x = RowVector::new((0..n).map(|_| 1.0 + rng.gen_range(-1e-7..1e-7)).collect()).unwrap();
        let p = LayerNormParams::new(rand_row(&mut rng, n), rand_row(&mut rng, n), 1e-5).unwrap();
        let f = rand_matrix(&mut rng, n, 8);
        let expected = layernorm(&x, &p).unwrap().matmul(&f).unwrap();
        let got =
            fused_layernorm_matmul(&x, &fold_layernorm_linear(&p, &f).unwrap(), 1e-5).unwrap();
        assert!(max_rel_err(got.as_slice(), expected.as_slice()) <= 1e-10);
    }

    #[test]
    fn fused_layernorm_rejects_bad_input() {
        let p = LayerNormParams::identity(2, 1e-5).unwrap();
        let fl = fold_layernorm_linear(&p, &Matrix::identity(2)).unwrap();
        assert!(fused_layernorm_matmul(&RowVector::zeros(3), &fl, 1e-5).is_err());
        assert!(fused_layernorm_matmul(&RowVector::zeros(2), &fl, 0.0).is_err());
    }

    #[test]
    fn fused_softmax_small_cases() {
        let y = fused_softmax_matmul(&RowVector::zeros(2), &Matrix::identity(2)).unwrap();
        assert_eq!(y.as_slice(), &[0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for n in [1, 3, 17, 64] {
            let x = RowVector::new((0..n).map(|_| rng.gen_range(-30.0..30.0)).collect()).unwrap();
            let y = fused_softmax_matmul(&x, &Matrix::ones(n, 1)).unwrap();
            assert_eq!(y.as_slice(), &[1.0]);
        }
        assert!(fused_softmax_matmul(&RowVector::zeros(2), &Matrix::identity(3)).is_err());
    }

    #[test]
    fn fused_softmax_matches_conventional_with_large_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(201);
        for _ in 0..200 {
            let n = rng.gen_range(1..=128);
            let m = rng.gen_range(1..=16);
            let x = RowVector::new((0..n).map(|_| rng.gen_range(-1e3..1e3)).collect()).unwrap();
            let v = rand_matrix(&mut rng, n, m);
            let expected = softmax_stable(&x).matmul(&v).unwrap();
            let got = fused_softmax_matmul(&x, &v).unwrap();
            assert!(got.is_finite());
            assert!(max_rel_err(got.as_slice(), expected.as_slice()) <= 1e-10);
        }
    }

    #[test]
    fn rms_fold_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = rand_matrix(&mut rng, 4, 3);
        let ones = RmsNormParams::new(RowVector::filled(4, 1.0), 0.0).unwrap();
        assert_eq!(fold_rmsnorm_linear(&ones, &f).unwrap().folded_weight, f);

        let p = RmsNormParams::new(row(&[2.0, 3.0]), 0.0).unwrap();
        let folded = fold_rmsnorm_linear(&p, &Matrix::identity(2)).unwrap();
        assert_eq!(folded.folded_weight, diag(&row(&[2.0, 3.0])));

        let gamma = rand_row(&mut rng, 4);
        let p = RmsNormParams::new(gamma.clone(), 0.0).unwrap();
        let explicit = matmul(&diag(&gamma), &f).unwrap();
        assert_eq!(fold_rmsnorm_linear(&p, &f).unwrap().folded_weight, explicit);
    }

    fn llama_conventional(x: &RowVector, norm: &RmsNormParams, w: &LlamaMlpWeights) -> RowVector {
        llama_mlp(&rmsnorm(x, norm).unwrap(), w).unwrap()
    }

    #[test]
    fn fused_llama_zero_input_with_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let norm = RmsNormParams::new(rand_row(&mut rng, 4), 1e-6).unwrap();
        let w = LlamaMlpWeights::new(
            rand_matrix(&mut rng, 4, 6),
            rand_matrix(&mut rng, 4, 6),
            rand_matrix(&mut rng, 6, 4),
        )
        .unwrap();
        let folded = FoldedLlamaMlp::fold(&norm, &w).unwrap();
        assert_eq!(
            folded.apply(&RowVector::zeros(4)).unwrap(),
            RowVector::zeros(4)
        );

        let strict = RmsNormParams::new(norm.gamma().clone(), 0.0).unwrap();
        let folded = FoldedLlamaMlp::fold(&strict, &w).unwrap();
        assert!(matches!(
            folded.apply(&RowVector::zeros(4)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn fused_llama_scalar_case() {
        let one = Matrix::identity(1);
        let norm = RmsNormParams::new(row(&[1.0]), 0.0).unwrap();
        let w = LlamaMlpWeights::new(one.clone(), one.clone(), one).unwrap();
        let y = FoldedLlamaMlp::fold(&norm, &w)
            .unwrap()
            .apply(&row(&[2.0]))
            .unwrap();
        assert!((y[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn fused_llama_matches_conventional() {
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        for _ in 0..200 {
            let n = rng.gen_range(8..=128);
            let h = (4 * n + 1) / 3;
            let x = rand_row(&mut rng, n);
            let eps = if rng.gen_bool(0.5) { 0.0 } else { 1e-6 };
            let norm = RmsNormParams::new(rand_row(&mut rng, n), eps).unwrap();
            let w = LlamaMlpWeights::new(
                rand_matrix(&mut rng, n, h),
                rand_matrix(&mut rng, n, h),
                rand_matrix(&mut rng, h, n),
            )
            .unwrap();
            let expected = llama_conventional(&x, &norm, &w);
            let got = FoldedLlamaMlp::fold(&norm, &w).unwrap().apply(&x).unwrap();
            assert!(max_rel_err(got.as_slice(), expected.as_slice()) <= 1e-10);
        }
    }

    #[test]
    fn llama_weights_validate_shapes() {
        assert!(LlamaMlpWeights::new(
            Matrix::zeros(4, 6),
            Matrix::zeros(4, 5),
            Matrix::zeros(6, 4)
        )
        .is_err());
        assert!(LlamaMlpWeights::new(
            Matrix::zeros(4, 6),
            Matrix::zeros(4, 6),
            Matrix::zeros(4, 6)
        )
        .is_err());
    }

    #[test]
    fn deferred_scale_rejects_zero_denominator() {
        assert!(deferred_scale(&RowVector::zeros(2), 0.0, None).is_err());
        assert!(deferred_scale(&RowVector::zeros(2), 2.0, Some(&RowVector::zeros(3))).is_err());
    }

    #[test]
    fn folding_is_input_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let p = LayerNormParams::new(rand_row(&mut rng, 16), rand_row(&mut rng, 16), 1e-5).unwrap();
        let f = rand_matrix(&mut rng, 16, 5);
        let first = fold_layernorm_linear(&p, &f).unwrap();
        for _ in 0..10 {
            fused_layernorm_matmul(&rand_row(&mut rng, 16), &first, 1e-5).unwrap();
        }
        assert_eq!(first, fold_layernorm_linear(&p, &f).unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn folded_columns_sum_to_zero(seed in any::<u64>(), n in 1usize..96, m in 1usize..12) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = LayerNormParams::new(rand_row(&mut rng, n), rand_row(&mut rng, n), 1e-5).unwrap();
                let fl = fold_layernorm_linear(&p, &rand_matrix(&mut rng, n, m)).unwrap();
                for s in fl.folded_weight.column_sums().iter() {
                    prop_assert!(s.abs() <= 1e-10);
                }
            }

            #[test]
            fn scalar_commutes_with_matmul(seed in any::<u64>(), n in 1usize..48, m in 1usize..12, s in 1e-6f64..1e6) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let u = rand_row(&mut rng, n);
                let w = rand_matrix(&mut rng, n, m);
                let deferred = deferred_scale(&u.matmul(&w).unwrap(), s, None).unwrap();
                let early = deferred_scale(&u, s, None).unwrap().matmul(&w).unwrap();
                // Compare on the scale of the operands; individual outputs may cancel.
                let scale = u.iter().fold(0.0f64, |a, v| a.max(v.abs())) * w.max_abs() * n as f64 / s;
                for (a, b) in deferred.iter().zip(early.iter()) {
                    prop_assert!((a - b).abs() <= 1e-12 * scale);
                }
            }
        }
    }
}
