//! Randomized fused-vs-conventional comparisons, one generator per fusion site.
//!
//! Every trial draws its inputs from the supplied RNG, evaluates the
//! conventional path (normalize, then multiply) and the fused path, and returns
//! the norm-wise relative error between them.

use rand::Rng;

use crate::block::{run_conventional, run_fused, BlockConfig, BlockWeights};
use crate::error::Result;
use crate::fusion::{
    fold_layernorm_linear, fused_layernorm_matmul, fused_softmax_matmul, llama_mlp, FoldedLlamaMlp,
    LlamaMlpWeights,
};
use crate::norms::{layernorm, rmsnorm, softmax_stable, LayerNormParams, RmsNormParams};
use crate::tensor::{max_rel_err, Matrix, RowVector};

fn uniform_row<R: Rng + ?Sized>(rng: &mut R, n: usize, bound: f64) -> Result<RowVector> {
    RowVector::new((0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

fn uniform_matrix<R: Rng + ?Sized>(rng: &mut R, r: usize, c: usize) -> Result<Matrix> {
    Matrix::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Layernorm of a length-`n` row followed by an `n × m` linear layer.
pub fn layernorm_linear_trial<R: Rng + ?Sized>(rng: &mut R, n: usize, m: usize) -> Result<f64> {
    let x = uniform_row(rng, n, 3.0)?;
    let p = LayerNormParams::new(uniform_row(rng, n, 2.0)?, uniform_row(rng, n, 1.0)?, 1e-5)?;
    let f = uniform_matrix(rng, n, m)?;
    let expected = layernorm(&x, &p)?.matmul(&f)?;
    let fused = fused_layernorm_matmul(&x, &fold_layernorm_linear(&p, &f)?, p.epsilon())?;
    Ok(max_rel_err(fused.as_slice(), expected.as_slice()))
}

/// Softmax of `n` logits drawn from `[−logit_bound, logit_bound)` followed by an
/// `n × m` value matrix. Non-finite fused output is reported as infinite error.
pub fn softmax_matmul_trial<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    m: usize,
    logit_bound: f64,
) -> Result<f64> {
    let x = uniform_row(rng, n, logit_bound)?;
    let v = uniform_matrix(rng, n, m)?;
    let expected = softmax_stable(&x).matmul(&v)?;
    let fused = fused_softmax_matmul(&x, &v)?;
    if !fused.is_finite() {
        return Ok(f64::INFINITY);
    }
    Ok(max_rel_err(fused.as_slice(), expected.as_slice()))
}

/// RMSNorm of a length-`n` row followed by a SwiGLU MLP with hidden width `h`.
pub fn rmsnorm_llama_mlp_trial<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    h: usize,
    epsilon: f64,
) -> Result<f64> {
    let x = uniform_row(rng, n, 3.0)?;
    let norm = RmsNormParams::new(uniform_row(rng, n, 2.0)?, epsilon)?;
    let w = LlamaMlpWeights::new(
        uniform_matrix(rng, n, h)?,
        uniform_matrix(rng, n, h)?,
        uniform_matrix(rng, h, n)?,
    )?;
    let expected = llama_mlp(&rmsnorm(&x, &norm)?, &w)?;
    let fused = FoldedLlamaMlp::fold(&norm, &w)?.apply(&x)?;
    Ok(max_rel_err(fused.as_slice(), expected.as_slice()))
}

/// A whole random block, fused against conventional.
pub fn block_trial<R: Rng + ?Sized>(rng: &mut R, cfg: &BlockConfig) -> Result<f64> {
    let w = BlockWeights::random(cfg, rng)?;
    let x = uniform_matrix(rng, cfg.seq_len, cfg.d_model)?;
    let expected = run_conventional(cfg, &w, &x)?;
    let fused = run_fused(cfg, &w, &x)?;
    Ok(max_rel_err(fused.as_slice(), expected.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::Variant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trials_are_reproducible_and_tight() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            [
                layernorm_linear_trial(&mut rng, 64, 8).unwrap(),
                softmax_matmul_trial(&mut rng, 64, 8, 1e3).unwrap(),
                rmsnorm_llama_mlp_trial(&mut rng, 16, 21, 0.0).unwrap(),
                block_trial(
                    &mut rng,
                    &BlockConfig {
                        d_model: 8,
                        n_heads: 2,
                        seq_len: 3,
                        mlp_hidden: 11,
                        variant: Variant::StandardGelu,
                        epsilon_ln: 1e-5,
                    },
                )
                .unwrap(),
            ]
        };
        let a = run();
        assert_eq!(a.map(f64::to_bits), run().map(f64::to_bits));
        assert!(a.iter().all(|&e| e <= 1e-10), "{a:?}");
    }
}
