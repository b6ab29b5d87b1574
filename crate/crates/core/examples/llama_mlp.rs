// RMSNorm feeding a SwiGLU feed-forward layer. The RMS scale is folded into
// the gate and up projections and applied after they finish.

use normfuse::fusion::{llama_mlp, FoldedLlamaMlp, LlamaMlpWeights};
use normfuse::norms::{rmsnorm, RmsNormParams};
use normfuse::tensor::{max_rel_err, Matrix, RowVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> normfuse::Result<Matrix> {
    Matrix::new(r, c, (0..r * c).map(|_| rng.gen_range(-0.5..0.5)).collect())
}

pub fn run_example() -> normfuse::Result<f64> {
    let (d, hidden) = (32, 86);
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    let x = RowVector::new((0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())?;
    let norm = RmsNormParams::new(
        RowVector::new((0..d).map(|_| rng.gen_range(0.5..1.5)).collect())?,
        1e-6,
    )?;
    let w = LlamaMlpWeights::new(
        random(&mut rng, d, hidden)?,
        random(&mut rng, d, hidden)?,
        random(&mut rng, hidden, d)?,
    )?;

    let conventional = llama_mlp(&rmsnorm(&x, &norm)?, &w)?;
    let fused = FoldedLlamaMlp::fold(&norm, &w)?.apply(&x)?;

    let err = max_rel_err(fused.as_slice(), conventional.as_slice());
    println!("d={d} hidden={hidden}: max relative error {err:.3e}");
    Ok(err)
}

#[allow(dead_code)]
fn main() -> normfuse::Result<()> {
    run_example().map(|_| ())
}
