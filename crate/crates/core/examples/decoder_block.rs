// Runs a small pre-norm decoder block both ways, for each block variant.

use normfuse::block::{run_conventional, run_fused, BlockConfig, BlockWeights, Variant};
use normfuse::tensor::{max_rel_err, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> normfuse::Result<Vec<(Variant, f64)>> {
    let mut out = Vec::new();
    for (variant, mlp_hidden, epsilon_ln) in [
        (Variant::StandardGelu, 128, 1e-5),
        (Variant::LlamaSwiglu, 86, 1e-6),
    ] {
        let cfg = BlockConfig {
            d_model: 32,
            n_heads: 4,
            seq_len: 8,
            mlp_hidden,
            variant,
            epsilon_ln,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = BlockWeights::random(&cfg, &mut rng)?;
        let x = Matrix::new(
            cfg.seq_len,
            cfg.d_model,
            (0..cfg.seq_len * cfg.d_model)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )?;

        let conventional = run_conventional(&cfg, &w, &x)?;
        let fused = run_fused(&cfg, &w, &x)?;
        let err = max_rel_err(fused.as_slice(), conventional.as_slice());
        println!(
            "{variant:?}: output {:?}, max relative error {err:.3e}",
            fused.shape()
        );
        out.push((variant, err));
    }
    Ok(out)
}

#[allow(dead_code)]
fn main() -> normfuse::Result<()> {
    run_example().map(|_| ())
}
