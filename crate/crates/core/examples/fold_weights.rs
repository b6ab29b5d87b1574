// Folds a block's normalization parameters into its weights, writes the result
// as JSON, reads it back, and runs the block from the loaded file.

use normfuse::block::{run_folded, run_fused, BlockWeights};
use normfuse::cli::{fold, FoldedWeightsFile, RunConfig};
use normfuse::tensor::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> normfuse::Result<bool> {
    let cfg = RunConfig::load(
        &std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/small-gelu.json"),
    )?;
    let weights = BlockWeights::random(&cfg.block, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;

    let text = fold(&cfg, &weights)?.to_json();
    let path = std::env::temp_dir().join(format!("normfuse-folded-{}.json", std::process::id()));
    std::fs::write(&path, &text)?;
    let loaded = FoldedWeightsFile::from_json(&std::fs::read_to_string(&path)?)?;
    std::fs::remove_file(&path)?;

    let (s, d) = (cfg.block.seq_len, cfg.block.d_model);
    let x = Matrix::new(
        s,
        d,
        (0..s * d).map(|i| ((i % 7) as f64 - 3.0) * 0.25).collect(),
    )?;
    let from_file = run_folded(&cfg.block, &loaded.folded, &x)?;
    let in_memory = run_fused(&cfg.block, &weights, &x)?;
    let identical = from_file == in_memory;
    println!(
        "folded file is {} bytes; outputs identical: {identical}",
        text.len()
    );
    Ok(identical)
}

#[allow(dead_code)]
fn main() -> normfuse::Result<()> {
    run_example().map(|_| ())
}
