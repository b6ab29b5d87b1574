// Folds a Layernorm into the linear layer that follows it and checks the
// fused row against normalize-then-multiply.

use normfuse::fusion::{fold_layernorm_linear, fused_layernorm_matmul};
use normfuse::norms::{layernorm, LayerNormParams};
use normfuse::tensor::{max_rel_err, Matrix, RowVector};

pub fn run_example() -> normfuse::Result<f64> {
    let x = RowVector::new(vec![0.5, -1.25, 2.0, 3.5, -0.75, 1.0])?;
    let p = LayerNormParams::new(
        RowVector::new(vec![1.0, 0.5, 1.5, 0.8, 1.2, 0.9])?,
        RowVector::new(vec![0.1, -0.2, 0.0, 0.3, 0.05, -0.1])?,
        1e-5,
    )?;
    let f = Matrix::from_rows(&[
        vec![0.2, -0.4, 0.1],
        vec![0.7, 0.3, -0.5],
        vec![-0.1, 0.9, 0.4],
        vec![0.6, -0.2, 0.8],
        vec![-0.3, 0.5, -0.7],
        vec![0.4, 0.1, 0.2],
    ])?;

    let conventional = layernorm(&x, &p)?.matmul(&f)?;

    // Done once, offline.
    let folded = fold_layernorm_linear(&p, &f)?;
    let fused = fused_layernorm_matmul(&x, &folded, p.epsilon())?;

    let err = max_rel_err(fused.as_slice(), conventional.as_slice());
    println!("conventional {:?}", conventional.as_slice());
    println!("fused        {:?}", fused.as_slice());
    println!("max relative error {err:.3e}");
    Ok(err)
}

#[allow(dead_code)]
fn main() -> normfuse::Result<()> {
    run_example().map(|_| ())
}
