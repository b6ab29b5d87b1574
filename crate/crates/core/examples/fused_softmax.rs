// Softmax followed by a value matmul, with the division deferred until after
// the matmul. Logits span a wide range to show the max shift keeps it finite.

use normfuse::fusion::fused_softmax_matmul;
use normfuse::norms::softmax_stable;
use normfuse::tensor::{max_rel_err, Matrix, RowVector};

pub fn run_example() -> normfuse::Result<f64> {
    let logits = RowVector::new(vec![812.0, -403.5, 799.25, 0.0, 805.0])?;
    let v = Matrix::from_rows(&[
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![0.5, 0.5],
        vec![-1.0, 2.0],
        vec![0.25, -0.75],
    ])?;

    let conventional = softmax_stable(&logits).matmul(&v)?;
    let fused = fused_softmax_matmul(&logits, &v)?;

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
