//! Evaluates an adaptive piecewise-linear activation, its Gaussian Gram
//! matrix, and the Mahalanobis distance between two activation shapes.

use htan::apl::{apl_apply, distance_matrix, gaussian_gram, AplBasis, AplCoordinates};
use htan::Tensor;

fn main() -> htan::Result<()> {
    let beta = AplBasis::new(vec![-1.0, 0.0, 1.0])?;
    let alpha = AplCoordinates::new(vec![0.5, -0.25, 0.2]);
    let xs: Vec<f64> = (-4..=4).map(|i| i as f64 * 0.5).collect();
    let ys = apl_apply(&Tensor::vector(xs.clone()), &alpha, &beta)?;
    for (x, y) in xs.iter().zip(ys.data()) {
        println!("apl({x:+.1}) = {y:+.4}");
    }

    let gram = gaussian_gram(&beta)?;
    println!("\nGram matrix under N(0, 1):");
    for i in 0..gram.dim() {
        println!("  {:?}", gram.tensor().row(i).iter().map(|v| format!("{v:.5}")).collect::<Vec<_>>());
    }

    let shapes = [
        alpha.clone(),
        AplCoordinates::new(vec![0.5, -0.2, 0.2]),
        AplCoordinates::zeros(3),
    ];
    let d = distance_matrix(&shapes, &gram)?;
    println!("\nsquared distances (row i, column j):");
    for i in 0..3 {
        println!("  {:?}", d.row(i).iter().map(|v| format!("{v:.5}")).collect::<Vec<_>>());
    }
    Ok(())
}
