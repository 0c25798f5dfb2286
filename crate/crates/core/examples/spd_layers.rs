//! BiMap and ReEig on an SPD input, then a few Riemannian ascent steps on a
//! Stiefel weight while the orthogonality defect is tracked.

use htan::spd::{
    bimap_forward, orthogonality_defect, reeig_forward, stiefel_step, SpdMatrix, SpdReport, StepDirection,
    StiefelParam,
};
use htan::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> htan::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = SpdMatrix::new(Tensor::from_rows(&[
        vec![2.0, 0.3, 0.0],
        vec![0.3, 1.0, 0.1],
        vec![0.0, 0.1, 0.05],
    ])?)?;
    let beta = [0.2, -0.4, 0.9];
    let w = StiefelParam::random(3, &mut rng);
    let v = Tensor::full(&[3, 3], 0.1);
    let b = Tensor::vector(vec![0.0, 0.05, 0.0]);
    let y = bimap_forward(&x, &beta, &w, &v, &b)?;
    report("input", x.tensor())?;
    report("BiMap", y.tensor())?;

    let q = Tensor::zeros(&[3, 3]);
    let c = Tensor::vector(vec![0.5, 0.5, 0.5]);
    let z = reeig_forward(&y, &beta, &q, &c)?;
    report("ReEig (thresholds 0.5)", z.tensor())?;

    let mut w = w;
    for step in 1..=5 {
        let grad = Tensor::from_rows(&[vec![1.0, 0.0, 0.5], vec![0.0, -1.0, 0.2], vec![0.3, 0.3, 0.0]])?;
        w = stiefel_step(&w, &grad, 0.1, StepDirection::Ascent)?;
        println!("step {step}: ||WW^T - I||_inf = {:.2e}", orthogonality_defect(w.tensor()));
    }
    Ok(())
}

fn report(label: &str, m: &Tensor) -> htan::Result<()> {
    let r = SpdReport::of(m)?;
    println!("{label}: valid {} condition {:.3}", r.is_valid(), r.condition_number());
    Ok(())
}
