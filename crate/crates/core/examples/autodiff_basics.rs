//! Records a small graph on the tape, runs backward, and compares against
//! central differences.

use htan::autodiff::{finite_difference, Tape};
use htan::Tensor;

fn main() -> htan::Result<()> {
    let x0 = vec![0.3, -1.2, 2.0];
    let f = |x: &[f64], tape: &mut Tape, trainable: bool| -> htan::Result<_> {
        let x = tape.leaf(&Tensor::vector(x.to_vec()), trainable);
        let s = tape.sigmoid(x);
        let t = tape.tanh(x);
        let p = tape.mul(s, t)?;
        let r = tape.relu(x);
        let y = tape.add(p, r)?;
        Ok((x, tape.sum(y)))
    };

    let mut tape = Tape::new();
    let (x, root) = f(&x0, &mut tape, true)?;
    println!("f(x) = {:.6}", tape.scalar(root));
    let grads = tape.backward(root)?;
    let analytic = grads.get(x).expect("x is trainable").to_vec();

    let mut eval = |p: &[f64]| {
        let mut t = Tape::new();
        let (_, r) = f(p, &mut t, false).expect("forward");
        t.scalar(r)
    };
    let numeric = finite_difference(&mut eval, &x0, 1e-5, &[0, 1, 2]);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        println!("d/dx{i}: backward {a:.8}  central difference {n:.8}");
    }

    // a second backward on the same tape is refused
    println!("second backward: {:?}", tape.backward(root).err().map(|e| e.to_string()));
    Ok(())
}
