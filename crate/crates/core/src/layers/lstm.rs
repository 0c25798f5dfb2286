//! LSTM cell with separate gate blocks.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::params::{Bound, ParamId, ParamKind, ParamSet};
use crate::tensor::Tensor;

/// Handles for the four gate weights `[d_h, d_in + d_h]` and biases `[d_h]`,
/// in the order input, forget, output, candidate.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub d_in: usize,
    pub d_h: usize,
    pub weights: [ParamId; 4],
    pub biases: [ParamId; 4],
}

const GATES: [&str; 4] = ["i", "f", "o", "g"];

/// Samples a `[rows, cols]` matrix from `U(-bound, bound)`.
pub(crate) fn uniform_matrix<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

pub(crate) fn uniform_vector<R: Rng>(n: usize, bound: f64, rng: &mut R) -> Tensor {
    Tensor::vector((0..n).map(|_| rng.random_range(-bound..=bound)).collect())
}

impl LstmCell {
    /// Registers a cell with gate weights and biases drawn from `U(±1/√d_h)`.
    pub fn init<R: Rng>(params: &mut ParamSet, prefix: &str, d_in: usize, d_h: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_h as f64).sqrt();
        let weights = GATES.map(|g| {
            let w = uniform_matrix(d_h, d_in + d_h, bound, rng);
            params.add(format!("{prefix}.w_{g}"), w, ParamKind::Euclidean)
        });
        let biases = GATES.map(|g| {
            let b = uniform_vector(d_h, bound, rng);
            params.add(format!("{prefix}.b_{g}"), b, ParamKind::Euclidean)
        });
        Self {
            d_in,
            d_h,
            weights,
            biases,
        }
    }

    pub fn scalar_count(d_in: usize, d_h: usize) -> usize {
        4 * (d_h * (d_in + d_h) + d_h)
    }
}

/// Recurrent state `(h, c)`, each `[B, d_h]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// One LSTM step on a batch: `x` is `[B, d_in]`, state rows `[B, d_h]`.
pub fn lstm_step_var(
    tape: &mut Tape,
    cell: &LstmCell,
    bound: &Bound,
    x: Var,
    state: LstmState,
) -> Result<LstmState> {
    let xs = tape.value(x).shape().to_vec();
    let hs = tape.value(state.h).shape().to_vec();
    if xs.len() != 2 || xs[1] != cell.d_in || hs.len() != 2 || hs != [xs[0], cell.d_h] {
        return shape_err(
            "lstm_step",
            format!("x {xs:?}, h {hs:?} for cell {}→{}", cell.d_in, cell.d_h),
        );
    }
    if tape.value(state.c).shape() != hs.as_slice() {
        return shape_err("lstm_step", format!("c {:?}", tape.value(state.c).shape()));
    }
    let z = tape.concat(&[x, state.h], 1)?;
    let mut pre = [x; 4];
    for k in 0..4 {
        let zw = tape.matmul_nt(z, bound[cell.weights[k]])?;
        pre[k] = tape.add_row(zw, bound[cell.biases[k]])?;
    }
    let i = tape.sigmoid(pre[0]);
    let f = tape.sigmoid(pre[1]);
    let o = tape.sigmoid(pre[2]);
    let g = tape.tanh(pre[3]);
    let keep = tape.mul(f, state.c)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// One LSTM step on concrete values; `x`, `h`, `c` are vectors.
pub fn lstm_step(
    params: &ParamSet,
    cell: &LstmCell,
    x: &[f64],
    state: (&[f64], &[f64]),
) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != cell.d_in || state.0.len() != cell.d_h || state.1.len() != cell.d_h {
        return shape_err(
            "lstm_step",
            format!(
                "x {}, h {}, c {} for cell {}→{}",
                x.len(),
                state.0.len(),
                state.1.len(),
                cell.d_in,
                cell.d_h
            ),
        );
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let row = |tape: &mut Tape, v: &[f64]| tape.constant(Tensor::matrix(1, v.len(), v.to_vec()).expect("non-empty"));
    let xv = row(&mut tape, x);
    let h = row(&mut tape, state.0);
    let c = row(&mut tape, state.1);
    let out = lstm_step_var(&mut tape, cell, &bound, xv, LstmState { h, c })?;
    Ok((tape.value(out.h).data().to_vec(), tape.value(out.c).data().to_vec()))
}
