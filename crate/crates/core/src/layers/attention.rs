//! Single-head causal self-attention encoder (optional variant).

use rand::Rng;

use super::lstm::uniform_matrix;
use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::params::{Bound, ParamId, ParamKind, ParamSet};
use crate::tensor::Tensor;

/// Input projection `w_in: [d_h, d_in]` and square query/key/value
/// projections `[d_h, d_h]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionCell {
    pub d_in: usize,
    pub d_h: usize,
    pub w_in: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl AttentionCell {
    pub fn init<R: Rng>(params: &mut ParamSet, prefix: &str, d_in: usize, d_h: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_h as f64).sqrt();
        let mut add = |name: &str, rows: usize, cols: usize, rng: &mut R| {
            params.add(
                format!("{prefix}.{name}"),
                uniform_matrix(rows, cols, bound, rng),
                ParamKind::Euclidean,
            )
        };
        let w_in = add("w_in", d_h, d_in, rng);
        let wq = add("wq", d_h, d_h, rng);
        let wk = add("wk", d_h, d_h, rng);
        let wv = add("wv", d_h, d_h, rng);
        Self {
            d_in,
            d_h,
            w_in,
            wq,
            wk,
            wv,
        }
    }

    pub fn scalar_count(d_in: usize, d_h: usize) -> usize {
        d_h * d_in + 3 * d_h * d_h
    }
}

/// Keys and values of the positions seen so far.
#[derive(Debug, Clone, Default)]
pub struct AttentionHistory {
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

/// Attends from position `n` (input `x: [B, d_in]`) over positions `1..=n`.
/// Appends this position's key and value to `history`.
pub fn attention_step_var(
    tape: &mut Tape,
    cell: &AttentionCell,
    bound: &Bound,
    x: Var,
    history: &mut AttentionHistory,
) -> Result<Var> {
    let xs = tape.value(x).shape();
    if xs.len() != 2 || xs[1] != cell.d_in {
        return shape_err("attention_step", format!("x {xs:?} for input size {}", cell.d_in));
    }
    let u = tape.matmul_nt(x, bound[cell.w_in])?;
    let q = tape.matmul_nt(u, bound[cell.wq])?;
    let k = tape.matmul_nt(u, bound[cell.wk])?;
    let v = tape.matmul_nt(u, bound[cell.wv])?;
    history.keys.push(k);
    history.values.push(v);
    tape.causal_attention(q, &history.keys, &history.values)
}

/// Attention output at the last position of `sequence` (each entry a
/// `d_in` vector), on concrete values.
pub fn attention_step(params: &ParamSet, cell: &AttentionCell, sequence: &[Vec<f64>]) -> Result<Vec<f64>> {
    if sequence.is_empty() {
        return shape_err("attention_step", "empty sequence");
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let mut history = AttentionHistory::default();
    let mut out = None;
    for x in sequence {
        if x.len() != cell.d_in {
            return shape_err("attention_step", format!("input of size {} for {}", x.len(), cell.d_in));
        }
        let xv = tape.constant(Tensor::matrix(1, x.len(), x.clone())?);
        out = Some(attention_step_var(&mut tape, cell, &bound, xv, &mut history)?);
    }
    Ok(tape.value(out.expect("non-empty")).data().to_vec())
}
