//! The network objective (task losses plus an L1 penalty on functional
//! distances) and the metric networks' adversarial objective.

use crate::apl::distance_matrix_var;
use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::layers::block::BlockTrace;
use crate::tensor::Tensor;

/// A `T×T` table of squared distances for one (block, slot); entries are
/// row-major and `(i, j)`, `(j, i)` share a node.
pub type DistanceTable = Vec<Var>;

/// Distance tables `[block][slot]` from coordinates and per-slot metrics.
pub fn distance_tables(
    tape: &mut Tape,
    alphas: &[Vec<Vec<Var>>],
    metrics: &[Vec<Var>],
) -> Result<Vec<Vec<DistanceTable>>> {
    if alphas.len() != metrics.len() {
        return shape_err("distance_tables", format!("{} blocks of coordinates, {} of metrics", alphas.len(), metrics.len()));
    }
    alphas
        .iter()
        .zip(metrics)
        .map(|(a, m)| {
            if a.len() != m.len() {
                return shape_err("distance_tables", format!("{} slots of coordinates, {} of metrics", a.len(), m.len()));
            }
            a.iter()
                .zip(m)
                .map(|(slot, &metric)| distance_matrix_var(tape, slot, metric))
                .collect()
        })
        .collect()
}

/// `Σ_l Σ_n Σ_ij |D_ij|`.
pub fn regularizer_var(tape: &mut Tape, tables: &[Vec<DistanceTable>]) -> Result<Var> {
    let mut terms = Vec::new();
    for table in tables.iter().flatten() {
        for &d in table {
            if tape.requires_grad(d) || tape.scalar(d) != 0.0 {
                let a = tape.abs(d);
                terms.push(tape.reshape(a, &[1])?);
            }
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let v = tape.concat(&terms, 0)?;
    Ok(tape.sum(v))
}

fn tasks_of(table: &[Var]) -> Result<usize> {
    let t = (table.len() as f64).sqrt().round() as usize;
    if t * t != table.len() {
        return shape_err("loss_theta", format!("table of {} entries is not square", table.len()));
    }
    Ok(t)
}

/// Index of the largest entry; ties go to the smallest index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = j;
        }
    }
    best
}

/// `Σ_i [D_ik − log Σ_{j≠k} exp D_ij]` with `k = argmax_j D_ij`, summed over
/// all tables.
pub fn loss_theta_var(tape: &mut Tape, tables: &[Vec<DistanceTable>]) -> Result<Var> {
    let mut terms = Vec::new();
    for table in tables.iter().flatten() {
        let t = tasks_of(table)?;
        if t < 2 {
            return Err(Error::Invalid("the adversarial loss needs at least two tasks".into()));
        }
        for i in 0..t {
            let row = &table[i * t..(i + 1) * t];
            let values: Vec<f64> = row.iter().map(|&v| tape.scalar(v)).collect();
            let k = argmax(&values);
            let others: Vec<usize> = (0..t).filter(|&j| j != k).collect();
            let shift = others.iter().map(|&j| values[j]).fold(f64::NEG_INFINITY, f64::max);
            let parts: Vec<Var> = others
                .iter()
                .map(|&j| tape.reshape(row[j], &[1]))
                .collect::<Result<_>>()?;
            let v = tape.concat(&parts, 0)?;
            let v = tape.offset(v, -shift);
            let e = tape.exp(v);
            let s = tape.sum(e);
            let lse = tape.log(s)?;
            let lse = tape.offset(lse, shift);
            let term = tape.sub(row[k], lse)?;
            terms.push(tape.reshape(term, &[1])?);
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let v = tape.concat(&terms, 0)?;
    Ok(tape.sum(v))
}

/// `ℓ_t`: per-slot cross-entropy averaged over slots (and batch rows).
/// `logits[t][n]` is `[B, C]`, `targets[t][n]` has `B` labels.
pub fn task_losses_var(tape: &mut Tape, logits: &[Vec<Var>], targets: &[Vec<Vec<usize>>]) -> Result<Vec<Var>> {
    if logits.len() != targets.len() {
        return shape_err("task_losses", format!("{} tasks of logits, {} of targets", logits.len(), targets.len()));
    }
    logits
        .iter()
        .zip(targets)
        .map(|(l, y)| {
            if l.len() != y.len() || l.is_empty() {
                return shape_err("task_losses", format!("{} slots of logits, {} of targets", l.len(), y.len()));
            }
            let per_slot: Vec<Var> = l
                .iter()
                .zip(y)
                .map(|(&z, y)| {
                    let ce = tape.softmax_cross_entropy(z, y)?;
                    tape.reshape(ce, &[1])
                })
                .collect::<Result<_>>()?;
            let v = tape.concat(&per_slot, 0)?;
            Ok(tape.mean(v))
        })
        .collect()
}

/// `Σ_t ℓ_t + λ·reg`.
pub fn loss_phi_var(tape: &mut Tape, task_losses: &[Var], regularizer: Option<Var>, lambda: f64) -> Result<Var> {
    let parts: Vec<Var> = task_losses
        .iter()
        .map(|&l| tape.reshape(l, &[1]))
        .collect::<Result<_>>()?;
    let v = tape.concat(&parts, 0)?;
    let total = tape.sum(v);
    match regularizer {
        Some(r) if lambda != 0.0 => {
            let r = tape.scale(r, lambda);
            tape.add(total, r)
        }
        _ => Ok(total),
    }
}

fn constant_tables(
    tape: &mut Tape,
    traces: &[BlockTrace],
    metrics: &[Vec<Tensor>],
) -> Result<Vec<Vec<DistanceTable>>> {
    if traces.len() != metrics.len() {
        return shape_err("loss", format!("{} traces for {} metric sequences", traces.len(), metrics.len()));
    }
    let mut alphas = Vec::new();
    let mut ms = Vec::new();
    for (trace, m) in traces.iter().zip(metrics) {
        if trace.slots() != m.len() {
            return shape_err("loss", format!("trace has {} slots, metrics {}", trace.slots(), m.len()));
        }
        alphas.push(
            trace
                .alpha
                .iter()
                .map(|slot| slot.iter().map(|a| tape.constant(Tensor::vector(a.clone()))).collect())
                .collect::<Vec<Vec<Var>>>(),
        );
        ms.push(m.iter().map(|x| tape.constant(x.clone())).collect::<Vec<Var>>());
    }
    distance_tables(tape, &alphas, &ms)
}

/// Network objective on concrete values. `logits[t][n]` is `[B, C]`,
/// `targets[t][n]` the labels, `metrics[l][n]` the metric of block `l` at
/// slot `n`.
pub fn loss_phi(
    logits: &[Vec<Tensor>],
    targets: &[Vec<Vec<usize>>],
    traces: &[BlockTrace],
    metrics: &[Vec<Tensor>],
    lambda: f64,
) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    let mut tape = Tape::new();
    let lv: Vec<Vec<Var>> = logits
        .iter()
        .map(|t| t.iter().map(|z| tape.constant(z.clone())).collect())
        .collect();
    let losses = task_losses_var(&mut tape, &lv, targets)?;
    let reg = if logits.len() >= 2 {
        let tables = constant_tables(&mut tape, traces, metrics)?;
        Some(regularizer_var(&mut tape, &tables)?)
    } else {
        None
    };
    let total = loss_phi_var(&mut tape, &losses, reg, lambda)?;
    Ok(tape.scalar(total))
}

/// Adversarial objective on concrete values.
pub fn loss_theta(traces: &[BlockTrace], metrics: &[Vec<Tensor>]) -> Result<f64> {
    let mut tape = Tape::new();
    let tables = constant_tables(&mut tape, traces, metrics)?;
    let v = loss_theta_var(&mut tape, &tables)?;
    Ok(tape.scalar(v))
}

/// `‖D‖₁,₁` summed over blocks and slots, on concrete values.
pub fn regularizer(traces: &[BlockTrace], metrics: &[Vec<Tensor>]) -> Result<f64> {
    let mut tape = Tape::new();
    let tables = constant_tables(&mut tape, traces, metrics)?;
    let v = regularizer_var(&mut tape, &tables)?;
    Ok(tape.scalar(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(alpha: Vec<Vec<Vec<f64>>>) -> BlockTrace {
        let n = alpha.len();
        BlockTrace {
            beta: vec![vec![0.0; alpha[0][0].len()]; n],
            alpha,
            pre: vec![vec![]; n],
            post: vec![vec![]; n],
        }
    }

    #[test]
    fn two_task_closed_forms() {
        let tr = trace(vec![vec![vec![1.0, 0.0], vec![0.0, 2.0]]]);
        let m = vec![vec![Tensor::identity(2)]];
        let d = 5.0;
        assert!((loss_theta(std::slice::from_ref(&tr), &m).unwrap() - 2.0 * d).abs() < 1e-12);
        assert!((regularizer(std::slice::from_ref(&tr), &m).unwrap() - 2.0 * d).abs() < 1e-12);
        let logits = vec![vec![Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()]; 2];
        let targets = vec![vec![vec![0]]; 2];
        let l = loss_phi(&logits, &targets, &[tr], &m, 0.1).unwrap();
        let ce = std::f64::consts::LN_2;
        assert!((l - (2.0 * ce + 0.1 * 2.0 * d)).abs() < 1e-12);
    }

    #[test]
    fn identical_tasks_uniform_case() {
        let a = vec![0.3, -0.2];
        let tr = trace(vec![vec![a.clone(), a.clone(), a.clone(), a]]);
        let m = vec![vec![Tensor::identity(2)]];
        let want = -4.0 * 3f64.ln();
        assert!((loss_theta(&[tr], &m).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn zero_lambda_is_task_sum() {
        let tr = trace(vec![vec![vec![1.0], vec![4.0]]]);
        let m = vec![vec![Tensor::identity(1)]];
        let logits = vec![vec![Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap()]; 2];
        let targets = vec![vec![vec![1]]; 2];
        let l = loss_phi(&logits, &targets, &[tr], &m, 0.0).unwrap();
        let ce = -(1.0 - (2.0 + std::f64::consts::E).ln());
        assert!((l - 2.0 * ce).abs() < 1e-12);
    }

    #[test]
    fn single_task_rejected_by_theta() {
        let tr = trace(vec![vec![vec![1.0]]]);
        assert!(loss_theta(&[tr], &[vec![Tensor::identity(1)]]).is_err());
    }

    #[test]
    fn misaligned_rejected() {
        let tr = trace(vec![vec![vec![1.0], vec![2.0]]]);
        assert!(loss_theta(&[tr], &[vec![Tensor::identity(1), Tensor::identity(1)]]).is_err());
    }
}
