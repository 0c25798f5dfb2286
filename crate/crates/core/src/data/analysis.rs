//! Label covariance, ground-truth coupling and rank correlation.

use super::SequenceBatch;
use crate::error::{Error, Result};

/// `E[Y₁Y₂] − E[Y₁]E[Y₂]` with `Y₁ = 1{labels1 = event.0}` and
/// `Y₂ = 1{labels2 = event.1}`, averaged over the given samples.
pub fn empirical_covariance(labels1: &[usize], labels2: &[usize], event: (usize, usize)) -> Result<f64> {
    if labels1.is_empty() {
        return Err(Error::Invalid("covariance of an empty slot".into()));
    }
    if labels1.len() != labels2.len() {
        return Err(Error::Invalid(format!(
            "label vectors differ in length: {} vs {}",
            labels1.len(),
            labels2.len()
        )));
    }
    let n = labels1.len() as f64;
    let (mut s1, mut s2, mut s12) = (0.0, 0.0, 0.0);
    for (&a, &b) in labels1.iter().zip(labels2) {
        let y1 = f64::from(u8::from(a == event.0));
        let y2 = f64::from(u8::from(b == event.1));
        s1 += y1;
        s2 += y2;
        s12 += y1 * y2;
    }
    Ok(s12 / n - (s1 / n) * (s2 / n))
}

/// Per-slot covariance between tasks `t1` and `t2`.
pub fn covariance_trace(batch: &SequenceBatch, t1: usize, t2: usize, event: (usize, usize)) -> Result<Vec<f64>> {
    if t1 >= batch.tasks() || t2 >= batch.tasks() {
        return Err(Error::Invalid(format!("task index out of range for {} tasks", batch.tasks())));
    }
    (0..batch.seq_len())
        .map(|n| empirical_covariance(&batch.slot_labels(t1, n), &batch.slot_labels(t2, n), event))
        .collect()
}

/// Mean coupling `ρ(r_n)` over sequences, per slot.
pub fn ground_truth_relation(batch: &SequenceBatch) -> Vec<f64> {
    let b = batch.sequences() as f64;
    (0..batch.seq_len())
        .map(|n| {
            (0..batch.sequences())
                .map(|s| batch.spec.rho[batch.regime(s, n)])
                .sum::<f64>()
                / b
        })
        .collect()
}

/// Ranks starting at 1, ties given their average rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation. `None` when either input is constant or the
/// lengths differ or are below 2.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
