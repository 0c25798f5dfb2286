//! Shared fixtures: finite-difference gradient checks for every
//! differentiable building block, and small random generators.

#![allow(dead_code)]

use htan::autodiff::{finite_difference, relative_error, Tape, Var};
use htan::layers::block::{block_forward_var, relation_forward, BlockDims, BlockParams, EncoderKind};
use htan::layers::lstm::{lstm_step_var, LstmCell, LstmState};
use htan::params::ParamSet;
use htan::spd::{bimap_var, reeig_var, StiefelParam};
use htan::training::{distance_tables, loss_phi_var, loss_theta_var, regularizer_var, task_losses_var};
use htan::{apl, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random SPD matrix `AAᵀ + shift·I`.
pub fn random_spd(rng: &mut impl Rng, m: usize, shift: f64) -> Tensor {
    let a = uniform(rng, &[m, m], -1.0, 1.0);
    let mut out = Tensor::zeros(&[m, m]);
    for i in 0..m {
        for j in 0..m {
            let s: f64 = (0..m).map(|k| a.at(i, k) * a.at(j, k)).sum();
            out.set(i, j, s + if i == j { shift } else { 0.0 });
        }
    }
    out
}

/// Builds a scalar from tensors placed on a fresh tape; returns the root and
/// the leaves in the same order as the tensors.
pub type Builder<'a> = dyn Fn(&mut Tape, &[Tensor]) -> Result<(Var, Vec<Var>)> + 'a;

/// Largest relative error between backward and central differences, over
/// `coords` random flat coordinates (all of them when `None`).
pub fn max_grad_error(inputs: &[Tensor], build: &Builder, coords: Option<usize>, rng: &mut impl Rng) -> Result<f64> {
    let mut tape = Tape::new();
    let (root, leaves) = build(&mut tape, inputs)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<f64> = inputs
        .iter()
        .zip(&leaves)
        .flat_map(|(t, &v)| grads.get_or_zeros(v, t))
        .collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let picked: Vec<usize> = match coords {
        Some(k) if k < flat.len() => (0..k).map(|_| rng.random_range(0..flat.len())).collect(),
        _ => (0..flat.len()).collect(),
    };
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let mut eval = |x: &[f64]| {
        let mut off = 0;
        let ts: Vec<Tensor> = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::new(s.clone(), x[off..off + n].to_vec()).unwrap();
                off += n;
                t
            })
            .collect();
        let mut tape = Tape::new();
        let (root, _) = build(&mut tape, &ts).expect("forward at a probe point");
        tape.scalar(root)
    };
    let numeric = finite_difference(&mut eval, &flat, FD_STEP, &picked);
    Ok(picked
        .iter()
        .zip(numeric)
        .map(|(&i, n)| relative_error(analytic[i], n))
        .fold(0.0, f64::max))
}

/// `Σ out ⊙ weights` with the weights held constant.
pub fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone().reshaped(tape.value(out).shape().to_vec())?);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn leaves(tape: &mut Tape, ts: &[Tensor]) -> Vec<Var> {
    ts.iter().map(|t| tape.leaf(t, true)).collect()
}

fn params_from(base: &ParamSet, ts: &[Tensor]) -> ParamSet {
    let mut p = base.clone();
    let ids: Vec<_> = p.ids().collect();
    for (id, t) in ids.into_iter().zip(ts) {
        *p.get_mut(id) = t.clone();
    }
    p
}

fn param_tensors(p: &ParamSet) -> Vec<Tensor> {
    p.iter().map(|(_, t)| t.clone()).collect()
}

/// One gradient-check instance: inputs, the builder and how many coordinates
/// to probe.
pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub build: Box<Builder<'static>>,
    pub coords: Option<usize>,
}

impl Instance {
    pub fn error(&self, rng: &mut impl Rng) -> Result<f64> {
        max_grad_error(&self.inputs, self.build.as_ref(), self.coords, rng)
    }
}

/// Names of the checked operations, in the order [`instance`] accepts them.
pub const GRADIENT_OPS: [&str; 9] = [
    "apl_apply",
    "gaussian_gram",
    "mahalanobis_sq",
    "lstm_step",
    "block_forward",
    "bimap_forward",
    "reeig_forward",
    "loss_phi",
    "loss_theta",
];

/// A random, generic (kink-free) instance of operation `op`.
pub fn instance(op: &str, rng: &mut ChaCha8Rng) -> Instance {
    match op {
        "apl_apply" => apl_instance(rng),
        "gaussian_gram" => gram_instance(rng),
        "mahalanobis_sq" => mahalanobis_instance(rng),
        "lstm_step" => lstm_instance(rng),
        "block_forward" => block_instance(rng),
        "bimap_forward" => bimap_instance(rng),
        "reeig_forward" => reeig_instance(rng),
        "loss_phi" => loss_phi_instance(rng),
        "loss_theta" => loss_theta_instance(rng),
        other => panic!("unknown op {other}"),
    }
}

const KINK_GAP: f64 = 1e-3;

fn apl_instance(rng: &mut ChaCha8Rng) -> Instance {
    let m = rng.random_range(1..=6);
    loop {
        let x = uniform(rng, &[7], -2.0, 2.0);
        let alpha = uniform(rng, &[m], -1.0, 1.0);
        let beta = uniform(rng, &[m], -1.5, 1.5);
        let clear = x.data().iter().all(|&xi| {
            xi.abs() > KINK_GAP && beta.data().iter().all(|&b| (xi - b).abs() > KINK_GAP)
        });
        if !clear {
            continue;
        }
        let w = uniform(rng, &[7], -1.0, 1.0);
        return Instance {
            inputs: vec![x, alpha, beta],
            build: Box::new(move |tape, ts| {
                let v = leaves(tape, ts);
                let y = tape.apl(v[0], v[1], v[2])?;
                Ok((project(tape, y, &w)?, v))
            }),
            coords: None,
        };
    }
}

fn gram_instance(rng: &mut ChaCha8Rng) -> Instance {
    let m = rng.random_range(1..=5);
    let beta = uniform(rng, &[m], -2.0, 2.0);
    let w = uniform(rng, &[m * m], -1.0, 1.0);
    Instance {
        inputs: vec![beta],
        build: Box::new(move |tape, ts| {
            let v = leaves(tape, ts);
            let g = apl::gaussian_gram_var(tape, v[0])?;
            Ok((project(tape, g, &w)?, v))
        }),
        coords: None,
    }
}

fn mahalanobis_instance(rng: &mut ChaCha8Rng) -> Instance {
    let m = rng.random_range(1..=6);
    let a1 = uniform(rng, &[m], -1.0, 1.0);
    let a2 = uniform(rng, &[m], -1.0, 1.0);
    let metric = random_spd(rng, m, 0.5);
    Instance {
        inputs: vec![a1, a2, metric],
        build: Box::new(|tape, ts| {
            let v = leaves(tape, ts);
            let d = apl::mahalanobis_sq_var(tape, v[0], v[1], v[2])?;
            Ok((d, v))
        }),
        coords: None,
    }
}

fn lstm_instance(rng: &mut ChaCha8Rng) -> Instance {
    let (b, d_in, d_h) = (2, rng.random_range(1..=4), rng.random_range(1..=4));
    let mut params = ParamSet::new();
    let cell = LstmCell::init(&mut params, "cell", d_in, d_h, rng);
    let mut inputs = param_tensors(&params);
    inputs.push(uniform(rng, &[b, d_in], -1.0, 1.0));
    inputs.push(uniform(rng, &[b, d_h], -1.0, 1.0));
    inputs.push(uniform(rng, &[b, d_h], -1.0, 1.0));
    let wh = uniform(rng, &[b * d_h], -1.0, 1.0);
    let wc = uniform(rng, &[b * d_h], -1.0, 1.0);
    let np = params.len();
    Instance {
        inputs,
        build: Box::new(move |tape, ts| {
            let p = params_from(&params, &ts[..np]);
            let bound = p.bind(tape, true);
            let mut v = bound.vars().to_vec();
            let extra = leaves(tape, &ts[np..]);
            let state = LstmState {
                h: extra[1],
                c: extra[2],
            };
            let next = lstm_step_var(tape, &cell, &bound, extra[0], state)?;
            let a = project(tape, next.h, &wh)?;
            let c = project(tape, next.c, &wc)?;
            v.extend(extra);
            Ok((tape.add(a, c)?, v))
        }),
        coords: None,
    }
}

fn block_instance(rng: &mut ChaCha8Rng) -> Instance {
    let encoder = if rng.random_bool(0.5) {
        EncoderKind::Lstm
    } else {
        EncoderKind::Attention
    };
    let dims = BlockDims {
        d_in: 3,
        d_h: 4,
        m: 3,
        tasks: 2,
        aux: 3,
        encoder,
    };
    let (b, slots) = (2, 3);
    let mut params = ParamSet::new();
    let block = BlockParams::init(&mut params, "blk", dims, rng).unwrap();
    let mut inputs = param_tensors(&params);
    for _ in 0..slots {
        inputs.push(uniform(rng, &[b, dims.d_in], -1.5, 1.5));
    }
    let weights: Vec<Tensor> = (0..slots * dims.tasks)
        .map(|_| uniform(rng, &[b * dims.d_h], -1.0, 1.0))
        .collect();
    let np = params.len();
    Instance {
        inputs,
        build: Box::new(move |tape, ts| {
            let p = params_from(&params, &ts[..np]);
            let bound = p.bind(tape, true);
            let mut v = bound.vars().to_vec();
            let xs = leaves(tape, &ts[np..]);
            let relation = relation_forward(tape, &block, &bound, xs.len())?;
            let streams: Vec<Vec<Var>> = xs.iter().map(|&x| vec![x]).collect();
            let out = block_forward_var(tape, &block, &bound, relation, &streams)?;
            let mut terms = Vec::new();
            for (n, slot) in out.post.iter().enumerate() {
                for (t, &y) in slot.iter().enumerate() {
                    let s = project(tape, y, &weights[n * slot.len() + t])?;
                    terms.push(tape.reshape(s, &[1])?);
                }
            }
            let all = tape.concat(&terms, 0)?;
            v.extend(xs);
            Ok((tape.sum(all), v))
        }),
        coords: Some(60),
    }
}

fn bimap_instance(rng: &mut ChaCha8Rng) -> Instance {
    let m = rng.random_range(2..=4);
    loop {
        let beta = uniform(rng, &[m], -1.0, 1.0);
        let v = uniform(rng, &[m, m], -1.0, 1.0);
        let b = uniform(rng, &[m], -0.5, 0.5);
        let gap = (0..m)
            .map(|i| ((0..m).map(|j| v.at(i, j) * beta.data()[j]).sum::<f64>() + b.data()[i]).abs())
            .fold(f64::INFINITY, f64::min);
        if gap < KINK_GAP {
            continue;
        }
        let x = random_spd(rng, m, 0.2);
        let w = StiefelParam::random(m, rng).into_tensor();
        let wout = uniform(rng, &[m * m], -1.0, 1.0);
        return Instance {
            inputs: vec![x, beta, w, v, b],
            build: Box::new(move |tape, ts| {
                let l = leaves(tape, ts);
                let y = bimap_var(tape, l[0], l[1], l[2], l[3], l[4])?;
                Ok((project(tape, y, &wout)?, l))
            }),
            coords: None,
        };
    }
}

/// `Q diag(λ) Qᵀ` for a random rotation `Q`.
fn with_spectrum(rng: &mut ChaCha8Rng, lambda: &[f64]) -> Tensor {
    let m = lambda.len();
    let q = StiefelParam::random(m, rng).into_tensor();
    let mut out = Tensor::zeros(&[m, m]);
    for i in 0..m {
        for j in 0..m {
            out.set(i, j, (0..m).map(|k| q.at(i, k) * lambda[k] * q.at(j, k)).sum());
        }
    }
    out
}

fn reeig_instance(rng: &mut ChaCha8Rng) -> Instance {
    let m = rng.random_range(2..=4);
    loop {
        // eigenvalues separated by at least 0.2
        let base = rng.random_range(0.1..0.5);
        let lambda: Vec<f64> = (0..m).map(|k| base + 0.5 * k as f64 + rng.random_range(0.0..0.3)).collect();
        let beta = uniform(rng, &[m], -1.0, 1.0);
        let q = uniform(rng, &[m, m], -0.5, 0.5);
        let c = uniform(rng, &[m], -0.5, 1.5);
        let pre: Vec<f64> = (0..m)
            .map(|i| (0..m).map(|j| q.at(i, j) * beta.data()[j]).sum::<f64>() + c.data()[i])
            .collect();
        let thresholds: Vec<f64> = pre.iter().map(|p| p.max(0.0) + htan::spd::REEIG_FLOOR).collect();
        // eigenvalues come out ascending and are compared index by index
        let clear = pre.iter().all(|p| p.abs() > KINK_GAP)
            && thresholds.iter().zip(&lambda).all(|(t, l)| (t - l).abs() > KINK_GAP);
        if !clear {
            continue;
        }
        let x = with_spectrum(rng, &lambda);
        let w = uniform(rng, &[m * m], -1.0, 1.0);
        return Instance {
            inputs: vec![x, beta, q, c],
            build: Box::new(move |tape, ts| {
                let l = leaves(tape, ts);
                // perturbations of X stay symmetric through the layer's own input
                let xs = tape.symmetrize(l[0])?;
                let y = reeig_var(tape, xs, l[1], l[2], l[3])?;
                Ok((project(tape, y, &w)?, l))
            }),
            coords: None,
        };
    }
}

/// Coordinates `[block][slot][task]` and metrics `[block][slot]` as tape
/// leaves, followed by whatever the caller adds.
fn relation_inputs(rng: &mut ChaCha8Rng, l: usize, n: usize, t: usize, m: usize) -> Vec<Tensor> {
    let mut out = Vec::new();
    for _ in 0..l * n * t {
        out.push(uniform(rng, &[m], -1.0, 1.0));
    }
    for _ in 0..l * n {
        out.push(random_spd(rng, m, 0.3));
    }
    out
}

fn split_relations(v: &[Var], l: usize, n: usize, t: usize) -> (Vec<Vec<Vec<Var>>>, Vec<Vec<Var>>) {
    let alphas = (0..l)
        .map(|b| (0..n).map(|s| v[(b * n + s) * t..(b * n + s + 1) * t].to_vec()).collect())
        .collect();
    let off = l * n * t;
    let metrics = (0..l).map(|b| v[off + b * n..off + (b + 1) * n].to_vec()).collect();
    (alphas, metrics)
}

fn loss_phi_instance(rng: &mut ChaCha8Rng) -> Instance {
    let (l, n, t, m, b, classes) = (2, 2, 3, 3, 4, 3);
    let mut inputs = relation_inputs(rng, l, n, t, m);
    for _ in 0..t * n {
        inputs.push(uniform(rng, &[b, classes], -2.0, 2.0));
    }
    let targets: Vec<Vec<Vec<usize>>> = (0..t)
        .map(|_| (0..n).map(|_| (0..b).map(|_| rng.random_range(0..classes)).collect()).collect())
        .collect();
    let lambda = rng.random_range(0.01..1.0);
    Instance {
        inputs,
        build: Box::new(move |tape, ts| {
            let v = leaves(tape, ts);
            let (alphas, metrics) = split_relations(&v, l, n, t);
            let off = l * n * t + l * n;
            let logits: Vec<Vec<Var>> = (0..t).map(|k| v[off + k * n..off + (k + 1) * n].to_vec()).collect();
            let tables = distance_tables(tape, &alphas, &metrics)?;
            let reg = regularizer_var(tape, &tables)?;
            let losses = task_losses_var(tape, &logits, &targets)?;
            Ok((loss_phi_var(tape, &losses, Some(reg), lambda)?, v))
        }),
        coords: None,
    }
}

fn loss_theta_instance(rng: &mut ChaCha8Rng) -> Instance {
    let (l, n, t, m) = (2, 2, 3, 3);
    let inputs = relation_inputs(rng, l, n, t, m);
    Instance {
        inputs,
        build: Box::new(move |tape, ts| {
            let v = leaves(tape, ts);
            let (alphas, metrics) = split_relations(&v, l, n, t);
            let tables = distance_tables(tape, &alphas, &metrics)?;
            Ok((loss_theta_var(tape, &tables)?, v))
        }),
        coords: None,
    }
}
