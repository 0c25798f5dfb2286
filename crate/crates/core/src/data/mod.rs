//! Regime-switching synthetic multi-task sequences.
//!
//! A hidden Markov regime `r_n` sets how strongly the labels of tasks
//! `t ≥ 2` follow task 1: with probability `ρ(r_n)` they copy it, otherwise
//! they are drawn uniformly. Inputs are class-conditional Gaussians and the
//! task-1 label is a fixed linear (nearest-mean) rule of the input.

mod analysis;
mod io;

pub use analysis::{covariance_trace, empirical_covariance, ground_truth_relation, spearman};
pub use io::{load_dataset, save_dataset, DATA_MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{self, Section};
use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeSwitchingSpec {
    pub tasks: usize,
    pub input_dim: usize,
    pub seq_len: usize,
    pub classes: usize,
    pub sequences: usize,
    /// Row-stochastic regime transition matrix.
    pub transition: Vec<Vec<f64>>,
    /// Label coupling per regime.
    pub rho: Vec<f64>,
    /// Distribution of the regime at the first slot.
    pub initial: Vec<f64>,
    /// Norm of each class mean.
    pub separation: f64,
    /// Seeds the class means and hence the task-1 rule; splits that share it
    /// share the rule.
    pub rule_seed: u64,
    /// Seeds the sampled sequences.
    pub seed: u64,
}

impl Default for RegimeSwitchingSpec {
    fn default() -> Self {
        Self {
            tasks: 2,
            input_dim: 8,
            seq_len: 40,
            classes: 3,
            sequences: 500,
            transition: vec![vec![0.9, 0.1], vec![0.1, 0.9]],
            rho: vec![0.95, 0.05],
            initial: vec![1.0, 0.0],
            separation: 3.0,
            rule_seed: 7,
            seed: 7,
        }
    }
}

const STOCHASTIC_TOL: f64 = 1e-12;

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::Invalid(format!("{name} has entries outside [0, 1]")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::Invalid(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

impl RegimeSwitchingSpec {
    pub fn regimes(&self) -> usize {
        self.rho.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tasks", self.tasks),
            ("input_dim", self.input_dim),
            ("seq_len", self.seq_len),
            ("classes", self.classes),
            ("sequences", self.sequences),
        ] {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be at least 1")));
            }
        }
        if self.classes > self.input_dim {
            return Err(Error::Invalid(format!(
                "classes ({}) cannot exceed input_dim ({})",
                self.classes, self.input_dim
            )));
        }
        let r = self.regimes();
        if r == 0 {
            return Err(Error::Invalid("at least one regime is required".into()));
        }
        if self.rho.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::Invalid("rho entries must lie in [0, 1]".into()));
        }
        if self.transition.len() != r || self.transition.iter().any(|row| row.len() != r) {
            return Err(Error::Invalid(format!("transition must be {r}×{r}")));
        }
        for (i, row) in self.transition.iter().enumerate() {
            check_distribution(&format!("transition row {i}"), row)?;
        }
        if self.initial.len() != r {
            return Err(Error::Invalid(format!("initial must have {r} entries")));
        }
        check_distribution("initial", &self.initial)?;
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return Err(Error::Invalid("separation must be positive".into()));
        }
        Ok(())
    }

    /// Class means: centred simplex vertices scaled to `separation` and
    /// rotated by a seeded orthogonal matrix. Row `c` is the mean of class `c`.
    pub fn class_means(&self) -> Tensor {
        let (d, c) = (self.input_dim, self.classes);
        let mut rng = ChaCha8Rng::seed_from_u64(self.rule_seed);
        let g: Vec<f64> = (0..d * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (q, _) = linalg::qr(&Tensor::matrix(d, d, g).expect("square"));
        let mut means = Tensor::zeros(&[c, d]);
        let centre = 1.0 / c as f64;
        let norm = if c == 1 { 1.0 } else { (1.0 - centre).sqrt() };
        for k in 0..c {
            for j in 0..d {
                // rotate the centred vertex e_k − 1/c over the first c axes
                let v: f64 = (0..c)
                    .map(|i| {
                        let e = if i == k { 1.0 } else { 0.0 };
                        let vert = if c == 1 { e } else { (e - centre) / norm };
                        q.at(j, i) * vert
                    })
                    .sum();
                means.set(k, j, self.separation * v);
            }
        }
        means
    }

    /// The task-1 labelling rule: nearest class mean, i.e.
    /// `argmax_k μ_k·x − ‖μ_k‖²/2`.
    pub fn label_rule(means: &Tensor, x: &[f64]) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for k in 0..means.rows() {
            let mu = means.row(k);
            let score = mu.iter().zip(x).map(|(m, v)| m * v).sum::<f64>()
                - 0.5 * mu.iter().map(|m| m * m).sum::<f64>();
            if score > best.1 {
                best = (k, score);
            }
        }
        best.0
    }
}

fn draw(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    // u within rounding of 1: last state with positive mass
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

/// A generated split.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub spec: RegimeSwitchingSpec,
    /// `[sequence][slot][feature]`, flattened.
    pub inputs: Vec<f64>,
    /// `[task][sequence][slot]`, flattened.
    pub labels: Vec<usize>,
    /// `[sequence][slot]`, flattened.
    pub regimes: Vec<usize>,
}

impl SequenceBatch {
    pub fn sequences(&self) -> usize {
        self.spec.sequences
    }

    pub fn seq_len(&self) -> usize {
        self.spec.seq_len
    }

    pub fn tasks(&self) -> usize {
        self.spec.tasks
    }

    pub fn input(&self, b: usize, n: usize) -> &[f64] {
        let d = self.spec.input_dim;
        let o = (b * self.spec.seq_len + n) * d;
        &self.inputs[o..o + d]
    }

    pub fn label(&self, t: usize, b: usize, n: usize) -> usize {
        self.labels[(t * self.spec.sequences + b) * self.spec.seq_len + n]
    }

    pub fn regime(&self, b: usize, n: usize) -> usize {
        self.regimes[b * self.spec.seq_len + n]
    }

    /// Labels of task `t` at slot `n` across all sequences.
    pub fn slot_labels(&self, t: usize, n: usize) -> Vec<usize> {
        (0..self.sequences()).map(|b| self.label(t, b, n)).collect()
    }

    /// Inputs of the selected sequences at slot `n`, as `[|rows|, d_in]`.
    pub fn batch_inputs(&self, rows: &[usize], n: usize) -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * self.spec.input_dim);
        for &b in rows {
            data.extend_from_slice(self.input(b, n));
        }
        Tensor::matrix(rows.len(), self.spec.input_dim, data).expect("non-empty batch")
    }

    pub fn batch_labels(&self, t: usize, rows: &[usize], n: usize) -> Vec<usize> {
        rows.iter().map(|&b| self.label(t, b, n)).collect()
    }
}

/// Generates a split. Identical specs give bit-identical output.
pub fn generate_dataset(spec: &RegimeSwitchingSpec) -> Result<SequenceBatch> {
    spec.validate()?;
    let (b, n, d, t) = (spec.sequences, spec.seq_len, spec.input_dim, spec.tasks);
    let means = spec.class_means();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut inputs = Vec::with_capacity(b * n * d);
    let mut labels = vec![0usize; t * b * n];
    let mut regimes = Vec::with_capacity(b * n);
    let mut x = vec![0.0; d];
    for seq in 0..b {
        let mut r = draw(&spec.initial, rng.random::<f64>());
        for slot in 0..n {
            if slot > 0 {
                r = draw(&spec.transition[r], rng.random::<f64>());
            }
            regimes.push(r);
            let class = rng.random_range(0..spec.classes);
            for (j, xj) in x.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *xj = means.at(class, j) + z;
            }
            inputs.extend_from_slice(&x);
            let first = RegimeSwitchingSpec::label_rule(&means, &x);
            labels[seq * n + slot] = first;
            for task in 1..t {
                let u: f64 = rng.random();
                let free = rng.random_range(0..spec.classes);
                labels[(task * b + seq) * n + slot] = if u < spec.rho[r] { first } else { free };
            }
        }
    }
    Ok(SequenceBatch {
        spec: spec.clone(),
        inputs,
        labels,
        regimes,
    })
}

impl Section for RegimeSwitchingSpec {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "input_dim" => self.input_dim = config::parse_usize(value)?,
            "seq_len" => self.seq_len = config::parse_usize(value)?,
            "classes" => self.classes = config::parse_usize(value)?,
            "sequences" => self.sequences = config::parse_usize(value)?,
            "transition" => self.transition = config::parse_matrix(value)?,
            "rho" => self.rho = config::parse_list(value)?,
            "initial" => self.initial = config::parse_list(value)?,
            "separation" => self.separation = config::parse_f64(value)?,
            "rule_seed" => self.rule_seed = config::parse_u64(value)?,
            "seed" => self.seed = config::parse_u64(value)?,
            "tasks" => self.tasks = config::parse_usize(value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("tasks", self.tasks.to_string()),
            ("input_dim", self.input_dim.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("classes", self.classes.to_string()),
            ("sequences", self.sequences.to_string()),
            ("transition", config::format_matrix(&self.transition)),
            ("rho", config::format_list(&self.rho)),
            ("initial", config::format_list(&self.initial)),
            ("separation", self.separation.to_string()),
            ("rule_seed", self.rule_seed.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}
