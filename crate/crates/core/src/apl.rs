//! Adaptive piecewise-linear (APL) activations and the functional distance
//! between them.
//!
//! An APL activation with basis biases `β ∈ ℝ^M` and coordinates `α ∈ ℝ^M` is
//!
//! ```text
//! F(x) = ReLU(x) + Σ_m α_m ReLU(β_m − x)
//! ```
//!
//! Two activations sharing the same basis differ by `Σ_m Δα_m ReLU(β_m − x)`,
//! so their squared L² distance under a standard-normal input is the quadratic
//! form `Δαᵀ G Δα` with the Gram matrix
//! `G_ij = ∫ ReLU(β_i − x) ReLU(β_j − x) N(x) dx`.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::linalg;
use crate::quadrature;
use crate::tensor::Tensor;

/// Absolute tolerance for each Gram entry.
pub const GRAM_TOLERANCE: f64 = 1e-8;
/// Half-width beyond the basis range covered by the quadrature.
pub const GRAM_TAIL: f64 = 10.0;
/// Relative jitter: `ε = GRAM_JITTER · trace(G) / M`.
pub const GRAM_JITTER: f64 = 1e-6;

/// Basis biases `β` of an APL family.
#[derive(Debug, Clone, PartialEq)]
pub struct AplBasis(Vec<f64>);

impl AplBasis {
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Invalid("APL basis needs at least one entry".into()));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite {
                context: "APL basis".into(),
            });
        }
        Ok(Self(beta))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Coordinates `α` of one activation in an APL family.
#[derive(Debug, Clone, PartialEq)]
pub struct AplCoordinates(Vec<f64>);

impl AplCoordinates {
    pub fn new(alpha: Vec<f64>) -> Self {
        Self(alpha)
    }

    pub fn zeros(m: usize) -> Self {
        Self(vec![0.0; m])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Symmetric positive-definite `M×M` metric for the coordinate distance.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricMatrix(Tensor);

impl MetricMatrix {
    /// Validates symmetry (to 1e−10) and strict positive definiteness.
    pub fn new(m: Tensor) -> Result<Self> {
        if m.rank() != 2 || m.rows() != m.cols() {
            return shape_err("metric", format!("{:?}", m.shape()));
        }
        let asym = linalg::asymmetry(&m);
        if asym > 1e-10 {
            return Err(Error::Invalid(format!("metric asymmetric by {asym:e}")));
        }
        let eig = linalg::sym_eigen(&m)?;
        let min = *eig.values.last().expect("non-empty");
        if !(min > 0.0) {
            return Err(Error::Invalid(format!(
                "metric not positive definite (min eigenvalue {min:e})"
            )));
        }
        Ok(Self(m))
    }

    pub fn identity(m: usize) -> Self {
        Self(Tensor::identity(m))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

fn apl_scalar(x: f64, alpha: &[f64], beta: &[f64]) -> f64 {
    let mut y = x.max(0.0);
    for (&a, &b) in alpha.iter().zip(beta) {
        y += a * (b - x).max(0.0);
    }
    y
}

/// Applies the APL activation elementwise to `x`.
pub fn apl_apply(x: &Tensor, alpha: &AplCoordinates, beta: &AplBasis) -> Result<Tensor> {
    if alpha.len() != beta.len() {
        return shape_err(
            "apl_apply",
            format!("alpha has {} entries, beta {}", alpha.len(), beta.len()),
        );
    }
    let data = x
        .data()
        .iter()
        .map(|&v| apl_scalar(v, alpha.as_slice(), beta.as_slice()))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn std_normal_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Raw Gram matrix and its one-sided partials
/// `P_ij = ∫ 1{x < β_i} ReLU(β_j − x) N(x) dx`, both row-major `M×M`.
pub(crate) fn gram_with_partials(beta: &AplBasis) -> Result<(Vec<f64>, Vec<f64>)> {
    let b = beta.as_slice();
    let m = b.len();
    // the window must also cover the Gaussian mass, not only the breakpoints
    let lo = b.iter().copied().fold(0.0, f64::min) - GRAM_TAIL;
    let hi = b.iter().copied().fold(0.0, f64::max) + GRAM_TAIL;
    let mut gram = vec![0.0; m * m];
    let mut partials = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            let (bi, bj) = (b[i], b[j]);
            if j >= i {
                let r = quadrature::integrate(
                    |x| (bi - x).max(0.0) * (bj - x).max(0.0) * std_normal_pdf(x),
                    lo,
                    hi,
                    GRAM_TOLERANCE,
                    b,
                );
                if !r.converged {
                    return Err(Error::Quadrature {
                        row: i,
                        col: j,
                        error: r.error,
                    });
                }
                gram[i * m + j] = r.value;
                gram[j * m + i] = r.value;
            }
            let p = quadrature::integrate(
                |x| {
                    if x < bi {
                        (bj - x).max(0.0) * std_normal_pdf(x)
                    } else {
                        0.0
                    }
                },
                lo,
                hi,
                GRAM_TOLERANCE,
                b,
            );
            if !p.converged {
                return Err(Error::Quadrature {
                    row: i,
                    col: j,
                    error: p.error,
                });
            }
            partials[i * m + j] = p.value;
        }
    }
    Ok((gram, partials))
}

fn jittered(mut gram: Vec<f64>, m: usize) -> Vec<f64> {
    let trace: f64 = (0..m).map(|i| gram[i * m + i]).sum();
    let eps = GRAM_JITTER * trace / m as f64;
    for i in 0..m {
        gram[i * m + i] += eps;
    }
    gram
}

/// Gram matrix of the basis functions `ReLU(β_m − x)` under a standard
/// normal input, by adaptive quadrature, with a trace-relative jitter added
/// to the diagonal.
pub fn gaussian_gram(beta: &AplBasis) -> Result<MetricMatrix> {
    let m = beta.len();
    let (gram, _) = gram_with_partials(beta)?;
    let t = Tensor::matrix(m, m, jittered(gram, m))?;
    MetricMatrix::new(t)
}

/// Gram matrix without jitter. Singular for duplicated biases.
pub fn gaussian_gram_raw(beta: &AplBasis) -> Result<Tensor> {
    let m = beta.len();
    let (gram, _) = gram_with_partials(beta)?;
    Tensor::matrix(m, m, gram)
}

/// `(α¹ − α²)ᵀ M (α¹ − α²)`
pub fn mahalanobis_sq(a1: &AplCoordinates, a2: &AplCoordinates, m: &MetricMatrix) -> Result<f64> {
    let n = m.dim();
    if a1.len() != n || a2.len() != n {
        return shape_err(
            "mahalanobis_sq",
            format!("coordinates {} and {} vs metric {n}", a1.len(), a2.len()),
        );
    }
    let d: Vec<f64> = a1
        .as_slice()
        .iter()
        .zip(a2.as_slice())
        .map(|(x, y)| x - y)
        .collect();
    let mt = m.tensor();
    let mut s = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += mt.at(i, j) * d[j];
        }
        s += d[i] * row;
    }
    Ok(s.max(0.0))
}

/// Pairwise squared distances between `T ≥ 2` activations.
pub fn distance_matrix(alphas: &[AplCoordinates], m: &MetricMatrix) -> Result<Tensor> {
    let t = alphas.len();
    if t < 2 {
        return Err(Error::Invalid(format!(
            "distance matrix needs at least two activations, got {t}"
        )));
    }
    let mut out = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in (i + 1)..t {
            let d = mahalanobis_sq(&alphas[i], &alphas[j], m)?;
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    Ok(out)
}

/// Differentiable Gram matrix of the basis held in `beta` (a length-`M` vector).
pub fn gaussian_gram_var(tape: &mut Tape, beta: Var) -> Result<Var> {
    let basis = AplBasis::new(tape.value(beta).data().to_vec())?;
    let m = basis.len();
    let (gram, partials) = gram_with_partials(&basis)?;
    let value = Tensor::matrix(m, m, jittered(gram, m))?;
    Ok(tape.push_gram(beta, value, partials, GRAM_JITTER / m as f64))
}

/// Differentiable squared distance; `a1`, `a2` are `[M]`, `metric` is `[M×M]`.
pub fn mahalanobis_sq_var(tape: &mut Tape, a1: Var, a2: Var, metric: Var) -> Result<Var> {
    let m = tape.value(metric).rows();
    let diff = tape.sub(a1, a2)?;
    let row = tape.reshape(diff, &[1, m])?;
    let left = tape.matmul(row, metric)?;
    let q = tape.matmul_nt(left, row)?;
    tape.reshape(q, &[])
}

/// Differentiable pairwise squared distances.
///
/// Returns a row-major `T×T` table of scalar vars; `(i, j)` and `(j, i)`
/// share one node and the diagonal holds constant zeros.
pub fn distance_matrix_var(tape: &mut Tape, alphas: &[Var], metric: Var) -> Result<Vec<Var>> {
    let t = alphas.len();
    let zero = tape.constant(Tensor::scalar(0.0));
    let mut table = vec![zero; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            let d = mahalanobis_sq_var(tape, alphas[i], alphas[j], metric)?;
            table[i * t + j] = d;
            table[j * t + i] = d;
        }
    }
    Ok(table)
}
