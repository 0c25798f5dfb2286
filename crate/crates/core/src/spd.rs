//! Layers on the manifold of symmetric positive-definite matrices, modulated
//! by a basis vector `β`.
//!
//! * BiMap: `X ↦ W [X + diag(ReLU(V β + b))] Wᵀ` with `W` orthogonal.
//! * ReEig: `X = U Σ Uᵀ ↦ U max(ReLU(Q β + c) + ε, Σ) Uᵀ`, eigenvalues sorted
//!   descending and paired with thresholds by index.
//!
//! A recurrent step applies `K` BiMap/ReEig pairs to carry `M_{n−1}` to `M_n`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{self, SymEigen};
use crate::params::{Bound, ParamId, ParamKind, ParamSet};
use crate::tensor::Tensor;

/// Minimum eigenvalue of a valid [`SpdMatrix`].
pub const SPD_MIN_EIGENVALUE: f64 = 1e-10;
/// Symmetry tolerance of a valid [`SpdMatrix`].
pub const SPD_SYMMETRY_TOL: f64 = 1e-10;
/// Floor added to every ReEig threshold.
pub const REEIG_FLOOR: f64 = 1e-8;
/// Orthogonality tolerance of a valid [`StiefelParam`].
pub const STIEFEL_TOL: f64 = 1e-6;

/// Symmetric positive-definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(Tensor);

/// Spectral summary used by the invariant checks.
#[derive(Debug, Clone, Copy)]
pub struct SpdReport {
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub asymmetry: f64,
}

impl SpdReport {
    pub fn of(m: &Tensor) -> Result<Self> {
        let eig = linalg::sym_eigen(m)?;
        Ok(Self {
            min_eigenvalue: *eig.values.last().expect("non-empty"),
            max_eigenvalue: eig.values[0],
            asymmetry: linalg::asymmetry(m),
        })
    }

    pub fn is_valid(&self) -> bool {
        self.min_eigenvalue >= SPD_MIN_EIGENVALUE && self.asymmetry <= SPD_SYMMETRY_TOL
    }

    pub fn condition_number(&self) -> f64 {
        self.max_eigenvalue / self.min_eigenvalue
    }
}

impl SpdMatrix {
    /// Validates the SPD invariants.
    pub fn new(m: Tensor) -> Result<Self> {
        if m.rank() != 2 || m.rows() != m.cols() {
            return shape_err("spd", format!("{:?}", m.shape()));
        }
        if !m.is_finite() {
            return Err(Error::NonFinite {
                context: "SPD matrix".into(),
            });
        }
        let report = SpdReport::of(&m)?;
        if !report.is_valid() {
            return Err(Error::Invalid(format!(
                "not SPD: min eigenvalue {:e}, asymmetry {:e}",
                report.min_eigenvalue, report.asymmetry
            )));
        }
        Ok(Self(m))
    }

    pub fn identity(n: usize) -> Self {
        Self(Tensor::identity(n))
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

/// Eigenvectors (columns of `u`) with eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct EigPair {
    pub u: Tensor,
    pub lambda: Vec<f64>,
}

impl From<SymEigen> for EigPair {
    fn from(e: SymEigen) -> Self {
        Self {
            u: e.vectors,
            lambda: e.values,
        }
    }
}

/// Eigendecomposition of a symmetric matrix.
pub fn sym_eig(x: &Tensor) -> Result<EigPair> {
    linalg::sym_eigen(x).map(EigPair::from)
}

/// Symmetrizes, floors the spectrum at [`SPD_MIN_EIGENVALUE`] and reconstructs.
pub fn spd_project(x: &Tensor) -> Result<SpdMatrix> {
    let eig = linalg::sym_eigen(x)?;
    let floored: Vec<f64> = eig
        .values
        .iter()
        .map(|&l| l.max(SPD_MIN_EIGENVALUE))
        .collect();
    let mut m = eig.recompose_with(&floored);
    // reconstruction can land a hair under the floor; the correction must
    // exceed the rounding of the diagonal to take effect
    let scale = floored.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
    let mut margin = 16.0 * f64::EPSILON * scale;
    for _ in 0..8 {
        let report = SpdReport::of(&m)?;
        if report.min_eigenvalue >= SPD_MIN_EIGENVALUE {
            break;
        }
        let bump = SPD_MIN_EIGENVALUE - report.min_eigenvalue + margin;
        for i in 0..m.rows() {
            let v = m.at(i, i);
            m.set(i, i, v + bump);
        }
        margin *= 2.0;
    }
    SpdMatrix::new(m)
}

/// Orthogonal square weight.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelParam(Tensor);

/// Direction of a Riemannian step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepDirection {
    Ascent,
    Descent,
}

impl StiefelParam {
    pub fn new(w: Tensor) -> Result<Self> {
        if w.rank() != 2 || w.rows() != w.cols() {
            return shape_err("stiefel", format!("{:?}", w.shape()));
        }
        let defect = orthogonality_defect(&w);
        if defect >= STIEFEL_TOL {
            return Err(Error::Invalid(format!(
                "weight is not orthogonal: ‖WWᵀ − I‖∞ = {defect:e}"
            )));
        }
        Ok(Self(w))
    }

    pub fn identity(n: usize) -> Self {
        Self(Tensor::identity(n))
    }

    /// Haar-ish random orthogonal matrix: QR of a Gaussian matrix.
    pub fn random<R: Rng>(n: usize, rng: &mut R) -> Self {
        let data = (0..n * n).map(|_| StandardNormal.sample(rng)).collect();
        let g = Tensor::matrix(n, n, data).expect("square");
        let (q, _) = linalg::qr(&g);
        Self(q)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// `‖W Wᵀ − I‖∞` (largest absolute entry).
pub fn orthogonality_defect(w: &Tensor) -> f64 {
    let wt = linalg::transpose(w);
    linalg::identity_defect(&linalg::matmul(w, &wt))
}

/// Projects `grad` onto the tangent space at `w`: `G − W sym(Wᵀ G)`.
pub fn tangent_project(w: &Tensor, grad: &Tensor) -> Tensor {
    let wtg = linalg::matmul(&linalg::transpose(w), grad);
    let sym = linalg::symmetrize(&wtg);
    let corr = linalg::matmul(w, &sym);
    let data = grad
        .data()
        .iter()
        .zip(corr.data())
        .map(|(g, c)| g - c)
        .collect();
    Tensor::new(grad.shape().to_vec(), data).expect("same shape")
}

/// One Riemannian gradient step with QR retraction.
pub fn stiefel_step(
    w: &StiefelParam,
    grad: &Tensor,
    lr: f64,
    direction: StepDirection,
) -> Result<StiefelParam> {
    if grad.shape() != w.0.shape() {
        return shape_err(
            "stiefel_step",
            format!("grad {:?} vs weight {:?}", grad.shape(), w.0.shape()),
        );
    }
    if !(lr > 0.0) {
        return Err(Error::Invalid(format!("learning rate must be positive, got {lr}")));
    }
    let tangent = tangent_project(&w.0, grad);
    let sign = match direction {
        StepDirection::Ascent => 1.0,
        StepDirection::Descent => -1.0,
    };
    let moved: Vec<f64> = w
        .0
        .data()
        .iter()
        .zip(tangent.data())
        .map(|(x, t)| x + sign * lr * t)
        .collect();
    let moved = Tensor::new(w.0.shape().to_vec(), moved)?;
    let (q, r) = linalg::qr(&moved);
    let n = r.rows();
    for k in 0..n {
        if r.at(k, k).abs() < 1e-12 {
            return Err(Error::RankDeficient {
                index: k,
                value: r.at(k, k),
            });
        }
    }
    StiefelParam::new(q)
}

/// Parameter handles of one BiMap/ReEig pair.
#[derive(Debug, Clone, Copy)]
pub struct SpdLayer {
    pub w: ParamId,
    pub v: ParamId,
    pub b: ParamId,
    pub q: ParamId,
    pub c: ParamId,
}

/// A recurrent `β`-modulated SPD network with `K` layer pairs.
#[derive(Debug, Clone)]
pub struct SpdNet {
    pub dim: usize,
    pub layers: Vec<SpdLayer>,
}

impl SpdNet {
    /// Registers `k` layer pairs of size `m` in `params` under `prefix`.
    ///
    /// `W` starts as a random orthogonal matrix; `V`, `Q` are small uniform;
    /// `b`, `c` start at zero.
    pub fn init<R: Rng>(params: &mut ParamSet, prefix: &str, m: usize, k: usize, rng: &mut R) -> Self {
        let bound = 0.1 / (m as f64).sqrt();
        let uniform = |rng: &mut R| {
            let data = (0..m * m).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::matrix(m, m, data).expect("square")
        };
        let layers = (0..k)
            .map(|i| {
                let w = StiefelParam::random(m, rng).into_tensor();
                let w = params.add(format!("{prefix}.{i}.w"), w, ParamKind::Stiefel);
                let v = params.add(format!("{prefix}.{i}.v"), uniform(rng), ParamKind::Euclidean);
                let b = params.add(
                    format!("{prefix}.{i}.b"),
                    Tensor::zeros(&[m]),
                    ParamKind::Euclidean,
                );
                let q = params.add(format!("{prefix}.{i}.q"), uniform(rng), ParamKind::Euclidean);
                let c = params.add(
                    format!("{prefix}.{i}.c"),
                    Tensor::zeros(&[m]),
                    ParamKind::Euclidean,
                );
                SpdLayer { w, v, b, q, c }
            })
            .collect();
        Self { dim: m, layers }
    }

    pub fn scalar_count(m: usize, k: usize) -> usize {
        k * (3 * m * m + 2 * m)
    }
}

/// `M β` for `M: [m×m]`, `β: [m]`.
fn matvec(tape: &mut Tape, m: Var, beta: Var) -> Result<Var> {
    let n = tape.value(beta).numel();
    let row = tape.reshape(beta, &[1, n])?;
    let out = tape.matmul_nt(row, m)?;
    tape.reshape(out, &[n])
}

fn check_dims(tape: &Tape, x: Var, beta: Var, mats: &[Var], vecs: &[Var]) -> Result<usize> {
    let xs = tape.value(x);
    if xs.rank() != 2 || xs.rows() != xs.cols() {
        return shape_err("spd layer", format!("input {:?}", xs.shape()));
    }
    let m = xs.rows();
    if tape.value(beta).shape() != [m] {
        return shape_err("spd layer", format!("beta {:?} vs dim {m}", tape.value(beta).shape()));
    }
    for &v in mats {
        if tape.value(v).shape() != [m, m] {
            return shape_err("spd layer", format!("matrix {:?} vs dim {m}", tape.value(v).shape()));
        }
    }
    for &v in vecs {
        if tape.value(v).shape() != [m] {
            return shape_err("spd layer", format!("vector {:?} vs dim {m}", tape.value(v).shape()));
        }
    }
    Ok(m)
}

/// Differentiable BiMap layer.
pub fn bimap_var(tape: &mut Tape, x: Var, beta: Var, w: Var, v: Var, b: Var) -> Result<Var> {
    check_dims(tape, x, beta, &[w, v], &[b])?;
    let vb = matvec(tape, v, beta)?;
    let shifted = tape.add(vb, b)?;
    let modulation = tape.relu(shifted);
    let d = tape.diag_embed(modulation)?;
    let inner = tape.add(x, d)?;
    let left = tape.matmul(w, inner)?;
    let out = tape.matmul_nt(left, w)?;
    tape.symmetrize(out)
}

/// Per-index ReEig thresholds `ReLU(Q β + c) + ε`.
pub fn reeig_thresholds_var(tape: &mut Tape, beta: Var, q: Var, c: Var) -> Result<Var> {
    let qb = matvec(tape, q, beta)?;
    let shifted = tape.add(qb, c)?;
    let t = tape.relu(shifted);
    Ok(tape.offset(t, REEIG_FLOOR))
}

/// Differentiable ReEig layer.
pub fn reeig_var(tape: &mut Tape, x: Var, beta: Var, q: Var, c: Var) -> Result<Var> {
    check_dims(tape, x, beta, &[q], &[c])?;
    let thresholds = reeig_thresholds_var(tape, beta, q, c)?;
    let (u, lambda) = tape.sym_eig(x)?;
    let clamped = tape.maximum(thresholds, lambda)?;
    let d = tape.diag_embed(clamped)?;
    let left = tape.matmul(u, d)?;
    let out = tape.matmul_nt(left, u)?;
    tape.symmetrize(out)
}

/// One recurrent step `M_{n−1} → M_n` on the tape.
pub fn spdnet_step_var(
    tape: &mut Tape,
    m_prev: Var,
    beta: Var,
    net: &SpdNet,
    bound: &Bound,
) -> Result<Var> {
    let mut x = m_prev;
    for layer in &net.layers {
        x = bimap_var(tape, x, beta, bound[layer.w], bound[layer.v], bound[layer.b])?;
        x = reeig_var(tape, x, beta, bound[layer.q], bound[layer.c])?;
    }
    Ok(x)
}

fn check_beta(beta: &[f64], m: usize) -> Result<()> {
    if beta.len() != m {
        return shape_err("spd layer", format!("beta has {} entries, dim {m}", beta.len()));
    }
    Ok(())
}

/// BiMap on concrete values.
pub fn bimap_forward(
    x: &SpdMatrix,
    beta: &[f64],
    w: &StiefelParam,
    v: &Tensor,
    b: &Tensor,
) -> Result<SpdMatrix> {
    check_beta(beta, x.dim())?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.tensor().clone());
    let bv = tape.constant(Tensor::vector(beta.to_vec()));
    let wv = tape.constant(w.tensor().clone());
    let vv = tape.constant(v.clone());
    let biasv = tape.constant(b.clone());
    let out = bimap_var(&mut tape, xv, bv, wv, vv, biasv)?;
    SpdMatrix::new(tape.value(out).clone())
}

/// ReEig on concrete values.
pub fn reeig_forward(x: &SpdMatrix, beta: &[f64], q: &Tensor, c: &Tensor) -> Result<SpdMatrix> {
    check_beta(beta, x.dim())?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.tensor().clone());
    let bv = tape.constant(Tensor::vector(beta.to_vec()));
    let qv = tape.constant(q.clone());
    let cv = tape.constant(c.clone());
    let out = reeig_var(&mut tape, xv, bv, qv, cv)?;
    SpdMatrix::new(tape.value(out).clone())
}

/// One recurrent step on concrete values.
pub fn spdnet_step(m_prev: &SpdMatrix, beta: &[f64], net: &SpdNet, params: &ParamSet) -> Result<SpdMatrix> {
    check_beta(beta, m_prev.dim())?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let mv = tape.constant(m_prev.tensor().clone());
    let bv = tape.constant(Tensor::vector(beta.to_vec()));
    let out = spdnet_step_var(&mut tape, mv, bv, net, &bound)?;
    SpdMatrix::new(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn diag(v: &[f64]) -> Tensor {
        let mut t = Tensor::zeros(&[v.len(), v.len()]);
        for (i, &x) in v.iter().enumerate() {
            t.set(i, i, x);
        }
        t
    }

    #[test]
    fn eig_of_diagonal() {
        let e = sym_eig(&diag(&[2.0, 1.0])).unwrap();
        assert_eq!(e.lambda, vec![2.0, 1.0]);
        assert!(linalg::identity_defect(&e.u) < 1e-15);
        let e = sym_eig(&diag(&[1.0, 2.0])).unwrap();
        assert_eq!(e.lambda, vec![2.0, 1.0]);
        assert_eq!(e.u.at(1, 0).abs(), 1.0);
    }

    #[test]
    fn eig_of_identity() {
        let e = sym_eig(&Tensor::identity(4)).unwrap();
        assert!(e.lambda.iter().all(|&l| l == 1.0));
        let back = linalg::SymEigen {
            vectors: e.u.clone(),
            values: e.lambda.clone(),
        }
        .recompose();
        assert_eq!(back, Tensor::identity(4));
    }

    #[test]
    fn eig_rejects_non_finite() {
        let mut t = Tensor::identity(2);
        t.set(0, 1, f64::NAN);
        assert!(sym_eig(&t).is_err());
    }

    #[test]
    fn bimap_identity_configuration() {
        let x = SpdMatrix::new(Tensor::matrix(2, 2, vec![2.0, 0.5, 0.5, 1.0]).unwrap()).unwrap();
        let out = bimap_forward(
            &x,
            &[1.0, -1.0],
            &StiefelParam::identity(2),
            &Tensor::zeros(&[2, 2]),
            &Tensor::vector(vec![-1.0, 0.0]),
        )
        .unwrap();
        assert_eq!(out.tensor(), x.tensor());
    }

    #[test]
    fn bimap_diagonal_arithmetic() {
        let out = bimap_forward(
            &SpdMatrix::identity(2),
            &[0.0, 0.0],
            &StiefelParam::identity(2),
            &Tensor::zeros(&[2, 2]),
            &Tensor::vector(vec![1.0, 2.0]),
        )
        .unwrap();
        assert_eq!(out.tensor(), &diag(&[2.0, 3.0]));
    }

    #[test]
    fn reeig_inactive_is_identity() {
        let x = SpdMatrix::new(Tensor::matrix(2, 2, vec![3.0, 0.4, 0.4, 2.0]).unwrap()).unwrap();
        let out = reeig_forward(&x, &[0.0, 0.0], &Tensor::zeros(&[2, 2]), &Tensor::vector(vec![1.0, 1.0]))
            .unwrap();
        for (a, b) in out.tensor().data().iter().zip(x.tensor().data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn reeig_clamping_case() {
        let x = SpdMatrix::new(diag(&[0.1, 5.0])).unwrap();
        let out = reeig_forward(&x, &[0.0, 0.0], &Tensor::zeros(&[2, 2]), &Tensor::vector(vec![1.0, 1.0]))
            .unwrap();
        let want = diag(&[1.0 + REEIG_FLOOR, 5.0]);
        for (a, b) in out.tensor().data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spdnet_with_no_layers_is_identity_map() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = SpdNet::init(&mut params, "spd", 3, 0, &mut rng);
        let x = SpdMatrix::new(diag(&[3.0, 2.0, 1.0])).unwrap();
        let out = spdnet_step(&x, &[0.1, 0.2, 0.3], &net, &params).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn spdnet_identity_configured_layer() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = SpdNet::init(&mut params, "spd", 2, 1, &mut rng);
        let l = net.layers[0];
        *params.get_mut(l.w) = Tensor::identity(2);
        *params.get_mut(l.v) = Tensor::zeros(&[2, 2]);
        *params.get_mut(l.q) = Tensor::zeros(&[2, 2]);
        let x = SpdMatrix::new(Tensor::matrix(2, 2, vec![2.0, 0.3, 0.3, 1.0]).unwrap()).unwrap();
        let out = spdnet_step(&x, &[0.5, -0.5], &net, &params).unwrap();
        for (a, b) in out.tensor().data().iter().zip(x.tensor().data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn project_cases() {
        let x = Tensor::matrix(2, 2, vec![2.0, 0.3, 0.3, 1.0]).unwrap();
        let p = spd_project(&x).unwrap();
        for (a, b) in p.tensor().data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        let p = spd_project(&diag(&[1.0, -0.5])).unwrap();
        assert!((p.tensor().at(0, 0) - 1.0).abs() < 1e-15);
        assert!((p.tensor().at(1, 1) - 1e-10).abs() < 1e-15);
        assert!(spd_project(&Tensor::full(&[2, 2], f64::INFINITY)).is_err());
    }

    #[test]
    fn stiefel_zero_grad_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = StiefelParam::random(4, &mut rng);
        let out = stiefel_step(&w, &Tensor::zeros(&[4, 4]), 0.1, StepDirection::Descent).unwrap();
        for (a, b) in out.tensor().data().iter().zip(w.tensor().data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn stiefel_rejects_non_orthogonal() {
        assert!(StiefelParam::new(Tensor::full(&[2, 2], 1.0)).is_err());
    }

    #[test]
    fn stiefel_rotation_tracks_geodesic() {
        // W = I, antisymmetric direction A: geodesic is exp(tA).
        let a = Tensor::matrix(2, 2, vec![0.0, 1.0, -1.0, 0.0]).unwrap();
        let lr = 1e-3;
        let out = stiefel_step(&StiefelParam::identity(2), &a, lr, StepDirection::Ascent).unwrap();
        let (c, s) = (lr.cos(), lr.sin());
        let geo = [c, s, -s, c];
        for (x, y) in out.tensor().data().iter().zip(geo) {
            assert!((x - y).abs() < 10.0 * lr * lr);
        }
        assert!(orthogonality_defect(out.tensor()) < 1e-12);
    }
}
