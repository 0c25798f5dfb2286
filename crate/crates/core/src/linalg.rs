//! Small dense kernels shared by the tape and the SPD layers.
//!
//! Everything here works on row-major `f64` slices. Matrices in this crate are
//! at most a few hundred wide, so the loops are plain and deterministic.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] = s;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    assert_eq!(k, b.rows(), "matmul inner dimension");
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::matrix(m, n, out).expect("matmul output shape")
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.at(i, j);
        }
    }
    Tensor::matrix(c, r, out).expect("transpose output shape")
}

/// `(A + Aᵀ) / 2`
pub fn symmetrize(a: &Tensor) -> Tensor {
    let n = a.rows();
    let mut out = a.clone();
    out.grad = None;
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, 0.5 * (a.at(i, j) + a.at(j, i)));
        }
    }
    out
}

/// Largest `|A_ij − A_ji|`.
pub fn asymmetry(a: &Tensor) -> f64 {
    let n = a.rows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a.at(i, j) - a.at(j, i)).abs());
        }
    }
    worst
}

/// Largest `|A_ij − δ_ij|`.
pub fn identity_defect(a: &Tensor) -> f64 {
    let n = a.rows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..a.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((a.at(i, j) - target).abs());
        }
    }
    worst
}

/// Eigendecomposition of a symmetric matrix.
///
/// `vectors` holds eigenvectors as columns; `values` are sorted descending.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub vectors: Tensor,
    pub values: Vec<f64>,
}

impl SymEigen {
    /// `U diag(d) Uᵀ`
    pub fn recompose_with(&self, d: &[f64]) -> Tensor {
        let n = d.len();
        let u = self.vectors.data();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += u[i * n + k] * d[k] * u[j * n + k];
                }
                out[i * n + j] = s;
                out[j * n + i] = s;
            }
        }
        Tensor::matrix(n, n, out).expect("square")
    }

    pub fn recompose(&self) -> Tensor {
        self.recompose_with(&self.values)
    }
}

/// Cyclic Jacobi eigensolver. The input is symmetrized as `(X + Xᵀ)/2` first.
pub fn sym_eigen(x: &Tensor) -> Result<SymEigen> {
    if x.rank() != 2 || x.rows() != x.cols() {
        return Err(Error::Shape {
            op: "sym_eig",
            detail: format!("expected a square matrix, got {:?}", x.shape()),
        });
    }
    if !x.is_finite() {
        return Err(Error::NonFinite {
            context: "sym_eig input".into(),
        });
    }
    let n = x.rows();
    let mut a = symmetrize(x).into_data();
    let mut v = Tensor::identity(n).into_data();

    let frob: f64 = a.iter().map(|e| e * e).sum::<f64>().sqrt();
    let tol = f64::EPSILON * frob.max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal eigenvalues keep their original column order
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + dst] = v[k * n + src];
        }
    }
    Ok(SymEigen {
        vectors: Tensor::matrix(n, n, vectors)?,
        values,
    })
}

/// Householder QR of a square matrix with `R` normalized to a non-negative
/// diagonal. Returns `(Q, R)`.
pub fn qr(a: &Tensor) -> (Tensor, Tensor) {
    let n = a.rows();
    let m = a.cols();
    assert_eq!(n, m, "qr expects a square matrix");
    let mut r = a.data().to_vec();
    let mut q = Tensor::identity(n).into_data();
    for k in 0..n.saturating_sub(1) {
        let mut norm = 0.0;
        for i in k..n {
            norm += r[i * n + k] * r[i * n + k];
        }
        let norm = norm.sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r[k * n + k] > 0.0 { -norm } else { norm };
        let mut v = vec![0.0; n];
        for i in k..n {
            v[i] = r[i * n + k];
        }
        v[k] -= alpha;
        let vnorm2: f64 = v[k..].iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        // R <- (I - 2vvᵀ/vᵀv) R
        for j in 0..n {
            let mut s = 0.0;
            for i in k..n {
                s += v[i] * r[i * n + j];
            }
            let f = 2.0 * s / vnorm2;
            for i in k..n {
                r[i * n + j] -= f * v[i];
            }
        }
        // Q <- Q (I - 2vvᵀ/vᵀv)
        for i in 0..n {
            let mut s = 0.0;
            for j in k..n {
                s += q[i * n + j] * v[j];
            }
            let f = 2.0 * s / vnorm2;
            for j in k..n {
                q[i * n + j] -= f * v[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            r[i * n + j] = 0.0;
        }
    }
    // sign correction: diag(R) >= 0
    for k in 0..n {
        if r[k * n + k] < 0.0 {
            for j in 0..n {
                r[k * n + j] = -r[k * n + j];
            }
            for i in 0..n {
                q[i * n + k] = -q[i * n + k];
            }
        }
    }
    (
        Tensor::matrix(n, n, q).expect("square"),
        Tensor::matrix(n, n, r).expect("square"),
    )
}
