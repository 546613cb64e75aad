//! Small dense symmetric solves.

use super::Tensor;
use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`, row-major.
#[derive(Clone, Debug)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &Tensor) -> Result<Self> {
        let n = square_side(a, "cholesky")?;
        let src = a.data();
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = src[j * n + j];
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Numeric(format!("cholesky breakdown at pivot {j} (value {d:e})")));
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in j + 1..n {
                let mut s = src[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Self { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        assert_eq!(b.len(), n);
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[i * n + k] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
    }

    /// `A⁻¹`, built from `L⁻¹` as `L⁻ᵀ L⁻¹` so the result is exactly symmetric.
    pub fn inverse(&self) -> Tensor {
        let n = self.n;
        // Rows of `linv` are rows of L⁻¹ (lower triangular).
        let mut linv = vec![0.0; n * n];
        for c in 0..n {
            linv[c * n + c] = 1.0 / self.l[c * n + c];
            for i in c + 1..n {
                let mut s = 0.0;
                for k in c..i {
                    s -= self.l[i * n + k] * linv[k * n + c];
                }
                linv[i * n + c] = s / self.l[i * n + i];
            }
        }
        let mut inv = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = 0.0;
                for k in i..n {
                    s += linv[k * n + i] * linv[k * n + j];
                }
                inv[i * n + j] = s;
                inv[j * n + i] = s;
            }
        }
        Tensor::new(vec![n, n], inv).expect("square")
    }

    /// Diagonal of `A⁻¹` without forming the full inverse.
    pub fn inverse_diagonal(&self) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n];
        let mut col = vec![0.0; n];
        for c in 0..n {
            // column c of L⁻¹, entries c..n
            col.iter_mut().for_each(|x| *x = 0.0);
            col[c] = 1.0 / self.l[c * n + c];
            for i in c + 1..n {
                let mut s = 0.0;
                for k in c..i {
                    s -= self.l[i * n + k] * col[k];
                }
                col[i] = s / self.l[i * n + i];
            }
            out[c] = col[c..].iter().map(|x| x * x).sum();
        }
        out
    }
}

fn square_side(a: &Tensor, context: &'static str) -> Result<usize> {
    match a.shape() {
        [m, n] if m == n => Ok(*n),
        s => Err(Error::dims(context, s, &[s.first().copied().unwrap_or(0); 2])),
    }
}

/// Checks `|A_ij − A_ji| ≤ 1e-10` (absolute), failing with a contract error.
pub fn check_symmetric(a: &Tensor) -> Result<()> {
    let n = square_side(a, "symmetry check")?;
    let d = a.data();
    for i in 0..n {
        for j in 0..i {
            let gap = (d[i * n + j] - d[j * n + i]).abs();
            if gap > SYMMETRY_TOL {
                return Err(Error::Contract(format!(
                    "matrix not symmetric: |A[{i},{j}] - A[{j},{i}]| = {gap:e}"
                )));
            }
        }
    }
    Ok(())
}

/// Cholesky factor of `M + eps·I`.
pub fn damped_factor(m: &Tensor, eps: f64) -> Result<Cholesky> {
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("damping must be positive, got {eps}")));
    }
    check_symmetric(m)?;
    let n = m.shape()[0];
    let mut shifted = m.clone();
    for i in 0..n {
        shifted.data_mut()[i * n + i] += eps;
    }
    Cholesky::factor(&shifted)
}

/// `(M + eps·I)⁻¹` for symmetric positive semi-definite `M`.
pub fn damped_inverse(m: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(damped_factor(m, eps)?.inverse())
}

/// `(M + eps·I)⁻¹ b`.
pub fn damped_solve(m: &Tensor, eps: f64, b: &[f64]) -> Result<Vec<f64>> {
    let f = damped_factor(m, eps)?;
    if b.len() != f.dim() {
        return Err(Error::dims("damped_solve", m.shape(), &[b.len()]));
    }
    let mut x = b.to_vec();
    f.solve_in_place(&mut x);
    Ok(x)
}
