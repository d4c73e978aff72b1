//! Small dense linear algebra: LU with partial pivoting, triangular solves
//! and a cyclic Jacobi eigensolver for symmetric matrices.

use ndarray::{Array1, Array2};

use crate::error::{dim_err, Result, SheafError};

/// `PA = LU` packed into one matrix; `perm[i]` is the source row of row `i`.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Array2<f64>,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn factor(a: &Array2<f64>) -> Result<Lu> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(dim_err(format!("LU needs a square matrix, got {:?}", a.dim())));
        }
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for c in 0..n {
            let p = (c..n)
                .max_by(|&i, &j| lu[[i, c]].abs().total_cmp(&lu[[j, c]].abs()))
                .unwrap();
            if p != c {
                for j in 0..n {
                    lu.swap([p, j], [c, j]);
                }
                perm.swap(p, c);
                sign = -sign;
            }
            let pivot = lu[[c, c]];
            if pivot == 0.0 {
                continue;
            }
            for i in c + 1..n {
                let f = lu[[i, c]] / pivot;
                lu[[i, c]] = f;
                if f != 0.0 {
                    for j in c + 1..n {
                        lu[[i, j]] -= f * lu[[c, j]];
                    }
                }
            }
        }
        Ok(Lu { lu, perm, sign })
    }

    pub fn determinant(&self) -> f64 {
        self.sign * self.lu.diag().iter().product::<f64>()
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.perm.len();
        if b.len() != n {
            return Err(dim_err("right-hand side length mismatch"));
        }
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                x[i] -= self.lu[[i, j]] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] -= self.lu[[i, j]] * x[j];
            }
            let d = self.lu[[i, i]];
            if d == 0.0 {
                return Err(SheafError::Domain("singular matrix".into()));
            }
            x[i] /= d;
        }
        Ok(x)
    }

    /// `A⁻¹ B` column by column.
    pub fn solve_matrix(&self, b: &Array2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(b.dim());
        for (j, col) in b.columns().into_iter().enumerate() {
            let x = self.solve(&col.to_vec())?;
            out.column_mut(j).assign(&Array1::from(x));
        }
        Ok(out)
    }
}

pub fn determinant(a: &Array2<f64>) -> Result<f64> {
    Ok(Lu::factor(a)?.determinant())
}

/// Solve `L x = b` for lower-triangular `L` (entries above the diagonal ignored).
pub fn forward_substitution(l: &Array2<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let n = l.nrows();
    if l.ncols() != n || b.len() != n {
        return Err(dim_err("forward substitution shape mismatch"));
    }
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut acc = b[i];
        for j in 0..i {
            acc -= l[[i, j]] * x[j];
        }
        let d = l[[i, i]];
        if d == 0.0 {
            return Err(SheafError::Domain(format!("zero diagonal at row {i}")));
        }
        x[i] = acc / d;
    }
    Ok(x)
}

pub fn max_asymmetry(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}

/// Eigenpairs of a symmetric matrix, eigenvalues ascending, eigenvectors as
/// unit-norm columns.
pub fn symmetric_eigen(a: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(dim_err("eigensolver needs a square matrix"));
    }
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1 && scale > 0.0 {
        for _sweep in 0..100 {
            let mut off = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    off += m[[i, j]] * m[[i, j]];
                }
            }
            if off.sqrt() <= 1e-15 * scale {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = m[[p, q]];
                    if apq == 0.0 {
                        continue;
                    }
                    let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let mkp = m[[k, p]];
                        let mkq = m[[k, q]];
                        m[[k, p]] = c * mkp - s * mkq;
                        m[[k, q]] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let mpk = m[[p, k]];
                        let mqk = m[[q, k]];
                        m[[p, k]] = c * mpk - s * mqk;
                        m[[q, k]] = s * mpk + c * mqk;
                    }
                    for k in 0..n {
                        let vkp = v[[k, p]];
                        let vkq = v[[k, q]];
                        v[[k, p]] = c * vkp - s * vkq;
                        v[[k, q]] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[i, i]].total_cmp(&m[[j, j]]));
    let values = order.iter().map(|&i| m[[i, i]]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    Ok((values, vectors))
}
