//! LU factorisation with partial pivoting and related helpers.

use ndarray::{Array2, ArrayView2};

use crate::error::{GckmError, Result};
use crate::exec::{self, Exec};

/// Row-major LU factors `P A = L U` with unit lower `L` stored below the
/// diagonal.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    norm1: f64,
}

impl Lu {
    pub fn factor(a: ArrayView2<'_, f64>) -> Result<Lu> {
        Self::factor_with(a, Exec::default())
    }

    pub fn factor_with(a: ArrayView2<'_, f64>, exec: Exec) -> Result<Lu> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(GckmError::Dimension(format!("LU needs a square matrix, got {:?}", a.dim())));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(GckmError::NonFinite("linear system matrix".into()));
        }
        let norm1 = (0..n).map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
        let amax = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut lu: Vec<f64> = a.iter().copied().collect();
        let mut perm: Vec<usize> = (0..n).collect();
        let tol = n as f64 * f64::EPSILON * amax;
        let mut pmax = 0.0f64;
        for k in 0..n {
            let (mut p, mut best) = (k, lu[k * n + k].abs());
            for i in (k + 1)..n {
                let v = lu[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            pmax = pmax.max(best);
            if best <= tol || best == 0.0 {
                let rcond = if pmax > 0.0 { best / pmax } else { 0.0 };
                return Err(GckmError::Singular { rcond });
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * n + k];
            let (head, tail) = lu.split_at_mut((k + 1) * n);
            let pivot_row = &head[k * n..(k + 1) * n];
            exec::for_each_row(exec, &mut tail[..(n - k - 1) * n], n, |_, row| {
                let factor = row[k] / pivot;
                row[k] = factor;
                if factor != 0.0 {
                    for (r, u) in row[k + 1..].iter_mut().zip(&pivot_row[k + 1..]) {
                        *r -= factor * u;
                    }
                }
            });
        }
        Ok(Lu { n, lu, perm, norm1 })
    }

    pub fn order(&self) -> usize {
        self.n
    }

    /// Solve `A x = b` in place for a single right-hand side.
    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = &self.lu[i * n..i * n + i];
            let s: f64 = row.iter().zip(&x[..i]).map(|(l, v)| l * v).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let row = &self.lu[i * n + i + 1..(i + 1) * n];
            let s: f64 = row.iter().zip(&x[i + 1..]).map(|(u, v)| u * v).sum();
            x[i] = (x[i] - s) / self.lu[i * n + i];
        }
        x
    }

    /// Solve `A^T x = b`.
    pub fn solve_transpose_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        // A^T = U^T L^T P, so solve U^T y = b, L^T z = y, x = P^T z.
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.lu[k * n + i] * y[k];
            }
            y[i] = s / self.lu[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.lu[k * n + i] * y[k];
            }
            y[i] = s;
        }
        let mut x = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = y[i];
        }
        x
    }

    pub fn solve(&self, b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.solve_with(b, Exec::default())
    }

    pub fn solve_with(&self, b: ArrayView2<'_, f64>, exec: Exec) -> Result<Array2<f64>> {
        if b.nrows() != self.n {
            return Err(GckmError::Dimension(format!("right-hand side has {} rows, system has {}", b.nrows(), self.n)));
        }
        let cols: Vec<Vec<f64>> = exec::map_indices(exec, b.ncols(), |j| self.solve_vec(&b.column(j).to_vec()));
        let mut x = Array2::zeros(b.dim());
        for (j, c) in cols.into_iter().enumerate() {
            for (i, v) in c.into_iter().enumerate() {
                x[[i, j]] = v;
            }
        }
        Ok(x)
    }

    /// Reciprocal 1-norm condition estimate (Hager's method).
    pub fn rcond(&self) -> f64 {
        let n = self.n;
        if n == 0 || self.norm1 == 0.0 {
            return 0.0;
        }
        let mut x = vec![1.0 / n as f64; n];
        let mut est = 0.0;
        for _ in 0..5 {
            let y = self.solve_vec(&x);
            let new_est: f64 = y.iter().map(|v| v.abs()).sum();
            let xi: Vec<f64> = y.iter().map(|v| if *v >= 0.0 { 1.0 } else { -1.0 }).collect();
            let z = self.solve_transpose_vec(&xi);
            let (j, zmax) = z.iter().enumerate().fold((0, -1.0), |(bj, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bj, bv) });
            let ztx: f64 = z.iter().zip(&x).map(|(a, b)| a * b).sum();
            est = f64::max(est, new_est);
            if zmax <= ztx {
                break;
            }
            x = vec![0.0; n];
            x[j] = 1.0;
        }
        if est == 0.0 || !est.is_finite() {
            0.0
        } else {
            1.0 / (self.norm1 * est)
        }
    }
}

/// Solve `A X = B` by LU with partial pivoting.
///
/// Fails with [`GckmError::Singular`] when a pivot vanishes at working
/// precision or the condition estimate is below machine epsilon.
pub fn solve_dense(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    solve_dense_with(a, b, Exec::default())
}

pub fn solve_dense_with(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, exec: Exec) -> Result<Array2<f64>> {
    if b.nrows() != a.nrows() {
        return Err(GckmError::Dimension(format!("A is {:?} but B has {} rows", a.dim(), b.nrows())));
    }
    let lu = Lu::factor_with(a, exec)?;
    let rcond = lu.rcond();
    if rcond < f64::EPSILON {
        return Err(GckmError::Singular { rcond });
    }
    let x = lu.solve_with(b, exec)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(GckmError::Singular { rcond });
    }
    Ok(x)
}
