//! Dense symmetric eigensolvers.
//!
//! Small matrices use cyclic Jacobi rotations on the full matrix. Larger ones
//! are reduced to tridiagonal form with Householder reflections, the spectrum
//! of the tridiagonal matrix is found with implicit QL, and only the requested
//! eigenvectors are recovered by inverse iteration and back-transformation.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{GckmError, Result};
use crate::exec::{self, Exec};

/// Matrices up to this order are handled by Jacobi rotations.
pub const JACOBI_MAX_ORDER: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct EigenResult {
    /// Eigenvalues in non-increasing order.
    pub values: Array1<f64>,
    /// Orthonormal eigenvectors, one per column.
    pub vectors: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EigenMethod {
    #[default]
    Auto,
    Jacobi,
    Tridiagonal,
}

/// The `s` algebraically largest eigenpairs of a symmetric matrix.
///
/// Each returned eigenvector has its largest-magnitude entry positive (the
/// lowest index wins ties).
pub fn top_eigenpairs(a: ArrayView2<'_, f64>, s: usize) -> Result<EigenResult> {
    top_eigenpairs_with(a, s, EigenMethod::Auto)
}

pub fn top_eigenpairs_with(a: ArrayView2<'_, f64>, s: usize, method: EigenMethod) -> Result<EigenResult> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(GckmError::Dimension(format!("eigensolver needs a square matrix, got {:?}", a.dim())));
    }
    if s == 0 || s > n {
        return Err(GckmError::Dimension(format!("requested {s} eigenpairs of a {n}x{n} matrix")));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(GckmError::NonFinite("eigensolver input".into()));
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            asym = asym.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    if asym > 1e-10 * scale {
        return Err(GckmError::NotSymmetric(asym));
    }

    let use_jacobi = match method {
        EigenMethod::Auto => n <= JACOBI_MAX_ORDER,
        EigenMethod::Jacobi => true,
        EigenMethod::Tridiagonal => false,
    };
    let (values, mut vectors) = if use_jacobi {
        let (vals, vecs) = jacobi(a);
        select_top(&vals, &vecs, s)
    } else {
        tridiagonal_top(a, s)
    };

    fix_signs(&mut vectors);
    Ok(EigenResult { values, vectors })
}

/// Emit a warning when the `s`-th and `(s+1)`-th eigenvalues coincide; only
/// the spanned subspace is meaningful in that case.
pub fn warn_if_degenerate(values_desc: &[f64], s: usize, scale: f64) {
    if s < values_desc.len() && (values_desc[s - 1] - values_desc[s]).abs() <= 1e-12 * scale.max(1.0) {
        log::warn!(
            "eigenvalues {} and {} coincide ({:e}); using an arbitrary orthonormal basis",
            s,
            s + 1,
            values_desc[s - 1]
        );
    }
}

fn select_top(vals: &[f64], vecs: &Array2<f64>, s: usize) -> (Array1<f64>, Array2<f64>) {
    let n = vals.len();
    let mut order: Vec<usize> = (0..n).collect();
    // Descending by value, index order for exact ties.
    order.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]).then(i.cmp(&j)));
    let sorted: Vec<f64> = order.iter().map(|&i| vals[i]).collect();
    let scale = sorted.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    warn_if_degenerate(&sorted, s, scale);
    let values = Array1::from_iter(order[..s].iter().map(|&i| vals[i]));
    let mut vectors = Array2::zeros((n, s));
    for (c, &i) in order[..s].iter().enumerate() {
        vectors.column_mut(c).assign(&vecs.column(i));
    }
    (values, vectors)
}

fn fix_signs(vectors: &mut Array2<f64>) {
    for mut col in vectors.columns_mut() {
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }
}

/// Full eigendecomposition by cyclic Jacobi rotations. Returns unsorted
/// eigenvalues and the matching eigenvectors as columns.
pub fn jacobi(a: ArrayView2<'_, f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m: Vec<f64> = a.iter().copied().collect();
    // symmetrise so both triangles agree exactly
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = avg;
            m[j * n + i] = avg;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let fro2: f64 = m.iter().map(|x| x * x).sum();
    if fro2 == 0.0 {
        return (vec![0.0; n], Array2::eye(n));
    }

    for sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() <= 1e-15 * fro2.sqrt() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                // Entries below rounding level of both diagonals are dropped.
                let g = 100.0 * apq.abs();
                if sweep > 3 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    m[p * n + q] = 0.0;
                    m[q * n + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A <- J^T A J with J the rotation in the (p, q) plane.
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values = (0..n).map(|i| m[i * n + i]).collect();
    (values, Array2::from_shape_vec((n, n), v).expect("shape"))
}

/// Householder reduction `Q^T A Q = T` with the reflectors kept for
/// back-transformation.
struct Tridiagonal {
    diag: Vec<f64>,
    off: Vec<f64>,
    /// Reflector `k` acts on coordinates `k+1..n`: `I - beta v v^T`.
    reflectors: Vec<(f64, Vec<f64>)>,
}

fn tridiagonalize(a: ArrayView2<'_, f64>, exec: Exec) -> Tridiagonal {
    let n = a.nrows();
    let mut m: Vec<f64> = a.iter().copied().collect();
    let mut reflectors = Vec::with_capacity(n.saturating_sub(2));
    let mut off = vec![0.0; n.saturating_sub(1)];
    for k in 0..n.saturating_sub(2) {
        let len = n - k - 1;
        let x: Vec<f64> = (k + 1..n).map(|i| m[i * n + k]).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            off[k] = 0.0;
            reflectors.push((0.0, vec![0.0; len]));
            continue;
        }
        let alpha = if x[0] > 0.0 { -norm } else { norm };
        let mut v = x;
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|t| t * t).sum();
        let beta = 2.0 / vnorm2;
        off[k] = alpha;

        // p = beta * A22 v
        let start = k + 1;
        let mut p = vec![0.0; len];
        exec::for_each_row(exec, &mut p, 1, |i, out| {
            let row = &m[(start + i) * n + start..(start + i) * n + n];
            out[0] = beta * row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        });
        let pv: f64 = p.iter().zip(&v).map(|(a, b)| a * b).sum();
        let w: Vec<f64> = p.iter().zip(&v).map(|(pi, vi)| pi - 0.5 * beta * pv * vi).collect();
        // A22 <- A22 - v w^T - w v^T
        let block = &mut m[start * n..];
        exec::for_each_row(exec, &mut block[..len * n], n, |i, row| {
            let (vi, wi) = (v[i], w[i]);
            for (j, slot) in row[start..].iter_mut().enumerate() {
                *slot -= vi * w[j] + wi * v[j];
            }
        });
        // column k below the subdiagonal is now annihilated
        for i in (k + 1)..n {
            m[i * n + k] = 0.0;
            m[k * n + i] = 0.0;
        }
        m[(k + 1) * n + k] = alpha;
        m[k * n + k + 1] = alpha;
        reflectors.push((beta, v));
    }
    if n >= 2 {
        off[n - 2] = m[(n - 1) * n + (n - 2)];
    }
    let diag = (0..n).map(|i| m[i * n + i]).collect();
    Tridiagonal { diag, off, reflectors }
}

/// Eigenvalues of a symmetric tridiagonal matrix by implicit QL with Wilkinson
/// shifts. `off[i]` couples `i` and `i+1`.
fn tridiagonal_eigenvalues(diag: &[f64], off: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut d = diag.to_vec();
    let mut e = off.to_vec();
    e.push(0.0);
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                break;
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut i = m;
            let mut deflated = false;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    d
}

/// Eigenvector of the tridiagonal matrix for eigenvalue `lambda` by inverse
/// iteration, orthogonalised against `against`.
fn inverse_iteration(diag: &[f64], off: &[f64], lambda: f64, against: &[Vec<f64>], seed: u64) -> Vec<f64> {
    let n = diag.len();
    let tnorm = diag.iter().map(|v| v.abs()).fold(0.0, f64::max) + 2.0 * off.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let tiny = f64::EPSILON * tnorm.max(f64::MIN_POSITIVE);
    let shift = lambda + tiny;

    // LU factorisation of (T - shift I) with partial pivoting (bandwidth grows by one).
    let mut lo = off.to_vec(); // sub-diagonal
    let mut dd: Vec<f64> = diag.iter().map(|x| x - shift).collect();
    let mut up = off.to_vec(); // super-diagonal
    let mut up2 = vec![0.0; n.saturating_sub(2)];
    let mut piv = vec![false; n.saturating_sub(1)];
    let mut mult = vec![0.0; n.saturating_sub(1)];
    for i in 0..n.saturating_sub(1) {
        if lo[i].abs() > dd[i].abs() {
            // swap rows i and i+1
            piv[i] = true;
            let factor = dd[i] / lo[i];
            mult[i] = factor;
            let (a0, a1, a2) = (lo[i], dd[i + 1], if i + 1 < n - 1 { up[i + 1] } else { 0.0 });
            let (b0, b1) = (dd[i], up[i]);
            dd[i] = a0;
            up[i] = a1;
            if i + 1 < n - 1 {
                up2[i] = a2;
            }
            dd[i + 1] = b1 - factor * a1;
            if i + 1 < n - 1 {
                up[i + 1] = -factor * a2;
            }
            let _ = b0;
        } else {
            let d0 = if dd[i] == 0.0 { tiny } else { dd[i] };
            dd[i] = d0;
            let factor = lo[i] / d0;
            mult[i] = factor;
            dd[i + 1] -= factor * up[i];
        }
        lo[i] = 0.0;
    }
    for x in dd.iter_mut() {
        if *x == 0.0 {
            *x = tiny;
        }
    }

    let solve = |b: &mut Vec<f64>| {
        for i in 0..n.saturating_sub(1) {
            if piv[i] {
                b.swap(i, i + 1);
            }
            b[i + 1] -= mult[i] * b[i];
        }
        for i in (0..n).rev() {
            let mut acc = b[i];
            if i + 1 < n {
                acc -= up[i] * b[i + 1];
            }
            if i + 2 < n {
                acc -= up2[i] * b[i + 2];
            }
            b[i] = acc / dd[i];
        }
    };

    // deterministic pseudo-random start vector
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut z: Vec<f64> = (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
        .collect();
    orthogonalize(&mut z, against);
    normalize(&mut z);
    for _ in 0..4 {
        solve(&mut z);
        orthogonalize(&mut z, against);
        if !normalize(&mut z) {
            break;
        }
    }
    z
}

fn orthogonalize(z: &mut [f64], against: &[Vec<f64>]) {
    for _ in 0..2 {
        for q in against {
            let d: f64 = q.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
            for (zi, qi) in z.iter_mut().zip(q) {
                *zi -= d * qi;
            }
        }
    }
}

fn normalize(z: &mut [f64]) -> bool {
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    z.iter_mut().for_each(|v| *v /= norm);
    true
}

fn tridiagonal_top(a: ArrayView2<'_, f64>, s: usize) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    let tri = tridiagonalize(a, Exec::default());
    let mut values = tridiagonal_eigenvalues(&tri.diag, &tri.off);
    values.sort_by(|x, y| y.total_cmp(x));
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    warn_if_degenerate(&values, s, scale);

    // Vectors whose eigenvalues lie within this distance are kept mutually
    // orthogonal during inverse iteration.
    let cluster_tol = 1e-3 * scale.max(f64::MIN_POSITIVE);
    let mut z_vectors: Vec<Vec<f64>> = Vec::with_capacity(s);
    let mut cluster_start = 0;
    for i in 0..s {
        if i > 0 && (values[i - 1] - values[i]).abs() > cluster_tol {
            cluster_start = i;
        }
        let z = inverse_iteration(&tri.diag, &tri.off, values[i], &z_vectors[cluster_start..i], i as u64 + 1);
        z_vectors.push(z);
    }

    let mut vectors = Array2::zeros((n, s));
    for (c, z) in z_vectors.iter().enumerate() {
        let mut x = z.clone();
        for (k, (beta, v)) in tri.reflectors.iter().enumerate().rev() {
            if *beta == 0.0 {
                continue;
            }
            let tail = &mut x[k + 1..];
            let d: f64 = v.iter().zip(tail.iter()).map(|(a, b)| a * b).sum();
            for (t, vi) in tail.iter_mut().zip(v) {
                *t -= beta * d * vi;
            }
        }
        vectors.column_mut(c).assign(&Array1::from(x));
    }

    // Guard against inverse-iteration failure in tight clusters: if the
    // result is not an accurate orthonormal eigenbasis, fall back to Jacobi.
    let av = a.dot(&vectors);
    let fro = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let residual_ok = (0..s).all(|c| {
        let r = &av.column(c) - &(&vectors.column(c) * values[c]);
        r.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-9 * fro
    });
    let gram = vectors.t().dot(&vectors);
    let orth_ok = gram.indexed_iter().all(|((i, j), v)| (v - if i == j { 1.0 } else { 0.0 }).abs() <= 1e-11);
    if residual_ok && orth_ok {
        (Array1::from(values[..s].to_vec()), vectors)
    } else {
        log::warn!("inverse iteration lost accuracy; falling back to Jacobi for a {n}x{n} matrix");
        let (vals, vecs) = jacobi(a);
        select_top(&vals, &vecs, s)
    }
}
