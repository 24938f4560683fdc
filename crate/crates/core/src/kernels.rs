//! Kernel functions, Gram matrices, centring and the composite kernels used by
//! the multiview read-out and the mixed-adjacency baseline.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{GckmError, Result};
use crate::exec::{self, Exec};
use crate::graph::Graph;

/// A positive definite kernel.
///
/// * `Linear`: `x.y`
/// * `Polynomial`: `(x.y + offset)^degree`
/// * `Rbf`: `exp(-|x - y|^2 / (2 sigma2))`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum KernelSpec {
    Linear,
    Polynomial { degree: u32, offset: f64 },
    Rbf { sigma2: f64 },
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Rbf { sigma2: 1.0 }
    }
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Linear => Ok(()),
            KernelSpec::Polynomial { degree, offset } => {
                if degree < 1 {
                    return Err(GckmError::config("kernel.degree", "polynomial degree must be >= 1"));
                }
                if !offset.is_finite() {
                    return Err(GckmError::config("kernel.offset", "offset must be finite"));
                }
                Ok(())
            }
            KernelSpec::Rbf { sigma2 } => {
                if !(sigma2 > 0.0 && sigma2.is_finite()) {
                    return Err(GckmError::config("kernel.sigma2", "rbf bandwidth must be positive"));
                }
                Ok(())
            }
        }
    }

    #[inline]
    pub(crate) fn eval_slices(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            KernelSpec::Linear => dot(x, y),
            KernelSpec::Polynomial { degree, offset } => (dot(x, y) + offset).powi(degree as i32),
            KernelSpec::Rbf { sigma2 } => (-sq_dist(x, y) / (2.0 * sigma2)).exp(),
        }
    }
}

// Four fixed accumulation lanes; the per-coordinate products are symmetric in
// (x, y), so k(x, y) and k(y, x) are bit-identical.
#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = x.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += x[i] * y[i];
        acc[1] += x[i + 1] * y[i + 1];
        acc[2] += x[i + 2] * y[i + 2];
        acc[3] += x[i + 3] * y[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..x.len() {
        tail += x[i] * y[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

#[inline]
fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = x.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        for l in 0..4 {
            let d = x[i + l] - y[i + l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..x.len() {
        let d = x[i] - y[i];
        tail += d * d;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

/// Dense kernel matrix with bookkeeping flags.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub data: Array2<f64>,
    pub symmetric: bool,
    pub centered: bool,
}

impl GramMatrix {
    pub fn new(data: Array2<f64>, symmetric: bool) -> Self {
        GramMatrix { data, symmetric, centered: false }
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_square(&self) -> bool {
        self.nrows() == self.ncols()
    }
}

pub fn eval_kernel(spec: &KernelSpec, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<f64> {
    if x.len() != y.len() {
        return Err(GckmError::Dimension(format!("kernel inputs of length {} and {}", x.len(), y.len())));
    }
    let (x, y) = (x.to_vec(), y.to_vec());
    let value = spec.eval_slices(&x, &y);
    if !value.is_finite() {
        return Err(GckmError::NonFinite("kernel evaluation".into()));
    }
    Ok(value)
}

pub fn gram(spec: &KernelSpec, x: ArrayView2<'_, f64>) -> Result<GramMatrix> {
    gram_with(spec, x, Exec::default())
}

/// Symmetric Gram matrix: the upper triangle is evaluated row by row (rows in
/// parallel, columns ascending) and mirrored.
pub fn gram_with(spec: &KernelSpec, x: ArrayView2<'_, f64>, exec: Exec) -> Result<GramMatrix> {
    spec.validate()?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(GckmError::NonFinite("gram input".into()));
    }
    let n = x.nrows();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let d = x.ncols();
    let mut out = vec![0.0; n * n];
    exec::for_each_row(exec, &mut out, n, |u, row| {
        let xu = &xs[u * d..(u + 1) * d];
        for (v, slot) in row.iter_mut().enumerate().skip(u) {
            *slot = spec.eval_slices(xu, &xs[v * d..(v + 1) * d]);
        }
    });
    for u in 0..n {
        for v in 0..u {
            out[u * n + v] = out[v * n + u];
        }
    }
    let data = Array2::from_shape_vec((n, n), out).expect("shape");
    if data.iter().any(|v| !v.is_finite()) {
        return Err(GckmError::NonFinite("gram matrix".into()));
    }
    Ok(GramMatrix::new(data, true))
}

pub fn cross_gram(spec: &KernelSpec, x1: ArrayView2<'_, f64>, x2: ArrayView2<'_, f64>) -> Result<GramMatrix> {
    cross_gram_with(spec, x1, x2, Exec::default())
}

pub fn cross_gram_with(
    spec: &KernelSpec,
    x1: ArrayView2<'_, f64>,
    x2: ArrayView2<'_, f64>,
    exec: Exec,
) -> Result<GramMatrix> {
    spec.validate()?;
    if x1.ncols() != x2.ncols() {
        return Err(GckmError::Dimension(format!(
            "cross_gram inputs have {} and {} columns",
            x1.ncols(),
            x2.ncols()
        )));
    }
    let (m, n, d) = (x1.nrows(), x2.nrows(), x1.ncols());
    let a = x1.as_standard_layout();
    let b = x2.as_standard_layout();
    let (a, b) = (a.as_slice().expect("layout"), b.as_slice().expect("layout"));
    let mut out = vec![0.0; m * n];
    exec::for_each_row(exec, &mut out, n, |u, row| {
        let xu = &a[u * d..(u + 1) * d];
        for (v, slot) in row.iter_mut().enumerate() {
            *slot = spec.eval_slices(xu, &b[v * d..(v + 1) * d]);
        }
    });
    let data = Array2::from_shape_vec((m, n), out).expect("shape");
    if data.iter().any(|v| !v.is_finite()) {
        return Err(GckmError::NonFinite("cross gram matrix".into()));
    }
    Ok(GramMatrix::new(data, false))
}

/// Double centring `M K M` with `M = I - 11^T / n`.
pub fn center(k: &GramMatrix) -> Result<GramMatrix> {
    if !k.is_square() {
        return Err(GckmError::Dimension(format!("center: {}x{} matrix is not square", k.nrows(), k.ncols())));
    }
    let n = k.nrows();
    if n == 0 {
        return Ok(GramMatrix { data: k.data.clone(), symmetric: k.symmetric, centered: true });
    }
    let row_mean: Array1<f64> = k.data.mean_axis(Axis(1)).expect("non-empty");
    let col_mean: Array1<f64> = k.data.mean_axis(Axis(0)).expect("non-empty");
    let total = row_mean.sum() / n as f64;
    let mut data = Array2::zeros((n, n));
    for u in 0..n {
        let start = if k.symmetric { u } else { 0 };
        for v in start..n {
            data[[u, v]] = ((k.data[[u, v]] - row_mean[u]) - col_mean[v]) + total;
        }
    }
    if k.symmetric {
        for u in 0..n {
            for v in 0..u {
                data[[u, v]] = data[[v, u]];
            }
        }
    }
    Ok(GramMatrix { data, symmetric: k.symmetric, centered: true })
}

/// Elementwise (Schur) product of two Gram matrices.
pub fn multiview_gram(k1: &GramMatrix, k2: &GramMatrix) -> Result<GramMatrix> {
    if k1.data.dim() != k2.data.dim() {
        return Err(GckmError::Dimension(format!(
            "multiview_gram shapes {:?} and {:?}",
            k1.data.dim(),
            k2.data.dim()
        )));
    }
    Ok(GramMatrix::new(&k1.data * &k2.data, k1.symmetric && k2.symmetric))
}

/// `alpha * K + (1 - alpha) * E` with `E` the binary adjacency (zero diagonal).
pub fn mixed_gram(k: &GramMatrix, g: &Graph, alpha: f64) -> Result<GramMatrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GckmError::config("alpha", format!("{alpha} is outside [0, 1]")));
    }
    let n = g.num_nodes();
    if k.data.dim() != (n, n) {
        return Err(GckmError::Dimension(format!("mixed_gram: {:?} kernel for {n} nodes", k.data.dim())));
    }
    let mut data = &k.data * alpha;
    let w = 1.0 - alpha;
    if w != 0.0 {
        for &(a, b) in g.edges() {
            data[[a, b]] += w;
            data[[b, a]] += w;
        }
    }
    Ok(GramMatrix::new(data, k.symmetric))
}

/// Bandwidth rule `sigma2_rbf = d * var(X)` where `var` is the variance of
/// all entries of `X` and `d` its column count.
pub fn rbf_bandwidth_heuristic(x: ArrayView2<'_, f64>) -> Result<f64> {
    let count = x.len();
    if x.nrows() < 2 {
        return Err(GckmError::Dimension("bandwidth heuristic needs at least two rows".into()));
    }
    let mean = x.sum() / count as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
    if !(var > 0.0) || !var.is_finite() {
        return Err(GckmError::DegenerateBandwidth);
    }
    Ok(x.ncols() as f64 * var)
}

/// Back-propagate an upstream gradient `dJ/dK` (any `n x n` matrix) through
/// `K = gram(spec, A)`, returning `dJ/dA`.
///
/// `k` must be the uncentred Gram of `a`.
pub fn gram_input_gradient(
    spec: &KernelSpec,
    a: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    upstream: ArrayView2<'_, f64>,
) -> Array2<f64> {
    // dJ/da_u = sum_v (G_uv + G_vu) d/dx k(x = a_u, y = a_v)
    let sym = &upstream + &upstream.t();
    match *spec {
        KernelSpec::Linear => sym.dot(&a),
        KernelSpec::Polynomial { degree, offset } => {
            let p = degree as f64;
            let inner = a.dot(&a.t());
            let weight = ndarray::Zip::from(&sym)
                .and(&inner)
                .map_collect(|&g, &ip| g * p * (ip + offset).powi(degree as i32 - 1));
            weight.dot(&a)
        }
        KernelSpec::Rbf { sigma2 } => {
            let weight = &sym * &k;
            let row_sums = weight.sum_axis(Axis(1));
            let mut grad = weight.dot(&a);
            for (mut row, (s, arow)) in grad.outer_iter_mut().zip(row_sums.iter().zip(a.outer_iter())) {
                row.scaled_add(-s, &arow);
            }
            grad / sigma2
        }
    }
}

/// Write a matrix as little-endian `u64` rows and columns followed by
/// row-major `f64` entries.
pub fn write_matrix_bin(path: impl AsRef<Path>, m: ArrayView2<'_, f64>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(16 + 8 * m.len());
    bytes.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    bytes.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| GckmError::io(path, e))
}

pub fn read_matrix_bin(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| GckmError::io(path, e))?;
    let word = |i: usize| -> [u8; 8] { bytes[8 * i..8 * i + 8].try_into().expect("8 bytes") };
    if bytes.len() < 16 {
        return Err(GckmError::Model(format!("{}: truncated header", path.display())));
    }
    let rows = u64::from_le_bytes(word(0)) as usize;
    let cols = u64::from_le_bytes(word(1)) as usize;
    let expected = rows.checked_mul(cols).and_then(|c| c.checked_mul(8)).map(|b| b + 16);
    if expected != Some(bytes.len()) {
        return Err(GckmError::Model(format!(
            "{}: {} bytes do not match a {rows}x{cols} matrix",
            path.display(),
            bytes.len()
        )));
    }
    let data = (0..rows * cols).map(|i| f64::from_le_bytes(word(i + 2))).collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape"))
}
