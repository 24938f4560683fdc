//! Semi-supervised restricted kernel machine read-out.
//!
//! Notation: `K` is the uncentred read-out Gram, `v_i = 1 / sum_j K_ij`,
//! `r_i = v_i / lambda1 - l_i / lambda2`, `R = diag(r)`, `L = diag(l)` and
//! `C` holds one-vs-all codes for the labelled rows. The dual variables solve
//!
//! ```text
//! (I - (1/eta) R S K) R H = (1/lambda2) S^T L C,   S = I - 1 1^T R / (1^T R 1)
//! ```

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{GckmError, Result};
use crate::exec::{self, Exec};
use crate::kernels::{GramMatrix, KernelSpec};
use crate::numerics::solve_dense_with;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutSpec {
    pub eta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    #[serde(default)]
    pub kernel: KernelSpec,
    /// Multiply the Gram on the last embedding by a Gram on the raw features.
    #[serde(default)]
    pub multiview: bool,
    #[serde(default)]
    pub multiview_kernel: KernelSpec,
}

impl ReadoutSpec {
    pub fn validate(&self, field: &str) -> Result<()> {
        for (name, v) in [("eta", self.eta), ("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GckmError::config(format!("{field}.{name}"), format!("must be positive, got {v}")));
            }
        }
        self.kernel.validate().map_err(|e| GckmError::config(format!("{field}.kernel"), e.to_string()))?;
        if self.multiview {
            self.multiview_kernel
                .validate()
                .map_err(|e| GckmError::config(format!("{field}.multiview_kernel"), e.to_string()))?;
        }
        Ok(())
    }
}

/// Node weighting of the read-out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    #[serde(with = "crate::model_io::vector")]
    pub v: Array1<f64>,
    #[serde(with = "crate::model_io::vector")]
    pub r: Array1<f64>,
    pub labeled: Vec<bool>,
}

impl Weights {
    pub fn l(&self, i: usize) -> f64 {
        if self.labeled[i] {
            1.0
        } else {
            0.0
        }
    }

    /// `1^T R 1`.
    pub fn total(&self) -> f64 {
        self.r.sum()
    }
}

pub fn build_weights(k: &GramMatrix, labeled: &[bool], lambda1: f64, lambda2: f64) -> Result<Weights> {
    let n = k.nrows();
    if !k.is_square() || labeled.len() != n {
        return Err(GckmError::Dimension(format!(
            "weights: Gram {:?} with {} label flags",
            k.data.dim(),
            labeled.len()
        )));
    }
    if !(lambda1 > 0.0 && lambda2 > 0.0) {
        return Err(GckmError::config("readout", "lambda1 and lambda2 must be positive"));
    }
    let sums = k.data.sum_axis(Axis(1));
    let mut v = Array1::zeros(n);
    let mut r = Array1::zeros(n);
    for i in 0..n {
        if !(sums[i] > 1e-12) {
            return Err(GckmError::DegenerateWeighting(format!("row {i} of the read-out Gram sums to {:e}", sums[i])));
        }
        v[i] = 1.0 / sums[i];
        r[i] = v[i] / lambda1 - if labeled[i] { 1.0 / lambda2 } else { 0.0 };
        if r[i].abs() <= 1e-12 {
            return Err(GckmError::DegenerateWeighting(format!("r vanishes at node {i}")));
        }
    }
    Ok(Weights { v, r, labeled: labeled.to_vec() })
}

/// One-vs-all codes for labelled rows, zero rows elsewhere.
pub fn encode_labels(labels: &[i64], labeled: &[bool], p: usize) -> Result<Array2<f64>> {
    if labels.len() != labeled.len() {
        return Err(GckmError::Dimension("labels and mask differ in length".into()));
    }
    let mut c = Array2::zeros((labels.len(), p));
    for (i, (&y, &l)) in labels.iter().zip(labeled).enumerate() {
        if !l {
            continue;
        }
        if y < 0 || y as usize >= p {
            return Err(GckmError::Dataset(format!("label {y} of node {i} is outside 0..{p}")));
        }
        c.row_mut(i).fill(-1.0);
        c[[i, y as usize]] = 1.0;
    }
    Ok(c)
}

/// The system matrix `I - (1/eta) R S K`.
pub fn system_matrix(k: ArrayView2<'_, f64>, w: &Weights, eta: f64, exec: Exec) -> Array2<f64> {
    let n = k.nrows();
    let rho = w.total();
    let u: Array1<f64> = w.r.dot(&k); // r^T K
    let mut a = vec![0.0; n * n];
    exec::for_each_row(exec, &mut a, n, |i, row| {
        let ri = w.r[i];
        for (j, slot) in row.iter_mut().enumerate() {
            let rsk = ri * k[[i, j]] - ri * u[j] / rho;
            *slot = if i == j { 1.0 } else { 0.0 } - rsk / eta;
        }
    });
    Array2::from_shape_vec((n, n), a).expect("shape")
}

/// Fraction of entries with magnitude below `tol`.
pub fn sparsity(a: ArrayView2<'_, f64>, tol: f64) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().filter(|v| v.abs() < tol).count() as f64 / a.len() as f64
}

fn check_total(w: &Weights) -> Result<f64> {
    let rho = w.total();
    let scale = w.r.iter().map(|v| v.abs()).sum::<f64>();
    if rho.abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return Err(GckmError::DegenerateWeighting(format!("1^T R 1 = {rho:e}")));
    }
    Ok(rho)
}

/// Dual variables `H`.
pub fn solve(k: ArrayView2<'_, f64>, w: &Weights, c: ArrayView2<'_, f64>, eta: f64, lambda2: f64) -> Result<Array2<f64>> {
    solve_with(k, w, c, eta, lambda2, Exec::default())
}

pub fn solve_with(
    k: ArrayView2<'_, f64>,
    w: &Weights,
    c: ArrayView2<'_, f64>,
    eta: f64,
    lambda2: f64,
    exec: Exec,
) -> Result<Array2<f64>> {
    let n = k.nrows();
    if k.ncols() != n || c.nrows() != n || w.r.len() != n {
        return Err(GckmError::Dimension("read-out system operands disagree in size".into()));
    }
    let rho = check_total(w)?;
    // S^T L C = LC - r (1^T L C) / rho
    let mut lc = c.to_owned();
    for (i, mut row) in lc.outer_iter_mut().enumerate() {
        row *= w.l(i);
    }
    let col = lc.sum_axis(Axis(0));
    let mut rhs = lc;
    for (i, mut row) in rhs.outer_iter_mut().enumerate() {
        row.scaled_add(-w.r[i] / rho, &col);
    }
    rhs /= lambda2;
    let a = system_matrix(k, w, eta, exec);
    let mut z = solve_dense_with(a.view(), rhs.view(), exec)?;
    for (i, mut row) in z.outer_iter_mut().enumerate() {
        row /= w.r[i];
    }
    Ok(z)
}

/// `b^T = -(1 / 1^T R 1) ((1/eta) 1^T R K R H + (1/lambda2) 1^T L C)`.
pub fn bias(
    h: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    w: &Weights,
    c: ArrayView2<'_, f64>,
    eta: f64,
    lambda2: f64,
) -> Result<Array1<f64>> {
    let rho = check_total(w)?;
    let rh = scale_rows(h, w.r.view());
    let u = w.r.dot(&k);
    let first = u.dot(&rh) / eta;
    let mut lc_sum = Array1::zeros(c.ncols());
    for (i, row) in c.outer_iter().enumerate() {
        if w.labeled[i] {
            lc_sum += &row;
        }
    }
    Ok(-(first + lc_sum / lambda2) / rho)
}

fn scale_rows(m: ArrayView2<'_, f64>, s: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut out = m.to_owned();
    for (mut row, &f) in out.outer_iter_mut().zip(s.iter()) {
        row *= f;
    }
    out
}

/// Error variables `e_i = h_i - l_i c_i / (r_i lambda2)`.
pub fn scores(h: ArrayView2<'_, f64>, w: &Weights, c: ArrayView2<'_, f64>, lambda2: f64) -> Array2<f64> {
    let mut e = h.to_owned();
    for (i, mut row) in e.outer_iter_mut().enumerate() {
        if w.labeled[i] {
            row.scaled_add(-1.0 / (w.r[i] * lambda2), &c.row(i));
        }
    }
    e
}

/// Row-wise argmax, lowest index on ties.
pub fn predict(e: ArrayView2<'_, f64>) -> Vec<usize> {
    e.outer_iter().map(|row| argmax(row)).collect()
}

pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Dual objective of the read-out:
/// `-(1/2eta) Tr(H^T R K R H) + 1/2 Tr(H^T R H) - sign/lambda2 Tr(H^T L C)`
/// with `sign = 1` for the standard form.
pub fn energy(
    h: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    w: &Weights,
    c: ArrayView2<'_, f64>,
    eta: f64,
    lambda2: f64,
) -> f64 {
    energy_terms(h, k, w, c, eta).combine(1.0, lambda2)
}

/// The three traces of the read-out energy, kept apart so the supervision
/// sign can be chosen by the caller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyTerms {
    /// `-(1/2eta) Tr(H^T R K R H)`
    pub kernel: f64,
    /// `1/2 Tr(H^T R H)`
    pub weight: f64,
    /// `Tr(H^T L C)`
    pub supervision: f64,
}

impl EnergyTerms {
    pub fn combine(&self, sign: f64, lambda2: f64) -> f64 {
        self.kernel + self.weight - sign * self.supervision / lambda2
    }
}

pub fn energy_terms(h: ArrayView2<'_, f64>, k: ArrayView2<'_, f64>, w: &Weights, c: ArrayView2<'_, f64>, eta: f64) -> EnergyTerms {
    let rh = scale_rows(h, w.r.view());
    let krh = k.dot(&rh);
    let kernel = -(&rh * &krh).sum() / (2.0 * eta);
    let weight = 0.5 * (&h * &rh).sum();
    let mut supervision = 0.0;
    for i in 0..h.nrows() {
        if w.labeled[i] {
            supervision += h.row(i).dot(&c.row(i));
        }
    }
    EnergyTerms { kernel, weight, supervision }
}

/// A solved read-out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiSupModel {
    pub spec: ReadoutSpec,
    #[serde(with = "crate::model_io::matrix")]
    pub h: Array2<f64>,
    #[serde(with = "crate::model_io::vector")]
    pub b: Array1<f64>,
    pub weights: Weights,
    #[serde(with = "crate::model_io::matrix")]
    pub codes: Array2<f64>,
}

impl SemiSupModel {
    pub fn fit(spec: &ReadoutSpec, k: &GramMatrix, labels: &[i64], labeled: &[bool], p: usize, exec: Exec) -> Result<Self> {
        let weights = build_weights(k, labeled, spec.lambda1, spec.lambda2)?;
        let codes = encode_labels(labels, labeled, p)?;
        Self::fit_weighted(spec, k, weights, codes, exec)
    }

    pub fn fit_weighted(spec: &ReadoutSpec, k: &GramMatrix, weights: Weights, codes: Array2<f64>, exec: Exec) -> Result<Self> {
        let h = solve_with(k.data.view(), &weights, codes.view(), spec.eta, spec.lambda2, exec)?;
        let b = bias(h.view(), k.data.view(), &weights, codes.view(), spec.eta, spec.lambda2)?;
        Ok(SemiSupModel { spec: spec.clone(), h, b, weights, codes })
    }

    pub fn scores(&self) -> Array2<f64> {
        scores(self.h.view(), &self.weights, self.codes.view(), self.spec.lambda2)
    }

    pub fn predict(&self) -> Vec<usize> {
        predict(self.scores().view())
    }

    /// `e = (1/eta) sum_i r_i h_i k(x_i, x) + b` for one new point.
    pub fn out_of_sample_scores(&self, k_row: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if k_row.len() != self.h.nrows() {
            return Err(GckmError::Dimension(format!(
                "kernel row has {} entries, the read-out has {} training nodes",
                k_row.len(),
                self.h.nrows()
            )));
        }
        let weighted: Array1<f64> = &k_row * &self.weights.r;
        Ok(weighted.dot(&self.h) / self.spec.eta + &self.b)
    }

    /// Scores for many points at once; row `q` of `k_rows` holds the kernel
    /// values of point `q` against the training nodes.
    pub fn out_of_sample_scores_batch(&self, k_rows: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if k_rows.ncols() != self.h.nrows() {
            return Err(GckmError::Dimension(format!(
                "kernel rows have {} columns, the read-out has {} training nodes",
                k_rows.ncols(),
                self.h.nrows()
            )));
        }
        let rh = scale_rows(self.h.view(), self.weights.r.view());
        let mut e = k_rows.dot(&rh) / self.spec.eta;
        for mut row in e.outer_iter_mut() {
            row += &self.b;
        }
        Ok(e)
    }

    pub fn energy_terms(&self, k: ArrayView2<'_, f64>) -> EnergyTerms {
        energy_terms(self.h.view(), k, &self.weights, self.codes.view(), self.spec.eta)
    }

    /// `||H^T R 1||_2`.
    pub fn constraint_residual(&self) -> f64 {
        let v = self.weights.r.dot(&self.h);
        v.dot(&v).sqrt()
    }
}
