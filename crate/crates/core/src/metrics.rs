//! Evaluation metrics.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{GckmError, Result};

/// Fraction of masked positions where `pred` equals `truth`.
pub fn accuracy<T: PartialEq>(pred: &[T], truth: &[T], mask: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() || mask.len() != pred.len() {
        return Err(GckmError::Dimension("accuracy: inputs differ in length".into()));
    }
    let mut total = 0usize;
    let mut correct = 0usize;
    for ((p, t), &m) in pred.iter().zip(truth).zip(mask) {
        if m {
            total += 1;
            correct += usize::from(p == t);
        }
    }
    if total == 0 {
        return Err(GckmError::Dimension("accuracy over an empty mask".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// The class codings and their centre.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCodings {
    pub codes: Array2<f64>,
    pub center: Array1<f64>,
}

impl ClassCodings {
    /// One-vs-all `{-1, +1}` codes for `p` classes.
    pub fn one_vs_all(p: usize) -> ClassCodings {
        let codes = Array2::from_shape_fn((p, p), |(i, j)| if i == j { 1.0 } else { -1.0 });
        Self::from_codes(codes)
    }

    pub fn from_codes(codes: Array2<f64>) -> ClassCodings {
        let center = codes.mean_axis(ndarray::Axis(0)).unwrap_or_else(|| Array1::zeros(codes.ncols()));
        ClassCodings { codes, center }
    }
}

/// Mean over rows of the centred cosine distance to the nearest coding,
/// `1 - (c_s - mu)^T (e - mu) / (||c_s - mu|| ||e - mu||)`.
///
/// Rows that coincide with the centre contribute 1.
pub fn unsup_cosine(e: ArrayView2<'_, f64>, codings: &ClassCodings) -> Result<f64> {
    if e.ncols() != codings.codes.ncols() {
        return Err(GckmError::Dimension(format!(
            "scores have {} columns, codings {}",
            e.ncols(),
            codings.codes.ncols()
        )));
    }
    if e.nrows() == 0 {
        return Err(GckmError::Dimension("unsupervised metric over zero nodes".into()));
    }
    let centred: Vec<(Array1<f64>, f64)> = codings
        .codes
        .outer_iter()
        .map(|c| {
            let d = &c - &codings.center;
            let norm = d.dot(&d).sqrt();
            (d, norm)
        })
        .collect();
    let mut total = 0.0;
    let mut degenerate = 0usize;
    for row in e.outer_iter() {
        let d = &row - &codings.center;
        let norm = d.dot(&d).sqrt();
        if norm <= 1e-12 {
            degenerate += 1;
            total += 1.0;
            continue;
        }
        let best = centred
            .iter()
            .map(|(c, cn)| 1.0 - c.dot(&d) / (cn * norm))
            .fold(f64::INFINITY, f64::min);
        total += best;
    }
    if degenerate > 0 {
        log::warn!("{degenerate} score rows coincide with the coding centre; counted as distance 1");
    }
    Ok(total / e.nrows() as f64)
}

/// `(n_val acc + n_test (1 - L_unsup / 2)) / (n_val + n_test)`; both parts
/// are higher-is-better.
pub fn combined_score(acc_val: f64, n_val: usize, l_unsup: f64, n_test: usize) -> Result<f64> {
    if n_val + n_test == 0 {
        return Err(GckmError::Dimension("combined score with no validation or test nodes".into()));
    }
    let unsup = 1.0 - l_unsup / 2.0;
    if n_test == 0 {
        return Ok(acc_val);
    }
    if n_val == 0 {
        return Ok(unsup);
    }
    Ok((n_val as f64 * acc_val + n_test as f64 * unsup) / (n_val + n_test) as f64)
}

/// Normalised mutual information with arithmetic-mean normalisation.
/// Two constant labelings are identical partitions and score 1.
pub fn nmi<A: Ord + Clone, B: Ord + Clone>(a: &[A], b: &[B]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(GckmError::Dimension("nmi needs two non-empty labelings of equal length".into()));
    }
    let n = a.len() as f64;
    let mut ca: BTreeMap<A, usize> = BTreeMap::new();
    let mut cb: BTreeMap<B, usize> = BTreeMap::new();
    let mut joint: BTreeMap<(A, B), usize> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *ca.entry(x.clone()).or_default() += 1;
        *cb.entry(y.clone()).or_default() += 1;
        *joint.entry((x.clone(), y.clone())).or_default() += 1;
    }
    let entropy = |counts: &mut dyn Iterator<Item = usize>| {
        let mut terms: Vec<f64> = counts.map(|c| c as f64 / n).map(|p| -p * p.ln()).collect();
        sorted_sum(&mut terms)
    };
    let ha = entropy(&mut ca.values().copied());
    let hb = entropy(&mut cb.values().copied());
    let mut mi_terms: Vec<f64> = joint
        .iter()
        .map(|((x, y), &c)| {
            let pxy = c as f64 / n;
            let px = ca[x] as f64 / n;
            let py = cb[y] as f64 / n;
            // ln(pxy / (px py)) with the product in a fixed order
            pxy * (pxy.ln() - (px.min(py).ln() + px.max(py).ln()))
        })
        .collect();
    let mi = sorted_sum(&mut mi_terms);
    let (lo, hi) = if ha <= hb { (ha, hb) } else { (hb, ha) };
    let denom = 0.5 * (lo + hi);
    if denom <= 0.0 {
        return Ok(if ha == 0.0 && hb == 0.0 { 1.0 } else { 0.0 });
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

fn sorted_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}
