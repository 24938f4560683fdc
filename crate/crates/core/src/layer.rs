//! The unsupervised GCKM layer: kernel PCA on aggregated node features.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{GckmError, Result};
use crate::exec::Exec;
use crate::graph::{aggregate_with, AggregationMode, Graph};
use crate::kernels::{center, cross_gram_with, gram_with, GramMatrix, KernelSpec};
use crate::numerics::top_eigenpairs;

/// Eigenvalues at or below `POSITIVE_EIGENVALUE_FLOOR * max(1, lambda_max)`
/// are treated as zero.
pub const POSITIVE_EIGENVALUE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub width: usize,
    pub eta: f64,
    #[serde(default)]
    pub kernel: KernelSpec,
    #[serde(default)]
    pub aggregation: AggregationMode,
}

impl LayerSpec {
    pub fn validate(&self, field: &str) -> Result<()> {
        if self.width == 0 {
            return Err(GckmError::config(format!("{field}.width"), "must be at least 1"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(GckmError::config(format!("{field}.eta"), format!("must be positive, got {}", self.eta)));
        }
        self.kernel.validate().map_err(|e| GckmError::config(format!("{field}.kernel"), e.to_string()))
    }
}

/// Kernel PCA on a centred Gram: the top-`s` eigenvectors `H` and
/// `Lambda = diag(eigenvalues) / eta`.
pub fn fit(k_c: &GramMatrix, s: usize, eta: f64) -> Result<(Array2<f64>, Array1<f64>)> {
    if !k_c.is_square() {
        return Err(GckmError::Dimension(format!("layer fit needs a square Gram, got {:?}", k_c.data.dim())));
    }
    let n = k_c.nrows();
    if s > n {
        return Err(GckmError::RankDeficient { requested: s, available: n });
    }
    let eig = top_eigenpairs(k_c.data.view(), s)?;
    let floor = POSITIVE_EIGENVALUE_FLOOR * eig.values[0].max(1.0);
    let available = eig.values.iter().filter(|&&v| v > floor).count();
    if available < s {
        return Err(GckmError::RankDeficient { requested: s, available });
    }
    Ok((eig.vectors, eig.values / eta))
}

/// Number of eigenvalues of `k_c` above the positivity floor, counted among
/// the leading `limit`.
pub fn numerical_rank(k_c: &GramMatrix, limit: usize) -> Result<usize> {
    let eig = top_eigenpairs(k_c.data.view(), limit.min(k_c.nrows()).max(1))?;
    let floor = POSITIVE_EIGENVALUE_FLOOR * eig.values[0].max(1.0);
    Ok(eig.values.iter().filter(|&&v| v > floor).count())
}

/// `-(1 / 2 eta) Tr(H^T K_c H)`.
pub fn objective(h: ArrayView2<'_, f64>, k_c: ArrayView2<'_, f64>, eta: f64) -> f64 {
    let kh = k_c.dot(&h);
    -(&h * &kh).sum() / (2.0 * eta)
}

/// A fitted layer with everything needed to embed new nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GckmLayerModel {
    pub spec: LayerSpec,
    /// Dual variables of the training nodes (`n x s`).
    #[serde(with = "crate::model_io::matrix")]
    pub h: Array2<f64>,
    /// `(1/eta) H^T K_c H`. Diagonal with the eigenvalues over `eta` right
    /// after fitting; a full symmetric matrix once `H` has been finetuned.
    #[serde(with = "crate::model_io::matrix")]
    pub lambda: Array2<f64>,
    /// Aggregated training inputs `a_v`.
    #[serde(with = "crate::model_io::matrix")]
    pub train_inputs: Array2<f64>,
    /// `1^T K^{tr,tr} H`, the only part of the training Gram that the
    /// out-of-sample formula needs.
    #[serde(with = "crate::model_io::vector")]
    pub gram_column_projection: Array1<f64>,
}

/// Training-time Grams of one layer.
#[derive(Debug, Clone)]
pub struct LayerGrams {
    pub inputs: Array2<f64>,
    pub gram: GramMatrix,
    pub centered: GramMatrix,
}

impl LayerGrams {
    pub fn build(spec: &LayerSpec, g: &Graph, layer_input: ArrayView2<'_, f64>, exec: Exec) -> Result<LayerGrams> {
        let inputs = aggregate_with(g, layer_input, spec.aggregation, exec)?;
        let gram = gram_with(&spec.kernel, inputs.view(), exec)?;
        let centered = center(&gram)?;
        Ok(LayerGrams { inputs, gram, centered })
    }

    pub fn from_inputs(spec: &LayerSpec, inputs: Array2<f64>, exec: Exec) -> Result<LayerGrams> {
        let gram = gram_with(&spec.kernel, inputs.view(), exec)?;
        let centered = center(&gram)?;
        Ok(LayerGrams { inputs, gram, centered })
    }
}

impl GckmLayerModel {
    /// Fit on precomputed Grams.
    pub fn fit_grams(spec: &LayerSpec, grams: &LayerGrams) -> Result<GckmLayerModel> {
        let (h, values) = fit(&grams.centered, spec.width, spec.eta)?;
        let gram_column_projection = grams.gram.data.sum_axis(Axis(0)).dot(&h);
        Ok(GckmLayerModel {
            spec: spec.clone(),
            h,
            lambda: Array2::from_diag(&values),
            train_inputs: grams.inputs.clone(),
            gram_column_projection,
        })
    }

    /// Wrap finetuned dual variables, refreshing the quantities derived from
    /// them.
    pub fn from_state(spec: &LayerSpec, grams: &LayerGrams, h: Array2<f64>) -> GckmLayerModel {
        let lambda = h.t().dot(&grams.centered.data.dot(&h)) / spec.eta;
        let lambda = (&lambda + &lambda.t()) * 0.5;
        let gram_column_projection = grams.gram.data.sum_axis(Axis(0)).dot(&h);
        GckmLayerModel { spec: spec.clone(), h, lambda, train_inputs: grams.inputs.clone(), gram_column_projection }
    }

    pub fn width(&self) -> usize {
        self.h.ncols()
    }

    pub fn num_train(&self) -> usize {
        self.h.nrows()
    }

    /// Error variables `E = H Lambda`.
    pub fn errors(&self) -> Array2<f64> {
        self.h.dot(&self.lambda)
    }

    /// Dual representations of new nodes from their aggregated features:
    /// `(1/eta) (K^{new,tr} H - (1/n) 1 1^T K^{tr,tr} H) Lambda^{-1}`.
    pub fn out_of_sample(&self, a_new: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.out_of_sample_with(a_new, Exec::default())
    }

    pub fn out_of_sample_with(&self, a_new: ArrayView2<'_, f64>, exec: Exec) -> Result<Array2<f64>> {
        if a_new.ncols() != self.train_inputs.ncols() {
            return Err(GckmError::Dimension(format!(
                "out-of-sample inputs have {} columns, the layer was trained on {}",
                a_new.ncols(),
                self.train_inputs.ncols()
            )));
        }
        let n = self.num_train() as f64;
        let cross = cross_gram_with(&self.spec.kernel, a_new, self.train_inputs.view(), exec)?;
        let mut proj = cross.data.dot(&self.h);
        let mean = &self.gram_column_projection / n;
        for mut row in proj.outer_iter_mut() {
            row -= &mean;
        }
        proj /= self.spec.eta;
        // right-multiply by Lambda^{-1}: solve Lambda^T X^T = proj^T
        let lambda_t = self.lambda.t().to_owned();
        let xt = crate::numerics::solve_dense_with(lambda_t.view(), proj.t(), Exec::Sequential)?;
        Ok(xt.t().to_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::eigen::jacobi;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_graph(n: usize, d: usize, seed: u64) -> Graph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        let mut edges = vec![];
        for u in 0..n {
            for v in (u + 1)..n {
                if rng.gen_bool(0.15) {
                    edges.push((u, v));
                }
            }
        }
        Graph::new(x, edges, vec![-1; n], vec![crate::graph::Role::Unlabeled; n]).unwrap()
    }

    fn spec(width: usize, eta: f64) -> LayerSpec {
        LayerSpec { width, eta, kernel: KernelSpec::Rbf { sigma2: 2.0 }, aggregation: AggregationMode::Gcn }
    }

    fn centered_from_spectrum(values: &[f64]) -> GramMatrix {
        // Q diag(values) Q^T with Q orthonormal and orthogonal to 1.
        let n = values.len() + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut q = Array2::from_shape_fn((n, values.len()), |_| rng.gen_range(-1.0..1.0));
        for mut c in q.columns_mut() {
            let m = c.mean().unwrap();
            c -= m;
        }
        crate::numerics::orthonormalize(&mut q).unwrap();
        let k = q.dot(&Array2::from_diag(&Array1::from(values.to_vec()))).dot(&q.t());
        let k = (&k + &k.t()) * 0.5;
        GramMatrix { data: k, symmetric: true, centered: true }
    }

    #[test]
    fn closed_form_example() {
        let k = centered_from_spectrum(&[4.0, 1.0, 0.0, 0.0]);
        let (h, lambda) = fit(&k, 1, 2.0).unwrap();
        assert!((lambda[0] - 2.0).abs() < 1e-12);
        assert!((objective(h.view(), k.data.view(), 2.0) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn trace_identity_at_full_rank() {
        let k = centered_from_spectrum(&[3.0, 2.0, 0.5]);
        let (h, _) = fit(&k, 3, 1.0).unwrap();
        let tr = k.data.diag().sum();
        assert!((-2.0 * objective(h.view(), k.data.view(), 1.0) - tr).abs() < 1e-10);
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let k = centered_from_spectrum(&[3.0, 2.0, 0.0, 0.0]);
        match fit(&k, 3, 1.0) {
            Err(GckmError::RankDeficient { requested: 3, available: 2 }) => {}
            other => panic!("{other:?}"),
        }
        assert_eq!(numerical_rank(&k, 5).unwrap(), 2);
    }

    #[test]
    fn objective_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = Array2::from_shape_fn((7, 3), |_| rng.gen_range(-1.0..1.0));
        let k = Array2::from_shape_fn((7, 7), |_| rng.gen_range(-1.0..1.0));
        let mut tr = 0.0;
        for c in 0..3 {
            for i in 0..7 {
                for j in 0..7 {
                    tr += h[[i, c]] * k[[i, j]] * h[[j, c]];
                }
            }
        }
        assert!((objective(h.view(), k.view(), 1.5) + tr / 3.0).abs() < 1e-12);
        assert_eq!(objective(Array2::zeros((7, 3)).view(), k.view(), 1.0), 0.0);
    }

    #[test]
    fn fitted_layer_invariants() {
        let g = random_graph(40, 5, 3);
        let sp = spec(6, 0.7);
        let grams = LayerGrams::build(&sp, &g, g.features().view(), Exec::default()).unwrap();
        let m = GckmLayerModel::fit_grams(&sp, &grams).unwrap();
        let h = &m.h;
        let orth = h.t().dot(h) - Array2::<f64>::eye(6);
        assert!(orth.iter().all(|v| v.abs() < 1e-8));
        assert!(h.sum_axis(Axis(0)).iter().all(|v| v.abs() < 1e-8));
        let diag = m.lambda.diag();
        assert!(diag.iter().all(|&v| v > 0.0));
        assert!(diag.windows(2).into_iter().all(|w| w[0] >= w[1]));
        let res = grams.centered.data.dot(h) / sp.eta - h.dot(&m.lambda);
        let fro = |a: &Array2<f64>| a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(fro(&res) <= 1e-8 * fro(&grams.centered.data));

        // objective equals minus the scaled top eigenvalue sum of an independent solver
        let (vals, _) = jacobi(grams.centered.data.view());
        let mut vals = vals;
        vals.sort_by(|a, b| b.total_cmp(a));
        let expect = -vals[..6].iter().sum::<f64>() / (2.0 * sp.eta);
        assert!((objective(h.view(), grams.centered.data.view(), sp.eta) - expect).abs() < 1e-8);
    }

    #[test]
    fn out_of_sample_reproduces_training_duals() {
        let g = random_graph(30, 4, 5);
        let sp = spec(5, 1.3);
        let grams = LayerGrams::build(&sp, &g, g.features().view(), Exec::default()).unwrap();
        let m = GckmLayerModel::fit_grams(&sp, &grams).unwrap();
        let h_hat = m.out_of_sample(grams.inputs.view()).unwrap();
        assert!((&h_hat - &m.h).iter().all(|v| v.abs() < 1e-8));
        let one = m.out_of_sample(grams.inputs.slice(ndarray::s![7..8, ..])).unwrap();
        assert!((&one.row(0) - &m.h.row(7)).iter().all(|v| v.abs() < 1e-8));
        assert!(m.out_of_sample(array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn out_of_sample_matches_symbolwise_formula() {
        let g = random_graph(20, 3, 8);
        let sp = spec(4, 0.9);
        let grams = LayerGrams::build(&sp, &g, g.features().view(), Exec::default()).unwrap();
        let m = GckmLayerModel::fit_grams(&sp, &grams).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let new = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let got = m.out_of_sample(new.view()).unwrap();
        let n = 20;
        let k = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
            (-(&a - &b).mapv(|t| t * t).sum() / 4.0).exp()
        };
        for q in 0..3 {
            for c in 0..4 {
                let mut first = 0.0;
                for i in 0..n {
                    first += k(new.row(q), grams.inputs.row(i)) * m.h[[i, c]];
                }
                let mut second = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        second += k(grams.inputs.row(i), grams.inputs.row(j)) * m.h[[j, c]];
                    }
                }
                let expect = (first / sp.eta - second / (n as f64 * sp.eta)) / m.lambda[[c, c]];
                assert!((got[[q, c]] - expect).abs() < 1e-10);
            }
        }
    }
}
