//! The deep GCKM: stacked kernel-PCA layers feeding a semi-supervised
//! read-out, trained end to end on the dual variables.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GckmError, Result};
use crate::exec::Exec;
use crate::graph::{aggregate_with, Graph, Role};
use crate::kernels::{
    cross_gram_with, gram_input_gradient, gram_with, multiview_gram, read_matrix_bin, rbf_bandwidth_heuristic,
    write_matrix_bin, GramMatrix, KernelSpec,
};
use crate::kmeans::{kmeans, KMeansConfig};
use crate::layer::{numerical_rank, GckmLayerModel, LayerGrams, LayerSpec};
use crate::metrics::{accuracy, combined_score, nmi, unsup_cosine, ClassCodings};
use crate::numerics::{orthogonality_loss, CayleyAdamConfig, CayleyAdamState};
use crate::readout::{sparsity, system_matrix, ReadoutSpec, SemiSupModel, Weights};

pub const MODEL_FORMAT: &str = "gckm-model";
pub const MODEL_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Criterion for picking the reported iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    /// Validation accuracy when validation labels exist, otherwise `unsup`.
    #[default]
    Auto,
    ValAcc,
    Unsup,
    Comb,
}

impl FromStr for SelectionMetric {
    type Err = GckmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(SelectionMetric::Auto),
            "val_acc" => Ok(SelectionMetric::ValAcc),
            "unsup" => Ok(SelectionMetric::Unsup),
            "comb" => Ok(SelectionMetric::Comb),
            other => Err(GckmError::config("metric", format!("unknown metric `{other}`"))),
        }
    }
}

impl fmt::Display for SelectionMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMetric::Auto => "auto",
            SelectionMetric::ValAcc => "val_acc",
            SelectionMetric::Unsup => "unsup",
            SelectionMetric::Comb => "comb",
        })
    }
}

/// Sign of the supervision trace in the deep objective. `Reward` subtracts
/// `Tr(H^T L C) / lambda2`, matching the read-out's own dual; `Penalty` adds it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionSign {
    #[default]
    Reward,
    Penalty,
}

impl SupervisionSign {
    fn factor(self) -> f64 {
        match self {
            SupervisionSign::Reward => 1.0,
            SupervisionSign::Penalty => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Outer iterations; 0 keeps the initialisation.
    pub max_iterations: usize,
    pub selection: SelectionMetric,
    pub supervision_sign: SupervisionSign,
    /// Also differentiate the read-out weights `r` through their dependence
    /// on the read-out Gram.
    pub readout_grad_through_weights: bool,
    pub cayley: CayleyAdamConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iterations: 0,
            selection: SelectionMetric::Auto,
            supervision_sign: SupervisionSign::Reward,
            readout_grad_through_weights: false,
            cayley: CayleyAdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: Vec<LayerSpec>,
    pub readout: ReadoutSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(GckmError::config("layers", "at least one layer is required"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate(&format!("layers[{i}]"))?;
        }
        self.readout.validate("readout")?;
        self.optimizer.cayley.validate()
    }

    pub fn from_json(text: &str) -> Result<ModelConfig> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| {
            let path = if e.is_data() { format!("line {} column {}", e.line(), e.column()) } else { "<root>".into() };
            GckmError::config(path, e.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Execution settings that do not change results.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub exec: Exec,
    /// Directory for cached first-layer Grams.
    pub gram_cache: Option<PathBuf>,
}

/// Grams that depend on the current dual variables.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Per layer; entry 0 is the constant first layer.
    pub layers: Vec<LayerGrams>,
    /// Gram on the last embedding.
    pub readout_embedding_gram: GramMatrix,
    /// Read-out Gram (times the raw-feature Gram in multiview mode).
    pub readout_gram: GramMatrix,
}

/// Everything fixed during training: graph, configuration, constant Grams.
pub struct Problem<'a> {
    pub graph: &'a Graph,
    pub config: &'a ModelConfig,
    pub exec: Exec,
    first_layer: LayerGrams,
    feature_gram: Option<GramMatrix>,
    labeled: Vec<bool>,
}

impl<'a> Problem<'a> {
    pub fn new(graph: &'a Graph, config: &'a ModelConfig, opts: &TrainOptions) -> Result<Problem<'a>> {
        config.validate()?;
        let spec = &config.layers[0];
        let first_layer = first_layer_grams(graph, spec, opts).map_err(|e| e.in_layer(1))?;
        let feature_gram = if config.readout.multiview {
            Some(gram_with(&config.readout.multiview_kernel, graph.features().view(), opts.exec)?)
        } else {
            None
        };
        Ok(Problem { graph, config, exec: opts.exec, first_layer, feature_gram, labeled: graph.train_mask() })
    }

    pub fn labeled(&self) -> &[bool] {
        &self.labeled
    }

    pub fn forward(&self, hs: &[Array2<f64>]) -> Result<Forward> {
        let mut layers = vec![self.first_layer.clone()];
        for l in 1..self.config.layers.len() {
            let grams = LayerGrams::build(&self.config.layers[l], self.graph, hs[l - 1].view(), self.exec)
                .map_err(|e| e.in_layer(l + 1))?;
            layers.push(grams);
        }
        let last = hs.last().expect("at least one layer");
        let embedding = gram_with(&self.config.readout.kernel, last.view(), self.exec)?;
        let readout_gram = match &self.feature_gram {
            Some(x) => multiview_gram(&embedding, x)?,
            None => embedding.clone(),
        };
        Ok(Forward { layers, readout_embedding_gram: embedding, readout_gram })
    }

    pub fn solve_readout(&self, fwd: &Forward) -> Result<SemiSupModel> {
        SemiSupModel::fit(
            &self.config.readout,
            &fwd.readout_gram,
            self.graph.labels(),
            &self.labeled,
            self.graph.num_classes().max(1),
            self.exec,
        )
    }

    fn weights_for(&self, fwd: &Forward, readout: &SemiSupModel) -> Weights {
        if self.config.optimizer.readout_grad_through_weights {
            let sums = fwd.readout_gram.data.sum_axis(Axis(1));
            let v = sums.mapv(|s| 1.0 / s);
            let rs = &self.config.readout;
            let r = v
                .iter()
                .zip(&self.labeled)
                .map(|(&vi, &l)| vi / rs.lambda1 - if l { 1.0 / rs.lambda2 } else { 0.0 })
                .collect();
            Weights { v, r, labeled: self.labeled.clone() }
        } else {
            readout.weights.clone()
        }
    }

    /// Per-layer objectives followed by the read-out energy; their sum is the
    /// deep objective. The read-out duals and codes are taken from `readout`.
    pub fn objective_terms(&self, fwd: &Forward, hs: &[Array2<f64>], readout: &SemiSupModel) -> Vec<f64> {
        let mut terms: Vec<f64> = hs
            .iter()
            .zip(&fwd.layers)
            .zip(&self.config.layers)
            .map(|((h, grams), spec)| crate::layer::objective(h.view(), grams.centered.data.view(), spec.eta))
            .collect();
        let w = self.weights_for(fwd, readout);
        let e = crate::readout::energy_terms(readout.h.view(), fwd.readout_gram.data.view(), &w, readout.codes.view(), readout.spec.eta);
        terms.push(e.combine(self.config.optimizer.supervision_sign.factor(), readout.spec.lambda2));
        terms
    }

    pub fn objective(&self, fwd: &Forward, hs: &[Array2<f64>], readout: &SemiSupModel) -> f64 {
        // summed in a fixed order: layers first, read-out last
        self.objective_terms(fwd, hs, readout).iter().sum()
    }

    /// Gradient of the deep objective with respect to every layer's duals,
    /// holding the read-out duals fixed.
    pub fn gradient(&self, fwd: &Forward, hs: &[Array2<f64>], readout: &SemiSupModel) -> Result<Vec<Array2<f64>>> {
        let depth = hs.len();
        let mut grads: Vec<Array2<f64>> = hs
            .iter()
            .zip(&fwd.layers)
            .zip(&self.config.layers)
            .map(|((h, grams), spec)| grams.centered.data.dot(h) * (-1.0 / spec.eta))
            .collect();

        // read-out energy through its Gram on the last embedding
        let rs = &readout.spec;
        let w = self.weights_for(fwd, readout);
        let mut z = readout.h.clone();
        for (mut row, &r) in z.outer_iter_mut().zip(w.r.iter()) {
            row *= r;
        }
        let mut upstream = z.dot(&z.t()) * (-0.5 / rs.eta);
        if self.config.optimizer.readout_grad_through_weights {
            let k = &fwd.readout_gram.data;
            let hh = readout.h.dot(&readout.h.t());
            for i in 0..k.nrows() {
                let mut acc = 0.0;
                for j in 0..k.ncols() {
                    acc += w.r[j] * k[[i, j]] * hh[[i, j]];
                }
                let gi = -acc / rs.eta + 0.5 * hh[[i, i]];
                let coeff = -gi * w.v[i] * w.v[i] / rs.lambda1;
                upstream.row_mut(i).mapv_inplace(|u| u + coeff);
            }
        }
        if let Some(x) = &self.feature_gram {
            upstream = upstream * &x.data;
        }
        let last = &hs[depth - 1];
        grads[depth - 1] += &gram_input_gradient(&rs.kernel, last.view(), fwd.readout_embedding_gram.data.view(), upstream.view());

        // each deeper layer's centred objective through its Gram on the aggregated previous duals
        for l in (1..depth).rev() {
            let spec = &self.config.layers[l];
            let grams = &fwd.layers[l];
            let mut mh = hs[l].clone();
            let means = mh.mean_axis(Axis(0)).expect("non-empty");
            for mut row in mh.outer_iter_mut() {
                row -= &means;
            }
            let upstream = mh.dot(&mh.t()) * (-0.5 / spec.eta);
            let d_inputs = gram_input_gradient(&spec.kernel, grams.inputs.view(), grams.gram.data.view(), upstream.view());
            // aggregation is symmetric, so its adjoint is itself
            grads[l - 1] += &aggregate_with(self.graph, d_inputs.view(), spec.aggregation, self.exec)?;
        }
        Ok(grads)
    }
}

fn first_layer_grams(g: &Graph, spec: &LayerSpec, opts: &TrainOptions) -> Result<LayerGrams> {
    let inputs = aggregate_with(g, g.features().view(), spec.aggregation, opts.exec)?;
    let Some(dir) = &opts.gram_cache else {
        return LayerGrams::from_inputs(spec, inputs, opts.exec);
    };
    let mut hasher = Sha256::new();
    hasher.update(g.fingerprint().as_bytes());
    hasher.update(serde_json::to_string(&(&spec.kernel, &spec.aggregation)).expect("serialisable").as_bytes());
    let key: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    let path = dir.join(format!("gram-l1-{key}.bin"));
    let n = g.num_nodes();
    let gram = match read_matrix_bin(&path) {
        Ok(m) if m.dim() == (n, n) => {
            log::info!("loaded cached first-layer Gram from {}", path.display());
            GramMatrix::new(m, true)
        }
        _ => {
            let gram = gram_with(&spec.kernel, inputs.view(), opts.exec)?;
            std::fs::create_dir_all(dir).map_err(|e| GckmError::io(dir, e))?;
            write_matrix_bin(&path, gram.data.view())?;
            gram
        }
    };
    let centered = crate::kernels::center(&gram)?;
    Ok(LayerGrams { inputs, gram, centered })
}

/// A trained deep GCKM: the per-layer models, the read-out, and what is
/// needed to score new nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepModel {
    pub config: ModelConfig,
    pub layers: Vec<GckmLayerModel>,
    pub readout: SemiSupModel,
    /// Training embedding fed to the read-out kernel.
    #[serde(with = "crate::model_io::matrix")]
    pub readout_inputs: Array2<f64>,
    /// Raw training features, kept only for the multiview read-out.
    #[serde(with = "crate::model_io::option_matrix", default)]
    pub feature_inputs: Option<Array2<f64>>,
    pub num_classes: usize,
    pub training_fingerprint: String,
    /// Outer iteration the parameters come from.
    pub iteration: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    model: DeepModel,
}

impl DeepModel {
    fn assemble(problem: &Problem<'_>, fwd: &Forward, hs: &[Array2<f64>], readout: SemiSupModel, iteration: usize, fresh: bool) -> Result<DeepModel> {
        let layers = problem
            .config
            .layers
            .iter()
            .zip(&fwd.layers)
            .zip(hs)
            .enumerate()
            .map(|(i, ((spec, grams), h))| {
                if fresh {
                    GckmLayerModel::fit_grams(spec, grams).map_err(|e| e.in_layer(i + 1))
                } else {
                    Ok(GckmLayerModel::from_state(spec, grams, h.clone()))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DeepModel {
            config: problem.config.clone(),
            layers,
            readout,
            readout_inputs: hs.last().expect("non-empty").clone(),
            feature_inputs: problem.feature_gram.as_ref().map(|_| problem.graph.features().clone()),
            num_classes: problem.graph.num_classes(),
            training_fingerprint: problem.graph.fingerprint(),
            iteration,
        })
    }

    pub fn duals(&self) -> Vec<Array2<f64>> {
        self.layers.iter().map(|l| l.h.clone()).collect()
    }

    /// Transductive read-out scores for every training node.
    pub fn scores(&self) -> Array2<f64> {
        self.readout.scores()
    }

    pub fn predict_transductive(&self) -> Vec<usize> {
        self.readout.predict()
    }

    /// Push every node of `g` through the layer out-of-sample maps and the
    /// read-out out-of-sample scores.
    pub fn scores_out_of_sample(&self, g: &Graph, exec: Exec) -> Result<Array2<f64>> {
        if g.feature_dim() != self.feature_dim() {
            return Err(GckmError::Dimension(format!(
                "graph has {} features, the model expects {}",
                g.feature_dim(),
                self.feature_dim()
            )));
        }
        let mut h = g.features().clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let a = aggregate_with(g, h.view(), layer.spec.aggregation, exec)?;
            h = layer.out_of_sample_with(a.view(), exec).map_err(|e| e.in_layer(i + 1))?;
        }
        let mut k = cross_gram_with(&self.readout.spec.kernel, h.view(), self.readout_inputs.view(), exec)?.data;
        if let Some(x) = &self.feature_inputs {
            let kx = cross_gram_with(&self.readout.spec.multiview_kernel, g.features().view(), x.view(), exec)?;
            k = k * &kx.data;
        }
        self.readout.out_of_sample_scores_batch(k.view())
    }

    pub fn feature_dim(&self) -> usize {
        match &self.feature_inputs {
            Some(x) => x.ncols(),
            None => self.layers[0].train_inputs.ncols(),
        }
    }

    /// Labels of `targets` in `g`: read from the training solution when `g`
    /// is the training graph, otherwise by out-of-sample extension.
    pub fn infer(&self, g: &Graph, targets: &[usize], exec: Exec) -> Result<Vec<usize>> {
        if let Some(&bad) = targets.iter().find(|&&t| t >= g.num_nodes()) {
            return Err(GckmError::Dataset(format!("unknown node id {bad}")));
        }
        let all = if g.fingerprint() == self.training_fingerprint {
            self.predict_transductive()
        } else {
            crate::readout::predict(self.scores_out_of_sample(g, exec)?.view())
        };
        Ok(targets.iter().map(|&t| all[t]).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile { format: MODEL_FORMAT.into(), version: MODEL_VERSION, model: self.clone() };
        serde_json::to_string(&file).map_err(|e| GckmError::Model(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<DeepModel> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| GckmError::Model(e.to_string()))?;
        match (value.get("format").and_then(|f| f.as_str()), value.get("version").and_then(|v| v.as_u64())) {
            (Some(MODEL_FORMAT), Some(v)) if v == MODEL_VERSION as u64 => {}
            (Some(MODEL_FORMAT), v) => return Err(GckmError::Model(format!("unsupported model version {v:?}"))),
            _ => return Err(GckmError::Model("not a model file".into())),
        }
        let file: ModelFile = serde_json::from_value(value).map_err(|e| GckmError::Model(e.to_string()))?;
        Ok(file.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| GckmError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<DeepModel> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| GckmError::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Metrics of one iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateMetrics {
    pub accuracy: BTreeMap<String, f64>,
    pub l_unsup: Option<f64>,
    pub l_comb: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    /// Accuracy over labelled nodes of each role.
    pub accuracy: BTreeMap<String, f64>,
    pub l_unsup: Option<f64>,
    pub l_comb: Option<f64>,
    pub nmi: Option<f64>,
    pub selection_metric: SelectionMetric,
    pub supervision_sign: SupervisionSign,
    pub best_iteration: usize,
    pub initial_objective: f64,
    pub selected_objective: f64,
    pub objective_trace: Vec<f64>,
    pub orthogonality_trace: Vec<f64>,
    pub metric_trace: Vec<f64>,
    pub reorthonormalizations: usize,
    /// Largest `||H^T R 1||` seen after any read-out solve.
    pub readout_constraint_residual: f64,
    /// Share of system-matrix entries below 1e-10 in magnitude.
    pub readout_sparsity: f64,
    pub wall_clock_seconds: f64,
}

impl EvalReport {
    /// Value of `metric` for the selected iterate, oriented so that higher
    /// is better.
    pub fn score(&self, metric: SelectionMetric) -> Option<f64> {
        let metric = if metric == SelectionMetric::Auto { self.selection_metric } else { metric };
        match metric {
            SelectionMetric::Auto | SelectionMetric::ValAcc => self.accuracy.get("val").copied(),
            SelectionMetric::Unsup => self.l_unsup.map(|u| -u),
            SelectionMetric::Comb => self.l_comb,
        }
    }
}

/// Nodes scored by the unsupervised metric: everything that is neither a
/// training nor a validation node.
pub fn unsupervised_nodes(g: &Graph) -> Vec<usize> {
    (0..g.num_nodes()).filter(|&i| matches!(g.roles()[i], Role::Test | Role::Unlabeled)).collect()
}

pub fn evaluate_scores(g: &Graph, scores: ArrayView2<'_, f64>) -> Result<IterateMetrics> {
    let pred: Vec<i64> = crate::readout::predict(scores).into_iter().map(|p| p as i64).collect();
    let mut acc = BTreeMap::new();
    for role in [Role::Train, Role::Val, Role::Test, Role::Unlabeled] {
        let mask: Vec<bool> = (0..g.num_nodes()).map(|i| g.roles()[i] == role && g.labels()[i] >= 0).collect();
        if mask.iter().any(|&m| m) {
            acc.insert(role.to_string(), accuracy(&pred, g.labels(), &mask)?);
        }
    }
    let unsup_nodes = unsupervised_nodes(g);
    let p = scores.ncols();
    let l_unsup = if unsup_nodes.is_empty() || p < 2 {
        None
    } else {
        let rows = scores.select(Axis(0), &unsup_nodes);
        Some(unsup_cosine(rows.view(), &ClassCodings::one_vs_all(p))?)
    };
    let n_val = g.nodes_with_role(Role::Val).len();
    let l_comb = match (acc.get("val"), l_unsup) {
        (Some(&a), Some(u)) => Some(combined_score(a, n_val, u, unsup_nodes.len())?),
        (Some(&a), None) => Some(a),
        (None, Some(u)) => Some(combined_score(0.0, 0, u, unsup_nodes.len())?),
        (None, None) => None,
    };
    Ok(IterateMetrics { accuracy: acc, l_unsup, l_comb })
}

/// Resolve `Auto` and return the metric value as higher-is-better.
fn selection_value(metric: SelectionMetric, m: &IterateMetrics) -> Option<f64> {
    match metric {
        SelectionMetric::Auto => m.accuracy.get("val").copied().or(m.l_unsup.map(|u| -u)),
        SelectionMetric::ValAcc => m.accuracy.get("val").copied(),
        SelectionMetric::Unsup => m.l_unsup.map(|u| -u),
        SelectionMetric::Comb => m.l_comb,
    }
}

fn resolve_metric(metric: SelectionMetric, g: &Graph) -> SelectionMetric {
    match metric {
        SelectionMetric::Auto => {
            if g.nodes_with_role(Role::Val).iter().any(|&i| g.labels()[i] >= 0) {
                SelectionMetric::ValAcc
            } else {
                SelectionMetric::Unsup
            }
        }
        m => m,
    }
}

/// Sequential layer-wise initialisation.
pub fn initialize(g: &Graph, cfg: &ModelConfig) -> Result<DeepModel> {
    initialize_with(g, cfg, &TrainOptions::default())
}

pub fn initialize_with(g: &Graph, cfg: &ModelConfig, opts: &TrainOptions) -> Result<DeepModel> {
    let problem = Problem::new(g, cfg, opts)?;
    let (hs, fwd) = initial_duals(&problem)?;
    let readout = problem.solve_readout(&fwd)?;
    DeepModel::assemble(&problem, &fwd, &hs, readout, 0, true)
}

fn initial_duals(problem: &Problem<'_>) -> Result<(Vec<Array2<f64>>, Forward)> {
    let cfg = problem.config;
    let mut hs: Vec<Array2<f64>> = Vec::with_capacity(cfg.layers.len());
    let mut layers = Vec::with_capacity(cfg.layers.len());
    for (l, spec) in cfg.layers.iter().enumerate() {
        let grams = if l == 0 {
            problem.first_layer.clone()
        } else {
            LayerGrams::build(spec, problem.graph, hs[l - 1].view(), problem.exec).map_err(|e| e.in_layer(l + 1))?
        };
        let (h, _) = crate::layer::fit(&grams.centered, spec.width, spec.eta).map_err(|e| e.in_layer(l + 1))?;
        hs.push(h);
        layers.push(grams);
    }
    let fwd = problem.forward(&hs)?;
    debug_assert_eq!(fwd.layers.len(), layers.len());
    Ok((hs, fwd))
}

/// Alternating training: a Cayley-Adam step on all layer duals with the
/// read-out fixed, then an exact read-out solve. Returns the best iterate
/// under the selection metric among those whose objective does not exceed
/// the initial one.
pub fn train(g: &Graph, cfg: &ModelConfig) -> Result<(DeepModel, EvalReport)> {
    train_with(g, cfg, &TrainOptions::default())
}

pub fn train_with(g: &Graph, cfg: &ModelConfig, opts: &TrainOptions) -> Result<(DeepModel, EvalReport)> {
    let start = Instant::now();
    let problem = Problem::new(g, cfg, opts)?;
    let metric = resolve_metric(cfg.optimizer.selection, g);
    let sign = cfg.optimizer.supervision_sign;
    log::info!("supervision sign: {sign:?}; selection metric: {metric}");

    let (mut hs, mut fwd) = initial_duals(&problem)?;
    let mut readout = problem.solve_readout(&fwd)?;
    let j0 = problem.objective(&fwd, &hs, &readout);
    let m0 = evaluate_scores(g, readout.scores().view())?;
    let v0 = selection_value(metric, &m0).ok_or_else(|| {
        GckmError::config("optimizer.selection", format!("metric `{metric}` is not available for this split"))
    })?;

    let mut objective_trace = vec![j0];
    let mut orthogonality_trace = vec![orthogonality_loss(&hs)];
    let mut metric_trace = vec![v0];
    let mut constraint = readout.constraint_residual();
    let mut best = (0usize, v0, j0, m0, hs.clone(), fwd.clone(), readout.clone());

    let shapes: Vec<(usize, usize)> = hs.iter().map(|h| h.dim()).collect();
    let mut opt = CayleyAdamState::new(cfg.optimizer.cayley.clone(), &shapes);
    for k in 1..=cfg.optimizer.max_iterations {
        let step = (|| -> Result<()> {
            let grads = problem.gradient(&fwd, &hs, &readout)?;
            opt.step(&mut hs, &grads)?;
            fwd = problem.forward(&hs)?;
            readout = problem.solve_readout(&fwd)?;
            Ok(())
        })();
        step.map_err(|e| e.in_iteration(k))?;
        let j = problem.objective(&fwd, &hs, &readout);
        objective_trace.push(j);
        orthogonality_trace.push(orthogonality_loss(&hs));
        constraint = constraint.max(readout.constraint_residual());
        if !j.is_finite() {
            return Err(GckmError::NonFinite(format!("objective; trace {objective_trace:?}")).in_iteration(k));
        }
        let m = evaluate_scores(g, readout.scores().view())?;
        let v = selection_value(metric, &m).unwrap_or(f64::NEG_INFINITY);
        metric_trace.push(v);
        if j <= j0 + 1e-9 && v > best.1 {
            best = (k, v, j, m, hs.clone(), fwd.clone(), readout.clone());
        }
    }

    let (best_iteration, _, selected_objective, metrics, best_hs, best_fwd, best_readout) = best;
    let a = system_matrix(best_fwd.readout_gram.data.view(), &best_readout.weights, cfg.readout.eta, opts.exec);
    let readout_sparsity = sparsity(a.view(), 1e-10);
    drop(a);
    let model = DeepModel::assemble(&problem, &best_fwd, &best_hs, best_readout, best_iteration, best_iteration == 0)?;
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        accuracy: metrics.accuracy,
        l_unsup: metrics.l_unsup,
        l_comb: metrics.l_comb,
        nmi: None,
        selection_metric: metric,
        supervision_sign: sign,
        best_iteration,
        initial_objective: j0,
        selected_objective,
        objective_trace,
        orthogonality_trace,
        metric_trace,
        reorthonormalizations: opt.reorthonormalizations,
        readout_constraint_residual: constraint,
        readout_sparsity,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Result of the unsupervised clustering mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterOutput {
    pub assignments: Vec<usize>,
    pub embedding: Array2<f64>,
    /// RBF bandwidth chosen for each layer.
    pub bandwidths: Vec<f64>,
    /// Width used for each layer after capping at the numerical rank.
    pub widths: Vec<usize>,
    pub nmi: Option<f64>,
}

/// Two unsupervised layers with the RBF bandwidth set from each layer's
/// aggregated input, followed by k-means on the last embedding.
pub fn cluster(g: &Graph, layers: &[LayerSpec], k: usize, seed: u64, exec: Exec) -> Result<ClusterOutput> {
    if k < 1 || k > g.num_nodes() {
        return Err(GckmError::config("k", format!("need 1 <= k <= {}, got {k}", g.num_nodes())));
    }
    if layers.len() != 2 {
        return Err(GckmError::config("layers", "clustering uses exactly two layers"));
    }
    let mut h = g.features().clone();
    let mut bandwidths = vec![];
    let mut widths = vec![];
    for (l, base) in layers.iter().enumerate() {
        let inputs = aggregate_with(g, h.view(), base.aggregation, exec)?;
        let sigma2 = rbf_bandwidth_heuristic(inputs.view()).map_err(|e| e.in_layer(l + 1))?;
        let mut spec = base.clone();
        spec.kernel = KernelSpec::Rbf { sigma2 };
        let grams = LayerGrams::from_inputs(&spec, inputs, exec)?;
        let rank = numerical_rank(&grams.centered, spec.width).map_err(|e| e.in_layer(l + 1))?;
        if rank < spec.width {
            log::warn!("layer {}: width {} capped at numerical rank {rank}", l + 1, spec.width);
            spec.width = rank.max(1);
        }
        let (hl, _) = crate::layer::fit(&grams.centered, spec.width, spec.eta).map_err(|e| e.in_layer(l + 1))?;
        bandwidths.push(sigma2);
        widths.push(spec.width);
        h = hl;
    }
    let result = kmeans(h.view(), &KMeansConfig::new(k, seed), exec)?;
    let known: Vec<usize> = (0..g.num_nodes()).filter(|&i| g.labels()[i] >= 0).collect();
    let nmi = if known.is_empty() {
        None
    } else {
        let a: Vec<usize> = known.iter().map(|&i| result.assignments[i]).collect();
        let b: Vec<i64> = known.iter().map(|&i| g.labels()[i]).collect();
        Some(nmi(&a, &b)?)
    };
    Ok(ClusterOutput { assignments: result.assignments, embedding: h, bandwidths, widths, nmi })
}
