//! Random hyperparameter search over deep GCKM configurations.
//!
//! Trial `i` draws its configuration from its own generator stream, so a
//! leaderboard depends only on the data, the space, the trial count and the
//! seed, never on how trials are scheduled.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GckmError, Result};
use crate::exec::{self, Exec};
use crate::graph::{AggregationMode, Graph, Role};
use crate::kernels::KernelSpec;
use crate::layer::LayerSpec;
use crate::model::{train_with, DeepModel, EvalReport, ModelConfig, OptimizerConfig, SelectionMetric, TrainOptions};
use crate::readout::ReadoutSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Rbf,
    Polynomial,
}

/// Distributions for every tuned hyperparameter. Log-uniform ranges are
/// given as natural-log bounds `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub depth: usize,
    pub layer_kernels: Vec<KernelFamily>,
    pub readout_kernels: Vec<KernelFamily>,
    pub ln_sigma2: [f64; 2],
    /// Polynomial offset `t`.
    pub ln_offset: [f64; 2],
    pub degrees: Vec<u32>,
    pub widths: Vec<usize>,
    pub ln_eta: [f64; 2],
    pub ln_lambda: [f64; 2],
    pub aggregation: AggregationMode,
    pub multiview: bool,
    pub optimizer: OptimizerConfig,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            depth: 2,
            layer_kernels: vec![KernelFamily::Rbf, KernelFamily::Polynomial],
            readout_kernels: vec![KernelFamily::Rbf, KernelFamily::Polynomial],
            ln_sigma2: [-3.0, 5.0],
            ln_offset: [-5.0, 5.0],
            degrees: vec![1, 2],
            widths: vec![16, 32, 64],
            ln_eta: [-4.0, 4.0],
            ln_lambda: [-4.0, 4.0],
            aggregation: AggregationMode::Gcn,
            multiview: false,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl SearchSpace {
    pub fn from_json(text: &str) -> Result<SearchSpace> {
        let space: SearchSpace = serde_json::from_str(text).map_err(|e| GckmError::config("space", e.to_string()))?;
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(GckmError::config("space.depth", "must be at least 1"));
        }
        for (name, empty) in [
            ("layer_kernels", self.layer_kernels.is_empty()),
            ("readout_kernels", self.readout_kernels.is_empty()),
            ("degrees", self.degrees.is_empty()),
            ("widths", self.widths.is_empty()),
        ] {
            if empty {
                return Err(GckmError::config(format!("space.{name}"), "must not be empty"));
            }
        }
        for (name, [lo, hi]) in [
            ("ln_sigma2", self.ln_sigma2),
            ("ln_offset", self.ln_offset),
            ("ln_eta", self.ln_eta),
            ("ln_lambda", self.ln_lambda),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(GckmError::config(format!("space.{name}"), format!("bad range [{lo}, {hi}]")));
            }
        }
        if self.widths.contains(&0) || self.degrees.contains(&0) {
            return Err(GckmError::config("space", "widths and degrees must be positive"));
        }
        self.optimizer.cayley.validate()
    }

    fn log_uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
        if lo == hi {
            lo.exp()
        } else {
            rng.gen_range(lo..=hi).exp()
        }
    }

    fn kernel(&self, rng: &mut ChaCha8Rng, families: &[KernelFamily]) -> KernelSpec {
        match families.choose(rng).expect("validated non-empty") {
            KernelFamily::Rbf => KernelSpec::Rbf { sigma2: Self::log_uniform(rng, self.ln_sigma2) },
            KernelFamily::Polynomial => {
                let degree = *self.degrees.choose(rng).expect("validated non-empty");
                KernelSpec::Polynomial { degree, offset: Self::log_uniform(rng, self.ln_offset) }
            }
        }
    }

    /// Configuration for `trial`, drawn from stream `trial` of `seed`.
    pub fn sample(&self, seed: u64, trial: usize) -> ModelConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let layers = (0..self.depth)
            .map(|_| LayerSpec {
                width: *self.widths.choose(&mut rng).expect("validated non-empty"),
                eta: Self::log_uniform(&mut rng, self.ln_eta),
                kernel: self.kernel(&mut rng, &self.layer_kernels),
                aggregation: self.aggregation,
            })
            .collect();
        let readout = ReadoutSpec {
            eta: Self::log_uniform(&mut rng, self.ln_eta),
            lambda1: Self::log_uniform(&mut rng, self.ln_lambda),
            lambda2: Self::log_uniform(&mut rng, self.ln_lambda),
            kernel: self.kernel(&mut rng, &self.readout_kernels),
            multiview: self.multiview,
            multiview_kernel: if self.multiview { self.kernel(&mut rng, &self.layer_kernels) } else { KernelSpec::default() },
        };
        ModelConfig { layers, readout, optimizer: self.optimizer.clone(), seed: seed.wrapping_add(trial as u64) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub config: ModelConfig,
    /// Selection metric, higher is better; absent for failed trials.
    pub score: Option<f64>,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub metric: SelectionMetric,
    pub seed: u64,
    /// Successful trials by descending score (ties by trial index), then
    /// failed trials by index.
    pub trials: Vec<TrialRecord>,
}

impl Leaderboard {
    pub fn best(&self) -> Option<&TrialRecord> {
        self.trials.first().filter(|t| t.score.is_some())
    }

    pub fn failures(&self) -> usize {
        self.trials.iter().filter(|t| t.score.is_none()).count()
    }
}

#[derive(Debug, Clone)]
pub struct SearchOptions {
    pub trials: usize,
    pub metric: SelectionMetric,
    pub seed: u64,
    /// Trials in flight at once; 0 uses the ambient pool.
    pub workers: usize,
    /// Strategy for the loops inside a trial.
    pub exec: Exec,
}

/// Run the search and retrain the winning configuration.
pub fn run_search(g: &Graph, space: &SearchSpace, opts: &SearchOptions) -> Result<(Leaderboard, Option<(DeepModel, EvalReport)>)> {
    if opts.trials == 0 {
        return Err(GckmError::config("trials", "must be at least 1"));
    }
    space.validate()?;
    let run_trial = |trial: usize| {
        let mut config = space.sample(opts.seed, trial);
        config.optimizer.selection = opts.metric;
        let outcome = train_with(g, &config, &TrainOptions { exec: opts.exec, gram_cache: None });
        match outcome {
            Ok((_, mut report)) => {
                // timing goes to the log so the leaderboard stays reproducible
                log::info!("trial {trial}: {:.3}s", report.wall_clock_seconds);
                report.wall_clock_seconds = 0.0;
                let score = report.score(opts.metric);
                if score.is_none() {
                    log::warn!("trial {trial}: metric {} unavailable", opts.metric);
                }
                TrialRecord { trial, config, score, report: Some(report), error: None }
            }
            Err(e) => {
                log::warn!("trial {trial} failed: {e}");
                TrialRecord { trial, config, score: None, report: None, error: Some(e.to_string()) }
            }
        }
    };
    let records = in_pool(opts.workers, || exec::map_indices(Exec::Parallel, opts.trials, run_trial));
    let mut trials = records;
    trials.sort_by(|a, b| match (a.score, b.score) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.trial.cmp(&b.trial)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.trial.cmp(&b.trial),
    });
    let board = Leaderboard { metric: opts.metric, seed: opts.seed, trials };
    let best = match board.best() {
        Some(t) => Some(train_with(g, &t.config, &TrainOptions { exec: opts.exec, gram_cache: None })?),
        None => None,
    };
    Ok((board, best))
}

fn in_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    #[cfg(feature = "parallel")]
    if workers > 0 {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            return pool.install(f);
        }
    }
    let _ = workers;
    f()
}

/// At most `n` node ids for fitting on a large graph: every training node
/// (up to `n`) plus a seeded sample of the rest, in ascending order. The
/// remaining nodes are scored by out-of-sample extension.
pub fn subsample_nodes(g: &Graph, n: usize, seed: u64) -> Vec<usize> {
    if n >= g.num_nodes() {
        return (0..g.num_nodes()).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = g.nodes_with_role(Role::Train);
    train.shuffle(&mut rng);
    train.truncate(n);
    let mut rest: Vec<usize> = (0..g.num_nodes()).filter(|&v| g.roles()[v] != Role::Train).collect();
    rest.shuffle(&mut rng);
    let mut chosen: Vec<usize> = train.into_iter().chain(rest).take(n).collect();
    chosen.sort_unstable();
    chosen
}
