use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gckm::graph::{load_dataset, Graph};
use gckm::layer::LayerSpec;
use gckm::model::{evaluate_scores, train_with, DeepModel, ModelConfig, SelectionMetric, TrainOptions};
use gckm::search::{run_search, subsample_nodes, SearchOptions, SearchSpace};
use gckm::{ErrorKind, Exec, GckmError, KernelSpec, Role};
use serde_json::{json, Value};

/// Deep graph convolutional kernel machines.
#[derive(Parser, Debug)]
#[command(name = "gckm", version, about)]
struct Cli {
    /// Run every inner loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration and write the model and its report.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Report path; defaults to `<out>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Cache the first-layer Gram in this directory (default: next to the model).
        #[arg(long, num_args = 0..=1, default_missing_value = "")]
        cache_grams: Option<PathBuf>,
        /// Treat validation labels as training labels.
        #[arg(long)]
        merge_train_val: bool,
        /// Fit on at most this many nodes and score the rest out of sample.
        #[arg(long)]
        subsample: Option<usize>,
    },
    /// Random search over a hyperparameter space.
    Search {
        #[arg(long)]
        data: PathBuf,
        /// JSON search space; omitted fields take the standard ranges.
        #[arg(long)]
        space: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value = "auto")]
        metric: SelectionMetric,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trials run concurrently (0: one per core).
        #[arg(long, default_value_t = 0)]
        parallel: usize,
        /// Directory for the leaderboard and the best model.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long)]
        merge_train_val: bool,
    },
    /// Score nodes with a trained model and print metrics as JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `all`, `test`, or a file with one node id per line.
        #[arg(long, default_value = "all")]
        nodes: String,
    },
    /// Unsupervised two-layer embedding followed by k-means.
    Cluster {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Components per layer before capping at the numerical rank.
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 1,
        ErrorKind::Numerical => 2,
        ErrorKind::Io => 3,
    }
}

fn read_text(path: &Path) -> gckm::Result<String> {
    std::fs::read_to_string(path).map_err(|e| GckmError::Io { path: path.into(), source: e })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> gckm::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| GckmError::Model(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| GckmError::Io { path: path.into(), source: e })
}

/// Prints pretty JSON; a closed stdout (e.g. `| head`) is not an error.
fn emit(value: &impl serde::Serialize) {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value).expect("serialisable");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn load(data: &Path, merge: bool) -> gckm::Result<Graph> {
    let g = load_dataset(data)?;
    Ok(if merge { g.merge_train_val() } else { g })
}

fn train(
    exec: Exec,
    data: &Path,
    config: &Path,
    out: &Path,
    report_path: Option<PathBuf>,
    seed: Option<u64>,
    cache_grams: Option<PathBuf>,
    merge: bool,
    subsample: Option<usize>,
) -> gckm::Result<()> {
    let mut cfg = ModelConfig::from_json(&read_text(config)?)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let g = load(data, merge)?;
    let gram_cache = cache_grams.map(|p| {
        if p.as_os_str().is_empty() {
            out.parent().map(Path::to_path_buf).unwrap_or_default()
        } else {
            p
        }
    });
    let opts = TrainOptions { exec, gram_cache };
    let fit_graph = match subsample {
        Some(n) if n < g.num_nodes() => g.induced_subgraph(&subsample_nodes(&g, n, cfg.seed))?,
        _ => g.clone(),
    };
    let (model, report) = train_with(&fit_graph, &cfg, &opts)?;
    model.save(out)?;
    let mut value = serde_json::to_value(&report).map_err(|e| GckmError::Model(e.to_string()))?;
    if fit_graph.num_nodes() < g.num_nodes() {
        let scores = model.scores_out_of_sample(&g, exec)?;
        let full = evaluate_scores(&g, scores.view())?;
        value["full_graph"] = serde_json::to_value(full).map_err(|e| GckmError::Model(e.to_string()))?;
        value["fit_nodes"] = json!(fit_graph.num_nodes());
    }
    let report_path = report_path.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".report.json");
        PathBuf::from(p)
    });
    write_json(&report_path, &value)?;
    emit(&value);
    Ok(())
}

fn search(exec: Exec, data: &Path, space: Option<PathBuf>, opts: SearchOptions, out_dir: &Path, merge: bool) -> gckm::Result<()> {
    let space = match space {
        Some(p) => SearchSpace::from_json(&read_text(&p)?)?,
        None => SearchSpace::default(),
    };
    let g = load(data, merge)?;
    let opts = SearchOptions { exec, ..opts };
    let (board, best) = run_search(&g, &space, &opts)?;
    std::fs::create_dir_all(out_dir).map_err(|e| GckmError::Io { path: out_dir.into(), source: e })?;
    write_json(&out_dir.join("leaderboard.json"), &board)?;
    if let Some((model, report)) = &best {
        model.save(out_dir.join("best-model.json"))?;
        write_json(&out_dir.join("best-report.json"), report)?;
    }
    let summary = json!({
        "trials": board.trials.len(),
        "failed": board.failures(),
        "best_trial": board.best().map(|t| t.trial),
        "best_score": board.best().and_then(|t| t.score),
        "best_report": best.as_ref().map(|b| &b.1),
    });
    emit(&summary);
    if best.is_none() {
        return Err(GckmError::NonFinite("search: every trial failed".into()));
    }
    Ok(())
}

fn parse_nodes(spec: &str, g: &Graph) -> gckm::Result<Vec<usize>> {
    match spec {
        "all" => Ok((0..g.num_nodes()).collect()),
        "test" => Ok(g.nodes_with_role(Role::Test)),
        path => {
            let text = read_text(Path::new(path))?;
            text.lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
                .map(|(i, l)| {
                    l.trim().parse::<usize>().map_err(|e| GckmError::Parse { file: path.into(), line: i + 1, msg: e.to_string() })
                })
                .collect()
        }
    }
}

fn eval(exec: Exec, model: &Path, data: &Path, nodes: &str) -> gckm::Result<()> {
    let model = DeepModel::load(model)?;
    let g = load_dataset(data)?;
    let nodes = parse_nodes(nodes, &g)?;
    let transductive = g.fingerprint() == model.training_fingerprint;
    let scores = if transductive { model.scores() } else { model.scores_out_of_sample(&g, exec)? };
    let metrics = evaluate_scores(&g, scores.view())?;
    let pred = gckm::readout::predict(scores.view());
    let mut predictions = Vec::with_capacity(nodes.len());
    let (mut hit, mut known) = (0usize, 0usize);
    for &v in &nodes {
        if v >= g.num_nodes() {
            return Err(GckmError::Dataset(format!("unknown node id {v}")));
        }
        predictions.push(json!({"node": v, "label": pred[v]}));
        if g.labels()[v] >= 0 {
            known += 1;
            hit += usize::from(pred[v] as i64 == g.labels()[v]);
        }
    }
    let out = json!({
        "schema_version": gckm::model::REPORT_SCHEMA_VERSION,
        "mode": if transductive { "transductive" } else { "out_of_sample" },
        "metrics": metrics,
        "selected_accuracy": (known > 0).then(|| hit as f64 / known as f64),
        "predictions": predictions,
    });
    emit(&out);
    Ok(())
}

fn cluster(exec: Exec, data: &Path, k: usize, seed: u64, width: usize, eta: f64, out: Option<PathBuf>) -> gckm::Result<()> {
    if k < 2 {
        return Err(GckmError::Config { field: "k".into(), msg: format!("need k >= 2, got {k}") });
    }
    let g = load_dataset(data)?;
    let layer = LayerSpec { width, eta, kernel: KernelSpec::default(), aggregation: Default::default() };
    layer.validate("layer")?;
    let result = gckm::cluster(&g, &[layer.clone(), layer], k, seed, exec)?;
    let value: Value = json!({
        "k": k,
        "seed": seed,
        "nmi": result.nmi,
        "bandwidths": result.bandwidths,
        "widths": result.widths,
        "assignments": result.assignments,
    });
    if let Some(path) = out {
        write_json(&path, &value)?;
    }
    emit(&value);
    Ok(())
}

fn run(cli: Cli) -> gckm::Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::Train { data, config, out, report, seed, cache_grams, merge_train_val, subsample } => {
            train(exec, &data, &config, &out, report, seed, cache_grams, merge_train_val, subsample)
        }
        Command::Search { data, space, trials, metric, seed, parallel, out_dir, merge_train_val } => {
            let opts = SearchOptions { trials, metric, seed, workers: parallel, exec };
            search(exec, &data, space, opts, &out_dir, merge_train_val)
        }
        Command::Eval { model, data, nodes } => eval(exec, &model, &data, &nodes),
        Command::Cluster { data, k, seed, width, eta, out } => cluster(exec, &data, k, seed, width, eta, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match gckm::exec::with_thread_cap(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
