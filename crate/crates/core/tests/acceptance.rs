//! Acceptance suite. Prints one PASS/FAIL/BLOCKED line per criterion and
//! exits non-zero if any runnable criterion fails. Dataset-backed criteria
//! look for directories under `GCKM_DATA_ROOT` and report BLOCKED without it.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use gckm::graph::{aggregate, load_dataset, permute, AggregationMode, Graph, Role};
use gckm::kernels::{gram, KernelSpec};
use gckm::layer::{GckmLayerModel, LayerGrams, LayerSpec};
use gckm::model::{initialize, train, ModelConfig, OptimizerConfig, Problem, SelectionMetric, TrainOptions};
use gckm::numerics::{top_eigenpairs_with, EigenMethod};
use gckm::readout::{bias, build_weights, encode_labels, solve, system_matrix, sparsity, ReadoutSpec, SemiSupModel};
use gckm::search::{run_search, SearchOptions, SearchSpace};
use gckm::Exec;
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Blocked(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.gen_range(-1.0..1.0))
}

/// Textbook cyclic Jacobi with threshold sweeps; eigenvectors in columns.
fn oracle_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let total: f64 = a.iter().map(|x| x * x).sum();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[[i, j]].powi(2)).sum();
        if off <= 1e-30 * total {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]));
    let values = order.iter().map(|&i| a[[i, i]]).collect();
    let vectors = v.select(Axis(1), &order);
    (values, vectors)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let (mut worst_value, mut worst_angle) = (0.0f64, 0.0f64);
    let mut cases = 0;
    while cases < 50 {
        let n = r.gen_range(4..=100);
        let m = r.gen_range(1..=n);
        let b = random_matrix(&mut r, n, m);
        let a = b.dot(&b.t());
        let (values, vectors) = oracle_eigen(&a);
        let s = r.gen_range(1..=m.min(12));
        // the leading subspace is only defined up to a gap
        let scale = values[0].abs().max(1.0);
        if s < n && values[s - 1] - values[s] < 1e-3 * scale {
            continue;
        }
        cases += 1;
        let u = vectors.slice(ndarray::s![.., ..s]).to_owned();
        for method in [EigenMethod::Auto, EigenMethod::Tridiagonal] {
            let got = top_eigenpairs_with(a.view(), s, method).expect("eigensolver");
            for k in 0..s {
                worst_value = worst_value.max((got.values[k] - values[k]).abs());
            }
            // sin of the largest principal angle is bounded by this Frobenius norm
            let residual = &got.vectors - &u.dot(&u.t().dot(&got.vectors));
            worst_angle = worst_angle.max(residual.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst_value < 1e-9 && worst_angle < 1e-8 && secs < 10.0,
        format!("50 PSD matrices, max eigenvalue error {worst_value:.2e}, max subspace angle {worst_angle:.2e}, {secs:.2}s"),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    let mut worst = 0.0f64;
    let mut invariant = true;
    for _ in 0..50 {
        let n = r.gen_range(6..=60);
        let p = r.gen_range(2..=4);
        let x = random_matrix(&mut r, n, 3);
        let spec = if r.gen_bool(0.5) { KernelSpec::Rbf { sigma2: r.gen_range(0.3..3.0) } } else { KernelSpec::Polynomial { degree: 2, offset: 1.5 } };
        let k = gram(&spec, x.view()).unwrap();
        let labels: Vec<i64> = (0..n).map(|i| (i % p) as i64).collect();
        let labeled: Vec<bool> = (0..n).map(|i| i < 2 * p || r.gen_bool(0.2)).collect();
        let (eta, l1, l2) = (r.gen_range(0.5f64..4.0), r.gen_range(0.2f64..4.0), r.gen_range(0.2f64..4.0));
        let w = build_weights(&k, &labeled, l1, l2).unwrap();
        let c = encode_labels(&labels, &labeled, p).unwrap();
        let h = solve(k.data.view(), &w, c.view(), eta, l2).unwrap();
        let b = bias(h.view(), k.data.view(), &w, c.view(), eta, l2).unwrap();
        // h_i = (1/eta) sum_j K_ij r_j h_j + b + l_i c_i / (r_i lambda2), written out entry by entry
        for i in 0..n {
            for q in 0..p {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += k.data[[i, j]] * w.r[j] * h[[j, q]];
                }
                let li = if labeled[i] { 1.0 } else { 0.0 };
                let rhs = acc / eta + b[q] + li * c[[i, q]] / (w.r[i] * l2);
                worst = worst.max((h[[i, q]] - rhs).abs());
            }
        }
        for q in 0..p {
            let cons: f64 = (0..n).map(|i| w.r[i] * h[[i, q]]).sum();
            worst = worst.max(cons.abs());
        }
        let rs = ReadoutSpec { eta, lambda1: l1, lambda2: l2, kernel: spec, multiview: false, multiview_kernel: KernelSpec::default() };
        let base = SemiSupModel::fit_weighted(&rs, &k, w.clone(), c.clone(), Exec::default()).unwrap().predict();
        for alpha in [0.05, 3.7, 250.0] {
            let scaled = SemiSupModel::fit_weighted(&rs, &k, w.clone(), &c * alpha, Exec::default()).unwrap().predict();
            invariant &= scaled == base;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-8 && invariant && secs < 10.0,
        format!("50 instances, max stationarity/constraint residual {worst:.2e}, code rescaling invariant: {invariant}, {secs:.2}s"),
    )
}

fn random_graph(r: &mut ChaCha8Rng, n: usize, d: usize, classes: usize, p_edge: f64) -> Graph {
    let x = random_matrix(r, n, d);
    let mut edges = vec![];
    for u in 0..n {
        for v in (u + 1)..n {
            if r.gen_bool(p_edge) {
                edges.push((u, v));
            }
        }
    }
    let labels: Vec<i64> = (0..n).map(|i| (i % classes) as i64).collect();
    let roles: Vec<Role> = (0..n)
        .map(|i| if i < 2 * classes { Role::Train } else if r.gen_bool(0.3) { Role::Val } else { Role::Test })
        .collect();
    Graph::new(x, edges, labels, roles).unwrap()
}

fn base_config(widths: &[usize], iterations: usize) -> ModelConfig {
    ModelConfig {
        layers: widths
            .iter()
            .map(|&w| LayerSpec { width: w, eta: 1.0, kernel: KernelSpec::Rbf { sigma2: 1.5 }, aggregation: AggregationMode::Gcn })
            .collect(),
        readout: ReadoutSpec { eta: 1.0, lambda1: 1.0, lambda2: 1.0, kernel: KernelSpec::Rbf { sigma2: 0.5 }, multiview: false, multiview_kernel: KernelSpec::default() },
        optimizer: OptimizerConfig { max_iterations: iterations, ..Default::default() },
        seed: 0,
    }
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for kernel in [KernelSpec::Rbf { sigma2: 1.0 }, KernelSpec::Polynomial { degree: 2, offset: 1.0 }, KernelSpec::Linear] {
        let g = random_graph(&mut r, 30, 4, 3, 0.15);
        let spec = LayerSpec { width: 3, eta: 0.7, kernel, aggregation: AggregationMode::Gcn };
        let grams = LayerGrams::build(&spec, &g, g.features().view(), Exec::default()).unwrap();
        let model = GckmLayerModel::fit_grams(&spec, &grams).unwrap();
        let back = model.out_of_sample(grams.inputs.view()).unwrap();
        worst = worst.max((&back - &model.h).iter().fold(0.0, |m, v| m.max(v.abs())));
    }
    let mut labels_match = true;
    for seed in 0..5 {
        let g = random_graph(&mut rng(100 + seed), 24, 3, 3, 0.2);
        let model = initialize(&g, &base_config(&[4, 3], 0)).unwrap();
        let doubled = g.disjoint_union(&g).unwrap();
        let copies: Vec<usize> = (24..48).collect();
        labels_match &= model.infer(&doubled, &copies, Exec::default()).unwrap() == model.predict_transductive();
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-8 && labels_match && secs < 5.0,
        format!("layer out-of-sample max deviation {worst:.2e}, duplicated-node labels equal transductive: {labels_match}, {secs:.2}s"),
    )
}

fn criterion_4() -> Outcome {
    let g = random_graph(&mut rng(4), 12, 3, 2, 0.3);
    let cfg = base_config(&[3, 2], 0);
    let model = initialize(&g, &cfg).unwrap();
    let problem = Problem::new(&g, &cfg, &TrainOptions::default()).unwrap();
    let hs = model.duals();
    let fwd = problem.forward(&hs).unwrap();
    let readout = problem.solve_readout(&fwd).unwrap();
    let grads = problem.gradient(&fwd, &hs, &readout).unwrap();
    let f = |hs: &[Array2<f64>]| problem.objective(&problem.forward(hs).unwrap(), hs, &readout);
    let step = 1e-5;
    let (mut diff, mut norm) = (0.0, 0.0);
    for l in 0..hs.len() {
        for idx in ndarray::indices(hs[l].dim()) {
            let mut plus = hs.to_vec();
            plus[l][idx] += step;
            let mut minus = hs.to_vec();
            minus[l][idx] -= step;
            let fd = (f(&plus) - f(&minus)) / (2.0 * step);
            diff += (fd - grads[l][idx]).powi(2);
            norm += grads[l][idx].powi(2);
        }
    }
    let rel = (diff / norm).sqrt();
    verdict(rel < 1e-5, format!("12 nodes, 2 rbf layers, central differences with step 1e-5: relative error {rel:.2e}"))
}

fn criterion_5() -> Outcome {
    let mut r = rng(5);
    let mut equal = 0;
    for _ in 0..20 {
        let n = r.gen_range(8..=20);
        let g = random_graph(&mut r, n, 3, 2, 0.25);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let pg = permute(&g, &perm).unwrap();
        let cfg = base_config(&[3, 2], 2);
        let (m, _) = train(&g, &cfg).unwrap();
        let (pm, _) = train(&pg, &cfg).unwrap();
        let pred = m.predict_transductive();
        let ppred = pm.predict_transductive();
        equal += usize::from((0..n).all(|i| ppred[i] == pred[perm[i]]));
    }
    verdict(equal == 20, format!("{equal}/20 random graphs give permuted predictions after 2 training iterations"))
}

/// One refinement round: a node's new colour is its colour together with
/// the sorted multiset of its neighbours' colours.
fn wl_round(g: &Graph, colors: &[usize]) -> Vec<(usize, Vec<usize>)> {
    (0..g.num_nodes())
        .map(|v| {
            let mut m: Vec<usize> = g.neighbors(v).iter().map(|&u| colors[u]).collect();
            m.sort_unstable();
            (colors[v], m)
        })
        .collect()
}

fn graph_from_edges(n: usize, edges: &[(usize, usize)]) -> Graph {
    Graph::new(Array2::zeros((n, 1)), edges.to_vec(), vec![-1; n], vec![Role::Unlabeled; n]).unwrap()
}

fn curated_pairs() -> Vec<(Graph, Graph)> {
    let cycle = |n: usize| (0..n).map(|i| (i, (i + 1) % n)).collect::<Vec<_>>();
    let path = |n: usize| (0..n - 1).map(|i| (i, i + 1)).collect::<Vec<_>>();
    let star = |n: usize| (1..n).map(|i| (0, i)).collect::<Vec<_>>();
    let two_triangles = vec![(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)];
    let mut pairs = vec![
        (graph_from_edges(6, &cycle(6)), graph_from_edges(6, &two_triangles)),
        (graph_from_edges(4, &path(4)), graph_from_edges(4, &star(4))),
        (graph_from_edges(4, &cycle(4)), graph_from_edges(4, &path(4))),
        (graph_from_edges(5, &cycle(5)), graph_from_edges(5, &star(5))),
        (graph_from_edges(8, &cycle(8)), graph_from_edges(8, &[cycle(4), cycle(4).iter().map(|&(a, b)| (a + 4, b + 4)).collect()].concat())),
        (graph_from_edges(7, &path(7)), graph_from_edges(7, &star(7))),
    ];
    let mut r = rng(6);
    while pairs.len() < 30 {
        let mut pick = || {
            let n = r.gen_range(3..=8);
            let p = r.gen_range(0.2..0.7);
            let edges: Vec<(usize, usize)> = (0..n).flat_map(|u| ((u + 1)..n).map(move |v| (u, v))).filter(|_| r.gen_bool(p)).collect();
            graph_from_edges(n, &edges)
        };
        let a = pick();
        let b = pick();
        pairs.push((a, b));
    }
    pairs
}

fn criterion_6() -> Outcome {
    let mut separated = 0usize;
    let mut merged = 0usize;
    let mut violations = vec![];
    for (pi, (a, b)) in curated_pairs().iter().enumerate() {
        let g = a.disjoint_union(b).unwrap();
        let n = g.num_nodes();
        let degree: Vec<usize> = (0..n).map(|v| g.neighbors(v).len()).collect();
        let max_deg = degree.iter().copied().max().unwrap_or(0);
        // uniform initial colour, and degree-determined initial colour
        let settings: [(Vec<usize>, Array2<f64>); 2] = [
            (vec![0; n], Array2::ones((n, 1))),
            (degree.clone(), Array2::from_shape_fn((n, max_deg + 1), |(v, j)| f64::from(u8::from(degree[v] == j)))),
        ];
        for (si, (colors, x)) in settings.into_iter().enumerate() {
            let g = g.with_features(x).unwrap();
            let wl = wl_round(&g, &colors);
            let agg = aggregate(&g, g.features().view(), AggregationMode::Sum).unwrap();
            let k = gram(&KernelSpec::Rbf { sigma2: 1.0 }, agg.view()).unwrap();
            for u in 0..n {
                for v in (u + 1)..n {
                    let same_agg = agg.row(u) == agg.row(v);
                    let row_gap = (&k.data.row(u) - &k.data.row(v)).iter().fold(0.0f64, |m, d| m.max(d.abs()));
                    if wl[u] == wl[v] {
                        merged += 1;
                        if !(same_agg && row_gap == 0.0) {
                            violations.push(format!("pair {pi} setting {si}: WL-equal nodes {u},{v} differ"));
                        }
                    } else {
                        separated += 1;
                        if same_agg || row_gap <= 1e-10 {
                            violations.push(format!("pair {pi} setting {si}: WL-separated nodes {u},{v} collide"));
                        }
                    }
                }
            }
        }
    }
    verdict(
        violations.is_empty(),
        format!(
            "30 pairs x 2 colourings: {separated} separated and {merged} equal node pairs checked, {} violations{}",
            violations.len(),
            violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default()
        ),
    )
}

/// Not a criterion: with arbitrary attributes, sum aggregation over the
/// closed neighbourhood cannot tell a node's own colour from a neighbour's.
fn attribute_caveat() -> String {
    let g = Graph::new(ndarray::array![[1.0, 0.0], [0.0, 1.0]], vec![(0, 1)], vec![-1, -1], vec![Role::Unlabeled; 2]).unwrap();
    let wl = wl_round(&g, &[0, 1]);
    let agg = aggregate(&g, g.features().view(), AggregationMode::Sum).unwrap();
    format!(
        "single edge with colours 0-1: WL colours differ ({}), sum-aggregated rows equal ({})",
        wl[0] != wl[1],
        agg.row(0) == agg.row(1)
    )
}

/// Stochastic block model with few labels, for the synthetic depth and
/// sparsity readings.
fn sbm(n: usize, classes: usize, seed: u64) -> Graph {
    let mut r = rng(seed);
    let y: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let x = Array2::from_shape_fn((n, 8), |(i, j)| if j % classes == y[i] { 1.0 } else { 0.0 } + r.gen_range(-0.8..0.8));
    let mut edges = vec![];
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if y[u] == y[v] { 0.05 } else { 0.005 };
            if r.gen_bool(p) {
                edges.push((u, v));
            }
        }
    }
    let roles = (0..n).map(|i| if i < 4 * classes { Role::Train } else { Role::Test }).collect();
    Graph::new(x, edges, y.iter().map(|&c| c as i64).collect(), roles).unwrap()
}

fn readout_sparsity(g: &Graph, cfg: &ModelConfig) -> (f64, f64, [f64; 2]) {
    let start = Instant::now();
    let (m, report) = train(g, cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let k = gram(&cfg.readout.kernel, m.readout_inputs.view()).unwrap();
    let a = system_matrix(k.data.view(), &m.readout.weights, cfg.readout.eta, Exec::default());
    (report.accuracy["test"], secs, [sparsity(a.view(), 1e-10), sparsity(a.view(), 1e-6)])
}

fn synthetic_depth_and_sparsity() -> Vec<String> {
    let g = sbm(300, 3, 7);
    let mut results = BTreeMap::new();
    for depth in [2usize, 8] {
        let mut cfg = base_config(&vec![16; depth], 5);
        cfg.optimizer.selection = SelectionMetric::Unsup;
        results.insert(depth, readout_sparsity(&g, &cfg));
    }
    let (a2, t2, wide) = results[&2];
    let (a8, t8, _) = results[&8];
    let mut narrow_cfg = base_config(&[16, 16], 5);
    narrow_cfg.optimizer.selection = SelectionMetric::Unsup;
    narrow_cfg.readout.kernel = KernelSpec::Rbf { sigma2: (-3.0f64).exp() };
    let (_, _, narrow) = readout_sparsity(&g, &narrow_cfg);
    vec![
        format!("synthetic SBM (n=300, 12 labels): test accuracy 2 layers {a2:.3}, 8 layers {a8:.3}; time ratio {:.2}", t8 / t2),
        format!(
            "synthetic SBM read-out system entries below 1e-10 / 1e-6: {:.1}% / {:.1}% with sigma2 = 0.5, {:.1}% / {:.1}% with sigma2 = e^-3",
            100.0 * wide[0],
            100.0 * wide[1],
            100.0 * narrow[0],
            100.0 * narrow[1]
        ),
    ]
}

fn data_dir(name: &str) -> Option<PathBuf> {
    let root = std::env::var_os("GCKM_DATA_ROOT")?;
    let dir = PathBuf::from(root).join(name);
    dir.join("features.csv").exists().then_some(dir)
}

fn blocked(name: &str) -> Outcome {
    Outcome::Blocked(format!("needs dataset `{name}`; set GCKM_DATA_ROOT"))
}

fn trials() -> usize {
    std::env::var("GCKM_SEARCH_TRIALS").ok().and_then(|v| v.parse().ok()).unwrap_or(200)
}

fn search_best(g: &Graph, space: &SearchSpace, metric: SelectionMetric) -> Option<(ModelConfig, gckm::EvalReport, f64)> {
    let opts = SearchOptions { trials: trials(), metric, seed: 0, workers: 0, exec: Exec::default() };
    let (board, best) = run_search(g, space, &opts).ok()?;
    let cfg = board.best()?.config.clone();
    let (_, report) = best?;
    let secs = report.wall_clock_seconds;
    Some((cfg, report, secs))
}

fn fewlabel_config() -> Option<ModelConfig> {
    let path = data_dir("cora-fewlabel")?.join("best-config.json");
    ModelConfig::from_json(&std::fs::read_to_string(path).ok()?).ok()
}

fn criterion_7() -> Outcome {
    let Some(dir) = data_dir("cora-fewlabel") else { return blocked("cora-fewlabel") };
    let g = load_dataset(&dir).unwrap().merge_train_val();
    let start = Instant::now();
    let Some((cfg, report, secs)) = search_best(&g, &SearchSpace::default(), SelectionMetric::Unsup) else {
        return Outcome::Fail("every search trial failed".into());
    };
    let total = start.elapsed().as_secs_f64();
    std::fs::write(dir.join("best-config.json"), serde_json::to_string_pretty(&cfg).unwrap()).ok();
    let acc = report.accuracy.get("test").copied().unwrap_or(0.0);
    verdict(
        acc >= 0.787 && secs < 65.0 && total < 4.0 * 3600.0,
        format!("test accuracy {:.2}% (target 78.7), best config {secs:.1}s, search {total:.0}s", 100.0 * acc),
    )
}

fn criterion_8() -> Outcome {
    let Some(dir) = data_dir("cora") else { return blocked("cora") };
    let g = load_dataset(&dir).unwrap();
    let Some((cfg, report, _)) = search_best(&g, &SearchSpace::default(), SelectionMetric::ValAcc) else {
        return Outcome::Fail("every search trial failed".into());
    };
    let again = train(&g, &cfg).map(|(_, r)| r.accuracy).ok();
    let acc = report.accuracy.get("test").copied().unwrap_or(0.0);
    let deterministic = again.as_ref() == Some(&report.accuracy);
    verdict(acc >= 0.822 && deterministic, format!("test accuracy {:.2}% (target 82.2), deterministic: {deterministic}", 100.0 * acc))
}

fn criterion_9() -> Outcome {
    let Some(dir) = data_dir("cora") else { return blocked("cora") };
    let g = load_dataset(&dir).unwrap();
    let layer = LayerSpec { width: 64, eta: 1.0, kernel: KernelSpec::default(), aggregation: AggregationMode::Gcn };
    match gckm::cluster(&g, &[layer.clone(), layer], 7, 0, Exec::default()) {
        Ok(out) => {
            let nmi = out.nmi.unwrap_or(0.0);
            verdict(nmi >= 0.44, format!("NMI {nmi:.3} (target 0.44)"))
        }
        Err(e) => Outcome::Fail(e.to_string()),
    }
}

fn criterion_10() -> Outcome {
    let Some(dir) = data_dir("cora-fewlabel") else { return blocked("cora-fewlabel") };
    let Some(cfg2) = fewlabel_config() else { return Outcome::Blocked("needs best-config.json from criterion 7".into()) };
    let g = load_dataset(&dir).unwrap().merge_train_val();
    let mut cfg8 = cfg2.clone();
    while cfg8.layers.len() < 8 {
        cfg8.layers.push(cfg2.layers.last().unwrap().clone());
    }
    let run = |cfg: &ModelConfig| -> Option<(f64, f64)> {
        let start = Instant::now();
        let (_, r) = train(&g, cfg).ok()?;
        Some((r.accuracy.get("test").copied()?, start.elapsed().as_secs_f64()))
    };
    match (run(&cfg2), run(&cfg8)) {
        (Some((a2, t2)), Some((a8, t8))) => verdict(
            (a2 - a8).abs() <= 0.03 && t8 / t2 <= 6.0,
            format!("accuracy 2 layers {:.2}%, 8 layers {:.2}%, time ratio {:.2}", 100.0 * a2, 100.0 * a8, t8 / t2),
        ),
        _ => Outcome::Fail("training failed".into()),
    }
}

fn criterion_11() -> Outcome {
    let Some(dir) = data_dir("cora-fewlabel") else { return blocked("cora-fewlabel") };
    let Some(cfg) = fewlabel_config() else { return Outcome::Blocked("needs best-config.json from criterion 7".into()) };
    let g = load_dataset(&dir).unwrap().merge_train_val();
    match train(&g, &cfg) {
        Ok((_, r)) => verdict(
            r.readout_sparsity >= 0.9,
            format!("system matrix sparsity {:.1}% (gate 90, reference 98)", 100.0 * r.readout_sparsity),
        ),
        Err(e) => Outcome::Fail(e.to_string()),
    }
}

fn criterion_12() -> Outcome {
    let Some(dir) = data_dir("chameleon-fewlabel") else { return blocked("chameleon-fewlabel") };
    let g = load_dataset(&dir).unwrap().merge_train_val();
    let acc = |multiview: bool| {
        let space = SearchSpace { multiview, ..Default::default() };
        search_best(&g, &space, SelectionMetric::Unsup).and_then(|(_, r, _)| r.accuracy.get("test").copied())
    };
    match (acc(false), acc(true)) {
        (Some(plain), Some(mv)) => verdict(
            mv - plain >= 0.03,
            format!("multiview {:.2}% vs plain {:.2}%", 100.0 * mv, 100.0 * plain),
        ),
        _ => Outcome::Fail("every search trial failed".into()),
    }
}

fn pubmed_subsample() -> Outcome {
    let Some(dir) = data_dir("pubmed") else { return blocked("pubmed") };
    let g = load_dataset(&dir).unwrap();
    let nodes = gckm::search::subsample_nodes(&g, 5000, 0);
    let fit = g.induced_subgraph(&nodes).unwrap();
    let result = train(&fit, &base_config(&[16, 16], 0)).and_then(|(m, _)| m.scores_out_of_sample(&g, Exec::default()));
    match result {
        Ok(scores) => verdict(
            scores.iter().all(|v| v.is_finite()) && scores.nrows() == g.num_nodes(),
            format!("fit on {} nodes, scored {} out of sample", fit.num_nodes(), g.num_nodes()),
        ),
        Err(e) => Outcome::Fail(e.to_string()),
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // `cargo test -- --list` and similar probes expect a quiet exit
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("1 eigen/kernel-PCA correctness", criterion_1),
        ("2 semi-supervised read-out exactness", criterion_2),
        ("3 out-of-sample self-consistency", criterion_3),
        ("4 gradient check", criterion_4),
        ("5 permutation equivariance", criterion_5),
        ("6 WL property", criterion_6),
        ("7 Cora few-label reproduction", criterion_7),
        ("8 Cora standard-split reproduction", criterion_8),
        ("9 Cora clustering", criterion_9),
        ("10 depth ablation", criterion_10),
        ("11 read-out sparsity", criterion_11),
        ("12 multiview on Chameleon", criterion_12),
        ("PubMed subsample via out-of-sample", pubmed_subsample),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Outcome::Pass(d) => println!("PASS criterion {name}: {d}"),
            Outcome::Fail(d) => {
                failed += 1;
                println!("FAIL criterion {name}: {d}");
            }
            Outcome::Blocked(d) => println!("BLOCKED criterion {name}: {d}"),
        }
    }
    println!("INFO WL caveat: {}", attribute_caveat());
    for line in synthetic_depth_and_sparsity() {
        println!("INFO {line}");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
