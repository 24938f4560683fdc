//! Attributed undirected graphs, dataset ingestion and the nonparametric
//! neighbourhood aggregation operators.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{GckmError, Result};
use crate::exec::{self, Exec};

/// Label value for nodes whose class is unknown.
pub const UNKNOWN_LABEL: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
    Unlabeled,
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "train" => Ok(Role::Train),
            "val" => Ok(Role::Val),
            "test" => Ok(Role::Test),
            "unlabeled" => Ok(Role::Unlabeled),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
            Role::Unlabeled => "unlabeled",
        })
    }
}

/// Neighbourhood aggregation applied before each kernel layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    /// Symmetric normalisation with self-loops: `sum_{u in N(v)+v} f_u / sqrt(d~_u d~_v)`.
    #[default]
    Gcn,
    /// `f_v + sum_{u in N(v)} f_u`.
    Sum,
    /// Identity; no message passing.
    None,
}

/// An immutable attributed graph.
///
/// Edges are stored once as `(u, v)` with `u < v`; the adjacency lists are
/// sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    features: Array2<f64>,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    labels: Vec<i64>,
    roles: Vec<Role>,
    num_classes: usize,
}

impl Graph {
    /// Validate and assemble a graph. Duplicate undirected edges are merged and
    /// labels are remapped to `0..p`.
    pub fn new(
        features: Array2<f64>,
        edges: impl IntoIterator<Item = (usize, usize)>,
        labels: Vec<i64>,
        roles: Vec<Role>,
    ) -> Result<Self> {
        Self::assemble(features, edges, labels, roles, None)
    }

    /// Like [`Graph::new`] but keeps label ids as given (already contiguous
    /// in a parent graph with `num_classes` classes).
    fn derived(
        &self,
        features: Array2<f64>,
        edges: impl IntoIterator<Item = (usize, usize)>,
        labels: Vec<i64>,
        roles: Vec<Role>,
    ) -> Result<Self> {
        Self::assemble(features, edges, labels, roles, Some(self.num_classes))
    }

    fn assemble(
        features: Array2<f64>,
        edges: impl IntoIterator<Item = (usize, usize)>,
        labels: Vec<i64>,
        roles: Vec<Role>,
        keep_classes: Option<usize>,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n {
            return Err(GckmError::Dataset(format!(
                "row-count mismatch: {n} feature rows but {} labels",
                labels.len()
            )));
        }
        if roles.len() != n {
            return Err(GckmError::Dataset(format!(
                "row-count mismatch: {n} feature rows but {} roles",
                roles.len()
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(GckmError::NonFinite("node features".into()));
        }

        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(GckmError::Dataset(format!(
                    "edge index out of range: ({a}, {b}) for {n} nodes"
                )));
            }
            if a != b {
                set.insert((a.min(b), a.max(b)));
            }
        }
        let edges: Vec<_> = set.into_iter().collect();

        if labels.iter().any(|&y| y < UNKNOWN_LABEL) {
            return Err(GckmError::Dataset("labels must be >= 0 or -1".into()));
        }
        let (labels, num_classes) = match keep_classes {
            Some(p) => (labels, p),
            None => {
                let distinct: BTreeSet<i64> = labels.iter().copied().filter(|&y| y >= 0).collect();
                let remap: BTreeMap<i64, i64> =
                    distinct.iter().enumerate().map(|(i, &y)| (y, i as i64)).collect();
                let labels =
                    labels.iter().map(|y| remap.get(y).copied().unwrap_or(UNKNOWN_LABEL)).collect();
                (labels, distinct.len())
            }
        };

        for (v, (&y, &role)) in labels.iter().zip(&roles).enumerate() {
            if role == Role::Train && y == UNKNOWN_LABEL {
                return Err(GckmError::Dataset(format!(
                    "train node {v} has the unknown-label sentinel"
                )));
            }
        }

        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in &edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for nb in &mut adjacency {
            nb.sort_unstable();
        }

        Ok(Graph { features, edges, adjacency, labels, roles, num_classes })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency[u].binary_search(&v).is_ok()
    }

    /// Training mask `l_i`.
    pub fn train_mask(&self) -> Vec<bool> {
        self.roles.iter().map(|&r| r == Role::Train).collect()
    }

    pub fn nodes_with_role(&self, role: Role) -> Vec<usize> {
        (0..self.num_nodes()).filter(|&v| self.roles[v] == role).collect()
    }

    /// Copy with every validation node promoted to a training node.
    pub fn merge_train_val(&self) -> Graph {
        let mut g = self.clone();
        for r in &mut g.roles {
            if *r == Role::Val {
                *r = Role::Train;
            }
        }
        g
    }

    /// Copy with the given roles (and the same everything else).
    pub fn with_roles(&self, roles: Vec<Role>) -> Result<Graph> {
        self.derived(self.features.clone(), self.edges.iter().copied(), self.labels.clone(), roles)
    }

    /// Copy with new node features (same node count, any dimension).
    pub fn with_features(&self, features: Array2<f64>) -> Result<Graph> {
        if features.nrows() != self.num_nodes() {
            return Err(GckmError::Dimension(format!(
                "{} feature rows for {} nodes",
                features.nrows(),
                self.num_nodes()
            )));
        }
        self.derived(features, self.edges.iter().copied(), self.labels.clone(), self.roles.clone())
    }

    /// Subgraph induced by `nodes` (in the given order): node `i` of the
    /// result is node `nodes[i]` of `self`.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<Graph> {
        let n = self.num_nodes();
        let mut position = vec![usize::MAX; n];
        for (i, &v) in nodes.iter().enumerate() {
            if v >= n {
                return Err(GckmError::Dataset(format!("node {v} out of range")));
            }
            if position[v] != usize::MAX {
                return Err(GckmError::Dataset(format!("node {v} listed twice")));
            }
            position[v] = i;
        }
        let features = self.features.select(ndarray::Axis(0), nodes);
        let edges = self.edges.iter().filter_map(|&(a, b)| {
            let (pa, pb) = (position[a], position[b]);
            (pa != usize::MAX && pb != usize::MAX).then_some((pa, pb))
        });
        let labels = nodes.iter().map(|&v| self.labels[v]).collect();
        let roles = nodes.iter().map(|&v| self.roles[v]).collect();
        self.derived(features, edges, labels, roles)
    }

    /// Disjoint union of `self` followed by `other` (node ids of `other` are
    /// shifted by `self.num_nodes()`).
    pub fn disjoint_union(&self, other: &Graph) -> Result<Graph> {
        if self.feature_dim() != other.feature_dim() {
            return Err(GckmError::Dimension(format!(
                "feature dimensions differ: {} vs {}",
                self.feature_dim(),
                other.feature_dim()
            )));
        }
        let n = self.num_nodes();
        let features = ndarray::concatenate(
            ndarray::Axis(0),
            &[self.features.view(), other.features.view()],
        )
        .expect("matching column counts");
        let edges = self
            .edges
            .iter()
            .copied()
            .chain(other.edges.iter().map(|&(a, b)| (a + n, b + n)));
        let labels = self.labels.iter().chain(&other.labels).copied().collect();
        let roles = self.roles.iter().chain(&other.roles).copied().collect();
        let mut g = self.derived(features, edges, labels, roles)?;
        g.num_classes = self.num_classes.max(other.num_classes);
        Ok(g)
    }

    /// SHA-256 over features and edges, used to key cached Gram matrices and
    /// to recognise the training graph at evaluation time.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.num_nodes() as u64).to_le_bytes());
        h.update((self.feature_dim() as u64).to_le_bytes());
        for x in self.features.iter() {
            h.update(x.to_le_bytes());
        }
        for &(a, b) in &self.edges {
            h.update((a as u64).to_le_bytes());
            h.update((b as u64).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| GckmError::io(path, e))
}

fn parse_err(file: &str, line: usize, msg: impl Into<String>) -> GckmError {
    GckmError::Parse { file: file.to_string(), line, msg: msg.into() }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty())
}

/// Load a dataset directory holding `features.csv`, `edges.tsv`, `labels.csv`
/// and `split.csv`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Graph> {
    let dir = dir.as_ref();

    let text = read_file(&dir.join("features.csv"))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, l) in content_lines(&text) {
        let row = l
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err("features.csv", line, e.to_string()))?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_err(
                    "features.csv",
                    line,
                    format!("expected {} columns, found {}", first.len(), row.len()),
                ));
            }
        }
        rows.push(row);
    }
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let features = Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
        .expect("rectangular rows");

    let text = read_file(&dir.join("edges.tsv"))?;
    let mut edges = Vec::new();
    for (line, l) in content_lines(&text) {
        let mut it = l.split('\t');
        let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
            return Err(parse_err("edges.tsv", line, "expected two tab-separated node ids"));
        };
        let a: usize = a.trim().parse().map_err(|_| parse_err("edges.tsv", line, "bad node id"))?;
        let b: usize = b.trim().parse().map_err(|_| parse_err("edges.tsv", line, "bad node id"))?;
        if a >= n || b >= n {
            return Err(GckmError::Dataset(format!(
                "edge index out of range: ({a}, {b}) at edges.tsv line {line} for {n} nodes"
            )));
        }
        edges.push((a, b));
    }

    let text = read_file(&dir.join("labels.csv"))?;
    let mut labels = vec![None; n];
    let mut count = 0usize;
    for (line, l) in content_lines(&text) {
        let (id, y) = l
            .split_once(',')
            .ok_or_else(|| parse_err("labels.csv", line, "expected `node_id,label`"))?;
        let id: usize = id.trim().parse().map_err(|_| parse_err("labels.csv", line, "bad node id"))?;
        let y: i64 = y.trim().parse().map_err(|_| parse_err("labels.csv", line, "bad label"))?;
        count += 1;
        if id >= n {
            return Err(GckmError::Dataset(format!(
                "row-count mismatch: labels.csv line {line} names node {id} but features.csv has {n} rows"
            )));
        }
        if labels[id].replace(y).is_some() {
            return Err(parse_err("labels.csv", line, format!("node {id} labelled twice")));
        }
    }
    if count != n {
        return Err(GckmError::Dataset(format!(
            "row-count mismatch: {n} feature rows but {count} label rows"
        )));
    }
    let labels: Vec<i64> = labels.into_iter().map(|y| y.unwrap_or(UNKNOWN_LABEL)).collect();

    let text = read_file(&dir.join("split.csv"))?;
    let mut roles = vec![None; n];
    for (line, l) in content_lines(&text) {
        let (id, role) = l
            .split_once(',')
            .ok_or_else(|| parse_err("split.csv", line, "expected `node_id,role`"))?;
        let id: usize = id.trim().parse().map_err(|_| parse_err("split.csv", line, "bad node id"))?;
        let role: Role = role.parse().map_err(|e: String| parse_err("split.csv", line, e))?;
        if id >= n {
            return Err(GckmError::Dataset(format!("split.csv line {line}: node {id} out of range")));
        }
        if roles[id].replace(role).is_some() {
            return Err(parse_err("split.csv", line, format!("node {id} has two roles")));
        }
    }
    let roles = roles.into_iter().map(|r| r.unwrap_or(Role::Unlabeled)).collect();

    Graph::new(features, edges, labels, roles)
}

/// Write a graph in the dataset directory format read by [`load_dataset`].
pub fn save_dataset(g: &Graph, dir: impl AsRef<Path>) -> Result<()> {
    use std::fmt::Write as _;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| GckmError::io(dir, e))?;

    let mut s = String::new();
    for row in g.features.rows() {
        let cells: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    write(dir.join("features.csv"), &s)?;

    s.clear();
    for &(a, b) in &g.edges {
        let _ = writeln!(s, "{a}\t{b}");
    }
    write(dir.join("edges.tsv"), &s)?;

    s.clear();
    for (v, y) in g.labels.iter().enumerate() {
        let _ = writeln!(s, "{v},{y}");
    }
    write(dir.join("labels.csv"), &s)?;

    s.clear();
    for (v, r) in g.roles.iter().enumerate() {
        let _ = writeln!(s, "{v},{r}");
    }
    write(dir.join("split.csv"), &s)
}

fn write(path: impl AsRef<Path>, contents: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, contents).map_err(|e| GckmError::io(path, e))
}

/// Node degrees, optionally counting one self-loop per node.
pub fn degrees(g: &Graph, with_self_loops: bool) -> Vec<usize> {
    g.adjacency.iter().map(|nb| nb.len() + usize::from(with_self_loops)).collect()
}

/// Apply the aggregation operator `psi` to the rows of `f`.
///
/// Each output entry is a sum over the closed neighbourhood. The summands are
/// added in ascending `total_cmp` order, so the result depends only on the
/// multiset of contributions: reordering adjacency storage or relabelling the
/// nodes permutes the output rows bit-exactly.
pub fn aggregate(g: &Graph, f: ArrayView2<'_, f64>, mode: AggregationMode) -> Result<Array2<f64>> {
    aggregate_with(g, f, mode, Exec::default())
}

pub fn aggregate_with(
    g: &Graph,
    f: ArrayView2<'_, f64>,
    mode: AggregationMode,
    exec: Exec,
) -> Result<Array2<f64>> {
    let n = g.num_nodes();
    if f.nrows() != n {
        return Err(GckmError::Dimension(format!("aggregate: {} rows for {n} nodes", f.nrows())));
    }
    if f.iter().any(|x| !x.is_finite()) {
        return Err(GckmError::NonFinite("aggregation input".into()));
    }
    if mode == AggregationMode::None {
        return Ok(f.to_owned());
    }
    let k = f.ncols();
    let inv_sqrt_deg: Vec<f64> =
        degrees(g, true).iter().map(|&d| 1.0 / (d as f64).sqrt()).collect();
    let f = f.as_standard_layout();
    let mut out = vec![0.0; n * k];
    exec::for_each_row(exec, &mut out, k, |v, row| {
        let nb = &g.adjacency[v];
        let mut terms = Vec::with_capacity(nb.len() + 1);
        for (j, slot) in row.iter_mut().enumerate() {
            terms.clear();
            match mode {
                AggregationMode::Sum => {
                    terms.push(f[[v, j]]);
                    terms.extend(nb.iter().map(|&u| f[[u, j]]));
                }
                AggregationMode::Gcn => {
                    let dv = inv_sqrt_deg[v];
                    terms.push(f[[v, j]] * (dv * dv));
                    terms.extend(nb.iter().map(|&u| f[[u, j]] * (inv_sqrt_deg[u] * dv)));
                }
                AggregationMode::None => unreachable!(),
            }
            *slot = canonical_sum(&mut terms);
        }
    });
    Ok(Array2::from_shape_vec((n, k), out).expect("shape"))
}

/// Sum in a canonical order so the result is independent of input order.
fn canonical_sum(terms: &mut [f64]) -> f64 {
    if terms.len() > 2 {
        terms.sort_unstable_by(f64::total_cmp);
    }
    terms.iter().sum()
}

/// Relabel nodes: node `i` of the result carries the data of node `perm[i]`.
pub fn permute(g: &Graph, perm: &[usize]) -> Result<Graph> {
    let n = g.num_nodes();
    if perm.len() != n {
        return Err(GckmError::Dataset(format!("permutation has length {} for {n} nodes", perm.len())));
    }
    let mut inverse = vec![usize::MAX; n];
    for (i, &p) in perm.iter().enumerate() {
        if p >= n || inverse[p] != usize::MAX {
            return Err(GckmError::Dataset("permutation is not a bijection".into()));
        }
        inverse[p] = i;
    }
    let features = g.features.select(ndarray::Axis(0), perm);
    let edges = g.edges.iter().map(|&(a, b)| (inverse[a], inverse[b]));
    let labels = perm.iter().map(|&p| g.labels[p]).collect();
    let roles = perm.iter().map(|&p| g.roles[p]).collect();
    g.derived(features, edges, labels, roles)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitReport {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub unlabeled: usize,
    /// Training labels per class, indexed by remapped class id.
    pub train_per_class: Vec<usize>,
}

pub fn validate_split(g: &Graph) -> SplitReport {
    let mut report = SplitReport {
        train: 0,
        val: 0,
        test: 0,
        unlabeled: 0,
        train_per_class: vec![0; g.num_classes],
    };
    for (&role, &y) in g.roles.iter().zip(&g.labels) {
        match role {
            Role::Train => {
                report.train += 1;
                if y >= 0 {
                    report.train_per_class[y as usize] += 1;
                }
            }
            Role::Val => report.val += 1,
            Role::Test => report.test += 1,
            Role::Unlabeled => report.unlabeled += 1,
        }
    }
    report
}
