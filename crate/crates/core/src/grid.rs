//! Radial grid model: buses, lines, structural checks and the reduced
//! weighted Laplacian together with its closed-form inverse.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    #[serde(default)]
    pub root: bool,
    #[serde(default)]
    pub observed: bool,
}

impl Node {
    pub fn new(id: impl Into<String>, root: bool, observed: bool) -> Self {
        Node {
            id: id.into(),
            root,
            observed,
        }
    }
}

/// A line between two buses with resistance `r` and reactance `x` in ohms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub u: String,
    pub v: String,
    pub r: f64,
    pub x: f64,
}

impl Edge {
    pub fn new(u: impl Into<String>, v: impl Into<String>, r: f64, x: f64) -> Self {
        Edge {
            u: u.into(),
            v: v.into(),
            r,
            x,
        }
    }

    pub fn weight(&self, mode: WeightMode) -> f64 {
        match mode {
            WeightMode::Resistance => self.r,
            WeightMode::Reactance => self.x,
        }
    }
}

/// Which line parameter a Laplacian or distance is built from. The Laplacian
/// uses the reciprocal (`1/r` or `1/x`) as edge weight, distances use the
/// parameter itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    Resistance,
    Reactance,
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

/// A grid topology with line parameters. Immutable once built.
///
/// Construction only checks referential integrity (unique ids, known edge
/// endpoints, no self loops); the modelling assumptions are checked by
/// [`Grid::validate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct Grid {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    index: HashMap<String, usize>,
    ends: Vec<(usize, usize)>,
}

impl TryFrom<GridRepr> for Grid {
    type Error = Error;

    fn try_from(repr: GridRepr) -> Result<Self> {
        Grid::new(repr.nodes, repr.edges)
    }
}

impl From<Grid> for GridRepr {
    fn from(g: Grid) -> Self {
        GridRepr {
            nodes: g.nodes,
            edges: g.edges,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NoRoot,
    MultipleRoots(Vec<String>),
    NotConnected { unreachable: usize },
    EdgeCount { nodes: usize, edges: usize },
    DuplicateEdge { u: String, v: String },
    HiddenLowDegree { node: String, reduced_degree: usize },
    ObservedNotLeaf { node: String, degree: usize },
    ObservedRoot { node: String },
    RootDegreeTwo { node: String },
    NonPositiveImpedance { u: String, v: String, r: f64, x: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoRoot => write!(f, "no root node"),
            Violation::MultipleRoots(ids) => write!(f, "multiple roots: {}", ids.join(", ")),
            Violation::NotConnected { unreachable } => {
                write!(f, "not a tree: {unreachable} node(s) unreachable from the root")
            }
            Violation::EdgeCount { nodes, edges } => {
                write!(f, "not a tree: {edges} edges for {nodes} nodes")
            }
            Violation::DuplicateEdge { u, v } => write!(f, "duplicate edge {u}-{v}"),
            Violation::HiddenLowDegree {
                node,
                reduced_degree,
            } => write!(
                f,
                "hidden node below degree 3: {node} has degree {reduced_degree} without the root"
            ),
            Violation::ObservedNotLeaf { node, degree } => {
                write!(f, "observed node {node} is not a leaf (degree {degree})")
            }
            Violation::ObservedRoot { node } => write!(f, "root {node} is marked observed"),
            Violation::RootDegreeTwo { node } => write!(
                f,
                "root {node} has degree 2; its two lines cannot be separated from leaf data"
            ),
            Violation::NonPositiveImpedance { u, v, r, x } => {
                write!(f, "non-positive impedance on {u}-{v}: r={r}, x={x}")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join("; "))
    }
}

/// The reduced weighted Laplacian over the non-root buses.
#[derive(Clone, Debug)]
pub struct ReducedLaplacian {
    pub nodes: Vec<String>,
    pub mode: WeightMode,
    pub matrix: DMatrix<f64>,
}

impl ReducedLaplacian {
    /// Dense inverse through a Cholesky factorisation.
    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        self.matrix
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::RankDeficient("reduced Laplacian is not positive definite".into()))
    }
}

/// BFS view of a grid hanging from its root.
struct Rooted {
    parent: Vec<Option<(usize, usize)>>,
    depth: Vec<usize>,
}

impl Grid {
    pub fn new(nodes: Vec<Node>, edges: Vec<Edge>) -> Result<Self> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if n.id.is_empty() {
                return Err(Error::Invalid(format!("node #{i} has an empty id")));
            }
            if index.insert(n.id.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate node id {:?}", n.id)));
            }
        }
        let mut ends = Vec::with_capacity(edges.len());
        for (k, e) in edges.iter().enumerate() {
            let u = *index
                .get(&e.u)
                .ok_or_else(|| Error::Invalid(format!("edge #{k} references unknown node {:?}", e.u)))?;
            let v = *index
                .get(&e.v)
                .ok_or_else(|| Error::Invalid(format!("edge #{k} references unknown node {:?}", e.v)))?;
            if u == v {
                return Err(Error::Invalid(format!("edge #{k} is a self loop on {:?}", e.u)));
            }
            ends.push((u, v));
        }
        Ok(Grid {
            nodes,
            edges,
            index,
            ends,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid serialisation cannot fail")
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Endpoint indices of edge `k`.
    pub fn edge_ends(&self, k: usize) -> (usize, usize) {
        self.ends[k]
    }

    pub fn root(&self) -> Option<usize> {
        self.nodes.iter().position(|n| n.root)
    }

    /// Neighbour lists as `(node, edge)` pairs, in edge order.
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (k, &(u, v)) in self.ends.iter().enumerate() {
            adj[u].push((v, k));
            adj[v].push((u, k));
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.nodes.len()];
        for &(u, v) in &self.ends {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    /// Ids of observed nodes in file order.
    pub fn observed_ids(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| n.observed)
            .map(|n| n.id.clone())
            .collect()
    }

    /// Indices of all non-root nodes in file order. This is the row order of
    /// [`Grid::reduced_laplacian`].
    pub fn non_root(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| !self.nodes[i].root).collect()
    }

    pub fn validate(&self) -> ValidationReport {
        let mut out = Vec::new();
        let n = self.nodes.len();
        let roots: Vec<usize> = (0..n).filter(|&i| self.nodes[i].root).collect();
        match roots.len() {
            0 => out.push(Violation::NoRoot),
            1 => {}
            _ => out.push(Violation::MultipleRoots(
                roots.iter().map(|&i| self.nodes[i].id.clone()).collect(),
            )),
        }

        let mut seen = HashSet::new();
        for (k, &(u, v)) in self.ends.iter().enumerate() {
            if !seen.insert((u.min(v), u.max(v))) {
                out.push(Violation::DuplicateEdge {
                    u: self.edges[k].u.clone(),
                    v: self.edges[k].v.clone(),
                });
            }
        }
        if n > 0 && self.edges.len() != n - 1 {
            out.push(Violation::EdgeCount {
                nodes: n,
                edges: self.edges.len(),
            });
        }

        let start = roots.first().copied().unwrap_or(0);
        if n > 0 {
            let reached = self.reachable_from(start);
            if reached < n {
                out.push(Violation::NotConnected {
                    unreachable: n - reached,
                });
            }
        }

        let deg = self.degrees();
        let adj = self.adjacency();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.root {
                if node.observed {
                    out.push(Violation::ObservedRoot {
                        node: node.id.clone(),
                    });
                }
                if deg[i] == 2 {
                    out.push(Violation::RootDegreeTwo {
                        node: node.id.clone(),
                    });
                }
                continue;
            }
            if node.observed {
                if deg[i] != 1 {
                    out.push(Violation::ObservedNotLeaf {
                        node: node.id.clone(),
                        degree: deg[i],
                    });
                }
            } else {
                let root_links = adj[i].iter().filter(|&&(j, _)| self.nodes[j].root).count();
                let reduced = deg[i] - root_links;
                if reduced < 3 {
                    out.push(Violation::HiddenLowDegree {
                        node: node.id.clone(),
                        reduced_degree: reduced,
                    });
                }
            }
        }

        for e in &self.edges {
            let ok = |w: f64| w.is_finite() && w > 0.0;
            if !ok(e.r) || !ok(e.x) {
                out.push(Violation::NonPositiveImpedance {
                    u: e.u.clone(),
                    v: e.v.clone(),
                    r: e.r,
                    x: e.x,
                });
            }
        }

        ValidationReport { violations: out }
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let report = self.validate();
        if report.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidGrid(report.to_string()))
        }
    }

    fn reachable_from(&self, start: usize) -> usize {
        let adj = self.adjacency();
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count
    }

    fn rooted(&self) -> Result<Rooted> {
        let root = self
            .root()
            .ok_or_else(|| Error::InvalidGrid("no root node".into()))?;
        let adj = self.adjacency();
        let n = self.nodes.len();
        let mut parent = vec![None; n];
        let mut depth = vec![0; n];
        let mut seen = vec![false; n];
        seen[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            for &(v, k) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    parent[v] = Some((u, k));
                    depth[v] = depth[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        if seen.iter().any(|s| !s) || self.edges.len() + 1 != n {
            return Err(Error::InvalidGrid("grid is not a tree".into()));
        }
        Ok(Rooted { parent, depth })
    }

    fn non_root_index(&self, id: &str) -> Result<usize> {
        let i = self
            .index_of(id)
            .ok_or_else(|| Error::Invalid(format!("unknown node {id:?}")))?;
        if self.nodes[i].root {
            return Err(Error::Invalid(format!("{id:?} is the root")));
        }
        Ok(i)
    }

    /// Longest root-to-node path, in edges.
    pub fn depth(&self) -> Result<usize> {
        Ok(self.rooted()?.depth.into_iter().max().unwrap_or(0))
    }

    pub fn reduced_laplacian(&self, mode: WeightMode) -> Result<ReducedLaplacian> {
        self.ensure_valid()?;
        let order = self.non_root();
        let mut pos = vec![usize::MAX; self.nodes.len()];
        for (k, &i) in order.iter().enumerate() {
            pos[i] = k;
        }
        let m = order.len();
        let mut h = DMatrix::zeros(m, m);
        for (k, e) in self.edges.iter().enumerate() {
            let w = 1.0 / e.weight(mode);
            let (u, v) = self.ends[k];
            let (pu, pv) = (pos[u], pos[v]);
            if pu != usize::MAX {
                h[(pu, pu)] += w;
            }
            if pv != usize::MAX {
                h[(pv, pv)] += w;
            }
            if pu != usize::MAX && pv != usize::MAX {
                h[(pu, pv)] -= w;
                h[(pv, pu)] -= w;
            }
        }
        Ok(ReducedLaplacian {
            nodes: order.iter().map(|&i| self.nodes[i].id.clone()).collect(),
            mode,
            matrix: h,
        })
    }

    /// Entry `(a, b)` of the inverse reduced Laplacian, computed as the total
    /// line parameter on the shared part of the two root paths.
    pub fn h_inverse_entry(&self, a: &str, b: &str, mode: WeightMode) -> Result<f64> {
        let ia = self.non_root_index(a)?;
        let ib = self.non_root_index(b)?;
        let rooted = self.rooted()?;
        let mut on_a = HashSet::new();
        let mut cur = ia;
        while let Some((p, k)) = rooted.parent[cur] {
            on_a.insert(k);
            cur = p;
        }
        let mut total = 0.0;
        cur = ib;
        while let Some((p, k)) = rooted.parent[cur] {
            if on_a.contains(&k) {
                total += self.edges[k].weight(mode);
            }
            cur = p;
        }
        Ok(total)
    }

    /// Sum of `r` (or `x`) along the unique path between `a` and `b`.
    pub fn true_distance(&self, a: &str, b: &str, mode: WeightMode) -> Result<f64> {
        let ia = self.non_root_index(a)?;
        let ib = self.non_root_index(b)?;
        let rooted = self.rooted()?;
        Ok(self.path_sum(&rooted, ia, ib, mode))
    }

    fn path_sum(&self, rooted: &Rooted, a: usize, b: usize, mode: WeightMode) -> f64 {
        let (mut a, mut b) = (a, b);
        let mut total = 0.0;
        while a != b {
            let climb_a = rooted.depth[a] >= rooted.depth[b];
            let node = if climb_a { &mut a } else { &mut b };
            let (p, k) = rooted.parent[*node].expect("non-root node has a parent");
            total += self.edges[k].weight(mode);
            *node = p;
        }
        total
    }

    /// Matrix of path sums between the listed non-root nodes.
    pub fn distance_matrix(&self, ids: &[String], mode: WeightMode) -> Result<DMatrix<f64>> {
        let rooted = self.rooted()?;
        let idx = ids
            .iter()
            .map(|id| self.non_root_index(id))
            .collect::<Result<Vec<_>>>()?;
        let m = idx.len();
        let mut d = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in i + 1..m {
                let s = self.path_sum(&rooted, idx[i], idx[j], mode);
                d[(i, j)] = s;
                d[(j, i)] = s;
            }
        }
        Ok(d)
    }

    /// The tree that leaf-only data can identify, without a root.
    ///
    /// A degree-one root and its line are dropped, since no leaf-to-leaf path
    /// crosses them. A root of degree three or more stays as an ordinary
    /// hidden bus.
    pub fn reconstruction_target(&self) -> Result<Grid> {
        self.ensure_valid()?;
        let root = self.root().expect("validated grid has a root");
        let deg = self.degrees();
        let mut nodes = self.nodes.clone();
        let mut edges = self.edges.clone();
        if deg[root] <= 1 {
            let root_id = nodes.remove(root).id;
            edges.retain(|e| e.u != root_id && e.v != root_id);
        } else {
            nodes[root].root = false;
            nodes[root].observed = false;
        }
        Grid::new(nodes, edges)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn star() -> Grid {
        Grid::new(
            vec![
                Node::new("t", true, false),
                Node::new("h", false, false),
                Node::new("a", false, true),
                Node::new("b", false, true),
                Node::new("c", false, true),
            ],
            vec![
                Edge::new("t", "h", 0.5, 0.5),
                Edge::new("h", "a", 1.0, 1.0),
                Edge::new("h", "b", 2.0, 2.0),
                Edge::new("h", "c", 3.0, 3.0),
            ],
        )
        .unwrap()
    }

    #[test]
    fn star_is_valid() {
        assert!(star().validate().is_valid());
    }

    #[test]
    fn chain_has_low_degree_hidden() {
        let g = Grid::new(
            vec![
                Node::new("t", true, false),
                Node::new("h", false, false),
                Node::new("a", false, true),
            ],
            vec![Edge::new("t", "h", 1.0, 1.0), Edge::new("h", "a", 1.0, 1.0)],
        )
        .unwrap();
        let report = g.validate();
        assert!(report.violations.iter().any(|v| matches!(
            v,
            Violation::HiddenLowDegree { node, reduced_degree: 1 } if node == "h"
        )));
        assert!(report.to_string().contains("hidden node below degree 3"));
    }

    #[test]
    fn zero_resistance_is_flagged() {
        let mut edges = star().edges().to_vec();
        edges[1].r = 0.0;
        let g = Grid::new(star().nodes().to_vec(), edges).unwrap();
        let report = g.validate();
        assert_eq!(report.violations.len(), 1);
        assert!(report.to_string().contains("non-positive impedance"));
    }

    #[test]
    fn structural_violations() {
        let g = Grid::new(
            vec![
                Node::new("t", true, false),
                Node::new("s", true, false),
                Node::new("a", false, true),
            ],
            vec![Edge::new("t", "a", 1.0, 1.0)],
        )
        .unwrap();
        let v = g.validate().violations;
        assert!(v.iter().any(|v| matches!(v, Violation::MultipleRoots(_))));
        assert!(v.iter().any(|v| matches!(v, Violation::EdgeCount { .. })));
        assert!(v.iter().any(|v| matches!(v, Violation::NotConnected { .. })));
    }

    #[test]
    fn observed_interior_node_is_flagged() {
        let mut nodes = star().nodes().to_vec();
        nodes[1].observed = true;
        let g = Grid::new(nodes, star().edges().to_vec()).unwrap();
        assert!(g
            .validate()
            .violations
            .iter()
            .any(|v| matches!(v, Violation::ObservedNotLeaf { degree: 4, .. })));
    }

    #[test]
    fn construction_rejects_dangling_edges() {
        let err = Grid::new(
            vec![Node::new("t", true, false)],
            vec![Edge::new("t", "zz", 1.0, 1.0)],
        )
        .unwrap_err();
        assert!(err.to_string().contains("zz"));
    }

    #[test]
    fn single_edge_laplacian() {
        let g = Grid::new(
            vec![Node::new("t", true, false), Node::new("a", false, true)],
            vec![Edge::new("t", "a", 2.0, 2.0)],
        )
        .unwrap();
        let l = g.reduced_laplacian(WeightMode::Resistance).unwrap();
        assert_eq!(l.matrix.shape(), (1, 1));
        assert_relative_eq!(l.matrix[(0, 0)], 0.5);
    }

    #[test]
    fn star_laplacian_entries() {
        let l = star().reduced_laplacian(WeightMode::Resistance).unwrap();
        assert_eq!(l.nodes, ["h", "a", "b", "c"]);
        let m = &l.matrix;
        assert_relative_eq!(m[(0, 0)], 2.0 + 1.0 + 0.5 + 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(m[(0, 1)], -1.0);
        assert_relative_eq!(m[(0, 2)], -0.5);
        assert_relative_eq!(m[(0, 3)], -1.0 / 3.0);
        assert_relative_eq!(m[(1, 2)], 0.0);
        assert_eq!(m.clone(), m.transpose());
        let eig = m.clone().symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e > 0.0));
        let x = star().reduced_laplacian(WeightMode::Reactance).unwrap();
        assert_eq!(x.matrix, l.matrix);
    }

    #[test]
    fn star_h_inverse_matches_dense_inverse() {
        let g = star();
        let inv = g.reduced_laplacian(WeightMode::Resistance).unwrap().inverse().unwrap();
        // rows: h, a, b, c
        assert_relative_eq!(inv[(1, 2)], 0.5, epsilon = 1e-12);
        assert_relative_eq!(inv[(1, 1)], 1.5, epsilon = 1e-12);
        assert_relative_eq!(g.h_inverse_entry("a", "b", WeightMode::Resistance).unwrap(), 0.5);
        assert_relative_eq!(g.h_inverse_entry("a", "a", WeightMode::Resistance).unwrap(), 1.5);
    }

    #[test]
    fn separate_root_subtrees_share_nothing() {
        let g = Grid::new(
            vec![
                Node::new("t", true, false),
                Node::new("a", false, true),
                Node::new("b", false, true),
                Node::new("c", false, true),
            ],
            vec![
                Edge::new("t", "a", 1.0, 1.0),
                Edge::new("t", "b", 1.0, 1.0),
                Edge::new("t", "c", 1.0, 1.0),
            ],
        )
        .unwrap();
        assert_eq!(g.h_inverse_entry("a", "b", WeightMode::Resistance).unwrap(), 0.0);
        assert!(g.h_inverse_entry("t", "b", WeightMode::Resistance).is_err());
    }

    #[test]
    fn star_distances() {
        let g = star();
        let d = |a, b| g.true_distance(a, b, WeightMode::Resistance).unwrap();
        assert_eq!(d("a", "b"), 3.0);
        assert_eq!(d("a", "c"), 4.0);
        assert_eq!(d("a", "a"), 0.0);
        let h = |a, b| g.h_inverse_entry(a, b, WeightMode::Resistance).unwrap();
        assert_relative_eq!(d("a", "b"), h("a", "a") + h("b", "b") - 2.0 * h("a", "b"));
        assert!(g.true_distance("t", "a", WeightMode::Resistance).is_err());
    }

    #[test]
    fn target_drops_unit_degree_root() {
        let t = star().reconstruction_target().unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t.edges().len(), 3);
        assert!(t.root().is_none());
    }

    #[test]
    fn json_round_trip() {
        let g = star();
        let back = Grid::from_json(&g.to_json()).unwrap();
        assert_eq!(g, back);
    }
}
