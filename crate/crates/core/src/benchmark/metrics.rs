//! Scoring a learned grid against the truth.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::learner::LearnedGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub exact_recovery: bool,
    pub edge_difference: usize,
    /// Present only with exact recovery.
    pub avg_impedance_error: Option<f64>,
    /// Wall-clock seconds; `None` unless timing was requested.
    pub runtime: Option<f64>,
}

/// Learned-to-true node correspondence and the resulting edge difference.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    pub edge_difference: usize,
    /// Learned node id to true node id; unmatched learned hidden nodes are
    /// absent.
    pub map: BTreeMap<String, String>,
}

type Signature = Vec<Vec<usize>>;

/// A rootless tree with observed labels resolved to shared indices.
struct Labelled {
    ids: Vec<String>,
    /// Index into the shared sorted label list, for observed nodes.
    label: Vec<Option<usize>>,
    adj: Vec<Vec<usize>>,
}

impl Labelled {
    fn new(g: &Grid, labels: &BTreeMap<String, usize>) -> Self {
        let adj = g.adjacency().into_iter().map(|n| n.into_iter().map(|(v, _)| v).collect()).collect();
        Labelled {
            ids: g.nodes().iter().map(|n| n.id.clone()).collect(),
            label: g
                .nodes()
                .iter()
                .map(|n| if n.observed { labels.get(&n.id).copied() } else { None })
                .collect(),
            adj,
        }
    }

    fn observed_labels(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.label.iter().flatten().copied().collect();
        v.sort_unstable();
        v
    }

    /// For every hidden node, the partition of observed labels left by
    /// deleting it.
    fn signatures(&self) -> Vec<Option<Signature>> {
        let n = self.adj.len();
        if n == 0 {
            return Vec::new();
        }
        let mut order = Vec::with_capacity(n);
        let mut parent = vec![usize::MAX; n];
        let mut seen = vec![false; n];
        seen[0] = true;
        let mut stack = vec![0];
        while let Some(u) = stack.pop() {
            order.push(u);
            for &v in &self.adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    parent[v] = u;
                    stack.push(v);
                }
            }
        }
        let mut below: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &u in order.iter().rev() {
            if let Some(l) = self.label[u] {
                below[u].insert(l);
            }
            if parent[u] != usize::MAX {
                let mine = below[u].clone();
                below[parent[u]].extend(mine);
            }
        }
        let all: BTreeSet<usize> = self.label.iter().flatten().copied().collect();
        (0..n)
            .map(|u| {
                if self.label[u].is_some() {
                    return None;
                }
                let mut parts: Signature = self.adj[u]
                    .iter()
                    .filter(|&&v| parent[v] == u)
                    .map(|&v| below[v].iter().copied().collect())
                    .collect();
                if parent[u] != usize::MAX {
                    parts.push(all.difference(&below[u]).copied().collect());
                }
                parts.retain(|p: &Vec<usize>| !p.is_empty());
                parts.sort();
                Some(parts)
            })
            .collect()
    }

    fn edge_keys(&self, name: &dyn Fn(usize) -> usize) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        for u in 0..self.adj.len() {
            for &v in &self.adj[u] {
                let (a, b) = (name(u), name(v));
                out.insert((a.min(b), a.max(b)));
            }
        }
        out
    }
}

/// Exhaustive search is used when at most this many hidden nodes are left
/// unmatched on the smaller side.
const BRUTE_FORCE_LIMIT: usize = 7;

fn match_trees(truth: &Grid, learned: &Grid) -> Result<Matching> {
    let observed = |g: &Grid| -> BTreeSet<String> {
        g.nodes().iter().filter(|n| n.observed).map(|n| n.id.clone()).collect()
    };
    let (ot, ol) = (observed(truth), observed(learned));
    if ot != ol {
        return Err(Error::Invalid(format!(
            "observed node sets differ: {} in truth, {} learned",
            ot.len(),
            ol.len()
        )));
    }
    let labels: BTreeMap<String, usize> = ot.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
    let t = Labelled::new(truth, &labels);
    let l = Labelled::new(learned, &labels);
    debug_assert_eq!(t.observed_labels(), l.observed_labels());
    let nl = labels.len();

    // Names: observed label k -> k, truth hidden j -> nl + j.
    let t_hidden: Vec<usize> = (0..t.adj.len()).filter(|&i| t.label[i].is_none()).collect();
    let l_hidden: Vec<usize> = (0..l.adj.len()).filter(|&i| l.label[i].is_none()).collect();
    let t_name: HashMap<usize, usize> = t_hidden.iter().enumerate().map(|(j, &i)| (i, nl + j)).collect();

    let t_sig = t.signatures();
    let l_sig = l.signatures();
    let mut by_sig: HashMap<&Signature, usize> = HashMap::new();
    for &i in &t_hidden {
        by_sig.insert(t_sig[i].as_ref().unwrap(), i);
    }
    // learned hidden index -> truth node index
    let mut assigned: HashMap<usize, usize> = HashMap::new();
    let mut used = BTreeSet::new();
    for &i in &l_hidden {
        if let Some(&j) = by_sig.get(l_sig[i].as_ref().unwrap()) {
            if used.insert(j) {
                assigned.insert(i, j);
            }
        }
    }
    let free_l: Vec<usize> = l_hidden.iter().copied().filter(|i| !assigned.contains_key(i)).collect();
    let free_t: Vec<usize> = t_hidden.iter().copied().filter(|j| !used.contains(j)).collect();

    let fresh_base = nl + t_hidden.len();
    let t_edges = t.edge_keys(&|u| t.label[u].unwrap_or_else(|| t_name[&u]));
    let diff_with = |extra: &HashMap<usize, usize>| -> usize {
        let name = |u: usize| -> usize {
            if let Some(k) = l.label[u] {
                return k;
            }
            if let Some(j) = assigned.get(&u).or_else(|| extra.get(&u)) {
                return t_name[j];
            }
            fresh_base + u
        };
        let l_edges = l.edge_keys(&name);
        t_edges.symmetric_difference(&l_edges).count()
    };

    let best = if free_l.is_empty() || free_t.is_empty() {
        HashMap::new()
    } else if free_l.len().min(free_t.len()) <= BRUTE_FORCE_LIMIT && free_l.len().max(free_t.len()) <= 10 {
        brute_force(&free_l, &free_t, &diff_with)
    } else {
        local_search(&free_l, &free_t, &diff_with)
    };
    let edge_difference = diff_with(&best);
    let mut map = BTreeMap::new();
    for u in 0..l.adj.len() {
        if l.label[u].is_some() {
            map.insert(l.ids[u].clone(), l.ids[u].clone());
        } else if let Some(j) = assigned.get(&u).or_else(|| best.get(&u)) {
            map.insert(l.ids[u].clone(), t.ids[*j].clone());
        }
    }
    Ok(Matching { edge_difference, map })
}

/// Tries every injective assignment between the smaller and larger side.
fn brute_force(free_l: &[usize], free_t: &[usize], cost: &dyn Fn(&HashMap<usize, usize>) -> usize) -> HashMap<usize, usize> {
    let mut best = (usize::MAX, HashMap::new());
    let mut current = HashMap::new();
    let mut taken = vec![false; free_t.len()];
    fn rec(
        k: usize,
        free_l: &[usize],
        free_t: &[usize],
        taken: &mut Vec<bool>,
        current: &mut HashMap<usize, usize>,
        best: &mut (usize, HashMap<usize, usize>),
        cost: &dyn Fn(&HashMap<usize, usize>) -> usize,
    ) {
        if k == free_l.len() {
            let c = cost(current);
            if c < best.0 {
                *best = (c, current.clone());
            }
            return;
        }
        // Leaving a learned node unmatched is allowed only when it cannot be
        // matched without starving another.
        let spare = free_l.len() - k > free_t.iter().enumerate().filter(|(j, _)| !taken[*j]).count();
        for j in 0..free_t.len() {
            if !taken[j] {
                taken[j] = true;
                current.insert(free_l[k], free_t[j]);
                rec(k + 1, free_l, free_t, taken, current, best, cost);
                current.remove(&free_l[k]);
                taken[j] = false;
            }
        }
        if spare || free_t.iter().enumerate().all(|(j, _)| taken[j]) {
            rec(k + 1, free_l, free_t, taken, current, best, cost);
        }
    }
    rec(0, free_l, free_t, &mut taken, &mut current, &mut best, cost);
    best.1
}

/// Greedy assignment followed by pairwise swaps until no swap helps.
fn local_search(free_l: &[usize], free_t: &[usize], cost: &dyn Fn(&HashMap<usize, usize>) -> usize) -> HashMap<usize, usize> {
    let mut current: HashMap<usize, usize> = HashMap::new();
    let mut left: Vec<usize> = free_t.to_vec();
    for &u in free_l {
        if left.is_empty() {
            break;
        }
        let mut best = (usize::MAX, 0);
        for (k, &j) in left.iter().enumerate() {
            current.insert(u, j);
            let c = cost(&current);
            if c < best.0 {
                best = (c, k);
            }
        }
        current.insert(u, left.remove(best.1));
    }
    let mut score = cost(&current);
    loop {
        let mut improved = false;
        let keys: Vec<usize> = free_l.iter().copied().filter(|u| current.contains_key(u)).collect();
        for a in 0..keys.len() {
            for b in a + 1..keys.len() {
                let (ua, ub) = (keys[a], keys[b]);
                let (ja, jb) = (current[&ua], current[&ub]);
                current.insert(ua, jb);
                current.insert(ub, ja);
                let c = cost(&current);
                if c < score {
                    score = c;
                    improved = true;
                } else {
                    current.insert(ua, ja);
                    current.insert(ub, jb);
                }
            }
            for k in 0..left.len() {
                let ua = keys[a];
                let old = current[&ua];
                current.insert(ua, left[k]);
                let c = cost(&current);
                if c < score {
                    score = c;
                    improved = true;
                    left[k] = old;
                } else {
                    current.insert(ua, old);
                }
            }
        }
        if !improved {
            return current;
        }
    }
}

fn unrooted(g: &Grid) -> Result<Grid> {
    if g.root().is_some() {
        g.reconstruction_target()
    } else {
        Ok(g.clone())
    }
}

/// Edge difference between two labelled trees. Rooted inputs are first
/// reduced to the tree that leaf data can identify.
pub fn edge_difference(a: &Grid, b: &Grid) -> Result<usize> {
    Ok(match_trees(&unrooted(a)?, &unrooted(b)?)?.edge_difference)
}

/// Matches hidden nodes of `learned` to those of `truth` and counts the
/// edges in one tree but not the other.
pub fn match_hidden_and_diff(truth: &Grid, learned: &LearnedGrid) -> Result<Matching> {
    match_trees(&unrooted(truth)?, &learned.grid)
}

/// Mean relative error of `r` and `x` over the true lines. Defined only when
/// the topology was recovered exactly.
pub fn impedance_error(truth: &Grid, learned: &LearnedGrid) -> Result<f64> {
    let target = unrooted(truth)?;
    let m = match_trees(&target, &learned.grid)?;
    if m.edge_difference != 0 {
        return Err(Error::UndefinedMetric(format!(
            "impedance error needs exact recovery, edge difference is {}",
            m.edge_difference
        )));
    }
    impedance_error_matched(&target, &learned.grid, &m.map)
}

fn impedance_error_matched(truth: &Grid, learned: &Grid, map: &BTreeMap<String, String>) -> Result<f64> {
    let key = |u: &str, v: &str| if u < v { (u.to_string(), v.to_string()) } else { (v.to_string(), u.to_string()) };
    let truth_edges: HashMap<(String, String), (f64, f64)> =
        truth.edges().iter().map(|e| (key(&e.u, &e.v), (e.r, e.x))).collect();
    if truth_edges.is_empty() {
        return Err(Error::UndefinedMetric("truth has no lines".into()));
    }
    let mut total = 0.0;
    for e in learned.edges() {
        let (Some(u), Some(v)) = (map.get(&e.u), map.get(&e.v)) else {
            return Err(Error::UndefinedMetric(format!("learned line {}-{} is unmatched", e.u, e.v)));
        };
        let (r, x) = truth_edges
            .get(&key(u, v))
            .ok_or_else(|| Error::UndefinedMetric(format!("learned line {}-{} has no true counterpart", e.u, e.v)))?;
        total += (r - e.r).abs() / r.abs() + (x - e.x).abs() / x.abs();
    }
    Ok(total / (2.0 * truth_edges.len() as f64))
}

/// Full score of a learned grid.
pub fn evaluate(truth: &Grid, learned: &LearnedGrid) -> Result<EvalReport> {
    let target = unrooted(truth)?;
    let m = match_trees(&target, &learned.grid)?;
    let exact = m.edge_difference == 0;
    let err = if exact {
        Some(impedance_error_matched(&target, &learned.grid, &m.map)?)
    } else {
        None
    };
    Ok(EvalReport {
        exact_recovery: exact,
        edge_difference: m.edge_difference,
        avg_impedance_error: err,
        runtime: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Edge, Node};
    use approx::assert_relative_eq;

    fn tree(hidden: &[&str], leaves: &[&str], edges: &[(&str, &str, f64)]) -> Grid {
        let mut nodes: Vec<Node> = hidden.iter().map(|h| Node::new(*h, false, false)).collect();
        nodes.extend(leaves.iter().map(|l| Node::new(*l, false, true)));
        Grid::new(nodes, edges.iter().map(|&(u, v, r)| Edge::new(u, v, r, r)).collect()).unwrap()
    }

    fn learned(g: Grid) -> LearnedGrid {
        LearnedGrid {
            grid: g,
            provenance: serde_json::from_str(
                r#"{"samples":null,"eps0":0.1,"eps_growth":1.5,"tau":null,"max_eps":0.1,"rounds":0,
                "escalations":0,"floored_edges":0,"lambda":0.1,"min_injection_det":1.0,"pairing":"symmetric"}"#,
            )
            .unwrap(),
        }
    }

    fn five_edges() -> Grid {
        // Two hidden nodes, four leaves: 5 lines.
        tree(
            &["x", "y"],
            &["a", "b", "c", "d"],
            &[("x", "a", 1.0), ("x", "b", 1.0), ("x", "y", 1.0), ("y", "c", 1.0), ("y", "d", 1.0)],
        )
    }

    #[test]
    fn identical_and_relabelled() {
        let t = five_edges();
        let l = tree(
            &["h#1", "h#2"],
            &["a", "b", "c", "d"],
            &[("h#2", "a", 1.0), ("h#2", "b", 1.0), ("h#2", "h#1", 1.0), ("h#1", "c", 1.0), ("h#1", "d", 1.0)],
        );
        let m = match_hidden_and_diff(&t, &learned(l)).unwrap();
        assert_eq!(m.edge_difference, 0);
        assert_eq!(m.map["h#2"], "x");
    }

    #[test]
    fn star_against_chain() {
        let star = tree(&["h"], &["a", "b", "c"], &[("h", "a", 1.0), ("h", "b", 1.0), ("h", "c", 1.0)]);
        let chain = Grid::new(
            vec![Node::new("a", false, true), Node::new("b", false, true), Node::new("c", false, true)],
            vec![Edge::new("a", "b", 1.0, 1.0), Edge::new("b", "c", 1.0, 1.0)],
        )
        .unwrap();
        // Observed "b" is interior in the chain; the metric still compares edge sets.
        assert_eq!(edge_difference(&star, &chain).unwrap(), 5);
        // Chain a-h-b-c: only the line to c moves.
        let chain = tree(&["h"], &["a", "b", "c"], &[("h", "a", 1.0), ("h", "b", 1.0), ("b", "c", 1.0)]);
        assert_eq!(edge_difference(&star, &chain).unwrap(), 2);
    }

    #[test]
    fn impedance_hand_cases() {
        let t = five_edges();
        let mut l = t.clone();
        assert_eq!(impedance_error(&t, &learned(l.clone())).unwrap(), 0.0);

        let mut edges = l.edges().to_vec();
        edges[2].r *= 1.1;
        l = Grid::new(l.nodes().to_vec(), edges).unwrap();
        assert_relative_eq!(impedance_error(&t, &learned(l)).unwrap(), 0.01, epsilon = 1e-12);

        let edges: Vec<Edge> = t
            .edges()
            .iter()
            .map(|e| Edge::new(e.u.clone(), e.v.clone(), e.r * 1.05, e.x * 0.95))
            .collect();
        let l = Grid::new(t.nodes().to_vec(), edges).unwrap();
        assert_relative_eq!(impedance_error(&t, &learned(l)).unwrap(), 0.05, epsilon = 1e-12);
    }

    #[test]
    fn impedance_needs_recovery() {
        let t = five_edges();
        let l = tree(
            &["x", "y"],
            &["a", "b", "c", "d"],
            &[("x", "a", 1.0), ("x", "c", 1.0), ("x", "y", 1.0), ("y", "b", 1.0), ("y", "d", 1.0)],
        );
        assert!(matches!(impedance_error(&t, &learned(l)), Err(Error::UndefinedMetric(_))));
    }
}
