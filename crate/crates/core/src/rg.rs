//! Recursive grouping: latent tree reconstruction from an additive distance.
//!
//! Each round looks at the active node set, finds leaf/parent pairs and
//! sibling groups from the statistic `Φ(a,b,c) = d(a,c) − d(b,c)`, links them,
//! synthesises a hidden parent for every sibling group that has no active
//! parent, and replaces each group by its parent. Rounds repeat until at most
//! two active nodes remain.
//!
//! With exact distances a leaf `a` with parent `b` has `Φ(a,b,c) = d(a,b)` for
//! every witness `c`, and siblings have a `Φ(a,b,·)` that does not depend on
//! `c`. With estimated distances both tests get a tolerance `ε`, witnesses
//! are restricted to a neighbourhood of radius `τ`, and `ε` grows
//! geometrically whenever a round would otherwise make no progress.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Neighbourhood radius for witness selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum Tau {
    /// Fixed radius in ohms.
    Fixed(f64),
    /// A multiple of the median off-diagonal input distance.
    MedianMultiple(f64),
    /// Every other active node is a witness.
    Infinite,
}

impl Default for Tau {
    fn default() -> Self {
        Tau::MedianMultiple(2.0)
    }
}

impl Tau {
    fn resolve(&self, d: &DMatrix<f64>) -> f64 {
        match *self {
            Tau::Fixed(t) => t,
            Tau::Infinite => f64::INFINITY,
            Tau::MedianMultiple(k) => {
                let n = d.nrows();
                let mut off: Vec<f64> = (0..n)
                    .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                    .map(|(i, j)| d[(i, j)])
                    .collect();
                if off.is_empty() {
                    return f64::INFINITY;
                }
                off.sort_by(f64::total_cmp);
                let m = off.len();
                let median = if m % 2 == 1 {
                    off[m / 2]
                } else {
                    0.5 * (off[m / 2 - 1] + off[m / 2])
                };
                k * median
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RgConfig {
    pub eps0: f64,
    pub eps_growth: f64,
    pub tau: Tau,
    /// Defaults to four times the number of observed nodes.
    pub max_rounds: Option<usize>,
    /// Grow `ε` when a round stalls. With `false` a stalled round is an error.
    #[serde(default = "dynamic_default")]
    pub dynamic: bool,
}

fn dynamic_default() -> bool {
    true
}

impl Default for RgConfig {
    fn default() -> Self {
        RgConfig {
            eps0: 0.15,
            eps_growth: 1.5,
            tau: Tau::default(),
            max_rounds: None,
            dynamic: true,
        }
    }
}

impl RgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps0 > 0.0 && self.eps0.is_finite()) {
            return Err(Error::Invalid(format!("eps0 must be positive, got {}", self.eps0)));
        }
        if !(self.eps_growth > 1.0 && self.eps_growth.is_finite()) {
            return Err(Error::Invalid(format!("eps growth must exceed 1, got {}", self.eps_growth)));
        }
        if let Tau::Fixed(t) | Tau::MedianMultiple(t) = self.tau {
            if !(t > 0.0) {
                return Err(Error::Invalid(format!("tau must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// Relation of an unordered pair of active nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    /// `child` is a leaf hanging directly from `parent`.
    Parent { parent: usize, child: usize },
    Siblings,
    Unrelated,
}

/// A classified pair. `score` is the parent residual or the sibling `Φ`
/// spread; smaller is more confident.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRelation {
    pub a: usize,
    pub b: usize,
    pub relation: Relation,
    pub score: f64,
}

/// One block of a round's partition. Singletons have one child and no parent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

impl Block {
    pub fn size(&self) -> usize {
        self.children.len() + usize::from(self.parent.is_some())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub label: String,
    pub observed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeEdge {
    pub a: usize,
    pub b: usize,
    pub length: f64,
}

/// Output of recursive grouping: an unrooted tree over the input nodes plus
/// synthesised hidden nodes labelled `h#1`, `h#2`, ...
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnedTree {
    pub nodes: Vec<TreeNode>,
    pub edges: Vec<TreeEdge>,
    /// Grouping rounds, not counting the final join of two nodes.
    pub rounds: usize,
    /// Times `ε` was enlarged because a round found no group.
    pub escalations: usize,
    /// Largest `ε` in effect when a round succeeded.
    pub max_eps: f64,
    pub tau: f64,
    /// Edge lengths that came out negative and were set to zero.
    pub floored: usize,
}

impl LearnedTree {
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (k, e) in self.edges.iter().enumerate() {
            adj[e.a].push((e.b, k));
            adj[e.b].push((e.a, k));
        }
        adj
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.label == label)
    }

    /// Edge indices on the path between nodes `a` and `b`.
    pub fn path_edges(&self, a: usize, b: usize) -> Vec<usize> {
        path_in(&self.adjacency(), a, b)
    }

    /// Sum of edge lengths along the path.
    pub fn path_length(&self, a: usize, b: usize) -> f64 {
        self.path_edges(a, b).iter().map(|&k| self.edges[k].length).sum()
    }
}

/// Edge indices on the unique path between `a` and `b` in a forest given by
/// adjacency lists, empty when `a == b` or the nodes are disconnected.
pub(crate) fn path_in(adj: &[Vec<(usize, usize)>], a: usize, b: usize) -> Vec<usize> {
    let n = adj.len();
    let mut via: Vec<Option<(usize, usize)>> = vec![None; n];
    let mut seen = vec![false; n];
    seen[a] = true;
    let mut stack = vec![a];
    while let Some(u) = stack.pop() {
        if u == b {
            break;
        }
        for &(v, k) in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                via[v] = Some((u, k));
                stack.push(v);
            }
        }
    }
    let mut out = Vec::new();
    let mut cur = b;
    while let Some((p, k)) = via[cur] {
        out.push(k);
        cur = p;
    }
    out
}

/// `Φ(a,b,c) = d(a,c) − d(b,c)`.
pub fn phi(d: &DMatrix<f64>, a: usize, b: usize, c: usize) -> Result<f64> {
    if a == b || b == c || a == c {
        return Err(Error::Invalid(format!("phi needs distinct nodes, got ({a}, {b}, {c})")));
    }
    Ok(d[(a, c)] - d[(b, c)])
}

#[inline]
fn phi_unchecked(d: &[Vec<f64>], a: usize, b: usize, c: usize) -> f64 {
    d[a][c] - d[b][c]
}

/// Witnesses close to both `a` and `b`: `{c ∈ active \ {a,b} : d(a,c) < τ, d(b,c) < τ}`.
pub fn neighborhood(d: &DMatrix<f64>, a: usize, b: usize, active: &[usize], tau: f64) -> Vec<usize> {
    active
        .iter()
        .copied()
        .filter(|&c| c != a && c != b && d[(a, c)] < tau && d[(b, c)] < tau)
        .collect()
}

fn neighborhood_rows(d: &[Vec<f64>], a: usize, b: usize, active: &[usize], tau: f64) -> Vec<usize> {
    active
        .iter()
        .copied()
        .filter(|&c| c != a && c != b && d[a][c] < tau && d[b][c] < tau)
        .collect()
}

/// Relation of `(a, b)` when the distances are exact, up to a round-off
/// tolerance `tol`. `active` lists all current nodes; witnesses are the
/// others.
pub fn classify_pair_exact(d: &DMatrix<f64>, a: usize, b: usize, active: &[usize], tol: f64) -> PairRelation {
    let witnesses: Vec<usize> = active.iter().copied().filter(|&c| c != a && c != b).collect();
    let rows = to_rows(d);
    classify_exact_rows(&rows, a, b, &witnesses, tol)
}

fn classify_exact_rows(d: &[Vec<f64>], a: usize, b: usize, witnesses: &[usize], tol: f64) -> PairRelation {
    let dab = d[a][b];
    let phis: Vec<f64> = witnesses.iter().map(|&c| phi_unchecked(d, a, b, c)).collect();
    let unrelated = PairRelation {
        a,
        b,
        relation: Relation::Unrelated,
        score: f64::INFINITY,
    };
    if phis.is_empty() {
        return unrelated;
    }
    let (lo, hi) = min_max(&phis);
    if phis.iter().all(|&p| (p - dab).abs() <= tol) {
        return PairRelation {
            a,
            b,
            relation: Relation::Parent { parent: b, child: a },
            score: hi - lo,
        };
    }
    if phis.iter().all(|&p| (p + dab).abs() <= tol) {
        return PairRelation {
            a,
            b,
            relation: Relation::Parent { parent: a, child: b },
            score: hi - lo,
        };
    }
    if hi - lo <= tol && lo.abs().max(hi.abs()) < dab - tol {
        return PairRelation {
            a,
            b,
            relation: Relation::Siblings,
            score: hi - lo,
        };
    }
    unrelated
}

/// Relation of `(a, b)` from estimated distances with tolerance `eps`, using
/// the witnesses in `k_ab`. Parent tests take precedence over the sibling
/// test; when both parent directions pass, the one with the smaller residual
/// against the mean `Φ` wins.
pub fn classify_pair_sampled(d: &DMatrix<f64>, a: usize, b: usize, k_ab: &[usize], eps: f64) -> Result<PairRelation> {
    classify_sampled_rows(&to_rows(d), a, b, k_ab, eps)
}

fn classify_sampled_rows(d: &[Vec<f64>], a: usize, b: usize, k_ab: &[usize], eps: f64) -> Result<PairRelation> {
    if k_ab.is_empty() {
        return Err(Error::Invalid(format!("no witness for pair ({a}, {b})")));
    }
    let phis: Vec<f64> = k_ab.iter().map(|&c| phi_unchecked(d, a, b, c)).collect();
    let mean = phis.iter().sum::<f64>() / phis.len() as f64;
    // b over a uses row a; a over b uses row b (Φ(b,a,c) = -Φ(a,b,c)).
    let (dab, dba) = (d[a][b], d[b][a]);
    let b_over_a = phis.iter().all(|&p| (dab - p).abs() <= eps);
    let a_over_b = phis.iter().all(|&p| (dba + p).abs() <= eps);
    let res_b_over_a = (dab - mean).abs();
    let res_a_over_b = (dba + mean).abs();
    let relation = match (b_over_a, a_over_b) {
        (true, true) if res_a_over_b < res_b_over_a => Some((Relation::Parent { parent: a, child: b }, res_a_over_b)),
        (true, _) => Some((Relation::Parent { parent: b, child: a }, res_b_over_a)),
        (false, true) => Some((Relation::Parent { parent: a, child: b }, res_a_over_b)),
        (false, false) => None,
    };
    if let Some((relation, score)) = relation {
        return Ok(PairRelation { a, b, relation, score });
    }
    let (lo, hi) = min_max(&phis);
    let spread = hi - lo;
    if spread <= eps {
        return Ok(PairRelation {
            a,
            b,
            relation: Relation::Siblings,
            score: spread,
        });
    }
    Ok(PairRelation {
        a,
        b,
        relation: Relation::Unrelated,
        score: spread,
    })
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn to_rows(d: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..d.nrows()).map(|i| d.row(i).iter().copied().collect()).collect()
}

/// Groups `active` into disjoint blocks from pairwise relations.
///
/// Parent links are accepted greedily by ascending residual, as long as the
/// child is not already placed and the parent is not itself a child. The
/// remaining nodes are grouped into sibling cliques grown greedily from the
/// pair with the smallest `Φ` spread. Everything else is a singleton. The
/// result is ordered by the position of each block's first member in
/// `active`.
pub fn coarsest_partition(active: &[usize], relations: &[PairRelation]) -> Vec<Block> {
    let pos: HashMap<usize, usize> = active.iter().enumerate().map(|(i, &a)| (a, i)).collect();
    let k = active.len();
    let mut sib = vec![vec![f64::NAN; k]; k];
    let mut parents: Vec<(f64, usize, usize)> = Vec::new();
    for r in relations {
        let (Some(&i), Some(&j)) = (pos.get(&r.a), pos.get(&r.b)) else {
            continue;
        };
        match r.relation {
            Relation::Siblings => {
                sib[i][j] = r.score;
                sib[j][i] = r.score;
            }
            Relation::Parent { parent, child } => parents.push((r.score, pos[&parent], pos[&child])),
            Relation::Unrelated => {}
        }
    }
    parents.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    // 0 = free, 1 = child, 2 = parent, 3 = sibling
    let mut state = vec![0u8; k];
    let mut children_of: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &(_, p, c) in &parents {
        if state[c] == 0 && state[p] != 1 && p != c {
            state[c] = 1;
            state[p] = 2;
            children_of[p].push(c);
        }
    }

    let mut pairs: Vec<(f64, usize, usize)> = (0..k)
        .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
        .filter(|&(i, j)| !sib[i][j].is_nan())
        .map(|(i, j)| (sib[i][j], i, j))
        .collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &(_, i, j) in &pairs {
        if state[i] != 0 || state[j] != 0 {
            continue;
        }
        let mut group = vec![i, j];
        loop {
            let best = (0..k)
                .filter(|&c| state[c] == 0 && !group.contains(&c))
                .filter_map(|c| {
                    let worst = group.iter().map(|&g| sib[c][g]).fold(0.0f64, |acc, s| {
                        if acc.is_nan() || s.is_nan() {
                            f64::NAN
                        } else {
                            acc.max(s)
                        }
                    });
                    (!worst.is_nan()).then_some((worst, c))
                })
                .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            match best {
                Some((_, c)) => group.push(c),
                None => break,
            }
        }
        for &g in &group {
            state[g] = 3;
        }
        group.sort_unstable();
        groups.push(group);
    }

    let mut blocks: Vec<(usize, Block)> = Vec::new();
    for i in 0..k {
        match state[i] {
            0 => blocks.push((
                i,
                Block {
                    parent: None,
                    children: vec![active[i]],
                },
            )),
            2 => {
                let mut ch = children_of[i].clone();
                ch.sort_unstable();
                let first = ch.iter().copied().chain([i]).min().unwrap();
                blocks.push((
                    first,
                    Block {
                        parent: Some(active[i]),
                        children: ch.into_iter().map(|c| active[c]).collect(),
                    },
                ));
            }
            _ => {}
        }
    }
    for g in groups {
        blocks.push((
            g[0],
            Block {
                parent: None,
                children: g.into_iter().map(|c| active[c]).collect(),
            },
        ));
    }
    blocks.sort_by_key(|(first, _)| *first);
    blocks.into_iter().map(|(_, b)| b).collect()
}

/// Checks that `d` is symmetric with a zero diagonal and satisfies the
/// four-point condition within `tol`.
pub fn check_additive(d: &DMatrix<f64>, tol: f64) -> Result<()> {
    let n = d.nrows();
    if d.ncols() != n {
        return Err(Error::NotAdditive("distance matrix is not square".into()));
    }
    for i in 0..n {
        if d[(i, i)].abs() > tol {
            return Err(Error::NotAdditive(format!("d({i},{i}) = {} is not zero", d[(i, i)])));
        }
        for j in 0..n {
            if !d[(i, j)].is_finite() || (d[(i, j)] - d[(j, i)]).abs() > tol {
                return Err(Error::NotAdditive(format!("d({i},{j}) is not finite and symmetric")));
            }
            if i != j && d[(i, j)] < -tol {
                return Err(Error::NotAdditive(format!("d({i},{j}) = {} is negative", d[(i, j)])));
            }
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                for l in k + 1..n {
                    let mut s = [
                        d[(i, j)] + d[(k, l)],
                        d[(i, k)] + d[(j, l)],
                        d[(i, l)] + d[(j, k)],
                    ];
                    s.sort_by(f64::total_cmp);
                    if s[2] - s[1] > tol {
                        return Err(Error::NotAdditive(format!(
                            "four-point condition fails on ({i},{j},{k},{l}) by {:.3e}",
                            s[2] - s[1]
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

fn pair_key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

enum Rule {
    Exact { tol: f64 },
    Sampled { eps0: f64, growth: f64, tau: f64, dynamic: bool },
}

/// Working state of a grouping run.
struct Engine {
    labels: Vec<String>,
    observed: Vec<bool>,
    d: Vec<Vec<f64>>,
    edges: Vec<TreeEdge>,
    active: Vec<usize>,
    hidden: usize,
    floored: usize,
}

impl Engine {
    fn new(labels: &[String], d: &DMatrix<f64>) -> Self {
        let n = labels.len();
        let cap = 2 * n + 2;
        let mut rows = vec![vec![f64::NAN; cap]; cap];
        for i in 0..n {
            for j in 0..n {
                rows[i][j] = d[(i, j)];
            }
        }
        Engine {
            labels: labels.to_vec(),
            observed: vec![true; n],
            d: rows,
            edges: Vec::new(),
            active: (0..n).collect(),
            hidden: 0,
            floored: 0,
        }
    }

    fn floor(&mut self, x: f64) -> f64 {
        if x < 0.0 {
            self.floored += 1;
            log::warn!("negative edge length {x:.4e} set to zero");
            0.0
        } else {
            x
        }
    }

    fn add_node(&mut self) -> usize {
        self.hidden += 1;
        self.labels.push(format!("h#{}", self.hidden));
        self.observed.push(false);
        let id = self.labels.len() - 1;
        if id >= self.d.len() {
            let cap = 2 * self.d.len();
            for row in &mut self.d {
                row.resize(cap, f64::NAN);
            }
            self.d.resize(cap, vec![f64::NAN; cap]);
        }
        self.d[id][id] = 0.0;
        id
    }

    fn witnesses(&self, a: usize, b: usize, rule: &Rule) -> Vec<usize> {
        match *rule {
            Rule::Exact { .. } => self.active.iter().copied().filter(|&c| c != a && c != b).collect(),
            Rule::Sampled { tau, .. } => {
                let mut t = tau;
                for _ in 0..256 {
                    let k = neighborhood_rows(&self.d, a, b, &self.active, t);
                    if !k.is_empty() || !t.is_finite() {
                        return k;
                    }
                    t *= 1.5;
                }
                Vec::new()
            }
        }
    }

    fn classify_all(&self, rule: &Rule, eps: f64, witnesses: &HashMap<(usize, usize), Vec<usize>>) -> Vec<PairRelation> {
        let mut out = Vec::new();
        for (i, &a) in self.active.iter().enumerate() {
            for &b in &self.active[i + 1..] {
                let k = &witnesses[&pair_key(a, b)];
                let rel = match rule {
                    Rule::Exact { tol } => classify_exact_rows(&self.d, a, b, k, *tol),
                    Rule::Sampled { .. } => match classify_sampled_rows(&self.d, a, b, k, eps) {
                        Ok(r) => r,
                        Err(_) => PairRelation {
                            a,
                            b,
                            relation: Relation::Unrelated,
                            score: f64::INFINITY,
                        },
                    },
                };
                out.push(rel);
            }
        }
        out
    }

    fn apply(&mut self, blocks: &[Block], witnesses: &HashMap<(usize, usize), Vec<usize>>) {
        let mut next = Vec::with_capacity(blocks.len());
        let mut new_hidden: Vec<(usize, Vec<usize>)> = Vec::new();
        for block in blocks {
            match (block.parent, block.children.len()) {
                (None, 1) => next.push(block.children[0]),
                (Some(p), _) => {
                    for &c in &block.children {
                        let len = 0.5 * (self.d[c][p] + self.d[p][c]);
                        let len = self.floor(len);
                        self.edges.push(TreeEdge { a: p, b: c, length: len });
                    }
                    next.push(p);
                }
                (None, _) => {
                    let h = self.add_node();
                    let ch = &block.children;
                    let m = ch.len() as f64;
                    for &a in ch {
                        let mut acc = 0.0;
                        for &b in ch.iter().filter(|&&b| b != a) {
                            let k = &witnesses[&pair_key(a, b)];
                            let mean_phi = if k.is_empty() {
                                0.0
                            } else {
                                k.iter().map(|&c| phi_unchecked(&self.d, a, b, c)).sum::<f64>() / k.len() as f64
                            };
                            acc += self.d[a][b] + mean_phi;
                        }
                        let dah = acc / (2.0 * (m - 1.0));
                        let dah = self.floor(dah);
                        self.d[a][h] = dah;
                        self.d[h][a] = dah;
                        self.edges.push(TreeEdge { a: h, b: a, length: dah });
                    }
                    new_hidden.push((h, ch.clone()));
                    next.push(h);
                }
            }
        }

        // Hidden to surviving old nodes.
        let old: Vec<usize> = next.iter().copied().filter(|x| !new_hidden.iter().any(|(h, _)| h == x)).collect();
        for (h, ch) in &new_hidden {
            let m = ch.len() as f64;
            for &x in &old {
                let out: f64 = ch.iter().map(|&a| self.d[a][x] - self.d[a][*h]).sum::<f64>() / m;
                let inn: f64 = ch.iter().map(|&a| self.d[x][a] - self.d[a][*h]).sum::<f64>() / m;
                self.d[*h][x] = out;
                self.d[x][*h] = inn;
            }
        }
        // Hidden to hidden, through the children of either side.
        for i in 0..new_hidden.len() {
            for j in i + 1..new_hidden.len() {
                let (h1, c1) = &new_hidden[i];
                let (h2, c2) = &new_hidden[j];
                let v = 0.5 * (self.hidden_pair(*h1, c1, *h2, c2) + self.hidden_pair(*h2, c2, *h1, c1));
                self.d[*h1][*h2] = v;
                self.d[*h2][*h1] = v;
            }
        }
        self.active = next;
    }

    /// `d(h1, h2)` as the mean over child pairs of `d(a,b) − d(a,h1) − d(b,h2)`.
    fn hidden_pair(&self, h1: usize, c1: &[usize], h2: usize, c2: &[usize]) -> f64 {
        let mut acc = 0.0;
        for &a in c1 {
            for &b in c2 {
                acc += self.d[a][b] - self.d[a][h1] - self.d[b][h2];
            }
        }
        acc / (c1.len() * c2.len()) as f64
    }

    fn run(mut self, rule: Rule, max_rounds: usize) -> Result<LearnedTree> {
        let mut rounds = 0;
        let mut escalations = 0;
        let (eps0, growth, tau) = match rule {
            Rule::Exact { tol } => (tol, 1.0, f64::INFINITY),
            Rule::Sampled { eps0, growth, tau, .. } => (eps0, growth, tau),
        };
        let mut max_eps = if matches!(rule, Rule::Exact { .. }) { 0.0 } else { eps0 };
        while self.active.len() > 2 {
            if rounds >= max_rounds {
                return Err(Error::Grouping {
                    rounds,
                    remaining: self.active.len(),
                    reason: format!("round limit {max_rounds} reached"),
                });
            }
            let mut witnesses = HashMap::new();
            for (i, &a) in self.active.iter().enumerate() {
                for &b in &self.active[i + 1..] {
                    witnesses.insert(pair_key(a, b), self.witnesses(a, b, &rule));
                }
            }
            let mut eps = eps0;
            let mut tries = 0;
            let blocks = loop {
                let relations = self.classify_all(&rule, eps, &witnesses);
                let blocks = coarsest_partition(&self.active, &relations);
                if blocks.iter().any(|b| b.size() >= 2) {
                    break blocks;
                }
                match rule {
                    Rule::Exact { .. } => {
                        return Err(Error::NotAdditive(format!(
                            "no parent or sibling relation among {} active nodes",
                            self.active.len()
                        )))
                    }
                    Rule::Sampled { dynamic: false, .. } => {
                        return Err(Error::Grouping {
                            rounds,
                            remaining: self.active.len(),
                            reason: format!("no group forms at fixed tolerance {eps}"),
                        })
                    }
                    Rule::Sampled { .. } => {
                        tries += 1;
                        escalations += 1;
                        eps *= growth;
                        if tries > 200 || !eps.is_finite() {
                            return Err(Error::Grouping {
                                rounds,
                                remaining: self.active.len(),
                                reason: "tolerance escalation did not produce any group".into(),
                            });
                        }
                    }
                }
            };
            if !matches!(rule, Rule::Exact { .. }) {
                max_eps = f64::max(max_eps, eps);
            }
            self.apply(&blocks, &witnesses);
            rounds += 1;
        }
        if let [a, b] = self.active[..] {
            let len = 0.5 * (self.d[a][b] + self.d[b][a]);
            let len = self.floor(len);
            self.edges.push(TreeEdge { a, b, length: len });
        }
        let nodes = self
            .labels
            .into_iter()
            .zip(self.observed)
            .map(|(label, observed)| TreeNode { label, observed })
            .collect();
        Ok(LearnedTree {
            nodes,
            edges: self.edges,
            rounds,
            escalations,
            max_eps,
            tau,
            floored: self.floored,
        })
    }
}

fn check_input(labels: &[String], d: &DMatrix<f64>) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Invalid("no observed nodes".into()));
    }
    if d.nrows() != labels.len() || d.ncols() != labels.len() {
        return Err(Error::Invalid(format!(
            "distance matrix is {}x{} for {} labels",
            d.nrows(),
            d.ncols(),
            labels.len()
        )));
    }
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::Invalid("distance matrix has non-finite entries".into()));
    }
    Ok(())
}

/// Absolute round-off tolerance used for exact inputs.
pub fn exact_tolerance(d: &DMatrix<f64>) -> f64 {
    1e-9 * d.iter().fold(1.0f64, |m, x| m.max(x.abs()))
}

/// Recursive grouping on an exact additive tree metric.
pub fn rg_exact(labels: &[String], d: &DMatrix<f64>) -> Result<LearnedTree> {
    check_input(labels, d)?;
    let tol = exact_tolerance(d);
    check_additive(d, tol)?;
    let max_rounds = 4 * labels.len().max(1);
    Engine::new(labels, d).run(Rule::Exact { tol }, max_rounds)
}

/// Recursive grouping on estimated distances with tolerance escalation.
pub fn rg_sampled(labels: &[String], d: &DMatrix<f64>, cfg: &RgConfig) -> Result<LearnedTree> {
    check_input(labels, d)?;
    cfg.validate()?;
    for i in 0..d.nrows() {
        if d[(i, i)] != 0.0 {
            return Err(Error::Invalid(format!("d({i},{i}) must be zero")));
        }
    }
    let tau = cfg.tau.resolve(d);
    let max_rounds = cfg.max_rounds.unwrap_or(4 * labels.len().max(1));
    Engine::new(labels, d).run(
        Rule::Sampled {
            eps0: cfg.eps0,
            growth: cfg.eps_growth,
            tau,
            dynamic: cfg.dynamic,
        },
        max_rounds,
    )
}
