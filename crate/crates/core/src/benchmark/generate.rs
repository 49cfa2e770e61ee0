//! Random radial grids that satisfy the identifiability assumptions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Edge, Grid, Node};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Total bus count, root included.
    pub nodes: usize,
    pub max_degree: usize,
    /// Line resistance and reactance are drawn independently from `U(lo, hi)`.
    pub lo: f64,
    pub hi: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            nodes: 100,
            max_degree: 5,
            lo: 0.1,
            hi: 0.2,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo > 0.0 && self.lo < self.hi && self.hi.is_finite()) {
            return Err(Error::Invalid(format!(
                "impedance bounds must satisfy 0 < lo < hi, got ({}, {})",
                self.lo, self.hi
            )));
        }
        if self.max_degree < 4 {
            return Err(Error::Invalid(format!(
                "max degree {} is infeasible: the bus below a degree-one root needs three further lines",
                self.max_degree
            )));
        }
        if self.nodes < 5 || (self.nodes == 6 && self.max_degree == 4) {
            return Err(Error::Invalid(format!(
                "no valid grid has {} buses with max degree {}",
                self.nodes, self.max_degree
            )));
        }
        Ok(())
    }
}

/// Growth state: a rooted tree where `children[u]` lists the children of `u`.
struct Growth {
    parent: Vec<usize>,
    children: Vec<Vec<usize>>,
}

impl Growth {
    fn new() -> Self {
        // Root 0, feeder head 1 with three leaves.
        let mut g = Growth {
            parent: vec![usize::MAX],
            children: vec![Vec::new()],
        };
        g.attach(0);
        for _ in 0..3 {
            g.attach(1);
        }
        g
    }

    fn attach(&mut self, u: usize) {
        let id = self.parent.len();
        self.parent.push(u);
        self.children.push(Vec::new());
        self.children[u].push(id);
    }

    fn degree(&self, u: usize) -> usize {
        self.children[u].len() + usize::from(u != 0)
    }

    /// Buses that merge away: hidden, below the feeder head, one child.
    fn merges(&self, u: usize) -> bool {
        u > 1 && self.children[u].len() == 1
    }

    /// Bus count once merging buses are removed.
    fn reduced_len(&self) -> usize {
        (0..self.parent.len()).filter(|&u| !self.merges(u)).count()
    }
}

fn grow<R: Rng>(spec: &GridSpec, rng: &mut R) -> Option<Growth> {
    let mut g = Growth::new();
    loop {
        let len = g.reduced_len();
        if len == spec.nodes {
            return Some(g);
        }
        // One bus short: only targets that add exactly one bus qualify.
        let last = len + 1 == spec.nodes;
        let targets: Vec<usize> = (1..g.parent.len())
            .filter(|&u| g.degree(u) < spec.max_degree)
            .filter(|&u| !last || g.children[u].len() >= 2 || u == 1)
            .collect();
        if targets.is_empty() {
            return None;
        }
        g.attach(targets[rng.random_range(0..targets.len())]);
    }
}

/// A random grid with `spec.nodes` buses.
///
/// The root `"0"` has a single line to the feeder head `"1"`, which starts
/// with three leaves. Each step attaches a new leaf to a bus drawn uniformly
/// from the non-root buses with spare degree. Hidden buses left with a single
/// child are merged into the line through them, and growth stops when the
/// merged tree has `spec.nodes` buses. Line `r` and `x` are drawn on the
/// final tree. Leaves are observed.
pub fn random_radial_grid(spec: &GridSpec, seed: u64) -> Result<Grid> {
    spec.validate()?;
    let mut rng = seed::rng(seed);
    let g = (0..1000)
        .find_map(|_| grow(spec, &mut rng))
        .ok_or_else(|| Error::Invalid("degree budget exhausted".into()))?;

    let kept: Vec<usize> = (0..g.parent.len()).filter(|&u| !g.merges(u)).collect();
    let mut name = vec![usize::MAX; g.parent.len()];
    for (k, &u) in kept.iter().enumerate() {
        name[u] = k;
    }
    let nodes = kept
        .iter()
        .map(|&u| Node::new(name[u].to_string(), u == 0, u != 0 && g.children[u].is_empty()))
        .collect();
    let mut edges = Vec::with_capacity(kept.len() - 1);
    for &u in &kept[1..] {
        let mut p = g.parent[u];
        while g.merges(p) {
            p = g.parent[p];
        }
        let r = rng.random_range(spec.lo..spec.hi);
        let x = rng.random_range(spec.lo..spec.hi);
        edges.push(Edge::new(name[p].to_string(), name[u].to_string(), r, x));
    }
    let grid = Grid::new(nodes, edges)?;
    grid.ensure_valid()?;
    Ok(grid)
}
