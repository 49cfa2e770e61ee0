//! End-to-end learning: moments to distances, distances to topology, then
//! per-line resistance and reactance.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Edge, Grid, Node};
use crate::lcpf::MeasurementSet;
use crate::moments::{self, DistanceMatrix, MomentSet, Pairing};
use crate::rg::{self, LearnedTree, RgConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnConfig {
    pub rg: RgConfig,
    /// Conditioning threshold; `None` uses a tenth of the median injection
    /// determinant.
    pub lambda: Option<f64>,
    /// Defaults to [`Pairing::Oriented`], which keeps `Φ` spreads tight.
    pub pairing: Pairing,
    pub resistance: ResistanceFit,
}

/// Where line resistances come from once the topology is fixed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResistanceFit {
    /// Edge lengths produced by recursive grouping.
    Grouping,
    /// Path least squares on the symmetrised resistance distances, as for
    /// reactances.
    #[default]
    LeastSquares,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            rg: RgConfig::default(),
            lambda: None,
            pairing: Pairing::Oriented,
            resistance: ResistanceFit::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Samples behind the moments; `None` for exact moments.
    pub samples: Option<u64>,
    pub eps0: f64,
    pub eps_growth: f64,
    /// Resolved neighbourhood radius (`null` when unbounded).
    pub tau: Option<f64>,
    pub max_eps: f64,
    pub rounds: usize,
    pub escalations: usize,
    pub floored_edges: usize,
    pub lambda: f64,
    pub min_injection_det: f64,
    pub pairing: Pairing,
}

/// A learned, unrooted grid. Hidden buses are named `h#k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LearnedGridRepr", into = "LearnedGridRepr")]
pub struct LearnedGrid {
    pub grid: Grid,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct LearnedGridRepr {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    provenance: Provenance,
}

impl TryFrom<LearnedGridRepr> for LearnedGrid {
    type Error = Error;

    fn try_from(r: LearnedGridRepr) -> Result<Self> {
        Ok(LearnedGrid {
            grid: Grid::new(r.nodes, r.edges)?,
            provenance: r.provenance,
        })
    }
}

impl From<LearnedGrid> for LearnedGridRepr {
    fn from(l: LearnedGrid) -> Self {
        LearnedGridRepr {
            nodes: l.grid.nodes().to_vec(),
            edges: l.grid.edges().to_vec(),
            provenance: l.provenance,
        }
    }
}

impl LearnedGrid {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("learned grid serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
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
}

/// Per-edge reactances on a fixed topology, by least squares over the path
/// equations `Σ_{e ∈ P(a,b)} x_e = d_x(a,b)` of every observed pair.
/// Results are floored at zero.
pub fn assign_reactances(tree: &LearnedTree, d: &DistanceMatrix) -> Result<Vec<f64>> {
    fit_path_lengths(tree, &d.nodes, &d.d_x)
}

/// Pair weights fall off as `d^-6`. Estimates for distant pairs carry far
/// more sampling noise than for close ones.
const PATH_WEIGHT_POWER: i32 = 6;

/// Weighted least-squares edge lengths of `tree` from a distance matrix over
/// `nodes`. The two orientations of each pair are averaged.
pub fn fit_path_lengths(tree: &LearnedTree, nodes: &[String], dist: &DMatrix<f64>) -> Result<Vec<f64>> {
    let m = tree.edges.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let observed: Vec<(usize, usize)> = tree
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| n.observed)
        .map(|(i, n)| {
            nodes
                .iter()
                .position(|id| *id == n.label)
                .map(|j| (i, j))
                .ok_or_else(|| Error::Invalid(format!("node {} missing from the distances", n.label)))
        })
        .collect::<Result<_>>()?;
    let floor = 1e-3 * observed.iter().flat_map(|&(_, i)| observed.iter().map(move |&(_, j)| (i, j))).fold(0.0f64, |m, (i, j)| m.max(dist[(i, j)].abs()));
    let floor = if floor > 0.0 { floor } else { f64::MIN_POSITIVE };
    let adj = tree.adjacency();
    let mut ata = DMatrix::<f64>::zeros(m, m);
    let mut atb = DVector::<f64>::zeros(m);
    for (k, &(ta, da)) in observed.iter().enumerate() {
        for &(tb, db) in &observed[k + 1..] {
            let path = rg::path_in(&adj, ta, tb);
            let target = 0.5 * (dist[(da, db)] + dist[(db, da)]);
            let w = target.max(floor).powi(-PATH_WEIGHT_POWER);
            for &e in &path {
                atb[e] += w * target;
                for &f in &path {
                    ata[(e, f)] += w;
                }
            }
        }
    }
    let chol = ata
        .cholesky()
        .ok_or_else(|| Error::RankDeficient(format!("path system over {m} edges is singular")))?;
    let x = chol.solve(&atb);
    Ok(x.iter().map(|&v| v.max(0.0)).collect())
}

fn to_grid(tree: &LearnedTree, x: &[f64]) -> Result<Grid> {
    let nodes = tree
        .nodes
        .iter()
        .map(|n| Node::new(n.label.clone(), false, n.observed))
        .collect();
    let edges = tree
        .edges
        .iter()
        .zip(x)
        .map(|(e, &x)| Edge::new(tree.nodes[e.a].label.clone(), tree.nodes[e.b].label.clone(), e.length, x))
        .collect();
    Grid::new(nodes, edges)
}

/// Learns topology and impedances of the buses `observed` from `m`.
pub fn learn_from_moments(m: &MomentSet, observed: &[String], cfg: &LearnConfig) -> Result<LearnedGrid> {
    m.validate()?;
    let sub: Vec<usize> = observed
        .iter()
        .map(|id| m.index_of(id).ok_or_else(|| Error::Invalid(format!("node {id} has no moments"))))
        .collect::<Result<_>>()?;
    let lambda = cfg.lambda.unwrap_or_else(|| m.default_lambda());
    let mut min_det = f64::INFINITY;
    for c in moments::conditioning_check(m, lambda) {
        if !sub.iter().any(|&i| m.nodes[i] == c.node) {
            continue;
        }
        min_det = min_det.min(c.det.abs());
        if !c.pass {
            return Err(Error::Conditioning {
                node: c.node,
                det: c.det,
                lambda,
            });
        }
    }
    let d = moments::estimate_distances_with(m, observed, lambda, cfg.pairing)?;
    let tree = rg::rg_sampled(observed, &d.d_r, &cfg.rg)?;
    let x = assign_reactances(&tree, &d)?;
    let tree = match cfg.resistance {
        ResistanceFit::Grouping => tree,
        ResistanceFit::LeastSquares => {
            let r = fit_path_lengths(&tree, &d.nodes, &d.d_r)?;
            let mut t = tree;
            for (e, r) in t.edges.iter_mut().zip(r) {
                e.length = r;
            }
            t
        }
    };
    Ok(LearnedGrid {
        grid: to_grid(&tree, &x)?,
        provenance: Provenance {
            samples: m.count,
            eps0: cfg.rg.eps0,
            eps_growth: cfg.rg.eps_growth,
            tau: tree.tau.is_finite().then_some(tree.tau),
            max_eps: tree.max_eps,
            rounds: tree.rounds,
            escalations: tree.escalations,
            floored_edges: tree.floored,
            lambda,
            min_injection_det: min_det,
            pairing: cfg.pairing,
        },
    })
}

/// Accumulates moments over all rows of `ms` and learns from them.
pub fn learn_from_samples(ms: &MeasurementSet, cfg: &LearnConfig) -> Result<LearnedGrid> {
    if ms.samples < 2 {
        return Err(Error::Invalid(format!("need at least 2 samples, got {}", ms.samples)));
    }
    let m = moments::accumulate(ms)?;
    learn_from_moments(&m, &ms.nodes, cfg)
}
