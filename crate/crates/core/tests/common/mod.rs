#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use gridtopo::benchmark::match_hidden_and_diff;
use gridtopo::learner::LearnedGrid;
use gridtopo::{Edge, Grid, Node};

pub const LEAVES: [&str; 5] = ["a", "b", "c", "d", "e"];

/// Unrooted trees as edge lists over leaf names and `h<k>` hidden names.
type Tree = Vec<(String, String)>;

/// Every tree on the first `k` leaves whose hidden nodes have degree ≥ 3.
/// Each tree arises once: leaf `k` is either hung off a hidden node or
/// spliced into an edge through a new hidden node.
pub fn all_trees(k: usize) -> Vec<Grid> {
    assert!((2..=LEAVES.len()).contains(&k));
    let mut trees: Vec<(Tree, usize)> = vec![(vec![("a".into(), "b".into())], 0)];
    for leaf in &LEAVES[2..k] {
        let mut next = Vec::new();
        for (t, hidden) in &trees {
            for h in 1..=*hidden {
                let mut u = t.clone();
                u.push((format!("h{h}"), leaf.to_string()));
                next.push((u, *hidden));
            }
            for i in 0..t.len() {
                let h = format!("h{}", hidden + 1);
                let mut u = t.clone();
                let (x, y) = u.remove(i);
                u.push((x, h.clone()));
                u.push((h.clone(), y));
                u.push((h, leaf.to_string()));
                next.push((u, hidden + 1));
            }
        }
        trees = next;
    }
    trees.into_iter().map(|(t, _)| to_grid(&t, "")).collect()
}

/// Builds a rootless grid; hidden names get `tag` appended.
pub fn to_grid(t: &[(String, String)], tag: &str) -> Grid {
    let name = |s: &str| if s.starts_with('h') { format!("{s}{tag}") } else { s.to_string() };
    let ids: BTreeSet<String> = t.iter().flat_map(|(u, v)| [name(u), name(v)]).collect();
    let nodes = ids
        .iter()
        .map(|id| Node::new(id.clone(), false, !id.starts_with('h')))
        .collect();
    let edges = t
        .iter()
        .enumerate()
        .map(|(i, (u, v))| Edge::new(name(u), name(v), 1.0 + i as f64, 2.0 + i as f64))
        .collect();
    Grid::new(nodes, edges).unwrap()
}

pub fn relabel_hidden(g: &Grid, tag: &str) -> Grid {
    let t: Tree = g.edges().iter().map(|e| (e.u.clone(), e.v.clone())).collect();
    to_grid(&t, tag)
}

fn edge_set(g: &Grid, rename: &BTreeMap<String, String>) -> BTreeSet<(String, String)> {
    g.edges()
        .iter()
        .map(|e| {
            let u = rename.get(&e.u).cloned().unwrap_or_else(|| e.u.clone());
            let v = rename.get(&e.v).cloned().unwrap_or_else(|| e.v.clone());
            if u < v {
                (u, v)
            } else {
                (v, u)
            }
        })
        .collect()
}

/// Edge difference by trying every injective assignment of `b`'s hidden
/// nodes to `a`'s hidden nodes or to fresh names.
pub fn brute_edge_difference(a: &Grid, b: &Grid) -> usize {
    let ha: Vec<String> = a.nodes().iter().filter(|n| !n.observed).map(|n| n.id.clone()).collect();
    let hb: Vec<String> = b.nodes().iter().filter(|n| !n.observed).map(|n| n.id.clone()).collect();
    let ea = edge_set(a, &BTreeMap::new());
    let mut best = usize::MAX;
    let mut rename = BTreeMap::new();
    fn go(
        i: usize,
        hb: &[String],
        ha: &[String],
        used: &mut Vec<bool>,
        rename: &mut BTreeMap<String, String>,
        b: &Grid,
        ea: &BTreeSet<(String, String)>,
        best: &mut usize,
    ) {
        if i == hb.len() {
            let eb = edge_set(b, rename);
            *best = (*best).min(ea.symmetric_difference(&eb).count());
            return;
        }
        for j in 0..ha.len() {
            if !used[j] {
                used[j] = true;
                rename.insert(hb[i].clone(), ha[j].clone());
                go(i + 1, hb, ha, used, rename, b, ea, best);
                used[j] = false;
            }
        }
        rename.insert(hb[i].clone(), format!("fresh{i}"));
        go(i + 1, hb, ha, used, rename, b, ea, best);
        rename.remove(&hb[i]);
    }
    go(0, &hb, &ha, &mut vec![false; ha.len()], &mut rename, b, &ea, &mut best);
    best
}

/// Largest relative error of `r` or `x` over matched lines, or `None` when
/// the topology differs.
pub fn max_relative_error(truth: &Grid, learned: &LearnedGrid) -> Option<f64> {
    let m = match_hidden_and_diff(truth, learned).unwrap();
    if m.edge_difference != 0 {
        return None;
    }
    let target = truth.reconstruction_target().unwrap();
    let key = |u: &str, v: &str| if u < v { (u.to_string(), v.to_string()) } else { (v.to_string(), u.to_string()) };
    let lines: BTreeMap<_, _> = target.edges().iter().map(|e| (key(&e.u, &e.v), (e.r, e.x))).collect();
    let mut worst = 0.0f64;
    for e in learned.grid.edges() {
        let (r, x) = lines[&key(&m.map[&e.u], &m.map[&e.v])];
        worst = worst.max((e.r - r).abs() / r).max((e.x - x).abs() / x);
    }
    Some(worst)
}
