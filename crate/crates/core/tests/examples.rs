//! Worked examples checked against independent hand or brute-force oracles.

mod common;

use std::collections::BTreeMap;

use gridtopo::benchmark::{edge_difference, run_experiment, ExperimentConfig, GridSpec, RunOptions};
use gridtopo::lcpf::{self, LcpfModel};
use gridtopo::learner::{learn_from_moments, learn_from_samples, LearnedGrid};
use gridtopo::moments::{self, estimate_distances, estimate_h_pair};
use gridtopo::rg::{rg_exact, rg_sampled};
use gridtopo::{seed, Edge, Grid, InjectionSpec, LearnConfig, Node, RgConfig, Tau, WeightMode};
use nalgebra::DMatrix;
use rand::Rng;

fn ids(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

/// Root `t`, hidden hub `h`, leaves `a`, `b`, `c`.
fn star() -> Grid {
    Grid::new(
        vec![
            Node::new("t", true, false),
            Node::new("h", false, false),
            Node::new("a", false, true),
            Node::new("b", false, true),
            Node::new("c", false, true),
        ],
        vec![
            Edge::new("t", "h", 0.5, 0.4),
            Edge::new("h", "a", 1.0, 1.5),
            Edge::new("h", "b", 2.0, 0.7),
            Edge::new("h", "c", 3.0, 2.2),
        ],
    )
    .unwrap()
}

/// Star distances built by hand from the line resistances.
fn star_d() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[0.0, 3.0, 4.0, 3.0, 0.0, 5.0, 4.0, 5.0, 0.0])
}

/// Six leaves on a four-bus spine `h1 - h2 - h3 - h4`, root `t` above `h2`.
fn caterpillar(rx: impl FnMut() -> (f64, f64)) -> Grid {
    let lines = [
        ("t", "h2"),
        ("h1", "h2"),
        ("h2", "h3"),
        ("h3", "h4"),
        ("h1", "a"),
        ("h1", "b"),
        ("h2", "c"),
        ("h3", "d"),
        ("h4", "e"),
        ("h4", "f"),
    ];
    let mut rx = rx;
    let mut nodes = vec![Node::new("t", true, false)];
    nodes.extend(["h1", "h2", "h3", "h4"].map(|h| Node::new(h, false, false)));
    nodes.extend(["a", "b", "c", "d", "e", "f"].map(|l| Node::new(l, false, true)));
    let edges = lines
        .iter()
        .map(|(u, v)| {
            let (r, x) = rx();
            Edge::new(*u, *v, r, x)
        })
        .collect();
    Grid::new(nodes, edges).unwrap()
}

/// Resistance and reactance of the learned line at leaf `id`.
fn leaf_line(l: &LearnedGrid, id: &str) -> (f64, f64) {
    let e = l.grid.edges().iter().find(|e| e.u == id || e.v == id).unwrap();
    (e.r, e.x)
}

#[test]
fn analytic_star_pair_and_distances() {
    let g = star();
    let m = lcpf::analytic_moments(&g, &InjectionSpec::default()).unwrap();
    let (hr, _) = estimate_h_pair(&m, "a", "b", 0.1).unwrap();
    assert!((hr - 0.5).abs() < 1e-12);
    let dm = estimate_distances(&m, &ids(&["a", "b", "c"]), 0.1).unwrap();
    assert!((&dm.d_r - star_d()).amax() < 1e-12);
}

#[test]
fn sampled_star_distance() {
    let ms = lcpf::simulate(&star(), &InjectionSpec::default(), 10_000, 11).unwrap();
    let m = moments::accumulate(&ms).unwrap();
    let dm = estimate_distances(&m, &ms.nodes, m.default_lambda()).unwrap();
    let (a, b) = (dm.index_of("a").unwrap(), dm.index_of("b").unwrap());
    assert!((dm.d_r[(a, b)] - 3.0).abs() <= 0.3, "{}", dm.d_r[(a, b)]);
}

#[test]
fn chunked_moments_equal_one_pass() {
    let g = common::to_grid(&[("h1".into(), "a".into()), ("h1".into(), "b".into()), ("h1".into(), "c".into())], "");
    let mut nodes = g.nodes().to_vec();
    nodes.push(Node::new("t", true, false));
    let mut edges = g.edges().to_vec();
    edges.push(Edge::new("t", "h1", 0.3, 0.2));
    let g = Grid::new(nodes, edges).unwrap();
    let ms = lcpf::simulate(&g, &InjectionSpec::default(), 1000, 3).unwrap();
    let whole = moments::accumulate(&ms).unwrap();
    let mut merged = moments::accumulate(&ms.rows(0, 250)).unwrap();
    for k in 1..4 {
        merged = moments::merge(&merged, &moments::accumulate(&ms.rows(250 * k, 250 * (k + 1))).unwrap()).unwrap();
    }
    assert_eq!(merged.count, Some(1000));
    let flat = |m: &gridtopo::MomentSet| -> Vec<f64> {
        m.vp.iter().chain(&m.vq).flatten().chain(&m.pp).chain(&m.qq).chain(&m.pq).copied().collect()
    };
    for (x, y) in flat(&merged).iter().zip(flat(&whole)) {
        assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-3), "{x} vs {y}");
    }
}

#[test]
fn noisy_star_at_wide_tolerance() {
    let mut rng = seed::rng(21);
    let mut d = star_d();
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let e = rng.random_range(-0.05..=0.05);
        d[(i, j)] += e;
        d[(j, i)] += e;
    }
    let cfg = RgConfig {
        eps0: 0.3,
        tau: Tau::Infinite,
        ..RgConfig::default()
    };
    let t = rg_sampled(&ids(&["a", "b", "c"]), &d, &cfg).unwrap();
    assert_eq!(t.nodes.len(), 4);
    let hub = t.nodes.iter().position(|n| !n.observed).unwrap();
    for (leaf, want) in [("a", 1.0), ("b", 2.0), ("c", 3.0)] {
        let i = t.index_of(leaf).unwrap();
        let e = t.edges.iter().find(|e| (e.a, e.b) == (i, hub) || (e.a, e.b) == (hub, i)).unwrap();
        assert!((e.length - want).abs() <= 0.1, "{leaf}: {}", e.length);
    }
}

#[test]
fn tiny_tolerance_forces_escalation() {
    // Three leaves leave one witness per pair and a spread of zero, so use six.
    let g = caterpillar(|| (1.0, 1.0));
    let obs = g.observed_ids();
    let mut d = g.distance_matrix(&obs, WeightMode::Resistance).unwrap();
    let mut rng = seed::rng(22);
    for i in 0..obs.len() {
        for j in 0..i {
            let e = rng.random_range(-0.02..=0.02);
            d[(i, j)] += e;
            d[(j, i)] += e;
        }
    }
    let cfg = RgConfig {
        eps0: 1e-9,
        tau: Tau::Infinite,
        ..RgConfig::default()
    };
    let t = rg_sampled(&obs, &d, &cfg).unwrap();
    assert!(t.escalations >= 1);
    assert_eq!(t.edges.len() + 1, t.nodes.len());
}

#[test]
fn caterpillar_in_two_rounds() {
    let g = caterpillar(|| (1.0, 1.0));
    let obs = g.observed_ids();
    let d = g.distance_matrix(&obs, WeightMode::Resistance).unwrap();
    let t = rg_exact(&obs, &d).unwrap();
    // Two grouping rounds, then the last two active buses are joined.
    assert_eq!(t.rounds, 2);
    assert_eq!(t.nodes.iter().filter(|n| !n.observed).count(), 4);
    assert!(t.edges.iter().all(|e| (e.length - 1.0).abs() < 1e-12));
}

#[test]
fn caterpillar_from_analytic_moments() {
    let mut rng = seed::rng(6);
    let g = caterpillar(|| (rng.random_range(0.1..0.2), rng.random_range(0.1..0.2)));
    let model = LcpfModel::new(&g).unwrap();
    let m = model.analytic_moments(&InjectionSpec::default());
    let l = learn_from_moments(&m, &model.observed_ids(), &LearnConfig::default()).unwrap();
    assert!(common::max_relative_error(&g, &l).unwrap() < 1e-9);
}

#[test]
fn analytic_star_learner() {
    let g = star();
    let m = lcpf::analytic_moments(&g, &InjectionSpec::default()).unwrap();
    let l = learn_from_moments(&m, &ids(&["a", "b", "c"]), &LearnConfig::default()).unwrap();
    assert_eq!(l.grid.len(), 4);
    for (leaf, r, x) in [("a", 1.0, 1.5), ("b", 2.0, 0.7), ("c", 3.0, 2.2)] {
        let (gr, gx) = leaf_line(&l, leaf);
        assert!((gr - r).abs() < 1e-12 && (gx - x).abs() < 1e-12, "{leaf}: {gr} {gx}");
    }
}

#[test]
fn sampled_star_learner() {
    let g = star();
    for (t, s) in [(10_000, 5), (100_000, 6)] {
        let ms = lcpf::simulate(&g, &InjectionSpec::default(), t, s).unwrap();
        let mut cfg = LearnConfig::default();
        cfg.rg.eps0 = 0.1;
        let l = learn_from_samples(&ms, &cfg).unwrap();
        assert_eq!(l.grid.len(), 4, "T={t}");
        let mut err = 0.0;
        for (leaf, r, x) in [("a", 1.0, 1.5), ("b", 2.0, 0.7), ("c", 3.0, 2.2)] {
            let (gr, gx) = leaf_line(&l, leaf);
            err += ((gr - r) / r).abs() + ((gx - x) / x).abs();
        }
        assert!(err / 6.0 <= 0.10, "T={t}: impedance error {}", err / 6.0);
    }
}

#[test]
fn moving_one_leaf_costs_two_edges() {
    let tree = |c_at: &str| -> Grid {
        let t: Vec<(String, String)> = [
            ("h1", "h2"),
            ("h1", "a"),
            ("h1", "b"),
            ("h1", "g"),
            (c_at, "c"),
            ("h2", "d"),
            ("h2", "e"),
            ("h2", "f"),
        ]
        .iter()
        .map(|(u, v)| (u.to_string(), v.to_string()))
        .collect();
        common::to_grid(&t, "")
    };
    let (a, b) = (tree("h1"), common::relabel_hidden(&tree("h2"), "z"));
    assert_eq!(common::brute_edge_difference(&a, &b), 2);
    assert_eq!(edge_difference(&a, &b).unwrap(), 2);
}

#[test]
fn small_grids_recover_reliably() {
    let cfg = ExperimentConfig {
        grid: GridSpec { nodes: 10, ..GridSpec::default() },
        samples: vec![10_000],
        trials: 100,
        seed: 10,
        ..ExperimentConfig::default()
    };
    let res = run_experiment(&cfg, RunOptions::default()).unwrap();
    let rate = res.cells[0].recovery_rate;
    assert!(rate >= 0.95, "recovery {rate}");
}

#[test]
fn star_moments_and_queries() {
    let g = star();
    let m = lcpf::analytic_moments(&g, &InjectionSpec::default()).unwrap();
    let idx: BTreeMap<&str, usize> = m.nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    assert!((m.vp[idx["a"]][idx["b"]] - 0.5).abs() < 1e-12);
    assert!((g.h_inverse_entry("a", "a", WeightMode::Resistance).unwrap() - 1.5).abs() < 1e-12);
    assert!((g.true_distance("a", "c", WeightMode::Resistance).unwrap() - 4.0).abs() < 1e-12);
}
