//! Monte-Carlo sweeps over sample count and initial tolerance.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmark::generate::{random_radial_grid, GridSpec};
use crate::benchmark::metrics::{evaluate, EvalReport};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::lcpf::{InjectionSpec, LcpfModel};
use crate::learner::{learn_from_moments, LearnConfig, ResistanceFit};
use crate::moments::{self, MomentSet, Pairing};
use crate::rg::{RgConfig, Tau};
use crate::seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MomentMode {
    /// Moments of `T` simulated samples.
    #[default]
    Sampled,
    /// Exact moments; the sample axis is ignored.
    Analytic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub grid: GridSpec,
    pub injection: InjectionSpec,
    pub samples: Vec<usize>,
    pub eps0: Vec<f64>,
    pub eps_growth: f64,
    /// Escalate `ε` on stalled rounds; `false` keeps it fixed.
    pub dynamic_eps: bool,
    pub tau: Tau,
    pub pairing: Pairing,
    pub resistance: ResistanceFit,
    pub trials: usize,
    pub seed: u64,
    pub mode: MomentMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            grid: GridSpec::default(),
            injection: InjectionSpec::default(),
            samples: vec![1000, 2000, 5000, 10000],
            eps0: vec![0.15],
            eps_growth: 1.5,
            dynamic_eps: true,
            tau: Tau::default(),
            pairing: Pairing::Oriented,
            resistance: ResistanceFit::default(),
            trials: 100,
            seed: 0,
            mode: MomentMode::Sampled,
        }
    }
}

fn list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| format!("cannot parse {:?}", s.trim())))
        .collect()
}

fn one<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("cannot parse {v:?}"))
}

/// Parses a tau rule: `median:K`, `fixed:V` or `inf`.
pub fn parse_tau(v: &str) -> std::result::Result<Tau, String> {
    match v.split_once(':') {
        Some(("median", k)) => one::<f64>(k.trim()).map(Tau::MedianMultiple),
        Some(("fixed", t)) => one::<f64>(t.trim()).map(Tau::Fixed),
        None if v == "inf" => Ok(Tau::Infinite),
        _ => Err(format!("expected median:K, fixed:V or inf, got {v:?}")),
    }
}

impl ExperimentConfig {
    /// Reads `key = value` lines. `#` starts a comment; lists are
    /// comma-separated. Keys: `n`, `max_degree`, `r_lo`, `r_hi`, `samples`,
    /// `eps0`, `eps_growth`, `eps_mode` (`dynamic` or `fixed`), `tau_rule`,
    /// `pairing`, `trials`, `seed`, `mode` (`sampled` or `analytic`),
    /// `var_p`, `var_q`, `cov_pq`. Unset keys keep their defaults.
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fail = |msg: String| Error::parse(source_name, format!("line {}: {msg}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| fail(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let res: std::result::Result<(), String> = (|| {
                match key {
                    "n" => cfg.grid.nodes = one(value)?,
                    "max_degree" => cfg.grid.max_degree = one(value)?,
                    "r_lo" => cfg.grid.lo = one(value)?,
                    "r_hi" => cfg.grid.hi = one(value)?,
                    "samples" => cfg.samples = list(value)?,
                    "eps0" => cfg.eps0 = list(value)?,
                    "eps_growth" => cfg.eps_growth = one(value)?,
                    "eps_mode" => {
                        cfg.dynamic_eps = match value {
                            "dynamic" => true,
                            "fixed" => false,
                            _ => return Err(format!("eps_mode must be dynamic or fixed, got {value:?}")),
                        }
                    }
                    "tau_rule" => cfg.tau = parse_tau(value)?,
                    "pairing" => {
                        cfg.pairing = match value {
                            "symmetric" => Pairing::Symmetric,
                            "oriented" => Pairing::Oriented,
                            _ => return Err(format!("pairing must be symmetric or oriented, got {value:?}")),
                        }
                    }
                    "resistance" => {
                        cfg.resistance = match value {
                            "grouping" => ResistanceFit::Grouping,
                            "least_squares" => ResistanceFit::LeastSquares,
                            _ => return Err(format!("resistance must be grouping or least_squares, got {value:?}")),
                        }
                    }
                    "trials" => cfg.trials = one(value)?,
                    "seed" => cfg.seed = one(value)?,
                    "mode" => {
                        cfg.mode = match value {
                            "sampled" => MomentMode::Sampled,
                            "analytic" => MomentMode::Analytic,
                            _ => return Err(format!("mode must be sampled or analytic, got {value:?}")),
                        }
                    }
                    "var_p" => cfg.injection.default.var_p = one(value)?,
                    "var_q" => cfg.injection.default.var_q = one(value)?,
                    "cov_pq" => cfg.injection.default.cov_pq = one(value)?,
                    _ => return Err(format!("unknown key {key:?}")),
                }
                Ok(())
            })();
            res.map_err(|m| fail(format!("{key}: {m}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.nodes < 3 {
            return Err(Error::Invalid(format!("n must be at least 3, got {}", self.grid.nodes)));
        }
        if self.grid.max_degree < 3 {
            return Err(Error::Invalid(format!("max_degree must be at least 3, got {}", self.grid.max_degree)));
        }
        self.grid.validate()?;
        if self.mode == MomentMode::Sampled && (self.samples.is_empty() || self.samples.iter().any(|&t| t < 2)) {
            return Err(Error::Invalid("samples must list counts of at least 2".into()));
        }
        if self.eps0.is_empty() {
            return Err(Error::Invalid("eps0 must list at least one tolerance".into()));
        }
        if self.trials == 0 {
            return Err(Error::Invalid("trials must be positive".into()));
        }
        for &e in &self.eps0 {
            self.learn_config(e).rg.validate()?;
        }
        Ok(())
    }

    pub fn learn_config(&self, eps0: f64) -> LearnConfig {
        LearnConfig {
            rg: RgConfig {
                eps0,
                eps_growth: self.eps_growth,
                tau: self.tau,
                max_rounds: None,
                dynamic: self.dynamic_eps,
            },
            lambda: None,
            pairing: self.pairing,
            resistance: self.resistance,
        }
    }

    /// Sample counts of the sweep; a single `None` in analytic mode.
    fn sample_axis(&self) -> Vec<Option<usize>> {
        match self.mode {
            MomentMode::Analytic => vec![None],
            MomentMode::Sampled => self.samples.iter().map(|&t| Some(t)).collect(),
        }
    }
}

/// One `(trial, T, ε0)` outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub samples: Option<usize>,
    pub eps0: f64,
    pub exact_recovery: bool,
    /// Empty when learning failed.
    pub edge_difference: Option<usize>,
    pub impedance_error: Option<f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub runtime: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub samples: Option<usize>,
    pub eps0: f64,
    pub trials: usize,
    pub recovered: usize,
    pub recovery_rate: f64,
    pub failures: usize,
    /// Over trials that produced a tree.
    pub mean_edge_difference: Option<f64>,
    /// Over exactly recovered trials.
    pub mean_impedance_error: Option<f64>,
    pub mean_runtime: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub cells: Vec<CellSummary>,
    #[serde(skip)]
    pub rows: Vec<TrialRow>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Record wall-clock time per learning run. Off by default so outputs
    /// stay byte-reproducible.
    pub timing: bool,
}

fn score(
    truth: &Grid,
    m: &MomentSet,
    observed: &[String],
    cfg: &LearnConfig,
    timing: bool,
) -> std::result::Result<EvalReport, String> {
    // No clock unless asked: `Instant` is unavailable on wasm32.
    let start = timing.then(Instant::now);
    let learned = learn_from_moments(m, observed, cfg).map_err(|e| e.to_string())?;
    let elapsed = start.map(|s| s.elapsed().as_secs_f64());
    let mut report = evaluate(truth, &learned).map_err(|e| e.to_string())?;
    report.runtime = elapsed;
    Ok(report)
}

fn run_trial(cfg: &ExperimentConfig, trial: usize, opts: RunOptions) -> Vec<TrialRow> {
    let trial_seed = seed::derive(cfg.seed, trial as u64);
    let axis = cfg.sample_axis();
    let fail_all = |msg: String| -> Vec<TrialRow> {
        axis.iter()
            .flat_map(|&t| cfg.eps0.iter().map(move |&e| (t, e)))
            .map(|(samples, eps0)| TrialRow {
                trial,
                samples,
                eps0,
                exact_recovery: false,
                edge_difference: None,
                impedance_error: None,
                error: Some(msg.clone()),
                runtime: None,
            })
            .collect()
    };
    let setup = (|| -> Result<(Grid, LcpfModel)> {
        let grid = random_radial_grid(&cfg.grid, seed::derive(trial_seed, 0))?;
        let model = LcpfModel::new(&grid)?;
        Ok((grid, model))
    })();
    let (grid, model) = match setup {
        Ok(x) => x,
        Err(e) => return fail_all(e.to_string()),
    };
    let observed = model.observed_ids();
    let data = match cfg.mode {
        MomentMode::Analytic => None,
        MomentMode::Sampled => {
            let t_max = cfg.samples.iter().copied().max().unwrap_or(0);
            match model.simulate(&cfg.injection, t_max, seed::derive(trial_seed, 1)) {
                Ok(ms) => Some(ms),
                Err(e) => return fail_all(e.to_string()),
            }
        }
    };
    let mut rows = Vec::new();
    for &samples in &axis {
        let m = match (&data, samples) {
            (Some(ms), Some(t)) => moments::accumulate(&ms.prefix(t)),
            _ => Ok(model.analytic_moments(&cfg.injection)),
        };
        for &eps0 in &cfg.eps0 {
            let outcome = m
                .as_ref()
                .map_err(|e| e.to_string())
                .and_then(|m| score(&grid, m, &observed, &cfg.learn_config(eps0), opts.timing));
            rows.push(match outcome {
                Ok(r) => TrialRow {
                    trial,
                    samples,
                    eps0,
                    exact_recovery: r.exact_recovery,
                    edge_difference: Some(r.edge_difference),
                    impedance_error: r.avg_impedance_error,
                    error: None,
                    runtime: r.runtime,
                },
                Err(msg) => TrialRow {
                    trial,
                    samples,
                    eps0,
                    exact_recovery: false,
                    edge_difference: None,
                    impedance_error: None,
                    error: Some(msg),
                    runtime: None,
                },
            });
        }
    }
    rows
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Runs every trial over every `(T, ε0)` cell.
///
/// Trial `k` draws its grid and samples from seeds derived from
/// `(cfg.seed, k)`; smaller sample counts reuse a prefix of the largest
/// simulated set, and every `ε0` sees the same data.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<ExperimentResult> {
    cfg.validate()?;
    let per_trial: Vec<Vec<TrialRow>> = (0..cfg.trials).into_par_iter().map(|k| run_trial(cfg, k, opts)).collect();
    let rows: Vec<TrialRow> = per_trial.into_iter().flatten().collect();
    let mut cells = Vec::new();
    for samples in cfg.sample_axis() {
        for &eps0 in &cfg.eps0 {
            let cell: Vec<&TrialRow> = rows.iter().filter(|r| r.samples == samples && r.eps0 == eps0).collect();
            let recovered = cell.iter().filter(|r| r.exact_recovery).count();
            cells.push(CellSummary {
                samples,
                eps0,
                trials: cell.len(),
                recovered,
                recovery_rate: recovered as f64 / cell.len().max(1) as f64,
                failures: cell.iter().filter(|r| r.error.is_some()).count(),
                mean_edge_difference: mean(cell.iter().filter_map(|r| r.edge_difference.map(|d| d as f64))),
                mean_impedance_error: mean(cell.iter().filter_map(|r| r.impedance_error)),
                mean_runtime: if opts.timing { mean(cell.iter().filter_map(|r| r.runtime)) } else { None },
            });
        }
    }
    Ok(ExperimentResult {
        config: cfg.clone(),
        cells,
        rows,
    })
}

impl ExperimentResult {
    pub fn cell(&self, samples: Option<usize>, eps0: f64) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.samples == samples && c.eps0 == eps0)
    }

    /// One row per `(trial, T, ε0)`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Invalid(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    /// Human-readable table of the cells.
    pub fn table(&self) -> String {
        let mut s = String::from("samples   eps0    recovered  rate    edge_diff  imp_err\n");
        for c in &self.cells {
            let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                s,
                "{:<9} {:<7} {:>4}/{:<4}  {:<6.3}  {:<9}  {}",
                c.samples.map_or("exact".into(), |t| t.to_string()),
                c.eps0,
                c.recovered,
                c.trials,
                c.recovery_rate,
                fmt(c.mean_edge_difference),
                fmt(c.mean_impedance_error)
            );
        }
        s
    }
}
