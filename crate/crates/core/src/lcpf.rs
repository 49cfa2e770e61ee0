//! Linear coupled power flow (LC-PF) simulation.
//!
//! Voltage-magnitude and phase deviations are linear in the injection
//! deviations through the inverse reduced Laplacians:
//! `v = H_r⁻¹ p + H_x⁻¹ q` and `θ = H_x⁻¹ p − H_r⁻¹ q`.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution as _, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, WeightMode};
use crate::moments::MomentSet;
use crate::seed;

/// Second moments of the `(p, q)` deviation at one bus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeInjection {
    pub var_p: f64,
    pub var_q: f64,
    pub cov_pq: f64,
}

impl NodeInjection {
    pub const UNIT: NodeInjection = NodeInjection {
        var_p: 1.0,
        var_q: 1.0,
        cov_pq: 0.0,
    };

    pub fn new(var_p: f64, var_q: f64, cov_pq: f64) -> Self {
        NodeInjection {
            var_p,
            var_q,
            cov_pq,
        }
    }

    pub fn det(&self) -> f64 {
        self.var_p * self.var_q - self.cov_pq * self.cov_pq
    }

    /// Lower Cholesky factor `(l11, l21, l22)` of the 2×2 covariance.
    fn cholesky(&self) -> Option<(f64, f64, f64)> {
        if !(self.var_p > 0.0 && self.var_q.is_finite() && self.det() > 0.0) {
            return None;
        }
        let l11 = self.var_p.sqrt();
        let l21 = self.cov_pq / l11;
        let l22 = (self.var_q - l21 * l21).sqrt();
        Some((l11, l21, l22))
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let a2 = alpha * alpha;
        NodeInjection::new(self.var_p * a2, self.var_q * a2, self.cov_pq * a2)
    }
}

/// Shape of the standardised draws. Both have zero mean and unit variance, so
/// only the second moments in [`NodeInjection`] matter to the estimator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    #[default]
    Gaussian,
    Uniform,
}

/// Per-bus injection statistics. Buses without an override use `default`.
/// Injections at distinct buses are independent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub default: NodeInjection,
    #[serde(default)]
    pub overrides: BTreeMap<String, NodeInjection>,
    #[serde(default)]
    pub distribution: Distribution,
}

impl Default for InjectionSpec {
    fn default() -> Self {
        InjectionSpec::uniform_all(NodeInjection::UNIT)
    }
}

impl InjectionSpec {
    pub fn uniform_all(node: NodeInjection) -> Self {
        InjectionSpec {
            default: node,
            overrides: BTreeMap::new(),
            distribution: Distribution::Gaussian,
        }
    }

    pub fn with_distribution(mut self, d: Distribution) -> Self {
        self.distribution = d;
        self
    }

    pub fn for_node(&self, id: &str) -> NodeInjection {
        self.overrides.get(id).copied().unwrap_or(self.default)
    }

    /// Spec for injections multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        InjectionSpec {
            default: self.default.scaled(alpha),
            overrides: self
                .overrides
                .iter()
                .map(|(k, v)| (k.clone(), v.scaled(alpha)))
                .collect(),
            distribution: self.distribution,
        }
    }

    fn factors(&self, ids: &[String]) -> Result<Vec<(f64, f64, f64)>> {
        ids.iter()
            .map(|id| {
                self.for_node(id).cholesky().ok_or_else(|| {
                    Error::Invalid(format!(
                        "injection covariance of {id:?} is not positive definite"
                    ))
                })
            })
            .collect()
    }
}

/// Row-major `T × n` injection draws over the non-root buses.
#[derive(Clone, Debug, PartialEq)]
pub struct Injections {
    pub nodes: Vec<String>,
    pub samples: usize,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl Injections {
    pub fn p_row(&self, t: usize) -> &[f64] {
        let n = self.nodes.len();
        &self.p[t * n..(t + 1) * n]
    }

    pub fn q_row(&self, t: usize) -> &[f64] {
        let n = self.nodes.len();
        &self.q[t * n..(t + 1) * n]
    }
}

fn standard_draw<R: Rng>(rng: &mut R, d: Distribution) -> f64 {
    match d {
        Distribution::Gaussian => StandardNormal.sample(rng),
        Distribution::Uniform => {
            let half = 3f64.sqrt();
            Uniform::new_inclusive(-half, half)
                .expect("finite bounds")
                .sample(rng)
        }
    }
}

/// Draws one row of injections. Row `t` depends only on `(seed, t)`.
fn draw_row(
    factors: &[(f64, f64, f64)],
    dist: Distribution,
    seed: u64,
    t: usize,
    p: &mut [f64],
    q: &mut [f64],
) {
    let mut rng = seed::stream(seed, t as u64);
    for (k, &(l11, l21, l22)) in factors.iter().enumerate() {
        let z1 = standard_draw(&mut rng, dist);
        let z2 = standard_draw(&mut rng, dist);
        p[k] = l11 * z1;
        q[k] = l21 * z1 + l22 * z2;
    }
}

/// The inverse reduced Laplacians of a grid, ready to map injections to
/// voltages.
#[derive(Clone, Debug)]
pub struct LcpfModel {
    /// Non-root bus ids; index space of every vector and matrix here.
    pub nodes: Vec<String>,
    pub hr_inv: DMatrix<f64>,
    pub hx_inv: DMatrix<f64>,
    grid_observed: Vec<usize>,
}

impl LcpfModel {
    pub fn new(grid: &Grid) -> Result<Self> {
        grid.ensure_valid()?;
        let lr = grid.reduced_laplacian(WeightMode::Resistance)?;
        let lx = grid.reduced_laplacian(WeightMode::Reactance)?;
        let pos: HashMap<&str, usize> = lr
            .nodes
            .iter()
            .enumerate()
            .map(|(k, id)| (id.as_str(), k))
            .collect();
        let grid_observed = grid.observed_ids().iter().map(|id| pos[id.as_str()]).collect();
        Ok(LcpfModel {
            hr_inv: lr.inverse()?,
            hx_inv: lx.inverse()?,
            nodes: lr.nodes,
            grid_observed,
        })
    }

    pub fn observed_ids(&self) -> Vec<String> {
        self.grid_observed.iter().map(|&k| self.nodes[k].clone()).collect()
    }

    /// Voltage magnitude and phase deviations for one injection vector.
    pub fn solve(&self, p: &[f64], q: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.nodes.len();
        if p.len() != n || q.len() != n {
            return Err(Error::Invalid(format!(
                "expected {n} injections, got p={} q={}",
                p.len(),
                q.len()
            )));
        }
        let p = nalgebra::DVector::from_column_slice(p);
        let q = nalgebra::DVector::from_column_slice(q);
        let v = &self.hr_inv * &p + &self.hx_inv * &q;
        let theta = &self.hx_inv * &p - &self.hr_inv * &q;
        Ok((v.as_slice().to_vec(), theta.as_slice().to_vec()))
    }

    pub fn sample_injections(
        &self,
        spec: &InjectionSpec,
        samples: usize,
        seed: u64,
    ) -> Result<Injections> {
        let factors = spec.factors(&self.nodes)?;
        let n = self.nodes.len();
        let mut p = vec![0.0; samples * n];
        let mut q = vec![0.0; samples * n];
        if n > 0 {
            p.par_chunks_mut(n)
                .zip(q.par_chunks_mut(n))
                .enumerate()
                .for_each(|(t, (pr, qr))| draw_row(&factors, spec.distribution, seed, t, pr, qr));
        }
        Ok(Injections {
            nodes: self.nodes.clone(),
            samples,
            p,
            q,
        })
    }

    /// Draws injections, solves the flow for each sample and keeps the
    /// observed buses only. Phase angles are not exported.
    pub fn simulate(&self, spec: &InjectionSpec, samples: usize, seed: u64) -> Result<MeasurementSet> {
        if samples == 0 {
            return Err(Error::Invalid("sample count must be at least 1".into()));
        }
        let factors = spec.factors(&self.nodes)?;
        let n = self.nodes.len();
        let obs = &self.grid_observed;
        let m = obs.len();
        // Column k of these holds H⁻¹(:, obs[k]).
        let hr_o = self.hr_inv.select_columns(obs.iter());
        let hx_o = self.hx_inv.select_columns(obs.iter());

        let mut v = vec![0.0; samples * m];
        let mut p = vec![0.0; samples * m];
        let mut q = vec![0.0; samples * m];
        if m > 0 {
            v.par_chunks_mut(m)
                .zip(p.par_chunks_mut(m))
                .zip(q.par_chunks_mut(m))
                .enumerate()
                .for_each_init(
                    || (vec![0.0; n], vec![0.0; n]),
                    |(pa, qa), (t, ((vr, pr), qr))| {
                        draw_row(&factors, spec.distribution, seed, t, pa, qa);
                        for k in 0..m {
                            let (cr, cx) = (hr_o.column(k), hx_o.column(k));
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += cr[j] * pa[j] + cx[j] * qa[j];
                            }
                            vr[k] = acc;
                            pr[k] = pa[obs[k]];
                            qr[k] = qa[obs[k]];
                        }
                    },
                );
        }
        Ok(MeasurementSet {
            nodes: self.observed_ids(),
            samples,
            v,
            p,
            q,
            seed: Some(seed),
            source: None,
        })
    }

    /// Infinite-sample moments over the observed buses.
    pub fn analytic_moments(&self, spec: &InjectionSpec) -> MomentSet {
        let obs = &self.grid_observed;
        let m = obs.len();
        let inj: Vec<NodeInjection> = obs.iter().map(|&k| spec.for_node(&self.nodes[k])).collect();
        let mut vp = vec![vec![0.0; m]; m];
        let mut vq = vec![vec![0.0; m]; m];
        for a in 0..m {
            for b in 0..m {
                let hr = self.hr_inv[(obs[a], obs[b])];
                let hx = self.hx_inv[(obs[a], obs[b])];
                let s = inj[b];
                vp[a][b] = hr * s.var_p + hx * s.cov_pq;
                vq[a][b] = hr * s.cov_pq + hx * s.var_q;
            }
        }
        MomentSet {
            nodes: self.observed_ids(),
            count: None,
            vp,
            vq,
            pp: inj.iter().map(|s| s.var_p).collect(),
            qq: inj.iter().map(|s| s.var_q).collect(),
            pq: inj.iter().map(|s| s.cov_pq).collect(),
        }
    }
}

pub fn sample_injections(
    grid: &Grid,
    spec: &InjectionSpec,
    samples: usize,
    seed: u64,
) -> Result<Injections> {
    LcpfModel::new(grid)?.sample_injections(spec, samples, seed)
}

pub fn solve_lcpf(grid: &Grid, p: &[f64], q: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    LcpfModel::new(grid)?.solve(p, q)
}

pub fn simulate(grid: &Grid, spec: &InjectionSpec, samples: usize, seed: u64) -> Result<MeasurementSet> {
    LcpfModel::new(grid)?.simulate(spec, samples, seed)
}

pub fn analytic_moments(grid: &Grid, spec: &InjectionSpec) -> Result<MomentSet> {
    Ok(LcpfModel::new(grid)?.analytic_moments(spec))
}

/// `T` rows of `(v, p, q)` at the observed buses, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSet {
    pub nodes: Vec<String>,
    pub samples: usize,
    pub v: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub seed: Option<u64>,
    /// Grid file the data was simulated from, if any.
    pub source: Option<String>,
}

impl MeasurementSet {
    pub fn new(nodes: Vec<String>, v: Vec<f64>, p: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        let n = nodes.len();
        if n == 0 {
            return Err(Error::Invalid("measurement set has no nodes".into()));
        }
        if v.len() != p.len() || v.len() != q.len() || v.len() % n != 0 {
            return Err(Error::Invalid("measurement columns are not rectangular".into()));
        }
        if v.iter().chain(&p).chain(&q).any(|x| !x.is_finite()) {
            return Err(Error::Invalid("measurement set contains non-finite values".into()));
        }
        Ok(MeasurementSet {
            samples: v.len() / n,
            nodes,
            v,
            p,
            q,
            seed: None,
            source: None,
        })
    }

    pub fn width(&self) -> usize {
        self.nodes.len()
    }

    pub fn row(&self, t: usize) -> (&[f64], &[f64], &[f64]) {
        let n = self.nodes.len();
        let r = t * n..(t + 1) * n;
        (&self.v[r.clone()], &self.p[r.clone()], &self.q[r])
    }

    /// The first `samples` rows.
    pub fn prefix(&self, samples: usize) -> MeasurementSet {
        let k = samples.min(self.samples) * self.nodes.len();
        MeasurementSet {
            nodes: self.nodes.clone(),
            samples: samples.min(self.samples),
            v: self.v[..k].to_vec(),
            p: self.p[..k].to_vec(),
            q: self.q[..k].to_vec(),
            seed: self.seed,
            source: self.source.clone(),
        }
    }

    /// Rows `start..end`.
    pub fn rows(&self, start: usize, end: usize) -> MeasurementSet {
        let n = self.nodes.len();
        let end = end.min(self.samples);
        let start = start.min(end);
        MeasurementSet {
            nodes: self.nodes.clone(),
            samples: end - start,
            v: self.v[start * n..end * n].to_vec(),
            p: self.p[start * n..end * n].to_vec(),
            q: self.q[start * n..end * n].to_vec(),
            seed: self.seed,
            source: self.source.clone(),
        }
    }

    /// Reorders columns to follow `ids`.
    pub fn select(&self, ids: &[String]) -> Result<MeasurementSet> {
        let cols = ids
            .iter()
            .map(|id| {
                self.nodes
                    .iter()
                    .position(|n| n == id)
                    .ok_or_else(|| Error::Invalid(format!("no column for node {id:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = self.nodes.len();
        let pick = |src: &[f64]| {
            let mut out = Vec::with_capacity(self.samples * cols.len());
            for t in 0..self.samples {
                out.extend(cols.iter().map(|&c| src[t * n + c]));
            }
            out
        };
        Ok(MeasurementSet {
            nodes: ids.to_vec(),
            samples: self.samples,
            v: pick(&self.v),
            p: pick(&self.p),
            q: pick(&self.q),
            seed: self.seed,
            source: self.source.clone(),
        })
    }

    /// CSV with header `t,v:<id>,p:<id>,q:<id>,...` and an optional leading
    /// `# seed=<n> grid=<file>` comment.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = std::io::BufWriter::new(out);
        if self.seed.is_some() || self.source.is_some() {
            let mut parts = Vec::new();
            if let Some(s) = self.seed {
                parts.push(format!("seed={s}"));
            }
            if let Some(src) = &self.source {
                parts.push(format!("grid={src}"));
            }
            writeln!(out, "# {}", parts.join(" "))?;
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        for id in &self.nodes {
            header.push(format!("v:{id}"));
            header.push(format!("p:{id}"));
            header.push(format!("q:{id}"));
        }
        w.write_record(&header).map_err(csv_io)?;
        let mut record = Vec::with_capacity(header.len());
        for t in 0..self.samples {
            record.clear();
            record.push(t.to_string());
            let (v, p, q) = self.row(t);
            for k in 0..self.nodes.len() {
                record.push(v[k].to_string());
                record.push(p[k].to_string());
                record.push(q[k].to_string());
            }
            w.write_record(&record).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path)?;
        Self::read_csv(f, &path.display().to_string())
    }

    pub fn read_csv<R: Read>(input: R, source_name: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .has_headers(true)
            .from_reader(input);
        let header = rdr
            .headers()
            .map_err(|e| Error::parse(source_name, format!("cannot read header: {e}")))?
            .clone();
        if header.get(0).map(str::trim) != Some("t") {
            return Err(Error::parse(source_name, "first header column must be `t`"));
        }

        let mut nodes: Vec<String> = Vec::new();
        let mut slots: HashMap<String, [Option<usize>; 3]> = HashMap::new();
        for (col, name) in header.iter().enumerate().skip(1) {
            let name = name.trim();
            let (chan, id) = name.split_once(':').ok_or_else(|| {
                Error::parse(source_name, format!("header column {name:?} is not of the form <v|p|q>:<id>"))
            })?;
            let c = match chan {
                "v" => 0,
                "p" => 1,
                "q" => 2,
                _ => {
                    return Err(Error::parse(
                        source_name,
                        format!("header column {name:?}: channel must be v, p or q"),
                    ))
                }
            };
            if id.is_empty() {
                return Err(Error::parse(source_name, format!("header column {name:?} has an empty node id")));
            }
            let entry = slots.entry(id.to_string()).or_insert_with(|| {
                nodes.push(id.to_string());
                [None; 3]
            });
            if entry[c].is_some() {
                return Err(Error::parse(source_name, format!("duplicate column {name:?}")));
            }
            entry[c] = Some(col);
        }
        if nodes.is_empty() {
            return Err(Error::parse(source_name, "no measurement columns"));
        }
        let mut cols = Vec::with_capacity(nodes.len());
        for id in &nodes {
            let s = slots[id];
            for (c, chan) in ["v", "p", "q"].iter().enumerate() {
                if s[c].is_none() {
                    return Err(Error::parse(source_name, format!("missing column {chan}:{id}")));
                }
            }
            cols.push([s[0].unwrap(), s[1].unwrap(), s[2].unwrap()]);
        }

        let (mut v, mut p, mut q) = (Vec::new(), Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::parse(source_name, e.to_string()))?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            if rec.len() != header.len() {
                return Err(Error::parse(
                    source_name,
                    format!("line {line}: expected {} fields, found {}", header.len(), rec.len()),
                ));
            }
            for c in &cols {
                for (k, dst) in [&mut v, &mut p, &mut q].into_iter().enumerate() {
                    let raw = rec[c[k]].trim();
                    let x: f64 = raw.parse().map_err(|_| {
                        Error::parse(
                            source_name,
                            format!("line {line}, column {}: expected a number, found {raw:?}", &header[c[k]]),
                        )
                    })?;
                    if !x.is_finite() {
                        return Err(Error::parse(
                            source_name,
                            format!("line {line}, column {}: value is not finite", &header[c[k]]),
                        ));
                    }
                    dst.push(x);
                }
            }
        }
        if v.is_empty() {
            return Err(Error::parse(source_name, "no data rows"));
        }
        MeasurementSet::new(nodes, v, p, q)
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}
