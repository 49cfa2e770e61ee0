//! Second-moment statistics and the distance estimates built from them.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lcpf::MeasurementSet;

/// Moments at the observed buses.
///
/// `vp[a][b] = E[v_a p_b]`, `vq[a][b] = E[v_a q_b]`, and the per-bus
/// injection moments `pp[b] = E[p_b²]`, `qq[b] = E[q_b²]`, `pq[b] = E[p_b q_b]`.
/// `count` is the number of samples averaged, or `None` for exact
/// (infinite-sample) moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentSet {
    pub nodes: Vec<String>,
    pub count: Option<u64>,
    pub vp: Vec<Vec<f64>>,
    pub vq: Vec<Vec<f64>>,
    pub pp: Vec<f64>,
    pub qq: Vec<f64>,
    pub pq: Vec<f64>,
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
struct Compensated {
    sum: f64,
    carry: f64,
}

impl Compensated {
    #[inline]
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn absorb(&mut self, other: &Compensated) {
        self.add(other.sum);
        self.add(other.carry);
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Streaming accumulator of product sums. Chunks can be accumulated
/// independently and merged.
#[derive(Clone, Debug)]
pub struct MomentAccumulator {
    nodes: Vec<String>,
    count: u64,
    vp: Vec<Compensated>,
    vq: Vec<Compensated>,
    pp: Vec<Compensated>,
    qq: Vec<Compensated>,
    pq: Vec<Compensated>,
}

impl MomentAccumulator {
    pub fn new(nodes: Vec<String>) -> Self {
        let n = nodes.len();
        MomentAccumulator {
            nodes,
            count: 0,
            vp: vec![Compensated::default(); n * n],
            vq: vec![Compensated::default(); n * n],
            pp: vec![Compensated::default(); n],
            qq: vec![Compensated::default(); n],
            pq: vec![Compensated::default(); n],
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push(&mut self, v: &[f64], p: &[f64], q: &[f64]) {
        let n = self.nodes.len();
        for a in 0..n {
            let va = v[a];
            let row_p = &mut self.vp[a * n..(a + 1) * n];
            for (acc, &pb) in row_p.iter_mut().zip(p) {
                acc.add(va * pb);
            }
            let row_q = &mut self.vq[a * n..(a + 1) * n];
            for (acc, &qb) in row_q.iter_mut().zip(q) {
                acc.add(va * qb);
            }
        }
        for b in 0..n {
            self.pp[b].add(p[b] * p[b]);
            self.qq[b].add(q[b] * q[b]);
            self.pq[b].add(p[b] * q[b]);
        }
        self.count += 1;
    }

    pub fn push_all(&mut self, ms: &MeasurementSet) {
        for t in 0..ms.samples {
            let (v, p, q) = ms.row(t);
            self.push(v, p, q);
        }
    }

    pub fn merge(&mut self, other: &MomentAccumulator) -> Result<()> {
        if self.nodes != other.nodes {
            return Err(Error::Invalid("cannot merge moments over different node lists".into()));
        }
        for (dst, src) in [
            (&mut self.vp, &other.vp),
            (&mut self.vq, &other.vq),
            (&mut self.pp, &other.pp),
            (&mut self.qq, &other.qq),
            (&mut self.pq, &other.pq),
        ] {
            for (d, s) in dst.iter_mut().zip(src) {
                d.absorb(s);
            }
        }
        self.count += other.count;
        Ok(())
    }

    pub fn finish(&self) -> Result<MomentSet> {
        if self.count == 0 {
            return Err(Error::Invalid("no samples accumulated".into()));
        }
        let n = self.nodes.len();
        let t = self.count as f64;
        let mean = |xs: &[Compensated]| xs.iter().map(|c| c.value() / t).collect::<Vec<_>>();
        let square = |xs: &[Compensated]| {
            (0..n)
                .map(|a| xs[a * n..(a + 1) * n].iter().map(|c| c.value() / t).collect())
                .collect::<Vec<Vec<f64>>>()
        };
        Ok(MomentSet {
            nodes: self.nodes.clone(),
            count: Some(self.count),
            vp: square(&self.vp),
            vq: square(&self.vq),
            pp: mean(&self.pp),
            qq: mean(&self.qq),
            pq: mean(&self.pq),
        })
    }
}

const CHUNK_ROWS: usize = 1024;

/// Sample means of the moment products. Values are not re-centred: the model
/// variables are deviations with zero mean by construction.
///
/// Rows are processed in fixed-size chunks that are merged in order, so the
/// result does not depend on the number of worker threads.
pub fn accumulate(ms: &MeasurementSet) -> Result<MomentSet> {
    if ms.samples == 0 {
        return Err(Error::Invalid("measurement set is empty".into()));
    }
    let chunks: Vec<MomentAccumulator> = (0..ms.samples.div_ceil(CHUNK_ROWS))
        .into_par_iter()
        .map(|c| {
            let mut acc = MomentAccumulator::new(ms.nodes.clone());
            for t in c * CHUNK_ROWS..((c + 1) * CHUNK_ROWS).min(ms.samples) {
                let (v, p, q) = ms.row(t);
                acc.push(v, p, q);
            }
            acc
        })
        .collect();
    let mut total = MomentAccumulator::new(ms.nodes.clone());
    for c in &chunks {
        total.merge(c)?;
    }
    total.finish()
}

/// Count-weighted average of two sample moment sets.
pub fn merge(m1: &MomentSet, m2: &MomentSet) -> Result<MomentSet> {
    if m1.nodes != m2.nodes {
        return Err(Error::Invalid("cannot merge moments over different node lists".into()));
    }
    let (n1, n2) = match (m1.count, m2.count) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Invalid("exact moments cannot be merged with samples".into())),
    };
    if n2 == 0 {
        return Ok(m1.clone());
    }
    if n1 == 0 {
        return Ok(m2.clone());
    }
    let total = n1 + n2;
    let (w1, w2) = (n1 as f64 / total as f64, n2 as f64 / total as f64);
    let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| w1 * x + w2 * y).collect::<Vec<_>>();
    Ok(MomentSet {
        nodes: m1.nodes.clone(),
        count: Some(total),
        vp: m1.vp.iter().zip(&m2.vp).map(|(a, b)| mix(a, b)).collect(),
        vq: m1.vq.iter().zip(&m2.vq).map(|(a, b)| mix(a, b)).collect(),
        pp: mix(&m1.pp, &m2.pp),
        qq: mix(&m1.qq, &m2.qq),
        pq: mix(&m1.pq, &m2.pq),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub node: String,
    pub det: f64,
    pub pass: bool,
}

impl MomentSet {
    /// An empty sample set over `nodes`; the identity element of [`merge`].
    pub fn empty(nodes: Vec<String>) -> Self {
        let n = nodes.len();
        MomentSet {
            nodes,
            count: Some(0),
            vp: vec![vec![0.0; n]; n],
            vq: vec![vec![0.0; n]; n],
            pp: vec![0.0; n],
            qq: vec![0.0; n],
            pq: vec![0.0; n],
        }
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n == id)
    }

    fn require(&self, id: &str) -> Result<usize> {
        self.index_of(id)
            .ok_or_else(|| Error::Invalid(format!("no moments for node {id:?}")))
    }

    /// `E[p_b²] E[q_b²] − E[p_b q_b]²`.
    pub fn injection_det(&self, b: usize) -> f64 {
        self.pp[b] * self.qq[b] - self.pq[b] * self.pq[b]
    }

    /// Default conditioning threshold: a tenth of the median injection
    /// covariance determinant.
    pub fn default_lambda(&self) -> f64 {
        let mut dets: Vec<f64> = (0..self.nodes.len()).map(|b| self.injection_det(b).abs()).collect();
        if dets.is_empty() {
            return 0.0;
        }
        dets.sort_by(f64::total_cmp);
        let k = dets.len();
        let median = if k % 2 == 1 {
            dets[k / 2]
        } else {
            0.5 * (dets[k / 2 - 1] + dets[k / 2])
        };
        0.1 * median
    }

    /// Moments of injections scaled by `alpha`.
    pub fn scaled(&self, alpha: f64) -> MomentSet {
        let a2 = alpha * alpha;
        let s = |xs: &[f64]| xs.iter().map(|x| x * a2).collect::<Vec<_>>();
        MomentSet {
            nodes: self.nodes.clone(),
            count: self.count,
            vp: self.vp.iter().map(|r| s(r)).collect(),
            vq: self.vq.iter().map(|r| s(r)).collect(),
            pp: s(&self.pp),
            qq: s(&self.qq),
            pq: s(&self.pq),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        let square = |m: &[Vec<f64>]| m.len() == n && m.iter().all(|r| r.len() == n);
        if !square(&self.vp) || !square(&self.vq) || self.pp.len() != n || self.qq.len() != n || self.pq.len() != n {
            return Err(Error::Invalid("moment tables do not match the node list".into()));
        }
        let finite = self
            .vp
            .iter()
            .chain(&self.vq)
            .flatten()
            .chain(&self.pp)
            .chain(&self.qq)
            .chain(&self.pq)
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::Invalid("moment tables contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("moment serialisation cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: MomentSet = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let m: MomentSet =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        m.validate()
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}

/// Per-bus pass/fail against `|E[p²]E[q²] − E[pq]²| ≥ λ`.
pub fn conditioning_check(m: &MomentSet, lambda: f64) -> Vec<Conditioning> {
    (0..m.nodes.len())
        .map(|b| {
            let det = m.injection_det(b);
            Conditioning {
                node: m.nodes[b].clone(),
                det,
                pass: det.abs() >= lambda,
            }
        })
        .collect()
}

/// Solves the 2×2 injection-covariance system of bus `b` for
/// `(H_r⁻¹(a,b), H_x⁻¹(a,b))`, by index.
fn solve_pair(m: &MomentSet, a: usize, b: usize, lambda: f64) -> Result<(f64, f64)> {
    let det = m.injection_det(b);
    if det.abs() < lambda || det == 0.0 {
        return Err(Error::Conditioning {
            node: m.nodes[b].clone(),
            det,
            lambda,
        });
    }
    let (s_pp, s_qq, s_pq) = (m.pp[b], m.qq[b], m.pq[b]);
    let (rp, rq) = (m.vp[a][b], m.vq[a][b]);
    Ok(((s_qq * rp - s_pq * rq) / det, (s_pp * rq - s_pq * rp) / det))
}

pub fn estimate_h_pair(m: &MomentSet, a: &str, b: &str, lambda: f64) -> Result<(f64, f64)> {
    solve_pair(m, m.require(a)?, m.require(b)?, lambda)
}

/// Estimated `H_r⁻¹` and `H_x⁻¹` restricted to `nodes`; entry `(a, b)` is
/// solved from voltages at `a` and injections at `b`.
pub fn estimate_h_matrices(m: &MomentSet, nodes: &[String], lambda: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let idx = nodes.iter().map(|id| m.require(id)).collect::<Result<Vec<_>>>()?;
    let k = idx.len();
    let mut hr = DMatrix::zeros(k, k);
    let mut hx = DMatrix::zeros(k, k);
    for (i, &a) in idx.iter().enumerate() {
        for (j, &b) in idx.iter().enumerate() {
            let (r, x) = solve_pair(m, a, b, lambda)?;
            hr[(i, j)] = r;
            hx[(i, j)] = x;
        }
    }
    Ok((hr, hx))
}

/// How the two per-pair estimates of a distance are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    /// `d(a,b) = H(a,a) + H(b,b) − (H(a,b) + H(b,a))`; symmetric.
    #[default]
    Symmetric,
    /// `d(a,b) = H(a,a) + H(b,b) − 2 H(a,b)`: row `a` uses only voltages at
    /// `a`. Not symmetric, but differences along a row share the voltage
    /// noise of that bus, which cancels in `Φ`.
    Oriented,
}

/// Effective resistance (`d_r`) and reactance (`d_x`) between observed buses.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub nodes: Vec<String>,
    pub d_r: DMatrix<f64>,
    pub d_x: DMatrix<f64>,
}

impl DistanceMatrix {
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n == id)
    }
}

fn distances_from_h(h: &DMatrix<f64>, pairing: Pairing) -> DMatrix<f64> {
    let k = h.nrows();
    DMatrix::from_fn(k, k, |a, b| {
        if a == b {
            return 0.0;
        }
        let cross = match pairing {
            Pairing::Symmetric => h[(a, b)] + h[(b, a)],
            Pairing::Oriented => 2.0 * h[(a, b)],
        };
        h[(a, a)] + h[(b, b)] - cross
    })
}

pub fn estimate_distances_with(
    m: &MomentSet,
    nodes: &[String],
    lambda: f64,
    pairing: Pairing,
) -> Result<DistanceMatrix> {
    let (hr, hx) = estimate_h_matrices(m, nodes, lambda)?;
    Ok(DistanceMatrix {
        nodes: nodes.to_vec(),
        d_r: distances_from_h(&hr, pairing),
        d_x: distances_from_h(&hx, pairing),
    })
}

/// Symmetric distance estimates over `nodes`.
pub fn estimate_distances(m: &MomentSet, nodes: &[String], lambda: f64) -> Result<DistanceMatrix> {
    estimate_distances_with(m, nodes, lambda, Pairing::Symmetric)
}
