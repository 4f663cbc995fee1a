//! Sampling campaign over the uncertain inputs: RBF interpolation of the
//! initial latent state, bound-constrained sampling, streamed outcome
//! records and binned ignition-probability maps with iso-probability
//! contours.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::BranchClassifier;
use crate::contour::{marching_squares, Polyline};
use crate::dynamics::{LatentOde, Rollout, Trajectory};
use crate::error::{Error, Result};
use crate::uncertainty::{ParamVector, N_XI};

pub type Bounds = [(f64, f64); N_XI];

pub const DEFAULT_RIDGE: f64 = 1e-8;
pub const CONTOUR_LEVELS: [f64; 3] = [0.5, 0.75, 0.9];

/// Gaussian-kernel interpolant of `V0` over standardized ξ, on top of the
/// mean training value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfModel {
    pub centers: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub length_scale: f64,
    pub ridge: f64,
    pub mean: Vec<f64>,
    /// `[n_centers][latent_dim]`.
    pub weights: Vec<Vec<f64>>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance.
pub fn median_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut d = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(dist2(&points[i], &points[j]).sqrt());
        }
    }
    crate::metrics::median(&d).unwrap_or(1.0)
}

/// Fits the interpolant; `length_scale = None` picks the median pairwise
/// distance of the centers.
pub fn fit_rbf(training: &[(ParamVector, Vec<f64>)], length_scale: Option<f64>, ridge: f64) -> Result<RbfModel> {
    let Some(first) = training.first() else {
        return Err(Error::Input("RBF needs at least one center".into()));
    };
    let dim = first.1.len();
    if training.iter().any(|t| t.1.len() != dim) {
        return Err(Error::dim("fit_rbf", "initial states must share a dimension"));
    }
    if !(ridge >= 0.0) {
        return Err(Error::Config(format!("ridge must be non-negative, got {ridge}")));
    }
    let centers: Vec<Vec<f64>> = training.iter().map(|t| t.0.standardized().to_vec()).collect();
    let values: Vec<Vec<f64>> = training.iter().map(|t| t.1.clone()).collect();
    let n = centers.len();
    for i in 0..n {
        for j in i + 1..n {
            if dist2(&centers[i], &centers[j]) < 1e-24 && values[i] != values[j] {
                return Err(Error::Conditioning { i, j });
            }
        }
    }
    let ell = match length_scale {
        Some(l) if l > 0.0 => l,
        Some(l) => return Err(Error::Config(format!("length scale must be positive, got {l}"))),
        None => median_pairwise_distance(&centers).max(1e-12),
    };
    let mut mean = vec![0.0; dim];
    for v in &values {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n as f64;
        }
    }
    let k = DMatrix::from_fn(n, n, |i, j| (-dist2(&centers[i], &centers[j]) / (2.0 * ell * ell)).exp() + if i == j { ridge } else { 0.0 });
    let chol = k.cholesky().ok_or(Error::Conditioning { i: 0, j: n - 1 })?;
    let mut weights = vec![vec![0.0; dim]; n];
    for c in 0..dim {
        let rhs = DVector::from_iterator(n, values.iter().map(|v| v[c] - mean[c]));
        let w = chol.solve(&rhs);
        for i in 0..n {
            weights[i][c] = w[i];
        }
    }
    Ok(RbfModel {
        centers,
        values,
        length_scale: ell,
        ridge,
        mean,
        weights,
    })
}

impl RbfModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn predict(&self, xi: &ParamVector) -> Vec<f64> {
        let x = xi.standardized();
        let mut out = self.mean.clone();
        let inv = 1.0 / (2.0 * self.length_scale * self.length_scale);
        for (c, w) in self.centers.iter().zip(&self.weights) {
            let k = (-dist2(c, &x) * inv).exp();
            crate::kernels::axpy(k, w, &mut out);
        }
        out
    }
}

/// Component-wise `(min, max)` over an ensemble.
pub fn ensemble_bounds(xis: &[ParamVector]) -> Result<Bounds> {
    if xis.is_empty() {
        return Err(Error::Input("bounds need a non-empty ensemble".into()));
    }
    let mut b = [(f64::INFINITY, f64::NEG_INFINITY); N_XI];
    for x in xis {
        for (slot, &v) in b.iter_mut().zip(x.values()) {
            slot.0 = slot.0.min(v);
            slot.1 = slot.1.max(v);
        }
    }
    Ok(b)
}

pub fn constrain_sample(xi: &ParamVector, bounds: &Bounds) -> bool {
    xi.values().iter().zip(bounds).all(|(&v, &(lo, hi))| lo <= v && v <= hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Success,
    Failure,
    Invalid,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Success => "success",
            Label::Failure => "failure",
            Label::Invalid => "invalid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub index: u64,
    pub xi: ParamVector,
    pub label: Label,
    pub t_end: f64,
    pub v_terminal: Vec<f64>,
}

impl OutcomeRecord {
    pub fn csv_header(latent_dim: usize) -> String {
        let mut h = vec!["index".to_string()];
        h.extend((0..N_XI).map(|i| format!("xi{i}")));
        h.push("label".into());
        h.push("t_end".into());
        h.extend((0..latent_dim).map(|i| format!("v{i}")));
        h.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut r = vec![self.index.to_string()];
        r.extend(self.xi.values().iter().map(|v| format!("{v:e}")));
        r.push(self.label.as_str().into());
        r.push(format!("{:e}", self.t_end));
        r.extend(self.v_terminal.iter().map(|v| format!("{v:e}")));
        r.join(",")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub n_samples: u64,
    pub seed: u64,
    /// Integration grid (µs), the grid the classifier was calibrated on.
    pub times: Vec<f64>,
    /// Samples integrated together; results do not depend on it.
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub accepted: u64,
    pub rejected: u64,
    pub successes: u64,
    pub failures: u64,
    pub invalid: u64,
}

impl CampaignSummary {
    /// Ignition fraction over valid records.
    pub fn success_fraction(&self) -> Option<f64> {
        let n = self.successes + self.failures;
        (n > 0).then(|| self.successes as f64 / n as f64)
    }
}

/// The deployed surrogate pieces a campaign needs.
pub struct Surrogate<'a> {
    pub node: &'a LatentOde,
    pub rbf: &'a RbfModel,
    pub classifier: &'a BranchClassifier,
    pub bounds: &'a Bounds,
}

/// Draws `n_samples` accepted inputs, predicts and classifies each, and
/// hands records to `sink` in sample order. Memory use is bounded by the
/// batch size.
pub fn run_campaign(s: &Surrogate, cfg: &CampaignConfig, sink: &mut dyn FnMut(&OutcomeRecord) -> Result<()>) -> Result<CampaignSummary> {
    if s.rbf.dim() != s.node.cfg.latent_dim {
        return Err(Error::Config(format!(
            "RBF predicts {} latent components, the ODE expects {}",
            s.rbf.dim(),
            s.node.cfg.latent_dim
        )));
    }
    if cfg.times.len() < 4 {
        return Err(Error::Input("campaign grid needs at least 4 times".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut summary = CampaignSummary::default();
    let batch = cfg.batch.max(1) as u64;
    let t_end = *cfg.times.last().unwrap();
    let mut index = 0u64;
    while index < cfg.n_samples {
        let take = batch.min(cfg.n_samples - index) as usize;
        let mut xis = Vec::with_capacity(take);
        while xis.len() < take {
            let xi = ParamVector::sample(&mut rng);
            if constrain_sample(&xi, s.bounds) {
                xis.push(xi);
            } else {
                summary.rejected += 1;
            }
        }
        let v0s: Vec<Vec<f64>> = xis.iter().map(|x| s.rbf.predict(x)).collect();
        let std: Vec<_> = xis.iter().map(|x| x.standardized()).collect();
        let rollouts = s.node.integrate_batch(&v0s, &std, &cfg.times)?;
        for (xi, r) in xis.into_iter().zip(rollouts) {
            let (label, v_terminal) = match r {
                Rollout::Ok(states) => {
                    let last = states.last().unwrap().clone();
                    let traj = Trajectory::new(cfg.times.clone(), states)?;
                    let label = if s.classifier.classify(&traj)? { Label::Success } else { Label::Failure };
                    (label, last)
                }
                Rollout::Diverged { step } => {
                    log::warn!("sample {index}: trajectory diverged at step {step}");
                    (Label::Invalid, vec![f64::NAN; s.node.cfg.latent_dim])
                }
            };
            match label {
                Label::Success => summary.successes += 1,
                Label::Failure => summary.failures += 1,
                Label::Invalid => summary.invalid += 1,
            }
            summary.accepted += 1;
            sink(&OutcomeRecord {
                index,
                xi,
                label,
                t_end,
                v_terminal,
            })?;
            index += 1;
        }
    }
    Ok(summary)
}

/// Binned success counts over two input components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityMap {
    pub axis_a: usize,
    pub axis_b: usize,
    pub edges_a: Vec<f64>,
    pub edges_b: Vec<f64>,
    /// Row-major `[bins_a, bins_b]`.
    pub counts_success: Vec<u64>,
    pub counts_total: Vec<u64>,
    /// `(level, polylines)` in `(ξ_a, ξ_b)` units.
    pub contours: Vec<(f64, Vec<Polyline>)>,
}

fn edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins).map(|k| lo + (hi - lo) * k as f64 / bins as f64).collect()
}

fn bin_of(edges: &[f64], v: f64) -> Option<usize> {
    let n = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[n]);
    if v < lo || v > hi {
        return None;
    }
    Some((((v - lo) / (hi - lo) * n as f64) as usize).min(n - 1))
}

impl ProbabilityMap {
    /// Empty map over `ranges` of the two axes.
    pub fn new(axis_a: usize, axis_b: usize, range_a: (f64, f64), range_b: (f64, f64), bins: (usize, usize)) -> Result<Self> {
        if axis_a == axis_b || axis_a >= N_XI || axis_b >= N_XI {
            return Err(Error::Input(format!("map axes must be distinct components, got {axis_a} and {axis_b}")));
        }
        if bins.0 < 2 || bins.1 < 2 || !(range_a.1 > range_a.0) || !(range_b.1 > range_b.0) {
            return Err(Error::Config("maps need at least 2 bins per axis over non-empty ranges".into()));
        }
        Ok(Self {
            axis_a,
            axis_b,
            edges_a: edges(range_a.0, range_a.1, bins.0),
            edges_b: edges(range_b.0, range_b.1, bins.1),
            counts_success: vec![0; bins.0 * bins.1],
            counts_total: vec![0; bins.0 * bins.1],
            contours: Vec::new(),
        })
    }

    pub fn bins(&self) -> (usize, usize) {
        (self.edges_a.len() - 1, self.edges_b.len() - 1)
    }

    /// Adds one record; invalid records are skipped.
    pub fn add(&mut self, r: &OutcomeRecord) {
        if r.label == Label::Invalid {
            return;
        }
        let (Some(i), Some(j)) = (bin_of(&self.edges_a, r.xi.get(self.axis_a)), bin_of(&self.edges_b, r.xi.get(self.axis_b))) else {
            return;
        };
        let k = i * self.bins().1 + j;
        self.counts_total[k] += 1;
        if r.label == Label::Success {
            self.counts_success[k] += 1;
        }
    }

    /// Per-cell `successes / total`, `None` for empty cells.
    pub fn p_hat(&self) -> Vec<Option<f64>> {
        self.counts_success
            .iter()
            .zip(&self.counts_total)
            .map(|(&s, &t)| (t > 0).then(|| s as f64 / t as f64))
            .collect()
    }

    /// 3×3 box mean of `p_hat` over non-empty neighbours; `NaN` where the
    /// cell itself is empty.
    pub fn smoothed(&self) -> Vec<f64> {
        let (na, nb) = self.bins();
        let p = self.p_hat();
        let mut out = vec![f64::NAN; na * nb];
        for i in 0..na {
            for j in 0..nb {
                if p[i * nb + j].is_none() {
                    continue;
                }
                let (mut s, mut c) = (0.0, 0.0);
                for ii in i.saturating_sub(1)..(i + 2).min(na) {
                    for jj in j.saturating_sub(1)..(j + 2).min(nb) {
                        if let Some(v) = p[ii * nb + jj] {
                            s += v;
                            c += 1.0;
                        }
                    }
                }
                out[i * nb + j] = s / c;
            }
        }
        out
    }

    pub fn cell_centers(&self) -> (Vec<f64>, Vec<f64>) {
        let mid = |e: &[f64]| e.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect::<Vec<_>>();
        (mid(&self.edges_a), mid(&self.edges_b))
    }

    pub fn cell_widths(&self) -> (f64, f64) {
        (self.edges_a[1] - self.edges_a[0], self.edges_b[1] - self.edges_b[0])
    }

    /// Extracts iso-probability lines of the smoothed map at `levels`.
    pub fn compute_contours(&mut self, levels: &[f64]) -> Result<()> {
        if levels.iter().any(|&l| !(l > 0.0 && l < 1.0)) {
            return Err(Error::Config("contour levels must lie strictly inside (0, 1)".into()));
        }
        let sm = self.smoothed();
        let (xs, ys) = self.cell_centers();
        self.contours = levels.iter().map(|&l| (l, marching_squares(&sm, &xs, &ys, l))).collect();
        Ok(())
    }

    /// Mean absolute `p_hat` difference over cells filled in both maps.
    pub fn mean_abs_diff(&self, other: &ProbabilityMap) -> Result<f64> {
        if self.bins() != other.bins() || self.axis_a != other.axis_a || self.axis_b != other.axis_b {
            return Err(Error::dim("mean_abs_diff", "maps must share axes and bins"));
        }
        let (a, b) = (self.p_hat(), other.p_hat());
        let diffs: Vec<f64> = a.iter().zip(&b).filter_map(|(x, y)| Some((x.as_ref()? - y.as_ref()?).abs())).collect();
        if diffs.is_empty() {
            return Err(Error::Input("maps share no filled cells".into()));
        }
        Ok(diffs.iter().sum::<f64>() / diffs.len() as f64)
    }

    /// Grid CSV: one row per cell.
    pub fn write_grid_csv(&self, w: &mut dyn Write) -> std::io::Result<()> {
        let (na, nb) = self.bins();
        let (xs, ys) = self.cell_centers();
        let sm = self.smoothed();
        writeln!(w, "xi{},xi{},successes,total,p_hat,p_smoothed", self.axis_a, self.axis_b)?;
        for i in 0..na {
            for j in 0..nb {
                let k = i * nb + j;
                let p = self.p_hat()[k].map_or(String::new(), |v| format!("{v:e}"));
                let s = if sm[k].is_nan() { String::new() } else { format!("{:e}", sm[k]) };
                writeln!(w, "{:e},{:e},{},{},{},{}", xs[i], ys[j], self.counts_success[k], self.counts_total[k], p, s)?;
            }
        }
        Ok(())
    }

    pub fn write_contours_csv(&self, w: &mut dyn Write) -> std::io::Result<()> {
        writeln!(w, "level,line,vertex,xi{},xi{}", self.axis_a, self.axis_b)?;
        for (level, lines) in &self.contours {
            for (li, line) in lines.iter().enumerate() {
                for (vi, &(x, y)) in line.iter().enumerate() {
                    writeln!(w, "{level},{li},{vi},{x:e},{y:e}")?;
                }
            }
        }
        Ok(())
    }

    /// Binary greyscale raster of `p_hat` (rows along axis b, top = high);
    /// empty cells are black.
    pub fn write_pgm(&self, w: &mut dyn Write) -> std::io::Result<()> {
        let (na, nb) = self.bins();
        let p = self.p_hat();
        write!(w, "P5\n{na} {nb}\n255\n")?;
        let mut px = Vec::with_capacity(na * nb);
        for j in (0..nb).rev() {
            for i in 0..na {
                px.push(p[i * nb + j].map_or(0, |v| (v * 255.0).round() as u8));
            }
        }
        w.write_all(&px)
    }
}
