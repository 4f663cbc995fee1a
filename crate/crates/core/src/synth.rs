//! Synthetic ignition ensemble: a two-regime emission kernel whose fate is
//! set by a logistic switch over four of the uncertain inputs, rendered to
//! 2-D fields as the straight-ray projection of a 3-D Gaussian blob.
//!
//! Before the ignition time every trial evolves alike (radius grows
//! slowly, intensity relaxes). Afterwards the kernel either keeps growing
//! with a small oscillation or decays away. The strength of either branch
//! ramps with the switch argument, so trajectories vary continuously in ξ
//! while the outcome is the sign of that argument.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uncertainty::{ParamVector, COMPONENTS, N_XI};

/// Switch weights on the standardized inputs `(ξ̃2, ξ̃4, ξ̃5, ξ̃6)`.
pub const SWITCH_WEIGHTS: [(usize, f64); 4] = [(2, 2.0), (4, 2.0), (5, 2.0), (6, -0.5)];
pub const DEFAULT_THETA0: f64 = 1.0;
pub const IGNITION_TIME_US: f64 = 250.0;
pub const OSCILLATION_PERIOD_US: f64 = 60.0;
/// Width of the smooth ramp between the branches, in switch-argument units.
const BRANCH_RAMP: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// `(rows, cols)`.
    pub grid: (usize, usize),
    pub n_trials: usize,
    pub n_snapshots: usize,
    pub horizon_us: f64,
    pub pixel_mm: f64,
    pub theta0: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid: (96, 48),
            n_trials: 300,
            n_snapshots: 20,
            horizon_us: 500.0,
            pixel_mm: 0.1,
            theta0: DEFAULT_THETA0,
            seed: 2024,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_snapshots < 3 {
            return Err(Error::Config(format!("need at least 3 snapshots, got {}", self.n_snapshots)));
        }
        let (h, w) = self.grid;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!("grid {h}x{w} must be divisible by 8")));
        }
        if self.n_trials == 0 || !(self.horizon_us > 0.0) || !(self.pixel_mm > 0.0) {
            return Err(Error::Config("n_trials, horizon_us and pixel_mm must be positive".into()));
        }
        Ok(())
    }

    /// Uniform snapshot times over `[0, horizon_us]`.
    pub fn times(&self) -> Vec<f64> {
        let n = self.n_snapshots;
        (0..n).map(|k| self.horizon_us * k as f64 / (n - 1) as f64).collect()
    }

    /// Kernel center: the middle of the frame.
    pub fn center(&self) -> (f64, f64) {
        let (h, w) = self.grid;
        (0.5 * w as f64 * self.pixel_mm, 0.5 * h as f64 * self.pixel_mm)
    }

    /// Radiance level playing the role of the ignition isotherm.
    pub fn isotherm_level(&self) -> f64 {
        ISOTHERM_LEVEL
    }
}

const ISOTHERM_LEVEL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Growing,
    Dissipating,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelState {
    /// `(x, y)` in mm; x runs along columns.
    pub center: (f64, f64),
    pub radius: f64,
    pub intensity: f64,
    pub regime: Regime,
}

pub fn sample_xi(rng: &mut ChaCha8Rng) -> ParamVector {
    ParamVector::sample(rng)
}

/// `Σ w_i ξ̃_i − θ0`; the trial ignites iff this is non-negative.
pub fn switch_argument(xi: &ParamVector, theta0: f64) -> f64 {
    let s = xi.standardized();
    SWITCH_WEIGHTS.iter().map(|&(i, w)| w * s[i]).sum::<f64>() - theta0
}

/// Logistic switch `σ(z)`.
pub fn switch_probability(xi: &ParamVector, theta0: f64) -> f64 {
    1.0 / (1.0 + (-switch_argument(xi, theta0)).exp())
}

pub fn outcome(xi: &ParamVector, theta0: f64) -> bool {
    switch_argument(xi, theta0) >= 0.0
}

/// Kernel states on `t_grid` (µs) and the outcome.
pub fn evolve_kernel(xi: &ParamVector, t_grid: &[f64], cfg: &SynthConfig) -> Result<(Vec<KernelState>, bool)> {
    if t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Input("time grid must be strictly increasing".into()));
    }
    let s = xi.standardized();
    let z = switch_argument(xi, cfg.theta0);
    let success = z >= 0.0;
    let regime = if success { Regime::Growing } else { Regime::Dissipating };
    let kappa = (z / BRANCH_RAMP).tanh();
    let (grow, decay) = (kappa.max(0.0), (-kappa).max(0.0));
    let r0 = 0.6 + 0.08 * s[4] + 0.04 * s[5];
    let i0 = 1.0 + 0.1 * s[5];
    let early = |t: f64| {
        let r = r0 * (1.0 + 0.5 * (1.0 - (-t / 100.0).exp()));
        let i = i0 * (0.35 + 0.65 * (-t / 80.0).exp());
        (r, i)
    };
    let (r_ign, i_ign) = early(IGNITION_TIME_US);
    let states = t_grid
        .iter()
        .map(|&t| {
            let (radius, intensity) = if t < IGNITION_TIME_US {
                early(t.max(0.0))
            } else {
                let d = t - IGNITION_TIME_US;
                let rise = 1.0 - (-d / 120.0).exp();
                let r = r_ign * (1.0 + 0.8 * grow * rise);
                let osc = 1.0 + 0.01 * grow * (2.0 * std::f64::consts::PI * d / OSCILLATION_PERIOD_US).sin();
                let fade = (1.0 - decay) + decay * (-d / 60.0).exp();
                (r, i_ign * fade * (1.0 + 0.6 * grow * rise) * osc)
            };
            KernelState {
                center: cfg.center(),
                radius,
                intensity: intensity.max(0.0),
                regime,
            }
        })
        .collect();
    Ok((states, success))
}

/// Static co-flow streak: a low-amplitude gradient along x.
fn background(x: f64, width_mm: f64) -> f64 {
    0.02 + 0.05 * x / width_mm
}

/// Projected emission of `k` on the configured grid (row-major `H × W`).
pub fn render_ir(k: &KernelState, cfg: &SynthConfig) -> Result<Vec<f64>> {
    let (h, w) = cfg.grid;
    let px = cfg.pixel_mm;
    let (cx, cy) = k.center;
    if cx < 0.0 || cy < 0.0 || cx > w as f64 * px || cy > h as f64 * px {
        return Err(Error::Input(format!("kernel center ({cx}, {cy}) mm outside the frame")));
    }
    if !(k.radius > 0.0) {
        return Err(Error::Input(format!("kernel radius must be positive, got {}", k.radius)));
    }
    let amp = k.intensity * (2.0 * std::f64::consts::PI).sqrt() * k.radius;
    let inv = 1.0 / (2.0 * k.radius * k.radius);
    let width_mm = w as f64 * px;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let y = (i as f64 + 0.5) * px;
        for j in 0..w {
            let x = (j as f64 + 0.5) * px;
            let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            out.push(amp * (-d2 * inv).exp() + background(x, width_mm));
        }
    }
    Ok(out)
}

/// One generated trial with raw (un-normalized) frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTrial {
    pub id: usize,
    pub xi: ParamVector,
    pub success: bool,
    pub times: Vec<f64>,
    pub frames: Vec<Vec<f64>>,
}

impl SynthTrial {
    /// `(min, max)` over every pixel of every frame.
    pub fn value_range(&self) -> (f64, f64) {
        self.frames.iter().flatten().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub cfg: SynthConfig,
    pub trials: Vec<SynthTrial>,
}

impl SynthDataset {
    pub fn success_fraction(&self) -> f64 {
        self.trials.iter().filter(|t| t.success).count() as f64 / self.trials.len() as f64
    }
}

fn draw_inputs(n: usize, seed: u64) -> Vec<ParamVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_xi(&mut rng)).collect()
}

/// Generates the ensemble in memory. If the success fraction falls outside
/// `[0.25, 0.75]` the threshold is moved to the median switch argument
/// and the outcomes recomputed; the adjusted value is kept in the config.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let xis = draw_inputs(cfg.n_trials, cfg.seed);
    let mut cfg = cfg.clone();
    let frac = xis.iter().filter(|x| outcome(x, cfg.theta0)).count() as f64 / xis.len() as f64;
    if xis.len() >= 4 && !(0.25..=0.75).contains(&frac) {
        let mut args: Vec<f64> = xis.iter().map(|x| switch_argument(x, 0.0)).collect();
        args.sort_by(f64::total_cmp);
        let theta = args[args.len() / 2];
        log::warn!("success fraction {frac:.3} outside [0.25, 0.75]; threshold moved from {} to {theta}", cfg.theta0);
        cfg.theta0 = theta;
    }
    let times = cfg.times();
    let trials: Vec<Result<SynthTrial>> = xis
        .par_iter()
        .enumerate()
        .map(|(id, xi)| {
            let (states, success) = evolve_kernel(xi, &times, &cfg)?;
            let frames = states.iter().map(|k| render_ir(k, &cfg)).collect::<Result<Vec<_>>>()?;
            Ok(SynthTrial {
                id,
                xi: *xi,
                success,
                times: times.clone(),
                frames,
            })
        })
        .collect();
    Ok(SynthDataset {
        trials: trials.into_iter().collect::<Result<_>>()?,
        cfg,
    })
}

/// Inputs and outcomes only, for statistics that need no fields.
pub fn sample_outcomes(n: usize, seed: u64, theta0: f64) -> Vec<(ParamVector, bool)> {
    draw_inputs(n, seed).into_iter().map(|x| (x, outcome(&x, theta0))).collect()
}

/// `P(Σ_i U_i ≤ t)` for independent `U_i ~ U[0, w_i]`, `w_i > 0`.
fn uniform_sum_cdf(widths: &[f64], t: f64) -> f64 {
    let n = widths.len();
    let total: f64 = widths.iter().sum();
    if t <= 0.0 {
        return 0.0;
    }
    if t >= total {
        return 1.0;
    }
    let mut fact = 1.0;
    for k in 1..=n {
        fact *= k as f64;
    }
    let prod: f64 = widths.iter().product();
    let mut acc = 0.0;
    for mask in 0u32..(1 << n) {
        let shift: f64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| widths[i]).sum();
        let r = t - shift;
        if r > 0.0 {
            let sign = if mask.count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            acc += sign * r.powi(n as i32);
        }
    }
    (acc / (fact * prod)).clamp(0.0, 1.0)
}

/// `P(Σ_k c_k ξ̃_k ≥ threshold)` with each `ξ̃_k` uniform on `[lo_k, hi_k]`.
/// Degenerate intervals act as constants.
pub fn linear_exceedance(terms: &[(f64, (f64, f64))], threshold: f64) -> f64 {
    let mut base = 0.0;
    let mut widths = Vec::new();
    for &(c, (lo, hi)) in terms {
        let (a, b) = (c * lo, c * hi);
        let (a, b) = (a.min(b), a.max(b));
        base += a;
        if b - a > 1e-15 {
            widths.push(b - a);
        }
    }
    if widths.is_empty() {
        return if base >= threshold { 1.0 } else { 0.0 };
    }
    1.0 - uniform_sum_cdf(&widths, threshold - base)
}

/// Exact success probability when ξ is drawn from the input distributions
/// restricted to the box `bounds` (raw units). Every switch component is
/// uniform, so the restriction stays uniform.
pub fn analytic_success_fraction(bounds: &[(f64, f64); N_XI], theta0: f64) -> f64 {
    let terms: Vec<(f64, (f64, f64))> = SWITCH_WEIGHTS
        .iter()
        .map(|&(i, w)| (w, standardized_interval(i, bounds[i])))
        .collect();
    linear_exceedance(&terms, theta0)
}

/// Success probability conditioned on two fixed components, the others
/// uniform on `bounds`.
pub fn analytic_conditional(bounds: &[(f64, f64); N_XI], theta0: f64, fixed: [(usize, f64); 2]) -> f64 {
    let terms: Vec<(f64, (f64, f64))> = SWITCH_WEIGHTS
        .iter()
        .map(|&(i, w)| {
            let iv = match fixed.iter().find(|(k, _)| *k == i) {
                Some(&(_, v)) => {
                    let s = crate::uncertainty::standardize(i, v);
                    (s, s)
                }
                None => standardized_interval(i, bounds[i]),
            };
            (w, iv)
        })
        .collect();
    linear_exceedance(&terms, theta0)
}

fn standardized_interval(i: usize, (lo, hi): (f64, f64)) -> (f64, f64) {
    let (a, b) = (crate::uncertainty::standardize(i, lo), crate::uncertainty::standardize(i, hi));
    (a.min(b), a.max(b))
}

/// Full supports of every component.
pub fn support_box() -> [(f64, f64); N_XI] {
    std::array::from_fn(|i| COMPONENTS[i].dist.support())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xi_with(vals: &[(usize, f64)]) -> ParamVector {
        let mut p = ParamVector::midpoint();
        for &(i, s) in vals {
            p = p.with(i, crate::uncertainty::destandardize(i, s)).unwrap();
        }
        p
    }

    #[test]
    fn corners_of_informative_trio() {
        let hi = xi_with(&[(2, 1.0), (4, 1.0), (5, 1.0)]);
        let lo = xi_with(&[(2, -1.0), (4, -1.0), (5, -1.0)]);
        // 2 + 2 + 2 - 1 = 5 and -6 - 1 = -7
        assert!((switch_argument(&hi, 1.0) - 5.0).abs() < 1e-12);
        assert!((switch_argument(&lo, 1.0) + 7.0).abs() < 1e-12);
        assert!(outcome(&hi, 1.0));
        assert!(!outcome(&lo, 1.0));
        let mid = ParamVector::midpoint();
        assert!((switch_probability(&mid, 1.0) - 1.0 / (1.0 + 1f64.exp())).abs() < 1e-12);
    }

    #[test]
    fn xi2_draws_match_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..10_000).map(|_| sample_xi(&mut rng).get(2)).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!(v.iter().all(|&x| (1.1..=2.1).contains(&x)));
        assert!((mean - 1.6).abs() < 0.02);
    }

    #[test]
    fn render_zero_intensity_is_background() {
        let cfg = SynthConfig::default();
        let k = KernelState {
            center: cfg.center(),
            radius: 0.5,
            intensity: 0.0,
            regime: Regime::Dissipating,
        };
        let f = render_ir(&k, &cfg).unwrap();
        assert!(f.iter().all(|&v| (0.02..=0.07).contains(&v)));
        let k2 = KernelState { intensity: 2.0, ..k };
        let k4 = KernelState { intensity: 4.0, ..k };
        let bg: f64 = f.iter().sum();
        let s2: f64 = render_ir(&k2, &cfg).unwrap().iter().sum::<f64>() - bg;
        let s4: f64 = render_ir(&k4, &cfg).unwrap().iter().sum::<f64>() - bg;
        assert!((s4 / s2 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn render_peak_at_nearest_pixel() {
        let cfg = SynthConfig::default();
        let k = KernelState {
            center: (1.23, 6.71),
            radius: 0.4,
            intensity: 1.0,
            regime: Regime::Growing,
        };
        let f = render_ir(&k, &cfg).unwrap();
        let (arg, _) = f.iter().enumerate().fold((0, f64::MIN), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
        let (row, col) = (arg / cfg.grid.1, arg % cfg.grid.1);
        assert_eq!((row, col), ((6.71f64 / 0.1 - 0.5).round() as usize, (1.23f64 / 0.1 - 0.5).round() as usize));
    }

    #[test]
    fn regimes_diverge_after_ignition() {
        let cfg = SynthConfig::default();
        let times = cfg.times();
        let (g, ok) = evolve_kernel(&xi_with(&[(2, 1.0), (4, 1.0), (5, 1.0)]), &times, &cfg).unwrap();
        let (d, bad) = evolve_kernel(&xi_with(&[(2, -1.0), (4, -1.0), (5, -1.0)]), &times, &cfg).unwrap();
        assert!(ok && !bad);
        let last = times.len() - 1;
        assert!(g[last].radius > 1.5 * d[last].radius);
        assert!(d[last].intensity < 0.05 * g[last].intensity);
        assert!(g.iter().chain(&d).all(|k| k.radius > 0.0 && k.intensity >= 0.0));
    }

    #[test]
    fn outcome_monotone_in_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let xi = sample_xi(&mut rng);
            let mut prev = false;
            for k in 0..=20 {
                let o = outcome(&xi.with(5, 20.0 + 34.0 * k as f64 / 20.0).unwrap(), 1.0);
                assert!(o || !prev);
                prev = o;
            }
        }
    }

    #[test]
    fn uniform_sum_cdf_matches_closed_forms() {
        assert!((uniform_sum_cdf(&[1.0], 0.3) - 0.3).abs() < 1e-15);
        // triangle: P(U1 + U2 <= 1.5) = 1 - 0.5 * 0.5^2
        assert!((uniform_sum_cdf(&[1.0, 1.0], 1.5) - 0.875).abs() < 1e-15);
        assert!((uniform_sum_cdf(&[2.0, 1.0, 0.5], 1.75) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn analytic_fraction_matches_monte_carlo() {
        let p = analytic_success_fraction(&support_box(), 1.0);
        let draws = sample_outcomes(200_000, 4, 1.0);
        let emp = draws.iter().filter(|d| d.1).count() as f64 / draws.len() as f64;
        assert!((p - emp).abs() < 4.0 * (p * (1.0 - p) / 2e5).sqrt(), "{p} vs {emp}");
        assert!((0.25..=0.75).contains(&p));
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let cfg = SynthConfig {
            grid: (16, 8),
            n_trials: 40,
            n_snapshots: 5,
            ..SynthConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trials.len(), 40);
        assert!((0.25..=0.75).contains(&a.success_fraction()));
        assert!(a.trials.iter().all(|t| t.frames.iter().flatten().all(|&v| v >= 0.0)));
    }
}
