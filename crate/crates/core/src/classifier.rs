//! Ignition-outcome classifiers: growth of an isotherm superlevel-set area
//! in decoded fields, and branch separation of one latent component.

use serde::{Deserialize, Serialize};

use crate::compressor::Field;
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::metrics::quarter_bounds;

/// Share of positive increments required for "monotonic growth".
pub const GROWTH_SHARE: f64 = 0.8;
pub const DEFAULT_AREA_WINDOW: usize = 5;

/// Area of `{value ≥ threshold}` in units of `pixel_area`.
pub fn isotherm_area(x: &Field, threshold: f64, pixel_area: f64) -> f64 {
    x.values.iter().filter(|&&v| v >= threshold).count() as f64 * pixel_area
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsothermSeries {
    pub threshold: f64,
    pub areas: Vec<f64>,
    pub times: Vec<f64>,
}

impl IsothermSeries {
    pub fn from_fields(fields: &[Field], times: &[f64], threshold: f64, pixel_area: f64) -> Result<Self> {
        if fields.len() != times.len() {
            return Err(Error::dim("isotherm_series", format!("{} fields for {} times", fields.len(), times.len())));
        }
        Ok(Self {
            threshold,
            areas: fields.iter().map(|f| isotherm_area(f, threshold, pixel_area)).collect(),
            times: times.to_vec(),
        })
    }
}

/// Success iff at least 80% of the area increments over the trailing
/// `window` intervals are positive.
pub fn classify_by_area(series: &IsothermSeries, window: usize) -> Result<bool> {
    let n = series.areas.len();
    if window == 0 || n < window + 1 {
        return Err(Error::Input(format!("need at least {} frames for a window of {window}, got {n}", window + 1)));
    }
    let tail = &series.areas[n - window - 1..];
    let rising = tail.windows(2).filter(|w| w[1] > w[0]).count();
    Ok(rising as f64 >= GROWTH_SHARE * window as f64 - 1e-12)
}

/// Calibrated latent rule: success iff `min over the final quarter of
/// sign·V[component]` falls below `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchClassifier {
    pub component: usize,
    pub sign: f64,
    pub threshold: f64,
    /// Balanced training accuracy at calibration.
    pub balanced_accuracy: f64,
}

impl BranchClassifier {
    pub fn score(&self, traj: &Trajectory) -> Result<f64> {
        branch_score(traj, self.component, self.sign)
    }

    pub fn classify(&self, traj: &Trajectory) -> Result<bool> {
        Ok(self.score(traj)? < self.threshold)
    }
}

fn branch_score(traj: &Trajectory, component: usize, sign: f64) -> Result<f64> {
    if component >= traj.dim() {
        return Err(Error::Input(format!("component {component} outside latent dimension {}", traj.dim())));
    }
    if traj.len() < 4 {
        return Err(Error::Input("trajectory too short for a final quarter".into()));
    }
    let (a, b) = quarter_bounds(traj.len())[3];
    Ok(traj.states[a..b].iter().map(|s| sign * s[component]).fold(f64::INFINITY, f64::min))
}

/// Success iff `min over the final quarter of V[component] < branch_threshold`.
pub fn classify_by_latent(traj: &Trajectory, component: usize, branch_threshold: Option<f64>) -> Result<bool> {
    let thr = branch_threshold.ok_or_else(|| Error::State("latent classifier threshold not calibrated".into()))?;
    Ok(branch_score(traj, component, 1.0)? < thr)
}

/// Chooses component, sign and threshold maximizing balanced training
/// accuracy. Thresholds sit halfway between adjacent distinct scores; ties
/// go to the lowest component, then the negative sign, then the lowest
/// threshold.
pub fn calibrate_branch(trajs: &[Trajectory], outcomes: &[bool]) -> Result<BranchClassifier> {
    if trajs.len() != outcomes.len() || trajs.is_empty() {
        return Err(Error::dim("calibrate_branch", "one outcome per trajectory required"));
    }
    let n_pos = outcomes.iter().filter(|&&o| o).count();
    let n_neg = outcomes.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Input("calibration needs both outcomes present".into()));
    }
    let dim = trajs[0].dim();
    let mut best: Option<BranchClassifier> = None;
    for component in 0..dim {
        for sign in [-1.0, 1.0] {
            let mut scored: Vec<(f64, bool)> = trajs
                .iter()
                .zip(outcomes)
                .map(|(t, &o)| branch_score(t, component, sign).map(|s| (s, o)))
                .collect::<Result<_>>()?;
            scored.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (mut tp, mut fp) = (0usize, 0usize);
            let mut consider = |thr: f64, tp: usize, fp: usize| {
                let bal = 0.5 * (tp as f64 / n_pos as f64 + (n_neg - fp) as f64 / n_neg as f64);
                if best.is_none_or(|b| bal > b.balanced_accuracy + 1e-12) {
                    best = Some(BranchClassifier {
                        component,
                        sign,
                        threshold: thr,
                        balanced_accuracy: bal,
                    });
                }
            };
            consider(scored[0].0 - 1.0, 0, 0);
            for k in 0..scored.len() {
                if scored[k].1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                let next = scored.get(k + 1).map(|s| s.0);
                match next {
                    Some(v) if v == scored[k].0 => continue,
                    Some(v) => consider(0.5 * (scored[k].0 + v), tp, fp),
                    None => consider(scored[k].0 + 1.0, tp, fp),
                }
            }
        }
    }
    Ok(best.expect("at least one candidate"))
}
