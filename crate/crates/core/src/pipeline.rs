//! End-to-end steps shared by the command-line tool and the integration
//! tests: frame loading, encoding, data splits, prediction from encoded
//! initial states, classifier calibration and evaluation.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;

use crate::classifier::{calibrate_branch, BranchClassifier};
use crate::compressor::{Autoencoder, Field};
use crate::container::{load_trial_fields, DatasetManifest, LatentEntry, LatentSet};
use crate::contour::{distance_to_polylines, marching_squares, Polyline};
use crate::curriculum::upsample_trajectories;
use crate::dynamics::{LatentOde, Rollout, Trajectory};
use crate::error::{Error, Result};
use crate::metrics::{confusion, quarter_errors, ConfusionMatrix, QuarterErrors};
use crate::synth::analytic_conditional;
use crate::uncertainty::ParamVector;
use crate::uq::{fit_rbf, Bounds, ProbabilityMap, RbfModel, DEFAULT_RIDGE};

/// Every normalized frame of the dataset with the id of its trial.
pub fn load_frames(dir: &Path, m: &DatasetManifest) -> Result<(Vec<Field>, Vec<usize>)> {
    let per_trial: Vec<Vec<Field>> = m
        .trials
        .par_iter()
        .map(|t| load_trial_fields(dir, m, t))
        .collect::<Result<_>>()?;
    let mut frames = Vec::new();
    let mut groups = Vec::new();
    for (t, fields) in m.trials.iter().zip(per_trial) {
        groups.extend(std::iter::repeat_n(t.id, fields.len()));
        frames.extend(fields);
    }
    Ok((frames, groups))
}

/// Encodes every trial frame by frame. Trials whose id is in `validation`
/// are flagged as held out.
pub fn encode_dataset(
    ae: &Autoencoder,
    dir: &Path,
    m: &DatasetManifest,
    validation: &BTreeSet<usize>,
) -> Result<Vec<(LatentEntry, Trajectory)>> {
    m.trials
        .par_iter()
        .map(|t| {
            let fields = load_trial_fields(dir, m, t)?;
            let states = fields
                .iter()
                .map(|f| ae.encode(f).map(|v| v.0))
                .collect::<Result<Vec<_>>>()?;
            let entry = LatentEntry {
                id: t.id,
                xi: t.xi,
                outcome: t.outcome,
                times_us: t.times_us.clone(),
                norm: t.norm,
                states: String::new(),
                validation: validation.contains(&t.id),
            };
            Ok((entry, Trajectory::new(t.times_us.clone(), states)?))
        })
        .collect()
}

/// Encoded trajectories with their inputs and outcomes.
#[derive(Debug, Clone, Default)]
pub struct TrialSet {
    pub ids: Vec<usize>,
    pub xis: Vec<ParamVector>,
    pub outcomes: Vec<bool>,
    pub trajectories: Vec<Trajectory>,
}

impl TrialSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn initial_states(&self) -> Vec<Vec<f64>> {
        self.trajectories.iter().map(|t| t.states[0].clone()).collect()
    }

    /// Trajectories resampled onto the training grid.
    pub fn upsampled(&self, factor: usize, n_folds: usize) -> Result<Vec<Trajectory>> {
        upsample_trajectories(&self.trajectories, factor, n_folds)
    }
}

/// Splits an encoded set into `(training, validation)` by its flags.
pub fn split_latents(set: &LatentSet) -> (TrialSet, TrialSet) {
    let mut train = TrialSet::default();
    let mut val = TrialSet::default();
    for (e, tr) in set.manifest.entries.iter().zip(&set.trajectories) {
        let dst = if e.validation { &mut val } else { &mut train };
        dst.ids.push(e.id);
        dst.xis.push(e.xi);
        dst.outcomes.push(e.outcome.is_success());
        dst.trajectories.push(tr.clone());
    }
    (train, val)
}

/// Rolls the ODE out from each encoded initial state. Diverged rollouts
/// come back as `None`.
pub fn predict_set(node: &LatentOde, set: &TrialSet, times: &[f64]) -> Result<Vec<Option<Trajectory>>> {
    predict_from(node, &set.initial_states(), &set.xis, times)
}

pub fn predict_from(node: &LatentOde, v0s: &[Vec<f64>], xis: &[ParamVector], times: &[f64]) -> Result<Vec<Option<Trajectory>>> {
    let std: Vec<_> = xis.iter().map(ParamVector::standardized).collect();
    node.integrate_batch(v0s, &std, times)?
        .into_iter()
        .map(|r| match r {
            Rollout::Ok(states) => Trajectory::new(times.to_vec(), states).map(Some),
            Rollout::Diverged { .. } => Ok(None),
        })
        .collect()
}

/// Calibrates the latent-branch rule on predicted training trajectories.
pub fn calibrate_on_predictions(preds: &[Option<Trajectory>], outcomes: &[bool]) -> Result<BranchClassifier> {
    let (trajs, outs): (Vec<Trajectory>, Vec<bool>) = preds
        .iter()
        .zip(outcomes)
        .filter_map(|(p, &o)| p.clone().map(|t| (t, o)))
        .unzip();
    if trajs.len() < preds.len() {
        log::warn!("{} of {} training rollouts diverged; calibrating on the rest", preds.len() - trajs.len(), preds.len());
    }
    calibrate_branch(&trajs, &outs)
}

/// Confusion of the classifier against known outcomes; a diverged rollout
/// counts as a wrong prediction.
pub fn evaluate_classifier(clf: &BranchClassifier, preds: &[Option<Trajectory>], outcomes: &[bool]) -> Result<ConfusionMatrix> {
    let predicted: Vec<bool> = preds
        .iter()
        .zip(outcomes)
        .map(|(p, &o)| match p {
            Some(t) => clf.classify(t),
            None => Ok(!o),
        })
        .collect::<Result<_>>()?;
    confusion(&predicted, outcomes)
}

/// Quarter errors of each prediction against its truth; diverged rollouts
/// are skipped.
pub fn quarter_table(preds: &[Option<Trajectory>], truth: &[Trajectory]) -> Result<Vec<QuarterErrors>> {
    if preds.len() != truth.len() {
        return Err(Error::dim("quarter_table", "one truth per prediction required"));
    }
    preds
        .iter()
        .zip(truth)
        .filter_map(|(p, t)| p.as_ref().map(|p| quarter_errors(p, t)))
        .collect()
}

/// RBF from training inputs to encoded initial states.
pub fn fit_initial_state_rbf(train: &TrialSet) -> Result<RbfModel> {
    let pairs: Vec<(ParamVector, Vec<f64>)> = train.xis.iter().copied().zip(train.initial_states()).collect();
    fit_rbf(&pairs, None, DEFAULT_RIDGE)
}

/// The exact `level` set of the synthetic success probability over the
/// map's two axes, the other switch inputs uniform on `bounds`, traced on a
/// grid `refine` times finer than the map.
pub fn analytic_level_set(map: &ProbabilityMap, bounds: &Bounds, theta0: f64, level: f64, refine: usize) -> Vec<Polyline> {
    let (na, nb) = map.bins();
    let (lo_a, hi_a) = (map.edges_a[0], map.edges_a[na]);
    let (lo_b, hi_b) = (map.edges_b[0], map.edges_b[nb]);
    let (fa, fb) = (na * refine + 1, nb * refine + 1);
    let xs: Vec<f64> = (0..fa).map(|k| lo_a + (hi_a - lo_a) * k as f64 / (fa - 1) as f64).collect();
    let ys: Vec<f64> = (0..fb).map(|k| lo_b + (hi_b - lo_b) * k as f64 / (fb - 1) as f64).collect();
    let mut vals = Vec::with_capacity(fa * fb);
    for &x in &xs {
        for &y in &ys {
            vals.push(analytic_conditional(bounds, theta0, [(map.axis_a, x), (map.axis_b, y)]));
        }
    }
    marching_squares(&vals, &xs, &ys, level)
}

/// Largest distance, in cell widths, from any vertex of `empirical` to the
/// `reference` polylines. `None` when either side is empty.
pub fn contour_deviation(empirical: &[Polyline], reference: &[Polyline], cell: (f64, f64)) -> Option<f64> {
    if reference.is_empty() || empirical.iter().all(|l| l.is_empty()) {
        return None;
    }
    empirical
        .iter()
        .flatten()
        .map(|&p| distance_to_polylines(p, reference, cell))
        .max_by(f64::total_cmp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_level_set_sits_on_half_probability() {
        let bounds = crate::synth::support_box();
        let map = ProbabilityMap::new(2, 5, bounds[2], bounds[5], (10, 10)).unwrap();
        let lines = analytic_level_set(&map, &bounds, 1.0, 0.5, 4);
        assert!(!lines.is_empty());
        for &(a, b) in lines.iter().flatten() {
            let p = analytic_conditional(&bounds, 1.0, [(2, a), (5, b)]);
            assert!((p - 0.5).abs() < 0.02, "p = {p}");
        }
        let (wa, wb) = map.cell_widths();
        assert_eq!(contour_deviation(&lines, &lines, (wa, wb)), Some(0.0));
    }
}
