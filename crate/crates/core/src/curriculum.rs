//! Horizon curriculum for the latent ODE: the training window starts at
//! one fold of the time grid and grows by one fold each time the stage loss
//! drops below a tolerance.
//!
//! Velocities in the derivative term are measured in normalized time
//! `τ = (t − t0) / horizon`, the same unit the network is trained in.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dynamics::{node_loss, LatentOde, NodeConfig, Trajectory};
use crate::error::{Error, Result};
use crate::params::{Adam, AdamConfig};
use crate::uncertainty::ParamVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub n_folds: usize,
    pub epsilon: f64,
    pub lambda: f64,
    /// Advance on the position term alone instead of the full loss.
    pub advance_on_position: bool,
    /// Iterations without an advance before a stall warning.
    pub stall_patience: u64,
    /// Checkpoint interval in iterations; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            n_folds: 50,
            epsilon: 1e-4,
            lambda: 1e-2,
            advance_on_position: false,
            stall_patience: 20_000,
            checkpoint_every: 0,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_folds == 0 {
            return Err(Error::Config("n_folds must be positive".into()));
        }
        if !(self.epsilon > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config("epsilon must be positive and lambda non-negative".into()));
        }
        Ok(())
    }
}

/// Progress through the curriculum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub n_folds: usize,
    pub active_folds: usize,
    pub epsilon: f64,
    pub upsample_factor: usize,
    /// `(iteration, active_folds after the advance)`.
    pub event_log: Vec<(u64, usize)>,
}

impl CurriculumState {
    pub fn new(n_folds: usize, epsilon: f64, upsample_factor: usize) -> Result<Self> {
        if n_folds == 0 || upsample_factor == 0 {
            return Err(Error::Config("n_folds and upsample_factor must be positive".into()));
        }
        Ok(Self {
            n_folds,
            active_folds: 1,
            epsilon,
            upsample_factor,
            event_log: Vec::new(),
        })
    }

    pub fn advance(&mut self, iteration: u64) -> Result<()> {
        if self.active_folds >= self.n_folds {
            return Err(Error::State("curriculum already spans the full horizon".into()));
        }
        if self.event_log.last().is_some_and(|&(it, _)| it >= iteration) {
            return Err(Error::State(format!("event at iteration {iteration} is not after the previous one")));
        }
        self.active_folds += 1;
        self.event_log.push((iteration, self.active_folds));
        Ok(())
    }

    pub fn complete(&self) -> bool {
        self.active_folds == self.n_folds
    }
}

/// Number of grid points covered by the first `active_folds` folds.
pub fn window_len(grid_len: usize, active_folds: usize, n_folds: usize) -> Result<usize> {
    if n_folds == 0 || grid_len % n_folds != 0 {
        return Err(Error::Config(format!("grid of {grid_len} points does not split into {n_folds} folds")));
    }
    if active_folds == 0 || active_folds > n_folds {
        return Err(Error::Config(format!("active folds {active_folds} outside 1..={n_folds}")));
    }
    Ok(grid_len / n_folds * active_folds)
}

/// Linear interpolation of every trajectory onto `len · factor` uniform
/// points spanning the same interval. Fails unless that count splits into
/// `n_folds` equal folds.
pub fn upsample_trajectories(raw: &[Trajectory], factor: usize, n_folds: usize) -> Result<Vec<Trajectory>> {
    if factor == 0 {
        return Err(Error::Config("upsample factor must be at least 1".into()));
    }
    let Some(first) = raw.first() else {
        return Ok(Vec::new());
    };
    let n = first.len();
    if raw.iter().any(|t| t.len() != n) {
        return Err(Error::dim("upsample", "trajectories must share the snapshot count"));
    }
    let m = n * factor;
    if n_folds == 0 || m % n_folds != 0 {
        return Err(Error::Config(format!("{m} upsampled points do not split into {n_folds} folds")));
    }
    raw.iter()
        .map(|tr| {
            if factor == 1 {
                return Ok(tr.clone());
            }
            let (t0, t1) = (tr.times[0], tr.times[n - 1]);
            let times: Vec<f64> = (0..m).map(|k| t0 + (t1 - t0) * k as f64 / (m - 1) as f64).collect();
            let mut seg = 0;
            let states = times
                .iter()
                .map(|&t| {
                    while seg + 2 < n && tr.times[seg + 1] <= t {
                        seg += 1;
                    }
                    let (ta, tb) = (tr.times[seg], tr.times[seg + 1]);
                    let a = ((t - ta) / (tb - ta)).clamp(0.0, 1.0);
                    tr.states[seg]
                        .iter()
                        .zip(&tr.states[seg + 1])
                        .map(|(x, y)| x + a * (y - x))
                        .collect()
                })
                .collect();
            Trajectory::new(times, states)
        })
        .collect()
}

fn restrict(t: &Trajectory, len: usize) -> Trajectory {
    Trajectory {
        times: t.times[..len].to_vec(),
        states: t.states[..len].to_vec(),
    }
}

/// Loss over the first `active_folds` folds. A window shorter than three
/// points carries no derivative term.
pub fn stage_loss(pred: &[Trajectory], truth: &[Trajectory], active_folds: usize, n_folds: usize, lambda: f64) -> Result<f64> {
    let Some(first) = truth.first() else {
        return Err(Error::Input("no trajectories".into()));
    };
    let len = window_len(first.len(), active_folds, n_folds)?;
    let p: Vec<Trajectory> = pred.iter().map(|t| restrict(t, len.min(t.len()))).collect();
    let q: Vec<Trajectory> = truth.iter().map(|t| restrict(t, len)).collect();
    node_loss(&p, &q, lambda)
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: u64,
    pub stage_loss: f64,
    pub active_folds: usize,
    pub lr: f64,
    pub wall_ms: u64,
}

pub const LOG_HEADER: &str = "iteration,stage_loss,active_folds,lr,wall_ms";

impl IterRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{:e},{},{:e},{}", self.iteration, self.stage_loss, self.active_folds, self.lr, self.wall_ms)
    }
}

#[derive(Debug, Clone)]
pub struct NodeTrainResult {
    pub model: LatentOde,
    pub history: Vec<IterRecord>,
    pub state: CurriculumState,
    /// Whether the full horizon was reached with the loss below tolerance.
    pub converged: bool,
}

/// Optional hooks for long runs.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Receives every log row as it is produced.
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint: Option<&'a mut dyn FnMut(u64, &LatentOde) -> Result<()>>,
}

/// Adam on the current stage window, full batch. Each iteration evaluates
/// the window loss; below tolerance the window grows by one fold (no update
/// that iteration), otherwise the parameters take one step. Training ends
/// at `max_iters` or when the full window is under tolerance.
#[allow(clippy::too_many_arguments)]
pub fn train_node(
    data: &[Trajectory],
    xis: &[ParamVector],
    node_cfg: &NodeConfig,
    adam_cfg: &AdamConfig,
    curr: &CurriculumConfig,
    upsample_factor: usize,
    mut hooks: TrainHooks<'_>,
) -> Result<NodeTrainResult> {
    curr.validate()?;
    adam_cfg.validate()?;
    if data.is_empty() || data.len() != xis.len() {
        return Err(Error::Input(format!("{} trajectories with {} input vectors", data.len(), xis.len())));
    }
    let grid_len = data[0].len();
    window_len(grid_len, 1, curr.n_folds)?;
    let mut model = LatentOde::new(node_cfg.clone())?;
    let xi_std: Vec<_> = xis.iter().map(|x| x.standardized()).collect();
    let mut adam = Adam::new(adam_cfg.clone(), &model.params);
    let mut state = CurriculumState::new(curr.n_folds, curr.epsilon, upsample_factor)?;
    let mut history = Vec::new();
    let start = Instant::now();
    let mut last_advance = 0u64;
    let mut stall_warned = false;
    let mut converged = false;
    if let Some(w) = hooks.log.as_deref_mut() {
        writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io("training log", e))?;
    }
    for it in 1..=adam_cfg.max_iters {
        let upto = window_len(grid_len, state.active_folds, curr.n_folds)?;
        let (loss, pos, grads) = model
            .window_loss_and_grads(data, &xi_std, upto, curr.lambda)
            .map_err(|e| Error::TrainingFailure {
                stage: "iteration",
                index: it as usize,
                detail: e.to_string(),
            })?;
        if !loss.is_finite() {
            return Err(Error::TrainingFailure {
                stage: "iteration",
                index: it as usize,
                detail: "non-finite loss".into(),
            });
        }
        let criterion = if curr.advance_on_position { pos } else { loss };
        let lr = adam_cfg.lr_at(adam.steps_taken() + 1);
        let rec = IterRecord {
            iteration: it,
            stage_loss: loss,
            active_folds: state.active_folds,
            lr,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        if let Some(w) = hooks.log.as_deref_mut() {
            writeln!(w, "{}", rec.csv_row()).map_err(|e| Error::io("training log", e))?;
        }
        history.push(rec);
        if criterion < curr.epsilon {
            if state.complete() {
                converged = true;
                break;
            }
            state.advance(it)?;
            last_advance = it;
            stall_warned = false;
            log::debug!("iteration {it}: window grows to {} folds", state.active_folds);
        } else {
            adam.step(&mut model.params, &grads);
            if !stall_warned && it - last_advance >= curr.stall_patience {
                log::warn!("curriculum stalled: no advance for {} iterations at {} folds", it - last_advance, state.active_folds);
                stall_warned = true;
            }
        }
        if curr.checkpoint_every > 0 && it % curr.checkpoint_every == 0 {
            if let Some(cb) = hooks.checkpoint.as_deref_mut() {
                cb(it, &model)?;
            }
        }
    }
    Ok(NodeTrainResult {
        model,
        history,
        state,
        converged,
    })
}

/// Indices of advance events whose loss rises right after the event and
/// later falls below the value just before it.
pub fn spike_events(history: &[IterRecord], events: &[(u64, usize)]) -> Vec<bool> {
    let at = |it: u64| history.iter().position(|r| r.iteration == it);
    events
        .iter()
        .map(|&(it, folds)| {
            let (Some(i), true) = (at(it), it > 1) else {
                return false;
            };
            if i == 0 || i + 1 >= history.len() {
                return false;
            }
            let before = history[i - 1].stage_loss;
            let after = history[i + 1].stage_loss;
            let recovers = history[i + 1..]
                .iter()
                .take_while(|r| r.active_folds == folds)
                .any(|r| r.stage_loss < before);
            after > before && recovers
        })
        .collect()
}
