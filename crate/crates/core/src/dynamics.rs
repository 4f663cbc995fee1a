//! Parameter-conditioned neural ODE over the latent state, integrated with
//! fixed-step RK4.
//!
//! The right-hand side is an MLP with two tanh hidden layers fed
//! `[V, ξ̃, τ]`, where `ξ̃` is the per-component standardized input vector and
//! `τ = (t − t0) / horizon`. The network returns `dV/dτ`. Gradients come from
//! backpropagating through the unrolled steps: [`LatentOde::window_loss_and_grads`]
//! is a fused batched implementation, cross-checked in tests against the
//! same computation recorded on an [`autograd::Graph`](crate::autograd::Graph).

use rand::SeedableRng;
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::{axpy, dot, gemm, Strided};
use crate::params::{uniform_fan_in, BoundParams, NetworkParams};
use crate::tensor::Tensor;
use crate::uncertainty::{ParamVector, N_XI};

/// States whose magnitude exceeds this are treated as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::Input("empty time grid".into()));
    }
    if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Input("time grid must be finite and strictly increasing".into()));
    }
    Ok(())
}

fn diverged(v: &[f64]) -> bool {
    v.iter().any(|x| !x.is_finite() || x.abs() > DIVERGENCE_LIMIT)
}

/// One classical RK4 step of `dv/dt = f(t, v)`.
pub fn rk4_step<F>(f: &mut F, t: f64, v: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(f64, &[f64]) -> Vec<f64>,
{
    let k1 = f(t, v);
    let mut u = v.to_vec();
    axpy(0.5 * h, &k1, &mut u);
    let k2 = f(t + 0.5 * h, &u);
    u.copy_from_slice(v);
    axpy(0.5 * h, &k2, &mut u);
    let k3 = f(t + 0.5 * h, &u);
    u.copy_from_slice(v);
    axpy(h, &k3, &mut u);
    let k4 = f(t + h, &u);
    let mut out = v.to_vec();
    for i in 0..out.len() {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Integrates `dv/dt = f(t, v)` over `times` with `substeps` equal RK4 steps
/// per interval; returns the state at every grid time.
pub fn rk4_integrate<F>(mut f: F, v0: &[f64], times: &[f64], substeps: usize) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, &[f64]) -> Vec<f64>,
{
    check_times(times)?;
    let substeps = substeps.max(1);
    let mut out = Vec::with_capacity(times.len());
    out.push(v0.to_vec());
    let mut v = v0.to_vec();
    let mut step = 0usize;
    for w in times.windows(2) {
        let h = (w[1] - w[0]) / substeps as f64;
        for s in 0..substeps {
            v = rk4_step(&mut f, w[0] + s as f64 * h, &v, h);
            step += 1;
            if diverged(&v) {
                return Err(Error::Divergence {
                    step,
                    detail: format!("state left the finite range at t = {}", w[0] + (s + 1) as f64 * h),
                });
            }
        }
        out.push(v.clone());
    }
    Ok(out)
}

/// RK4 recorded on a graph; `f(graph, t, v)` builds the right-hand side.
pub fn rk4_integrate_graph<F>(g: &mut Graph, v0: Var, times: &[f64], substeps: usize, mut f: F) -> Result<Vec<Var>>
where
    F: FnMut(&mut Graph, f64, Var) -> Result<Var>,
{
    check_times(times)?;
    let substeps = substeps.max(1);
    let mut out = vec![v0];
    let mut v = v0;
    for w in times.windows(2) {
        let h = (w[1] - w[0]) / substeps as f64;
        for s in 0..substeps {
            let t = w[0] + s as f64 * h;
            let k1 = f(g, t, v)?;
            let u = g.lincomb(&[(v, 1.0), (k1, 0.5 * h)])?;
            let k2 = f(g, t + 0.5 * h, u)?;
            let u = g.lincomb(&[(v, 1.0), (k2, 0.5 * h)])?;
            let k3 = f(g, t + 0.5 * h, u)?;
            let u = g.lincomb(&[(v, 1.0), (k3, h)])?;
            let k4 = f(g, t + h, u)?;
            v = g.lincomb(&[(v, 1.0), (k1, h / 6.0), (k2, h / 3.0), (k3, h / 3.0), (k4, h / 6.0)])?;
        }
        out.push(v);
    }
    Ok(out)
}

/// A latent trajectory on a time grid (µs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Vec<Vec<f64>>) -> Result<Self> {
        check_times(&times)?;
        if states.len() != times.len() {
            return Err(Error::dim("trajectory", format!("{} states for {} times", states.len(), times.len())));
        }
        let d = states[0].len();
        if d == 0 || states.iter().any(|s| s.len() != d) {
            return Err(Error::dim("trajectory", "states must share a non-zero dimension"));
        }
        Ok(Self { times, states })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    /// Row-major `[T, dim]` tensor of the states.
    pub fn states_tensor(&self) -> Tensor {
        let data = self.states.iter().flatten().copied().collect();
        Tensor::new(&[self.len(), self.dim()], data).expect("trajectory shape")
    }
}

/// Central-difference velocities at interior points, in units of `taus`.
fn velocities(states: &[Vec<f64>], taus: &[f64]) -> Vec<Vec<f64>> {
    (1..states.len() - 1)
        .map(|j| {
            let dt = taus[j + 1] - taus[j - 1];
            states[j + 1].iter().zip(&states[j - 1]).map(|(a, b)| (a - b) / dt).collect()
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `(1/NT) ΣΣ ‖V − V̂‖² + λ (1/(N(T−2))) ΣΣ ‖V̇ − V̂̇‖²` with central-difference
/// velocities taken against the grid times as given. Returns
/// `(total, position_term)`.
pub fn node_loss_terms(pred: &[Trajectory], truth: &[Trajectory], lambda: f64) -> Result<(f64, f64)> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::dim("node_loss", format!("{} predictions vs {} truths", pred.len(), truth.len())));
    }
    let n = pred.len() as f64;
    let (mut pos, mut vel) = (0.0, 0.0);
    let mut t_len = 0;
    for (p, q) in pred.iter().zip(truth) {
        if p.times != q.times || p.dim() != q.dim() {
            return Err(Error::dim("node_loss", "paired trajectories must share grid and dimension"));
        }
        t_len = p.len();
        if t_len != truth[0].len() {
            return Err(Error::dim("node_loss", "all trajectories must share the grid length"));
        }
        pos += p.states.iter().zip(&q.states).map(|(a, b)| sq_dist(a, b)).sum::<f64>();
        if t_len >= 3 {
            let vp = velocities(&p.states, &p.times);
            let vq = velocities(&q.states, &q.times);
            vel += vp.iter().zip(&vq).map(|(a, b)| sq_dist(a, b)).sum::<f64>();
        }
    }
    let pos = pos / (n * t_len as f64);
    let vel = if t_len >= 3 { vel / (n * (t_len - 2) as f64) } else { 0.0 };
    Ok((pos + lambda * vel, pos))
}

pub fn node_loss(pred: &[Trajectory], truth: &[Trajectory], lambda: f64) -> Result<f64> {
    node_loss_terms(pred, truth, lambda).map(|(l, _)| l)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub latent_dim: usize,
    pub width: usize,
    /// Start of the time axis (µs); `τ = (t − t0) / horizon`.
    pub t0: f64,
    pub horizon: f64,
    /// RK4 steps per grid interval.
    pub substeps: usize,
    pub seed: u64,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            width: 32,
            t0: 0.0,
            horizon: 500.0,
            substeps: 1,
            seed: 13,
        }
    }
}

impl NodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.width == 0 {
            return Err(Error::Config("latent_dim and width must be positive".into()));
        }
        if !(self.horizon > 0.0) || !self.t0.is_finite() {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        Ok(())
    }

    pub fn tau(&self, t: f64) -> f64 {
        (t - self.t0) / self.horizon
    }

    fn input_dim(&self) -> usize {
        self.latent_dim + N_XI + 1
    }
}

/// Per-trajectory output of a batched integration.
#[derive(Debug, Clone, PartialEq)]
pub enum Rollout {
    Ok(Vec<Vec<f64>>),
    Diverged { step: usize },
}

/// Recorded activations of one RK4 stage across the batch.
struct StageRecord {
    u: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

/// The neural ODE: configuration plus MLP weights (`l1`, `l2`, `out`).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentOde {
    pub cfg: NodeConfig,
    pub params: NetworkParams,
}

struct Weights<'a> {
    l1: &'a [f64],
    b1: &'a [f64],
    l2: &'a [f64],
    b2: &'a [f64],
    out: &'a [f64],
    b3: &'a [f64],
}

impl LatentOde {
    /// Fan-in uniform hidden layers; the output layer starts at zero so the
    /// initial flow is the identity.
    pub fn new(cfg: NodeConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (w, d, l) = (cfg.width, cfg.input_dim(), cfg.latent_dim);
        let mut p = NetworkParams::new();
        p.insert("l1.w", uniform_fan_in(&mut rng, &[w, d], d, 1.0));
        p.insert("l1.b", Tensor::zeros(&[w]));
        p.insert("l2.w", uniform_fan_in(&mut rng, &[w, w], w, 1.0));
        p.insert("l2.b", Tensor::zeros(&[w]));
        p.insert("out.w", Tensor::zeros(&[l, w]));
        p.insert("out.b", Tensor::zeros(&[l]));
        Ok(Self { cfg, params: p })
    }

    pub fn from_params(cfg: NodeConfig, params: NetworkParams) -> Result<Self> {
        let reference = Self::new(cfg.clone())?;
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Config(format!("parameter {name} has shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
        }
        Ok(Self { cfg, params })
    }

    fn weights(&self) -> Weights<'_> {
        let t = |i: usize| self.params.tensor(i).data();
        Weights {
            l1: t(0),
            b1: t(1),
            l2: t(2),
            b2: t(3),
            out: t(4),
            b3: t(5),
        }
    }

    /// `W1[:, L..L+15] · ξ̃ + b1`, the input-layer part that is constant along a trajectory.
    fn context(&self, xi_std: &[f64]) -> Vec<f64> {
        let (w, d, l) = (self.cfg.width, self.cfg.input_dim(), self.cfg.latent_dim);
        let wt = self.weights();
        (0..w)
            .map(|o| dot(&wt.l1[o * d + l..o * d + l + N_XI], xi_std) + wt.b1[o])
            .collect()
    }

    /// Batched right-hand side `dV/dτ` for rows of `u` (`[n, L]`).
    ///
    /// The row-wise path gives each row a result independent of the batch;
    /// the blocked path is faster but its rounding may depend on the batch
    /// shape, so it is only used for training.
    fn rhs_batch(&self, ctx: &[f64], tau: f64, u: &[f64], n: usize, rec: Option<&mut StageRecord>, blocked: bool) -> Vec<f64> {
        let (w, d, l) = (self.cfg.width, self.cfg.input_dim(), self.cfg.latent_dim);
        let wt = self.weights();
        let mut h1 = vec![0.0; n * w];
        let mut h2 = vec![0.0; n * w];
        let mut k = vec![0.0; n * l];
        if blocked {
            h1.copy_from_slice(ctx);
            let w1u = Strided { rows: w, cols: l, rs: d, cs: 1 };
            gemm(1.0, u, Strided::rm(n, l), wt.l1, w1u.t(), 1.0, &mut h1, Strided::rm(n, w));
            for row in h1.chunks_exact_mut(w) {
                for (o, x) in row.iter_mut().enumerate() {
                    *x = (*x + tau * wt.l1[o * d + d - 1]).tanh();
                }
            }
            for row in h2.chunks_exact_mut(w) {
                row.copy_from_slice(wt.b2);
            }
            gemm(1.0, &h1, Strided::rm(n, w), wt.l2, Strided::rm(w, w).t(), 1.0, &mut h2, Strided::rm(n, w));
            h2.iter_mut().for_each(|x| *x = x.tanh());
            for row in k.chunks_exact_mut(l) {
                row.copy_from_slice(wt.b3);
            }
            gemm(1.0, &h2, Strided::rm(n, w), wt.out, Strided::rm(l, w).t(), 1.0, &mut k, Strided::rm(n, l));
        } else {
            for b in 0..n {
                let ub = &u[b * l..(b + 1) * l];
                for o in 0..w {
                    let row = &wt.l1[o * d..o * d + l];
                    h1[b * w + o] = (dot(row, ub) + ctx[b * w + o] + tau * wt.l1[o * d + d - 1]).tanh();
                }
            }
            for b in 0..n {
                let hb = &h1[b * w..(b + 1) * w];
                for o in 0..w {
                    h2[b * w + o] = (dot(&wt.l2[o * w..(o + 1) * w], hb) + wt.b2[o]).tanh();
                }
            }
            for b in 0..n {
                let hb = &h2[b * w..(b + 1) * w];
                for o in 0..l {
                    k[b * l + o] = dot(&wt.out[o * w..(o + 1) * w], hb) + wt.b3[o];
                }
            }
        }
        if let Some(r) = rec {
            r.u = u.to_vec();
            r.h1 = h1;
            r.h2 = h2;
        }
        k
    }

    /// Right-hand side for one state, `dV/dτ`.
    pub fn rhs(&self, tau: f64, v: &[f64], xi: &ParamVector) -> Vec<f64> {
        let ctx = self.context(&xi.standardized());
        self.rhs_batch(&ctx, tau, v, 1, None, false)
    }

    /// One RK4 step on the batch in τ units; optionally records stage activations.
    fn step_batch(&self, ctx: &[f64], tau: f64, h: f64, v: &[f64], n: usize, rec: Option<&mut [StageRecord; 4]>) -> Vec<f64> {
        let blocked = rec.is_some();
        let mut slots: [Option<&mut StageRecord>; 4] = [None, None, None, None];
        if let Some(r) = rec {
            for (slot, s) in slots.iter_mut().zip(r.iter_mut()) {
                *slot = Some(s);
            }
        }
        let [s1, s2, s3, s4] = slots;
        let k1 = self.rhs_batch(ctx, tau, v, n, s1, blocked);
        let mut u = v.to_vec();
        axpy(0.5 * h, &k1, &mut u);
        let k2 = self.rhs_batch(ctx, tau + 0.5 * h, &u, n, s2, blocked);
        u.copy_from_slice(v);
        axpy(0.5 * h, &k2, &mut u);
        let k3 = self.rhs_batch(ctx, tau + 0.5 * h, &u, n, s3, blocked);
        u.copy_from_slice(v);
        axpy(h, &k3, &mut u);
        let k4 = self.rhs_batch(ctx, tau + h, &u, n, s4, blocked);
        let mut out = v.to_vec();
        for i in 0..out.len() {
            out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out
    }

    fn contexts(&self, xis: &[[f64; N_XI]]) -> Vec<f64> {
        xis.iter().flat_map(|x| self.context(x)).collect()
    }

    /// Integrates many `(v0, ξ̃)` pairs over a shared grid. Rows are
    /// independent: each row's result does not depend on the batch.
    pub fn integrate_batch(&self, v0s: &[Vec<f64>], xi_std: &[[f64; N_XI]], times: &[f64]) -> Result<Vec<Rollout>> {
        check_times(times)?;
        let (n, l) = (v0s.len(), self.cfg.latent_dim);
        if xi_std.len() != n {
            return Err(Error::dim("integrate", "one ξ per initial state required"));
        }
        if let Some(bad) = v0s.iter().find(|v| v.len() != l) {
            return Err(Error::dim("integrate", format!("initial state of length {} vs latent dim {l}", bad.len())));
        }
        // fixed-size chunks: results do not depend on the thread count
        const CHUNK: usize = 64;
        let parts: Vec<Vec<Rollout>> = v0s
            .par_chunks(CHUNK)
            .zip(xi_std.par_chunks(CHUNK))
            .map(|(v0c, xc)| self.integrate_rows(v0c, xc, times))
            .collect();
        Ok(parts.into_iter().flatten().collect())
    }

    fn integrate_rows(&self, v0s: &[Vec<f64>], xi_std: &[[f64; N_XI]], times: &[f64]) -> Vec<Rollout> {
        let (n, l) = (v0s.len(), self.cfg.latent_dim);
        let ctx = self.contexts(xi_std);
        let mut v: Vec<f64> = v0s.iter().flatten().copied().collect();
        let mut states: Vec<Vec<Vec<f64>>> = v0s.iter().map(|v0| vec![v0.clone()]).collect();
        let mut dead: Vec<Option<usize>> = vec![None; n];
        let sub = self.cfg.substeps.max(1);
        let mut step = 0;
        for w in times.windows(2) {
            let (ta, tb) = (self.cfg.tau(w[0]), self.cfg.tau(w[1]));
            let h = (tb - ta) / sub as f64;
            for s in 0..sub {
                v = self.step_batch(&ctx, ta + s as f64 * h, h, &v, n, None);
                step += 1;
                for b in 0..n {
                    if dead[b].is_none() && diverged(&v[b * l..(b + 1) * l]) {
                        dead[b] = Some(step);
                    }
                    if dead[b].is_some() {
                        // keep the row finite so it cannot poison shared work
                        v[b * l..(b + 1) * l].fill(0.0);
                    }
                }
            }
            for b in 0..n {
                states[b].push(v[b * l..(b + 1) * l].to_vec());
            }
        }
        states
            .into_iter()
            .zip(dead)
            .map(|(s, d)| match d {
                None => Rollout::Ok(s),
                Some(step) => Rollout::Diverged { step },
            })
            .collect()
    }

    /// Integrates from `v0` over `times` (µs) with inputs `xi`.
    pub fn integrate(&self, v0: &[f64], xi: &ParamVector, times: &[f64]) -> Result<Trajectory> {
        let out = self.integrate_batch(&[v0.to_vec()], &[xi.standardized()], times)?;
        match out.into_iter().next().unwrap() {
            Rollout::Ok(states) => Trajectory::new(times.to_vec(), states),
            Rollout::Diverged { step } => Err(Error::Divergence {
                step,
                detail: "latent state left the finite range".into(),
            }),
        }
    }

    /// The right-hand side recorded on a graph for a `[n, L]` state and a
    /// `[n, 16]` constant holding `[ξ̃, τ]` per row.
    pub fn rhs_graph(&self, g: &mut Graph, b: &BoundParams, v: Var, xi_tau: Var) -> Result<Var> {
        let x = g.concat(v, xi_tau)?;
        let a1 = g.dense(x, b.var("l1.w"), Some(b.var("l1.b")))?;
        let h1 = g.tanh(a1)?;
        let a2 = g.dense(h1, b.var("l2.w"), Some(b.var("l2.b")))?;
        let h2 = g.tanh(a2)?;
        g.dense(h2, b.var("out.w"), Some(b.var("out.b")))
    }

    /// Batched integration recorded on a graph, over τ-unit times.
    pub fn integrate_graph(&self, g: &mut Graph, b: &BoundParams, v0: Var, xi_std: &[[f64; N_XI]], taus: &[f64]) -> Result<Vec<Var>> {
        let n = xi_std.len();
        let sub = self.cfg.substeps;
        rk4_integrate_graph(g, v0, taus, sub, |g, tau, v| {
            let mut ctx = Vec::with_capacity(n * (N_XI + 1));
            for x in xi_std {
                ctx.extend_from_slice(x);
                ctx.push(tau);
            }
            let c = g.constant(Tensor::new(&[n, N_XI + 1], ctx)?);
            self.rhs_graph(g, b, v, c)
        })
    }

    /// Loss over the first `upto` grid points and its parameter gradient.
    ///
    /// The model is integrated from each truth trajectory's first state;
    /// velocities for the derivative term are central differences in τ.
    /// Returns `(loss, position_term, grads)` with grads in parameter order.
    pub fn window_loss_and_grads(
        &self,
        truth: &[Trajectory],
        xi_std: &[[f64; N_XI]],
        upto: usize,
        lambda: f64,
    ) -> Result<(f64, f64, Vec<Vec<f64>>)> {
        let (n, l, w, d) = (truth.len(), self.cfg.latent_dim, self.cfg.width, self.cfg.input_dim());
        if n == 0 || xi_std.len() != n {
            return Err(Error::dim("window_loss", "need one ξ per trajectory and at least one trajectory"));
        }
        let times = &truth[0].times;
        if upto < 2 || upto > times.len() {
            return Err(Error::Input(format!("window of {upto} points on a grid of {}", times.len())));
        }
        if truth.iter().any(|t| t.times != *times || t.dim() != l) {
            return Err(Error::dim("window_loss", "trajectories must share the grid and latent dimension"));
        }
        let taus: Vec<f64> = times[..upto].iter().map(|&t| self.cfg.tau(t)).collect();
        let sub = self.cfg.substeps.max(1);
        let ctx = self.contexts(xi_std);

        // forward, recording every stage
        let mut v: Vec<f64> = truth.iter().flat_map(|t| t.states[0].iter().copied()).collect();
        let mut grid_states = vec![v.clone()];
        let mut records: Vec<[StageRecord; 4]> = Vec::with_capacity((upto - 1) * sub);
        let mut step_meta = Vec::with_capacity((upto - 1) * sub);
        for j in 0..upto - 1 {
            let h = (taus[j + 1] - taus[j]) / sub as f64;
            for s in 0..sub {
                let tau = taus[j] + s as f64 * h;
                let mut rec: [StageRecord; 4] = std::array::from_fn(|_| StageRecord {
                    u: Vec::new(),
                    h1: Vec::new(),
                    h2: Vec::new(),
                });
                v = self.step_batch(&ctx, tau, h, &v, n, Some(&mut rec));
                if diverged(&v) {
                    return Err(Error::Divergence {
                        step: records.len() + 1,
                        detail: "training rollout left the finite range".into(),
                    });
                }
                records.push(rec);
                step_meta.push((tau, h));
            }
            grid_states.push(v.clone());
        }

        // loss and its gradient with respect to each grid state
        let t_len = upto as f64;
        let mut pos = 0.0;
        let mut g_states: Vec<Vec<f64>> = vec![vec![0.0; n * l]; upto];
        for j in 0..upto {
            for (b, tr) in truth.iter().enumerate() {
                for c in 0..l {
                    let diff = grid_states[j][b * l + c] - tr.states[j][c];
                    pos += diff * diff;
                    g_states[j][b * l + c] += 2.0 * diff / (n as f64 * t_len);
                }
            }
        }
        pos /= n as f64 * t_len;
        let mut vel = 0.0;
        if upto >= 3 {
            let denom = n as f64 * (upto - 2) as f64;
            for j in 1..upto - 1 {
                let dt = taus[j + 1] - taus[j - 1];
                for (b, tr) in truth.iter().enumerate() {
                    for c in 0..l {
                        let dp = (grid_states[j + 1][b * l + c] - grid_states[j - 1][b * l + c]) / dt;
                        let dq = (tr.states[j + 1][c] - tr.states[j - 1][c]) / dt;
                        let e = dp - dq;
                        vel += e * e;
                        let gv = lambda * 2.0 * e / (denom * dt);
                        g_states[j + 1][b * l + c] += gv;
                        g_states[j - 1][b * l + c] -= gv;
                    }
                }
            }
            vel /= denom;
        }
        let loss = pos + lambda * vel;

        // reverse sweep through the unrolled steps
        let wt = self.weights();
        let mut gw1 = vec![0.0; w * d];
        let mut gb1 = vec![0.0; w];
        let mut gw2 = vec![0.0; w * w];
        let mut gb2 = vec![0.0; w];
        let mut gw3 = vec![0.0; l * w];
        let mut gb3 = vec![0.0; l];
        let mut gctx = vec![0.0; n * w];
        let mut gv = g_states[upto - 1].clone();
        let mut gh2 = vec![0.0; n * w];
        let mut ga1 = vec![0.0; n * w];
        let w1u = Strided { rows: w, cols: l, rs: d, cs: 1 };
        let mut stage_bp = |rec: &StageRecord, tau: f64, gk: &[f64], gu: &mut [f64]| {
            let (nl, nw) = (Strided::rm(n, l), Strided::rm(n, w));
            for row in gk.chunks_exact(l) {
                axpy(1.0, row, &mut gb3);
            }
            gemm(1.0, gk, nl.t(), &rec.h2, nw, 1.0, &mut gw3, Strided::rm(l, w));
            gemm(1.0, gk, nl, wt.out, Strided::rm(l, w), 0.0, &mut gh2, nw);
            for (g, h) in gh2.iter_mut().zip(&rec.h2) {
                *g *= 1.0 - h * h;
            }
            for row in gh2.chunks_exact(w) {
                axpy(1.0, row, &mut gb2);
            }
            gemm(1.0, &gh2, nw.t(), &rec.h1, nw, 1.0, &mut gw2, Strided::rm(w, w));
            gemm(1.0, &gh2, nw, wt.l2, Strided::rm(w, w), 0.0, &mut ga1, nw);
            for (g, h) in ga1.iter_mut().zip(&rec.h1) {
                *g *= 1.0 - h * h;
            }
            axpy(1.0, &ga1, &mut gctx);
            for row in ga1.chunks_exact(w) {
                for (o, g) in row.iter().enumerate() {
                    gw1[o * d + d - 1] += g * tau;
                }
            }
            gemm(1.0, &ga1, nw.t(), &rec.u, nl, 1.0, &mut gw1, w1u);
            gemm(1.0, &ga1, nw, wt.l1, w1u, 1.0, gu, nl);
        };
        let mut si = records.len();
        for j in (0..upto - 1).rev() {
            for _ in 0..sub {
                si -= 1;
                let (tau, h) = step_meta[si];
                let rec = &records[si];
                // v' = v + h/6 (k1 + 2k2 + 2k3 + k4)
                let mut gk: [Vec<f64>; 4] = [
                    gv.iter().map(|g| g * h / 6.0).collect(),
                    gv.iter().map(|g| g * h / 3.0).collect(),
                    gv.iter().map(|g| g * h / 3.0).collect(),
                    gv.iter().map(|g| g * h / 6.0).collect(),
                ];
                let mut gu = vec![0.0; n * l];
                stage_bp(&rec[3], tau + h, &gk[3], &mut gu);
                axpy(h, &gu, &mut gk[2]);
                axpy(1.0, &gu, &mut gv);
                gu.fill(0.0);
                stage_bp(&rec[2], tau + 0.5 * h, &gk[2], &mut gu);
                axpy(0.5 * h, &gu, &mut gk[1]);
                axpy(1.0, &gu, &mut gv);
                gu.fill(0.0);
                stage_bp(&rec[1], tau + 0.5 * h, &gk[1], &mut gu);
                axpy(0.5 * h, &gu, &mut gk[0]);
                axpy(1.0, &gu, &mut gv);
                gu.fill(0.0);
                stage_bp(&rec[0], tau, &gk[0], &mut gu);
                axpy(1.0, &gu, &mut gv);
            }
            axpy(1.0, &g_states[j], &mut gv);
        }
        // context = W1ξ · ξ̃ + b1
        for (b, x) in xi_std.iter().enumerate() {
            for o in 0..w {
                let g = gctx[b * w + o];
                gb1[o] += g;
                axpy(g, x, &mut gw1[o * d + l..o * d + l + N_XI]);
            }
        }
        Ok((loss, pos, vec![gw1, gb1, gw2, gb2, gw3, gb3]))
    }
}
