//! Independent oracles shared by the integration tests and the acceptance
//! suite.

#![allow(dead_code)]

use dnae_core::autograd::{Activation, Graph, Var};
use dnae_core::compressor::{normalize, AeConfig, Autoencoder};
use dnae_core::dynamics::{rk4_integrate, rk4_integrate_graph};
use dnae_core::metrics::class_entropy;
use dnae_core::tensor::Tensor;
use dnae_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
// gradients below this magnitude are compared in absolute terms
pub const FD_FLOOR: f64 = 1e-3;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Entries in `±[0.1, 1)`, clear of relu's kink.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Build,
}

fn case(name: &'static str, shapes: &[&[usize]], build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

/// One case per differentiable graph op, plus a small composed network.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("conv2d", &[&[2, 8, 8], &[4, 2, 3, 3]], |g, v| g.conv2d(v[0], v[1], 1, 1)),
        case("conv2d_strided", &[&[1, 7, 5], &[2, 1, 3, 3]], |g, v| g.conv2d(v[0], v[1], 2, 0)),
        case("channel_bias", &[&[3, 2, 2], &[3]], |g, v| g.channel_bias(v[0], v[1])),
        case("pool2d", &[&[2, 4, 6]], |g, v| g.pool2d(v[0], 2)),
        case("upsample", &[&[2, 2, 3]], |g, v| g.upsample(v[0], 2)),
        case("dense", &[&[5], &[3, 5], &[3]], |g, v| g.dense(v[0], v[1], Some(v[2]))),
        case("dense_batch", &[&[4, 3], &[2, 3]], |g, v| g.dense(v[0], v[1], None)),
        case("relu", &[&[3, 4]], |g, v| g.activation(v[0], Activation::Relu)),
        case("tanh", &[&[3, 4]], |g, v| g.tanh(v[0])),
        case("add", &[&[6], &[6]], |g, v| g.add(v[0], v[1])),
        case("sub", &[&[2, 3], &[2, 3]], |g, v| g.sub(v[0], v[1])),
        case("mul", &[&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1])),
        case("scale", &[&[4]], |g, v| g.scale(v[0], -2.5)),
        case("lincomb", &[&[4], &[4], &[4]], |g, v| g.lincomb(&[(v[0], 0.5), (v[1], -1.5), (v[2], 2.0)])),
        case("concat", &[&[2, 3], &[2, 2]], |g, v| g.concat(v[0], v[1])),
        case("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        case("sum", &[&[5]], |g, v| g.sum(v[0])),
        case("sum_squares", &[&[2, 3]], |g, v| g.sum_squares(v[0])),
        case("squared_distance", &[&[7], &[7]], |g, v| g.squared_distance(v[0], v[1])),
        case("reuse", &[&[4]], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            let t = g.tanh(sq)?;
            g.add(t, v[0])
        }),
        case("conv_relu_dense_mse", &[&[1, 6, 4], &[2, 1, 3, 3], &[3, 48], &[3], &[3]], |g, v| {
            let c = g.conv2d(v[0], v[1], 1, 1)?;
            let r = g.relu(c)?;
            let flat = g.reshape(r, &[48])?;
            let d = g.dense(flat, v[2], None)?;
            let d = g.add(d, v[3])?;
            g.squared_distance(d, v[4])
        }),
    ]
}

/// Scalar `Σ y ⊙ r` for a fixed projection `r`, so every output element
/// carries a distinct weight.
fn project(g: &mut Graph, y: Var) -> Var {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let r: Vec<f64> = (0..n).map(|i| ((i * 7919 % 101) as f64 / 101.0) - 0.4).collect();
    let r = g.constant(Tensor::new(&shape, r).unwrap());
    let p = g.mul(y, r).unwrap();
    g.sum(p).unwrap()
}

fn projected_value(inputs: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = build(&mut g, &vars).unwrap();
    let l = project(&mut g, y);
    g.value(l).item()
}

/// Largest relative error between backprop and central differences over
/// every input element of `c`.
pub fn op_error(c: &OpCase, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = c.shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = (c.build)(&mut g, &vars).unwrap();
    let l = project(&mut g, y);
    g.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad_or_zeros(*v);
        for j in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (projected_value(&plus, &c.build) - projected_value(&minus, &c.build)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Finite-difference check of the full autoencoder loss on 16×8 inputs
/// with respect to every parameter.
pub fn autoencoder_error() -> f64 {
    let cfg = AeConfig {
        latent_dim: 3,
        block_channels: vec![2, 3],
        input_dims: (16, 8),
        fc_hidden: 5,
        beta: 1e-3,
        ..AeConfig::default()
    };
    let mut ae = Autoencoder::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    // zero biases put pre-activations exactly on relu's kink; move off it
    for i in 0..ae.params.len() {
        for v in ae.params.tensor_mut(i).data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let fields: Vec<_> = (0..2)
        .map(|_| {
            let raw: Vec<f64> = (0..128).map(|_| rng.random_range(0.0..1.0)).collect();
            normalize(&raw, 16, 8, 0.0, 1.0).unwrap()
        })
        .collect();
    let batch: Vec<_> = fields.iter().collect();
    let beta = ae.cfg.beta;
    let (_, grads) = ae.loss_and_grads(&batch, beta).unwrap();
    let mut worst: f64 = 0.0;
    for (i, g) in grads.iter().enumerate() {
        for (j, &analytic) in g.iter().enumerate() {
            let orig = ae.params.tensor(i).data()[j];
            ae.params.tensor_mut(i).data_mut()[j] = orig + FD_STEP;
            let up = ae.loss(&batch, beta).unwrap();
            ae.params.tensor_mut(i).data_mut()[j] = orig - FD_STEP;
            let down = ae.loss(&batch, beta).unwrap();
            ae.params.tensor_mut(i).data_mut()[j] = orig;
            worst = worst.max(rel_err(analytic, (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Fixed 2×2 test matrix with complex eigenvalues.
pub const LINEAR_A: [[f64; 2]; 2] = [[-1.0, 2.0], [-3.0, -0.5]];

/// `exp(A t)` in closed form for a 2×2 matrix with complex eigenvalues.
pub fn expm2(a: [[f64; 2]; 2], t: f64) -> [[f64; 2]; 2] {
    let s = 0.5 * (a[0][0] + a[1][1]);
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let w2 = det - s * s;
    assert!(w2 > 0.0, "oracle covers the complex-eigenvalue case only");
    let w = w2.sqrt();
    let (c, sn) = ((w * t).cos(), (w * t).sin() / w);
    let e = (s * t).exp();
    [
        [e * (c + sn * (a[0][0] - s)), e * sn * a[0][1]],
        [e * sn * a[1][0], e * (c + sn * (a[1][1] - s))],
    ]
}

fn linear_rhs(a: [[f64; 2]; 2]) -> impl FnMut(f64, &[f64]) -> Vec<f64> {
    move |_, v| vec![a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
}

/// Max error of RK4 against the exact flow of `dv/dt = A v` on `[0, 2]`.
pub fn linear_rk4_error(dt: f64) -> f64 {
    let v0 = [1.0, -0.5];
    let n = (2.0 / dt).round() as usize;
    let times: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
    let states = rk4_integrate(linear_rhs(LINEAR_A), &v0, &times, 1).unwrap();
    times
        .iter()
        .zip(&states)
        .map(|(&t, v)| {
            let m = expm2(LINEAR_A, t);
            let exact = [m[0][0] * v0[0] + m[0][1] * v0[1], m[1][0] * v0[0] + m[1][1] * v0[1]];
            (v[0] - exact[0]).abs().max((v[1] - exact[1]).abs())
        })
        .fold(0.0, f64::max)
}

/// Observed orders `log2(e(dt) / e(dt/2))` across three halvings from 0.1.
pub fn linear_rk4_orders() -> Vec<f64> {
    let errs: Vec<f64> = [0.1, 0.05, 0.025, 0.0125].iter().map(|&dt| linear_rk4_error(dt)).collect();
    errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

/// Gradient of `r · v(T)` through 20 recorded RK4 steps of `dv/dt = A v`
/// with respect to `A` and `v0`, against central differences of the plain
/// integrator. Returns the largest relative error.
pub fn linear_backprop_error() -> f64 {
    let times: Vec<f64> = (0..=20).map(|k| k as f64 * 0.05).collect();
    let r = [0.7, -1.3];
    let a0 = LINEAR_A;
    let v0 = [1.0, -0.5];
    let terminal = |a: [[f64; 2]; 2], v: [f64; 2]| {
        let s = rk4_integrate(linear_rhs(a), &v, &times, 1).unwrap();
        let last = s.last().unwrap();
        r[0] * last[0] + r[1] * last[1]
    };

    let mut g = Graph::new();
    let a_var = g.param(Tensor::new(&[2, 2], a0.iter().flatten().copied().collect()).unwrap());
    let v_var = g.param(Tensor::new(&[2], v0.to_vec()).unwrap());
    let states = rk4_integrate_graph(&mut g, v_var, &times, 1, |g, _, v| g.dense(v, a_var, None)).unwrap();
    let rv = g.constant(Tensor::new(&[2], r.to_vec()).unwrap());
    let p = g.mul(*states.last().unwrap(), rv).unwrap();
    let l = g.sum(p).unwrap();
    g.backward(l).unwrap();
    let ga = g.grad_or_zeros(a_var);
    let gv = g.grad_or_zeros(v_var);

    let mut worst: f64 = 0.0;
    for k in 0..4 {
        let (i, j) = (k / 2, k % 2);
        let (mut up, mut down) = (a0, a0);
        up[i][j] += FD_STEP;
        down[i][j] -= FD_STEP;
        let num = (terminal(up, v0) - terminal(down, v0)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(ga[k], num));
    }
    for k in 0..2 {
        let (mut up, mut down) = (v0, v0);
        up[k] += FD_STEP;
        down[k] -= FD_STEP;
        let num = (terminal(a0, up) - terminal(a0, down)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(gv[k], num));
    }
    worst
}

fn dist(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Discrete Fréchet distance by enumerating every monotone coupling path.
pub fn brute_frechet(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    fn walk(a: &[Vec<f64>], b: &[Vec<f64>], i: usize, j: usize, so_far: f64, best: &mut f64) {
        let here = so_far.max(dist(&a[i], &b[j]));
        if i + 1 == a.len() && j + 1 == b.len() {
            *best = best.min(here);
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, here, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, here, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, here, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    best
}

pub fn random_polyline(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<Vec<f64>> {
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect()
}

/// Probability in `[0, 0.5]` with binary entropy `target`, by bisection.
pub fn entropy_inverse(target: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 0.5f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if class_entropy(mid).unwrap() < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
