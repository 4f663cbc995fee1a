//! Convolutional autoencoder that compresses normalized 2-D fields into a
//! short latent vector and reconstructs them.
//!
//! Encoder: `blocks × [conv3 → relu, + residual (1×1 projection when the
//! channel count changes), avg-pool 2]`, flatten, `fc → relu → fc`.
//! Decoder mirrors it: `fc → relu → fc → relu`, reshape, then
//! `[upsample 2 → conv3 → relu + residual]` per block and a final
//! `upsample 2 → conv3` to a single channel. The training objective uses the
//! linear decoder output; [`Autoencoder::decode`] clamps it to `[0, 1]`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{uniform_fan_in, Adam, AdamConfig, BoundParams, NetworkParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormMeta {
    pub min: f64,
    pub max: f64,
}

/// A min–max normalized `H × W` field.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub norm: NormMeta,
}

/// Affine rescaling of `raw` by the trial's `(min, max)`, clamped to `[0, 1]`.
pub fn normalize(raw: &[f64], height: usize, width: usize, trial_min: f64, trial_max: f64) -> Result<Field> {
    if raw.len() != height * width {
        return Err(Error::dim("normalize", format!("{} values for {height}x{width}", raw.len())));
    }
    if !(trial_max > trial_min) {
        return Err(Error::DegenerateField {
            min: trial_min,
            max: trial_max,
        });
    }
    let span = trial_max - trial_min;
    let values = raw
        .iter()
        .map(|&v| ((v - trial_min) / span).clamp(0.0, 1.0))
        .collect();
    Ok(Field {
        height,
        width,
        values,
        norm: NormMeta {
            min: trial_min,
            max: trial_max,
        },
    })
}

impl Field {
    pub fn denormalize(&self) -> Vec<f64> {
        let span = self.norm.max - self.norm.min;
        self.values.iter().map(|&v| self.norm.min + v * span).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width], self.values.clone()).expect("field dims")
    }

    pub fn mse(&self, other: &Field) -> f64 {
        let n = self.values.len() as f64;
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }
}

/// Latent state `V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentState(pub Vec<f64>);

impl LatentState {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn distance(&self, other: &LatentState) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub latent_dim: usize,
    pub block_channels: Vec<usize>,
    pub kernel: usize,
    pub beta: f64,
    pub input_dims: (usize, usize),
    pub fc_hidden: usize,
    pub seed: u64,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            block_channels: vec![16, 32, 64],
            kernel: 3,
            beta: 1e-6,
            input_dims: (96, 48),
            fc_hidden: 64,
            seed: 7,
        }
    }
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_dims;
        let f = 1usize << self.block_channels.len();
        if self.block_channels.is_empty() || self.block_channels.contains(&0) {
            return Err(Error::Config("block_channels must be non-empty and positive".into()));
        }
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Config(format!(
                "input dims {h}x{w} must be divisible by 2^{} = {f}",
                self.block_channels.len()
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.latent_dim == 0 || self.fc_hidden == 0 {
            return Err(Error::Config("latent_dim and fc_hidden must be positive".into()));
        }
        Ok(())
    }

    /// `(C, H, W)` after each encoder stage, starting with the input.
    pub fn encoder_shapes(&self) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = self.input_dims;
        let mut out = vec![(1, h, w)];
        for &c in &self.block_channels {
            h /= 2;
            w /= 2;
            out.push((c, h, w));
        }
        out
    }

    /// `(C, H, W)` after each decoder stage, starting from the reshaped bottleneck.
    pub fn decoder_shapes(&self) -> Vec<(usize, usize, usize)> {
        let (c, mut h, mut w) = *self.encoder_shapes().last().unwrap();
        let mut out = vec![(c, h, w)];
        let nb = self.block_channels.len();
        for i in (0..nb).rev() {
            h *= 2;
            w *= 2;
            let c_out = if i == 0 { 1 } else { self.block_channels[i - 1] };
            out.push((c_out, h, w));
        }
        out
    }

    fn flat_dim(&self) -> usize {
        let (c, h, w) = *self.encoder_shapes().last().unwrap();
        c * h * w
    }
}

/// Convolutional autoencoder with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub cfg: AeConfig,
    pub params: NetworkParams,
}

impl Autoencoder {
    pub fn new(cfg: AeConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = NetworkParams::new();
        let k = cfg.kernel;
        let relu_gain = 2f64.sqrt();
        let mut c_in = 1;
        for (i, &c) in cfg.block_channels.iter().enumerate() {
            p.insert(format!("enc.conv{i}.w"), uniform_fan_in(&mut rng, &[c, c_in, k, k], c_in * k * k, relu_gain));
            p.insert(format!("enc.conv{i}.b"), Tensor::zeros(&[c]));
            if c != c_in {
                p.insert(format!("enc.proj{i}.w"), uniform_fan_in(&mut rng, &[c, c_in, 1, 1], c_in, 1.0));
            }
            c_in = c;
        }
        let flat = cfg.flat_dim();
        let (hid, lat) = (cfg.fc_hidden, cfg.latent_dim);
        p.insert("enc.fc1.w", uniform_fan_in(&mut rng, &[hid, flat], flat, relu_gain));
        p.insert("enc.fc1.b", Tensor::zeros(&[hid]));
        p.insert("enc.fc2.w", uniform_fan_in(&mut rng, &[lat, hid], hid, 1.0));
        p.insert("enc.fc2.b", Tensor::zeros(&[lat]));
        p.insert("dec.fc1.w", uniform_fan_in(&mut rng, &[hid, lat], lat, relu_gain));
        p.insert("dec.fc1.b", Tensor::zeros(&[hid]));
        p.insert("dec.fc2.w", uniform_fan_in(&mut rng, &[flat, hid], hid, relu_gain));
        p.insert("dec.fc2.b", Tensor::zeros(&[flat]));
        let nb = cfg.block_channels.len();
        for i in (1..nb).rev() {
            let (ci, co) = (cfg.block_channels[i], cfg.block_channels[i - 1]);
            p.insert(format!("dec.conv{i}.w"), uniform_fan_in(&mut rng, &[co, ci, k, k], ci * k * k, relu_gain));
            p.insert(format!("dec.conv{i}.b"), Tensor::zeros(&[co]));
            if ci != co {
                p.insert(format!("dec.proj{i}.w"), uniform_fan_in(&mut rng, &[co, ci, 1, 1], ci, 1.0));
            }
        }
        let c0 = cfg.block_channels[0];
        p.insert("dec.out.w", uniform_fan_in(&mut rng, &[1, c0, k, k], c0 * k * k, 1.0));
        p.insert("dec.out.b", Tensor::zeros(&[1]));
        Ok(Self { cfg, params: p })
    }

    pub fn from_params(cfg: AeConfig, params: NetworkParams) -> Result<Self> {
        let reference = Self::new(cfg.clone())?;
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, config expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self { cfg, params })
    }

    /// Names of the encoder weight tensors (biases excluded) entering the
    /// weight-decay term.
    pub fn encoder_weight_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with("enc.") && n.ends_with(".w"))
            .map(|(n, _)| n.to_string())
            .collect()
    }

    fn check_field(&self, x: &Field) -> Result<()> {
        if (x.height, x.width) != self.cfg.input_dims {
            return Err(Error::dim(
                "encode",
                format!("field {}x{} vs configured {:?}", x.height, x.width, self.cfg.input_dims),
            ));
        }
        Ok(())
    }

    fn encode_graph(&self, g: &mut Graph, b: &BoundParams, x: Var) -> Result<Var> {
        let pad = self.cfg.kernel / 2;
        let mut h = x;
        for i in 0..self.cfg.block_channels.len() {
            let conv = g.conv2d(h, b.var(&format!("enc.conv{i}.w")), 1, pad)?;
            let conv = g.channel_bias(conv, b.var(&format!("enc.conv{i}.b")))?;
            let act = g.relu(conv)?;
            let skip = if b.has(&format!("enc.proj{i}.w")) {
                g.conv2d(h, b.var(&format!("enc.proj{i}.w")), 1, 0)?
            } else {
                h
            };
            let sum = g.add(act, skip)?;
            h = g.pool2d(sum, 2)?;
        }
        let flat = g.reshape(h, &[self.cfg.flat_dim()])?;
        let f1 = g.dense(flat, b.var("enc.fc1.w"), Some(b.var("enc.fc1.b")))?;
        let f1 = g.relu(f1)?;
        g.dense(f1, b.var("enc.fc2.w"), Some(b.var("enc.fc2.b")))
    }

    /// Linear (pre-clamp) reconstruction `[1, H, W]`.
    fn decode_graph(&self, g: &mut Graph, b: &BoundParams, v: Var) -> Result<Var> {
        let pad = self.cfg.kernel / 2;
        let f1 = g.dense(v, b.var("dec.fc1.w"), Some(b.var("dec.fc1.b")))?;
        let f1 = g.relu(f1)?;
        let f2 = g.dense(f1, b.var("dec.fc2.w"), Some(b.var("dec.fc2.b")))?;
        let f2 = g.relu(f2)?;
        let (c, hh, ww) = *self.cfg.encoder_shapes().last().unwrap();
        let mut h = g.reshape(f2, &[c, hh, ww])?;
        for i in (1..self.cfg.block_channels.len()).rev() {
            let up = g.upsample(h, 2)?;
            let conv = g.conv2d(up, b.var(&format!("dec.conv{i}.w")), 1, pad)?;
            let conv = g.channel_bias(conv, b.var(&format!("dec.conv{i}.b")))?;
            let act = g.relu(conv)?;
            let skip = if b.has(&format!("dec.proj{i}.w")) {
                g.conv2d(up, b.var(&format!("dec.proj{i}.w")), 1, 0)?
            } else {
                up
            };
            h = g.add(act, skip)?;
        }
        let up = g.upsample(h, 2)?;
        let out = g.conv2d(up, b.var("dec.out.w"), 1, pad)?;
        g.channel_bias(out, b.var("dec.out.b"))
    }

    fn bind_constants(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|(_, t)| g.constant(t.clone())).collect()
    }

    pub fn encode(&self, x: &Field) -> Result<LatentState> {
        self.check_field(x)?;
        let mut g = Graph::new();
        let vars = self.bind_constants(&mut g);
        let b = BoundParams::new(&self.params, &vars);
        let xv = g.constant(x.to_tensor());
        let v = self.encode_graph(&mut g, &b, xv)?;
        Ok(LatentState(g.value(v).data().to_vec()))
    }

    /// Reconstruction clamped to `[0, 1]`, carrying `norm` as its metadata.
    pub fn decode_with_norm(&self, v: &LatentState, norm: NormMeta) -> Result<Field> {
        if v.dim() != self.cfg.latent_dim {
            return Err(Error::dim("decode", format!("latent of length {} vs {}", v.dim(), self.cfg.latent_dim)));
        }
        let mut g = Graph::new();
        let vars = self.bind_constants(&mut g);
        let b = BoundParams::new(&self.params, &vars);
        let vv = g.constant(Tensor::from_vec(v.0.clone()));
        let out = self.decode_graph(&mut g, &b, vv)?;
        let (h, w) = self.cfg.input_dims;
        Ok(Field {
            height: h,
            width: w,
            values: g.value(out).data().iter().map(|x| x.clamp(0.0, 1.0)).collect(),
            norm,
        })
    }

    pub fn decode(&self, v: &LatentState) -> Result<Field> {
        self.decode_with_norm(v, NormMeta { min: 0.0, max: 1.0 })
    }

    pub fn reconstruct(&self, x: &Field) -> Result<Field> {
        let v = self.encode(x)?;
        self.decode_with_norm(&v, x.norm)
    }

    /// Reconstruction term for one field, `‖x − x̂‖² / (H·W) · weight`, with gradients.
    fn recon_term(&self, x: &Field, weight: f64) -> Result<(f64, Vec<Vec<f64>>)> {
        self.check_field(x)?;
        let mut g = Graph::new();
        let vars = self.params.register(&mut g);
        let b = BoundParams::new(&self.params, &vars);
        let xv = g.constant(x.to_tensor());
        let v = self.encode_graph(&mut g, &b, xv)?;
        let out = self.decode_graph(&mut g, &b, v)?;
        let d2 = g.squared_distance(out, xv)?;
        let loss = g.scale(d2, weight / x.values.len() as f64)?;
        g.backward(loss)?;
        Ok((g.value(loss).item(), self.params.collect_grads(&g, &vars)))
    }

    /// `β · mean(l_e²)` over encoder weights, with gradients.
    fn regularizer(&self, beta: f64) -> Result<(f64, Vec<Vec<f64>>)> {
        let names = self.encoder_weight_names();
        let n_e: usize = names.iter().map(|n| self.params.get(n).unwrap().len()).sum();
        let mut g = Graph::new();
        let vars = self.params.register(&mut g);
        let b = BoundParams::new(&self.params, &vars);
        let mut terms = Vec::with_capacity(names.len());
        for n in &names {
            let s = g.sum_squares(b.var(n))?;
            terms.push((s, beta / n_e as f64));
        }
        let reg = g.lincomb(&terms)?;
        g.backward(reg)?;
        Ok((g.value(reg).item(), self.params.collect_grads(&g, &vars)))
    }

    /// Regularized reconstruction loss and its gradient. Per-member passes
    /// may run in parallel; gradients are reduced in batch order.
    pub fn loss_and_grads(&self, batch: &[&Field], beta: f64) -> Result<(f64, Vec<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let w = 1.0 / batch.len() as f64;
        let parts: Vec<Result<(f64, Vec<Vec<f64>>)>> =
            batch.par_iter().map(|x| self.recon_term(x, w)).collect();
        let (mut loss, mut grads) = self.regularizer(beta)?;
        for part in parts {
            let (l, gr) = part?;
            loss += l;
            for (acc, g) in grads.iter_mut().zip(&gr) {
                crate::kernels::axpy(1.0, g, acc);
            }
        }
        Ok((loss, grads))
    }

    /// Value of the regularized reconstruction loss.
    pub fn loss(&self, batch: &[&Field], beta: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let recon: Vec<Result<f64>> = batch
            .par_iter()
            .map(|x| {
                self.check_field(x)?;
                let mut g = Graph::new();
                let vars = self.bind_constants(&mut g);
                let b = BoundParams::new(&self.params, &vars);
                let xv = g.constant(x.to_tensor());
                let v = self.encode_graph(&mut g, &b, xv)?;
                let out = self.decode_graph(&mut g, &b, v)?;
                let d2 = g.squared_distance(out, xv)?;
                Ok(g.value(d2).item() / x.values.len() as f64)
            })
            .collect();
        let mut total = 0.0;
        for r in recon {
            total += r?;
        }
        Ok(total / batch.len() as f64 + self.regularization(beta))
    }

    pub fn regularization(&self, beta: f64) -> f64 {
        let names = self.encoder_weight_names();
        let (mut s, mut n) = (0.0, 0usize);
        for name in &names {
            let t = self.params.get(name).unwrap();
            s += crate::kernels::dot(t.data(), t.data());
            n += t.len();
        }
        beta * s / n as f64
    }
}

/// `(1/N) Σ ‖x_i − x̂_i‖² / (H·W) + β · mean(l_e²)` over encoder weights.
pub fn ae_loss(batch: &[&Field], model: &Autoencoder, beta: f64) -> Result<f64> {
    model.loss(batch, beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of groups (trials) held out for validation.
    pub split: f64,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            split: 0.1,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub val: f64,
}

#[derive(Debug, Clone)]
pub struct AeTrainResult {
    pub model: Autoencoder,
    pub history: Vec<EpochLoss>,
    pub train_groups: Vec<usize>,
    pub val_groups: Vec<usize>,
}

/// Seeded split of group ids into `(train, val)`; at least one group lands
/// on each side when there are two or more.
pub fn split_groups(groups: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_val = ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len().saturating_sub(1).max(1));
    let mut val: Vec<usize> = ids[..n_val].to_vec();
    let mut train: Vec<usize> = ids[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Trains the autoencoder with Adam on minibatches. `groups[i]` is the trial
/// id of `frames[i]`; validation holds out whole trials. With a single trial
/// the split falls back to individual frames.
pub fn train_ae(
    frames: &[Field],
    groups: &[usize],
    cfg: &AeConfig,
    opt: &AdamConfig,
    train_cfg: &AeTrainConfig,
) -> Result<AeTrainResult> {
    if frames.len() < 10 {
        return Err(Error::Input(format!("dataset needs at least 10 frames, got {}", frames.len())));
    }
    if frames.len() != groups.len() {
        return Err(Error::dim("train_ae", "frames and groups differ in length"));
    }
    if !(train_cfg.split > 0.0 && train_cfg.split < 1.0) {
        return Err(Error::Config(format!("split must lie in (0, 1), got {}", train_cfg.split)));
    }
    opt.validate()?;
    let distinct = {
        let mut g = groups.to_vec();
        g.sort_unstable();
        g.dedup();
        g.len()
    };
    let effective: Vec<usize> = if distinct >= 2 { groups.to_vec() } else { (0..frames.len()).collect() };
    let (train_groups, val_groups) = split_groups(&effective, train_cfg.split, train_cfg.seed);
    let is_val = |g: usize| val_groups.binary_search(&g).is_ok();
    let train_idx: Vec<usize> = (0..frames.len()).filter(|&i| !is_val(effective[i])).collect();
    let val_set: Vec<&Field> = (0..frames.len()).filter(|&i| is_val(effective[i])).map(|i| &frames[i]).collect();

    let mut model = Autoencoder::new(cfg.clone())?;
    let mut adam = Adam::new(opt.clone(), &model.params);
    let mut history = Vec::with_capacity(train_cfg.epochs);
    let mut order = train_idx.clone();
    let bs = train_cfg.batch_size.max(1);
    for epoch in 0..train_cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed.wrapping_add(1 + epoch as u64));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(bs) {
            let batch: Vec<&Field> = chunk.iter().map(|&i| &frames[i]).collect();
            let (loss, grads) = model.loss_and_grads(&batch, cfg.beta).map_err(|e| Error::TrainingFailure {
                stage: "epoch",
                index: epoch,
                detail: e.to_string(),
            })?;
            if !loss.is_finite() {
                return Err(Error::TrainingFailure {
                    stage: "epoch",
                    index: epoch,
                    detail: "non-finite loss".into(),
                });
            }
            adam.step(&mut model.params, &grads);
            sum += loss * chunk.len() as f64;
            count += chunk.len();
        }
        let train = sum / count as f64;
        let val = if val_set.is_empty() {
            f64::NAN
        } else {
            model.loss(&val_set, cfg.beta).map_err(|e| Error::TrainingFailure {
                stage: "epoch",
                index: epoch,
                detail: e.to_string(),
            })?
        };
        log::info!("ae epoch {epoch}: train {train:.6e} val {val:.6e}");
        history.push(EpochLoss { epoch, train, val });
    }
    Ok(AeTrainResult {
        model,
        history,
        train_groups,
        val_groups,
    })
}
