//! The subcommands.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;

use dnae_core::classifier::{classify_by_area, IsothermSeries, DEFAULT_AREA_WINDOW};
use dnae_core::compressor::{self, AeConfig, AeTrainConfig, LatentState, NormMeta};
use dnae_core::container::{self, ModelDir, Outcome};
use dnae_core::curriculum::{self, CurriculumConfig, TrainHooks};
use dnae_core::dynamics::{LatentOde, NodeConfig, Trajectory};
use dnae_core::metrics::{kl_ranking, median, wilson_interval, ConfusionMatrix, QuarterErrors};
use dnae_core::params::AdamConfig;
use dnae_core::pipeline::{self, TrialSet};
use dnae_core::synth::{self, SynthConfig};
use dnae_core::uncertainty::{ParamVector, N_XI};
use dnae_core::uq::{self, CampaignConfig, Label, OutcomeRecord, ProbabilityMap, CONTOUR_LEVELS};

use crate::output::{out_dir, snapshot, write_file, write_json, Csv};
use crate::Global;

const WILSON_Z: f64 = 1.96;

#[derive(Debug, Args, Serialize)]
pub struct GenData {
    #[arg(long, default_value_t = 300)]
    pub trials: usize,
    #[arg(long, default_value_t = 20)]
    pub snapshots: usize,
    #[arg(long, default_value_t = 96)]
    pub rows: usize,
    #[arg(long, default_value_t = 48)]
    pub cols: usize,
    #[arg(long, default_value_t = 500.0)]
    pub horizon_us: f64,
    #[arg(long, default_value_t = 0.1)]
    pub pixel_mm: f64,
    /// Switch threshold; moved to the median if the classes come out unbalanced.
    #[arg(long, default_value_t = synth::DEFAULT_THETA0, allow_hyphen_values = true)]
    pub theta0: f64,
}

pub fn gen_data(g: &Global, a: &GenData) -> Result<()> {
    let dir = out_dir(g)?;
    let cfg = SynthConfig {
        grid: (a.rows, a.cols),
        n_trials: a.trials,
        n_snapshots: a.snapshots,
        horizon_us: a.horizon_us,
        pixel_mm: a.pixel_mm,
        theta0: a.theta0,
        seed: g.seed,
    };
    let ds = synth::generate(&cfg)?;
    let m = container::write_dataset(&dir, &ds)?;
    log::info!(
        "{} trials written to {}, success fraction {:.3}",
        m.trials.len(),
        dir.display(),
        ds.success_fraction()
    );
    snapshot(&dir, "gen-data", g, a)
}

#[derive(Debug, Args, Serialize)]
pub struct TrainAe {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// One value, or a comma list to sweep (one model per value).
    #[arg(long, value_delimiter = ',', default_value = "8")]
    pub latent_dim: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    pub channels: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub fc_hidden: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub beta: f64,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Fraction of trials held out.
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
}

pub fn train_ae(g: &Global, a: &TrainAe) -> Result<()> {
    let dir = out_dir(g)?;
    ensure!(!a.latent_dim.is_empty(), "--latent-dim needs at least one value");
    let m = container::read_dataset(&a.data)?;
    let (frames, groups) = pipeline::load_frames(&a.data, &m)?;
    let sweep = a.latent_dim.len() > 1;
    for &ld in &a.latent_dim {
        let target = if sweep { dir.join(format!("latent_{ld}")) } else { dir.clone() };
        fs::create_dir_all(&target)?;
        let cfg = AeConfig {
            latent_dim: ld,
            block_channels: a.channels.clone(),
            beta: a.beta,
            input_dims: (m.grid[0], m.grid[1]),
            fc_hidden: a.fc_hidden,
            seed: g.seed,
            ..AeConfig::default()
        };
        let opt = AdamConfig {
            lr0: a.lr,
            schedule: Vec::new(),
            ..AdamConfig::default()
        };
        let tcfg = AeTrainConfig {
            epochs: a.epochs,
            batch_size: a.batch_size,
            split: a.val_fraction,
            seed: g.seed.wrapping_add(1),
        };
        let res = compressor::train_ae(&frames, &groups, &cfg, &opt, &tcfg)?;
        let mut csv = Csv::create(target.join("ae_loss.csv"), "epoch,train_loss,val_loss")?;
        for e in &res.history {
            csv.row(&format!("{},{:e},{:e}", e.epoch, e.train, e.val))?;
        }
        csv.finish()?;
        let md = ModelDir::new(&target);
        let mut manifest = md.manifest()?;
        manifest.validation_trials = Some(res.val_groups.clone());
        manifest.field_norm = Some(median_norm(&m));
        manifest.isotherm_level = Some(m.isotherm_level);
        manifest.pixel_mm = Some(m.pixel_mm);
        md.write_manifest(&manifest)?;
        md.save_ae(&res.model)?;
        log::info!("latent dim {ld}: final val loss {:.4e}", res.history.last().map_or(f64::NAN, |e| e.val));
        snapshot(&target, "train-ae", g, a)?;
    }
    if sweep {
        snapshot(&dir, "train-ae", g, a)?;
    }
    Ok(())
}

/// Median of the per-trial normalization ranges.
fn median_norm(m: &container::DatasetManifest) -> NormMeta {
    let mins: Vec<f64> = m.trials.iter().map(|t| t.norm.min).collect();
    let maxs: Vec<f64> = m.trials.iter().map(|t| t.norm.max).collect();
    NormMeta {
        min: median(&mins).unwrap_or(0.0),
        max: median(&maxs).unwrap_or(1.0),
    }
}

#[derive(Debug, Args, Serialize)]
pub struct Encode {
    #[arg(long)]
    pub data: PathBuf,
    /// Model directory holding the autoencoder.
    #[arg(long)]
    pub model: PathBuf,
}

pub fn encode(g: &Global, a: &Encode) -> Result<()> {
    let dir = out_dir(g)?;
    let m = container::read_dataset(&a.data)?;
    let md = ModelDir::new(&a.model);
    let ae = md.load_ae()?;
    let val: BTreeSet<usize> = md.manifest()?.validation_trials.unwrap_or_default().into_iter().collect();
    let entries = pipeline::encode_dataset(&ae, &a.data, &m, &val)?;
    log::info!("encoded {} trials ({} held out)", entries.len(), val.len());
    container::write_latents(&dir, ae.cfg.latent_dim, entries)?;
    snapshot(&dir, "encode", g, a)
}

#[derive(Debug, Args, Serialize)]
pub struct TrainNode {
    /// Encoded latent set.
    #[arg(long)]
    pub latents: PathBuf,
    /// Model directory whose autoencoder is carried into the output model.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 1)]
    pub substeps: usize,
    #[arg(long, default_value_t = 50)]
    pub folds: usize,
    #[arg(long, default_value_t = 10)]
    pub upsample: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub lambda: f64,
    /// Iteration budget; the learning-rate drops scale with it.
    #[arg(long, default_value_t = 20_000)]
    pub max_iters: u64,
    /// Advance folds on the position error alone.
    #[arg(long)]
    pub plain_mse: bool,
    #[arg(long, default_value_t = 20_000)]
    pub stall_patience: u64,
    /// Parameter checkpoint interval in iterations (0 disables).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
}

pub fn train_node(g: &Global, a: &TrainNode) -> Result<()> {
    let dir = out_dir(g)?;
    let set = container::read_latents(&a.latents)?;
    let (train, _) = pipeline::split_latents(&set);
    ensure!(!train.is_empty(), "latent set has no training trials");
    let data = train.upsampled(a.upsample, a.folds)?;
    let times = data[0].times.clone();
    let node_cfg = NodeConfig {
        latent_dim: set.manifest.latent_dim,
        width: a.width,
        t0: times[0],
        horizon: times[times.len() - 1] - times[0],
        substeps: a.substeps,
        seed: g.seed.wrapping_add(2),
    };
    let curr = CurriculumConfig {
        n_folds: a.folds,
        epsilon: a.epsilon,
        lambda: a.lambda,
        advance_on_position: a.plain_mse,
        stall_patience: a.stall_patience,
        checkpoint_every: a.checkpoint_every,
    };
    let adam = AdamConfig::scaled_to(a.max_iters);

    let ckpt_dir = dir.join("checkpoints");
    if a.checkpoint_every > 0 {
        fs::create_dir_all(&ckpt_dir)?;
    }
    let mut save_ckpt = |it: u64, node: &LatentOde| container::save_params(&ckpt_dir.join(format!("node_{it:06}.params")), &node.params);
    let log_path = dir.join("node_log.csv");
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let hooks = TrainHooks {
        log: Some(&mut log),
        checkpoint: if a.checkpoint_every > 0 { Some(&mut save_ckpt) } else { None },
    };
    let res = curriculum::train_node(&data, &train.xis, &node_cfg, &adam, &curr, a.upsample, hooks)?;
    std::io::Write::flush(&mut log).with_context(|| format!("writing {}", log_path.display()))?;
    let mut ev = Csv::create(dir.join("events.csv"), "iteration,active_folds")?;
    for (it, folds) in &res.state.event_log {
        ev.row(&format!("{it},{folds}"))?;
    }
    ev.finish()?;
    if !res.converged {
        log::warn!(
            "curriculum stopped at {}/{} folds without converging",
            res.state.active_folds,
            res.state.n_folds
        );
    }

    let md = ModelDir::new(&dir);
    if let Some(src) = &a.model {
        carry_autoencoder(src, &dir)?;
    }
    md.save_node(&res.model, Some(&res.state), &times)?;
    let preds = pipeline::predict_set(&res.model, &train, &times)?;
    let clf = pipeline::calibrate_on_predictions(&preds, &train.outcomes)?;
    let rbf = pipeline::fit_initial_state_rbf(&train)?;
    let mut manifest = md.manifest()?;
    manifest.classifier = Some(clf);
    manifest.bounds = Some(uq::ensemble_bounds(&train.xis)?);
    md.write_manifest(&manifest)?;
    md.save_rbf(&rbf)?;
    let cm = pipeline::evaluate_classifier(&clf, &preds, &train.outcomes)?;
    log::info!(
        "classifier: component {} sign {} threshold {:.4e}, training accuracy {:.3}",
        clf.component,
        clf.sign,
        clf.threshold,
        cm.accuracy().unwrap_or(f64::NAN)
    );
    snapshot(&dir, "train-node", g, a)
}

/// Copies the autoencoder files and metadata of `src` into `dst`.
fn carry_autoencoder(src: &Path, dst: &Path) -> Result<()> {
    if fs::canonicalize(src).ok() == fs::canonicalize(dst).ok() {
        return Ok(());
    }
    let from = ModelDir::new(src).manifest()?;
    ensure!(from.ae.is_some(), "{} holds no autoencoder", src.display());
    let to_dir = ModelDir::new(dst);
    let mut to = to_dir.manifest()?;
    to.ae = from.ae;
    to.validation_trials = from.validation_trials;
    to.field_norm = from.field_norm;
    to.isotherm_level = from.isotherm_level;
    to.pixel_mm = from.pixel_mm;
    to_dir.write_manifest(&to)?;
    fs::copy(src.join("ae.params"), dst.join("ae.params")).context("copying autoencoder parameters")?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub enum InitialState {
    Rbf,
    File(PathBuf),
}

fn parse_initial(s: &str) -> Result<InitialState, String> {
    Ok(if s == "rbf" { InitialState::Rbf } else { InitialState::File(PathBuf::from(s)) })
}

#[derive(Debug, Args, Serialize)]
pub struct Predict {
    #[arg(long)]
    pub model: PathBuf,
    /// The 15 input components, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub xi: Vec<f64>,
    /// `rbf`, or a JSON file holding the initial latent state as an array.
    #[arg(long, default_value = "rbf", value_parser = parse_initial)]
    pub v0: InitialState,
    /// Output grid in µs; defaults to the training grid.
    #[arg(long, value_delimiter = ',')]
    pub times: Option<Vec<f64>>,
    /// Also decode every state and write frames plus an isotherm-area table.
    #[arg(long)]
    pub decode: bool,
    #[arg(long, default_value_t = DEFAULT_AREA_WINDOW)]
    pub area_window: usize,
}

pub fn predict(g: &Global, a: &Predict) -> Result<()> {
    let xi = ParamVector::from_slice(&a.xi)?;
    let dir = out_dir(g)?;
    let md = ModelDir::new(&a.model);
    let manifest = md.manifest()?;
    let node = md.load_node()?;
    let times = match &a.times {
        Some(t) => t.clone(),
        None => manifest.node_times.clone().context("model has no training grid; pass --times")?,
    };
    let v0 = match &a.v0 {
        InitialState::Rbf => md.load_rbf()?.predict(&xi),
        InitialState::File(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<Vec<f64>>(&text).with_context(|| format!("{}: expected a JSON array of numbers", p.display()))?
        }
    };
    let traj = node.integrate(&v0, &xi, &times)?;
    let outcome = match &manifest.classifier {
        Some(c) => Some(Outcome::from_bool(c.classify(&traj)?)),
        None => None,
    };
    container::write_trajectory(&dir, "trajectory", &xi, &traj, outcome)?;
    let mut summary = serde_json::json!({ "latent_outcome": outcome });
    if a.decode {
        let ae = md.load_ae()?;
        let norm = manifest.field_norm.unwrap_or(NormMeta { min: 0.0, max: 1.0 });
        let level = manifest.isotherm_level.context("model lacks the isotherm level")?;
        let level = (level - norm.min) / (norm.max - norm.min);
        let px = manifest.pixel_mm.unwrap_or(1.0);
        let frames_dir = dir.join("frames");
        fs::create_dir_all(&frames_dir)?;
        let mut fields = Vec::with_capacity(traj.len());
        for (k, s) in traj.states.iter().enumerate() {
            let f = ae.decode_with_norm(&LatentState(s.clone()), norm)?;
            let raw = f.denormalize();
            dnae_core::tensor::Tensor::new(&[f.height, f.width], raw)?.save(&frames_dir.join(format!("frame_{k:04}.dnt")))?;
            fields.push(f);
        }
        let series = IsothermSeries::from_fields(&fields, &times, level, px * px)?;
        let mut csv = Csv::create(dir.join("areas.csv"), "time_us,area_mm2")?;
        for (t, ar) in series.times.iter().zip(&series.areas) {
            csv.row(&format!("{t:e},{ar:e}"))?;
        }
        csv.finish()?;
        let grows = classify_by_area(&series, a.area_window)?;
        summary["area_outcome"] = serde_json::json!(Outcome::from_bool(grows));
    }
    write_json(&dir.join("prediction.json"), &summary)?;
    snapshot(&dir, "predict", g, a)
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifyBy {
    /// Latent-branch rule on predicted trajectories.
    Latent,
    /// Isotherm-area growth on the dataset frames.
    Area,
}

#[derive(Debug, Args, Serialize)]
pub struct Classify {
    #[arg(long, value_enum, default_value_t = ClassifyBy::Latent)]
    pub by: ClassifyBy,
    /// Model directory (latent rule).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Encoded latent set (latent rule).
    #[arg(long)]
    pub latents: Option<PathBuf>,
    /// Dataset directory (area rule).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_AREA_WINDOW)]
    pub area_window: usize,
}

pub fn classify(g: &Global, a: &Classify) -> Result<()> {
    let dir = out_dir(g)?;
    let mut rows = Csv::create(dir.join("classification.csv"), "id,split,actual,predicted,score")?;
    let mut cms: Vec<(&str, ConfusionMatrix)> = Vec::new();
    match a.by {
        ClassifyBy::Latent => {
            let model = a.model.as_ref().context("--model is required for the latent rule")?;
            let latents = a.latents.as_ref().context("--latents is required for the latent rule")?;
            let md = ModelDir::new(model);
            let manifest = md.manifest()?;
            let clf = manifest.classifier.context("model has no calibrated classifier")?;
            let times = manifest.node_times.context("model has no training grid")?;
            let node = md.load_node()?;
            let set = container::read_latents(latents)?;
            let (train, val) = pipeline::split_latents(&set);
            for (name, part) in [("train", &train), ("validation", &val)] {
                if part.is_empty() {
                    continue;
                }
                let preds = pipeline::predict_set(&node, part, &times)?;
                for ((id, p), &o) in part.ids.iter().zip(&preds).zip(&part.outcomes) {
                    let (pred, score) = match p {
                        Some(t) => (Some(clf.classify(t)?), clf.score(t)?),
                        None => (None, f64::NAN),
                    };
                    let pred = pred.map_or("invalid", label_str);
                    rows.row(&format!("{id},{name},{},{pred},{score:e}", label_str(o)))?;
                }
                cms.push((name, pipeline::evaluate_classifier(&clf, &preds, &part.outcomes)?));
            }
        }
        ClassifyBy::Area => {
            let data = a.data.as_ref().context("--data is required for the area rule")?;
            let m = container::read_dataset(data)?;
            let mut predicted = Vec::new();
            let mut actual = Vec::new();
            for t in &m.trials {
                let fields = container::load_trial_fields(data, &m, t)?;
                let level = container::normalized_level(&m, t);
                let series = IsothermSeries::from_fields(&fields, &t.times_us, level, m.pixel_mm * m.pixel_mm)?;
                let p = classify_by_area(&series, a.area_window)?;
                let last = series.areas.last().copied().unwrap_or(0.0);
                rows.row(&format!("{},all,{},{},{last:e}", t.id, label_str(t.outcome.is_success()), label_str(p)))?;
                predicted.push(p);
                actual.push(t.outcome.is_success());
            }
            cms.push(("all", dnae_core::metrics::confusion(&predicted, &actual)?));
        }
    }
    rows.finish()?;
    write_confusions(&dir.join("confusion.csv"), &cms)?;
    for (name, cm) in &cms {
        println!("{name}: accuracy {:.3} ({} trials)", cm.accuracy().unwrap_or(f64::NAN), cm.total());
    }
    snapshot(&dir, "classify", g, a)
}

fn label_str(success: bool) -> &'static str {
    if success {
        "success"
    } else {
        "failure"
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:e}"))
}

fn write_confusions(path: &Path, cms: &[(&str, ConfusionMatrix)]) -> Result<()> {
    let mut csv = Csv::create(path, "split,tp,fp,tn,fn,accuracy,precision,recall,balanced_accuracy")?;
    for (name, c) in cms {
        csv.row(&format!(
            "{name},{},{},{},{},{},{},{},{}",
            c.tp,
            c.fp,
            c.tn,
            c.fn_,
            opt(c.accuracy()),
            opt(c.precision()),
            opt(c.recall()),
            opt(c.balanced_accuracy())
        ))?;
    }
    csv.finish()
}

fn parse_axes(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("{s:?}: expected A:B"))?;
    let a: usize = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    if a >= N_XI || b >= N_XI || a == b {
        return Err(format!("axes must be distinct components below {N_XI}"));
    }
    Ok((a, b))
}

#[derive(Debug, Args, Serialize)]
pub struct Sample {
    #[arg(long)]
    pub model: PathBuf,
    /// RBF file; defaults to the model's `rbf.json`.
    #[arg(long)]
    pub rbf: Option<PathBuf>,
    /// Accepted samples to draw.
    #[arg(long, default_value_t = 100_000)]
    pub n: u64,
    /// Map axis pairs `A:B`, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_axes, default_value = "2:5,2:4")]
    pub axes: Vec<(usize, usize)>,
    /// Bins per map axis.
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Samples integrated together.
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    /// Skip the raster output.
    #[arg(long)]
    pub no_pgm: bool,
}

/// Sample counts at which map snapshots are written, as fractions of `n`.
const SNAPSHOT_FRACTIONS: [f64; 5] = [3e-4, 0.2, 0.25, 0.5, 1.0];

#[derive(Debug, Serialize)]
struct SampleSummary {
    accepted: u64,
    rejected: u64,
    successes: u64,
    failures: u64,
    invalid: u64,
    success_fraction: Option<f64>,
    wilson_95: Option<(f64, f64)>,
}

pub fn sample(g: &Global, a: &Sample) -> Result<()> {
    ensure!(a.n >= 1, "--n must be at least 1");
    let dir = out_dir(g)?;
    let md = ModelDir::new(&a.model);
    let manifest = md.manifest()?;
    let node = md.load_node()?;
    let rbf = match &a.rbf {
        Some(p) => container::load_rbf_file(p)?,
        None => md.load_rbf()?,
    };
    let clf = manifest.classifier.context("model has no calibrated classifier")?;
    let bounds = manifest.bounds.context("model has no sampling bounds")?;
    let times = manifest.node_times.context("model has no training grid")?;
    let surrogate = uq::Surrogate {
        node: &node,
        rbf: &rbf,
        classifier: &clf,
        bounds: &bounds,
    };
    let cfg = CampaignConfig {
        n_samples: a.n,
        seed: g.seed,
        times,
        batch: a.batch,
    };
    let mut maps: Vec<ProbabilityMap> = a
        .axes
        .iter()
        .map(|&(i, j)| ProbabilityMap::new(i, j, bounds[i], bounds[j], (a.bins, a.bins)))
        .collect::<Result<_, _>>()?;
    let mut marks: Vec<u64> = SNAPSHOT_FRACTIONS.iter().map(|f| ((a.n as f64 * f).round() as u64).max(1)).collect();
    marks.dedup();
    let mut snaps: Vec<(u64, Vec<ProbabilityMap>)> = Vec::new();
    let mut records = Csv::create(dir.join("records.csv"), &OutcomeRecord::csv_header(node.cfg.latent_dim))?;
    let mut seen = 0u64;
    let summary = uq::run_campaign(&surrogate, &cfg, &mut |r| {
        records
            .row(&r.csv_row())
            .map_err(|e| dnae_core::Error::Format(e.to_string()))?;
        for m in maps.iter_mut() {
            m.add(r);
        }
        seen += 1;
        if marks.contains(&seen) {
            snaps.push((seen, maps.clone()));
        }
        Ok(())
    })?;
    records.finish()?;

    for (count, ms) in snaps.iter_mut() {
        for m in ms.iter_mut() {
            m.compute_contours(&CONTOUR_LEVELS)?;
            let stem = format!("map_xi{}_xi{}", m.axis_a, m.axis_b);
            let stem = if *count == a.n { stem } else { format!("{stem}_n{count}") };
            write_file(&dir.join(format!("{stem}.csv")), |w| m.write_grid_csv(w))?;
            write_file(&dir.join(format!("{stem}_contours.csv")), |w| m.write_contours_csv(w))?;
            if *count == a.n && !a.no_pgm {
                write_file(&dir.join(format!("{stem}.pgm")), |w| m.write_pgm(w))?;
            }
        }
    }
    // convergence of each map between successive doublings
    let at = |n: u64| snaps.iter().find(|(c, _)| *c == n).map(|(_, m)| m);
    let (q, h) = (((a.n as f64) * 0.25).round() as u64, ((a.n as f64) * 0.5).round() as u64);
    if let (Some(mq), Some(mh), Some(mf)) = (at(q.max(1)), at(h.max(1)), at(a.n)) {
        let mut csv = Csv::create(dir.join("convergence.csv"), "axes,n_from,n_to,mean_abs_diff")?;
        for k in 0..mf.len() {
            let ax = format!("xi{}:xi{}", mf[k].axis_a, mf[k].axis_b);
            csv.row(&format!("{ax},{q},{h},{:e}", mq[k].mean_abs_diff(&mh[k])?))?;
            csv.row(&format!("{ax},{h},{},{:e}", a.n, mh[k].mean_abs_diff(&mf[k])?))?;
        }
        csv.finish()?;
    }
    let valid = summary.successes + summary.failures;
    let out = SampleSummary {
        accepted: summary.accepted,
        rejected: summary.rejected,
        successes: summary.successes,
        failures: summary.failures,
        invalid: summary.invalid,
        success_fraction: summary.success_fraction(),
        wilson_95: if valid > 0 { Some(wilson_interval(summary.successes, valid, WILSON_Z)?) } else { None },
    };
    if summary.invalid > 0 {
        log::warn!("{} samples diverged and were excluded from the maps", summary.invalid);
    }
    write_json(&dir.join("summary.json"), &out)?;
    snapshot(&dir, "sample", g, a)
}

#[derive(Debug, Args, Serialize)]
pub struct Report {
    /// Model directory; with --latents gives quarter errors and confusion matrices.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub latents: Option<PathBuf>,
    /// Campaign records CSV.
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Dataset directory for the input ranking and ignition fraction.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Extra Wilson rows as `K/N`, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub wilson: Vec<String>,
    #[arg(long, default_value_t = 50)]
    pub kl_bins: usize,
}

pub fn report(g: &Global, a: &Report) -> Result<()> {
    if a.latents.is_none() && a.records.is_none() && a.data.is_none() && a.wilson.is_empty() {
        bail!("nothing to report: pass --latents with --model, --records, --data or --wilson");
    }
    let dir = out_dir(g)?;
    let mut wilson_rows: Vec<(String, u64, u64)> = Vec::new();
    let mut kl_sets: Vec<(String, Vec<(ParamVector, bool)>)> = Vec::new();

    if let Some(latents) = &a.latents {
        let model = a.model.as_ref().context("--latents needs --model")?;
        let md = ModelDir::new(model);
        let manifest = md.manifest()?;
        let times = manifest.node_times.clone().context("model has no training grid")?;
        let node = md.load_node()?;
        let set = container::read_latents(latents)?;
        let (train, val) = pipeline::split_latents(&set);
        let factor = times.len() / set.manifest.entries.first().map_or(1, |e| e.times_us.len()).max(1);
        let n_folds = manifest.curriculum.as_ref().map_or(1, |c| c.n_folds);
        let part = if val.is_empty() { &train } else { &val };
        let rows = quarter_rows(&node, part, &times, factor.max(1), n_folds)?;
        let mut csv = Csv::create(
            dir.join("quarter_errors.csv"),
            "id,frechet_q1,frechet_q2,frechet_q3,frechet_q4,l2_q1,l2_q2,l2_q3,l2_q4",
        )?;
        for (id, q) in &rows {
            let f: Vec<String> = q.frechet.iter().chain(&q.l2).map(|v| format!("{v:e}")).collect();
            csv.row(&format!("{id},{}", f.join(",")))?;
        }
        csv.finish()?;
        let mut med = Csv::create(dir.join("quarter_medians.csv"), "metric,q1,q2,q3,q4")?;
        println!("median quarter errors over {} trials", rows.len());
        for (name, pick) in [("frechet", 0usize), ("l2", 1)] {
            let m: Vec<String> = (0..4)
                .map(|k| {
                    let vals: Vec<f64> = rows.iter().map(|(_, q)| if pick == 0 { q.frechet[k] } else { q.l2[k] }).collect();
                    opt(median(&vals))
                })
                .collect();
            println!("  {name:8} {}", m.join("  "));
            med.row(&format!("{name},{}", m.join(",")))?;
        }
        med.finish()?;
        if let Some(clf) = manifest.classifier {
            let mut cms = Vec::new();
            for (name, p) in [("train", &train), ("validation", &val)] {
                if p.is_empty() {
                    continue;
                }
                let preds = pipeline::predict_set(&node, p, &times)?;
                cms.push((name, pipeline::evaluate_classifier(&clf, &preds, &p.outcomes)?));
            }
            write_confusions(&dir.join("confusion.csv"), &cms)?;
            for (name, cm) in &cms {
                println!("{name} confusion: tp {} fp {} tn {} fn {}", cm.tp, cm.fp, cm.tn, cm.fn_);
            }
        }
    }
    if let Some(path) = &a.records {
        let recs = read_records(path)?;
        ensure!(!recs.is_empty(), "{}: no records", path.display());
        let k = recs.iter().filter(|r| r.1).count() as u64;
        wilson_rows.push(("records".into(), k, recs.len() as u64));
        kl_sets.push(("records".into(), recs));
    }
    if let Some(data) = &a.data {
        let m = container::read_dataset(data)?;
        let trials: Vec<(ParamVector, bool)> = m.trials.iter().map(|t| (t.xi, t.outcome.is_success())).collect();
        let k = trials.iter().filter(|t| t.1).count() as u64;
        wilson_rows.push(("dataset".into(), k, trials.len() as u64));
        kl_sets.push(("dataset".into(), trials));
    }
    for w in &a.wilson {
        let (k, n) = w.split_once('/').with_context(|| format!("--wilson {w:?}: expected K/N"))?;
        let (k, n): (u64, u64) = (k.trim().parse()?, n.trim().parse()?);
        wilson_rows.push((format!("{k}/{n}"), k, n));
    }

    if !wilson_rows.is_empty() {
        let mut csv = Csv::create(dir.join("wilson.csv"), "source,successes,n,p_hat,lower,upper")?;
        for (src, k, n) in &wilson_rows {
            let (lo, hi) = wilson_interval(*k, *n, WILSON_Z)?;
            let p = *k as f64 / *n as f64;
            println!("{src}: {k}/{n} = {p:.3}, 95% interval [{lo:.3}, {hi:.3}]");
            csv.row(&format!("{src},{k},{n},{p:e},{lo:e},{hi:e}"))?;
        }
        csv.finish()?;
    }
    if !kl_sets.is_empty() {
        let mut csv = Csv::create(dir.join("kl_ranking.csv"), "source,rank,component,kl_nats")?;
        for (src, trials) in &kl_sets {
            let classes: BTreeSet<bool> = trials.iter().map(|t| t.1).collect();
            if classes.len() < 2 {
                log::warn!("{src}: a single outcome class, no ranking");
                continue;
            }
            let ranking = kl_ranking(trials, a.kl_bins)?;
            let top: Vec<String> = ranking.iter().take(5).map(|(i, _)| format!("xi{i}")).collect();
            println!("{src} ranking: {}", top.join(" > "));
            for (rank, (i, kl)) in ranking.iter().enumerate() {
                csv.row(&format!("{src},{},xi{i},{kl:e}", rank + 1))?;
            }
        }
        csv.finish()?;
    }
    snapshot(&dir, "report", g, a)
}

fn quarter_rows(node: &LatentOde, part: &TrialSet, times: &[f64], factor: usize, n_folds: usize) -> Result<Vec<(usize, QuarterErrors)>> {
    let truth: Vec<Trajectory> = part.upsampled(factor, n_folds)?;
    let preds = pipeline::predict_set(node, part, times)?;
    let mut out = Vec::new();
    for ((id, p), t) in part.ids.iter().zip(&preds).zip(&truth) {
        if let Some(p) = p {
            out.push((*id, dnae_core::metrics::quarter_errors(p, t)?));
        }
    }
    Ok(out)
}

/// `(ξ, success)` for every valid record of a campaign CSV.
fn read_records(path: &Path) -> Result<Vec<(ParamVector, bool)>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).with_context(|| format!("{}: missing column {name}", path.display()));
    let xi_cols: Vec<usize> = (0..N_XI).map(|i| col(&format!("xi{i}"))).collect::<Result<_>>()?;
    let label_col = col("label")?;
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: row {}", path.display(), line + 2))?;
        let label = &rec[label_col];
        let success = match label {
            s if s == Label::Success.as_str() => true,
            s if s == Label::Failure.as_str() => false,
            s if s == Label::Invalid.as_str() => continue,
            other => bail!("{}: row {}: unknown label {other:?}", path.display(), line + 2),
        };
        let vals: Vec<f64> = xi_cols
            .iter()
            .map(|&c| rec[c].parse::<f64>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("{}: row {}", path.display(), line + 2))?;
        out.push((ParamVector::from_slice(&vals)?, success));
    }
    Ok(out)
}
