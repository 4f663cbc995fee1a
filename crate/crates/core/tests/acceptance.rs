//! Acceptance suite. Prints one PASS/FAIL line per criterion and a summary.
//!
//! Runs the full synthetic pipeline twice (the second run checks
//! determinism), so expect it to take a few hours on one core. The process
//! exits non-zero only on infrastructure errors, or on any FAIL when
//! `DNAE_ACCEPTANCE_STRICT=1`.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use dnae_core::compressor::{self, AeConfig, AeTrainConfig};
use dnae_core::container::{self, LatentEntry};
use dnae_core::curriculum::{self, spike_events, CurriculumConfig, IterRecord, TrainHooks};
use dnae_core::dynamics::{NodeConfig, Trajectory};
use dnae_core::metrics::{class_entropy, discrete_frechet, kl_ranking, median, wilson_interval};
use dnae_core::params::AdamConfig;
use dnae_core::pipeline::{self, analytic_level_set, contour_deviation};
use dnae_core::synth::{self, SynthConfig, SWITCH_WEIGHTS};
use dnae_core::uq::{self, CampaignConfig, ProbabilityMap, Surrogate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 2024;
const Z95: f64 = 1.96;

// pipeline configuration
const TRIALS: usize = 300;
const SNAPSHOTS: usize = 20;
const GRID: (usize, usize) = (96, 48);
const LATENT_DIM: usize = 8;
const AE_CHANNELS: [usize; 3] = [8, 16, 16];
const AE_EPOCHS: usize = 2;
const VAL_FRACTION: f64 = 0.1;
const NODE_WIDTH: usize = 16;
const FOLDS: usize = 50;
const UPSAMPLE: usize = 10;
const EPSILON: f64 = 1e-4;
const LAMBDA: f64 = 1e-2;
const MAX_ITERS: u64 = 20_000;
const CHECKPOINT_EVERY: u64 = 1_000;
const CAMPAIGN_N: u64 = 100_000;
const MAP_BINS: usize = 20;
const MAP_AXES: (usize, usize) = (2, 5);

// pinned thresholds
const GRAD_TOL: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const ORDER_RANGE: (f64, f64) = (3.8, 4.2);
const RK4_BUDGET: Duration = Duration::from_secs(5);
const WILSON_REF: (f64, f64) = (0.404, 0.596);
const WILSON_TOL: f64 = 0.005;
const ENTROPY_TARGET: f64 = 0.85;
const ENTROPY_TOL: f64 = 1e-6;
const FRECHET_TOL: f64 = 1e-12;
const AE_MSE_MAX: f64 = 5e-3;
const TRAIN_ACC_MIN: f64 = 0.95;
const VAL_ACC_MIN: f64 = 0.80;
const PIPELINE_BUDGET: Duration = Duration::from_secs(2 * 3600);
const SPIKE_FRACTION_MIN: f64 = 0.8;
const CAMPAIGN_BUDGET: Duration = Duration::from_secs(600);
const CONTOUR_CELLS_MAX: f64 = 2.0;
const KL_TRIALS: usize = 10_000;
const KL_BINS: usize = 50;

struct Outcome {
    n: u8,
    pass: bool,
}

fn report(out: &mut Vec<Outcome>, n: u8, pass: bool, detail: String) {
    println!("{} criterion {n}: {detail}", if pass { "PASS" } else { "FAIL" });
    out.push(Outcome { n, pass });
}

fn autodiff(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    for (k, c) in common::op_cases().iter().enumerate() {
        let e = common::op_error(c, k as u64 + 1);
        if e > worst.0 {
            worst = (e, c.name);
        }
    }
    let ae = common::autoencoder_error();
    let elapsed = start.elapsed();
    let max = worst.0.max(ae);
    report(
        out,
        1,
        max < GRAD_TOL && elapsed < GRAD_BUDGET,
        format!(
            "autodiff max relative error {max:.2e} (worst op {} {:.2e}, autoencoder {ae:.2e}), {:.1} s",
            worst.1,
            worst.0,
            elapsed.as_secs_f64()
        ),
    );
}

fn rk4_order(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let orders = common::linear_rk4_orders();
    let elapsed = start.elapsed();
    let ok = orders.iter().all(|p| (ORDER_RANGE.0..=ORDER_RANGE.1).contains(p)) && elapsed < RK4_BUDGET;
    report(out, 2, ok, format!("RK4 observed orders {orders:.3?}, {:.3} s", elapsed.as_secs_f64()));
}

fn wilson(out: &mut Vec<Outcome>) {
    let (lo, hi) = wilson_interval(50, 100, Z95).unwrap();
    let reference = (lo - WILSON_REF.0).abs() <= WILSON_TOL && (hi - WILSON_REF.1).abs() <= WILSON_TOL;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0;
    for _ in 0..1000 {
        let n: u64 = rng.random_range(1..=100_000);
        let k: u64 = rng.random_range(0..=n);
        let (l, h) = wilson_interval(k, n, Z95).unwrap();
        let p = k as f64 / n as f64;
        if !(0.0 <= l && l <= p && p <= h && h <= 1.0) {
            bad += 1;
        }
    }
    report(
        out,
        3,
        reference && bad == 0,
        format!("Wilson(50, 100) = [{lo:.4}, {hi:.4}], {bad} of 1000 random intervals improper"),
    );
}

fn entropy(out: &mut Vec<Outcome>) {
    let half = class_entropy(0.5).unwrap();
    let p = common::entropy_inverse(ENTROPY_TARGET);
    let back = class_entropy(p).unwrap();
    report(
        out,
        4,
        half == 1.0 && (back - ENTROPY_TARGET).abs() <= ENTROPY_TOL,
        format!("H(0.5) = {half}, H^-1(0.85) = {p:.6}, round trip {back:.9}"),
    );
}

fn frechet(out: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let a = common::random_polyline(&mut rng, 6);
        let b = common::random_polyline(&mut rng, 6);
        worst = worst.max((discrete_frechet(&a, &b).unwrap() - common::brute_frechet(&a, &b)).abs());
    }
    report(out, 5, worst <= FRECHET_TOL, format!("Fréchet DP vs enumeration on 200 pairs, max gap {worst:.1e}"));
}

/// Everything criteria 6 to 10 look at from one pipeline run.
struct Run {
    ae_val_mse: f64,
    ae_bytes: Vec<u8>,
    node_bytes: Vec<u8>,
    checkpoints: Vec<(u64, Vec<u8>)>,
    history: Vec<IterRecord>,
    events: Vec<(u64, usize)>,
    converged: bool,
    active_folds: usize,
    train_acc: f64,
    val_acc: f64,
    q_medians: [(f64, f64); 2],
    pipeline_time: Duration,
    campaign_time: Duration,
    successes: u64,
    valid: u64,
    invalid: u64,
    analytic_fraction: f64,
    contour_cells: Option<f64>,
    mad: (f64, f64),
    records: Vec<u8>,
    maps: Vec<Vec<u8>>,
}

fn accuracy(cm: &dnae_core::metrics::ConfusionMatrix) -> f64 {
    cm.accuracy().unwrap_or(0.0)
}

fn params_bytes(p: &dnae_core::params::NetworkParams) -> Vec<u8> {
    let mut buf = Vec::new();
    container::write_params(&mut buf, p).unwrap();
    buf
}

fn map_bytes(m: &ProbabilityMap) -> Vec<u8> {
    let mut buf = Vec::new();
    m.write_grid_csv(&mut buf).unwrap();
    buf
}

fn pipeline(root: &Path) -> Run {
    let start = Instant::now();
    let data_dir = root.join("data");
    let cfg = SynthConfig {
        grid: GRID,
        n_trials: TRIALS,
        n_snapshots: SNAPSHOTS,
        seed: SEED,
        ..SynthConfig::default()
    };
    let ds = synth::generate(&cfg).unwrap();
    let theta0 = ds.cfg.theta0;
    container::write_dataset(&data_dir, &ds).unwrap();
    drop(ds);
    let manifest = container::read_dataset(&data_dir).unwrap();
    eprintln!("[acceptance] dataset written, {:.0} s", start.elapsed().as_secs_f64());

    let (frames, groups) = pipeline::load_frames(&data_dir, &manifest).unwrap();
    let ae_cfg = AeConfig {
        latent_dim: LATENT_DIM,
        block_channels: AE_CHANNELS.to_vec(),
        input_dims: GRID,
        seed: SEED,
        ..AeConfig::default()
    };
    let opt = AdamConfig {
        schedule: Vec::new(),
        ..AdamConfig::default()
    };
    let tcfg = AeTrainConfig {
        epochs: AE_EPOCHS,
        batch_size: 16,
        split: VAL_FRACTION,
        seed: SEED + 1,
    };
    let ae_res = compressor::train_ae(&frames, &groups, &ae_cfg, &opt, &tcfg).unwrap();
    let ae = ae_res.model;
    let val_ids: BTreeSet<usize> = ae_res.val_groups.iter().copied().collect();
    let (mut se, mut count) = (0.0, 0usize);
    for (f, g) in frames.iter().zip(&groups) {
        if val_ids.contains(g) {
            se += ae.reconstruct(f).unwrap().mse(f);
            count += 1;
        }
    }
    let ae_val_mse = se / count as f64;
    drop(frames);
    eprintln!("[acceptance] autoencoder trained, held-out MSE {ae_val_mse:.3e}, {:.0} s", start.elapsed().as_secs_f64());

    let latent_dir = root.join("latents");
    let entries: Vec<(LatentEntry, Trajectory)> = pipeline::encode_dataset(&ae, &data_dir, &manifest, &val_ids).unwrap();
    container::write_latents(&latent_dir, LATENT_DIM, entries).unwrap();
    let set = container::read_latents(&latent_dir).unwrap();
    let (train, val) = pipeline::split_latents(&set);

    let data = train.upsampled(UPSAMPLE, FOLDS).unwrap();
    let times = data[0].times.clone();
    let node_cfg = NodeConfig {
        latent_dim: LATENT_DIM,
        width: NODE_WIDTH,
        t0: times[0],
        horizon: times[times.len() - 1] - times[0],
        substeps: 1,
        seed: SEED + 2,
    };
    let curr = CurriculumConfig {
        n_folds: FOLDS,
        epsilon: EPSILON,
        lambda: LAMBDA,
        checkpoint_every: CHECKPOINT_EVERY,
        ..CurriculumConfig::default()
    };
    let mut checkpoints = Vec::new();
    let mut keep = |it: u64, node: &dnae_core::dynamics::LatentOde| {
        checkpoints.push((it, params_bytes(&node.params)));
        eprintln!("[acceptance] node iteration {it}, {:.0} s", start.elapsed().as_secs_f64());
        Ok(())
    };
    let hooks = TrainHooks {
        log: None,
        checkpoint: Some(&mut keep),
    };
    let res = curriculum::train_node(&data, &train.xis, &node_cfg, &AdamConfig::scaled_to(MAX_ITERS), &curr, UPSAMPLE, hooks).unwrap();
    eprintln!(
        "[acceptance] node trained to {}/{FOLDS} folds in {} iterations, {:.0} s",
        res.state.active_folds,
        res.history.len(),
        start.elapsed().as_secs_f64()
    );
    let node = res.model;

    let train_preds = pipeline::predict_set(&node, &train, &times).unwrap();
    let clf = pipeline::calibrate_on_predictions(&train_preds, &train.outcomes).unwrap();
    let train_acc = accuracy(&pipeline::evaluate_classifier(&clf, &train_preds, &train.outcomes).unwrap());
    let val_preds = pipeline::predict_set(&node, &val, &times).unwrap();
    let val_acc = accuracy(&pipeline::evaluate_classifier(&clf, &val_preds, &val.outcomes).unwrap());
    let val_truth = val.upsampled(UPSAMPLE, FOLDS).unwrap();
    let table = pipeline::quarter_table(&val_preds, &val_truth).unwrap();
    let med = |f: &dyn Fn(&dnae_core::metrics::QuarterErrors) -> f64| median(&table.iter().map(f).collect::<Vec<_>>()).unwrap_or(f64::NAN);
    let q_medians = [
        (med(&|q| q.frechet[0]), med(&|q| q.frechet[3])),
        (med(&|q| q.l2[0]), med(&|q| q.l2[3])),
    ];
    let pipeline_time = start.elapsed();

    // Monte-Carlo campaign on the trained surrogate
    let rbf = pipeline::fit_initial_state_rbf(&train).unwrap();
    let bounds = uq::ensemble_bounds(&train.xis).unwrap();
    let surrogate = Surrogate {
        node: &node,
        rbf: &rbf,
        classifier: &clf,
        bounds: &bounds,
    };
    let ccfg = CampaignConfig {
        n_samples: CAMPAIGN_N,
        seed: SEED,
        times: times.clone(),
        batch: 256,
    };
    let (a, b) = MAP_AXES;
    let mut map = ProbabilityMap::new(a, b, bounds[a], bounds[b], (MAP_BINS, MAP_BINS)).unwrap();
    let mut snaps = Vec::new();
    let marks = [CAMPAIGN_N / 4, CAMPAIGN_N / 2, CAMPAIGN_N];
    let mut records = Vec::new();
    let mut seen = 0u64;
    let c_start = Instant::now();
    let summary = uq::run_campaign(&surrogate, &ccfg, &mut |r| {
        records.extend_from_slice(r.csv_row().as_bytes());
        records.push(b'\n');
        map.add(r);
        seen += 1;
        if marks.contains(&seen) {
            snaps.push(map.clone());
        }
        Ok(())
    })
    .unwrap();
    let campaign_time = c_start.elapsed();
    eprintln!("[acceptance] campaign finished, {:.0} s", campaign_time.as_secs_f64());
    map.compute_contours(&[0.5]).unwrap();
    let reference = analytic_level_set(&map, &bounds, theta0, 0.5, 8);
    let contour_cells = contour_deviation(&map.contours[0].1, &reference, map.cell_widths());
    let mad = (
        snaps[0].mean_abs_diff(&snaps[1]).unwrap(),
        snaps[1].mean_abs_diff(&snaps[2]).unwrap(),
    );

    Run {
        ae_val_mse,
        ae_bytes: params_bytes(&ae.params),
        node_bytes: params_bytes(&node.params),
        checkpoints,
        history: res.history,
        events: res.state.event_log,
        converged: res.converged,
        active_folds: res.state.active_folds,
        train_acc,
        val_acc,
        q_medians,
        pipeline_time,
        campaign_time,
        successes: summary.successes,
        valid: summary.successes + summary.failures,
        invalid: summary.invalid,
        analytic_fraction: synth::analytic_success_fraction(&bounds, theta0),
        contour_cells,
        mad,
        records,
        maps: snaps.iter().map(map_bytes).collect(),
    }
}

fn end_to_end(out: &mut Vec<Outcome>, r: &Run) {
    let monotone = r.events.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1);
    let full = r.active_folds == FOLDS && r.converged;
    let [(f1, f4), (l1, l4)] = r.q_medians;
    let a = monotone && full;
    let b = r.train_acc >= TRAIN_ACC_MIN && r.val_acc >= VAL_ACC_MIN;
    let c = f4 > f1 && l4 > l1;
    let ae = r.ae_val_mse < AE_MSE_MAX;
    let timely = r.pipeline_time <= PIPELINE_BUDGET;
    report(
        out,
        6,
        a && b && c && ae && timely,
        format!(
            "autoencoder held-out MSE {:.2e} [{}]; (a) {} events, {}/{FOLDS} folds, converged {} [{}]; \
             (b) train accuracy {:.3}, validation {:.3} [{}]; (c) median Q1/Q4 Fréchet {f1:.3e}/{f4:.3e}, \
             L2 {l1:.3e}/{l4:.3e} [{}]; {:.0} s [{}]",
            r.ae_val_mse,
            ok(ae),
            r.events.len(),
            r.active_folds,
            r.converged,
            ok(a),
            r.train_acc,
            r.val_acc,
            ok(b),
            ok(c),
            r.pipeline_time.as_secs_f64(),
            ok(timely),
        ),
    );
}

fn ok(b: bool) -> &'static str {
    if b { "ok" } else { "miss" }
}

fn spikes(out: &mut Vec<Outcome>, r: &Run) {
    let flags = spike_events(&r.history, &r.events);
    let hits = flags.iter().filter(|&&f| f).count();
    let frac = if flags.is_empty() { 0.0 } else { hits as f64 / flags.len() as f64 };
    report(
        out,
        7,
        !flags.is_empty() && frac >= SPIKE_FRACTION_MIN,
        format!("{hits} of {} advance events show the rise-then-recover signature ({:.0}%)", flags.len(), 100.0 * frac),
    );
}

fn campaign(out: &mut Vec<Outcome>, r: &Run) {
    let (lo, hi) = wilson_interval(r.successes, r.valid.max(1), Z95).unwrap();
    let frac = r.successes as f64 / r.valid.max(1) as f64;
    let p = r.analytic_fraction;
    let in_ci = (lo..=hi).contains(&p);
    let contour = r.contour_cells.is_some_and(|d| d <= CONTOUR_CELLS_MAX);
    let converging = r.mad.0 > r.mad.1;
    let fast = r.campaign_time < CAMPAIGN_BUDGET;
    report(
        out,
        8,
        in_ci && contour && converging && fast,
        format!(
            "campaign {:.0} s [{}]; fraction {frac:.4} Wilson [{lo:.4}, {hi:.4}] vs analytic {p:.4} [{}], {} diverged; \
             0.5 contour max offset {} cells [{}]; map MAD 25k-50k {:.4} vs 50k-100k {:.4} [{}]",
            r.campaign_time.as_secs_f64(),
            ok(fast),
            ok(in_ci),
            r.invalid,
            r.contour_cells.map_or("n/a".to_string(), |d| format!("{d:.2}")),
            ok(contour),
            r.mad.0,
            r.mad.1,
            ok(converging),
        ),
    );
}

fn kl(out: &mut Vec<Outcome>) {
    let trials = synth::sample_outcomes(KL_TRIALS, SEED, synth::DEFAULT_THETA0);
    let ranking = kl_ranking(&trials, KL_BINS).unwrap();
    let switch: Vec<usize> = SWITCH_WEIGHTS.iter().map(|w| w.0).collect();
    let kl_of = |i: usize| ranking.iter().find(|r| r.0 == i).unwrap().1;
    let weakest_key = [5, 2, 4].iter().map(|&i| kl_of(i)).fold(f64::INFINITY, f64::min);
    let strongest_nuisance = ranking.iter().filter(|r| !switch.contains(&r.0)).map(|r| r.1).fold(0.0, f64::max);
    let top: Vec<String> = ranking.iter().take(5).map(|(i, v)| format!("xi{i}={v:.3}")).collect();
    report(
        out,
        9,
        weakest_key > strongest_nuisance,
        format!(
            "KL ranking {} ...; weakest of xi5/xi2/xi4 {weakest_key:.3} vs strongest nuisance {strongest_nuisance:.4}",
            top.join(", ")
        ),
    );
}

fn determinism(out: &mut Vec<Outcome>, a: &Run, b: &Run) {
    let checks = [
        ("autoencoder", a.ae_bytes == b.ae_bytes),
        ("node", a.node_bytes == b.node_bytes),
        ("checkpoints", a.checkpoints == b.checkpoints && !a.checkpoints.is_empty()),
        ("event log", a.events == b.events),
        ("records", a.records == b.records),
        ("maps", a.maps == b.maps),
    ];
    let differing: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    report(
        out,
        10,
        differing.is_empty(),
        if differing.is_empty() {
            format!(
                "rerun byte-identical: {} checkpoints, {} record bytes, {} maps",
                a.checkpoints.len(),
                a.records.len(),
                a.maps.len()
            )
        } else {
            format!("rerun differs in {}", differing.join(", "))
        },
    );
}

fn main() {
    // `cargo test` passes harness flags; a name filter that excludes us skips the run
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    if args.iter().any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str())) {
        return;
    }
    let mut out = Vec::new();
    autodiff(&mut out);
    rk4_order(&mut out);
    wilson(&mut out);
    entropy(&mut out);
    frechet(&mut out);

    let first_dir = tempfile::tempdir().unwrap();
    let first = pipeline(first_dir.path());
    drop(first_dir);
    end_to_end(&mut out, &first);
    spikes(&mut out, &first);
    campaign(&mut out, &first);
    kl(&mut out);
    let second_dir = tempfile::tempdir().unwrap();
    let second = pipeline(second_dir.path());
    determinism(&mut out, &first, &second);

    out.sort_by_key(|o| o.n);
    let passed = out.iter().filter(|o| o.pass).count();
    let failed: Vec<String> = out.iter().filter(|o| !o.pass).map(|o| o.n.to_string()).collect();
    println!(
        "acceptance: {passed}/{} criteria passed{}",
        out.len(),
        if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
    );
    if !failed.is_empty() && std::env::var("DNAE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
