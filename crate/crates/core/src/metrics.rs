//! Trajectory comparison and binary-outcome statistics.

use serde::{Deserialize, Serialize};

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::uncertainty::{ParamVector, N_XI};

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Discrete Fréchet distance between two polylines with Euclidean point
/// distance.
pub fn discrete_frechet(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("discrete Fréchet needs non-empty polylines".into()));
    }
    let m = b.len();
    let mut prev = vec![0.0f64; m];
    let mut cur = vec![0.0f64; m];
    for (i, p) in a.iter().enumerate() {
        for j in 0..m {
            let d = euclid(p, &b[j]);
            cur[j] = match (i, j) {
                (0, 0) => d,
                (0, _) => cur[j - 1].max(d),
                (_, 0) => prev[0].max(d),
                _ => prev[j].min(prev[j - 1]).min(cur[j - 1]).max(d),
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// Errors per temporal quarter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuarterErrors {
    pub frechet: [f64; 4],
    pub l2: [f64; 4],
}

/// Quarter boundaries; the last quarter absorbs any remainder.
pub fn quarter_bounds(len: usize) -> [(usize, usize); 4] {
    let q = len / 4;
    [(0, q), (q, 2 * q), (2 * q, 3 * q), (3 * q, len)]
}

/// Fréchet distance and mean pointwise Euclidean error on each quarter.
pub fn quarter_errors(pred: &Trajectory, truth: &Trajectory) -> Result<QuarterErrors> {
    if pred.times != truth.times || pred.dim() != truth.dim() {
        return Err(Error::dim("quarter_errors", "prediction and truth must share grid and dimension"));
    }
    if truth.len() < 4 {
        return Err(Error::Input(format!("need at least 4 points, got {}", truth.len())));
    }
    let mut out = QuarterErrors {
        frechet: [0.0; 4],
        l2: [0.0; 4],
    };
    for (k, (a, b)) in quarter_bounds(truth.len()).into_iter().enumerate() {
        let (p, q) = (&pred.states[a..b], &truth.states[a..b]);
        out.frechet[k] = discrete_frechet(p, q)?;
        out.l2[k] = p.iter().zip(q).map(|(x, y)| euclid(x, y)).sum::<f64>() / (b - a) as f64;
    }
    Ok(out)
}

/// Histogram KL divergence `KL(p ‖ q)` in nats over `bins` shared bins
/// spanning the pooled range; every bin carries an extra `1e-12` mass.
pub fn kl_divergence(samples_p: &[f64], samples_q: &[f64], bins: usize) -> Result<f64> {
    if samples_p.is_empty() || samples_q.is_empty() {
        return Err(Error::Input("KL divergence needs non-empty sample sets".into()));
    }
    if bins == 0 {
        return Err(Error::Config("bins must be positive".into()));
    }
    let (lo, hi) = samples_p
        .iter()
        .chain(samples_q)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::NonFinite("KL samples".into()));
    }
    let hist = |s: &[f64]| {
        let mut c = vec![0.0; bins];
        for &v in s {
            let k = if hi > lo { (((v - lo) / (hi - lo)) * bins as f64) as usize } else { 0 };
            c[k.min(bins - 1)] += 1.0;
        }
        let n = s.len() as f64;
        c.iter().map(|x| x / n + 1e-12).collect::<Vec<f64>>()
    };
    let (p, q) = (hist(samples_p), hist(samples_q));
    Ok(p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0))
}

/// Per-component `KL(success ‖ failure)` of the input marginals, sorted
/// from most to least divergent.
pub fn kl_ranking(trials: &[(ParamVector, bool)], bins: usize) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(N_XI);
    for i in 0..N_XI {
        let succ: Vec<f64> = trials.iter().filter(|t| t.1).map(|t| t.0.get(i)).collect();
        let fail: Vec<f64> = trials.iter().filter(|t| !t.1).map(|t| t.0.get(i)).collect();
        out.push((i, kl_divergence(&succ, &fail, bins)?));
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(out)
}

/// Wilson score interval for `successes` out of `n` at normal quantile `z`.
pub fn wilson_interval(successes: u64, n: u64, z: f64) -> Result<(f64, f64)> {
    if n == 0 || successes > n {
        return Err(Error::Input(format!("invalid counts {successes}/{n}")));
    }
    if !(z > 0.0) {
        return Err(Error::Input(format!("z must be positive, got {z}")));
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    // the exact interval always contains p; rounding at k = 0 or k = n can leave it a hair outside
    Ok(((center - half).clamp(0.0, p), (center + half).clamp(p, 1.0)))
}

/// Binary entropy in bits.
pub fn class_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Input(format!("probability {p} outside [0, 1]")));
    }
    let term = |x: f64| if x > 0.0 { -x * x.log2() } else { 0.0 };
    Ok(term(p) + term(1.0 - p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| (self.tp + self.tn) as f64 / n as f64)
    }

    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    /// Mean of the per-class recalls.
    pub fn balanced_accuracy(&self) -> Option<f64> {
        let pos = self.tp + self.fn_;
        let neg = self.tn + self.fp;
        (pos > 0 && neg > 0).then(|| 0.5 * (self.tp as f64 / pos as f64 + self.tn as f64 / neg as f64))
    }
}

pub fn confusion(predicted: &[bool], actual: &[bool]) -> Result<ConfusionMatrix> {
    if predicted.len() != actual.len() {
        return Err(Error::dim("confusion", format!("{} predictions vs {} labels", predicted.len(), actual.len())));
    }
    let mut m = ConfusionMatrix::default();
    for (&p, &a) in predicted.iter().zip(actual) {
        match (p, a) {
            (true, true) => m.tp += 1,
            (true, false) => m.fp += 1,
            (false, false) => m.tn += 1,
            (false, true) => m.fn_ += 1,
        }
    }
    Ok(m)
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pts(v: &[(f64, f64)]) -> Vec<Vec<f64>> {
        v.iter().map(|&(x, y)| vec![x, y]).collect()
    }

    #[test]
    fn frechet_hand_values() {
        let a = pts(&[(0.0, 0.0), (1.0, 0.0)]);
        let b = pts(&[(0.0, 1.0), (1.0, 1.0)]);
        assert_eq!(discrete_frechet(&a, &b).unwrap(), 1.0);
        assert_eq!(discrete_frechet(&a, &a).unwrap(), 0.0);
        assert!(discrete_frechet(&[], &a).is_err());
    }

    #[test]
    fn quarter_offset_in_one_quarter() {
        let times: Vec<f64> = (0..8).map(f64::from).collect();
        let truth = Trajectory::new(times.clone(), vec![vec![0.0; 4]; 8]).unwrap();
        let mut pred = truth.clone();
        for s in &mut pred.states[4..6] {
            s.iter_mut().for_each(|x| *x = 0.5);
        }
        let q = quarter_errors(&pred, &truth).unwrap();
        assert_eq!(q.l2, [0.0, 0.0, 1.0, 0.0]);
        assert_eq!(q.frechet, [0.0, 0.0, 1.0, 0.0]);
        assert_eq!(quarter_errors(&truth, &truth).unwrap().l2, [0.0; 4]);
    }

    #[test]
    fn quarters_absorb_remainder() {
        assert_eq!(quarter_bounds(10), [(0, 2), (2, 4), (4, 6), (6, 10)]);
    }

    #[test]
    fn kl_cases() {
        let a: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        assert!(kl_divergence(&a, &a, 50).unwrap() < 1e-9);
        let n = 100_000;
        let p: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let q: Vec<f64> = p.iter().map(|x| x + 0.5).collect();
        let pq = kl_divergence(&p, &q, 50).unwrap();
        let qp = kl_divergence(&q, &p, 50).unwrap();
        assert!(pq >= 0.3, "{pq}");
        assert!(qp >= 0.3);
        assert!(kl_divergence(&[], &a, 10).is_err());
    }

    #[test]
    fn wilson_reference_and_edges() {
        let (lo, hi) = wilson_interval(50, 100, 1.96).unwrap();
        assert!((lo - 0.404).abs() < 0.005 && (hi - 0.596).abs() < 0.005);
        let (lo, hi) = wilson_interval(0, 1, 1.96).unwrap();
        assert!(lo.abs() < 1e-12 && hi <= 1.0);
        for n in 1..=2000 {
            assert_eq!(wilson_interval(0, n, 1.96).unwrap().0, 0.0);
            assert_eq!(wilson_interval(n, n, 1.96).unwrap().1, 1.0);
        }
        assert!(wilson_interval(3, 2, 1.96).is_err());
        assert!(wilson_interval(0, 0, 1.96).is_err());
    }

    #[test]
    fn entropy_values() {
        assert_eq!(class_entropy(0.5).unwrap(), 1.0);
        assert_eq!(class_entropy(0.0).unwrap(), 0.0);
        assert_eq!(class_entropy(1.0).unwrap(), 0.0);
        assert!(class_entropy(1.5).is_err());
    }

    #[test]
    fn confusion_cases() {
        let m = confusion(&[true, false, true], &[true, false, true]).unwrap();
        assert_eq!((m.fp, m.fn_, m.accuracy()), (0, 0, Some(1.0)));
        let m = confusion(&[true; 4], &[true, false, true, false]).unwrap();
        assert_eq!((m.recall(), m.precision()), (Some(1.0), Some(0.5)));
        assert!(confusion(&[true], &[]).is_err());
        assert_eq!(ConfusionMatrix::default().precision(), None);
    }

    fn poly() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 1..7)
    }

    proptest! {
        #[test]
        fn frechet_symmetric_and_triangle(a in poly(), b in poly(), c in poly()) {
            let ab = discrete_frechet(&a, &b).unwrap();
            let ba = discrete_frechet(&b, &a).unwrap();
            let bc = discrete_frechet(&b, &c).unwrap();
            let ac = discrete_frechet(&a, &c).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ac <= ab + bc + 1e-12);
        }

        #[test]
        fn quarter_l2_translation_invariant(vals in prop::collection::vec(-3.0f64..3.0, 24), shift in -10.0f64..10.0) {
            let times: Vec<f64> = (0..8).map(f64::from).collect();
            let a = Trajectory::new(times.clone(), vals[..16].chunks(2).map(<[f64]>::to_vec).collect()).unwrap();
            let b = Trajectory::new(times.clone(), a.states.iter().zip(vals[16..].iter().cycle()).map(|(s, o)| vec![s[0] + o, s[1] - o]).collect()).unwrap();
            let mv = |t: &Trajectory| Trajectory::new(times.clone(), t.states.iter().map(|s| vec![s[0] + shift, s[1] - shift]).collect()).unwrap();
            let q0 = quarter_errors(&a, &b).unwrap();
            let q1 = quarter_errors(&mv(&a), &mv(&b)).unwrap();
            for k in 0..4 {
                prop_assert!((q0.l2[k] - q1.l2[k]).abs() < 1e-9);
            }
        }

        #[test]
        fn wilson_width_shrinks_with_n(p in 0.0f64..=1.0, n in 1u64..5000) {
            let k1 = (p * n as f64).round() as u64;
            let (a, b) = wilson_interval(k1, n, 1.96).unwrap();
            let (c, d) = wilson_interval(2 * k1, 2 * n, 1.96).unwrap();
            prop_assert!(d - c <= b - a + 1e-12);
        }

        #[test]
        fn kl_nonnegative(p in prop::collection::vec(-1.0f64..1.0, 1..200), q in prop::collection::vec(-1.0f64..1.0, 1..200), bins in 1usize..60) {
            prop_assert!(kl_divergence(&p, &q, bins).unwrap() >= -1e-9);
        }
    }
}
