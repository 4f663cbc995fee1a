//! The 15-component uncertainty input vector ξ and its sampling distributions.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_XI: usize = 15;

/// Normals are truncated at this many standard deviations.
pub const NORMAL_TRUNCATION: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, variance: f64 },
}

impl Distribution {
    pub fn support(&self) -> (f64, f64) {
        match *self {
            Distribution::Uniform { lo, hi } => (lo, hi),
            Distribution::Normal { mean, variance } => {
                let s = variance.sqrt() * NORMAL_TRUNCATION;
                (mean - s, mean + s)
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Distribution::Uniform { lo, hi } => rng.random_range(lo..=hi),
            Distribution::Normal { mean, variance } => {
                let sd = variance.sqrt();
                loop {
                    let z: f64 = rng.sample(StandardNormal);
                    if z.abs() <= NORMAL_TRUNCATION {
                        return mean + sd * z;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Component {
    pub name: &'static str,
    pub description: &'static str,
    pub unit: &'static str,
    pub dist: Distribution,
}

const fn uniform(name: &'static str, description: &'static str, unit: &'static str, lo: f64, hi: f64) -> Component {
    Component {
        name,
        description,
        unit,
        dist: Distribution::Uniform { lo, hi },
    }
}

pub const COMPONENTS: [Component; N_XI] = [
    Component {
        name: "xi0",
        description: "streamwise focal imprecision",
        unit: "mm",
        dist: Distribution::Normal { mean: 0.29, variance: 0.04 },
    },
    Component {
        name: "xi1",
        description: "radial focal location",
        unit: "mm",
        dist: Distribution::Normal { mean: -0.54, variance: 0.20 },
    },
    uniform("xi2", "lobe radii ratio", "", 1.1, 2.1),
    uniform("xi3", "aspect ratio", "", 2.0, 2.5),
    uniform("xi4", "laser axial length", "mm", 1.44, 2.16),
    uniform("xi5", "energy deposited", "mJ", 20.0, 54.0),
    uniform("xi6", "lag time", "us", 0.0, 284.0),
    uniform("xi7", "methane system mass", "mg", 5.0, 7.0),
    uniform("xi8", "thickened flame beta", "", 0.5, 0.60),
    uniform("xi9", "laminar flame speed", "", 0.0098, 0.011),
    uniform("xi10", "reaction rate", "", 3.4e9, 3.8e9),
    uniform("xi11", "Smagorinsky constant", "", 0.15, 0.17),
    uniform("xi12", "oxygen mass flow rate", "g/s", 6.12, 6.83),
    uniform("xi13", "fuel mass flow rate", "g/s", 1.97, 2.17),
    uniform("xi14", "squircularity", "", 0.65, 0.97),
];

/// One realization of the uncertainty inputs, validated against the
/// component supports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector([f64; N_XI]);

impl ParamVector {
    pub fn new(values: [f64; N_XI]) -> Result<Self> {
        for (i, (&v, c)) in values.iter().zip(COMPONENTS.iter()).enumerate() {
            let (lo, hi) = c.dist.support();
            // allow for round-off at the edges of a sampled support
            let slack = 1e-9 * (hi - lo);
            if !v.is_finite() || v < lo - slack || v > hi + slack {
                return Err(Error::OutOfSupport {
                    name: format!("{} ({}, index {i})", c.name, c.description),
                    value: v,
                    lo,
                    hi,
                });
            }
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; N_XI] = values
            .try_into()
            .map_err(|_| Error::dim("param_vector", format!("expected {N_XI} values, got {}", values.len())))?;
        Self::new(arr)
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut v = [0.0; N_XI];
        for (slot, c) in v.iter_mut().zip(COMPONENTS.iter()) {
            *slot = c.dist.sample(rng);
        }
        Self(v)
    }

    /// Support midpoint for every component.
    pub fn midpoint() -> Self {
        let mut v = [0.0; N_XI];
        for (slot, c) in v.iter_mut().zip(COMPONENTS.iter()) {
            let (lo, hi) = c.dist.support();
            *slot = 0.5 * (lo + hi);
        }
        Self(v)
    }

    pub fn values(&self) -> &[f64; N_XI] {
        &self.0
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    /// Copy with component `i` replaced, revalidated.
    pub fn with(&self, i: usize, value: f64) -> Result<Self> {
        let mut v = self.0;
        v[i] = value;
        Self::new(v)
    }

    /// Per-component `(x − midpoint) / half_range`, mapping each support to `[-1, 1]`.
    pub fn standardized(&self) -> [f64; N_XI] {
        let mut out = [0.0; N_XI];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = standardize(i, self.0[i]);
        }
        out
    }
}

pub fn standardize(i: usize, value: f64) -> f64 {
    let (lo, hi) = COMPONENTS[i].dist.support();
    (value - 0.5 * (lo + hi)) / (0.5 * (hi - lo))
}

pub fn destandardize(i: usize, s: f64) -> f64 {
    let (lo, hi) = COMPONENTS[i].dist.support();
    0.5 * (lo + hi) + s * 0.5 * (hi - lo)
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::from_slice(&v)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(p: ParamVector) -> Self {
        p.0.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normal_supports_use_variance() {
        let (lo, hi) = COMPONENTS[0].dist.support();
        assert!((lo - (0.29 - 0.6)).abs() < 1e-12 && (hi - (0.29 + 0.6)).abs() < 1e-12);
        let (lo, hi) = COMPONENTS[1].dist.support();
        let s = 3.0 * 0.2f64.sqrt();
        assert!((lo + 0.54 + s).abs() < 1e-12 && (hi + 0.54 - s).abs() < 1e-12);
    }

    #[test]
    fn out_of_support_names_component() {
        let mut v = *ParamVector::midpoint().values();
        v[5] = 100.0;
        let err = ParamVector::new(v).unwrap_err().to_string();
        assert!(err.contains("xi5"), "{err}");
        assert!(err.contains("[20, 54]"), "{err}");
    }

    #[test]
    fn standardization_maps_support_to_unit_box() {
        for i in 0..N_XI {
            let (lo, hi) = COMPONENTS[i].dist.support();
            assert!((standardize(i, lo) + 1.0).abs() < 1e-12);
            assert!((standardize(i, hi) - 1.0).abs() < 1e-12);
            assert!((destandardize(i, standardize(i, 0.3 * lo + 0.7 * hi)) - (0.3 * lo + 0.7 * hi)).abs() < 1e-9 * hi.abs().max(1.0));
        }
    }

    #[test]
    fn samples_stay_in_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let p = ParamVector::sample(&mut rng);
            assert!(ParamVector::new(*p.values()).is_ok());
        }
    }

    #[test]
    fn serde_round_trip_validates() {
        let p = ParamVector::midpoint();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<ParamVector>(&s).unwrap(), p);
        assert!(serde_json::from_str::<ParamVector>("[1.0, 2.0]").is_err());
    }
}
