//! On-disk containers: datasets (JSON manifest plus one frame tensor per
//! trial), encoded latent sets, model checkpoints and parameter bundles.
//!
//! Every JSON document carries a `format` tag and a `version`; readers
//! reject anything else with a schema error naming the file.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::classifier::BranchClassifier;
use crate::compressor::{normalize, AeConfig, Autoencoder, Field, NormMeta};
use crate::curriculum::CurriculumState;
use crate::dynamics::{LatentOde, NodeConfig, Trajectory};
use crate::error::{Error, Result};
use crate::params::NetworkParams;
use crate::synth::SynthDataset;
use crate::tensor::Tensor;
use crate::uncertainty::ParamVector;
use crate::uq::{Bounds, RbfModel};

pub const VERSION: u32 = 1;
pub const DATASET_MANIFEST: &str = "manifest.json";
pub const LATENT_MANIFEST: &str = "latents.json";
pub const MODEL_MANIFEST: &str = "model.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
}

impl Outcome {
    pub fn from_bool(success: bool) -> Self {
        if success {
            Outcome::Success
        } else {
            Outcome::Failure
        }
    }

    pub fn is_success(self) -> bool {
        self == Outcome::Success
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialEntry {
    pub id: usize,
    pub xi: ParamVector,
    pub outcome: Outcome,
    pub times_us: Vec<f64>,
    /// Trial-wide raw value range used for normalization.
    pub norm: NormMeta,
    /// Relative path of the `[T, H, W]` raw frame tensor.
    pub frames: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    /// `[rows, cols]`.
    pub grid: [usize; 2],
    pub pixel_mm: f64,
    /// Raw radiance of the ignition isotherm.
    pub isotherm_level: f64,
    /// Switch threshold the outcomes were generated with, if synthetic.
    pub theta0: Option<f64>,
    pub seed: Option<u64>,
    pub trials: Vec<TrialEntry>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema {
        file: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn check_header(file: &Path, format: &str, version: u32, want: &str) -> Result<()> {
    if format != want {
        return Err(Error::Schema {
            file: file.to_path_buf(),
            detail: format!("field `format` is {format:?}, expected {want:?}"),
        });
    }
    if version != VERSION {
        return Err(Error::Schema {
            file: file.to_path_buf(),
            detail: format!("field `version` is {version}, this build reads {VERSION}"),
        });
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes a generated ensemble as a dataset container.
pub fn write_dataset(dir: &Path, ds: &SynthDataset) -> Result<DatasetManifest> {
    create_dir(&dir.join("frames"))?;
    let (h, w) = ds.cfg.grid;
    let mut trials = Vec::with_capacity(ds.trials.len());
    for t in &ds.trials {
        let rel = format!("frames/trial_{:04}.dnt", t.id);
        let data: Vec<f64> = t.frames.iter().flatten().copied().collect();
        Tensor::new(&[t.frames.len(), h, w], data)?.save(&dir.join(&rel))?;
        let (min, max) = t.value_range();
        trials.push(TrialEntry {
            id: t.id,
            xi: t.xi,
            outcome: Outcome::from_bool(t.success),
            times_us: t.times.clone(),
            norm: NormMeta { min, max },
            frames: rel,
        });
    }
    let manifest = DatasetManifest {
        format: "dnae-dataset".into(),
        version: VERSION,
        grid: [h, w],
        pixel_mm: ds.cfg.pixel_mm,
        isotherm_level: ds.cfg.isotherm_level(),
        theta0: Some(ds.cfg.theta0),
        seed: Some(ds.cfg.seed),
        trials,
    };
    write_json(&dir.join(DATASET_MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Reads and validates a dataset manifest (frames are checked lazily by
/// [`load_trial_frames`]).
pub fn read_dataset(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(DATASET_MANIFEST);
    let m: DatasetManifest = read_json(&path)?;
    check_header(&path, &m.format, m.version, "dnae-dataset")?;
    let schema = |detail: String| Error::Schema {
        file: path.clone(),
        detail,
    };
    if m.grid[0] == 0 || m.grid[1] == 0 {
        return Err(schema("field `grid` must be positive".into()));
    }
    if m.trials.is_empty() {
        return Err(schema("field `trials` is empty".into()));
    }
    for (k, t) in m.trials.iter().enumerate() {
        if t.times_us.len() < 2 || t.times_us.windows(2).any(|w| w[1] <= w[0]) {
            return Err(schema(format!("trials[{k}].times_us must be strictly increasing with at least 2 entries")));
        }
        if !(t.norm.max > t.norm.min) {
            return Err(schema(format!("trials[{k}].norm needs max > min")));
        }
        if t.times_us.len() != m.trials[0].times_us.len() {
            return Err(schema(format!("trials[{k}].times_us length differs from trials[0]")));
        }
    }
    Ok(m)
}

/// Raw frames of one trial, checked against the manifest.
pub fn load_trial_frames(dir: &Path, m: &DatasetManifest, trial: &TrialEntry) -> Result<Vec<Vec<f64>>> {
    let path = dir.join(&trial.frames);
    let t = Tensor::load(&path)?;
    let want = [trial.times_us.len(), m.grid[0], m.grid[1]];
    if t.shape() != want {
        return Err(Error::Schema {
            file: path,
            detail: format!("frame tensor shape {:?}, manifest implies {want:?}", t.shape()),
        });
    }
    let px = m.grid[0] * m.grid[1];
    Ok(t.data().chunks(px).map(<[f64]>::to_vec).collect())
}

/// Normalized frames of one trial using its stored range.
pub fn load_trial_fields(dir: &Path, m: &DatasetManifest, trial: &TrialEntry) -> Result<Vec<Field>> {
    load_trial_frames(dir, m, trial)?
        .iter()
        .map(|f| normalize(f, m.grid[0], m.grid[1], trial.norm.min, trial.norm.max))
        .collect()
}

/// Normalized isotherm level for one trial.
pub fn normalized_level(m: &DatasetManifest, trial: &TrialEntry) -> f64 {
    (m.isotherm_level - trial.norm.min) / (trial.norm.max - trial.norm.min)
}

/// An encoded trial: latent trajectory plus its inputs and outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentEntry {
    pub id: usize,
    pub xi: ParamVector,
    pub outcome: Outcome,
    pub times_us: Vec<f64>,
    pub norm: NormMeta,
    /// Relative path of the `[T, latent_dim]` state tensor.
    pub states: String,
    /// Whether the trial belongs to the held-out split.
    pub validation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentManifest {
    pub format: String,
    pub version: u32,
    pub latent_dim: usize,
    pub entries: Vec<LatentEntry>,
}

pub struct LatentSet {
    pub manifest: LatentManifest,
    pub trajectories: Vec<Trajectory>,
}

pub fn write_latents(dir: &Path, latent_dim: usize, entries: Vec<(LatentEntry, Trajectory)>) -> Result<()> {
    create_dir(&dir.join("states"))?;
    let mut list = Vec::with_capacity(entries.len());
    for (mut e, tr) in entries {
        e.states = format!("states/trial_{:04}.dnt", e.id);
        tr.states_tensor().save(&dir.join(&e.states))?;
        list.push(e);
    }
    write_json(
        &dir.join(LATENT_MANIFEST),
        &LatentManifest {
            format: "dnae-latents".into(),
            version: VERSION,
            latent_dim,
            entries: list,
        },
    )
}

pub fn read_latents(dir: &Path) -> Result<LatentSet> {
    let path = dir.join(LATENT_MANIFEST);
    let m: LatentManifest = read_json(&path)?;
    check_header(&path, &m.format, m.version, "dnae-latents")?;
    let mut trajectories = Vec::with_capacity(m.entries.len());
    for e in &m.entries {
        let file = dir.join(&e.states);
        let t = Tensor::load(&file)?;
        if t.shape() != [e.times_us.len(), m.latent_dim] {
            return Err(Error::Schema {
                file,
                detail: format!("state tensor shape {:?} vs [{}, {}]", t.shape(), e.times_us.len(), m.latent_dim),
            });
        }
        let states = t.data().chunks(m.latent_dim).map(<[f64]>::to_vec).collect();
        trajectories.push(Trajectory::new(e.times_us.clone(), states)?);
    }
    Ok(LatentSet { manifest: m, trajectories })
}

const BUNDLE_MAGIC: &[u8; 4] = b"DNP1";

/// Parameter bundle: magic, count, then `(name length, name, tensor)` records.
pub fn write_params<W: Write>(w: &mut W, p: &NetworkParams) -> std::io::Result<()> {
    w.write_all(BUNDLE_MAGIC)?;
    w.write_all(&(p.len() as u32).to_le_bytes())?;
    for (name, t) in p.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        t.write_to(w)?;
    }
    Ok(())
}

pub fn read_params<R: Read>(r: &mut R) -> Result<NetworkParams> {
    let io = |e: std::io::Error| Error::Format(format!("truncated parameter bundle: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != BUNDLE_MAGIC {
        return Err(Error::Format("not a parameter bundle".into()));
    }
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io)?;
    let n = u32::from_le_bytes(b);
    let mut p = NetworkParams::new();
    for _ in 0..n {
        r.read_exact(&mut b).map_err(io)?;
        let mut name = vec![0u8; u32::from_le_bytes(b) as usize];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        p.insert(name, Tensor::read_from(r)?);
    }
    Ok(p)
}

pub fn save_params(path: &Path, p: &NetworkParams) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_params(&mut w, p).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<NetworkParams> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_params(&mut BufReader::new(f))
}

/// Everything a deployed model directory may hold. Networks live in
/// `ae.params` / `node.params` next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub ae: Option<AeConfig>,
    pub node: Option<NodeConfig>,
    pub curriculum: Option<CurriculumState>,
    /// Grid (µs) the ODE was trained on and the classifier calibrated on.
    pub node_times: Option<Vec<f64>>,
    pub classifier: Option<BranchClassifier>,
    pub bounds: Option<Bounds>,
    /// Trial ids held out during autoencoder training.
    pub validation_trials: Option<Vec<usize>>,
    /// Median training range, used to bring decoded predictions back to
    /// raw units.
    pub field_norm: Option<NormMeta>,
    pub isotherm_level: Option<f64>,
    pub pixel_mm: Option<f64>,
}

impl Default for ModelManifest {
    fn default() -> Self {
        Self {
            format: "dnae-model".into(),
            version: VERSION,
            ae: None,
            node: None,
            curriculum: None,
            node_times: None,
            classifier: None,
            bounds: None,
            validation_trials: None,
            field_norm: None,
            isotherm_level: None,
            pixel_mm: None,
        }
    }
}

/// A model directory, read or written piecewise.
pub struct ModelDir {
    pub dir: PathBuf,
}

impl ModelDir {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn manifest(&self) -> Result<ModelManifest> {
        let path = self.dir.join(MODEL_MANIFEST);
        if !path.exists() {
            return Ok(ModelManifest::default());
        }
        let m: ModelManifest = read_json(&path)?;
        check_header(&path, &m.format, m.version, "dnae-model")?;
        Ok(m)
    }

    pub fn write_manifest(&self, m: &ModelManifest) -> Result<()> {
        create_dir(&self.dir)?;
        write_json(&self.dir.join(MODEL_MANIFEST), m)
    }

    pub fn save_ae(&self, ae: &Autoencoder) -> Result<()> {
        let mut m = self.manifest()?;
        m.ae = Some(ae.cfg.clone());
        self.write_manifest(&m)?;
        save_params(&self.dir.join("ae.params"), &ae.params)
    }

    pub fn load_ae(&self) -> Result<Autoencoder> {
        let m = self.manifest()?;
        let cfg = m.ae.ok_or_else(|| Error::State(format!("{} holds no autoencoder", self.dir.display())))?;
        Autoencoder::from_params(cfg, load_params(&self.dir.join("ae.params"))?)
    }

    pub fn save_node(&self, node: &LatentOde, state: Option<&CurriculumState>, times: &[f64]) -> Result<()> {
        let mut m = self.manifest()?;
        m.node = Some(node.cfg.clone());
        m.curriculum = state.cloned();
        m.node_times = Some(times.to_vec());
        self.write_manifest(&m)?;
        save_params(&self.dir.join("node.params"), &node.params)
    }

    pub fn load_node(&self) -> Result<LatentOde> {
        let m = self.manifest()?;
        let cfg = m.node.ok_or_else(|| Error::State(format!("{} holds no latent ODE", self.dir.display())))?;
        LatentOde::from_params(cfg, load_params(&self.dir.join("node.params"))?)
    }

    pub fn save_rbf(&self, rbf: &RbfModel) -> Result<()> {
        create_dir(&self.dir)?;
        write_json(&self.dir.join("rbf.json"), rbf)
    }

    pub fn load_rbf(&self) -> Result<RbfModel> {
        read_json(&self.dir.join("rbf.json"))
    }
}

pub fn save_rbf_file(path: &Path, rbf: &RbfModel) -> Result<()> {
    write_json(path, rbf)
}

pub fn load_rbf_file(path: &Path) -> Result<RbfModel> {
    read_json(path)
}

/// A single predicted or encoded trajectory record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub format: String,
    pub version: u32,
    pub xi: ParamVector,
    pub times_us: Vec<f64>,
    /// Relative path of the `[T, latent_dim]` state tensor.
    pub states: String,
    pub outcome: Option<Outcome>,
}

pub fn write_trajectory(dir: &Path, stem: &str, xi: &ParamVector, tr: &Trajectory, outcome: Option<Outcome>) -> Result<()> {
    create_dir(dir)?;
    let states = format!("{stem}.dnt");
    tr.states_tensor().save(&dir.join(&states))?;
    write_json(
        &dir.join(format!("{stem}.json")),
        &TrajectoryRecord {
            format: "dnae-trajectory".into(),
            version: VERSION,
            xi: *xi,
            times_us: tr.times.clone(),
            states,
            outcome,
        },
    )
}

pub fn read_trajectory(path: &Path) -> Result<(TrajectoryRecord, Trajectory)> {
    let rec: TrajectoryRecord = read_json(path)?;
    check_header(path, &rec.format, rec.version, "dnae-trajectory")?;
    let file = path.parent().unwrap_or(Path::new(".")).join(&rec.states);
    let t = Tensor::load(&file)?;
    if t.rank() != 2 || t.shape()[0] != rec.times_us.len() {
        return Err(Error::Schema {
            file,
            detail: format!("state tensor shape {:?} does not match {} times", t.shape(), rec.times_us.len()),
        });
    }
    let states = t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect();
    let tr = Trajectory::new(rec.times_us.clone(), states)?;
    Ok((rec, tr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn small() -> SynthDataset {
        generate(&SynthConfig {
            grid: (16, 8),
            n_trials: 6,
            n_snapshots: 4,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small();
        write_dataset(dir.path(), &ds).unwrap();
        let m = read_dataset(dir.path()).unwrap();
        assert_eq!(m.trials.len(), 6);
        for (t, entry) in ds.trials.iter().zip(&m.trials) {
            let frames = load_trial_frames(dir.path(), &m, entry).unwrap();
            assert_eq!(frames, t.frames);
            assert_eq!(entry.xi, t.xi);
        }
    }

    #[test]
    fn schema_errors_name_file_and_field() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &small()).unwrap();
        let path = dir.path().join(DATASET_MANIFEST);
        let text = fs::read_to_string(&path).unwrap().replace("\"pixel_mm\"", "\"pixel_size\"");
        fs::write(&path, text).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("manifest.json") && err.contains("pixel_size"), "{err}");
    }

    #[test]
    fn out_of_support_xi_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), &small()).unwrap();
        let mut v = serde_json::to_value(&m).unwrap();
        v["trials"][0]["xi"][5] = serde_json::json!(100.0);
        fs::write(dir.path().join(DATASET_MANIFEST), v.to_string()).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("xi5"), "{err}");
    }

    #[test]
    fn params_round_trip() {
        let ae = Autoencoder::new(AeConfig {
            input_dims: (16, 8),
            block_channels: vec![2, 2],
            ..AeConfig::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_params(&mut buf, &ae.params).unwrap();
        assert_eq!(read_params(&mut buf.as_slice()).unwrap(), ae.params);
        assert!(read_params(&mut &buf[..10]).is_err());
    }

    #[test]
    fn model_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let md = ModelDir::new(dir.path());
        let node = LatentOde::new(NodeConfig::default()).unwrap();
        md.save_node(&node, None, &[0.0, 1.0]).unwrap();
        assert_eq!(md.load_node().unwrap(), node);
        assert!(md.load_ae().is_err());
        let tr = Trajectory::new(vec![0.0, 1.0], vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        write_trajectory(dir.path(), "t", &ParamVector::midpoint(), &tr, Some(Outcome::Success)).unwrap();
        let (rec, back) = read_trajectory(&dir.path().join("t.json")).unwrap();
        assert_eq!(back, tr);
        assert_eq!(rec.outcome, Some(Outcome::Success));
    }
}
