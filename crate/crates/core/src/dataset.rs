//! Episode persistence, train/test manifests and training-sample extraction.
//!
//! Episode files are UTF-8, one JSON object per line: a header carrying
//! `format_version`, the seed and the simulator config, then one object per
//! recorded step. Floats are written in shortest round-trip form and parsed
//! with correctly rounded conversion, so `read(write(x)) == x` bit for bit.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Control, Point2, Pose2};
use crate::rng::derive_seed;
use crate::simulator::{run_episode, Observation, OdometryMeasurement, PedestrianState, SimConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u64 },
    #[error("truncated episode: header announces {expected} steps, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid record: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub robot: Pose2,
    pub pedestrians: Vec<PedestrianState>,
    /// Ground-truth control applied on the transition into this step.
    pub control: Control,
    pub odometry: Option<OdometryMeasurement>,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub config: SimConfig,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.config.dt
    }

    pub fn ped_ids(&self) -> Vec<u32> {
        self.steps
            .first()
            .map(|s| s.pedestrians.iter().map(|p| p.id).collect())
            .unwrap_or_default()
    }

    /// Ground-truth position of `ped_id` at `step`.
    pub fn ped_position(&self, ped_id: u32, step: usize) -> Option<Point2> {
        self.steps
            .get(step)?
            .pedestrians
            .iter()
            .find(|p| p.id == ped_id)
            .map(|p| p.position)
    }

    /// Checks the structural invariants: non-empty crowd, aligned streams and
    /// a consistent pedestrian id set across steps.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let first = self
            .steps
            .first()
            .ok_or_else(|| DatasetError::Invalid("episode has no steps".into()))?;
        if first.pedestrians.is_empty() {
            return Err(DatasetError::Invalid("episode has no pedestrians".into()));
        }
        let ids = self.ped_ids();
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != ids.len() {
            return Err(DatasetError::Invalid("duplicate pedestrian ids".into()));
        }
        for (i, s) in self.steps.iter().enumerate() {
            if s.step != i {
                return Err(DatasetError::Invalid(format!("step {i} is labelled {}", s.step)));
            }
            if s.pedestrians.iter().map(|p| p.id).ne(ids.iter().copied()) {
                return Err(DatasetError::Invalid(format!("pedestrian ids change at step {i}")));
            }
            if (i == 0) != s.odometry.is_none() {
                return Err(DatasetError::Invalid(format!("odometry presence wrong at step {i}")));
            }
            if s.observations.iter().any(|o| o.step != i) {
                return Err(DatasetError::Invalid(format!("observation step mismatch at {i}")));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct EpisodeHeader {
    format_version: u64,
    seed: u64,
    steps: usize,
    config: SimConfig,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u64,
}

pub fn write_episode(record: &EpisodeRecord, path: &Path) -> Result<(), DatasetError> {
    record.validate()?;
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let header = EpisodeHeader {
        format_version: FORMAT_VERSION as u64,
        seed: record.seed,
        steps: record.steps.len(),
        config: record.config.clone(),
    };
    let mut line = serde_json::to_string(&header).map_err(|e| DatasetError::Invalid(e.to_string()))?;
    line.push('\n');
    w.write_all(line.as_bytes()).map_err(io_err(path))?;
    for step in &record.steps {
        let mut line = serde_json::to_string(step).map_err(|e| DatasetError::Invalid(e.to_string()))?;
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_episode(path: &Path) -> Result<EpisodeRecord, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let first = match lines.next() {
        Some(l) => l.map_err(io_err(path))?,
        None => return Err(DatasetError::Truncated { expected: 1, found: 0 }),
    };
    let probe: VersionProbe = serde_json::from_str(&first).map_err(|e| DatasetError::Malformed {
        line: 1,
        message: e.to_string(),
    })?;
    if probe.format_version != FORMAT_VERSION as u64 {
        return Err(DatasetError::Version {
            found: probe.format_version,
        });
    }
    let header: EpisodeHeader = serde_json::from_str(&first).map_err(|e| DatasetError::Malformed {
        line: 1,
        message: e.to_string(),
    })?;
    let mut steps = Vec::with_capacity(header.steps);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let step: StepRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
            line: i + 2,
            message: e.to_string(),
        })?;
        steps.push(step);
    }
    if steps.len() != header.steps {
        return Err(DatasetError::Truncated {
            expected: header.steps,
            found: steps.len(),
        });
    }
    let record = EpisodeRecord {
        config: header.config,
        seed: header.seed,
        steps,
    };
    record.validate()?;
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    /// Relative to the manifest's directory.
    pub path: String,
    pub split: Split,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u64,
    pub master_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub episodes: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.episodes.iter().filter(move |e| e.split == split)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| DatasetError::Invalid(e.to_string()))?;
        fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let probe: VersionProbe = serde_json::from_str(&text).map_err(|e| DatasetError::Malformed {
            line: e.line(),
            message: e.to_string(),
        })?;
        if probe.format_version != FORMAT_VERSION as u64 {
            return Err(DatasetError::Version {
                found: probe.format_version,
            });
        }
        let m: Self = serde_json::from_str(&text).map_err(|e| DatasetError::Malformed {
            line: e.line(),
            message: e.to_string(),
        })?;
        m.check_disjoint()?;
        Ok(m)
    }

    fn check_disjoint(&self) -> Result<(), DatasetError> {
        let mut paths: Vec<&str> = self.episodes.iter().map(|e| e.path.as_str()).collect();
        paths.sort_unstable();
        let n = paths.len();
        paths.dedup();
        if paths.len() != n {
            return Err(DatasetError::Invalid("manifest lists an episode twice".into()));
        }
        Ok(())
    }
}

pub fn episode_seed(master_seed: u64, index: usize) -> u64 {
    derive_seed(master_seed, &[index as u64])
}

/// Simulates `n_train + n_test` episodes into `out_dir/episodes/` and writes
/// `out_dir/manifest.json`. The first `n_train` indices form the train split.
pub fn generate_dataset(
    config: &SimConfig,
    n_train: usize,
    n_test: usize,
    master_seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest, DatasetError> {
    if n_train == 0 || n_test == 0 {
        return Err(DatasetError::Invalid("n_train and n_test must be positive".into()));
    }
    config
        .validate()
        .map_err(|e| DatasetError::Invalid(e.to_string()))?;
    let ep_dir = out_dir.join("episodes");
    fs::create_dir_all(&ep_dir).map_err(io_err(&ep_dir))?;
    let episodes: Vec<ManifestEntry> = (0..n_train + n_test)
        .into_par_iter()
        .map(|index| {
            let seed = episode_seed(master_seed, index);
            let rel = format!("episodes/episode_{index:05}.jsonl");
            let record = run_episode(config, seed);
            write_episode(&record, &out_dir.join(&rel))?;
            Ok(ManifestEntry {
                index,
                path: rel,
                split: if index < n_train { Split::Train } else { Split::Test },
                seed,
            })
        })
        .collect::<Result<_, DatasetError>>()?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION as u64,
        master_seed,
        n_train,
        n_test,
        episodes,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Co-temporal ground-truth histories of every pedestrian in a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneHistory {
    /// Step of the last history entry.
    pub step: usize,
    pub ped_ids: Vec<u32>,
    /// One `H`-long position list per pedestrian, oldest first.
    pub histories: Vec<Vec<Point2>>,
}

#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub target_ped: u32,
    /// Index of the target inside `scene`.
    pub target_index: usize,
    pub scene: Arc<SceneHistory>,
    /// Ground-truth velocity over the step following the history, m/s.
    pub target: [f64; 2],
}

impl TrainingSample {
    pub fn history(&self) -> &[Point2] {
        &self.scene.histories[self.target_index]
    }
}

/// One sample per (pedestrian, step `i`) with `H` positions `p[i-H..i]` as
/// history and `(p[i] - p[i-1]) / dt` as target, for `i` in `H..len-1`.
pub fn extract_samples(record: &EpisodeRecord, history_len: usize) -> Vec<TrainingSample> {
    let len = record.steps.len();
    if history_len < 2 || len <= history_len + 1 {
        return Vec::new();
    }
    let dt = record.dt();
    let ids = record.ped_ids();
    let mut out = Vec::with_capacity(ids.len() * (len - history_len - 1));
    for i in history_len..len - 1 {
        let histories: Vec<Vec<Point2>> = (0..ids.len())
            .map(|k| {
                record.steps[i - history_len..i]
                    .iter()
                    .map(|s| s.pedestrians[k].position)
                    .collect()
            })
            .collect();
        let scene = Arc::new(SceneHistory {
            step: i - 1,
            ped_ids: ids.clone(),
            histories,
        });
        for (k, &id) in ids.iter().enumerate() {
            let p = record.steps[i].pedestrians[k].position;
            let q = record.steps[i - 1].pedestrians[k].position;
            out.push(TrainingSample {
                target_ped: id,
                target_index: k,
                scene: scene.clone(),
                target: [(p.x - q.x) / dt, (p.y - q.y) / dt],
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;

    fn const_velocity_record(len: usize, peds: usize, v: [f64; 2]) -> EpisodeRecord {
        let config = SimConfig::default();
        let steps = (0..len)
            .map(|i| StepRecord {
                step: i,
                robot: Pose2::identity(),
                pedestrians: (0..peds)
                    .map(|k| PedestrianState {
                        id: k as u32,
                        position: Point2::new(k as f64 + v[0] * 0.1 * i as f64, v[1] * 0.1 * i as f64),
                        velocity: Vector2::new(v[0], v[1]),
                        heading: 0.0,
                        goal: Point2::new(0.0, 0.0),
                        desired_speed: 1.0,
                    })
                    .collect(),
                control: Control::default(),
                odometry: (i > 0).then_some(OdometryMeasurement {
                    step: i,
                    u_meas: Control::default(),
                }),
                observations: vec![],
            })
            .collect();
        EpisodeRecord {
            config,
            seed: 0,
            steps,
        }
    }

    #[test]
    fn sample_counts() {
        let h = 8;
        assert_eq!(extract_samples(&const_velocity_record(h + 2, 1, [1.0, 0.0]), h).len(), 1);
        assert_eq!(extract_samples(&const_velocity_record(200, 3, [1.0, 0.0]), h).len(), 573);
        assert!(extract_samples(&const_velocity_record(h + 1, 1, [1.0, 0.0]), h).is_empty());
    }

    #[test]
    fn constant_velocity_targets() {
        for s in extract_samples(&const_velocity_record(30, 2, [1.0, 0.0]), 8) {
            assert!((s.target[0] - 1.0).abs() < 1e-12 && s.target[1].abs() < 1e-12);
            assert_eq!(s.history().len(), 8);
        }
    }

    #[test]
    fn write_rejects_empty_crowd() {
        let mut r = const_velocity_record(5, 1, [0.0, 0.0]);
        for s in &mut r.steps {
            s.pedestrians.clear();
        }
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_episode(&r, &dir.path().join("e.jsonl")),
            Err(DatasetError::Invalid(_))
        ));
    }

    #[test]
    fn version_and_truncation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        let r = const_velocity_record(5, 2, [0.3, 0.1]);
        write_episode(&r, &path).unwrap();
        assert_eq!(read_episode(&path).unwrap(), r);

        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        fs::write(&path, lines[..4].join("\n")).unwrap();
        assert!(matches!(
            read_episode(&path),
            Err(DatasetError::Truncated { expected: 5, found: 3 })
        ));

        fs::write(&path, text.replacen("\"format_version\":1", "\"format_version\":9", 1)).unwrap();
        assert!(matches!(read_episode(&path), Err(DatasetError::Version { found: 9 })));

        let mut broken: Vec<String> = text.lines().map(String::from).collect();
        broken[1] = broken[1].replacen("\"robot\"", "\"robbot\"", 1);
        fs::write(&path, broken.join("\n")).unwrap();
        assert!(matches!(read_episode(&path), Err(DatasetError::Malformed { line: 2, .. })));
    }
}
