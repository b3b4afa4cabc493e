//! Trajectory dataset persistence, train/test splitting, normalization
//! statistics and measurement-noise injection.
//!
//! On disk a dataset is a directory holding one `manifest.toml` plus one
//! raw numeric container per trajectory:
//!
//! ```text
//! <dir>/manifest.toml   format version, generator name, seed, dt, layout,
//!                       every physical constant of the generator, noise
//!                       settings, split labels and a sha256 per trajectory
//! <dir>/traj_000.bin    snapshots as rows, row-major, f64 little-endian
//! ...
//! ```
//!
//! The manifest is complete: `regenerate_from_manifest` re-runs the
//! generator pipeline (generate, split, noise) from the manifest alone and
//! reproduces the stored data bit-exactly.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::generic::StateLayout;
use crate::net::{NormalizationStats, STD_FLOOR};
use crate::rng;

pub const DATASET_FORMAT: &str = "spnn-ds-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Which trajectories receive measurement noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScope {
    /// Noise the training split only, so test metrics compare against clean
    /// ground truth.
    #[default]
    Train,
    All,
}

/// One trajectory: an `(N_T + 1) x n` snapshot grid stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub values: Vec<f64>,
    pub n_snapshots: usize,
    pub dim: usize,
    pub split: Split,
}

impl Trajectory {
    pub fn new(values: Vec<f64>, n_snapshots: usize, dim: usize) -> Result<Self, Error> {
        if values.len() != n_snapshots * dim {
            return Err(Error::Dimension {
                context: "Trajectory::new",
                expected: n_snapshots * dim,
                got: values.len(),
            });
        }
        Ok(Self {
            values,
            n_snapshots,
            dim,
            split: Split::Train,
        })
    }

    pub fn snapshot(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn snapshots(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub file: String,
    pub split: Split,
    pub sha256: String,
}

/// Self-describing dataset metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    /// Generator name (`pendulum` / `couette`).
    pub generator: String,
    /// Master seed; every random stream in the pipeline derives from it.
    pub seed: u64,
    pub dt: f64,
    pub n_trajectories: usize,
    /// Snapshots per trajectory, `N_T + 1`.
    pub n_snapshots: usize,
    pub state_dim: usize,
    pub train_fraction: f64,
    /// Relative noise level of the injected measurement noise (0 = clean).
    pub noise_level: f64,
    pub noise_scope: NoiseScope,
    pub layout: StateLayout,
    /// Every physical constant of the generator, exactly as configured.
    pub params: toml::value::Table,
    pub trajectories: Vec<TrajectoryEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub manifest: Manifest,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryDataset {
    /// Construct an unlabeled dataset fresh out of a generator. Split labels
    /// default to `Train`; call [`split`] to assign them.
    pub fn from_generator(
        generator: &str,
        seed: u64,
        dt: f64,
        layout: StateLayout,
        params: toml::value::Table,
        trajectories: Vec<Trajectory>,
    ) -> Result<Self, Error> {
        let n_snapshots = trajectories.first().map(|t| t.n_snapshots).unwrap_or(0);
        let state_dim = layout.dim();
        for t in &trajectories {
            if t.n_snapshots != n_snapshots || t.dim != state_dim {
                return Err(Error::Format(
                    "trajectories must share one shape".to_string(),
                ));
            }
        }
        let manifest = Manifest {
            format_version: DATASET_FORMAT.to_string(),
            generator: generator.to_string(),
            seed,
            dt,
            n_trajectories: trajectories.len(),
            n_snapshots,
            state_dim,
            train_fraction: 1.0,
            noise_level: 0.0,
            noise_scope: NoiseScope::Train,
            layout,
            params,
            trajectories: trajectories
                .iter()
                .enumerate()
                .map(|(i, t)| TrajectoryEntry {
                    file: format!("traj_{i:03}.bin"),
                    split: t.split,
                    sha256: String::new(),
                })
                .collect(),
        };
        Ok(Self {
            manifest,
            trajectories,
        })
    }

    pub fn dim(&self) -> usize {
        self.manifest.state_dim
    }

    pub fn dt(&self) -> f64 {
        self.manifest.dt
    }

    /// Indices of trajectories in the given split, in dataset order.
    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.trajectories
            .iter()
            .enumerate()
            .filter(|(_, t)| t.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Per-variable standard deviation over every snapshot of the whole
    /// database (both splits), population convention, no floor.
    pub fn per_variable_std(&self) -> Vec<f64> {
        let n = self.dim();
        let mut mean = vec![0.0; n];
        let mut count = 0usize;
        for t in &self.trajectories {
            for s in t.snapshots() {
                for (m, v) in mean.iter_mut().zip(s) {
                    *m += v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return vec![0.0; n];
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        let mut var = vec![0.0; n];
        for t in &self.trajectories {
            for s in t.snapshots() {
                for i in 0..n {
                    let d = s[i] - mean[i];
                    var[i] += d * d;
                }
            }
        }
        var.iter().map(|v| (v / count as f64).sqrt()).collect()
    }
}

fn trajectory_bytes(t: &Trajectory) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(t.values.len() * 8);
    for v in &t.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

/// Write the dataset directory (manifest + one container per trajectory).
pub fn save(dataset: &TrajectoryDataset, dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = dataset.manifest.clone();
    for (entry, t) in manifest.trajectories.iter_mut().zip(&dataset.trajectories) {
        entry.split = t.split;
        let bytes = trajectory_bytes(t);
        entry.sha256 = hex::encode(Sha256::digest(&bytes));
        std::fs::write(dir.join(&entry.file), bytes)?;
    }
    let text = toml::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

const REQUIRED_MANIFEST_KEYS: &[&str] = &[
    "format_version",
    "generator",
    "seed",
    "dt",
    "n_trajectories",
    "n_snapshots",
    "state_dim",
    "train_fraction",
    "noise_level",
    "noise_scope",
    "layout",
    "params",
    "trajectories",
];

/// Load a dataset directory, verifying version, shapes and checksums.
pub fn load(dir: &Path) -> Result<TrajectoryDataset, Error> {
    let text = std::fs::read_to_string(dir.join("manifest.toml"))?;
    let table: toml::value::Table =
        toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    for key in REQUIRED_MANIFEST_KEYS {
        if !table.contains_key(*key) {
            return Err(Error::MissingManifestKey(key.to_string()));
        }
    }
    let manifest: Manifest = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Format(e.to_string()))?;
    if manifest.format_version != DATASET_FORMAT {
        return Err(Error::VersionMismatch {
            expected: DATASET_FORMAT.to_string(),
            got: manifest.format_version,
        });
    }
    if manifest.layout.dim() != manifest.state_dim {
        return Err(Error::Format(
            "layout dimension disagrees with state_dim".to_string(),
        ));
    }
    let mut trajectories = Vec::with_capacity(manifest.trajectories.len());
    for entry in &manifest.trajectories {
        let bytes = std::fs::read(dir.join(&entry.file))?;
        let actual = hex::encode(Sha256::digest(&bytes));
        if actual != entry.sha256 {
            return Err(Error::ChecksumMismatch {
                name: entry.file.clone(),
                expected: entry.sha256.clone(),
                actual,
            });
        }
        let expected_len = manifest.n_snapshots * manifest.state_dim * 8;
        if bytes.len() != expected_len {
            return Err(Error::Format(format!(
                "{}: expected {} bytes, found {}",
                entry.file,
                expected_len,
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut t = Trajectory::new(values, manifest.n_snapshots, manifest.state_dim)?;
        t.split = entry.split;
        trajectories.push(t);
    }
    Ok(TrajectoryDataset {
        manifest,
        trajectories,
    })
}

/// Label whole trajectories train/test: a seeded shuffle assigns the first
/// `round(train_fraction * N)` to the training split.
pub fn split(mut dataset: TrajectoryDataset, train_fraction: f64, seed: u64) -> TrajectoryDataset {
    let n = dataset.trajectories.len();
    let n_train = ((train_fraction * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::SPLIT_STREAM));
    for t in dataset.trajectories.iter_mut() {
        t.split = Split::Test;
    }
    for &idx in order.iter().take(n_train) {
        dataset.trajectories[idx].split = Split::Train;
    }
    dataset.manifest.train_fraction = train_fraction;
    for (entry, t) in dataset
        .manifest
        .trajectories
        .iter_mut()
        .zip(&dataset.trajectories)
    {
        entry.split = t.split;
    }
    dataset
}

/// Add Gaussian measurement noise `z + nu * sigma_z * N(0,1)` to every
/// snapshot entry of the trajectories in `scope`, where `sigma_z` is the
/// per-variable standard deviation over the whole database (computed before
/// splitting or noising). Noise for trajectory `i` always comes from stream
/// `NOISE_STREAM_BASE + i`, drawn entry by entry in snapshot-major order.
pub fn add_noise(
    mut dataset: TrajectoryDataset,
    nu: f64,
    seed: u64,
    scope: NoiseScope,
) -> TrajectoryDataset {
    if nu == 0.0 {
        return dataset;
    }
    let sigma = dataset.per_variable_std();
    let dim = dataset.dim();
    for (i, t) in dataset.trajectories.iter_mut().enumerate() {
        if scope == NoiseScope::Train && t.split != Split::Train {
            continue;
        }
        let mut stream = rng::stream(seed, rng::NOISE_STREAM_BASE + i as u64);
        for (k, value) in t.values.iter_mut().enumerate() {
            let xi: f64 = stream.sample(StandardNormal);
            *value += nu * sigma[k % dim] * xi;
        }
    }
    dataset.manifest.noise_level = nu;
    dataset.manifest.noise_scope = scope;
    dataset
}

/// Per-variable mean/std over every snapshot of the requested split
/// (population convention, std floored at [`STD_FLOOR`]).
pub fn compute_stats(dataset: &TrajectoryDataset, split: Split) -> Result<NormalizationStats, Error> {
    let n = dataset.dim();
    let mut mean = vec![0.0; n];
    let mut count = 0usize;
    for t in dataset.trajectories.iter().filter(|t| t.split == split) {
        for s in t.snapshots() {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidConfig(format!(
            "no {split:?} trajectories to compute statistics from"
        )));
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let mut var = vec![0.0; n];
    for t in dataset.trajectories.iter().filter(|t| t.split == split) {
        for s in t.snapshots() {
            for i in 0..n {
                let d = s[i] - mean[i];
                var[i] += d * d;
            }
        }
    }
    let std = var
        .iter()
        .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(NormalizationStats { mean, std })
}

/// Re-run the full generation pipeline (generate, split, noise) described
/// by a manifest. The result is bit-identical to the dataset the manifest
/// was saved with.
pub fn regenerate_from_manifest(manifest: &Manifest) -> Result<TrajectoryDataset, Error> {
    let params_value = toml::Value::Table(manifest.params.clone());
    let dataset = match manifest.generator.as_str() {
        "pendulum" => {
            let params: crate::pendulum::PendulumParams = params_value
                .try_into()
                .map_err(|e: toml::de::Error| Error::Format(e.to_string()))?;
            crate::pendulum::generate_dataset(&params, manifest.seed)?
        }
        "couette" => {
            let params: crate::oldroyd::CouetteParams = params_value
                .try_into()
                .map_err(|e: toml::de::Error| Error::Format(e.to_string()))?;
            crate::oldroyd::generate_dataset(&params, manifest.seed)?
        }
        other => {
            return Err(Error::Format(format!("unknown generator `{other}`")));
        }
    };
    let dataset = split(dataset, manifest.train_fraction, manifest.seed);
    Ok(add_noise(
        dataset,
        manifest.noise_level,
        manifest.seed,
        manifest.noise_scope,
    ))
}
