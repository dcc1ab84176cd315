//! On-disk trajectory format.
//!
//! A dataset directory holds `dataset.json` and one sub-directory per
//! trajectory. Each trajectory directory holds `metadata.json` and one raw
//! little-endian array per channel, `<channel>.bin`, shaped `(frames, nx, ny)`
//! in row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ConservedState, Grid2D, State, Trajectory};
use crate::real::Precision;

pub const FORMAT_NAME: &str = "conserve-trajectory";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryMeta {
    pub format: String,
    pub version: u32,
    pub grid: Grid2D,
    pub dt: f64,
    pub frames: usize,
    pub channels: Vec<String>,
    /// Storage precision of the channel files.
    pub precision: Precision,
    /// Free-form description of where the data came from.
    #[serde(default)]
    pub provenance: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format: String,
    pub version: u32,
    pub samples: Vec<String>,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes one trajectory of any state type into `dir`.
pub fn write_trajectory<S: State>(
    dir: &Path,
    traj: &Trajectory<S>,
    precision: Precision,
    provenance: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let grid = *traj.states[0].grid();
    let meta = TrajectoryMeta {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        grid,
        dt: traj.dt,
        frames: traj.len(),
        channels: S::CHANNELS.iter().map(|s| s.to_string()).collect(),
        precision,
        provenance,
    };
    for (c, name) in S::CHANNELS.iter().enumerate() {
        let width = match precision {
            Precision::Single => 4,
            Precision::Double => 8,
        };
        let mut bytes = Vec::with_capacity(traj.len() * grid.cells() * width);
        for s in &traj.states {
            for &v in s.channel(c) {
                match precision {
                    Precision::Single => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
                    Precision::Double => bytes.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        write_file(&dir.join(format!("{name}.bin")), &bytes)?;
    }
    let json = serde_json::to_vec_pretty(&meta).expect("metadata serializes");
    write_file(&dir.join("metadata.json"), &json)
}

pub fn read_trajectory_meta(dir: &Path) -> Result<TrajectoryMeta> {
    let path = dir.join("metadata.json");
    let meta: TrajectoryMeta = serde_json::from_slice(&read_file(&path)?)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    if meta.format != FORMAT_NAME || meta.version != FORMAT_VERSION {
        return Err(Error::format(
            path.display().to_string(),
            format!("unsupported format {} v{}", meta.format, meta.version),
        ));
    }
    Ok(meta)
}

/// Reads a trajectory written by [`write_trajectory`] with the same state type.
pub fn read_trajectory<S: State>(dir: &Path) -> Result<Trajectory<S>> {
    let meta = read_trajectory_meta(dir)?;
    let dataset = dir.display().to_string();
    let expected: Vec<String> = S::CHANNELS.iter().map(|s| s.to_string()).collect();
    if meta.channels != expected {
        return Err(Error::format(
            dataset,
            format!("channels {:?}, expected {:?}", meta.channels, expected),
        ));
    }
    meta.grid
        .validate()
        .map_err(|e| Error::format(dataset.clone(), e.to_string()))?;
    let cells = meta.grid.cells();
    let mut per_channel = Vec::with_capacity(expected.len());
    for name in &expected {
        let path = dir.join(format!("{name}.bin"));
        let bytes = read_file(&path)?;
        let values: Vec<f64> = match meta.precision {
            Precision::Single => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            Precision::Double => bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        };
        let width = if meta.precision == Precision::Single { 4 } else { 8 };
        if bytes.len() != meta.frames * cells * width {
            return Err(Error::format(
                path.display().to_string(),
                format!("{} bytes, expected {}", bytes.len(), meta.frames * cells * width),
            ));
        }
        per_channel.push(values);
    }
    let states = (0..meta.frames)
        .map(|t| {
            let channels = per_channel
                .iter()
                .map(|v| v[t * cells..(t + 1) * cells].to_vec())
                .collect();
            S::from_channels(meta.grid, channels)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::format(dataset.clone(), e.to_string()))?;
    Trajectory::new(meta.dt, states)
}

fn sample_name(i: usize) -> String {
    format!("sample_{i:05}")
}

/// Writes a set of conserved trajectories as a dataset directory.
pub fn write_dataset(
    dir: &Path,
    trajectories: &[Trajectory<ConservedState>],
    precision: Precision,
    provenance: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let samples: Vec<String> = (0..trajectories.len()).map(sample_name).collect();
    for (name, traj) in samples.iter().zip(trajectories) {
        write_trajectory(&dir.join(name), traj, precision, serde_json::Value::Null)?;
    }
    let meta = DatasetMeta {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        samples,
        provenance,
    };
    write_file(
        &dir.join("dataset.json"),
        &serde_json::to_vec_pretty(&meta).expect("metadata serializes"),
    )
}

pub fn read_dataset_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("dataset.json");
    serde_json::from_slice(&read_file(&path)?).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

/// Sample directories of a dataset, in order.
pub fn dataset_samples(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(read_dataset_meta(dir)?.samples.iter().map(|s| dir.join(s)).collect())
}

/// Reads every trajectory of a dataset directory.
pub fn read_dataset(dir: &Path) -> Result<Vec<Trajectory<ConservedState>>> {
    let samples = dataset_samples(dir)?;
    if samples.is_empty() {
        return Err(Error::Empty(format!("{} lists no samples", dir.display())));
    }
    samples.iter().map(|p| read_trajectory(p)).collect()
}
