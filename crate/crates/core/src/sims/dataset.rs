use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SimError;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Header stored as `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub name: String,
    pub n_traj: usize,
    #[serde(rename = "T")]
    pub frames: usize,
    pub n_agents: usize,
    pub state_dim: usize,
    pub dt: f64,
}

/// Trajectories stored row-major as `[traj][frame][agent][dim]`.
///
/// Each agent state is `[position, velocity]`, half the dimensions each.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub name: String,
    pub frames: usize,
    pub n_agents: usize,
    pub state_dim: usize,
    pub dt: f64,
    data: Vec<f64>,
}

impl TrajectoryDataset {
    pub fn new(name: impl Into<String>, frames: usize, n_agents: usize, state_dim: usize, dt: f64, data: Vec<f64>) -> Result<Self, SimError> {
        if state_dim == 0 || state_dim % 2 != 0 {
            return Err(SimError::Config(format!("state_dim must be even and positive, got {state_dim}")));
        }
        if !(dt > 0.0) {
            return Err(SimError::Config(format!("dt must be positive, got {dt}")));
        }
        let per = frames * n_agents * state_dim;
        if per == 0 || data.len() % per != 0 {
            return Err(SimError::Config(format!(
                "{} values do not form whole trajectories of {frames}×{n_agents}×{state_dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFinite("dataset"));
        }
        Ok(Self {
            name: name.into(),
            frames,
            n_agents,
            state_dim,
            dt,
            data,
        })
    }

    pub fn n_traj(&self) -> usize {
        self.data.len() / self.traj_len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Values per trajectory.
    pub fn traj_len(&self) -> usize {
        self.frames * self.frame_len()
    }

    /// Values per frame.
    pub fn frame_len(&self) -> usize {
        self.n_agents * self.state_dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn trajectory(&self, i: usize) -> &[f64] {
        let n = self.traj_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn frame(&self, traj: usize, t: usize) -> &[f64] {
        let n = self.frame_len();
        &self.trajectory(traj)[t * n..(t + 1) * n]
    }

    /// New dataset holding the given trajectories in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let data = indices.iter().flat_map(|&i| self.trajectory(i).iter().copied()).collect();
        Self { data, ..self.clone_header() }
    }

    fn clone_header(&self) -> Self {
        Self {
            name: self.name.clone(),
            frames: self.frames,
            n_agents: self.n_agents,
            state_dim: self.state_dim,
            dt: self.dt,
            data: Vec::new(),
        }
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            format_version: DATASET_FORMAT_VERSION,
            name: self.name.clone(),
            n_traj: self.n_traj(),
            frames: self.frames,
            n_agents: self.n_agents,
            state_dim: self.state_dim,
            dt: self.dt,
        }
    }

    /// Whether two datasets can share a model.
    pub fn compatible(&self, other: &Self) -> bool {
        self.n_agents == other.n_agents && self.state_dim == other.state_dim && self.dt == other.dt
    }
}

pub fn save_dataset(ds: &TrajectoryDataset, dir: &Path) -> Result<(), SimError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&ds.meta())?)?;
    let mut blob = Vec::with_capacity(ds.data.len() * 4);
    for v in &ds.data {
        blob.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(dir.join("data.f32"), blob)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<TrajectoryDataset, SimError> {
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    if meta.format_version != DATASET_FORMAT_VERSION {
        return Err(SimError::FormatVersion {
            expected: DATASET_FORMAT_VERSION,
            found: meta.format_version,
        });
    }
    let blob = fs::read(dir.join("data.f32"))?;
    let expected = meta.n_traj * meta.frames * meta.n_agents * meta.state_dim * 4;
    if blob.len() != expected {
        return Err(SimError::Truncated {
            expected,
            found: blob.len(),
        });
    }
    let data = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    TrajectoryDataset::new(meta.name, meta.frames, meta.n_agents, meta.state_dim, meta.dt, data)
}
