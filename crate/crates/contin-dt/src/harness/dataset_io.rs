//! Dataset files: a JSON header line followed by one JSON trajectory per
//! line. Floats round-trip exactly through their shortest decimal form.

use super::HarnessError;
use crate::tasks::{OfflineDataset, Quality, TaskFamily, TaskSpec, Trajectory};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct DatasetHeader {
    family: String,
    parameter: f32,
    quality: String,
    #[serde(rename = "H")]
    horizon: usize,
    n_traj: usize,
    seed: u64,
    version: u32,
}

pub fn write_dataset(path: &Path, dataset: &OfflineDataset) -> Result<(), HarnessError> {
    let header = DatasetHeader {
        family: dataset.task.family.name().to_string(),
        parameter: dataset.task.parameter,
        quality: dataset.quality.name().to_string(),
        horizon: dataset.task.horizon,
        n_traj: dataset.trajectories.len(),
        seed: dataset.seed,
        version: 1,
    };
    let file = std::fs::File::create(path)
        .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| HarnessError::Io(format!("{}: {e}", path.display()));
    let json_err = |e: serde_json::Error| HarnessError::Io(format!("{}: {e}", path.display()));
    serde_json::to_writer(&mut w, &header).map_err(json_err)?;
    w.write_all(b"\n").map_err(io_err)?;
    for traj in &dataset.trajectories {
        serde_json::to_writer(&mut w, traj).map_err(json_err)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_dataset(path: &Path) -> Result<OfflineDataset, HarnessError> {
    let file = std::fs::File::open(path)
        .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| HarnessError::Io(format!("{}: empty file", path.display())))?
        .map_err(|e| HarnessError::Io(e.to_string()))?;
    let header = parse_header(&header_line)?;
    let mut trajectories = Vec::with_capacity(header.n_traj);
    for line in lines {
        let line = line.map_err(|e| HarnessError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let traj = parse_trajectory(&line)?;
        trajectories.push(traj);
    }
    if trajectories.len() != header.n_traj {
        return Err(HarnessError::Io(format!(
            "{}: header says {} trajectories, found {}",
            path.display(),
            header.n_traj,
            trajectories.len()
        )));
    }
    let family = match header.family.as_str() {
        "direction" => TaskFamily::Direction,
        "velocity" => TaskFamily::Velocity,
        other => {
            return Err(HarnessError::Io(format!(
                "{}: unknown family `{other}`",
                path.display()
            )))
        }
    };
    let quality = match header.quality.as_str() {
        "expert" => Quality::Expert,
        "middle" => Quality::Middle,
        other => {
            return Err(HarnessError::Io(format!(
                "{}: unknown quality `{other}`",
                path.display()
            )))
        }
    };
    let mut task = match family {
        TaskFamily::Direction => TaskSpec::direction(header.parameter),
        TaskFamily::Velocity => TaskSpec::velocity(header.parameter),
    };
    task.horizon = header.horizon;
    Ok(OfflineDataset {
        task,
        quality,
        trajectories,
        seed: header.seed,
    })
}

/// Header decoding shared with the fuzz entry point.
pub fn parse_header(line: &str) -> Result<DatasetHeaderOwned, HarnessError> {
    let header: DatasetHeader =
        serde_json::from_str(line).map_err(|e| HarnessError::Io(format!("bad header: {e}")))?;
    Ok(DatasetHeaderOwned {
        family: header.family,
        parameter: header.parameter,
        quality: header.quality,
        horizon: header.horizon,
        n_traj: header.n_traj,
        seed: header.seed,
        version: header.version,
    })
}

/// Trajectory decoding with structural validation: array lengths must be
/// mutually consistent and all values finite.
pub fn parse_trajectory(line: &str) -> Result<Trajectory, HarnessError> {
    let traj: Trajectory =
        serde_json::from_str(line).map_err(|e| HarnessError::Io(format!("bad trajectory: {e}")))?;
    let h = traj.rewards.len();
    if h == 0 {
        return Err(HarnessError::Io("bad trajectory: empty".into()));
    }
    if traj.returns_to_go.len() != h {
        return Err(HarnessError::Io(
            "bad trajectory: returns/rewards length mismatch".into(),
        ));
    }
    if traj.states.len() % (h + 1) != 0 || traj.actions.len() % h != 0 {
        return Err(HarnessError::Io(
            "bad trajectory: state/action arrays not divisible by horizon".into(),
        ));
    }
    let finite = traj.states.iter().chain(&traj.actions).chain(&traj.rewards).chain(&traj.returns_to_go).all(|v| v.is_finite());
    if !finite || !traj.episode_return.is_finite() {
        return Err(HarnessError::Io("bad trajectory: non-finite values".into()));
    }
    Ok(traj)
}

/// Owned header view exposed for validation and fuzzing.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeaderOwned {
    pub family: String,
    pub parameter: f32,
    pub quality: String,
    pub horizon: usize,
    pub n_traj: usize,
    pub seed: u64,
    pub version: u32,
}
