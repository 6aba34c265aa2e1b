//! Synthetic floors, leader trajectories, the closed-loop formation
//! experiment, keyframe homing and dataset sampling.

pub mod dataset;
pub mod floorplan;
pub mod formation;
pub mod homing;
pub mod trajectory;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bev::BevError;
use crate::estimator::{EstimatorError, NoiseProfile, OracleEstimator, PoseEstimator, SyntheticEstimator};
use crate::netsim::NetsimError;

pub use dataset::{read_groups, sample_groups, write_groups, NodeSample, SampleConfig, SampleGroup};
pub use floorplan::{gen_world, FloorPlan};
pub use formation::{run_formation, FollowerSummary, FormationConfig, RunLog, RunRecord};
pub use homing::{run_homing, HomingConfig, HomingReport};
pub use trajectory::{leader_pose, HeadingMode, PathKind, TrajectorySpec};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("rejection sampling exhausted")]
    Exhausted,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Bev(#[from] BevError),
    #[error(transparent)]
    Net(#[from] NetsimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Exact relative poses.
    Oracle,
    /// Ground truth corrupted by the calibrated noise profile.
    #[default]
    Synthetic,
}

/// Builds the configured estimator; the synthetic one draws from `seed`.
pub fn make_estimator(kind: EstimatorKind, profile: NoiseProfile, seed: u64) -> Box<dyn PoseEstimator> {
    match kind {
        EstimatorKind::Oracle => Box::new(OracleEstimator::default()),
        EstimatorKind::Synthetic => Box::new(SyntheticEstimator::new(profile, seed)),
    }
}
