//! Pluggable relative-pose estimators.
//!
//! A learned model is replaced here by [`SyntheticEstimator`], which corrupts the
//! true relative pose with noise whose medians are configurable per visibility
//! class, and by [`OracleEstimator`], which returns the truth. A real model can
//! be attached over a socket through [`RemoteEstimator`].

mod noise;
mod remote;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{relative_pose, Pose, UnitQuat, Vec3};

pub use noise::{estimate, mixture_median, NoiseModel, NoiseProfile, HALF_NORMAL_MEDIAN};
pub use remote::{decode_response, encode_request, encode_response, RemoteEstimator, RESPONSE_BYTES};

pub type NodeId = u16;

/// Default embedding size in bytes.
pub const DEFAULT_EMBEDDING_BYTES: usize = 6144;
/// Default sigma reported by the noiseless estimator.
pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("invalid estimate: {0}")]
    Invalid(String),
    #[error("non-unit quaternion in response (norm {0})")]
    NonUnitQuaternion(f64),
    #[error("response framing: expected {expected} bytes, got {got}")]
    Framing { expected: usize, got: usize },
    #[error("remote estimator timed out")]
    Timeout,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// What one robot contributes at one tick. The estimator sees exactly two of
/// these; only the synthetic noise generator reads `pose_truth`.
#[derive(Debug, Clone)]
pub struct Observation {
    pub node_id: NodeId,
    pub tick: u64,
    pub pose_truth: Pose,
    pub fov_deg: f64,
    pub embedding: Arc<[u8]>,
}

impl Observation {
    pub fn new(node_id: NodeId, tick: u64, pose_truth: Pose, fov_deg: f64, embedding: Arc<[u8]>) -> Self {
        Self { node_id, tick, pose_truth, fov_deg, embedding }
    }

    /// Observation with an empty embedding, for offline evaluation.
    pub fn bare(node_id: NodeId, tick: u64, pose_truth: Pose, fov_deg: f64) -> Self {
        Self::new(node_id, tick, pose_truth, fov_deg, Arc::from(Vec::new()))
    }
}

/// Relative pose of `dst` in the ego frame of `src`, with per-axis position
/// standard deviation and a chordal-scale rotation standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub src: NodeId,
    pub dst: NodeId,
    pub p_hat: Vec3,
    pub sigma_p: Vec3,
    pub q_hat: UnitQuat,
    pub sigma_q: f64,
}

impl PoseEstimate {
    pub fn from_pose(src: NodeId, dst: NodeId, pose: Pose, sigma_p: Vec3, sigma_q: f64) -> Self {
        Self { src, dst, p_hat: pose.position, sigma_p, q_hat: pose.rotation, sigma_q }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.p_hat, self.q_hat)
    }

    /// Scalar position uncertainty used for gating and filtering.
    pub fn sigma_p_norm(&self) -> f64 {
        self.sigma_p.norm()
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        if !self.p_hat.is_finite() || !self.sigma_p.is_finite() || !self.sigma_q.is_finite() {
            return Err(EstimatorError::Invalid("non-finite field".into()));
        }
        let s = self.sigma_p;
        if s.x <= 0.0 || s.y <= 0.0 || s.z <= 0.0 || self.sigma_q <= 0.0 {
            return Err(EstimatorError::Invalid("sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Per-edge RNG keyed by `(seed, tick, src, dst)`, independent of evaluation order.
pub fn edge_rng(seed: u64, tick: u64, src: NodeId, dst: NodeId) -> ChaCha8Rng {
    let mut key = splitmix(seed);
    key = splitmix(key ^ tick);
    key = splitmix(key ^ ((src as u64) << 16 | dst as u64));
    ChaCha8Rng::seed_from_u64(key)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Exact relative pose with floor-level uncertainty.
pub fn estimate_oracle(obs_i: &Observation, obs_j: &Observation, sigma_floor: f64) -> PoseEstimate {
    let rel = relative_pose(&obs_i.pose_truth, &obs_j.pose_truth);
    PoseEstimate::from_pose(
        obs_i.node_id,
        obs_j.node_id,
        rel,
        Vec3::new(sigma_floor, sigma_floor, sigma_floor),
        sigma_floor,
    )
}

pub trait PoseEstimator {
    fn estimate(&mut self, obs_i: &Observation, obs_j: &Observation) -> Result<PoseEstimate, EstimatorError>;
}

#[derive(Debug, Clone)]
pub struct OracleEstimator {
    pub sigma_floor: f64,
}

impl Default for OracleEstimator {
    fn default() -> Self {
        Self { sigma_floor: DEFAULT_SIGMA_FLOOR }
    }
}

impl PoseEstimator for OracleEstimator {
    fn estimate(&mut self, obs_i: &Observation, obs_j: &Observation) -> Result<PoseEstimate, EstimatorError> {
        Ok(estimate_oracle(obs_i, obs_j, self.sigma_floor))
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticEstimator {
    model: NoiseModel,
    seed: u64,
}

impl SyntheticEstimator {
    pub fn new(profile: NoiseProfile, seed: u64) -> Self {
        Self { model: profile.calibrate(), seed }
    }

    pub fn model(&self) -> &NoiseModel {
        &self.model
    }
}

impl PoseEstimator for SyntheticEstimator {
    fn estimate(&mut self, obs_i: &Observation, obs_j: &Observation) -> Result<PoseEstimate, EstimatorError> {
        let mut rng = edge_rng(self.seed, obs_i.tick, obs_i.node_id, obs_j.node_id);
        Ok(estimate(obs_i, obs_j, &self.model, &mut rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pos_dist, rot_geodesic_deg};

    fn obs(id: NodeId, pose: Pose) -> Observation {
        Observation::bare(id, 0, pose, 120.0)
    }

    #[test]
    fn oracle_is_exact() {
        let a = obs(0, Pose::planar(1.0, 2.0, 0.3));
        let b = obs(1, Pose::planar(-1.0, 0.5, 2.0));
        let e = estimate_oracle(&a, &b, 1e-3);
        let truth = relative_pose(&a.pose_truth, &b.pose_truth);
        assert_eq!(pos_dist(&e.p_hat, &truth.position), 0.0);
        assert_eq!(rot_geodesic_deg(&e.q_hat, &truth.rotation), 0.0);
        assert_eq!(e.sigma_q, 1e-3);
        e.validate().unwrap();
    }

    #[test]
    fn oracle_self_pair_is_identity() {
        let a = obs(3, Pose::planar(4.0, -2.0, 1.0));
        let e = estimate_oracle(&a, &a, 1e-3);
        assert!(e.p_hat.norm() < 1e-12);
        assert!(e.q_hat.angle() < 1e-7);
    }

    #[test]
    fn oracle_chain_composes() {
        let a = obs(0, Pose::new(Vec3::new(0.5, 0.2, 0.1), UnitQuat::from_axis_angle(Vec3::new(0.1, 0.2, 1.0), 0.9)));
        let b = obs(1, Pose::new(Vec3::new(-1.0, 2.0, 0.0), UnitQuat::from_axis_angle(Vec3::new(1.0, 0.0, 0.3), -0.4)));
        let c = obs(2, Pose::planar(3.0, 1.0, -2.2));
        let ab = estimate_oracle(&a, &b, 1e-3).pose();
        let bc = estimate_oracle(&b, &c, 1e-3).pose();
        let ac = estimate_oracle(&a, &c, 1e-3).pose();
        let chained = ab.compose(&bc);
        assert!(pos_dist(&chained.position, &ac.position) < 1e-12);
        assert!(rot_geodesic_deg(&chained.rotation, &ac.rotation) < 1e-6);
    }

    #[test]
    fn validate_rejects_nonpositive_sigma() {
        let mut e = estimate_oracle(&obs(0, Pose::IDENTITY), &obs(1, Pose::IDENTITY), 1e-3);
        e.sigma_p.y = 0.0;
        assert!(matches!(e.validate(), Err(EstimatorError::Invalid(_))));
    }

    #[test]
    fn edge_rng_is_keyed() {
        use rand::Rng;
        let a: u64 = edge_rng(1, 2, 3, 4).random();
        let b: u64 = edge_rng(1, 2, 3, 4).random();
        let c: u64 = edge_rng(1, 2, 4, 3).random();
        let d: u64 = edge_rng(1, 3, 3, 4).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
