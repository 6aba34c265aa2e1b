//! Teach and repeat: record keyframes along a driven path, then replay them
//! using only estimates relative to the stored keyframes.

use serde::{Deserialize, Serialize};

use super::trajectory::{leader_pose, TrajectorySpec};
use super::{make_estimator, EstimatorKind, ScenarioError};
use crate::control::{
    formation_cmd, integrate, kf_follow_step, kf_record_step, Gate, KeyframeFilter, Odometry, PdGains, PdState, Twist,
};
use crate::estimator::{NoiseProfile, Observation};
use crate::geometry::Pose;

pub const HOMING_HEADER: &str = "keyframe,arrival_t,arrival_error_m";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomingConfig {
    /// Path driven while teaching.
    pub trajectory: TrajectorySpec,
    pub teach_duration: f64,
    pub estimator: EstimatorKind,
    pub noise: NoiseProfile,
    pub gains: PdGains,
    pub gate: Gate,
    pub fov_deg: f64,
    /// Append a keyframe when the last one is estimated farther than this, metres.
    pub d_kf: f64,
    /// ... or when its position uncertainty exceeds this, metres.
    pub sigma_kf: f64,
    /// A keyframe counts as reached inside this radius, metres.
    pub eps_reach: f64,
    /// Arrival needs the fused keyframe estimate's ‖σ_p‖ at or below this, metres.
    pub arrive_sigma: f64,
    /// Replay gives up after this many seconds.
    pub replay_timeout: f64,
    /// Control period, seconds.
    pub dt: f64,
}

impl Default for HomingConfig {
    fn default() -> Self {
        Self {
            trajectory: TrajectorySpec::rect_dynamic(),
            teach_duration: 40.0,
            estimator: EstimatorKind::Synthetic,
            noise: NoiseProfile::reference(),
            gains: PdGains::default(),
            gate: Gate::default(),
            fov_deg: 120.0,
            d_kf: 1.0,
            sigma_kf: 2.0,
            eps_reach: 0.2,
            arrive_sigma: 0.2,
            replay_timeout: 240.0,
            dt: 1.0 / 15.0,
        }
    }
}

impl HomingConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::Config(m.into()));
        if !(self.teach_duration > 0.0 && self.replay_timeout > 0.0 && self.dt > 0.0) {
            return bad("durations must be positive");
        }
        if !(self.d_kf > 0.0 && self.sigma_kf > 0.0 && self.eps_reach > 0.0 && self.arrive_sigma > 0.0) {
            return bad("keyframe thresholds must be positive");
        }
        self.trajectory.validate().map_err(ScenarioError::Config)?;
        self.gains.validate().map_err(ScenarioError::Config)?;
        self.gate.validate().map_err(ScenarioError::Config)?;
        Ok(())
    }
}

/// A recorded keyframe. The pose is kept for evaluation only; replay sees it
/// only through the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub tick: u64,
    pub pose_truth: Pose,
    /// Estimated distance to the previous keyframe when recorded.
    pub recorded_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomingReport {
    pub keyframes: Vec<Keyframe>,
    /// `(time, true distance to the keyframe)` when it was declared reached;
    /// `None` for keyframes never reached.
    pub arrivals: Vec<Option<(f64, f64)>>,
    pub completed: bool,
    /// Largest distance from the replayed path to the taught path, metres.
    pub max_cross_track: f64,
}

impl HomingReport {
    pub fn max_arrival_error(&self) -> Option<f64> {
        self.arrivals.iter().map(|a| a.map(|(_, e)| e)).try_fold(0.0f64, |m, e| e.map(|e| m.max(e)))
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{HOMING_HEADER}")?;
        for (k, a) in self.arrivals.iter().enumerate() {
            match a {
                Some((t, e)) => writeln!(w, "{k},{t:.6},{e:.6}")?,
                None => writeln!(w, "{k},,")?,
            }
        }
        Ok(())
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let s = if len2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p[0] - a[0] - s * dx).hypot(p[1] - a[1] - s * dy)
}

pub fn run_homing(cfg: &HomingConfig, seed: u64) -> Result<HomingReport, ScenarioError> {
    cfg.validate()?;
    let dt = cfg.dt;
    let mut est = make_estimator(cfg.estimator, cfg.noise, seed);
    let obs = |tick: u64, pose: Pose| Observation::bare(0, tick, pose, cfg.fov_deg);

    // Teach: drive the path, appending keyframes as the last one drifts away.
    // Estimates of the last keyframe are fused while driving, as in replay.
    let teach_ticks = (cfg.teach_duration / dt).round() as u64;
    let mut keyframes: Vec<Keyframe> = Vec::new();
    let mut taught: Vec<[f64; 2]> = Vec::new();
    let mut filter = KeyframeFilter::new(cfg.gate.clone());
    for tick in 0..=teach_ticks {
        let pose = leader_pose(&cfg.trajectory, tick as f64 * dt);
        taught.push([pose.position.x, pose.position.y]);
        let Some(kf) = keyframes.last() else {
            keyframes.push(Keyframe { tick, pose_truth: pose, recorded_distance: 0.0 });
            continue;
        };
        // Teach odometry is exact, so the world frame serves as the odometry frame.
        let e = est.estimate(&obs(tick, pose), &obs(kf.tick, kf.pose_truth))?;
        filter.update(&pose, &e);
        let fe = filter.estimate(&pose, 0).unwrap_or(e);
        if kf_record_step(&fe, cfg.d_kf, cfg.sigma_kf) {
            keyframes.push(Keyframe { tick, pose_truth: pose, recorded_distance: fe.p_hat.norm() });
            filter = KeyframeFilter::new(cfg.gate.clone());
        }
    }

    // Replay from the start of the taught path. Replay ticks are numbered
    // after the teach ticks so estimator draws never repeat.
    let mut pose = keyframes[0].pose_truth;
    let mut odom = Odometry::new(0.0);
    let mut idx = 0usize;
    filter = KeyframeFilter::new(cfg.gate.clone());
    let mut pd = PdState::default();
    let mut arrivals = vec![None; keyframes.len()];
    let mut max_cross_track: f64 = 0.0;
    let replay_ticks = (cfg.replay_timeout / dt).round() as u64;
    let mut completed = false;
    for k in 0..replay_ticks {
        let t = k as f64 * dt;
        let kf = keyframes[idx];
        let e = est.estimate(&obs(teach_ticks + 1 + k, pose), &obs(kf.tick, kf.pose_truth))?;
        // Odometry is relative to the replay start; express it in a frame the
        // filter can hold fixed.
        let here = odom.pose();
        filter.update(&here, &e);
        let Some(fe) = filter.estimate(&here, 0) else {
            continue;
        };
        // Arrival is only decided once the fused estimate is confident;
        // until then the robot keeps driving toward the keyframe.
        let confident = fe.sigma_p_norm() <= cfg.arrive_sigma;
        let (cmd, next, npd) = if confident {
            kf_follow_step(&fe, cfg.eps_reach, idx, keyframes.len(), &pd, dt, &cfg.gains, &cfg.gate)
        } else {
            let (c, s) = formation_cmd(&fe, &Pose::IDENTITY, &pd, dt, &cfg.gains, &cfg.gate, Twist::ZERO);
            (c, idx, s)
        };
        pd = npd;
        let reached = confident && fe.p_hat.planar_norm() < cfg.eps_reach;
        if reached && arrivals[idx].is_none() {
            arrivals[idx] = Some((t, (pose.position - kf.pose_truth.position).planar_norm()));
        }
        if next != idx {
            idx = next;
            filter = KeyframeFilter::new(cfg.gate.clone());
            pd = PdState::default();
        } else if reached && idx + 1 == keyframes.len() {
            completed = true;
            break;
        }
        pose = integrate(&pose, &cmd.twist(), dt, &cfg.gains);
        odom.advance(&cmd.twist(), dt, t + dt, &cfg.gains);
        let p = [pose.position.x, pose.position.y];
        let d = taught.windows(2).map(|w| segment_distance(p, w[0], w[1])).fold(f64::INFINITY, f64::min);
        max_cross_track = max_cross_track.max(d);
    }
    Ok(HomingReport { keyframes, arrivals, completed, max_cross_track })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_replay_hits_every_keyframe() {
        let cfg = HomingConfig { estimator: EstimatorKind::Oracle, ..HomingConfig::default() };
        let r = run_homing(&cfg, 1).unwrap();
        assert!(r.keyframes.len() > 5);
        assert!(r.completed);
        for a in &r.arrivals {
            let (_, e) = a.expect("reached");
            assert!(e < cfg.eps_reach);
        }
    }

    #[test]
    fn keyframes_spaced_by_d_kf() {
        let cfg = HomingConfig { estimator: EstimatorKind::Oracle, ..HomingConfig::default() };
        let r = run_homing(&cfg, 1).unwrap();
        for w in r.keyframes.windows(2) {
            let d = (w[1].pose_truth.position - w[0].pose_truth.position).norm();
            assert!(d > cfg.d_kf && d < cfg.d_kf + 0.1, "{d}");
        }
    }
}
