//! Flat TOML run configuration. Every key has a default; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use swarmsim_core::control::{Gate, PdGains, TrackerConfig};
use swarmsim_core::estimator::NoiseProfile;
use swarmsim_core::metrics::{FilterConfig, PositiveLabel, ScoreKind};
use swarmsim_core::netproto::{LossAggregate, TdmaConfig};
use swarmsim_core::netsim::Medium;
use swarmsim_core::scenario::dataset::SampleConfig;
use swarmsim_core::scenario::{EstimatorKind, FormationConfig, HeadingMode, HomingConfig, PathKind, TrajectorySpec};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YoudenLabel {
    /// Position error above `bad_estimate_m`.
    PosError,
    Invisible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // Network
    pub n_nodes: u16,
    pub superframe_hz: f64,
    pub payload_bytes: usize,
    pub n_slots: u16,
    pub max_divisor: u32,
    pub high_watermark: f64,
    pub low_watermark: f64,
    pub loss_window: f64,
    pub loss_aggregate: LossAggregate,
    pub heartbeats: bool,
    pub backoff_z: f64,
    pub bitrate: f64,
    pub base_loss: f64,
    pub loss_slope: f64,
    pub propagation: f64,
    pub outage: f64,

    // Estimator
    pub estimator: EstimatorKind,
    pub fov_deg: f64,
    pub median_pos_visible: f64,
    pub median_pos_invisible: f64,
    pub median_rot_visible: f64,
    pub median_rot_invisible: f64,
    pub miscalibration: f64,
    pub scale_spread: f64,

    // Controller
    pub kp_pos: f64,
    pub kd_pos: f64,
    pub kp_yaw: f64,
    pub kd_yaw: f64,
    pub v_max: f64,
    pub w_max: f64,
    pub d_alpha: f64,
    pub tau_p: f64,
    pub tau_q: f64,
    pub attenuate: bool,
    pub q_pos: f64,
    pub q_yaw: f64,
    pub stale_timeout: f64,
    pub feedforward: bool,
    pub follower_distance: f64,

    // Trajectory and run
    pub trajectory: PathKind,
    pub heading: HeadingMode,
    pub period: f64,
    pub amplitude_x: f64,
    pub amplitude_y: f64,
    pub rect_width: f64,
    pub rect_height: f64,
    pub corner_radius: f64,
    pub duration: f64,
    pub transient: f64,
    pub initial_error: f64,

    // Dataset
    pub world_extent: f64,
    pub n_rooms: usize,
    pub n_groups: usize,
    pub n_max: usize,
    pub d_max: f64,
    pub render_observed: bool,
    pub view_range: f64,

    // Metrics
    pub bin_threshold: f32,
    pub youden_label: YoudenLabel,
    pub bad_estimate_m: f64,
    pub uncertainty_score: ScoreKind,
    pub bev_gate_sigma: f64,
    /// Fraction of malformed input lines tolerated before failing.
    pub max_malformed: f64,

    // Homing
    pub teach_duration: f64,
    pub d_kf: f64,
    pub sigma_kf: f64,
    pub eps_reach: f64,
    pub arrive_sigma: f64,
    pub replay_timeout: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tdma = TdmaConfig::default();
        let medium = Medium::default();
        let noise = NoiseProfile::reference();
        let gains = PdGains::default();
        let gate = Gate::default();
        let tracker = TrackerConfig::default();
        let traj = TrajectorySpec::default();
        let form = FormationConfig::default();
        let sample = SampleConfig::default();
        let homing = HomingConfig::default();
        Self {
            seed: 7,
            n_nodes: 4,
            superframe_hz: 15.0,
            payload_bytes: form.payload_bytes,
            n_slots: tdma.n_slots,
            max_divisor: tdma.max_divisor,
            high_watermark: tdma.high_watermark,
            low_watermark: tdma.low_watermark,
            loss_window: tdma.loss_window,
            loss_aggregate: tdma.aggregate,
            heartbeats: tdma.heartbeats,
            backoff_z: tdma.backoff_z,
            bitrate: medium.bitrate,
            base_loss: medium.base_loss,
            loss_slope: medium.loss_slope,
            propagation: medium.propagation,
            outage: 0.0,
            estimator: EstimatorKind::Synthetic,
            fov_deg: form.fov_deg,
            median_pos_visible: noise.median_pos_visible,
            median_pos_invisible: noise.median_pos_invisible,
            median_rot_visible: noise.median_rot_visible,
            median_rot_invisible: noise.median_rot_invisible,
            miscalibration: noise.miscalibration,
            scale_spread: noise.scale_spread,
            kp_pos: gains.kp_pos,
            kd_pos: gains.kd_pos,
            kp_yaw: gains.kp_yaw,
            kd_yaw: gains.kd_yaw,
            v_max: gains.v_max,
            w_max: gains.w_max,
            d_alpha: gains.d_alpha,
            tau_p: gate.tau_p,
            tau_q: gate.tau_q,
            attenuate: gate.attenuate,
            q_pos: tracker.q_pos,
            q_yaw: tracker.q_yaw,
            stale_timeout: tracker.stale_timeout,
            feedforward: tracker.feedforward,
            follower_distance: 1.0,
            trajectory: traj.kind,
            heading: traj.heading,
            period: traj.period,
            amplitude_x: traj.amplitude_x,
            amplitude_y: traj.amplitude_y,
            rect_width: traj.rect_width,
            rect_height: traj.rect_height,
            corner_radius: traj.corner_radius,
            duration: form.duration,
            transient: form.transient,
            initial_error: form.initial_error,
            world_extent: 14.0,
            n_rooms: 6,
            n_groups: 1000,
            n_max: sample.n_max,
            d_max: sample.d_max,
            render_observed: true,
            view_range: sample.view_range,
            bin_threshold: swarmsim_core::metrics::DEFAULT_BIN_THRESHOLD,
            youden_label: YoudenLabel::PosError,
            bad_estimate_m: swarmsim_core::metrics::DEFAULT_BAD_ESTIMATE_M,
            uncertainty_score: ScoreKind::Norm,
            bev_gate_sigma: swarmsim_core::bev::DEFAULT_GATE_SIGMA,
            max_malformed: 0.01,
            teach_duration: homing.teach_duration,
            d_kf: homing.d_kf,
            sigma_kf: homing.sigma_kf,
            eps_reach: homing.eps_reach,
            arrive_sigma: homing.arrive_sigma,
            replay_timeout: homing.replay_timeout,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads `path`, or the defaults when no path is given. A missing or
    /// unreadable config file is a configuration error.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(self.superframe_hz > 0.0 && self.superframe_hz.is_finite()) {
            return bad("superframe_hz must be positive".into());
        }
        if self.n_nodes == 0 {
            return bad("n_nodes must be positive".into());
        }
        if !(self.follower_distance > 0.0) {
            return bad("follower_distance must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.max_malformed) {
            return bad("max_malformed must lie in [0, 1]".into());
        }
        self.noise_valid()?;
        self.tdma().validate().map_err(CliError::Config)?;
        self.medium().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.formation().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.homing().validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn tdma(&self) -> TdmaConfig {
        TdmaConfig {
            n_slots: self.n_slots,
            superframe_period: 1.0 / self.superframe_hz,
            max_divisor: self.max_divisor,
            high_watermark: self.high_watermark,
            low_watermark: self.low_watermark,
            loss_window: self.loss_window,
            aggregate: self.loss_aggregate,
            heartbeats: self.heartbeats,
            backoff_z: self.backoff_z,
            ..TdmaConfig::default()
        }
    }

    pub fn medium(&self) -> Medium {
        Medium { bitrate: self.bitrate, base_loss: self.base_loss, loss_slope: self.loss_slope, propagation: self.propagation }
    }

    pub fn noise(&self) -> NoiseProfile {
        NoiseProfile {
            median_pos_visible: self.median_pos_visible,
            median_pos_invisible: self.median_pos_invisible,
            median_rot_visible: self.median_rot_visible,
            median_rot_invisible: self.median_rot_invisible,
            miscalibration: self.miscalibration,
            scale_spread: self.scale_spread,
        }
    }

    pub fn noise_valid(&self) -> Result<(), CliError> {
        let n = self.noise();
        let meds = [n.median_pos_visible, n.median_pos_invisible, n.median_rot_visible, n.median_rot_invisible];
        if meds.iter().any(|m| !(*m > 0.0)) || !(n.miscalibration > 0.0) || !(n.scale_spread >= 0.0) {
            return Err(CliError::Config("noise medians and miscalibration must be positive".into()));
        }
        Ok(())
    }

    pub fn gains(&self) -> PdGains {
        PdGains {
            kp_pos: self.kp_pos,
            kd_pos: self.kd_pos,
            kp_yaw: self.kp_yaw,
            kd_yaw: self.kd_yaw,
            v_max: self.v_max,
            w_max: self.w_max,
            d_alpha: self.d_alpha,
        }
    }

    pub fn gate(&self) -> Gate {
        Gate { tau_p: self.tau_p, tau_q: self.tau_q, attenuate: self.attenuate }
    }

    pub fn trajectory_spec(&self) -> TrajectorySpec {
        TrajectorySpec {
            kind: self.trajectory,
            heading: self.heading,
            period: self.period,
            amplitude_x: self.amplitude_x,
            amplitude_y: self.amplitude_y,
            rect_width: self.rect_width,
            rect_height: self.rect_height,
            corner_radius: self.corner_radius,
        }
    }

    pub fn formation(&self) -> FormationConfig {
        let d = self.follower_distance;
        FormationConfig {
            trajectory: self.trajectory_spec(),
            estimator: self.estimator,
            noise: self.noise(),
            medium: self.medium(),
            tdma: self.tdma(),
            payload_bytes: self.payload_bytes,
            outage: self.outage,
            gains: self.gains(),
            gate: self.gate(),
            tracker: TrackerConfig {
                q_pos: self.q_pos,
                q_yaw: self.q_yaw,
                stale_timeout: self.stale_timeout,
                feedforward: self.feedforward,
            },
            offsets: vec![[0.0, d], [0.0, -d]],
            fov_deg: self.fov_deg,
            duration: self.duration,
            transient: self.transient,
            initial_error: self.initial_error,
            keep_net_log: false,
        }
    }

    pub fn homing(&self) -> HomingConfig {
        HomingConfig {
            trajectory: self.trajectory_spec(),
            teach_duration: self.teach_duration,
            estimator: self.estimator,
            noise: self.noise(),
            gains: self.gains(),
            gate: self.gate(),
            fov_deg: self.fov_deg,
            d_kf: self.d_kf,
            sigma_kf: self.sigma_kf,
            eps_reach: self.eps_reach,
            arrive_sigma: self.arrive_sigma,
            replay_timeout: self.replay_timeout,
            dt: 1.0 / self.superframe_hz,
        }
    }

    pub fn sample(&self) -> SampleConfig {
        SampleConfig {
            n_max: self.n_max,
            d_max: self.d_max,
            fov_deg: self.fov_deg,
            render_observed: self.render_observed,
            view_range: self.view_range,
        }
    }

    pub fn filter(&self) -> FilterConfig {
        FilterConfig {
            score: self.uncertainty_score,
            label: match self.youden_label {
                YoudenLabel::PosError => PositiveLabel::PosErrorAbove(self.bad_estimate_m),
                YoudenLabel::Invisible => PositiveLabel::Invisible,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 3"), Err(CliError::Config(_))));
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_toml("seed = 11\ntrajectory = \"rect\"").unwrap();
        assert_eq!(c.seed, 11);
        assert_eq!(c.trajectory, PathKind::Rect);
        assert_eq!(c.kp_pos, RunConfig::default().kp_pos);
    }

    #[test]
    fn invalid_values_rejected() {
        let c = RunConfig { max_divisor: 6, ..RunConfig::default() };
        assert!(c.validate().is_err());
        let c = RunConfig { duration: 0.0, ..RunConfig::default() };
        assert!(c.validate().is_err());
    }
}
