//! Formation control from relative-pose estimates, and keyframe homing.
//!
//! Robots are holonomic in the plane: a command is a body-frame velocity
//! (x forward, y left) and a yaw rate.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::estimator::{NodeId, PoseEstimate};
use crate::geometry::{wrap_angle, Pose, UnitQuat, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdGains {
    pub kp_pos: f64,
    pub kd_pos: f64,
    pub kp_yaw: f64,
    pub kd_yaw: f64,
    /// m/s, planar speed limit.
    pub v_max: f64,
    /// rad/s.
    pub w_max: f64,
    /// Low-pass weight on the newest error difference in the derivative term.
    pub d_alpha: f64,
}

impl Default for PdGains {
    fn default() -> Self {
        Self { kp_pos: 1.5, kd_pos: 0.3, kp_yaw: 1.5, kd_yaw: 0.3, v_max: 0.8, w_max: 1.5, d_alpha: 0.5 }
    }
}

impl PdGains {
    pub fn validate(&self) -> Result<(), String> {
        let gains = [self.kp_pos, self.kd_pos, self.kp_yaw, self.kd_yaw];
        if gains.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err("gains must be finite and non-negative".into());
        }
        if !(self.v_max > 0.0) || !(self.w_max > 0.0) {
            return Err("v_max and w_max must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.d_alpha) {
            return Err("d_alpha must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Gate {
    /// Metres; ‖σ_p‖ above this stops translation.
    pub tau_p: f64,
    /// Chordal σ_q above this stops rotation.
    pub tau_q: f64,
    /// Scale gains by 1/(1+‖σ_p‖/tau_p) below the gate.
    pub attenuate: bool,
}

impl Default for Gate {
    fn default() -> Self {
        Self { tau_p: 1.5, tau_q: 0.5, attenuate: false }
    }
}

impl Gate {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau_p > 0.0) || !(self.tau_q > 0.0) {
            return Err("gate thresholds must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub v: Vec3,
    pub w: f64,
}

impl Twist {
    pub const ZERO: Twist = Twist { v: Vec3::ZERO, w: 0.0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Command {
    pub v: Vec3,
    pub w: f64,
    pub gated: bool,
}

impl Command {
    pub const STOP: Command = Command { v: Vec3::ZERO, w: 0.0, gated: false };

    pub fn twist(&self) -> Twist {
        Twist { v: self.v, w: self.w }
    }
}

/// Previous error and filtered derivative, owned by one controller.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PdState {
    prev: Option<(Vec3, f64)>,
    d_pos: Vec3,
    d_yaw: f64,
}

/// Pose the robot should move to, in its current ego frame: where it would
/// have to be for the estimate to read `offset_ref`.
pub fn formation_error(est: &PoseEstimate, offset_ref: &Pose) -> (Vec3, f64) {
    let target = est.pose().compose(&offset_ref.inverse());
    let mut p = target.position;
    p.z = 0.0;
    (p, wrap_angle(target.yaw()))
}

fn clamp_planar(v: Vec3, v_max: f64) -> Vec3 {
    let n = v.planar_norm();
    let v = Vec3::new(v.x, v.y, 0.0);
    if n > v_max {
        v * (v_max / n)
    } else {
        v
    }
}

/// One PD step toward holding `offset_ref` (the desired pose of the tracked
/// robot in this robot's frame). `ff` is added before clamping.
pub fn formation_cmd(
    est: &PoseEstimate,
    offset_ref: &Pose,
    state: &PdState,
    dt: f64,
    gains: &PdGains,
    gate: &Gate,
    ff: Twist,
) -> (Command, PdState) {
    let sp = est.sigma_p_norm();
    if sp > gate.tau_p {
        // Hold position and turn toward the tracked robot.
        let bearing = est.p_hat.y.atan2(est.p_hat.x);
        let w = if est.p_hat.planar_norm() > 0.0 { gains.kp_yaw * bearing } else { 0.0 };
        let cmd = Command { v: Vec3::ZERO, w: w.clamp(-gains.w_max, gains.w_max), gated: true };
        return (cmd, PdState::default());
    }
    let (e_p, e_yaw) = formation_error(est, offset_ref);
    let mut next = PdState { prev: Some((e_p, e_yaw)), ..PdState::default() };
    if let Some((pp, py)) = state.prev {
        if dt > 0.0 {
            let a = gains.d_alpha;
            next.d_pos = state.d_pos * (1.0 - a) + (e_p - pp) * (a / dt);
            next.d_yaw = state.d_yaw * (1.0 - a) + wrap_angle(e_yaw - py) * (a / dt);
        }
    }
    let scale = if gate.attenuate { 1.0 / (1.0 + sp / gate.tau_p) } else { 1.0 };
    let v = (e_p * gains.kp_pos + next.d_pos * gains.kd_pos) * scale + ff.v;
    let mut w = (gains.kp_yaw * e_yaw + gains.kd_yaw * next.d_yaw) * scale + ff.w;
    if est.sigma_q > gate.tau_q {
        w = 0.0;
    }
    let cmd = Command { v: clamp_planar(v, gains.v_max), w: w.clamp(-gains.w_max, gains.w_max), gated: false };
    (cmd, next)
}

/// Euler step of the holonomic model, with the command clamped first.
pub fn integrate(pose: &Pose, cmd: &Twist, dt: f64, gains: &PdGains) -> Pose {
    let v = clamp_planar(cmd.v, gains.v_max);
    let w = cmd.w.clamp(-gains.w_max, gains.w_max);
    let yaw = pose.yaw();
    let world_v = UnitQuat::from_yaw(yaw).rotate(v);
    Pose::planar(pose.position.x + world_v.x * dt, pose.position.y + world_v.y * dt, wrap_angle(yaw + w * dt))
}

/// Should the current observation become a new keyframe?
pub fn kf_record_step(est_to_last_kf: &PoseEstimate, d_kf: f64, sigma_kf: f64) -> bool {
    est_to_last_kf.p_hat.norm() > d_kf || est_to_last_kf.sigma_p_norm() > sigma_kf
}

/// Drives toward the current keyframe; `est` is that keyframe's pose in the
/// robot's frame. Returns the command and the index to use next.
#[allow(clippy::too_many_arguments)]
pub fn kf_follow_step(
    est: &PoseEstimate,
    eps_reach: f64,
    kf_index: usize,
    kf_count: usize,
    state: &PdState,
    dt: f64,
    gains: &PdGains,
    gate: &Gate,
) -> (Command, usize, PdState) {
    if est.p_hat.planar_norm() < eps_reach {
        if kf_index + 1 >= kf_count {
            return (Command::STOP, kf_index, PdState::default());
        }
        return (Command::STOP, kf_index + 1, PdState::default());
    }
    let (cmd, next) = formation_cmd(est, &Pose::IDENTITY, state, dt, gains, gate, Twist::ZERO);
    (cmd, kf_index, next)
}

/// Chordal σ to an angle σ in radians.
pub fn chord_sigma_to_angle(sigma_q: f64) -> f64 {
    2.0 * (sigma_q / (2.0 * std::f64::consts::SQRT_2)).min(1.0).asin()
}

pub fn angle_sigma_to_chord(sigma_rad: f64) -> f64 {
    2.0 * std::f64::consts::SQRT_2 * (0.5 * sigma_rad.min(std::f64::consts::PI)).sin()
}

/// Constant-velocity Kalman filter on one coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cv {
    x: [f64; 2],
    p: [[f64; 2]; 2],
}

impl Cv {
    fn new(z: f64, r: f64, vel_var: f64) -> Self {
        Self { x: [z, 0.0], p: [[r, 0.0], [0.0, vel_var]] }
    }

    fn predict(&mut self, dt: f64, q: f64) {
        if dt <= 0.0 {
            return;
        }
        let [x, v] = self.x;
        self.x = [x + v * dt, v];
        let p = self.p;
        let p00 = p[0][0] + dt * (p[1][0] + p[0][1]) + dt * dt * p[1][1];
        let p01 = p[0][1] + dt * p[1][1];
        let p11 = p[1][1];
        let (dt2, dt3) = (dt * dt, dt * dt * dt);
        self.p = [[p00 + q * dt3 / 3.0, p01 + q * dt2 / 2.0], [p01 + q * dt2 / 2.0, p11 + q * dt]];
    }

    /// `innovation` is z minus the predicted position (lets the caller wrap angles).
    fn update(&mut self, innovation: f64, r: f64) {
        let s = self.p[0][0] + r;
        let k0 = self.p[0][0] / s;
        let k1 = self.p[1][0] / s;
        self.x[0] += k0 * innovation;
        self.x[1] += k1 * innovation;
        let p = self.p;
        self.p = [
            [(1.0 - k0) * p[0][0], (1.0 - k0) * p[0][1]],
            [p[1][0] - k1 * p[0][0], p[1][1] - k1 * p[0][1]],
        ];
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Acceleration noise densities for position (m²/s³) and yaw (rad²/s³).
    pub q_pos: f64,
    pub q_yaw: f64,
    /// Seconds without an accepted measurement before the controller gates.
    pub stale_timeout: f64,
    /// Use the tracked velocity as feedforward.
    pub feedforward: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { q_pos: 0.05, q_yaw: 0.2, stale_timeout: 0.5, feedforward: true }
    }
}

/// Planar pose and velocity of another robot in this robot's odometry frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTracker {
    cfg: TrackerConfig,
    axes: Option<[Cv; 2]>,
    yaw: Option<Cv>,
    t: f64,
    last_update: f64,
}

impl TargetTracker {
    pub fn new(cfg: TrackerConfig) -> Self {
        Self { cfg, axes: None, yaw: None, t: 0.0, last_update: f64::NEG_INFINITY }
    }

    pub fn is_initialized(&self) -> bool {
        self.axes.is_some() && self.yaw.is_some()
    }

    pub fn last_update(&self) -> f64 {
        self.last_update
    }

    fn predict_to(&mut self, t: f64) {
        let dt = t - self.t;
        if dt <= 0.0 {
            return;
        }
        if let Some(axes) = self.axes.as_mut() {
            for a in axes.iter_mut() {
                a.predict(dt, self.cfg.q_pos);
            }
        }
        if let Some(y) = self.yaw.as_mut() {
            y.predict(dt, self.cfg.q_yaw);
            y.x[0] = wrap_angle(y.x[0]);
        }
        self.t = t;
    }

    /// Folds in an estimate taken at time `t` while this robot stood at
    /// `odom_at_t`. Components whose σ exceeds the gate are dropped.
    pub fn update(&mut self, t: f64, odom_at_t: &Pose, est: &PoseEstimate, gate: &Gate) {
        if t < self.t {
            // Out of order; the filter only moves forward.
            return;
        }
        let use_pos = est.sigma_p_norm() <= gate.tau_p;
        let use_rot = est.sigma_q <= gate.tau_q;
        if !use_pos && !use_rot {
            return;
        }
        self.predict_to(t);
        let z = odom_at_t.compose(&est.pose());
        let vel_var = 1.0;
        if use_pos {
            let (rx, ry) = (est.sigma_p.x.powi(2), est.sigma_p.y.powi(2));
            // Rotate the measurement variance into the odometry frame.
            let (s, c) = odom_at_t.yaw().sin_cos();
            let r_odo = [c * c * rx + s * s * ry, s * s * rx + c * c * ry];
            match self.axes.as_mut() {
                Some(axes) => {
                    axes[0].update(z.position.x - axes[0].x[0], r_odo[0]);
                    axes[1].update(z.position.y - axes[1].x[0], r_odo[1]);
                }
                None => self.axes = Some([Cv::new(z.position.x, r_odo[0], vel_var), Cv::new(z.position.y, r_odo[1], vel_var)]),
            }
        }
        if use_rot {
            let r = chord_sigma_to_angle(est.sigma_q).powi(2);
            match self.yaw.as_mut() {
                Some(y) => {
                    y.update(wrap_angle(z.yaw() - y.x[0]), r);
                    y.x[0] = wrap_angle(y.x[0]);
                }
                None => self.yaw = Some(Cv::new(z.yaw(), r, vel_var)),
            }
        }
        self.last_update = t;
    }

    /// Predicted target pose and velocity in the odometry frame, with
    /// position and yaw standard deviations.
    pub fn predict(&self, t: f64) -> Option<TrackedTarget> {
        let mut me = self.clone();
        me.predict_to(t);
        let axes = me.axes?;
        let yaw = me.yaw?;
        Some(TrackedTarget {
            pose: Pose::planar(axes[0].x[0], axes[1].x[0], yaw.x[0]),
            velocity: Vec3::new(axes[0].x[1], axes[1].x[1], 0.0),
            yaw_rate: yaw.x[1],
            sigma_xy: [axes[0].p[0][0].sqrt(), axes[1].p[0][0].sqrt()],
            sigma_yaw: yaw.p[0][0].sqrt(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackedTarget {
    pub pose: Pose,
    pub velocity: Vec3,
    pub yaw_rate: f64,
    pub sigma_xy: [f64; 2],
    pub sigma_yaw: f64,
}

/// Dead-reckoned pose from this robot's own commands, with a short history
/// so estimates that arrive late can be placed where the robot was.
#[derive(Debug, Clone)]
pub struct Odometry {
    pose: Pose,
    history: VecDeque<(f64, Pose)>,
    keep: f64,
}

impl Odometry {
    pub fn new(t0: f64) -> Self {
        let mut history = VecDeque::new();
        history.push_back((t0, Pose::IDENTITY));
        Self { pose: Pose::IDENTITY, history, keep: 5.0 }
    }

    pub fn pose(&self) -> Pose {
        self.pose
    }

    pub fn advance(&mut self, cmd: &Twist, dt: f64, t_after: f64, gains: &PdGains) {
        self.pose = integrate(&self.pose, cmd, dt, gains);
        self.history.push_back((t_after, self.pose));
        while self.history.len() > 1 && self.history[0].0 < t_after - self.keep {
            self.history.pop_front();
        }
    }

    /// Pose at the latest recorded time not after `t`.
    pub fn pose_at(&self, t: f64) -> Pose {
        let idx = self.history.partition_point(|&(ti, _)| ti <= t + 1e-9);
        if idx == 0 {
            self.history[0].1
        } else {
            self.history[idx - 1].1
        }
    }
}

/// Follower side of the formation: tracks one leader and produces commands.
#[derive(Debug, Clone)]
pub struct Follower {
    pub node_id: NodeId,
    pub leader: NodeId,
    /// Desired pose of the leader in this follower's frame.
    pub offset_ref: Pose,
    gains: PdGains,
    gate: Gate,
    tracker: TargetTracker,
    odom: Odometry,
    pd: PdState,
    last_bearing: Option<Vec3>,
}

impl Follower {
    pub fn new(node_id: NodeId, leader: NodeId, offset_ref: Pose, gains: PdGains, gate: Gate, tracker: TrackerConfig, t0: f64) -> Self {
        Self {
            node_id,
            leader,
            offset_ref,
            gains,
            gate,
            tracker: TargetTracker::new(tracker),
            odom: Odometry::new(t0),
            pd: PdState::default(),
            last_bearing: None,
        }
    }

    /// An estimate of the leader relative to this robot at time `t_obs`.
    pub fn observe(&mut self, t_obs: f64, est: &PoseEstimate) {
        let odom = self.odom.pose_at(t_obs);
        self.tracker.update(t_obs, &odom, est, &self.gate);
        if est.p_hat.planar_norm() > 0.0 {
            self.last_bearing = Some(odom.rotation.rotate(est.p_hat) + odom.position);
        }
    }

    /// Tracked leader pose in this robot's current frame, as an estimate.
    pub fn tracked_estimate(&self, now: f64) -> Option<(PoseEstimate, TrackedTarget)> {
        let tt = self.tracker.predict(now)?;
        let me = self.odom.pose();
        let rel = crate::geometry::relative_pose(&me, &tt.pose);
        let sp = Vec3::new(tt.sigma_xy[0].max(1e-9), tt.sigma_xy[1].max(1e-9), 1e-9);
        let sq = angle_sigma_to_chord(tt.sigma_yaw).max(1e-9);
        Some((PoseEstimate::from_pose(self.node_id, self.leader, rel, sp, sq), tt))
    }

    pub fn command(&mut self, now: f64, dt: f64) -> Command {
        let fresh = now - self.tracker.last_update() <= self.tracker.cfg.stale_timeout;
        let tracked = self.tracked_estimate(now);
        let Some((est, tt)) = tracked.filter(|_| fresh) else {
            self.pd = PdState::default();
            return self.turn_toward_last_bearing();
        };
        let ff = if self.tracker.cfg.feedforward { self.feedforward(&tt) } else { Twist::ZERO };
        let (cmd, pd) = formation_cmd(&est, &self.offset_ref, &self.pd, dt, &self.gains, &self.gate, ff);
        self.pd = pd;
        cmd
    }

    /// Velocity the follower's target point moves with, in the follower frame.
    fn feedforward(&self, tt: &TrackedTarget) -> Twist {
        let me = self.odom.pose();
        let lever = tt.pose.rotation.rotate(self.offset_ref.inverse().position);
        let omega = Vec3::new(0.0, 0.0, tt.yaw_rate);
        let v_world = tt.velocity + omega.cross(&lever);
        Twist { v: me.rotation.inverse().rotate(v_world), w: tt.yaw_rate }
    }

    fn turn_toward_last_bearing(&self) -> Command {
        let Some(target) = self.last_bearing else {
            return Command { gated: true, ..Command::STOP };
        };
        let me = self.odom.pose();
        let p = me.rotation.inverse().rotate(target - me.position);
        let w = (self.gains.kp_yaw * p.y.atan2(p.x)).clamp(-self.gains.w_max, self.gains.w_max);
        Command { v: Vec3::ZERO, w, gated: true }
    }

    /// Records that `cmd` was executed for `dt`, ending at `t_after`.
    pub fn advance(&mut self, cmd: &Command, dt: f64, t_after: f64) {
        self.odom.advance(&cmd.twist(), dt, t_after, &self.gains);
    }
}

/// Static-target version of the tracker used when homing: fuses repeated
/// estimates of one keyframe in the odometry frame.
#[derive(Debug, Clone)]
pub struct KeyframeFilter {
    mean: Option<(Vec3, f64)>,
    var: (f64, f64),
    gate: Gate,
}

impl KeyframeFilter {
    pub fn new(gate: Gate) -> Self {
        Self { mean: None, var: (f64::INFINITY, f64::INFINITY), gate }
    }

    pub fn update(&mut self, odom: &Pose, est: &PoseEstimate) {
        let z = odom.compose(&est.pose());
        let rp = (est.sigma_p.x.powi(2) + est.sigma_p.y.powi(2)) / 2.0;
        let ry = chord_sigma_to_angle(est.sigma_q).powi(2);
        let use_pos = est.sigma_p_norm() <= self.gate.tau_p;
        let use_rot = est.sigma_q <= self.gate.tau_q;
        let (mut p, mut yaw) = self.mean.unwrap_or((z.position, z.yaw()));
        let (mut vp, mut vy) = self.var;
        if use_pos {
            let k = if vp.is_finite() { vp / (vp + rp) } else { 1.0 };
            p = p + (z.position - p) * k;
            vp = if vp.is_finite() { vp * rp / (vp + rp) } else { rp };
        }
        if use_rot {
            let k = if vy.is_finite() { vy / (vy + ry) } else { 1.0 };
            yaw = wrap_angle(yaw + k * wrap_angle(z.yaw() - yaw));
            vy = if vy.is_finite() { vy * ry / (vy + ry) } else { ry };
        }
        if use_pos || use_rot {
            self.mean = Some((p, yaw));
            self.var = (vp, vy);
        }
    }

    /// Keyframe pose in the robot's current frame, if any estimate was accepted.
    pub fn estimate(&self, odom: &Pose, src: NodeId) -> Option<PoseEstimate> {
        let (p, yaw) = self.mean?;
        let (vp, vy) = self.var;
        let rel = crate::geometry::relative_pose(odom, &Pose::planar(p.x, p.y, yaw));
        let sp = if vp.is_finite() { vp.sqrt().max(1e-9) } else { 1e3 };
        let sq = if vy.is_finite() { angle_sigma_to_chord(vy.sqrt()).max(1e-9) } else { 1e3 };
        Some(PoseEstimate::from_pose(src, src, rel, Vec3::new(sp, sp, 1e-9), sq))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn est(x: f64, y: f64, yaw: f64, sp: f64, sq: f64) -> PoseEstimate {
        PoseEstimate::from_pose(0, 1, Pose::planar(x, y, yaw), Vec3::new(sp, sp, sp), sq)
    }

    #[test]
    fn at_reference_gives_zero_command() {
        let r = Pose::planar(0.0, -1.0, 0.0);
        let (c, _) = formation_cmd(&est(0.0, -1.0, 0.0, 0.01, 0.01), &r, &PdState::default(), 0.1, &PdGains::default(), &Gate::default(), Twist::ZERO);
        assert!(c.v.norm() < 1e-12 && c.w.abs() < 1e-12 && !c.gated);
    }

    #[test]
    fn gated_turns_toward_leader() {
        let (c, _) = formation_cmd(&est(0.0, 1.0, 0.0, 5.0, 0.01), &Pose::IDENTITY, &PdState::default(), 0.1, &PdGains::default(), &Gate::default(), Twist::ZERO);
        assert!(c.gated);
        assert_eq!(c.v, Vec3::ZERO);
        assert!(c.w > 0.0);
    }

    #[test]
    fn clamped_proportional_step() {
        let gains = PdGains { kp_pos: 1.0, kd_pos: 0.0, ..PdGains::default() };
        let (c, _) = formation_cmd(&est(1.0, 0.0, 0.0, 0.01, 0.01), &Pose::IDENTITY, &PdState::default(), 0.1, &gains, &Gate::default(), Twist::ZERO);
        assert!((c.v.x - 0.8).abs() < 1e-12 && c.v.y.abs() < 1e-12 && c.v.z == 0.0);
    }

    #[test]
    fn rotation_gate_zeroes_yaw_rate() {
        let (c, _) = formation_cmd(&est(0.5, 0.0, 0.5, 0.01, 0.9), &Pose::IDENTITY, &PdState::default(), 0.1, &PdGains::default(), &Gate::default(), Twist::ZERO);
        assert_eq!(c.w, 0.0);
        assert!(c.v.x > 0.0);
    }

    #[test]
    fn error_accounts_for_rotation() {
        // Leader straight ahead 1 m, turned 90°; the reference wants it 1 m to
        // the right with equal heading. The follower should end up 1 m to
        // the leader's left side in the leader frame, i.e. at (1, -1) here...
        let r = Pose::planar(0.0, -1.0, 0.0);
        let (p, yaw) = formation_error(&est(1.0, 0.0, FRAC_PI_2, 0.01, 0.01), &r);
        // target = est ∘ r⁻¹ = (1,0,90°) ∘ (0,1,0) = (1 - 1, 0, 90°)
        assert!((p.x - 0.0).abs() < 1e-12 && (p.y - 0.0).abs() < 1e-12, "{p:?}");
        assert!((yaw - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn derivative_uses_filtered_difference() {
        let gains = PdGains { kp_pos: 0.0, kd_pos: 1.0, d_alpha: 0.5, ..PdGains::default() };
        let g = Gate::default();
        let (_, s) = formation_cmd(&est(0.1, 0.0, 0.0, 0.01, 0.01), &Pose::IDENTITY, &PdState::default(), 0.1, &gains, &g, Twist::ZERO);
        let (c, _) = formation_cmd(&est(0.2, 0.0, 0.0, 0.01, 0.01), &Pose::IDENTITY, &s, 0.1, &gains, &g, Twist::ZERO);
        // 0.5 * (0.1 / 0.1)
        assert!((c.v.x - 0.5).abs() < 1e-12);
    }

    #[test]
    fn attenuation_shrinks_command() {
        let g = Gate { attenuate: true, ..Gate::default() };
        let e = est(0.2, 0.0, 0.0, 0.5, 0.01);
        let (a, _) = formation_cmd(&e, &Pose::IDENTITY, &PdState::default(), 0.1, &PdGains::default(), &g, Twist::ZERO);
        let (b, _) = formation_cmd(&e, &Pose::IDENTITY, &PdState::default(), 0.1, &PdGains::default(), &Gate::default(), Twist::ZERO);
        assert!(a.v.x < b.v.x);
    }

    #[test]
    fn keyframe_record_rule() {
        assert!(!kf_record_step(&est(0.0, 0.0, 0.0, 0.01, 0.01), 1.0, 1.0));
        assert!(kf_record_step(&est(1.0 + 1e-9, 0.0, 0.0, 0.01, 0.01), 1.0, 1.0));
        assert!(kf_record_step(&est(0.1, 0.0, 0.0, 1.0, 0.01), 1.0, 1.0));
    }

    #[test]
    fn keyframe_follow_rule() {
        let g = PdGains::default();
        let gate = Gate::default();
        let s = PdState::default();
        let (c, i, _) = kf_follow_step(&est(0.05, 0.0, 0.0, 0.01, 0.01), 0.1, 4, 5, &s, 0.1, &g, &gate);
        assert_eq!((c, i), (Command::STOP, 4));
        let (_, i, _) = kf_follow_step(&est(0.05, 0.0, 0.0, 0.01, 0.01), 0.1, 2, 5, &s, 0.1, &g, &gate);
        assert_eq!(i, 3);
        let (c, i, _) = kf_follow_step(&est(2.0, 0.0, 0.0, 0.01, 0.01), 0.1, 2, 5, &s, 0.1, &g, &gate);
        assert_eq!(i, 2);
        assert!(c.v.x > 0.0);
    }

    #[test]
    fn integrate_moves_in_body_frame() {
        let p = integrate(&Pose::planar(0.0, 0.0, FRAC_PI_2), &Twist { v: Vec3::new(0.5, 0.0, 0.0), w: 0.0 }, 2.0, &PdGains::default());
        assert!(p.position.x.abs() < 1e-12 && (p.position.y - 1.0).abs() < 1e-12);
    }

    #[test]
    fn static_leader_converges() {
        let gains = PdGains::default();
        let gate = Gate::default();
        let leader = Pose::planar(3.0, 2.0, 0.7);
        let mut me = Pose::planar(0.0, 0.0, 0.0);
        let r = Pose::planar(0.0, -1.0, 0.0);
        let mut s = PdState::default();
        let dt = 1.0 / 15.0;
        for _ in 0..150 {
            let rel = crate::geometry::relative_pose(&me, &leader);
            let e = PoseEstimate::from_pose(1, 0, rel, Vec3::new(1e-3, 1e-3, 1e-3), 1e-3);
            let (c, ns) = formation_cmd(&e, &r, &s, dt, &gains, &gate, Twist::ZERO);
            s = ns;
            me = integrate(&me, &c.twist(), dt, &gains);
        }
        let want = leader.compose(&r.inverse());
        assert!((me.position - want.position).planar_norm() < 0.05);
    }

    #[test]
    fn tracker_follows_constant_velocity() {
        let mut tr = TargetTracker::new(TrackerConfig::default());
        let gate = Gate::default();
        for k in 0..60 {
            let t = k as f64 / 15.0;
            let truth = Pose::planar(0.3 * t, 1.0, 0.2 * t);
            let e = PoseEstimate::from_pose(0, 1, truth, Vec3::new(1e-3, 1e-3, 1e-3), 1e-3);
            tr.update(t, &Pose::IDENTITY, &e, &gate);
        }
        let p = tr.predict(4.0).unwrap();
        assert!((p.pose.position.x - 1.2).abs() < 1e-3, "{:?}", p.pose);
        assert!((p.velocity.x - 0.3).abs() < 1e-3);
        assert!((p.yaw_rate - 0.2).abs() < 1e-3);
    }

    #[test]
    fn sigma_conversions_invert() {
        for a in [0.01, 0.3, 1.0, 2.0] {
            assert!((chord_sigma_to_angle(angle_sigma_to_chord(a)) - a).abs() < 1e-12);
        }
    }
}
