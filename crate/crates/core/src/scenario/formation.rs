//! Leader/follower formation run: trajectories, TDMA exchange of embeddings,
//! per-pair estimation, tracking and control, closed in simulation.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::trajectory::{leader_pose, TrajectorySpec};
use super::{make_estimator, EstimatorKind, ScenarioError};
use crate::control::{Command, Follower, Gate, PdGains, TrackerConfig, Twist};
use crate::estimator::{NodeId, NoiseProfile, Observation, PoseEstimate};
use crate::geometry::{relative_pose, wrap_angle, Pose};
use crate::metrics::median;
use crate::netproto::{Frame, TdmaConfig};
use crate::netsim::{Application, Medium, Simulator, World};

pub const RUNLOG_SCHEMA: &str = "swarmsim.runlog/1";
pub const SUMMARY_HEADER: &str = "node_id,mean_abs_pos_m,median_pos_m,mean_abs_rot_deg,median_rot_deg,mean_vel_mps";
pub const LEADER: NodeId = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FormationConfig {
    pub trajectory: TrajectorySpec,
    pub estimator: EstimatorKind,
    pub noise: NoiseProfile,
    pub medium: Medium,
    pub tdma: TdmaConfig,
    pub payload_bytes: usize,
    /// Extra application-level drop probability on top of the medium, in [0, 1].
    pub outage: f64,
    pub gains: PdGains,
    pub gate: Gate,
    pub tracker: TrackerConfig,
    /// Follower positions in the leader frame, metres.
    pub offsets: Vec<[f64; 2]>,
    pub fov_deg: f64,
    pub duration: f64,
    /// Seconds excluded from the summary.
    pub transient: f64,
    /// Followers start this far behind their formation slot, metres.
    pub initial_error: f64,
    /// Keep the netsim event log in the output.
    pub keep_net_log: bool,
}

impl Default for FormationConfig {
    fn default() -> Self {
        Self {
            trajectory: TrajectorySpec::default(),
            estimator: EstimatorKind::Synthetic,
            noise: NoiseProfile::reference(),
            medium: Medium::default(),
            tdma: TdmaConfig::default(),
            payload_bytes: crate::estimator::DEFAULT_EMBEDDING_BYTES,
            outage: 0.0,
            gains: PdGains::default(),
            gate: Gate::default(),
            tracker: TrackerConfig::default(),
            offsets: vec![[0.0, 1.0], [0.0, -1.0]],
            fov_deg: 120.0,
            duration: 120.0,
            transient: 10.0,
            initial_error: 0.5,
            keep_net_log: false,
        }
    }
}

impl FormationConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::Config(m.into()));
        if !(self.duration > 0.0) {
            return bad("duration must be positive");
        }
        if !(self.transient >= 0.0) {
            return bad("transient must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.outage) {
            return bad("outage must lie in [0, 1]");
        }
        if self.offsets.is_empty() {
            return bad("need at least one follower");
        }
        if !(self.fov_deg > 0.0 && self.fov_deg <= 360.0) {
            return bad("fov_deg must lie in (0, 360]");
        }
        self.trajectory.validate().map_err(ScenarioError::Config)?;
        self.gains.validate().map_err(ScenarioError::Config)?;
        self.gate.validate().map_err(ScenarioError::Config)?;
        self.world().validate()?;
        Ok(())
    }

    fn world(&self) -> World {
        World::new(1 + self.offsets.len() as u16, self.medium.clone(), self.tdma.clone(), self.payload_bytes)
    }

    /// Desired pose of the leader in a follower's frame for offset `o`.
    pub fn offset_ref(o: [f64; 2]) -> Pose {
        Pose::planar(-o[0], -o[1], 0.0)
    }
}

/// An estimate as consumed by a follower, with the truth it estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoggedEstimate {
    /// Time the estimated observations were taken.
    pub t_obs: f64,
    pub truth: Pose,
    #[serde(flatten)]
    pub est: PoseEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub t: f64,
    pub node_id: NodeId,
    pub pose_truth: Pose,
    pub fov_deg: f64,
    pub estimates: Vec<LoggedEstimate>,
    pub cmd: Twist,
    pub gated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FollowerSummary {
    pub node_id: NodeId,
    pub mean_abs_pos_m: f64,
    pub median_pos_m: f64,
    pub mean_abs_rot_deg: f64,
    pub median_rot_deg: f64,
    pub mean_vel_mps: f64,
}

#[derive(Debug, Clone)]
pub struct RunLog {
    pub records: Vec<RunRecord>,
    pub summary: Vec<FollowerSummary>,
    pub net_log: Option<Vec<u8>>,
}

impl RunLog {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{{\"schema\":\"{RUNLOG_SCHEMA}\"}}")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        buf
    }

    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{SUMMARY_HEADER}")?;
        for s in &self.summary {
            writeln!(
                w,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                s.node_id, s.mean_abs_pos_m, s.median_pos_m, s.mean_abs_rot_deg, s.median_rot_deg, s.mean_vel_mps
            )?;
        }
        Ok(())
    }

    pub fn follower(&self, id: NodeId) -> Option<&FollowerSummary> {
        self.summary.iter().find(|s| s.node_id == id)
    }
}

/// Embedding stand-in: the tick and sender in the first bytes, zero padding.
fn embedding(node: NodeId, tick: u64, bytes: usize) -> Arc<[u8]> {
    let mut v = vec![0u8; bytes.max(10)];
    v[..8].copy_from_slice(&tick.to_le_bytes());
    v[8..10].copy_from_slice(&node.to_le_bytes());
    v.truncate(bytes.max(10));
    v.into()
}

fn embedding_tick(payload: &[u8]) -> Option<u64> {
    payload.get(..8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
}

struct Exchange {
    payload_bytes: usize,
    outage: f64,
    rng: ChaCha8Rng,
    /// (receiver, sender, tick the embedding was taken)
    inbox: Vec<(NodeId, NodeId, u64)>,
}

impl Application for Exchange {
    fn payload(&mut self, node: NodeId, superframe: u64, _now: f64) -> Arc<[u8]> {
        embedding(node, superframe, self.payload_bytes)
    }

    fn on_deliver(&mut self, rx: NodeId, frame: &Frame, _now: f64) {
        if self.outage > 0.0 && self.rng.random::<f64>() < self.outage {
            return;
        }
        if let Some(tick) = embedding_tick(&frame.payload) {
            self.inbox.push((rx, frame.node_id, tick));
        }
    }
}

/// Runs the formation experiment. Identical `(cfg, seed)` give identical logs.
pub fn run_formation(cfg: &FormationConfig, seed: u64) -> Result<RunLog, ScenarioError> {
    cfg.validate()?;
    let dt = cfg.tdma.superframe_period;
    let mut sim = Simulator::new(cfg.world(), seed)?;
    if cfg.keep_net_log {
        sim.enable_log();
    }
    let mut app = Exchange {
        payload_bytes: cfg.payload_bytes,
        outage: cfg.outage,
        rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6f75_7461_6765),
        inbox: Vec::new(),
    };
    let mut estimator = make_estimator(cfg.estimator, cfg.noise, seed);

    let leader0 = leader_pose(&cfg.trajectory, 0.0);
    let mut followers: Vec<Follower> = Vec::new();
    let mut truth: BTreeMap<NodeId, Pose> = BTreeMap::new();
    truth.insert(LEADER, leader0);
    for (k, o) in cfg.offsets.iter().enumerate() {
        let id = (k + 1) as NodeId;
        let slot = leader0.compose(&Pose::planar(o[0], o[1], 0.0));
        truth.insert(id, slot.compose(&Pose::planar(-cfg.initial_error, 0.0, 0.0)));
        followers.push(Follower::new(
            id,
            LEADER,
            FormationConfig::offset_ref(*o),
            cfg.gains.clone(),
            cfg.gate.clone(),
            cfg.tracker.clone(),
            0.0,
        ));
    }
    // Truth per tick, for rendering observations of past ticks.
    let mut history: Vec<BTreeMap<NodeId, Pose>> = Vec::new();
    let mut records = Vec::new();
    let n_ticks = (cfg.duration / dt).round() as u64;
    for tick in 0..n_ticks {
        let t = tick as f64 * dt;
        history.push(truth.clone());

        let mut consumed: BTreeMap<NodeId, Vec<LoggedEstimate>> = BTreeMap::new();
        for (rx, src, obs_tick) in std::mem::take(&mut app.inbox) {
            let Some(f) = followers.iter_mut().find(|f| f.node_id == rx) else { continue };
            if src != f.leader || obs_tick >= tick {
                continue;
            }
            let past = &history[obs_tick as usize];
            let obs_f = Observation::new(rx, obs_tick, past[&rx], cfg.fov_deg, embedding(rx, obs_tick, 0));
            let obs_l = Observation::new(src, obs_tick, past[&src], cfg.fov_deg, embedding(src, obs_tick, 0));
            let est = estimator.estimate(&obs_f, &obs_l)?;
            let t_obs = obs_tick as f64 * dt;
            f.observe(t_obs, &est);
            consumed.entry(rx).or_default().push(LoggedEstimate {
                t_obs,
                truth: relative_pose(&past[&rx], &past[&src]),
                est,
            });
        }

        let leader_next = leader_pose(&cfg.trajectory, t + dt);
        let leader_now = truth[&LEADER];
        let lv = leader_now.rotation.inverse().rotate(leader_next.position - leader_now.position) * (1.0 / dt);
        let lw = wrap_angle(leader_next.yaw() - leader_now.yaw()) / dt;
        records.push(RunRecord {
            t,
            node_id: LEADER,
            pose_truth: leader_now,
            fov_deg: cfg.fov_deg,
            estimates: Vec::new(),
            cmd: Twist { v: lv, w: lw },
            gated: false,
        });
        let mut cmds: Vec<Command> = Vec::with_capacity(followers.len());
        for f in followers.iter_mut() {
            let cmd = f.command(t, dt);
            records.push(RunRecord {
                t,
                node_id: f.node_id,
                pose_truth: truth[&f.node_id],
                fov_deg: cfg.fov_deg,
                estimates: consumed.remove(&f.node_id).unwrap_or_default(),
                cmd: cmd.twist(),
                gated: cmd.gated,
            });
            cmds.push(cmd);
        }

        sim.run_superframe(&mut app);

        truth.insert(LEADER, leader_next);
        for (f, cmd) in followers.iter_mut().zip(&cmds) {
            let p = truth[&f.node_id];
            truth.insert(f.node_id, crate::control::integrate(&p, &cmd.twist(), dt, &cfg.gains));
            f.advance(cmd, dt, t + dt);
        }
    }

    let summary = summarize(&records, cfg, dt);
    let net_log = cfg.keep_net_log.then(|| sim.take_log());
    Ok(RunLog { records, summary, net_log })
}

/// Tracking error of each follower against its formation slot, after the transient.
fn summarize(records: &[RunRecord], cfg: &FormationConfig, dt: f64) -> Vec<FollowerSummary> {
    let mut leader_at: BTreeMap<u64, Pose> = BTreeMap::new();
    for r in records.iter().filter(|r| r.node_id == LEADER) {
        leader_at.insert((r.t / dt).round() as u64, r.pose_truth);
    }
    let mut out = Vec::new();
    for (k, o) in cfg.offsets.iter().enumerate() {
        let id = (k + 1) as NodeId;
        let mine: Vec<&RunRecord> = records.iter().filter(|r| r.node_id == id).collect();
        let (mut pos, mut rot, mut vel) = (Vec::new(), Vec::new(), Vec::new());
        for (i, r) in mine.iter().enumerate() {
            if r.t < cfg.transient {
                continue;
            }
            let leader = leader_at[&((r.t / dt).round() as u64)];
            let slot = leader.compose(&Pose::planar(o[0], o[1], 0.0));
            pos.push((r.pose_truth.position - slot.position).planar_norm());
            rot.push(wrap_angle(r.pose_truth.yaw() - leader.yaw()).abs().to_degrees());
            if let Some(next) = mine.get(i + 1) {
                vel.push((next.pose_truth.position - r.pose_truth.position).planar_norm() / dt);
            }
        }
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        out.push(FollowerSummary {
            node_id: id,
            mean_abs_pos_m: mean(&pos),
            median_pos_m: median(&mut pos.clone()).unwrap_or(f64::NAN),
            mean_abs_rot_deg: mean(&rot),
            median_rot_deg: median(&mut rot.clone()).unwrap_or(f64::NAN),
            mean_vel_mps: mean(&vel),
        });
    }
    out
}
