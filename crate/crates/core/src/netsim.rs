//! Discrete-event simulation of a shared, lossy broadcast medium carrying
//! TDMA-scheduled frames.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::io::{self, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::NodeId;
use crate::netproto::frame::{self, encoded_len, Frame, MsgType};
use crate::netproto::tdma::{msg_name, Scheduler, TdmaConfig};

/// Two transmissions touching for less than this long do not collide. Only
/// there to absorb rounding when one slot ends exactly where the next begins.
pub const COLLISION_GUARD: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum NetsimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Medium {
    /// Bits per second.
    pub bitrate: f64,
    pub base_loss: f64,
    /// Extra loss per node beyond two.
    pub loss_slope: f64,
    /// Seconds.
    pub propagation: f64,
}

impl Default for Medium {
    fn default() -> Self {
        Self { bitrate: 6e6, base_loss: 0.03, loss_slope: 0.01, propagation: 0.0 }
    }
}

impl Medium {
    pub fn lossless() -> Self {
        Self { base_loss: 0.0, loss_slope: 0.0, ..Self::default() }
    }

    pub fn airtime(&self, bytes: usize) -> f64 {
        (bytes * 8) as f64 / self.bitrate
    }

    pub fn validate(&self) -> Result<(), NetsimError> {
        if !(self.bitrate > 0.0 && self.bitrate.is_finite()) {
            return Err(NetsimError::Config("bitrate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.base_loss) || !(0.0..1.0).contains(&self.loss_slope) {
            return Err(NetsimError::Config("loss probabilities must lie in [0, 1)".into()));
        }
        if !(self.propagation >= 0.0 && self.propagation.is_finite()) {
            return Err(NetsimError::Config("propagation must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-receiver drop probability with `n_nodes` participants.
pub fn loss_probability(medium: &Medium, n_nodes: usize) -> f64 {
    let extra = n_nodes.saturating_sub(2) as f64;
    (medium.base_loss + medium.loss_slope * extra).min(0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    /// Seconds; the node takes part from the first superframe at or after this.
    #[serde(default)]
    pub join: f64,
    #[serde(default)]
    pub leave: Option<f64>,
}

impl NodeSpec {
    pub fn always(id: NodeId) -> Self {
        Self { id, join: 0.0, leave: None }
    }

    fn active_at(&self, t: f64) -> bool {
        t >= self.join && self.leave.is_none_or(|l| t < l)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub medium: Medium,
    pub tdma: TdmaConfig,
    pub nodes: Vec<NodeSpec>,
    pub payload_bytes: usize,
}

impl World {
    pub fn new(n_nodes: u16, medium: Medium, tdma: TdmaConfig, payload_bytes: usize) -> Self {
        let nodes = (0..n_nodes).map(NodeSpec::always).collect();
        Self { medium, tdma, nodes, payload_bytes }
    }

    pub fn validate(&self) -> Result<(), NetsimError> {
        self.medium.validate()?;
        self.tdma.validate().map_err(NetsimError::Config)?;
        if self.payload_bytes > frame::MAX_PAYLOAD {
            return Err(NetsimError::Config(format!("payload_bytes exceeds {}", frame::MAX_PAYLOAD)));
        }
        let mut ids: Vec<_> = self.nodes.iter().map(|n| n.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.nodes.len() {
            return Err(NetsimError::Config("duplicate node ids".into()));
        }
        Ok(())
    }
}

/// Node-side hooks. Everything a node learns from the network arrives
/// through `on_deliver`.
pub trait Application {
    fn payload(&mut self, node: NodeId, superframe: u64, now: f64) -> Arc<[u8]>;
    fn on_deliver(&mut self, rx: NodeId, frame: &Frame, now: f64);
}

/// Sends the same opaque payload forever and ignores deliveries.
#[derive(Debug, Clone)]
pub struct FixedPayload(pub Arc<[u8]>);

impl FixedPayload {
    pub fn zeros(bytes: usize) -> Self {
        Self(Arc::from(vec![0u8; bytes]))
    }
}

impl Application for FixedPayload {
    fn payload(&mut self, _: NodeId, _: u64, _: f64) -> Arc<[u8]> {
        self.0.clone()
    }
    fn on_deliver(&mut self, _: NodeId, _: &Frame, _: f64) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Rank {
    TxEnd,
    Deliver,
    Tick,
    TxStart,
}

#[derive(Debug, Clone)]
enum Body {
    Tick(u64),
    TxStart(Arc<Frame>),
    TxEnd(u64),
    Deliver { rx: NodeId, frame: Arc<Frame> },
}

#[derive(Debug, Clone)]
struct Event {
    time: f64,
    rank: Rank,
    node: NodeId,
    seq: u32,
    ctr: u64,
    body: Body,
}

impl Event {
    fn key(&self) -> (Rank, NodeId, u32, u64) {
        (self.rank, self.node, self.seq, self.ctr)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then_with(|| self.key().cmp(&other.key()))
    }
}

/// One event-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Tick { t: f64, k: u64, divisors: Vec<(NodeId, u32)> },
    TxStart { t: f64, node: NodeId, seq: u32, msg: String, bytes: usize },
    TxEnd { t: f64, node: NodeId, seq: u32, msg: String, collided: bool },
    Deliver { t: f64, node: NodeId, rx: NodeId, seq: u32, msg: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub node_id: NodeId,
    /// Data frames sent.
    pub frames_tx: u64,
    pub heartbeats_tx: u64,
    /// Data frames received.
    pub frames_rx: u64,
    /// Own frames (any type) destroyed by overlap.
    pub collisions: u64,
    /// Receiver copies of own data frames that were due / that arrived.
    pub expected_rx: u64,
    pub delivered_rx: u64,
    divisor_sum: u64,
    ticks: u64,
}

impl NodeStats {
    pub fn loss_rate(&self) -> f64 {
        if self.expected_rx == 0 {
            0.0
        } else {
            1.0 - self.delivered_rx as f64 / self.expected_rx as f64
        }
    }

    pub fn mean_divisor(&self) -> f64 {
        if self.ticks == 0 {
            0.0
        } else {
            self.divisor_sum as f64 / self.ticks as f64
        }
    }
}

/// Data-frame outcome counts for frames sent in one superframe.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SuperframeStats {
    pub frames: u64,
    pub expected_rx: u64,
    pub delivered_rx: u64,
    pub collided: u64,
}

struct InFlight {
    id: u64,
    frame: Arc<Frame>,
    end: f64,
    collided: bool,
}

struct NodeState {
    spec: NodeSpec,
    sched: Scheduler,
    active: bool,
    stats: NodeStats,
}

pub struct Simulator {
    world: World,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<Event>>,
    nodes: BTreeMap<NodeId, NodeState>,
    in_flight: Vec<InFlight>,
    next_tx_id: u64,
    ctr: u64,
    next_k: u64,
    now: f64,
    series: Vec<SuperframeStats>,
    log: Option<Vec<u8>>,
    capture: Option<Vec<u8>>,
    divisor_trace: Vec<(f64, NodeId, u32)>,
}

impl Simulator {
    pub fn new(world: World, seed: u64) -> Result<Self, NetsimError> {
        world.validate()?;
        let nodes = world
            .nodes
            .iter()
            .map(|spec| {
                let state = NodeState {
                    spec: spec.clone(),
                    sched: Scheduler::new(spec.id, world.tdma.clone()),
                    active: false,
                    stats: NodeStats { node_id: spec.id, ..NodeStats::default() },
                };
                (spec.id, state)
            })
            .collect();
        Ok(Self {
            world,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: BinaryHeap::new(),
            nodes,
            in_flight: Vec::new(),
            next_tx_id: 0,
            ctr: 0,
            next_k: 0,
            now: 0.0,
            series: Vec::new(),
            log: None,
            capture: None,
            divisor_trace: Vec::new(),
        })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn enable_log(&mut self) {
        self.log.get_or_insert_with(Vec::new);
    }

    /// Also record every transmitted frame, encoded, as capture JSONL.
    pub fn enable_capture(&mut self) {
        self.capture.get_or_insert_with(Vec::new);
    }

    /// Drains the event log written so far.
    pub fn take_log(&mut self) -> Vec<u8> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn take_capture(&mut self) -> Vec<u8> {
        self.capture.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    /// Index of the next superframe `run_superframe` will start.
    pub fn next_superframe(&self) -> u64 {
        self.next_k
    }

    pub fn superframe_start(&self, k: u64) -> f64 {
        k as f64 * self.world.tdma.superframe_period
    }

    pub fn scheduler(&self, id: NodeId) -> Option<&Scheduler> {
        self.nodes.get(&id).map(|n| &n.sched)
    }

    pub fn scheduler_mut(&mut self, id: NodeId) -> Option<&mut Scheduler> {
        self.nodes.get_mut(&id).map(|n| &mut n.sched)
    }

    pub fn stats(&self) -> Vec<NodeStats> {
        self.nodes.values().map(|n| n.stats.clone()).collect()
    }

    pub fn superframe_stats(&self) -> &[SuperframeStats] {
        &self.series
    }

    /// `(time, node, new divisor)` for every rate change.
    pub fn divisor_trace(&self) -> &[(f64, NodeId, u32)] {
        &self.divisor_trace
    }

    /// Data loss over frames sent in superframes `[k0, k1)`, all nodes pooled.
    pub fn loss_between(&self, k0: u64, k1: u64) -> Option<f64> {
        let hi = (k1 as usize).min(self.series.len());
        let lo = (k0 as usize).min(hi);
        let (e, d) = self.series[lo..hi]
            .iter()
            .fold((0u64, 0u64), |(e, d), s| (e + s.expected_rx, d + s.delivered_rx));
        (e > 0).then(|| 1.0 - d as f64 / e as f64)
    }

    fn push(&mut self, time: f64, rank: Rank, node: NodeId, seq: u32, body: Body) {
        self.ctr += 1;
        self.queue.push(Reverse(Event { time, rank, node, seq, ctr: self.ctr, body }));
    }

    fn emit(&mut self, rec: LogRecord) {
        if let Some(buf) = self.log.as_mut() {
            serde_json::to_writer(&mut *buf, &rec).expect("log record serializes");
            buf.push(b'\n');
        }
    }

    /// Starts superframe `k = next_superframe()` and processes every event
    /// before the start of the following one.
    pub fn run_superframe<A: Application + ?Sized>(&mut self, app: &mut A) {
        let k = self.next_k;
        self.next_k += 1;
        let t = self.superframe_start(k);
        self.push(t, Rank::Tick, 0, 0, Body::Tick(k));
        let end = self.superframe_start(k + 1);
        self.process_until(end, app);
    }

    /// Runs whole superframes while their start is before `t_end`.
    pub fn run_until<A: Application + ?Sized>(&mut self, t_end: f64, app: &mut A) {
        while self.superframe_start(self.next_k) < t_end {
            self.run_superframe(app);
        }
    }

    /// Processes all remaining events (transmissions in progress finish).
    pub fn drain<A: Application + ?Sized>(&mut self, app: &mut A) {
        self.process_until(f64::INFINITY, app);
    }

    fn process_until<A: Application + ?Sized>(&mut self, end: f64, app: &mut A) {
        while let Some(Reverse(ev)) = self.queue.peek() {
            if ev.time >= end {
                break;
            }
            let Reverse(ev) = self.queue.pop().unwrap();
            self.now = ev.time;
            match ev.body {
                Body::Tick(k) => self.on_tick(k, ev.time, app),
                Body::TxStart(f) => self.on_tx_start(f, ev.time),
                Body::TxEnd(id) => self.on_tx_end(id, ev.time),
                Body::Deliver { rx, frame } => self.on_deliver(rx, frame, ev.time, app),
            }
        }
    }

    fn on_tick<A: Application + ?Sized>(&mut self, k: u64, t: f64, app: &mut A) {
        let mut divisors = Vec::new();
        let mut starts = Vec::new();
        let heartbeats = self.world.tdma.heartbeats;
        for (id, n) in self.nodes.iter_mut() {
            n.active = n.spec.active_at(t);
            if !n.active {
                continue;
            }
            if let Some(d) = n.sched.adapt_rate(t) {
                self.divisor_trace.push((t, *id, d));
            }
            let div = n.sched.tx_divisor();
            divisors.push((*id, div));
            n.stats.divisor_sum += u64::from(div);
            n.stats.ticks += 1;
            if n.sched.is_tx_superframe(k) {
                let payload = app.payload(*id, k, t);
                let f = n.sched.data_frame(k as u32, payload);
                starts.push((t + n.sched.slot_offset(), f));
            }
            if heartbeats {
                let f = n.sched.heartbeat_frame(k as u32);
                starts.push((t + n.sched.heartbeat_offset(), f));
            }
        }
        self.emit(LogRecord::Tick { t, k, divisors });
        for (ts, f) in starts {
            let (node, seq) = (f.node_id, f.seq);
            self.push(ts, Rank::TxStart, node, seq, Body::TxStart(Arc::new(f)));
        }
    }

    fn on_tx_start(&mut self, f: Arc<Frame>, t: f64) {
        let bytes = encoded_len(f.payload.len());
        let end = t + self.world.medium.airtime(bytes);
        let mut collided = false;
        for other in self.in_flight.iter_mut() {
            if other.end - t > COLLISION_GUARD {
                other.collided = true;
                collided = true;
            }
        }
        if let Some(buf) = self.capture.as_mut() {
            let wire = frame::encode(&f).expect("scheduled frames are valid");
            frame::write_capture(&mut *buf, t, &wire).expect("writing to memory");
        }
        let id = self.next_tx_id;
        self.next_tx_id += 1;
        let (node, seq, msg) = (f.node_id, f.seq, msg_name(f.msg_type).to_string());
        self.in_flight.push(InFlight { id, frame: f, end, collided });
        self.emit(LogRecord::TxStart { t, node, seq, msg, bytes });
        self.push(end, Rank::TxEnd, node, seq, Body::TxEnd(id));
    }

    fn on_tx_end(&mut self, id: u64, t: f64) {
        let pos = self.in_flight.iter().position(|f| f.id == id).expect("tx in flight");
        let InFlight { frame: f, collided, .. } = self.in_flight.swap_remove(pos);
        let (node, seq) = (f.node_id, f.seq);
        let is_data = f.msg_type == MsgType::Embedding;
        self.emit(LogRecord::TxEnd { t, node, seq, msg: msg_name(f.msg_type).to_string(), collided });

        let receivers: Vec<NodeId> = self.nodes.values().filter(|n| n.active && n.spec.id != node).map(|n| n.spec.id).collect();
        let n_active = receivers.len() + usize::from(self.nodes.get(&node).is_some_and(|n| n.active));
        let p_loss = loss_probability(&self.world.medium, n_active.max(1));
        let mut delivered = 0u64;
        if !collided {
            let t_rx = t + self.world.medium.propagation;
            for rx in receivers.iter().copied() {
                if self.rng.random::<f64>() >= p_loss {
                    delivered += 1;
                    self.push(t_rx, Rank::Deliver, node, seq, Body::Deliver { rx, frame: f.clone() });
                }
            }
        }

        let stats = &mut self.nodes.get_mut(&node).expect("known node").stats;
        if collided {
            stats.collisions += 1;
        }
        if is_data {
            stats.frames_tx += 1;
            stats.expected_rx += receivers.len() as u64;
            stats.delivered_rx += delivered;
            let k = f.superframe_idx as usize;
            if self.series.len() <= k {
                self.series.resize(k + 1, SuperframeStats::default());
            }
            let s = &mut self.series[k];
            s.frames += 1;
            s.expected_rx += receivers.len() as u64;
            s.delivered_rx += delivered;
            s.collided += u64::from(collided);
        } else {
            stats.heartbeats_tx += 1;
        }
    }

    fn on_deliver<A: Application + ?Sized>(&mut self, rx: NodeId, f: Arc<Frame>, t: f64, app: &mut A) {
        let Some(n) = self.nodes.get_mut(&rx) else { return };
        if !n.active {
            return;
        }
        n.sched.on_frame_received(&f, t);
        if f.msg_type == MsgType::Embedding {
            n.stats.frames_rx += 1;
        }
        self.emit(LogRecord::Deliver { t, node: f.node_id, rx, seq: f.seq, msg: msg_name(f.msg_type).to_string() });
        if f.msg_type == MsgType::Embedding {
            app.on_deliver(rx, &f, t);
        }
    }
}

pub struct RunOutput {
    pub log: Vec<u8>,
    pub stats: Vec<NodeStats>,
    pub superframes: Vec<SuperframeStats>,
    pub divisor_trace: Vec<(f64, NodeId, u32)>,
}

/// Runs `world` for `duration` seconds with fixed-size payloads, logging
/// every event, then lets in-flight frames finish.
pub fn run(world: &World, duration: f64, seed: u64) -> Result<RunOutput, NetsimError> {
    if !(duration > 0.0) {
        return Err(NetsimError::Config("duration must be positive".into()));
    }
    let mut sim = Simulator::new(world.clone(), seed)?;
    sim.enable_log();
    let mut app = FixedPayload::zeros(world.payload_bytes);
    sim.run_until(duration, &mut app);
    sim.drain(&mut app);
    Ok(RunOutput {
        log: sim.take_log(),
        stats: sim.stats(),
        superframes: sim.series.clone(),
        divisor_trace: sim.divisor_trace.clone(),
    })
}

pub const SUMMARY_HEADER: &str = "node_id,frames_tx,frames_rx,collisions,loss_rate,mean_divisor";

pub fn write_summary_csv<W: Write>(mut w: W, stats: &[NodeStats]) -> io::Result<()> {
    writeln!(w, "{SUMMARY_HEADER}")?;
    for s in stats {
        writeln!(
            w,
            "{},{},{},{},{:.6},{:.6}",
            s.node_id,
            s.frames_tx,
            s.frames_rx,
            s.collisions,
            s.loss_rate(),
            s.mean_divisor()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_world(n: u16) -> World {
        World::new(n, Medium::lossless(), TdmaConfig::default(), 6144)
    }

    #[test]
    fn loss_probability_examples() {
        let m = Medium::default();
        assert!((loss_probability(&m, 2) - 0.03).abs() < 1e-15);
        assert!((loss_probability(&m, 7) - 0.08).abs() < 1e-15);
        assert_eq!(loss_probability(&m, 100), 0.5);
        assert!((loss_probability(&m, 1) - 0.03).abs() < 1e-15);
    }

    #[test]
    fn empty_world_logs_only_ticks() {
        let w = World::new(0, Medium::default(), TdmaConfig::default(), 6144);
        let out = run(&w, 1.0, 1).unwrap();
        let text = String::from_utf8(out.log).unwrap();
        assert_eq!(text.lines().count(), 15);
        for line in text.lines() {
            let rec: LogRecord = serde_json::from_str(line).unwrap();
            assert!(matches!(rec, LogRecord::Tick { .. }));
        }
    }

    #[test]
    fn same_seed_same_log() {
        let w = World::new(5, Medium::default(), TdmaConfig::default(), 6144);
        let a = run(&w, 3.0, 42).unwrap();
        let b = run(&w, 3.0, 42).unwrap();
        assert_eq!(a.log, b.log);
        let c = run(&w, 3.0, 43).unwrap();
        assert_ne!(a.log, c.log);
    }

    #[test]
    fn distinct_slots_never_collide() {
        let out = run(&World::new(4, Medium::default(), TdmaConfig::default(), 6144), 10.0, 7).unwrap();
        assert!(out.stats.iter().all(|s| s.collisions == 0));
        assert!(out.stats.iter().all(|s| s.frames_tx > 0 && s.frames_tx <= 150));
    }

    #[test]
    fn lossless_delivers_everything() {
        let out = run(&quiet_world(3), 2.0, 0).unwrap();
        for s in &out.stats {
            assert_eq!(s.frames_tx, 30);
            assert_eq!(s.delivered_rx, 60);
            assert_eq!(s.frames_rx, 60);
        }
    }

    #[test]
    fn overlapping_frames_are_both_lost() {
        let mut tdma = TdmaConfig::default();
        tdma.heartbeats = false;
        // Nodes 0 and 4 share slot 0 and, at divisor 1, every superframe.
        let w = World::new(5, Medium::lossless(), tdma, 6144);
        let out = run(&w, 1.0, 0).unwrap();
        for s in &out.stats {
            match s.node_id {
                0 | 4 => {
                    assert_eq!(s.collisions, 15);
                    assert_eq!(s.delivered_rx, 0);
                }
                _ => assert_eq!(s.delivered_rx, s.expected_rx),
            }
        }
    }

    #[test]
    fn bernoulli_loss_matches_configuration() {
        let tdma = TdmaConfig { heartbeats: false, max_divisor: 1, ..TdmaConfig::default() };
        let w = World::new(2, Medium::default(), tdma, 64);
        let mut sim = Simulator::new(w, 5).unwrap();
        let mut app = FixedPayload::zeros(64);
        // 2 nodes, 1 receiver each: 10^5 frames needs 50_000 superframes.
        for _ in 0..50_000 {
            sim.run_superframe(&mut app);
        }
        sim.drain(&mut app);
        let (e, d) = sim.stats().iter().fold((0, 0), |(e, d), s| (e + s.expected_rx, d + s.delivered_rx));
        assert_eq!(e, 100_000);
        let loss = 1.0 - d as f64 / e as f64;
        assert!((loss - 0.03).abs() < 0.005, "loss {loss}");
    }

    #[test]
    fn summary_csv_shape() {
        let out = run(&quiet_world(2), 1.0, 0).unwrap();
        let mut buf = Vec::new();
        write_summary_csv(&mut buf, &out.stats).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], SUMMARY_HEADER);
        assert_eq!(lines[1], "0,15,15,0,0.000000,1.000000");
    }

    #[test]
    fn late_joiner_is_not_a_receiver_before_joining() {
        let mut w = quiet_world(3);
        w.nodes[2].join = 1.0;
        let out = run(&w, 2.0, 0).unwrap();
        let s2 = &out.stats[2];
        assert_eq!(s2.frames_tx, 15);
        assert_eq!(s2.frames_rx, 30);
    }
}
