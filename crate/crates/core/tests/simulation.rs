use std::collections::HashMap;

use swarmsim_core::estimator::{NoiseProfile, Observation, PoseEstimator, SyntheticEstimator};
use swarmsim_core::geometry::Pose;
use swarmsim_core::losses::{pose_loss, LossWeights};
use swarmsim_core::netproto::TdmaConfig;
use swarmsim_core::netsim::{self, FixedPayload, LogRecord, Medium, NodeSpec, Simulator, World};
use swarmsim_core::scenario::{
    gen_world, run_formation, sample_groups, write_groups, EstimatorKind, FormationConfig, SampleConfig,
};

fn parse_log(bytes: &[u8]) -> Vec<LogRecord> {
    std::str::from_utf8(bytes).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn every_transmission_ends_once_and_delivers_at_most_n_minus_one() {
    let n = 6u16;
    let world = World::new(n, Medium::default(), TdmaConfig::default(), 2048);
    let out = netsim::run(&world, 30.0, 11).unwrap();
    let mut open: HashMap<(u16, u32, String), u32> = HashMap::new();
    let mut delivered: HashMap<(u16, u32, String), u32> = HashMap::new();
    for rec in parse_log(&out.log) {
        match rec {
            LogRecord::TxStart { node, seq, msg, .. } => *open.entry((node, seq, msg)).or_default() += 1,
            LogRecord::TxEnd { node, seq, msg, .. } => {
                let c = open.get_mut(&(node, seq, msg)).expect("end without start");
                assert_eq!(*c, 1);
                *c = 0;
            }
            LogRecord::Deliver { node, seq, msg, rx, .. } => {
                assert_ne!(node, rx);
                *delivered.entry((node, seq, msg)).or_default() += 1;
            }
            LogRecord::Tick { .. } => {}
        }
    }
    assert!(!open.is_empty());
    assert!(open.values().all(|&c| c == 0), "unfinished transmissions");
    assert!(delivered.values().all(|&d| d < u32::from(n)));
}

#[test]
fn run_is_a_function_of_its_inputs() {
    let world = World::new(5, Medium::default(), TdmaConfig::default(), 1024);
    assert_eq!(netsim::run(&world, 10.0, 3).unwrap().log, netsim::run(&world, 10.0, 3).unwrap().log);
}

#[test]
fn goodput_matches_rate_times_delivery() {
    let n = 4u16;
    let tdma = TdmaConfig { max_divisor: 1, ..TdmaConfig::default() };
    let world = World::new(n, Medium::default(), tdma, 6144);
    let out = netsim::run(&world, 60.0, 21).unwrap();
    let mut received = vec![0u64; usize::from(n)];
    for rec in parse_log(&out.log) {
        if let LogRecord::Deliver { node, msg, .. } = rec {
            if msg == "embedding" {
                received[usize::from(node)] += 1;
            }
        }
    }
    for s in &out.stats {
        assert_eq!(s.mean_divisor(), 1.0);
        let goodput = received[usize::from(s.node_id)] as f64 / f64::from(n - 1) / 60.0;
        let expected = 15.0 * (1.0 - s.loss_rate());
        assert!((goodput - expected).abs() <= 0.05 * expected, "node {}: {goodput} vs {expected}", s.node_id);
    }
}

#[test]
fn jammers_force_backoff_and_loss_recovers() {
    // Two late joiners share slots 0 and 1, so half the slots collide.
    let mut world = World::new(4, Medium::default(), TdmaConfig::default(), 6144);
    let window = world.tdma.loss_window;
    let join = 2.0;
    for id in [4, 5] {
        world.nodes.push(NodeSpec { id, join, leave: None });
    }
    let mut sim = Simulator::new(world, 8).unwrap();
    let mut app = FixedPayload::zeros(6144);
    sim.run_until(join + 12.5, &mut app);
    let first_backoff = sim.divisor_trace().iter().find(|(_, _, d)| *d > 1).map(|e| e.0).expect("no backoff");
    assert!(first_backoff <= join + 3.0 * window, "first backoff at {first_backoff}");
    let hz = 15.0;
    let k0 = ((join + 10.0) * hz) as u64;
    let loss = sim.loss_between(k0, k0 + 30).unwrap();
    assert!(loss < 0.10, "loss {loss}");
}

#[test]
fn followers_only_use_delivered_frames() {
    let cfg = FormationConfig { duration: 20.0, keep_net_log: true, ..FormationConfig::default() };
    let period = cfg.tdma.superframe_period;
    let log = run_formation(&cfg, 5).unwrap();
    let deliveries: Vec<(f64, u16, u16)> = parse_log(log.net_log.as_ref().unwrap())
        .into_iter()
        .filter_map(|r| match r {
            LogRecord::Deliver { t, node, rx, msg, .. } if msg == "embedding" => Some((t, node, rx)),
            _ => None,
        })
        .collect();
    let mut checked = 0;
    for r in log.records.iter().filter(|r| r.node_id != 0) {
        for e in &r.estimates {
            let ok = deliveries.iter().any(|&(t, node, rx)| node == 0 && rx == r.node_id && t >= e.t_obs && t < e.t_obs + period && t <= r.t);
            assert!(ok, "follower {} used an undelivered frame from {}", r.node_id, e.t_obs);
            checked += 1;
        }
    }
    assert!(checked > 100);
    // Some frames are lost, so some superframes yield no estimate.
    let ticks = log.records.iter().filter(|r| r.node_id != 0).count();
    assert!(checked < ticks);
}

#[test]
fn noiseless_tracking_is_no_worse_than_noisy() {
    let (mut clean, mut noisy) = (0.0, 0.0);
    for seed in 0..10 {
        let oracle = FormationConfig { estimator: EstimatorKind::Oracle, ..FormationConfig::default() };
        let a = run_formation(&oracle, seed).unwrap();
        let b = run_formation(&FormationConfig::default(), seed).unwrap();
        clean += a.summary.iter().map(|s| s.mean_abs_pos_m).sum::<f64>();
        noisy += b.summary.iter().map(|s| s.mean_abs_pos_m).sum::<f64>();
    }
    assert!(clean <= noisy, "{clean} vs {noisy}");
}

#[test]
fn calibrated_sigmas_score_better_than_inflated_ones() {
    let mut calibrated = SyntheticEstimator::new(NoiseProfile::reference(), 9);
    let mut inflated = SyntheticEstimator::new(NoiseProfile { miscalibration: 4.0, ..NoiseProfile::reference() }, 9);
    let w = LossWeights::new(0.5, 0.0).unwrap();
    let (mut a, mut b) = (0.0, 0.0);
    let n = 10_000u64;
    for k in 0..n {
        let yaw = (k as f64 * 0.37) % std::f64::consts::TAU - std::f64::consts::PI;
        let truth = Pose::planar(1.0 + (k % 7) as f64 * 0.2, -0.5, yaw);
        let (oi, oj) = (Observation::bare(0, k, Pose::IDENTITY, 120.0), Observation::bare(1, k, truth, 120.0));
        let (ea, eb) = (calibrated.estimate(&oi, &oj).unwrap(), inflated.estimate(&oi, &oj).unwrap());
        // Same noise draw, different reported sigma.
        assert_eq!(ea.p_hat, eb.p_hat);
        a += pose_loss(&truth, &ea, &w).unwrap();
        b += pose_loss(&truth, &eb, &w).unwrap();
    }
    assert!(a / (n as f64) < b / (n as f64));
}

#[test]
fn estimates_depend_only_on_the_pair() {
    let mut alone = SyntheticEstimator::new(NoiseProfile::reference(), 4);
    let mut busy = SyntheticEstimator::new(NoiseProfile::reference(), 4);
    let i = Observation::bare(0, 12, Pose::planar(0.0, 0.0, 0.3), 120.0);
    let j = Observation::bare(1, 12, Pose::planar(1.0, 0.4, -0.2), 120.0);
    for (id, p) in [(2u16, Pose::planar(3.0, 1.0, 2.0)), (3, Pose::planar(-2.0, 0.0, 1.0))] {
        busy.estimate(&i, &Observation::bare(id, 12, p, 120.0)).unwrap();
        busy.estimate(&Observation::bare(id, 12, p, 120.0), &j).unwrap();
    }
    assert_eq!(alone.estimate(&i, &j).unwrap(), busy.estimate(&i, &j).unwrap());
}

#[test]
fn datasets_are_reproducible() {
    let plan = gen_world(3, 14.0, 6).unwrap();
    let cfg = SampleConfig { render_observed: true, ..SampleConfig::default() };
    let bytes = |seed| {
        let mut out = Vec::new();
        write_groups(&mut out, &sample_groups(&plan, 5, &cfg, seed).unwrap()).unwrap();
        out
    };
    assert_eq!(bytes(1), bytes(1));
    assert_ne!(bytes(1), bytes(2));
}
