//! Groups of nearby robot observations sampled from a floor, and their JSONL form.

use std::io::{self, BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::floorplan::FloorPlan;
use super::ScenarioError;
use crate::bev::BevGrid;
use crate::estimator::{NodeId, Observation, PoseEstimator};
use crate::geometry::{relative_pose, Pose};
use crate::metrics::EdgeRecord;

pub const DEFAULT_FOV_DEG: f64 = 120.0;
pub const DEFAULT_N_MAX: usize = 5;
pub const DEFAULT_D_MAX: f64 = 2.0;
/// Camera range used for the observed grids, metres.
pub const DEFAULT_VIEW_RANGE: f64 = 3.0;
const MAX_TRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSample {
    pub id: NodeId,
    pub pose: Pose,
    pub fov_deg: f64,
    /// Ground-truth ego crop.
    pub bev: BevGrid,
    /// What this robot's camera sees, if rendered.
    pub observed: Option<BevGrid>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleGroup {
    pub nodes: Vec<NodeSample>,
}

impl SampleGroup {
    /// Node `k` as an observation; `tick` keys the estimator's noise, so
    /// distinct groups should use distinct ticks.
    pub fn observation(&self, k: usize, tick: u64) -> Observation {
        let n = &self.nodes[k];
        Observation::bare(n.id, tick, n.pose, n.fov_deg)
    }

    /// Every ordered pair (i, j), i ≠ j, estimated by `est`.
    pub fn edge_records<E: PoseEstimator + ?Sized>(&self, est: &mut E, tick: u64) -> Result<Vec<EdgeRecord>, ScenarioError> {
        let mut out = Vec::new();
        for i in 0..self.nodes.len() {
            for j in 0..self.nodes.len() {
                if i == j {
                    continue;
                }
                let e = est.estimate(&self.observation(i, tick), &self.observation(j, tick))?;
                let truth = relative_pose(&self.nodes[i].pose, &self.nodes[j].pose);
                out.push(EdgeRecord { truth, est: e, fov_deg: self.nodes[i].fov_deg });
            }
        }
        Ok(out)
    }

    /// Node `i`'s observed grid fused with every other node's, placed by the
    /// estimates of `est`. `None` when observed grids were not rendered.
    pub fn fused_observed<E: PoseEstimator + ?Sized>(
        &self,
        i: usize,
        est: &mut E,
        tick: u64,
        gate_sigma: f64,
    ) -> Result<Option<BevGrid>, ScenarioError> {
        let Some(ego) = self.nodes[i].observed.as_ref() else {
            return Ok(None);
        };
        let mut neighbors = Vec::new();
        for j in 0..self.nodes.len() {
            if j == i {
                continue;
            }
            let Some(g) = self.nodes[j].observed.as_ref() else {
                return Ok(None);
            };
            let e = est.estimate(&self.observation(i, tick), &self.observation(j, tick))?;
            neighbors.push((g.clone(), e));
        }
        Ok(Some(crate::bev::fuse(ego, &neighbors, gate_sigma)?))
    }

    pub fn max_pairwise_distance(&self) -> f64 {
        let mut m: f64 = 0.0;
        for a in &self.nodes {
            for b in &self.nodes {
                m = m.max((a.pose.position - b.pose.position).norm());
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub n_max: usize,
    pub d_max: f64,
    pub fov_deg: f64,
    /// Also render each node's observed grid.
    pub render_observed: bool,
    pub view_range: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n_max: DEFAULT_N_MAX,
            d_max: DEFAULT_D_MAX,
            fov_deg: DEFAULT_FOV_DEG,
            render_observed: false,
            view_range: DEFAULT_VIEW_RANGE,
        }
    }
}

/// Poses only: an anchor uniform on free space, the others uniform in the
/// `d_max` disc around it (restricted to free space), all yaws uniform.
pub fn sample_group_poses<R: Rng + ?Sized>(
    plan: &FloorPlan,
    n_max: usize,
    d_max: f64,
    rng: &mut R,
) -> Result<Vec<Pose>, ScenarioError> {
    if n_max == 0 || !(d_max >= 0.0) {
        return Err(ScenarioError::Infeasible("n_max must be positive and d_max non-negative".into()));
    }
    let (ax, ay) = plan.sample_free(rng);
    let mut poses = vec![Pose::planar(ax, ay, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))];
    for _ in 1..n_max {
        let mut placed = None;
        for _ in 0..MAX_TRIES {
            let r = d_max * rng.random::<f64>().sqrt();
            let th = rng.random_range(0.0..std::f64::consts::TAU);
            let (x, y) = (ax + r * th.cos(), ay + r * th.sin());
            if plan.is_free(x, y) {
                placed = Some((x, y));
                break;
            }
        }
        let Some((x, y)) = placed else {
            return Err(ScenarioError::Exhausted);
        };
        poses.push(Pose::planar(x, y, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)));
    }
    Ok(poses)
}

pub fn sample_groups(plan: &FloorPlan, n_groups: usize, cfg: &SampleConfig, seed: u64) -> Result<Vec<SampleGroup>, ScenarioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let poses = sample_group_poses(plan, cfg.n_max, cfg.d_max, &mut rng)?;
        let nodes = poses
            .into_iter()
            .enumerate()
            .map(|(k, pose)| NodeSample {
                id: k as NodeId,
                pose,
                fov_deg: cfg.fov_deg,
                bev: plan.truth_crop(&pose),
                observed: cfg.render_observed.then(|| plan.observed_crop(&pose, cfg.fov_deg, cfg.view_range)),
            })
            .collect();
        out.push(SampleGroup { nodes });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeLine {
    pub id: NodeId,
    pub pose: Pose,
    pub fov_deg: f64,
    pub bev_b64: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_b64: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupLine {
    pub nodes: Vec<NodeLine>,
}

impl From<&SampleGroup> for GroupLine {
    fn from(g: &SampleGroup) -> Self {
        GroupLine {
            nodes: g
                .nodes
                .iter()
                .map(|n| NodeLine {
                    id: n.id,
                    pose: n.pose,
                    fov_deg: n.fov_deg,
                    bev_b64: n.bev.to_base64(),
                    observed_b64: n.observed.as_ref().map(BevGrid::to_base64),
                })
                .collect(),
        }
    }
}

impl TryFrom<GroupLine> for SampleGroup {
    type Error = ScenarioError;
    fn try_from(g: GroupLine) -> Result<Self, ScenarioError> {
        let nodes = g
            .nodes
            .into_iter()
            .map(|n| {
                Ok(NodeSample {
                    id: n.id,
                    pose: n.pose,
                    fov_deg: n.fov_deg,
                    bev: BevGrid::from_base64(&n.bev_b64)?,
                    observed: n.observed_b64.as_deref().map(BevGrid::from_base64).transpose()?,
                })
            })
            .collect::<Result<_, ScenarioError>>()?;
        Ok(SampleGroup { nodes })
    }
}

pub const DATASET_SCHEMA: &str = "swarmsim.dataset/1";

/// A `{"schema": ...}` header line, as written first by every JSONL writer.
pub fn is_schema_line(v: &serde_json::Value) -> bool {
    v.as_object().is_some_and(|o| o.len() == 1 && o.get("schema").is_some_and(|s| s.is_string()))
}

pub fn write_groups<W: Write>(mut w: W, groups: &[SampleGroup]) -> io::Result<()> {
    writeln!(w, "{{\"schema\":\"{DATASET_SCHEMA}\"}}")?;
    for g in groups {
        serde_json::to_writer(&mut w, &GroupLine::from(g))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_groups<R: BufRead>(r: R) -> Result<Vec<SampleGroup>, ScenarioError> {
    let mut out = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| ScenarioError::Parse { line: k + 1, msg: e.to_string() };
        let v: serde_json::Value = serde_json::from_str(&line).map_err(parse_err)?;
        if is_schema_line(&v) {
            continue;
        }
        let g: GroupLine = serde_json::from_value(v).map_err(parse_err)?;
        out.push(g.try_into()?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::OracleEstimator;
    use crate::metrics::is_invisible;
    use crate::scenario::floorplan::gen_world;

    #[test]
    fn zero_radius_groups_coincide() {
        let plan = gen_world(2, 12.0, 4).unwrap();
        let cfg = SampleConfig { d_max: 0.0, ..SampleConfig::default() };
        for g in sample_groups(&plan, 20, &cfg, 1).unwrap() {
            for rec in g.edge_records(&mut OracleEstimator::default(), 0).unwrap() {
                assert!(rec.truth.position.norm() < 1e-12);
            }
        }
    }

    #[test]
    fn groups_fit_in_twice_d_max() {
        let plan = gen_world(5, 14.0, 6).unwrap();
        for g in sample_groups(&plan, 200, &SampleConfig::default(), 9).unwrap() {
            assert!(g.max_pairwise_distance() <= 2.0 * DEFAULT_D_MAX + 1e-12);
            for n in &g.nodes {
                assert!(plan.is_free(n.pose.position.x, n.pose.position.y));
            }
        }
    }

    #[test]
    fn both_visibility_classes_present() {
        let plan = gen_world(5, 14.0, 6).unwrap();
        let cfg = SampleConfig { n_max: 2, ..SampleConfig::default() };
        let groups = sample_groups(&plan, 2000, &cfg, 3).unwrap();
        let mut est = OracleEstimator::default();
        let (mut inv, mut total) = (0, 0);
        for g in &groups {
            for r in g.edge_records(&mut est, 0).unwrap() {
                inv += is_invisible(&r) as usize;
                total += 1;
            }
        }
        let frac = inv as f64 / total as f64;
        // Uniform yaw: P(|Δyaw| > 120°) = 1/3.
        assert!((frac - 1.0 / 3.0).abs() < 0.03, "{frac}");
    }

    #[test]
    fn jsonl_roundtrip() {
        let plan = gen_world(1, 12.0, 2).unwrap();
        let cfg = SampleConfig { n_max: 3, render_observed: true, ..SampleConfig::default() };
        let groups = sample_groups(&plan, 3, &cfg, 4).unwrap();
        let mut buf = Vec::new();
        write_groups(&mut buf, &groups).unwrap();
        let back = read_groups(buf.as_slice()).unwrap();
        assert_eq!(back, groups);
    }
}
