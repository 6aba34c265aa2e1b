//! Synthetic indoor floors: axis-aligned rooms split by walls with doorways.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ScenarioError;
use crate::bev::{BevGrid, DEFAULT_CELLS, DEFAULT_EXTENT};
use crate::geometry::{wrap_angle, Pose, Vec3};

pub const DEFAULT_RESOLUTION: f64 = 0.1;
pub const MIN_EXTENT: f64 = 12.0;
/// Smallest room side in metres.
pub const MIN_ROOM: f64 = 2.0;
pub const DOOR_WIDTH: f64 = 1.0;
pub const WALL_CELLS: usize = 2;

/// Observed-grid cell values.
pub const OBS_OCCUPIED: f32 = 0.9;
pub const OBS_FREE: f32 = 0.3;

/// Occupancy of a square floor whose corner sits at the world origin.
#[derive(Debug, Clone, PartialEq)]
pub struct FloorPlan {
    pub seed: u64,
    cells: usize,
    resolution: f64,
    /// Row-major, `free[ix * cells + iy]`.
    free: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Rect {
    fn w(&self) -> usize {
        self.x1 - self.x0
    }
    fn h(&self) -> usize {
        self.y1 - self.y0
    }
}

#[derive(Debug, Clone, Copy)]
struct Split {
    /// Wall spans cells `[at, at + WALL_CELLS)` across x (vertical = false) or y.
    along_x: bool,
    at: usize,
    lo: usize,
    hi: usize,
}

/// Builds a floor of `n_rooms` rooms by recursive splitting. Deterministic per seed.
pub fn gen_world(seed: u64, extent: f64, n_rooms: usize) -> Result<FloorPlan, ScenarioError> {
    if !(extent >= MIN_EXTENT) || !extent.is_finite() {
        return Err(ScenarioError::Infeasible(format!("extent must be at least {MIN_EXTENT} m")));
    }
    if n_rooms == 0 {
        return Err(ScenarioError::Infeasible("need at least one room".into()));
    }
    let res = DEFAULT_RESOLUTION;
    let n = (extent / res).round() as usize;
    let min_room = (MIN_ROOM / res).round() as usize;
    let door = (DOOR_WIDTH / res).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut rooms = vec![Rect { x0: WALL_CELLS, y0: WALL_CELLS, x1: n - WALL_CELLS, y1: n - WALL_CELLS }];
    let mut splits = Vec::new();
    while rooms.len() < n_rooms {
        // Split the largest room that can still hold two rooms plus a wall.
        let need = 2 * min_room + WALL_CELLS;
        let pick = rooms
            .iter()
            .enumerate()
            .filter(|(_, r)| r.w() >= need || r.h() >= need)
            .max_by_key(|(i, r)| (r.w() * r.h(), usize::MAX - i))
            .map(|(i, _)| i);
        let Some(i) = pick else {
            return Err(ScenarioError::Infeasible(format!("{n_rooms} rooms do not fit in {extent} m")));
        };
        let r = rooms.swap_remove(i);
        let along_x = if r.w() >= need && r.h() >= need { r.w() >= r.h() } else { r.w() >= need };
        let (lo, hi) = if along_x { (r.x0, r.x1) } else { (r.y0, r.y1) };
        let at = rng.random_range(lo + min_room..=hi - min_room - WALL_CELLS);
        if along_x {
            rooms.push(Rect { x1: at, ..r });
            rooms.push(Rect { x0: at + WALL_CELLS, ..r });
            splits.push(Split { along_x, at, lo: r.y0, hi: r.y1 });
        } else {
            rooms.push(Rect { y1: at, ..r });
            rooms.push(Rect { y0: at + WALL_CELLS, ..r });
            splits.push(Split { along_x, at, lo: r.x0, hi: r.x1 });
        }
    }

    let mut free = vec![false; n * n];
    for r in &rooms {
        for ix in r.x0..r.x1 {
            for iy in r.y0..r.y1 {
                free[ix * n + iy] = true;
            }
        }
    }
    // Doors: a window along each wall whose cells are free on both sides.
    for s in &splits {
        let side_free = |free: &[bool], u: usize| {
            let (a, b) = (s.at - 1, s.at + WALL_CELLS);
            if s.along_x {
                free[a * n + u] && free[b * n + u]
            } else {
                free[u * n + a] && free[u * n + b]
            }
        };
        let starts: Vec<usize> = (s.lo..=s.hi.saturating_sub(door))
            .filter(|&u0| (u0..u0 + door).all(|u| side_free(&free, u)))
            .collect();
        if starts.is_empty() {
            return Err(ScenarioError::Infeasible("no room for a doorway".into()));
        }
        let u0 = starts[rng.random_range(0..starts.len())];
        for u in u0..u0 + door {
            for w in s.at..s.at + WALL_CELLS {
                let k = if s.along_x { w * n + u } else { u * n + w };
                free[k] = true;
            }
        }
    }
    let plan = FloorPlan { seed, cells: n, resolution: res, free };
    if !plan.is_connected() {
        return Err(ScenarioError::Infeasible("free space is not connected".into()));
    }
    Ok(plan)
}

impl FloorPlan {
    /// Floor from an explicit free mask, `free[ix * cells + iy]`.
    pub fn from_mask(cells: usize, resolution: f64, free: Vec<bool>) -> Result<Self, ScenarioError> {
        if cells == 0 || free.len() != cells * cells || !(resolution > 0.0) {
            return Err(ScenarioError::Infeasible("mask shape".into()));
        }
        Ok(Self { seed: 0, cells, resolution, free })
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn extent(&self) -> f64 {
        self.cells as f64 * self.resolution
    }

    pub fn is_free_cell(&self, ix: usize, iy: usize) -> bool {
        ix < self.cells && iy < self.cells && self.free[ix * self.cells + iy]
    }

    /// Points outside the floor count as occupied.
    pub fn is_free(&self, x: f64, y: f64) -> bool {
        if !(x >= 0.0 && y >= 0.0) {
            return false;
        }
        let (ix, iy) = ((x / self.resolution) as usize, (y / self.resolution) as usize);
        self.is_free_cell(ix, iy)
    }

    pub fn free_count(&self) -> usize {
        self.free.iter().filter(|f| **f).count()
    }

    /// Free space is one 4-connected component.
    pub fn is_connected(&self) -> bool {
        let n = self.cells;
        let Some(start) = self.free.iter().position(|f| *f) else {
            return false;
        };
        let mut seen = vec![false; n * n];
        let mut stack = vec![start];
        seen[start] = true;
        let mut count = 0;
        while let Some(k) = stack.pop() {
            count += 1;
            let (ix, iy) = (k / n, k % n);
            let mut push = |jx: usize, jy: usize| {
                let j = jx * n + jy;
                if self.free[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if ix > 0 {
                push(ix - 1, iy);
            }
            if ix + 1 < n {
                push(ix + 1, iy);
            }
            if iy > 0 {
                push(ix, iy - 1);
            }
            if iy + 1 < n {
                push(ix, iy + 1);
            }
        }
        count == self.free_count()
    }

    /// Uniform point on free space (cell-uniform, then uniform within the cell).
    pub fn sample_free<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let free_cells: usize = self.free_count();
        assert!(free_cells > 0, "floor has no free space");
        let mut pick = rng.random_range(0..free_cells);
        for (k, f) in self.free.iter().enumerate() {
            if *f {
                if pick == 0 {
                    let (ix, iy) = (k / self.cells, k % self.cells);
                    let x = (ix as f64 + rng.random::<f64>()) * self.resolution;
                    let y = (iy as f64 + rng.random::<f64>()) * self.resolution;
                    return (x, y);
                }
                pick -= 1;
            }
        }
        unreachable!("pick < free_cells")
    }

    /// Ground-truth occupancy around `pose`, ego-aligned: 1 occupied, 0 free.
    pub fn truth_crop(&self, pose: &Pose) -> BevGrid {
        let res = DEFAULT_EXTENT / DEFAULT_CELLS as f64;
        BevGrid::from_fn(DEFAULT_CELLS, res, |x, y| {
            let w = pose.transform_point(Vec3::new(x, y, 0.0));
            if self.is_free(w.x, w.y) {
                0.0
            } else {
                1.0
            }
        })
        .expect("crop values are probabilities")
    }

    /// What a forward camera with the given field of view sees, as an ego grid:
    /// free cells with line of sight read 0.3, the first blocked cell on a ray
    /// reads 0.9, everything else stays unknown.
    pub fn observed_crop(&self, pose: &Pose, fov_deg: f64, range: f64) -> BevGrid {
        let res = DEFAULT_EXTENT / DEFAULT_CELLS as f64;
        let half_fov = 0.5 * fov_deg.to_radians();
        let origin = pose.position;
        let step = 0.5 * self.resolution.min(res);
        BevGrid::from_fn(DEFAULT_CELLS, res, |x, y| {
            let d = x.hypot(y);
            if d > range || wrap_angle(y.atan2(x)).abs() > half_fov {
                return crate::bev::UNKNOWN;
            }
            let target = pose.transform_point(Vec3::new(x, y, 0.0));
            let dir = target - origin;
            let steps = (d / step).ceil() as usize;
            // March up to (not including) the target cell.
            for s in 1..steps {
                let p = origin + dir * (s as f64 / steps as f64);
                if !self.is_free(p.x, p.y) && !same_cell(self, p, target) {
                    return crate::bev::UNKNOWN;
                }
            }
            if self.is_free(target.x, target.y) {
                OBS_FREE
            } else {
                OBS_OCCUPIED
            }
        })
        .expect("crop values are probabilities")
    }
}

fn same_cell(plan: &FloorPlan, a: Vec3, b: Vec3) -> bool {
    let r = plan.resolution;
    (a.x / r).floor() == (b.x / r).floor() && (a.y / r).floor() == (b.y / r).floor()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_world() {
        assert_eq!(gen_world(3, 12.0, 5).unwrap(), gen_world(3, 12.0, 5).unwrap());
        assert_ne!(gen_world(3, 12.0, 5).unwrap(), gen_world(4, 12.0, 5).unwrap());
    }

    #[test]
    fn single_room_is_one_rectangle() {
        let w = gen_world(1, 12.0, 1).unwrap();
        let n = w.cells();
        let inner = n - 2 * WALL_CELLS;
        assert_eq!(w.free_count(), inner * inner);
        assert!(w.is_free_cell(WALL_CELLS, WALL_CELLS));
        assert!(!w.is_free_cell(0, 0));
    }

    #[test]
    fn rejects_small_extent_and_overfull() {
        assert!(gen_world(0, 10.0, 1).is_err());
        assert!(gen_world(0, 12.0, 0).is_err());
        assert!(gen_world(0, 12.0, 100).is_err());
    }

    #[test]
    fn many_rooms_connected() {
        for seed in 0..30 {
            let w = gen_world(seed, 16.0, 8).unwrap();
            assert!(w.is_connected());
        }
    }

    #[test]
    fn truth_crop_of_open_room_center() {
        let w = gen_world(1, 12.0, 1).unwrap();
        let g = w.truth_crop(&Pose::planar(6.0, 6.0, 0.3));
        assert!(g.cells().iter().all(|c| *c == 0.0));
        let corner = w.truth_crop(&Pose::planar(0.5, 0.5, 0.0));
        assert!(corner.cells().iter().any(|c| *c == 1.0));
    }

    #[test]
    fn observed_crop_respects_fov() {
        let w = gen_world(1, 12.0, 1).unwrap();
        let g = w.observed_crop(&Pose::planar(6.0, 6.0, 0.0), 120.0, 3.0);
        // Ahead is seen as free, behind stays unknown.
        let (i, j) = g.index_of(1.0, 0.0).unwrap();
        assert_eq!(g.get(i, j), OBS_FREE);
        let (i, j) = g.index_of(-1.0, 0.0).unwrap();
        assert_eq!(g.get(i, j), crate::bev::UNKNOWN);
    }

    #[test]
    fn observed_walls_block_sight() {
        // Wall at x in [8.0, 8.2) across the room; a robot at x = 7 facing +x sees
        // the wall but not beyond it.
        let n = 120;
        let mut free = vec![true; n * n];
        for ix in 80..82 {
            for iy in 0..n {
                free[ix * n + iy] = false;
            }
        }
        let w = FloorPlan::from_mask(n, 0.1, free).unwrap();
        let g = w.observed_crop(&Pose::planar(7.0, 6.0, 0.0), 120.0, 3.0);
        let (i, j) = g.index_of(1.05, 0.0).unwrap();
        assert_eq!(g.get(i, j), OBS_OCCUPIED);
        let (i, j) = g.index_of(2.0, 0.0).unwrap();
        assert_eq!(g.get(i, j), crate::bev::UNKNOWN);
    }
}
