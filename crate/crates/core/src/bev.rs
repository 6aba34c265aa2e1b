//! Ego-centered bird's-eye-view occupancy grids and their fusion across robots.
//!
//! Cell `(i, j)` (row `i`, column `j`) has its center at ego coordinates
//! `x = (i + 0.5 - H/2) * res`, `y = (j + 0.5 - W/2) * res`, with `x` pointing
//! along the robot's heading. Values are occupancy probabilities; `0.5` means
//! unknown. In world crops "occupied" is the complement of navigable space.

use std::io::{self, Read, Write};

use base64::Engine;
use thiserror::Error;

use crate::estimator::PoseEstimate;
use crate::geometry::{Pose, UnitQuat, Vec3};

pub const DEFAULT_EXTENT: f64 = 6.0;
pub const DEFAULT_CELLS: usize = 64;
pub const UNKNOWN: f32 = 0.5;
/// Fused probabilities are clamped to this band.
pub const FUSE_CLAMP: (f32, f32) = (0.01, 0.99);
pub const DEFAULT_GATE_SIGMA: f64 = 1.0;
pub const HEADER_BYTES: usize = 16;

#[derive(Debug, Error)]
pub enum BevError {
    #[error("grid shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("grid must be square with positive resolution (got {h}x{w} at {resolution} m)")]
    BadShape { h: usize, w: usize, resolution: f64 },
    #[error("cell value {0} outside [0, 1]")]
    BadCell(f32),
    #[error("expected {expected} cell values, got {got}")]
    CellCount { expected: usize, got: usize },
    #[error("blob truncated")]
    Truncated,
    #[error("base64: {0}")]
    Base64(#[from] base64::DecodeError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    size: usize,
    resolution: f64,
    cells: Vec<f32>,
}

impl BevGrid {
    pub fn filled(size: usize, resolution: f64, value: f32) -> Result<Self, BevError> {
        Self::from_cells(size, resolution, vec![value; size * size])
    }

    pub fn unknown(size: usize, resolution: f64) -> Self {
        Self::filled(size, resolution, UNKNOWN).expect("unknown prior is a valid cell")
    }

    /// A 64x64 grid spanning 6 m, all unknown.
    pub fn default_unknown() -> Self {
        Self::unknown(DEFAULT_CELLS, DEFAULT_EXTENT / DEFAULT_CELLS as f64)
    }

    pub fn from_cells(size: usize, resolution: f64, cells: Vec<f32>) -> Result<Self, BevError> {
        if size == 0 || !(resolution > 0.0) || !resolution.is_finite() {
            return Err(BevError::BadShape { h: size, w: size, resolution });
        }
        if cells.len() != size * size {
            return Err(BevError::CellCount { expected: size * size, got: cells.len() });
        }
        if let Some(&bad) = cells.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(BevError::BadCell(bad));
        }
        Ok(Self { size, resolution, cells })
    }

    /// Builds a grid by evaluating `f(x, y)` at every cell center (ego frame).
    pub fn from_fn(size: usize, resolution: f64, mut f: impl FnMut(f64, f64) -> f32) -> Result<Self, BevError> {
        let mut cells = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                let (x, y) = cell_center(size, resolution, i, j);
                cells.push(f(x, y));
            }
        }
        Self::from_cells(size, resolution, cells)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn extent(&self) -> f64 {
        self.size as f64 * self.resolution
    }

    pub fn cells(&self) -> &[f32] {
        &self.cells
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.cells[i * self.size + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        assert!((0.0..=1.0).contains(&v), "cell value {v} outside [0, 1]");
        self.cells[i * self.size + j] = v;
    }

    pub fn same_shape(&self, o: &BevGrid) -> Result<(), BevError> {
        if self.size != o.size || self.resolution != o.resolution {
            return Err(BevError::ShapeMismatch(self.size, self.size, o.size, o.size));
        }
        Ok(())
    }

    /// Index of the cell containing ego point `(x, y)`, if inside the grid.
    pub fn index_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let half = self.size as f64 / 2.0;
        let fi = (x / self.resolution + half).floor();
        let fj = (y / self.resolution + half).floor();
        let n = self.size as f64;
        if fi >= 0.0 && fi < n && fj >= 0.0 && fj < n {
            Some((fi as usize, fj as usize))
        } else {
            None
        }
    }

    /// Row-major float32 blob behind a 16-byte header `(H u32, W u32, resolution f32, reserved u32)`,
    /// all little-endian.
    pub fn write_blob<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(&(self.size as u32).to_le_bytes())?;
        w.write_all(&(self.size as u32).to_le_bytes())?;
        w.write_all(&(self.resolution as f32).to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        for c in &self.cells {
            w.write_all(&c.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + 4 * self.cells.len());
        self.write_blob(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_blob<R: Read>(mut r: R) -> Result<Self, BevError> {
        let mut header = [0u8; HEADER_BYTES];
        r.read_exact(&mut header).map_err(|_| BevError::Truncated)?;
        let h = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let res = f32::from_le_bytes(header[8..12].try_into().unwrap()) as f64;
        if h != w {
            return Err(BevError::BadShape { h, w, resolution: res });
        }
        // Guard against absurd headers before allocating.
        if h == 0 || h > 4096 {
            return Err(BevError::BadShape { h, w, resolution: res });
        }
        let mut raw = vec![0u8; 4 * h * w];
        r.read_exact(&mut raw).map_err(|_| BevError::Truncated)?;
        let cells = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::from_cells(h, res, cells)
    }

    pub fn to_base64(&self) -> String {
        base64::engine::general_purpose::STANDARD.encode(self.to_blob())
    }

    pub fn from_base64(s: &str) -> Result<Self, BevError> {
        let raw = base64::engine::general_purpose::STANDARD.decode(s)?;
        Self::read_blob(raw.as_slice())
    }
}

pub fn cell_center(size: usize, resolution: f64, i: usize, j: usize) -> (f64, f64) {
    let half = size as f64 / 2.0;
    ((i as f64 + 0.5 - half) * resolution, (j as f64 + 0.5 - half) * resolution)
}

/// Resamples `src` into the destination ego frame. `rel` is the pose of the
/// source ego expressed in the destination frame; only x, y and yaw are used.
/// Cells falling outside the source footprint take the unknown prior.
pub fn transform_grid(src: &BevGrid, rel: &Pose) -> BevGrid {
    let yaw = rel.yaw();
    let (s, c) = yaw.sin_cos();
    let (tx, ty) = (rel.position.x, rel.position.y);
    let n = src.size;
    let mut cells = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let (x, y) = cell_center(n, src.resolution, i, j);
            let (dx, dy) = (x - tx, y - ty);
            // R(yaw)^T (p - t)
            let sx = c * dx + s * dy;
            let sy = -s * dx + c * dy;
            cells.push(match src.index_of(sx, sy) {
                Some((si, sj)) => src.get(si, sj),
                None => UNKNOWN,
            });
        }
    }
    BevGrid { size: n, resolution: src.resolution, cells }
}

fn logit(p: f32) -> f64 {
    let p = (p as f64).clamp(FUSE_CLAMP.0 as f64, FUSE_CLAMP.1 as f64);
    (p / (1.0 - p)).ln()
}

/// Log-odds fusion of neighbor grids into the ego grid. Neighbors whose
/// position uncertainty norm exceeds `gate_sigma` are skipped. With nothing to
/// fuse the ego grid is returned unchanged.
pub fn fuse(ego: &BevGrid, neighbors: &[(BevGrid, PoseEstimate)], gate_sigma: f64) -> Result<BevGrid, BevError> {
    let accepted: Vec<BevGrid> = neighbors
        .iter()
        .filter(|(_, est)| est.sigma_p.norm() <= gate_sigma)
        .map(|(g, est)| {
            ego.same_shape(g)?;
            Ok(transform_grid(g, &est.pose()))
        })
        .collect::<Result<_, BevError>>()?;
    if accepted.is_empty() {
        return Ok(ego.clone());
    }
    let cells = (0..ego.cells.len())
        .map(|k| {
            let l = logit(ego.cells[k]) + accepted.iter().map(|g| logit(g.cells[k])).sum::<f64>();
            let p = 1.0 / (1.0 + (-l).exp());
            (p as f32).clamp(FUSE_CLAMP.0, FUSE_CLAMP.1)
        })
        .collect();
    Ok(BevGrid { size: ego.size, resolution: ego.resolution, cells })
}

/// Dice of the ego-only and fused predictions against the truth grid.
pub fn coverage_gain(
    truth: &BevGrid,
    ego_only: &BevGrid,
    fused: &BevGrid,
) -> Result<(f64, f64), crate::metrics::MetricsError> {
    let t = crate::metrics::DEFAULT_BIN_THRESHOLD;
    let (dice_ego, _) = crate::metrics::dice_iou(truth, ego_only, t)?;
    let (dice_fused, _) = crate::metrics::dice_iou(truth, fused, t)?;
    Ok((dice_ego, dice_fused))
}

/// Convenience: identity planar pose shifted by `(x, y)` and rotated by `yaw`.
pub fn planar_rel(x: f64, y: f64, yaw: f64) -> Pose {
    Pose::new(Vec3::new(x, y, 0.0), UnitQuat::from_yaw(yaw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn pattern(n: usize) -> BevGrid {
        let cells = (0..n * n).map(|k| ((k * 37 + 11) % 101) as f32 / 100.0).collect();
        BevGrid::from_cells(n, 6.0 / n as f64, cells).unwrap()
    }

    fn est_at(rel: Pose, sigma: f64) -> PoseEstimate {
        PoseEstimate::from_pose(0, 1, rel, Vec3::new(sigma, sigma, sigma), 0.01)
    }

    #[test]
    fn identity_transform_is_exact() {
        let g = pattern(64);
        assert_eq!(transform_grid(&g, &Pose::IDENTITY), g);
    }

    #[test]
    fn half_turn_reverses_indices() {
        let g = pattern(64);
        let t = transform_grid(&g, &planar_rel(0.0, 0.0, PI));
        for i in 0..64 {
            for j in 0..64 {
                assert_eq!(t.get(i, j), g.get(63 - i, 63 - j), "cell {i},{j}");
            }
        }
    }

    #[test]
    fn integer_shift_leaves_unknown_band() {
        let g = pattern(64);
        let k = 5;
        let t = transform_grid(&g, &planar_rel(k as f64 * g.resolution(), 0.0, 0.0));
        for i in 0..64 {
            for j in 0..64 {
                let expect = if i < k { UNKNOWN } else { g.get(i - k, j) };
                assert_eq!(t.get(i, j), expect);
            }
        }
    }

    #[test]
    fn fuse_without_neighbors_is_self_loop() {
        let g = pattern(16);
        assert_eq!(fuse(&g, &[], 1.0).unwrap(), g);
    }

    #[test]
    fn fuse_reinforces_agreement() {
        let g = BevGrid::from_fn(16, 6.0 / 16.0, |x, _| if x > 0.0 { 0.8 } else { 0.3 }).unwrap();
        let f = fuse(&g, &[(g.clone(), est_at(Pose::IDENTITY, 0.1))], 1.0).unwrap();
        for (a, b) in g.cells().iter().zip(f.cells()) {
            assert!((b - 0.5).abs() > (a - 0.5).abs());
            assert!((b - 0.5).signum() == (a - 0.5).signum());
        }
    }

    #[test]
    fn fuse_gate_skips_uncertain_neighbor() {
        let g = pattern(16);
        let other = BevGrid::filled(16, 6.0 / 16.0, 0.9).unwrap();
        let f = fuse(&g, &[(other, est_at(Pose::IDENTITY, 2.0))], 1.0).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn fuse_rejects_shape_mismatch() {
        let g = pattern(16);
        let other = pattern(8);
        assert!(matches!(fuse(&g, &[(other, est_at(Pose::IDENTITY, 0.1))], 1.0), Err(BevError::ShapeMismatch(..))));
    }

    #[test]
    fn blob_roundtrip_and_header() {
        let g = pattern(64);
        let blob = g.to_blob();
        assert_eq!(blob.len(), 16 + 64 * 64 * 4);
        assert_eq!(&blob[0..4], &64u32.to_le_bytes());
        assert_eq!(&blob[8..12], &0.09375f32.to_le_bytes());
        assert_eq!(BevGrid::read_blob(blob.as_slice()).unwrap(), g);
        assert_eq!(BevGrid::from_base64(&g.to_base64()).unwrap(), g);
        assert!(matches!(BevGrid::read_blob(&blob[..100]), Err(BevError::Truncated)));
    }

    #[test]
    fn rejects_out_of_range_cells() {
        assert!(matches!(BevGrid::from_cells(1, 1.0, vec![1.5]), Err(BevError::BadCell(_))));
        assert!(matches!(BevGrid::from_cells(2, 1.0, vec![0.5]), Err(BevError::CellCount { .. })));
    }

    #[test]
    fn coverage_gain_equal_when_fused_is_ego() {
        let truth = BevGrid::from_fn(16, 6.0 / 16.0, |x, _| if x > 1.0 { 1.0 } else { 0.0 }).unwrap();
        let ego = BevGrid::from_fn(16, 6.0 / 16.0, |x, y| if x > 1.0 && y > 0.0 { 0.9 } else { 0.5 }).unwrap();
        let (a, b) = coverage_gain(&truth, &ego, &ego).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn coverage_gain_neighbor_reveals_unknown_region() {
        // Ego knows the occupied band on its left half only; the neighbor, seen at
        // identity, knows the right half.
        let res = 6.0 / 16.0;
        let truth = BevGrid::from_fn(16, res, |x, _| if x > 1.0 { 1.0 } else { 0.0 }).unwrap();
        let ego = BevGrid::from_fn(16, res, |x, y| match (x > 1.0, y < 0.0) {
            (true, true) => 0.9,
            (false, true) => 0.1,
            _ => 0.5,
        })
        .unwrap();
        let nb = BevGrid::from_fn(16, res, |x, y| match (x > 1.0, y >= 0.0) {
            (true, true) => 0.9,
            (false, true) => 0.1,
            _ => 0.5,
        })
        .unwrap();
        let fused = fuse(&ego, &[(nb, est_at(Pose::IDENTITY, 0.1))], 1.0).unwrap();
        let (d_ego, d_fused) = coverage_gain(&truth, &ego, &fused).unwrap();
        assert!(d_fused > d_ego, "{d_fused} <= {d_ego}");
        assert!((d_fused - 1.0).abs() < 1e-12);
    }
}
