//! Calibrated synthetic noise for relative-pose estimates.
//!
//! Each edge draws a latent difficulty `xi ~ N(0, 1)` that scales both the
//! position and the rotation noise by `exp(spread * xi)`. Error magnitudes are
//! half-normal given that scale, so the reported sigma is informative about the
//! realized error. The base scale is solved so the marginal median of the
//! error magnitude equals the configured median; with `spread = 0` this is the
//! closed form `m / (sqrt(2) erfinv(1/2))`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use super::{Observation, PoseEstimate};
use crate::geometry::{relative_pose, Pose, UnitQuat, Vec3};
use crate::metrics::is_invisible_rel;

/// Median of the standard half-normal distribution, `sqrt(2) erfinv(1/2)`.
pub const HALF_NORMAL_MEDIAN: f64 = 0.674_489_750_196_081_7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub median_pos_visible: f64,
    pub median_pos_invisible: f64,
    pub median_rot_visible: f64,
    pub median_rot_invisible: f64,
    /// Multiplier applied to reported sigmas; 1 is calibrated.
    pub miscalibration: f64,
    /// Log-scale spread of the per-edge difficulty.
    pub scale_spread: f64,
}

impl NoiseProfile {
    pub const DEFAULT_SPREAD: f64 = 0.5;

    /// Medians of the best reported model: 33 cm / 5.8 deg visible, 97 cm / 7.9 deg invisible.
    pub fn reference() -> Self {
        Self {
            median_pos_visible: 0.33,
            median_pos_invisible: 0.97,
            median_rot_visible: 5.8,
            median_rot_invisible: 7.9,
            miscalibration: 1.0,
            scale_spread: Self::DEFAULT_SPREAD,
        }
    }

    pub fn calibrate(&self) -> NoiseModel {
        assert!(
            self.median_pos_visible > 0.0
                && self.median_pos_invisible > 0.0
                && self.median_rot_visible > 0.0
                && self.median_rot_invisible > 0.0,
            "noise medians must be positive"
        );
        assert!(self.miscalibration > 0.0, "miscalibration must be positive");
        let m = mixture_median(self.scale_spread);
        NoiseModel {
            profile: *self,
            pos_scale: [self.median_pos_visible / m, self.median_pos_invisible / m],
            rot_scale_deg: [self.median_rot_visible / m, self.median_rot_invisible / m],
        }
    }
}

impl Default for NoiseProfile {
    fn default() -> Self {
        Self::reference()
    }
}

/// A profile with its base half-normal scales solved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub profile: NoiseProfile,
    /// Base scales indexed by `[visible, invisible]`.
    pub pos_scale: [f64; 2],
    pub rot_scale_deg: [f64; 2],
}

/// Median of `exp(spread * xi) * |z|` for independent standard normals.
pub fn mixture_median(spread: f64) -> f64 {
    if spread == 0.0 {
        return HALF_NORMAL_MEDIAN;
    }
    // CDF(x) = E_xi[ erf(x exp(-spread xi) / sqrt 2) ], Simpson on xi in [-10, 10].
    const N: usize = 2000;
    let h = 20.0 / N as f64;
    let nodes: Vec<(f64, f64)> = (0..=N)
        .map(|k| {
            let xi = -10.0 + k as f64 * h;
            let w = if k == 0 || k == N {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let pdf = (-0.5 * xi * xi).exp() / (2.0 * std::f64::consts::PI).sqrt();
            ((-spread * xi).exp(), w * pdf * h / 3.0)
        })
        .collect();
    let cdf = |x: f64| -> f64 {
        nodes.iter().map(|&(s, w)| w * erf(x * s / std::f64::consts::SQRT_2)).sum()
    };
    let (mut lo, mut hi) = (1e-9, 1e3);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn unit_sphere<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v * (1.0 / n);
        }
    }
}

/// Corrupts the true relative pose of `obs_j` in the frame of `obs_i`.
pub fn estimate<R: Rng + ?Sized>(obs_i: &Observation, obs_j: &Observation, model: &NoiseModel, rng: &mut R) -> PoseEstimate {
    let truth: Pose = relative_pose(&obs_i.pose_truth, &obs_j.pose_truth);
    let class = usize::from(is_invisible_rel(&truth.rotation, obs_i.fov_deg));

    let xi: f64 = rng.sample(StandardNormal);
    let difficulty = (model.profile.scale_spread * xi).exp();
    let pos_scale = model.pos_scale[class] * difficulty;
    let rot_scale_deg = model.rot_scale_deg[class] * difficulty;

    let z_pos: f64 = rng.sample(StandardNormal);
    let dir = unit_sphere(rng);
    let p_hat = truth.position + dir * (pos_scale * z_pos.abs());

    let z_rot: f64 = rng.sample(StandardNormal);
    let axis = unit_sphere(rng);
    let angle_deg = (rot_scale_deg * z_rot.abs()).min(180.0);
    // Perturbation applied in the ego frame.
    let q_hat = UnitQuat::from_axis_angle(axis, angle_deg.to_radians()).compose(&truth.rotation);

    let k = model.profile.miscalibration;
    let chord_scale = 2.0 * std::f64::consts::SQRT_2 * (0.5 * rot_scale_deg.min(180.0).to_radians()).sin();
    PoseEstimate {
        src: obs_i.node_id,
        dst: obs_j.node_id,
        p_hat,
        sigma_p: Vec3::new(pos_scale, pos_scale, pos_scale) * k,
        q_hat,
        sigma_q: chord_scale * k,
    }
}
