//! Pose algebra: world/ego frame transforms and rotation distances.
//!
//! Quaternions are stored scalar-first `(w, x, y, z)` and canonicalized to the
//! `w >= 0` hemisphere whenever they are built through [`UnitQuat::new`]. The
//! distance functions are sign-invariant, so canonicalization never changes
//! a metric value; it only makes serialized output deterministic.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Quaternions whose norm is within this distance of 1 are renormalized.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("quaternion norm {0} deviates from 1 by more than {NORM_TOLERANCE}")]
    NotUnit(f64),
    #[error("non-finite component")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(&self, o: &Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(&self, o: &Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Norm of the horizontal (x, y) components.
    pub fn planar_norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Serialize for Vec3 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vec3 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        let v = Vec3::from(a);
        if !v.is_finite() {
            return Err(serde::de::Error::custom("non-finite vector component"));
        }
        Ok(v)
    }
}

/// Unit quaternion, scalar first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuat {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl UnitQuat {
    pub const IDENTITY: UnitQuat = UnitQuat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Builds a canonical unit quaternion, renormalizing small norm drift.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        if !(w.is_finite() && x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(GeometryError::NotUnit(n));
        }
        // Rounding-level drift is kept as is so serialization round-trips bit-exactly.
        if (n - 1.0).abs() <= 1e-12 {
            return Ok(Self::from_raw_normalized(w, x, y, z));
        }
        Ok(Self::from_raw_normalized(w / n, x / n, y / n, z / n))
    }

    /// Normalizes any non-zero finite 4-vector.
    pub fn normalize(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n == 0.0 {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self::from_raw_normalized(w / n, x / n, y / n, z / n))
    }

    fn from_raw_normalized(w: f64, x: f64, y: f64, z: f64) -> Self {
        let q = UnitQuat { w, x, y, z };
        q.canonical()
    }

    /// Same rotation on the `w >= 0` hemisphere; ties on `w == 0` are broken on
    /// the first non-zero vector component.
    pub fn canonical(self) -> Self {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else if self.x != 0.0 {
            self.x < 0.0
        } else if self.y != 0.0 {
            self.y < 0.0
        } else {
            self.z < 0.0
        };
        if flip {
            UnitQuat { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
        } else {
            self
        }
    }

    pub fn from_axis_angle(axis: Vec3, angle_rad: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle_rad == 0.0 {
            return Self::IDENTITY;
        }
        let a = axis * (1.0 / n);
        let (s, c) = (0.5 * angle_rad).sin_cos();
        Self::from_raw_normalized(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn from_yaw(yaw_rad: f64) -> Self {
        Self::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), yaw_rad)
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn conjugate(&self) -> Self {
        UnitQuat { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn inverse(&self) -> Self {
        self.conjugate()
    }

    /// Hamilton product `self * o`, renormalized and canonicalized.
    pub fn compose(&self, o: &UnitQuat) -> Self {
        let (a, b) = (self, o);
        let w = a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z;
        let x = a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y;
        let y = a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x;
        let z = a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w;
        let n = (w * w + x * x + y * y + z * z).sqrt();
        Self::from_raw_normalized(w / n, x / n, y / n, z / n)
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        // v' = v + 2w(u x v) + 2 u x (u x v)
        let u = Vec3::new(self.x, self.y, self.z);
        let t = u.cross(&v) * 2.0;
        v + t * self.w + u.cross(&t)
    }

    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    /// Heading of the rotated x axis in the horizontal plane.
    pub fn yaw(&self) -> f64 {
        let f = self.rotate(Vec3::new(1.0, 0.0, 0.0));
        f.y.atan2(f.x)
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let v = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        2.0 * v.atan2(self.w.abs())
    }
}

/// The antipodal quaternion. Represents the same rotation; the result is not
/// canonicalized, which is what makes double-cover checks meaningful.
impl Neg for UnitQuat {
    type Output = UnitQuat;
    fn neg(self) -> UnitQuat {
        UnitQuat { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
    }
}

impl Default for UnitQuat {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl fmt::Display for UnitQuat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.w, self.x, self.y, self.z)
    }
}

impl Serialize for UnitQuat {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.canonical().to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for UnitQuat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let a = <[f64; 4]>::deserialize(d)?;
        UnitQuat::new(a[0], a[1], a[2], a[3]).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub rotation: UnitQuat,
}

impl Pose {
    pub const IDENTITY: Pose = Pose { position: Vec3::ZERO, rotation: UnitQuat::IDENTITY };

    pub fn new(position: Vec3, rotation: UnitQuat) -> Self {
        Self { position, rotation }
    }

    pub fn planar(x: f64, y: f64, yaw_rad: f64) -> Self {
        Self::new(Vec3::new(x, y, 0.0), UnitQuat::from_yaw(yaw_rad))
    }

    /// `self ∘ rel`: the pose `rel` (expressed in `self`'s frame) mapped into
    /// the frame `self` is expressed in.
    pub fn compose(&self, rel: &Pose) -> Pose {
        Pose {
            position: self.position + self.rotation.rotate(rel.position),
            rotation: self.rotation.compose(&rel.rotation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation.inverse();
        Pose { position: -r.rotate(self.position), rotation: r }
    }

    /// Maps a point given in this pose's frame into the parent frame.
    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        self.position + self.rotation.rotate(p)
    }

    pub fn yaw(&self) -> f64 {
        self.rotation.yaw()
    }
}

/// Pose of `pose_j` expressed in the ego frame of `pose_i`.
pub fn relative_pose(pose_i: &Pose, pose_j: &Pose) -> Pose {
    let inv = pose_i.rotation.inverse();
    Pose {
        position: inv.rotate(pose_j.position - pose_i.position),
        rotation: inv.compose(&pose_j.rotation),
    }
}

/// Chordal quaternion distance, minimized over the double cover. In `[0, sqrt(2)]`
/// for unit inputs.
pub fn quat_dist(q: &UnitQuat, q_hat: &UnitQuat) -> f64 {
    let a = q.to_array();
    let b = q_hat.to_array();
    let mut minus = 0.0;
    let mut plus = 0.0;
    for k in 0..4 {
        minus += (a[k] - b[k]).powi(2);
        plus += (a[k] + b[k]).powi(2);
    }
    minus.min(plus).sqrt()
}

/// Geodesic rotation distance in degrees, in `[0, 180]`. Equal to
/// `4 asin(d/2)` with `d = quat_dist(q, q_hat)`; evaluated as
/// `2 atan2(|v|, |w|)` of the relative rotation, which stays accurate near
/// 0 and 180 degrees.
pub fn rot_geodesic_deg(q: &UnitQuat, q_hat: &UnitQuat) -> f64 {
    let [w, x, y, z] = q.inverse().compose(q_hat).to_array();
    let v = (x * x + y * y + z * z).sqrt();
    (2.0 * v.atan2(w.abs())).to_degrees().clamp(0.0, 180.0)
}

pub fn pos_dist(p: &Vec3, p_hat: &Vec3) -> f64 {
    (*p - *p_hat).norm()
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    r
}
