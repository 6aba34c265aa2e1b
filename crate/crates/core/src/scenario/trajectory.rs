//! Leader reference trajectories.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};

use crate::geometry::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    /// x = A sin ωt, y = B sin ωt cos ωt.
    Fig8,
    /// Rounded rectangle centered on the origin, traversed counter-clockwise
    /// at constant speed from the middle of the bottom edge.
    Rect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadingMode {
    /// Face the direction of motion.
    Dynamic,
    /// Keep the heading the path has at t = 0.
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySpec {
    pub kind: PathKind,
    pub heading: HeadingMode,
    /// Seconds per lap.
    pub period: f64,
    pub amplitude_x: f64,
    pub amplitude_y: f64,
    pub rect_width: f64,
    pub rect_height: f64,
    pub corner_radius: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            kind: PathKind::Fig8,
            heading: HeadingMode::Dynamic,
            period: 40.0,
            amplitude_x: 2.0,
            amplitude_y: 2.0,
            rect_width: 4.0,
            rect_height: 3.0,
            corner_radius: 0.5,
        }
    }
}

impl TrajectorySpec {
    pub fn fig8_dynamic() -> Self {
        Self::default()
    }

    pub fn fig8_static() -> Self {
        Self { heading: HeadingMode::Static, ..Self::default() }
    }

    pub fn rect_dynamic() -> Self {
        Self { kind: PathKind::Rect, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.period > 0.0) {
            return Err("trajectory period must be positive".into());
        }
        if self.kind == PathKind::Rect {
            let r = self.corner_radius;
            if !(r >= 0.0) || 2.0 * r > self.rect_width || 2.0 * r > self.rect_height {
                return Err("corner radius must fit inside the rectangle".into());
            }
        }
        Ok(())
    }

    fn rect_perimeter(&self) -> f64 {
        let r = self.corner_radius;
        2.0 * (self.rect_width + self.rect_height) - 8.0 * r + TAU * r
    }

    /// Position and velocity at time `t`.
    pub fn position_velocity(&self, t: f64) -> ([f64; 2], [f64; 2]) {
        match self.kind {
            PathKind::Fig8 => {
                let w = TAU / self.period;
                let (s, c) = (w * t).sin_cos();
                let (a, b) = (self.amplitude_x, self.amplitude_y);
                ([a * s, b * s * c], [a * w * c, b * w * (c * c - s * s)])
            }
            PathKind::Rect => self.rect_at(t),
        }
    }

    fn rect_at(&self, t: f64) -> ([f64; 2], [f64; 2]) {
        let (hw, hh, r) = (0.5 * self.rect_width, 0.5 * self.rect_height, self.corner_radius);
        let perim = self.rect_perimeter();
        let speed = perim / self.period;
        let mut s = (speed * t).rem_euclid(perim);
        // Straight pieces (start, direction, length) interleaved with quarter arcs.
        let straights = [
            ([0.0, -hh], 0.0, hw - r),
            ([hw, -hh + r], FRAC_PI_2, 2.0 * hh - 2.0 * r),
            ([hw - r, hh], PI, 2.0 * hw - 2.0 * r),
            ([-hw, hh - r], 3.0 * FRAC_PI_2, 2.0 * hh - 2.0 * r),
            ([-hw + r, -hh], 0.0, hw - r),
        ];
        let arc_centers = [[hw - r, -hh + r], [hw - r, hh - r], [-hw + r, hh - r], [-hw + r, -hh + r]];
        let arc_len = FRAC_PI_2 * r;
        for (k, (p0, dir, len)) in straights.iter().enumerate() {
            let (sd, cd) = dir.sin_cos();
            if s <= *len || k == straights.len() - 1 {
                return ([p0[0] + cd * s, p0[1] + sd * s], [cd * speed, sd * speed]);
            }
            s -= len;
            if s <= arc_len {
                let c = arc_centers[k];
                // Radius direction starts perpendicular (right-hand side) of travel.
                let a = dir - FRAC_PI_2 + if r > 0.0 { s / r } else { 0.0 };
                let heading = a + FRAC_PI_2;
                return ([c[0] + r * a.cos(), c[1] + r * a.sin()], [heading.cos() * speed, heading.sin() * speed]);
            }
            s -= arc_len;
        }
        unreachable!("last straight catches the remainder")
    }

    /// Heading of the velocity at `t`; falls back to the t = 0 heading when at rest.
    fn motion_heading(&self, t: f64) -> f64 {
        let (_, v) = self.position_velocity(t);
        if v[0].hypot(v[1]) > 1e-12 {
            v[1].atan2(v[0])
        } else {
            let (_, v0) = self.position_velocity(0.0);
            v0[1].atan2(v0[0])
        }
    }
}

/// Leader pose at time `t` (seconds).
pub fn leader_pose(spec: &TrajectorySpec, t: f64) -> Pose {
    let (p, _) = spec.position_velocity(t);
    let yaw = match spec.heading {
        HeadingMode::Dynamic => spec.motion_heading(t),
        HeadingMode::Static => spec.motion_heading(0.0),
    };
    Pose::planar(p[0], p[1], yaw)
}
