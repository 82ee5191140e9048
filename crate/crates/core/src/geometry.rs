//! Planar poses and small rigid-motion helpers shared by every module.

use std::f64::consts::PI;

use nalgebra::{Rotation2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// Object pose on the table plane: position in meters and yaw about the
/// world z axis in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PlanarPose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl PlanarPose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn translation(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn rotation(&self) -> Rotation2<f64> {
        Rotation2::new(self.theta)
    }

    /// Maps a point from the object frame into the world frame (planar part;
    /// z passes through untouched).
    pub fn to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.theta.sin_cos();
        Vector3::new(c * p.x - s * p.y + self.x, s * p.x + c * p.y + self.y, p.z)
    }

    /// Maps a world point into the object frame.
    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.theta.sin_cos();
        let dx = p.x - self.x;
        let dy = p.y - self.y;
        Vector3::new(c * dx + s * dy, -s * dx + c * dy, p.z)
    }

    pub fn to_world_2d(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let w = self.to_world(&Vector3::new(p.x, p.y, 0.0));
        Vector2::new(w.x, w.y)
    }

    pub fn to_local_2d(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let l = self.to_local(&Vector3::new(p.x, p.y, 0.0));
        Vector2::new(l.x, l.y)
    }

    /// Rigid motion taking an object at `from` to this pose:
    /// `self ∘ from⁻¹`.
    pub fn relative_to(&self, from: &PlanarPose) -> PlanarPose {
        let dtheta = self.theta - from.theta;
        let (s, c) = dtheta.sin_cos();
        let tx = self.x - (c * from.x - s * from.y);
        let ty = self.y - (s * from.x + c * from.y);
        PlanarPose {
            x: tx,
            y: ty,
            theta: wrap_angle(dtheta),
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.theta]
    }
}

/// Unit vector for a planar heading.
pub fn heading(angle: f64) -> Vector2<f64> {
    let (s, c) = angle.sin_cos();
    Vector2::new(c, s)
}

/// z component of the planar cross product.
pub fn cross2(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}
