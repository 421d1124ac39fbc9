use std::f64::consts::PI;

use rand::Rng;

use super::Scene;
use crate::boxgeom::{rotate_z, BoundingBox};
use crate::Point3;

/// Largest absolute z-rotation applied during training.
pub const MAX_ROTATION: f64 = PI / 6.0;
pub const SCALE_RANGE: (f64, f64) = (0.85, 1.15);

/// One random draw of the training-time scene transform.
/// Applied in order: x-flip, y-flip, rotation about z, uniform scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip_x: bool,
    pub flip_y: bool,
    pub rotation: f64,
    pub scale: f64,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        flip_x: false,
        flip_y: false,
        rotation: 0.0,
        scale: 1.0,
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            flip_x: rng.random_bool(0.5),
            flip_y: rng.random_bool(0.5),
            rotation: rng.random_range(-MAX_ROTATION..=MAX_ROTATION),
            scale: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
        }
    }

    pub fn apply_point(&self, p: &Point3) -> Point3 {
        let mut q = *p;
        if self.flip_x {
            q[0] = -q[0];
        }
        if self.flip_y {
            q[1] = -q[1];
        }
        let r = rotate_z(q, self.rotation);
        [r[0] * self.scale, r[1] * self.scale, r[2] * self.scale]
    }

    pub fn apply_heading(&self, theta: f64) -> f64 {
        let mut t = theta;
        if self.flip_x {
            t = PI - t;
        }
        if self.flip_y {
            t = -t;
        }
        t + self.rotation
    }

    pub fn apply_box(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox {
            center: self.apply_point(&b.center),
            size: b.size.map(|s| s * self.scale),
            heading: crate::boxgeom::normalize_angle(self.apply_heading(b.heading)),
            ..*b
        }
    }

    /// Each flip mirrors the scene, which exchanges the left and right faces.
    pub fn swaps_left_right(&self) -> bool {
        self.flip_x != self.flip_y
    }
}

pub fn augment(scene: &Scene, params: &AugmentParams) -> Scene {
    Scene {
        points: scene.points.iter().map(|p| params.apply_point(p)).collect(),
        boxes: scene.boxes.iter().map(|b| params.apply_box(b)).collect(),
        visible_faces: scene.visible_faces.clone(),
        candidate_faces: scene.candidate_faces.clone(),
    }
}
