//! Rigid-body math plus the ray and box primitives shared by the rest of the engine.
//!
//! Conventions: right-handed frames, z-up world, quaternions written `(w, x, y, z)`,
//! angles in radians and lengths in meters.

use nalgebra::{Quaternion, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub type Vec3 = Vector3<f64>;

/// A rigid transform: rotate by `orientation`, then translate by `position`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: UnitQuaternion<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            position: Vec3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn new(position: Vec3, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(Vec3::new(x, y, z), UnitQuaternion::identity())
    }

    /// Builds a pose from a quaternion given as `(w, x, y, z)`. The quaternion is normalized.
    pub fn from_parts(position: [f64; 3], wxyz: [f64; 4]) -> Self {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        Self::new(
            Vec3::new(position[0], position[1], position[2]),
            UnitQuaternion::from_quaternion(q),
        )
    }

    /// Pose from position and SDF-style roll/pitch/yaw.
    ///
    /// The rotation is `Rz(yaw) * Ry(pitch) * Rx(roll)`, which is the same as applying
    /// roll, pitch and yaw about the fixed x, y, z axes in that order.
    pub fn from_xyz_rpy(x: f64, y: f64, z: f64, roll: f64, pitch: f64, yaw: f64) -> Self {
        Self::new(
            Vec3::new(x, y, z),
            UnitQuaternion::from_euler_angles(roll, pitch, yaw),
        )
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::new(Vec3::zeros(), UnitQuaternion::from_axis_angle(&Vec3::z_axis(), angle))
    }

    /// Rotation about an arbitrary axis through the origin. The axis is normalized.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        Self::new(
            Vec3::zeros(),
            UnitQuaternion::from_axis_angle(&Unit::new_normalize(axis), angle),
        )
    }

    /// Planar pose: translation `(x, y, 0)` and heading `theta` about z.
    pub fn from_pose2d(p: Pose2d) -> Self {
        Self::new(
            Vec3::new(p.x, p.y, 0.0),
            UnitQuaternion::from_axis_angle(&Vec3::z_axis(), p.theta),
        )
    }

    /// `self ∘ other`: `other` expressed in `self`'s frame.
    pub fn compose(&self, other: &Pose) -> Pose {
        let orientation = renormalize(self.orientation * other.orientation);
        Pose {
            position: self.position + self.orientation * other.position,
            orientation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.orientation.inverse();
        Pose {
            position: -(inv * self.position),
            orientation: inv,
        }
    }

    pub fn transform_point(&self, v: &Vec3) -> Vec3 {
        self.orientation * v + self.position
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.orientation * v
    }

    /// Quaternion as `(w, x, y, z)`.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.orientation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.position.x, self.position.y, self.position.z]
    }

    /// Roll, pitch, yaw matching [`Pose::from_xyz_rpy`].
    pub fn rpy(&self) -> (f64, f64, f64) {
        self.orientation.euler_angles()
    }

    pub fn yaw(&self) -> f64 {
        self.rpy().2
    }

    /// Linear position interpolation with spherical orientation interpolation.
    pub fn interpolate(&self, other: &Pose, s: f64) -> Pose {
        let position = self.position + (other.position - self.position) * s;
        let orientation = self
            .orientation
            .try_slerp(&other.orientation, s, 1e-12)
            .unwrap_or(self.orientation);
        Pose::new(position, renormalize(orientation))
    }

    pub fn approx_eq(&self, other: &Pose, tol: f64) -> bool {
        (self.position - other.position).norm() <= tol
            && self.orientation.angle_to(&other.orientation) <= tol
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.orientation.coords.iter().all(|v| v.is_finite())
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(q.into_inner())
}

/// Serialized as `{"position": [x, y, z], "orientation": [w, x, y, z]}`.
impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Pose", 2)?;
        st.serialize_field("position", &self.xyz())?;
        st.serialize_field("orientation", &self.wxyz())?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            position: [f64; 3],
            orientation: [f64; 4],
        }
        let r = Raw::deserialize(d)?;
        Ok(Pose::from_parts(r.position, r.orientation))
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    if !a.is_finite() {
        return a;
    }
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    // rem_euclid maps -π to π already; guard against the open bound.
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Position and heading of a mobile base in the world x-y plane.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2d {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2d {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    /// Box from two corners; coordinates are sorted per axis so the result is always valid.
    pub fn new(a: Vec3, b: Vec3) -> Self {
        Self {
            min: a.inf(&b),
            max: a.sup(&b),
        }
    }

    pub fn from_center_half_extents(center: Vec3, half: Vec3) -> Self {
        Self::new(center - half, center + half)
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extents(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn translated(&self, d: &Vec3) -> Aabb {
        Aabb {
            min: self.min + d,
            max: self.max + d,
        }
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Per-axis overlap lengths, or `None` when the boxes are disjoint or only touch.
    pub fn overlap(&self, other: &Aabb) -> Option<Vec3> {
        let mut out = Vec3::zeros();
        for i in 0..3 {
            let d = self.max[i].min(other.max[i]) - self.min[i].max(other.min[i]);
            if d <= 0.0 {
                return None;
            }
            out[i] = d;
        }
        Some(out)
    }

    /// Penetration depth: the smallest per-axis overlap.
    pub fn penetration(&self, other: &Aabb) -> Option<f64> {
        self.overlap(other).map(|o| o.min())
    }

    /// The eight corners, ordered by bits (x, y, z) of the corner index.
    pub fn corners(&self) -> [Vec3; 8] {
        let mut out = [Vec3::zeros(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            *c = Vec3::new(
                if i & 1 == 0 { self.min.x } else { self.max.x },
                if i & 2 == 0 { self.min.y } else { self.max.y },
                if i & 4 == 0 { self.min.z } else { self.max.z },
            );
        }
        out
    }

    /// Bounding box of this box after applying `pose`.
    pub fn transformed(&self, pose: &Pose) -> Aabb {
        let corners = self.corners();
        let first = pose.transform_point(&corners[0]);
        corners[1..].iter().fold(Aabb::new(first, first), |acc, c| {
            let p = pose.transform_point(c);
            Aabb::new(acc.min.inf(&p), acc.max.sup(&p))
        })
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|i| self.min[i] <= self.max[i])
    }
}

/// Ray with a unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    /// Normalizes `direction`; returns `None` for a zero or non-finite direction.
    pub fn new(origin: Vec3, direction: Vec3) -> Option<Self> {
        let n = direction.norm();
        if !(n.is_finite() && n > 0.0) {
            return None;
        }
        Some(Self {
            origin,
            direction: direction / n,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Smallest `t ≥ 0` at which the ray touches the box surface. A ray starting inside the box
/// reports its exit distance.
pub fn ray_cast_aabb(ray: &Ray, bx: &Aabb) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for i in 0..3 {
        let o = ray.origin[i];
        let d = ray.direction[i];
        if d == 0.0 {
            if o < bx.min[i] || o > bx.max[i] {
                return None;
            }
            continue;
        }
        let t1 = (bx.min[i] - o) / d;
        let t2 = (bx.max[i] - o) / d;
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        t_near = t_near.max(lo);
        t_far = t_far.min(hi);
        if t_near > t_far {
            return None;
        }
    }
    if t_far < 0.0 {
        return None;
    }
    if t_near >= 0.0 {
        Some(t_near)
    } else {
        Some(t_far)
    }
}

/// Collision shape primitives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Box { size: [f64; 3] },
    /// Axis along local z.
    Cylinder { radius: f64, length: f64 },
    Sphere { radius: f64 },
}

impl Shape {
    /// Local-frame bounding box centered at the origin.
    pub fn local_aabb(&self) -> Aabb {
        let half = match *self {
            Shape::Box { size } => Vec3::new(size[0], size[1], size[2]) * 0.5,
            Shape::Cylinder { radius, length } => Vec3::new(radius, radius, length * 0.5),
            Shape::Sphere { radius } => Vec3::new(radius, radius, radius),
        };
        Aabb::from_center_half_extents(Vec3::zeros(), half)
    }

    pub fn world_aabb(&self, pose: &Pose) -> Aabb {
        self.local_aabb().transformed(pose)
    }

    pub fn dimensions_positive(&self) -> bool {
        match *self {
            Shape::Box { size } => size.iter().all(|s| *s > 0.0),
            Shape::Cylinder { radius, length } => radius > 0.0 && length > 0.0,
            Shape::Sphere { radius } => radius > 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn assert_vec(a: Vec3, b: [f64; 3], tol: f64) {
        for i in 0..3 {
            assert!((a[i] - b[i]).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn identity_compose_is_noop() {
        let p = Pose::from_xyz_rpy(1.0, -2.0, 0.5, 0.1, 0.2, 0.3);
        assert!(Pose::identity().compose(&p).approx_eq(&p, 1e-12));
        assert!(p.compose(&Pose::identity()).approx_eq(&p, 1e-12));
    }

    #[test]
    fn translations_add() {
        let p = Pose::from_translation(1.0, 0.0, 0.0).compose(&Pose::from_translation(0.0, 2.0, 0.0));
        assert_vec(p.position, [1.0, 2.0, 0.0], 1e-12);
    }

    #[test]
    fn transform_point_cases() {
        assert_vec(Pose::identity().transform_point(&Vec3::new(1.0, 2.0, 3.0)), [1.0, 2.0, 3.0], 0.0);
        assert_vec(Pose::rot_z(FRAC_PI_2).transform_point(&Vec3::x()), [0.0, 1.0, 0.0], 1e-12);
    }

    #[test]
    fn ray_cases() {
        let bx = Aabb::new(Vec3::repeat(-1.0), Vec3::repeat(1.0));
        let r = Ray::new(Vec3::new(-2.0, 0.0, 0.0), Vec3::x()).unwrap();
        assert_eq!(ray_cast_aabb(&r, &bx), Some(1.0));
        let inside = Ray::new(Vec3::zeros(), Vec3::x()).unwrap();
        assert_eq!(ray_cast_aabb(&inside, &bx), Some(1.0));
        let away = Ray::new(Vec3::new(-2.0, 0.0, 0.0), -Vec3::x()).unwrap();
        assert_eq!(ray_cast_aabb(&away, &bx), None);
        let parallel_miss = Ray::new(Vec3::new(-2.0, 2.0, 0.0), Vec3::x()).unwrap();
        assert_eq!(ray_cast_aabb(&parallel_miss, &bx), None);
    }

    #[test]
    fn zero_direction_rejected() {
        assert!(Ray::new(Vec3::zeros(), Vec3::zeros()).is_none());
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-3.0 * FRAC_PI_2) - FRAC_PI_2).abs() < 1e-12);
        assert_eq!(wrap_angle(0.25), 0.25);
    }

    #[test]
    fn penetration_depth() {
        let a = Aabb::from_center_half_extents(Vec3::zeros(), Vec3::repeat(0.5));
        let b = a.translated(&Vec3::new(0.8, 0.0, 0.0));
        assert!((a.penetration(&b).unwrap() - 0.2).abs() < 1e-12);
        let c = a.translated(&Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(a.penetration(&c), None);
    }

    #[test]
    fn rotated_box_bounds() {
        let s = Shape::Box { size: [2.0, 1.0, 1.0] };
        let bb = s.world_aabb(&Pose::rot_z(FRAC_PI_2));
        assert_vec(bb.min, [-0.5, -1.0, -0.5], 1e-12);
        assert_vec(bb.max, [0.5, 1.0, 0.5], 1e-12);
    }
}
