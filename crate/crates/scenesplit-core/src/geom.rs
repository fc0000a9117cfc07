//! Minimal 3D geometry: vectors, rotations, rigid transforms, boxes, rays and
//! the pinhole camera model shared by the synthesizer, the renderer and the
//! editor.
//!
//! Conventions used throughout the crate:
//! - world space is right-handed with +z up; the ground plane is z = 0
//! - camera space is x right, y down, z forward (image rows grow downward)
//! - a ray direction is unit length, so the ray parameter t is Euclidean
//!   distance; depth maps store that t
//! - pixel (ix, iy) covers the continuous square [ix, ix+1) x [iy, iy+1) and
//!   its center is (ix + 0.5, iy + 0.5)

use crate::error::{Error, Result};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub const fn vec3(x: f64, y: f64, z: f64) -> Vec3 {
    Vec3 { x, y, z }
}

impl Vec3 {
    pub const ZERO: Vec3 = vec3(0.0, 0.0, 0.0);

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        vec3(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn length(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let l = self.length();
        assert!(l > 0.0, "normalizing zero vector");
        self / l
    }

    pub fn min(self, o: Vec3) -> Vec3 {
        vec3(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max(self, o: Vec3) -> Vec3 {
        vec3(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn abs(self) -> Vec3 {
        vec3(self.x.abs(), self.y.abs(), self.z.abs())
    }

    pub fn max_component(self) -> f64 {
        self.x.max(self.y).max(self.z)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Vec3 {
        vec3(a[0], a[1], a[2])
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        vec3(self.x + o.x, self.y + o.y, self.z + o.z)
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
        vec3(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        vec3(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        vec3(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        vec3(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3x3 matrix, used only for rotations here.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3 {
    pub rows: [[f64; 3]; 3],
}

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3 {
        rows: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    pub fn from_cols(x: Vec3, y: Vec3, z: Vec3) -> Mat3 {
        Mat3 {
            rows: [[x.x, y.x, z.x], [x.y, y.y, z.y], [x.z, y.z, z.z]],
        }
    }

    pub fn col(&self, i: usize) -> Vec3 {
        vec3(self.rows[0][i], self.rows[1][i], self.rows[2][i])
    }

    pub fn transpose(&self) -> Mat3 {
        let r = &self.rows;
        Mat3 {
            rows: [
                [r[0][0], r[1][0], r[2][0]],
                [r[0][1], r[1][1], r[2][1]],
                [r[0][2], r[1][2], r[2][2]],
            ],
        }
    }

    pub fn det(&self) -> f64 {
        let r = &self.rows;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let r = &self.rows;
        vec3(
            r[0][0] * v.x + r[0][1] * v.y + r[0][2] * v.z,
            r[1][0] * v.x + r[1][1] * v.y + r[1][2] * v.z,
            r[2][0] * v.x + r[2][1] * v.y + r[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut rows = [[0.0; 3]; 3];
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.rows[i][k] * o.rows[k][j]).sum();
            }
        }
        Mat3 { rows }
    }

    /// Rodrigues rotation about a unit axis.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Mat3 {
        let a = axis.normalized();
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        Mat3 {
            rows: [
                [
                    t * a.x * a.x + c,
                    t * a.x * a.y - s * a.z,
                    t * a.x * a.z + s * a.y,
                ],
                [
                    t * a.x * a.y + s * a.z,
                    t * a.y * a.y + c,
                    t * a.y * a.z - s * a.x,
                ],
                [
                    t * a.x * a.z - s * a.y,
                    t * a.y * a.z + s * a.x,
                    t * a.z * a.z + c,
                ],
            ],
        }
    }

    /// True when columns are orthonormal and the determinant is +1 (within tol).
    pub fn is_rotation(&self, tol: f64) -> bool {
        let t = self.mul_mat(&self.transpose());
        let mut dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let id = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((t.rows[i][j] - id).abs());
            }
        }
        dev <= tol && (self.det() - 1.0).abs() <= tol
    }
}

/// Rigid transform p -> rotation * p + translation (maps local to world).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: Mat3::IDENTITY,
        translation: Vec3::ZERO,
    };

    pub fn translation_only(t: Vec3) -> RigidTransform {
        RigidTransform {
            rotation: Mat3::IDENTITY,
            translation: t,
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p) + self.translation
    }

    pub fn apply_dir(&self, d: Vec3) -> Vec3 {
        self.rotation.mul_vec(d)
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -rt.mul_vec(self.translation),
        }
    }

    /// self applied after `inner`: (self * inner)(p) = self(inner(p)).
    pub fn compose(&self, inner: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.mul_mat(&inner.rotation),
            translation: self.rotation.mul_vec(inner.translation) + self.translation,
        }
    }

    /// Row-major 4x4 matrix with [0,0,0,1] bottom row.
    pub fn to_mat4_row_major(&self) -> [f64; 16] {
        let r = &self.rotation.rows;
        let t = self.translation;
        [
            r[0][0], r[0][1], r[0][2], t.x, //
            r[1][0], r[1][1], r[1][2], t.y, //
            r[2][0], r[2][1], r[2][2], t.z, //
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn from_mat4_row_major(m: &[f64; 16]) -> Result<RigidTransform> {
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::InvalidInput(
                "4x4 transform bottom row must be [0,0,0,1]".into(),
            ));
        }
        Ok(RigidTransform {
            rotation: Mat3 {
                rows: [
                    [m[0], m[1], m[2]],
                    [m[4], m[5], m[6]],
                    [m[8], m[9], m[10]],
                ],
            },
            translation: vec3(m[3], m[7], m[11]),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Aabb {
        Aabb { min, max }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    pub fn contains_box(&self, o: &Aabb) -> bool {
        self.contains(o.min) && self.contains(o.max)
    }

    /// Grow the box by the same margin on every side (negative shrinks).
    pub fn inflated(&self, m: f64) -> Aabb {
        Aabb {
            min: self.min - vec3(m, m, m),
            max: self.max + vec3(m, m, m),
        }
    }

    /// Scale about the center; factor 2 doubles every extent.
    pub fn scaled_about_center(&self, factor: f64) -> Aabb {
        let c = self.center();
        let h = self.extent() * (0.5 * factor);
        Aabb {
            min: c - h,
            max: c + h,
        }
    }

    /// Slab test; returns the parameter interval where the ray is inside.
    pub fn intersect_ray(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        let o = ray.origin.to_array();
        let d = ray.dir.to_array();
        let lo = self.min.to_array();
        let hi = self.max.to_array();
        for a in 0..3 {
            if d[a].abs() < 1e-12 {
                if o[a] < lo[a] || o[a] > hi[a] {
                    return None;
                }
            } else {
                let inv = 1.0 / d[a];
                let (ta, tb) = ((lo[a] - o[a]) * inv, (hi[a] - o[a]) * inv);
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        if t0 <= t1 {
            Some((t0, t1))
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Projection of a world point into a camera: continuous pixel position plus
/// Euclidean distance from the camera center (the same quantity depth maps
/// store).
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub px: f64,
    pub py: f64,
    pub distance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub cam_to_world: RigidTransform,
}

impl CameraModel {
    /// Aim a camera at `target` from `eye`. `up` picks the roll; if the view
    /// direction is parallel to it, +x is used instead.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        width: usize,
        height: usize,
        fov_y_deg: f64,
    ) -> Result<CameraModel> {
        let forward = target - eye;
        if forward.length() < 1e-9 {
            return Err(Error::InvalidInput("camera eye coincides with target".into()));
        }
        let forward = forward.normalized();
        let mut right = forward.cross(up);
        if right.length() < 1e-6 {
            right = forward.cross(vec3(1.0, 0.0, 0.0));
        }
        let right = right.normalized();
        let down = forward.cross(right);
        let rotation = Mat3::from_cols(right, down, forward);
        let fy = height as f64 / (2.0 * (fov_y_deg.to_radians() / 2.0).tan());
        let cam = CameraModel {
            width,
            height,
            fx: fy,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            cam_to_world: RigidTransform {
                rotation,
                translation: eye,
            },
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("camera with zero-sized image".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput(format!(
                "camera focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !self.cam_to_world.rotation.is_rotation(1e-6) {
            return Err(Error::InvalidInput(
                "camera rotation is not orthonormal with determinant +1".into(),
            ));
        }
        Ok(())
    }

    pub fn eye(&self) -> Vec3 {
        self.cam_to_world.translation
    }

    /// Ray through continuous image position (px, py); (ix+0.5, iy+0.5) is the
    /// center of pixel (ix, iy).
    pub fn ray_through(&self, px: f64, py: f64) -> Ray {
        let xc = (px - self.cx) / self.fx;
        let yc = (py - self.cy) / self.fy;
        let dir_cam = vec3(xc, yc, 1.0).normalized();
        Ray {
            origin: self.eye(),
            dir: self.cam_to_world.apply_dir(dir_cam),
        }
    }

    /// Ray through the center of an integer pixel; errors when outside.
    pub fn pixel_ray(&self, ix: usize, iy: usize) -> Result<Ray> {
        if ix >= self.width || iy >= self.height {
            return Err(Error::InvalidInput(format!(
                "pixel ({ix}, {iy}) outside {}x{} image",
                self.width, self.height
            )));
        }
        Ok(self.ray_through(ix as f64 + 0.5, iy as f64 + 0.5))
    }

    /// None when the point is behind the camera.
    pub fn project(&self, p: Vec3) -> Option<Projection> {
        let pc = self.cam_to_world.inverse().apply(p);
        if pc.z <= 1e-9 {
            return None;
        }
        Some(Projection {
            px: self.fx * pc.x / pc.z + self.cx,
            py: self.fy * pc.y / pc.z + self.cy,
            distance: pc.length(),
        })
    }

    /// Camera for the same view at a different image resolution.
    pub fn resized(&self, width: usize, height: usize) -> CameraModel {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        CameraModel {
            width,
            height,
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            cam_to_world: self.cam_to_world,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_roundtrip_and_det() {
        let r = Mat3::from_axis_angle(vec3(0.3, -0.2, 0.9), 1.1);
        assert!(r.is_rotation(1e-12));
        let v = vec3(0.4, -2.0, 0.7);
        let back = r.transpose().mul_vec(r.mul_vec(v));
        assert!((back - v).length() < 1e-12);
    }

    #[test]
    fn rigid_inverse_composes_to_identity() {
        let t = RigidTransform {
            rotation: Mat3::from_axis_angle(vec3(1.0, 2.0, 0.5), -0.7),
            translation: vec3(1.0, -3.0, 2.0),
        };
        let id = t.compose(&t.inverse());
        let p = vec3(0.2, 0.4, -1.3);
        assert!((id.apply(p) - p).length() < 1e-12);
    }

    #[test]
    fn mat4_roundtrip() {
        let t = RigidTransform {
            rotation: Mat3::from_axis_angle(vec3(0.0, 0.0, 1.0), 0.4),
            translation: vec3(5.0, 6.0, 7.0),
        };
        let m = t.to_mat4_row_major();
        let back = RigidTransform::from_mat4_row_major(&m).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn mat4_rejects_bad_bottom_row() {
        let mut m = RigidTransform::IDENTITY.to_mat4_row_major();
        m[15] = 2.0;
        assert!(RigidTransform::from_mat4_row_major(&m).is_err());
    }

    #[test]
    fn look_at_camera_is_valid_and_points_forward() {
        let cam = CameraModel::look_at(
            vec3(3.0, 1.0, 2.0),
            vec3(0.0, 0.0, 0.3),
            vec3(0.0, 0.0, 1.0),
            64,
            48,
            45.0,
        )
        .unwrap();
        cam.validate().unwrap();
        // The central ray should head from the eye toward the target.
        let r = cam.ray_through(cam.cx, cam.cy);
        let expect = (vec3(0.0, 0.0, 0.3) - cam.eye()).normalized();
        assert!((r.dir - expect).length() < 1e-9);
        // Moving down in the image (larger py) should decrease world z for an
        // upright camera.
        let lo = cam.ray_through(cam.cx, cam.cy + 10.0);
        assert!(lo.dir.z < r.dir.z);
    }

    #[test]
    fn straight_down_camera_falls_back_to_alternate_roll() {
        let cam = CameraModel::look_at(
            vec3(0.0, 0.0, 4.0),
            Vec3::ZERO,
            vec3(0.0, 0.0, 1.0),
            32,
            32,
            50.0,
        )
        .unwrap();
        cam.validate().unwrap();
        assert!((cam.ray_through(cam.cx, cam.cy).dir - vec3(0.0, 0.0, -1.0)).length() < 1e-9);
    }

    #[test]
    fn project_inverts_pixel_ray() {
        let cam = CameraModel::look_at(
            vec3(2.0, -3.0, 1.5),
            vec3(0.1, 0.2, 0.3),
            vec3(0.0, 0.0, 1.0),
            96,
            96,
            42.0,
        )
        .unwrap();
        for &(ix, iy) in &[(0usize, 0usize), (95, 95), (48, 20), (7, 63)] {
            let ray = cam.pixel_ray(ix, iy).unwrap();
            let t = 3.7;
            let p = ray.at(t);
            let proj = cam.project(p).unwrap();
            assert!((proj.px - (ix as f64 + 0.5)).abs() < 1e-9);
            assert!((proj.py - (iy as f64 + 0.5)).abs() < 1e-9);
            assert!((proj.distance - t).abs() < 1e-9);
        }
    }

    #[test]
    fn pixel_ray_rejects_out_of_bounds() {
        let cam = CameraModel::look_at(
            vec3(0.0, -2.0, 1.0),
            Vec3::ZERO,
            vec3(0.0, 0.0, 1.0),
            16,
            16,
            45.0,
        )
        .unwrap();
        assert!(cam.pixel_ray(16, 0).is_err());
        assert!(cam.pixel_ray(0, 16).is_err());
    }

    #[test]
    fn aabb_ray_slab() {
        let b = Aabb::new(vec3(-1.0, -1.0, -1.0), vec3(1.0, 1.0, 1.0));
        let hit = b
            .intersect_ray(&Ray {
                origin: vec3(-5.0, 0.0, 0.0),
                dir: vec3(1.0, 0.0, 0.0),
            })
            .unwrap();
        assert!((hit.0 - 4.0).abs() < 1e-12 && (hit.1 - 6.0).abs() < 1e-12);
        assert!(b
            .intersect_ray(&Ray {
                origin: vec3(-5.0, 2.0, 0.0),
                dir: vec3(1.0, 0.0, 0.0),
            })
            .is_none());
    }
}
