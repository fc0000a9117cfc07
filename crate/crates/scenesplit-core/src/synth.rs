//! Procedural scene synthesis with exact ground truth.
//!
//! Scenes are a textured ground plane (z = 0) plus 2..4 solid primitives
//! resting on it, lit by one directional light with a Lambertian model and a
//! constant ambient term (no cast shadows). Everything — object layout,
//! textures, cameras, the train/test split — derives deterministically from
//! the scene seed, and rendering is analytic ray casting, so images, depth
//! maps and instance masks are exact and mutually consistent.

use crate::dataset::{DatasetManifest, ManifestView, Split};
use crate::error::{Error, Result};
use crate::geom::{vec3, Aabb, CameraModel, Mat3, Ray, RigidTransform, Vec3};
use crate::img::{BinMask, GrayImage, ImageRgb};
use crate::seed::{self, tags};
use rand::seq::SliceRandom;
use rand::Rng;
use std::path::Path;

/// Half extent of the square ground plane; also the xy half extent of the
/// scene bounds.
pub const GROUND_HALF: f64 = 3.0;
const AMBIENT: f64 = 0.35;

// ---------------------------------------------------------------------------
// Primitives

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Sphere { radius: f64 },
    Box { half: Vec3 },
    Torus { major: f64, minor: f64 },
    /// Union of a box pedestal and a sphere cap on top.
    Composite { half: Vec3, cap_radius: f64 },
}

impl Primitive {
    pub fn sdf(&self, p: Vec3) -> f64 {
        match *self {
            Primitive::Sphere { radius } => p.length() - radius,
            Primitive::Box { half } => {
                let q = p.abs() - half;
                let outside = q.max(Vec3::ZERO).length();
                let inside = q.max_component().min(0.0);
                outside + inside
            }
            Primitive::Torus { major, minor } => {
                let ring = (p.x * p.x + p.y * p.y).sqrt() - major;
                (ring * ring + p.z * p.z).sqrt() - minor
            }
            Primitive::Composite { half, cap_radius } => {
                let b = Primitive::Box { half }.sdf(p);
                let cap_center = vec3(0.0, 0.0, half.z + cap_radius * 0.55);
                let s = (p - cap_center).length() - cap_radius;
                b.min(s)
            }
        }
    }

    /// Smallest t > eps where the local-space ray (unit direction) enters the
    /// surface. Spheres and boxes are analytic; the torus is sphere-traced on
    /// its exact distance function.
    pub fn intersect(&self, ray: &Ray) -> Option<f64> {
        const EPS: f64 = 1e-6;
        match *self {
            Primitive::Sphere { radius } => ray_sphere(ray, Vec3::ZERO, radius),
            Primitive::Box { half } => {
                let b = Aabb::new(-half, half);
                let (t0, t1) = b.intersect_ray(ray)?;
                if t1 < EPS {
                    None
                } else if t0 > EPS {
                    Some(t0)
                } else {
                    // Origin inside: report the exit so the surface still owns
                    // the pixel (does not happen with exterior cameras).
                    Some(t1)
                }
            }
            Primitive::Torus { major, minor } => {
                let bound = Aabb::new(
                    vec3(-(major + minor), -(major + minor), -minor),
                    vec3(major + minor, major + minor, minor),
                );
                let (t0, t1) = bound.inflated(1e-3).intersect_ray(ray)?;
                if t1 < EPS {
                    return None;
                }
                sphere_trace(|p| self.sdf(p), ray, t0.max(EPS), t1)
            }
            Primitive::Composite { half, cap_radius } => {
                let tb = Primitive::Box { half }.intersect(ray);
                let cap_center = vec3(0.0, 0.0, half.z + cap_radius * 0.55);
                let ts = ray_sphere(ray, cap_center, cap_radius);
                match (tb, ts) {
                    (Some(a), Some(b)) => Some(a.min(b)),
                    (a, b) => a.or(b),
                }
            }
        }
    }

    pub fn normal(&self, p: Vec3) -> Vec3 {
        match *self {
            Primitive::Sphere { .. } => p.normalized(),
            Primitive::Box { half } => {
                // Face with the smallest clearance.
                let d = vec3(
                    half.x - p.x.abs(),
                    half.y - p.y.abs(),
                    half.z - p.z.abs(),
                );
                if d.x <= d.y && d.x <= d.z {
                    vec3(p.x.signum(), 0.0, 0.0)
                } else if d.y <= d.z {
                    vec3(0.0, p.y.signum(), 0.0)
                } else {
                    vec3(0.0, 0.0, p.z.signum())
                }
            }
            Primitive::Torus { major, .. } => {
                let rl = (p.x * p.x + p.y * p.y).sqrt().max(1e-12);
                let ring = vec3(p.x / rl * major, p.y / rl * major, 0.0);
                (p - ring).normalized()
            }
            Primitive::Composite { half, cap_radius } => {
                let cap_center = vec3(0.0, 0.0, half.z + cap_radius * 0.55);
                let db = Primitive::Box { half }.sdf(p).abs();
                let ds = ((p - cap_center).length() - cap_radius).abs();
                if db <= ds {
                    Primitive::Box { half }.normal(p)
                } else {
                    (p - cap_center).normalized()
                }
            }
        }
    }

    pub fn local_aabb(&self) -> Aabb {
        match *self {
            Primitive::Sphere { radius } => {
                Aabb::new(vec3(-radius, -radius, -radius), vec3(radius, radius, radius))
            }
            Primitive::Box { half } => Aabb::new(-half, half),
            Primitive::Torus { major, minor } => Aabb::new(
                vec3(-(major + minor), -(major + minor), -minor),
                vec3(major + minor, major + minor, minor),
            ),
            Primitive::Composite { half, cap_radius } => {
                let top = half.z + cap_radius * 0.55 + cap_radius;
                let r = half.x.max(half.y).max(cap_radius);
                Aabb::new(vec3(-r, -r, -half.z), vec3(r, r, top))
            }
        }
    }

    /// Height of the local origin above the ground when resting on z = 0.
    pub fn rest_height(&self) -> f64 {
        -self.local_aabb().min.z
    }
}

fn ray_sphere(ray: &Ray, center: Vec3, radius: f64) -> Option<f64> {
    let oc = ray.origin - center;
    let b = oc.dot(ray.dir);
    let c = oc.dot(oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t = -b - sq;
    if t > 1e-6 {
        Some(t)
    } else {
        let t2 = -b + sq;
        (t2 > 1e-6).then_some(t2)
    }
}

fn sphere_trace(sdf: impl Fn(Vec3) -> f64, ray: &Ray, t0: f64, t1: f64) -> Option<f64> {
    let mut t = t0;
    for _ in 0..512 {
        let d = sdf(ray.at(t));
        if d < 1e-7 {
            return Some(t);
        }
        t += d;
        if t > t1 + 1e-3 {
            return None;
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Textures

#[derive(Clone, Debug, PartialEq)]
pub enum Texture {
    Checker {
        a: [f32; 3],
        b: [f32; 3],
        period: f64,
    },
    Stripes {
        a: [f32; 3],
        b: [f32; 3],
        period: f64,
        axis: usize,
    },
    Noise {
        a: [f32; 3],
        b: [f32; 3],
        scale: f64,
        seed: u64,
    },
    /// Checker inside a disc of the given radius in the xy plane, fading to
    /// the tone average beyond it. Used for the ground: texture near the
    /// objects, flat far out where a point-sampled checker would alias into
    /// high-frequency bands at grazing view angles.
    Mat {
        a: [f32; 3],
        b: [f32; 3],
        period: f64,
        radius: f64,
        fade: f64,
    },
}

impl Texture {
    /// Albedo at a point in the local (pre-scale) frame of the textured
    /// surface, so patterns ride along with the object.
    pub fn albedo(&self, p: Vec3) -> [f32; 3] {
        match self {
            Texture::Checker { a, b, period } => {
                let c = (p.x / period).floor() as i64
                    + (p.y / period).floor() as i64
                    + (p.z / period).floor() as i64;
                if c.rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Stripes { a, b, period, axis } => {
                let x = [p.x, p.y, p.z][*axis];
                let t = 0.5 + 0.5 * (std::f64::consts::TAU * x / period).sin();
                let w = smoothstep(0.32, 0.68, t) as f32;
                lerp3(*a, *b, w)
            }
            Texture::Noise { a, b, scale, seed } => {
                let q = p / *scale;
                let n = 0.65 * value_noise(q, *seed) + 0.35 * value_noise(q * 2.0, seed ^ 0xABCD);
                lerp3(*a, *b, smoothstep(0.28, 0.72, n) as f32)
            }
            Texture::Mat {
                a,
                b,
                period,
                radius,
                fade,
            } => {
                let c = (p.x / period).floor() as i64 + (p.y / period).floor() as i64;
                let tile = if c.rem_euclid(2) == 0 { *a } else { *b };
                let mean = lerp3(*a, *b, 0.5);
                let r = (p.x * p.x + p.y * p.y).sqrt();
                lerp3(tile, mean, smoothstep(*radius, *radius + *fade, r) as f32)
            }
        }
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn lerp3(a: [f32; 3], b: [f32; 3], w: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * w,
        a[1] + (b[1] - a[1]) * w,
        a[2] + (b[2] - a[2]) * w,
    ]
}

fn lattice_hash(ix: i64, iy: i64, iz: i64, seed: u64) -> f64 {
    let h = seed::derive(
        seed,
        &[ix as u64 ^ 0x9E37, iy as u64 ^ 0x79B9, iz as u64 ^ 0x7F4A],
    );
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Trilinear-interpolated lattice noise in [0, 1].
fn value_noise(p: Vec3, seed: u64) -> f64 {
    let (ix, iy, iz) = (p.x.floor(), p.y.floor(), p.z.floor());
    let (fx, fy, fz) = (p.x - ix, p.y - iy, p.z - iz);
    let (ix, iy, iz) = (ix as i64, iy as i64, iz as i64);
    let mut acc = 0.0;
    for dz in 0..2i64 {
        for dy in 0..2i64 {
            for dx in 0..2i64 {
                let w = (if dx == 0 { 1.0 - fx } else { fx })
                    * (if dy == 0 { 1.0 - fy } else { fy })
                    * (if dz == 0 { 1.0 - fz } else { fz });
                acc += w * lattice_hash(ix + dx, iy + dy, iz + dz, seed);
            }
        }
    }
    acc
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as i64;
    let f = h - i as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i.rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

// ---------------------------------------------------------------------------
// Scene specification

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub primitive: Primitive,
    /// Local-to-world pose (applied after uniform `scale`).
    pub pose: RigidTransform,
    pub scale: f64,
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub ground_texture: Texture,
    pub seed: u64,
    pub views: usize,
    pub test_views: usize,
    pub width: usize,
    pub height: usize,
}

impl SceneSpec {
    /// Sample a full valid scene layout from a seed: object count `k` in
    /// 2..=4, distinct primitives, mutually distant positions, well separated
    /// hues.
    pub fn procedural(
        k: usize,
        seed: u64,
        views: usize,
        test_views: usize,
        width: usize,
        height: usize,
    ) -> Result<SceneSpec> {
        if !(2..=4).contains(&k) {
            return Err(Error::InvalidInput(format!(
                "object count must be 2..=4, got {k}"
            )));
        }
        let mut rng = seed::rng(seed::derive(seed, &[tags::SCENE_LAYOUT]));

        let mut kinds: Vec<usize> = (0..4).collect();
        kinds.shuffle(&mut rng);
        let hue0: f64 = rng.gen();
        let place_radius = 0.95 + 0.18 * k as f64;

        let scales: Vec<f64> = (0..k).map(|_| rng.gen_range(0.85..1.15)).collect();
        let primitives: Vec<Primitive> = (0..k)
            .map(|i| match kinds[i] {
                0 => Primitive::Sphere { radius: 0.45 },
                1 => Primitive::Box {
                    half: vec3(0.38, 0.38, 0.42),
                },
                2 => Primitive::Torus {
                    major: 0.40,
                    minor: 0.16,
                },
                _ => Primitive::Composite {
                    half: vec3(0.30, 0.30, 0.27),
                    cap_radius: 0.27,
                },
            })
            .collect();
        let xy_radii: Vec<f64> = (0..k)
            .map(|i| {
                let la = primitives[i].local_aabb();
                scales[i] * la.max.x.hypot(la.max.y).max(la.min.x.hypot(la.min.y))
            })
            .collect();

        // Rejection-sample positions with pairwise clearance; an unlucky
        // early placement can strand the rest, so re-draw the whole layout
        // when that happens.
        let mut centers: Option<Vec<Vec3>> = None;
        'layout: for _ in 0..64 {
            let mut placed: Vec<Vec3> = Vec::with_capacity(k);
            for i in 0..k {
                let mut found = false;
                for _ in 0..200 {
                    // Bias away from dead center so opposite placements
                    // stay reachable.
                    let r = place_radius * (0.30 + 0.70 * rng.gen::<f64>().sqrt());
                    let th = rng.gen::<f64>() * std::f64::consts::TAU;
                    let c = vec3(
                        r * th.cos(),
                        r * th.sin(),
                        scales[i] * primitives[i].rest_height(),
                    );
                    if placed.iter().enumerate().all(|(j, pc)| {
                        (vec3(c.x - pc.x, c.y - pc.y, 0.0)).length()
                            >= xy_radii[j] + xy_radii[i] + 0.28
                    }) {
                        placed.push(c);
                        found = true;
                        break;
                    }
                }
                if !found {
                    continue 'layout;
                }
            }
            centers = Some(placed);
            break;
        }
        let centers = centers.ok_or_else(|| {
            Error::Degenerate(format!("could not place {k} objects without overlap"))
        })?;

        let mut objects: Vec<ObjectSpec> = Vec::with_capacity(k);
        for i in 0..k {
            let (scale, primitive) = (scales[i], primitives[i]);
            let yaw = rng.gen::<f64>() * std::f64::consts::TAU;
            let pose = RigidTransform {
                rotation: Mat3::from_axis_angle(vec3(0.0, 0.0, 1.0), yaw),
                translation: centers[i],
            };

            // Same hue both tones, modest value contrast: the pattern gives
            // reconstruction something to lock onto without making single
            // texture cells read as a different material than the object.
            let hue = (hue0 + i as f64 * 0.618_034).fract();
            let tone_a = hsv_to_rgb(hue, 0.88, 0.92);
            let tone_b = hsv_to_rgb(hue, 0.78, 0.66);
            let tex_seed = seed::derive(seed, &[tags::SCENE_TEXTURE, i as u64]);
            let texture = match i % 3 {
                0 => Texture::Stripes {
                    a: tone_a,
                    b: tone_b,
                    period: 0.34,
                    axis: [0, 2][i % 2],
                },
                1 => Texture::Checker {
                    a: tone_a,
                    b: tone_b,
                    period: 0.40,
                },
                _ => Texture::Noise {
                    a: tone_a,
                    b: tone_b,
                    scale: 0.45,
                    seed: tex_seed,
                },
            };
            objects.push(ObjectSpec {
                primitive,
                pose,
                scale,
                texture,
            });
        }

        Ok(SceneSpec {
            objects,
            // Low-contrast mat: enough texture near the objects to anchor
            // background reconstruction, flat far out, and subtle enough
            // that the ground reads as one appearance mode next to the
            // saturated objects.
            ground_texture: Texture::Mat {
                a: [0.50, 0.485, 0.455],
                b: [0.435, 0.425, 0.405],
                period: 1.1,
                radius: 2.4,
                fade: 0.6,
            },
            seed,
            views,
            test_views,
            width,
            height,
        })
    }
}

// ---------------------------------------------------------------------------
// Generated scene

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectGeom {
    pub primitive: Primitive,
    pub pose: RigidTransform,
    pub scale: f64,
    pub texture: Texture,
    pub world_aabb: Aabb,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticScene {
    pub objects: Vec<ObjectGeom>,
    pub ground_texture: Texture,
    /// Direction light travels (unit, pointing downward).
    pub light_dir: Vec3,
    pub background: [f32; 3],
    pub bounds: Aabb,
    pub cameras: Vec<CameraModel>,
    /// Sorted indices of held-out test views.
    pub test_views: Vec<usize>,
    pub near: f64,
    pub far: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HitOwner {
    Object(usize),
    Ground,
}

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub t: f64,
    pub owner: HitOwner,
    pub point: Vec3,
    pub normal: Vec3,
    pub albedo: [f32; 3],
}

fn world_aabb(primitive: &Primitive, pose: &RigidTransform, scale: f64) -> Aabb {
    let la = primitive.local_aabb();
    let mut lo = vec3(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = -lo;
    for ci in 0..8 {
        let c = vec3(
            if ci & 1 == 0 { la.min.x } else { la.max.x },
            if ci & 2 == 0 { la.min.y } else { la.max.y },
            if ci & 4 == 0 { la.min.z } else { la.max.z },
        );
        let w = pose.apply(c * scale);
        lo = lo.min(w);
        hi = hi.max(w);
    }
    Aabb::new(lo, hi)
}

/// Dense-sample check that two objects do not interpenetrate by more than
/// `tol` anywhere in the overlap of their bounding boxes.
fn volumes_overlap(a: &ObjectGeom, b: &ObjectGeom, tol: f64) -> bool {
    let lo = a.world_aabb.min.max(b.world_aabb.min);
    let hi = a.world_aabb.max.min(b.world_aabb.max);
    if lo.x >= hi.x || lo.y >= hi.y || lo.z >= hi.z {
        return false;
    }
    let n = 12;
    let local = |o: &ObjectGeom, p: Vec3| o.pose.inverse().apply(p) / o.scale;
    for iz in 0..n {
        for iy in 0..n {
            for ix in 0..n {
                let f = |i: usize, l: f64, h: f64| l + (h - l) * (i as f64 + 0.5) / n as f64;
                let p = vec3(f(ix, lo.x, hi.x), f(iy, lo.y, hi.y), f(iz, lo.z, hi.z));
                let da = a.primitive.sdf(local(a, p)) * a.scale;
                let db = b.primitive.sdf(local(b, p)) * b.scale;
                if da < -tol && db < -tol {
                    return true;
                }
            }
        }
    }
    false
}

pub fn generate_scene(spec: &SceneSpec) -> Result<AnalyticScene> {
    if !(2..=4).contains(&spec.objects.len()) {
        return Err(Error::InvalidInput(format!(
            "object count must be 2..=4, got {}",
            spec.objects.len()
        )));
    }
    if spec.views < 2 || spec.test_views >= spec.views {
        return Err(Error::InvalidInput(format!(
            "need at least 2 views and test_views < views (got {} / {})",
            spec.views, spec.test_views
        )));
    }
    if spec.width == 0 || spec.height == 0 {
        return Err(Error::InvalidInput("zero resolution".into()));
    }

    let mut objects = Vec::with_capacity(spec.objects.len());
    for (i, o) in spec.objects.iter().enumerate() {
        if o.scale <= 0.0 {
            return Err(Error::InvalidInput(format!("object {i} has scale <= 0")));
        }
        if !o.pose.rotation.is_rotation(1e-6) {
            return Err(Error::InvalidInput(format!(
                "object {i} pose rotation is not orthonormal"
            )));
        }
        objects.push(ObjectGeom {
            primitive: o.primitive,
            pose: o.pose,
            scale: o.scale,
            texture: o.texture.clone(),
            world_aabb: world_aabb(&o.primitive, &o.pose, o.scale),
        });
    }
    for i in 0..objects.len() {
        for j in i + 1..objects.len() {
            if volumes_overlap(&objects[i], &objects[j], 0.02) {
                return Err(Error::InvalidInput(format!(
                    "objects {i} and {j} overlap in volume"
                )));
            }
        }
    }

    let top = objects
        .iter()
        .map(|o| o.world_aabb.max.z)
        .fold(0.0f64, f64::max);
    let bounds = Aabb::new(
        vec3(-GROUND_HALF, -GROUND_HALF, -0.15),
        vec3(GROUND_HALF, GROUND_HALF, (top + 0.30).max(1.6)),
    );
    for (i, o) in objects.iter().enumerate() {
        if !bounds.contains_box(&o.world_aabb) {
            return Err(Error::InvalidInput(format!(
                "object {i} extends outside the scene bounds"
            )));
        }
    }

    // Light.
    let mut lrng = seed::rng(seed::derive(spec.seed, &[tags::SCENE_LAYOUT, 0x11]));
    let laz: f64 = lrng.gen_range(0.0..std::f64::consts::TAU);
    let lel: f64 = lrng.gen_range(47f64..63f64).to_radians();
    let light_dir = -vec3(laz.cos() * lel.cos(), laz.sin() * lel.cos(), lel.sin());

    // Cameras on the upper hemisphere, aimed at a fixed focus point, radius
    // jittered +-10%.
    let focus = vec3(0.0, 0.0, 0.40);
    let base_radius = 3.55;
    let mut cameras = Vec::with_capacity(spec.views);
    let crng_seed = seed::derive(spec.seed, &[tags::SCENE_CAMERA]);
    let az0 = seed::unit_f64(crng_seed);
    for v in 0..spec.views {
        let s = seed::derive(crng_seed, &[v as u64]);
        let az = std::f64::consts::TAU * ((v as f64 * 0.618_034 + az0).fract());
        let el_frac = (v as f64 + 0.2 + 0.6 * seed::unit_f64(s)) / spec.views as f64;
        let el = (32.0 + 30.0 * el_frac.fract()).to_radians();
        let radius = base_radius * (0.9 + 0.2 * seed::unit_f64(s ^ 0x55));
        let eye = vec3(
            radius * az.cos() * el.cos(),
            radius * az.sin() * el.cos(),
            radius * el.sin(),
        );
        cameras.push(CameraModel::look_at(
            eye,
            focus,
            vec3(0.0, 0.0, 1.0),
            spec.width,
            spec.height,
            40.0,
        )?);
    }

    // Random held-out views.
    let mut idx: Vec<usize> = (0..spec.views).collect();
    let mut srng = seed::rng(seed::derive(spec.seed, &[tags::SCENE_SPLIT]));
    idx.shuffle(&mut srng);
    let mut test_views: Vec<usize> = idx[..spec.test_views].to_vec();
    test_views.sort_unstable();

    // Ray interval covering the whole scene from every camera.
    let mut near = f64::INFINITY;
    let mut far = 0.0f64;
    for cam in &cameras {
        let eye = cam.eye();
        for ci in 0..8 {
            let c = vec3(
                if ci & 1 == 0 { bounds.min.x } else { bounds.max.x },
                if ci & 2 == 0 { bounds.min.y } else { bounds.max.y },
                if ci & 4 == 0 { bounds.min.z } else { bounds.max.z },
            );
            far = far.max((c - eye).length());
        }
        // Conservative near: distance to the bounds box surface.
        let d = vec3(
            (bounds.min.x - eye.x).max(eye.x - bounds.max.x).max(0.0),
            (bounds.min.y - eye.y).max(eye.y - bounds.max.y).max(0.0),
            (bounds.min.z - eye.z).max(eye.z - bounds.max.z).max(0.0),
        );
        near = near.min(d.length());
    }
    let near = (near * 0.9).max(0.3);
    let far = far * 1.03;

    Ok(AnalyticScene {
        objects,
        ground_texture: spec.ground_texture.clone(),
        light_dir,
        background: [0.0, 0.0, 0.0],
        bounds,
        cameras,
        test_views,
        near,
        far,
        width: spec.width,
        height: spec.height,
    })
}

impl AnalyticScene {
    /// First surface hit along a world-space ray, if any.
    pub fn intersect(&self, ray: &Ray) -> Option<Hit> {
        let mut best: Option<(f64, HitOwner)> = None;
        for (i, o) in self.objects.iter().enumerate() {
            // Cheap reject on the world box.
            if o.world_aabb.inflated(1e-6).intersect_ray(ray).is_none() {
                continue;
            }
            let inv = o.pose.inverse();
            let local_ray = Ray {
                origin: inv.apply(ray.origin) / o.scale,
                dir: inv.apply_dir(ray.dir),
            };
            if let Some(u) = o.primitive.intersect(&local_ray) {
                let t = u * o.scale;
                if best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, HitOwner::Object(i)));
                }
            }
        }
        // Ground plane z = 0, |x|,|y| <= GROUND_HALF.
        if ray.dir.z < -1e-12 {
            let t = -ray.origin.z / ray.dir.z;
            if t > 1e-6 {
                let p = ray.at(t);
                if p.x.abs() <= GROUND_HALF
                    && p.y.abs() <= GROUND_HALF
                    && best.map_or(true, |(bt, _)| t < bt)
                {
                    best = Some((t, HitOwner::Ground));
                }
            }
        }

        best.map(|(t, owner)| {
            let point = ray.at(t);
            let (normal, albedo) = match owner {
                HitOwner::Ground => (vec3(0.0, 0.0, 1.0), self.ground_texture.albedo(point)),
                HitOwner::Object(i) => {
                    let o = &self.objects[i];
                    let lp = o.pose.inverse().apply(point) / o.scale;
                    (
                        o.pose.apply_dir(o.primitive.normal(lp)),
                        o.texture.albedo(lp),
                    )
                }
            };
            Hit {
                t,
                owner,
                point,
                normal,
                albedo,
            }
        })
    }

    pub fn shade(&self, hit: &Hit) -> [f32; 3] {
        let lambert = hit.normal.dot(-self.light_dir).max(0.0);
        let k = (AMBIENT + (1.0 - AMBIENT) * lambert) as f32;
        [hit.albedo[0] * k, hit.albedo[1] * k, hit.albedo[2] * k]
    }

    pub fn split_of(&self, view: usize) -> Split {
        if self.test_views.binary_search(&view).is_ok() {
            Split::Test
        } else {
            Split::Train
        }
    }
}

/// One rendered view with its exact ground truth.
#[derive(Clone, Debug)]
pub struct RenderedView {
    pub image: ImageRgb,
    pub depth: GrayImage,
    pub masks: Vec<BinMask>,
}

pub fn render_ground_truth(scene: &AnalyticScene, camera: &CameraModel) -> Result<RenderedView> {
    camera.validate()?;
    let (w, h) = (camera.width, camera.height);
    let mut image = ImageRgb::new(w, h);
    let mut depth = GrayImage::new(w, h);
    let mut masks = vec![BinMask::new(w, h); scene.objects.len()];
    for y in 0..h {
        for x in 0..w {
            let ray = camera.ray_through(x as f64 + 0.5, y as f64 + 0.5);
            match scene.intersect(&ray) {
                Some(hit) => {
                    image.set(x, y, scene.shade(&hit));
                    depth.set(x, y, hit.t as f32);
                    if let HitOwner::Object(i) = hit.owner {
                        masks[i].set(x, y, true);
                    }
                }
                None => {
                    image.set(x, y, scene.background);
                    depth.set(x, y, scene.far as f32);
                }
            }
        }
    }
    Ok(RenderedView {
        image,
        depth,
        masks,
    })
}

/// Render every view and write the dataset directory; returns the manifest
/// that was written.
pub fn export_dataset(scene: &AnalyticScene, dir: &Path) -> Result<DatasetManifest> {
    use crate::img::{save_f32_raw, save_png_mask, save_png_rgb};
    std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    std::fs::create_dir_all(dir.join("depth")).map_err(|e| Error::io(dir, e))?;
    std::fs::create_dir_all(dir.join("masks_gt")).map_err(|e| Error::io(dir, e))?;

    let mut views = Vec::with_capacity(scene.cameras.len());
    for (v, cam) in scene.cameras.iter().enumerate() {
        let rendered = render_ground_truth(scene, cam)?;
        let image_rel = format!("images/view_{v:03}.png");
        let depth_rel = format!("depth/view_{v:03}.bin");
        save_png_rgb(&dir.join(&image_rel), &rendered.image)?;
        save_f32_raw(&dir.join(&depth_rel), &rendered.depth.data)?;
        let mut mask_rels = Vec::with_capacity(rendered.masks.len());
        for (o, m) in rendered.masks.iter().enumerate() {
            let rel = format!("masks_gt/obj{o}_view_{v:03}.png");
            save_png_mask(&dir.join(&rel), m)?;
            mask_rels.push(rel);
        }
        views.push(ManifestView {
            index: v,
            split: scene.split_of(v),
            camera: *cam,
            image: image_rel,
            depth: Some(depth_rel),
            masks_gt: mask_rels,
        });
    }
    let manifest = DatasetManifest {
        width: scene.width,
        height: scene.height,
        near: scene.near,
        far: scene.far,
        bounds: scene.bounds,
        views,
    };
    manifest.save(dir)?;
    Ok(manifest)
}
