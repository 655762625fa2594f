//! Procedural ground-truth world built from colored SDF primitives.
//!
//! The same scene answers three kinds of queries: signed distance (for
//! collision checks and surface sampling), sphere-traced RGBD images (the
//! camera oracle) and surface point samples (geometry ground truth).

use crate::camera::{world_direction, CameraIntrinsics, Viewpoint};
use crate::error::{Error, Result};
use crate::geom::{Aabb, Mat3, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const AMBIENT: f64 = 0.2;
pub const MAX_TRACE_STEPS: usize = 256;
pub const HIT_EPSILON: f64 = 1e-4;

/// Fixed directional light (unit vector pointing toward the light).
pub fn light_direction() -> Vec3 {
    Vec3::new(0.35, 0.8, -0.5).normalized()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: Vec3 },
    /// Capped cylinder along the local y axis.
    Cylinder { radius: f64, half_height: f64 },
    /// Torus in the local xz-plane.
    Torus { major_radius: f64, minor_radius: f64 },
}

impl Shape {
    /// Exact signed distance in the primitive's local frame.
    pub fn distance(&self, p: Vec3) -> f64 {
        match *self {
            Shape::Sphere { radius } => p.norm() - radius,
            Shape::Box { half_extents } => {
                let q = p.abs() - half_extents;
                q.max(Vec3::ZERO).norm() + q.max_element().min(0.0)
            }
            Shape::Cylinder {
                radius,
                half_height,
            } => {
                let dx = (p.x * p.x + p.z * p.z).sqrt() - radius;
                let dy = p.y.abs() - half_height;
                let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
                dx.max(dy).min(0.0) + outside
            }
            Shape::Torus {
                major_radius,
                minor_radius,
            } => {
                let qx = (p.x * p.x + p.z * p.z).sqrt() - major_radius;
                (qx * qx + p.y * p.y).sqrt() - minor_radius
            }
        }
    }

    /// Radius of a sphere around the local origin that contains the shape.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Sphere { radius } => radius,
            Shape::Box { half_extents } => half_extents.norm(),
            Shape::Cylinder {
                radius,
                half_height,
            } => (radius * radius + half_height * half_height).sqrt(),
            Shape::Torus {
                major_radius,
                minor_radius,
            } => major_radius + minor_radius,
        }
    }

    pub fn surface_area(&self) -> f64 {
        use std::f64::consts::PI;
        match *self {
            Shape::Sphere { radius } => 4.0 * PI * radius * radius,
            Shape::Box { half_extents: h } => 8.0 * (h.x * h.y + h.y * h.z + h.x * h.z),
            Shape::Cylinder {
                radius,
                half_height,
            } => 2.0 * PI * radius * (2.0 * half_height) + 2.0 * PI * radius * radius,
            Shape::Torus {
                major_radius,
                minor_radius,
            } => 4.0 * PI * PI * major_radius * minor_radius,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shape::Sphere { radius } => radius > 0.0,
            Shape::Box { half_extents } => half_extents.min_element() > 0.0,
            Shape::Cylinder {
                radius,
                half_height,
            } => radius > 0.0 && half_height > 0.0,
            Shape::Torus {
                major_radius,
                minor_radius,
            } => minor_radius > 0.0 && major_radius > minor_radius,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidScene(format!("bad size parameters for {self:?}")))
        }
    }

    /// Uniform (area-weighted) sample on the local-frame surface.
    fn sample_surface<R: Rng>(&self, rng: &mut R) -> Vec3 {
        use std::f64::consts::PI;
        match *self {
            Shape::Sphere { radius } => unit_sphere(rng) * radius,
            Shape::Box { half_extents: h } => {
                let areas = [h.y * h.z, h.x * h.z, h.x * h.y];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut axis = 2;
                for (i, a) in areas.iter().enumerate() {
                    if pick < *a {
                        axis = i;
                        break;
                    }
                    pick -= a;
                }
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mut c = [0.0; 3];
                for (i, ci) in c.iter_mut().enumerate() {
                    *ci = if i == axis {
                        sign * h[i]
                    } else {
                        (2.0 * rng.random::<f64>() - 1.0) * h[i]
                    };
                }
                Vec3::from(c)
            }
            Shape::Cylinder {
                radius,
                half_height,
            } => {
                let side = 2.0 * PI * radius * 2.0 * half_height;
                let cap = PI * radius * radius;
                let pick = rng.random::<f64>() * (side + 2.0 * cap);
                if pick < side {
                    let phi = 2.0 * PI * rng.random::<f64>();
                    let y = (2.0 * rng.random::<f64>() - 1.0) * half_height;
                    Vec3::new(radius * phi.cos(), y, radius * phi.sin())
                } else {
                    let r = radius * rng.random::<f64>().sqrt();
                    let phi = 2.0 * PI * rng.random::<f64>();
                    let y = if pick < side + cap {
                        half_height
                    } else {
                        -half_height
                    };
                    Vec3::new(r * phi.cos(), y, r * phi.sin())
                }
            }
            Shape::Torus {
                major_radius,
                minor_radius,
            } => loop {
                let u = 2.0 * PI * rng.random::<f64>();
                let v = 2.0 * PI * rng.random::<f64>();
                let accept = (major_radius + minor_radius * v.cos())
                    / (major_radius + minor_radius);
                if rng.random::<f64>() <= accept {
                    let ring = major_radius + minor_radius * v.cos();
                    break Vec3::new(ring * u.cos(), minor_radius * v.sin(), ring * u.sin());
                }
            },
        }
    }
}

fn unit_sphere<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Serialized description of one primitive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveSpec {
    #[serde(flatten)]
    pub shape: Shape,
    pub center: Vec3,
    /// XYZ Euler angles in degrees.
    #[serde(default)]
    pub rotation_deg: Vec3,
    pub albedo: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub spec: PrimitiveSpec,
    world_to_local: Mat3,
}

impl Primitive {
    pub fn new(spec: PrimitiveSpec) -> Result<Self> {
        spec.shape.validate()?;
        for c in spec.albedo.to_array() {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::InvalidScene("albedo outside [0,1]".into()));
            }
        }
        let world_to_local = Mat3::from_euler_deg(spec.rotation_deg).transpose();
        Ok(Self {
            spec,
            world_to_local,
        })
    }

    pub fn distance(&self, p: Vec3) -> f64 {
        self.spec
            .shape
            .distance(self.world_to_local.mul_vec(p - self.spec.center))
    }

    fn local_to_world(&self, p: Vec3) -> Vec3 {
        self.world_to_local.transpose().mul_vec(p) + self.spec.center
    }

    fn bounding_box(&self) -> Aabb {
        Aabb::cube(self.spec.center, self.spec.shape.bounding_radius())
    }
}

/// On-disk scene description (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub name: String,
    pub bounds: Aabb,
    pub background: Vec3,
    #[serde(default)]
    pub primitives: Vec<PrimitiveSpec>,
}

/// Immutable colored SDF scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSdf {
    pub name: String,
    pub bounds: Aabb,
    pub background: Vec3,
    primitives: Vec<Primitive>,
}

impl SceneSdf {
    pub fn new(
        name: impl Into<String>,
        bounds: Aabb,
        background: Vec3,
        specs: Vec<PrimitiveSpec>,
    ) -> Result<Self> {
        if bounds.extent().min_element() <= 0.0 {
            return Err(Error::InvalidScene("empty bounds".into()));
        }
        let primitives = specs
            .into_iter()
            .map(Primitive::new)
            .collect::<Result<Vec<_>>>()?;
        for (i, p) in primitives.iter().enumerate() {
            if !bounds.strictly_contains(&p.bounding_box()) {
                return Err(Error::InvalidScene(format!(
                    "primitive {i} is not strictly inside the scene bounds"
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            bounds,
            background,
            primitives,
        })
    }

    pub fn from_file_spec(file: SceneFile) -> Result<Self> {
        Self::new(file.name, file.bounds, file.background, file.primitives)
    }

    pub fn to_file_spec(&self) -> SceneFile {
        SceneFile {
            name: self.name.clone(),
            bounds: self.bounds,
            background: self.background,
            primitives: self.primitives.iter().map(|p| p.spec).collect(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        Self::from_file_spec(toml::from_str(s)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.to_file_spec()).expect("scene spec serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_toml_str(&text)
    }

    /// Canned scene by name ("blobs", "arch", "empty").
    pub fn canned(name: &str) -> Option<Self> {
        match name {
            "blobs" => Some(Self::blobs()),
            "arch" => Some(Self::arch()),
            "empty" => Some(Self::empty(default_bounds(), Vec3::splat(1.0))),
            _ => None,
        }
    }

    /// Three spheres resting around a flat slab, each a different color.
    pub fn blobs() -> Self {
        let specs = vec![
            PrimitiveSpec {
                shape: Shape::Sphere { radius: 0.55 },
                center: Vec3::new(-0.6, -0.2, 0.3),
                rotation_deg: Vec3::ZERO,
                albedo: Vec3::new(0.85, 0.25, 0.2),
            },
            PrimitiveSpec {
                shape: Shape::Sphere { radius: 0.45 },
                center: Vec3::new(0.6, 0.1, -0.2),
                rotation_deg: Vec3::ZERO,
                albedo: Vec3::new(0.2, 0.45, 0.85),
            },
            PrimitiveSpec {
                shape: Shape::Sphere { radius: 0.35 },
                center: Vec3::new(0.05, 0.65, 0.1),
                rotation_deg: Vec3::ZERO,
                albedo: Vec3::new(0.95, 0.8, 0.2),
            },
            PrimitiveSpec {
                shape: Shape::Box {
                    half_extents: Vec3::new(0.9, 0.15, 0.6),
                },
                center: Vec3::new(0.1, -0.7, -0.1),
                rotation_deg: Vec3::new(0.0, 20.0, 0.0),
                albedo: Vec3::new(0.3, 0.7, 0.35),
            },
        ];
        Self::new("blobs", default_bounds(), Vec3::splat(1.0), specs).expect("canned scene")
    }

    /// A block with an overhanging torus roof; the underside of the ring is
    /// only visible from low viewpoints.
    pub fn arch() -> Self {
        let specs = vec![
            PrimitiveSpec {
                shape: Shape::Box {
                    half_extents: Vec3::new(0.8, 0.45, 0.5),
                },
                center: Vec3::new(0.0, -0.45, 0.0),
                rotation_deg: Vec3::ZERO,
                albedo: Vec3::new(0.75, 0.6, 0.45),
            },
            PrimitiveSpec {
                shape: Shape::Torus {
                    major_radius: 0.9,
                    minor_radius: 0.2,
                },
                center: Vec3::new(0.0, 0.05, 0.0),
                rotation_deg: Vec3::ZERO,
                albedo: Vec3::new(0.7, 0.2, 0.2),
            },
            PrimitiveSpec {
                shape: Shape::Sphere { radius: 0.3 },
                center: Vec3::new(0.0, 0.3, 0.0),
                rotation_deg: Vec3::ZERO,
                albedo: Vec3::new(0.3, 0.4, 0.8),
            },
        ];
        Self::new("arch", default_bounds(), Vec3::splat(1.0), specs).expect("canned scene")
    }

    pub fn empty(bounds: Aabb, background: Vec3) -> Self {
        Self::new("empty", bounds, background, Vec::new()).expect("empty scene")
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    pub fn center(&self) -> Vec3 {
        self.bounds.center()
    }

    /// Signed distance: min over primitives, +inf for an empty scene.
    pub fn sdf(&self, p: Vec3) -> f64 {
        self.primitives
            .iter()
            .map(|prim| prim.distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    fn closest_primitive(&self, p: Vec3) -> Option<&Primitive> {
        self.primitives
            .iter()
            .map(|prim| (prim, prim.distance(p)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(prim, _)| prim)
    }

    pub fn normal(&self, p: Vec3) -> Vec3 {
        let h = 1e-6;
        let dx = self.sdf(p + Vec3::X * h) - self.sdf(p - Vec3::X * h);
        let dy = self.sdf(p + Vec3::Y * h) - self.sdf(p - Vec3::Y * h);
        let dz = self.sdf(p + Vec3::Z * h) - self.sdf(p - Vec3::Z * h);
        Vec3::new(dx, dy, dz).normalized()
    }

    /// Sphere-traces one ray. Returns the hit distance, if any.
    pub fn trace_ray(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        if self.primitives.is_empty() {
            return None;
        }
        let max_range = self.bounds.diagonal();
        let mut t = 0.0;
        for _ in 0..MAX_TRACE_STEPS {
            let d = self.sdf(origin + dir * t);
            if d < HIT_EPSILON {
                return Some(t);
            }
            t += d;
            if t > max_range {
                return None;
            }
        }
        None
    }

    /// Shaded surface color at a hit point seen along `dir`.
    pub fn shade(&self, p: Vec3) -> Vec3 {
        let albedo = self
            .closest_primitive(p)
            .map(|prim| prim.spec.albedo)
            .unwrap_or(self.background);
        let n = self.normal(p);
        let lambert = n.dot(light_direction()).max(0.0);
        let k = AMBIENT + (1.0 - AMBIENT) * lambert;
        clamp_color(albedo * k)
    }

    /// Renders an RGBD image with pixel-center rays.
    pub fn trace_rgbd(&self, view: &Viewpoint, intrinsics: &CameraIntrinsics) -> RgbdImage {
        let n = intrinsics.pixel_count();
        let mut color = Vec::with_capacity(n);
        let mut depth = Vec::with_capacity(n);
        for py in 0..intrinsics.height {
            for px in 0..intrinsics.width {
                let dir = world_direction(view, intrinsics, px, py, (0.5, 0.5));
                match self.trace_ray(view.position, dir) {
                    Some(t) => {
                        color.push(self.shade(view.position + dir * t));
                        depth.push(t);
                    }
                    None => {
                        color.push(clamp_color(self.background));
                        depth.push(0.0);
                    }
                }
            }
        }
        RgbdImage {
            intrinsics: *intrinsics,
            pose: *view,
            color,
            depth,
        }
    }

    /// True iff every sample along p-q (spacing at most clearance/2) keeps
    /// at least `clearance` distance from the geometry.
    pub fn collision_free(&self, p: Vec3, q: Vec3, clearance: f64) -> bool {
        assert!(clearance > 0.0, "clearance must be positive");
        // Canonical endpoint order keeps the sample set identical for (p,q) and (q,p).
        let (a, b) = if p.to_array() <= q.to_array() {
            (p, q)
        } else {
            (q, p)
        };
        let len = a.distance(b);
        let segments = ((len / (0.5 * clearance)).ceil() as usize).max(1);
        (0..=segments).all(|i| {
            let s = a.lerp(b, i as f64 / segments as f64);
            self.sdf(s) >= clearance
        })
    }

    /// Area-weighted samples on the visible union surface (points on one
    /// primitive that lie inside another are rejected).
    pub fn sample_surface(&self, count: usize, seed: u64) -> Vec<Vec3> {
        if self.primitives.is_empty() || count == 0 {
            return Vec::new();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let areas: Vec<f64> = self
            .primitives
            .iter()
            .map(|p| p.spec.shape.surface_area())
            .collect();
        let total: f64 = areas.iter().sum();
        let mut out = Vec::with_capacity(count);
        let max_attempts = count.saturating_mul(200);
        let mut attempts = 0;
        while out.len() < count && attempts < max_attempts {
            attempts += 1;
            let mut pick = rng.random::<f64>() * total;
            let mut idx = areas.len() - 1;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    idx = i;
                    break;
                }
                pick -= a;
            }
            let prim = &self.primitives[idx];
            let p = prim.local_to_world(prim.spec.shape.sample_surface(&mut rng));
            let buried = self
                .primitives
                .iter()
                .enumerate()
                .any(|(j, other)| j != idx && other.distance(p) < -1e-9);
            if !buried {
                out.push(p);
            }
        }
        out
    }
}

pub fn default_bounds() -> Aabb {
    Aabb::cube(Vec3::ZERO, 2.5)
}

fn clamp_color(c: Vec3) -> Vec3 {
    Vec3::new(
        c.x.clamp(0.0, 1.0),
        c.y.clamp(0.0, 1.0),
        c.z.clamp(0.0, 1.0),
    )
}

/// Color + depth raster with the pose it was captured from.
///
/// Depth is the distance from the camera origin along the pixel ray;
/// non-positive values mark pixels without a surface hit.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdImage {
    pub intrinsics: CameraIntrinsics,
    pub pose: Viewpoint,
    pub color: Vec<Vec3>,
    pub depth: Vec<f64>,
}

impl RgbdImage {
    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn pixel_count(&self) -> usize {
        self.color.len()
    }

    pub fn index(&self, px: usize, py: usize) -> usize {
        py * self.intrinsics.width + px
    }
}

/// Depth noise whose mean and standard deviation grow quadratically with depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthNoiseModel {
    pub a_mu: f64,
    pub b_mu: f64,
    pub a_sigma: f64,
    pub b_sigma: f64,
    pub scale: f64,
}

impl Default for DepthNoiseModel {
    /// Coefficients fitted to a consumer LiDAR depth camera.
    fn default() -> Self {
        Self {
            a_mu: 0.0001125,
            b_mu: 0.0048875,
            a_sigma: 0.002925,
            b_sigma: 0.003325,
            scale: 1.0,
        }
    }
}

impl DepthNoiseModel {
    pub fn with_scale(scale: f64) -> Self {
        Self {
            scale,
            ..Self::default()
        }
    }

    pub fn mean(&self, z: f64) -> f64 {
        self.scale * (self.a_mu * z * z + self.b_mu)
    }

    pub fn std_dev(&self, z: f64) -> f64 {
        self.scale * (self.a_sigma * z * z + self.b_sigma)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale > 0.0
            && self.a_mu >= 0.0
            && self.b_mu >= 0.0
            && self.a_sigma >= 0.0
            && self.b_sigma > 0.0
        {
            Ok(())
        } else {
            Err(Error::InvalidConfig("depth noise coefficients".into()))
        }
    }

    /// Adds independent Gaussian noise to every pixel with positive depth.
    pub fn apply(&self, depth: &[f64], seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        depth
            .iter()
            .map(|&z| {
                if z > 0.0 {
                    let dist = Normal::new(self.mean(z), self.std_dev(z))
                        .expect("positive standard deviation");
                    z + dist.sample(&mut rng)
                } else {
                    z
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_sphere_scene() -> SceneSdf {
        SceneSdf::new(
            "sphere",
            default_bounds(),
            Vec3::splat(1.0),
            vec![PrimitiveSpec {
                shape: Shape::Sphere { radius: 1.0 },
                center: Vec3::ZERO,
                rotation_deg: Vec3::ZERO,
                albedo: Vec3::new(0.8, 0.5, 0.3),
            }],
        )
        .unwrap()
    }

    #[test]
    fn sdf_examples() {
        let s = unit_sphere_scene();
        assert_eq!(s.sdf(Vec3::ZERO), -1.0);
        assert_eq!(s.sdf(Vec3::new(2.0, 0.0, 0.0)), 1.0);
        let sphere = |x: f64| PrimitiveSpec {
            shape: Shape::Sphere { radius: 1.0 },
            center: Vec3::new(x, 0.0, 0.0),
            rotation_deg: Vec3::ZERO,
            albedo: Vec3::splat(0.5),
        };
        let two = SceneSdf::new(
            "two",
            Aabb::cube(Vec3::ZERO, 5.0),
            Vec3::ZERO,
            vec![sphere(-3.0), sphere(3.0)],
        )
        .unwrap();
        assert_eq!(two.sdf(Vec3::ZERO), 2.0);
    }

    #[test]
    fn primitive_outside_bounds_rejected() {
        let r = SceneSdf::new(
            "bad",
            Aabb::cube(Vec3::ZERO, 1.0),
            Vec3::ZERO,
            vec![PrimitiveSpec {
                shape: Shape::Sphere { radius: 0.5 },
                center: Vec3::new(0.8, 0.0, 0.0),
                rotation_deg: Vec3::ZERO,
                albedo: Vec3::splat(0.5),
            }],
        );
        assert!(matches!(r, Err(Error::InvalidScene(_))));
    }

    #[test]
    fn shape_distances_on_axes() {
        let b = Shape::Box {
            half_extents: Vec3::new(1.0, 2.0, 3.0),
        };
        assert!((b.distance(Vec3::new(2.0, 0.0, 0.0)) - 1.0).abs() < 1e-12);
        assert!((b.distance(Vec3::ZERO) + 1.0).abs() < 1e-12);
        let c = Shape::Cylinder {
            radius: 0.5,
            half_height: 1.0,
        };
        assert!((c.distance(Vec3::new(0.0, 2.0, 0.0)) - 1.0).abs() < 1e-12);
        assert!((c.distance(Vec3::new(1.5, 0.0, 0.0)) - 1.0).abs() < 1e-12);
        let t = Shape::Torus {
            major_radius: 1.0,
            minor_radius: 0.25,
        };
        assert!((t.distance(Vec3::new(1.0, 0.0, 0.0)) + 0.25).abs() < 1e-12);
        assert!((t.distance(Vec3::ZERO) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn empty_scene_traces_background() {
        let s = SceneSdf::empty(default_bounds(), Vec3::new(0.1, 0.2, 0.3));
        let view = Viewpoint::looking_at(Vec3::new(0.0, 0.0, -5.0), Vec3::ZERO).unwrap();
        let img = s.trace_rgbd(&view, &CameraIntrinsics::new(8, 6, 0.8).unwrap());
        assert!(img.color.iter().all(|c| *c == Vec3::new(0.1, 0.2, 0.3)));
        assert!(img.depth.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn center_pixel_depth_and_shading() {
        let s = unit_sphere_scene();
        let view = Viewpoint::looking_at(Vec3::new(0.0, 0.0, -5.0), Vec3::ZERO).unwrap();
        let intr = CameraIntrinsics::new(9, 9, 0.7).unwrap();
        let img = s.trace_rgbd(&view, &intr);
        let c = img.index(4, 4);
        assert!((img.depth[c] - 4.0).abs() < 1e-3);
        // Independent scalar evaluation of the Lambert term for n = (0,0,-1).
        let (lx, ly, lz) = (0.35f64, 0.8f64, -0.5f64);
        let n_dot_l = -lz / (lx * lx + ly * ly + lz * lz).sqrt();
        let k = 0.2 + 0.8 * n_dot_l.max(0.0);
        let expect = [0.8 * k, 0.5 * k, 0.3 * k];
        for (got, want) in img.color[c].to_array().iter().zip(expect) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn noise_coefficients() {
        let m = DepthNoiseModel::default();
        assert!((m.mean(1.0) - 0.0050000).abs() < 1e-12);
        assert!((m.std_dev(1.0) - 0.0062500).abs() < 1e-12);
        // z = 2: 0.0001125*4 + 0.0048875 and 0.002925*4 + 0.003325
        assert!((m.mean(2.0) - 0.0053375).abs() < 1e-12);
        assert!((m.std_dev(2.0) - 0.0150250).abs() < 1e-12);
        let noisy = m.apply(&[0.0, -1.0, 2.0], 3);
        assert_eq!(noisy[0], 0.0);
        assert_eq!(noisy[1], -1.0);
        assert_ne!(noisy[2], 2.0);
        assert_eq!(noisy, m.apply(&[0.0, -1.0, 2.0], 3));
    }

    #[test]
    fn collision_examples() {
        let empty = SceneSdf::empty(default_bounds(), Vec3::ZERO);
        assert!(empty.collision_free(Vec3::splat(-2.0), Vec3::splat(2.0), 0.1));
        let s = unit_sphere_scene();
        assert!(!s.collision_free(
            Vec3::new(-2.0, 0.0, 0.0),
            Vec3::new(2.0, 0.0, 0.0),
            0.1
        ));
        // Segment at y = 1.5: closest point distance 1.5, surface gap 0.5.
        assert!(s.collision_free(
            Vec3::new(-2.0, 1.5, 0.0),
            Vec3::new(2.0, 1.5, 0.0),
            0.3
        ));
        assert!(!s.collision_free(
            Vec3::new(-2.0, 1.5, 0.0),
            Vec3::new(2.0, 1.5, 0.0),
            0.6
        ));
    }

    #[test]
    fn scene_file_round_trip() {
        let s = SceneSdf::arch();
        let text = s.to_toml_string();
        let back = SceneSdf::from_toml_str(&text).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn surface_samples_lie_on_surface() {
        for scene in [SceneSdf::blobs(), SceneSdf::arch()] {
            let pts = scene.sample_surface(2000, 11);
            assert_eq!(pts.len(), 2000);
            for p in pts {
                assert!(scene.sdf(p).abs() < 1e-9, "{}", scene.sdf(p));
            }
        }
    }
}
