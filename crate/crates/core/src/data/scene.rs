use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::{add, cross, dot, norm, normalize, scale, sub, CameraModel, Projection};
use super::{Correspondence, SceneSample};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::point::{Point3, PointCloud};

/// Sum of plane waves around a base reflectivity, clamped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub base: f64,
    /// `(wave vector, amplitude, phase)`
    pub waves: Vec<(Point3, f64, f64)>,
}

impl Texture {
    pub fn flat(v: f64) -> Self {
        Texture { base: v, waves: Vec::new() }
    }

    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let base = rng.random_range(0.3..0.7);
        let waves = (0..3)
            .map(|_| {
                let dir = normalize(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
                let k = rng.random_range(1.5..6.0);
                (scale(&dir, k), rng.random_range(0.08..0.22), rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Texture { base, waves }
    }

    pub fn at(&self, p: &Point3) -> f64 {
        let v = self.waves.iter().map(|(k, a, ph)| a * (dot(k, p) + ph).sin()).sum::<f64>();
        (self.base + v).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// Parallelogram `origin + a·u + b·v`, `a, b ∈ [0, 1]`.
    Quad { origin: Point3, u: Point3, v: Point3 },
    /// Axis-aligned box.
    Cuboid { min: Point3, max: Point3 },
    Sphere { center: Point3, radius: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: Texture,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub prim: usize,
    pub normal: Point3,
}

const T_MIN: f64 = 1e-9;

impl Shape {
    /// Nearest intersection distance along a unit ray, with outward normal.
    pub fn intersect(&self, o: &Point3, d: &Point3) -> Option<(f64, Point3)> {
        match self {
            Shape::Quad { origin, u, v } => {
                let n = normalize(&cross(u, v));
                let denom = dot(d, &n);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = dot(&sub(origin, o), &n) / denom;
                if t <= T_MIN {
                    return None;
                }
                let rel = sub(&add(o, &scale(d, t)), origin);
                let a = dot(&rel, u) / dot(u, u);
                let b = dot(&rel, v) / dot(v, v);
                ((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b)).then_some((t, n))
            }
            Shape::Cuboid { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut axis0, mut axis1) = (0, 0);
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        axis0 = a;
                    }
                    if tb < t1 {
                        t1 = tb;
                        axis1 = a;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                let (t, axis) = if t0 > T_MIN {
                    (t0, axis0)
                } else if t1 > T_MIN {
                    (t1, axis1)
                } else {
                    return None;
                };
                let mut n = [0.0; 3];
                n[axis] = if d[axis] > 0.0 { -1.0 } else { 1.0 };
                if t == t1 && t0 <= T_MIN {
                    n[axis] = -n[axis];
                }
                Some((t, n))
            }
            Shape::Sphere { center, radius } => {
                let oc = sub(o, center);
                let b = dot(&oc, d);
                let c = dot(&oc, &oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = if -b - s > T_MIN { -b - s } else { -b + s };
                (t > T_MIN).then(|| (t, normalize(&sub(&add(o, &scale(d, t)), center))))
            }
        }
    }
}

/// Primitives plus the camera and the range sensor origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub camera: CameraModel,
    pub sensor_origin: Point3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub focal: f64,
    pub n_points: usize,
    pub n_boxes: usize,
    pub n_spheres: usize,
    pub camera_height: f64,
    pub pitch_deg: f64,
    pub yaw_deg_max: f64,
    /// Range sensor position relative to the camera center (world frame).
    pub sensor_offset: Point3,
    /// Extra field of view of the range sensor beyond the image, in pixels.
    pub fov_margin_px: f64,
    pub min_correspondences: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 32,
            width: 64,
            focal: 40.0,
            n_points: 1536,
            n_boxes: 3,
            n_spheres: 2,
            camera_height: 1.6,
            pitch_deg: 10.0,
            yaw_deg_max: 15.0,
            sensor_offset: [0.0, 0.0, 0.25],
            fov_margin_px: 2.0,
            min_correspondences: 64,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !(self.focal > 0.0) || self.n_points == 0 {
            return Err(Error::Config("scene: image size, focal and n_points must be positive".into()));
        }
        if self.fov_margin_px < 0.0 {
            return Err(Error::Config("scene: fov_margin_px must be >= 0".into()));
        }
        Ok(())
    }
}

const LIGHT: Point3 = [0.3, -0.5, 0.8];
const SKY: f64 = 0.95;

impl Scene {
    /// Ground, back wall, a few boxes and spheres, all randomly textured.
    pub fn random(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut primitives = vec![Primitive {
            shape: Shape::Quad { origin: [-20.0, -2.0, 0.0], u: [40.0, 0.0, 0.0], v: [0.0, 30.0, 0.0] },
            texture: Texture::random(rng),
        }];
        let wall_y = rng.random_range(14.0..20.0);
        primitives.push(Primitive {
            shape: Shape::Quad { origin: [-20.0, wall_y, 0.0], u: [0.0, 0.0, 12.0], v: [40.0, 0.0, 0.0] },
            texture: Texture::random(rng),
        });
        for _ in 0..cfg.n_boxes {
            let c = [rng.random_range(-4.0..4.0), rng.random_range(4.0..11.0)];
            let half = [rng.random_range(0.3..1.0), rng.random_range(0.3..1.0)];
            let h = rng.random_range(0.5..2.5);
            primitives.push(Primitive {
                shape: Shape::Cuboid { min: [c[0] - half[0], c[1] - half[1], 0.0], max: [c[0] + half[0], c[1] + half[1], h] },
                texture: Texture::random(rng),
            });
        }
        for _ in 0..cfg.n_spheres {
            let r = rng.random_range(0.4..1.0);
            let center = [rng.random_range(-4.0..4.0), rng.random_range(4.0..11.0), r + rng.random_range(0.0..0.8)];
            primitives.push(Primitive { shape: Shape::Sphere { center, radius: r }, texture: Texture::random(rng) });
        }
        let yaw = rng.random_range(-cfg.yaw_deg_max..=cfg.yaw_deg_max).to_radians();
        let pitch = cfg.pitch_deg.to_radians();
        let forward = [yaw.sin() * pitch.cos(), yaw.cos() * pitch.cos(), -pitch.sin()];
        let center = [0.0, 0.0, cfg.camera_height];
        let camera = CameraModel::look(cfg.focal, cfg.height, cfg.width, center, forward)?;
        Ok(Scene { primitives, camera, sensor_origin: add(&center, &cfg.sensor_offset) })
    }

    pub fn first_hit(&self, o: &Point3, d: &Point3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (prim, p) in self.primitives.iter().enumerate() {
            if let Some((t, normal)) = p.shape.intersect(o, d) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit { t, prim, normal });
                }
            }
        }
        best
    }

    /// Shaded intensity seen along a camera ray.
    fn radiance(&self, o: &Point3, d: &Point3) -> f64 {
        match self.first_hit(o, d) {
            None => SKY,
            Some(h) => {
                let p = add(o, &scale(d, h.t));
                let n = if dot(&h.normal, d) > 0.0 { scale(&h.normal, -1.0) } else { h.normal };
                let lambert = dot(&n, &normalize(&LIGHT)).max(0.0);
                (self.primitives[h.prim].texture.at(&p) * (0.5 + 0.5 * lambert)).clamp(0.0, 1.0)
            }
        }
    }

    /// Ray-cast one sample per pixel center.
    pub fn render(&self) -> ImageGrid {
        let cam = &self.camera;
        let o = cam.center();
        let mut img = ImageGrid::filled(1, cam.height, cam.width, 0.0);
        for r in 0..cam.height {
            for c in 0..cam.width {
                *img.at_mut(0, r, c) = self.radiance(&o, &cam.ray_direction(r as f64, c as f64));
            }
        }
        img
    }

    /// Surface samples hit by random sensor rays spread over the camera
    /// field of view (plus `margin_px`). Attribute = surface reflectivity.
    pub fn sample_cloud(&self, n: usize, margin_px: f64, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
        let cam = &self.camera;
        let o = self.sensor_origin;
        let (rlo, rhi) = (-0.5 - margin_px + 1e-9, cam.height as f64 - 0.5 + margin_px - 1e-9);
        let (clo, chi) = (-0.5 - margin_px + 1e-9, cam.width as f64 - 0.5 + margin_px - 1e-9);
        let mut xyz = Vec::with_capacity(n);
        let mut attrs = Vec::with_capacity(n);
        let max_attempts = 50 * n;
        for _ in 0..max_attempts {
            if xyz.len() == n {
                break;
            }
            let d = cam.ray_direction(rng.random_range(rlo..rhi), rng.random_range(clo..chi));
            if let Some(h) = self.first_hit(&o, &d) {
                let p = add(&o, &scale(&d, h.t));
                attrs.push(self.primitives[h.prim].texture.at(&p));
                xyz.push(p);
            }
        }
        if xyz.len() < n {
            return Err(Error::invalid("sample_cloud", format!("only {} of {n} sensor rays hit a surface", xyz.len())));
        }
        PointCloud::new(xyz, attrs, 1)
    }

    /// Whether nothing lies between the camera and `p`.
    pub fn visible_from_camera(&self, p: &Point3) -> bool {
        let o = self.camera.center();
        let v = sub(p, &o);
        let dist = norm(&v);
        if dist < T_MIN {
            return false;
        }
        match self.first_hit(&o, &scale(&v, 1.0 / dist)) {
            Some(h) => h.t >= dist * (1.0 - 1e-9) - 1e-9,
            None => true,
        }
    }

    /// Unoccluded points, rounded to their nearest pixel; per pixel the
    /// closest point wins (ties to the lower index). Sorted by point index.
    pub fn correspondences(&self, cloud: &PointCloud) -> Vec<Correspondence> {
        let cam = &self.camera;
        let mut zbuf: HashMap<(usize, usize), (f64, usize)> = HashMap::new();
        for (i, p) in cloud.xyz.iter().enumerate() {
            let proj = cam.project_point(p);
            let (Some(px), Projection::Front { depth, .. }) = (proj.pixel(cam.height, cam.width), proj) else {
                continue;
            };
            if !self.visible_from_camera(p) {
                continue;
            }
            let slot = zbuf.entry(px).or_insert((depth, i));
            if depth < slot.0 {
                *slot = (depth, i);
            }
        }
        let mut out: Vec<Correspondence> =
            zbuf.into_iter().map(|((row, col), (_, point))| Correspondence { row, col, point }).collect();
        out.sort_by_key(|c| c.point);
        out
    }
}

/// Deterministic synthetic scene for `(seed, cfg)`.
pub fn generate_scene(seed: u64, scene_id: u64, cfg: &SceneConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::random(cfg, &mut rng)?;
    realize(&scene, seed, scene_id, cfg, &mut rng)
}

/// Render, sample and match a given scene.
pub fn realize(scene: &Scene, seed: u64, scene_id: u64, cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<SceneSample> {
    let image = scene.render();
    let cloud = scene.sample_cloud(cfg.n_points, cfg.fov_margin_px, rng)?;
    let correspondences = scene.correspondences(&cloud);
    if correspondences.len() < cfg.min_correspondences {
        return Err(Error::DegenerateBatch(format!(
            "scene seed {seed}: {} correspondences, need {}",
            correspondences.len(),
            cfg.min_correspondences
        )));
    }
    Ok(SceneSample { image, cloud, correspondences, camera: scene.camera.clone(), scene_id, seed })
}
