//! Analytic synthetic scenes: ray-cast ground truth for images, depth and
//! labels, and the matching voxel occupancy.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmetrics::{VoxelLabels, FREE_VOXEL};
use crate::geometry::{CameraModel, Image, LabelMap, Pose, Ray, UNCERTAIN_LABEL};
use crate::grid::OccupancyGrid;
use crate::sampler::mix_seed;

/// Voxel label for primitives without a category.
pub const UNLABELED_VOXEL: u8 = 253;

const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    /// Rectangle `size.x × size.y` in the local xy plane; `size.z` is the
    /// slab thickness used for voxelization.
    Plane,
    /// Radius `size.x` about the local origin.
    Sphere,
    /// Full extents `size` centered on the local origin.
    Box,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Texture {
    Checker { period: f64, colors: [[f64; 3]; 2] },
    Stripes { period: f64, colors: [[f64; 3]; 2] },
    Noise { seed: u64, scale: f64 },
}

impl Texture {
    pub fn eval(&self, u: f64, v: f64) -> [f64; 3] {
        match self {
            Texture::Checker { period, colors } => {
                let parity = ((u / period).floor() + (v / period).floor()).rem_euclid(2.0);
                colors[parity as usize]
            }
            Texture::Stripes { period, colors } => colors[(u / period).floor().rem_euclid(2.0) as usize],
            Texture::Noise { seed, scale } => {
                let (fu, fv) = (u / scale, v / scale);
                let (iu, iv) = (fu.floor(), fv.floor());
                let (su, sv) = (smooth(fu - iu), smooth(fv - iv));
                let lattice = |a: f64, b: f64| {
                    let h = mix_seed(*seed, &[a as i64 as u64, b as i64 as u64]);
                    0.1 + 0.8 * (h >> 11) as f64 / (1u64 << 53) as f64
                };
                let top = lattice(iu, iv) * (1.0 - su) + lattice(iu + 1.0, iv) * su;
                let bot = lattice(iu, iv + 1.0) * (1.0 - su) + lattice(iu + 1.0, iv + 1.0) * su;
                let g = top * (1.0 - sv) + bot * sv;
                [g, g, g]
            }
        }
    }

    /// Texture averaged over a `wu × wv` box around `(u, v)`. Checker and
    /// stripe patterns are integrated analytically; noise is point-sampled.
    pub fn eval_filtered(&self, u: f64, v: f64, wu: f64, wv: f64) -> [f64; 3] {
        let mix = |colors: &[[f64; 3]; 2], c: f64| {
            let a = 0.5 * (1.0 + c);
            [0, 1, 2].map(|k| colors[0][k] * a + colors[1][k] * (1.0 - a))
        };
        match self {
            Texture::Checker { period, colors } => {
                mix(colors, box_square_wave(u, *period, wu) * box_square_wave(v, *period, wv))
            }
            Texture::Stripes { period, colors } => mix(colors, box_square_wave(u, *period, wu)),
            Texture::Noise { .. } => self.eval(u, v),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Texture::Checker { period, .. } | Texture::Stripes { period, .. } => *period > 0.0,
            Texture::Noise { scale, .. } => *scale > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config("texture period/scale must be positive".into()))
        }
    }
}

/// Mean over `[x - w/2, x + w/2]` of the wave that is +1 where
/// `floor(x / half)` is even and -1 elsewhere.
fn box_square_wave(x: f64, half: f64, w: f64) -> f64 {
    let point = if (x / half).floor().rem_euclid(2.0) == 0.0 { 1.0 } else { -1.0 };
    if w < 1e-6 * half {
        return point;
    }
    // antiderivative: triangle wave rising on even cells
    let integral = |x: f64| {
        let f = (x / half).rem_euclid(2.0);
        half * if f < 1.0 { f } else { 2.0 - f }
    };
    (integral(x + 0.5 * w) - integral(x - 0.5 * w)) / w
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    /// World-from-local transform.
    pub pose: Pose,
    pub size: [f64; 3],
    pub texture: Texture,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<u8>,
}

/// Closest intersection along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Parameter along the (possibly unnormalized) ray direction.
    pub t: f64,
    pub primitive: usize,
    pub uv: (f64, f64),
}

impl Primitive {
    /// Ray parameter and surface coordinates of the nearest hit with `t > 0`.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, (f64, f64))> {
        let inv = self.pose.inverse();
        let o = inv.transform_point(origin);
        let d = inv.transform_vector(dir);
        match self.kind {
            PrimitiveKind::Plane => {
                if d.z == 0.0 {
                    return None;
                }
                let t = -o.z / d.z;
                let p = o + d * t;
                (t > HIT_EPS && p.x.abs() <= 0.5 * self.size[0] && p.y.abs() <= 0.5 * self.size[1])
                    .then_some((t, (p.x, p.y)))
            }
            PrimitiveKind::Sphere => {
                let r = self.size[0];
                let a = d.dot(&d);
                let b = o.dot(&d);
                let c = o.dot(&o) - r * r;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-b - sq) / a, (-b + sq) / a].into_iter().find(|&t| t > HIT_EPS)?;
                let p = o + d * t;
                let theta = (p.z / r).clamp(-1.0, 1.0).acos();
                Some((t, (p.y.atan2(p.x) * r, theta * r)))
            }
            PrimitiveKind::Box => {
                let h = Vector3::new(self.size[0], self.size[1], self.size[2]) * 0.5;
                let (mut t0, mut t1, mut axis0, mut axis1) = (f64::NEG_INFINITY, f64::INFINITY, 0, 0);
                for k in 0..3 {
                    if d[k] == 0.0 {
                        if o[k].abs() > h[k] {
                            return None;
                        }
                        continue;
                    }
                    let (mut a, mut b) = ((-h[k] - o[k]) / d[k], (h[k] - o[k]) / d[k]);
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                    }
                    if a > t0 {
                        t0 = a;
                        axis0 = k;
                    }
                    if b < t1 {
                        t1 = b;
                        axis1 = k;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                let (t, axis) = if t0 > HIT_EPS {
                    (t0, axis0)
                } else if t1 > HIT_EPS {
                    (t1, axis1)
                } else {
                    return None;
                };
                let p = o + d * t;
                let uv = match axis {
                    0 => (p.y, p.z),
                    1 => (p.x, p.z),
                    _ => (p.x, p.y),
                };
                Some((t, uv))
            }
        }
    }

    /// Whether a world point lies inside the primitive. With `shell`, only
    /// points within that distance of the surface count.
    pub fn contains(&self, p: &Vector3<f64>, shell: Option<f64>) -> bool {
        let q = self.pose.inverse().transform_point(p);
        match self.kind {
            PrimitiveKind::Plane => {
                q.x.abs() <= 0.5 * self.size[0] && q.y.abs() <= 0.5 * self.size[1] && q.z.abs() <= 0.5 * self.size[2]
            }
            PrimitiveKind::Sphere => {
                let r = q.norm();
                r <= self.size[0] && shell.is_none_or(|s| r >= self.size[0] - s)
            }
            PrimitiveKind::Box => {
                let margin = (0..3).map(|k| 0.5 * self.size[k] - q[k].abs()).fold(f64::INFINITY, f64::min);
                margin >= 0.0 && shell.is_none_or(|s| margin <= s)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let needed = match self.kind {
            PrimitiveKind::Plane => 2,
            PrimitiveKind::Sphere => 1,
            PrimitiveKind::Box => 3,
        };
        if self.size[..needed].iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!("{:?} primitive needs positive size, got {:?}", self.kind, self.size)));
        }
        if self.category.is_some_and(|c| c >= UNLABELED_VOXEL) {
            return Err(Error::Config("primitive category ids must be below 253".into()));
        }
        self.texture.validate()
    }
}

fn default_channels() -> usize {
    3
}

fn default_supersample() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub rig: Vec<CameraModel>,
    /// World-from-ego pose per frame.
    pub trajectory: Vec<Pose>,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default)]
    pub background: [f64; 3],
    /// Subpixel grid side used to anti-alias image colors.
    #[serde(default = "default_supersample")]
    pub supersample: usize,
    /// Standard deviation in pixels of a Gaussian applied after rendering,
    /// to band-limit edges for bilinear resampling. 0 disables it.
    #[serde(default)]
    pub pixel_blur: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::Config("scene needs at least one primitive".into()));
        }
        if self.rig.is_empty() || self.trajectory.is_empty() {
            return Err(Error::Config("scene needs at least one camera and one frame".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.supersample == 0 {
            return Err(Error::Config("supersample must be >= 1".into()));
        }
        if !(self.pixel_blur >= 0.0) || self.pixel_blur > 8.0 {
            return Err(Error::Config(format!("pixel_blur must lie in [0, 8], got {}", self.pixel_blur)));
        }
        self.primitives.iter().try_for_each(Primitive::validate)
    }

    /// Closest hit of a world-space ray.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some((t, uv)) = p.intersect(origin, dir) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit { t, primitive: i, uv });
                }
            }
        }
        best
    }

    fn world_ray(&self, frame: usize, cam: &CameraModel, u: f64, v: f64) -> Ray {
        let ray = cam.generate_ray(u, v);
        let pose = &self.trajectory[frame];
        Ray {
            origin: pose.transform_point(&ray.origin),
            direction: pose.transform_vector(&ray.direction),
            pixel: ray.pixel,
        }
    }

    /// Camera z-depth and label at a pixel; background gives `(inf, 255)`.
    pub fn depth_at_pixel(&self, frame: usize, cam: &CameraModel, u: f64, v: f64) -> (f64, u8) {
        let ray = self.world_ray(frame, cam, u, v);
        match self.cast(&ray.origin, &ray.direction) {
            Some(h) => (h.t, self.primitives[h.primitive].category.unwrap_or(UNCERTAIN_LABEL)),
            None => (f64::INFINITY, UNCERTAIN_LABEL),
        }
    }

    /// Color of a ray, box-filtered over the texture footprint spanned by the
    /// neighbouring directions `dir + du` and `dir + dv`.
    fn color(&self, ray: &Ray, du: &Vector3<f64>, dv: &Vector3<f64>) -> [f64; 3] {
        let Some(h) = self.cast(&ray.origin, &ray.direction) else {
            return self.background;
        };
        let prim = &self.primitives[h.primitive];
        let (mut wu, mut wv) = (0.0f64, 0.0f64);
        for off in [du, dv] {
            if let Some((_, (u2, v2))) = prim.intersect(&ray.origin, &(ray.direction + off)) {
                wu = wu.max((u2 - h.uv.0).abs());
                wv = wv.max((v2 - h.uv.1).abs());
            }
        }
        prim.texture.eval_filtered(h.uv.0, h.uv.1, wu, wv)
    }
}

/// Ground truth for one camera at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthView {
    pub camera: String,
    pub image: Image,
    /// Camera z-depth; `+inf` where nothing is hit.
    pub depth: Image,
    pub labels: LabelMap,
}

pub fn render_view(scene: &SceneSpec, frame: usize, cam: &CameraModel) -> Result<GroundTruthView> {
    scene.validate()?;
    if frame >= scene.trajectory.len() {
        return Err(Error::InvalidParameter(format!("frame {frame} out of range")));
    }
    let (w, h) = (cam.width, cam.height);
    let ss = scene.supersample;
    let mut image = Image::new(w, h, scene.channels);
    let mut depth = Image::new(w, h, 1);
    let mut labels = LabelMap::filled(w, h, UNCERTAIN_LABEL);
    for y in 0..h {
        for x in 0..w {
            let (d, l) = scene.depth_at_pixel(frame, cam, x as f64, y as f64);
            depth.set(x, y, 0, d);
            labels.set(x, y, l);
            let mut acc = [0.0; 3];
            let step = 1.0 / ss as f64;
            let pose = &scene.trajectory[frame];
            let du =
                pose.transform_vector(&cam.ego_from_camera.transform_vector(&Vector3::new(step / cam.fx, 0.0, 0.0)));
            let dv =
                pose.transform_vector(&cam.ego_from_camera.transform_vector(&Vector3::new(0.0, step / cam.fy, 0.0)));
            for sy in 0..ss {
                for sx in 0..ss {
                    let ou = (sx as f64 + 0.5) * step - 0.5;
                    let ov = (sy as f64 + 0.5) * step - 0.5;
                    let c = scene.color(&scene.world_ray(frame, cam, x as f64 + ou, y as f64 + ov), &du, &dv);
                    acc.iter_mut().zip(c).for_each(|(a, c)| *a += c);
                }
            }
            let n = (ss * ss) as f64;
            let px = image.pixel_mut(x, y);
            if px.len() == 1 {
                px[0] = (acc[0] + acc[1] + acc[2]) / (3.0 * n);
            } else {
                px.iter_mut().zip(acc).for_each(|(p, a)| *p = a / n);
            }
        }
    }
    if scene.pixel_blur > 0.0 {
        image = gaussian_blur(&image, scene.pixel_blur);
    }
    Ok(GroundTruthView { camera: cam.name.clone(), image, depth, labels })
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let (w, h, c) = image.dims();
    let pass = |src: &Image, horizontal: bool| {
        Image::from_fn(w, h, c, |x, y, ch| {
            kernel
                .iter()
                .zip(-r..=r)
                .map(|(k, o)| {
                    let (xx, yy) = if horizontal {
                        ((x as isize + o).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + o).clamp(0, h as isize - 1) as usize)
                    };
                    k * src.get(xx, yy, ch)
                })
                .sum()
        })
    };
    pass(&pass(image, true), false)
}

/// Ground truth for every camera of the rig at `frame`.
pub fn render_ground_truth(scene: &SceneSpec, frame: usize) -> Result<Vec<GroundTruthView>> {
    scene.rig.iter().map(|cam| render_view(scene, frame, cam)).collect()
}

/// Oracle labels over the grid's inside block. `world_from_grid` places the
/// grid's ego frame in the world; the first containing primitive wins.
pub fn voxelize_occupancy(
    scene: &SceneSpec,
    grid: &OccupancyGrid,
    world_from_grid: &Pose,
    shell: Option<f64>,
) -> VoxelLabels {
    let inside = grid.inside_dims();
    let off = grid.inside_offset();
    let mut out = VoxelLabels::free(inside);
    for x in 0..inside[0] {
        for y in 0..inside[1] {
            for z in 0..inside[2] {
                let p = world_from_grid.transform_point(&grid.voxel_center_ego([x + off[0], y + off[1], z + off[2]]));
                if let Some(prim) = scene.primitives.iter().find(|pr| pr.contains(&p, shell)) {
                    let i = out.index(x, y, z);
                    out.data[i] = prim.category.unwrap_or(UNLABELED_VOXEL);
                }
            }
        }
    }
    debug_assert!(out.data.iter().all(|&v| v == FREE_VOXEL || v <= UNLABELED_VOXEL));
    out
}

/// Rotation taking camera axes (x right, y down, z forward) to an ego frame
/// with x forward, y left, z up, after yawing left by `yaw` and pitching the
/// optical axis down by `pitch_down` (radians).
pub fn camera_rotation(yaw: f64, pitch_down: f64) -> Matrix3<f64> {
    let base = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    let tilt = Pose::from_euler(0.0, pitch_down, yaw, Vector3::zeros()).rotation;
    tilt * base
}

/// Pinhole camera with principal point at the image center.
pub fn rig_camera(
    name: &str,
    width: usize,
    height: usize,
    fx: f64,
    yaw: f64,
    pitch_down: f64,
    position: Vector3<f64>,
) -> Result<CameraModel> {
    let pose = Pose::new(camera_rotation(yaw, pitch_down), position)?;
    Ok(CameraModel::new(fx, fx, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, width, height, pose)?
        .named(name))
}
