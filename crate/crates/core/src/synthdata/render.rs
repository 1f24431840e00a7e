//! Ray-cast renderer for rectified stereo pairs. Pixel `(x, y)` is centred
//! at integer coordinates; the left camera sits at the origin looking down
//! `+z` (x right, y down) and the right camera is offset by the baseline
//! along `+x`.

use serde::{Deserialize, Serialize};

use super::texture::{Texture, TextureSampler};
use crate::maps::{BoolMap, FloatMap};

type V3 = [f64; 3];

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add_scaled(a: V3, b: V3, s: f64) -> V3 {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

pub(crate) fn normalize(a: V3) -> V3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

pub(crate) fn cross(a: V3, b: V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Pinhole intrinsics shared by both views.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub focal: f64,
    pub baseline: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    pub fn new(focal: f64, baseline: f64, height: usize, width: usize) -> Self {
        Self {
            focal,
            baseline,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    pub fn depth_of(&self, disparity: f64) -> f64 {
        self.focal * self.baseline / disparity
    }

    pub fn disparity_of(&self, depth: f64) -> f64 {
        self.focal * self.baseline / depth
    }

    /// World point seen by the left camera at pixel `(x, y)` and depth `z`.
    pub fn unproject(&self, x: f64, y: f64, z: f64) -> V3 {
        [(x - self.cx) * z / self.focal, (y - self.cy) * z / self.focal, z]
    }

    fn ray(&self, x: f64, y: f64) -> V3 {
        [(x - self.cx) / self.focal, (y - self.cy) / self.focal, 1.0]
    }
}

/// Surface geometry in camera coordinates of the left view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// Rectangle (or infinite plane when the half extents are infinite)
    /// spanned by orthonormal in-plane axes `u`, `v`.
    Plane {
        center: V3,
        u: V3,
        v: V3,
        half_u: f64,
        half_v: f64,
    },
    /// Front cap of an axis-aligned ellipsoid: the part with local
    /// `z <= -cap * radii[2]`.
    EllipsoidCap { center: V3, radii: V3, cap: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: Texture,
}

#[derive(Clone, Copy, Debug)]
struct Hit {
    t: f64,
    normal: V3,
    local: V3,
}

impl Shape {
    /// Nearest intersection of `origin + t * dir` with `t > 0`.
    fn intersect(&self, origin: V3, dir: V3) -> Option<Hit> {
        match *self {
            Shape::Plane {
                center,
                u,
                v,
                half_u,
                half_v,
            } => {
                let n = cross(u, v);
                let denom = dot(n, dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = dot(n, sub(center, origin)) / denom;
                if t <= 0.0 {
                    return None;
                }
                let rel = sub(add_scaled(origin, dir, t), center);
                let (s, r) = (dot(rel, u), dot(rel, v));
                if s.abs() > half_u || r.abs() > half_v {
                    return None;
                }
                let normal = if denom > 0.0 { [-n[0], -n[1], -n[2]] } else { n };
                Some(Hit {
                    t,
                    normal,
                    local: [s, r, 0.0],
                })
            }
            Shape::EllipsoidCap { center, radii, cap } => {
                let o = sub(origin, center);
                let os = [o[0] / radii[0], o[1] / radii[1], o[2] / radii[2]];
                let ds = [dir[0] / radii[0], dir[1] / radii[1], dir[2] / radii[2]];
                let a = dot(ds, ds);
                let b = 2.0 * dot(os, ds);
                let c = dot(os, os) - 1.0;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / (2.0 * a);
                if t <= 0.0 {
                    return None;
                }
                let local = add_scaled(o, dir, t);
                if local[2] > -cap * radii[2] {
                    return None;
                }
                let g = [
                    local[0] / (radii[0] * radii[0]),
                    local[1] / (radii[1] * radii[1]),
                    local[2] / (radii[2] * radii[2]),
                ];
                Some(Hit {
                    t,
                    normal: normalize(g),
                    local,
                })
            }
        }
    }
}

/// A background plane plus foreground primitives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub background: Primitive,
    pub objects: Vec<Primitive>,
}

impl Scene {
    fn primitives(&self) -> impl Iterator<Item = &Primitive> {
        std::iter::once(&self.background).chain(self.objects.iter())
    }
}

/// Infinite fronto-parallel plane at constant disparity.
pub fn fronto_background(camera: &Camera, disparity: f64, texture: Texture) -> Primitive {
    Primitive {
        shape: Shape::Plane {
            center: [0.0, 0.0, camera.depth_of(disparity)],
            u: [1.0, 0.0, 0.0],
            v: [0.0, 1.0, 0.0],
            half_u: f64::INFINITY,
            half_v: f64::INFINITY,
        },
        texture,
    }
}

/// Fronto-parallel rectangle covering left-view pixel columns `x0..x1` and
/// rows `y0..y1` (continuous coordinates) at constant disparity.
pub fn fronto_rect(camera: &Camera, x: (f64, f64), y: (f64, f64), disparity: f64, texture: Texture) -> Primitive {
    let z = camera.depth_of(disparity);
    let a = camera.unproject(x.0, y.0, z);
    let b = camera.unproject(x.1, y.1, z);
    Primitive {
        shape: Shape::Plane {
            center: [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, z],
            u: [1.0, 0.0, 0.0],
            v: [0.0, 1.0, 0.0],
            half_u: (b[0] - a[0]).abs() / 2.0,
            half_v: (b[1] - a[1]).abs() / 2.0,
        },
        texture,
    }
}

/// Per-view rendering with primitive ids (0 = background).
#[derive(Clone, Debug)]
pub struct ViewRender {
    pub image: FloatMap,
    pub normals: FloatMap,
    pub disparity: FloatMap,
    pub ids: Vec<u16>,
    /// Depth along the optical axis, kept in double precision.
    pub depth: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub left: ViewRender,
    pub right: ViewRender,
    /// Left pixels whose surface point is hidden from, or projects outside,
    /// the right camera.
    pub occlusion: BoolMap,
}

struct Caster<'a> {
    scene: &'a Scene,
    samplers: Vec<TextureSampler<'a>>,
}

struct SurfaceHit {
    id: usize,
    hit: Hit,
}

impl<'a> Caster<'a> {
    fn new(scene: &'a Scene) -> Self {
        Self {
            scene,
            samplers: scene.primitives().map(|p| p.texture.sampler()).collect(),
        }
    }

    fn cast(&self, origin: V3, dir: V3) -> Option<SurfaceHit> {
        let mut best: Option<SurfaceHit> = None;
        for (id, p) in self.scene.primitives().enumerate() {
            if let Some(hit) = p.shape.intersect(origin, dir) {
                if best.as_ref().is_none_or(|b| hit.t < b.hit.t) {
                    best = Some(SurfaceHit { id, hit });
                }
            }
        }
        best
    }
}

/// Camera-frame normal with y up and z toward the viewer.
fn to_output_frame(n: V3) -> V3 {
    [n[0], -n[1], -n[2]]
}

fn render_view(caster: &Caster, camera: &Camera, origin: V3, h: usize, w: usize) -> ViewRender {
    let mut image = FloatMap::new(3, h, w);
    let mut normals = FloatMap::new(3, h, w);
    let mut disparity = FloatMap::new(1, h, w);
    let mut ids = vec![u16::MAX; h * w];
    let mut depth = vec![f64::INFINITY; h * w];
    for y in 0..h {
        for x in 0..w {
            let dir = camera.ray(x as f64, y as f64);
            let Some(s) = caster.cast(origin, dir) else {
                continue;
            };
            let col = caster.samplers[s.id].color(s.hit.local);
            let n = to_output_frame(s.hit.normal);
            for c in 0..3 {
                image.set(c, y, x, col[c] as f32);
                normals.set(c, y, x, n[c] as f32);
            }
            disparity.set(0, y, x, camera.disparity_of(s.hit.t) as f32);
            ids[y * w + x] = s.id as u16;
            depth[y * w + x] = s.hit.t;
        }
    }
    ViewRender {
        image,
        normals,
        disparity,
        ids,
        depth,
    }
}

/// Relative depth tolerance of the z-buffer visibility test.
const ZBUFFER_REL_TOL: f64 = 1e-7;

/// Render both views and the left-view occlusion mask.
pub fn render(scene: &Scene, camera: &Camera, height: usize, width: usize) -> RenderOutput {
    let caster = Caster::new(scene);
    let right_origin = [camera.baseline, 0.0, 0.0];
    let left = render_view(&caster, camera, [0.0; 3], height, width);
    let right = render_view(&caster, camera, right_origin, height, width);

    let mut occlusion = BoolMap::new(height, width, false);
    for y in 0..height {
        for x in 0..width {
            let z = left.depth[y * width + x];
            if !z.is_finite() {
                continue;
            }
            let xr = x as f64 - camera.disparity_of(z);
            let occluded = if xr < 0.0 {
                true
            } else {
                match caster.cast(right_origin, camera.ray(xr, y as f64)) {
                    Some(s) => s.hit.t < z * (1.0 - ZBUFFER_REL_TOL),
                    None => false,
                }
            };
            occlusion.set(y, x, occluded);
        }
    }
    RenderOutput { left, right, occlusion }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fronto_plane_has_constant_disparity_and_facing_normal() {
        let cam = Camera::new(100.0, 0.2, 32, 64);
        let scene = Scene {
            background: fronto_background(&cam, 7.25, Texture::flat(0.5)),
            objects: vec![],
        };
        let out = render(&scene, &cam, 32, 64);
        assert!(out.left.disparity.data.iter().all(|&d| (d - 7.25).abs() < 1e-5));
        for y in 0..32 {
            for x in 0..64 {
                assert_eq!(
                    [
                        out.left.normals.at(0, y, x),
                        out.left.normals.at(1, y, x),
                        out.left.normals.at(2, y, x)
                    ],
                    [0.0, 0.0, 1.0]
                );
            }
        }
    }

    #[test]
    fn ellipsoid_cap_normal_faces_camera() {
        let cam = Camera::new(100.0, 0.2, 32, 32);
        let scene = Scene {
            background: fronto_background(&cam, 2.0, Texture::flat(0.5)),
            objects: vec![Primitive {
                shape: Shape::EllipsoidCap {
                    center: [0.0, 0.0, 5.0],
                    radii: [1.0, 1.0, 1.0],
                    cap: 0.5,
                },
                texture: Texture::flat(0.9),
            }],
        };
        let out = render(&scene, &cam, 32, 32);
        let (cy, cx) = (16, 16);
        assert_eq!(out.left.ids[cy * 32 + cx], 1);
        assert!(out.left.normals.at(2, cy, cx) > 0.99);
        // Depth at the centre ray is the near pole.
        assert!((out.left.depth[cy * 32 + cx] - 4.0).abs() < 0.01);
    }
}
