//! Procedural rectified stereo scenes with analytic ground truth.
//!
//! A scene is an infinite fronto-parallel background plus textured
//! rectangles and ellipsoid caps. Both views are ray cast, so the right
//! image is an exact reprojection of the same textured surfaces, and
//! occlusion is decided by a z-buffer test against the right camera.

mod geometry;
pub mod io;
mod render;
mod texture;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{BoolMap, FloatMap};

pub use geometry::{
    forward_warp_disparity, normals_from_disparity, normals_from_disparity_masked, occlusion_from_disparity,
};
pub use io::{read_sample, write_sample};
pub use render::{fronto_background, fronto_rect, render, Camera, Primitive, RenderOutput, Scene, Shape, ViewRender};
pub use texture::{Texture, TextureFamily};

pub const GENERATOR_VERSION: &str = "greaten-synth/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub max_disparity: u32,
    pub planes: usize,
    pub ellipsoids: usize,
    pub textures: Vec<TextureFamily>,
    /// Focal length in pixels.
    pub focal: f64,
    /// Baseline in world units.
    pub baseline: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 192,
            max_disparity: 64,
            planes: 3,
            ellipsoids: 2,
            textures: TextureFamily::ALL.to_vec(),
            focal: 160.0,
            baseline: 0.1,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(32) || !self.width.is_multiple_of(32) {
            return bad(format!(
                "image size {}x{} must be positive multiples of 32",
                self.height, self.width
            ));
        }
        if self.max_disparity == 0 || !self.max_disparity.is_multiple_of(4) {
            return bad(format!(
                "max_disparity {} must be a positive multiple of 4",
                self.max_disparity
            ));
        }
        if self.max_disparity as usize * 2 >= self.width {
            return bad(format!(
                "max_disparity {} must be below half the width {}",
                self.max_disparity, self.width
            ));
        }
        if self.textures.is_empty() {
            return bad("at least one texture family is required".into());
        }
        if !(self.focal > 0.0 && self.baseline > 0.0) {
            return bad("focal length and baseline must be positive".into());
        }
        Ok(())
    }

    pub fn camera(&self) -> Camera {
        Camera::new(self.focal, self.baseline, self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub generator_version: String,
    pub height: usize,
    pub width: usize,
    pub max_disparity: u32,
    pub focal: f64,
    pub baseline: f64,
}

/// One rectified stereo pair with labels. Images are `[3, H, W]` in
/// `[0, 1]`; normals are `[3, H, W]` unit vectors (x right, y up, z toward
/// the camera); disparity is `[1, H, W]` in left-view pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub left_image: FloatMap,
    pub right_image: FloatMap,
    pub left_normals: FloatMap,
    pub right_normals: FloatMap,
    pub disparity_gt: FloatMap,
    pub valid_mask: BoolMap,
    pub occlusion_mask: BoolMap,
    pub meta: SampleMeta,
}

impl StereoSample {
    pub fn height(&self) -> usize {
        self.disparity_gt.height
    }

    pub fn width(&self) -> usize {
        self.disparity_gt.width
    }

    /// Check the sample invariants: unit normals and bounded disparity on
    /// valid pixels, occlusion inside validity, consistent sizes.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        for (name, m, ch) in [
            ("left image", &self.left_image, 3),
            ("right image", &self.right_image, 3),
            ("left normals", &self.left_normals, 3),
            ("right normals", &self.right_normals, 3),
            ("disparity", &self.disparity_gt, 1),
        ] {
            if m.height != h || m.width != w || m.channels != ch {
                return Err(Error::shape("StereoSample", format!("{name} has wrong shape")));
            }
        }
        if !self.occlusion_mask.is_subset_of(&self.valid_mask) {
            return Err(Error::Degenerate("occlusion mask is not inside the valid mask".into()));
        }
        let max_d = self.meta.max_disparity as f32;
        for y in 0..h {
            for x in 0..w {
                if !self.valid_mask.get(y, x) {
                    continue;
                }
                let d = self.disparity_gt.at(0, y, x);
                if !(d >= 0.0 && d < max_d) {
                    return Err(Error::Degenerate(format!("disparity {d} at ({x}, {y}) out of range")));
                }
                for normals in [&self.left_normals, &self.right_normals] {
                    let n: f32 = (0..3).map(|c| normals.at(c, y, x).powi(2)).sum::<f32>().sqrt();
                    if (n - 1.0).abs() > 1e-4 {
                        return Err(Error::Degenerate(format!("normal length {n} at ({x}, {y})")));
                    }
                }
            }
        }
        Ok(())
    }
}

fn rotation(yaw: f64, pitch: f64, roll: f64) -> [[f64; 3]; 3] {
    let (cy, sy) = (yaw.cos(), yaw.sin());
    let (cp, sp) = (pitch.cos(), pitch.sin());
    let (cr, sr) = (roll.cos(), roll.sin());
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut o = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                o[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        o
    };
    mul(mul(ry, rx), rz)
}

fn column(r: &[[f64; 3]; 3], j: usize) -> [f64; 3] {
    [r[0][j], r[1][j], r[2][j]]
}

/// Draw a random scene for `config`.
pub fn random_scene(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Scene {
    let cam = config.camera();
    let (h, w) = (config.height as f64, config.width as f64);
    let m = config.max_disparity as f64;
    let family = |rng: &mut ChaCha8Rng| *config.textures.choose(rng).expect("non-empty textures");

    let d_bg = rng.gen_range((0.08 * m).max(1.0)..(0.18 * m).max(1.5));
    let fam = family(rng);
    let period = rng.gen_range(18.0..30.0);
    let background = fronto_background(&cam, d_bg, Texture::random(rng, fam, period, d_bg / config.baseline));

    let mut objects = Vec::new();
    for _ in 0..config.planes {
        for _attempt in 0..32 {
            let (u, v) = (rng.gen_range(0.1 * w..0.9 * w), rng.gen_range(0.1 * h..0.9 * h));
            let d = rng.gen_range(0.25 * m..0.7 * m);
            let z = cam.depth_of(d);
            let half_u = rng.gen_range(w / 12.0..w / 5.0) * z / cam.focal;
            let half_v = rng.gen_range(h / 10.0..h / 4.0) * z / cam.focal;
            let r = rotation(
                rng.gen_range(-0.7..0.7),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.8..0.8),
            );
            let (ua, va) = (column(&r, 0), column(&r, 1));
            let center = cam.unproject(u, v, z);
            let corners_ok = [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)]
                .iter()
                .all(|(a, b)| {
                    let cz = center[2] + a * half_u * ua[2] + b * half_v * va[2];
                    cz > 0.0 && cam.disparity_of(cz) < 0.9 * m && cam.disparity_of(cz) > 1.05 * d_bg
                });
            if !corners_ok {
                continue;
            }
            let fam = family(rng);
            let period = rng.gen_range(24.0..40.0);
            objects.push(Primitive {
                shape: Shape::Plane {
                    center,
                    u: ua,
                    v: va,
                    half_u,
                    half_v,
                },
                texture: Texture::random(rng, fam, period, d / config.baseline),
            });
            break;
        }
    }
    for _ in 0..config.ellipsoids {
        let (u, v) = (rng.gen_range(0.1 * w..0.9 * w), rng.gen_range(0.1 * h..0.9 * h));
        let d = rng.gen_range(0.25 * m..0.7 * m);
        let z_pole = cam.depth_of(d);
        let rx = rng.gen_range(w / 14.0..w / 7.0) * z_pole / cam.focal;
        let ry = rng.gen_range(h / 10.0..h / 5.0) * z_pole / cam.focal;
        let rz = 0.5 * (rx + ry) * rng.gen_range(0.5..1.2);
        let pole = cam.unproject(u, v, z_pole);
        let fam = family(rng);
        let period = rng.gen_range(30.0..48.0);
        objects.push(Primitive {
            shape: Shape::EllipsoidCap {
                center: [pole[0], pole[1], z_pole + rz],
                radii: [rx, ry, rz],
                cap: rng.gen_range(0.55..0.8),
            },
            texture: Texture::random(rng, fam, period, d / config.baseline),
        });
    }
    objects.shuffle(rng);
    Scene { background, objects }
}

/// Assemble a sample from a rendering. Pixels without a surface, or with
/// disparity outside `(0, max_disparity)`, are invalid.
pub fn sample_from_render(out: &RenderOutput, meta: SampleMeta) -> StereoSample {
    let (h, w) = (meta.height, meta.width);
    let max_d = meta.max_disparity as f32;
    let mut valid = BoolMap::new(h, w, false);
    let mut disp = out.left.disparity.clone();
    let mut occ = out.occlusion.clone();
    for y in 0..h {
        for x in 0..w {
            let d = disp.at(0, y, x);
            let ok = out.left.depth[y * w + x].is_finite() && d > 0.0 && d < max_d;
            valid.set(y, x, ok);
            if !ok {
                disp.set(0, y, x, 0.0);
                occ.set(y, x, false);
            }
        }
    }
    let mut left_normals = out.left.normals.clone();
    let mut right_normals = out.right.normals.clone();
    for normals in [&mut left_normals, &mut right_normals] {
        for y in 0..h {
            for x in 0..w {
                let n: f32 = (0..3).map(|c| normals.at(c, y, x).powi(2)).sum();
                if n == 0.0 {
                    normals.set(2, y, x, 1.0);
                }
            }
        }
    }
    StereoSample {
        left_image: out.left.image.clone(),
        right_image: out.right.image.clone(),
        left_normals,
        right_normals,
        disparity_gt: disp,
        valid_mask: valid,
        occlusion_mask: occ,
        meta,
    }
}

/// Scene, full rendering and sample for `config`.
pub fn generate_scene_detailed(config: &SceneConfig) -> Result<(StereoSample, RenderOutput, Scene)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scene = random_scene(config, &mut rng);
    let out = render(&scene, &config.camera(), config.height, config.width);
    let meta = SampleMeta {
        seed: config.seed,
        generator_version: GENERATOR_VERSION.to_string(),
        height: config.height,
        width: config.width,
        max_disparity: config.max_disparity,
        focal: config.focal,
        baseline: config.baseline,
    };
    let sample = sample_from_render(&out, meta);
    Ok((sample, out, scene))
}

pub fn generate_scene(config: &SceneConfig) -> Result<StereoSample> {
    generate_scene_detailed(config).map(|(s, _, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_sizes() {
        let mut c = SceneConfig {
            height: 100,
            ..SceneConfig::default()
        };
        assert!(generate_scene(&c).is_err());
        c.height = 128;
        c.max_disparity = 96;
        assert!(generate_scene(&c).is_err());
        c.max_disparity = 62;
        assert!(generate_scene(&c).is_err());
    }

    #[test]
    fn generated_sample_satisfies_invariants() {
        for seed in 0..3 {
            let s = generate_scene(&SceneConfig {
                seed,
                height: 64,
                width: 96,
                max_disparity: 32,
                ..SceneConfig::default()
            })
            .unwrap();
            s.validate().unwrap();
            assert!(s.valid_mask.count() > 0);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let c = SceneConfig {
            seed: 11,
            height: 32,
            width: 64,
            max_disparity: 16,
            ..SceneConfig::default()
        };
        assert_eq!(generate_scene(&c).unwrap(), generate_scene(&c).unwrap());
    }
}
