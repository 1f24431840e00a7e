//! Specular and transparent augmentation.
//!
//! Specular highlights are feathered white ellipses drawn independently in
//! each view, so they break left/right photometric consistency.
//! Transparent patches paste the same donor content (or flat gray) into a
//! left rectangle and into its epipolar counterpart in the right view,
//! producing a consistent "imaginary" texture that does not follow the true
//! surface. Labels are never modified.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::FloatMap;
use crate::synthdata::{fronto_background, render, Camera, Scene, StereoSample, Texture, TextureFamily};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StaConfig {
    pub p_specular: f64,
    pub p_transparent: f64,
    /// Inclusive range of ellipses per view.
    pub ellipse_count: [usize; 2],
    /// Semi-axis range in pixels.
    pub ellipse_axes: [f64; 2],
    /// Highlight intensity range, within `(0, 1]`.
    pub intensity: [f64; 2],
    /// Border blur standard deviation range in pixels.
    pub blur_sigma: [f64; 2],
    /// Transparent patch side range in pixels.
    pub patch_size: [usize; 2],
    /// Maximum absolute horizontal jitter of the right patch.
    pub jitter: i64,
    pub p_gray: f64,
    /// Donor blend weight range, within `(0, 1)`.
    pub alpha: [f64; 2],
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for StaConfig {
    fn default() -> Self {
        Self {
            p_specular: 0.5,
            p_transparent: 0.5,
            ellipse_count: [1, 3],
            ellipse_axes: [4.0, 20.0],
            intensity: [0.3, 1.0],
            blur_sigma: [0.5, 3.0],
            patch_size: [16, 48],
            jitter: 2,
            p_gray: 0.25,
            alpha: [0.5, 0.95],
            max_attempts: 10,
            seed: 0,
        }
    }
}

fn ordered<T: PartialOrd + std::fmt::Debug>(name: &str, r: &[T; 2]) -> Result<()> {
    if r[0] > r[1] {
        return Err(Error::Config(format!("{name} range {r:?} is not ordered")));
    }
    Ok(())
}

impl StaConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_specular", self.p_specular),
            ("p_transparent", self.p_transparent),
            ("p_gray", self.p_gray),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        ordered("ellipse_count", &self.ellipse_count)?;
        ordered("ellipse_axes", &self.ellipse_axes)?;
        ordered("intensity", &self.intensity)?;
        ordered("blur_sigma", &self.blur_sigma)?;
        ordered("patch_size", &self.patch_size)?;
        ordered("alpha", &self.alpha)?;
        if self.ellipse_axes[0] <= 0.0 || self.blur_sigma[0] < 0.0 || self.patch_size[0] == 0 {
            return Err(Error::Config("ellipse axes and patch sizes must be positive".into()));
        }
        if !(self.intensity[0] > 0.0 && self.intensity[1] <= 1.0) {
            return Err(Error::Config("intensity range must lie in (0, 1]".into()));
        }
        if !(self.alpha[0] > 0.0 && self.alpha[1] < 1.0) {
            return Err(Error::Config("alpha range must lie in (0, 1)".into()));
        }
        if self.jitter < 0 {
            return Err(Error::Config("jitter must be non-negative".into()));
        }
        Ok(())
    }
}

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

/// Integer rectangle; `x`, `y` may be negative for clipped placements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: i64,
    pub y: i64,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + (self.w as f64 - 1.0) / 2.0,
            self.y as f64 + (self.h as f64 - 1.0) / 2.0,
        )
    }

    fn overlaps(&self, height: usize, width: usize) -> bool {
        self.x < width as i64 && self.y < height as i64 && self.x + self.w as i64 > 0 && self.y + self.h as i64 > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecularRegion {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    pub angle: f64,
    pub intensity: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransparentRegion {
    pub left: Rect,
    pub right: Rect,
    /// Lower median of ground-truth disparity over the left rectangle.
    pub median_disparity: f64,
    pub jitter: i64,
    /// `right.x - left.x`.
    pub horizontal_offset: i64,
    /// `right.y - left.y`.
    pub vertical_offset: i64,
    /// Donor blend weight; absent for gray fills.
    pub alpha: Option<f64>,
    /// Top-left corner of the donor patch.
    pub donor_origin: Option<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AugmentedRegion {
    SpecularLeft(SpecularRegion),
    SpecularRight(SpecularRegion),
    Transparent(TransparentRegion),
    Gray(TransparentRegion),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub regions: Vec<AugmentedRegion>,
}

impl AugmentationRecord {
    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn transparent_regions(&self) -> impl Iterator<Item = &TransparentRegion> {
        self.regions.iter().filter_map(|r| match r {
            AugmentedRegion::Transparent(t) | AugmentedRegion::Gray(t) => Some(t),
            _ => None,
        })
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Feathered ellipse weight map `[H * W]`: the pixel-centre indicator of the
/// ellipse convolved with a normalised Gaussian of std `sigma` (truncated at
/// three sigma; `sigma` below 1e-3 leaves the indicator unblurred).
pub fn ellipse_mask(height: usize, width: usize, e: &SpecularRegion) -> Vec<f64> {
    let (ca, sa) = (e.angle.cos(), e.angle.sin());
    let inside = |x: f64, y: f64| {
        let (dx, dy) = (x - e.center[0], y - e.center[1]);
        let u = (ca * dx + sa * dy) / e.semi_axes[0];
        let v = (-sa * dx + ca * dy) / e.semi_axes[1];
        u * u + v * v <= 1.0
    };
    let mut ind = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            if inside(x as f64, y as f64) {
                ind[y * width + x] = 1.0;
            }
        }
    }
    if e.sigma < 1e-3 {
        return ind;
    }
    let k = gaussian_kernel(e.sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = x as i64 + j as i64 - r;
                if xx >= 0 && xx < width as i64 {
                    acc += kv * ind[y * width + xx as usize];
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let yy = y as i64 + j as i64 - r;
                if yy >= 0 && yy < height as i64 {
                    acc += kv * tmp[yy as usize * width + x];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Blend one highlight into `image`: `out = (1 - w m) in + w m`.
pub fn apply_highlight(image: &mut FloatMap, e: &SpecularRegion) {
    let (h, w) = (image.height, image.width);
    let m = ellipse_mask(h, w, e);
    for c in 0..image.channels {
        for i in 0..h * w {
            let a = e.intensity * m[i];
            if a == 0.0 {
                continue;
            }
            let v = image.data[c * h * w + i] as f64;
            image.data[c * h * w + i] = ((1.0 - a) * v + a).clamp(0.0, 1.0) as f32;
        }
    }
}

/// Draw and apply a random set of highlights to one view.
pub fn specular_augment<R: Rng>(image: &FloatMap, rng: &mut R, config: &StaConfig) -> (FloatMap, Vec<SpecularRegion>) {
    let mut out = image.clone();
    let n = rng.gen_range(config.ellipse_count[0]..=config.ellipse_count[1]);
    let mut regions = Vec::with_capacity(n);
    for _ in 0..n {
        let e = SpecularRegion {
            center: [
                rng.gen_range(0.0..image.width as f64),
                rng.gen_range(0.0..image.height as f64),
            ],
            semi_axes: [uniform(rng, config.ellipse_axes), uniform(rng, config.ellipse_axes)],
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            intensity: uniform(rng, config.intensity),
            sigma: uniform(rng, config.blur_sigma),
        };
        apply_highlight(&mut out, &e);
        regions.push(e);
    }
    (out, regions)
}

/// Lower median of `values` (element `(n - 1) / 2` after sorting).
pub fn lower_median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    Some(values[(values.len() - 1) / 2])
}

fn paint(view: &mut FloatMap, at: Rect, fill: impl Fn(usize, usize, usize, f32) -> f32) {
    for j in 0..at.h {
        let y = at.y + j as i64;
        if y < 0 || y >= view.height as i64 {
            continue;
        }
        for i in 0..at.w {
            let x = at.x + i as i64;
            if x < 0 || x >= view.width as i64 {
                continue;
            }
            for c in 0..view.channels {
                let v = view.at(c, y as usize, x as usize);
                view.set(c, y as usize, x as usize, fill(c, j, i, v));
            }
        }
    }
}

pub const GRAY: f32 = 0.5;

/// Paste a view-consistent patch into a left rectangle and its epipolar
/// counterpart in the right view. Returns the inputs unchanged and an empty
/// record when no placement succeeds within `max_attempts`.
pub fn transparent_augment<R: Rng>(
    left: &FloatMap,
    right: &FloatMap,
    sample: &StereoSample,
    donor: &FloatMap,
    rng: &mut R,
    config: &StaConfig,
) -> Result<(FloatMap, FloatMap, AugmentationRecord)> {
    let (h, w) = (left.height, left.width);
    if !donor.same_size(left) || !right.same_size(left) || sample.height() != h || sample.width() != w {
        return Err(Error::SizeMismatch {
            a: "views".into(),
            b: "donor or labels".into(),
        });
    }
    let max_side_w = config.patch_size[1].min(w);
    let max_side_h = config.patch_size[1].min(h);
    for _ in 0..config.max_attempts {
        let pw = rng.gen_range(config.patch_size[0].min(max_side_w)..=max_side_w);
        let ph = rng.gen_range(config.patch_size[0].min(max_side_h)..=max_side_h);
        let lx = rng.gen_range(0..=w - pw) as i64;
        let ly = rng.gen_range(0..=h - ph) as i64;
        let left_rect = Rect {
            x: lx,
            y: ly,
            w: pw,
            h: ph,
        };
        let mut disp: Vec<f64> = Vec::with_capacity(pw * ph);
        for y in ly as usize..ly as usize + ph {
            for x in lx as usize..lx as usize + pw {
                if sample.valid_mask.get(y, x) {
                    disp.push(sample.disparity_gt.at(0, y, x) as f64);
                }
            }
        }
        let Some(d_med) = lower_median(&mut disp) else {
            continue;
        };
        let jitter = rng.gen_range(-config.jitter..=config.jitter);
        let right_rect = Rect {
            x: lx - d_med.round() as i64 + jitter,
            y: ly,
            ..left_rect
        };
        if !right_rect.overlaps(h, w) {
            continue;
        }
        let gray = rng.gen_bool(config.p_gray);
        let mut l = left.clone();
        let mut r = right.clone();
        let region = if gray {
            paint(&mut l, left_rect, |_, _, _, _| GRAY);
            paint(&mut r, right_rect, |_, _, _, _| GRAY);
            None
        } else {
            let a = uniform(rng, config.alpha);
            let dx = rng.gen_range(0..=w - pw);
            let dy = rng.gen_range(0..=h - ph);
            let blend = |c: usize, j: usize, i: usize, v: f32| {
                (a * donor.at(c, dy + j, dx + i) as f64 + (1.0 - a) * v as f64) as f32
            };
            paint(&mut l, left_rect, blend);
            paint(&mut r, right_rect, blend);
            Some((a, [dx, dy]))
        };
        let t = TransparentRegion {
            left: left_rect,
            right: right_rect,
            median_disparity: d_med,
            jitter,
            horizontal_offset: right_rect.x - left_rect.x,
            vertical_offset: right_rect.y - left_rect.y,
            alpha: region.map(|r| r.0),
            donor_origin: region.map(|r| r.1),
        };
        let rec = AugmentationRecord {
            regions: vec![if gray {
                AugmentedRegion::Gray(t)
            } else {
                AugmentedRegion::Transparent(t)
            }],
        };
        return Ok((l, r, rec));
    }
    Ok((left.clone(), right.clone(), AugmentationRecord::default()))
}

/// Procedural donor image: a textured fronto-parallel plane.
pub fn procedural_donor<R: Rng>(height: usize, width: usize, rng: &mut R) -> FloatMap {
    let cam = Camera::new(width as f64, 1.0, height, width);
    let family = TextureFamily::ALL[rng.gen_range(0..3)];
    let period = rng.gen_range(8.0..24.0);
    let scene = Scene {
        background: fronto_background(&cam, 4.0, Texture::random(rng, family, period, 4.0)),
        objects: vec![],
    };
    render(&scene, &cam, height, width).left.image
}

/// Apply specular (independently per view) and transparent augmentation
/// with their configured probabilities. Labels are copied unchanged. When
/// `donor` is `None` a procedural donor image is drawn.
pub fn apply_sta<R: Rng>(
    sample: &StereoSample,
    donor: Option<&FloatMap>,
    rng: &mut R,
    config: &StaConfig,
) -> Result<(StereoSample, AugmentationRecord)> {
    config.validate()?;
    let mut out = sample.clone();
    let mut record = AugmentationRecord::default();
    if rng.gen_bool(config.p_specular) {
        let (l, regions_l) = specular_augment(&out.left_image, rng, config);
        let (r, regions_r) = specular_augment(&out.right_image, rng, config);
        out.left_image = l;
        out.right_image = r;
        record
            .regions
            .extend(regions_l.into_iter().map(AugmentedRegion::SpecularLeft));
        record
            .regions
            .extend(regions_r.into_iter().map(AugmentedRegion::SpecularRight));
    }
    if rng.gen_bool(config.p_transparent) {
        let owned;
        let donor = match donor {
            Some(d) => d,
            None => {
                owned = procedural_donor(sample.height(), sample.width(), rng);
                &owned
            }
        };
        let (l, r, rec) = transparent_augment(&out.left_image, &out.right_image, sample, donor, rng, config)?;
        out.left_image = l;
        out.right_image = r;
        record.regions.extend(rec.regions);
    }
    Ok((out, record))
}
