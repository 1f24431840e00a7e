//! False-colour rendering of disparity, error and mask maps.

use image::{Rgb, RgbImage};

use crate::maps::{BoolMap, FloatMap};

/// Turbo-style colour for `t` in `[0, 1]` (polynomial fit of the turbo
/// colormap; inputs are clamped).
pub fn turbo(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let poly = |c: [f64; 6]| c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * (c[4] + t * c[5]))));
    let r = poly([
        0.13572138,
        4.61539260,
        -42.66032258,
        132.13108234,
        -152.94239396,
        59.28637943,
    ]);
    let g = poly([0.09140261, 2.19418839, 4.84296658, -14.18503333, 4.27729857, 2.82956604]);
    let b = poly([
        0.10667330,
        12.64194608,
        -60.58204836,
        110.36276771,
        -89.90310912,
        27.34824973,
    ]);
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

/// Colour channel 0 of `map`, normalised by the fixed `max_value` so images
/// from different runs share one scale.
pub fn colorize(map: &FloatMap, max_value: f64) -> RgbImage {
    let scale = if max_value > 0.0 { 1.0 / max_value } else { 0.0 };
    RgbImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        Rgb(turbo(map.at(0, y as usize, x as usize) as f64 * scale))
    })
}

/// `|pred - gt|` coloured on `[0, max_error]`; invalid pixels are black.
pub fn error_image(pred: &FloatMap, gt: &FloatMap, valid: &BoolMap, max_error: f64) -> RgbImage {
    RgbImage::from_fn(gt.width as u32, gt.height as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        if !valid.get(y, x) {
            return Rgb([0, 0, 0]);
        }
        let e = (pred.at(0, y, x).max(0.0) - gt.at(0, y, x)).abs() as f64;
        Rgb(turbo(e / max_error))
    })
}
