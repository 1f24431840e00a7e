use crate::error::{Error, Result};
use crate::maps::{BoolMap, FloatMap};

use super::render::{cross, normalize, Camera};

fn check_disparity(d: &FloatMap, what: &str) -> Result<()> {
    if d.channels != 1 {
        return Err(Error::shape("disparity", format!("{what} must have one channel")));
    }
    if let Some(v) = d.data.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Degenerate(format!("{what} contains {v}")));
    }
    Ok(())
}

/// Left-right consistency: a left pixel is occluded when
/// `|d_l(x, y) - d_r(x - d_l(x, y), y)| > threshold` (bilinear lookup), or
/// when the lookup falls outside the right image.
pub fn occlusion_from_disparity(disp_left: &FloatMap, disp_right: &FloatMap, threshold: f64) -> Result<BoolMap> {
    check_disparity(disp_left, "left disparity")?;
    check_disparity(disp_right, "right disparity")?;
    if !disp_left.same_size(disp_right) {
        return Err(Error::SizeMismatch {
            a: "left disparity".into(),
            b: "right disparity".into(),
        });
    }
    let (h, w) = (disp_left.height, disp_left.width);
    let mut mask = BoolMap::new(h, w, false);
    for y in 0..h {
        for x in 0..w {
            let dl = disp_left.at(0, y, x) as f64;
            let occluded = match disp_right.bilinear(0, x as f64 - dl, y as f64) {
                Some(dr) => (dl - dr).abs() > threshold,
                None => true,
            };
            mask.set(y, x, occluded);
        }
    }
    Ok(mask)
}

/// Right-view disparity obtained by splatting left-view surface segments.
///
/// Neighbouring left pixels whose disparities differ by less than
/// `max_step` are treated as one surface; the right-view span between their
/// projections receives linearly interpolated disparity, with the larger
/// (nearer) value winning. Right pixels left uncovered (disocclusions) take
/// the smaller disparity of the nearest covered pixels on the same row.
pub fn forward_warp_disparity(disp_left: &FloatMap, max_step: f64) -> Result<FloatMap> {
    check_disparity(disp_left, "left disparity")?;
    let (h, w) = (disp_left.height, disp_left.width);
    let mut out = FloatMap::filled(1, h, w, f32::NEG_INFINITY);
    for y in 0..h {
        let mut splat = |xr: f64, d: f64| {
            if xr >= 0.0 && xr <= (w - 1) as f64 {
                let i = xr.round() as usize;
                if (d as f32) > out.at(0, y, i) {
                    out.set(0, y, i, d as f32);
                }
            }
        };
        for x in 0..w {
            let d0 = disp_left.at(0, y, x) as f64;
            splat(x as f64 - d0, d0);
            if x + 1 < w {
                let d1 = disp_left.at(0, y, x + 1) as f64;
                if (d1 - d0).abs() < max_step {
                    let (a, b) = (x as f64 - d0, x as f64 + 1.0 - d1);
                    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                    let mut xi = lo.ceil();
                    while xi <= hi {
                        let t = if (b - a).abs() < 1e-12 { 0.0 } else { (xi - a) / (b - a) };
                        splat(xi, d0 + t * (d1 - d0));
                        xi += 1.0;
                    }
                }
            }
        }
        fill_row_holes(&mut out, y);
    }
    Ok(out)
}

fn fill_row_holes(map: &mut FloatMap, y: usize) {
    let w = map.width;
    let row: Vec<f32> = (0..w).map(|x| map.at(0, y, x)).collect();
    let covered = |v: f32| v.is_finite();
    for x in 0..w {
        if covered(row[x]) {
            continue;
        }
        let left = (0..x).rev().map(|i| row[i]).find(|v| covered(*v));
        let right = (x + 1..w).map(|i| row[i]).find(|v| covered(*v));
        let v = match (left, right) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => 0.0,
        };
        map.set(0, y, x, v);
    }
}

/// Normals from a disparity map by back-projection and central-difference
/// cross products, in the frame x right, y up, z toward the camera.
pub fn normals_from_disparity(disp: &FloatMap, focal: f64, baseline: f64) -> Result<FloatMap> {
    normals_from_disparity_masked(disp, None, focal, baseline)
}

/// As [`normals_from_disparity`]; only pixels set in `valid` must carry a
/// positive disparity.
pub fn normals_from_disparity_masked(
    disp: &FloatMap,
    valid: Option<&BoolMap>,
    focal: f64,
    baseline: f64,
) -> Result<FloatMap> {
    if !(focal > 0.0 && baseline > 0.0) {
        return Err(Error::Degenerate("focal length and baseline must be positive".into()));
    }
    let (h, w) = (disp.height, disp.width);
    if h < 3 || w < 3 {
        return Err(Error::shape("normals_from_disparity", format!("{h}x{w} is too small")));
    }
    for y in 0..h {
        for x in 0..w {
            let used = valid.is_none_or(|m| m.get(y, x));
            let d = disp.at(0, y, x);
            if used && !(d > 0.0 && d.is_finite()) {
                return Err(Error::Degenerate(format!("disparity {d} at ({x}, {y})")));
            }
        }
    }
    let cam = Camera::new(focal, baseline, h, w);
    let point = |x: usize, y: usize| {
        let d = (disp.at(0, y, x) as f64).max(1e-6);
        cam.unproject(x as f64, y as f64, cam.depth_of(d))
    };
    let mut out = FloatMap::new(3, h, w);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let (l, r) = (point(x - 1, y), point(x + 1, y));
            let (u, d) = (point(x, y - 1), point(x, y + 1));
            let dx = [r[0] - l[0], r[1] - l[1], r[2] - l[2]];
            let dy = [d[0] - u[0], d[1] - u[1], d[2] - u[2]];
            let n = normalize(cross(dx, dy));
            // Image-frame normal points away from the camera; flip y and z
            // of the negated vector into the output frame.
            let mut o = [-n[0], n[1], n[2]];
            if o[2] < 0.0 {
                o = [-o[0], -o[1], -o[2]];
            }
            for c in 0..3 {
                out.set(c, y, x, o[c] as f32);
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = (y.clamp(1, h - 2), x.clamp(1, w - 2));
            if (sy, sx) != (y, x) {
                for c in 0..3 {
                    let v = out.at(c, sy, sx);
                    out.set(c, y, x, v);
                }
            }
        }
    }
    Ok(out)
}
