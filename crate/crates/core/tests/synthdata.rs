use greaten::synthdata::{
    forward_warp_disparity, fronto_background, fronto_rect, generate_scene, generate_scene_detailed,
    normals_from_disparity, normals_from_disparity_masked, occlusion_from_disparity, read_sample, render, write_sample,
    Camera, RenderOutput, Scene, SceneConfig, Texture,
};
use greaten::{BoolMap, Error, FloatMap};

fn toy(seed: u64) -> SceneConfig {
    SceneConfig {
        seed,
        height: 64,
        width: 128,
        max_disparity: 48,
        ..SceneConfig::default()
    }
}

/// Left pixels whose 3x3 neighbourhood and right-view bilinear footprint
/// all show the same primitive.
fn interior_pixels(out: &RenderOutput) -> BoolMap {
    let (h, w) = (out.left.image.height, out.left.image.width);
    let mut m = BoolMap::new(h, w, false);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let id = out.left.ids[y * w + x];
            let same_left = (y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| out.left.ids[yy * w + xx] == id));
            let xr = x as f64 - out.left.disparity.at(0, y, x) as f64;
            if xr < 0.0 || !same_left {
                continue;
            }
            let x0 = xr.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let same_right = [x0, x1].iter().all(|&xx| out.right.ids[y * w + xx] == id);
            m.set(y, x, same_right);
        }
    }
    m
}

#[test]
fn right_image_is_a_reprojection_of_the_left() {
    let tol = 2.0 / 255.0;
    let mut checked = 0usize;
    for seed in 0..12 {
        let (s, out, _) = generate_scene_detailed(&toy(seed)).unwrap();
        let interior = interior_pixels(&out);
        let mut worst: f64 = 0.0;
        for y in 0..s.height() {
            for x in 0..s.width() {
                if !s.valid_mask.get(y, x) || s.occlusion_mask.get(y, x) || !interior.get(y, x) {
                    continue;
                }
                let xr = x as f64 - s.disparity_gt.at(0, y, x) as f64;
                for c in 0..3 {
                    let r = s.right_image.bilinear(c, xr, y as f64).unwrap();
                    worst = worst.max((s.left_image.at(c, y, x) as f64 - r).abs());
                }
                checked += 1;
            }
        }
        assert!(worst < tol, "seed {seed}: max reprojection error {worst}");
    }
    assert!(checked > 10_000);
}

#[test]
fn single_fronto_plane_has_constant_disparity_and_border_band() {
    for &d in &[5.0, 7.3, 12.6] {
        let cfg = SceneConfig {
            planes: 0,
            ellipsoids: 0,
            ..toy(0)
        };
        let cam = cfg.camera();
        let scene = Scene {
            background: fronto_background(&cam, d, Texture::flat(0.5)),
            objects: vec![],
        };
        let out = render(&scene, &cam, 64, 128);
        let band = d.ceil() as usize;
        for y in 0..64 {
            for x in 0..128 {
                assert!((out.left.disparity.at(0, y, x) as f64 - d).abs() < 1e-5);
                assert_eq!(out.occlusion.get(y, x), x < band, "d = {d}, x = {x}");
            }
        }
    }
}

#[test]
fn background_only_scene_has_facing_normals() {
    let s = generate_scene(&SceneConfig {
        planes: 0,
        ellipsoids: 0,
        ..toy(5)
    })
    .unwrap();
    for normals in [&s.left_normals, &s.right_normals] {
        for y in 0..s.height() {
            for x in 0..s.width() {
                assert_eq!(
                    [normals.at(0, y, x), normals.at(1, y, x), normals.at(2, y, x)],
                    [0.0, 0.0, 1.0]
                );
            }
        }
    }
}

/// Fronto-parallel slab: left-view column and row extents plus disparity.
struct Slab {
    x: (f64, f64),
    y: (f64, f64),
    d: f64,
}

/// Brute-force occlusion oracle for fronto-parallel slabs over a
/// background at disparity `d_bg`: a left pixel is hidden when its right
/// column falls outside the image or inside the right-view projection of a
/// nearer slab covering the same row.
fn slab_occlusion_oracle(slabs: &[Slab], d_bg: f64, h: usize, w: usize) -> BoolMap {
    let mut m = BoolMap::new(h, w, false);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let covers = |s: &Slab| xf >= s.x.0 && xf <= s.x.1 && yf >= s.y.0 && yf <= s.y.1;
            let d = slabs.iter().filter(|s| covers(s)).map(|s| s.d).fold(d_bg, f64::max);
            let xr = xf - d;
            let hidden = xr < 0.0
                || slabs
                    .iter()
                    .any(|s| s.d > d && yf >= s.y.0 && yf <= s.y.1 && xr >= s.x.0 - s.d && xr <= s.x.1 - s.d);
            m.set(y, x, hidden);
        }
    }
    m
}

#[test]
fn two_plane_occlusion_band_matches_disparity_gap() {
    for &(d1, d2) in &[(20.0, 9.0), (17.5, 6.0), (14.2, 11.9)] {
        let cam = Camera::new(160.0, 0.1, 64, 128);
        // Near rectangle edge slightly above an integer column.
        let edge = 70.01;
        let scene = Scene {
            background: fronto_background(&cam, d2, Texture::flat(0.3)),
            objects: vec![fronto_rect(&cam, (edge, 126.0), (-1.0, 65.0), d1, Texture::flat(0.8))],
        };
        let out = render(&scene, &cam, 64, 128);
        let slab = Slab {
            x: (edge, 126.0),
            y: (-1.0, 65.0),
            d: d1,
        };
        let oracle = slab_occlusion_oracle(&[slab], d2, 64, 128);
        assert_eq!(oracle, out.occlusion);
        let want = (d1 - d2).ceil() as usize;
        for y in 0..64 {
            let band = (0..(edge as usize + 1))
                .filter(|&x| x as f64 >= d2 && out.occlusion.get(y, x))
                .count();
            assert_eq!(band, want, "d1 = {d1}, d2 = {d2}, row {y}");
            let oracle_band = (0..(edge as usize + 1))
                .filter(|&x| x as f64 >= d2 && oracle.get(y, x))
                .count();
            assert_eq!(oracle_band, want);
        }
    }
}

fn fronto_slab_scene(cam: &Camera) -> Scene {
    Scene {
        background: fronto_background(cam, 6.0, Texture::flat(0.2)),
        objects: vec![
            fronto_rect(cam, (20.25, 60.5), (8.0, 40.0), 18.0, Texture::flat(0.6)),
            fronto_rect(cam, (70.5, 110.25), (20.0, 60.0), 27.0, Texture::flat(0.9)),
            fronto_rect(cam, (40.0, 90.0), (44.0, 62.0), 12.0, Texture::flat(0.4)),
        ],
    }
}

#[test]
fn exact_maps_at_zero_threshold_reproduce_zbuffer_off_edges() {
    let cam = Camera::new(160.0, 0.1, 64, 128);
    let out = render(&fronto_slab_scene(&cam), &cam, 64, 128);
    let lr = occlusion_from_disparity(&out.left.disparity, &out.right.disparity, 0.0).unwrap();
    let (h, w) = (64, 128);
    let mut compared = 0;
    for y in 0..h {
        for x in 0..w {
            let d = out.left.disparity.at(0, y, x) as f64;
            let xr = x as f64 - d;
            if xr >= 0.0 {
                let x0 = xr.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let rd = |i: usize| out.right.disparity.at(0, y, i);
                if rd(x0) != rd(x1) {
                    continue;
                }
            }
            assert_eq!(lr.get(y, x), out.occlusion.get(y, x), "({x}, {y})");
            compared += 1;
        }
    }
    assert!(compared > h * w * 9 / 10);
}

#[test]
fn lr_check_on_forward_warp_agrees_with_zbuffer() {
    for seed in 0..8 {
        let (s, _, _) = generate_scene_detailed(&SceneConfig {
            seed: 100 + seed,
            ..SceneConfig::default()
        })
        .unwrap();
        let right = forward_warp_disparity(&s.disparity_gt, 1.0).unwrap();
        let lr = occlusion_from_disparity(&s.disparity_gt, &right, 1.0).unwrap();
        let mut agree = 0;
        let total = s.valid_mask.count();
        for y in 0..s.height() {
            for x in 0..s.width() {
                if s.valid_mask.get(y, x) && lr.get(y, x) == s.occlusion_mask.get(y, x) {
                    agree += 1;
                }
            }
        }
        let frac = agree as f64 / total as f64;
        assert!(frac >= 0.98, "seed {seed}: agreement {frac}");
    }
}

#[test]
fn ramp_disparity_recovers_plane_normal() {
    let (h, w) = (24, 32);
    let (f, b) = (100.0, 0.5);
    let cam = Camera::new(f, b, h, w);
    // Plane n . P = c in image coordinates (y down, z forward); its
    // disparity f*b/Z is affine in pixel coordinates.
    let n = {
        let v = [0.3, -0.2, -1.0f64];
        let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / l, v[1] / l, v[2] / l]
    };
    let c = -8.0 / (1.0f64 + 0.09 + 0.04).sqrt();
    let mut disp = FloatMap::new(1, h, w);
    for y in 0..h {
        for x in 0..w {
            let ray = [(x as f64 - cam.cx) / f, (y as f64 - cam.cy) / f, 1.0];
            let z = c / (n[0] * ray[0] + n[1] * ray[1] + n[2] * ray[2]);
            disp.set(0, y, x, (f * b / z) as f32);
        }
    }
    let est = normals_from_disparity(&disp, f, b).unwrap();
    let want = [n[0], -n[1], -n[2]];
    for y in 2..h - 2 {
        for x in 2..w - 2 {
            for k in 0..3 {
                assert!((est.at(k, y, x) as f64 - want[k]).abs() < 1e-3, "({x},{y}) axis {k}");
            }
        }
    }
}

#[test]
fn normals_from_rendered_disparity_match_analytic() {
    for seed in 0..4 {
        let (s, out, _) = generate_scene_detailed(&toy(200 + seed)).unwrap();
        let est =
            normals_from_disparity_masked(&s.disparity_gt, Some(&s.valid_mask), s.meta.focal, s.meta.baseline).unwrap();
        let (h, w) = (s.height(), s.width());
        let mut sum = 0.0;
        let mut n = 0usize;
        for y in 2..h - 2 {
            for x in 2..w - 2 {
                let id = out.left.ids[y * w + x];
                let flat = (y - 2..=y + 2).all(|yy| (x - 2..=x + 2).all(|xx| out.left.ids[yy * w + xx] == id));
                if !flat {
                    continue;
                }
                let dot: f64 = (0..3)
                    .map(|k| est.at(k, y, x) as f64 * s.left_normals.at(k, y, x) as f64)
                    .sum();
                sum += dot.clamp(-1.0, 1.0).acos().to_degrees();
                n += 1;
            }
        }
        let mean = sum / n as f64;
        assert!(mean < 2.0, "seed {seed}: mean angular error {mean} deg");
    }
}

#[test]
fn sample_roundtrip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_scene(&toy(3)).unwrap();
    write_sample(&s, dir.path()).unwrap();
    let back = read_sample(dir.path()).unwrap();
    assert_eq!(back.disparity_gt, s.disparity_gt);
    assert_eq!(back.left_normals, s.left_normals);
    assert_eq!(back.right_normals, s.right_normals);
    assert_eq!(back.valid_mask, s.valid_mask);
    assert_eq!(back.occlusion_mask, s.occlusion_mask);
    assert_eq!(back.meta, s.meta);
    for (a, b) in [(&s.left_image, &back.left_image), (&s.right_image, &back.right_image)] {
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((u - v).abs() <= 1.0 / 255.0);
        }
    }
}

#[test]
fn truncated_disparity_file_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    write_sample(&generate_scene(&toy(4)).unwrap(), dir.path()).unwrap();
    let p = dir.path().join("disp.pfm");
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(read_sample(dir.path()), Err(Error::Malformed { .. })));
}

#[test]
fn missing_file_and_size_mismatch_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_scene(&toy(6)).unwrap();
    write_sample(&s, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("normals_r.pfm")).unwrap();
    assert!(matches!(read_sample(dir.path()), Err(Error::MissingFile(_))));

    write_sample(&s, dir.path()).unwrap();
    let small = FloatMap::new(1, 32, 64);
    greaten::synthdata::io::write_pfm(&dir.path().join("disp.pfm"), &small).unwrap();
    assert!(matches!(read_sample(dir.path()), Err(Error::SizeMismatch { .. })));
}
