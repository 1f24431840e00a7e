//! PFM and PNG codecs and the on-disk sample directory layout.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use super::{SampleMeta, StereoSample};
use crate::error::{Error, Result};
use crate::maps::{BoolMap, FloatMap};

pub const LEFT_PNG: &str = "left.png";
pub const RIGHT_PNG: &str = "right.png";
pub const DISP_PFM: &str = "disp.pfm";
pub const NORMALS_LEFT_PFM: &str = "normals_l.pfm";
pub const NORMALS_RIGHT_PFM: &str = "normals_r.pfm";
pub const MASKS_PNG: &str = "masks.png";
pub const META_JSON: &str = "meta.json";

const MASK_VALID_BIT: u8 = 1;
const MASK_OCCLUDED_BIT: u8 = 2;

/// Encode a 1- or 3-channel map as little-endian PFM (scale -1, rows
/// stored bottom to top, channels interleaved).
pub fn encode_pfm(map: &FloatMap) -> Result<Vec<u8>> {
    let tag = match map.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::shape("encode_pfm", format!("{c} channels"))),
    };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    out.reserve(map.data.len() * 4);
    for y in (0..map.height).rev() {
        for x in 0..map.width {
            for c in 0..map.channels {
                out.extend_from_slice(&map.at(c, y, x).to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Decode a PFM byte stream. Positive scale means big-endian payload.
pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<FloatMap> {
    let bad = |reason: &str| Error::malformed(path, reason);
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::malformed(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(bad(&format!("unknown magic {other:?}"))),
    };
    let width: usize = token()?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = token()?.parse().map_err(|_| bad("bad height"))?;
    let scale: f32 = token()?.parse().map_err(|_| bad("bad scale"))?;
    if width == 0 || height == 0 || scale == 0.0 || !scale.is_finite() {
        return Err(bad("invalid dimensions or scale"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing header terminator"));
    }
    let payload = &bytes[pos + 1..];
    let n = width * height * channels;
    if payload.len() != n * 4 {
        return Err(bad(&format!("payload has {} bytes, expected {}", payload.len(), n * 4)));
    }
    let little = scale < 0.0;
    let mut map = FloatMap::new(channels, height, width);
    let mut i = 0;
    for y in (0..height).rev() {
        for x in 0..width {
            for c in 0..channels {
                let b: [u8; 4] = payload[i * 4..i * 4 + 4].try_into().expect("4 bytes");
                let v = if little {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                };
                map.set(c, y, x, v);
                i += 1;
            }
        }
    }
    Ok(map)
}

pub fn write_pfm(path: &Path, map: &FloatMap) -> Result<()> {
    fs::write(path, encode_pfm(map)?)?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<FloatMap> {
    let bytes = read_existing(path)?;
    decode_pfm(&bytes, path)
}

fn read_existing(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a 3-channel map in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_rgb_png(path: &Path, map: &FloatMap) -> Result<()> {
    if map.channels != 3 {
        return Err(Error::shape("write_rgb_png", format!("{} channels", map.channels)));
    }
    let img = RgbImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            quantize(map.at(0, y, x)),
            quantize(map.at(1, y, x)),
            quantize(map.at(2, y, x)),
        ])
    });
    img.save(path)?;
    Ok(())
}

pub fn read_rgb_png(path: &Path) -> Result<FloatMap> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut map = FloatMap::new(3, h, w);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            map.set(c, y as usize, x as usize, p.0[c] as f32 / 255.0);
        }
    }
    Ok(map)
}

pub fn write_masks_png(path: &Path, valid: &BoolMap, occluded: &BoolMap) -> Result<()> {
    let img = GrayImage::from_fn(valid.width as u32, valid.height as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let mut v = 0;
        if valid.get(y, x) {
            v |= MASK_VALID_BIT;
        }
        if occluded.get(y, x) {
            v |= MASK_OCCLUDED_BIT;
        }
        Luma([v])
    });
    img.save(path)?;
    Ok(())
}

pub fn read_masks_png(path: &Path) -> Result<(BoolMap, BoolMap)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut valid = BoolMap::new(h, w, false);
    let mut occ = BoolMap::new(h, w, false);
    for (x, y, p) in img.enumerate_pixels() {
        valid.set(y as usize, x as usize, p.0[0] & MASK_VALID_BIT != 0);
        occ.set(y as usize, x as usize, p.0[0] & MASK_OCCLUDED_BIT != 0);
    }
    Ok((valid, occ))
}

/// Write every file of the sample layout into `dir` (created if needed).
pub fn write_sample(sample: &StereoSample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_rgb_png(&dir.join(LEFT_PNG), &sample.left_image)?;
    write_rgb_png(&dir.join(RIGHT_PNG), &sample.right_image)?;
    write_pfm(&dir.join(DISP_PFM), &sample.disparity_gt)?;
    write_pfm(&dir.join(NORMALS_LEFT_PFM), &sample.left_normals)?;
    write_pfm(&dir.join(NORMALS_RIGHT_PFM), &sample.right_normals)?;
    write_masks_png(&dir.join(MASKS_PNG), &sample.valid_mask, &sample.occlusion_mask)?;
    fs::write(dir.join(META_JSON), serde_json::to_string_pretty(&sample.meta)?)?;
    Ok(())
}

/// Read a sample directory. Fails without returning partial data when any
/// file is missing, malformed or sized inconsistently.
pub fn read_sample(dir: &Path) -> Result<StereoSample> {
    let meta_path = dir.join(META_JSON);
    let meta: SampleMeta =
        serde_json::from_slice(&read_existing(&meta_path)?).map_err(|e| Error::malformed(&meta_path, e.to_string()))?;
    let left_image = read_rgb_png(&dir.join(LEFT_PNG))?;
    let right_image = read_rgb_png(&dir.join(RIGHT_PNG))?;
    let disparity_gt = read_pfm(&dir.join(DISP_PFM))?;
    let left_normals = read_pfm(&dir.join(NORMALS_LEFT_PFM))?;
    let right_normals = read_pfm(&dir.join(NORMALS_RIGHT_PFM))?;
    let (valid_mask, occlusion_mask) = read_masks_png(&dir.join(MASKS_PNG))?;

    let expect = (meta.height, meta.width);
    let sized = [
        (LEFT_PNG, (left_image.height, left_image.width), left_image.channels, 3),
        (
            RIGHT_PNG,
            (right_image.height, right_image.width),
            right_image.channels,
            3,
        ),
        (
            DISP_PFM,
            (disparity_gt.height, disparity_gt.width),
            disparity_gt.channels,
            1,
        ),
        (
            NORMALS_LEFT_PFM,
            (left_normals.height, left_normals.width),
            left_normals.channels,
            3,
        ),
        (
            NORMALS_RIGHT_PFM,
            (right_normals.height, right_normals.width),
            right_normals.channels,
            3,
        ),
        (MASKS_PNG, (valid_mask.height, valid_mask.width), 1, 1),
    ];
    for (name, hw, ch, want_ch) in sized {
        if hw != expect {
            return Err(Error::SizeMismatch {
                a: format!("{name} ({}x{})", hw.0, hw.1),
                b: format!("{META_JSON} ({}x{})", expect.0, expect.1),
            });
        }
        if ch != want_ch {
            return Err(Error::malformed(
                dir.join(name),
                format!("{ch} channels, expected {want_ch}"),
            ));
        }
    }
    Ok(StereoSample {
        left_image,
        right_image,
        left_normals,
        right_normals,
        disparity_gt,
        valid_mask,
        occlusion_mask,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_header_parses_one_channel_little_endian() {
        let mut bytes = b"Pf\n8 4\n-1.0\n".to_vec();
        for i in 0..32u32 {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        let m = decode_pfm(&bytes, Path::new("x.pfm")).unwrap();
        assert_eq!((m.channels, m.height, m.width), (1, 4, 8));
        // First stored row is the bottom image row.
        assert_eq!(m.at(0, 3, 0), 0.0);
        assert_eq!(m.at(0, 0, 7), 31.0);
    }

    #[test]
    fn big_endian_payload_is_honoured() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        assert_eq!(decode_pfm(&bytes, Path::new("x")).unwrap().data, vec![2.5]);
    }

    #[test]
    fn truncated_payload_is_malformed() {
        let map = FloatMap::from_vec(1, 2, 3, vec![1.0; 6]);
        let mut bytes = encode_pfm(&map).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            decode_pfm(&bytes, Path::new("d.pfm")),
            Err(Error::Malformed { .. })
        ));
    }

    #[test]
    fn bad_magic_is_malformed() {
        assert!(matches!(
            decode_pfm(b"P6\n1 1\n-1\n\0\0\0\0", Path::new("d")),
            Err(Error::Malformed { .. })
        ));
    }

    #[test]
    fn three_channel_roundtrip_is_bit_exact() {
        let map = FloatMap::from_vec(3, 2, 2, (0..12).map(|i| i as f32 * 0.1 - 0.37).collect());
        let back = decode_pfm(&encode_pfm(&map).unwrap(), Path::new("n")).unwrap();
        assert_eq!(back, map);
    }
}
