//! Planar RGB images in `[0, 1]`, PNG/PPM codecs, bilinear resizing.
//!
//! Pixel values are used exactly as stored in the file (`byte / 255`); no
//! gamma linearization or channel normalization is applied anywhere in the
//! pipeline.

use crate::error::{Error, Result};
use std::io::Read;
use std::path::Path;

/// H×W×3 image stored as three contiguous row-major planes (r, g, b).
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlanes {
    height: usize,
    width: usize,
    data: Vec<f32>, // plane-major: [c][y][x]
}

impl ImagePlanes {
    pub const CHANNELS: usize = 3;

    // Pipeline inputs are at least 2×2 (enforced by the decoders and the
    // DWT); half-resolution subbands may be a single row or column.
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1, "empty image");
        ImagePlanes {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn from_planes(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert!(height >= 1 && width >= 1, "empty image");
        assert_eq!(data.len(), 3 * height * width);
        ImagePlanes {
            height,
            width,
            data,
        }
    }

    pub fn constant(height: usize, width: usize, v: f32) -> Self {
        ImagePlanes {
            height,
            width,
            data: vec![v; 3 * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline(always)]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline(always)]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Contiguous plane for one channel.
    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        &mut self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &ImagePlanes) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn max_abs_diff(&self, other: &ImagePlanes) -> f32 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Single-channel row-major plane, used by the chromaticity diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize) -> Self {
        Plane {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width);
        Plane {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline(always)]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline(always)]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Decode a PNG or binary PPM (P6, maxval 255) file; bytes map to `[0,1]`
/// as `v/255`.
pub fn load_image(path: &Path) -> Result<ImagePlanes> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile {
                path: path.to_path_buf(),
            })
        }
        Err(e) => return Err(e.into()),
    };
    if bytes.starts_with(b"P6") {
        decode_ppm(&bytes, path)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(&bytes, path)
    } else {
        Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: "expected PNG or binary PPM (P6)".into(),
        })
    }
}

/// Save as binary PPM with the canonical header `P6\n{w} {h}\n255\n`.
/// Values are quantized with round-half-up on `v*255`.
pub fn save_ppm(img: &ImagePlanes, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(img))?;
    Ok(())
}

pub fn encode_ppm(img: &ImagePlanes) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    for y in 0..img.height() {
        for x in 0..img.width() {
            for c in 0..3 {
                out.push((img.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn save_png(img: &ImagePlanes, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width() as u32, img.height() as u32);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let px = [
                (img.get(0, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                (img.get(1, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                (img.get(2, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<ImagePlanes> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(
        |e| Error::CorruptImage {
            path: path.to_path_buf(),
            detail: e.to_string(),
        },
    )?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if h < 2 || w < 2 {
        return Err(Error::CorruptImage {
            path: path.to_path_buf(),
            detail: format!("image too small ({h}×{w}), need at least 2×2"),
        });
    }
    let mut planes = ImagePlanes::new(h, w);
    for (y, row) in rgb.rows().enumerate() {
        for (x, px) in row.enumerate() {
            for c in 0..3 {
                planes.set(c, y, x, px.0[c] as f32 / 255.0);
            }
        }
    }
    Ok(planes)
}

fn decode_ppm(bytes: &[u8], path: &Path) -> Result<ImagePlanes> {
    let corrupt = |detail: &str| Error::CorruptImage {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut cursor = std::io::Cursor::new(bytes);
    let magic = read_token(&mut cursor).ok_or_else(|| corrupt("missing magic"))?;
    if magic != "P6" {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!("PPM magic {magic:?}, only P6 supported"),
        });
    }
    let width: usize = read_token(&mut cursor)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| corrupt("bad width"))?;
    let height: usize = read_token(&mut cursor)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| corrupt("bad height"))?;
    let maxval: usize = read_token(&mut cursor)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| corrupt("bad maxval"))?;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!("PPM maxval {maxval}, only 255 supported"),
        });
    }
    if height < 2 || width < 2 {
        return Err(corrupt(&format!(
            "image too small ({height}×{width}), need at least 2×2"
        )));
    }
    let start = cursor.position() as usize;
    let need = width * height * 3;
    let payload = bytes
        .get(start..start + need)
        .ok_or_else(|| corrupt("truncated pixel data"))?;
    let mut planes = ImagePlanes::new(height, width);
    let mut i = 0;
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                planes.set(c, y, x, payload[i] as f32 / 255.0);
                i += 1;
            }
        }
    }
    Ok(planes)
}

/// Next whitespace-delimited token, skipping `#` comments; consumes exactly
/// one trailing whitespace byte (PPM requires a single separator before the
/// pixel payload).
fn read_token(cursor: &mut std::io::Cursor<&[u8]>) -> Option<String> {
    let mut token = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if cursor.read(&mut byte).ok()? == 0 {
            return if token.is_empty() {
                None
            } else {
                String::from_utf8(token).ok()
            };
        }
        let b = byte[0];
        if b == b'#' && token.is_empty() {
            // comment to end of line
            loop {
                if cursor.read(&mut byte).ok()? == 0 || byte[0] == b'\n' {
                    break;
                }
            }
            continue;
        }
        if b.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            return String::from_utf8(token).ok();
        }
        token.push(b);
    }
}

/// Bilinear resize with half-pixel centers: source coordinate of output
/// pixel `i` along an axis is `(i + 0.5) * in/out − 0.5`, clamped to the
/// valid range.
pub fn resize_bilinear(img: &ImagePlanes, out_h: usize, out_w: usize) -> Result<ImagePlanes> {
    if out_h < 2 || out_w < 2 {
        return Err(Error::InvalidArgument(format!(
            "resize target {out_h}×{out_w} too small, need at least 2×2"
        )));
    }
    let (in_h, in_w) = (img.height(), img.width());
    let mut out = ImagePlanes::new(out_h, out_w);
    let sy = in_h as f32 / out_h as f32;
    let sx = in_w as f32 / out_w as f32;
    for y in 0..out_h {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (in_h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let wy = fy - y0 as f32;
        for x in 0..out_w {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (in_w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let wx = fx - x0 as f32;
            for c in 0..3 {
                let v00 = img.get(c, y0, x0);
                let v01 = img.get(c, y0, x1);
                let v10 = img.get(c, y1, x0);
                let v11 = img.get(c, y1, x1);
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                out.set(c, y, x, top + (bot - top) * wy);
            }
        }
    }
    Ok(out)
}

/// Clamp all values into `[0, 1]`. NaN anywhere is rejected.
pub fn to_unit_range(img: &ImagePlanes) -> Result<ImagePlanes> {
    if img.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("to_unit_range input contains NaN".into()));
    }
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_ppm_bytes(dir: &tempfile::TempDir, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn ppm_all_255_decodes_to_ones() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([255u8; 12]);
        let img = load_image(&write_ppm_bytes(&dir, "a.ppm", &bytes)).unwrap();
        assert_eq!(img.height(), 2);
        assert_eq!(img.width(), 2);
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ppm_byte_scaling_is_linear() {
        // 1×1 is below the 2×2 minimum, so the scaling case uses a 2×2 image
        // whose first pixel carries the (0, 128, 255) triple.
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([0u8, 128, 255]);
        bytes.extend([0u8; 9]);
        let img = load_image(&write_ppm_bytes(&dir, "b.ppm", &bytes)).unwrap();
        assert_eq!(img.get(0, 0, 0), 0.0);
        assert_eq!(img.get(1, 0, 0), 128.0 / 255.0);
        assert_eq!(img.get(2, 0, 0), 1.0);
    }

    #[test]
    fn missing_file_is_distinct_error() {
        let err = load_image(Path::new("/nonexistent/zz.ppm")).unwrap_err();
        match err {
            Error::MissingFile { path } => {
                assert!(path.to_string_lossy().contains("zz.ppm"))
            }
            other => panic!("expected MissingFile, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_and_corrupt_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let p3 = write_ppm_bytes(&dir, "c.ppm", b"P3\n2 2\n255\n0 0 0");
        assert!(matches!(
            load_image(&p3).unwrap_err(),
            Error::UnsupportedFormat { .. }
        ));

        let mut truncated = b"P6\n2 2\n255\n".to_vec();
        truncated.extend([255u8; 5]);
        let t = write_ppm_bytes(&dir, "d.ppm", &truncated);
        assert!(matches!(
            load_image(&t).unwrap_err(),
            Error::CorruptImage { .. }
        ));

        let junk = write_ppm_bytes(&dir, "e.bin", b"not an image at all");
        assert!(matches!(
            load_image(&junk).unwrap_err(),
            Error::UnsupportedFormat { .. }
        ));
    }

    #[test]
    fn png_roundtrip_matches_ppm_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = ImagePlanes::new(3, 4);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f32 / 255.0;
        }
        let p = dir.path().join("x.png");
        save_png(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert!(back.max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = ImagePlanes::constant(5, 7, 0.5);
        let out = resize_bilinear(&img, 9, 3).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn resize_same_size_is_identity() {
        let mut img = ImagePlanes::new(4, 6);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i % 17) as f32 / 16.0;
        }
        let out = resize_bilinear(&img, 4, 6).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-6);
    }

    /// Independent scalar bilinear oracle with the same half-pixel-center
    /// convention, written against f64.
    fn bilinear_oracle(img: &ImagePlanes, c: usize, y: usize, x: usize, oh: usize, ow: usize) -> f64 {
        let fy = (((y as f64 + 0.5) * img.height() as f64 / oh as f64) - 0.5)
            .clamp(0.0, (img.height() - 1) as f64);
        let fx = (((x as f64 + 0.5) * img.width() as f64 / ow as f64) - 0.5)
            .clamp(0.0, (img.width() - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(img.height() - 1), (x0 + 1).min(img.width() - 1));
        let (wy, wx) = (fy - y0 as f64, fx - x0 as f64);
        let v = |yy: usize, xx: usize| img.get(c, yy, xx) as f64;
        v(y0, x0) * (1.0 - wy) * (1.0 - wx)
            + v(y0, x1) * (1.0 - wy) * wx
            + v(y1, x0) * wy * (1.0 - wx)
            + v(y1, x1) * wy * wx
    }

    #[test]
    fn resize_checkerboard_matches_oracle() {
        let mut img = ImagePlanes::new(2, 2);
        for c in 0..3 {
            img.set(c, 0, 0, 0.0);
            img.set(c, 0, 1, 1.0);
            img.set(c, 1, 0, 1.0);
            img.set(c, 1, 1, 0.0);
        }
        let out = resize_bilinear(&img, 4, 4).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let expect = bilinear_oracle(&img, c, y, x, 4, 4);
                    assert!(
                        (out.get(c, y, x) as f64 - expect).abs() < 1e-6,
                        "({c},{y},{x}): {} vs {expect}",
                        out.get(c, y, x)
                    );
                }
            }
        }
    }

    #[test]
    fn resize_too_small_rejected() {
        let img = ImagePlanes::constant(4, 4, 0.3);
        assert!(resize_bilinear(&img, 1, 4).is_err());
        assert!(resize_bilinear(&img, 4, 1).is_err());
    }

    #[test]
    fn unit_range_clamps_and_rejects_nan() {
        let mut img = ImagePlanes::constant(2, 2, 0.42);
        img.set(0, 0, 0, 1.2);
        img.set(1, 0, 0, -0.1);
        let out = to_unit_range(&img).unwrap();
        assert_eq!(out.get(0, 0, 0), 1.0);
        assert_eq!(out.get(1, 0, 0), 0.0);
        assert_eq!(out.get(2, 1, 1), 0.42);

        img.set(2, 1, 1, f32::NAN);
        assert!(to_unit_range(&img).is_err());
    }

    proptest! {
        #[test]
        fn ppm_roundtrip_byte_exact(h in 2usize..6, w in 2usize..6, seed in 0u64..1000) {
            let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
            let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
            for _ in 0..h * w * 3 {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                bytes.push((state >> 24) as u8);
            }
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.ppm");
            std::fs::write(&p, &bytes).unwrap();
            let img = load_image(&p).unwrap();
            prop_assert_eq!(encode_ppm(&img), bytes);
        }

        #[test]
        fn resize_output_stays_in_unit_range(seed in 0u64..200) {
            let mut state = seed.wrapping_mul(0x2545F4914F6CDD1D) | 1;
            let mut img = ImagePlanes::new(5, 3);
            for v in img.data_mut() {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                *v = (state >> 40) as f32 / (1u64 << 24) as f32;
            }
            let out = resize_bilinear(&img, 8, 11).unwrap();
            prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
