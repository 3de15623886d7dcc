//! The three detector inputs for one image — the raw image, a wavelet
//! high-frequency map, and the chromaticity-inconsistency transform — plus a
//! consistency diagnostic used by the corpus checks.

use crate::error::{Error, Result};
use crate::image::{ImagePlanes, Plane};

pub const DEFAULT_CI_EPS: f32 = 1e-3;

/// The three aligned cue tensors for one sample.
#[derive(Clone, Debug)]
pub struct CueBundle {
    pub img: ImagePlanes,
    pub hf: ImagePlanes,
    pub ci: ImagePlanes,
}

/// Single-level 2D Haar subbands at half resolution.
#[derive(Clone, Debug)]
pub struct DwtSubbands {
    pub ll: ImagePlanes,
    pub lh: ImagePlanes,
    pub hl: ImagePlanes,
    pub hh: ImagePlanes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    R = 0,
    G = 1,
    B = 2,
}

/// Per-pixel exponentiated channel ratios: output channels are
/// `exp(−(ρ_r+ε)/(ρ_g+ε))`, `exp(−(ρ_g+ε)/(ρ_b+ε))`, `exp(−(ρ_b+ε)/(ρ_r+ε))`.
///
/// Ratios of equal channels map to `exp(−1)` regardless of intensity, so the
/// transform cancels illumination and amplifies per-channel noise. With
/// `eps > 0` the all-zero pixel also maps to `exp(−1)`. Outputs are always
/// in `(0, 1]` for inputs in `[0, 1]`.
pub fn ci_transform(img: &ImagePlanes, eps: f32) -> ImagePlanes {
    assert!(eps >= 0.0, "eps must be non-negative");
    let (h, w) = (img.height(), img.width());
    let mut out = ImagePlanes::new(h, w);
    let n = h * w;
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let (ro, rest) = out.data_mut().split_at_mut(n);
    let (go, bo) = rest.split_at_mut(n);
    // floor keeps outputs strictly positive where exp(−ratio) would
    // underflow to 0 for extreme ratios
    let floor = f32::MIN_POSITIVE;
    for i in 0..n {
        ro[i] = (-((r[i] + eps) / (g[i] + eps))).exp().max(floor);
        go[i] = (-((g[i] + eps) / (b[i] + eps))).exp().max(floor);
        bo[i] = (-((b[i] + eps) / (r[i] + eps))).exp().max(floor);
    }
    out
}

/// Per-pixel `(ρ_j+ε)/(ρ_k+ε)` for two distinct channels.
pub fn chromaticity_ratio(
    img: &ImagePlanes,
    j: Channel,
    k: Channel,
    eps: f32,
) -> Result<Plane> {
    if j == k {
        return Err(Error::InvalidArgument(
            "chromaticity_ratio needs two distinct channels".into(),
        ));
    }
    let (h, w) = (img.height(), img.width());
    let num = img.plane(j as usize);
    let den = img.plane(k as usize);
    let data = num
        .iter()
        .zip(den)
        .map(|(&n, &d)| (n + eps) / (d + eps))
        .collect();
    Ok(Plane::from_vec(h, w, data))
}

/// Mean local variance over all window positions fully inside the plane.
/// Zero for constant planes; strictly positive as soon as any window sees
/// two distinct values.
pub fn consistency_score(plane: &Plane, window: usize) -> Result<f64> {
    let (h, w) = (plane.height(), plane.width());
    if window % 2 == 0 || window < 3 {
        return Err(Error::InvalidArgument(format!(
            "window must be odd and ≥ 3, got {window}"
        )));
    }
    if window > h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "window {window} exceeds plane size {h}×{w}"
        )));
    }
    // integral images of values and squares, f64 to keep the subtraction sane
    let mut sum = vec![0.0f64; (h + 1) * (w + 1)];
    let mut sq = vec![0.0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            let v = plane.get(y, x) as f64;
            let idx = (y + 1) * (w + 1) + (x + 1);
            sum[idx] = v + sum[idx - 1] + sum[idx - w - 1] - sum[idx - w - 2];
            sq[idx] = v * v + sq[idx - 1] + sq[idx - w - 1] - sq[idx - w - 2];
        }
    }
    let rect = |tbl: &[f64], y0: usize, x0: usize, y1: usize, x1: usize| {
        tbl[y1 * (w + 1) + x1] - tbl[y0 * (w + 1) + x1] - tbl[y1 * (w + 1) + x0]
            + tbl[y0 * (w + 1) + x0]
    };
    let area = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - window) {
        for x0 in 0..=(w - window) {
            let s = rect(&sum, y0, x0, y0 + window, x0 + window);
            let q = rect(&sq, y0, x0, y0 + window, x0 + window);
            let mean = s / area;
            total += (q / area - mean * mean).max(0.0);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Orthonormal single-level 2D Haar. Each 2×2 block `(a,b; c,d)` maps to
/// `ll=(a+b+c+d)/2`, `lh=(a−b+c−d)/2`, `hl=(a+b−c−d)/2`, `hh=(a−b−c+d)/2`,
/// which preserves energy exactly. Odd dimensions are padded by
/// duplicating the last row/column first.
pub fn haar_dwt_level(img: &ImagePlanes) -> Result<DwtSubbands> {
    let (h, w) = (img.height(), img.width());
    if h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!(
            "DWT needs at least 2×2, got {h}×{w}"
        )));
    }
    let padded;
    let src = if h % 2 == 1 || w % 2 == 1 {
        padded = pad_to_even(img);
        &padded
    } else {
        img
    };
    let (ph, pw) = (src.height(), src.width());
    let (oh, ow) = (ph / 2, pw / 2);
    let mut ll = ImagePlanes::new(oh, ow);
    let mut lh = ImagePlanes::new(oh, ow);
    let mut hl = ImagePlanes::new(oh, ow);
    let mut hh = ImagePlanes::new(oh, ow);
    for c in 0..3 {
        for y in 0..oh {
            for x in 0..ow {
                let a = src.get(c, 2 * y, 2 * x);
                let b = src.get(c, 2 * y, 2 * x + 1);
                let cc = src.get(c, 2 * y + 1, 2 * x);
                let d = src.get(c, 2 * y + 1, 2 * x + 1);
                ll.set(c, y, x, (a + b + cc + d) / 2.0);
                lh.set(c, y, x, (a - b + cc - d) / 2.0);
                hl.set(c, y, x, (a + b - cc - d) / 2.0);
                hh.set(c, y, x, (a - b - cc + d) / 2.0);
            }
        }
    }
    Ok(DwtSubbands { ll, lh, hl, hh })
}

/// Exact inverse of [`haar_dwt_level`] at even dimensions.
pub fn haar_idwt_level(sub: &DwtSubbands) -> ImagePlanes {
    let (oh, ow) = (sub.ll.height(), sub.ll.width());
    let mut out = ImagePlanes::new(oh * 2, ow * 2);
    for c in 0..3 {
        for y in 0..oh {
            for x in 0..ow {
                let ll = sub.ll.get(c, y, x);
                let lh = sub.lh.get(c, y, x);
                let hl = sub.hl.get(c, y, x);
                let hh = sub.hh.get(c, y, x);
                out.set(c, 2 * y, 2 * x, (ll + lh + hl + hh) / 2.0);
                out.set(c, 2 * y, 2 * x + 1, (ll - lh + hl - hh) / 2.0);
                out.set(c, 2 * y + 1, 2 * x, (ll + lh - hl - hh) / 2.0);
                out.set(c, 2 * y + 1, 2 * x + 1, (ll - lh - hl + hh) / 2.0);
            }
        }
    }
    out
}

fn pad_to_even(img: &ImagePlanes) -> ImagePlanes {
    let (h, w) = (img.height(), img.width());
    let (ph, pw) = (h + h % 2, w + w % 2);
    let mut out = ImagePlanes::new(ph, pw);
    for c in 0..3 {
        for y in 0..ph {
            for x in 0..pw {
                out.set(c, y, x, img.get(c, y.min(h - 1), x.min(w - 1)));
            }
        }
    }
    out
}

/// High-frequency cue: per channel the mean absolute detail subband
/// `(|lh|+|hl|+|hh|)/3`, nearest-neighbor upsampled ×2 back to the input
/// size, then min-max normalized over the whole image to `[0,1]`. A
/// constant image maps to all zeros.
pub fn highfreq_cue(img: &ImagePlanes) -> ImagePlanes {
    let sub = haar_dwt_level(img).expect("images are at least 2×2 by construction");
    let (h, w) = (img.height(), img.width());
    let (sh, sw) = (sub.lh.height(), sub.lh.width());
    let mut out = ImagePlanes::new(h, w);
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = ((y / 2).min(sh - 1), (x / 2).min(sw - 1));
                let v = (sub.lh.get(c, sy, sx).abs()
                    + sub.hl.get(c, sy, sx).abs()
                    + sub.hh.get(c, sy, sx).abs())
                    / 3.0;
                out.set(c, y, x, v);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    let range = hi - lo;
    if range <= f32::EPSILON {
        return ImagePlanes::constant(h, w, 0.0);
    }
    for v in out.data_mut() {
        *v = (*v - lo) / range;
    }
    out
}

/// All three cues for one image. Deterministic; members share the input's
/// dimensions.
pub fn extract_cues(img: &ImagePlanes, eps: f32) -> CueBundle {
    CueBundle {
        img: img.clone(),
        hf: highfreq_cue(img),
        ci: ci_transform(img, eps),
    }
}
