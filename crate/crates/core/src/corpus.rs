//! Synthetic corpus: "real" samples are multi-octave value-noise textures
//! with i.i.d. Gaussian sensor noise; "fake" samples are the same texture
//! family box-blurred and noise-free. The class-generating process is the
//! acquisition-noise story the chromaticity cue is built to detect: each
//! texture is a luminance field times a slowly varying per-channel chroma
//! field, so channel ratios are locally stable until noise perturbs them.

use crate::image::ImagePlanes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusSpec {
    pub n_per_class: usize,
    pub img_size: usize,
    pub noise_sigma: f32,
    /// odd box-blur kernel applied to the fake class; 1 disables blurring
    pub smooth_kernel: usize,
    pub texture_octaves: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            n_per_class: 2000,
            img_size: 32,
            noise_sigma: 0.02,
            smooth_kernel: 5,
            texture_octaves: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Fake = 0,
    Real = 1,
}

impl Label {
    pub fn target(&self) -> f64 {
        match self {
            Label::Fake => 0.0,
            Label::Real => 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub img: ImagePlanes,
    pub label: Label,
}

pub type Dataset = Vec<Sample>;

// splitmix64; used to derive independent per-sample seeds
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn sample_seed(base: u64, class: u64, index: u64) -> u64 {
    mix(mix(base ^ class.wrapping_mul(0xA076_1D64_78BD_642F)) ^ index)
}

/// Smooth value noise: bilinear interpolation of a seeded lattice.
fn value_noise_octave(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f32> {
    let g = cells + 1;
    let lattice: Vec<f32> = (0..g * g).map(|_| rng.random_range(0.0..=1.0f32)).collect();
    let mut out = vec![0.0f32; size * size];
    let scale = cells as f32 / size as f32;
    for y in 0..size {
        let fy = y as f32 * scale;
        let y0 = (fy.floor() as usize).min(cells - 1);
        let wy = fy - y0 as f32;
        for x in 0..size {
            let fx = x as f32 * scale;
            let x0 = (fx.floor() as usize).min(cells - 1);
            let wx = fx - x0 as f32;
            let v00 = lattice[y0 * g + x0];
            let v01 = lattice[y0 * g + x0 + 1];
            let v10 = lattice[(y0 + 1) * g + x0];
            let v11 = lattice[(y0 + 1) * g + x0 + 1];
            let top = v00 + (v01 - v00) * wx;
            let bot = v10 + (v11 - v10) * wx;
            out[y * size + x] = top + (bot - top) * wy;
        }
    }
    out
}

fn multi_octave(rng: &mut ChaCha8Rng, size: usize, octaves: usize) -> Vec<f32> {
    let mut acc = vec![0.0f32; size * size];
    let mut weight = 1.0f32;
    let mut total = 0.0f32;
    for o in 0..octaves.max(1) {
        let cells = (4usize << o).min(size.max(2));
        let layer = value_noise_octave(rng, size, cells);
        for (a, l) in acc.iter_mut().zip(&layer) {
            *a += weight * l;
        }
        total += weight;
        weight *= 0.5;
    }
    for a in &mut acc {
        *a /= total;
    }
    acc
}

/// Base texture: luminance in [0.15, 0.85] modulated by per-channel chroma
/// fields in [0.35, 1.0] drawn from a coarse lattice.
fn texture(seed: u64, size: usize, octaves: usize) -> ImagePlanes {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lum = multi_octave(&mut rng, size, octaves);
    let mut img = ImagePlanes::new(size, size);
    for c in 0..3 {
        let chroma = value_noise_octave(&mut rng, size, 2);
        let plane = img.plane_mut(c);
        for i in 0..size * size {
            let l = 0.15 + 0.7 * lum[i];
            let ch = 0.35 + 0.65 * chroma[i];
            plane[i] = l * ch;
        }
    }
    img
}

const NOISE_STREAM: u64 = 0x4e4f_4953_45;

fn add_gaussian_noise(img: &mut ImagePlanes, sigma: f32, seed: u64) {
    if sigma <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, sigma).expect("sigma >= 0");
    for v in img.data_mut() {
        *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }
}

/// Separable box blur with edge clamping; kernel must be odd, 1 is a no-op.
pub fn box_blur(img: &ImagePlanes, kernel: usize) -> ImagePlanes {
    assert!(kernel % 2 == 1, "blur kernel must be odd");
    if kernel == 1 {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let r = kernel / 2;
    let inv = 1.0 / kernel as f32;
    let mut tmp = ImagePlanes::new(h, w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for dx in -(r as isize)..=(r as isize) {
                    let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    acc += img.get(c, y, sx);
                }
                tmp.set(c, y, x, acc * inv);
            }
        }
    }
    let mut out = ImagePlanes::new(h, w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for dy in -(r as isize)..=(r as isize) {
                    let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    acc += tmp.get(c, sy, x);
                }
                out.set(c, y, x, acc * inv);
            }
        }
    }
    out
}

fn real_sample(spec: &SyntheticCorpusSpec, index: usize) -> ImagePlanes {
    let tseed = sample_seed(spec.seed, 1, index as u64);
    let mut img = texture(tseed, spec.img_size, spec.texture_octaves);
    add_gaussian_noise(&mut img, spec.noise_sigma, mix(tseed ^ NOISE_STREAM));
    img
}

fn fake_sample(spec: &SyntheticCorpusSpec, index: usize) -> ImagePlanes {
    let tseed = sample_seed(spec.seed, 2, index as u64);
    let img = texture(tseed, spec.img_size, spec.texture_octaves);
    box_blur(&img, spec.smooth_kernel)
}

/// Full labeled dataset, interleaved real/fake; the two classes draw from
/// disjoint seed streams. The same spec always produces byte-identical
/// pixels.
pub fn generate_corpus(spec: &SyntheticCorpusSpec) -> Dataset {
    let mut out = Vec::with_capacity(2 * spec.n_per_class);
    for i in 0..spec.n_per_class {
        out.push(Sample {
            img: real_sample(spec, i),
            label: Label::Real,
        });
        out.push(Sample {
            img: fake_sample(spec, i),
            label: Label::Fake,
        });
    }
    out
}

/// A (real, fake) pair sharing one texture seed, for paired comparisons of
/// the noise phenomenon.
pub fn generate_pair(spec: &SyntheticCorpusSpec, index: usize) -> (ImagePlanes, ImagePlanes) {
    let tseed = sample_seed(spec.seed, 3, index as u64);
    let base = texture(tseed, spec.img_size, spec.texture_octaves);
    let mut real = base.clone();
    add_gaussian_noise(&mut real, spec.noise_sigma, mix(tseed ^ NOISE_STREAM));
    let fake = box_blur(&base, spec.smooth_kernel);
    (real, fake)
}
