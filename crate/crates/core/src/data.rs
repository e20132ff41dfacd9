//! Samples, preprocessing, augmentation, the synthetic lesion generator and
//! PNG dataset I/O.
//!
//! Images are stored channel-major (3, H, W) as `f32` in `[0, 1]`; masks and
//! edge maps are (H, W) with values in `{0, 1}`.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use lcau_tensor::{Float, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub h: usize,
    pub w: usize,
    pub image: Vec<f32>,
    pub mask: Vec<f32>,
    pub edge: Vec<f32>,
}

impl Sample {
    /// Builds a sample and derives its edge labels from the mask.
    pub fn new(id: impl Into<String>, h: usize, w: usize, image: Vec<f32>, mask: Vec<f32>) -> Self {
        assert_eq!(image.len(), 3 * h * w, "image size");
        assert_eq!(mask.len(), h * w, "mask size");
        let edge = derive_edge_gt(&mask, h, w);
        Self { id: id.into(), h, w, image, mask, edge }
    }

    pub fn mask_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&v| v > 0.5).count() as f64 / self.mask.len() as f64
    }
}

/// Stacks samples into image (B, 3, H, W), mask and edge (B, 1, H, W) tensors.
pub fn batch_tensors<F: Float>(samples: &[&Sample]) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let first = samples.first().ok_or_else(|| ModelError::Data("empty batch".into()))?;
    let (h, w, b) = (first.h, first.w, samples.len());
    if samples.iter().any(|s| s.h != h || s.w != w) {
        return Err(ModelError::Data("samples in one batch must share a resolution".into()));
    }
    let conv = |f: fn(&Sample) -> &Vec<f32>| -> Vec<F> { samples.iter().flat_map(|s| f(s).iter().map(|&v| F::lit(v as f64))).collect() };
    Ok((
        Tensor::from_vec(conv(|s| &s.image), (b, 3, h, w))?,
        Tensor::from_vec(conv(|s| &s.mask), (b, 1, h, w))?,
        Tensor::from_vec(conv(|s| &s.edge), (b, 1, h, w))?,
    ))
}

/// Gray-world colour constancy: each channel is scaled so its mean equals
/// the mean of the three channel means, then clipped to `[0, 1]`. A channel
/// with zero mean is left unscaled.
pub fn gray_world_normalize(image: &[f32], h: usize, w: usize) -> Vec<f32> {
    let n = h * w;
    let means: Vec<f64> = (0..3).map(|c| image[c * n..(c + 1) * n].iter().map(|&v| v as f64).sum::<f64>() / n as f64).collect();
    let target = means.iter().sum::<f64>() / 3.0;
    let mut out = image.to_vec();
    for (c, &m) in means.iter().enumerate() {
        if m > 0.0 {
            let s = target / m;
            out[c * n..(c + 1) * n].iter_mut().for_each(|v| *v = ((*v as f64) * s).clamp(0.0, 1.0) as f32);
        }
    }
    out
}

fn morph(mask: &[f32], h: usize, w: usize, dilate: bool) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = !dilate;
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    let v = mask[yy * w + xx] > 0.5;
                    if dilate {
                        acc |= v;
                    } else {
                        acc &= v;
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Morphological gradient `dilate3x3(mask) XOR erode3x3(mask)`; pixels
/// outside the image are ignored by both operators.
pub fn derive_edge_gt(mask: &[f32], h: usize, w: usize) -> Vec<f32> {
    let d = morph(mask, h, w, true);
    let e = morph(mask, h, w, false);
    d.iter().zip(&e).map(|(&a, &b)| if a != b { 1.0 } else { 0.0 }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub min_area: f64,
    pub max_area: f64,
    /// Probability of a faint lesion.
    pub low_contrast_prob: f64,
    pub max_hairs: usize,
    pub vignette_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { min_area: 0.05, max_area: 0.5, low_contrast_prob: 0.3, max_hairs: 4, vignette_prob: 0.3 }
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

fn waves(rng: &mut ChaCha8Rng, n: usize, max_freq: f64, amp: f64) -> Vec<Wave> {
    (0..n)
        .map(|_| {
            let a = rng.gen_range(0.0..2.0 * PI);
            let f = rng.gen_range(0.3..1.0) * max_freq;
            Wave { kx: f * a.cos(), ky: f * a.sin(), phase: rng.gen_range(0.0..2.0 * PI), amp: amp * rng.gen_range(0.5..1.0) }
        })
        .collect()
}

fn eval_waves(ws: &[Wave], x: f64, y: f64) -> f64 {
    ws.iter().map(|w| w.amp * (w.kx * x + w.ky * y + w.phase).sin()).sum()
}

/// Deterministic synthetic dermoscopy-like sample: a star-convex lesion on
/// textured skin with optional hairs and a dark circular vignette.
pub fn synth_lesion_sample(seed: u64, h: usize, w: usize, cfg: &SynthConfig) -> Result<Sample> {
    if h < 64 || w < 64 {
        return Err(ModelError::Config(format!("synthetic samples need at least 64x64 pixels, got {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (h as f64, w as f64);
    let target = rng.gen_range(cfg.min_area.max(0.06)..cfg.max_area.min(0.4));
    let r0 = (target * hf * wf / PI).sqrt();
    let margin = 0.3 * r0;
    let cx = wf / 2.0 + rng.gen_range(-1.0..1.0) * (wf / 2.0 - r0 - margin).max(0.0) * 0.5;
    let cy = hf / 2.0 + rng.gen_range(-1.0..1.0) * (hf / 2.0 - r0 - margin).max(0.0) * 0.5;
    let harmonics: Vec<(f64, f64)> = (2..=5).map(|k| (rng.gen_range(0.0..0.25) / (k as f64 - 1.0), rng.gen_range(0.0..2.0 * PI))).collect();
    let radius = |theta: f64| r0 * (1.0 + harmonics.iter().enumerate().map(|(i, (a, p))| a * ((i as f64 + 2.0) * theta + p).cos()).sum::<f64>());

    let skin = [rng.gen_range(0.75..0.95), rng.gen_range(0.55..0.75), rng.gen_range(0.45..0.65)];
    let dark = rng.gen_range(0.25..0.55);
    let lesion_base = [skin[0] * dark, skin[1] * dark * 0.8, skin[2] * dark * 0.75];
    let strength = if rng.gen_bool(cfg.low_contrast_prob) { rng.gen_range(0.45..0.65) } else { rng.gen_range(0.75..1.0) };
    let skin_tex = waves(&mut rng, 5, 0.15, 0.025);
    let lesion_tex = waves(&mut rng, 6, 0.35, 0.06);
    let noise_amp = 0.02;

    let mut mask = vec![0f32; h * w];
    let mut image = vec![0f32; 3 * h * w];
    let n = h * w;
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = (px - cx, py - cy);
            let rr = radius(dy.atan2(dx));
            let dist = (dx * dx + dy * dy).sqrt();
            let inside = dist <= rr;
            mask[y * w + x] = if inside { 1.0 } else { 0.0 };
            // soft edge over ~2 px, darker towards the centre
            let cover = smoothstep(rr + 1.0, rr - 1.0, dist) * strength;
            let core = 1.0 - 0.25 * (1.0 - dist / rr).clamp(0.0, 1.0);
            let st = eval_waves(&skin_tex, px, py);
            let lt = eval_waves(&lesion_tex, px, py);
            for c in 0..3 {
                let s = skin[c] + st;
                let l = lesion_base[c] * core + lt;
                let v = s * (1.0 - cover) + l * cover + rng.gen_range(-noise_amp..noise_amp);
                image[c * n + y * w + x] = v as f32;
            }
        }
    }

    for _ in 0..rng.gen_range(0..=cfg.max_hairs) {
        let p0 = (rng.gen_range(0.0..wf), rng.gen_range(0.0..hf));
        let p2 = (rng.gen_range(0.0..wf), rng.gen_range(0.0..hf));
        let p1 = (rng.gen_range(0.0..wf), rng.gen_range(0.0..hf));
        let shade = rng.gen_range(0.05..0.2);
        let steps = 4 * (h + w);
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let bx = (1.0 - t).powi(2) * p0.0 + 2.0 * (1.0 - t) * t * p1.0 + t * t * p2.0;
            let by = (1.0 - t).powi(2) * p0.1 + 2.0 * (1.0 - t) * t * p1.1 + t * t * p2.1;
            let (ix, iy) = (bx as isize, by as isize);
            if ix >= 0 && iy >= 0 && (ix as usize) < w && (iy as usize) < h {
                let o = iy as usize * w + ix as usize;
                for c in 0..3 {
                    image[c * n + o] = image[c * n + o].min(shade as f32);
                }
            }
        }
    }

    if rng.gen_bool(cfg.vignette_prob) {
        let rv = 0.5 * hf.min(wf) * rng.gen_range(0.9..1.1);
        for y in 0..h {
            for x in 0..w {
                let d = ((x as f64 + 0.5 - wf / 2.0).powi(2) + (y as f64 + 0.5 - hf / 2.0).powi(2)).sqrt();
                let k = 1.0 - 0.85 * smoothstep(rv - 6.0, rv + 6.0, d);
                for c in 0..3 {
                    image[c * n + y * w + x] *= k as f32;
                }
            }
        }
    }
    image.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Sample::new(format!("synth_{seed:08}"), h, w, image, mask))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    pub angle_deg: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw { hflip: false, vflip: false, angle_deg: 0.0, brightness: 1.0, contrast: 1.0 };

    /// Flips with probability 1/2, rotation in +-15 degrees, brightness and
    /// contrast factors in [0.8, 1.2].
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            hflip: rng.gen_bool(0.5),
            vflip: rng.gen_bool(0.5),
            angle_deg: rng.gen_range(-15.0..15.0),
            brightness: rng.gen_range(0.8..1.2),
            contrast: rng.gen_range(0.8..1.2),
        }
    }
}

fn reflect(v: f64, size: usize) -> f64 {
    let m = (size - 1) as f64;
    if m == 0.0 {
        return 0.0;
    }
    let period = 2.0 * m;
    let r = v.rem_euclid(period);
    if r > m {
        period - r
    } else {
        r
    }
}

fn bilinear(plane: &[f32], h: usize, w: usize, x: f64, y: f64) -> f32 {
    let x0 = x.floor().clamp(0.0, (w - 1) as f64) as usize;
    let y0 = y.floor().clamp(0.0, (h - 1) as f64) as usize;
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = ((x - x0 as f64).clamp(0.0, 1.0), (y - y0 as f64).clamp(0.0, 1.0));
    let at = |yy: usize, xx: usize| plane[yy * w + xx] as f64;
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    (top * (1.0 - fy) + bot * fy) as f32
}

/// Rotates a plane about its centre; `reflect_fill` mirrors at the border,
/// otherwise outside samples are zero.
fn rotate_plane(plane: &[f32], h: usize, w: usize, angle_deg: f64, reflect_fill: bool) -> Vec<f32> {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            let inside = sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64;
            out[y * w + x] = if inside {
                bilinear(plane, h, w, sx, sy)
            } else if reflect_fill {
                bilinear(plane, h, w, reflect(sx, w), reflect(sy, h))
            } else {
                0.0
            };
        }
    }
    out
}

fn flip_plane(plane: &mut [f32], h: usize, w: usize, horizontal: bool) {
    if horizontal {
        plane.chunks_mut(w).for_each(|r| r.reverse());
    } else {
        for y in 0..h / 2 {
            for x in 0..w {
                plane.swap(y * w + x, (h - 1 - y) * w + x);
            }
        }
    }
}

pub fn apply_augment(sample: &Sample, d: &AugmentDraw) -> Sample {
    let (h, w, n) = (sample.h, sample.w, sample.h * sample.w);
    let mut planes: Vec<Vec<f32>> = sample.image.chunks(n).map(|p| p.to_vec()).collect();
    let mut mask = sample.mask.clone();
    for p in planes.iter_mut().chain(std::iter::once(&mut mask)) {
        if d.hflip {
            flip_plane(p, h, w, true);
        }
        if d.vflip {
            flip_plane(p, h, w, false);
        }
    }
    if d.angle_deg != 0.0 {
        planes = planes.iter().map(|p| rotate_plane(p, h, w, d.angle_deg, true)).collect();
        mask = rotate_plane(&mask, h, w, d.angle_deg, false).iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    }
    let mut image: Vec<f32> = planes.concat();
    if d.brightness != 1.0 || d.contrast != 1.0 {
        let mean = image.iter().map(|&v| v as f64).sum::<f64>() / image.len() as f64;
        image.iter_mut().for_each(|v| *v = (((*v as f64 - mean) * d.contrast + mean) * d.brightness).clamp(0.0, 1.0) as f32);
    }
    Sample::new(sample.id.clone(), h, w, image, mask)
}

pub fn augment(sample: &Sample, seed: u64) -> Sample {
    apply_augment(sample, &AugmentDraw::sample(seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 0.7, val: 0.1, test: 0.2, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.train, self.val, self.test].iter().all(|f| (0.0..=1.0).contains(f));
        if !ok || (self.train + self.val + self.test - 1.0).abs() > 1e-9 {
            return Err(ModelError::Config(format!("split fractions must be in [0,1] and sum to 1, got {self:?}")));
        }
        Ok(())
    }

    /// Train and validation sizes are rounded down; the rest is test.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let tr = (self.train * n as f64 + 1e-9).floor() as usize;
        let va = ((self.val * n as f64 + 1e-9).floor() as usize).min(n - tr);
        (tr, va, n - tr - va)
    }

    /// Seeded shuffle of the sorted ids, cut into train/val/test.
    pub fn split<T: Clone + Ord>(&self, items: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let mut v = items.to_vec();
        v.sort();
        v.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let (tr, va, _) = self.counts(v.len());
        let test = v.split_off(tr + va);
        let val = v.split_off(tr);
        (v, val, test)
    }
}

/// Reads an RGB image as a (3, H, W) plane set in [0, 1].
pub fn read_rgb(path: &Path, size: Option<usize>) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path).map_err(|e| ModelError::Data(format!("{}: {e}", path.display())))?.to_rgb8();
    let img = match size {
        Some(s) if img.dimensions() != (s as u32, s as u32) => image::imageops::resize(&img, s as u32, s as u32, FilterType::Triangle),
        _ => img,
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0f32; 3 * h * w];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * h * w + i] = p[c] as f32 / 255.0;
        }
    }
    Ok((out, h, w))
}

/// Reads a grayscale mask, nearest-neighbour resized, foreground >= 128.
pub fn read_mask(path: &Path, size: Option<usize>) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path).map_err(|e| ModelError::Data(format!("{}: {e}", path.display())))?.to_luma8();
    let img = match size {
        Some(s) if img.dimensions() != (s as u32, s as u32) => image::imageops::resize(&img, s as u32, s as u32, FilterType::Nearest),
        _ => img,
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.pixels().map(|p| if p[0] >= 128 { 1.0 } else { 0.0 }).collect(), h, w))
}

pub fn write_rgb(path: &Path, image: &[f32], h: usize, w: usize) -> Result<()> {
    let n = h * w;
    let buf: Vec<u8> = (0..n).flat_map(|i| (0..3).map(move |c| (image[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8)).collect();
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::Rgb8).map_err(|e| ModelError::Data(format!("{}: {e}", path.display())))
}

/// Writes a {0, 1} (or probability) plane as an 8-bit grayscale PNG.
pub fn write_gray(path: &Path, plane: &[f32], h: usize, w: usize) -> Result<()> {
    let buf: Vec<u8> = plane.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::L8).map_err(|e| ModelError::Data(format!("{}: {e}", path.display())))
}

/// Writes `<id>.png` and `<id>_segmentation.png`.
pub fn write_sample(dir: &Path, s: &Sample) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_rgb(&dir.join(format!("{}.png", s.id)), &s.image, s.h, s.w)?;
    write_gray(&dir.join(format!("{}_segmentation.png", s.id)), &s.mask, s.h, s.w)
}

#[derive(Clone, Debug, Default)]
pub struct DirListing {
    /// (id, image path, mask path) sorted by id.
    pub pairs: Vec<(String, PathBuf, PathBuf)>,
    /// Images without a mask and masks without an image.
    pub skipped: Vec<PathBuf>,
}

/// Pairs `<id>.{png,jpg,jpeg}` with `<id>_segmentation.png`.
pub fn list_pairs(root: &Path) -> Result<DirListing> {
    let mut images = std::collections::BTreeMap::new();
    let mut masks = std::collections::BTreeMap::new();
    for entry in std::fs::read_dir(root).map_err(|e| ModelError::Data(format!("{}: {e}", root.display())))? {
        let path = entry?.path();
        let (Some(stem), Some(ext)) = (path.file_stem().and_then(|s| s.to_str()), path.extension().and_then(|s| s.to_str())) else {
            continue;
        };
        let ext = ext.to_ascii_lowercase();
        if let Some(id) = stem.strip_suffix("_segmentation") {
            if ext == "png" {
                masks.insert(id.to_string(), path.clone());
            }
        } else if matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
            images.insert(stem.to_string(), path.clone());
        }
    }
    let mut out = DirListing::default();
    for (id, img) in &images {
        match masks.remove(id) {
            Some(m) => out.pairs.push((id.clone(), img.clone(), m)),
            None => out.skipped.push(img.clone()),
        }
    }
    out.skipped.extend(masks.into_values());
    Ok(out)
}

/// Loads one pair at `size x size`, gray-world normalized.
pub fn load_pair(id: &str, image: &Path, mask: &Path, size: usize) -> Result<Sample> {
    let (img, h, w) = read_rgb(image, Some(size))?;
    let (m, _, _) = read_mask(mask, Some(size))?;
    Ok(Sample::new(id, h, w, gray_world_normalize(&img, h, w), m))
}

#[derive(Clone, Debug, Default)]
pub struct SplitDataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub skipped: Vec<PathBuf>,
}

/// Loads an image/mask directory and splits it deterministically.
pub fn load_isic_dir(root: &Path, split: &SplitSpec, size: usize) -> Result<SplitDataset> {
    split.validate()?;
    let listing = list_pairs(root)?;
    if listing.pairs.is_empty() {
        return Err(ModelError::Data(format!("no image/mask pairs found in {}", root.display())));
    }
    let (tr, va, te) = split.split(&listing.pairs);
    let load = |v: Vec<(String, PathBuf, PathBuf)>| -> Result<Vec<Sample>> { v.iter().map(|(id, i, m)| load_pair(id, i, m, size)).collect() };
    Ok(SplitDataset { train: load(tr)?, val: load(va)?, test: load(te)?, skipped: listing.skipped })
}

/// Seed of the `index`-th synthetic sample of a dataset seeded with `seed`.
pub fn synth_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// Synthetic train/val/test sets, gray-world normalized like loaded data.
pub fn synth_dataset(seed: u64, counts: (usize, usize, usize), size: usize, cfg: &SynthConfig) -> Result<SplitDataset> {
    let make = |start: usize, n: usize| -> Result<Vec<Sample>> {
        (start..start + n)
            .map(|i| {
                let s = synth_lesion_sample(synth_seed(seed, i), size, size, cfg)?;
                Ok(Sample { image: gray_world_normalize(&s.image, s.h, s.w), ..s })
            })
            .collect()
    };
    let (a, b, c) = counts;
    Ok(SplitDataset { train: make(0, a)?, val: make(a, b)?, test: make(a + b, c)?, skipped: vec![] })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_world_equalizes_means() {
        let (h, w) = (4, 4);
        let mut img = vec![0.3f32; 16];
        img.extend(vec![0.5f32; 16]);
        img.extend(vec![0.7f32; 16]);
        let out = gray_world_normalize(&img, h, w);
        assert!(out.iter().all(|v| (v - 0.5).abs() < 1e-6));
        let gray = vec![0.4f32; 48];
        assert_eq!(gray_world_normalize(&gray, h, w), gray);
        let mut dark = vec![0.0f32; 16];
        dark.extend(vec![0.2f32; 32]);
        assert_eq!(&gray_world_normalize(&dark, h, w)[..16], &[0.0; 16]);
    }

    #[test]
    fn edge_of_square_is_hollow() {
        let (h, w) = (9, 9);
        let mut m = vec![0f32; 81];
        for y in 3..6 {
            for x in 3..6 {
                m[y * w + x] = 1.0;
            }
        }
        let e = derive_edge_gt(&m, h, w);
        // band from 2..=6; the square's centre stays off
        assert_eq!(e[4 * w + 4], 0.0);
        assert_eq!(e[2 * w + 2], 1.0);
        assert_eq!(e[3 * w + 3], 1.0);
        assert_eq!(e.iter().filter(|&&v| v == 1.0).count(), 25 - 1);
        assert!(derive_edge_gt(&[0.0; 81], h, w).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn split_counts_follow_fractions() {
        assert_eq!(SplitSpec::default().counts(2594), (1815, 259, 520));
        let ids: Vec<u32> = (0..50).collect();
        let a = SplitSpec::default().split(&ids);
        assert_eq!(a, SplitSpec::default().split(&ids));
        assert_ne!(a, SplitSpec { seed: 1, ..Default::default() }.split(&ids));
        assert!(SplitSpec { train: 0.8, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn identity_and_involutions() {
        let s = synth_lesion_sample(3, 64, 64, &SynthConfig::default()).unwrap();
        assert_eq!(apply_augment(&s, &AugmentDraw::IDENTITY), s);
        let flip = AugmentDraw { hflip: true, ..AugmentDraw::IDENTITY };
        assert_eq!(apply_augment(&apply_augment(&s, &flip), &flip), s);
        let r = augment(&s, 11);
        assert_eq!(r.edge, derive_edge_gt(&r.mask, r.h, r.w));
        assert!(r.mask.iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
