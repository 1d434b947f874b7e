//! The transformation family: random resized crops, flips, color jitter,
//! jigsaw patch shuffling and quarter-turn rotations.
//!
//! Float images are planar `[3, H, W]` buffers with values in `[0, 1]` until
//! the final per-channel standardization.

mod perms;

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use perms::{hamming, permutation_count, PermutationSet};

use crate::data::{ChannelStats, ImageU8};
use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Smallest crop area as a fraction of the source; `1.0` disables cropping.
    pub crop_area_min: f64,
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue rotation range as a fraction of a full turn.
    pub hue: f64,
}

impl AugmentConfig {
    /// Geometry and color augmentation for the untransformed view.
    pub fn standard() -> Self {
        Self {
            crop_area_min: 0.2,
            flip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
        }
    }

    /// Crop of at least 60% of the image and per-patch color jitter, no flip.
    pub fn jigsaw() -> Self {
        Self {
            crop_area_min: 0.6,
            flip_prob: 0.0,
            ..Self::standard()
        }
    }

    pub fn none() -> Self {
        Self {
            crop_area_min: 1.0,
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.crop_area_min > 0.0 && self.crop_area_min <= 1.0) {
            return Err(Error::invalid(format!("crop area bound {} outside (0, 1]", self.crop_area_min)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        for (name, v, hi) in [
            ("brightness", self.brightness, 1.0),
            ("contrast", self.contrast, 1.0),
            ("saturation", self.saturation, 1.0),
            ("hue", self.hue, 0.5),
        ] {
            if !(0.0..=hi).contains(&v) {
                return Err(Error::invalid(format!("{name} jitter {v} outside [0, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Patch geometry of the jigsaw view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JigsawGeometry {
    /// Side of the resized crop.
    pub working_size: usize,
    pub grid: usize,
    pub patch: usize,
    /// Maximum patch offset from the cell center, in pixels.
    pub jitter: usize,
}

impl Default for JigsawGeometry {
    fn default() -> Self {
        Self {
            working_size: 96,
            grid: 3,
            patch: 24,
            jitter: 4,
        }
    }
}

impl JigsawGeometry {
    pub fn cell(&self) -> usize {
        self.working_size / self.grid.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.patch == 0 {
            return Err(Error::invalid("jigsaw grid and patch must be positive"));
        }
        if self.patch > self.cell() {
            return Err(Error::invalid(format!(
                "patch {} does not fit a {}-pixel cell of a {}-pixel crop",
                self.patch,
                self.cell(),
                self.working_size
            )));
        }
        Ok(())
    }
}

/// Crop rectangle in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropRect {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

impl CropRect {
    pub fn full(img: &ImageU8) -> Self {
        Self {
            top: 0.0,
            left: 0.0,
            height: img.height() as f64,
            width: img.width() as f64,
        }
    }
}

/// Random crop covering at least `area_min` of the image with aspect ratio in
/// `[3/4, 4/3]`; falls back to the full image after ten rejected draws.
pub fn sample_crop(img: &ImageU8, area_min: f64, rng: &mut ChaCha8Rng) -> CropRect {
    if area_min >= 1.0 {
        return CropRect::full(img);
    }
    let (h, w) = (img.height() as f64, img.width() as f64);
    let area = h * w;
    let (lo, hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let target = area * rng.random_range(area_min..=1.0);
        let aspect = rng.random_range(lo..=hi).exp();
        let cw = (target * aspect).sqrt().round();
        let ch = (target / aspect).sqrt().round();
        if cw >= 1.0 && ch >= 1.0 && cw <= w && ch <= h && cw * ch >= area_min * area {
            let top = rng.random_range(0..=(h - ch) as usize) as f64;
            let left = rng.random_range(0..=(w - cw) as usize) as f64;
            return CropRect {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    CropRect::full(img)
}

/// Bilinear resample of `rect` to `size x size`, planar float output.
pub fn resized_crop(img: &ImageU8, rect: CropRect, size: usize) -> Vec<f32> {
    let (h, w) = (img.height(), img.width());
    let plane = size * size;
    let mut out = vec![0f32; 3 * plane];
    let sy = rect.height / size as f64;
    let sx = rect.width / size as f64;
    let px = img.pixels();
    let axis = |o: usize, start: f64, scale: f64, limit: usize| {
        let c = (start + (o as f64 + 0.5) * scale - 0.5).clamp(0.0, (limit - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(limit - 1);
        (i0, i1, (c - i0 as f64) as f32)
    };
    let cols: Vec<_> = (0..size).map(|ox| axis(ox, rect.left, sx, w)).collect();
    for oy in 0..size {
        let (y0, y1, fy) = axis(oy, rect.top, sy, h);
        for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
            for c in 0..3 {
                let v = |y: usize, x: usize| px[(y * w + x) * 3 + c] as f32 / 255.0;
                let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                out[c * plane + oy * size + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

pub fn flip_horizontal(chw: &mut [f32], side: usize) {
    for row in chw.chunks_mut(side) {
        row.reverse();
    }
}

fn clamp_unit(chw: &mut [f32]) {
    chw.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Brightness, contrast, saturation and hue jitter in that order. Disabled
/// components consume no randomness.
pub fn photometric(chw: &mut [f32], aug: &AugmentConfig, rng: &mut ChaCha8Rng) {
    let plane = chw.len() / 3;
    if aug.brightness > 0.0 {
        let f = rng.random_range(1.0 - aug.brightness..=1.0 + aug.brightness) as f32;
        chw.iter_mut().for_each(|v| *v *= f);
        clamp_unit(chw);
    }
    if aug.contrast > 0.0 {
        let f = rng.random_range(1.0 - aug.contrast..=1.0 + aug.contrast) as f32;
        let mean = (0..plane).map(|i| luma(chw, plane, i)).sum::<f32>() / plane as f32;
        chw.iter_mut().for_each(|v| *v = (*v - mean) * f + mean);
        clamp_unit(chw);
    }
    if aug.saturation > 0.0 {
        let f = rng.random_range(1.0 - aug.saturation..=1.0 + aug.saturation) as f32;
        for i in 0..plane {
            let gray = luma(chw, plane, i);
            for c in 0..3 {
                chw[c * plane + i] = (chw[c * plane + i] - gray) * f + gray;
            }
        }
        clamp_unit(chw);
    }
    if aug.hue > 0.0 {
        let angle = rng.random_range(-aug.hue..=aug.hue) * 2.0 * PI;
        rotate_hue(chw, plane, angle);
        clamp_unit(chw);
    }
}

fn luma(chw: &[f32], plane: usize, i: usize) -> f32 {
    0.299 * chw[i] + 0.587 * chw[plane + i] + 0.114 * chw[2 * plane + i]
}

/// Rotates chroma in YIQ space, keeping luma fixed.
fn rotate_hue(chw: &mut [f32], plane: usize, angle: f64) {
    let (s, c) = (angle.sin() as f32, angle.cos() as f32);
    for i in 0..plane {
        let (r, g, b) = (chw[i], chw[plane + i], chw[2 * plane + i]);
        let y = 0.299 * r + 0.587 * g + 0.114 * b;
        let ci = 0.596 * r - 0.274 * g - 0.322 * b;
        let cq = 0.211 * r - 0.523 * g + 0.312 * b;
        let (i2, q2) = (ci * c - cq * s, ci * s + cq * c);
        chw[i] = y + 0.956 * i2 + 0.621 * q2;
        chw[plane + i] = y - 0.272 * i2 - 0.647 * q2;
        chw[2 * plane + i] = y - 1.106 * i2 + 1.703 * q2;
    }
}

pub fn standardize(chw: &mut [f32], stats: &ChannelStats) {
    let plane = chw.len() / 3;
    for (c, chan) in chw.chunks_mut(plane.max(1)).enumerate() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        chan.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
}

/// Untransformed view: crop, flip, color jitter, standardization. Returns `[3, S, S]`.
pub fn standard_augment(
    img: &ImageU8,
    aug: &AugmentConfig,
    size: usize,
    stats: &ChannelStats,
    seed: u64,
) -> Result<Tensor<f32>> {
    aug.validate()?;
    if img.height() == 0 || img.width() == 0 || size == 0 {
        return Err(Error::invalid("empty image or output size"));
    }
    let mut rng = seed::rng(seed, Stream::ImageView, &[]);
    let rect = sample_crop(img, aug.crop_area_min, &mut rng);
    let mut chw = resized_crop(img, rect, size);
    if aug.flip_prob > 0.0 && rng.random_bool(aug.flip_prob) {
        flip_horizontal(&mut chw, size);
    }
    photometric(&mut chw, aug, &mut rng);
    standardize(&mut chw, stats);
    Tensor::new(vec![3, size, size], chw)
}

/// Jigsaw view: `g^2` patches in the order of one permutation.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    /// `[g^2, 3, p, p]`, slot-major.
    pub patches: Tensor<f32>,
    pub perm_id: usize,
}

impl PatchSet {
    /// Undoes the reordering, returning patches in source-cell order.
    pub fn unpermute(&self, pset: &PermutationSet) -> Result<Tensor<f32>> {
        let perm = pset.get(self.perm_id)?;
        let shape = self.patches.shape().to_vec();
        let width = self.patches.numel() / shape[0];
        let mut out = vec![0f32; self.patches.numel()];
        for (slot, &cell) in perm.iter().enumerate() {
            let cell = cell as usize;
            out[cell * width..(cell + 1) * width]
                .copy_from_slice(&self.patches.data()[slot * width..(slot + 1) * width]);
        }
        Tensor::new(shape, out)
    }
}

/// Crop, grid split, per-cell patch extraction with positional jitter,
/// independent color jitter per patch, then reordering by `pset[perm_id]`.
///
/// Every random draw is keyed by the source cell, so permuting only changes
/// the output order.
pub fn jigsaw_transform(
    img: &ImageU8,
    perm_id: usize,
    pset: &PermutationSet,
    aug: &AugmentConfig,
    geom: &JigsawGeometry,
    stats: &ChannelStats,
    seed: u64,
) -> Result<PatchSet> {
    aug.validate()?;
    geom.validate()?;
    if pset.grid() != geom.grid {
        return Err(Error::invalid(format!(
            "permutation set grid {} does not match geometry grid {}",
            pset.grid(),
            geom.grid
        )));
    }
    let perm = pset.get(perm_id)?;
    if img.height() < geom.grid || img.width() < geom.grid {
        return Err(Error::invalid(format!(
            "{}x{} image is smaller than the minimum {g}x{g} crop",
            img.height(),
            img.width(),
            g = geom.grid
        )));
    }
    let size = geom.working_size;
    let (cell, p, g) = (geom.cell(), geom.patch, geom.grid);
    let mut rng = seed::rng(seed, Stream::TransformedView, &[]);
    let rect = sample_crop(img, aug.crop_area_min, &mut rng);
    let chw = resized_crop(img, rect, size);
    let plane = size * size;
    let slack = cell - p;
    let center = slack / 2;

    let mut cells = Vec::with_capacity(g * g);
    for gy in 0..g {
        for gx in 0..g {
            let idx = (gy * g + gx) as u64;
            let mut cell_rng = seed::rng(seed, Stream::TransformedView, &[1 + idx]);
            let offset = |rng: &mut ChaCha8Rng| {
                if geom.jitter == 0 || slack == 0 {
                    return center;
                }
                let lo = center.saturating_sub(geom.jitter);
                let hi = (center + geom.jitter).min(slack);
                rng.random_range(lo..=hi)
            };
            let oy = gy * cell + offset(&mut cell_rng);
            let ox = gx * cell + offset(&mut cell_rng);
            let mut patch = vec![0f32; 3 * p * p];
            for c in 0..3 {
                for y in 0..p {
                    let src = c * plane + (oy + y) * size + ox;
                    patch[(c * p + y) * p..(c * p + y + 1) * p].copy_from_slice(&chw[src..src + p]);
                }
            }
            photometric(&mut patch, aug, &mut cell_rng);
            standardize(&mut patch, stats);
            cells.push(patch);
        }
    }
    let mut out = Vec::with_capacity(g * g * 3 * p * p);
    for &src in perm {
        out.extend_from_slice(&cells[src as usize]);
    }
    Ok(PatchSet {
        patches: Tensor::new(vec![g * g, 3, p, p], out)?,
        perm_id,
    })
}

fn check_quarter_turns(k: usize) -> Result<()> {
    if k > 3 {
        return Err(Error::invalid(format!("rotation index {k} outside 0..=3")));
    }
    Ok(())
}

/// Counter-clockwise rotation by `k` quarter turns:
/// one turn maps `out(r, c) = in(c, W - 1 - r)`.
pub fn rotate_image(img: &ImageU8, k: usize) -> Result<ImageU8> {
    check_quarter_turns(k)?;
    let mut cur = img.clone();
    for _ in 0..k {
        let (h, w) = (cur.height(), cur.width());
        let mut next = ImageU8::filled(w, h, [0; 3]);
        for r in 0..w {
            for c in 0..h {
                next.set(r, c, cur.get(c, w - 1 - r));
            }
        }
        cur = next;
    }
    Ok(cur)
}

/// Same rotation on a planar `[C, H, W]` tensor.
pub fn rotate_tensor(t: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
    check_quarter_turns(k)?;
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::InvalidShape {
            op: "rotate_tensor",
            shape: s.to_vec(),
            reason: "expected [C, H, W]".into(),
        });
    }
    let mut cur = t.clone();
    for _ in 0..k {
        let (ch, h, w) = (cur.shape()[0], cur.shape()[1], cur.shape()[2]);
        let src = cur.data();
        let mut out = vec![0f32; src.len()];
        for c in 0..ch {
            for r in 0..w {
                for col in 0..h {
                    out[(c * w + r) * h + col] = src[(c * h + col) * w + (w - 1 - r)];
                }
            }
        }
        cur = Tensor::new(vec![ch, w, h], out)?;
    }
    Ok(cur)
}
