//! Image datasets: the CIFAR-10 binary format and a procedural shape dataset.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_BATCH_RECORDS: usize = 10_000;
pub const NUM_CLASSES: usize = 10;

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageU8 {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl ImageU8 {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::invalid(format!(
                "{height}x{width} image needs {} bytes, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Ordered image collection. Index order is the memory-bank row order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<ImageU8>,
    labels: Option<Vec<u8>>,
    source: String,
}

/// Per-channel mean and standard deviation of pixel values scaled to [0,1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for ChannelStats {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl Dataset {
    pub fn new(images: Vec<ImageU8>, labels: Option<Vec<u8>>, source: impl Into<String>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(Error::invalid(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.len()
                )));
            }
        }
        Ok(Self {
            images,
            labels,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &ImageU8 {
        &self.images[i]
    }

    pub fn images(&self) -> &[ImageU8] {
        &self.images
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// The first `n` images in stored order.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n].to_vec(),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
            source: format!("{}[..{n}]", self.source),
        }
    }

    pub fn channel_stats(&self) -> ChannelStats {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut count = 0usize;
        for img in &self.images {
            for px in img.pixels.chunks(3) {
                for c in 0..3 {
                    let v = px[c] as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += img.height * img.width;
        }
        let mut stats = ChannelStats::default();
        if count == 0 {
            return stats;
        }
        for c in 0..3 {
            let mean = sum[c] / count as f64;
            let var = (sq[c] / count as f64 - mean * mean).max(0.0);
            stats.mean[c] = mean as f32;
            stats.std[c] = var.sqrt().max(1e-3) as f32;
        }
        stats
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for img in &self.images {
            h.update((img.height as u32).to_le_bytes());
            h.update((img.width as u32).to_le_bytes());
            h.update(&img.pixels);
        }
        if let Some(l) = &self.labels {
            h.update(l);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Decodes one CIFAR-10 binary batch file of any whole number of records.
pub fn load_cifar10_batch(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cifar10(&bytes, path)
}

fn decode_cifar10(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let whole = bytes.len() / CIFAR_RECORD;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::TruncatedRecord {
            path: path.to_path_buf(),
            offset: (whole * CIFAR_RECORD) as u64,
        });
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut images = Vec::with_capacity(whole);
    let mut labels = Vec::with_capacity(whole);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0];
        if label as usize >= NUM_CLASSES {
            return Err(Error::Format(format!(
                "{}: label {label} at byte offset {} is not a CIFAR-10 class",
                path.display(),
                r * CIFAR_RECORD
            )));
        }
        let planes = &rec[1..];
        let mut pixels = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            pixels.extend_from_slice(&[planes[i], planes[plane + i], planes[2 * plane + i]]);
        }
        images.push(ImageU8::new(CIFAR_SIDE, CIFAR_SIDE, pixels)?);
        labels.push(label);
    }
    Dataset::new(images, Some(labels), path.display().to_string())
}

#[derive(Debug, Clone)]
pub struct Cifar10 {
    pub train: Dataset,
    pub test: Dataset,
}

pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

fn load_standard_batch(dir: &Path, name: &str) -> Result<Dataset> {
    let path = dir.join(name);
    let ds = load_cifar10_batch(&path)?;
    if ds.len() != CIFAR_BATCH_RECORDS {
        return Err(Error::TruncatedRecord {
            path,
            offset: (ds.len() * CIFAR_RECORD) as u64,
        });
    }
    Ok(ds)
}

/// Loads the standard binary distribution: five training batches and one test batch.
pub fn load_cifar10(dir: &Path) -> Result<Cifar10> {
    let mut images = Vec::with_capacity(5 * CIFAR_BATCH_RECORDS);
    let mut labels = Vec::with_capacity(5 * CIFAR_BATCH_RECORDS);
    for name in CIFAR_TRAIN_FILES {
        let ds = load_standard_batch(dir, name)?;
        labels.extend_from_slice(ds.labels().unwrap_or_default());
        images.extend(ds.images);
    }
    let train = Dataset::new(images, Some(labels), format!("cifar10:{}/train", dir.display()))?;
    let mut test = load_standard_batch(dir, CIFAR_TEST_FILE)?;
    test.source = format!("cifar10:{}/test", dir.display());
    Ok(Cifar10 { train, test })
}

/// Writes a labeled 32x32 dataset in the CIFAR-10 binary record layout.
pub fn write_cifar10_batch(ds: &Dataset, path: &Path) -> Result<()> {
    let labels = ds
        .labels()
        .ok_or_else(|| Error::invalid("CIFAR export needs labels"))?;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (img, &label) in ds.images().iter().zip(labels) {
        if img.height != CIFAR_SIDE || img.width != CIFAR_SIDE {
            return Err(Error::invalid(format!(
                "CIFAR export needs 32x32 images, got {}x{}",
                img.height, img.width
            )));
        }
        out.push(label);
        for c in 0..3 {
            out.extend((0..plane).map(|i| img.pixels[i * 3 + c]));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Generation parameters of one synthetic image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthMeta {
    pub class: u8,
    pub shape_rgb: [u8; 3],
    pub background_rgb: [u8; 3],
    pub center: (i32, i32),
    pub radius: i32,
}

pub const SYNTH_CLASS_NAMES: [&str; NUM_CLASSES] = [
    "disk", "square", "triangle", "plus", "hbar", "vbar", "diamond", "ring", "cross", "frame",
];

fn inside(class: u8, dy: i32, dx: i32, r: i32) -> bool {
    let (ay, ax) = (dy.abs(), dx.abs());
    let t = (r / 3).max(2);
    match class {
        0 => dy * dy + dx * dx <= r * r,
        1 => ay <= r * 3 / 4 && ax <= r * 3 / 4,
        // apex up, base at dy = r
        2 => dy <= r && dy >= -r && 2 * ax <= dy + r,
        3 => (ay <= t / 2 + 1 && ax <= r) || (ax <= t / 2 + 1 && ay <= r),
        4 => ay <= t / 2 + 1 && ax <= r,
        5 => ax <= t / 2 + 1 && ay <= r,
        6 => ay + ax <= r,
        7 => {
            let d2 = dy * dy + dx * dx;
            d2 <= r * r && d2 >= (r - t) * (r - t)
        }
        8 => (dy - dx).abs() <= t / 2 + 1 && ay <= r && ax <= r || (dy + dx).abs() <= t / 2 + 1 && ay <= r && ax <= r,
        9 => {
            let m = ay.max(ax);
            m <= r && m >= r - t
        }
        _ => false,
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    [
        rng.random_range(0..=255u32) as u8,
        rng.random_range(0..=255u32) as u8,
        rng.random_range(0..=255u32) as u8,
    ]
}

fn color_distance(a: [u8; 3], b: [u8; 3]) -> u32 {
    a.iter()
        .zip(&b)
        .map(|(&x, &y)| (x as i32 - y as i32).unsigned_abs())
        .sum()
}

fn synth_image(rng: &mut ChaCha8Rng, class: u8) -> (ImageU8, SynthMeta) {
    let bg = random_color(rng);
    let mut fg = random_color(rng);
    while color_distance(fg, bg) < 200 {
        fg = random_color(rng);
    }
    let texture_amp = rng.random_range(8..=24i32);
    let period = rng.random_range(3..=8usize);
    let diagonal = rng.random_range(0..2u32) == 1;
    let radius = rng.random_range(7..=11i32);
    let cy = 16 + rng.random_range(-4..=4i32);
    let cx = 16 + rng.random_range(-4..=4i32);

    let mut img = ImageU8::filled(CIFAR_SIDE, CIFAR_SIDE, bg);
    for y in 0..CIFAR_SIDE {
        for x in 0..CIFAR_SIDE {
            let phase = if diagonal { (x + y) / period } else { y / period };
            let noise = rng.random_range(-6..=6i32);
            let shift = if phase % 2 == 0 { texture_amp } else { -texture_amp } + noise;
            let mut px = bg.map(|c| (c as i32 + shift).clamp(0, 255) as u8);
            if inside(class, y as i32 - cy, x as i32 - cx, radius) {
                px = fg.map(|c| (c as i32 + noise).clamp(0, 255) as u8);
            }
            img.set(y, x, px);
        }
    }
    let meta = SynthMeta {
        class,
        shape_rgb: fg,
        background_rgb: bg,
        center: (cy, cx),
        radius,
    };
    (img, meta)
}

/// Procedural 32x32 shapes over striped textures, ten classes, class `i % 10`.
pub fn synth_dataset(n: usize, seed: u64) -> Result<Dataset> {
    Ok(synth_dataset_with_meta(n, seed)?.0)
}

pub fn synth_dataset_with_meta(n: usize, seed: u64) -> Result<(Dataset, Vec<SynthMeta>)> {
    if n == 0 {
        return Err(Error::invalid("synthetic dataset needs at least one image"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut metas = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % NUM_CLASSES) as u8;
        let (img, meta) = synth_image(&mut rng, class);
        images.push(img);
        labels.push(class);
        metas.push(meta);
    }
    let ds = Dataset::new(images, Some(labels), format!("synthetic:n={n},seed={seed}"))?;
    Ok((ds, metas))
}

/// Resolves the standard file names inside a CIFAR-10 directory.
pub fn cifar10_files(dir: &Path) -> Vec<PathBuf> {
    CIFAR_TRAIN_FILES
        .iter()
        .chain(std::iter::once(&CIFAR_TEST_FILE))
        .map(|n| dir.join(n))
        .collect()
}
