//! Procedural synthetic segmentation benchmarks and their on-disk
//! container.
//!
//! Each sample is a 3-channel image of randomly placed shapes over a dark
//! background. Every foreground class id owns one geometry (rectangles,
//! filled circles, or 45-degree diagonal stripes, cycling for larger K) and
//! one base color; additive Gaussian noise keeps the task from collapsing
//! into a pure color lookup. Later shapes overdraw earlier ones and labels
//! follow the same z-order.
//!
//! Container format (single file, little-endian): magic `CSEG`, version
//! u32 = 1, then u32 counts `n, c, h, w, k`; per sample the image as
//! `c*h*w` IEEE-754 f32 values (CHW row-major) followed by `h*w` u8 class
//! ids. No padding, no compression.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::rng::{derive_seed, rng_from, StreamHash};
use crate::tensor::{Elem, LabelMap, Tensor, TensorError};

pub const MAGIC: [u8; 4] = *b"CSEG";
pub const FORMAT_VERSION: u32 = 1;
/// Magic plus six u32 header fields: version, n, c, h, w, k.
pub const HEADER_BYTES: usize = 28;
/// All generated images carry three channels.
pub const CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {MAGIC:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported container version {found}, expected {FORMAT_VERSION}")]
    UnsupportedVersion { found: u32 },
    #[error("container length mismatch: expected {expected} bytes, found {actual}")]
    LengthMismatch { expected: u64, actual: u64 },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("splits share a byte-identical sample; raise noise or change the seed")]
    DuplicateAcrossSplits,
    #[error("sample {index} stayed single-class after {attempts} re-rolls")]
    SingleClassSample { index: usize, attempts: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One image with per-pixel class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    /// `[CHANNELS, h, w]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `[h, w]` class ids below the dataset's class count.
    pub labels: LabelMap,
}

/// Samples plus the class count they were generated for.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub samples: Vec<SegSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    /// Background plus `num_classes - 1` shape classes.
    pub num_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub noise_stddev: f64,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn new(n_samples: usize, height: usize, width: usize, num_classes: usize) -> Self {
        DatasetConfig {
            n_samples,
            height,
            width,
            num_classes,
            shapes_min: 4,
            shapes_max: 7,
            noise_stddev: 0.08,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(DataError::InvalidConfig(format!(
                "num_classes must be in 2..=256, got {}",
                self.num_classes
            )));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(DataError::InvalidConfig(format!(
                "height and width must be divisible by 4 (two pool levels), got {}x{}",
                self.height, self.width
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(DataError::InvalidConfig(format!(
                "images must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.shapes_min < 1 || self.shapes_min > self.shapes_max {
            return Err(DataError::InvalidConfig(format!(
                "shape count range {}..={} is empty or zero",
                self.shapes_min, self.shapes_max
            )));
        }
        if !self.noise_stddev.is_finite() || self.noise_stddev < 0.0 {
            return Err(DataError::InvalidConfig(format!(
                "noise stddev must be finite and non-negative, got {}",
                self.noise_stddev
            )));
        }
        Ok(())
    }
}

/// Dataset split; each draws from its own derived seed (`seed`, `seed + 1`,
/// `seed + 2`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn seed_offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Fixed base color per class; class 0 is the dark background.
pub fn class_color(class: usize) -> [f64; 3] {
    if class == 0 {
        return [0.12, 0.12, 0.14];
    }
    let hue = (class as f64 * 0.618_033_988_75).fract();
    hsv_to_rgb(hue, 0.65, 0.85)
}

/// Paints one shape instance of `class` onto the label map.
fn draw_shape(labels: &mut [u8], h: usize, w: usize, class: usize, rng: &mut impl Rng) {
    let geometry = (class - 1) % 3;
    let min_dim = h.min(w);
    match geometry {
        0 => {
            // Axis-aligned rectangle.
            let sh = rng.random_range(min_dim / 8..=min_dim / 2).max(2);
            let sw = rng.random_range(min_dim / 8..=min_dim / 2).max(2);
            let y0 = rng.random_range(0..=h - sh.min(h));
            let x0 = rng.random_range(0..=w - sw.min(w));
            for y in y0..(y0 + sh).min(h) {
                for x in x0..(x0 + sw).min(w) {
                    labels[y * w + x] = class as u8;
                }
            }
        }
        1 => {
            // Filled circle, clipped at the borders.
            let r = rng.random_range(min_dim / 10..=min_dim / 4).max(2) as i64;
            let cy = rng.random_range(0..h) as i64;
            let cx = rng.random_range(0..w) as i64;
            let r2 = r * r;
            for y in (cy - r).max(0)..=(cy + r).min(h as i64 - 1) {
                for x in (cx - r).max(0)..=(cx + r).min(w as i64 - 1) {
                    let (dy, dx) = (y - cy, x - cx);
                    if dy * dy + dx * dx <= r2 {
                        labels[y as usize * w + x as usize] = class as u8;
                    }
                }
            }
        }
        _ => {
            // 45-degree diagonal stripe: x + y in [c, c + t).
            let t = rng.random_range((min_dim / 16).max(2)..=(min_dim / 6).max(3));
            let c = rng.random_range(0..h + w - t);
            for y in 0..h {
                for x in 0..w {
                    let d = x + y;
                    if d >= c && d < c + t {
                        labels[y * w + x] = class as u8;
                    }
                }
            }
        }
    }
}

/// Renders one sample from its per-sample RNG: shapes into the label map,
/// then base colors plus clipped Gaussian noise into the image.
fn render_sample(cfg: &DatasetConfig, rng: &mut impl Rng) -> SegSample {
    let (h, w, k) = (cfg.height, cfg.width, cfg.num_classes);
    let mut labels = vec![0u8; h * w];
    let count = rng.random_range(cfg.shapes_min..=cfg.shapes_max);
    for _ in 0..count {
        let class = rng.random_range(1..k);
        draw_shape(&mut labels, h, w, class, rng);
    }
    let mut image = vec![0.0 as Elem; CHANNELS * h * w];
    for c in 0..CHANNELS {
        for (p, &label) in labels.iter().enumerate() {
            let base = class_color(usize::from(label))[c];
            let noise: f64 = if cfg.noise_stddev > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                z * cfg.noise_stddev
            } else {
                0.0
            };
            image[c * h * w + p] = (base + noise).clamp(0.0, 1.0) as Elem;
        }
    }
    SegSample {
        image: Tensor::new(vec![CHANNELS, h, w], image).expect("finite by construction"),
        labels: LabelMap::new(vec![h, w], labels).expect("sized by construction"),
    }
}

fn distinct_classes(labels: &LabelMap) -> usize {
    let mut seen = [false; 256];
    for &l in labels.data() {
        seen[usize::from(l)] = true;
    }
    seen.iter().filter(|&&s| s).count()
}

/// Generates the configured number of samples, deterministic in
/// `cfg.seed`. A sample that comes out single-class is re-rolled from a
/// derived attempt seed.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    const MAX_ATTEMPTS: usize = 64;
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let sample_seed = derive_seed(cfg.seed, i as u64);
        let mut chosen = None;
        for attempt in 0..MAX_ATTEMPTS {
            let mut rng = rng_from(derive_seed(sample_seed, attempt as u64));
            let s = render_sample(cfg, &mut rng);
            if distinct_classes(&s.labels) >= 2 {
                chosen = Some(s);
                break;
            }
        }
        samples.push(chosen.ok_or(DataError::SingleClassSample {
            index: i,
            attempts: MAX_ATTEMPTS,
        })?);
    }
    Ok(Dataset {
        num_classes: cfg.num_classes,
        samples,
    })
}

/// Generates one split from its derived seed (`cfg.seed + offset`),
/// overriding the sample count.
pub fn generate_split(
    cfg: &DatasetConfig,
    split: Split,
    n_samples: usize,
) -> Result<Dataset, DataError> {
    let mut c = cfg.clone();
    c.seed = cfg.seed + split.seed_offset();
    c.n_samples = n_samples;
    generate_dataset(&c)
}

fn sample_fingerprint(s: &SegSample) -> u64 {
    let mut h = StreamHash::new();
    for &v in s.image.data() {
        h.update(f64::from(v).to_bits());
    }
    for &l in s.labels.data() {
        h.update(u64::from(l));
    }
    h.finish()
}

/// Train/val/test generation with disjoint derived seeds. Verifies that no
/// sample is byte-identical across splits.
pub fn generate_splits(cfg: &DatasetConfig, counts: [usize; 3]) -> Result<[Dataset; 3], DataError> {
    let train = generate_split(cfg, Split::Train, counts[0])?;
    let val = generate_split(cfg, Split::Val, counts[1])?;
    let test = generate_split(cfg, Split::Test, counts[2])?;
    let mut seen = HashSet::new();
    for ds in [&train, &val, &test] {
        for s in &ds.samples {
            if !seen.insert(sample_fingerprint(s)) {
                return Err(DataError::DuplicateAcrossSplits);
            }
        }
    }
    Ok([train, val, test])
}

impl Dataset {
    /// Total container size in bytes for given dimensions.
    pub fn container_size(n: usize, c: usize, h: usize, w: usize) -> u64 {
        HEADER_BYTES as u64 + (n as u64) * ((c * h * w * 4 + h * w) as u64)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let (c, h, w) = match self.samples.first() {
            Some(s) => {
                let shape = s.image.shape();
                (shape[0], shape[1], shape[2])
            }
            None => (0, 0, 0),
        };
        let n = self.samples.len();
        let mut bytes = Vec::with_capacity(Self::container_size(n, c, h, w) as usize);
        bytes.extend_from_slice(&MAGIC);
        for v in [
            FORMAT_VERSION,
            n as u32,
            c as u32,
            h as u32,
            w as u32,
            self.num_classes as u32,
        ] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.samples {
            for &v in s.image.data() {
                #[allow(clippy::unnecessary_cast)] // Elem -> f32 on the f64 build
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
            bytes.extend_from_slice(s.labels.data());
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
        let bytes = fs::read(path)?;
        if bytes.len() < HEADER_BYTES {
            return Err(DataError::LengthMismatch {
                expected: HEADER_BYTES as u64,
                actual: bytes.len() as u64,
            });
        }
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[0..4]);
        if magic != MAGIC {
            return Err(DataError::BadMagic { found: magic });
        }
        let u32_at = |off: usize| -> u32 {
            let mut b = [0u8; 4];
            b.copy_from_slice(&bytes[off..off + 4]);
            u32::from_le_bytes(b)
        };
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(DataError::UnsupportedVersion { found: version });
        }
        let n = u32_at(8) as usize;
        let c = u32_at(12) as usize;
        let h = u32_at(16) as usize;
        let w = u32_at(20) as usize;
        let k = u32_at(24) as usize;
        let expected = Self::container_size(n, c, h, w);
        if bytes.len() as u64 != expected {
            return Err(DataError::LengthMismatch {
                expected,
                actual: bytes.len() as u64,
            });
        }
        let image_elems = c * h * w;
        let sample_bytes = image_elems * 4 + h * w;
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let off = HEADER_BYTES + i * sample_bytes;
            let mut image = Vec::with_capacity(image_elems);
            for e in 0..image_elems {
                let mut b = [0u8; 4];
                b.copy_from_slice(&bytes[off + e * 4..off + e * 4 + 4]);
                image.push(f32::from_le_bytes(b) as Elem);
            }
            let labels = bytes[off + image_elems * 4..off + sample_bytes].to_vec();
            for &l in &labels {
                if usize::from(l) >= k {
                    return Err(DataError::LabelOutOfRange {
                        label: l,
                        classes: k,
                    });
                }
            }
            samples.push(SegSample {
                image: Tensor::new(vec![c, h, w], image)?,
                labels: LabelMap::new(vec![h, w], labels)?,
            });
        }
        Ok(Dataset {
            num_classes: k,
            samples,
        })
    }
}
