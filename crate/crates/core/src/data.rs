//! Procedural shape dataset, the on-disk dataset format, splits and per-class
//! batch sampling.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use condensegan_tensor::Tensor;
use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::io::{usize_from, Reader};
use crate::models::ImageSpec;
use crate::rng::{self, Rng};

pub const DATASET_MAGIC: &[u8; 4] = b"ITGD";
pub const DATASET_VERSION: u32 = 1;

pub const SHAPE_FAMILIES: [&str; 10] = [
    "bar-h", "bar-v", "cross", "disk", "ring", "square", "triangle", "diagonal", "checker", "dot-pair",
];

/// Pixel noise standard deviation in the [0, 1] intensity domain.
pub const PIXEL_NOISE: f64 = 0.05;

/// u8 pixel → [-1, 1].
pub fn normalize(p: u8) -> f32 {
    (p as f64 / 127.5 - 1.0) as f32
}

/// [-1, 1] → nearest u8, clamped.
pub fn quantize(v: f32) -> u8 {
    (127.5 * (v as f64 + 1.0)).round().clamp(0.0, 255.0) as u8
}

/// Labeled images stored as bytes, channel-last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub labels: Vec<u32>,
    pub pixels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn spec(&self) -> ImageSpec {
        ImageSpec {
            height: self.height,
            width: self.width,
            channels: self.channels,
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y as usize] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.len() * self.image_len() {
            return Err(invalid("pixel buffer does not match image count"));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y as usize >= self.classes) {
            return Err(invalid(format!("label {bad} >= class count {}", self.classes)));
        }
        Ok(())
    }

    /// Rows of `indices` in dataset order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let len = self.image_len();
        let mut pixels = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            pixels.extend_from_slice(&self.pixels[i * len..(i + 1) * len]);
        }
        Dataset {
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            pixels,
            ..*self
        }
    }

    /// Stratified 80/10/10 split. Within each class the first 80% of its
    /// items (in dataset order) go to train, the next 10% to validation and
    /// the rest to test.
    pub fn split(&self) -> Splits {
        let mut parts: [Vec<usize>; 3] = Default::default();
        for c in 0..self.classes {
            let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] as usize == c).collect();
            let n = idx.len();
            let n_train = (n * 8).div_ceil(10);
            let n_val = ((n - n_train) + 1) / 2;
            parts[0].extend_from_slice(&idx[..n_train]);
            parts[1].extend_from_slice(&idx[n_train..n_train + n_val]);
            parts[2].extend_from_slice(&idx[n_train + n_val..]);
        }
        for p in parts.iter_mut() {
            p.sort_unstable();
        }
        Splits {
            train: self.subset(&parts[0]),
            val: self.subset(&parts[1]),
            test: self.subset(&parts[2]),
        }
    }

    pub fn to_image_set(&self) -> Result<ImageSet> {
        let values: Vec<f32> = self.pixels.iter().map(|&p| normalize(p)).collect();
        Ok(ImageSet {
            images: Tensor::from_vec(values, &[self.len(), self.height, self.width, self.channels])?,
            labels: self.labels.iter().map(|&y| y as usize).collect(),
            spec: self.spec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 4 * self.len() + self.pixels.len());
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for d in [self.height, self.width, self.channels, self.classes] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &y in &self.labels {
            out.extend_from_slice(&y.to_le_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = Reader::new(bytes, "dataset file");
        r.magic(DATASET_MAGIC)?;
        r.version(DATASET_VERSION)?;
        let n = usize_from(r.u64()?, "dataset file")?;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let channels = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let mut labels = Vec::with_capacity(n.min(bytes.len() / 4));
        for _ in 0..n {
            let y = r.u32()?;
            if y as usize >= classes {
                return Err(r.format(format!("label {y} >= class count {classes}")));
            }
            labels.push(y);
        }
        let len = n
            .checked_mul(height * width * channels)
            .ok_or_else(|| r.format("pixel count overflow"))?;
        let pixels = r.bytes(len)?.to_vec();
        r.finish()?;
        Ok(Dataset { height, width, channels, classes, labels, pixels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Dataset::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Float images in `[-1, 1]` with integer labels; the form every training
/// loop consumes.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub spec: ImageSpec,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_indices(&self, c: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == c).collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        Ok(self.images.index_select(indices)?)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<ImageSet> {
        Ok(ImageSet {
            images: self.batch(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            spec: self.spec,
        })
    }

    /// Rounds to the byte format.
    pub fn quantize(&self) -> Dataset {
        Dataset {
            height: self.spec.height,
            width: self.spec.width,
            channels: self.spec.channels,
            classes: self.spec.classes,
            labels: self.labels.iter().map(|&y| y as u32).collect(),
            pixels: self.images.to_f32_vec().into_iter().map(quantize).collect(),
        }
    }
}

/// Ranges of the per-image nuisance parameters of [`gen_shapes`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeStyle {
    /// Shape radius in pixels, as a fraction of the image side.
    pub scale: (f64, f64),
    /// Maximum offset of the shape center from the image center, as a
    /// fraction of the side.
    pub jitter: f64,
    /// Background intensity in [0, 1].
    pub background: (f64, f64),
    /// Foreground minus background intensity; the sign is drawn at random
    /// when `polarity` is set.
    pub contrast: (f64, f64),
    pub polarity: bool,
    /// Maximum in-plane rotation in degrees.
    pub rotate_deg: f64,
}

impl Default for ShapeStyle {
    fn default() -> Self {
        ShapeStyle {
            scale: (0.15, 0.45),
            jitter: 0.15,
            background: (0.1, 0.6),
            contrast: (0.1, 0.35),
            polarity: false,
            rotate_deg: 20.0,
        }
    }
}

/// Membership test of each family in shape coordinates, where the shape
/// fills roughly the unit disk.
fn inside(family: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    match family {
        0 => av < 0.28 && au < 1.0,
        1 => au < 0.28 && av < 1.0,
        2 => (au < 0.22 && av < 1.0) || (av < 0.22 && au < 1.0),
        3 => u * u + v * v < 0.85,
        4 => {
            let r2 = u * u + v * v;
            (0.36..1.0).contains(&r2)
        }
        5 => au < 0.75 && av < 0.75,
        6 => v > -0.8 && v < 0.8 && au < 0.95 * (v + 0.8) / 1.6,
        7 => (u - v).abs() < 0.4 && au < 0.9 && av < 0.9,
        8 => au < 1.0 && av < 1.0 && (((u + 1.0) * 2.0).floor() as i64 + ((v + 1.0) * 2.0).floor() as i64) % 2 == 0,
        9 => {
            let d = |cx: f64| (u - cx) * (u - cx) + v * v < 0.12;
            d(-0.6) || d(0.6)
        }
        _ => unreachable!("family index checked by caller"),
    }
}

const SUPERSAMPLE: usize = 4;

fn render(family: usize, side: usize, style: &ShapeStyle, rng: &mut Rng, noise: &Normal<f64>) -> Vec<u8> {
    let s = side as f64;
    let radius = rng.gen_range(style.scale.0..=style.scale.1) * s;
    let center = (s - 1.0) / 2.0;
    let cx = center + rng.gen_range(-style.jitter..=style.jitter) * s;
    let cy = center + rng.gen_range(-style.jitter..=style.jitter) * s;
    let angle = rng.gen_range(-style.rotate_deg..=style.rotate_deg) * PI / 180.0;
    let bg = rng.gen_range(style.background.0..=style.background.1);
    let mut contrast = rng.gen_range(style.contrast.0..=style.contrast.1);
    if style.polarity && rng.gen_bool(0.5) {
        contrast = -contrast;
    }
    let (sin, cos) = angle.sin_cos();
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5 - cx;
                    let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5 - cy;
                    let u = (cos * px + sin * py) / radius;
                    let v = (-sin * px + cos * py) / radius;
                    hits += inside(family, u, v) as usize;
                }
            }
            let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let value = bg + contrast * cover + noise.sample(rng);
            out.push((value.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Seeded procedural dataset of `classes` shape families, `per_class` images
/// each, in a seeded random order.
pub fn gen_shapes(classes: usize, per_class: usize, side: usize, channels: usize, style: &ShapeStyle, seed: u64) -> Result<Dataset> {
    if classes == 0 || classes > SHAPE_FAMILIES.len() {
        return Err(CoreError::Config(format!(
            "gen_shapes supports 1..={} classes, got {classes}",
            SHAPE_FAMILIES.len()
        )));
    }
    if per_class == 0 || side == 0 || channels == 0 {
        return Err(CoreError::Config("gen_shapes needs per_class, side and channels >= 1".into()));
    }
    let n = classes * per_class;
    let mut order_rng = rng::stream(seed, 21);
    let order = index::sample(&mut order_rng, n, n).into_vec();
    let mut rng = rng::stream(seed, 22);
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid sigma");
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * side * side * channels);
    for &slot in &order {
        let family = slot % classes;
        labels.push(family as u32);
        let planes: Vec<Vec<u8>> = (0..channels).map(|_| render(family, side, style, &mut rng, &noise)).collect();
        for p in 0..side * side {
            for plane in &planes {
                pixels.push(plane[p]);
            }
        }
    }
    Ok(Dataset {
        height: side,
        width: side,
        channels,
        classes,
        labels,
        pixels,
    })
}

/// Uniform draw of `k` distinct entries of `pool`; when the pool is smaller
/// than `k` the draw falls back to sampling with replacement and the flag is
/// set.
pub fn sample_from(pool: &[usize], k: usize, rng: &mut Rng) -> Result<(Vec<usize>, bool)> {
    if pool.is_empty() {
        return Err(invalid("cannot sample from an empty class"));
    }
    if k <= pool.len() {
        let picks = index::sample(rng, pool.len(), k);
        Ok((picks.into_iter().map(|i| pool[i]).collect(), false))
    } else {
        Ok(((0..k).map(|_| pool[rng.gen_range(0..pool.len())]).collect(), true))
    }
}

/// Per-class index lists with an owned random stream.
#[derive(Debug, Clone)]
pub struct ClassBatchSampler {
    per_class: Vec<Vec<usize>>,
    rng: Rng,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassBatches {
    pub small: Vec<usize>,
    pub large: Vec<usize>,
    /// Set when either draw needed replacement.
    pub with_replacement: bool,
}

impl ClassBatchSampler {
    pub fn new(labels: &[usize], classes: usize, seed: u64) -> ClassBatchSampler {
        let mut per_class = vec![Vec::new(); classes];
        for (i, &y) in labels.iter().enumerate() {
            per_class[y].push(i);
        }
        ClassBatchSampler {
            per_class,
            rng: rng::stream(seed, 23),
        }
    }

    pub fn class_len(&self, c: usize) -> usize {
        self.per_class.get(c).map_or(0, Vec::len)
    }

    /// Independent draws of `b` and `b_large` indices of class `c`.
    pub fn sample(&mut self, c: usize, b: usize, b_large: usize) -> Result<ClassBatches> {
        let pool = self
            .per_class
            .get(c)
            .ok_or_else(|| invalid(format!("class {c} out of range")))?;
        let (small, f1) = sample_from(pool, b, &mut self.rng)?;
        let (large, f2) = sample_from(pool, b_large, &mut self.rng)?;
        Ok(ClassBatches { small, large, with_replacement: f1 || f2 })
    }
}
