//! Differentiable augmentations applied with one shared parameter draw to
//! every image of a batch (and to the real and synthetic branches alike).

use condensegan_tensor::Tensor;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugKind {
    None,
    FlipH,
    CropShift,
    Scale,
    Rotate,
    Cutout,
    Brightness,
}

impl AugKind {
    pub const ALL: [AugKind; 7] = [
        AugKind::None,
        AugKind::FlipH,
        AugKind::CropShift,
        AugKind::Scale,
        AugKind::Rotate,
        AugKind::Cutout,
        AugKind::Brightness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugKind::None => "none",
            AugKind::FlipH => "flip-h",
            AugKind::CropShift => "crop-shift",
            AugKind::Scale => "scale",
            AugKind::Rotate => "rotate",
            AugKind::Cutout => "cutout",
            AugKind::Brightness => "brightness",
        }
    }

    pub fn parse(s: &str) -> Result<AugKind> {
        AugKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown augmentation {s}")))
    }
}

/// One concrete transform (ω).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Omega {
    None,
    FlipH,
    CropShift { dx: i32, dy: i32 },
    Scale { factor: f64 },
    Rotate { degrees: f64 },
    /// Box of side `side/4` centred on pixel `(cx, cy)`, clipped to the image.
    Cutout { cx: usize, cy: usize },
    Brightness { delta: f64 },
}

impl Omega {
    pub fn kind(&self) -> AugKind {
        match self {
            Omega::None => AugKind::None,
            Omega::FlipH => AugKind::FlipH,
            Omega::CropShift { .. } => AugKind::CropShift,
            Omega::Scale { .. } => AugKind::Scale,
            Omega::Rotate { .. } => AugKind::Rotate,
            Omega::Cutout { .. } => AugKind::Cutout,
            Omega::Brightness { .. } => AugKind::Brightness,
        }
    }
}

/// Enabled operations and their parameter ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub ops: Vec<AugKind>,
    pub shift_px: i32,
    pub scale: (f64, f64),
    pub rotate_deg: f64,
    pub brightness: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            ops: AugKind::ALL[1..].to_vec(),
            shift_px: 2,
            scale: (0.8, 1.2),
            rotate_deg: 15.0,
            brightness: 0.3,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ops.is_empty() {
            return Err(CoreError::Config("augment.ops must not be empty".into()));
        }
        if self.shift_px < 0 || self.scale.0 <= 0.0 || self.scale.0 > self.scale.1 || self.rotate_deg < 0.0 || self.brightness < 0.0 {
            return Err(CoreError::Config("augmentation ranges are inconsistent".into()));
        }
        Ok(())
    }
}

/// Uniform op from the enabled set, then uniform parameters within range.
/// `side` is the image side length, used for cutout placement.
pub fn sample_omega(cfg: &AugmentConfig, side: usize, rng: &mut Rng) -> Omega {
    let kind = cfg.ops[rng.gen_range(0..cfg.ops.len())];
    match kind {
        AugKind::None => Omega::None,
        AugKind::FlipH => Omega::FlipH,
        AugKind::CropShift => Omega::CropShift {
            dx: rng.gen_range(-cfg.shift_px..=cfg.shift_px),
            dy: rng.gen_range(-cfg.shift_px..=cfg.shift_px),
        },
        AugKind::Scale => Omega::Scale {
            factor: rng.gen_range(cfg.scale.0..=cfg.scale.1),
        },
        AugKind::Rotate => Omega::Rotate {
            degrees: rng.gen_range(-cfg.rotate_deg..=cfg.rotate_deg),
        },
        AugKind::Cutout => Omega::Cutout {
            cx: rng.gen_range(0..side.max(1)),
            cy: rng.gen_range(0..side.max(1)),
        },
        AugKind::Brightness => Omega::Brightness {
            delta: rng.gen_range(-cfg.brightness..=cfg.brightness),
        },
    }
}

/// Sampling grid `[H, W, 2]` of source (x, y) pixel coordinates.
fn grid(h: usize, w: usize, src: impl Fn(f64, f64) -> (f64, f64)) -> Result<Tensor> {
    let mut v = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = src(x as f64, y as f64);
            v.push(sx);
            v.push(sy);
        }
    }
    Ok(Tensor::from_f64(v, &[h, w, 2])?)
}

/// Half-open pixel range `[lo, hi)` covered by the cutout box along one axis.
pub fn cutout_span(center: usize, side: usize) -> (usize, usize) {
    let size = (side / 4).max(1);
    let lo = center.saturating_sub(size / 2);
    (lo.min(side), (lo + size).min(side))
}

fn cutout_mask(h: usize, w: usize, c: usize, cx: usize, cy: usize) -> Vec<f64> {
    let (x0, x1) = cutout_span(cx, w);
    let (y0, y1) = cutout_span(cy, h);
    let mut m = vec![1.0; h * w * c];
    for y in y0..y1 {
        for x in x0..x1 {
            for ch in 0..c {
                m[(y * w + x) * c + ch] = 0.0;
            }
        }
    }
    m
}

/// Applies ω identically to every image of an `[N, H, W, C]` batch.
pub fn apply(images: &Tensor, omega: &Omega) -> Result<Tensor> {
    let (h, w, c) = match images.shape() {
        &[_, h, w, c] => (h, w, c),
        s => return Err(invalid(format!("augment: expected NHWC images, got {s:?}"))),
    };
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let warp = |g: Tensor| -> Result<Tensor> { Ok(images.grid_sample(&g.to_dtype(images.dtype()))?) };
    match *omega {
        Omega::None => Ok(images.clone()),
        Omega::FlipH => warp(grid(h, w, |x, y| (w as f64 - 1.0 - x, y))?),
        Omega::CropShift { dx, dy } => warp(grid(h, w, |x, y| (x - dx as f64, y - dy as f64))?),
        Omega::Scale { factor } => warp(grid(h, w, |x, y| (cx + (x - cx) / factor, cy + (y - cy) / factor))?),
        Omega::Rotate { degrees } => {
            let (s, co) = degrees.to_radians().sin_cos();
            warp(grid(h, w, |x, y| {
                let (px, py) = (x - cx, y - cy);
                (cx + co * px + s * py, cy - s * px + co * py)
            })?)
        }
        Omega::Cutout { cx, cy } => {
            let mask = Tensor::from_values(&cutout_mask(h, w, c, cx, cy), &[h, w, c], images.dtype())?;
            Ok(images.mul(&mask)?)
        }
        Omega::Brightness { delta } => Ok(images.add_scalar(delta)?),
    }
}

/// The same ω applied to the real and the synthetic batch.
pub fn siamese_apply(real: &Tensor, synth: &Tensor, omega: &Omega) -> Result<(Tensor, Tensor)> {
    if real.rank() != 4 || synth.rank() != 4 || real.shape()[1..] != synth.shape()[1..] {
        return Err(invalid(format!(
            "siamese_apply: image shapes differ ({:?} vs {:?})",
            real.shape(),
            synth.shape()
        )));
    }
    Ok((apply(real, omega)?, apply(synth, omega)?))
}
