//! Latent sets and their initialization by optimization-based GAN inversion.

use std::io::Write;
use std::path::Path;

use condensegan_tensor::{grad, no_grad, OptimizerState, Tensor, TensorError};
use serde::{Deserialize, Serialize};

use crate::data::{sample_from, ImageSet};
use crate::error::{invalid, CoreError, Result};
use crate::io::{usize_from, Reader};
use crate::models::{Embedder, Generator};
use crate::rng::{self, Rng};

pub const LATENT_MAGIC: &[u8; 4] = b"ITGZ";
pub const LATENT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Random,
    Inverted,
    Condensed,
}

impl Provenance {
    pub fn tag(self) -> u8 {
        match self {
            Provenance::Random => 0,
            Provenance::Inverted => 1,
            Provenance::Condensed => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Provenance> {
        match tag {
            0 => Some(Provenance::Random),
            1 => Some(Provenance::Inverted),
            2 => Some(Provenance::Condensed),
            _ => None,
        }
    }
}

/// Latent vectors with labels and the index of the real training image each
/// one is paired with.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSet {
    pub classes: usize,
    pub d_z: usize,
    pub provenance: Provenance,
    pub labels: Vec<u32>,
    pub correspondence: Vec<u64>,
    /// Row-major `[N, d_z]`.
    pub z: Vec<f32>,
}

impl LatentSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&y| y as usize).collect()
    }

    pub fn pairs(&self) -> Vec<usize> {
        self.correspondence.iter().map(|&i| i as usize).collect()
    }

    pub fn class_indices(&self, c: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] as usize == c).collect()
    }

    pub fn tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.z.clone(), &[self.len(), self.d_z])?)
    }

    /// Checks labels, finiteness and the pairing against `reals`.
    pub fn validate(&self, reals: Option<&ImageSet>) -> Result<()> {
        if self.z.len() != self.len() * self.d_z || self.correspondence.len() != self.len() {
            return Err(invalid("latent set buffers have inconsistent lengths"));
        }
        if self.labels.iter().any(|&y| y as usize >= self.classes) {
            return Err(invalid("latent label out of range"));
        }
        if self.z.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numeric("latent set holds non-finite values".into()));
        }
        let mut seen = self.correspondence.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("correspondence indices are not unique"));
        }
        if let Some(reals) = reals {
            if self.len() > reals.len() {
                return Err(invalid("more latents than real images"));
            }
            for (i, &j) in self.correspondence.iter().enumerate() {
                let j = j as usize;
                if j >= reals.len() || reals.labels[j] != self.labels[i] as usize {
                    return Err(invalid(format!("latent {i} is not paired with a real image of its class")));
                }
            }
        }
        Ok(())
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> LatentSet {
        let mut z = Vec::with_capacity(indices.len() * self.d_z);
        for &i in indices {
            z.extend_from_slice(&self.z[i * self.d_z..(i + 1) * self.d_z]);
        }
        LatentSet {
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            correspondence: indices.iter().map(|&i| self.correspondence[i]).collect(),
            z,
            ..*self
        }
    }

    pub fn concat(parts: &[LatentSet]) -> Result<LatentSet> {
        let first = parts.first().ok_or_else(|| invalid("nothing to concatenate"))?;
        let mut out = LatentSet {
            labels: Vec::new(),
            correspondence: Vec::new(),
            z: Vec::new(),
            ..*first
        };
        for p in parts {
            if p.d_z != first.d_z || p.classes != first.classes {
                return Err(invalid("latent sets disagree on d_z or class count"));
            }
            out.labels.extend_from_slice(&p.labels);
            out.correspondence.extend_from_slice(&p.correspondence);
            out.z.extend_from_slice(&p.z);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(29 + self.len() * (12 + 4 * self.d_z));
        out.extend_from_slice(LATENT_MAGIC);
        out.extend_from_slice(&LATENT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.d_z as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.push(self.provenance.tag());
        for &y in &self.labels {
            out.extend_from_slice(&y.to_le_bytes());
        }
        for &c in &self.correspondence {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for &v in &self.z {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<LatentSet> {
        let mut r = Reader::new(bytes, "latent file");
        r.magic(LATENT_MAGIC)?;
        r.version(LATENT_VERSION)?;
        let classes = r.u32()? as usize;
        let d_z = r.u32()? as usize;
        let n = usize_from(r.u64()?, "latent file")?;
        let tag = r.u8()?;
        let provenance = Provenance::from_tag(tag).ok_or_else(|| r.format(format!("unknown provenance tag {tag}")))?;
        let mut labels = Vec::with_capacity(n.min(bytes.len() / 4));
        for _ in 0..n {
            let y = r.u32()?;
            if y as usize >= classes {
                return Err(r.format(format!("label {y} >= class count {classes}")));
            }
            labels.push(y);
        }
        let mut correspondence = Vec::with_capacity(n.min(bytes.len() / 8));
        for _ in 0..n {
            correspondence.push(r.u64()?);
        }
        let z = r.f32_vec(n.checked_mul(d_z).ok_or_else(|| r.format("size overflow"))?)?;
        r.finish()?;
        Ok(LatentSet { classes, d_z, provenance, labels, correspondence, z })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<LatentSet> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        LatentSet::from_bytes(&bytes)
    }
}

/// Seeded per-class choice of `per_class` real images (all of them when
/// `None`), class-major and ascending within a class.
pub fn select_reals(reals: &ImageSet, per_class: Option<usize>, seed: u64) -> Result<Vec<usize>> {
    let mut rng = rng::stream(seed, 51);
    let mut out = Vec::new();
    for c in 0..reals.spec.classes {
        let pool = reals.class_indices(c);
        let mut picked = match per_class {
            None => pool,
            Some(k) if k <= pool.len() => sample_from(&pool, k, &mut rng)?.0,
            Some(k) => {
                return Err(CoreError::Config(format!(
                    "class {c} has {} images, fewer than the {k} latents requested",
                    pool.len()
                )))
            }
        };
        picked.sort_unstable();
        out.extend(picked);
    }
    Ok(out)
}

/// Latents drawn from N(0, I), paired with a seeded choice of real images.
pub fn random_latents(reals: &ImageSet, d_z: usize, per_class: Option<usize>, seed: u64) -> Result<LatentSet> {
    let picked = select_reals(reals, per_class, seed)?;
    let mut rng = rng::stream(seed, 52);
    Ok(LatentSet {
        classes: reals.spec.classes,
        d_z,
        provenance: Provenance::Random,
        labels: picked.iter().map(|&i| reals.labels[i] as u32).collect(),
        correspondence: picked.iter().map(|&i| i as u64).collect(),
        z: rng::normal_vec(&mut rng, picked.len() * d_z),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f64,
    pub lambda_pixel: f64,
    pub restarts: usize,
    /// Images inverted jointly; objectives stay per image.
    pub batch: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            steps: 400,
            lr: 0.05,
            lambda_pixel: 1.0,
            restarts: 2,
            batch: 64,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.restarts == 0 || self.batch == 0 {
            return Err(CoreError::Config("inversion steps, restarts and batch must be >= 1".into()));
        }
        if !(self.lambda_pixel >= 0.0) || !(self.lr > 0.0) {
            return Err(CoreError::Config("inversion needs lambda_pixel >= 0 and lr > 0".into()));
        }
        Ok(())
    }
}

/// Per-image `(1/d_f)‖ψ(G(z)) − ψ(x)‖² + (λ/d_I)‖G(z) − x‖²` as `[N]`, given
/// precomputed real features `[N, d_f]`.
pub fn objective_per_image(
    gen: &Generator,
    psi: &Embedder,
    z: &Tensor,
    labels: &[usize],
    x: &Tensor,
    x_features: &Tensor,
    lambda_pixel: f64,
) -> Result<Tensor> {
    let g = gen.generate(z, labels)?;
    reconstruction_error(&psi.embed(&g)?, x_features, &g, x, lambda_pixel)
}

/// The per-image objective from its parts: features `[N, d_f]` and images
/// with a leading batch axis.
pub fn reconstruction_error(g_features: &Tensor, x_features: &Tensor, g: &Tensor, x: &Tensor, lambda_pixel: f64) -> Result<Tensor> {
    let n = g.dim(0);
    if g.shape() != x.shape() || g_features.shape() != x_features.shape() || g_features.dim(0) != n {
        return Err(invalid("inversion objective: generated and real inputs disagree in shape"));
    }
    let d_f = x_features.dim(1) as f64;
    let d_i = (x.numel() / n.max(1)) as f64;
    let feat = g_features.sub(x_features)?.square()?.sum_axes(&[1], false)?.scale(1.0 / d_f)?;
    if lambda_pixel == 0.0 {
        return Ok(feat);
    }
    let pix = g.sub(x)?.reshape(&[n, d_i as usize])?.square()?.sum_axes(&[1], false)?;
    Ok(feat.add(&pix.scale(lambda_pixel / d_i)?)?)
}

/// Mean of [`objective_per_image`] over the batch.
pub fn inversion_objective(gen: &Generator, psi: &Embedder, z: &Tensor, labels: &[usize], x: &Tensor, lambda_pixel: f64) -> Result<Tensor> {
    let feats = no_grad(|| psi.embed(x))?;
    Ok(objective_per_image(gen, psi, z, labels, x, &feats, lambda_pixel)?.mean()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    /// Best latents `[N, d_z]`, row-major.
    pub z: Vec<f32>,
    pub initial: Vec<f64>,
    pub best: Vec<f64>,
    /// Set for images whose optimization hit a non-finite value.
    pub diverged: Vec<bool>,
}

/// Adam descent on the latents of a batch from each initialization in
/// `inits`, keeping the best objective seen per image.
pub fn invert_from(gen: &Generator, psi: &Embedder, x: &Tensor, labels: &[usize], inits: &[Tensor], cfg: &InversionConfig) -> Result<InversionResult> {
    cfg.validate()?;
    let n = labels.len();
    let d_z = gen.d_z;
    let feats = no_grad(|| psi.embed(x))?;
    let mut best_z = vec![0f32; n * d_z];
    let mut best = vec![f64::INFINITY; n];
    let mut initial = vec![f64::NAN; n];
    let mut diverged = vec![false; n];
    for (r, init) in inits.iter().enumerate() {
        if init.shape() != [n, d_z] {
            return Err(invalid(format!("inversion init must be [{n}, {d_z}]")));
        }
        let mut z = init.requires_grad();
        let mut opt = OptimizerState::adam(cfg.lr);
        for step in 0..=cfg.steps {
            let obj = match objective_per_image(gen, psi, &z, labels, x, &feats, cfg.lambda_pixel) {
                Ok(o) => o,
                Err(CoreError::Tensor(TensorError::NonFinite { .. })) => {
                    diverged.iter_mut().for_each(|d| *d = true);
                    break;
                }
                Err(e) => return Err(e),
            };
            let values = obj.to_f64_vec();
            let zv = z.to_f32_vec();
            for i in 0..n {
                if r == 0 && step == 0 {
                    initial[i] = values[i];
                }
                if values[i] < best[i] {
                    best[i] = values[i];
                    best_z[i * d_z..(i + 1) * d_z].copy_from_slice(&zv[i * d_z..(i + 1) * d_z]);
                }
            }
            if step == cfg.steps {
                break;
            }
            let g = grad(&obj.sum()?, &[&z], false)?;
            let mut params = [z];
            if opt.adam_step(&mut params, &g).is_err() {
                diverged.iter_mut().for_each(|d| *d = true);
                break;
            }
            let [next] = params;
            z = next;
        }
    }
    if best.iter().any(|b| !b.is_finite()) {
        return Err(CoreError::Numeric("inversion produced no finite iterate".into()));
    }
    Ok(InversionResult { z: best_z, initial, best, diverged })
}

fn normal_init(rng: &mut Rng, n: usize, d_z: usize) -> Result<Tensor> {
    Ok(Tensor::from_vec(rng::normal_vec(rng, n * d_z), &[n, d_z])?)
}

/// Inverts one image: `cfg.restarts` random starts, best objective kept.
pub fn invert_one(gen: &Generator, psi: &Embedder, x: &Tensor, label: usize, cfg: &InversionConfig, rng: &mut Rng) -> Result<(Vec<f32>, f64)> {
    let inits: Vec<Tensor> = (0..cfg.restarts).map(|_| normal_init(rng, 1, gen.d_z)).collect::<Result<_>>()?;
    let res = invert_from(gen, psi, x, &[label], &inits, cfg)?;
    Ok((res.z, res.best[0]))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InversionSummary {
    pub initial: Vec<f64>,
    pub best: Vec<f64>,
    pub diverged: usize,
}

impl InversionSummary {
    pub fn median(values: &[f64]) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        match v.len() {
            0 => f64::NAN,
            n if n % 2 == 1 => v[n / 2],
            n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
        }
    }
}

/// One inverted latent per selected real image, class by class in batches.
pub fn invert_all(gen: &Generator, psi: &Embedder, reals: &ImageSet, per_class: Option<usize>, cfg: &InversionConfig, seed: u64) -> Result<(LatentSet, InversionSummary)> {
    cfg.validate()?;
    let picked = select_reals(reals, per_class, seed)?;
    let mut set = LatentSet {
        classes: reals.spec.classes,
        d_z: gen.d_z,
        provenance: Provenance::Inverted,
        labels: Vec::with_capacity(picked.len()),
        correspondence: Vec::with_capacity(picked.len()),
        z: Vec::with_capacity(picked.len() * gen.d_z),
    };
    let mut summary = InversionSummary::default();
    for c in 0..reals.spec.classes {
        let of_class: Vec<usize> = picked.iter().copied().filter(|&i| reals.labels[i] == c).collect();
        for (b, chunk) in of_class.chunks(cfg.batch).enumerate() {
            let mut rng = rng::stream(rng::derive(seed, c as u64), 53 + b as u64);
            let labels = vec![c; chunk.len()];
            let x = reals.batch(chunk)?;
            let inits: Vec<Tensor> = (0..cfg.restarts).map(|_| normal_init(&mut rng, chunk.len(), gen.d_z)).collect::<Result<_>>()?;
            let res = invert_from(gen, psi, &x, &labels, &inits, cfg)?;
            set.labels.extend(chunk.iter().map(|_| c as u32));
            set.correspondence.extend(chunk.iter().map(|&i| i as u64));
            set.z.extend_from_slice(&res.z);
            summary.initial.extend_from_slice(&res.initial);
            summary.best.extend_from_slice(&res.best);
            summary.diverged += res.diverged.iter().filter(|&&d| d).count();
        }
    }
    Ok((set, summary))
}
