use condensegan_tensor::{nn, no_grad, DType, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::weights::ModelWeights;
use crate::error::{invalid, CoreError, Result};
use crate::rng::{self, Rng};

const LEAK: f64 = 0.2;

fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
    Ok(Tensor::from_vec(v, shape)?)
}

/// Kaiming-uniform weights for a layer with `fan_in` inputs feeding a ReLU.
fn kaiming(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    uniform(rng, shape, (6.0 / fan_in as f64).sqrt())
}

fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape, DType::F32)
}

fn ones(shape: &[usize]) -> Tensor {
    Tensor::ones(shape, DType::F32)
}

fn conv_layer(w: &mut ModelWeights, rng: &mut Rng, name: &str, kernel: usize, cin: usize, cout: usize) -> Result<()> {
    let fan_in = kernel * kernel * cin;
    w.insert(format!("{name}.weight"), kaiming(rng, &[fan_in, cout], fan_in)?)?;
    w.insert(format!("{name}.bias"), zeros(&[cout]))
}

fn norm_layer(w: &mut ModelWeights, name: &str, c: usize) -> Result<()> {
    w.insert(format!("{name}.weight"), ones(&[c]))?;
    w.insert(format!("{name}.bias"), zeros(&[c]))
}

fn linear_layer(w: &mut ModelWeights, rng: &mut Rng, name: &str, fan_in: usize, out: usize) -> Result<()> {
    w.insert(format!("{name}.weight"), kaiming(rng, &[fan_in, out], fan_in)?)?;
    w.insert(format!("{name}.bias"), zeros(&[out]))
}

fn conv(w: &ModelWeights, name: &str, x: &Tensor, kernel: usize, stride: usize, pad: usize) -> Result<Tensor> {
    Ok(nn::conv2d(
        x,
        w.get(&format!("{name}.weight"))?,
        Some(w.get(&format!("{name}.bias"))?),
        kernel,
        stride,
        pad,
    )?)
}

fn inorm(w: &ModelWeights, name: &str, x: &Tensor) -> Result<Tensor> {
    let y = nn::instance_norm(x)?;
    Ok(nn::affine(&y, w.get(&format!("{name}.weight"))?, w.get(&format!("{name}.bias"))?)?)
}

fn dense(w: &ModelWeights, name: &str, x: &Tensor) -> Result<Tensor> {
    Ok(nn::linear(x, w.get(&format!("{name}.weight"))?, Some(w.get(&format!("{name}.bias"))?))?)
}

fn check_images(images: &Tensor, h: usize, w: usize, c: usize, what: &str) -> Result<()> {
    match images.shape() {
        &[_, ih, iw, ic] if ih == h && iw == w && ic == c => Ok(()),
        s => Err(invalid(format!("{what}: expected [N, {h}, {w}, {c}] images, got {s:?}"))),
    }
}

/// Three conv → instance-norm → relu → avg-pool blocks; the flattened final
/// map is the embedding.
#[derive(Debug, Clone)]
pub struct Embedder {
    pub weights: ModelWeights,
    pub channels: usize,
    pub width: usize,
}

pub const EMBEDDER_BLOCKS: usize = 3;

impl Embedder {
    pub fn init_random(channels: usize, width: usize, seed: u64) -> Result<Embedder> {
        let mut rng = rng::stream(seed, 11);
        let mut w = ModelWeights::new();
        Embedder::push_weights(&mut w, &mut rng, channels, width)?;
        Ok(Embedder { weights: w, channels, width })
    }

    fn push_weights(w: &mut ModelWeights, rng: &mut Rng, channels: usize, width: usize) -> Result<()> {
        let mut cin = channels;
        for b in 0..EMBEDDER_BLOCKS {
            conv_layer(w, rng, &format!("block{b}.conv"), 3, cin, width)?;
            norm_layer(w, &format!("block{b}.norm"), width)?;
            cin = width;
        }
        Ok(())
    }

    pub fn from_weights(weights: ModelWeights) -> Result<Embedder> {
        let first = weights.get("block0.conv.weight")?;
        let width = first.dim(1);
        let channels = first.dim(0) / 9;
        Ok(Embedder { weights, channels, width })
    }

    pub fn feature_dim(&self, height: usize, width: usize) -> usize {
        (height >> EMBEDDER_BLOCKS) * (width >> EMBEDDER_BLOCKS) * self.width
    }

    /// Final pooled feature map `[N, H/8, W/8, width]`.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        embedder_features(&self.weights, images, self.channels)
    }

    /// `[N, d_f]` embeddings; differentiable in the images.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.features(images)?.flatten_rows()?)
    }
}

fn embedder_features(w: &ModelWeights, images: &Tensor, channels: usize) -> Result<Tensor> {
    let (h, wd) = match images.shape() {
        &[_, h, w, c] if c == channels => (h, w),
        s => return Err(invalid(format!("embed: expected [N, H, W, {channels}] images, got {s:?}"))),
    };
    let factor = 1 << EMBEDDER_BLOCKS;
    if h % factor != 0 || wd % factor != 0 || h == 0 || wd == 0 {
        return Err(invalid(format!("embed: spatial size {h}x{wd} not divisible by {factor}")));
    }
    let mut x = images.clone();
    for b in 0..EMBEDDER_BLOCKS {
        x = conv(w, &format!("block{b}.conv"), &x, 3, 1, 1)?;
        x = inorm(w, &format!("block{b}.norm"), &x)?.relu()?.avg_pool2()?;
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    ConvNet,
    VggIsh,
    ResNetIsh,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::ConvNet => "convnet",
            Arch::VggIsh => "vggish",
            Arch::ResNetIsh => "resnetish",
        }
    }

    pub fn parse(s: &str) -> Result<Arch> {
        match s {
            "convnet" => Ok(Arch::ConvNet),
            "vggish" => Ok(Arch::VggIsh),
            "resnetish" => Ok(Arch::ResNetIsh),
            other => Err(CoreError::Config(format!("unknown architecture {other}"))),
        }
    }
}

/// Image shape and class count shared by every network in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
}

/// Evaluation classifier. The convnet variant is an [`Embedder`] plus a
/// linear head and shares its weight names.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub arch: Arch,
    pub spec: ImageSpec,
    pub width: usize,
    pub weights: ModelWeights,
}

impl Classifier {
    pub fn init(arch: Arch, spec: ImageSpec, width: usize, seed: u64) -> Result<Classifier> {
        let mut rng = rng::stream(seed, 12);
        let mut w = ModelWeights::new();
        let c = spec.channels;
        let flat = |reduction: usize, ch: usize| (spec.height / reduction) * (spec.width / reduction) * ch;
        match arch {
            Arch::ConvNet => {
                Embedder::push_weights(&mut w, &mut rng, c, width)?;
                linear_layer(&mut w, &mut rng, "head", flat(8, width), spec.classes)?;
            }
            Arch::VggIsh => {
                let plan = [(c, width), (width, width), (width, 2 * width), (2 * width, 2 * width), (2 * width, 4 * width), (4 * width, 4 * width)];
                for (i, &(cin, cout)) in plan.iter().enumerate() {
                    conv_layer(&mut w, &mut rng, &format!("conv{i}"), 3, cin, cout)?;
                    norm_layer(&mut w, &format!("norm{i}"), cout)?;
                }
                linear_layer(&mut w, &mut rng, "head", flat(8, 4 * width), spec.classes)?;
            }
            Arch::ResNetIsh => {
                conv_layer(&mut w, &mut rng, "stem.conv", 3, c, width)?;
                norm_layer(&mut w, "stem.norm", width)?;
                for (s, (cin, cout)) in [(width, width), (width, 2 * width)].into_iter().enumerate() {
                    conv_layer(&mut w, &mut rng, &format!("stage{s}.conv1"), 3, cin, cout)?;
                    norm_layer(&mut w, &format!("stage{s}.norm1"), cout)?;
                    conv_layer(&mut w, &mut rng, &format!("stage{s}.conv2"), 3, cout, cout)?;
                    norm_layer(&mut w, &format!("stage{s}.norm2"), cout)?;
                    if cin != cout {
                        conv_layer(&mut w, &mut rng, &format!("stage{s}.proj"), 1, cin, cout)?;
                    }
                }
                linear_layer(&mut w, &mut rng, "head", flat(8, 2 * width), spec.classes)?;
            }
        }
        Ok(Classifier { arch, spec, width, weights: w })
    }

    pub fn with_weights(&self, weights: ModelWeights) -> Classifier {
        Classifier { weights, ..self.clone() }
    }

    /// The embedding part of a convnet classifier.
    pub fn embedder(&self) -> Result<Embedder> {
        if self.arch != Arch::ConvNet {
            return Err(invalid(format!("{} has no embedder", self.arch.name())));
        }
        let mut w = ModelWeights::new();
        for (n, t) in self.weights.iter().filter(|(n, _)| n.starts_with("block")) {
            w.insert(n, t.clone())?;
        }
        Ok(Embedder { weights: w, channels: self.spec.channels, width: self.width })
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        logits_with(self.arch, &self.weights, self.spec, images)
    }

    /// Class predictions without recording a graph, in chunks of `batch`.
    pub fn predict(&self, images: &Tensor, batch: usize) -> Result<Vec<usize>> {
        no_grad(|| {
            let n = images.dim(0);
            let mut out = Vec::with_capacity(n);
            let mut start = 0;
            while start < n {
                let len = batch.min(n - start);
                let chunk = images.narrow(0, start, len)?;
                out.extend(nn::argmax_rows(&self.logits(&chunk)?));
                start += len;
            }
            Ok(out)
        })
    }
}

/// Forward pass of any classifier architecture with explicit weights, so
/// callers can differentiate with respect to them.
pub fn logits_with(arch: Arch, w: &ModelWeights, spec: ImageSpec, images: &Tensor) -> Result<Tensor> {
    check_images(images, spec.height, spec.width, spec.channels, arch.name())?;
    let feats = match arch {
        Arch::ConvNet => embedder_features(w, images, spec.channels)?,
        Arch::VggIsh => {
            let mut x = images.clone();
            for i in 0..6 {
                x = conv(w, &format!("conv{i}"), &x, 3, 1, 1)?;
                x = inorm(w, &format!("norm{i}"), &x)?.relu()?;
                if i % 2 == 1 {
                    x = x.avg_pool2()?;
                }
            }
            x
        }
        Arch::ResNetIsh => {
            let mut x = inorm(w, "stem.norm", &conv(w, "stem.conv", images, 3, 1, 1)?)?.relu()?;
            for s in 0..2 {
                let h = inorm(w, &format!("stage{s}.norm1"), &conv(w, &format!("stage{s}.conv1"), &x, 3, 1, 1)?)?.relu()?;
                let h = inorm(w, &format!("stage{s}.norm2"), &conv(w, &format!("stage{s}.conv2"), &h, 3, 1, 1)?)?;
                let skip = if w.contains(&format!("stage{s}.proj.weight")) {
                    conv(w, &format!("stage{s}.proj"), &x, 1, 1, 0)?
                } else {
                    x.clone()
                };
                x = h.add(&skip)?.relu()?.avg_pool2()?;
            }
            x.avg_pool2()?
        }
    };
    dense(w, "head", &feats.flatten_rows()?)
}

/// Class-conditional generator: latent ⊕ class embedding → linear trunk →
/// nearest-upsample conv blocks → tanh.
///
/// Normalization uses batch statistics until [`Generator::calibrate`] stores
/// fixed statistics; afterwards every output row depends only on its own
/// `(z, y)`.
#[derive(Debug, Clone)]
pub struct Generator {
    pub weights: ModelWeights,
    pub spec: ImageSpec,
    pub d_z: usize,
    pub width: usize,
}

pub const CLASS_EMBED_DIM: usize = 32;
const TRUNK_SIDE: usize = 4;

impl Generator {
    pub fn init(spec: ImageSpec, d_z: usize, width: usize, seed: u64) -> Result<Generator> {
        let ups = Generator::upsample_blocks(spec)?;
        let mut rng = rng::stream(seed, 13);
        let mut w = ModelWeights::new();
        w.insert("class_embed", uniform(&mut rng, &[spec.classes, CLASS_EMBED_DIM], 1.0)?)?;
        let trunk = TRUNK_SIDE * TRUNK_SIDE * width;
        linear_layer(&mut w, &mut rng, "fc", d_z + CLASS_EMBED_DIM, trunk)?;
        norm_layer(&mut w, "fc.norm", trunk)?;
        let mut cin = width;
        for u in 0..ups {
            let cout = (width >> (u + 1)).max(8);
            conv_layer(&mut w, &mut rng, &format!("up{u}.conv"), 3, cin, cout)?;
            norm_layer(&mut w, &format!("up{u}.norm"), cout)?;
            cin = cout;
        }
        let fan_in = 9 * cin;
        w.insert("out.weight", uniform(&mut rng, &[fan_in, spec.channels], (3.0 / fan_in as f64).sqrt())?)?;
        w.insert("out.bias", zeros(&[spec.channels]))?;
        Ok(Generator { weights: w, spec, d_z, width })
    }

    fn upsample_blocks(spec: ImageSpec) -> Result<usize> {
        if spec.height != spec.width || spec.height < TRUNK_SIDE || !(spec.height / TRUNK_SIDE).is_power_of_two() || spec.height % TRUNK_SIDE != 0 {
            return Err(invalid(format!(
                "generator needs square images of side 4·2^k, got {}x{}",
                spec.height, spec.width
            )));
        }
        Ok((spec.height / TRUNK_SIDE).trailing_zeros() as usize)
    }

    pub fn from_weights(weights: ModelWeights, spec: ImageSpec) -> Result<Generator> {
        let fc = weights.get("fc.weight")?;
        let d_z = fc
            .dim(0)
            .checked_sub(CLASS_EMBED_DIM)
            .ok_or_else(|| invalid("fc.weight too small for the class embedding"))?;
        let width = fc.dim(1) / (TRUNK_SIDE * TRUNK_SIDE);
        let g = Generator { weights, spec, d_z, width };
        Generator::upsample_blocks(spec)?;
        if g.weights.get("class_embed")?.dim(0) != spec.classes {
            return Err(invalid("class embedding does not match class count"));
        }
        Ok(g)
    }

    pub fn is_calibrated(&self) -> bool {
        self.weights.contains("fc.norm.mean")
    }

    fn norm(&self, w: &ModelWeights, name: &str, x: &Tensor) -> Result<Tensor> {
        let y = if w.contains(&format!("{name}.mean")) {
            let mean = w.get(&format!("{name}.mean"))?;
            let var = w.get(&format!("{name}.var"))?;
            x.sub(mean)?.div(&var.add_scalar(nn::NORM_EPS)?.sqrt()?)?
        } else {
            nn::batch_norm_lite(x)?
        };
        Ok(nn::affine(&y, w.get(&format!("{name}.weight"))?, w.get(&format!("{name}.bias"))?)?)
    }

    pub fn generate(&self, z: &Tensor, labels: &[usize]) -> Result<Tensor> {
        self.generate_with(&self.weights, z, labels)
    }

    /// Forward pass with explicit weights (used while training them).
    pub fn generate_with(&self, w: &ModelWeights, z: &Tensor, labels: &[usize]) -> Result<Tensor> {
        self.forward(w, z, labels, None)
    }

    fn forward(&self, w: &ModelWeights, z: &Tensor, labels: &[usize], mut stats: Option<&mut Vec<(String, Tensor, Tensor)>>) -> Result<Tensor> {
        let n = labels.len();
        if z.shape() != [n, self.d_z] {
            return Err(invalid(format!("generate: expected z [{n}, {}], got {:?}", self.d_z, z.shape())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.spec.classes) {
            return Err(invalid(format!("generate: label {bad} out of range for {} classes", self.spec.classes)));
        }
        let emb = w.get("class_embed")?.index_select(labels)?;
        let mut record = |name: &str, x: &Tensor, axes: &[usize]| -> Result<()> {
            if let Some(s) = stats.as_deref_mut() {
                let mean = x.mean_axes(axes, false)?;
                let var = x.sub(&mean)?.square()?.mean_axes(axes, false)?;
                s.push((name.to_string(), mean, var));
            }
            Ok(())
        };
        let h = dense(w, "fc", &Tensor::concat(&[z.clone(), emb], 1)?)?;
        record("fc.norm", &h, &[0])?;
        let h = self.norm(w, "fc.norm", &h)?.relu()?;
        let mut x = h.reshape(&[n, TRUNK_SIDE, TRUNK_SIDE, self.width])?;
        for u in 0..Generator::upsample_blocks(self.spec)? {
            x = conv(w, &format!("up{u}.conv"), &x.upsample2()?, 3, 1, 1)?;
            record(&format!("up{u}.norm"), &x, &[0, 1, 2])?;
            x = self.norm(w, &format!("up{u}.norm"), &x)?.relu()?;
        }
        Ok(conv(w, "out", &x, 3, 1, 1)?.tanh()?)
    }

    /// Replaces batch statistics by statistics measured once on `samples`
    /// seeded latents with labels cycling through the classes.
    pub fn calibrate(&mut self, samples: usize, seed: u64) -> Result<()> {
        let mut base = ModelWeights::new();
        for (n, t) in self.weights.iter().filter(|(n, _)| !n.ends_with(".mean") && !n.ends_with(".var")) {
            base.insert(n, t.clone())?;
        }
        let uncalibrated = Generator { weights: base.clone(), ..self.clone() };
        let mut rng = rng::stream(seed, 14);
        let z = Tensor::from_vec(rng::normal_vec(&mut rng, samples * self.d_z), &[samples, self.d_z])?;
        let labels: Vec<usize> = (0..samples).map(|i| i % self.spec.classes).collect();
        let mut stats = Vec::new();
        no_grad(|| uncalibrated.forward(&base, &z, &labels, Some(&mut stats)))?;
        for (name, mean, var) in stats {
            base.insert(format!("{name}.mean"), mean.to_dtype(DType::F32))?;
            base.insert(format!("{name}.var"), var.to_dtype(DType::F32))?;
        }
        self.weights = base;
        Ok(())
    }

    /// Images for `z` in chunks, without recording a graph.
    pub fn generate_batched(&self, z: &Tensor, labels: &[usize], batch: usize) -> Result<Tensor> {
        no_grad(|| {
            let mut parts = Vec::new();
            let mut start = 0;
            while start < labels.len() {
                let len = batch.min(labels.len() - start);
                parts.push(self.generate(&z.narrow(0, start, len)?, &labels[start..start + len])?);
                start += len;
            }
            if parts.is_empty() {
                return Ok(Tensor::zeros(&[0, self.spec.height, self.spec.width, self.spec.channels], z.dtype()));
            }
            Ok(Tensor::concat(&parts, 0)?)
        })
    }
}

/// Conditional discriminator: image ⊕ one-hot class planes → strided convs →
/// scalar logit.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub weights: ModelWeights,
    pub spec: ImageSpec,
    pub width: usize,
}

impl Discriminator {
    pub fn init(spec: ImageSpec, width: usize, seed: u64) -> Result<Discriminator> {
        if spec.height % 4 != 0 || spec.width % 4 != 0 {
            return Err(invalid("discriminator needs spatial sizes divisible by 4"));
        }
        let mut rng = rng::stream(seed, 15);
        let mut w = ModelWeights::new();
        conv_layer(&mut w, &mut rng, "conv0", 4, spec.channels + spec.classes, width)?;
        conv_layer(&mut w, &mut rng, "conv1", 4, width, 2 * width)?;
        linear_layer(&mut w, &mut rng, "head", (spec.height / 4) * (spec.width / 4) * 2 * width, 1)?;
        Ok(Discriminator { weights: w, spec, width })
    }

    pub fn from_weights(weights: ModelWeights, spec: ImageSpec) -> Result<Discriminator> {
        let width = weights.get("conv0.weight")?.dim(1);
        Ok(Discriminator { weights, spec, width })
    }

    /// Constant one-hot planes `[N, H, W, C]`.
    pub fn condition_planes(&self, labels: &[usize], dtype: DType) -> Result<Tensor> {
        let ImageSpec { height, width, classes, .. } = self.spec;
        let mut v = vec![0.0; labels.len() * height * width * classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(invalid(format!("label {y} out of range for {classes} classes")));
            }
            for p in 0..height * width {
                v[(i * height * width + p) * classes + y] = 1.0;
            }
        }
        Ok(Tensor::from_values(&v, &[labels.len(), height, width, classes], dtype)?)
    }

    /// `[N]` logits.
    pub fn logits_with(&self, w: &ModelWeights, images: &Tensor, labels: &[usize]) -> Result<Tensor> {
        check_images(images, self.spec.height, self.spec.width, self.spec.channels, "discriminator")?;
        let planes = self.condition_planes(labels, images.dtype())?;
        let x = Tensor::concat(&[images.clone(), planes], 3)?;
        let x = conv(w, "conv0", &x, 4, 2, 1)?.leaky_relu(LEAK)?;
        let x = conv(w, "conv1", &x, 4, 2, 1)?.leaky_relu(LEAK)?;
        let out = dense(w, "head", &x.flatten_rows()?)?;
        Ok(out.reshape(&[labels.len()])?)
    }

    pub fn logits(&self, images: &Tensor, labels: &[usize]) -> Result<Tensor> {
        self.logits_with(&self.weights, images, labels)
    }
}
