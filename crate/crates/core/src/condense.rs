//! Latent condensation against a frozen generator: distribution matching (or
//! mean-gradient matching) plus the pairwise regularizer, with latent-set
//! splitting.

use condensegan_tensor::{grad, nn, no_grad, OptimizerState, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig, Omega};
use crate::data::{sample_from, ImageSet};
use crate::error::{invalid, CoreError, Result};
use crate::inversion::{LatentSet, Provenance};
use crate::models::{logits_with, pool_draw, Classifier, Embedder, EmbedderSource, Generator, SnapshotPool};
use crate::rng;

/// `Σ_c ‖mean ψ(A(real_c, ω_c)) − mean ψ(A(synth_c, ω_c))‖²`.
pub fn con_loss(psi: &Embedder, reals: &[Tensor], synths: &[Tensor], omegas: &[Omega]) -> Result<Tensor> {
    check_classes(reals.len(), synths.len(), omegas.len())?;
    let mut total: Option<Tensor> = None;
    for ((x, s), w) in reals.iter().zip(synths).zip(omegas) {
        if x.dim(0) == 0 || s.dim(0) == 0 {
            return Err(invalid("con_loss: empty class batch"));
        }
        let (ax, as_) = augment::siamese_apply(x, s, w)?;
        let term = mean_embedding_distance(&psi.embed(&ax)?, &psi.embed(&as_)?)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    total.ok_or_else(|| invalid("con_loss: no classes"))
}

/// `‖mean(a) − mean(b)‖²` over rows of two embedding batches.
pub fn mean_embedding_distance(real_emb: &Tensor, synth_emb: &Tensor) -> Result<Tensor> {
    let diff = real_emb.mean_axes(&[0], false)?.sub(&synth_emb.mean_axes(&[0], false)?)?;
    Ok(nn::squared_l2(&diff)?)
}

/// `(1/|B|) Σ_i ‖a_i − b_i‖²` over index-aligned embedding rows.
pub fn paired_distance(real_emb: &Tensor, synth_emb: &Tensor) -> Result<Tensor> {
    if real_emb.shape() != synth_emb.shape() {
        return Err(invalid("pairwise regularizer: real and synthetic batches are not aligned"));
    }
    let n = real_emb.dim(0);
    if n == 0 {
        return Err(invalid("pairwise regularizer: empty batch"));
    }
    Ok(nn::squared_l2(&real_emb.sub(synth_emb)?)?.scale(1.0 / n as f64)?)
}

/// `Σ_c (1/|B_c|) Σ_i ‖ψ(A(x_i, ω_c)) − ψ(A(G(z_i), ω_c))‖²` for paired batches.
pub fn reg_loss(psi: &Embedder, reals: &[Tensor], synths: &[Tensor], omegas: &[Omega]) -> Result<Tensor> {
    check_classes(reals.len(), synths.len(), omegas.len())?;
    let mut total: Option<Tensor> = None;
    for ((x, s), w) in reals.iter().zip(synths).zip(omegas) {
        let (ax, as_) = augment::siamese_apply(x, s, w)?;
        let term = paired_distance(&psi.embed(&ax)?, &psi.embed(&as_)?)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    total.ok_or_else(|| invalid("reg_loss: no classes"))
}

fn check_classes(a: usize, b: usize, c: usize) -> Result<()> {
    if a != b || b != c {
        return Err(invalid(format!("per-class inputs disagree in length ({a}, {b}, {c})")));
    }
    Ok(())
}

/// `(1 − λ)·L_con + λ·R`; `R` may be omitted when `λ = 0`.
pub fn total_loss(l_con: &Tensor, r: Option<&Tensor>, lambda: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CoreError::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(l_con.clone());
    }
    let r = r.ok_or_else(|| invalid("total_loss: regularizer required for lambda > 0"))?;
    if lambda == 1.0 {
        return Ok(r.clone());
    }
    Ok(l_con.scale(1.0 - lambda)?.add(&r.scale(lambda)?)?)
}

/// Parameters that take part in gradient matching: weight matrices only.
/// Biases and normalization affines are skipped, as is conventional; the
/// conv biases in front of instance norm have an analytically zero gradient.
pub fn matched_parameters(net: &Classifier) -> Vec<String> {
    net.weights
        .iter()
        .filter(|(_, t)| t.rank() >= 2)
        .map(|(n, _)| n.to_string())
        .collect()
}

/// `Σ_l (1 − cos(a_l, b_l))` over flattened layer gradients. Layers where
/// either side has zero norm are skipped; their count is returned.
pub fn layerwise_cosine_distance(real: &[Tensor], synth: &[Tensor]) -> Result<(Tensor, usize)> {
    if real.len() != synth.len() || real.is_empty() {
        return Err(invalid("gradient lists must be non-empty and of equal length"));
    }
    let mut total: Option<Tensor> = None;
    let mut skipped = 0;
    for (a, b) in real.iter().zip(synth) {
        let na = nn::squared_l2(a)?;
        let nb = nn::squared_l2(b)?;
        if na.item()? == 0.0 || nb.item()? == 0.0 {
            skipped += 1;
            continue;
        }
        let cos = a.mul(b)?.sum()?.div(&na.mul(&nb)?.sqrt()?)?;
        let term = cos.neg()?.add_scalar(1.0)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    let dtype = real[0].dtype();
    Ok((total.unwrap_or_else(|| Tensor::scalar(0.0, dtype)), skipped))
}

/// Layerwise cosine distance between the mean cross-entropy gradients of a
/// real and a synthetic batch. Differentiable in the synthetic images (a
/// second-order pass through the network).
pub fn grad_match_loss(net: &Classifier, real: &Tensor, real_labels: &[usize], synth: &Tensor, synth_labels: &[usize]) -> Result<(Tensor, usize)> {
    let names = matched_parameters(net);
    let weights = net.weights.trainable();
    let leaves: Vec<Tensor> = names.iter().map(|n| weights.get(n).cloned()).collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = leaves.iter().collect();
    let real_loss = nn::cross_entropy(&logits_with(net.arch, &weights, net.spec, real)?, real_labels)?;
    let g_real: Vec<Tensor> = grad(&real_loss, &refs, false)?.into_iter().map(|g| g.detach()).collect();
    let synth_loss = nn::cross_entropy(&logits_with(net.arch, &weights, net.spec, synth)?, synth_labels)?;
    let g_synth = grad(&synth_loss, &refs, true)?;
    layerwise_cosine_distance(&g_real, &g_synth)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Distribution,
    Gradient,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Distribution => "distribution",
            Objective::Gradient => "gradient",
        }
    }

    pub fn parse(s: &str) -> Result<Objective> {
        match s {
            "distribution" => Ok(Objective::Distribution),
            "gradient" => Ok(Objective::Gradient),
            other => Err(CoreError::Config(format!("objective must be distribution or gradient, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitStrategy {
    /// Groups fixed for the run and condensed independently.
    Fixed,
    /// One run whose group membership is reshuffled every iteration.
    Random,
}

impl SplitStrategy {
    pub fn name(self) -> &'static str {
        match self {
            SplitStrategy::Fixed => "fixed",
            SplitStrategy::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<SplitStrategy> {
        match s {
            "fixed" => Ok(SplitStrategy::Fixed),
            "random" => Ok(SplitStrategy::Random),
            other => Err(CoreError::Config(format!("split strategy must be fixed or random, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondenseConfig {
    pub iterations: usize,
    pub lr: f64,
    pub lambda: f64,
    pub objective: Objective,
    /// Latents per class per iteration (b_z).
    pub batch_z: usize,
    /// Large real batch per class per iteration (b̃).
    pub batch_real: usize,
    /// Latents per group within a class; 0 keeps each class whole.
    pub group_size: usize,
    pub strategy: SplitStrategy,
    pub embedder: EmbedderSource,
    /// Width of freshly initialized embedders (random-init source).
    pub embedder_width: usize,
    pub augment: Option<AugmentConfig>,
}

impl Default for CondenseConfig {
    fn default() -> Self {
        CondenseConfig {
            iterations: 5000,
            lr: 0.001,
            lambda: 0.0,
            objective: Objective::Distribution,
            batch_z: 64,
            batch_real: 256,
            group_size: 0,
            strategy: SplitStrategy::Fixed,
            embedder: EmbedderSource::All,
            embedder_width: 128,
            augment: Some(AugmentConfig::default()),
        }
    }
}

impl CondenseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(CoreError::Config(format!("condense.lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.batch_z == 0 || self.batch_real == 0 || self.embedder_width == 0 {
            return Err(CoreError::Config("condense batch sizes and embedder width must be >= 1".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(CoreError::Config("condense.lr must be non-negative".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    #[serde(rename = "L_con")]
    pub l_con: f64,
    #[serde(rename = "R")]
    pub r: Option<f64>,
    #[serde(rename = "L")]
    pub l: f64,
    pub omega_kind: Vec<String>,
    pub embedder_source: String,
    pub embedder: String,
    /// Gradient-matching layers skipped for zero norm.
    #[serde(skip_serializing_if = "is_zero", default)]
    pub skipped_layers: usize,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

/// Per-class groups of latent row indices for one iteration.
fn groups_for(latents: &LatentSet, group_size: usize, shuffle: Option<&mut rng::Rng>) -> Vec<Vec<Vec<usize>>> {
    let mut rng = shuffle;
    (0..latents.classes)
        .map(|c| {
            let mut idx = latents.class_indices(c);
            if let Some(r) = rng.as_deref_mut() {
                idx.shuffle(r);
            }
            split_sizes(idx.len(), group_size)
                .into_iter()
                .scan(0, |start, len| {
                    let g = idx[*start..*start + len].to_vec();
                    *start += len;
                    Some(g)
                })
                .filter(|g| !g.is_empty())
                .collect()
        })
        .collect()
}

/// Group lengths for `n` items in groups of `size` (0 = one group); the last
/// group takes the remainder.
pub fn split_sizes(n: usize, size: usize) -> Vec<usize> {
    if size == 0 || size >= n {
        return vec![n];
    }
    let groups = n / size;
    let mut sizes = vec![size; groups];
    sizes[groups - 1] += n - groups * size;
    sizes
}

/// Runs the condensation loop on `init`, updating only the latents.
///
/// Groups (when `cfg.group_size > 0`) are reshuffled every iteration; use
/// [`split_and_run`] for the fixed strategy.
pub fn condense_run(gen: &Generator, pool: &SnapshotPool, reals: &ImageSet, init: &LatentSet, cfg: &CondenseConfig, seed: u64) -> Result<(LatentSet, Vec<IterRecord>)> {
    cfg.validate()?;
    init.validate(Some(reals))?;
    if init.d_z != gen.d_z || init.classes != gen.spec.classes {
        return Err(invalid("latent set does not match the generator"));
    }
    if !gen.is_calibrated() {
        return Err(invalid("condensation needs a calibrated generator"));
    }
    let frozen = gen.weights.to_bytes();
    let mut z = init.tensor()?.requires_grad();
    let mut opt = OptimizerState::adam(cfg.lr);
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut embedder_rng = rng::stream(seed, 61);
    let mut omega_rng = rng::stream(seed, 62);
    let mut batch_rng = rng::stream(seed, 63);
    let mut group_rng = rng::stream(seed, 64);
    let real_by_class: Vec<Vec<usize>> = (0..reals.spec.classes).map(|c| reals.class_indices(c)).collect();
    let pairs = init.pairs();
    let side = reals.spec.width;
    let plan_fixed = groups_for(init, cfg.group_size, None);

    for iter in 0..cfg.iterations {
        let (net, drawn) = pool_draw(pool, &cfg.embedder, reals.spec, cfg.embedder_width, &mut embedder_rng)?;
        let psi = net.embedder()?;
        let plan = match cfg.strategy {
            SplitStrategy::Random if cfg.group_size > 0 => groups_for(init, cfg.group_size, Some(&mut group_rng)),
            _ => plan_fixed.clone(),
        };
        let mut grad_total: Option<Tensor> = None;
        let (mut l_con, mut r_sum, mut l_sum, mut skipped) = (0.0, 0.0, 0.0, 0);
        let mut kinds = Vec::with_capacity(reals.spec.classes);
        for (c, groups) in plan.iter().enumerate() {
            if groups.is_empty() {
                continue;
            }
            let omega = match &cfg.augment {
                Some(a) => augment::sample_omega(a, side, &mut omega_rng),
                None => Omega::None,
            };
            kinds.push(omega.kind().name().to_string());
            let (large, _) = sample_from(&real_by_class[c], cfg.batch_real, &mut batch_rng)?;
            let real_large = augment::apply(&reals.batch(&large)?, &omega)?;
            let real_mean = match cfg.objective {
                Objective::Distribution => Some(no_grad(|| -> Result<Tensor> { Ok(psi.embed(&real_large)?.mean_axes(&[0], false)?) })?),
                Objective::Gradient => None,
            };
            for group in groups {
                let b = cfg.batch_z.min(group.len());
                let (mut rows, _) = sample_from(group, b, &mut batch_rng)?;
                rows.sort_unstable();
                let synth = gen.generate(&z.index_select(&rows)?, &vec![c; rows.len()])?;
                let synth_aug = augment::apply(&synth, &omega)?;
                let mut synth_emb = None;
                let con = match cfg.objective {
                    Objective::Distribution => {
                        let emb = psi.embed(&synth_aug)?;
                        let diff = real_mean.as_ref().expect("set above").sub(&emb.mean_axes(&[0], false)?)?;
                        synth_emb = Some(emb);
                        nn::squared_l2(&diff)?
                    }
                    Objective::Gradient => {
                        let (loss, s) = grad_match_loss(&net, &real_large, &vec![c; large.len()], &synth_aug, &vec![c; rows.len()])?;
                        skipped += s;
                        loss
                    }
                };
                let reg = if cfg.lambda > 0.0 {
                    let paired: Vec<usize> = rows.iter().map(|&i| pairs[i]).collect();
                    let real_pairs = augment::apply(&reals.batch(&paired)?, &omega)?;
                    let real_emb = no_grad(|| psi.embed(&real_pairs))?;
                    let emb = match synth_emb {
                        Some(e) => e,
                        None => psi.embed(&synth_aug)?,
                    };
                    Some(paired_distance(&real_emb, &emb)?)
                } else {
                    None
                };
                let loss = total_loss(&con, reg.as_ref(), cfg.lambda)?;
                l_con += con.item()?;
                if let Some(r) = &reg {
                    r_sum += r.item()?;
                }
                l_sum += loss.item()?;
                let g = grad(&loss, &[&z], false)?.remove(0);
                grad_total = Some(match grad_total {
                    Some(t) => t.add(&g)?,
                    None => g,
                });
            }
        }
        if !l_sum.is_finite() {
            return Err(CoreError::Numeric(format!("condensation loss is not finite at iteration {iter}")));
        }
        let g = grad_total.ok_or_else(|| invalid("no latents to condense"))?;
        let mut params = [z];
        opt.adam_step(&mut params, &[g])
            .map_err(|e| CoreError::Numeric(format!("latent update at iteration {iter}: {e}")))?;
        let [next] = params;
        z = next;
        records.push(IterRecord {
            iter,
            l_con,
            r: (cfg.lambda > 0.0).then_some(r_sum),
            l: l_sum,
            omega_kind: kinds,
            embedder_source: cfg.embedder.name(),
            embedder: drawn.map_or_else(|| "fresh".to_string(), |i| pool.snapshots[i].label.clone()),
            skipped_layers: skipped,
        });
    }
    assert!(gen.weights.to_bytes() == frozen, "generator weights changed during condensation");
    let out = LatentSet {
        provenance: Provenance::Condensed,
        z: z.to_f32_vec(),
        ..init.clone()
    };
    out.validate(None)?;
    Ok((out, records))
}

/// Splits each class into groups of `cfg.group_size`. With the fixed
/// strategy each group is condensed by its own run and the results are put
/// back in the original order; with the random strategy a single run
/// reshuffles the groups every iteration.
pub fn split_and_run(gen: &Generator, pool: &SnapshotPool, reals: &ImageSet, init: &LatentSet, cfg: &CondenseConfig, seed: u64) -> Result<(LatentSet, Vec<Vec<IterRecord>>)> {
    if cfg.strategy == SplitStrategy::Random || cfg.group_size == 0 {
        let (set, rec) = condense_run(gen, pool, reals, init, cfg, seed)?;
        return Ok((set, vec![rec]));
    }
    let plan = groups_for(init, cfg.group_size, None);
    let groups = plan.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = init.clone();
    out.provenance = Provenance::Condensed;
    let mut all_records = Vec::with_capacity(groups);
    let single = CondenseConfig { group_size: 0, ..cfg.clone() };
    for g in 0..groups {
        let rows: Vec<usize> = plan.iter().filter_map(|class| class.get(g)).flatten().copied().collect();
        let (set, rec) = condense_run(gen, pool, reals, &init.subset(&rows), &single, rng::derive(seed, g as u64))?;
        for (k, &row) in rows.iter().enumerate() {
            out.z[row * out.d_z..(row + 1) * out.d_z].copy_from_slice(&set.z[k * set.d_z..(k + 1) * set.d_z]);
        }
        all_records.push(rec);
    }
    Ok((out, all_records))
}
