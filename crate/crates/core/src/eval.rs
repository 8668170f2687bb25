//! Train-on-synthetic, test-on-real evaluation and the experiment drivers.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::condense::{split_and_run, CondenseConfig, IterRecord, Objective, SplitStrategy};
use crate::data::ImageSet;
use crate::error::{CoreError, Result};
use crate::inversion::{invert_all, random_latents, InversionConfig, InversionSummary, LatentSet};
use crate::models::{Arch, Classifier, EmbedderSource, Embedder, Generator, SnapshotPool};
use crate::rng;
use crate::train::{train_classifier, EpochRecord, TrainConfig};

/// SHA-256 of the canonical JSON form (object keys sorted) of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_value(value).expect("configs serialize").to_string();
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub const METHOD_REAL: &str = "real-upper-bound";
pub const METHOD_RANDOM: &str = "gan-random";
pub const METHOD_INVERSION: &str = "inversion";
pub const METHOD_ITGAN: &str = "itgan";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub arch: Arch,
    pub width: usize,
    pub train: TrainConfig,
    pub latent_seeds: usize,
    pub train_seeds: usize,
    /// Round synthetic images to bytes before training.
    pub quantize: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            arch: Arch::ConvNet,
            width: 128,
            train: TrainConfig::default(),
            latent_seeds: 3,
            train_seeds: 3,
            quantize: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train.epochs % 2 != 0 {
            return Err(CoreError::Config(format!("eval.epochs must be even, got {}", self.train.epochs)));
        }
        if self.latent_seeds == 0 || self.train_seeds == 0 || self.width == 0 {
            return Err(CoreError::Config("eval repeats and width must be >= 1".into()));
        }
        self.train.validate()
    }

    pub fn latent_seed(&self, seed: u64, i: usize) -> u64 {
        rng::derive(seed, 1000 + i as u64)
    }

    pub fn train_seed(&self, seed: u64, j: usize) -> u64 {
        rng::derive(seed, 2000 + j as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed_latent: Option<u64>,
    pub seed_train: u64,
    pub test_acc: f64,
    pub curve: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub method: String,
    pub arch: Arch,
    pub size_per_class: Option<usize>,
    pub mean: f64,
    pub std: f64,
    pub runs: Vec<RunRecord>,
    pub epochs: usize,
    pub config_hash: String,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

impl ExperimentResult {
    pub fn from_runs(method: &str, arch: Arch, size_per_class: Option<usize>, epochs: usize, runs: Vec<RunRecord>, config_hash: String) -> ExperimentResult {
        let accs: Vec<f64> = runs.iter().map(|r| r.test_acc).collect();
        let (mean, std) = mean_std(&accs);
        ExperimentResult {
            method: method.to_string(),
            arch,
            size_per_class,
            mean,
            std,
            runs,
            epochs,
            config_hash,
        }
    }

    /// True when `mean`/`std` match the per-run list to `tol`.
    pub fn is_consistent(&self, tol: f64) -> bool {
        let accs: Vec<f64> = self.runs.iter().map(|r| r.test_acc).collect();
        let (m, s) = mean_std(&accs);
        (m - self.mean).abs() <= tol && (s - self.std).abs() <= tol
    }
}

/// Generator images for every latent, labels copied.
pub fn materialize(gen: &Generator, latents: &LatentSet) -> Result<ImageSet> {
    let labels = latents.labels_usize();
    let images = gen.generate_batched(&latents.tensor()?, &labels, 256)?;
    Ok(ImageSet { images, labels, spec: gen.spec })
}

/// Trains one fresh classifier of `cfg.arch` and reports its final test
/// accuracy and curve.
pub fn train_and_test(train: &ImageSet, test: &ImageSet, cfg: &EvalConfig, seed_train: u64) -> Result<(Classifier, RunRecord)> {
    let mut net = Classifier::init(cfg.arch, train.spec, cfg.width, seed_train)?;
    let curve = train_classifier(&mut net, train, Some(test), &cfg.train, seed_train, |_, _| Ok(()))?;
    let test_acc = curve.last().map_or(f64::NAN, |r| r.test_acc);
    Ok((
        net,
        RunRecord {
            seed_latent: None,
            seed_train,
            test_acc,
            curve,
        },
    ))
}

fn prepare(set: ImageSet, cfg: &EvalConfig) -> Result<ImageSet> {
    if cfg.quantize {
        set.quantize().to_image_set()
    } else {
        Ok(set)
    }
}

/// Frozen inputs shared by the experiment drivers.
pub struct Assets<'a> {
    pub generator: &'a Generator,
    pub pool: &'a SnapshotPool,
    /// Feature extractor used for inversion.
    pub inversion_embedder: &'a Embedder,
    pub train: &'a ImageSet,
    pub test: &'a ImageSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub sizes: Vec<usize>,
    pub include_real: bool,
    pub inversion: InversionConfig,
    pub condense: CondenseConfig,
    pub eval: EvalConfig,
}

/// Latent sets produced while comparing, kept for inspection and reuse.
#[derive(Debug, Clone)]
pub struct LatentRecord {
    pub method: String,
    pub size_per_class: usize,
    pub seed_latent: u64,
    pub latents: LatentSet,
}

#[derive(Debug, Clone, Default)]
pub struct CompareOutcome {
    pub results: Vec<ExperimentResult>,
    pub latents: Vec<LatentRecord>,
    pub inversion: Vec<InversionSummary>,
    pub condense_logs: Vec<Vec<IterRecord>>,
}

fn train_over_seeds(set: &ImageSet, test: &ImageSet, cfg: &EvalConfig, seed: u64, seed_latent: Option<u64>) -> Result<Vec<RunRecord>> {
    (0..cfg.train_seeds)
        .map(|j| {
            let (_, mut run) = train_and_test(set, test, cfg, cfg.train_seed(seed, j))?;
            run.seed_latent = seed_latent;
            Ok(run)
        })
        .collect()
}

/// For each size: gan-random, inversion and itgan latent sets over the latent
/// seeds, each materialized and trained over the train seeds; plus the real
/// upper bound.
pub fn compare_methods(assets: &Assets, cfg: &CompareConfig, seed: u64, mut progress: impl FnMut(&str)) -> Result<CompareOutcome> {
    cfg.eval.validate()?;
    let mut out = CompareOutcome::default();
    let eval_hash = config_hash(&cfg.eval);
    let itgan_hash = config_hash(&(&cfg.inversion, &cfg.condense, &cfg.eval));
    let inv_hash = config_hash(&(&cfg.inversion, &cfg.eval));
    let gen = assets.generator;
    if cfg.include_real {
        progress(METHOD_REAL);
        let runs = train_over_seeds(assets.train, assets.test, &cfg.eval, seed, None)?;
        out.results.push(ExperimentResult::from_runs(METHOD_REAL, cfg.eval.arch, None, cfg.eval.train.epochs, runs, eval_hash.clone()));
    }
    for &size in &cfg.sizes {
        let mut runs: [Vec<RunRecord>; 3] = Default::default();
        for i in 0..cfg.eval.latent_seeds {
            let sl = cfg.eval.latent_seed(seed, i);
            progress(&format!("{METHOD_RANDOM} size {size} latent seed {i}"));
            let random = random_latents(assets.train, gen.d_z, Some(size), sl)?;
            runs[0].extend(train_over_seeds(&prepare(materialize(gen, &random)?, &cfg.eval)?, assets.test, &cfg.eval, seed, Some(sl))?);

            progress(&format!("{METHOD_INVERSION} size {size} latent seed {i}"));
            let (inverted, summary) = invert_all(gen, assets.inversion_embedder, assets.train, Some(size), &cfg.inversion, sl)?;
            runs[1].extend(train_over_seeds(&prepare(materialize(gen, &inverted)?, &cfg.eval)?, assets.test, &cfg.eval, seed, Some(sl))?);

            progress(&format!("{METHOD_ITGAN} size {size} latent seed {i}"));
            let (condensed, logs) = split_and_run(gen, assets.pool, assets.train, &inverted, &cfg.condense, sl)?;
            runs[2].extend(train_over_seeds(&prepare(materialize(gen, &condensed)?, &cfg.eval)?, assets.test, &cfg.eval, seed, Some(sl))?);

            out.inversion.push(summary);
            out.condense_logs.extend(logs);
            for (method, latents) in [(METHOD_RANDOM, random), (METHOD_INVERSION, inverted), (METHOD_ITGAN, condensed)] {
                out.latents.push(LatentRecord {
                    method: method.to_string(),
                    size_per_class: size,
                    seed_latent: sl,
                    latents,
                });
            }
        }
        let [r, v, t] = runs;
        let epochs = cfg.eval.train.epochs;
        out.results.push(ExperimentResult::from_runs(METHOD_RANDOM, cfg.eval.arch, Some(size), epochs, r, eval_hash.clone()));
        out.results.push(ExperimentResult::from_runs(METHOD_INVERSION, cfg.eval.arch, Some(size), epochs, v, inv_hash.clone()));
        out.results.push(ExperimentResult::from_runs(METHOD_ITGAN, cfg.eval.arch, Some(size), epochs, t, itgan_hash.clone()));
    }
    Ok(out)
}

/// Trains each architecture on the images of `latents`.
pub fn cross_arch_eval(gen: &Generator, latents: &LatentSet, test: &ImageSet, archs: &[Arch], cfg: &EvalConfig, seed: u64, seed_latent: Option<u64>) -> Result<Vec<ExperimentResult>> {
    let set = prepare(materialize(gen, latents)?, cfg)?;
    let size = latents.len() / latents.classes.max(1);
    archs
        .iter()
        .map(|&arch| {
            let arch_cfg = EvalConfig { arch, ..cfg.clone() };
            arch_cfg.validate()?;
            let runs = train_over_seeds(&set, test, &arch_cfg, seed, seed_latent)?;
            Ok(ExperimentResult::from_runs(METHOD_ITGAN, arch, Some(size), cfg.train.epochs, runs, config_hash(&arch_cfg)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Latents per class for every ablation run.
    pub size_per_class: usize,
    /// Numbers of groups per class compared in the split study.
    pub split_groups: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub sources: Vec<EmbedderSource>,
    /// Baseline condensation settings; the studies vary one field each.
    pub condense: CondenseConfig,
    /// Learning rate for the gradient objective.
    pub gradient_lr: f64,
    pub inversion: InversionConfig,
    pub eval: EvalConfig,
    /// Allowed shortfall (in accuracy points) for directional trends.
    pub slack_points: f64,
    /// Maximum gap (points) for the objective comparability check.
    pub objective_gap_points: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            size_per_class: 400,
            split_groups: vec![1, 2, 4, 5],
            lambdas: vec![0.0, 0.001, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0],
            sources: vec![EmbedderSource::RandomInit, EmbedderSource::TopBin, EmbedderSource::All],
            condense: CondenseConfig {
                embedder: EmbedderSource::RandomInit,
                ..CondenseConfig::default()
            },
            gradient_lr: 0.001,
            inversion: InversionConfig::default(),
            eval: EvalConfig {
                train_seeds: 1,
                ..EvalConfig::default()
            },
            slack_points: 0.5,
            objective_gap_points: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub study: String,
    pub setting: String,
    pub result: Option<ExperimentResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub entries: Vec<AblationEntry>,
    pub trends: Vec<TrendCheck>,
}

impl AblationReport {
    pub fn passed(&self) -> usize {
        self.trends.iter().filter(|t| t.passed).count()
    }

    fn mean_of(&self, study: &str, setting: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.study == study && e.setting == setting)
            .and_then(|e| e.result.as_ref())
            .map(|r| r.mean)
    }
}

struct Setting {
    study: &'static str,
    name: String,
    cfg: CondenseConfig,
}

fn ablation_settings(cfg: &AblationConfig) -> Vec<Setting> {
    let base = &cfg.condense;
    let mut out = Vec::new();
    let max_groups = cfg.split_groups.iter().copied().max().unwrap_or(1);
    for obj in [Objective::Distribution, Objective::Gradient] {
        let lr = if obj == Objective::Gradient { cfg.gradient_lr } else { base.lr };
        out.push(Setting {
            study: "objective",
            name: obj.name().into(),
            cfg: CondenseConfig { objective: obj, lr, lambda: 0.0, group_size: 0, ..base.clone() },
        });
    }
    for &g in &cfg.split_groups {
        out.push(Setting {
            study: "split",
            name: format!("{g}x{}", cfg.size_per_class / g.max(1)),
            cfg: CondenseConfig {
                lambda: 0.0,
                group_size: if g <= 1 { 0 } else { cfg.size_per_class / g },
                strategy: SplitStrategy::Fixed,
                ..base.clone()
            },
        });
    }
    for strategy in [SplitStrategy::Fixed, SplitStrategy::Random] {
        for &lambda in &cfg.lambdas {
            out.push(Setting {
                study: "strategy",
                name: format!("{}@{lambda}", strategy.name()),
                cfg: CondenseConfig {
                    lambda,
                    group_size: if max_groups <= 1 { 0 } else { cfg.size_per_class / max_groups },
                    strategy,
                    ..base.clone()
                },
            });
        }
    }
    for source in &cfg.sources {
        out.push(Setting {
            study: "embedder",
            name: source.name(),
            cfg: CondenseConfig { embedder: *source, lambda: 0.0, group_size: 0, ..base.clone() },
        });
    }
    out
}

/// Runs the objective, split-size, split-strategy × λ and embedder-source
/// studies on inverted initial latents (one set per latent seed, shared by
/// all settings), then evaluates the directional trends. Failed runs are
/// recorded and the suite continues.
pub fn ablation_suite(assets: &Assets, cfg: &AblationConfig, seed: u64, mut progress: impl FnMut(&str)) -> Result<AblationReport> {
    cfg.eval.validate()?;
    let gen = assets.generator;
    let mut inits = Vec::with_capacity(cfg.eval.latent_seeds);
    for i in 0..cfg.eval.latent_seeds {
        let sl = cfg.eval.latent_seed(seed, i);
        progress(&format!("inversion latent seed {i}"));
        let (z, _) = invert_all(gen, assets.inversion_embedder, assets.train, Some(cfg.size_per_class), &cfg.inversion, sl)?;
        inits.push((sl, z));
    }
    let mut entries = Vec::new();
    let mut done: Vec<(CondenseConfig, ExperimentResult)> = Vec::new();
    for setting in ablation_settings(cfg) {
        progress(&format!("{} {}", setting.study, setting.name));
        if let Some((_, prev)) = done.iter().find(|(c, _)| *c == setting.cfg) {
            entries.push(AblationEntry {
                study: setting.study.into(),
                setting: setting.name,
                result: Some(prev.clone()),
                error: None,
            });
            continue;
        }
        let run = || -> Result<ExperimentResult> {
            let mut runs = Vec::new();
            for (sl, init) in &inits {
                let (z, _) = split_and_run(gen, assets.pool, assets.train, init, &setting.cfg, *sl)?;
                let set = prepare(materialize(gen, &z)?, &cfg.eval)?;
                runs.extend(train_over_seeds(&set, assets.test, &cfg.eval, seed, Some(*sl))?);
            }
            Ok(ExperimentResult::from_runs(
                METHOD_ITGAN,
                cfg.eval.arch,
                Some(cfg.size_per_class),
                cfg.eval.train.epochs,
                runs,
                config_hash(&(&setting.cfg, &cfg.eval)),
            ))
        };
        match run() {
            Ok(result) => {
                done.push((setting.cfg.clone(), result.clone()));
                entries.push(AblationEntry {
                    study: setting.study.into(),
                    setting: setting.name,
                    result: Some(result),
                    error: None,
                });
            }
            Err(e) => entries.push(AblationEntry {
                study: setting.study.into(),
                setting: setting.name,
                result: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let mut report = AblationReport { entries, trends: Vec::new() };
    report.trends = trends(&report, cfg);
    Ok(report)
}

fn directional(name: &str, hi: Option<f64>, lo: Option<f64>, slack: f64, hi_name: &str, lo_name: &str) -> TrendCheck {
    match (hi, lo) {
        (Some(a), Some(b)) => TrendCheck {
            name: name.into(),
            passed: 100.0 * a >= 100.0 * b - slack,
            detail: format!("{hi_name} {:.2} vs {lo_name} {:.2} (slack {slack} pt)", 100.0 * a, 100.0 * b),
        },
        _ => TrendCheck {
            name: name.into(),
            passed: false,
            detail: format!("missing result for {hi_name} or {lo_name}"),
        },
    }
}

fn trends(report: &AblationReport, cfg: &AblationConfig) -> Vec<TrendCheck> {
    let slack = cfg.slack_points;
    let min_g = cfg.split_groups.iter().copied().min().unwrap_or(1);
    let max_g = cfg.split_groups.iter().copied().max().unwrap_or(1);
    let split_name = |g: usize| format!("{g}x{}", cfg.size_per_class / g.max(1));
    let top = EmbedderSource::TopBin.name();
    let random = EmbedderSource::RandomInit.name();
    let mut out = vec![
        directional(
            "split size: fewer, larger groups do at least as well",
            report.mean_of("split", &split_name(min_g)),
            report.mean_of("split", &split_name(max_g)),
            slack,
            &split_name(min_g),
            &split_name(max_g),
        ),
        directional(
            "fixed splitting >= random splitting at lambda 0",
            report.mean_of("strategy", "fixed@0"),
            report.mean_of("strategy", "random@0"),
            slack,
            "fixed",
            "random",
        ),
        directional(
            "top-bin embedders >= random-init embedders",
            report.mean_of("embedder", &top),
            report.mean_of("embedder", &random),
            slack,
            &top,
            &random,
        ),
    ];
    let gap = cfg.objective_gap_points;
    out.push(match (report.mean_of("objective", "distribution"), report.mean_of("objective", "gradient")) {
        (Some(d), Some(g)) => TrendCheck {
            name: "distribution and gradient objectives are comparable".into(),
            passed: (100.0 * (d - g)).abs() <= gap,
            detail: format!("distribution {:.2} vs gradient {:.2} (max gap {gap} pt)", 100.0 * d, 100.0 * g),
        },
        _ => TrendCheck {
            name: "distribution and gradient objectives are comparable".into(),
            passed: false,
            detail: "missing objective result".into(),
        },
    });
    out
}
