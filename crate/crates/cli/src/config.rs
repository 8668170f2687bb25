//! Flat dotted-key run configuration.
//!
//! A config is a set of `key = value` pairs drawn from a fixed registry.
//! Values are normalized on entry (numbers re-rendered, enum names checked)
//! so that the canonical text, and therefore the hash, does not depend on
//! how a value was spelled.

use std::collections::BTreeMap;
use std::path::Path;

use condensegan_core::augment::{AugKind, AugmentConfig};
use condensegan_core::condense::{CondenseConfig, Objective, SplitStrategy};
use condensegan_core::data::ShapeStyle;
use condensegan_core::eval::{AblationConfig, CompareConfig, EvalConfig};
use condensegan_core::gan::GanTrainConfig;
use condensegan_core::inversion::InversionConfig;
use condensegan_core::models::{Arch, EmbedderSource, PoolConfig};
use condensegan_core::train::TrainConfig;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Copy)]
enum Kind {
    Usize,
    U64,
    F64,
    Bool,
    Text(fn(&str) -> Result<String>),
    UsizeList,
    F64List,
    TextList(fn(&str) -> Result<String>),
}

struct Key {
    name: &'static str,
    kind: Kind,
    desk: &'static str,
    full: &'static str,
    doc: &'static str,
}

fn preset_name(s: &str) -> Result<String> {
    match s {
        "desk" | "full" => Ok(s.to_string()),
        _ => Err(CliError::Config(format!("preset must be desk or full, got {s}"))),
    }
}

fn arch_name(s: &str) -> Result<String> {
    Ok(Arch::parse(s)?.name().to_string())
}

fn objective_name(s: &str) -> Result<String> {
    Ok(Objective::parse(s)?.name().to_string())
}

fn strategy_name(s: &str) -> Result<String> {
    Ok(SplitStrategy::parse(s)?.name().to_string())
}

fn source_name(s: &str) -> Result<String> {
    Ok(EmbedderSource::parse(s)?.name())
}

fn aug_name(s: &str) -> Result<String> {
    Ok(AugKind::parse(s)?.name().to_string())
}

macro_rules! key {
    ($name:literal, $kind:expr, $desk:expr, $full:expr, $doc:literal) => {
        Key {
            name: $name,
            kind: $kind,
            desk: $desk,
            full: $full,
            doc: $doc,
        }
    };
}

use Kind::*;

const AUG_OPS: &str = "flip-h,crop-shift,scale,rotate,cutout,brightness";

#[rustfmt::skip]
const KEYS: &[Key] = &[
    key!("preset", Text(preset_name), "desk", "full", "base preset the remaining defaults come from"),
    key!("seed", U64, "0", "0", "global seed; every stage derives its streams from it"),
    key!("deterministic", Bool, "true", "true", "omit wall-time from reports so reruns are byte-identical"),

    key!("data.classes", Usize, "10", "10", "number of shape classes"),
    key!("data.per_class", Usize, "500", "500", "images generated per class before the 80/10/10 split"),
    key!("data.side", Usize, "16", "16", "image side length"),
    key!("data.channels", Usize, "1", "1", "1 (grey) or 3 (tinted)"),

    key!("gan.epochs", Usize, "6", "30", "generator pretraining epochs"),
    key!("gan.batch", Usize, "64", "64", ""),
    key!("gan.lr_g", F64, "0.0002", "0.0002", ""),
    key!("gan.lr_d", F64, "0.0002", "0.0002", ""),
    key!("gan.beta1", F64, "0.5", "0.5", ""),
    key!("gan.beta2", F64, "0.999", "0.999", ""),
    key!("gan.d_z", Usize, "64", "64", "latent dimension"),
    key!("gan.g_width", Usize, "64", "128", ""),
    key!("gan.d_width", Usize, "32", "64", ""),
    key!("gan.checkpoint_every", Usize, "0", "10", "0 disables intermediate checkpoints"),
    key!("gan.calibration_samples", Usize, "2000", "2000", "latents used to freeze the generator's normalization statistics"),

    key!("pool.snapshots", Usize, "12", "24", "embedder snapshots kept"),
    key!("pool.snapshot_epochs", UsizeList, "0,1,2,4", "0,1,2,4,8,12", "epochs after which a snapshot is taken"),
    key!("pool.width", Usize, "32", "128", ""),
    key!("pool.bin_edges", F64List, "0,0.2,0.3,0.4,0.5,0.6,0.7,1", "0,0.2,0.3,0.4,0.5,0.6,0.7,1", "validation-accuracy bins"),
    key!("pool.epochs", Usize, "4", "12", ""),
    key!("pool.batch", Usize, "32", "64", ""),
    key!("pool.lr", F64, "0.05", "0.01", ""),
    key!("pool.lr_late", F64, "0.005", "0.001", ""),

    key!("augment.ops", TextList(aug_name), AUG_OPS, AUG_OPS, "enabled augmentation kinds"),
    key!("augment.shift_px", Usize, "2", "2", ""),
    key!("augment.scale_min", F64, "0.8", "0.8", ""),
    key!("augment.scale_max", F64, "1.2", "1.2", ""),
    key!("augment.rotate_deg", F64, "15", "15", ""),
    key!("augment.brightness", F64, "0.3", "0.3", ""),

    key!("inversion.size_per_class", Usize, "50", "50", "real images inverted per class; 0 inverts all"),
    key!("inversion.steps", Usize, "50", "400", ""),
    key!("inversion.lr", F64, "0.05", "0.05", ""),
    key!("inversion.lambda_pixel", F64, "1", "1", "weight of the pixel term"),
    key!("inversion.restarts", Usize, "1", "2", ""),
    key!("inversion.batch", Usize, "64", "64", ""),

    key!("condense.iterations", Usize, "100", "5000", "K"),
    key!("condense.lr", F64, "0.02", "0.001", ""),
    key!("condense.lambda", F64, "0", "0", "weight of the pairwise regularizer"),
    key!("condense.objective", Text(objective_name), "distribution", "distribution", ""),
    key!("condense.batch_z", Usize, "50", "64", "latents per class per iteration"),
    key!("condense.batch_real", Usize, "64", "256", "real images per class per iteration"),
    key!("condense.group_size", Usize, "0", "0", "latents per group; 0 keeps each class whole"),
    key!("condense.strategy", Text(strategy_name), "fixed", "fixed", ""),
    key!("condense.embedder", Text(source_name), "all", "all", "random-init, top-bin, all or bin:LO-HI"),
    key!("condense.embedder_width", Usize, "32", "128", ""),
    key!("condense.augment", Bool, "true", "true", ""),
    key!("condense.gradient_lr", F64, "0.002", "0.001", "learning rate used instead of condense.lr for the gradient objective"),

    key!("eval.arch", Text(arch_name), "convnet", "convnet", ""),
    key!("eval.archs", TextList(arch_name), "convnet,vggish,resnetish", "convnet,vggish,resnetish", "architectures for cross-architecture evaluation"),
    key!("eval.width", Usize, "16", "128", ""),
    key!("eval.epochs", Usize, "20", "60", "must be even"),
    key!("eval.batch", Usize, "32", "64", ""),
    key!("eval.lr", F64, "0.05", "0.01", ""),
    key!("eval.lr_late", F64, "0.005", "0.001", ""),
    key!("eval.momentum", F64, "0.9", "0.9", ""),
    key!("eval.augment", Bool, "true", "true", ""),
    key!("eval.quantize", Bool, "false", "false", "round synthetic images to bytes before training"),
    key!("eval.sizes", UsizeList, "50", "10,20,50,100,200,400", "latents per class compared"),
    key!("eval.latent_seeds", Usize, "3", "3", ""),
    key!("eval.train_seeds", Usize, "3", "3", ""),
    key!("eval.include_real", Bool, "true", "true", "also train on the full real train split"),

    key!("ablate.size_per_class", Usize, "50", "400", ""),
    key!("ablate.iterations", Usize, "50", "5000", "K for every ablation setting"),
    key!("ablate.split_groups", UsizeList, "1,5", "1,2,4,5", "groups per class compared in the split study"),
    key!("ablate.lambdas", F64List, "0,0.1", "0,0.001,0.01,0.02,0.05,0.1,0.2,0.5,1", ""),
    key!("ablate.sources", TextList(source_name), "random-init,top-bin", "random-init,top-bin,all", ""),
    key!("ablate.embedder", Text(source_name), "random-init", "random-init", "embedder source of the baseline setting"),
    key!("ablate.latent_seeds", Usize, "3", "3", ""),
    key!("ablate.train_seeds", Usize, "1", "1", ""),
    key!("ablate.slack_points", F64, "0.5", "0.5", ""),
    key!("ablate.objective_gap_points", F64, "2", "2", ""),
];

fn lookup(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

fn bad(key: &str, value: &str, what: &str) -> CliError {
    CliError::Config(format!("{key}: expected {what}, got {value:?}"))
}

fn normalize(key: &Key, raw: &str) -> Result<String> {
    let v = raw.trim();
    let one = |kind: Kind, item: &str| -> Result<String> {
        match kind {
            Usize | UsizeList => item.parse::<usize>().map(|x| x.to_string()).map_err(|_| bad(key.name, item, "a non-negative integer")),
            U64 => item.parse::<u64>().map(|x| x.to_string()).map_err(|_| bad(key.name, item, "a non-negative integer")),
            F64 | F64List => match item.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x.to_string()),
                _ => Err(bad(key.name, item, "a finite number")),
            },
            Bool => match item {
                "true" | "1" | "yes" | "on" => Ok("true".into()),
                "false" | "0" | "no" | "off" => Ok("false".into()),
                _ => Err(bad(key.name, item, "true or false")),
            },
            Text(f) | TextList(f) => f(item).map_err(|e| CliError::Config(format!("{}: {}", key.name, e.message()))),
        }
    };
    match key.kind {
        UsizeList | F64List | TextList(_) => {
            let items: Vec<&str> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            if items.is_empty() {
                return Err(bad(key.name, v, "a non-empty comma-separated list"));
            }
            Ok(items.into_iter().map(|i| one(key.kind, i)).collect::<Result<Vec<_>>>()?.join(","))
        }
        kind => one(kind, v),
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<RunConfig> {
        let full = preset_name(name)? == "full";
        let values = KEYS
            .iter()
            .map(|k| (k.name.to_string(), if full { k.full } else { k.desk }.to_string()))
            .collect();
        Ok(RunConfig { values })
    }

    /// Layers `pairs` over the preset named by a `preset` pair (desk when
    /// absent). Later pairs win.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<RunConfig> {
        let preset = pairs.iter().rev().find(|(k, _)| k == "preset").map(|(_, v)| v.as_str()).unwrap_or("desk");
        let mut cfg = RunConfig::preset(preset.trim())?;
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::missing(path, e))?;
        RunConfig::from_pairs(&parse_pairs(&text, &path.display().to_string())?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let def = lookup(key).ok_or_else(|| CliError::Config(format!("unknown config key {key}")))?;
        let v = normalize(def, value)?;
        self.values.insert(key.to_string(), v);
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("config key {key} is not registered"))
    }

    /// One `key = value` line per key in sorted order.
    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn describe() -> String {
        KEYS.iter()
            .map(|k| {
                let doc = if k.doc.is_empty() { String::new() } else { format!("  # {}", k.doc) };
                format!("{} = {}{doc}\n", k.name, k.desk)
            })
            .collect()
    }

    fn usize(&self, key: &str) -> usize {
        self.get(key).parse().expect("normalized")
    }

    fn f64(&self, key: &str) -> f64 {
        self.get(key).parse().expect("normalized")
    }

    fn bool(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    fn list(&self, key: &str) -> Vec<&str> {
        self.get(key).split(',').collect()
    }

    fn usize_list(&self, key: &str) -> Vec<usize> {
        self.list(key).iter().map(|s| s.parse().expect("normalized")).collect()
    }

    fn f64_list(&self, key: &str) -> Vec<f64> {
        self.list(key).iter().map(|s| s.parse().expect("normalized")).collect()
    }

    pub fn seed(&self) -> u64 {
        self.get("seed").parse().expect("normalized")
    }

    pub fn deterministic(&self) -> bool {
        self.bool("deterministic")
    }

    pub fn classes(&self) -> usize {
        self.usize("data.classes")
    }

    pub fn per_class(&self) -> usize {
        self.usize("data.per_class")
    }

    pub fn side(&self) -> usize {
        self.usize("data.side")
    }

    pub fn channels(&self) -> usize {
        self.usize("data.channels")
    }

    pub fn shape_style(&self) -> ShapeStyle {
        ShapeStyle::default()
    }

    pub fn augment(&self) -> Result<AugmentConfig> {
        let ops = self.list("augment.ops").iter().map(|s| AugKind::parse(s)).collect::<condensegan_core::Result<Vec<_>>>()?;
        let cfg = AugmentConfig {
            ops,
            shift_px: i32::try_from(self.usize("augment.shift_px")).map_err(|_| CliError::Config("augment.shift_px too large".into()))?,
            scale: (self.f64("augment.scale_min"), self.f64("augment.scale_max")),
            rotate_deg: self.f64("augment.rotate_deg"),
            brightness: self.f64("augment.brightness"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn gan(&self) -> Result<GanTrainConfig> {
        let cfg = GanTrainConfig {
            epochs: self.usize("gan.epochs"),
            batch: self.usize("gan.batch"),
            lr_g: self.f64("gan.lr_g"),
            lr_d: self.f64("gan.lr_d"),
            beta1: self.f64("gan.beta1"),
            beta2: self.f64("gan.beta2"),
            d_z: self.usize("gan.d_z"),
            g_width: self.usize("gan.g_width"),
            d_width: self.usize("gan.d_width"),
            checkpoint_every: self.usize("gan.checkpoint_every"),
            calibration_samples: self.usize("gan.calibration_samples"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pool(&self) -> Result<PoolConfig> {
        let cfg = PoolConfig {
            snapshots: self.usize("pool.snapshots"),
            snapshot_epochs: self.usize_list("pool.snapshot_epochs"),
            width: self.usize("pool.width"),
            bin_edges: self.f64_list("pool.bin_edges"),
            train: TrainConfig {
                epochs: self.usize("pool.epochs"),
                batch: self.usize("pool.batch"),
                lr: self.f64("pool.lr"),
                lr_late: self.f64("pool.lr_late"),
                augment: None,
                ..TrainConfig::default()
            },
        };
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn inversion(&self) -> Result<InversionConfig> {
        let cfg = InversionConfig {
            steps: self.usize("inversion.steps"),
            lr: self.f64("inversion.lr"),
            lambda_pixel: self.f64("inversion.lambda_pixel"),
            restarts: self.usize("inversion.restarts"),
            batch: self.usize("inversion.batch"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `None` inverts every training image.
    pub fn inversion_size(&self) -> Option<usize> {
        Some(self.usize("inversion.size_per_class")).filter(|&s| s > 0)
    }

    pub fn condense(&self) -> Result<CondenseConfig> {
        let objective = Objective::parse(self.get("condense.objective"))?;
        let lr = match objective {
            Objective::Distribution => self.f64("condense.lr"),
            Objective::Gradient => self.f64("condense.gradient_lr"),
        };
        let cfg = CondenseConfig {
            iterations: self.usize("condense.iterations"),
            lr,
            lambda: self.f64("condense.lambda"),
            objective,
            batch_z: self.usize("condense.batch_z"),
            batch_real: self.usize("condense.batch_real"),
            group_size: self.usize("condense.group_size"),
            strategy: SplitStrategy::parse(self.get("condense.strategy"))?,
            embedder: EmbedderSource::parse(self.get("condense.embedder"))?,
            embedder_width: self.usize("condense.embedder_width"),
            augment: if self.bool("condense.augment") { Some(self.augment()?) } else { None },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        let cfg = EvalConfig {
            arch: Arch::parse(self.get("eval.arch"))?,
            width: self.usize("eval.width"),
            train: TrainConfig {
                epochs: self.usize("eval.epochs"),
                batch: self.usize("eval.batch"),
                lr: self.f64("eval.lr"),
                lr_late: self.f64("eval.lr_late"),
                momentum: self.f64("eval.momentum"),
                augment: if self.bool("eval.augment") { Some(self.augment()?) } else { None },
            },
            latent_seeds: self.usize("eval.latent_seeds"),
            train_seeds: self.usize("eval.train_seeds"),
            quantize: self.bool("eval.quantize"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_archs(&self) -> Result<Vec<Arch>> {
        Ok(self.list("eval.archs").iter().map(|s| Arch::parse(s)).collect::<condensegan_core::Result<_>>()?)
    }

    pub fn compare(&self) -> Result<CompareConfig> {
        Ok(CompareConfig {
            sizes: self.usize_list("eval.sizes"),
            include_real: self.bool("eval.include_real"),
            inversion: self.inversion()?,
            condense: self.condense()?,
            eval: self.eval()?,
        })
    }

    pub fn ablation(&self) -> Result<AblationConfig> {
        let base = CondenseConfig {
            objective: Objective::Distribution,
            lr: self.f64("condense.lr"),
            embedder: EmbedderSource::parse(self.get("ablate.embedder"))?,
            iterations: self.usize("ablate.iterations"),
            ..self.condense()?
        };
        let size = self.usize("ablate.size_per_class");
        let groups = self.usize_list("ablate.split_groups");
        if size == 0 || groups.iter().any(|&g| g == 0 || g > size) {
            return Err(CliError::Config(format!("ablate.split_groups {groups:?} must lie in 1..={size}")));
        }
        Ok(AblationConfig {
            size_per_class: size,
            split_groups: groups,
            lambdas: self.f64_list("ablate.lambdas"),
            sources: self.list("ablate.sources").iter().map(|s| EmbedderSource::parse(s)).collect::<condensegan_core::Result<_>>()?,
            condense: base,
            gradient_lr: self.f64("condense.gradient_lr"),
            inversion: self.inversion()?,
            eval: EvalConfig {
                latent_seeds: self.usize("ablate.latent_seeds"),
                train_seeds: self.usize("ablate.train_seeds"),
                ..self.eval()?
            },
            slack_points: self.f64("ablate.slack_points"),
            objective_gap_points: self.f64("ablate.objective_gap_points"),
        })
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
