use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::nets::{Arch, Classifier, ImageSpec};
use super::weights::ModelWeights;
use crate::data::ImageSet;
use crate::error::{invalid, CoreError, Result};
use crate::rng::{self, Rng};
use crate::train::{accuracy, train_classifier, TrainConfig};

/// A convnet classifier (embedder + head) and its validation accuracy.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub net: Classifier,
    pub val_acc: f64,
    pub label: String,
}

/// Embedders grouped into accuracy bins. Bin `i` is
/// `[edges[i], edges[i+1])`, the last bin also includes its right edge.
#[derive(Debug, Clone)]
pub struct SnapshotPool {
    pub snapshots: Vec<Snapshot>,
    pub bin_edges: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EmbedderSource {
    RandomInit,
    /// Snapshots with `lo <= val_acc < hi` (`hi` inclusive when it is 1).
    BinRange { lo: f64, hi: f64 },
    /// The highest non-empty bin.
    TopBin,
    All,
}

impl EmbedderSource {
    pub fn name(&self) -> String {
        match self {
            EmbedderSource::RandomInit => "random-init".into(),
            EmbedderSource::BinRange { lo, hi } => format!("bin:{lo}-{hi}"),
            EmbedderSource::TopBin => "top-bin".into(),
            EmbedderSource::All => "all".into(),
        }
    }

    pub fn parse(s: &str) -> Result<EmbedderSource> {
        match s {
            "random-init" => Ok(EmbedderSource::RandomInit),
            "top-bin" => Ok(EmbedderSource::TopBin),
            "all" => Ok(EmbedderSource::All),
            other => {
                let range = other
                    .strip_prefix("bin:")
                    .and_then(|r| r.split_once('-'))
                    .and_then(|(a, b)| Some((a.parse::<f64>().ok()?, b.parse::<f64>().ok()?)));
                match range {
                    Some((lo, hi)) if lo < hi => Ok(EmbedderSource::BinRange { lo, hi }),
                    _ => Err(CoreError::Config(format!(
                        "embedder source must be random-init, top-bin, all or bin:LO-HI, got {other}"
                    ))),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    /// Total number of snapshots M.
    pub snapshots: usize,
    /// Epochs after which a training run contributes a snapshot; epoch 0 is
    /// the untrained network.
    pub snapshot_epochs: Vec<usize>,
    pub width: usize,
    pub bin_edges: Vec<f64>,
    pub train: TrainConfig,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            snapshots: 24,
            snapshot_epochs: vec![0, 1, 2, 4, 8, 12],
            width: 128,
            bin_edges: vec![0.0, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 1.0],
            train: TrainConfig {
                epochs: 12,
                augment: None,
                ..TrainConfig::default()
            },
        }
    }
}

fn check_edges(edges: &[f64]) -> Result<()> {
    let ordered = edges.windows(2).all(|w| w[0] < w[1]);
    if edges.len() < 2 || !ordered || edges[0] != 0.0 || edges[edges.len() - 1] != 1.0 {
        return Err(CoreError::Config(format!(
            "bin edges must increase strictly from 0 to 1, got {edges:?}"
        )));
    }
    Ok(())
}

impl SnapshotPool {
    pub fn new(bin_edges: Vec<f64>) -> Result<SnapshotPool> {
        check_edges(&bin_edges)?;
        Ok(SnapshotPool { snapshots: Vec::new(), bin_edges })
    }

    pub fn bin_count(&self) -> usize {
        self.bin_edges.len() - 1
    }

    pub fn bin_of(&self, acc: f64) -> usize {
        let last = self.bin_count() - 1;
        (0..last).find(|&b| acc < self.bin_edges[b + 1]).unwrap_or(last)
    }

    /// Snapshot indices per bin.
    pub fn bins(&self) -> Vec<Vec<usize>> {
        let mut bins = vec![Vec::new(); self.bin_count()];
        for (i, s) in self.snapshots.iter().enumerate() {
            bins[self.bin_of(s.val_acc)].push(i);
        }
        bins
    }

    pub fn select(&self, source: &EmbedderSource) -> Result<Vec<usize>> {
        let picked: Vec<usize> = match *source {
            EmbedderSource::RandomInit => Vec::new(),
            EmbedderSource::All => (0..self.snapshots.len()).collect(),
            EmbedderSource::TopBin => self.bins().into_iter().rev().find(|b| !b.is_empty()).unwrap_or_default(),
            EmbedderSource::BinRange { lo, hi } => (0..self.snapshots.len())
                .filter(|&i| {
                    let a = self.snapshots[i].val_acc;
                    a >= lo && (a < hi || (hi >= 1.0 && a <= hi))
                })
                .collect(),
        };
        if picked.is_empty() && *source != EmbedderSource::RandomInit {
            return Err(invalid(format!("no snapshot in {}", source.name())));
        }
        Ok(picked)
    }

    /// Snapshot with the highest validation accuracy (first on ties).
    pub fn best(&self) -> Result<&Snapshot> {
        let mut best: Option<&Snapshot> = None;
        for s in &self.snapshots {
            if best.is_none_or(|b| s.val_acc > b.val_acc) {
                best = Some(s);
            }
        }
        best.ok_or_else(|| invalid("snapshot pool is empty"))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let mut all = ModelWeights::new();
        let mut entries = Vec::new();
        for (i, s) in self.snapshots.iter().enumerate() {
            all.extend_prefixed(&format!("s{i}/"), &s.net.weights)?;
            entries.push(SnapshotMeta {
                label: s.label.clone(),
                val_acc: s.val_acc,
                width: s.net.width,
            });
        }
        let spec = self.snapshots.first().map(|s| s.net.spec);
        let manifest = PoolManifest {
            bin_edges: self.bin_edges.clone(),
            spec,
            snapshots: entries,
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| invalid(e.to_string()))?;
        let path = dir.join("pool.json");
        std::fs::write(&path, json + "\n").map_err(|e| CoreError::io(&path, e))?;
        all.save(&dir.join("pool.itgw"))
    }

    pub fn load(dir: &Path) -> Result<SnapshotPool> {
        let path = dir.join("pool.json");
        let text = std::fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
        let manifest: PoolManifest = serde_json::from_str(&text).map_err(|e| CoreError::Format {
            what: "pool manifest",
            msg: e.to_string(),
        })?;
        check_edges(&manifest.bin_edges)?;
        let all = ModelWeights::load(&dir.join("pool.itgw"))?;
        let mut snapshots = Vec::new();
        for (i, meta) in manifest.snapshots.into_iter().enumerate() {
            let spec = manifest.spec.ok_or_else(|| invalid("pool manifest lacks an image spec"))?;
            let net = Classifier {
                arch: Arch::ConvNet,
                spec,
                width: meta.width,
                weights: all.with_prefix_stripped(&format!("s{i}/")),
            };
            snapshots.push(Snapshot {
                net,
                val_acc: meta.val_acc,
                label: meta.label,
            });
        }
        Ok(SnapshotPool {
            snapshots,
            bin_edges: manifest.bin_edges,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotMeta {
    label: String,
    val_acc: f64,
    width: usize,
}

#[derive(Serialize, Deserialize)]
struct PoolManifest {
    bin_edges: Vec<f64>,
    spec: Option<ImageSpec>,
    snapshots: Vec<SnapshotMeta>,
}

/// Trains convnet classifiers on `train`, keeping snapshots after the
/// configured epochs until `cfg.snapshots` have been collected, and scores
/// each on `val`.
pub fn pool_build(train: &ImageSet, val: &ImageSet, cfg: &PoolConfig, seed: u64) -> Result<SnapshotPool> {
    if cfg.snapshots == 0 {
        return Err(CoreError::Config("pool needs at least one snapshot".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(invalid("pool_build needs non-empty train and validation sets"));
    }
    let mut epochs = cfg.snapshot_epochs.clone();
    epochs.sort_unstable();
    epochs.dedup();
    if epochs.is_empty() {
        return Err(CoreError::Config("pool.snapshot_epochs must not be empty".into()));
    }
    let mut pool = SnapshotPool::new(cfg.bin_edges.clone())?;
    let mut run = 0u64;
    while pool.snapshots.len() < cfg.snapshots {
        let net_seed = rng::derive(seed, run);
        let mut net = Classifier::init(Arch::ConvNet, train.spec, cfg.width, net_seed)?;
        let remaining = cfg.snapshots - pool.snapshots.len();
        let wanted: Vec<usize> = epochs.iter().copied().take(remaining).collect();
        let take = |epoch: usize, net: &Classifier, pool: &mut SnapshotPool| -> Result<()> {
            if wanted.contains(&epoch) {
                pool.snapshots.push(Snapshot {
                    net: net.clone(),
                    val_acc: accuracy(net, val)?,
                    label: format!("net{run}@epoch{epoch}"),
                });
            }
            Ok(())
        };
        take(0, &net, &mut pool)?;
        let last = *wanted.last().expect("non-empty");
        if last > 0 {
            let train_cfg = TrainConfig {
                epochs: last,
                ..cfg.train.clone()
            };
            train_classifier(&mut net, train, None, &train_cfg, net_seed, |epoch, net| take(epoch, net, &mut pool))?;
        }
        run += 1;
    }
    Ok(pool)
}

/// Uniform draw from the selected group; `RandomInit` returns a freshly
/// initialized convnet derived from `rng`.
pub fn pool_sample(pool: &SnapshotPool, source: &EmbedderSource, spec: ImageSpec, width: usize, rng: &mut Rng) -> Result<Classifier> {
    Ok(pool_draw(pool, source, spec, width, rng)?.0)
}

/// [`pool_sample`] that also reports the drawn snapshot's index.
pub fn pool_draw(pool: &SnapshotPool, source: &EmbedderSource, spec: ImageSpec, width: usize, rng: &mut Rng) -> Result<(Classifier, Option<usize>)> {
    match source {
        EmbedderSource::RandomInit => Ok((Classifier::init(Arch::ConvNet, spec, width, rng.gen())?, None)),
        other => {
            let picked = pool.select(other)?;
            let i = picked[rng.gen_range(0..picked.len())];
            Ok((pool.snapshots[i].net.clone(), Some(i)))
        }
    }
}
