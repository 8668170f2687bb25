//! The pipeline stages. Each reads its inputs from earlier stage
//! directories of the same run (or from explicit paths) and writes a fresh
//! stage directory.

use std::path::{Path, PathBuf};

use condensegan_core::condense::split_and_run;
use condensegan_core::data::{gen_shapes, Dataset, ImageSet};
use condensegan_core::eval::{ablation_suite, compare_methods, cross_arch_eval, Assets, ExperimentResult};
use condensegan_core::gan::pretrain;
use condensegan_core::inversion::{invert_all, InversionSummary, LatentSet};
use condensegan_core::models::{pool_build, Embedder, Generator, ModelWeights, SnapshotPool};
use condensegan_core::rng;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::rundir::Stage;

/// Labels mixed into the global seed, one per stage.
pub mod seeds {
    pub const DATA: u64 = 1;
    pub const GAN: u64 = 2;
    pub const POOL: u64 = 3;
    pub const INVERT: u64 = 4;
    pub const CONDENSE: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const ABLATE: u64 = 7;
}

/// Where a stage finds its inputs; unset fields default to the run's own
/// stage directories.
#[derive(Debug, Clone, Default)]
pub struct Inputs {
    pub data: Option<PathBuf>,
    pub generator: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub latents: Option<PathBuf>,
}

pub struct Ctx {
    pub run: PathBuf,
    pub cfg: RunConfig,
    pub inputs: Inputs,
    pub force: bool,
}

impl Ctx {
    fn seed(&self, label: u64) -> u64 {
        rng::derive(self.cfg.seed(), label)
    }

    fn stage(&self, name: &'static str) -> Result<Stage> {
        Stage::create(&self.run, name, &self.cfg, self.force)
    }

    fn data_dir(&self) -> PathBuf {
        self.inputs.data.clone().unwrap_or_else(|| self.run.join("data"))
    }

    fn split_path(&self, split: &str) -> PathBuf {
        self.data_dir().join(format!("{split}.itgd"))
    }

    fn generator_path(&self) -> PathBuf {
        self.inputs.generator.clone().unwrap_or_else(|| self.run.join("gan").join("generator.itgw"))
    }

    fn pool_dir(&self) -> PathBuf {
        self.inputs.pool.clone().unwrap_or_else(|| self.run.join("pool"))
    }

    fn init_path(&self) -> PathBuf {
        self.inputs.init.clone().unwrap_or_else(|| self.run.join("invert").join("latents.itgz"))
    }

    fn latents_path(&self) -> PathBuf {
        self.inputs.latents.clone().unwrap_or_else(|| self.run.join("condense").join("latents.itgz"))
    }

    fn load_split(&self, stage: &mut Stage, split: &str) -> Result<ImageSet> {
        let path = self.split_path(split);
        let ds = Dataset::load(&path).map_err(|e| CliError::reading(&path, e))?;
        stage.input(&format!("{split}.itgd"), &path)?;
        Ok(ds.to_image_set()?)
    }

    fn load_generator(&self, stage: &mut Stage, reals: &ImageSet) -> Result<Generator> {
        let path = self.generator_path();
        let w = ModelWeights::load(&path).map_err(|e| CliError::reading(&path, e))?;
        stage.input("generator.itgw", &path)?;
        let g = Generator::from_weights(w, reals.spec).map_err(|e| CliError::reading(&path, e))?;
        if !g.is_calibrated() {
            return Err(CliError::BadInput {
                path,
                msg: "generator has no calibrated normalization statistics".into(),
            });
        }
        Ok(g)
    }

    fn load_pool(&self, stage: &mut Stage) -> Result<SnapshotPool> {
        let dir = self.pool_dir();
        for f in ["pool.json", "pool.itgw"] {
            let p = dir.join(f);
            if !p.exists() {
                return Err(CliError::missing(&p, "no such file"));
            }
            stage.input(f, &p)?;
        }
        SnapshotPool::load(&dir).map_err(|e| CliError::reading(&dir, e))
    }

    fn load_latents(&self, stage: &mut Stage, path: &Path, label: &str) -> Result<LatentSet> {
        let z = LatentSet::load(path).map_err(|e| CliError::reading(path, e))?;
        stage.input(label, path)?;
        Ok(z)
    }
}

fn inversion_embedder(pool: &SnapshotPool) -> Result<Embedder> {
    Ok(pool.best()?.net.embedder()?)
}

fn check_spec(reals: &ImageSet, gen: &Generator, z: &LatentSet, path: &Path) -> Result<()> {
    if z.d_z != gen.d_z || z.classes != reals.spec.classes {
        return Err(CliError::BadInput {
            path: path.to_path_buf(),
            msg: format!("latents (d_z {}, {} classes) do not match the generator", z.d_z, z.classes),
        });
    }
    z.validate(Some(reals)).map_err(|e| CliError::reading(path, e))
}

pub fn dataset_gen(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let stage = ctx.stage("data")?;
    let ds = gen_shapes(cfg.classes(), cfg.per_class(), cfg.side(), cfg.channels(), &cfg.shape_style(), ctx.seed(seeds::DATA))?;
    let splits = ds.split();
    let mut counts = serde_json::Map::new();
    for (name, part) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        stage.write(&format!("{name}.itgd"), &part.to_bytes())?;
        counts.insert(name.into(), json!(part.len()));
    }
    stage.finish(json!({ "classes": ds.classes, "side": ds.height, "channels": ds.channels, "counts": counts }))
}

pub fn gan_pretrain(ctx: &Ctx) -> Result<()> {
    let gcfg = ctx.cfg.gan()?;
    let mut stage = ctx.stage("gan")?;
    let train = ctx.load_split(&mut stage, "train")?;
    let mut saved = Vec::new();
    let out = pretrain(&train, &gcfg, ctx.seed(seeds::GAN), |epoch, g, d| {
        saved.push((epoch, g.weights.to_bytes(), d.weights.to_bytes()));
        Ok(())
    })?;
    for (epoch, g, d) in saved {
        stage.write(&format!("checkpoints/e{epoch:04}-generator.itgw"), &g)?;
        stage.write(&format!("checkpoints/e{epoch:04}-discriminator.itgw"), &d)?;
    }
    for rec in &out.history {
        stage.event("epoch", json!({ "epoch": rec.epoch, "d_loss": rec.d_loss, "g_loss": rec.g_loss }))?;
    }
    stage.write("generator.itgw", &out.generator.weights.to_bytes())?;
    stage.write("discriminator.itgw", &out.discriminator.weights.to_bytes())?;
    let last = out.history.last();
    stage.finish(json!({
        "epochs": gcfg.epochs,
        "d_loss": last.map(|r| r.d_loss),
        "g_loss": last.map(|r| r.g_loss),
    }))
}

pub fn pool_build_cmd(ctx: &Ctx) -> Result<()> {
    let pcfg = ctx.cfg.pool()?;
    let mut stage = ctx.stage("pool")?;
    let train = ctx.load_split(&mut stage, "train")?;
    let val = ctx.load_split(&mut stage, "val")?;
    let pool = pool_build(&train, &val, &pcfg, ctx.seed(seeds::POOL))?;
    for s in &pool.snapshots {
        stage.event("snapshot", json!({ "label": s.label, "val_acc": s.val_acc, "bin": pool.bin_of(s.val_acc) }))?;
    }
    pool.save(&stage.dir)?;
    let accs: Vec<f64> = pool.snapshots.iter().map(|s| s.val_acc).collect();
    stage.finish(json!({ "snapshots": pool.snapshots.len(), "val_acc": accs, "bins": pool.bins() }))
}

pub fn invert(ctx: &Ctx) -> Result<()> {
    let icfg = ctx.cfg.inversion()?;
    let mut stage = ctx.stage("invert")?;
    let train = ctx.load_split(&mut stage, "train")?;
    let gen = ctx.load_generator(&mut stage, &train)?;
    let pool = ctx.load_pool(&mut stage)?;
    let psi = inversion_embedder(&pool)?;
    let (z, summary) = invert_all(&gen, &psi, &train, ctx.cfg.inversion_size(), &icfg, ctx.seed(seeds::INVERT))?;
    stage.write("latents.itgz", &z.to_bytes())?;
    stage.write_json("objectives.json", &summary)?;
    stage.finish(inversion_summary_json(&summary, z.len()))
}

fn inversion_summary_json(s: &InversionSummary, n: usize) -> serde_json::Value {
    json!({
        "latents": n,
        "median_initial": InversionSummary::median(&s.initial),
        "median_final": InversionSummary::median(&s.best),
        "diverged": s.diverged,
    })
}

pub fn condense(ctx: &Ctx) -> Result<()> {
    let ccfg = ctx.cfg.condense()?;
    let mut stage = ctx.stage("condense")?;
    let train = ctx.load_split(&mut stage, "train")?;
    let gen = ctx.load_generator(&mut stage, &train)?;
    let pool = ctx.load_pool(&mut stage)?;
    let init_path = ctx.init_path();
    let init = ctx.load_latents(&mut stage, &init_path, "init.itgz")?;
    check_spec(&train, &gen, &init, &init_path)?;
    let (z, logs) = split_and_run(&gen, &pool, &train, &init, &ccfg, ctx.seed(seeds::CONDENSE))?;
    for (g, log) in logs.iter().enumerate() {
        for rec in log {
            let mut v = serde_json::to_value(rec).map_err(|e| CliError::Other(e.to_string()))?;
            v["group"] = json!(g);
            stage.event("iter", v)?;
        }
    }
    if z.labels != init.labels || z.correspondence != init.correspondence {
        return Err(CliError::Other("condensation changed labels or pairing".into()));
    }
    stage.write("latents.itgz", &z.to_bytes())?;
    let first = logs.first().and_then(|l| l.first()).map(|r| r.l_con);
    let last = logs.first().and_then(|l| l.last()).map(|r| r.l_con);
    stage.finish(json!({ "latents": z.len(), "groups": logs.len(), "first_L_con": first, "last_L_con": last }))
}

/// One row per run: method, arch, size_per_class, seed_latent, seed_train,
/// test_acc, epochs.
pub fn summary_csv(results: &[ExperimentResult]) -> String {
    let mut out = String::from("method,arch,size_per_class,seed_latent,seed_train,test_acc,epochs\n");
    for r in results {
        let size = r.size_per_class.map_or_else(|| "full".to_string(), |s| s.to_string());
        for run in &r.runs {
            let sl = run.seed_latent.map_or_else(String::new, |s| s.to_string());
            out += &format!("{},{},{size},{sl},{},{},{}\n", r.method, r.arch.name(), run.seed_train, run.test_acc, r.epochs);
        }
    }
    out
}

pub fn result_stem(r: &ExperimentResult) -> String {
    let size = r.size_per_class.map_or_else(|| "full".to_string(), |s| s.to_string());
    format!("{}-{}-{size}", r.method, r.arch.name())
}

fn write_results(stage: &Stage, results: &[ExperimentResult]) -> Result<()> {
    for r in results {
        let stem = result_stem(r);
        stage.write_json(&format!("results/{stem}.json"), r)?;
        for (k, run) in r.runs.iter().enumerate() {
            let mut csv = String::from("epoch,train_acc,test_acc\n");
            for e in &run.curve {
                csv += &format!("{},{},{}\n", e.epoch, e.train_acc, e.test_acc);
            }
            stage.write(&format!("curves/{stem}-run{k}.csv"), csv.as_bytes())?;
        }
    }
    stage.write("summary.csv", summary_csv(results).as_bytes())?;
    Ok(())
}

fn results_json(results: &[ExperimentResult]) -> serde_json::Value {
    json!(results
        .iter()
        .map(|r| json!({ "method": r.method, "arch": r.arch.name(), "size_per_class": r.size_per_class, "mean": r.mean, "std": r.std, "runs": r.runs.len() }))
        .collect::<Vec<_>>())
}

/// The method comparison at every configured size.
pub fn eval(ctx: &Ctx) -> Result<()> {
    let ccfg = ctx.cfg.compare()?;
    let mut stage = ctx.stage("eval")?;
    let train = ctx.load_split(&mut stage, "train")?;
    let test = ctx.load_split(&mut stage, "test")?;
    let gen = ctx.load_generator(&mut stage, &train)?;
    let pool = ctx.load_pool(&mut stage)?;
    let psi = inversion_embedder(&pool)?;
    let assets = Assets {
        generator: &gen,
        pool: &pool,
        inversion_embedder: &psi,
        train: &train,
        test: &test,
    };
    let mut logged = Ok(());
    let out = compare_methods(&assets, &ccfg, ctx.seed(seeds::EVAL), |s| {
        if logged.is_ok() {
            logged = stage.event("step", json!({ "what": s }));
        }
    })?;
    logged?;
    for (i, log) in out.condense_logs.iter().enumerate() {
        for rec in log {
            let mut v = serde_json::to_value(rec).map_err(|e| CliError::Other(e.to_string()))?;
            v["run"] = json!(i);
            stage.event("iter", v)?;
        }
    }
    for rec in &out.latents {
        stage.write(&format!("latents/{}-{}-{}.itgz", rec.method, rec.size_per_class, rec.seed_latent), &rec.latents.to_bytes())?;
    }
    let inv: Vec<_> = out.inversion.iter().map(|s| inversion_summary_json(s, s.best.len())).collect();
    stage.write_json("inversion.json", &inv)?;
    write_results(&stage, &out.results)?;
    stage.finish(json!({ "results": results_json(&out.results) }))
}

/// Trains every configured architecture on one latent set (the condense
/// stage output unless `--latents` is given).
pub fn eval_cross(ctx: &Ctx) -> Result<()> {
    let ecfg = ctx.cfg.eval()?;
    let archs = ctx.cfg.eval_archs()?;
    let mut stage = ctx.stage("eval-cross")?;
    let train = ctx.load_split(&mut stage, "train")?;
    let test = ctx.load_split(&mut stage, "test")?;
    let gen = ctx.load_generator(&mut stage, &train)?;
    let path = ctx.latents_path();
    let z = ctx.load_latents(&mut stage, &path, "latents.itgz")?;
    check_spec(&train, &gen, &z, &path)?;
    let results = cross_arch_eval(&gen, &z, &test, &archs, &ecfg, ctx.seed(seeds::EVAL), None)?;
    let chance = 1.0 / train.spec.classes as f64;
    for r in &results {
        stage.event("arch", json!({ "arch": r.arch.name(), "mean": r.mean, "above_twice_chance": r.mean > 2.0 * chance }))?;
    }
    write_results(&stage, &results)?;
    stage.finish(json!({ "results": results_json(&results) }))
}

pub fn ablate(ctx: &Ctx) -> Result<()> {
    let acfg = ctx.cfg.ablation()?;
    let mut stage = ctx.stage("ablate")?;
    let train = ctx.load_split(&mut stage, "train")?;
    let test = ctx.load_split(&mut stage, "test")?;
    let gen = ctx.load_generator(&mut stage, &train)?;
    let pool = ctx.load_pool(&mut stage)?;
    let psi = inversion_embedder(&pool)?;
    let assets = Assets {
        generator: &gen,
        pool: &pool,
        inversion_embedder: &psi,
        train: &train,
        test: &test,
    };
    let mut logged = Ok(());
    let report = ablation_suite(&assets, &acfg, ctx.seed(seeds::ABLATE), |s| {
        if logged.is_ok() {
            logged = stage.event("step", json!({ "what": s }));
        }
    })?;
    logged?;
    for e in &report.entries {
        stage.event(
            "setting",
            json!({ "study": e.study, "setting": e.setting, "mean": e.result.as_ref().map(|r| r.mean), "error": e.error }),
        )?;
    }
    stage.write_json("ablation.json", &report)?;
    let mut trends = String::new();
    for t in &report.trends {
        trends += &format!("{} {}: {}\n", if t.passed { "PASS" } else { "FAIL" }, t.name, t.detail);
    }
    trends += &format!("{} of {} trends pass\n", report.passed(), report.trends.len());
    stage.write("trends.txt", trends.as_bytes())?;
    let results: Vec<ExperimentResult> = report.entries.iter().filter_map(|e| e.result.clone()).collect();
    let mut csv = String::from("study,setting,mean,std,runs\n");
    for e in &report.entries {
        match &e.result {
            Some(r) => csv += &format!("{},{},{},{},{}\n", e.study, e.setting, r.mean, r.std, r.runs.len()),
            None => csv += &format!("{},{},,,0\n", e.study, e.setting),
        }
    }
    stage.write("summary.csv", csv.as_bytes())?;
    stage.finish(json!({
        "trends_passed": report.passed(),
        "trends": report.trends,
        "settings": results.len(),
    }))
}
