//! End-to-end acceptance checks on the desk preset. Every check prints one
//! PASS/FAIL line to the terminal (bypassing output capture) and then
//! asserts. The slow checks share one default pipeline run.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use condensegan_cli::config::RunConfig;
use condensegan_cli::render::{load_results, read_jsonl};
use condensegan_core::augment::{apply, siamese_apply, AugKind, Omega};
use condensegan_core::condense::{con_loss, condense_run, grad_match_loss, reg_loss, total_loss};
use condensegan_core::data::Dataset;
use condensegan_core::eval::{ExperimentResult, METHOD_INVERSION, METHOD_ITGAN, METHOD_RANDOM, METHOD_REAL};
use condensegan_core::inversion::{invert_from, inversion_objective, random_latents, select_reals, InversionSummary};
use condensegan_core::models::{Arch, Classifier, Embedder, Generator, ImageSpec, ModelWeights, SnapshotPool};
use condensegan_core::rng;
use condensegan_tensor::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use condensegan_tensor::{nn, DType, Result as TResult, Tensor};

const OP_TOL: f64 = 1e-5;
const LOSS_TOL: f64 = 1e-4;

static SERIAL: Mutex<()> = Mutex::new(());
static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn announce(n: usize, title: &str, passed: bool, elapsed: Duration, budget: Option<Duration>, detail: &str) {
    let budget = budget.map_or_else(String::new, |b| format!(" / budget {:.0} s", b.as_secs_f64()));
    let line = format!(
        "[acceptance {n}] {} {title} ({:.1} s{budget}) {detail}",
        if passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_condensegan")).args(args).output().expect("spawn condensegan");
    assert!(out.status.success(), "condensegan {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

/// One default-config pipeline run: data, GAN, pool, method comparison and
/// report.
struct Fixture {
    run: PathBuf,
    elapsed: Duration,
}

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let run = root().join("default");
        let _ = fs::remove_dir_all(&run);
        let t = Instant::now();
        cli(&["pipeline", "--run", run.to_str().unwrap()]);
        Fixture { run, elapsed: t.elapsed() }
    })
}

struct Loaded {
    gen: Generator,
    pool: SnapshotPool,
    train: condensegan_core::data::ImageSet,
}

fn load(run: &Path) -> Loaded {
    let train = Dataset::load(&run.join("data/train.itgd")).unwrap().to_image_set().unwrap();
    let gen = Generator::from_weights(ModelWeights::load(&run.join("gan/generator.itgw")).unwrap(), train.spec).unwrap();
    let pool = SnapshotPool::load(&run.join("pool")).unwrap();
    Loaded { gen, pool, train }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, 0);
    let n: usize = shape.iter().product();
    Tensor::from_f64(rng::normal_vec(&mut r, n).into_iter().map(|v| f64::from(v).tanh()).collect(), shape).unwrap()
}

/// Entries at least 0.05 from zero, so kinked ops are not probed at the kink.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let v = random(shape, seed).to_f64_vec();
    Tensor::from_f64(v.into_iter().map(|x| x.signum() * (0.05 + 0.95 * x.abs())).collect(), shape).unwrap()
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let v = random(shape, seed).to_f64_vec();
    Tensor::from_f64(v.into_iter().map(|x| 1.25 + 0.75 * x).collect(), shape).unwrap()
}

fn contract(y: &Tensor) -> TResult<Tensor> {
    let w = random(y.shape(), 4242).to_dtype(y.dtype());
    y.mul(&w)?.sum()
}

const SPEC: ImageSpec = ImageSpec {
    height: 16,
    width: 16,
    channels: 1,
    classes: 10,
};

fn images64(n: usize, seed: u64) -> Tensor {
    random(&[n, 16, 16, 1], seed)
}

fn embedder64(width: usize, seed: u64) -> Embedder {
    let psi = Embedder::init_random(1, width, seed).unwrap();
    Embedder {
        weights: psi.weights.to_dtype(DType::F64),
        ..psi
    }
}

type Probe = (String, GradCheckReport, f64);

fn probe(out: &mut Vec<Probe>, name: &str, f: impl Fn(&[Tensor]) -> TResult<Tensor>, inputs: &[Tensor], cfg: GradCheckConfig, tol: f64) {
    let report = check_gradients(f, inputs, cfg).unwrap();
    out.push((name.to_string(), report, tol));
}

fn op_sweep(out: &mut Vec<Probe>) {
    let d = GradCheckConfig::default();
    let c = |out: &mut Vec<Probe>, name: &str, f: &dyn Fn(&[Tensor]) -> TResult<Tensor>, inputs: &[Tensor]| probe(out, name, f, inputs, d, OP_TOL);
    let a = random(&[3, 4], 1);
    let b = random(&[3, 4], 2);
    let row = random(&[4], 3);
    let col = random(&[3, 1], 4);
    let p = positive(&[3, 4], 5);
    let k = away_from_zero(&[3, 4], 6);
    c(out, "add", &|t| contract(&t[0].add(&t[1])?), &[a.clone(), b.clone()]);
    c(out, "add broadcast", &|t| contract(&t[0].add(&t[1])?.add(&t[2])?), &[a.clone(), row.clone(), col.clone()]);
    c(out, "sub broadcast", &|t| contract(&t[0].sub(&t[1])?), &[a.clone(), col.clone()]);
    c(out, "mul broadcast", &|t| contract(&t[0].mul(&t[1])?), &[a.clone(), row.clone()]);
    c(out, "div", &|t| contract(&t[0].div(&t[1])?), &[a.clone(), p.clone()]);
    c(out, "neg", &|t| contract(&t[0].neg()?), &[a.clone()]);
    c(out, "scale", &|t| contract(&t[0].scale(-1.7)?), &[a.clone()]);
    c(out, "add_scalar", &|t| contract(&t[0].add_scalar(0.3)?), &[a.clone()]);
    c(out, "exp", &|t| contract(&t[0].exp()?), &[a.clone()]);
    c(out, "log", &|t| contract(&t[0].log()?), &[p.clone()]);
    c(out, "sqrt", &|t| contract(&t[0].sqrt()?), &[p.clone()]);
    c(out, "square", &|t| contract(&t[0].square()?), &[a.clone()]);
    c(out, "tanh", &|t| contract(&t[0].tanh()?), &[a.clone()]);
    c(out, "sigmoid", &|t| contract(&t[0].sigmoid()?), &[a.clone()]);
    c(out, "relu", &|t| contract(&t[0].relu()?), &[k.clone()]);
    c(out, "leaky_relu", &|t| contract(&t[0].leaky_relu(0.2)?), &[k.clone()]);
    c(out, "softplus", &|t| contract(&t[0].softplus()?), &[a.clone()]);
    c(out, "clamp", &|t| contract(&t[0].clamp(-0.5, 0.5)?), &[k.scale(0.45).unwrap()]);
    c(out, "matmul", &|t| contract(&t[0].matmul(&t[1])?), &[a.clone(), random(&[4, 5], 7)]);
    c(out, "matmul_t", &|t| contract(&t[0].matmul_t(&t[1], true, true)?), &[random(&[4, 3], 8), random(&[5, 4], 9)]);
    c(out, "sum_axes", &|t| contract(&t[0].sum_axes(&[0], true)?), &[a.clone()]);
    c(out, "mean_axes", &|t| contract(&t[0].mean_axes(&[1], false)?), &[a.clone()]);
    c(out, "mean", &|t| t[0].mean(), &[a.clone()]);
    c(out, "broadcast_to", &|t| contract(&t[0].broadcast_to(&[3, 4])?), &[row.clone()]);
    c(out, "sum_to", &|t| contract(&t[0].sum_to(&[3, 1])?), &[a.clone()]);
    c(out, "reshape", &|t| contract(&t[0].reshape(&[2, 6])?), &[a.clone()]);
    c(out, "narrow", &|t| contract(&t[0].narrow(1, 1, 2)?), &[a.clone()]);
    c(out, "pad_narrow", &|t| contract(&t[0].pad_narrow(1, 1, 6)?), &[a.clone()]);
    c(out, "concat", &|t| contract(&Tensor::concat(&[t[0].clone(), t[1].clone()], 0)?), &[a.clone(), b.clone()]);
    c(out, "index_select", &|t| contract(&t[0].index_select(&[2, 0, 2])?), &[a.clone()]);
    c(out, "index_add", &|t| contract(&t[0].index_add(&[1, 0, 1], 2)?), &[a.clone()]);
    let img = random(&[2, 6, 6, 2], 10);
    c(out, "im2col", &|t| contract(&t[0].im2col(3, 1, 1)?), &[img.clone()]);
    c(out, "im2col stride 2", &|t| contract(&t[0].im2col(4, 2, 1)?), &[img.clone()]);
    c(out, "avg_pool2", &|t| contract(&t[0].avg_pool2()?), &[img.clone()]);
    c(out, "upsample2", &|t| contract(&t[0].upsample2()?), &[img.clone()]);
    c(out, "conv2d", &|t| contract(&nn::conv2d(&t[0], &t[1], Some(&t[2]), 3, 1, 1)?), &[img.clone(), random(&[18, 3], 11), random(&[3], 12)]);
    c(out, "conv_transpose2d", &|t| contract(&nn::conv_transpose2d(&t[0], &t[1], Some(&t[2]), 4, 2, 1)?), &[img.clone(), random(&[48, 2], 13), random(&[3], 14)]);
    c(out, "linear", &|t| contract(&nn::linear(&t[0], &t[1], Some(&t[2]))?), &[a.clone(), random(&[4, 2], 15), random(&[2], 16)]);
    c(out, "instance_norm", &|t| contract(&nn::instance_norm(&t[0])?), &[img.clone()]);
    c(out, "batch_norm_lite", &|t| contract(&nn::batch_norm_lite(&t[0])?), &[img.clone()]);
    c(out, "affine", &|t| contract(&nn::affine(&t[0], &t[1], &t[2])?), &[img.clone(), random(&[2], 17), random(&[2], 18)]);
    c(out, "log_softmax", &|t| contract(&nn::log_softmax(&t[0])?), &[a.clone()]);
    c(out, "cross_entropy", &|t| nn::cross_entropy(&t[0], &[1, 3, 0]), &[a.clone()]);
    c(out, "squared_l2", &|t| nn::squared_l2(&t[0]), &[a.clone()]);
    // grid taps stay inside cells so the sampler is smooth in the grid
    let mut grid = Vec::new();
    for y in 0..5 {
        for x in 0..5 {
            grid.push(0.3 + x as f64 * 1.1);
            grid.push(0.6 + y as f64 * 0.9);
        }
    }
    let grid = Tensor::from_f64(grid, &[5, 5, 2]).unwrap();
    c(out, "grid_sample", &|t| contract(&t[0].grid_sample(&t[1])?), &[img.clone(), grid.clone()]);
    c(out, "grid_sample_adjoint", &|t| contract(&t[0].grid_sample_adjoint(&grid, 6, 6)?), &[random(&[2, 5, 5, 2], 19)]);
    let f = |t: &[Tensor]| contract(&t[0].tanh()?.matmul(&t[1])?);
    c(out, "double backward", &|t| {
        // the finite-difference pass hands in untracked tensors
        let x = if t[0].requires_grad_flag() { t[0].clone() } else { t[0].requires_grad() };
        let g = condensegan_tensor::grad(&f(&[x.clone(), t[1].clone()])?, &[&x], true)?;
        g[0].square()?.sum()
    }, &[a.clone(), random(&[4, 2], 20)]);
    for kind in AugKind::ALL {
        let omega = match kind {
            AugKind::FlipH => Omega::FlipH,
            AugKind::CropShift => Omega::CropShift { dx: 1, dy: -2 },
            AugKind::Scale => Omega::Scale { factor: 1.13 },
            AugKind::Rotate => Omega::Rotate { degrees: -9.5 },
            AugKind::Cutout => Omega::Cutout { cx: 5, cy: 11 },
            AugKind::Brightness => Omega::Brightness { delta: 0.2 },
            AugKind::None => Omega::None,
        };
        c(out, &format!("augment {}", kind.name()), &move |t| contract(&apply(&t[0], &omega).unwrap()), &[images64(2, 21)]);
    }
}

fn loss_paths(out: &mut Vec<Probe>) {
    // small step so probes do not straddle relu kinks inside the networks
    let cfg = GradCheckConfig { step: 1e-6, max_probes: 24, ..GradCheckConfig::default() };
    let psi = embedder64(4, 1);
    let real = images64(3, 2);
    let paired = images64(2, 3);
    let synth = images64(2, 4);
    let omegas = [Omega::Rotate { degrees: 8.0 }];
    probe(out, "L_con in the images", |t| Ok(con_loss(&psi, &[real.clone()], &[t[0].clone()], &omegas).unwrap()), &[synth.clone()], cfg, LOSS_TOL);
    probe(out, "R in the images", |t| Ok(reg_loss(&psi, &[paired.clone()], &[t[0].clone()], &omegas).unwrap()), &[synth.clone()], cfg, LOSS_TOL);
    let net = Classifier::init(Arch::ConvNet, SPEC, 4, 5).unwrap();
    let net = net.with_weights(net.weights.to_dtype(DType::F64));
    probe(out, "gradient matching (double backward)", |t| Ok(grad_match_loss(&net, &real, &[1, 1, 1], &t[0], &[1, 1]).unwrap().0), &[synth], cfg, LOSS_TOL);
    // the full path from latents through generator, augmentation and embedder
    let mut g = Generator::init(SPEC, 6, 8, 6).unwrap();
    g.calibrate(100, 7).unwrap();
    let g = Generator {
        weights: g.weights.to_dtype(DType::F64),
        ..g
    };
    let z = random(&[2, 6], 8);
    probe(
        out,
        "total loss in the latents",
        |t| {
            let x = g.generate(&t[0], &[3, 3]).unwrap();
            let l = con_loss(&psi, &[paired.clone()], &[x.clone()], &omegas).unwrap();
            let r = reg_loss(&psi, &[paired.clone()], &[x], &omegas).unwrap();
            Ok(total_loss(&l, Some(&r), 0.3).unwrap())
        },
        &[z],
        cfg,
        LOSS_TOL,
    );
}

#[test]
fn gradients_match_finite_differences() {
    let _g = serial();
    let t = Instant::now();
    let mut probes = Vec::new();
    op_sweep(&mut probes);
    loss_paths(&mut probes);
    let elapsed = t.elapsed();
    let budget = Duration::from_secs(120);
    let failed: Vec<String> = probes
        .iter()
        .filter(|(_, r, tol)| !(r.max_rel_error < *tol))
        .map(|(n, r, _)| format!("{n}: {:.2e}", r.max_rel_error))
        .collect();
    let worst = probes.iter().map(|(_, r, _)| r.max_rel_error).fold(0.0, f64::max);
    let passed = failed.is_empty() && elapsed < budget;
    let detail = format!("{} checks, worst relative error {worst:.2e}; failing: {failed:?}", probes.len());
    announce(1, "gradient integrity", passed, elapsed, Some(budget), &detail);
    assert!(passed, "{detail}");
}

#[test]
fn loss_identities_hold() {
    let _g = serial();
    let t = Instant::now();
    let psi = Embedder::init_random(1, 8, 3).unwrap();
    let x = images64(6, 1).to_dtype(DType::F32);
    let shuffled = x.index_select(&[3, 1, 5, 0, 4, 2]).unwrap();
    let mut checks = BTreeMap::new();
    for omega in [Omega::None, Omega::Rotate { degrees: 11.0 }, Omega::Cutout { cx: 4, cy: 9 }] {
        let l = con_loss(&psi, &[x.clone()], &[shuffled.clone()], &[omega]).unwrap().item().unwrap();
        checks.insert(format!("L_con coinciding ({:?})", omega.kind()), l.abs() <= 1e-6);
        let r = reg_loss(&psi, &[x.clone()], &[x.clone()], &[omega]).unwrap().item().unwrap();
        checks.insert(format!("R perfect pairs ({:?})", omega.kind()), r == 0.0);
    }
    let mut g = Generator::init(SPEC, 8, 16, 4).unwrap();
    g.calibrate(100, 5).unwrap();
    let z = random(&[3, 8], 6).to_dtype(DType::F32);
    let labels = [0, 4, 9];
    let xg = g.generate(&z, &labels).unwrap();
    let obj = inversion_objective(&g, &psi, &z, &labels, &xg, 1.0).unwrap().item().unwrap();
    checks.insert("inversion objective at perfect reconstruction".into(), obj == 0.0);
    let l = Tensor::from_f64(vec![0.37], &[]).unwrap();
    let r = Tensor::from_f64(vec![1.91], &[]).unwrap();
    for lambda in [0.0, 0.5, 1.0] {
        let got = total_loss(&l, Some(&r), lambda).unwrap().item().unwrap();
        checks.insert(format!("total loss at lambda {lambda}"), got == (1.0 - lambda) * 0.37 + lambda * 1.91);
    }
    let failed: Vec<&String> = checks.iter().filter(|(_, ok)| !**ok).map(|(k, _)| k).collect();
    let passed = failed.is_empty();
    announce(2, "loss identities", passed, t.elapsed(), None, &format!("{} checks; failing: {failed:?}", checks.len()));
    assert!(passed);
}

#[test]
fn siamese_augmentation_contract() {
    let _g = serial();
    let t = Instant::now();
    let x = images64(4, 7).to_dtype(DType::F32);
    let mut failed = Vec::new();
    let mut r = rng::stream(8, 0);
    let cfg = condensegan_core::augment::AugmentConfig::default();
    let mut sampled = Vec::new();
    while sampled.len() < 200 {
        sampled.push(condensegan_core::augment::sample_omega(&cfg, 16, &mut r));
    }
    for kind in AugKind::ALL {
        let omegas: Vec<&Omega> = sampled.iter().filter(|o| o.kind() == kind).collect();
        if omegas.is_empty() && kind != AugKind::None {
            failed.push(format!("{} never sampled", kind.name()));
        }
        for omega in omegas {
            let (a, b) = siamese_apply(&x, &x, omega).unwrap();
            let again = apply(&x, omega).unwrap();
            if !(a.bit_eq(&b) && a.bit_eq(&again)) {
                failed.push(format!("{omega:?} not bit-identical"));
            }
        }
    }
    if !apply(&apply(&x, &Omega::FlipH).unwrap(), &Omega::FlipH).unwrap().bit_eq(&x) {
        failed.push("flip-h is not an involution".into());
    }
    if !apply(&x, &Omega::None).unwrap().bit_eq(&x) {
        failed.push("none is not the identity".into());
    }
    let passed = failed.is_empty();
    announce(3, "siamese augmentation", passed, t.elapsed(), None, &format!("failing: {failed:?}"));
    assert!(passed);
}

#[test]
fn condensation_freezes_generator_and_labels() {
    let _g = serial();
    let fx = fixture();
    let t = Instant::now();
    let w = load(&fx.run);
    let desk = RunConfig::preset("desk").unwrap();
    let cfg = desk.condense().unwrap();
    let gen_file = fs::read(fx.run.join("gan/generator.itgw")).unwrap();
    let before = w.gen.weights.to_bytes();
    let init = random_latents(&w.train, w.gen.d_z, Some(50), 11).unwrap();
    let (z, log) = condense_run(&w.gen, &w.pool, &w.train, &init, &cfg, 12).unwrap();
    let frozen = w.gen.weights.to_bytes() == before && fs::read(fx.run.join("gan/generator.itgw")).unwrap() == gen_file;
    let label_diff: Vec<usize> = (0..z.len()).filter(|&i| z.labels[i] != init.labels[i]).collect();
    let pairs_kept = z.correspondence == init.correspondence;
    let moved = z.z != init.z;
    let elapsed = t.elapsed();
    let budget = Duration::from_secs(300);
    let passed = frozen && label_diff.is_empty() && pairs_kept && moved && log.len() == cfg.iterations && elapsed < budget;
    let detail = format!(
        "K = {}, {} latents; generator bit-identical: {frozen}; label diff: {label_diff:?}; pairing kept: {pairs_kept}",
        cfg.iterations,
        z.len()
    );
    announce(4, "frozen generator and labels", passed, elapsed, Some(budget), &detail);
    assert!(passed, "{detail}");
}

#[test]
fn inversion_halves_the_objective() {
    let _g = serial();
    let fx = fixture();
    let t = Instant::now();
    let w = load(&fx.run);
    let desk = RunConfig::preset("desk").unwrap();
    let icfg = desk.inversion().unwrap();
    let mut idx = select_reals(&w.train, Some(7), 13).unwrap();
    idx.truncate(64);
    let reals = w.train.subset(&idx).unwrap();
    let psi = w.pool.best().unwrap().net.embedder().unwrap();
    let init = random_latents(&reals, w.gen.d_z, None, 14).unwrap().tensor().unwrap();
    let res = invert_from(&w.gen, &psi, &reals.images, &reals.labels, &[init], &icfg).unwrap();
    let (m0, m1) = (InversionSummary::median(&res.initial), InversionSummary::median(&res.best));
    let elapsed = t.elapsed();
    let budget = Duration::from_secs(300);
    let passed = idx.len() == 64 && m1 <= 0.5 * m0 && elapsed < budget;
    let detail = format!("64 images, median objective {m0:.4} -> {m1:.4} (ratio {:.3})", m1 / m0);
    announce(5, "inversion efficacy", passed, elapsed, Some(budget), &detail);
    assert!(passed, "{detail}");
}

fn result_of<'a>(results: &'a [ExperimentResult], method: &str) -> &'a ExperimentResult {
    results
        .iter()
        .find(|r| r.method == method && (method == METHOD_REAL || r.size_per_class == Some(50)))
        .unwrap_or_else(|| panic!("no {method} result"))
}

#[test]
fn headline_ordering() {
    let _g = serial();
    let fx = fixture();
    let results = load_results(&fx.run.join("eval")).unwrap();
    let acc = |m: &str| 100.0 * result_of(&results, m).mean;
    let (itgan, inv, random, real) = (acc(METHOD_ITGAN), acc(METHOD_INVERSION), acc(METHOD_RANDOM), acc(METHOD_REAL));
    let runs = result_of(&results, METHOD_ITGAN).runs.len();
    let budget = Duration::from_secs(1800);
    let passed = itgan > inv && itgan >= random + 1.0 && real >= itgan - 1.0 && runs == 9 && fx.elapsed < budget;
    let detail = format!("itgan {itgan:.2} inversion {inv:.2} gan-random {random:.2} real {real:.2} ({runs} runs each; time is the whole default pipeline)");
    announce(6, "headline ordering at 50 per class", passed, fx.elapsed, Some(budget), &detail);
    assert!(passed, "{detail}");
}

#[test]
fn condensation_makes_progress() {
    let _g = serial();
    let fx = fixture();
    let t = Instant::now();
    let events = read_jsonl(&fx.run.join("eval/report.jsonl")).unwrap();
    let cfg = RunConfig::load(&fx.run.join("eval/config.txt")).unwrap();
    let lambda: f64 = cfg.get("condense.lambda").parse().unwrap();
    let mut per_run: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for e in events.iter().filter(|e| e["event"] == "iter") {
        per_run.entry(e["run"].to_string()).or_default().push(e["L_con"].as_f64().unwrap());
    }
    let mut lines = Vec::new();
    let mut all = !per_run.is_empty() && lambda == 0.0;
    for (run, l) in &per_run {
        let tenth = (l.len() / 10).max(1);
        let first = l[..tenth].iter().sum::<f64>() / tenth as f64;
        let last = l[l.len() - tenth..].iter().sum::<f64>() / tenth as f64;
        all &= last <= first;
        lines.push(format!("run {run}: {first:.4} -> {last:.4}"));
    }
    announce(7, "condensation progress at lambda 0", all, t.elapsed(), None, &lines.join(", "));
    assert!(all, "{lines:?}");
}

#[test]
fn ablation_trends() {
    let _g = serial();
    let fx = fixture();
    let t = Instant::now();
    let dir = fx.run.join("ablate");
    let _ = fs::remove_dir_all(&dir);
    cli(&["ablate", "--run", fx.run.to_str().unwrap()]);
    let elapsed = t.elapsed();
    let trends = fs::read_to_string(dir.join("trends.txt")).unwrap();
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    let passed_trends = summary["trends_passed"].as_u64().unwrap();
    let total = summary["trends"].as_array().unwrap().len();
    let budget = Duration::from_secs(3600);
    let passed = total == 4 && passed_trends >= 3 && elapsed < budget;
    for line in trends.lines() {
        let _ = writeln!(std::io::stderr(), "    {line}");
    }
    announce(8, "ablation trends (at least 3 of 4)", passed, elapsed, Some(budget), &format!("{passed_trends} of {total} trends pass over 3 seeds"));
    assert!(passed, "{trends}");
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn reruns_are_byte_identical() {
    let _g = serial();
    let fx = fixture();
    let t = Instant::now();
    let rerun = root().join("rerun");
    let _ = fs::remove_dir_all(&rerun);
    cli(&["pipeline", "--run", rerun.to_str().unwrap()]);
    let stages = ["config.txt", "data", "gan", "pool", "eval", "report"];
    let keep = |p: &PathBuf| stages.iter().any(|s| p.starts_with(s));
    let a: BTreeMap<_, _> = tree(&fx.run).into_iter().filter(|(p, _)| keep(p)).collect();
    let b = tree(&rerun);
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|p| a.get(*p) != b.get(*p))
        .map(|p| p.display().to_string())
        .collect();
    let count = |ext: &str| a.keys().filter(|p| p.extension().is_some_and(|e| e == ext)).count();
    let kinds = format!("{} ITGD, {} ITGW, {} ITGZ, {} JSON-lines reports", count("itgd"), count("itgw"), count("itgz"), count("jsonl"));
    let passed = differing.is_empty() && count("itgd") == 3 && count("itgw") > 0 && count("itgz") > 0;
    announce(9, "byte-identical rerun", passed, t.elapsed(), None, &format!("{} files compared ({kinds}); differing: {differing:?}", a.len()));
    assert!(passed, "{differing:?}");
}
