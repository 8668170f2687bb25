use condensegan_core::augment::Omega;
use condensegan_core::condense::{
    con_loss, condense_run, grad_match_loss, layerwise_cosine_distance, matched_parameters, mean_embedding_distance, paired_distance, reg_loss, split_and_run,
    split_sizes, total_loss, CondenseConfig, Objective, SplitStrategy,
};
use condensegan_core::data::{gen_shapes, ImageSet, ShapeStyle};
use condensegan_core::inversion::{random_latents, LatentSet, Provenance};
use condensegan_core::models::{Arch, Classifier, Embedder, EmbedderSource, Generator, Snapshot, SnapshotPool};
use condensegan_core::rng;
use condensegan_core::CoreError;
use condensegan_tensor::gradcheck::{check_gradients, GradCheckConfig};
use condensegan_tensor::{DType, Tensor};
use proptest::prelude::*;

fn t(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_values(v, shape, DType::F64).unwrap()
}

fn scalar(x: &Tensor) -> f64 {
    x.item().unwrap()
}

#[test]
fn mean_difference_toy() {
    let real = t(&[1.0, 3.0], &[2, 1]);
    let synth = t(&[2.0, 4.0], &[2, 1]);
    assert_eq!(scalar(&mean_embedding_distance(&real, &synth).unwrap()), 1.0);
}

#[test]
fn mean_distance_ignores_order() {
    let a = t(&[0.1, 0.2, 0.7, -0.4, 0.3, 0.9], &[3, 2]);
    let b = t(&[0.3, 0.9, 0.1, 0.2, 0.7, -0.4], &[3, 2]);
    assert!(scalar(&mean_embedding_distance(&a, &b).unwrap()) < 1e-24);
    assert_eq!(scalar(&mean_embedding_distance(&a, &a).unwrap()), 0.0);
}

#[test]
fn paired_distance_oracle() {
    let v = paired_distance(&t(&[1.0, 0.0], &[1, 2]), &t(&[0.0, 1.0], &[1, 2])).unwrap();
    assert_eq!(scalar(&v), 2.0);
}

#[test]
fn pairing_matters_for_the_regularizer() {
    let real = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
    let synth = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
    let swapped = t(&[0.0, 1.0, 1.0, 0.0], &[2, 2]);
    assert_eq!(scalar(&paired_distance(&real, &synth).unwrap()), 0.0);
    assert_eq!(scalar(&paired_distance(&real, &swapped).unwrap()), 2.0);
    assert_eq!(
        scalar(&mean_embedding_distance(&real, &synth).unwrap()),
        scalar(&mean_embedding_distance(&real, &swapped).unwrap())
    );
    assert!(paired_distance(&real, &t(&[1.0, 0.0], &[1, 2])).is_err());
}

#[test]
fn total_loss_cases() {
    let l = t(&[1.0], &[]);
    let r = t(&[2.0], &[]);
    assert_eq!(scalar(&total_loss(&l, Some(&r), 0.0).unwrap()), 1.0);
    assert_eq!(scalar(&total_loss(&l, None, 0.0).unwrap()), 1.0);
    assert_eq!(scalar(&total_loss(&l, Some(&r), 1.0).unwrap()), 2.0);
    assert_eq!(scalar(&total_loss(&l, Some(&r), 0.5).unwrap()), 1.5);
    assert!(matches!(total_loss(&l, Some(&r), 1.5), Err(CoreError::Config(_))));
    assert!(total_loss(&l, None, 0.5).is_err());
}

fn images(n: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, 0);
    Tensor::from_vec(rng::normal_vec(&mut r, n * 256).into_iter().map(|v| v.tanh()).collect(), &[n, 16, 16, 1]).unwrap()
}

#[test]
fn coinciding_batches_give_zero_losses() {
    let psi = Embedder::init_random(1, 8, 1).unwrap();
    let x = images(6, 2);
    let reversed = x.index_select(&[5, 4, 3, 2, 1, 0]).unwrap();
    let omegas = [Omega::Rotate { degrees: 7.0 }];
    let l = scalar(&con_loss(&psi, &[x.clone()], &[reversed], &omegas).unwrap());
    assert!(l.abs() < 1e-6, "{l}");
    let r = scalar(&reg_loss(&psi, &[x.clone()], &[x.clone()], &omegas).unwrap());
    assert_eq!(r, 0.0);
    let other = images(6, 3);
    assert!(scalar(&con_loss(&psi, &[x.clone()], &[other.clone()], &omegas).unwrap()) > 0.0);
    assert!(scalar(&reg_loss(&psi, &[x], &[other], &omegas).unwrap()) > 0.0);
}

#[test]
fn per_class_inputs_must_agree() {
    let psi = Embedder::init_random(1, 4, 1).unwrap();
    let x = images(2, 2);
    assert!(con_loss(&psi, &[x.clone()], &[x.clone(), x.clone()], &[Omega::None]).is_err());
    assert!(con_loss(&psi, &[x.narrow(0, 0, 0).unwrap()], &[x], &[Omega::None]).is_err());
}

#[test]
fn antiparallel_gradients_give_four() {
    let a = vec![t(&[1.0, 2.0], &[2]), t(&[0.5, -1.0, 3.0], &[3])];
    let b: Vec<Tensor> = a.iter().map(|g| g.scale(-2.5).unwrap()).collect();
    let (d, skipped) = layerwise_cosine_distance(&a, &b).unwrap();
    assert!((scalar(&d) - 4.0).abs() < 1e-12);
    assert_eq!(skipped, 0);
    let zero = vec![t(&[1.0, 2.0], &[2]), t(&[0.0, 0.0, 0.0], &[3])];
    let (d, skipped) = layerwise_cosine_distance(&a, &zero).unwrap();
    assert_eq!(skipped, 1);
    assert!(scalar(&d).abs() < 1e-12);
}

const SPEC: condensegan_core::models::ImageSpec = condensegan_core::models::ImageSpec {
    height: 16,
    width: 16,
    channels: 1,
    classes: 10,
};

fn f64_net(seed: u64) -> Classifier {
    let net = Classifier::init(Arch::ConvNet, SPEC, 4, seed).unwrap();
    let w = net.weights.to_dtype(DType::F64);
    net.with_weights(w)
}

#[test]
fn matched_parameters_are_weight_matrices() {
    let names = matched_parameters(&Classifier::init(Arch::ConvNet, SPEC, 4, 0).unwrap());
    assert_eq!(names, vec!["block0.conv.weight", "block1.conv.weight", "block2.conv.weight", "head.weight"]);
}

#[test]
fn identical_batches_match_gradients_exactly() {
    let net = f64_net(3);
    let x = images(4, 5).to_dtype(DType::F64);
    let labels = [2, 2, 2, 2];
    let (l, _) = grad_match_loss(&net, &x, &labels, &x, &labels).unwrap();
    assert!(scalar(&l).abs() < 1e-5, "{}", scalar(&l));
}

#[test]
fn gradient_matching_is_differentiable_in_the_synthetic_images() {
    let net = f64_net(4);
    let real = images(3, 6).to_dtype(DType::F64);
    let synth = images(2, 7).to_dtype(DType::F64);
    let report = check_gradients(
        |s| Ok(grad_match_loss(&net, &real, &[1, 1, 1], &s[0], &[1, 1]).unwrap().0),
        &[synth],
        GradCheckConfig { max_probes: 24, ..GradCheckConfig::default() },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn distribution_loss_is_differentiable_in_the_synthetic_images() {
    let psi = Embedder::init_random(1, 4, 9).unwrap();
    let psi = Embedder {
        weights: psi.weights.to_dtype(DType::F64),
        ..psi
    };
    let real = images(3, 1).to_dtype(DType::F64);
    let paired = images(2, 2).to_dtype(DType::F64);
    let synth = images(2, 3).to_dtype(DType::F64);
    let omegas = [Omega::Scale { factor: 1.1 }];
    // small step so probes do not straddle relu kinks
    let cfg = GradCheckConfig { step: 1e-6, ..GradCheckConfig::default() };
    let report = check_gradients(|s| Ok(con_loss(&psi, &[real.clone()], &[s[0].clone()], &omegas).unwrap()), std::slice::from_ref(&synth), cfg).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    let report = check_gradients(|s| Ok(reg_loss(&psi, &[paired.clone()], &[s[0].clone()], &omegas).unwrap()), &[synth], cfg).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn split_sizes_partition() {
    assert_eq!(split_sizes(500, 0), vec![500]);
    assert_eq!(split_sizes(500, 100), vec![100; 5]);
    assert_eq!(split_sizes(10, 3), vec![3, 3, 4]);
    assert_eq!(split_sizes(4, 9), vec![4]);
}

struct World {
    gen: Generator,
    pool: SnapshotPool,
    reals: ImageSet,
    init: LatentSet,
}

fn world() -> World {
    let ds = gen_shapes(3, 12, 16, 1, &ShapeStyle::default(), 4).unwrap();
    let reals = ds.to_image_set().unwrap();
    let mut gen = Generator::init(reals.spec, 6, 8, 1).unwrap();
    gen.calibrate(60, 2).unwrap();
    let mut pool = SnapshotPool::new(vec![0.0, 0.5, 1.0]).unwrap();
    for i in 0..3 {
        pool.snapshots.push(Snapshot {
            net: Classifier::init(Arch::ConvNet, reals.spec, 4, 10 + i).unwrap(),
            val_acc: 0.3 * i as f64,
            label: format!("p{i}"),
        });
    }
    let init = random_latents(&reals, 6, Some(6), 3).unwrap();
    World { gen, pool, reals, init }
}

fn quick(iterations: usize) -> CondenseConfig {
    CondenseConfig {
        iterations,
        lr: 0.01,
        batch_z: 4,
        batch_real: 8,
        embedder_width: 4,
        ..CondenseConfig::default()
    }
}

#[test]
fn zero_iterations_is_identity() {
    let w = world();
    let (out, log) = condense_run(&w.gen, &w.pool, &w.reals, &w.init, &quick(0), 1).unwrap();
    assert!(log.is_empty());
    assert_eq!(out.z, w.init.z);
    assert_eq!(out.provenance, Provenance::Condensed);
}

#[test]
fn run_updates_latents_only() {
    let w = world();
    let before = w.gen.weights.to_bytes();
    let (out, log) = condense_run(&w.gen, &w.pool, &w.reals, &w.init, &quick(3), 1).unwrap();
    assert_eq!(w.gen.weights.to_bytes(), before);
    assert_eq!(out.labels, w.init.labels);
    assert_eq!(out.correspondence, w.init.correspondence);
    assert_ne!(out.z, w.init.z);
    assert_eq!(log.len(), 3);
    assert!(log.iter().all(|r| r.l_con >= 0.0 && r.r.is_none() && r.omega_kind.len() == 3));
}

#[test]
fn single_step_moves_every_latent() {
    let w = world();
    let cfg = CondenseConfig { batch_z: 6, ..quick(1) };
    let (out, _) = condense_run(&w.gen, &w.pool, &w.reals, &w.init, &cfg, 2).unwrap();
    for i in 0..out.len() {
        assert_ne!(out.z[i * 6..(i + 1) * 6], w.init.z[i * 6..(i + 1) * 6], "latent {i}");
    }
}

#[test]
fn runs_are_deterministic() {
    let w = world();
    let cfg = CondenseConfig { lambda: 0.3, ..quick(2) };
    let a = condense_run(&w.gen, &w.pool, &w.reals, &w.init, &cfg, 5).unwrap();
    let b = condense_run(&w.gen, &w.pool, &w.reals, &w.init, &cfg, 5).unwrap();
    assert_eq!(a.0.to_bytes(), b.0.to_bytes());
    assert_eq!(a.1, b.1);
    assert!(a.1.iter().all(|r| r.r.is_some_and(|v| v >= 0.0)));
}

/// Reassigns the real partners within each class.
fn shuffled_pairs(set: &LatentSet, seed: u64) -> LatentSet {
    let mut out = set.clone();
    let mut r = rng::stream(seed, 0);
    for c in 0..set.classes {
        let idx = set.class_indices(c);
        let mut partners: Vec<u64> = idx.iter().map(|&i| set.correspondence[i]).collect();
        rand::seq::SliceRandom::shuffle(partners.as_mut_slice(), &mut r);
        for (&i, p) in idx.iter().zip(partners) {
            out.correspondence[i] = p;
        }
    }
    out
}

#[test]
fn pairing_is_irrelevant_at_lambda_zero() {
    let w = world();
    let shuffled = shuffled_pairs(&w.init, 8);
    assert_ne!(shuffled.correspondence, w.init.correspondence);
    let cfg = quick(3);
    let (a, la) = condense_run(&w.gen, &w.pool, &w.reals, &w.init, &cfg, 6).unwrap();
    let (b, lb) = condense_run(&w.gen, &w.pool, &w.reals, &shuffled, &cfg, 6).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.z, b.z);
    let reg = CondenseConfig { lambda: 0.5, ..cfg };
    let (_, ra) = condense_run(&w.gen, &w.pool, &w.reals, &w.init, &reg, 6).unwrap();
    let (_, rb) = condense_run(&w.gen, &w.pool, &w.reals, &shuffled, &reg, 6).unwrap();
    assert_ne!(ra, rb);
}

#[test]
fn fixed_split_partitions_and_restores_order() {
    let w = world();
    let cfg = CondenseConfig { group_size: 2, ..quick(1) };
    let (out, logs) = split_and_run(&w.gen, &w.pool, &w.reals, &w.init, &cfg, 3).unwrap();
    assert_eq!(logs.len(), 3);
    assert_eq!(out.labels, w.init.labels);
    assert_eq!(out.correspondence, w.init.correspondence);
    assert_eq!(out.len(), w.init.len());
    for i in 0..out.len() {
        assert_ne!(out.z[i * 6..(i + 1) * 6], w.init.z[i * 6..(i + 1) * 6]);
    }
    let whole = CondenseConfig { group_size: 0, ..quick(1) };
    let (a, _) = split_and_run(&w.gen, &w.pool, &w.reals, &w.init, &whole, 3).unwrap();
    let (b, _) = condense_run(&w.gen, &w.pool, &w.reals, &w.init, &whole, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn random_split_runs_once() {
    let w = world();
    let cfg = CondenseConfig {
        group_size: 3,
        strategy: SplitStrategy::Random,
        ..quick(2)
    };
    let (out, logs) = split_and_run(&w.gen, &w.pool, &w.reals, &w.init, &cfg, 3).unwrap();
    assert_eq!(logs.len(), 1);
    assert_eq!(out.labels, w.init.labels);
}

#[test]
fn gradient_objective_and_embedder_sources_run() {
    let w = world();
    for source in [EmbedderSource::RandomInit, EmbedderSource::TopBin, EmbedderSource::All] {
        let cfg = CondenseConfig {
            objective: Objective::Gradient,
            embedder: source,
            ..quick(1)
        };
        let (out, log) = condense_run(&w.gen, &w.pool, &w.reals, &w.init, &cfg, 4).unwrap();
        assert_eq!(out.len(), w.init.len());
        assert_eq!(log[0].embedder_source, source.name());
        if source == EmbedderSource::TopBin {
            assert_eq!(log[0].embedder, "p2");
        }
    }
}

#[test]
fn uncalibrated_generators_and_bad_configs_are_rejected() {
    let w = world();
    let raw = Generator::init(w.reals.spec, 6, 8, 1).unwrap();
    assert!(condense_run(&raw, &w.pool, &w.reals, &w.init, &quick(1), 0).is_err());
    let bad = CondenseConfig { lambda: -0.1, ..quick(1) };
    assert!(matches!(condense_run(&w.gen, &w.pool, &w.reals, &w.init, &bad, 0), Err(CoreError::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn losses_are_non_negative(seed in any::<u64>(), n in 1usize..5, d in 1usize..6) {
        let mut r = rng::stream(seed, 0);
        let a = Tensor::from_vec(rng::normal_vec(&mut r, n * d), &[n, d]).unwrap();
        let b = Tensor::from_vec(rng::normal_vec(&mut r, n * d), &[n, d]).unwrap();
        prop_assert!(scalar(&mean_embedding_distance(&a, &b).unwrap()) >= 0.0);
        prop_assert!(scalar(&paired_distance(&a, &b).unwrap()) >= 0.0);
        let (c, _) = layerwise_cosine_distance(&[a.clone()], &[b]).unwrap();
        let c = scalar(&c);
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&c));
    }

    #[test]
    fn total_loss_is_affine(l in 0.0f64..10.0, r in 0.0f64..10.0, lambda in 0.0f64..=1.0) {
        let v = scalar(&total_loss(&t(&[l], &[]), Some(&t(&[r], &[])), lambda).unwrap());
        prop_assert!((v - ((1.0 - lambda) * l + lambda * r)).abs() <= 1e-12 * (1.0 + l + r));
    }
}
