use condensegan_core::data::{gen_shapes, ShapeStyle};
use condensegan_core::models::{
    pool_build, pool_draw, Arch, Classifier, Discriminator, Embedder, EmbedderSource, Generator, ImageSpec, ModelWeights, PoolConfig, Snapshot, SnapshotPool,
};
use condensegan_core::rng;
use condensegan_core::train::TrainConfig;
use condensegan_core::CoreError;
use condensegan_tensor::gradcheck::{check_gradients, GradCheckConfig};
use condensegan_tensor::{nn, DType, Tensor};

const SPEC: ImageSpec = ImageSpec {
    height: 16,
    width: 16,
    channels: 1,
    classes: 10,
};

fn images(n: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, 0);
    Tensor::from_vec(rng::normal_vec(&mut r, n * 256).into_iter().map(|v| v.tanh()).collect(), &[n, 16, 16, 1]).unwrap()
}

#[test]
fn feature_dim_at_full_width() {
    let psi = Embedder::init_random(1, 128, 0).unwrap();
    assert_eq!(psi.feature_dim(16, 16), 512);
    assert_eq!(psi.embed(&images(3, 1)).unwrap().shape(), &[3, 512]);
}

#[test]
fn blank_images_embed_to_zero() {
    // biases start at zero and instance norm maps a zero map to zero
    let psi = Embedder::init_random(1, 16, 4).unwrap();
    let x = Tensor::zeros(&[2, 16, 16, 1], DType::F32);
    assert!(psi.embed(&x).unwrap().to_f64_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn embed_rejects_bad_shapes() {
    let psi = Embedder::init_random(1, 8, 0).unwrap();
    assert!(psi.embed(&Tensor::zeros(&[1, 12, 12, 1], DType::F32)).is_err());
    assert!(psi.embed(&Tensor::zeros(&[1, 16, 16, 3], DType::F32)).is_err());
}

#[test]
fn embedding_is_differentiable_in_the_images() {
    let psi = Embedder::init_random(1, 4, 2).unwrap();
    let w = psi.weights.to_dtype(DType::F64);
    let psi64 = Embedder { weights: w, ..psi };
    let x = images(2, 3).to_dtype(DType::F64);
    let report = check_gradients(
        |t| {
            let e = psi64.embed(&t[0]).unwrap();
            Ok(e.square()?.sum()?)
        },
        &[x],
        // small step so probes do not straddle relu kinks
        GradCheckConfig { step: 1e-6, ..Default::default() },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn generator_output_shape_and_range() {
    let g = Generator::init(SPEC, 16, 32, 1).unwrap();
    let mut r = rng::stream(2, 0);
    let z = Tensor::from_vec(rng::normal_vec(&mut r, 5 * 16), &[5, 16]).unwrap();
    let x = g.generate(&z, &[0, 1, 2, 3, 9]).unwrap();
    assert_eq!(x.shape(), &[5, 16, 16, 1]);
    assert!(x.to_f64_vec().iter().all(|v| v.abs() <= 1.0));
    assert!(g.generate(&z, &[0, 1, 2, 3, 10]).is_err());
    assert!(g.generate(&z, &[0, 1]).is_err());
}

#[test]
fn calibrated_generator_is_per_sample() {
    let mut g = Generator::init(SPEC, 8, 16, 3).unwrap();
    assert!(!g.is_calibrated());
    g.calibrate(200, 1).unwrap();
    assert!(g.is_calibrated());
    let mut r = rng::stream(4, 0);
    let z = Tensor::from_vec(rng::normal_vec(&mut r, 6 * 8), &[6, 8]).unwrap();
    let labels = [0, 1, 2, 3, 4, 5];
    let all = g.generate(&z, &labels).unwrap();
    let first = g.generate(&z.narrow(0, 0, 2).unwrap(), &labels[..2]).unwrap();
    assert!(all.narrow(0, 0, 2).unwrap().bit_eq(&first));
    let batched = g.generate_batched(&z, &labels, 4).unwrap();
    assert!(batched.bit_eq(&all));
    let mut again = g.clone();
    again.calibrate(200, 1).unwrap();
    assert!(again.weights.bit_eq(&g.weights));
}

#[test]
fn generator_is_differentiable_in_the_latents() {
    let mut g = Generator::init(SPEC, 6, 8, 5).unwrap();
    g.calibrate(100, 0).unwrap();
    let g64 = Generator {
        weights: g.weights.to_dtype(DType::F64),
        ..g
    };
    let mut r = rng::stream(6, 0);
    let z = Tensor::from_f64(rng::normal_vec(&mut r, 2 * 6).into_iter().map(f64::from).collect(), &[2, 6]).unwrap();
    let target = images(2, 8).to_dtype(DType::F64);
    let report = check_gradients(
        |t| nn::squared_l2(&g64.generate(&t[0], &[1, 7]).unwrap().sub(&target)?),
        &[z],
        GradCheckConfig { step: 1e-6, ..Default::default() },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn weights_round_trip_bit_exact() {
    let g = Generator::init(SPEC, 8, 16, 9).unwrap();
    let bytes = g.weights.to_bytes();
    assert_eq!(&bytes[..4], b"ITGW");
    let back = ModelWeights::from_bytes(&bytes).unwrap();
    assert!(back.bit_eq(&g.weights));
    assert_eq!(back.to_bytes(), bytes);
    let g2 = Generator::from_weights(back, SPEC).unwrap();
    assert_eq!((g2.d_z, g2.width), (8, 16));
}

#[test]
fn weights_reject_corruption() {
    let bytes = Discriminator::init(SPEC, 8, 0).unwrap().weights.to_bytes();
    assert!(matches!(ModelWeights::from_bytes(&bytes[..bytes.len() - 3]), Err(CoreError::Truncated { .. })));
    let mut bad = bytes.clone();
    bad[1] = b'Q';
    assert!(matches!(ModelWeights::from_bytes(&bad), Err(CoreError::Format { .. })));
    let mut longer = bytes;
    longer.push(1);
    assert!(ModelWeights::from_bytes(&longer).is_err());
}

#[test]
fn duplicate_weight_names_are_rejected() {
    let mut w = ModelWeights::new();
    w.insert("a", Tensor::zeros(&[1], DType::F32)).unwrap();
    assert!(w.insert("a", Tensor::zeros(&[1], DType::F32)).is_err());
}

#[test]
fn classifier_architectures_produce_logits() {
    let x = images(3, 2);
    for arch in [Arch::ConvNet, Arch::VggIsh, Arch::ResNetIsh] {
        let net = Classifier::init(arch, SPEC, 8, 1).unwrap();
        assert_eq!(net.logits(&x).unwrap().shape(), &[3, 10]);
        assert_eq!(net.predict(&x, 2).unwrap().len(), 3);
        assert_eq!(Arch::parse(arch.name()).unwrap(), arch);
    }
    assert!(Arch::parse("lenet").is_err());
}

#[test]
fn convnet_embedder_shares_weights() {
    let net = Classifier::init(Arch::ConvNet, SPEC, 8, 4).unwrap();
    let psi = net.embedder().unwrap();
    let direct = Embedder::from_weights(psi.weights.clone()).unwrap();
    let x = images(2, 5);
    assert!(psi.embed(&x).unwrap().bit_eq(&direct.embed(&x).unwrap()));
    assert!(Classifier::init(Arch::VggIsh, SPEC, 8, 4).unwrap().embedder().is_err());
}

#[test]
fn discriminator_gives_one_logit_per_image() {
    let d = Discriminator::init(SPEC, 8, 1).unwrap();
    let out = d.logits(&images(4, 1), &[0, 3, 3, 9]).unwrap();
    assert_eq!(out.shape(), &[4]);
    let planes = d.condition_planes(&[2], DType::F32).unwrap().to_f64_vec();
    assert_eq!(planes.iter().sum::<f64>(), 256.0);
    assert_eq!(planes[2], 1.0);
}

fn tiny_sets() -> (condensegan_core::data::ImageSet, condensegan_core::data::ImageSet) {
    let ds = gen_shapes(10, 20, 16, 1, &ShapeStyle::default(), 3).unwrap();
    let s = ds.split();
    (s.train.to_image_set().unwrap(), s.val.to_image_set().unwrap())
}

fn tiny_pool_config(snapshots: usize, epochs: Vec<usize>) -> PoolConfig {
    PoolConfig {
        snapshots,
        snapshot_epochs: epochs,
        width: 4,
        train: TrainConfig {
            epochs: 1,
            augment: None,
            ..TrainConfig::default()
        },
        ..PoolConfig::default()
    }
}

#[test]
fn untrained_single_snapshot_lands_in_a_low_bin() {
    let (train, val) = tiny_sets();
    let pool = pool_build(&train, &val, &tiny_pool_config(1, vec![0]), 2).unwrap();
    assert_eq!(pool.snapshots.len(), 1);
    let acc = pool.snapshots[0].val_acc;
    assert!(acc <= 0.3, "untrained accuracy {acc}");
    assert!(pool.bin_of(acc) <= 1);
}

#[test]
fn bins_partition_the_pool() {
    let (train, val) = tiny_sets();
    let pool = pool_build(&train, &val, &tiny_pool_config(5, vec![0, 1, 2]), 7).unwrap();
    assert_eq!(pool.snapshots.len(), 5);
    let mut seen: Vec<usize> = pool.bins().concat();
    seen.sort_unstable();
    assert_eq!(seen, (0..5).collect::<Vec<_>>());
    for (b, members) in pool.bins().iter().enumerate() {
        for &i in members {
            assert_eq!(pool.bin_of(pool.snapshots[i].val_acc), b);
        }
    }
}

fn synthetic_pool(accs: &[f64]) -> SnapshotPool {
    let mut pool = SnapshotPool::new(vec![0.0, 0.25, 0.5, 0.75, 1.0]).unwrap();
    for (i, &a) in accs.iter().enumerate() {
        pool.snapshots.push(Snapshot {
            net: Classifier::init(Arch::ConvNet, SPEC, 4, i as u64).unwrap(),
            val_acc: a,
            label: format!("s{i}"),
        });
    }
    pool
}

#[test]
fn bin_edges_must_be_increasing() {
    assert!(SnapshotPool::new(vec![0.0, 0.5, 0.5, 1.0]).is_err());
    assert!(SnapshotPool::new(vec![0.1, 1.0]).is_err());
    let pool = SnapshotPool::new(vec![0.0, 0.5, 1.0]).unwrap();
    assert_eq!(pool.bin_of(0.0), 0);
    assert_eq!(pool.bin_of(0.5), 1);
    assert_eq!(pool.bin_of(1.0), 1);
}

#[test]
fn source_selection() {
    let pool = synthetic_pool(&[0.1, 0.6, 0.9, 0.95, 0.3]);
    assert_eq!(pool.select(&EmbedderSource::All).unwrap(), vec![0, 1, 2, 3, 4]);
    assert_eq!(pool.select(&EmbedderSource::TopBin).unwrap(), vec![2, 3]);
    assert_eq!(pool.select(&EmbedderSource::BinRange { lo: 0.0, hi: 0.5 }).unwrap(), vec![0, 4]);
    assert!(SnapshotPool::new(vec![0.0, 1.0]).unwrap().select(&EmbedderSource::All).is_err());
    for s in ["random-init", "top-bin", "all", "bin:0.2-0.6"] {
        assert_eq!(EmbedderSource::parse(s).unwrap().name(), s);
    }
    assert!(EmbedderSource::parse("bin:0.6-0.2").is_err());
}

#[test]
fn uniform_draws_cover_the_pool() {
    let pool = synthetic_pool(&[0.1, 0.2, 0.3, 0.4]);
    let mut r = rng::stream(5, 0);
    let mut counts = [0usize; 4];
    for _ in 0..300 {
        let (_, i) = pool_draw(&pool, &EmbedderSource::All, SPEC, 4, &mut r).unwrap();
        counts[i.unwrap()] += 1;
    }
    assert!(counts.iter().all(|&c| c >= 60), "{counts:?}");
    let (fresh, none) = pool_draw(&pool, &EmbedderSource::RandomInit, SPEC, 4, &mut r).unwrap();
    assert!(none.is_none());
    assert_eq!(fresh.width, 4);
}

#[test]
fn pool_save_load_round_trip() {
    let pool = synthetic_pool(&[0.15, 0.8]);
    let dir = std::env::temp_dir().join(format!("pool-rt-{}", std::process::id()));
    pool.save(&dir).unwrap();
    let back = SnapshotPool::load(&dir).unwrap();
    assert_eq!(back.bin_edges, pool.bin_edges);
    assert_eq!(back.snapshots.len(), 2);
    for (a, b) in back.snapshots.iter().zip(&pool.snapshots) {
        assert_eq!(a.val_acc, b.val_acc);
        assert_eq!(a.label, b.label);
        assert!(a.net.weights.bit_eq(&b.net.weights));
    }
    std::fs::remove_dir_all(dir).unwrap();
}
