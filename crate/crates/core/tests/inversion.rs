use condensegan_core::data::{gen_shapes, ImageSet, ShapeStyle};
use condensegan_core::inversion::{
    invert_all, invert_from, inversion_objective, random_latents, reconstruction_error, select_reals, InversionConfig, InversionSummary, LatentSet, Provenance,
};
use condensegan_core::models::{Embedder, Generator};
use condensegan_core::rng;
use condensegan_core::CoreError;
use condensegan_tensor::{DType, Tensor};
use proptest::prelude::*;

fn t(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_values(v, shape, DType::F64).unwrap()
}

#[test]
fn hand_arithmetic_oracle() {
    // d_f = 2 with feature differences (1, 1); d_I = 4 with pixel
    // differences of 0.5: 2/2 + 1 * (4 * 0.25) / 4 = 1.25.
    let gf = t(&[1.0, 2.0], &[1, 2]);
    let xf = t(&[0.0, 1.0], &[1, 2]);
    let g = t(&[0.5, 0.5, 0.5, 0.5], &[1, 2, 2, 1]);
    let x = t(&[0.0; 4], &[1, 2, 2, 1]);
    let v = reconstruction_error(&gf, &xf, &g, &x, 1.0).unwrap().to_f64_vec();
    assert_eq!(v, vec![1.25]);
    let feature_only = reconstruction_error(&gf, &gf, &g, &x, 0.0).unwrap().to_f64_vec();
    assert_eq!(feature_only, vec![0.0]);
}

fn setup() -> (Generator, Embedder, ImageSet) {
    let ds = gen_shapes(3, 8, 16, 1, &ShapeStyle::default(), 1).unwrap();
    let spec = ds.spec();
    let mut g = Generator::init(spec, 8, 16, 2).unwrap();
    g.calibrate(90, 3).unwrap();
    let psi = Embedder::init_random(1, 8, 4).unwrap();
    (g, psi, ds.to_image_set().unwrap())
}

fn latents(n: usize, d: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, 0);
    Tensor::from_vec(rng::normal_vec(&mut r, n * d), &[n, d]).unwrap()
}

#[test]
fn perfect_reconstruction_scores_zero() {
    let (g, psi, _) = setup();
    let z = latents(3, 8, 5);
    let labels = [0, 1, 2];
    let x = g.generate(&z, &labels).unwrap();
    let obj = inversion_objective(&g, &psi, &z, &labels, &x, 1.0).unwrap().item().unwrap();
    assert_eq!(obj, 0.0);
}

#[test]
fn starting_at_the_truth_stays_optimal() {
    let (g, psi, _) = setup();
    let z = latents(2, 8, 6);
    let labels = [1, 2];
    let x = g.generate(&z, &labels).unwrap();
    let cfg = InversionConfig { steps: 5, ..InversionConfig::default() };
    let res = invert_from(&g, &psi, &x, &labels, &[z], &cfg).unwrap();
    assert!(res.best.iter().all(|&b| b <= 1e-8), "{:?}", res.best);
}

#[test]
fn inversion_reduces_the_objective_and_leaves_g_untouched() {
    let (g, psi, _) = setup();
    let before = g.weights.to_bytes();
    let labels = [0, 1, 2, 0];
    let x = g.generate(&latents(4, 8, 7), &labels).unwrap();
    let cfg = InversionConfig { steps: 60, ..InversionConfig::default() };
    let res = invert_from(&g, &psi, &x, &labels, &[latents(4, 8, 8)], &cfg).unwrap();
    for i in 0..4 {
        assert!(res.best[i] <= res.initial[i]);
    }
    assert!(InversionSummary::median(&res.best) < 0.5 * InversionSummary::median(&res.initial));
    assert_eq!(g.weights.to_bytes(), before);
}

#[test]
fn restarts_keep_the_minimum() {
    let (g, psi, reals) = setup();
    let idx = [0, 1, 2];
    let x = reals.batch(&idx).unwrap();
    let labels: Vec<usize> = idx.iter().map(|&i| reals.labels[i]).collect();
    let cfg = InversionConfig { steps: 10, ..InversionConfig::default() };
    let (a, b) = (latents(3, 8, 10), latents(3, 8, 11));
    let both = invert_from(&g, &psi, &x, &labels, &[a.clone(), b.clone()], &cfg).unwrap();
    let only_a = invert_from(&g, &psi, &x, &labels, &[a], &cfg).unwrap();
    let only_b = invert_from(&g, &psi, &x, &labels, &[b], &cfg).unwrap();
    for i in 0..3 {
        assert!(both.best[i] <= only_a.best[i] && both.best[i] <= only_b.best[i]);
        assert_eq!(both.best[i], only_a.best[i].min(only_b.best[i]));
    }
}

#[test]
fn invert_all_counts_and_pairs() {
    let (g, psi, reals) = setup();
    let cfg = InversionConfig { steps: 2, restarts: 1, batch: 2, ..InversionConfig::default() };
    let (set, summary) = invert_all(&g, &psi, &reals, Some(3), &cfg, 12).unwrap();
    assert_eq!(set.len(), 9);
    assert_eq!(set.provenance, Provenance::Inverted);
    for c in 0..3 {
        assert_eq!(set.class_indices(c).len(), 3);
    }
    for (i, &j) in set.correspondence.iter().enumerate() {
        assert_eq!(reals.labels[j as usize], set.labels[i] as usize);
    }
    set.validate(Some(&reals)).unwrap();
    assert_eq!(summary.best.len(), 9);
    let (again, _) = invert_all(&g, &psi, &reals, Some(3), &cfg, 12).unwrap();
    assert_eq!(again.to_bytes(), set.to_bytes());
    assert!(invert_all(&g, &psi, &reals, Some(9), &cfg, 12).is_err());
}

#[test]
fn selection_is_class_major_and_sorted() {
    let (_, _, reals) = setup();
    let picked = select_reals(&reals, Some(2), 4).unwrap();
    assert_eq!(picked.len(), 6);
    for (k, pair) in picked.chunks(2).enumerate() {
        assert!(pair[0] < pair[1]);
        assert!(pair.iter().all(|&i| reals.labels[i] == k));
    }
    assert_eq!(select_reals(&reals, None, 0).unwrap().len(), reals.len());
}

fn sample_set() -> LatentSet {
    let (_, _, reals) = setup();
    random_latents(&reals, 5, Some(2), 3).unwrap()
}

#[test]
fn latent_file_layout_and_round_trip() {
    let set = sample_set();
    let b = set.to_bytes();
    assert_eq!(&b[..4], b"ITGZ");
    assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
    assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 5);
    assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 6);
    assert_eq!(b[24], 0);
    assert_eq!(b.len(), 25 + 6 * 4 + 6 * 8 + 6 * 5 * 4);
    assert_eq!(LatentSet::from_bytes(&b).unwrap(), set);
}

#[test]
fn latent_file_errors() {
    let b = sample_set().to_bytes();
    assert!(matches!(LatentSet::from_bytes(&b[..b.len() - 1]), Err(CoreError::Truncated { .. })));
    let mut tag = b.clone();
    tag[24] = 7;
    assert!(matches!(LatentSet::from_bytes(&tag), Err(CoreError::Format { .. })));
    let mut label = b;
    label[25] = 3;
    assert!(LatentSet::from_bytes(&label).is_err());
}

#[test]
fn validation_catches_broken_pairs() {
    let (_, _, reals) = setup();
    let set = random_latents(&reals, 5, Some(2), 3).unwrap();
    let mut dup = set.clone();
    dup.correspondence[1] = dup.correspondence[0];
    assert!(dup.validate(None).is_err());
    let mut wrong = set.clone();
    wrong.labels[0] = (wrong.labels[0] + 1) % 3;
    assert!(wrong.validate(Some(&reals)).is_err());
    let mut nan = set;
    nan.z[0] = f32::NAN;
    assert!(matches!(nan.validate(None), Err(CoreError::Numeric(_))));
}

#[test]
fn median_of_even_and_odd_lists() {
    assert_eq!(InversionSummary::median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(InversionSummary::median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn objective_is_non_negative(seed in any::<u64>(), lambda in 0.0f64..3.0) {
        let (g, psi, reals) = setup();
        let labels = [reals.labels[0], reals.labels[1]];
        let x = reals.batch(&[0, 1]).unwrap();
        let v = inversion_objective(&g, &psi, &latents(2, 8, seed), &labels, &x, lambda).unwrap().item().unwrap();
        prop_assert!(v >= 0.0 && v.is_finite());
    }

    #[test]
    fn subset_then_concat_restores(seed in any::<u64>()) {
        let set = sample_set();
        let mut r = rng::stream(seed, 0);
        let mut order: Vec<usize> = (0..set.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
        let (a, b) = order.split_at(2);
        let joined = LatentSet::concat(&[set.subset(a), set.subset(b)]).unwrap();
        prop_assert_eq!(joined, set.subset(&order));
    }
}
