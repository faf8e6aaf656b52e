use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segmenter::decoder::DecoderKind;
use segmenter::image::{normalize_image, LabelMap, RgbImage, Sample, IGNORE_LABEL};
use segmenter::io::synthetic::{synthesize, SyntheticSpec};
use segmenter::train::{
    augment, augment_with, poly_lr, sgd_step, train_loop, AugmentParams, LogLine, Sgd, TrainConfig,
    Trainer,
};
use segmenter::{Error, ModelConfig, ParamStore, SegmenterModel, Tensor};

const MEAN: [f64; 3] = [10.0, 20.0, 30.0];
const STD: [f64; 3] = [2.0, 4.0, 8.0];

fn tiny_config(kind: DecoderKind) -> ModelConfig {
    ModelConfig::custom(1, 16, 2, 8, 16, kind, 3)
}

fn tiny_data(n: usize) -> Vec<Sample> {
    synthesize(&SyntheticSpec {
        n_images: n,
        height: 16,
        width: 16,
        num_classes: 3,
        min_size: 4,
        max_size: 10,
        seed: 3,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn random_sample(seed: u64, w: usize, h: usize, k: u8) -> Sample {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = RgbImage::new(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap();
    let labels = LabelMap::new(
        w,
        h,
        (0..w * h)
            .map(|_| {
                if rng.random_bool(0.1) {
                    IGNORE_LABEL
                } else {
                    rng.random_range(0..k)
                }
            })
            .collect(),
    )
    .unwrap();
    Sample::new(image, labels).unwrap()
}

fn px(t: &Tensor<f64>, w: usize, x: usize, y: usize, c: usize) -> f64 {
    t.data()[(y * w + x) * 3 + c]
}

fn scalar_store(value: f64, grad: Option<f64>) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::scalar(value));
    store.get_mut(id).grad = grad.map(Tensor::scalar);
    store
}

#[test]
fn poly_lr_endpoints_and_midpoint() {
    assert_eq!(poly_lr(1e-3, 0, 100, 0.9).unwrap(), 1e-3);
    assert_eq!(poly_lr(1e-3, 100, 100, 0.9).unwrap(), 0.0);
    // 1e-3 * 0.5^0.9 evaluated with 40-digit decimal arithmetic.
    let mid = poly_lr(1e-3, 500, 1000, 0.9).unwrap();
    assert!((mid - 5.358867312681466e-4).abs() < 1e-18, "{mid}");
}

#[test]
fn poly_lr_rejects_iteration_past_end() {
    assert!(matches!(
        poly_lr(1e-3, 11, 10, 0.9),
        Err(Error::Contract(_))
    ));
}

proptest! {
    #[test]
    fn poly_lr_is_non_increasing(total in 1usize..5000, a in 0usize..5000, b in 0usize..5000, power in 0.0f64..3.0) {
        let (lo, hi) = (a.min(b) % (total + 1), a.max(b) % (total + 1));
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        prop_assert!(poly_lr(0.01, lo, total, power).unwrap() >= poly_lr(0.01, hi, total, power).unwrap());
    }

    #[test]
    fn sgd_step_moves_by_exactly_lr_times_grad(p in -10.0f64..10.0, g in -10.0f64..10.0, lr in 0.0f64..1.0) {
        let mut store = scalar_store(p, Some(g));
        sgd_step(&mut store, lr).unwrap();
        prop_assert_eq!(store.get(scalar_id(&store)).value.item(), p - lr * g);
    }

    #[test]
    fn augmented_labels_never_gain_classes(seed in 0u64..1000, w in 3usize..24, h in 3usize..24) {
        let sample = random_sample(seed, w, h, 5);
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out: segmenter::train::TrainSample<f32> = augment(&sample, MEAN, STD, (12, 12), &cfg, &mut rng);
        let mut allowed: Vec<u8> = sample.labels.data.clone();
        allowed.push(IGNORE_LABEL);
        prop_assert!(out.labels.data.iter().all(|l| allowed.contains(l)));
        prop_assert_eq!(out.image.shape(), &[12, 12, 3]);
    }
}

fn scalar_id(store: &ParamStore<f64>) -> segmenter::ParamId {
    store.position("p").unwrap()
}

#[test]
fn sgd_zero_rate_leaves_parameters_bitwise() {
    let mut model = SegmenterModel::<f32>::new(tiny_config(DecoderKind::Mask), 1).unwrap();
    let before = model.store.clone();
    for p in model.store.iter_mut() {
        p.grad = Some(Tensor::full(p.value.shape(), 0.37));
    }
    sgd_step(&mut model.store, 0.0).unwrap();
    for ((_, a), (_, b)) in model.store.iter().zip(before.iter()) {
        assert_eq!(a.value, b.value);
        assert!(a.grad.as_ref().unwrap().data().iter().all(|g| *g == 0.0));
    }
}

#[test]
fn sgd_scalar_step() {
    let mut store = scalar_store(3.0, Some(2.0));
    sgd_step(&mut store, 0.5).unwrap();
    assert_eq!(store.value(scalar_id(&store)).item(), 2.0);
}

#[test]
fn sgd_quadratic_bowl_contracts_by_one_fifth() {
    // d/dp p^2 = 2p, so p <- p - 0.4 * 2p = 0.2 p.
    let mut store = scalar_store(5.0, None);
    let id = scalar_id(&store);
    let mut prev = 5.0f64;
    for _ in 0..10 {
        let p = store.value(id).item();
        store.get_mut(id).grad = Some(Tensor::scalar(2.0 * p));
        sgd_step(&mut store, 0.4).unwrap();
        let next = store.value(id).item();
        assert!(next.abs() < prev.abs());
        assert!((next - 0.2 * p).abs() <= 1e-15 * p.abs());
        prev = next;
    }
}

#[test]
fn sgd_missing_gradient_is_a_contract_error() {
    let mut store = scalar_store(1.0, None);
    assert!(matches!(sgd_step(&mut store, 0.1), Err(Error::Contract(_))));
}

#[test]
fn momentum_accumulates_velocity() {
    let mut store = scalar_store(0.0, Some(1.0));
    let id = scalar_id(&store);
    let mut opt = Sgd::new(0.5);
    opt.step(&mut store, 1.0).unwrap();
    assert_eq!(store.value(id).item(), -1.0);
    store.get_mut(id).grad = Some(Tensor::scalar(1.0));
    opt.step(&mut store, 1.0).unwrap();
    // v = 0.5 * 1 + 1
    assert_eq!(store.value(id).item(), -2.5);
}

#[test]
fn identity_augmentation_only_normalizes() {
    let sample = random_sample(4, 16, 16, 3);
    let out = augment_with::<f64>(&sample, MEAN, STD, (16, 16), AugmentParams::IDENTITY);
    assert_eq!(out.image, normalize_image::<f64>(&sample.image, MEAN, STD));
    assert_eq!(out.labels, sample.labels);
    let off = TrainConfig {
        augment: false,
        ..TrainConfig::default()
    };
    let via_cfg = augment::<f64>(
        &sample,
        MEAN,
        STD,
        (16, 16),
        &off,
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    assert_eq!(via_cfg, out);
}

#[test]
fn flip_is_an_involution() {
    let sample = random_sample(5, 11, 7, 4);
    let flip = AugmentParams {
        flip: true,
        ..AugmentParams::IDENTITY
    };
    let once = augment_with::<f64>(&sample, MEAN, STD, (7, 11), flip);
    assert_ne!(once.labels, sample.labels);
    assert_eq!(once.labels.flip_horizontal(), sample.labels);
    for y in 0..7 {
        for x in 0..11 {
            assert_eq!(once.labels.get(x, y), sample.labels.get(10 - x, y));
            for c in 0..3 {
                assert_eq!(
                    px(&once.image, 11, x, y, c),
                    px(
                        &normalize_image::<f64>(&sample.image, MEAN, STD),
                        11,
                        10 - x,
                        y,
                        c
                    )
                );
            }
        }
    }
}

#[test]
fn small_images_are_padded_with_zero_and_ignore() {
    let sample = random_sample(6, 6, 5, 3);
    let out = augment_with::<f64>(&sample, MEAN, STD, (8, 10), AugmentParams::IDENTITY);
    for y in 0..8 {
        for x in 0..10 {
            if x < 6 && y < 5 {
                assert_eq!(out.labels.get(x, y), sample.labels.get(x, y));
            } else {
                assert_eq!(out.labels.get(x, y), IGNORE_LABEL);
                assert!((0..3).all(|c| px(&out.image, 10, x, y, c) == 0.0));
            }
        }
    }
}

#[test]
fn large_images_are_cropped_at_the_offset() {
    let sample = random_sample(7, 20, 18, 3);
    let params = AugmentParams {
        offset: (3, 5),
        ..AugmentParams::IDENTITY
    };
    let out = augment_with::<f64>(&sample, MEAN, STD, (8, 8), params);
    for y in 0..8 {
        for x in 0..8 {
            assert_eq!(out.labels.get(x, y), sample.labels.get(x + 3, y + 5));
        }
    }
}

#[test]
fn augmentation_draw_statistics() {
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let (mut flips, mut scale_sum) = (0usize, 0.0);
    for _ in 0..n {
        let p = AugmentParams::sample(&mut rng, (64, 64), (32, 32), &cfg);
        assert!((0.5..2.0).contains(&p.scale));
        flips += p.flip as usize;
        scale_sum += p.scale;
    }
    let freq = flips as f64 / n as f64;
    let mean = scale_sum / n as f64;
    // Uniform[0.5, 2] has mean 1.25.
    assert!((freq - 0.5).abs() <= 0.02, "flip frequency {freq}");
    assert!((mean - 1.25).abs() <= 0.02, "scale mean {mean}");
}

#[test]
fn zero_iterations_leave_the_model_unchanged() {
    let model = SegmenterModel::<f32>::new(tiny_config(DecoderKind::Linear), 2).unwrap();
    let cfg = TrainConfig {
        iterations: 0,
        ..TrainConfig::default()
    };
    let (trained, log) = train_loop(model.clone(), &tiny_data(2), cfg).unwrap();
    assert!(log.is_empty());
    for ((_, a), (_, b)) in trained.store.iter().zip(model.store.iter()) {
        assert_eq!(a.value, b.value);
    }
}

fn short_run(kind: DecoderKind, seed: u64) -> (SegmenterModel<f32>, Vec<LogLine>) {
    let mut config = tiny_config(kind);
    config.encoder.stochastic_depth = 0.1;
    config.encoder.dropout = 0.1;
    let model = SegmenterModel::<f32>::new(config, 9).unwrap();
    let cfg = TrainConfig {
        iterations: 4,
        batch_size: 3,
        momentum: 0.5,
        seed,
        ..TrainConfig::default()
    };
    train_loop(model, &tiny_data(5), cfg).unwrap()
}

#[test]
fn same_seed_gives_bitwise_identical_parameters() {
    for kind in [DecoderKind::Linear, DecoderKind::Mask] {
        let (a, log_a) = short_run(kind, 42);
        let (b, log_b) = short_run(kind, 42);
        assert_eq!(log_a, log_b);
        for ((_, pa), (_, pb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(pa.value, pb.value, "{}", pa.name);
        }
        let (c, _) = short_run(kind, 43);
        assert!(a
            .store
            .iter()
            .zip(c.store.iter())
            .any(|((_, pa), (_, pc))| pa.value != pc.value));
    }
}

#[test]
fn log_follows_the_schedule() {
    let (_, log) = short_run(DecoderKind::Mask, 1);
    assert_eq!(log.len(), 4);
    for (i, line) in log.iter().enumerate() {
        assert_eq!(line.iteration, i + 1);
        assert_eq!(line.lr, poly_lr(1e-3, i, 4, 0.9).unwrap());
        assert!(line.loss.is_finite() && line.loss > 0.0);
    }
    let text = log[0].to_string();
    assert!(text.starts_with("iter=1 lr=1.000000e-3 loss="), "{text}");
    let with_miou = LogLine {
        miou: Some(0.5),
        ..log[0]
    };
    assert!(with_miou.to_string().ends_with(" miou=0.5000"));
}

#[test]
fn stepwise_training_matches_a_full_run() {
    let (full, _) = short_run(DecoderKind::Mask, 5);
    let mut config = tiny_config(DecoderKind::Mask);
    config.encoder.stochastic_depth = 0.1;
    config.encoder.dropout = 0.1;
    let cfg = TrainConfig {
        iterations: 4,
        batch_size: 3,
        momentum: 0.5,
        seed: 5,
        ..TrainConfig::default()
    };
    let data = tiny_data(5);
    let mut first = Trainer::new(SegmenterModel::new(config, 9).unwrap(), cfg).unwrap();
    first.step(&data).unwrap();
    first.step(&data).unwrap();
    // Continue from a copy, as a resumed run would.
    let mut resumed = first.clone();
    resumed.run(&data, |_, _| Ok(())).unwrap();
    assert!(resumed.finished());
    for ((_, a), (_, b)) in resumed.model.store.iter().zip(full.store.iter()) {
        assert_eq!(a.value, b.value);
    }
    assert!(matches!(resumed.step(&data), Err(Error::Contract(_))));
}

#[test]
fn non_finite_loss_aborts_before_updating() {
    let mut model = SegmenterModel::<f32>::new(tiny_config(DecoderKind::Linear), 3).unwrap();
    let id = model.store.position("decoder.head.bias").unwrap();
    model.store.value_mut(id).data_mut()[0] = f32::NAN;
    let before = model.store.clone();
    let mut trainer = Trainer::new(model, TrainConfig::default()).unwrap();
    let err = trainer.step(&tiny_data(2)).unwrap_err();
    assert!(
        matches!(err, Error::NonFiniteLoss { iteration: 0, .. }),
        "{err}"
    );
    assert_eq!(trainer.iteration, 0);
    for ((_, a), (_, b)) in trainer.model.store.iter().zip(before.iter()) {
        assert_eq!(a.value.data().len(), b.value.data().len());
        assert!(a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn invalid_configurations_are_rejected() {
    let bad = [
        TrainConfig {
            weight_decay: 1e-4,
            ..TrainConfig::default()
        },
        TrainConfig {
            base_lr: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            scale_range: (2.0, 0.5),
            ..TrainConfig::default()
        },
    ];
    for cfg in bad {
        assert!(cfg.validate().unwrap_err().is_validation());
    }
    let model = SegmenterModel::<f32>::new(tiny_config(DecoderKind::Linear), 0).unwrap();
    assert!(train_loop(model, &[], TrainConfig::default()).is_err());
}
