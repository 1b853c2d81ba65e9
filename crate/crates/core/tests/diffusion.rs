mod common;

use common::{compact_net, random_image, schedule, ConstDenoiser, ExactNoise, ZeroDenoiser};
use mdps_core::data::{generate_synthetic, SyntheticSpec};
use mdps_core::diffusion::{
    ddim_step, ddim_step_via_x0, ddim_update, ddim_update_via_x0, estimate_x0_prior, load_checkpoint,
    save_checkpoint, train, training_loss, training_loss_with, Checkpoint, DdimCoefficients, Denoiser,
    TrainConfig,
};
use mdps_core::{Error, ImageTensor, NoiseSchedule, Rng, ValueRange};
use mdps_nn::Tensor;
use proptest::prelude::*;

fn scalar(v: f32) -> ImageTensor {
    ImageTensor::new(1, 1, 1, vec![v], ValueRange::Unbounded).unwrap()
}

#[test]
fn scalar_step_matches_hand_evaluation() {
    // Independent f64 evaluation of the same step.
    let (ab_t, ab_s, x_t, eps): (f64, f64, f64, f64) = (0.5, 0.9, 1.0, 0.2);
    let sigma = ((1.0 - ab_s) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_s).sqrt();
    let x0 = (x_t - (1.0 - ab_t).sqrt() * eps) / ab_t.sqrt();
    let expected = ab_s.sqrt() * x0 + (1.0 - ab_s - sigma * sigma).sqrt() * eps;
    assert!((sigma - 0.2981).abs() < 1e-4);
    assert!((x0 - 1.2142).abs() < 1e-4);
    assert!((expected - 1.1731).abs() < 1e-3);

    let c = DdimCoefficients::new(ab_t, ab_s).unwrap();
    assert!((c.sigma - sigma).abs() < 1e-12);
    let single = ddim_update(&[1.0], &[0.2], &[0.0], &c).unwrap();
    let staged = ddim_update_via_x0(&[1.0], &[0.2], &[0.0], &c).unwrap();
    assert!((single[0] as f64 - expected).abs() < 1e-5);
    assert!((staged[0] as f64 - expected).abs() < 1e-5);
}

#[test]
fn zero_noise_propagation() {
    let c = DdimCoefficients::with_sigma(0.4, 0.8, 0.0).unwrap();
    let x = [0.3f32, -1.2, 2.0];
    let out = ddim_update(&x, &[0.0; 3], &[5.0; 3], &c).unwrap();
    let k = (0.8f64 / 0.4).sqrt();
    for (o, v) in out.iter().zip(x) {
        assert!((*o as f64 - k * v as f64).abs() < 1e-6);
    }
}

#[test]
fn final_step_inverts_exactly() {
    let sched = schedule();
    let mut rng = Rng::new(3);
    let x0 = random_image(1, 4, 4, &mut rng);
    let (x_t, eps) = sched.forward_noise(&x0, 50, &mut rng).unwrap();
    let out = ddim_step(&x_t, 50, 0, &eps, &sched, &mut rng).unwrap();
    for (a, b) in out.data().iter().zip(x0.data()) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn negative_radicand_is_rejected() {
    let err = DdimCoefficients::with_sigma(0.5, 0.9, 0.5).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
    assert!(DdimCoefficients::with_sigma(0.5, 0.0, 0.1).is_err());
}

#[test]
fn step_forms_draw_the_same_noise() {
    let sched = schedule();
    let mut rng = Rng::new(11);
    let x = random_image(3, 5, 5, &mut rng);
    let e = random_image(3, 5, 5, &mut rng);
    let a = ddim_step(&x, 400, 380, &e, &sched, &mut Rng::new(1)).unwrap();
    let b = ddim_step_via_x0(&x, 400, 380, &e, &sched, &mut Rng::new(1)).unwrap();
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() <= 1e-5);
    }
}

proptest! {
    #[test]
    fn single_and_two_stage_forms_agree(
        t in 2usize..=1000,
        frac in 0.0f64..1.0,
        x in prop::collection::vec(-3.0f32..3.0, 16),
        e in prop::collection::vec(-3.0f32..3.0, 16),
        z in prop::collection::vec(-3.0f32..3.0, 16),
    ) {
        let sched = schedule();
        let s = ((t as f64 * frac) as usize).min(t - 1);
        let c = DdimCoefficients::from_schedule(&sched, t, s).unwrap();
        let a = ddim_update(&x, &e, &z, &c).unwrap();
        let b = ddim_update_via_x0(&x, &e, &z, &c).unwrap();
        let scale = 1.0f32.max(a.iter().fold(0.0f32, |m, v| m.max(v.abs())));
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() <= 1e-5 * scale, "{} vs {}", p, q);
        }
    }
}

#[test]
fn x0_prior_examples() {
    let sched = NoiseSchedule::linear(2, 0.75, 0.75).unwrap();
    // alpha_bar_1 = 0.25
    assert!((sched.alpha_bar(1) - 0.25).abs() < 1e-12);
    let x0 = estimate_x0_prior(&scalar(1.0), 1, &ConstDenoiser(0.5), &sched).unwrap();
    let expected = (1.0 - 0.75f64.sqrt() * 0.5) / 0.5;
    assert!((expected - 1.1340).abs() < 1e-4);
    assert!((x0.data()[0] as f64 - expected).abs() < 1e-5);

    let zero = estimate_x0_prior(&scalar(0.8), 1, &ZeroDenoiser, &sched).unwrap();
    assert!((zero.data()[0] - 0.8 / 0.5).abs() < 1e-6);
}

#[test]
fn x0_prior_recovers_clean_image_with_exact_noise() {
    let sched = schedule();
    let mut rng = Rng::new(5);
    let x0 = random_image(3, 6, 6, &mut rng);
    let (x_t, _) = sched.forward_noise(&x0, 300, &mut rng).unwrap();
    let model = ExactNoise {
        x0: x0.to_batch(),
        alpha_bars: sched.alpha_bars().to_vec(),
    };
    let est = estimate_x0_prior(&x_t, 300, &model, &sched).unwrap();
    for (a, b) in est.data().iter().zip(x0.data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn training_loss_examples() {
    let sched = schedule();
    let mut rng = Rng::new(9);
    let x0 = Tensor::from_vec([2, 3, 4, 4], rng.normal_vec(96)).unwrap();
    let ones = Tensor::full([2, 3, 4, 4], 1.0);
    let loss = training_loss_with(&ZeroDenoiser, &x0, &[10, 700], &ones, &sched).unwrap();
    assert!((loss - 1.0).abs() < 1e-12);

    let exact = ExactNoise {
        x0: x0.clone(),
        alpha_bars: sched.alpha_bars().to_vec(),
    };
    let eps = Tensor::from_vec([2, 3, 4, 4], rng.normal_vec(96)).unwrap();
    let loss = training_loss_with(&exact, &x0, &[1, 999], &eps, &sched).unwrap();
    assert!(loss < 1e-8, "{loss}");

    let net = compact_net(3, 1);
    for seed in 0..3 {
        let l = training_loss(&net, &x0, &sched, &mut Rng::new(seed)).unwrap();
        assert!(l >= 0.0 && l.is_finite());
    }
    let empty = Tensor::zeros([0, 3, 4, 4]);
    assert!(training_loss(&net, &empty, &sched, &mut rng).is_err());
}

fn small_set(n: usize, size: usize, seed: u64) -> Vec<ImageTensor> {
    let bench = generate_synthetic(&SyntheticSpec {
        seed,
        n_train: n,
        n_test_normal: 1,
        n_test_anomalous: 0,
        size,
    })
    .unwrap();
    bench.train.into_iter().map(|s| s.image).collect()
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let sched = schedule();
    let data = small_set(1, 32, 1);
    let mut net = compact_net(3, 2);
    let before = net.clone();
    let cfg = TrainConfig {
        epochs: 1,
        learning_rate: 0.0,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let history = train(&mut net, &data, &cfg, &sched, &mut Rng::new(0), &mut |_, _| {}).unwrap();
    assert_eq!(history.len(), 1);
    assert_eq!(net, before);
}

#[test]
fn zero_epochs_returns_empty_history() {
    let sched = schedule();
    let data = small_set(2, 32, 1);
    let mut net = compact_net(3, 2);
    let before = net.clone();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let history = train(&mut net, &data, &cfg, &sched, &mut Rng::new(0), &mut |_, _| {}).unwrap();
    assert!(history.is_empty());
    assert_eq!(net, before);
}

#[test]
fn empty_dataset_is_an_error() {
    let sched = schedule();
    let mut net = compact_net(3, 2);
    let err = train(&mut net, &[], &TrainConfig::default(), &sched, &mut Rng::new(0), &mut |_, _| {});
    assert!(matches!(err, Err(Error::Dataset(_))));
}

#[test]
fn training_reduces_loss_over_seeds() {
    let sched = schedule();
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 4,
        learning_rate: 2e-3,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut first = Vec::new();
    let mut last = Vec::new();
    for seed in 0..5u64 {
        let data = small_set(16, 32, seed);
        let mut rng = Rng::new(100 + seed);
        let mut net = mdps_core::diffusion::NetDenoiser::new(
            mdps_core::diffusion::Architecture::Compact(Default::default()),
            &mut rng,
        )
        .unwrap();
        let history = train(&mut net, &data, &cfg, &sched, &mut rng, &mut |_, _| {}).unwrap();
        first.push(history[0]);
        last.push(*history.last().unwrap());
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (f, l) = (median(&mut first), median(&mut last));
    assert!(l < 0.5 * f, "median first {f}, median last {l}");
}

/// `||y - x0_prior(x)||^2` evaluated in f64 from an f32 network prediction.
fn prior_loss(net: &dyn Denoiser, x: &[f32], y: &[f32], t: usize, sched: &NoiseSchedule) -> f64 {
    let batch = Tensor::from_vec([1, 3, 8, 8], x.to_vec()).unwrap();
    let eps = net.predict(&batch, &[t]).unwrap();
    let ab = sched.alpha_bar(t);
    x.iter()
        .zip(eps.data())
        .zip(y)
        .map(|((&x, &e), &y)| {
            let x0 = (x as f64 - (1.0 - ab).sqrt() * e as f64) / ab.sqrt();
            (x0 - y as f64).powi(2)
        })
        .sum()
}

#[test]
fn input_gradient_matches_finite_differences() {
    let sched = schedule();
    let net = compact_net(3, 21);
    let mut rng = Rng::new(4);
    let x = random_image(3, 8, 8, &mut rng);
    let y = random_image(3, 8, 8, &mut rng);
    let t = 150;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let batch = x.to_batch();
    let mut r = Vec::new();
    let (_, vjp) = net
        .predict_with_vjp(&batch, &[t], &mut |eps: &Tensor| {
            r = batch
                .data()
                .iter()
                .zip(eps.data())
                .zip(y.data())
                .map(|((&x, &e), &y)| 2.0 * ((x as f64 - b * e as f64) / a - y as f64))
                .collect();
            Tensor::from_vec(batch.shape(), r.iter().map(|v| (-b / a * v) as f32).collect()).map_err(Into::into)
        })
        .unwrap();
    let analytic: Vec<f64> = r.iter().zip(vjp.data()).map(|(r, &j)| r / a + j as f64).collect();

    let h = 1e-3f32;
    let mut good = 0;
    for i in 0..x.data().len() {
        let mut plus = x.data().to_vec();
        let mut minus = x.data().to_vec();
        plus[i] += h;
        minus[i] -= h;
        let fd = (prior_loss(&net, &plus, y.data(), t, &sched) - prior_loss(&net, &minus, y.data(), t, &sched))
            / (2.0 * h as f64);
        let rel = (fd - analytic[i]).abs() / analytic[i].abs().max(1e-3);
        if rel <= 1e-2 {
            good += 1;
        }
    }
    let frac = good as f64 / x.data().len() as f64;
    assert!(frac >= 0.95, "only {frac} of positions within tolerance");
}

#[test]
fn batched_prediction_matches_single() {
    let net = compact_net(3, 8);
    let mut rng = Rng::new(2);
    let items: Vec<Tensor> = (0..3).map(|_| random_image(3, 8, 8, &mut rng).to_batch()).collect();
    let t = [5, 300, 999];
    let batch = Tensor::stack(&items).unwrap();
    let out = net.predict(&batch, &t).unwrap();
    for (i, item) in items.iter().enumerate() {
        let single = net.predict(item, &t[i..i + 1]).unwrap();
        assert_eq!(single.data(), out.item(i));
    }
}

fn checkpoint() -> Checkpoint {
    Checkpoint {
        model: compact_net(3, 31),
        schedule: schedule().params(),
        train_config: TrainConfig::default(),
        category: "widget".into(),
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/model.safetensors");
    let ckpt = checkpoint();
    save_checkpoint(&path, &ckpt).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, ckpt);

    let sched = schedule();
    let mut rng = Rng::new(12);
    let x0 = Tensor::from_vec([2, 3, 8, 8], rng.normal_vec(384)).unwrap();
    let eps = Tensor::from_vec([2, 3, 8, 8], rng.normal_vec(384)).unwrap();
    let a = training_loss_with(&ckpt.model, &x0, &[3, 600], &eps, &sched).unwrap();
    let b = training_loss_with(&loaded.model, &x0, &[3, 600], &eps, &sched).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_with_other_version_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.safetensors");
    save_checkpoint(&path, &checkpoint()).unwrap();

    let buf = std::fs::read(&path).unwrap();
    let (_, header) = safetensors::SafeTensors::read_metadata(&buf).unwrap();
    let mut meta = header.metadata().clone().unwrap();
    meta.insert("version".into(), "99".into());
    let st = safetensors::SafeTensors::deserialize(&buf).unwrap();
    let views: Vec<(String, safetensors::tensor::TensorView)> = st.tensors();
    let out = safetensors::serialize(views, Some(meta)).unwrap();
    let bad = dir.path().join("bad.safetensors");
    std::fs::write(&bad, out).unwrap();
    assert!(matches!(load_checkpoint(&bad), Err(Error::Checkpoint(_))));

    std::fs::write(&bad, b"not a checkpoint").unwrap();
    assert!(load_checkpoint(&bad).is_err());
}
