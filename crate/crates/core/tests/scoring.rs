mod common;

use common::{compact_net, schedule};
use mdps_core::mdps::SamplerConfig;
use mdps_core::perception::{DifferenceConfig, ToyBackbone};
use mdps_core::scoring::{
    average_score_map, default_top_s, detect, generate_mask, image_score, DetectConfig, IdentitySampler, MaskMode,
    MdpsSampler, PosteriorSampler,
};
use mdps_core::{Error, ImageTensor, MaskImage, Result, Rng, ScoreMap, ValueRange};
use proptest::prelude::*;

fn map(h: usize, w: usize, data: &[f32]) -> ScoreMap {
    ScoreMap::new(h, w, data.to_vec()).unwrap()
}

fn unit_image(h: usize, w: usize, rng: &mut Rng) -> ImageTensor {
    let data = (0..3 * h * w).map(|_| rng.uniform() as f32).collect();
    ImageTensor::new(3, h, w, data, ValueRange::Unit).unwrap()
}

#[test]
fn averaging_examples() {
    let a = map(1, 2, &[1.0, 3.0]);
    let b = map(1, 2, &[3.0, 1.0]);
    assert_eq!(average_score_map(&[a.clone(), b]).unwrap().data(), &[2.0, 2.0]);
    assert_eq!(average_score_map(std::slice::from_ref(&a)).unwrap(), a);
    assert_eq!(average_score_map(&vec![a.clone(); 5]).unwrap(), a);
    assert!(average_score_map(&[]).is_err());
    assert!(average_score_map(&[a, map(2, 1, &[1.0, 1.0])]).is_err());
}

#[test]
fn top_s_examples() {
    let m = map(2, 2, &[5.0, 1.0, 4.0, 2.0]);
    assert_eq!(image_score(&m, 2), 4.5);
    assert_eq!(image_score(&m, 10), 3.0);
    assert_eq!(image_score(&m, 4), 3.0);
    assert_eq!(image_score(&map(3, 3, &[0.7; 9]), 4), 0.7f32 as f64);
}

#[test]
fn mask_examples() {
    let m = map(1, 3, &[0.0, 1.0, 2.0]);
    assert_eq!(generate_mask(&m, 0.5).unwrap().data(), &[0, 0, 1]);
    assert_eq!(generate_mask(&m, 1.0).unwrap().count(), 0);
    assert_eq!(generate_mask(&m, 0.0).unwrap().data(), &[0, 1, 1]);
    assert_eq!(generate_mask(&map(2, 2, &[3.0; 4]), 0.2).unwrap().count(), 0);
    assert!(generate_mask(&m, 1.5).is_err());
    assert!(generate_mask(&m, -0.1).is_err());
}

#[test]
fn default_top_s_follows_resolution() {
    assert_eq!(default_top_s(224 * 224), 500);
    assert_eq!(default_top_s(256 * 256), 500);
    assert_eq!(default_top_s(64 * 64), 41);
    assert_eq!(default_top_s(10), 1);
}

proptest! {
    #[test]
    fn mask_is_affine_invariant(
        data in prop::collection::vec(0.0f32..100.0, 16),
        a in 0.1f32..10.0,
        b in 0.0f32..50.0,
        lambda in 0.0f64..1.0,
    ) {
        let m = map(4, 4, &data);
        let t = map(4, 4, &data.iter().map(|v| a * v + b).collect::<Vec<_>>());
        let (lo, hi) = (m.min() as f64, m.max() as f64);
        let th = lo + lambda * (hi - lo);
        // Skip draws where f32 rounding could move a value across the threshold.
        prop_assume!(data.iter().all(|&v| (v as f64 - th).abs() > 1e-3 * (hi - lo).max(1.0)));
        prop_assert_eq!(generate_mask(&m, lambda).unwrap(), generate_mask(&t, lambda).unwrap());
    }

    #[test]
    fn raising_an_entry_never_lowers_the_score(
        data in prop::collection::vec(0.0f32..10.0, 1..40),
        idx in any::<prop::sample::Index>(),
        bump in 0.0f32..5.0,
        s in 1usize..50,
    ) {
        let before = map(1, data.len(), &data);
        let mut raised = data.clone();
        raised[idx.index(data.len())] += bump;
        let after = map(1, data.len(), &raised);
        prop_assert!(image_score(&after, s) >= image_score(&before, s));
    }
}

#[test]
fn perfect_reconstruction_scores_zero() {
    let mut rng = Rng::new(1);
    let y = unit_image(32, 32, &mut rng);
    let res = detect(
        &y,
        &IdentitySampler { samples: 4 },
        &ToyBackbone::new(),
        &DifferenceConfig::default(),
        &DetectConfig::default(),
        &Rng::new(0),
    )
    .unwrap();
    assert!(res.score_map.max() <= 1e-5);
    assert!(res.image_score <= 1e-5);
    assert_eq!(res.top_s, default_top_s(32 * 32));
}

fn sampler(samples: usize) -> SamplerConfig {
    SamplerConfig {
        samples,
        rho: 20.0,
        ..Default::default()
    }
}

#[test]
fn lambda_one_leaves_the_image_untouched() {
    let sched = schedule();
    let net = compact_net(3, 2);
    let s = MdpsSampler {
        model: &net,
        schedule: &sched,
        config: sampler(2),
    };
    let mut rng = Rng::new(2);
    let y = unit_image(16, 16, &mut rng);
    let cfg = DetectConfig {
        lambda: 1.0,
        ..Default::default()
    };
    let res = detect(&y, &s, &ToyBackbone::new(), &DifferenceConfig::default(), &cfg, &Rng::new(5)).unwrap();
    assert!(res.mask.is_empty());
    let model_y = y.to_model_space();
    for r in &res.reconstructions {
        for (a, b) in r.data().iter().zip(model_y.data()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }
    assert!(res.score_map.max() <= 1e-4, "{}", res.score_map.max());
}

#[test]
fn score_map_is_the_mean_of_sample_maps() {
    let sched = schedule();
    let net = compact_net(3, 3);
    let s = MdpsSampler {
        model: &net,
        schedule: &sched,
        config: sampler(3),
    };
    let mut rng = Rng::new(3);
    let y = unit_image(16, 16, &mut rng);
    let cfg = DetectConfig {
        keep_sample_maps: true,
        top_s: Some(7),
        ..Default::default()
    };
    let res = detect(&y, &s, &ToyBackbone::new(), &DifferenceConfig::default(), &cfg, &Rng::new(8)).unwrap();
    let maps = res.sample_maps.as_ref().unwrap();
    assert_eq!(maps.len(), 3);
    for i in 0..res.score_map.len() {
        let mean = maps.iter().map(|m| m.data()[i] as f64).sum::<f64>() / 3.0;
        assert!((mean - res.score_map.data()[i] as f64).abs() <= 1e-6);
    }
    assert_eq!(res.image_score, image_score(&res.score_map, 7));
    let again = detect(&y, &s, &ToyBackbone::new(), &DifferenceConfig::default(), &cfg, &Rng::new(8)).unwrap();
    assert_eq!(again, res);
}

/// Records the masks it is asked to sample with.
struct Recording(std::sync::Mutex<Vec<MaskImage>>);

impl PosteriorSampler for Recording {
    fn sample(&self, y: &ImageTensor, mask: &MaskImage, _rng: &Rng) -> Result<Vec<ImageTensor>> {
        self.0.lock().unwrap().push(mask.clone());
        // Flatten the top-left quadrant to create a localised difference.
        let mut x = y.to_model_space().into_data();
        let (h, w) = (y.height(), y.width());
        for c in 0..3 {
            for r in 0..h / 2 {
                for k in 0..w / 2 {
                    x[c * h * w + r * w + k] = 0.0;
                }
            }
        }
        Ok(vec![ImageTensor::new(3, h, w, x, ValueRange::Symmetric)?])
    }
}

#[test]
fn two_pass_uses_full_then_thresholded_mask() {
    let mut rng = Rng::new(4);
    let y = unit_image(16, 16, &mut rng);
    let rec = Recording(Default::default());
    let res = detect(&y, &rec, &ToyBackbone::new(), &DifferenceConfig::default(), &DetectConfig::default(), &Rng::new(0))
        .unwrap();
    let masks = rec.0.into_inner().unwrap();
    assert_eq!(masks.len(), 2);
    assert_eq!(masks[0].count(), 256);
    assert_eq!(masks[1], res.mask);
    assert!(res.mask.count() > 0 && res.mask.count() < 256);

    let rec = Recording(Default::default());
    let cfg = DetectConfig {
        mask_mode: MaskMode::FullMask,
        ..Default::default()
    };
    let res = detect(&y, &rec, &ToyBackbone::new(), &DifferenceConfig::default(), &cfg, &Rng::new(0)).unwrap();
    assert_eq!(rec.0.into_inner().unwrap().len(), 1);
    assert_eq!(res.mask.count(), 256);
}

struct Failing;

impl PosteriorSampler for Failing {
    fn sample(&self, _y: &ImageTensor, mask: &MaskImage, _rng: &Rng) -> Result<Vec<ImageTensor>> {
        if mask.count() == mask.data().len() {
            Ok(vec![ImageTensor::filled(3, mask.height(), mask.width(), 0.0, ValueRange::Symmetric)?])
        } else {
            Err(Error::InvalidArgument("boom".into()))
        }
    }
}

#[test]
fn errors_carry_the_pass_index() {
    let mut rng = Rng::new(5);
    let y = unit_image(16, 16, &mut rng);
    let err = detect(&y, &Failing, &ToyBackbone::new(), &DifferenceConfig::default(), &DetectConfig::default(), &Rng::new(0))
        .unwrap_err();
    assert!(matches!(err, Error::Pass { pass: 2, .. }), "{err}");
    assert_eq!(err.kind(), "invalid_argument");
}
