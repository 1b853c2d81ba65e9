use std::io::{Read, Write};
use std::net::TcpListener;

use mdps_core::perception::{
    cosine_distance_map, default_cache_dir, difference_map, difference_maps, fetch_pretrained, fetch_weights,
    resize_bilinear, sha256_file, BackboneKind, DifferenceConfig, FeatureBackbone, IdentityBackbone, MetricMode,
    ToyBackbone, CACHE_ENV,
};
use mdps_core::{Error, ImageTensor, Result, Rng, ValueRange};
use mdps_nn::Tensor;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

/// Two-channel one-hot features: `[1, 0]` below 0.5, `[0, 1]` otherwise.
struct Threshold;

impl FeatureBackbone for Threshold {
    fn name(&self) -> String {
        "threshold".into()
    }

    fn num_stages(&self) -> usize {
        1
    }

    fn extract(&self, img: &ImageTensor) -> Result<Vec<Tensor>> {
        let img = img.to_unit();
        let hw = img.pixels();
        let mut data = vec![0f32; 2 * hw];
        for (k, &v) in img.data()[..hw].iter().enumerate() {
            data[if v < 0.5 { k } else { hw + k }] = 1.0;
        }
        Ok(vec![Tensor::from_vec([1, 2, img.height(), img.width()], data)?])
    }
}

fn unit_image(c: usize, h: usize, w: usize, rng: &mut Rng) -> ImageTensor {
    let data = (0..c * h * w).map(|_| rng.uniform() as f32).collect();
    ImageTensor::new(c, h, w, data, ValueRange::Unit).unwrap()
}

#[test]
fn identical_images_give_a_zero_map() {
    let mut rng = Rng::new(1);
    let x = unit_image(3, 32, 32, &mut rng);
    let map = difference_map(&x, &x, &ToyBackbone::new(), &DifferenceConfig::default()).unwrap();
    assert!(map.data().iter().all(|&v| (0.0..=1e-5).contains(&v)), "max {}", map.max());
}

#[test]
fn hand_evaluated_example() {
    let y = ImageTensor::new(1, 1, 1, vec![0.2], ValueRange::Unit).unwrap();
    let x = ImageTensor::new(1, 1, 1, vec![0.7], ValueRange::Unit).unwrap();
    let cfg = DifferenceConfig {
        eta: 2.0,
        stages: vec![1],
        mode: MetricMode::Combined,
    };
    let map = difference_map(&x, &y, &Threshold, &cfg).unwrap();
    assert!((map.data()[0] - 2.0).abs() < 1e-6);
}

#[test]
fn cosine_term_ignores_positive_scaling() {
    let mut rng = Rng::new(2);
    let x = unit_image(3, 8, 8, &mut rng);
    let scale: Vec<f32> = (0..64).map(|_| 0.2 + 0.7 * rng.uniform() as f32).collect();
    let data = x.data().iter().enumerate().map(|(i, &v)| v * scale[i % 64]).collect();
    let y = ImageTensor::new(3, 8, 8, data, ValueRange::Unit).unwrap();
    let cfg = DifferenceConfig {
        eta: 0.0,
        stages: vec![1],
        mode: MetricMode::Combined,
    };
    let map = difference_map(&x, &y, &IdentityBackbone, &cfg).unwrap();
    assert!(map.max() <= 1e-6, "{}", map.max());
}

#[test]
fn zero_vectors_contribute_nothing() {
    let a = Tensor::from_vec([1, 2, 1, 3], vec![0.0, 1.0, 1e-30, 0.0, 0.0, 0.0]).unwrap();
    let b = Tensor::from_vec([1, 2, 1, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    let d = cosine_distance_map(&a, &b).unwrap();
    assert_eq!(d[0], 0.0);
    assert!((d[1] - 1.0).abs() < 1e-6);
    assert_eq!(d[2], 0.0);
    assert!(d.iter().all(|v| v.is_finite()));
}

#[test]
fn metric_modes_select_terms() {
    let mut rng = Rng::new(3);
    let x = unit_image(3, 32, 32, &mut rng);
    let y = unit_image(3, 32, 32, &mut rng);
    let bb = ToyBackbone::new();
    let with = |mode| {
        difference_map(&x, &y, &bb, &DifferenceConfig { mode, ..Default::default() }).unwrap()
    };
    let (both, pix, feat) = (with(MetricMode::Combined), with(MetricMode::PixelOnly), with(MetricMode::PerceptualOnly));
    for i in 0..both.len() {
        assert!((both.data()[i] - pix.data()[i] - feat.data()[i]).abs() < 1e-5);
        let l1: f32 = (0..3).map(|c| (x.data()[c * 1024 + i] - y.data()[c * 1024 + i]).abs()).sum();
        assert!((pix.data()[i] - l1).abs() < 1e-5);
    }
}

#[test]
fn model_space_inputs_are_compared_in_unit_space() {
    let mut rng = Rng::new(4);
    let x = unit_image(3, 16, 16, &mut rng);
    let y = unit_image(3, 16, 16, &mut rng);
    let cfg = DifferenceConfig::default();
    let bb = ToyBackbone::new();
    let a = difference_map(&x, &y, &bb, &cfg).unwrap();
    let b = difference_map(&x.to_model_space(), &y, &bb, &cfg).unwrap();
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() < 1e-5);
    }
}

#[test]
fn batch_helper_matches_single_calls() {
    let mut rng = Rng::new(5);
    let y = unit_image(3, 16, 16, &mut rng);
    let xs: Vec<_> = (0..3).map(|_| unit_image(3, 16, 16, &mut rng)).collect();
    let bb = ToyBackbone::new();
    let cfg = DifferenceConfig::default();
    let maps = difference_maps(&xs, &y, &bb, &cfg).unwrap();
    for (x, m) in xs.iter().zip(&maps) {
        assert_eq!(&difference_map(x, &y, &bb, &cfg).unwrap(), m);
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let mut rng = Rng::new(6);
    let x = unit_image(3, 16, 16, &mut rng);
    let y = unit_image(3, 8, 8, &mut rng);
    let bb = ToyBackbone::new();
    assert!(difference_map(&x, &y, &bb, &DifferenceConfig::default()).is_err());
    let too_deep = DifferenceConfig {
        stages: vec![1, 4],
        ..Default::default()
    };
    assert!(difference_map(&x, &x, &bb, &too_deep).is_err());
    let negative = DifferenceConfig {
        eta: -1.0,
        ..Default::default()
    };
    assert!(difference_map(&x, &x, &bb, &negative).is_err());
    let empty = DifferenceConfig {
        stages: vec![],
        ..Default::default()
    };
    assert!(difference_map(&x, &x, &bb, &empty).is_err());
}

#[test]
fn toy_backbone_is_deterministic_with_shrinking_stages() {
    let mut rng = Rng::new(7);
    let x = unit_image(3, 64, 64, &mut rng);
    let a = ToyBackbone::new().extract(&x).unwrap();
    let b = ToyBackbone::new().extract(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
    let sides: Vec<usize> = a.iter().map(|t| t.height()).collect();
    assert_eq!(sides, vec![32, 16, 8]);
    let gray = unit_image(1, 64, 64, &mut rng);
    assert_eq!(ToyBackbone::new().extract(&gray).unwrap().len(), 3);
}

#[test]
fn bilinear_resize_preserves_constants_and_identity() {
    let src = vec![0.25f32; 12];
    assert!(resize_bilinear(&src, 3, 4, 9, 8).iter().all(|&v| (v - 0.25).abs() < 1e-7));
    let ramp: Vec<f32> = (0..6).map(|v| v as f32).collect();
    assert_eq!(resize_bilinear(&ramp, 2, 3, 2, 3), ramp);
    let up = resize_bilinear(&[0.0, 1.0], 1, 2, 1, 4);
    assert_eq!(up, vec![0.0, 0.25, 0.75, 1.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]
    #[test]
    fn metric_is_symmetric(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let a = unit_image(3, 32, 32, &mut rng);
        let b = unit_image(3, 32, 32, &mut rng);
        let bb = ToyBackbone::new();
        let cfg = DifferenceConfig::default();
        let ab = difference_map(&a, &b, &bb, &cfg).unwrap();
        let ba = difference_map(&b, &a, &bb, &cfg).unwrap();
        for (p, q) in ab.data().iter().zip(ba.data()) {
            prop_assert!((p - q).abs() <= 1e-5);
        }
    }

    #[test]
    fn metric_is_monotone_in_eta(seed in any::<u64>(), lo in 0.0f64..2.0, extra in 0.0f64..2.0) {
        let mut rng = Rng::new(seed);
        let a = unit_image(3, 32, 32, &mut rng);
        let b = unit_image(3, 32, 32, &mut rng);
        let bb = ToyBackbone::new();
        let small = difference_map(&a, &b, &bb, &DifferenceConfig { eta: lo, ..Default::default() }).unwrap();
        let large = difference_map(&a, &b, &bb, &DifferenceConfig { eta: lo + extra, ..Default::default() }).unwrap();
        for (p, q) in small.data().iter().zip(large.data()) {
            prop_assert!(q >= p);
            prop_assert!(*p >= 0.0);
        }
    }
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[test]
fn warm_cache_works_offline() {
    let dir = tempfile::tempdir().unwrap();
    let body = b"weights".to_vec();
    let name = digest(&body);
    let sub = dir.path().join("resnet-101");
    std::fs::create_dir_all(&sub).unwrap();
    let path = sub.join(format!("{name}.weights"));
    std::fs::write(&path, &body).unwrap();
    let got = fetch_weights("resnet-101", "http://invalid.invalid/w", dir.path(), true, None).unwrap();
    assert_eq!(got, path);
    let pinned = fetch_weights("resnet-101", "http://invalid.invalid/w", dir.path(), true, Some(&name)).unwrap();
    assert_eq!(pinned, path);
    assert_eq!(sha256_file(&path).unwrap(), name);
}

#[test]
fn corrupted_cache_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("resnet-101");
    std::fs::create_dir_all(&sub).unwrap();
    let path = sub.join(format!("{}.weights", digest(b"original")));
    std::fs::write(&path, b"tampered").unwrap();
    let err = fetch_weights("resnet-101", "http://invalid.invalid/w", dir.path(), true, None).unwrap_err();
    match &err {
        Error::DigestMismatch { path: p, .. } => assert_eq!(p, &path),
        other => panic!("unexpected error {other}"),
    }
    assert!(err.to_string().contains(&path.display().to_string()));
}

#[test]
fn offline_miss_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = fetch_pretrained("wide-resnet-101", dir.path(), true).err().unwrap();
    assert!(matches!(err, Error::CacheMiss { .. }), "{err}");
}

#[test]
fn unknown_backbone_lists_options() {
    let dir = tempfile::tempdir().unwrap();
    let err = fetch_pretrained("vgg-16", dir.path(), true).err().unwrap();
    let msg = err.to_string();
    for name in BackboneKind::NAMES {
        assert!(msg.contains(name), "{msg}");
    }
    assert_eq!(fetch_pretrained("toy", dir.path(), true).unwrap().num_stages(), 3);
    assert_eq!(BackboneKind::parse("wide-resnet-101").unwrap(), BackboneKind::WideResNet101);
}

fn serve_once(body: Vec<u8>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        let mut buf = [0u8; 4096];
        let _ = stream.read(&mut buf);
        let head = format!(
            "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
            body.len()
        );
        stream.write_all(head.as_bytes()).unwrap();
        stream.write_all(&body).unwrap();
    });
    format!("http://{addr}/model.safetensors")
}

#[test]
fn download_is_stored_under_its_digest() {
    let dir = tempfile::tempdir().unwrap();
    let body: Vec<u8> = (0..50_000u32).map(|i| (i % 251) as u8).collect();
    let url = serve_once(body.clone());
    let path = fetch_weights("toy-download", &url, dir.path(), false, None).unwrap();
    assert_eq!(path, dir.path().join("toy-download").join(format!("{}.weights", digest(&body))));
    assert_eq!(std::fs::read(&path).unwrap(), body);
    // A second call is served from the cache even offline.
    assert_eq!(fetch_weights("toy-download", &url, dir.path(), true, None).unwrap(), path);
}

#[test]
fn download_with_wrong_pinned_digest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let url = serve_once(b"payload".to_vec());
    let err = fetch_weights("pinned", &url, dir.path(), false, Some(&digest(b"other"))).unwrap_err();
    assert!(matches!(err, Error::DigestMismatch { .. }));
    let left: Vec<_> = std::fs::read_dir(dir.path().join("pinned")).unwrap().collect();
    assert!(left.is_empty());
}

#[test]
fn cache_dir_honours_environment() {
    std::env::set_var(CACHE_ENV, "/tmp/mdps-cache-test");
    assert_eq!(default_cache_dir(), std::path::PathBuf::from("/tmp/mdps-cache-test"));
    std::env::remove_var(CACHE_ENV);
    assert_ne!(default_cache_dir(), std::path::PathBuf::from("/tmp/mdps-cache-test"));
}
