use antiref::augment::{augment_image, AugmentSpec};
use antiref::config::{parse_config_str, Config};
use antiref::encoder::{ane_init, encoder_protect, AneEncoder, EncoderConfig};
use antiref::eval::{apply_transform, Transform};
use antiref::graph::Tensor;
use antiref::io::{read_image, read_perturbation, write_perturbation, write_png};
use antiref::pgd::project_linf;
use antiref::{ImageTensor, Perturbation};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(h: usize, w: usize) -> impl Strategy<Value = ImageTensor> {
    proptest::collection::vec(0.0f64..=1.0, h * w * 3).prop_map(move |d| ImageTensor::new(h, w, d).unwrap())
}

fn loud_encoder(seed: u64) -> AneEncoder {
    let mut enc = ane_init(&EncoderConfig::test_scale(16, 1, 8, 1), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = enc.params().len();
    for t in &mut enc.params_mut()[n - 2..] {
        let data = (0..t.len()).map(|_| rng.random_range(-3.0..3.0)).collect();
        *t = Tensor::new(t.shape.clone(), data);
    }
    enc
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn projection_is_idempotent(img in image(4, 4), shift in proptest::collection::vec(-0.2f64..0.2, 48), r in 0.001f64..0.1) {
        let moved: Vec<f64> = img.data().iter().zip(&shift).map(|(a, b)| a + b).collect();
        let once = project_linf(&moved, &img, r).unwrap();
        let twice = project_linf(once.data(), &img, r).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert!(once.linf_distance(&img).unwrap() <= r + 1e-12);
    }

    #[test]
    fn clamped_encoder_noise_respects_the_radius(seed in 0u64..1000, r in 0.001f64..0.1) {
        let enc = loud_encoder(seed);
        let img = ImageTensor::random(16, 16, seed);
        let record = encoder_protect(&enc, &img, Some(r)).unwrap();
        prop_assert!(record.protected.linf_distance(&img).unwrap() <= r + 1e-12);
        prop_assert!(record.protected.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(record.forward_calls, 1);
    }

    #[test]
    fn png_round_trip_is_within_half_a_level(img in image(5, 7)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        write_png(&p, &img).unwrap();
        let back = read_image(&p).unwrap();
        prop_assert!(back.linf_distance(&img).unwrap() <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn npy_round_trip_is_exact(data in proptest::collection::vec(-0.06f64..0.06, 27)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.npy");
        let pert = Perturbation::new(3, 3, data).unwrap();
        write_perturbation(&p, &pert).unwrap();
        let back = read_perturbation(&p).unwrap();
        prop_assert_eq!(back.data(), pert.data());
    }

    #[test]
    fn augmentation_keeps_shape_and_range(img in image(16, 16), seed in any::<u64>()) {
        let (out, _) = augment_image(&img, &AugmentSpec::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(out.shape(), img.shape());
        prop_assert!(out.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn transforms_keep_shape_and_range(img in image(16, 16), q in 1u8..=100, f in 0.5f64..1.0, s in 0.0f64..0.2, seed in any::<u64>()) {
        let ts = [
            Transform::Jpeg { quality: q },
            Transform::CropResize { fraction: f },
            Transform::GaussianNoise { sigma: s },
            Transform::ColorShift { shift: s },
        ];
        for t in ts {
            let out = apply_transform(&img, t, seed).unwrap();
            prop_assert_eq!(out.shape(), img.shape());
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)), "{}", t);
        }
    }
}

#[test]
fn serialized_default_config_parses_back() {
    let text = toml::to_string(&Config::default()).unwrap();
    assert_eq!(parse_config_str(&text).unwrap(), Config::default());
}
