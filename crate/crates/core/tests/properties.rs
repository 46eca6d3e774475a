mod common;

use lowdose::evalkit::{
    check_separation, intensity_histogram, mae, mean_std, psnr, ParticleMeasure,
};
use lowdose::imgstore::{decode_pgm, decode_rawf32, encode_pgm, encode_rawf32, Image, ImagePair};
use lowdose::preprocess::{augment_flip, bin_down, rescale_intensity, PreprocessConfig};
use lowdose::synthgen::{parse_scene, render_clean, write_scene, Particle, SceneSpec};
use lowdose::tensor::{ModelCheckpoint, UNet};
use lowdose::trainer::l1_loss;
use proptest::prelude::*;

fn unit_image(w: usize, h: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f32..=1.0, w * h)
        .prop_map(move |d| Image::normalized(w, h, d).unwrap())
}

fn sized_unit_pair() -> impl Strategy<Value = (Image, Image, Image)> {
    (1usize..12, 1usize..12)
        .prop_flat_map(|(w, h)| (unit_image(w, h), unit_image(w, h), unit_image(w, h)))
}

fn measure() -> impl Strategy<Value = ParticleMeasure> {
    (1.0f64..200.0, 0.0f64..500.0).prop_map(|(diameter, center)| ParticleMeasure {
        diameter,
        pseudo_diameter: None,
        edge_width: None,
        center,
        amplitude: 0.5,
    })
}

fn particle() -> impl Strategy<Value = Particle> {
    (0.0f64..40.0, 0.0f64..40.0, 5.0f64..30.0, 0.05f64..1.0).prop_map(
        |(cx, cy, diameter_nm, absorption)| Particle {
            cx,
            cy,
            diameter_nm,
            absorption,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rawf32_round_trip_is_bitwise(img in (1usize..20, 1usize..20).prop_flat_map(|(w, h)| unit_image(w, h)),
                                    scale in prop::option::of(0.1f32..100.0)) {
        let img = img.with_pixel_scale(scale).unwrap();
        let back = decode_rawf32(&encode_rawf32(&img).unwrap()).unwrap();
        prop_assert_eq!(back, img);
    }

    #[test]
    fn pgm_round_trip_is_bitwise(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let counts: Vec<u16> = (0..w * h).map(|_| rand::Rng::gen(&mut r)).collect();
        let img = Image::from_counts(w, h, &counts).unwrap();
        let back = decode_pgm(&encode_pgm(&img).unwrap()).unwrap();
        prop_assert_eq!(back.data(), img.data());
    }

    #[test]
    fn rescale_is_bounded_and_monotone(data in prop::collection::vec(0.0f32..60000.0, 4..200)) {
        let n = data.len();
        let img = Image::raw(n, 1, data.iter().map(|v| v.round()).collect()).unwrap();
        if let Ok(out) = rescale_intensity(&img, &PreprocessConfig::default()) {
            let mut pairs: Vec<(f32, f32)> = img.data().iter().copied().zip(out.data().iter().copied()).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in pairs.windows(2) {
                prop_assert!(w[0].1 <= w[1].1);
            }
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn binning_preserves_the_mean(f in 1usize..5, bw in 1usize..6, bh in 1usize..6, seed in any::<u64>()) {
        let (w, h) = (f * bw, f * bh);
        let data: Vec<f32> = common::uniform(&mut common::rng(seed), w * h, 0.0, 1000.0).into_iter().map(|v| v.round() as f32).collect();
        let img = Image::raw(w, h, data).unwrap();
        let out = bin_down(&img, f).unwrap();
        let s_in: f64 = img.data().iter().map(|&v| f64::from(v)).sum();
        let s_out: f64 = out.data().iter().map(|&v| f64::from(v)).sum::<f64>() * (f * f) as f64;
        prop_assert!((s_in - s_out).abs() <= 1e-3 * s_in.max(1.0));
    }

    #[test]
    fn flip_twice_is_identity((a, b, _) in sized_unit_pair(), fh in any::<bool>(), fv in any::<bool>()) {
        let pair = ImagePair::new("p", a, b).unwrap();
        prop_assert_eq!(augment_flip(&augment_flip(&pair, fh, fv), fh, fv), pair);
    }

    #[test]
    fn metrics_are_symmetric_and_l1_is_a_metric((a, b, c) in sized_unit_pair()) {
        prop_assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
        prop_assert_eq!(psnr(&a, &b).unwrap().to_bits(), psnr(&b, &a).unwrap().to_bits());
        let (ab, bc, ac) = (l1_loss(&a, &b).unwrap(), l1_loss(&b, &c).unwrap(), l1_loss(&a, &c).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!(ac <= ab + bc + 1e-12);
        prop_assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn separation_is_symmetric(p in measure(), q in measure()) {
        prop_assert_eq!(check_separation(&p, &q), check_separation(&q, &p));
    }

    #[test]
    fn population_std_matches_definition(v in prop::collection::vec(-1e3f64..1e3, 1..50)) {
        let (m, s) = mean_std(&v);
        let n = v.len() as f64;
        let mr = v.iter().sum::<f64>() / n;
        let sr = (v.iter().map(|x| (x - mr).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!((m - mr).abs() <= 1e-9 * (1.0 + mr.abs()));
        prop_assert!((s - sr).abs() <= 1e-9 * (1.0 + sr));
    }

    #[test]
    fn histogram_counts_every_pixel(img in (1usize..30, 1usize..30).prop_flat_map(|(w, h)| unit_image(w, h)), bins in 2usize..64) {
        let hist = intensity_histogram(&img, bins).unwrap();
        prop_assert_eq!(hist.total(), img.len() as u64);
    }

    #[test]
    fn render_ignores_particle_order(ps in prop::collection::vec(particle(), 1..6), sigma in 0.0f64..2.0, seed in any::<u64>()) {
        let spec = SceneSpec { width: 40, height: 40, pixel_scale: 1.0, particles: ps.clone(), background_level: 1.0, edge_blur_sigma: sigma, seed: 0 };
        let mut shuffled = spec.clone();
        rand::seq::SliceRandom::shuffle(&mut shuffled.particles[..], &mut common::rng(seed));
        prop_assert_eq!(render_clean(&spec).unwrap(), render_clean(&shuffled).unwrap());
    }

    #[test]
    fn scene_file_round_trip(ps in prop::collection::vec(particle(), 0..6), sigma in 0.0f64..2.0, seed in any::<u64>()) {
        let spec = SceneSpec { width: 40, height: 40, pixel_scale: 0.5, particles: ps, background_level: 0.9, edge_blur_sigma: sigma, seed };
        prop_assert_eq!(parse_scene(&write_scene(&spec)).unwrap(), spec);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn network_output_stays_in_unit_range(seed in any::<u64>(), lo in -50.0f64..0.0, hi in 1.0f64..50.0) {
        let model = UNet::<f64>::new(2, seed).unwrap();
        let data = common::uniform(&mut common::rng(seed), 32 * 16, lo, hi);
        let x = common::tensor(&[1, 1, 16, 32], data);
        let y = model.infer(&x).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), width in 1usize..4) {
        let mut ckpt = ModelCheckpoint::new(UNet::new(width, seed).unwrap());
        ckpt.metadata.push(("seed".into(), seed.to_string()));
        let bytes = ckpt.to_bytes().unwrap();
        let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        let s = seed.to_string();
        prop_assert_eq!(back.meta("seed"), Some(s.as_str()));
    }
}

/// Extra noise on an already-noisy image lowers its PSNR against the clean
/// reference on average.
#[test]
fn more_noise_lowers_psnr_on_average() {
    let spec = SceneSpec::random(64, 64, 1.0, lowdose::synthgen::ContrastStyle::Mixed, 5);
    let clean = render_clean(&spec).unwrap().transmission;
    let noisy = |img: &Image, seed: u64, amp: f64| {
        let n = common::uniform(&mut common::rng(seed), img.len(), -amp, amp);
        let d = img
            .data()
            .iter()
            .zip(n)
            .map(|(&v, e)| (f64::from(v) + e).clamp(0.0, 1.0) as f32)
            .collect();
        Image::normalized(img.width(), img.height(), d).unwrap()
    };
    let (mut once, mut twice) = (Vec::new(), Vec::new());
    for seed in 0..20 {
        let a = noisy(&clean, seed, 0.1);
        let b = noisy(&a, seed + 1000, 0.1);
        once.push(psnr(&a, &clean).unwrap());
        twice.push(psnr(&b, &clean).unwrap());
    }
    let (m1, _) = mean_std(&once);
    let (m2, _) = mean_std(&twice);
    assert!(m2 < m1, "{m2} !< {m1}");
}
