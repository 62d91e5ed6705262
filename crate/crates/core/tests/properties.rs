use kdc_core::distill::{at_loss, attention_map, total_student_loss, AttentionMap, LossWeights};
use kdc_core::eval::{psnr, ssim, wilcoxon_signed_rank, RealImage, SsimParams};
use kdc_core::kspace::{
    data_consistency, fft2c, generate_cartesian_mask, ifft2c, undersample, ComplexImage, DcWeight, KSpaceGrid,
};
use kdc_core::models::FeatureView;
use kdc_core::nn::Plane;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * w).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
    ComplexImage::new(h, w, data).unwrap()
}

fn random_real(h: usize, w: usize, seed: u64) -> RealImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RealImage::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn random_map(n: usize, seed: u64) -> AttentionMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AttentionMap { height: 1, width: n, data: (0..n).map(|_| rng.random_range(0.0..1.0)).collect() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_keeps_center_and_budget(width in 16usize..200, acc in 1.0f64..8.0, seed in any::<u64>()) {
        let budget = (width as f64 / acc).round() as usize;
        let center = (budget / 2).max(1);
        let m = generate_cartesian_mask(width, acc, center, 0.15, seed).unwrap();
        prop_assert_eq!(m.sampled_lines(), budget);
        let start = width / 2 - center / 2;
        prop_assert!(m.lines[start..start + center].iter().all(|&l| l));
        prop_assert_eq!(&m, &generate_cartesian_mask(width, acc, center, 0.15, seed).unwrap());
    }

    #[test]
    fn fft_round_trip_and_energy(h in 1usize..24, w in 1usize..24, seed in any::<u64>()) {
        let x = random_image(h, w, seed);
        let k = fft2c(&x).unwrap();
        prop_assert!((k.norm() - x.norm()).abs() <= 1e-10 * x.norm().max(1.0));
        let back = ifft2c(&k).unwrap();
        for (a, b) in back.data.iter().zip(&x.data) {
            prop_assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn hard_dc_restores_measurements(seed in any::<u64>(), lambda in 0.01f64..100.0) {
        let (h, w) = (32, 32);
        let mask = generate_cartesian_mask(w, 4.0, 3, 0.15, seed).unwrap();
        let (measured, _) = undersample(&random_image(h, w, seed), &mask).unwrap();
        let pred = fft2c(&random_image(h, w, seed.wrapping_add(1))).unwrap();
        let hard = data_consistency(&pred, &measured, &mask, DcWeight::Hard).unwrap();
        let soft = data_consistency(&pred, &measured, &mask, DcWeight::Blend(lambda)).unwrap();
        for i in 0..h * w {
            let x = i % w;
            if mask.lines[x] {
                prop_assert_eq!(hard.data[i], measured.data[i]);
                let expect = (pred.data[i] + lambda * measured.data[i]) / (1.0 + lambda);
                prop_assert!((soft.data[i] - expect).norm() <= 1e-10);
            } else {
                prop_assert_eq!(hard.data[i], pred.data[i]);
                prop_assert_eq!(soft.data[i], pred.data[i]);
            }
        }
    }

    #[test]
    fn at_loss_is_scale_invariant_and_bounded(n in 2usize..64, seed in any::<u64>(), c in 1e-3f64..1e3) {
        let s = random_map(n, seed);
        let t = random_map(n, seed ^ 0x5555);
        prop_assert!(at_loss(&[s.clone()], &[s.scaled(c)]).unwrap().abs() <= 1e-8);
        let d = at_loss(&[s.clone()], &[t.clone()]).unwrap();
        prop_assert!((d - at_loss(&[s.scaled(c)], &[t.clone()]).unwrap()).abs() <= 1e-8);
        // maps are non-negative, so unit vectors are at most sqrt(2) apart
        prop_assert!((0.0..=2f64.sqrt() + 1e-12).contains(&d));
        let pairs = at_loss(&[s.clone(), t.clone()], &[t, s]).unwrap();
        prop_assert!(pairs <= 2.0 * 2.0 + 1e-12);
    }

    #[test]
    fn student_loss_is_affine_in_alpha(seed in any::<u64>()) {
        let (s, y, t) = (random_image(6, 5, seed), random_image(6, 5, seed + 1), random_image(6, 5, seed + 2));
        let at = |a: f64| total_student_loss(&s, &y, &t, LossWeights::new(a).unwrap()).unwrap();
        let (l0, l1) = (at(0.0), at(1.0));
        for a in [0.0, 0.25, 0.6, 1.0] {
            prop_assert!((at(a) - (a * l1 + (1.0 - a) * l0)).abs() <= 1e-12);
        }
    }

    #[test]
    fn psnr_falls_as_noise_grows(seed in any::<u64>(), small in 0.001f64..0.05) {
        let target = random_real(16, 16, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let noise: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let noisy = |s: f64| RealImage::new(16, 16, target.data.iter().zip(&noise).map(|(v, n)| v + s * n).collect()).unwrap();
        let a = psnr(&noisy(small), &target, Some(1.0)).unwrap();
        let b = psnr(&noisy(small * 2.0), &target, Some(1.0)).unwrap();
        prop_assert!(a > b);
        prop_assert!((a - b - 20.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>()) {
        let (a, b) = (random_real(20, 18, seed), random_real(20, 18, seed + 1));
        let p = SsimParams::default();
        let ab = ssim(&a, &b, &p, Some(1.0)).unwrap();
        prop_assert!((ab - ssim(&b, &a, &p, Some(1.0)).unwrap()).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12 && ab >= -1.0);
        prop_assert!((ssim(&a, &a, &p, Some(1.0)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wilcoxon_is_symmetric_under_swap(seed in any::<u64>(), n in 5usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let ab = wilcoxon_signed_rank(&a, &b, 0.05).unwrap();
        let ba = wilcoxon_signed_rank(&b, &a, 0.05).unwrap();
        prop_assert_eq!(ab.w_plus, ba.w_minus);
        prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        prop_assert!(ab.p_value > 0.0 && ab.p_value <= 1.0);
    }
}

#[test]
fn attention_map_sums_squares_over_channels() {
    let data = [1.0, -2.0, 0.5, 3.0, 0.0, 1.0];
    let view = FeatureView { channels: 2, plane: Plane { height: 1, width: 3 }, data: &data[..] };
    assert_eq!(attention_map(view).data, vec![10.0, 4.0, 1.25]);
}

#[test]
fn orthogonal_maps_are_sqrt2_apart() {
    let a = AttentionMap { height: 2, width: 2, data: vec![3.0, 0.0, 0.0, 0.0] };
    let b = AttentionMap { height: 2, width: 2, data: vec![0.0, 0.0, 0.5, 0.5] };
    assert!((at_loss(&[a], &[b]).unwrap() - 2f64.sqrt()).abs() < 1e-8);
}

#[test]
fn dc_rejects_shape_mismatch() {
    let mask = generate_cartesian_mask(8, 2.0, 2, 0.15, 0).unwrap();
    let a = KSpaceGrid::new(8, 8, vec![Complex64::new(0.0, 0.0); 64]).unwrap();
    let b = KSpaceGrid::new(4, 8, vec![Complex64::new(0.0, 0.0); 32]).unwrap();
    assert!(data_consistency(&a, &b, &mask, DcWeight::Hard).is_err());
    assert!(data_consistency(&a, &a, &mask, DcWeight::Blend(-1.0)).is_err());
}
