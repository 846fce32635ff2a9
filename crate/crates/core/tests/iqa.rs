use porenet::iqa::*;
use porenet::{Image2D, ImageStack};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

fn random_image(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Image2D {
    Image2D::new(w, h, (0..w * h).map(|_| rng.gen_range(0..256) as f32).collect()).unwrap()
}

/// Direct per-window SSIM with two-pass moments and the full 2D window.
fn naive_ssim(a: &Image2D, b: &Image2D, range: f64) -> f64 {
    let r = 5isize;
    let g: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * 1.5 * 1.5)).exp()).collect();
    let mut w2 = vec![0.0; 121];
    for j in 0..11 {
        for i in 0..11 {
            w2[i + 11 * j] = g[i] * g[j];
        }
    }
    let total: f64 = w2.iter().sum();
    w2.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let mut acc = 0.0;
    let mut n = 0;
    for y0 in 0..=a.height - 11 {
        for x0 in 0..=a.width - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for j in 0..11 {
                for i in 0..11 {
                    let w = w2[i + 11 * j];
                    ma += w * a.get(x0 + i, y0 + j) as f64;
                    mb += w * b.get(x0 + i, y0 + j) as f64;
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for j in 0..11 {
                for i in 0..11 {
                    let w = w2[i + 11 * j];
                    let da = a.get(x0 + i, y0 + j) as f64 - ma;
                    let db = b.get(x0 + i, y0 + j) as f64 - mb;
                    va += w * da * da;
                    vb += w * db * db;
                    cov += w * da * db;
                }
            }
            acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            n += 1;
        }
    }
    acc / n as f64
}

#[test]
fn ssim_matches_naive_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let a = random_image(32, 32, &mut rng);
        let b = random_image(32, 32, &mut rng);
        let got = ssim(&a, &b, 255.0).unwrap();
        assert!((got - naive_ssim(&a, &b, 255.0)).abs() < 1e-6);
    }
}

#[test]
fn constant_shift_lowers_luminance_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = Image2D::new(24, 24, (0..576).map(|_| rng.gen_range(0..200) as f32).collect()).unwrap();
    let b = a.map(|v| v + 40.0);
    let got = ssim(&a, &b, 255.0).unwrap();
    assert!(got < 1.0);
    assert!((got - naive_ssim(&a, &b, 255.0)).abs() < 1e-6);
    // structure is unchanged by a shift
    assert!((ssim_parts(&a, &b, 255.0).unwrap().cs - 1.0).abs() < 1e-9);
}

fn pool2(img: &Image2D) -> Image2D {
    let (w, h) = (img.width / 2, img.height / 2);
    let mut out = Image2D::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let s: f64 = [(0, 0), (1, 0), (0, 1), (1, 1)]
                .iter()
                .map(|&(dx, dy)| img.get(2 * x + dx, 2 * y + dy) as f64)
                .sum();
            out.set(x, y, (s / 4.0) as f32);
        }
    }
    out
}

#[test]
fn ms_ssim_composes_single_scale_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = random_image(180, 190, &mut rng);
    let b = Image2D::new(180, 190, a.data.iter().map(|&v| (v + rng.gen_range(-30.0..30.0f32)).clamp(0.0, 255.0)).collect()).unwrap();
    let (mut x, mut y) = (a.clone(), b.clone());
    let mut expected = 1.0;
    for s in 0..5 {
        let p = ssim_parts(&x, &y, 255.0).unwrap();
        let t = if s == 4 { p.ssim } else { p.cs };
        expected *= t.max(0.0).powf(MS_SSIM_WEIGHTS[s]);
        x = pool2(&x);
        y = pool2(&y);
    }
    let got = ms_ssim(&a, &b, 255.0).unwrap();
    assert!((got - expected).abs() < 1e-8, "{got} vs {expected}");
    assert!((ms_ssim(&a, &a, 255.0).unwrap() - 1.0).abs() < 1e-12);
    assert!(ms_ssim(&random_image(175, 200, &mut rng), &random_image(175, 200, &mut rng), 255.0).is_err());
}

#[derive(Deserialize)]
struct HaarCase {
    width: usize,
    height: usize,
    a: Vec<f32>,
    b: Vec<f32>,
    haarpsi: f64,
}

#[test]
fn haarpsi_matches_reference_implementation() {
    let text = include_str!("fixtures/haarpsi.json");
    let cases: Vec<HaarCase> = serde_json::from_str(text).unwrap();
    for c in cases {
        let a = Image2D::new(c.width, c.height, c.a).unwrap();
        let b = Image2D::new(c.width, c.height, c.b).unwrap();
        let got = haarpsi(&a, &b, 255.0).unwrap();
        assert!((got - c.haarpsi).abs() < 1e-9, "{}x{}: {got} vs {}", c.width, c.height, c.haarpsi);
    }
}

fn blurred(img: &Image2D, sigma: f64) -> Image2D {
    let mut data = img.data.clone();
    porenet::vesselness::gaussian_blur(&mut data, [img.width, img.height, 1], sigma);
    Image2D::new(img.width, img.height, data).unwrap()
}

#[test]
fn haarpsi_decreases_with_blur() {
    let img = Image2D::from_fn(64, 64, |x, y| {
        let v = ((x / 4 + y / 6) % 2) as f32 * 160.0 + 40.0;
        v + ((x * 7 + y * 13) % 17) as f32
    });
    let mild = haarpsi(&img, &blurred(&img, 1.0), 255.0).unwrap();
    let heavy = haarpsi(&img, &blurred(&img, 4.0), 255.0).unwrap();
    assert!(heavy < mild && mild < 1.0);
}

fn sample_features(n: usize, mean: f64, sd: f64, seed: u64) -> Features {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(mean, sd).unwrap();
    Features::new(n, 1, (0..n).map(|_| d.sample(&mut rng) as f32).collect()).unwrap()
}

#[test]
fn frechet_matches_gaussian_closed_form() {
    // (mu1 - mu2)^2 + (s1 - s2)^2
    let a = sample_features(10_000, 0.0, 1.0, 1);
    let b = sample_features(10_000, 3.0, 1.0, 2);
    assert!((frechet_distance(&a, &b).unwrap() - 9.0).abs() / 9.0 < 0.05);
    let c = sample_features(10_000, 0.0, 2.0, 3);
    assert!((frechet_distance(&a, &c).unwrap() - 1.0).abs() < 0.05);
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
}

#[test]
fn frechet_multivariate_identity_and_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = Features::new(50, 4, (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let b = Features::new(60, 4, (0..240).map(|_| rng.gen_range(-1.0..2.0)).collect()).unwrap();
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
    let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
    assert!((ab - ba).abs() < 1e-9 && ab > 0.0);
    let short = Features::new(1, 4, vec![0.0; 4]).unwrap();
    assert!(frechet_distance(&a, &short).is_err());
    assert!(frechet_distance(&a, &Features::new(3, 2, vec![0.0; 6]).unwrap()).is_err());
}

#[test]
fn kid_identical_sets_is_not_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Features::new(30, 8, (0..240).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    assert!(kid(&a, &a, 3).unwrap() <= 1e-6);
}

#[test]
fn kid_degree_one_is_mean_embedding_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (m, n, d) = (7, 9, 3);
    let a: Vec<f32> = (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f32> = (0..n * d).map(|_| rng.gen_range(0.0..2.0)).collect();
    let dot = |p: &[f32], q: &[f32]| p.iter().zip(q).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>();
    let sum = |v: &[f32], rows: usize| -> Vec<f32> {
        (0..d).map(|j| (0..rows).map(|i| v[i * d + j]).sum()).collect()
    };
    let (sa, sb) = (sum(&a, m), sum(&b, n));
    let self_a: f64 = (0..m).map(|i| dot(&a[i * d..][..d], &a[i * d..][..d])).sum();
    let self_b: f64 = (0..n).map(|i| dot(&b[i * d..][..d], &b[i * d..][..d])).sum();
    let (mf, nf) = (m as f64, n as f64);
    let expected = ((dot(&sa, &sa) - self_a) / (mf * (mf - 1.0)) + (dot(&sb, &sb) - self_b) / (nf * (nf - 1.0))
        - 2.0 * dot(&sa, &sb) / (mf * nf))
        / d as f64;
    let got = kid(&Features::new(m, d, a).unwrap(), &Features::new(n, d, b).unwrap(), 1).unwrap();
    assert!((got - expected).abs() < 1e-5, "{got} vs {expected}");
}

#[test]
fn kid_far_clusters_is_large() {
    let a = Features::new(3, 2, vec![0.0, 0.1, 0.1, 0.0, 0.05, 0.05]).unwrap();
    let b = Features::new(3, 2, vec![9.0, 9.1, 9.1, 9.0, 9.05, 9.05]).unwrap();
    assert!(kid(&a, &b, 3).unwrap() > 100.0);
}

#[test]
fn features_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let f = Features::new(3, 2, vec![1.0, -2.5, 3.0, 0.0, 1e-3, 7.0]).unwrap();
    f.save(dir.path().join("feat.json")).unwrap();
    assert_eq!(Features::load(dir.path().join("feat.raw")).unwrap(), f);
    std::fs::write(dir.path().join("feat.raw"), [0u8; 5]).unwrap();
    assert!(Features::load(dir.path().join("feat.json")).is_err());
}

fn stack(slices: &[Image2D]) -> ImageStack {
    ImageStack::from_slices(slices, [100.0, 100.0, 300.0]).unwrap().with_range((0.0, 255.0))
}

#[test]
fn stack_score_means_and_exclusions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random_image(16, 16, &mut rng);
    let b = random_image(16, 16, &mut rng);
    let s1 = stack(&[a.clone(), a.clone()]);
    let s2 = stack(&[a.clone(), b.clone()]);
    let ss = stack_score(Metric::Ssim, &s1, &s1).unwrap();
    assert_eq!(ss.value, Some(1.0));
    // one identical slice: PSNR averages the remaining one
    let p = stack_score(Metric::Psnr, &s2, &s1).unwrap();
    assert_eq!(p.excluded, 1);
    assert!((p.value.unwrap() - psnr(&b, &a, 255.0).unwrap()).abs() < 1e-12);
    let all_inf = stack_score(Metric::Psnr, &s1, &s1).unwrap();
    assert!(all_inf.unbounded && all_inf.value.is_none());
    let mse_mean = stack_score(Metric::Mse, &s2, &s1).unwrap().value.unwrap();
    assert!((mse_mean - mse(&b, &a).unwrap() / 2.0).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn symmetric_metrics(seed in any::<u64>(), w in 11usize..40, h in 11usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(w, h, &mut rng);
        let b = random_image(w, h, &mut rng);
        prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        let (wa, wb) = (wd_intensity(&a, &b, (0.0, 255.0), 256).unwrap(), wd_intensity(&b, &a, (0.0, 255.0), 256).unwrap());
        prop_assert!((wa - wb).abs() < 1e-9);
        let (sa, sb) = (ssim(&a, &b, 255.0).unwrap(), ssim(&b, &a, 255.0).unwrap());
        prop_assert!((sa - sb).abs() < 1e-12);
        prop_assert!(sa <= 1.0 + 1e-12);
        let n = ncc(&a, &b).unwrap().unwrap();
        prop_assert!((-1.0..=1.0).contains(&n));
        let hp = haarpsi(&a, &b, 255.0).unwrap();
        prop_assert!(hp > 0.0 && hp <= 1.0 + 1e-12);
    }

    #[test]
    fn identity_values(seed in any::<u64>(), w in 11usize..48, h in 11usize..48) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(w, h, &mut rng);
        prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
        prop_assert!(psnr(&a, &a, 255.0).unwrap().is_infinite());
        prop_assert_eq!(ssim(&a, &a, 255.0).unwrap(), 1.0);
        prop_assert!((haarpsi(&a, &a, 255.0).unwrap() - 1.0).abs() < 1e-9);
        prop_assert_eq!(wd_intensity(&a, &a, (0.0, 255.0), 256).unwrap(), 0.0);
    }
}
