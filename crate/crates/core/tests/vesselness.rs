use nalgebra::{Matrix3, SymmetricEigen};
use porenet::vesselness::{
    eigenvalues_sym2, eigenvalues_sym3, fwhm_to_sigma, jerman_vesselness_2d, jerman_vesselness_3d, scale_response_2d, ScaleRange,
    VesselnessParams,
};
use porenet::{Image2D, ImageStack};
use proptest::prelude::*;

/// Vertical bright line with a Gaussian cross-section of the given FWHM.
fn line(n: usize, fwhm: f64, cx: f64) -> Image2D {
    let s = fwhm_to_sigma(fwhm);
    Image2D::from_fn(n, n, |x, _| (100.0 * (-(x as f64 - cx).powi(2) / (2.0 * s * s)).exp()) as f32)
}

#[test]
fn line_response_peaks_at_root_two_times_its_width() {
    // sigma^2 * d2/dx2 of a 1D Gaussian ridge of width s0 blurred by sigma is
    // maximal at sigma = sqrt(2) s0, so FWHM 6 is picked up at about 8.49
    let img = line(128, 6.0, 64.0);
    let params = VesselnessParams::default();
    let i = 64 + 128 * 64;
    let mut best = ((f32::MIN, f32::MIN), 0.0);
    let mut fwhm = 2.0;
    while fwhm <= 24.0 {
        let r = scale_response_2d(&img, fwhm, &params).unwrap();
        // the response saturates at 1 over a band of scales; the stronger
        // eigenvalue decides inside it
        let key = (r.response[i], r.strength[i]);
        if key > best.0 {
            best = (key, fwhm);
        }
        fwhm += 0.5;
    }
    let expect = 6.0 * 2f64.sqrt();
    assert!((best.1 - expect).abs() <= 0.5, "peak at {}", best.1);
    let res = jerman_vesselness_2d(&img, &params).unwrap();
    assert!(res.response[i] >= 0.5);
    assert_eq!(res.scale[i] as f64, best.1);
}

#[test]
fn cylinder_response_peaks_at_its_own_width() {
    // a 2D Gaussian cross-section keeps sigma^2 * curvature maximal at sigma = s0
    let (n, fwhm) = (48, 4.0);
    let s = fwhm_to_sigma(fwhm);
    let c = (n / 2) as f64;
    let mut voxels = vec![0f32; n * n * n];
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
                voxels[x + n * (y + n * z)] = (100.0 * (-d2 / (2.0 * s * s)).exp()) as f32;
            }
        }
    }
    let stack = ImageStack::new([n, n, n], [100.0; 3], voxels).unwrap();
    let params = VesselnessParams {
        scales: ScaleRange { min_fwhm: 2.0, max_fwhm: 8.0, step: 0.5 },
        ..Default::default()
    };
    let res = jerman_vesselness_3d(&stack, &params).unwrap();
    let i = n / 2 + n * (n / 2 + n * (n / 2));
    assert!(res.response[i] >= 0.5);
    assert!((res.scale[i] as f64 - fwhm).abs() <= 0.5, "picked {}", res.scale[i]);
}

#[test]
fn quarter_turn_permutes_the_response() {
    let img = line(96, 4.0, 40.0);
    let rot = Image2D::from_fn(96, 96, |x, y| img.get(y, 95 - x));
    let params = VesselnessParams {
        scales: ScaleRange { min_fwhm: 2.0, max_fwhm: 8.0, step: 0.5 },
        ..Default::default()
    };
    let a = jerman_vesselness_2d(&img, &params).unwrap();
    let b = jerman_vesselness_2d(&rot, &params).unwrap();
    for y in 20..76 {
        for x in 20..76 {
            let va = a.response[y + 96 * (95 - x)];
            let vb = b.response[x + 96 * y];
            assert!((va - vb).abs() <= 1e-4, "({x}, {y}): {va} vs {vb}");
        }
    }
}

#[test]
fn dark_structures_need_the_polarity_flag() {
    let bright = line(96, 4.0, 48.0);
    let dark = bright.map(|v| 100.0 - v);
    let params = VesselnessParams {
        scales: ScaleRange { min_fwhm: 2.0, max_fwhm: 8.0, step: 0.5 },
        ..Default::default()
    };
    let i = 48 + 96 * 48;
    let flipped = VesselnessParams { bright_on_dark: false, ..params };
    let a = jerman_vesselness_2d(&bright, &params).unwrap();
    let b = jerman_vesselness_2d(&dark, &flipped).unwrap();
    assert!((a.response[i] - b.response[i]).abs() < 1e-5);
    assert_eq!(jerman_vesselness_2d(&dark, &params).unwrap().response[i], 0.0);
}

#[test]
fn constant_image_has_no_response() {
    let img = Image2D::filled(96, 96, 7.0);
    let res = jerman_vesselness_2d(&img, &VesselnessParams::default()).unwrap();
    assert!(res.response.iter().all(|&v| v == 0.0));
}

#[test]
fn kernels_wider_than_the_image_are_refused() {
    let img = Image2D::filled(30, 30, 1.0);
    assert!(jerman_vesselness_2d(&img, &VesselnessParams::default()).is_err());
}

proptest! {
    #[test]
    fn eigenvalues_match_a_dense_solver(m in prop::array::uniform6(-10.0f64..10.0)) {
        let [xx, yy, zz, xy, xz, yz] = m;
        let dense = Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz);
        let mut want: Vec<f64> = SymmetricEigen::new(dense).eigenvalues.iter().copied().collect();
        want.sort_by(f64::total_cmp);
        let raw = eigenvalues_sym3(m);
        prop_assert!(raw[0].abs() <= raw[1].abs() && raw[1].abs() <= raw[2].abs());
        let mut got = raw.to_vec();
        got.sort_by(f64::total_cmp);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-6 * (1.0 + w.abs()), "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn two_by_two_eigenvalues_keep_trace_and_determinant(a in -10.0f64..10.0, b in -10.0f64..10.0, c in -10.0f64..10.0) {
        let [l1, l2] = eigenvalues_sym2(a, b, c);
        prop_assert!((l1 + l2 - (a + c)).abs() < 1e-9);
        prop_assert!((l1 * l2 - (a * c - b * b)).abs() < 1e-7 * (1.0 + (a * c - b * b).abs()));
        prop_assert!(l1.abs() <= l2.abs() + 1e-12);
    }
}
