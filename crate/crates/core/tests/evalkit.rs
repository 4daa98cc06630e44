use gsu::degrade::{make_vertical_mask, observation_mask, MaskVideo};
use gsu::eval::{consistency, interpolate_baseline, psnr, ssim, ssim_frame, Interpolation, MetricReport, SequenceMetrics};
use gsu::geom::DepthVideo;
use gsu::rng::Prng;
use gsu::tensor::Tensor;
use proptest::prelude::*;

fn video(f: usize, h: usize, w: usize, v: impl FnMut(usize) -> f32) -> DepthVideo {
    DepthVideo::new(Tensor::from_fn(&[f, 1, h, w], v)).unwrap()
}

fn random_video(f: usize, h: usize, w: usize, seed: u64) -> DepthVideo {
    let mut rng = Prng::new(seed);
    DepthVideo::new(Tensor::from_fn(&[f, 1, h, w], |_| rng.uniform() as f32)).unwrap()
}

/// SSIM computed window by window with an explicit 2-D Gaussian.
fn brute_ssim(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    let mut g = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (-(((i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2)) / 4.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    let mut count = 0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = g[i][j] / total;
                    ma += k * a[(y + i) * w + x + j] as f64;
                    mb += k * b[(y + i) * w + x + j] as f64;
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = g[i][j] / total;
                    let (da, db) = (a[(y + i) * w + x + j] as f64 - ma, b[(y + i) * w + x + j] as f64 - mb);
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

#[test]
fn psnr_examples() {
    let a = random_video(2, 8, 8, 1);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    let zero = video(2, 8, 8, |_| 0.3);
    let off = video(2, 8, 8, |_| 0.4);
    assert!((psnr(&off, &zero, 1.0).unwrap() - 20.0).abs() < 1e-5);
    let b = random_video(2, 8, 8, 2);
    assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    assert!(psnr(&a, &random_video(2, 8, 9, 2), 1.0).is_err());
}

#[test]
fn ssim_matches_brute_force() {
    for (seed, h, w) in [(3, 11, 11), (4, 16, 13), (5, 20, 24)] {
        let a = random_video(1, h, w, seed);
        let b = random_video(1, h, w, seed + 100).depth.zip_map(&a.depth, |x, y| 0.5 * x + 0.5 * y).unwrap();
        let got = ssim_frame(a.frame(0), b.data(), h, w).unwrap();
        assert!((got - brute_ssim(a.frame(0), b.data(), h, w)).abs() < 1e-12);
    }
}

#[test]
fn ssim_examples() {
    let a = random_video(3, 16, 16, 6);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    let c = video(1, 12, 12, |_| 0.7);
    assert_eq!(ssim(&c, &c).unwrap(), 1.0);
    // checkerboard against its complement
    let bin = video(1, 16, 16, |i| ((i / 16 + i % 16) % 2) as f32);
    let inv = video(1, 16, 16, |i| 1.0 - ((i / 16 + i % 16) % 2) as f32);
    let s = ssim(&bin, &inv).unwrap();
    assert!(s < 0.2, "{s}");
    assert!((s - brute_ssim(bin.frame(0), inv.frame(0), 16, 16)).abs() < 1e-12);
    assert!(ssim(&video(1, 10, 16, |_| 0.0), &video(1, 10, 16, |_| 0.0)).is_err());
}

#[test]
fn consistency_examples() {
    let a = random_video(3, 4, 4, 7);
    assert_eq!(consistency(&a, &a).unwrap(), 0.0);
    let s1 = video(3, 4, 4, |i| (i % 16) as f32 * 0.01);
    let s2 = video(3, 4, 4, |i| 0.5 + (i % 16 % 5) as f32 * 0.02);
    assert_eq!(consistency(&s1, &s2).unwrap(), 0.0);
    // 2 frames of 2 pixels: Δpred = (0.2, −0.1), Δref = (0.0, 0.3)
    let pred = DepthVideo::new(Tensor::new(&[2, 1, 1, 2], vec![0.1, 0.5, 0.3, 0.4]).unwrap()).unwrap();
    let refv = DepthVideo::new(Tensor::new(&[2, 1, 1, 2], vec![0.2, 0.2, 0.2, 0.5]).unwrap()).unwrap();
    let c = consistency(&pred, &refv).unwrap();
    assert!((c - (0.2 + 0.4) / 2.0).abs() < 1e-6, "{c}");
    assert!(consistency(&video(1, 2, 2, |_| 0.0), &video(1, 2, 2, |_| 0.0)).is_err());
}

proptest! {
    #[test]
    fn metric_symmetries(sa in 0u64..1000, sb in 0u64..1000, sc in 0u64..1000) {
        let (a, b, c) = (random_video(3, 12, 12, sa), random_video(3, 12, 12, sb), random_video(3, 12, 12, sc));
        prop_assert_eq!(consistency(&a, &b).unwrap(), consistency(&b, &a).unwrap());
        prop_assert!(consistency(&a, &c).unwrap() <= consistency(&a, &b).unwrap() + consistency(&b, &c).unwrap() + 1e-12);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn baselines_preserve_known_pixels(seed in 0u64..1000, k in 1usize..4) {
        let mut rng = Prng::new(seed);
        let y = video(2, 9, 7, |_| if rng.bernoulli(0.3) { 0.0 } else { rng.uniform() as f32 });
        let vm = make_vertical_mask([2, 1, 9, 7], k).unwrap();
        let y = gsu::degrade::apply_mask(&y, &vm).unwrap();
        let m = observation_mask(&y);
        for method in [Interpolation::Nearest, Interpolation::Bilinear, Interpolation::Bicubic] {
            let out = interpolate_baseline(&y, &m, method).unwrap();
            for i in 0..m.data().len() {
                if m.data()[i] == 1 {
                    prop_assert_eq!(out.depth.data()[i].to_bits(), y.depth.data()[i].to_bits());
                }
            }
            prop_assert!(out.depth.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn full_mask_returns_input() {
    let y = random_video(2, 5, 6, 8);
    let m = MaskVideo::filled([2, 1, 5, 6], true);
    for method in [Interpolation::Nearest, Interpolation::Bilinear, Interpolation::Bicubic] {
        assert_eq!(interpolate_baseline(&y, &m, method).unwrap(), y);
    }
}

#[test]
fn single_known_pixel_nearest_fills_constant() {
    let y = video(1, 5, 5, |i| if i == 12 { 0.6 } else { 0.0 });
    let m = observation_mask(&y);
    let out = interpolate_baseline(&y, &m, Interpolation::Nearest).unwrap();
    assert!(out.depth.data().iter().all(|&v| v == 0.6));
}

#[test]
fn linear_ramp_recovered_under_row_removal() {
    // odd height so the last row is kept and every removed row is bracketed
    let (h, w) = (33, 8);
    let ramp = video(2, h, w, |i| (0.1 + 0.025 * ((i / w) % h) as f64) as f32);
    let vm = make_vertical_mask([2, 1, h, w], 2).unwrap();
    let y = gsu::degrade::apply_mask(&ramp, &vm).unwrap();
    let m = observation_mask(&y);
    assert_eq!(m, vm);
    for method in [Interpolation::Bilinear, Interpolation::Bicubic] {
        let out = interpolate_baseline(&y, &m, method).unwrap();
        assert!(out.depth.max_abs_diff(&ramp.depth).unwrap() < 1e-6, "{method}");
    }
}

#[test]
fn report_means() {
    let rows: Vec<SequenceMetrics> = (0..4)
        .map(|i| SequenceMetrics {
            sequence_id: format!("s{i}"),
            recipe: "r".into(),
            psnr_db: 10.0 + i as f64,
            ssim: 0.1 * i as f64,
            consistency: 0.01,
        })
        .collect();
    let (p, s, c) = MetricReport { rows }.mean().unwrap();
    assert!((p - 11.5).abs() < 1e-12 && (s - 0.15).abs() < 1e-12 && (c - 0.01).abs() < 1e-12);
}
