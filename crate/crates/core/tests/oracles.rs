//! Library results against independent brute-force or textbook oracles.

use nalgebra::{DMatrix, DVector};
use npad_core::aggregate_bank::{aggregate_features, build_centroid_bank, BankParams, CentroidBank};
use npad_core::channel_reduce::{apply_selection, ChannelSelection};
use npad_core::evaluation::auroc;
use npad_core::gaussian_field::{fit_pixel_gaussians, GaussianField};
use npad_core::inference::{image_score, score_d1, AnomalyMap};
use npad_core::neighbor_sim::{bhattacharyya_bc, fit_weighted_field, BcForm, WeightedFitParams, Weighting};
use npad_core::FeatureMap;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

fn random_maps(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, c: usize) -> Vec<FeatureMap> {
    (0..n)
        .map(|_| FeatureMap::from_fn(h, w, c, |_, _, _| rng.gen_range(-2.0..2.0)))
        .collect()
}

/// Random symmetric positive-definite `d x d` matrix, row-major.
fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    let m = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
    (0..d * d).map(|k| m[(k / d, k % d)]).collect()
}

fn mahalanobis_inverse_oracle(x: &[f64], mu: &[f64], cov: &[f64]) -> f64 {
    let d = x.len();
    let s = DMatrix::from_row_slice(d, d, cov);
    let inv = s.try_inverse().expect("oracle matrix invertible");
    let delta = DVector::from_iterator(d, x.iter().zip(mu).map(|(a, b)| a - b));
    (delta.transpose() * inv * &delta)[(0, 0)].sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mahalanobis_matches_explicit_inverse(d in 1usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cov = random_spd(&mut rng, d);
        let mu: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let field = GaussianField::from_moments(1, 1, d, 0.0, mu.clone(), cov.clone()).unwrap();
        let got = field.mahalanobis(&x, 0, 0).unwrap();
        let want = mahalanobis_inverse_oracle(&x, &mu, &cov);
        prop_assert!(rel_close(got, want, 1e-9), "{got} vs {want}");
    }

    #[test]
    fn auroc_matches_all_pairs(n in 2usize..=100, seed in any::<u64>(), levels in 1u32..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // few distinct levels force ties
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 * 0.1).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let (mut twice_u, mut pos, mut neg) = (0u64, 0u64, 0u64);
        for i in 0..n {
            if labels[i] == 1 { pos += 1 } else { neg += 1 }
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    twice_u += if scores[i] > scores[j] { 2 } else if scores[i] == scores[j] { 1 } else { 0 };
                }
            }
        }
        let want = (twice_u as f64 / 2.0) / (pos as f64 * neg as f64);
        prop_assert_eq!(auroc(&scores, &labels).unwrap().to_bits(), want.to_bits());
    }

    #[test]
    fn nearest_centroid_matches_brute_scan(k in 1usize..40, d in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centroids: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let bank = CentroidBank::from_centroids(d, centroids.clone(), 0.1, 0, 0.0).unwrap();
        for _ in 0..20 {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let brute = centroids
                .chunks_exact(d)
                .map(|c| c.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min);
            prop_assert_eq!(bank.nearest_distance(&v).to_bits(), brute.to_bits());
        }
    }

    #[test]
    fn weighted_field_with_p1_equals_plain_field(seed in any::<u64>(), n in 2usize..8, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps = random_maps(&mut rng, n, 3, 4, c);
        let plain = fit_pixel_gaussians(&maps, 0.01).unwrap();
        let params = WeightedFitParams { p: 1, ..WeightedFitParams::default() };
        let (_, weighted) = fit_weighted_field(&maps, &plain, &params).unwrap();
        for (a, b) in weighted.means().iter().zip(plain.means()) {
            prop_assert!(rel_close(*a, *b, 1e-9));
        }
        for (a, b) in weighted.covariances().iter().zip(plain.covariances()) {
            prop_assert!(rel_close(*a, *b, 1e-9));
        }
    }

    #[test]
    fn bhattacharyya_is_symmetric(d in 1usize..6, seed in any::<u64>(), full in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c1, c2) = (random_spd(&mut rng, d), random_spd(&mut rng, d));
        let m1: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let m2: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let form = if full { BcForm::Full } else { BcForm::Simplified };
        let ab = bhattacharyya_bc(&m1, &c1, &m2, &c2, form).unwrap();
        let ba = bhattacharyya_bc(&m2, &c2, &m1, &c1, form).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!(rel_close(ab, ba, 1e-9), "{ab} vs {ba}");
    }

    #[test]
    fn aggregation_commutes_with_selection(seed in any::<u64>(), p in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fm = random_maps(&mut rng, 1, 5, 4, 6).pop().unwrap();
        let sel = ChannelSelection::new(vec![0, 2, 5], 6).unwrap();
        let a = aggregate_features(&apply_selection(&fm, &sel).unwrap(), p);
        let b = apply_selection(&aggregate_features(&fm, p), &sel).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn image_score_matches_sort_then_dot(seed in any::<u64>(), k in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, d) = (4, 5, 2);
        let d1 = AnomalyMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0.0..5.0)).collect()).unwrap();
        let agg = random_maps(&mut rng, 1, h, w, d).pop().unwrap();
        let bank = CentroidBank::from_centroids(d, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(), 0.1, 0, 0.0).unwrap();
        let mut idx: Vec<usize> = (0..h * w).collect();
        idx.sort_by(|&a, &b| d1.values()[b].total_cmp(&d1.values()[a]).then(a.cmp(&b)));
        let mut q: Vec<f64> = idx[..k].iter().map(|&i| d1.values()[i]).collect();
        let mut e: Vec<f64> = idx[..k].iter().map(|&i| bank.nearest_distance(agg.pixel(i))).collect();
        q.sort_by(f64::total_cmp);
        e.sort_by(f64::total_cmp);
        let want: f64 = q.iter().zip(&e).map(|(a, b)| a * b).sum();
        let got = image_score(&d1, &agg, &bank, k).unwrap();
        prop_assert_eq!(got.value.to_bits(), want.to_bits());
        // scaling D1 scales the score
        let scaled = AnomalyMap::new(h, w, d1.values().iter().map(|v| v * 3.0).collect()).unwrap();
        prop_assert!(rel_close(image_score(&scaled, &agg, &bank, k).unwrap().value, 3.0 * want, 1e-12));
    }
}

#[test]
fn two_pass_fit_matches_textbook_estimator() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, d) = (100, 3);
    let maps = random_maps(&mut rng, n, 2, 2, d);
    let field = fit_pixel_gaussians(&maps, 0.01).unwrap();
    for idx in 0..4 {
        let xs: Vec<DVector<f64>> = maps.iter().map(|m| DVector::from_row_slice(m.pixel(idx))).collect();
        let mean = xs.iter().fold(DVector::zeros(d), |a, x| a + x) / n as f64;
        let cov = xs
            .iter()
            .fold(DMatrix::zeros(d, d), |a, x| a + (x - &mean) * (x - &mean).transpose())
            / (n - 1) as f64
            + DMatrix::identity(d, d) * 0.01;
        for r in 0..d {
            assert!(rel_close(field.mean_at(idx)[r], mean[r], 1e-10));
            for s in 0..d {
                assert!(rel_close(field.cov_at(idx)[r * d + s], cov[(r, s)], 1e-10));
            }
        }
    }
}

#[test]
fn d1_is_invariant_to_affine_rescaling_with_scaled_epsilon() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let train = random_maps(&mut rng, 12, 4, 4, 3);
    let test = random_maps(&mut rng, 1, 4, 4, 3).pop().unwrap();
    let (a, b) = (2.5, -1.25);
    let affine = |m: &FeatureMap| {
        let (h, w, c) = m.dims();
        FeatureMap::new(h, w, c, m.data().iter().map(|x| a * x + b).collect()).unwrap()
    };
    // Uniform weights keep the weight field itself scale-free.
    let fit = |maps: &[FeatureMap], eps: f64| {
        let base = fit_pixel_gaussians(maps, eps).unwrap();
        let params = WeightedFitParams { epsilon: eps, weighting: Weighting::Uniform, ..WeightedFitParams::default() };
        fit_weighted_field(maps, &base, &params).unwrap().1
    };
    let f1 = fit(&train, 0.01);
    let scaled: Vec<FeatureMap> = train.iter().map(affine).collect();
    let f2 = fit(&scaled, 0.01 * a * a);
    let m1 = score_d1(&test, &f1, 2).unwrap();
    let m2 = score_d1(&affine(&test), &f2, 2).unwrap();
    for (x, y) in m1.values().iter().zip(m2.values()) {
        assert!(rel_close(*x, *y, 1e-9), "{x} vs {y}");
    }
}

#[test]
fn fields_do_not_depend_on_training_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let maps = random_maps(&mut rng, 10, 3, 3, 4);
    let mut rev = maps.clone();
    rev.reverse();
    let base = fit_pixel_gaussians(&maps, 0.01).unwrap();
    let base_rev = fit_pixel_gaussians(&rev, 0.01).unwrap();
    let params = WeightedFitParams::default();
    let (_, a) = fit_weighted_field(&maps, &base, &params).unwrap();
    let (_, b) = fit_weighted_field(&rev, &base_rev, &params).unwrap();
    for (x, y) in a.covariances().iter().zip(b.covariances()).chain(a.means().iter().zip(b.means())) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
    }
}

#[test]
fn positive_definite_after_regularization() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..1000 {
        let n = rng.gen_range(2..=10);
        let d = rng.gen_range(1..=6);
        let degenerate = trial % 4;
        let maps: Vec<FeatureMap> = (0..n)
            .map(|i| {
                FeatureMap::from_fn(2, 2, d, |_, _, k| match degenerate {
                    // identical maps
                    0 => k as f64,
                    // all channels collinear
                    1 => (i as f64) * (k as f64 + 1.0),
                    _ => rng.gen_range(-10.0..10.0),
                })
            })
            .collect();
        let field = fit_pixel_gaussians(&maps, 0.01);
        assert!(field.is_ok(), "trial {trial}: n={n} d={d}: {:?}", field.err());
        let params = WeightedFitParams { p: 3, ..WeightedFitParams::default() };
        let w = fit_weighted_field(&maps, field.as_ref().unwrap(), &params);
        assert!(w.is_ok(), "trial {trial}: weighted fit failed: {:?}", w.err());
    }
}

#[test]
fn kmeans_bank_is_seed_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let maps = random_maps(&mut rng, 5, 6, 6, 3);
    let params = BankParams { ratio: 0.2, seed: 4, ..BankParams::default() };
    let a = build_centroid_bank(&maps, &params).unwrap();
    let b = build_centroid_bank(&maps, &params).unwrap();
    assert_eq!(a, b);
    assert!(a.inertia_history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
}
