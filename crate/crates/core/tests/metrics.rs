use maos_core::data::synth::paired_test_set;
use maos_core::metrics::{fid_between_sets, frechet_distance, ssim, Embedding, GaussianStats, SSIM_K1};
use maos_core::Tensor;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn stats(mean: Vec<f64>, cov: DMatrix<f64>) -> GaussianStats {
    GaussianStats::from_parts(mean, cov, 1000).unwrap()
}

/// Random orthogonal matrix from the QR factor of a seeded Gaussian matrix.
fn rotation(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    m.qr().q()
}

/// Covariances sharing the eigenbasis `q` commute, so the trace term
/// reduces to `sum sqrt(a_i b_i)`.
fn commuting_oracle(m1: &[f64], m2: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let mean: f64 = m1.iter().zip(m2).map(|(x, y)| (x - y).powi(2)).sum();
    mean + a.iter().zip(b).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum::<f64>()
}

fn spd(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.1
}

#[test]
fn closed_forms() {
    let one = |m: f64, v: f64| stats(vec![m], DMatrix::from_element(1, 1, v));
    assert!((frechet_distance(&one(0.0, 1.0), &one(3.0, 4.0)).unwrap() - 10.0).abs() < 1e-9);
    let diag = |m: [f64; 2], v: [f64; 2]| stats(m.to_vec(), DMatrix::from_diagonal(&DVector::from_row_slice(&v)));
    let d = frechet_distance(&diag([0.0, 0.0], [1.0, 1.0]), &diag([1.0, 1.0], [4.0, 9.0])).unwrap();
    assert!((d - 7.0).abs() < 1e-9, "{d}");
}

#[test]
fn monte_carlo_fit_matches_analytic_value() {
    // x = mu + L z with L L^T = Sigma, 100 000 samples per side
    let q = rotation(2, 11);
    let (a, b) = ([1.0, 0.25], [2.0, 0.5]);
    let (m1, m2) = ([0.0, 1.0], [1.5, -0.5]);
    let sample = |m: [f64; 2], ev: [f64; 2], seed: u64| -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = &q * DMatrix::from_diagonal(&DVector::from_row_slice(&[ev[0].sqrt(), ev[1].sqrt()]));
        (0..100_000)
            .map(|_| {
                let z = DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
                let x = &l * z;
                vec![m[0] + x[0], m[1] + x[1]]
            })
            .collect()
    };
    let fa = GaussianStats::fit(&sample(m1, a, 1)).unwrap();
    let fb = GaussianStats::fit(&sample(m2, b, 2)).unwrap();
    let got = frechet_distance(&fa, &fb).unwrap();
    let want = commuting_oracle(&m1, &m2, &a, &b);
    assert!((got / want - 1.0).abs() < 0.02, "{got} vs {want}");
}

#[test]
fn random_projection_depends_on_its_seed() {
    let (xs, _) = paired_test_set::<f64>(3, 32, 0);
    let e = |seed| Embedding::RandomProjection { dim: 16, seed }.embed(&xs).unwrap();
    assert_eq!(e(1), e(1));
    assert_ne!(e(1), e(2));
}

#[test]
fn corpus_domains_are_separated_by_the_default_embedding() {
    let (xs, ys) = paired_test_set::<f64>(256, 32, 0);
    let (_, ys_other) = paired_test_set::<f64>(256, 32, 1);
    let emb = Embedding::default();
    let within = fid_between_sets(&ys, &ys_other, &emb).unwrap();
    let across = fid_between_sets(&xs, &ys_other, &emb).unwrap();
    assert!(within < 0.25 * across, "within {within}, across {across}");
}

/// Luminance term only: both images constant, so every variance is zero.
fn constant_ssim_oracle(a: f64, b: f64) -> f64 {
    // dynamic range 1 after mapping to [0, 1]
    let c1 = SSIM_K1.powi(2);
    (2.0 * a * b + c1) / (a * a + b * b + c1)
}

#[test]
fn constant_images_match_the_luminance_formula() {
    for (a, b) in [(0.2, 0.7), (0.0, 1.0), (0.5, 0.5), (0.9, 0.1)] {
        // pixels are stored in [-1, 1]
        let img = |v: f64| Tensor::<f64>::full([3, 16, 16], 2.0 * v - 1.0);
        let got = ssim(&img(a), &img(b)).unwrap();
        assert!((got - constant_ssim_oracle(a, b)).abs() < 1e-9, "{a} {b}: {got}");
    }
}

fn image(seed: u64, side: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([3, side, side], |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z.tanh()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn frechet_is_symmetric_and_zero_on_itself(d in 1usize..6, s1 in any::<u64>(), s2 in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(s1 ^ s2);
        let mean = |rng: &mut ChaCha8Rng| (0..d).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>();
        let a = stats(mean(&mut rng), spd(d, s1));
        let b = stats(mean(&mut rng), spd(d, s2));
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0), "{} vs {}", ab, ba);
        prop_assert!(ab >= 0.0);
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
    }

    #[test]
    fn commuting_covariances_match_the_closed_form(
        d in 1usize..6,
        seed in any::<u64>(),
        a in prop::collection::vec(0.05f64..5.0, 5),
        b in prop::collection::vec(0.05f64..5.0, 5),
        m in prop::collection::vec(-2.0f64..2.0, 10),
    ) {
        let q = rotation(d, seed);
        let cov = |ev: &[f64]| &q * DMatrix::from_diagonal(&DVector::from_row_slice(&ev[..d])) * q.transpose();
        let (m1, m2) = (&m[..d], &m[5..5 + d]);
        let got = frechet_distance(&stats(m1.to_vec(), cov(&a)), &stats(m2.to_vec(), cov(&b))).unwrap();
        let want = commuting_oracle(m1, m2, &a[..d], &b[..d]);
        prop_assert!((got - want).abs() < 1e-9 * want.max(1.0), "{} vs {}", got, want);
    }

    #[test]
    fn ssim_is_symmetric_bounded_and_one_on_itself(s1 in any::<u64>(), s2 in any::<u64>(), side in 11usize..24) {
        let (a, b) = (image(s1, side), image(s2, side));
        let ab = ssim(&a, &b).unwrap();
        prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }
}
