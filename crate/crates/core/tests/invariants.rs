use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sepcount_core::attractor::compute_masks;
use sepcount_core::counter::{covariance, gde_transform, SyntheticEmbeddings};
use sepcount_core::dsp::{frame, overlap_add, EDGE};
use sepcount_core::embedder::EmbeddingMatrix;
use sepcount_core::numcore::sym_eig;
use sepcount_core::*;

fn gaussian(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn frob(a: &Tensor) -> f64 {
    a.data().iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    Tensor::from_fn(&[n, m], |i| (0..k).map(|j| a.at(i / m, j) * b.at(j, i % m)).sum())
}

fn transpose(a: &Tensor) -> Tensor {
    Tensor::from_fn(&[a.cols(), a.rows()], |i| a.at(i % a.rows(), i / a.rows()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gde_estimate_is_scale_invariant(seed in any::<u64>(), count in 1usize..5, alpha in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = SyntheticEmbeddings { rows: 400, ..SyntheticEmbeddings::default() };
        let v = gen.sample(count, &mut rng);
        let scaled = v.map(|x| alpha * x);
        let a = gde_count_scaled(&v, DEFAULT_GDE_SCALE).unwrap();
        let b = gde_count_scaled(&scaled, DEFAULT_GDE_SCALE).unwrap();
        prop_assert_eq!(a.estimate, b.estimate);
        prop_assert_eq!(a.saturated, b.saturated);
    }

    #[test]
    fn rotation_keeps_covariance_spectrum(seed in any::<u64>(), dim in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = gaussian(&[3 * dim, dim], &mut rng);
        let q = sym_eig(&covariance(&gaussian(&[2 * dim, dim], &mut rng)).unwrap().b).unwrap().vectors;
        let before = sym_eig(&covariance(&v).unwrap().b).unwrap().values;
        let after = sym_eig(&covariance(&matmul(&v, &q)).unwrap().b).unwrap().values;
        let scale = before[0].abs().max(1.0);
        for (x, y) in before.iter().zip(&after) {
            prop_assert!((x - y).abs() < 1e-9 * scale, "{x} vs {y}");
        }
    }

    #[test]
    fn masks_lie_on_the_simplex(seed in any::<u64>(), f in 1usize..6, t in 1usize..9, c in 1usize..5, spread in 0.1f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = 5;
        let v = EmbeddingMatrix { v: gaussian(&[f * t, l], &mut rng).map(|x| spread * x), conv_channels: f };
        let a = gaussian(&[c, l], &mut rng);
        let (m, _) = compute_masks(&v, &a).unwrap();
        for j in 0..f * t {
            let s: f64 = m.masks.iter().map(|mk| mk.data()[j]).sum();
            prop_assert!(m.masks.iter().all(|mk| mk.data()[j] >= 0.0));
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pit_loss_ignores_estimate_order(seed in any::<u64>(), c in 1usize..5, len in 32usize..300, shift in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wave = |rng: &mut ChaCha8Rng| Waveform::new(gaussian(&[len], rng).into_data()).unwrap();
        let sources: Vec<Waveform> = (0..c).map(|_| wave(&mut rng)).collect();
        let estimates: Vec<Waveform> = (0..c).map(|_| wave(&mut rng)).collect();
        let mut rotated = estimates.clone();
        rotated.rotate_left(shift % c);
        let a = pit_loss(&sources, &estimates).unwrap();
        let b = pit_loss(&sources, &rotated).unwrap();
        prop_assert!((a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn framing_round_trip_on_interior(seed in any::<u64>(), len in 40usize..2000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Waveform::new(gaussian(&[len], &mut rng).into_data()).unwrap();
        let y = overlap_add(&frame(&x).unwrap().frames).unwrap();
        for i in EDGE..y.len() - EDGE {
            prop_assert!((x.samples()[i] - y.samples()[i]).abs() < 1e-9);
        }
    }
}

#[test]
fn gde_transform_reconstructs_random_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let l = rng.random_range(2..24);
        let n = rng.random_range(l..4 * l);
        let b = covariance(&gaussian(&[n, l], &mut rng)).unwrap();
        let tr = gde_transform(&b).unwrap();
        let u2 = tr.u2();
        let rebuilt = matmul(&matmul(&transpose(&u2), &b.b), &u2);
        let diff = Tensor::from_fn(&[l, l], |i| rebuilt.data()[i] - tr.r2().data()[i]);
        assert!(frob(&diff) < 1e-9 * frob(&b.b), "l={l} diff={}", frob(&diff));
    }
}
