use covr_forge::hnnce::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Symmetric InfoNCE written from scratch as the β = 0 oracle.
fn info_nce(s: &[Vec<f64>], tau: f64) -> f64 {
    let n = s.len();
    let mut total = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| (s[i][j] / tau).exp()).sum();
        let col: f64 = (0..n).map(|j| (s[j][i] / tau).exp()).sum();
        total -= (s[i][i] / tau).exp().ln() - row.ln();
        total -= (s[i][i] / tau).exp().ln() - col.ln();
    }
    total
}

/// The loss formula evaluated literally, without any rearrangement.
fn direct_formula(s: &[Vec<f64>], tau: f64, alpha: f64, beta: f64) -> f64 {
    let n = s.len();
    let b = n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let pos = (s[i][i] / tau).exp();
        let zr: f64 = (0..n).filter(|&k| k != i).map(|k| (beta * s[i][k] / tau).exp()).sum();
        let zc: f64 = (0..n).filter(|&k| k != i).map(|k| (beta * s[k][i] / tau).exp()).sum();
        let mut den_r = alpha * pos;
        let mut den_c = alpha * pos;
        for j in (0..n).filter(|&j| j != i) {
            den_r += (s[i][j] / tau).exp() * (b - 1.0) * (beta * s[i][j] / tau).exp() / zr;
            den_c += (s[j][i] / tau).exp() * (b - 1.0) * (beta * s[j][i] / tau).exp() / zc;
        }
        total -= (pos / den_r).ln();
        total -= (pos / den_c).ln();
    }
    total
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    covr_forge::embedspace::normalize_f64(&mut v);
    v
}

#[test]
fn two_by_two_matches_direct_formula() {
    let s = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
    let cfg = HnNceConfig::default();
    let got = hn_nce_loss(&s, &cfg).unwrap();
    let want = direct_formula(&s, 0.07, 1.0, 0.5);
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn random_matrices_match_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let n = rng.random_range(1..9);
        let s = random_matrix(&mut rng, n);
        let cfg = HnNceConfig { alpha: rng.random_range(0.1..2.0), beta: rng.random_range(0.0..2.0), ..Default::default() };
        let got = hn_nce_loss(&s, &cfg).unwrap();
        let want = direct_formula(&s, cfg.tau, cfg.alpha, cfg.beta);
        assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn beta_zero_is_symmetric_info_nce() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = HnNceConfig { beta: 0.0, ..Default::default() };
    for n in 1..10 {
        let s = random_matrix(&mut rng, n);
        let got = hn_nce_loss(&s, &cfg).unwrap();
        assert!((got - info_nce(&s, 0.07)).abs() < 1e-9);
    }
}

#[test]
fn stable_for_extreme_logits() {
    // direct exponentials overflow here; the stabilized form must not
    let s = vec![vec![1.0, -1.0, 1.0], vec![1.0, 1.0, -1.0], vec![-1.0, 1.0, 1.0]];
    let cfg = HnNceConfig { tau: 1e-3, ..Default::default() };
    assert!(hn_nce_loss(&s, &cfg).unwrap().is_finite());
}

/// Random head and batch with no hidden pre-activation within `margin` of 0,
/// where central differences would straddle the ReLU kink.
fn smooth_instance(seed: u64, margin: f64) -> (FusionHead, Vec<TrainingExample>) {
    let mut attempt = 0u64;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + attempt);
        attempt += 1;
        let b = rng.random_range(2..=8);
        let d = rng.random_range(2..=16);
        let head = FusionHead::init(d, 2 * d, rng.random());
        let ex: Vec<TrainingExample> = (0..b)
            .map(|i| TrainingExample {
                target_id: format!("t{i}"),
                query: unit(&mut rng, d),
                text: unit(&mut rng, d),
                target: unit(&mut rng, d),
            })
            .collect();
        let kink = ex
            .iter()
            .flat_map(|e| head.pre_activations(&e.query, &e.text).unwrap())
            .any(|z| z.abs() < margin);
        if !kink {
            return (head, ex);
        }
    }
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let cfg = HnNceConfig::default();
    for seed in 0..20 {
        let (head, ex) = smooth_instance(seed, 1e-3);
        let batch = TrainingBatch::new(ex.iter().collect()).unwrap();
        let check = finite_difference_check(&head, &batch, &cfg, 1e-4).unwrap();
        assert!(check.max_rel_error < 1e-4, "instance {seed}: {check:?}");
    }
}

#[test]
fn by_target_batches_never_repeat() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ids: Vec<String> = (0..600).map(|_| format!("t{}", rng.random_range(0..150))).collect();
    let epochs = sample_batches(&ids, 16, 9, BatchMode::ByTarget, 110).unwrap();
    let mut n = 0;
    for epoch in &epochs {
        let mut seen = std::collections::HashSet::new();
        for batch in epoch {
            let targets: std::collections::HashSet<_> = batch.iter().map(|&i| &ids[i]).collect();
            assert_eq!(targets.len(), batch.len());
            for t in targets {
                assert!(seen.insert(t), "target repeated within an epoch");
            }
            n += 1;
        }
    }
    assert!(n >= 1000);
}

#[test]
fn per_target_selection_is_uniform() {
    // target "x" owns 5 triplets; draw it 10,000 times
    let mut ids = vec!["x"; 5];
    ids.extend(["y", "z", "w"]);
    let sampler = BatchSampler::new(&ids, 4, BatchMode::ByTarget).unwrap();
    let mut counts = [0f64; 5];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10_000 {
        for batch in sampler.epoch(&mut rng) {
            for i in batch {
                if i < 5 {
                    counts[i] += 1.0;
                }
            }
        }
    }
    let total: f64 = counts.iter().sum();
    assert_eq!(total, 10_000.0);
    let expected = total / 5.0;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(4.0).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2}, p {p}, counts {counts:?}");
}

proptest! {
    #[test]
    fn weights_sum_to_b_minus_one(seed in 0u64..10_000, n in 2usize..10, beta in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_matrix(&mut rng, n);
        for i in 0..n {
            let row = hn_weights(&s[i], i, 0.07, beta);
            prop_assert!((row.iter().sum::<f64>() - (n - 1) as f64).abs() < 1e-9);
            let col: Vec<f64> = (0..n).map(|k| s[k][i]).collect();
            let w = hn_weights(&col, i, 0.07, beta);
            prop_assert!((w.iter().sum::<f64>() - (n - 1) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn nonnegative_with_unit_alpha(seed in 0u64..10_000, n in 1usize..10, beta in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_matrix(&mut rng, n);
        let cfg = HnNceConfig { beta, ..Default::default() };
        prop_assert!(hn_nce_loss(&s, &cfg).unwrap() >= 0.0);
    }

    #[test]
    fn forward_is_unit(seed in 0u64..10_000, d in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = FusionHead::init(d, 2 * d, seed);
        if let Ok(f) = head.forward(&unit(&mut rng, d), &unit(&mut rng, d)) {
            prop_assert!((f.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        }
    }
}
