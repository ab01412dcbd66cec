mod common;

use proptest::prelude::*;
use smoothmix::adversary::{l2_project, smoothadv_pgd, smoothmix_attack, AttackConfig};
use smoothmix::data::stratified_indices;
use smoothmix::evaluation::{acr, certified_accuracy_curve, mixing_ratio_scan, CertifiedResultSet, CertifiedRow};
use smoothmix::nn::{cross_entropy, softmax, Gradients, Network, OptimizerState, SoftLabel};
use smoothmix::smoothing::{sample_noise, CertifyOutcome, SmoothingConfig};
use smoothmix::training::make_mix_pair;
use smoothmix::Stream;

fn net_from_seed(seed: u64, d: usize, c: usize) -> Network<f64> {
    common::random_net(d, &[6], c, &mut Stream::new(seed, "prop-net", 0).rng())
}

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0..50.0f64, 2..8)
}

fn simplex(c: usize) -> impl Strategy<Value = SoftLabel<f64>> {
    prop::collection::vec(0.001..1.0f64, c).prop_map(|v| {
        let t: f64 = v.iter().sum();
        SoftLabel::new(v.iter().map(|x| x / t).collect()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_is_on_the_simplex(z in logits()) {
        let p = softmax(&z);
        let total: f64 = p.probs().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(p.probs().iter().all(|v| *v >= 0.0));
        prop_assert!(SoftLabel::new(p.into_inner()).is_ok());
    }

    #[test]
    fn gibbs_inequality(z in prop::collection::vec(-20.0..20.0f64, 4), t in simplex(4)) {
        let ce = cross_entropy(&z, &t).unwrap();
        prop_assert!(ce >= t.entropy() - 1e-9);
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000, x in prop::collection::vec(-3.0..3.0f64, 3)) {
        let net = net_from_seed(seed, 3, 4);
        let a = net.logits(&x);
        let b = net.logits(&x);
        prop_assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn zero_gradient_step_is_identity(seed in 0u64..1000, lr in 0.0..1.0f64, mom in 0.0..0.99f64) {
        let mut net = net_from_seed(seed, 3, 2);
        let before = net.clone();
        let mut opt = OptimizerState::new(&net, lr, mom, 0.0).unwrap();
        let zero = Gradients::zeros_like(&net);
        opt.step(&mut net, &zero).unwrap();
        opt.step(&mut net, &zero).unwrap();
        prop_assert_eq!(net, before);
    }

    #[test]
    fn mix_pairs_are_valid(lambda in 0.0..=0.5f64, fhat in simplex(5),
                           x in prop::collection::vec(-2.0..2.0f64, 3),
                           adv in prop::collection::vec(-2.0..2.0f64, 3)) {
        let pair = make_mix_pair(&x, &fhat, &adv, lambda, 5).unwrap();
        prop_assert!(SoftLabel::new(pair.y_mix.probs().to_vec()).is_ok());
        let total: f64 = pair.y_mix.probs().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        for ((m, a), b) in pair.x_mix.iter().zip(&x).zip(&adv) {
            prop_assert!((m - (a + lambda * (b - a))).abs() < 1e-12);
        }
        let id = make_mix_pair(&x, &fhat, &adv, 0.0, 5).unwrap();
        prop_assert_eq!(id.x_mix, x);
        prop_assert_eq!(id.y_mix, fhat);
    }

    #[test]
    fn attack_steps_have_length_alpha(seed in 0u64..500, alpha in 0.01..2.0f64, y in 0usize..3) {
        let net = net_from_seed(seed, 4, 3);
        let x = common::random_vec(4, 1.0, &mut Stream::new(seed, "x", 0).rng());
        let noise = sample_noise(0.5, 4, 4, &Stream::new(seed, "noise", 0)).unwrap();
        let cfg = AttackConfig { alpha_step: alpha, steps: 5, epsilon_cap: None };
        let traj = smoothmix_attack(&net, &x, y, &noise, &cfg).unwrap();
        prop_assert_eq!(traj.points.len(), 6);
        prop_assert_eq!(traj.noise.stream(), noise.stream());
        let moved = traj.points.windows(2).filter(|w| {
            let step: f64 = w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if step > 0.0 {
                assert!((step - alpha).abs() < 1e-9, "step {step} vs {alpha}");
            }
            step > 0.0
        }).count();
        prop_assert_eq!(moved + traj.skipped_steps, 5);
    }

    #[test]
    fn smoothadv_stays_in_the_ball(seed in 0u64..500, eps in 0.01..1.5f64, step in 0.01..1.0f64) {
        let net = net_from_seed(seed, 4, 3);
        let x = common::random_vec(4, 1.0, &mut Stream::new(seed, "x", 0).rng());
        let noise = sample_noise(0.5, 4, 3, &Stream::new(seed, "noise", 0)).unwrap();
        let adv = smoothadv_pgd(&net, &x, 1, &noise, 7, step, eps).unwrap();
        let dist: f64 = adv.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!(dist <= eps + 1e-9);
    }

    #[test]
    fn projection_lands_in_the_ball(p in prop::collection::vec(-5.0..5.0f64, 3), r in 0.01..3.0f64) {
        let c = [0.5, -0.5, 1.0];
        let q = l2_project(&p, &c, r).unwrap();
        let dist: f64 = q.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!(dist <= r + 1e-12);
    }

    #[test]
    fn curves_are_monotone_and_bound_acr(
        rows in prop::collection::vec((0usize..3, 0usize..3, 0.0..2.0f64, any::<bool>()), 1..40)
    ) {
        let rows: Vec<CertifiedRow> = rows.into_iter().enumerate().map(|(i, (label, pred, r, abstain))| CertifiedRow {
            idx: i,
            label,
            outcome: if abstain { CertifyOutcome::Abstain } else {
                CertifyOutcome::Certified { predicted_class: pred, radius: r, p_lower: 0.9 }
            },
            seconds: 0.0,
        }).collect();
        let max_r = rows.iter().map(|r| r.outcome.radius()).fold(0.0, f64::max);
        let set = CertifiedResultSet::new(rows, SmoothingConfig::default(), "p", 0).unwrap();
        let radii: Vec<f64> = (0..12).map(|k| k as f64 * 0.2).collect();
        let curve = certified_accuracy_curve(&set, &radii).unwrap();
        prop_assert!(curve.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(acr(&set) <= max_r * curve[0] + 1e-12);
    }

    #[test]
    fn stratified_quotas(labels in prop::collection::vec(0usize..4, 20..200), frac in 0.05..0.95f64, seed in 0u64..100) {
        let size = ((labels.len() as f64) * frac) as usize;
        let keep = stratified_indices(&labels, 4, size, seed);
        prop_assert_eq!(keep.len(), size);
        for c in 0..4 {
            let full = labels.iter().filter(|&&l| l == c).count() as f64;
            let got = keep.iter().filter(|&&i| labels[i] == c).count() as f64;
            prop_assert!((got - size as f64 * full / labels.len() as f64).abs() < 1.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mixing_ratio_ignores_noise_order(seed in 0u64..200, rot in 1usize..15) {
        let net = net_from_seed(seed, 3, 3);
        let x = common::random_vec(3, 1.0, &mut Stream::new(seed, "x", 0).rng());
        let adv = common::random_vec(3, 4.0, &mut Stream::new(seed, "adv", 0).rng());
        let noise = sample_noise(0.3, 3, 16, &Stream::new(seed, "n", 0)).unwrap();
        let order: Vec<usize> = (0..16).map(|i| (i + rot) % 16).collect();
        let shuffled = noise.permuted(&order).unwrap();
        let y = smoothmix::smoothing::soft_smoothed_predict(&net, &x, &noise).unwrap().argmax();
        let a = mixing_ratio_scan(&net, &x, &adv, y, &noise).unwrap();
        let b = mixing_ratio_scan(&net, &x, &adv, y, &shuffled).unwrap();
        prop_assert_eq!(a, b);
    }
}
