//! Property tests over the numeric core: losses, backprop, EM, sampling,
//! ranking diagnostics and dataset generation.

use deneb::analysis::{rank_auc, score_histogram_by_quadrant};
use deneb::datasets::{decode_container, encode_container, make_toy_biased, SideChannels};
use deneb::gmm::{fit_em, EmOptions};
use deneb::losses::{batch_loss, LossSpec};
use deneb::nnkit::{softmax_temp, Activation, Dense, Mlp, Tensor2};
use deneb::pipeline::sampling_distribution;
use proptest::prelude::*;

fn logits(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0f64..8.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_is_a_distribution(l in prop::collection::vec(-50.0f32..50.0, 2..12), tau in 0.1f64..5.0) {
        let p = softmax_temp(&l, tau).unwrap();
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gce_decreases_as_the_label_logit_grows(l in logits(5), y in 0usize..5, q in 0.05f64..1.0, bump in 0.01f64..3.0) {
        let spec = LossSpec::gce(q);
        let (a, _) = spec.eval_f64(&l, y).unwrap();
        let mut up = l.clone();
        up[y] += bump;
        let (b, _) = spec.eval_f64(&up, y).unwrap();
        prop_assert!(b < a || (a - b).abs() < 1e-15, "{a} -> {b}");
        // Bounded by the q = 1 ceiling 1/q.
        prop_assert!(a <= 1.0 / q + 1e-12);
    }

    #[test]
    fn gce_approaches_ce_as_q_vanishes(l in logits(10), y in 0usize..10) {
        let (ce, _) = LossSpec::CE.eval_f64(&l, y).unwrap();
        let (g, _) = LossSpec::gce(1e-6).eval_f64(&l, y).unwrap();
        prop_assert!((ce - g).abs() < 1e-3 * ce.max(1.0), "{ce} vs {g}");
    }

    #[test]
    fn loss_gradients_match_central_differences(
        l in logits(6),
        y in 0usize..6,
        which in 0usize..3,
        q in 0.1f64..1.0,
        tau in 0.5f64..2.0,
    ) {
        let spec = match which {
            0 => LossSpec::CE,
            1 => LossSpec::gce(q),
            _ => LossSpec::sce(0.1 + q, 1.0 - 0.5 * q),
        }
        .with_tau(tau);
        let (_, grad) = spec.eval_f64(&l, y).unwrap();
        let h = 1e-3;
        for k in 0..l.len() {
            let mut plus = l.clone();
            let mut minus = l.clone();
            plus[k] += h;
            minus[k] -= h;
            let fd = (spec.eval_f64(&plus, y).unwrap().0 - spec.eval_f64(&minus, y).unwrap().0) / (2.0 * h);
            let err = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-3);
            prop_assert!(err < 1e-4, "{spec:?} k={k}: fd {fd} vs {}", grad[k]);
        }
    }
}

/// Weights, bias, input width, output width, ReLU.
type OracleLayer = (Vec<f64>, Vec<f64>, usize, usize, bool);

/// Plain f64 forward pass used as the backprop oracle.
fn oracle_forward(layers: &[OracleLayer], x: &[f64]) -> (Vec<f64>, f64) {
    let mut a = x.to_vec();
    let mut min_pre = f64::INFINITY;
    for (w, b, i, o, relu) in layers {
        let mut z = b.clone();
        for r in 0..*i {
            for c in 0..*o {
                z[c] += a[r] * w[r * o + c];
            }
        }
        if *relu {
            min_pre = z.iter().fold(min_pre, |m, v| m.min(v.abs()));
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        a = z;
    }
    (a, min_pre)
}

fn oracle_batch_loss(
    layers: &[OracleLayer],
    xs: &[Vec<f64>],
    ys: &[usize],
    spec: &LossSpec,
) -> (f64, f64) {
    let mut total = 0.0;
    let mut min_pre = f64::INFINITY;
    for (x, &y) in xs.iter().zip(ys) {
        let (l, m) = oracle_forward(layers, x);
        min_pre = min_pre.min(m);
        total += spec.eval_f64(&l, y).unwrap().0;
    }
    (total / xs.len() as f64, min_pre)
}

proptest! {
    // Roughly a third of draws sit near a ReLU kink and are rejected.
    #![proptest_config(ProptestConfig { max_global_rejects: 1 << 20, ..ProptestConfig::with_cases(48) })]

    #[test]
    fn backprop_matches_f64_central_differences(
        seed in 0u64..10_000,
        xs in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 4), 3),
        ys in prop::collection::vec(0usize..3, 3),
        which in 0usize..3,
    ) {
        let model = Mlp::new(4, &[5], 3, seed).unwrap();
        let spec = [LossSpec::CE, LossSpec::gce(0.7), LossSpec::sce(0.5, 1.0)][which];
        let batch = Tensor2::from_rows(&xs).unwrap();
        let cache = model.forward_train(batch).unwrap();
        let loss = batch_loss(cache.logits(), &ys, None, &spec).unwrap();
        let grads = model.backward(&cache, &loss.d_logits).unwrap();

        let to64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
        let base: Vec<_> = model
            .layers()
            .iter()
            .map(|l| (to64(l.weight()), to64(l.bias()), l.in_dim(), l.out_dim(), l.activation() == Activation::Relu))
            .collect();
        let xs64: Vec<Vec<f64>> = xs.iter().map(|r| to64(r)).collect();
        let h = 1e-3;
        let (_, margin) = oracle_batch_loss(&base, &xs64, &ys, &spec);
        // Perturbations must not cross a ReLU kink.
        prop_assume!(margin > 20.0 * h);

        for (li, g) in grads.layers.iter().enumerate() {
            for (is_bias, analytic) in [(false, &g.weight), (true, &g.bias)] {
                for (k, &a) in analytic.iter().enumerate() {
                    let eval = |delta: f64| {
                        let mut p = base.clone();
                        if is_bias { p[li].1[k] += delta } else { p[li].0[k] += delta }
                        oracle_batch_loss(&p, &xs64, &ys, &spec).0
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let a = a as f64;
                    let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-2);
                    prop_assert!(err < 1e-4, "layer {li} bias={is_bias} k={k}: fd {fd} vs {a}");
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn em_log_likelihood_never_decreases(v in prop::collection::vec(0.0f64..10.0, 2..300)) {
        prop_assume!(v.iter().any(|&x| x != v[0]));
        let g = fit_em(&v, &EmOptions::default()).unwrap();
        for w in g.log_likelihood.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{w:?}");
        }
    }

    #[test]
    fn em_is_affine_equivariant(
        v in prop::collection::vec(0.0f64..5.0, 10..200),
        scale_exp in -1i32..3,
        shift in -3.0f64..3.0,
    ) {
        prop_assume!(v.iter().any(|&x| (x - v[0]).abs() > 1e-3));
        // Power-of-two scales keep the transformed inputs exact.
        let a = 2f64.powi(scale_exp);
        let g = fit_em(&v, &EmOptions::default()).unwrap();
        let t: Vec<f64> = v.iter().map(|x| a * x + shift).collect();
        let h = fit_em(&t, &EmOptions::default()).unwrap();
        prop_assume!(g.variances.iter().all(|&s| s > 1e-6));
        for k in 0..2 {
            prop_assert!((h.means[k] - (a * g.means[k] + shift)).abs() < 1e-6 * a.max(1.0), "{g:?} {h:?}");
            prop_assert!((h.variances[k] / (a * a) - g.variances[k]).abs() < 1e-6 * g.variances[k].max(1.0));
            prop_assert!((h.weights[k] - g.weights[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn sampling_is_scale_invariant_and_monotone(
        s in prop::collection::vec(0.0f64..3.0, 1..64),
        k in -20i32..20,
        c in 0.01f64..100.0,
    ) {
        prop_assume!(s.iter().any(|&x| x > 0.0));
        let p = sampling_distribution(&s).unwrap();
        let pow2: Vec<f64> = s.iter().map(|x| x * 2f64.powi(k)).collect();
        let q = sampling_distribution(&pow2).unwrap();
        prop_assert_eq!(q.probs(), p.probs());
        // Arbitrary scales re-round every term and the running sum.
        let scaled: Vec<f64> = s.iter().map(|x| x * c).collect();
        let tol = (s.len() + 3) as f64 * f64::EPSILON;
        for (a, b) in sampling_distribution(&scaled).unwrap().probs().iter().zip(p.probs()) {
            prop_assert!((a - b).abs() <= tol * b.max(f64::MIN_POSITIVE), "{a} vs {b}");
        }
        prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if s[i] <= s[j] {
                    prop_assert!(p.probs()[i] <= p.probs()[j]);
                }
            }
        }
    }

    #[test]
    fn auc_is_antisymmetric(
        pos in prop::collection::vec(-3i32..3, 1..40),
        neg in prop::collection::vec(-3i32..3, 1..40),
    ) {
        // Small integer range forces ties.
        let pos: Vec<f64> = pos.into_iter().map(f64::from).collect();
        let neg: Vec<f64> = neg.into_iter().map(f64::from).collect();
        let a = rank_auc(&pos, &neg).unwrap();
        let flip = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        let b = rank_auc(&flip(&pos), &flip(&neg)).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12, "{a} + {b}");
        prop_assert!((rank_auc(&neg, &pos).unwrap() - b).abs() < 1e-12);
    }

    #[test]
    fn histogram_ignores_sample_order(seed in 0u64..1000, perm_seed in 0u64..1000, bins in 1usize..12) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let ds = make_toy_biased(60, 0.2, 0.2, seed).unwrap();
        let scores: Vec<f64> = (0..ds.len()).map(|i| ((i * 7919 + seed as usize) % 101) as f64 / 10.0).collect();
        let mut perm: Vec<usize> = (0..ds.len()).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
        let shuffled = ds.subset(&perm);
        let s2: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let a = score_histogram_by_quadrant(&scores, &ds, bins, "entropy").unwrap();
        let b = score_histogram_by_quadrant(&s2, &shuffled, bins, "entropy").unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn toy_conflicts_are_exact_and_containers_round_trip(
        n in 4usize..400,
        alpha in 0.0f64..0.5,
        eta in 0.0f64..0.6,
        seed in 0u64..1000,
    ) {
        let ds = make_toy_biased(n, alpha, eta, seed).unwrap();
        for class in 0..2 {
            let members = ds.samples().iter().filter(|s| s.y_true == class);
            let total = members.clone().count();
            let conflicting = members.filter(|s| !s.aligned()).count();
            prop_assert_eq!(conflicting, (alpha * total as f64).round() as usize);
        }
        let side = SideChannels::from([("scores".to_string(), (0..n).map(|i| i as f64 * 0.5).collect())]);
        let bytes = encode_container(&ds, &side);
        let (back, side_back) = decode_container(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(&side_back, &side);
        prop_assert_eq!(encode_container(&back, &side), bytes);
    }
}

#[test]
fn all_zero_scores_sample_uniformly() {
    let p = sampling_distribution(&[0.0; 7]).unwrap();
    assert!(p.is_uniform());
    assert!(p.probs().iter().all(|&x| x == p.probs()[0]));
}

#[test]
fn dense_layer_rejects_bad_shapes() {
    assert!(Dense::new(2, 2, vec![0.0; 3], vec![0.0; 2], Activation::Relu).is_err());
}
