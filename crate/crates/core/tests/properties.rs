mod common;

use std::sync::OnceLock;

use common::max_rel_grad_error;
use ndarray::Array2;
use prefcritic::agent::{MetricRow, RewardSource};
use prefcritic::critic::{ground_truth_label, scripted_verdict, GroundTruthRule, Label, PreferenceQuery};
use prefcritic::env::{TaskKind, TaskSpec};
use prefcritic::eval::{label_accuracy, success_rate_curve};
use prefcritic::expert::collect_mixed_quality;
use prefcritic::nn::{Activation, Mlp};
use prefcritic::reward::{bt_loss_from_returns, preference_from_returns};
use prefcritic::trajectory::{relabel_rewards, ReplayBuffer, Segment, Trajectory, Transition};
use proptest::prelude::*;

fn pool() -> &'static Vec<Vec<Trajectory>> {
    static POOL: OnceLock<Vec<Vec<Trajectory>>> = OnceLock::new();
    POOL.get_or_init(|| {
        TaskKind::ALL
            .into_iter()
            .map(|k| collect_mixed_quality(TaskSpec::new(k), 12, 32, 21))
            .collect()
    })
}

fn segment(task: usize, traj: usize, start: f64, len: usize) -> Segment {
    let t = &pool()[task][traj % pool()[task].len()];
    let s = ((t.len() - len) as f64 * start) as usize;
    t.segment(s, len).unwrap()
}

fn pair() -> impl Strategy<Value = (Segment, Segment)> {
    (0..3usize, 0..12usize, 0..12usize, 0.0..1.0f64, 0.0..1.0f64, 8..=32usize)
        .prop_map(|(k, i, j, a, b, len)| (segment(k, i, a, len), segment(k, j, b, len)))
}

fn returns() -> impl Strategy<Value = f64> {
    -64.0..64.0f64
}

fn target() -> impl Strategy<Value = [f64; 2]> {
    prop_oneof![Just([1.0, 0.0]), Just([0.0, 1.0]), Just([0.5, 0.5])]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn preference_is_complementary(r0 in returns(), r1 in returns()) {
        let s = preference_from_returns(r0, r1) + preference_from_returns(r1, r0);
        prop_assert!((s - 1.0).abs() <= 1e-12, "{s}");
    }

    #[test]
    fn preference_is_shift_invariant(r0 in returns(), r1 in returns(), c in -1.0..1.0f64, len in 1..64usize) {
        // the same per-step constant added to two equal-length segments
        let shift = c * len as f64;
        let p = preference_from_returns(r0, r1);
        let q = preference_from_returns(r0 + shift, r1 + shift);
        prop_assert!((p - q).abs() <= 1e-9, "{p} vs {q}");
    }

    #[test]
    fn preference_orders_like_returns(r0 in returns(), r1 in returns(), beta in 0.01..100.0f64) {
        let p = preference_from_returns(r0, r1);
        prop_assert_eq!(p > 0.5, r1 > r0);
        prop_assert!(p > 0.0 && p < 1.0 || (r1 - r0).abs() > 30.0);
        let scaled = preference_from_returns(beta * r0, beta * r1);
        prop_assert_eq!(scaled > 0.5, p > 0.5);
    }

    #[test]
    fn loss_is_antisymmetric_and_nonnegative(r0 in returns(), r1 in returns(), y in target()) {
        let (l, d0, d1) = bt_loss_from_returns(r0, r1, y);
        let (ls, ds0, ds1) = bt_loss_from_returns(r1, r0, [y[1], y[0]]);
        prop_assert!((l - ls).abs() <= 1e-12 * l.abs().max(1.0));
        prop_assert!((d0 - ds1).abs() <= 1e-12 && (d1 - ds0).abs() <= 1e-12);
        prop_assert!(l >= 0.0);
        // the loss never beats the entropy of the target
        let h: f64 = y.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
        prop_assert!(l >= h - 1e-12);
        prop_assert!((d0 + d1).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mlp_gradients_match_finite_differences(
        seed in 0u64..1000,
        width in 2usize..8,
        tanh_hidden in any::<bool>(),
        // away from zero: with zero biases x = 0 sits on the relu kink
        x in prop::collection::vec((0.1..1.0f64, any::<bool>()).prop_map(|(m, neg)| if neg { -m } else { m }), 6),
        y in prop::collection::vec(-1.0..1.0f64, 2),
    ) {
        let hidden = if tanh_hidden { Activation::Tanh } else { Activation::Relu };
        let net = Mlp::new(&[3, width, 2], hidden, Activation::Tanh, seed).unwrap();
        let xs = Array2::from_shape_vec((2, 3), x).unwrap();
        let loss = |n: &Mlp| -> f64 {
            let out = n.forward_batch(xs.view()).unwrap();
            out.indexed_iter().map(|((r, _), o)| 0.5 * (o - y[r]).powi(2) + o).sum::<f64>()
        };
        let cache = net.forward_cached(xs.view()).unwrap();
        let out = cache.output();
        let dy = Array2::from_shape_fn((2, 2), |(r, c)| out[[r, c]] - y[r] + 1.0);
        let (grads, _) = net.backward_cached(&cache, dy.view()).unwrap();
        let err = max_rel_grad_error(&net, &grads, loss);
        prop_assert!(err < 1e-4, "relative error {err:e}");
    }

    #[test]
    fn tanh_output_is_bounded(seed in 0u64..1000, x in prop::collection::vec(-1e6..1e6f64, 4)) {
        let net = Mlp::new(&[4, 16, 1], Activation::Relu, Activation::Tanh, seed).unwrap();
        let y = net.forward(&x).unwrap()[0];
        prop_assert!((-1.0..=1.0).contains(&y));
    }

    #[test]
    fn scripted_critic_is_antisymmetric_and_consistent((a, b) in pair(), eps in 0.0..0.2f64) {
        let rule = GroundTruthRule { tie_epsilon: eps };
        let fwd = PreferenceQuery::new("f", a.clone(), b.clone()).unwrap();
        let rev = PreferenceQuery::new("r", b.clone(), a.clone()).unwrap();
        let vf = scripted_verdict(&fwd, &rule).unwrap();
        let vr = scripted_verdict(&rev, &rule).unwrap();
        prop_assert_eq!(vr.label, vf.label.swapped());
        prop_assert_eq!(vf.label, ground_truth_label(&a, &b, &rule).unwrap().label);
        prop_assert_eq!(scripted_verdict(&fwd, &rule).unwrap().label, vf.label);
    }

    #[test]
    fn ties_only_grow_with_epsilon((a, b) in pair(), lo in 0.0..0.2f64, extra in 0.0..0.2f64) {
        let small = ground_truth_label(&a, &b, &GroundTruthRule { tie_epsilon: lo }).unwrap().label;
        let large = ground_truth_label(&a, &b, &GroundTruthRule { tie_epsilon: lo + extra }).unwrap().label;
        if small == Label::Tie {
            prop_assert_eq!(large, Label::Tie);
        }
    }

    #[test]
    fn replay_keeps_the_newest_in_order(cap in 1usize..40, n in 0usize..120) {
        let base = pool()[0][0].transitions[0].clone();
        let mut buf = ReplayBuffer::new(cap);
        for i in 0..n {
            buf.push(Transition { reward: i as f64, ..base.clone() });
        }
        let kept: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        let want: Vec<f64> = (n.saturating_sub(cap)..n).map(|i| i as f64).collect();
        prop_assert_eq!(kept, want);
        prop_assert_eq!(buf.len(), n.min(cap));
    }

    #[test]
    fn relabeling_is_idempotent(cap in 1usize..40, n in 0usize..80, w in -2.0..2.0f64) {
        let traj = &pool()[1][3];
        let mut buf = ReplayBuffer::new(cap);
        for t in traj.transitions.iter().cycle().take(n) {
            buf.push(t.clone());
        }
        let f = |o: &prefcritic::env::Observation, a: &[f64; 2]| w * o.0[0] - a[1];
        relabel_rewards(&mut buf, f).unwrap();
        let once: Vec<(f64, f64)> = buf.iter().map(|t| (t.reward, t.env_reward)).collect();
        relabel_rewards(&mut buf, f).unwrap();
        let twice: Vec<(f64, f64)> = buf.iter().map(|t| (t.reward, t.env_reward)).collect();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn curves_ignore_row_order(
        rates in prop::collection::vec(0.0..=1.0f64, 12),
        perm in Just((0..12usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        // 2 sources x 2 seeds x 3 steps
        let rows: Vec<MetricRow> = (0..12)
            .map(|i| MetricRow {
                step: (i % 3) * 100,
                seed: ((i / 3) % 2) as u64,
                success_rate: rates[i],
                mean_return: 0.0,
                reward_source: if i < 6 { RewardSource::RewardModel } else { RewardSource::EnvSparse },
            })
            .collect();
        let shuffled: Vec<MetricRow> = perm.iter().map(|&i| rows[i].clone()).collect();
        prop_assert_eq!(success_rate_curve(&rows).unwrap(), success_rate_curve(&shuffled).unwrap());
    }

    #[test]
    fn accuracy_is_a_fraction(labels in prop::collection::vec((0u8..3, 0u8..3), 1..50)) {
        let pred: Vec<Label> = labels.iter().map(|p| Label::try_from(p.0).unwrap()).collect();
        let truth: Vec<Label> = labels.iter().map(|p| Label::try_from(p.1).unwrap()).collect();
        if let Ok(r) = label_accuracy("p", &pred, &truth) {
            prop_assert!((0.0..=1.0).contains(&r.accuracy));
            prop_assert!(r.correct + r.excluded <= r.total);
            prop_assert_eq!(r.total, labels.len());
        }
    }
}
