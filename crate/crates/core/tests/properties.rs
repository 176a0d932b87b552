use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mdnet::eval::{evaluate, success_curve_and_auc, EvalGrid};
use mdnet::geometry::BoundingBox;
use mdnet::regression::{decode, encode};
use mdnet::tensor::ops::{dropout, out_extent, positive_scores, softmax};
use mdnet::tensor::{sgd_step, ParamGroup, Tensor};
use mdnet::tracker::{top_k_stable, FrameMemory};

fn boxes() -> impl Strategy<Value = BoundingBox> {
    (-50.0..150.0f64, -50.0..150.0f64, 0.5..80.0f64, 0.5..80.0f64)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, w, h).unwrap())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in boxes(), b in boxes()) {
        let ab = a.iou(&b);
        prop_assert_eq!(ab, b.iou(&a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!(close(a.iou(&a), 1.0, 1e-12));
    }

    #[test]
    fn iou_invariant_under_similarity(
        a in boxes(), b in boxes(),
        dx in -100.0..100.0f64, dy in -100.0..100.0f64, k in 0.1..10.0f64,
    ) {
        let map = |r: &BoundingBox| BoundingBox::new(k * r.x + dx, k * r.y + dy, k * r.w, k * r.h).unwrap();
        prop_assert!(close(a.iou(&b), map(&a).iou(&map(&b)), 1e-9));
    }

    #[test]
    fn deltas_round_trip(target in boxes(), proposal in boxes()) {
        let back = decode(&proposal, &encode(&target, &proposal));
        for (x, y) in [(back.x, target.x), (back.y, target.y), (back.w, target.w), (back.h, target.h)] {
            prop_assert!(close(x, y, 1e-9), "{x} vs {y}");
        }
    }

    #[test]
    fn curves_are_monotone_and_bounded(pairs in prop::collection::vec((boxes(), boxes()), 1..30)) {
        let (r, g): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let e = evaluate(&r, &g, &EvalGrid::default()).unwrap();
        prop_assert!(e.precision.values.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(e.success.values.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(e.precision.values.iter().chain(&e.success.values).all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((0.0..=1.0).contains(&e.auc));
    }

    #[test]
    fn auc_ignores_frame_order(pairs in prop::collection::vec((boxes(), boxes()), 1..30), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let auc = |p: &[(BoundingBox, BoundingBox)]| {
            let (r, g): (Vec<_>, Vec<_>) = p.iter().copied().unzip();
            success_curve_and_auc(&r, &g, &EvalGrid::default()).unwrap().1
        };
        prop_assert!(close(auc(&pairs), auc(&shuffled), 1e-12));
    }

    #[test]
    fn extent_formula(input in 1usize..200, kernel in 1usize..12, stride in 1usize..5, pad in 0usize..4) {
        match out_extent(input, kernel, stride, pad) {
            Ok(n) => prop_assert_eq!(n, (input + 2 * pad - kernel) / stride + 1),
            Err(_) => prop_assert!(input + 2 * pad < kernel),
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(logits in prop::collection::vec(-40.0..40.0f64, 2..40)) {
        let n = logits.len() / 2 * 2;
        let t = Tensor::new(&[n / 2, 2], logits[..n].to_vec()).unwrap();
        let p = softmax(&t).unwrap();
        for row in p.data().chunks(2) {
            prop_assert!(close(row[0] + row[1], 1.0, 1e-12));
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let f = positive_scores(&t).unwrap();
        prop_assert!(f.iter().zip(p.data().chunks(2)).all(|(a, r)| *a == r[0]));
    }

    #[test]
    fn plain_sgd_is_gradient_step(
        w in prop::collection::vec(-5.0..5.0f64, 1..20),
        lr in 1e-4..1.0f64,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: Vec<f64> = w.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut weights = Tensor::new(&[1, w.len()], w.clone()).unwrap();
        weights.require_grad();
        weights.grad_mut().unwrap().copy_from_slice(&g);
        let mut bias = Tensor::zeros(&[1]);
        bias.require_grad();
        let mut group = ParamGroup::new("p", weights, bias).unwrap();
        sgd_step(&mut [&mut group], lr, 0.0, 0.0).unwrap();
        for ((p, w0), g0) in group.weights.data().iter().zip(&w).zip(&g) {
            prop_assert!(close(*p, w0 - lr * g0, 1e-12));
        }
    }

    #[test]
    fn dropout_is_identity_in_eval_mode(x in prop::collection::vec(-3.0..3.0f64, 1..50), rate in 0.0..0.9f64) {
        let t = Tensor::new(&[1, x.len()], x.clone()).unwrap();
        let (y, _) = dropout(&t, rate, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        prop_assert_eq!(y.data(), &x[..]);
    }

    #[test]
    fn top_k_keeps_the_largest(scores in prop::collection::vec(0.0..1.0f32, 1..200), k in 0usize..250) {
        let chosen = top_k_stable(&scores, k);
        prop_assert_eq!(chosen.len(), k.min(scores.len()));
        let mut is_chosen = vec![false; scores.len()];
        for &i in &chosen {
            is_chosen[i] = true;
        }
        let min_in = chosen.iter().map(|&i| scores[i]).fold(f32::INFINITY, f32::min);
        let max_out = (0..scores.len()).filter(|&i| !is_chosen[i]).map(|i| scores[i]).fold(f32::NEG_INFINITY, f32::max);
        prop_assert!(chosen.is_empty() || min_in >= max_out);
    }

    #[test]
    fn frame_sets_stay_bounded_and_nested(tau_s in 1usize..10, extra in 0usize..20, successes in prop::collection::vec(any::<bool>(), 0..120)) {
        let tau_l = tau_s + extra;
        let mut m = FrameMemory::new(tau_s, tau_l, 1);
        let mut seen = vec![1];
        for (i, ok) in successes.into_iter().enumerate() {
            if ok {
                let t = i + 2;
                m.push(t);
                seen.push(t);
            }
            prop_assert!(m.short_term().len() <= tau_s && m.long_term().len() <= tau_l);
            prop_assert!(m.short_term().is_subset(m.long_term()));
            let newest: Vec<usize> = seen.iter().rev().take(tau_s).rev().copied().collect();
            prop_assert_eq!(m.short_term().iter().copied().collect::<Vec<_>>(), newest);
        }
    }
}
