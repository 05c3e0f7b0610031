use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tall_core::clipgen::sampling::dense_sample_plan;
use tall_core::losses::{ce_loss, sc_loss, PROB_CLAMP};
use tall_core::metrics::{roc_auc, video_score};
use tall_core::trainer::lr_schedule;

fn features() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..6, 1usize..8).prop_flat_map(|(t, d)| prop::collection::vec(prop::collection::vec(-3.0..3.0f64, d), t))
}

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
    prop::collection::vec((-5.0..5.0f64, 0usize..2), 2..60).prop_filter("both classes", |v| {
        v.iter().any(|p| p.1 == 0) && v.iter().any(|p| p.1 == 1)
    })
    .prop_map(|v| v.into_iter().unzip())
}

fn pairwise_auc(scores: &[f64], labels: &[usize]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    num / den
}

proptest! {
    #[test]
    fn sc_loss_ignores_a_shared_coordinate_permutation(f in features(), seed in any::<u64>()) {
        let d = f[0].len();
        let mut perm: Vec<usize> = (0..d).collect();
        let mut s = seed;
        for i in (1..d).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let permuted: Vec<Vec<f64>> = f.iter().map(|x| perm.iter().map(|&p| x[p]).collect()).collect();
        let a = sc_loss(&f).unwrap().value;
        let b = sc_loss(&permuted).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn sc_loss_scales_quadratically(f in features(), s in -4.0..4.0f64) {
        let scaled: Vec<Vec<f64>> = f.iter().map(|x| x.iter().map(|v| v * s).collect()).collect();
        let a = sc_loss(&f).unwrap().value;
        let b = sc_loss(&scaled).unwrap().value;
        prop_assert!((b - s * s * a).abs() <= 1e-10 * (s * s * a).max(1e-12));
    }

    #[test]
    fn ce_is_symmetric_under_flipping_prediction_and_label(p in 0.0..=1.0f64, y in 0usize..2) {
        let a = ce_loss(&[p], &[y]).unwrap();
        let b = ce_loss(&[1.0 - p], &[1 - y]).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn ce_is_smallest_at_the_label(p in 0.0..=1.0f64, y in 0usize..2) {
        let best = ce_loss(&[y as f64], &[y]).unwrap();
        prop_assert!(best <= -(1.0 - PROB_CLAMP).ln() + 1e-15);
        prop_assert!(ce_loss(&[p], &[y]).unwrap() >= best);
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps((scores, labels) in scored_labels(), a in 0.1..3.0f64, b in -2.0..2.0f64) {
        let base = roc_auc(&scores, &labels).unwrap().auc;
        let mapped: Vec<f64> = scores.iter().map(|s| (a * s + b).exp()).collect();
        prop_assert!((roc_auc(&mapped, &labels).unwrap().auc - base).abs() <= 1e-12);
        let cubed: Vec<f64> = scores.iter().map(|s| s * s * s).collect();
        prop_assert!((roc_auc(&cubed, &labels).unwrap().auc - base).abs() <= 1e-12);
    }

    #[test]
    fn auc_of_negated_scores_is_the_complement((scores, labels) in scored_labels()) {
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted.windows(2).all(|w| w[0] < w[1]));
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let sum = roc_auc(&scores, &labels).unwrap().auc + roc_auc(&neg, &labels).unwrap().auc;
        prop_assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn auc_matches_pairwise_concordance((scores, labels) in scored_labels(), round in any::<bool>()) {
        // rounding creates ties
        let scores: Vec<f64> = if round { scores.iter().map(|s| s.round()).collect() } else { scores };
        let auc = roc_auc(&scores, &labels).unwrap().auc;
        prop_assert!((auc - pairwise_auc(&scores, &labels)).abs() <= 1e-12);
    }

    #[test]
    fn video_score_ignores_clip_order(mut probs in prop::collection::vec(0.0..=1.0f64, 1..16), k in any::<usize>()) {
        let a = video_score(&probs).unwrap();
        let n = probs.len();
        probs.rotate_left(k % n);
        probs.reverse();
        prop_assert!((video_score(&probs).unwrap() - a).abs() <= 1e-15);
    }

    #[test]
    fn dense_sampling_yields_disjoint_runs_inside_segments(
        clips in 1usize..9, len in 1usize..6, extra in 0usize..40, seed in any::<u64>(),
    ) {
        let video = clips * len + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let starts = dense_sample_plan(video, clips, len, &mut rng).unwrap();
        prop_assert_eq!(starts.len(), clips);
        for (k, &s) in starts.iter().enumerate() {
            prop_assert!(s >= k * video / clips);
            prop_assert!(s + len <= (k + 1) * video / clips);
        }
        for w in starts.windows(2) {
            prop_assert!(w[0] + len <= w[1]);
        }
    }

    #[test]
    fn schedule_is_bounded_and_continuous(total in 2usize..5000, warm_frac in 0.0..1.0f64, step in 0usize..6000) {
        let warm = ((total as f64) * warm_frac) as usize;
        let lr = lr_schedule(step, total, warm, 1e-3);
        prop_assert!((0.0..=1e-3).contains(&lr));
        // one step never moves the rate by more than a warm-up increment or
        // the steepest cosine slope
        let next = lr_schedule(step + 1, total, warm, 1e-3);
        let warm_step = if warm > 0 { 1e-3 / warm as f64 } else { 0.0 };
        let cos_step = 1e-3 * std::f64::consts::PI / 2.0 / (total - warm).max(1) as f64;
        prop_assert!((next - lr).abs() <= warm_step.max(cos_step) + 1e-15);
    }
}
