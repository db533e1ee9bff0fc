//! Metric implementations checked against independent brute-force oracles on
//! random inputs, plus Monte-Carlo sanity targets.

use icubench::metrics::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// O(n^2) pairwise concordance with half credit for ties.
fn auc_roc_brute(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, (&si, &li)) in scores.iter().zip(labels).enumerate() {
        for (&sj, &lj) in scores[i + 1..].iter().zip(&labels[i + 1..]) {
            let (pos, neg) = match (li, lj) {
                (1, 0) => (si, sj),
                (0, 1) => (sj, si),
                _ => continue,
            };
            den += 1.0;
            if pos > neg {
                num += 1.0;
            } else if pos == neg {
                num += 0.5;
            }
        }
    }
    num / den
}

/// Average precision by naive rescan at every distinct threshold.
fn auc_pr_brute(scores: &[f64], labels: &[u8]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for &t in &thresholds {
        let mut tp = 0.0;
        let mut predicted_pos = 0.0;
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= t {
                predicted_pos += 1.0;
                if l == 1 {
                    tp += 1.0;
                }
            }
        }
        let recall = tp / n_pos;
        let precision = tp / predicted_pos;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Weighted kappa straight from the definition, separate loop structure.
fn kappa_brute(pred: &[u8], truth: &[u8], c: usize) -> f64 {
    let n = pred.len() as f64;
    let mut disagree_obs = 0.0;
    for (&p, &t) in pred.iter().zip(truth) {
        disagree_obs += (p as f64 - t as f64).abs() / (c as f64 - 1.0);
    }
    disagree_obs /= n;
    let mut disagree_exp = 0.0;
    for i in 0..c {
        for j in 0..c {
            let ti = truth.iter().filter(|&&t| t as usize == i).count() as f64 / n;
            let pj = pred.iter().filter(|&&p| p as usize == j).count() as f64 / n;
            disagree_exp += (i as f64 - j as f64).abs() / (c as f64 - 1.0) * ti * pj;
        }
    }
    if disagree_exp == 0.0 {
        1.0
    } else {
        1.0 - disagree_obs / disagree_exp
    }
}

fn random_binary(rng: &mut ChaCha8Rng, n: usize, tie_prone: bool) -> (Vec<f64>, Vec<u8>) {
    loop {
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if tie_prone {
                    (rng.gen_range(0..10) as f64) / 10.0
                } else {
                    rng.gen::<f64>()
                }
            })
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen::<f64>() < 0.3)).collect();
        let pos = labels.iter().filter(|&&l| l == 1).count();
        if pos > 0 && pos < n {
            return (scores, labels);
        }
    }
}

#[test]
fn auc_roc_matches_brute_force_on_200_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let n = rng.gen_range(5..=500);
        let (scores, labels) = random_binary(&mut rng, n, case % 2 == 0);
        let fast = auc_roc(&scores, &labels).unwrap();
        let brute = auc_roc_brute(&scores, &labels);
        assert!(
            (fast - brute).abs() < 1e-12,
            "case {case}: {fast} vs {brute}"
        );
    }
}

#[test]
fn auc_pr_matches_brute_force_on_200_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    for case in 0..200 {
        let n = rng.gen_range(5..=500);
        let (scores, labels) = random_binary(&mut rng, n, case % 2 == 1);
        let fast = auc_pr(&scores, &labels).unwrap();
        let brute = auc_pr_brute(&scores, &labels);
        assert!(
            (fast - brute).abs() < 1e-12,
            "case {case}: {fast} vs {brute}"
        );
    }
}

#[test]
fn kappa_matches_brute_force_on_200_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(31337);
    for case in 0..200 {
        let n = rng.gen_range(2..=500);
        let c = rng.gen_range(2..=10usize);
        let pred: Vec<u8> = (0..n).map(|_| rng.gen_range(0..c) as u8).collect();
        let truth: Vec<u8> = (0..n).map(|_| rng.gen_range(0..c) as u8).collect();
        let fast = linear_kappa(&pred, &truth, c).unwrap();
        let brute = kappa_brute(&pred, &truth, c);
        assert!(
            (fast - brute).abs() < 1e-12,
            "case {case}: {fast} vs {brute}"
        );
    }
}

#[test]
fn binary_linear_kappa_equals_unweighted_kappa() {
    // With C=2 the linear weights are exactly the 0/1 disagreement weights.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..50 {
        let n = rng.gen_range(4..200);
        let pred: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
        let truth: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
        let lin = linear_kappa(&pred, &truth, 2).unwrap();
        // Unweighted Cohen's kappa.
        let nf = n as f64;
        let po = pred
            .iter()
            .zip(&truth)
            .filter(|(p, t)| p == t)
            .count() as f64
            / nf;
        let p1 = pred.iter().filter(|&&p| p == 1).count() as f64 / nf;
        let t1 = truth.iter().filter(|&&t| t == 1).count() as f64 / nf;
        let pe = p1 * t1 + (1.0 - p1) * (1.0 - t1);
        if pe == 1.0 {
            assert_eq!(lin, 1.0);
        } else {
            let unweighted = (po - pe) / (1.0 - pe);
            assert!((lin - unweighted).abs() < 1e-12);
        }
    }
}

#[test]
fn multilabel_auc_matches_brute_force_on_random_5_label_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    for case in 0..200 {
        let n = rng.gen_range(10..=120);
        let k = 5;
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            scores.push((0..k).map(|_| rng.gen::<f64>()).collect::<Vec<_>>());
            labels.push(
                (0..k)
                    .map(|_| u8::from(rng.gen::<f64>() < 0.4))
                    .collect::<Vec<u8>>(),
            );
        }
        let Ok(res) = multilabel_auc(&scores, &labels) else {
            continue; // every label single-class; legitimately undefined
        };
        let mut per = Vec::new();
        for j in 0..k {
            let s: Vec<f64> = scores.iter().map(|r| r[j]).collect();
            let l: Vec<u8> = labels.iter().map(|r| r[j]).collect();
            let pos = l.iter().filter(|&&x| x == 1).count();
            if pos == 0 || pos == l.len() {
                assert!(res.per_label[j].is_none());
                assert!(res.excluded.contains(&j));
            } else {
                per.push(auc_roc_brute(&s, &l));
                assert!((res.per_label[j].unwrap() - *per.last().unwrap()).abs() < 1e-12);
            }
        }
        let macro_brute = per.iter().sum::<f64>() / per.len() as f64;
        assert!((res.macro_auc - macro_brute).abs() < 1e-12, "case {case}");
        let pooled_s: Vec<f64> = scores.iter().flatten().copied().collect();
        let pooled_l: Vec<u8> = labels.iter().flatten().copied().collect();
        let micro_brute = auc_roc_brute(&pooled_s, &pooled_l);
        assert!((res.micro_auc - micro_brute).abs() < 1e-12, "case {case}");
    }
}

#[test]
fn identical_label_copies_make_micro_equal_per_label() {
    let scores_col = vec![0.1, 0.7, 0.4, 0.9, 0.2];
    let labels_col = vec![0u8, 1, 0, 1, 0];
    let scores: Vec<Vec<f64>> = scores_col.iter().map(|&s| vec![s; 3]).collect();
    let labels: Vec<Vec<u8>> = labels_col.iter().map(|&l| vec![l; 3]).collect();
    let res = multilabel_auc(&scores, &labels).unwrap();
    let single = auc_roc(&scores_col, &labels_col).unwrap();
    assert!((res.micro_auc - single).abs() < 1e-12);
    assert!((res.macro_auc - single).abs() < 1e-12);
}

#[test]
fn auc_invariant_under_monotone_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (scores, labels) = random_binary(&mut rng, 300, false);
    let base = auc_roc(&scores, &labels).unwrap();
    let squashed: Vec<f64> = scores.iter().map(|&s| (5.0 * s - 2.0).tanh()).collect();
    let transformed = auc_roc(&squashed, &labels).unwrap();
    assert!((base - transformed).abs() < 1e-12);
}

#[test]
fn auc_pr_approaches_prevalence_on_random_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let n = 10_000;
    let prevalence = 0.25;
    let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let labels: Vec<u8> = (0..n)
        .map(|_| u8::from(rng.gen::<f64>() < prevalence))
        .collect();
    let ap = auc_pr(&scores, &labels).unwrap();
    assert!(
        (ap - prevalence).abs() < 0.02,
        "AP {ap} far from prevalence {prevalence}"
    );
}

#[test]
fn pooled_auc_differs_from_mean_of_per_stay_aucs() {
    // Two stays with opposing score scales: perfect within-stay ranking but
    // poor pooled ranking.
    let stay_a = vec![(0.8, 0u8), (0.9, 1u8)];
    let stay_b = vec![(0.1, 0u8), (0.2, 1u8)];
    let per_stay_mean = 0.5
        * (auc_roc(&[0.8, 0.9], &[0, 1]).unwrap() + auc_roc(&[0.1, 0.2], &[0, 1]).unwrap());
    let (s, l) = micro_pool(&[(1, stay_a), (2, stay_b)]);
    let pooled = auc_roc(&s, &l).unwrap();
    assert_eq!(per_stay_mean, 1.0);
    assert!((pooled - 0.75).abs() < 1e-12); // one of four cross-stay pairs discordant
    assert!(pooled != per_stay_mean);
}

#[test]
fn bootstrap_constant_metric_collapses_to_point() {
    let ci = bootstrap_ci(50, 200, 9, |_| Some(0.42)).unwrap();
    assert_eq!(ci.point, 0.42);
    assert_eq!(ci.lower, 0.42);
    assert_eq!(ci.upper, 0.42);
    assert_eq!(ci.redraws, 0);
}

#[test]
fn bootstrap_reproducible_and_ordered() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let (scores, labels) = random_binary(&mut rng, 200, false);
    let run = || {
        bootstrap_ci(scores.len(), 300, 12345, |idx| {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            auc_roc(&s, &l).ok()
        })
        .unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.lower.to_bits(), b.lower.to_bits());
    assert_eq!(a.upper.to_bits(), b.upper.to_bits());
    assert!(a.lower <= a.point && a.point <= a.upper);
}

#[test]
fn bootstrap_width_shrinks_like_inverse_sqrt_n() {
    let width_at = |n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + n as u64);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let labels: Vec<u8> = scores
            .iter()
            .map(|&s| u8::from(rng.gen::<f64>() < 0.3 + 0.4 * s))
            .collect();
        let ci = bootstrap_ci(n, 1000, 7, |idx| {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            auc_roc(&s, &l).ok()
        })
        .unwrap();
        ci.upper - ci.lower
    };
    let w1 = width_at(400);
    let w4 = width_at(1600);
    let ratio = w1 / w4;
    assert!(
        (1.5..=2.5).contains(&ratio),
        "width ratio {ratio} not near 2"
    );
}

#[test]
fn bootstrap_redraws_single_class_resamples() {
    // One positive among many negatives: some resamples miss the positive
    // and must be redrawn.
    let scores: Vec<f64> = (0..12).map(|i| i as f64 / 12.0).collect();
    let mut labels = [0u8; 12];
    labels[11] = 1;
    let ci = bootstrap_ci(12, 500, 3, |idx| {
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        auc_roc(&s, &l).ok()
    })
    .unwrap();
    assert!(ci.redraws > 0);
    assert!(ci.lower <= ci.point && ci.point <= ci.upper);
}

#[test]
fn calibration_on_bernoulli_scores_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(616);
    let n = 10_000;
    let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let labels: Vec<u8> = scores
        .iter()
        .map(|&s| u8::from(rng.gen::<f64>() < s))
        .collect();
    let (bins, merged) = calibration_curve(&scores, &labels, 10).unwrap();
    assert_eq!(merged, 0);
    assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), n);
    let max_gap = bins
        .iter()
        .map(|b| (b.mean_predicted - b.observed_rate).abs())
        .fold(0.0, f64::max);
    assert!(max_gap < 0.05, "max calibration gap {max_gap}");
}

#[test]
fn extended_los_derived_score_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut dists = Vec::new();
    let mut los = Vec::new();
    for i in 0..200 {
        if i % 13 == 0 {
            dists.push(None);
        } else {
            let mut d: Vec<f64> = (0..10).map(|_| rng.gen::<f64>()).collect();
            let z: f64 = d.iter().sum();
            d.iter_mut().for_each(|x| *x /= z);
            dists.push(Some(d));
        }
        los.push(rng.gen_range(10.0..400.0));
    }
    let (auc, skipped) = extended_los_score(&dists, &los).unwrap();
    assert_eq!(skipped, 200usize.div_ceil(13));
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (d, &l) in dists.iter().zip(&los) {
        if let Some(d) = d {
            scores.push(d[8] + d[9]);
            labels.push(u8::from(l >= 168.0));
        }
    }
    let brute = auc_roc_brute(&scores, &labels);
    assert!((auc - brute).abs() < 1e-12);
}

#[test]
fn extended_los_uniform_distributions_score_half() {
    let dists: Vec<Option<Vec<f64>>> = (0..50).map(|_| Some(vec![0.1; 10])).collect();
    let los: Vec<f64> = (0..50).map(|i| if i % 2 == 0 { 60.0 } else { 300.0 }).collect();
    let (auc, skipped) = extended_los_score(&dists, &los).unwrap();
    assert_eq!(auc, 0.5);
    assert_eq!(skipped, 0);
}

#[test]
fn independent_columns_have_near_zero_correlation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    let n = 10_000;
    let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let r = pearson(&x, &y).unwrap();
    assert!(r.abs() < 0.05, "correlation {r} too large");
}
