//! Evaluation machinery: ranking metrics, ordinal agreement, multilabel
//! averaging, bootstrap confidence intervals, calibration and label
//! correlations.
//!
//! Conventions pinned here and relied on by the test oracles: AUC-ROC counts
//! tied score pairs as half-concordant (Mann-Whitney identity); AUC-PR is
//! average precision without interpolation, processing tied scores as one
//! threshold group; weighted kappa uses linear weights `|i-j|/(C-1)`.

use crate::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

fn check_binary(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            message: format!(
                "scores and labels must align: {} vs {}",
                scores.len(),
                labels.len()
            ),
        });
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::domain(format!("non-finite score {s}")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::domain(format!("binary label must be 0 or 1, got {l}")));
    }
    Ok(())
}

/// Area under the ROC curve: the probability a random positive outscores a
/// random negative, ties counted one half.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_binary(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric {
            message: "AUC-ROC needs both classes present".to_string(),
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Midranks: tied scores share the average of their 1-based rank range.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            if labels[k] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Area under the precision-recall curve as average precision:
/// `sum_k (R_k - R_{k-1}) * P_k` over descending-score threshold groups.
pub fn auc_pr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_binary(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return Err(Error::Metric {
            message: "AUC-PR needs at least one positive".to_string(),
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..j] {
            if labels[k] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// Mean absolute difference between predictions and targets.
pub fn mad(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::Shape {
            message: format!(
                "predictions and targets must align: {} vs {}",
                predictions.len(),
                targets.len()
            ),
        });
    }
    if predictions.is_empty() {
        return Err(Error::Metric {
            message: "MAD of an empty set".to_string(),
        });
    }
    let sum: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(sum / predictions.len() as f64)
}

/// Cohen's kappa with linear weights `w_ij = |i-j|/(C-1)`:
/// `1 - sum(w*O) / sum(w*E)` with expected counts from marginal products.
/// A degenerate expected disagreement of zero (all mass on one identical
/// class on both sides) is defined as perfect agreement, 1.0.
pub fn linear_kappa(pred: &[u8], truth: &[u8], classes: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape {
            message: format!("pred and truth must align: {} vs {}", pred.len(), truth.len()),
        });
    }
    if pred.is_empty() {
        return Err(Error::Metric {
            message: "kappa of an empty set".to_string(),
        });
    }
    if let Some(&v) = pred.iter().chain(truth).find(|&&v| v as usize >= classes) {
        return Err(Error::domain(format!(
            "class index {v} out of range 0..{classes}"
        )));
    }
    let n = pred.len() as f64;
    let mut observed = vec![vec![0.0f64; classes]; classes];
    let mut truth_marginal = vec![0.0f64; classes];
    let mut pred_marginal = vec![0.0f64; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        observed[t as usize][p as usize] += 1.0;
        truth_marginal[t as usize] += 1.0;
        pred_marginal[p as usize] += 1.0;
    }
    let weight = |i: usize, j: usize| (i as f64 - j as f64).abs() / (classes as f64 - 1.0);
    let mut wo = 0.0;
    let mut we = 0.0;
    for i in 0..classes {
        for j in 0..classes {
            let w = weight(i, j);
            wo += w * observed[i][j];
            we += w * truth_marginal[i] * pred_marginal[j] / n;
        }
    }
    if we == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - wo / we)
}

/// Macro/micro multilabel AUC-ROC. Labels with a single class are excluded
/// from the macro average and reported.
#[derive(Debug, Clone)]
pub struct MultilabelAuc {
    pub macro_auc: f64,
    pub micro_auc: f64,
    pub per_label: Vec<Option<f64>>,
    /// Label indices excluded because only one class was present.
    pub excluded: Vec<usize>,
}

pub fn multilabel_auc(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<MultilabelAuc> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Shape {
            message: format!(
                "need equal nonempty score/label row counts, got {} vs {}",
                scores.len(),
                labels.len()
            ),
        });
    }
    let k = scores[0].len();
    if scores.iter().any(|r| r.len() != k) || labels.iter().any(|r| r.len() != k) {
        return Err(Error::Shape {
            message: "ragged multilabel rows".to_string(),
        });
    }
    let mut per_label = Vec::with_capacity(k);
    let mut excluded = Vec::new();
    let mut macro_sum = 0.0;
    let mut macro_n = 0usize;
    for j in 0..k {
        let col_scores: Vec<f64> = scores.iter().map(|r| r[j]).collect();
        let col_labels: Vec<u8> = labels.iter().map(|r| r[j]).collect();
        match auc_roc(&col_scores, &col_labels) {
            Ok(a) => {
                per_label.push(Some(a));
                macro_sum += a;
                macro_n += 1;
            }
            Err(Error::Metric { .. }) => {
                per_label.push(None);
                excluded.push(j);
            }
            Err(e) => return Err(e),
        }
    }
    if macro_n == 0 {
        return Err(Error::Metric {
            message: "every label was single-class".to_string(),
        });
    }
    let pooled_scores: Vec<f64> = scores.iter().flatten().copied().collect();
    let pooled_labels: Vec<u8> = labels.iter().flatten().copied().collect();
    Ok(MultilabelAuc {
        macro_auc: macro_sum / macro_n as f64,
        micro_auc: auc_roc(&pooled_scores, &pooled_labels)?,
        per_label,
        excluded,
    })
}

/// Pool per-stay prediction groups into one scored set, regardless of stay.
pub fn micro_pool(groups: &[(i64, Vec<(f64, u8)>)]) -> (Vec<f64>, Vec<u8>) {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (_, items) in groups {
        for &(s, l) in items {
            scores.push(s);
            labels.push(l);
        }
    }
    (scores, labels)
}

/// Percentile bootstrap confidence interval.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CiResult {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub resamples: usize,
    /// Resamples redrawn because the metric was undefined on them.
    pub redraws: usize,
    pub seed: u64,
}

const MAX_REDRAWS_PER_RESAMPLE: usize = 100;

/// Bootstrap over explicit resampling units (single instances, or all
/// instances of one stay). `metric` receives item indices with multiplicity
/// and returns `None` when undefined on that resample, which triggers a
/// redraw.
pub fn bootstrap_ci_grouped<F>(
    units: &[Vec<usize>],
    resamples: usize,
    seed: u64,
    metric: F,
) -> Result<CiResult>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    if units.is_empty() {
        return Err(Error::Metric {
            message: "bootstrap over an empty set".to_string(),
        });
    }
    let all: Vec<usize> = units.iter().flatten().copied().collect();
    let point = metric(&all).ok_or_else(|| Error::Metric {
        message: "metric undefined on the full sample".to_string(),
    })?;

    // Each resample owns an independent substream, so results do not depend
    // on evaluation order or worker count.
    let draws: Vec<Result<(f64, usize)>> = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64 + 1);
            let mut redraws = 0;
            loop {
                let mut items = Vec::with_capacity(all.len());
                for _ in 0..units.len() {
                    let u = rng.gen_range(0..units.len());
                    items.extend_from_slice(&units[u]);
                }
                if let Some(v) = metric(&items) {
                    return Ok((v, redraws));
                }
                redraws += 1;
                if redraws > MAX_REDRAWS_PER_RESAMPLE {
                    return Err(Error::Metric {
                        message: format!(
                            "metric undefined after {MAX_REDRAWS_PER_RESAMPLE} redraws of one resample"
                        ),
                    });
                }
            }
        })
        .collect();

    let mut values = Vec::with_capacity(resamples);
    let mut redraws = 0;
    for d in draws {
        let (v, r) = d?;
        values.push(v);
        redraws += r;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Percentile method; the point estimate is clamped into the interval so
    // lower <= point <= upper holds even on badly skewed resample spreads.
    let lower = quantile(&values, 0.025).min(point);
    let upper = quantile(&values, 0.975).max(point);
    Ok(CiResult {
        point,
        lower,
        upper,
        resamples,
        redraws,
        seed,
    })
}

/// Instance-level bootstrap: every item is its own resampling unit.
pub fn bootstrap_ci<F>(n_items: usize, resamples: usize, seed: u64, metric: F) -> Result<CiResult>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    let units: Vec<Vec<usize>> = (0..n_items).map(|i| vec![i]).collect();
    bootstrap_ci_grouped(&units, resamples, seed, metric)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// One calibration bin: mean predicted probability vs observed event rate.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CalibrationBin {
    pub mean_predicted: f64,
    pub observed_rate: f64,
    pub count: usize,
}

/// Quantile-binned reliability curve. Returns the bins and the number of
/// requested bins lost to merging (adjacent bins sharing a tied boundary
/// score collapse into one).
pub fn calibration_curve(
    scores: &[f64],
    labels: &[u8],
    bins: usize,
) -> Result<(Vec<CalibrationBin>, usize)> {
    check_binary(scores, labels)?;
    if scores.is_empty() || bins == 0 {
        return Err(Error::Metric {
            message: "calibration needs items and at least one bin".to_string(),
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    let n = idx.len();
    // Rank-based edges, then push each edge past any tie straddling it.
    let mut edges = vec![0usize];
    for b in 1..bins {
        let mut e = b * n / bins;
        while e > 0 && e < n && scores[idx[e]] == scores[idx[e - 1]] {
            e += 1;
        }
        let last = *edges.last().unwrap();
        if e > last && e < n {
            edges.push(e);
        }
    }
    edges.push(n);
    let merged = bins - (edges.len() - 1);
    let mut out = Vec::new();
    for w in edges.windows(2) {
        let slice = &idx[w[0]..w[1]];
        let count = slice.len();
        let mean_predicted = slice.iter().map(|&i| scores[i]).sum::<f64>() / count as f64;
        let observed_rate =
            slice.iter().filter(|&&i| labels[i] == 1).count() as f64 / count as f64;
        out.push(CalibrationBin {
            mean_predicted,
            observed_rate,
            count,
        });
    }
    Ok((out, merged))
}

/// AUC-ROC of the derived "extended stay" score: the summed probability of
/// the two longest-stay buckets at the hour-24 prediction, against the label
/// that the total stay reached one week. Stays without an hour-24
/// distribution are skipped and counted.
pub fn extended_los_score(
    dists_at_24h: &[Option<Vec<f64>>],
    los_hours: &[f64],
) -> Result<(f64, usize)> {
    if dists_at_24h.len() != los_hours.len() {
        return Err(Error::Shape {
            message: format!(
                "distributions and targets must align: {} vs {}",
                dists_at_24h.len(),
                los_hours.len()
            ),
        });
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut skipped = 0;
    for (dist, &los) in dists_at_24h.iter().zip(los_hours) {
        match dist {
            Some(d) => {
                if d.len() != crate::types::N_LOS_BUCKETS {
                    return Err(Error::Shape {
                        message: format!("bucket distribution of width {}", d.len()),
                    });
                }
                scores.push(d[8] + d[9]);
                labels.push(u8::from(los >= 7.0 * 24.0));
            }
            None => skipped += 1,
        }
    }
    Ok((auc_roc(&scores, &labels)?, skipped))
}

/// Per-stay targets across all four tasks, for label-correlation analysis.
#[derive(Debug, Clone)]
pub struct TaskLabelRow {
    pub mortality: u8,
    pub any_decomp: u8,
    pub mean_remaining_los_hours: f64,
    pub pheno: Vec<u8>,
}

/// Pairwise Pearson correlation matrix over task labels; on {0,1} columns
/// this coincides with the phi coefficient. Zero-variance columns yield
/// missing entries.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl CorrelationMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for n in &self.names {
            out.push(',');
            out.push_str(&csv_quote(n));
        }
        out.push('\n');
        for (i, row) in self.values.iter().enumerate() {
            out.push_str(&csv_quote(&self.names[i]));
            for v in row {
                out.push(',');
                if let Some(v) = v {
                    out.push_str(&format!("{v}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

fn csv_quote(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn task_label_correlations(
    rows: &[TaskLabelRow],
    pheno_names: &[String],
) -> Result<CorrelationMatrix> {
    if rows.is_empty() {
        return Err(Error::Metric {
            message: "correlations of an empty set".to_string(),
        });
    }
    let k_pheno = pheno_names.len();
    if rows.iter().any(|r| r.pheno.len() != k_pheno) {
        return Err(Error::Shape {
            message: "phenotype width differs from name list".to_string(),
        });
    }
    let mut names = vec![
        "mortality".to_string(),
        "any_decomp".to_string(),
        "mean_remaining_los".to_string(),
    ];
    names.extend(pheno_names.iter().cloned());
    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(rows.len()); names.len()];
    for r in rows {
        columns[0].push(r.mortality as f64);
        columns[1].push(r.any_decomp as f64);
        columns[2].push(r.mean_remaining_los_hours);
        for (j, &p) in r.pheno.iter().enumerate() {
            columns[3 + j].push(p as f64);
        }
    }
    let k = columns.len();
    let mut values = vec![vec![None; k]; k];
    for i in 0..k {
        for j in i..k {
            let r = if i == j {
                pearson(&columns[i], &columns[i]).map(|_| 1.0)
            } else {
                pearson(&columns[i], &columns[j])
            };
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix { names, values })
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_roc_hand_case() {
        let a = auc_roc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert!((a - 0.75).abs() < 1e-15);
    }

    #[test]
    fn auc_roc_degenerate_inputs() {
        assert!(matches!(
            auc_roc(&[0.5, 0.6], &[1, 1]),
            Err(Error::Metric { .. })
        ));
        let all_tied = auc_roc(&[0.3, 0.3, 0.3, 0.3], &[0, 1, 0, 1]).unwrap();
        assert_eq!(all_tied, 0.5);
        let perfect = auc_roc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap();
        assert_eq!(perfect, 1.0);
    }

    #[test]
    fn auc_pr_hand_case() {
        let ap = auc_pr(&[0.9, 0.8, 0.7], &[1, 0, 1]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(auc_pr(&[0.1, 0.9], &[0, 1]).unwrap(), 1.0);
        assert!(auc_pr(&[0.1, 0.9], &[0, 0]).is_err());
    }

    #[test]
    fn mad_hand_cases() {
        assert_eq!(mad(&[10.0, 20.0], &[12.0, 16.0]).unwrap(), 3.0);
        assert_eq!(mad(&[5.0, 5.0], &[5.0, 5.0]).unwrap(), 0.0);
        let base = mad(&[1.0, 9.0], &[4.0, 2.0]).unwrap();
        let shifted = mad(&[11.0, 19.0], &[14.0, 12.0]).unwrap();
        assert!((base - shifted).abs() < 1e-12);
        assert!(mad(&[], &[]).is_err());
    }

    #[test]
    fn kappa_hand_case() {
        let k = linear_kappa(&[0, 2, 2], &[0, 1, 2], 3).unwrap();
        assert!((k - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(linear_kappa(&[1, 2, 3], &[1, 2, 3], 10).unwrap(), 1.0);
        // Degenerate: identical single class on both sides.
        assert_eq!(linear_kappa(&[4, 4], &[4, 4], 10).unwrap(), 1.0);
        assert!(linear_kappa(&[10], &[0], 10).is_err());
    }

    #[test]
    fn kappa_invariant_under_class_reversal() {
        let pred = [0u8, 3, 2, 9, 9, 1, 4];
        let truth = [1u8, 3, 3, 8, 0, 1, 5];
        let k = linear_kappa(&pred, &truth, 10).unwrap();
        let rev = |v: &[u8]| v.iter().map(|&x| 9 - x).collect::<Vec<_>>();
        let kr = linear_kappa(&rev(&pred), &rev(&truth), 10).unwrap();
        assert!((k - kr).abs() < 1e-12);
    }

    #[test]
    fn micro_pool_flattens() {
        let groups = vec![
            (1i64, vec![(0.2, 0), (0.3, 0), (0.9, 1)]),
            (2i64, vec![(0.5, 0), (0.6, 1), (0.7, 1)]),
        ];
        let (s, l) = micro_pool(&groups);
        assert_eq!(s.len(), 6);
        assert_eq!(l.iter().map(|&x| x as usize).sum::<usize>(), 3);
    }

    #[test]
    fn calibration_counts_sum_and_all_positive_rate() {
        let scores: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let labels = vec![1u8; 100];
        let (bins, merged) = calibration_curve(&scores, &labels, 10).unwrap();
        assert_eq!(merged, 0);
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 100);
        assert!(bins.iter().all(|b| b.observed_rate == 1.0));
    }

    #[test]
    fn calibration_merges_tied_bins() {
        let scores = vec![0.5; 40];
        let labels: Vec<u8> = (0..40).map(|i| u8::from(i % 2 == 0)).collect();
        let (bins, merged) = calibration_curve(&scores, &labels, 10).unwrap();
        assert_eq!(bins.len(), 1);
        assert_eq!(merged, 9);
        assert_eq!(bins[0].count, 40);
    }

    #[test]
    fn correlation_diagonal_and_planted_sign() {
        let rows: Vec<TaskLabelRow> = (0..50)
            .map(|i| TaskLabelRow {
                mortality: u8::from(i % 2 == 0),
                any_decomp: u8::from(i % 2 == 0),
                mean_remaining_los_hours: i as f64,
                pheno: vec![u8::from(i < 25), 0],
            })
            .collect();
        let m =
            task_label_correlations(&rows, &["a".to_string(), "b".to_string()]).unwrap();
        assert_eq!(m.names.len(), 5);
        assert_eq!(m.values[0][0], Some(1.0));
        assert_eq!(m.values[0][1], Some(1.0)); // identical columns
        assert_eq!(m.values[4][4], None); // zero variance
        assert!(m.to_csv().lines().count() == 6);
    }
}
