//! Hand-engineered per-episode features: six sample statistics of each
//! variable over seven subwindows of the observation window, computed on the
//! raw (pre-discretization) event series.

use crate::config::VariableSet;
use crate::types::{EpisodeTimeline, ParsedValue};
use crate::{Error, Result};
use std::path::Path;

/// Subwindows as fractions of the observation window, in layout order:
/// the full window, three leading fractions, three trailing fractions.
pub const SUBWINDOWS: [(f64, f64, &str); 7] = [
    (0.0, 1.0, "full"),
    (0.0, 0.10, "first_10pct"),
    (0.0, 0.25, "first_25pct"),
    (0.0, 0.50, "first_50pct"),
    (0.50, 1.0, "last_50pct"),
    (0.75, 1.0, "last_25pct"),
    (0.90, 1.0, "last_10pct"),
];

pub const STAT_NAMES: [&str; 6] = ["min", "max", "mean", "std", "skew", "count"];

/// Feature width: 17 variables x 7 subwindows x 6 statistics.
pub const FEATURE_DIM: usize = 17 * 7 * 6;

fn numeric(value: ParsedValue) -> f64 {
    match value {
        ParsedValue::Continuous(v) => v,
        // Categorical levels enter the statistics as their category index,
        // which is ordered by severity in the shipped variable table.
        ParsedValue::Category(c) => c as f64,
    }
}

/// Six statistics of a value list: (min, max, mean, std, skew, count).
/// Empty input yields all zeros; std uses the sample (n-1) convention and is
/// 0 below two values; skew is the third standardized moment with sample
/// std and is 0 below three values or at zero spread.
fn stats(values: &[f64]) -> [f64; 6] {
    let n = values.len();
    if n == 0 {
        return [0.0; 6];
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
    }
    let mean = sum / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    };
    let skew = if n < 3 || std == 0.0 {
        0.0
    } else {
        let m3: f64 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n as f64;
        m3 / std.powi(3)
    };
    [lo, hi, mean, std, skew, n as f64]
}

/// Extract the feature vector of the window `[0, window_end_hours]`.
///
/// Layout is variable-major, subwindow-middle, statistic-minor:
/// `feature[var*42 + sub*6 + stat]`. Subwindow boundaries are fractions of
/// elapsed window time, closed on both ends so a sample on a boundary
/// belongs to the windows on either side of it.
pub fn extract_features(
    episode: &EpisodeTimeline,
    window_end_hours: f64,
    vars: &VariableSet,
) -> Result<Vec<f64>> {
    if !window_end_hours.is_finite() || window_end_hours <= 0.0 {
        return Err(Error::domain(format!(
            "feature window must have positive duration, got {window_end_hours}"
        )));
    }
    let mut per_var: Vec<Vec<(f64, f64)>> = vec![Vec::new(); vars.len()];
    for ev in &episode.events {
        if ev.hours <= window_end_hours {
            per_var[ev.variable as usize].push((ev.hours, numeric(ev.value)));
        }
    }
    let mut features = Vec::with_capacity(FEATURE_DIM);
    let mut buffer = Vec::new();
    for samples in &per_var {
        for &(f_lo, f_hi, _) in &SUBWINDOWS {
            let lo = f_lo * window_end_hours;
            let hi = f_hi * window_end_hours;
            buffer.clear();
            buffer.extend(
                samples
                    .iter()
                    .filter(|(t, _)| *t >= lo && *t <= hi)
                    .map(|&(_, v)| v),
            );
            features.extend_from_slice(&stats(&buffer));
        }
    }
    debug_assert_eq!(features.len(), vars.len() * SUBWINDOWS.len() * STAT_NAMES.len());
    Ok(features)
}

/// Column map naming every feature index, emitted next to feature matrices.
pub fn feature_layout_csv(vars: &VariableSet) -> String {
    let mut out = String::from("index,variable,subwindow,statistic\n");
    let mut idx = 0;
    for spec in vars.specs() {
        for &(_, _, sub) in &SUBWINDOWS {
            for stat in STAT_NAMES {
                out.push_str(&format!("{idx},{},{sub},{stat}\n", spec.name));
                idx += 1;
            }
        }
    }
    out
}

/// Dense row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<FeatureMatrix> {
        let n = rows.len();
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape {
                    message: format!("row {i} has width {} instead of {cols}", r.len()),
                });
            }
            for (j, &v) in r.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::domain(format!(
                        "non-finite feature at row {i}, column {j}"
                    )));
                }
                data.push(v);
            }
        }
        Ok(FeatureMatrix { rows: n, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Feature-wise z-scoring statistics, fitted on training rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaler {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(x: &FeatureMatrix) -> Result<FeatureScaler> {
        if x.rows == 0 {
            return Err(Error::domain("cannot fit a scaler on zero rows"));
        }
        let mut means = Vec::with_capacity(x.cols);
        let mut stds = Vec::with_capacity(x.cols);
        for j in 0..x.cols {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            let mut sum = 0.0;
            for i in 0..x.rows {
                let v = x.data[i * x.cols + j];
                lo = lo.min(v);
                hi = hi.max(v);
                sum += v;
            }
            if lo == hi {
                means.push(lo);
                stds.push(1.0);
                continue;
            }
            let mean = sum / x.rows as f64;
            let ss: f64 = (0..x.rows)
                .map(|i| {
                    let d = x.data[i * x.cols + j] - mean;
                    d * d
                })
                .sum();
            let mut std = (ss / x.rows as f64).sqrt();
            if std == 0.0 {
                std = 1.0;
            }
            means.push(mean);
            stds.push(std);
        }
        Ok(FeatureScaler { means, stds })
    }

    pub fn apply(&self, x: &mut FeatureMatrix) -> Result<()> {
        if x.cols != self.means.len() {
            return Err(Error::Shape {
                message: format!(
                    "scaler width {} does not match matrix width {}",
                    self.means.len(),
                    x.cols
                ),
            });
        }
        for i in 0..x.rows {
            for j in 0..x.cols {
                let v = &mut x.data[i * x.cols + j];
                *v = (*v - self.means[j]) / self.stds[j];
            }
        }
        Ok(())
    }

    /// Text serialization: `mean std` per line, hex float payloads for
    /// exact round-trips.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("feature scaler v1\n");
        for (mean, std) in self.means.iter().zip(&self.stds) {
            out.push_str(&format!(
                "{} {} {mean} {std}\n",
                mean.to_bits(),
                std.to_bits()
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<FeatureScaler> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some("feature scaler v1") {
            return Err(Error::Schema {
                message: format!("{} is not a feature scaler file", path.display()),
            });
        }
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(Error::Schema {
                    message: format!("bad scaler line {line:?}"),
                });
            }
            let mean_bits: u64 = parts[0].parse().map_err(|_| Error::Schema {
                message: format!("bad mean in {line:?}"),
            })?;
            let std_bits: u64 = parts[1].parse().map_err(|_| Error::Schema {
                message: format!("bad std in {line:?}"),
            })?;
            means.push(f64::from_bits(mean_bits));
            stds.push(f64::from_bits(std_bits));
        }
        Ok(FeatureScaler { means, stds })
    }
}
