//! Conversion of irregular episode timelines into regular hourly input
//! sequences: binning, last-in-bin resolution, forward-fill imputation with
//! per-variable defaults, observation masks, one-hot categories, and
//! train-set standardization.

use crate::config::{VarKind, VariableSet};
use crate::types::{EpisodeTimeline, ParsedValue};
use crate::{Error, Result};
use std::path::Path;

/// Discretization options; the interval defaults to one hour.
#[derive(Debug, Clone, Copy)]
pub struct DiscretizeOptions {
    pub step_hours: f64,
}

impl Default for DiscretizeOptions {
    fn default() -> Self {
        DiscretizeOptions { step_hours: 1.0 }
    }
}

/// A regular grid of model inputs: per-step value vector (continuous dims
/// and one-hot category blocks in variable order) plus per-variable
/// observation masks. The concatenated row `[values..., masks...]` is the
/// model input.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedSeq {
    steps: usize,
    value_dims: usize,
    n_vars: usize,
    /// steps x value_dims, row-major.
    values: Vec<f64>,
    /// steps x n_vars, row-major; 1 marks a bin with a real observation.
    masks: Vec<f64>,
    standardized: bool,
}

impl DiscretizedSeq {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn value_dims(&self) -> usize {
        self.value_dims
    }

    /// Full model input width: value dims plus one mask per variable.
    pub fn input_dims(&self) -> usize {
        self.value_dims + self.n_vars
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    pub fn value(&self, t: usize, dim: usize) -> f64 {
        self.values[t * self.value_dims + dim]
    }

    pub fn mask(&self, t: usize, var: usize) -> f64 {
        self.masks[t * self.n_vars + var]
    }

    /// One input row: value block then mask block.
    pub fn input_row(&self, t: usize) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.input_dims());
        row.extend_from_slice(&self.values[t * self.value_dims..(t + 1) * self.value_dims]);
        row.extend_from_slice(&self.masks[t * self.n_vars..(t + 1) * self.n_vars]);
        row
    }

    /// Flat `steps x input_dims` matrix in time order.
    pub fn input_matrix(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.steps * self.input_dims());
        for t in 0..self.steps {
            out.extend(self.input_row(t));
        }
        out
    }

    /// Per-variable stream for channel-wise models: `[mask; value block]`
    /// at one step.
    pub fn channel_row(&self, t: usize, vars: &VariableSet, var: u8) -> Vec<f64> {
        let spec = vars.get(var);
        let off = vars.value_offset(var);
        let mut row = Vec::with_capacity(1 + spec.value_dims());
        row.push(self.mask(t, var as usize));
        row.extend_from_slice(
            &self.values[t * self.value_dims + off..t * self.value_dims + off + spec.value_dims()],
        );
        row
    }
}

/// Discretize the window `[0, window_end_hours)` of an episode.
///
/// Bin `t` covers `[t*step, (t+1)*step)`, the final bin is truncated at the
/// window end so nothing past it leaks in. Within-bin conflicts resolve to
/// the last measurement; unobserved bins carry the most recent observed
/// value forward and fall back to the variable's normal value before any
/// observation.
pub fn discretize(
    episode: &EpisodeTimeline,
    window_end_hours: f64,
    opts: DiscretizeOptions,
    vars: &VariableSet,
) -> Result<DiscretizedSeq> {
    if !window_end_hours.is_finite() || window_end_hours <= 0.0 {
        return Err(Error::domain(format!(
            "window end must be positive and finite, got {window_end_hours}"
        )));
    }
    if !opts.step_hours.is_finite() || opts.step_hours <= 0.0 {
        return Err(Error::domain(format!(
            "step must be positive, got {}",
            opts.step_hours
        )));
    }
    let steps = (window_end_hours / opts.step_hours).ceil() as usize;
    let n_vars = vars.len();
    let value_dims = vars.value_dims();

    // Last observation per (bin, variable); events arrive time-sorted so a
    // plain overwrite implements last-in-bin.
    let mut observed: Vec<Option<ParsedValue>> = vec![None; steps * n_vars];
    for ev in &episode.events {
        if ev.hours >= window_end_hours {
            continue;
        }
        let bin = (ev.hours / opts.step_hours).floor() as usize;
        let bin = bin.min(steps - 1);
        observed[bin * n_vars + ev.variable as usize] = Some(ev.value);
    }

    let mut values = vec![0.0; steps * value_dims];
    let mut masks = vec![0.0; steps * n_vars];
    for spec in vars.specs() {
        let v = spec.id as usize;
        let off = vars.value_offset(spec.id);
        let mut carried: Option<ParsedValue> = None;
        for t in 0..steps {
            let cell = observed[t * n_vars + v];
            if cell.is_some() {
                masks[t * n_vars + v] = 1.0;
                carried = cell;
            }
            let effective = carried.unwrap_or(match &spec.kind {
                VarKind::Continuous { normal, .. } => ParsedValue::Continuous(*normal),
                VarKind::Categorical { normal_index, .. } => {
                    ParsedValue::Category(*normal_index as u8)
                }
            });
            match (effective, &spec.kind) {
                (ParsedValue::Continuous(x), VarKind::Continuous { .. }) => {
                    values[t * value_dims + off] = x;
                }
                (ParsedValue::Category(c), VarKind::Categorical { .. }) => {
                    values[t * value_dims + off + c as usize] = 1.0;
                }
                _ => {
                    return Err(Error::domain(format!(
                        "value kind mismatch for variable {}",
                        spec.name
                    )));
                }
            }
        }
    }

    Ok(DiscretizedSeq {
        steps,
        value_dims,
        n_vars,
        values,
        masks,
        standardized: false,
    })
}

/// Per-dimension z-scoring statistics for the continuous value columns,
/// fitted on training sequences only (after imputation). One-hot blocks and
/// masks are never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    /// (value dim, mean, std) per continuous variable.
    entries: Vec<(usize, f64, f64)>,
}

impl Standardizer {
    pub fn fit(seqs: &[DiscretizedSeq], vars: &VariableSet) -> Result<Standardizer> {
        if seqs.is_empty() {
            return Err(Error::domain("standardizer needs training sequences"));
        }
        let mut entries = Vec::new();
        for spec in vars.specs().iter().filter(|s| s.is_continuous()) {
            let dim = vars.value_offset(spec.id);
            let mut n = 0.0;
            let mut sum = 0.0;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for seq in seqs {
                for t in 0..seq.steps {
                    let v = seq.value(t, dim);
                    sum += v;
                    n += 1.0;
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            if lo == hi {
                // A constant column gets sigma 1 with the constant as mean,
                // bypassing summation rounding that would otherwise report a
                // dust-sized nonzero variance.
                entries.push((dim, lo, 1.0));
                continue;
            }
            let mean = sum / n;
            let mut ss = 0.0;
            for seq in seqs {
                for t in 0..seq.steps {
                    let d = seq.value(t, dim) - mean;
                    ss += d * d;
                }
            }
            let mut std = (ss / n).sqrt();
            if std == 0.0 {
                std = 1.0;
            }
            entries.push((dim, mean, std));
        }
        Ok(Standardizer { entries })
    }

    /// Z-scores the continuous dims in place. Refuses sequences that were
    /// already standardized, since a second application would silently
    /// shift the data.
    pub fn apply(&self, seq: &mut DiscretizedSeq) -> Result<()> {
        if seq.standardized {
            return Err(Error::domain(
                "sequence is already standardized; refusing to apply twice",
            ));
        }
        for &(dim, mean, std) in &self.entries {
            if dim >= seq.value_dims {
                return Err(Error::Shape {
                    message: format!(
                        "standardizer dim {dim} out of range for width {}",
                        seq.value_dims
                    ),
                });
            }
            for t in 0..seq.steps {
                let v = &mut seq.values[t * seq.value_dims + dim];
                *v = (*v - mean) / std;
            }
        }
        seq.standardized = true;
        Ok(())
    }

    pub fn entries(&self) -> &[(usize, f64, f64)] {
        &self.entries
    }

    /// Text serialization: `dim mean std` per line, hex float payloads for
    /// exact round-trips.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("standardizer v1\n");
        for &(dim, mean, std) in &self.entries {
            out.push_str(&format!(
                "{dim} {} {} {mean} {std}\n",
                mean.to_bits(),
                std.to_bits()
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Standardizer> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some("standardizer v1") {
            return Err(Error::Schema {
                message: format!("{} is not a standardizer file", path.display()),
            });
        }
        let mut entries = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 5 {
                return Err(Error::Schema {
                    message: format!("bad standardizer line {line:?}"),
                });
            }
            let dim: usize = parts[0].parse().map_err(|_| Error::Schema {
                message: format!("bad dim in {line:?}"),
            })?;
            let mean_bits: u64 = parts[1].parse().map_err(|_| Error::Schema {
                message: format!("bad mean in {line:?}"),
            })?;
            let std_bits: u64 = parts[2].parse().map_err(|_| Error::Schema {
                message: format!("bad std in {line:?}"),
            })?;
            entries.push((dim, f64::from_bits(mean_bits), f64::from_bits(std_bits)));
        }
        Ok(Standardizer { entries })
    }
}

/// Human- and machine-readable column map for the discretized input, so
/// downstream tools can interpret every dimension bit-exactly.
pub fn channel_layout_csv(vars: &VariableSet) -> String {
    let mut out = String::from("dim,role,variable,detail\n");
    for spec in vars.specs() {
        let off = vars.value_offset(spec.id);
        match &spec.kind {
            VarKind::Continuous { .. } => {
                out.push_str(&format!("{off},value,{},continuous\n", spec.name));
            }
            VarKind::Categorical { categories, .. } => {
                for (c, name) in categories.iter().enumerate() {
                    let detail = name.replace(',', ";");
                    out.push_str(&format!("{},value,{},category={detail}\n", off + c, spec.name));
                }
            }
        }
    }
    for spec in vars.specs() {
        out.push_str(&format!(
            "{},mask,{},observed\n",
            vars.mask_offset(spec.id),
            spec.name
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::TimedValue;

    fn episode(events: Vec<TimedValue>) -> EpisodeTimeline {
        EpisodeTimeline {
            stay_id: 1,
            patient_id: 1,
            gender: "F".into(),
            age_years: 50.0,
            los_hours: Some(72.0),
            end_hours: 200.0,
            mortality: false,
            dod_hours: None,
            diagnoses: vec![],
            events,
        }
    }

    fn hr(vars: &VariableSet) -> u8 {
        vars.id_by_name("heart_rate").unwrap()
    }

    #[test]
    fn last_in_bin_then_forward_fill() {
        let vars = VariableSet::builtin();
        let v = hr(vars);
        let ep = episode(vec![
            TimedValue {
                hours: 0.2,
                variable: v,
                value: ParsedValue::Continuous(80.0),
            },
            TimedValue {
                hours: 0.9,
                variable: v,
                value: ParsedValue::Continuous(90.0),
            },
        ]);
        let seq = discretize(&ep, 3.0, DiscretizeOptions::default(), vars).unwrap();
        assert_eq!(seq.steps(), 3);
        let dim = vars.value_offset(v);
        assert_eq!(
            (0..3).map(|t| seq.value(t, dim)).collect::<Vec<_>>(),
            vec![90.0, 90.0, 90.0]
        );
        assert_eq!(
            (0..3).map(|t| seq.mask(t, v as usize)).collect::<Vec<_>>(),
            vec![1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn unobserved_variable_gets_normal_value_and_zero_mask() {
        let vars = VariableSet::builtin();
        let ep = episode(vec![]);
        let seq = discretize(&ep, 4.0, DiscretizeOptions::default(), vars).unwrap();
        let temp = vars.id_by_name("temperature").unwrap();
        let dim = vars.value_offset(temp);
        for t in 0..4 {
            assert_eq!(seq.value(t, dim), 36.6);
            assert_eq!(seq.mask(t, temp as usize), 0.0);
        }
    }

    #[test]
    fn categorical_blocks_are_one_hot() {
        let vars = VariableSet::builtin();
        let gcs = vars.id_by_name("glascow_coma_scale_total").unwrap();
        let ep = episode(vec![TimedValue {
            hours: 1.5,
            variable: gcs,
            value: ParsedValue::Category(4),
        }]);
        let seq = discretize(&ep, 3.2, DiscretizeOptions::default(), vars).unwrap();
        assert_eq!(seq.steps(), 4);
        let off = vars.value_offset(gcs);
        let width = vars.get(gcs).value_dims();
        for t in 0..seq.steps() {
            let block: Vec<f64> = (0..width).map(|d| seq.value(t, off + d)).collect();
            assert_eq!(block.iter().sum::<f64>(), 1.0);
            assert_eq!(block.iter().filter(|&&x| x == 1.0).count(), 1);
        }
        // Bin 0 precedes the observation: imputed with the normal category
        // (index 12, "15"); bins 1.. carry the observed category 4.
        assert_eq!(seq.value(0, off + 12), 1.0);
        assert_eq!(seq.value(1, off + 4), 1.0);
        assert_eq!(seq.mask(1, gcs as usize), 1.0);
        assert_eq!(seq.mask(0, gcs as usize), 0.0);
    }

    #[test]
    fn width_is_76_and_events_past_window_excluded() {
        let vars = VariableSet::builtin();
        let v = hr(vars);
        let ep = episode(vec![
            TimedValue {
                hours: 0.5,
                variable: v,
                value: ParsedValue::Continuous(70.0),
            },
            TimedValue {
                hours: 47.99,
                variable: v,
                value: ParsedValue::Continuous(150.0),
            },
            TimedValue {
                hours: 48.0,
                variable: v,
                value: ParsedValue::Continuous(999.0),
            },
        ]);
        let seq = discretize(&ep, 48.0, DiscretizeOptions::default(), vars).unwrap();
        assert_eq!(seq.input_dims(), 76);
        assert_eq!(seq.input_row(0).len(), 76);
        assert_eq!(seq.steps(), 48);
        let dim = vars.value_offset(v);
        assert_eq!(seq.value(47, dim), 150.0);
    }

    #[test]
    fn fractional_window_and_coarser_step() {
        let vars = VariableSet::builtin();
        let v = hr(vars);
        let ep = episode(vec![TimedValue {
            hours: 3.9,
            variable: v,
            value: ParsedValue::Continuous(70.0),
        }]);
        let seq = discretize(&ep, 4.0, DiscretizeOptions { step_hours: 0.8 }, vars).unwrap();
        assert_eq!(seq.steps(), 5);
        assert_eq!(seq.mask(4, v as usize), 1.0);
        // Fractional tail bin: event at 2.5 lands in the truncated bin [2, 2.5).
        let ep2 = episode(vec![TimedValue {
            hours: 2.45,
            variable: v,
            value: ParsedValue::Continuous(71.0),
        }]);
        let seq2 = discretize(&ep2, 2.5, DiscretizeOptions::default(), vars).unwrap();
        assert_eq!(seq2.steps(), 3);
        assert_eq!(seq2.mask(2, v as usize), 1.0);
    }

    #[test]
    fn empty_window_rejected() {
        let vars = VariableSet::builtin();
        assert!(discretize(&episode(vec![]), 0.0, DiscretizeOptions::default(), vars).is_err());
        assert!(
            discretize(&episode(vec![]), f64::NAN, DiscretizeOptions::default(), vars).is_err()
        );
    }

    #[test]
    fn standardizer_zscores_only_continuous_dims() {
        let vars = VariableSet::builtin();
        let v = hr(vars);
        let mk = |val: f64| {
            discretize(
                &episode(vec![TimedValue {
                    hours: 0.1,
                    variable: v,
                    value: ParsedValue::Continuous(val),
                }]),
                2.0,
                DiscretizeOptions::default(),
                vars,
            )
            .unwrap()
        };
        let train = vec![mk(60.0), mk(100.0)];
        let st = Standardizer::fit(&train, vars).unwrap();
        let mut seq = mk(60.0);
        let gcs = vars.id_by_name("glascow_coma_scale_total").unwrap();
        let gcs_dim = vars.value_offset(gcs) + 12;
        let before_onehot = seq.value(0, gcs_dim);
        st.apply(&mut seq).unwrap();
        let dim = vars.value_offset(v);
        assert!((seq.value(0, dim) - -1.0).abs() < 1e-12); // (60-80)/20
        assert_eq!(seq.value(0, gcs_dim), before_onehot);
        assert_eq!(seq.mask(0, v as usize), 1.0);
        // Double application is refused.
        assert!(st.apply(&mut seq).is_err());
    }

    #[test]
    fn constant_dim_becomes_zero() {
        let vars = VariableSet::builtin();
        let seqs = vec![
            discretize(&episode(vec![]), 3.0, DiscretizeOptions::default(), vars).unwrap(),
            discretize(&episode(vec![]), 5.0, DiscretizeOptions::default(), vars).unwrap(),
        ];
        let st = Standardizer::fit(&seqs, vars).unwrap();
        let mut seq = seqs[0].clone();
        st.apply(&mut seq).unwrap();
        for spec in vars.specs().iter().filter(|s| s.is_continuous()) {
            let dim = vars.value_offset(spec.id);
            for t in 0..seq.steps() {
                assert_eq!(seq.value(t, dim), 0.0, "{}", spec.name);
            }
        }
    }

    #[test]
    fn standardizer_round_trip() {
        let vars = VariableSet::builtin();
        let seqs =
            vec![discretize(&episode(vec![]), 3.0, DiscretizeOptions::default(), vars).unwrap()];
        let st = Standardizer::fit(&seqs, vars).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("standardizer.txt");
        st.save(&path).unwrap();
        assert_eq!(Standardizer::load(&path).unwrap(), st);
    }

    #[test]
    fn channel_layout_covers_all_dims() {
        let vars = VariableSet::builtin();
        let csv = channel_layout_csv(vars);
        assert_eq!(csv.lines().count(), 1 + 76);
        assert!(csv.contains("59,mask,capillary_refill_rate"));
    }
}
