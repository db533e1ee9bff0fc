//! Domain types shared by every pipeline stage and model family.

use crate::{Error, Result};

/// Number of clinical variables tracked per stay.
pub const N_VARIABLES: usize = 17;
/// Phenotype label count.
pub const N_PHENOTYPES: usize = 25;
/// Ordinal buckets for remaining length-of-stay classification.
pub const N_LOS_BUCKETS: usize = 10;
/// Observation window for the mortality task, in hours.
pub const IHM_WINDOW_HOURS: f64 = 48.0;
/// First prediction hour for the per-hour tasks.
pub const FIRST_PREDICTION_HOUR: u64 = 4;
/// Lookahead defining a decompensation-positive hour, in hours.
pub const DECOMP_HORIZON_HOURS: f64 = 24.0;
/// Year length used for both date-of-birth construction and age computation,
/// so boundary cases like an exactly-18-year-old round-trip.
pub const SECONDS_PER_YEAR: f64 = 365.25 * 86400.0;

/// The four benchmark prediction tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    /// In-hospital mortality from the first 48 hours.
    Ihm,
    /// Death within the next 24 hours, predicted hourly.
    Decomp,
    /// Remaining length of stay, predicted hourly.
    Los,
    /// 25-label phenotype classification over the whole stay.
    Pheno,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Ihm, Task::Decomp, Task::Los, Task::Pheno];

    pub fn name(self) -> &'static str {
        match self {
            Task::Ihm => "ihm",
            Task::Decomp => "decomp",
            Task::Los => "los",
            Task::Pheno => "pheno",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ihm" => Ok(Task::Ihm),
            "decomp" => Ok(Task::Decomp),
            "los" => Ok(Task::Los),
            "pheno" => Ok(Task::Pheno),
            other => Err(Error::invalid(format!(
                "unknown task {other:?}; expected ihm, decomp, los or pheno"
            ))),
        }
    }
}

/// Ordinal bucketing of a stay duration in days.
///
/// Buckets are left-closed, right-open intervals between successive
/// boundaries: one bucket below the first boundary, one at or above the
/// last. The standard scheme uses boundaries 1..8 and 14 days, yielding a
/// short-stay bucket, seven day-long buckets, and two long-stay buckets.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketScheme {
    boundaries_days: Vec<f64>,
}

impl BucketScheme {
    pub fn standard() -> Self {
        BucketScheme {
            boundaries_days: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 14.0],
        }
    }

    pub fn bucket_count(&self) -> usize {
        self.boundaries_days.len() + 1
    }

    /// Bucket index for a duration in days; total over finite nonnegative
    /// input, monotone nondecreasing.
    pub fn bucketize(&self, days: f64) -> Result<u8> {
        if !days.is_finite() || days < 0.0 {
            return Err(Error::domain(format!(
                "duration must be finite and nonnegative, got {days}"
            )));
        }
        let idx = self
            .boundaries_days
            .iter()
            .take_while(|&&b| days >= b)
            .count();
        Ok(idx as u8)
    }
}

impl Default for BucketScheme {
    fn default() -> Self {
        Self::standard()
    }
}

/// One raw measurement tied to a patient, admission and (possibly missing)
/// stay. The value stays text until variable resolution parses it.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub patient_id: i64,
    pub admission_id: i64,
    pub stay_id: Option<i64>,
    /// Hours since the owning stay's intime.
    pub hours: f64,
    /// Source item code; resolved against the variable table or dropped.
    pub item_id: i64,
    pub value: String,
}

/// A parsed measurement value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParsedValue {
    Continuous(f64),
    /// Index into the variable's category list.
    Category(u8),
}

/// One cleaned, re-timed measurement inside an episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedValue {
    pub hours: f64,
    pub variable: u8,
    pub value: ParsedValue,
}

/// Per-ICU-stay irregular multivariate time series with static descriptors
/// and outcome fields.
///
/// Invariants: events sorted ascending by time, all times nonnegative,
/// continuous values inside their valid range, `dod_hours` present exactly
/// when `mortality` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTimeline {
    pub stay_id: i64,
    pub patient_id: i64,
    pub gender: String,
    pub age_years: f64,
    pub los_hours: Option<f64>,
    /// Hours from intime to outtime; present even when the LOS field is not.
    pub end_hours: f64,
    /// In-hospital death flag.
    pub mortality: bool,
    /// Hours from intime to the recorded date of death. May be set without
    /// the mortality flag when the death happened after hospital discharge.
    pub dod_hours: Option<f64>,
    /// Sorted ICD-9 codes attached to the admission.
    pub diagnoses: Vec<String>,
    pub events: Vec<TimedValue>,
}

impl EpisodeTimeline {
    /// Checks the construction invariants; builders call this before
    /// releasing a timeline.
    pub fn validate(&self) -> Result<()> {
        if self.mortality && self.dod_hours.is_none() {
            return Err(Error::domain(format!(
                "stay {}: mortality flag set without a death time",
                self.stay_id
            )));
        }
        if !(self.end_hours.is_finite() && self.end_hours >= 0.0) {
            return Err(Error::domain(format!(
                "stay {}: stay end {} out of range",
                self.stay_id, self.end_hours
            )));
        }
        let mut prev = 0.0_f64;
        for ev in &self.events {
            if !ev.hours.is_finite() || ev.hours < 0.0 {
                return Err(Error::domain(format!(
                    "stay {}: event time {} out of range",
                    self.stay_id, ev.hours
                )));
            }
            if ev.hours < prev {
                return Err(Error::domain(format!(
                    "stay {}: events not sorted by time",
                    self.stay_id
                )));
            }
            prev = ev.hours;
        }
        Ok(())
    }
}

/// Task-specific target of one prediction sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Mortality(u8),
    Decomp(u8),
    Los { remaining_hours: f64, bucket: u8 },
    Pheno(Vec<u8>),
}

/// One prediction sample: an input window over a stay plus its target(s).
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub stay_id: i64,
    pub task: Task,
    pub window_end_hours: f64,
    pub target: Target,
}

/// Per-stay grouped targets for joint training; absent entries are masked
/// out of every loss sum.
#[derive(Debug, Clone, PartialEq)]
pub struct MultitaskTargets {
    steps: usize,
    pub decomp: Vec<Option<u8>>,
    pub mortality: Option<u8>,
    pub los_hours: Vec<Option<f64>>,
    pub los_bucket: Vec<Option<u8>>,
    pub pheno: Option<Vec<u8>>,
}

impl MultitaskTargets {
    pub fn new(
        decomp: Vec<Option<u8>>,
        mortality: Option<u8>,
        los_hours: Vec<Option<f64>>,
        los_bucket: Vec<Option<u8>>,
        pheno: Option<Vec<u8>>,
    ) -> Result<Self> {
        let steps = decomp.len();
        if los_hours.len() != steps || los_bucket.len() != steps {
            return Err(Error::domain(
                "per-step target lists must share one length".to_string(),
            ));
        }
        if los_hours
            .iter()
            .zip(&los_bucket)
            .any(|(h, b)| h.is_some() != b.is_some())
        {
            return Err(Error::domain(
                "hour and bucket stay targets must be present together".to_string(),
            ));
        }
        if let Some(p) = &pheno {
            if p.len() != N_PHENOTYPES {
                return Err(Error::domain(format!(
                    "phenotype target must have {N_PHENOTYPES} entries, got {}",
                    p.len()
                )));
            }
        }
        Ok(MultitaskTargets {
            steps,
            decomp,
            mortality,
            los_hours,
            los_bucket,
            pheno,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucketize_pinned_cases() {
        let s = BucketScheme::standard();
        assert_eq!(s.bucket_count(), 10);
        assert_eq!(s.bucketize(0.5).unwrap(), 0);
        assert_eq!(s.bucketize(3.4).unwrap(), 3);
        assert_eq!(s.bucketize(10.0).unwrap(), 8);
        assert_eq!(s.bucketize(0.0).unwrap(), 0);
        assert_eq!(s.bucketize(7.99).unwrap(), 7);
        assert_eq!(s.bucketize(8.0).unwrap(), 8);
        assert_eq!(s.bucketize(14.0).unwrap(), 9);
        assert_eq!(s.bucketize(400.0).unwrap(), 9);
    }

    #[test]
    fn bucketize_boundary_goes_up() {
        let s = BucketScheme::standard();
        assert_eq!(s.bucketize(3.0).unwrap(), 3);
        assert_eq!(s.bucketize(4.0).unwrap(), 4);
    }

    #[test]
    fn bucketize_rejects_bad_domain() {
        let s = BucketScheme::standard();
        assert!(s.bucketize(-0.1).is_err());
        assert!(s.bucketize(f64::NAN).is_err());
        assert!(s.bucketize(f64::INFINITY).is_err());
    }

    #[test]
    fn timeline_invariants_enforced() {
        let mut t = EpisodeTimeline {
            stay_id: 1,
            patient_id: 1,
            gender: "F".into(),
            age_years: 60.0,
            los_hours: Some(100.0),
            end_hours: 200.0,
            mortality: true,
            dod_hours: None,
            diagnoses: vec![],
            events: vec![],
        };
        assert!(t.validate().is_err());
        t.dod_hours = Some(90.0);
        assert!(t.validate().is_ok());
        t.events = vec![
            TimedValue {
                hours: 5.0,
                variable: 8,
                value: ParsedValue::Continuous(80.0),
            },
            TimedValue {
                hours: 4.0,
                variable: 8,
                value: ParsedValue::Continuous(81.0),
            },
        ];
        assert!(t.validate().is_err());
    }

    #[test]
    fn multitask_targets_length_checked() {
        let bad = MultitaskTargets::new(
            vec![None, Some(1)],
            None,
            vec![Some(10.0)],
            vec![Some(0)],
            None,
        );
        assert!(bad.is_err());
        let mismatched = MultitaskTargets::new(
            vec![None],
            None,
            vec![Some(10.0)],
            vec![None],
            None,
        );
        assert!(mismatched.is_err());
    }
}
