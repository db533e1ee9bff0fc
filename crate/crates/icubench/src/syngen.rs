//! Synthetic cohort generator. Emits the five MIMIC-shaped CSV tables so the
//! whole pipeline runs end-to-end on desk-scale data, with controlled
//! anomalies (under-age patients, multi-stay admissions, orphan events, …)
//! at configured rates and exact ground-truth counts in a generation report.
//!
//! Hazard model: death is a per-patient Bernoulli draw at the configured base
//! rate. Three quarters of deaths occur inside the ICU stay (uniform over its
//! second two thirds, so hours both near and far from death exist); the rest
//! occur on the ward within 48h of ICU discharge. Either way the hospital
//! discharge time is set to the death time, so every death is an in-hospital
//! death. A small fraction of survivors get a date of death long after
//! discharge to exercise the out-of-hospital comparison.

use crate::config::{VariableSet, VarKind};
use crate::{Error, Result};
use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

/// Synthetic item ids are the variable index plus this offset.
pub const ITEM_ID_BASE: i64 = 1000;
/// Item id planted for events that map to no known variable.
pub const UNKNOWN_ITEM_ID: i64 = 9999;

/// Which learnable dependency `generate` embeds in the event values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    /// Dying patients carry a whole-stay shift in heart rate and coma scale:
    /// linearly separable from summary features.
    Linear,
    /// Two hidden per-stay bits shift heart rate and systolic pressure; death
    /// is their exclusive-or, so no single-variable statistic is informative.
    Xor,
    /// Vitals drift only inside the final day before death.
    Decomp,
    /// Longer stays get proportionally more abnormal values.
    Los,
}

impl SignalKind {
    pub fn name(self) -> &'static str {
        match self {
            SignalKind::Linear => "linear",
            SignalKind::Xor => "xor",
            SignalKind::Decomp => "decomp",
            SignalKind::Los => "los",
        }
    }
}

impl std::str::FromStr for SignalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(SignalKind::Linear),
            "xor" => Ok(SignalKind::Xor),
            "decomp" => Ok(SignalKind::Decomp),
            "los" => Ok(SignalKind::Los),
            other => Err(Error::invalid(format!("unknown signal kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_patients: usize,
    /// Expected stays per admission; the excess over 1 is the probability of
    /// a (pipeline-excluded) second stay.
    pub mean_stays_per_admission: f64,
    pub age_mean: f64,
    pub age_sd: f64,
    /// Events per hour for each of the 17 variables, config order.
    pub event_rates_per_hour: Vec<f64>,
    pub mortality_base_rate: f64,
    /// Probability each of the 25 diagnosis groups is present on an admission.
    pub phenotype_prevalence: Vec<f64>,
    /// Log-normal length-of-stay parameters, in days.
    pub los_log_mean: f64,
    pub los_log_sd: f64,
    pub signal_kind: SignalKind,
    pub signal_strength: f64,
    // Anomaly rates. Patient-level draws are mutually exclusive, as are
    // event-level ones, so ground-truth counts never overlap.
    pub under18_rate: f64,
    pub shifted_dob_rate: f64,
    pub missing_los_rate: f64,
    pub orphan_event_rate: f64,
    pub empty_stay_event_rate: f64,
    pub out_of_window_event_rate: f64,
    pub unknown_item_event_rate: f64,
    pub outlier_value_rate: f64,
}

impl SynthConfig {
    pub fn new(seed: u64, n_patients: usize) -> SynthConfig {
        SynthConfig {
            seed,
            n_patients,
            mean_stays_per_admission: 1.04,
            age_mean: 64.0,
            age_sd: 16.0,
            event_rates_per_hour: default_event_rates(),
            mortality_base_rate: 0.13,
            phenotype_prevalence: (0..25).map(|k| 0.05 + 0.01 * k as f64).collect(),
            los_log_mean: 1.0,
            los_log_sd: 0.55,
            signal_kind: SignalKind::Linear,
            signal_strength: 0.0,
            under18_rate: 0.03,
            shifted_dob_rate: 0.02,
            missing_los_rate: 0.02,
            orphan_event_rate: 0.006,
            empty_stay_event_rate: 0.01,
            out_of_window_event_rate: 0.006,
            unknown_item_event_rate: 0.008,
            outlier_value_rate: 0.01,
        }
    }

    /// Turn off every planted anomaly, leaving a fully clean cohort.
    pub fn without_anomalies(mut self) -> SynthConfig {
        self.mean_stays_per_admission = 1.0;
        self.under18_rate = 0.0;
        self.shifted_dob_rate = 0.0;
        self.missing_los_rate = 0.0;
        self.orphan_event_rate = 0.0;
        self.empty_stay_event_rate = 0.0;
        self.out_of_window_event_rate = 0.0;
        self.unknown_item_event_rate = 0.0;
        self.outlier_value_rate = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::invalid("n_patients must be positive"));
        }
        if !(1.0..2.0).contains(&self.mean_stays_per_admission) {
            return Err(Error::invalid("mean_stays_per_admission must be in [1,2)"));
        }
        if self.event_rates_per_hour.len() != crate::types::N_VARIABLES {
            return Err(Error::invalid("need one event rate per variable"));
        }
        if self
            .event_rates_per_hour
            .iter()
            .any(|r| !r.is_finite() || *r <= 0.0)
        {
            return Err(Error::invalid("event rates must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mortality_base_rate) {
            return Err(Error::invalid("mortality base rate must be in [0,1]"));
        }
        if self.phenotype_prevalence.len() != crate::types::N_PHENOTYPES {
            return Err(Error::invalid("need 25 phenotype prevalences"));
        }
        if self.phenotype_prevalence.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("prevalences must be in [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return Err(Error::invalid("signal strength must be in [0,1]"));
        }
        let rates = [
            self.under18_rate,
            self.shifted_dob_rate,
            self.missing_los_rate,
            self.orphan_event_rate,
            self.empty_stay_event_rate,
            self.out_of_window_event_rate,
            self.unknown_item_event_rate,
            self.outlier_value_rate,
        ];
        if rates.iter().any(|r| !(0.0..=0.3).contains(r)) {
            return Err(Error::invalid("anomaly rates must be in [0, 0.3]"));
        }
        Ok(())
    }
}

fn default_event_rates() -> Vec<f64> {
    // Vitals charted roughly hourly, scores a few times a day, body
    // measurements rarely. Config order.
    vec![
        0.15, // capillary refill rate
        1.0,  // diastolic blood pressure
        0.25, // fraction inspired oxygen
        0.3,  // gcs eye
        0.3,  // gcs motor
        0.3,  // gcs total
        0.3,  // gcs verbal
        0.3,  // glucose
        1.0,  // heart rate
        0.02, // height
        1.0,  // mean blood pressure
        1.0,  // oxygen saturation
        0.2,  // ph
        1.0,  // respiratory rate
        1.0,  // systolic blood pressure
        0.4,  // temperature
        0.06, // weight
    ]
}

/// Exact counts of what the generator planted, written alongside the tables.
/// Event-level anomaly counts only cover events of clean stays (stays the
/// subject-extraction stage keeps), since events of excluded stays never
/// reach the later stages.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub patients: usize,
    pub admissions: usize,
    pub stays: usize,
    pub events: usize,
    pub diagnosis_rows: usize,
    pub under18_stays: usize,
    pub shifted_dob_patients: usize,
    pub multi_stay_admissions: usize,
    pub multi_stay_stays: usize,
    pub missing_los_stays: usize,
    pub orphan_events: usize,
    pub empty_stay_id_events: usize,
    pub out_of_window_events: usize,
    pub unknown_item_events: usize,
    pub outlier_values: usize,
    pub unknown_category_values: usize,
    pub clean_stays: usize,
    pub clean_deaths: usize,
    /// Clean stays with known LOS ≥ 48h and at least one retainable event
    /// before hour 48 — the mortality-task denominator.
    pub ihm_eligible_stays: usize,
    pub ihm_deaths: usize,
}

impl GenerationReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::invalid(format!("report serialization: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<GenerationReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema {
            message: format!("{}: {e}", path.display()),
        })
    }

    fn absorb(&mut self, other: &GenerationReport) {
        self.patients += other.patients;
        self.admissions += other.admissions;
        self.stays += other.stays;
        self.events += other.events;
        self.diagnosis_rows += other.diagnosis_rows;
        self.under18_stays += other.under18_stays;
        self.shifted_dob_patients += other.shifted_dob_patients;
        self.multi_stay_admissions += other.multi_stay_admissions;
        self.multi_stay_stays += other.multi_stay_stays;
        self.missing_los_stays += other.missing_los_stays;
        self.orphan_events += other.orphan_events;
        self.empty_stay_id_events += other.empty_stay_id_events;
        self.out_of_window_events += other.out_of_window_events;
        self.unknown_item_events += other.unknown_item_events;
        self.outlier_values += other.outlier_values;
        self.unknown_category_values += other.unknown_category_values;
        self.clean_stays += other.clean_stays;
        self.clean_deaths += other.clean_deaths;
        self.ihm_eligible_stays += other.ihm_eligible_stays;
        self.ihm_deaths += other.ihm_deaths;
    }
}

pub const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";
use crate::types::SECONDS_PER_YEAR;

fn fmt_time(t: NaiveDateTime) -> String {
    t.format(TIME_FORMAT).to_string()
}

fn epoch() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2140, 1, 1)
        .expect("static date")
        .and_hms_opt(0, 0, 0)
        .expect("static time")
}

struct EventRow {
    subject_id: i64,
    hadm_id: String,
    icustay_id: String,
    charttime: NaiveDateTime,
    item_id: i64,
    value: String,
    unit: String,
}

struct PatientBlock {
    patient_row: [String; 4],
    admission_rows: Vec<[String; 5]>,
    stay_rows: Vec<[String; 6]>,
    event_rows: Vec<EventRow>,
    diagnosis_rows: Vec<[String; 3]>,
    report: GenerationReport,
}

/// What kind of patient-level anomaly a patient carries, if any. The draws
/// are mutually exclusive so the report counts cannot overlap.
#[derive(Clone, Copy, PartialEq)]
enum PatientAnomaly {
    None,
    Under18,
    ShiftedDob,
    MultiStay,
    MissingLos,
}

#[derive(Clone, Copy, PartialEq)]
enum EventAnomaly {
    None,
    Orphan,
    EmptyStay,
    OutOfWindow,
    UnknownItem,
    BadValue,
}

fn round_to(x: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    (x * scale).round() / scale
}

fn normal_sample<R: Rng>(rng: &mut R, mean: f64, sd: f64) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout obvious.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    mean + sd * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Per-variable spread and print precision for continuous sampling.
fn continuous_profile(name: &str) -> (f64, u32) {
    match name {
        "diastolic_blood_pressure" => (12.0, 1),
        "fraction_inspired_oxygen" => (0.08, 2),
        "glucose" => (35.0, 1),
        "heart_rate" => (14.0, 1),
        "height" => (11.0, 1),
        "mean_blood_pressure" => (12.0, 1),
        "oxygen_saturation" => (2.2, 1),
        "ph" => (0.08, 2),
        "respiratory_rate" => (5.0, 1),
        "systolic_blood_pressure" => (16.0, 1),
        "temperature" => (0.5, 1),
        "weight" => (15.0, 1),
        other => panic!("no continuous profile for {other}"),
    }
}

/// Per-stay signal state drawn once per stay.
struct SignalState {
    dies: bool,
    dod_hours: Option<f64>,
    los_hours: f64,
    xor_a: bool,
    xor_b: bool,
}

/// Additive shift applied to a continuous sample before truncation.
fn signal_shift(
    cfg: &SynthConfig,
    state: &SignalState,
    var_name: &str,
    hours: f64,
) -> f64 {
    let s = cfg.signal_strength;
    if s == 0.0 {
        return 0.0;
    }
    match cfg.signal_kind {
        SignalKind::Linear => {
            if !state.dies {
                return 0.0;
            }
            match var_name {
                "heart_rate" => 30.0 * s,
                "systolic_blood_pressure" => -18.0 * s,
                _ => 0.0,
            }
        }
        SignalKind::Xor => match var_name {
            "heart_rate" => {
                if state.xor_a {
                    22.0 * s
                } else {
                    -22.0 * s
                }
            }
            "systolic_blood_pressure" => {
                if state.xor_b {
                    26.0 * s
                } else {
                    -26.0 * s
                }
            }
            _ => 0.0,
        },
        SignalKind::Decomp => {
            let Some(dod) = state.dod_hours else {
                return 0.0;
            };
            let gap = dod - hours;
            if !(0.0..=24.0).contains(&gap) {
                return 0.0;
            }
            let proximity = (24.0 - gap) / 24.0;
            match var_name {
                "heart_rate" => 32.0 * s * proximity,
                "systolic_blood_pressure" => -22.0 * s * proximity,
                "respiratory_rate" => 9.0 * s * proximity,
                _ => 0.0,
            }
        }
        SignalKind::Los => {
            let scale = (1.0 + state.los_hours / 24.0).ln();
            match var_name {
                "heart_rate" => 9.0 * s * scale,
                "respiratory_rate" => 3.5 * s * scale,
                _ => 0.0,
            }
        }
    }
}

/// Downward shift of the coma-scale severity (in category steps) for signal
/// kinds that depress consciousness before death.
fn gcs_depression(cfg: &SynthConfig, state: &SignalState, hours: f64) -> usize {
    let s = cfg.signal_strength;
    if s == 0.0 {
        return 0;
    }
    match cfg.signal_kind {
        SignalKind::Linear => {
            if state.dies {
                (4.0 * s).round() as usize
            } else {
                0
            }
        }
        SignalKind::Decomp => match state.dod_hours {
            Some(dod) if (0.0..=24.0).contains(&(dod - hours)) => {
                (5.0 * s * (24.0 - (dod - hours)) / 24.0).round() as usize
            }
            _ => 0,
        },
        _ => 0,
    }
}

fn sample_event_count<R: Rng>(rng: &mut R, rate: f64, hours: f64) -> usize {
    let expected = rate * hours;
    let base = expected.floor();
    let extra = rng.gen::<f64>() < (expected - base);
    base as usize + usize::from(extra)
}

/// Distinct minute offsets in [0, minutes), ascending.
fn sample_minutes<R: Rng>(rng: &mut R, count: usize, minutes: i64) -> Vec<i64> {
    let capacity = minutes.max(1) as usize;
    let count = count.min(capacity);
    let mut set = BTreeSet::new();
    let mut attempts = 0usize;
    while set.len() < count && attempts < 20 * count + 100 {
        set.insert(rng.gen_range(0..minutes.max(1)));
        attempts += 1;
    }
    set.into_iter().collect()
}

fn generate_patient(cfg: &SynthConfig, vars: &VariableSet, index: usize) -> PatientBlock {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let mut report = GenerationReport {
        patients: 1,
        ..GenerationReport::default()
    };

    let subject_id = 10_000 + index as i64;
    let gender = if rng.gen::<bool>() { "F" } else { "M" };

    // Patient-level anomaly band.
    let u: f64 = rng.gen();
    let mut edge = cfg.under18_rate;
    let anomaly = if u < edge {
        PatientAnomaly::Under18
    } else if u < {
        edge += cfg.shifted_dob_rate;
        edge
    } {
        PatientAnomaly::ShiftedDob
    } else if u < {
        edge += cfg.mean_stays_per_admission - 1.0;
        edge
    } {
        PatientAnomaly::MultiStay
    } else if u < {
        edge += cfg.missing_los_rate;
        edge
    } {
        PatientAnomaly::MissingLos
    } else {
        PatientAnomaly::None
    };

    let age_years = match anomaly {
        PatientAnomaly::Under18 => rng.gen_range(8.0..17.4),
        // De-identification artifact: DOB pushed centuries back.
        PatientAnomaly::ShiftedDob => rng.gen_range(295.0..305.0),
        _ => normal_sample(&mut rng, cfg.age_mean, cfg.age_sd).clamp(18.5, 95.0),
    };
    if anomaly == PatientAnomaly::ShiftedDob {
        report.shifted_dob_patients = 1;
    }

    let hadm_id = 100_000 + index as i64;
    let admittime = epoch()
        + Duration::days(2 * index as i64)
        + Duration::minutes(rng.gen_range(0..1440));
    let intime = admittime + Duration::minutes(rng.gen_range(60..1440));
    let dob = intime - Duration::seconds((age_years * SECONDS_PER_YEAR) as i64);

    let los_days = (cfg.los_log_mean + cfg.los_log_sd * normal_sample(&mut rng, 0.0, 1.0))
        .exp()
        .clamp(0.25, 45.0);
    let los_hours = los_days * 24.0;
    let outtime = intime + Duration::minutes((los_hours * 60.0) as i64);

    let dies = rng.gen::<f64>() < cfg.mortality_base_rate;
    let (xor_a, xor_b) = (rng.gen::<bool>(), rng.gen::<bool>());
    let dies = if cfg.signal_kind == SignalKind::Xor && cfg.signal_strength > 0.0 {
        xor_a != xor_b
    } else {
        dies
    };
    // Death either inside the ICU stay or on the ward shortly after it.
    let dod_hours = if dies {
        if rng.gen::<f64>() < 0.75 {
            Some(rng.gen_range(los_hours / 3.0..los_hours))
        } else {
            Some(los_hours + rng.gen_range(1.0..48.0))
        }
    } else {
        None
    };
    let deathtime = dod_hours.map(|h| intime + Duration::minutes((h * 60.0) as i64));
    let dischtime = match deathtime {
        Some(t) => t.max(outtime),
        None => outtime + Duration::minutes(rng.gen_range(120..2880)),
    };
    // Occasional death long after discharge: out-of-hospital, label stays 0.
    let post_discharge_dod = if !dies && rng.gen::<f64>() < 0.03 {
        Some(dischtime + Duration::days(30 + rng.gen_range(0..300)))
    } else {
        None
    };
    let dod_value = deathtime.or(post_discharge_dod);

    let patient_row = [
        subject_id.to_string(),
        gender.to_string(),
        fmt_time(dob),
        dod_value.map(fmt_time).unwrap_or_default(),
    ];
    let admission_rows = vec![[
        subject_id.to_string(),
        hadm_id.to_string(),
        fmt_time(admittime),
        fmt_time(dischtime),
        deathtime.map(fmt_time).unwrap_or_default(),
    ]];
    report.admissions = 1;

    // Stay bookkeeping. A multi-stay patient gets a survivor second stay in
    // the same admission; the whole admission is then pipeline-excluded.
    struct StayPlan {
        icustay_id: i64,
        intime: NaiveDateTime,
        outtime: NaiveDateTime,
        los_hours: f64,
        los_field: String,
        clean: bool,
    }
    let missing_los = anomaly == PatientAnomaly::MissingLos;
    let mut stays = vec![StayPlan {
        icustay_id: 200_000 + 10 * index as i64,
        intime,
        outtime,
        los_hours,
        los_field: if missing_los {
            String::new()
        } else {
            los_days.to_string()
        },
        clean: !matches!(anomaly, PatientAnomaly::Under18 | PatientAnomaly::MultiStay),
    }];
    if anomaly == PatientAnomaly::MultiStay {
        let gap = Duration::minutes(rng.gen_range(360..1440));
        let second_los_days = (cfg.los_log_mean
            + cfg.los_log_sd * normal_sample(&mut rng, 0.0, 1.0))
        .exp()
        .clamp(0.25, 45.0);
        let second_in = outtime + gap;
        let second_out = second_in + Duration::minutes((second_los_days * 24.0 * 60.0) as i64);
        stays.push(StayPlan {
            icustay_id: 200_000 + 10 * index as i64 + 1,
            intime: second_in,
            outtime: second_out,
            los_hours: second_los_days * 24.0,
            los_field: second_los_days.to_string(),
            clean: false,
        });
        report.multi_stay_admissions = 1;
        report.multi_stay_stays = 2;
    }
    if anomaly == PatientAnomaly::Under18 {
        report.under18_stays = 1;
    }
    if missing_los {
        report.missing_los_stays = 1;
    }

    let stay_rows: Vec<[String; 6]> = stays
        .iter()
        .map(|s| {
            [
                subject_id.to_string(),
                hadm_id.to_string(),
                s.icustay_id.to_string(),
                fmt_time(s.intime),
                fmt_time(s.outtime),
                s.los_field.clone(),
            ]
        })
        .collect();
    report.stays = stays.len();

    let state = SignalState {
        dies,
        dod_hours,
        los_hours,
        xor_a,
        xor_b,
    };

    // Events.
    let mut event_rows = Vec::new();
    for (stay_index, stay) in stays.iter().enumerate() {
        let stay_state = if stay_index == 0 {
            &state
        } else {
            // Second stays are survivor filler; no signal.
            &SignalState {
                dies: false,
                dod_hours: None,
                los_hours: stay.los_hours,
                xor_a: false,
                xor_b: false,
            }
        };
        let mut retained_before_48 = false;
        let stay_minutes = (stay.los_hours * 60.0) as i64;
        for spec in vars.specs() {
            let rate = cfg.event_rates_per_hour[spec.id as usize];
            let count = sample_event_count(&mut rng, rate, stay.los_hours);
            for minute in sample_minutes(&mut rng, count, stay_minutes) {
                let hours = minute as f64 / 60.0;
                // Event-level anomaly band; only clean stays count toward
                // the ground-truth report since excluded stays never reach
                // the event-validation stage.
                let u: f64 = rng.gen();
                let mut edge = cfg.orphan_event_rate;
                let ev_anomaly = if u < edge {
                    EventAnomaly::Orphan
                } else if u < {
                    edge += cfg.empty_stay_event_rate;
                    edge
                } {
                    EventAnomaly::EmptyStay
                } else if u < {
                    edge += cfg.out_of_window_event_rate;
                    edge
                } {
                    EventAnomaly::OutOfWindow
                } else if u < {
                    edge += cfg.unknown_item_event_rate;
                    edge
                } {
                    EventAnomaly::UnknownItem
                } else if u < {
                    edge += cfg.outlier_value_rate;
                    edge
                } {
                    EventAnomaly::BadValue
                } else {
                    EventAnomaly::None
                };

                // Event anomalies are only planted on clean stays: events of
                // excluded stays vanish with their admission, so anomalies
                // there would be invisible to the stages the report feeds.
                let ev_anomaly = if stay.clean { ev_anomaly } else { EventAnomaly::None };

                let (value, unit, is_bad_value, is_unknown_cat) = sample_value(
                    cfg,
                    &mut rng,
                    spec.id,
                    vars,
                    stay_state,
                    hours,
                    ev_anomaly == EventAnomaly::BadValue,
                );

                let mut charttime = stay.intime + Duration::minutes(minute);
                let mut hadm = hadm_id.to_string();
                let mut stay_field = stay.icustay_id.to_string();
                let mut item_id = ITEM_ID_BASE + spec.id as i64;
                match ev_anomaly {
                    EventAnomaly::Orphan => {
                        hadm = (9_000_000 + index as i64).to_string();
                        stay_field = (9_000_000 + index as i64).to_string();
                    }
                    EventAnomaly::EmptyStay => stay_field = String::new(),
                    EventAnomaly::OutOfWindow => {
                        charttime = if rng.gen::<bool>() {
                            stay.intime - Duration::minutes(rng.gen_range(30..2880))
                        } else {
                            stay.outtime + Duration::minutes(rng.gen_range(30..2880))
                        };
                    }
                    EventAnomaly::UnknownItem => item_id = UNKNOWN_ITEM_ID,
                    _ => {}
                }

                if stay.clean {
                    match ev_anomaly {
                        EventAnomaly::Orphan => report.orphan_events += 1,
                        EventAnomaly::EmptyStay => report.empty_stay_id_events += 1,
                        EventAnomaly::OutOfWindow => report.out_of_window_events += 1,
                        EventAnomaly::UnknownItem => report.unknown_item_events += 1,
                        EventAnomaly::BadValue => {
                            if is_bad_value {
                                report.outlier_values += 1;
                            }
                            if is_unknown_cat {
                                report.unknown_category_values += 1;
                            }
                        }
                        EventAnomaly::None => {}
                    }
                    // Retained = survives validation and episode cleaning.
                    if ev_anomaly == EventAnomaly::None && minute < 48 * 60 {
                        retained_before_48 = true;
                    }
                }

                event_rows.push(EventRow {
                    subject_id,
                    hadm_id: hadm,
                    icustay_id: stay_field,
                    charttime,
                    item_id,
                    value,
                    unit,
                });
            }
        }
        if stay.clean {
            report.clean_stays += 1;
            if stay_index == 0 && dies {
                report.clean_deaths += 1;
            }
            if stay_index == 0
                && !missing_los
                && stay.los_hours >= 48.0
                && retained_before_48
            {
                report.ihm_eligible_stays += 1;
                if dies {
                    report.ihm_deaths += 1;
                }
            }
        }
    }
    // Deterministic event order within the patient.
    event_rows.sort_by(|a, b| {
        (a.charttime, a.item_id, a.icustay_id.as_str()).cmp(&(
            b.charttime,
            b.item_id,
            b.icustay_id.as_str(),
        ))
    });
    report.events = event_rows.len();

    // Diagnoses: independent Bernoulli per group, plus occasional codes
    // outside every group.
    let groups = crate::config::DiagnosisGroups::builtin();
    let mut diagnosis_rows = Vec::new();
    for (k, prevalence) in cfg.phenotype_prevalence.iter().enumerate() {
        if rng.gen::<f64>() < *prevalence {
            let prefixes = groups.prefixes_of(k as u8);
            let prefix = prefixes[rng.gen_range(0..prefixes.len())];
            let mut code = prefix.to_string();
            while code.len() < 5 {
                code.push(char::from(b'0' + rng.gen_range(0..10u8)));
            }
            diagnosis_rows.push([subject_id.to_string(), hadm_id.to_string(), code]);
        }
    }
    if rng.gen::<f64>() < 0.1 {
        diagnosis_rows.push([
            subject_id.to_string(),
            hadm_id.to_string(),
            format!("V{:04}", rng.gen_range(0..10_000)),
        ]);
    }
    report.diagnosis_rows = diagnosis_rows.len();

    PatientBlock {
        patient_row,
        admission_rows,
        stay_rows,
        event_rows,
        diagnosis_rows,
        report,
    }
}

/// Returns (value text, unit, was_outlier, was_unknown_category).
fn sample_value<R: Rng>(
    cfg: &SynthConfig,
    rng: &mut R,
    var_id: u8,
    vars: &VariableSet,
    state: &SignalState,
    hours: f64,
    bad: bool,
) -> (String, String, bool, bool) {
    let spec = vars.get(var_id);
    let unit = spec.unit.clone();
    match &spec.kind {
        VarKind::Continuous {
            normal,
            valid_lo,
            valid_hi,
        } => {
            if bad {
                // Outside the valid range on a random side, clearly parseable.
                let range = valid_hi - valid_lo;
                let v = if rng.gen::<bool>() {
                    valid_hi + range * rng.gen_range(0.05..0.6)
                } else {
                    valid_lo - (range * rng.gen_range(0.05..0.6)).max(0.5)
                };
                return (round_to(v, 1).to_string(), unit, true, false);
            }
            let (sd, decimals) = continuous_profile(&spec.name);
            let shift = signal_shift(cfg, state, &spec.name, hours);
            let mut v = normal_sample(rng, normal + shift, sd);
            // Keep honest values inside the valid range.
            for _ in 0..20 {
                if v > *valid_lo && v < *valid_hi {
                    break;
                }
                v = normal_sample(rng, normal + shift, sd);
            }
            v = v.clamp(valid_lo + 1e-9, valid_hi - 1e-9);
            (round_to(v, decimals).to_string(), unit, false, false)
        }
        VarKind::Categorical {
            categories,
            normal_index,
        } => {
            if bad {
                return ("???".to_string(), unit, false, true);
            }
            let depression = gcs_depression(cfg, state, hours).min(categories.len() - 1);
            let center = normal_index.saturating_sub(depression);
            let index = if rng.gen::<f64>() < 0.7 {
                center
            } else {
                rng.gen_range(0..categories.len())
            };
            (categories[index].clone(), unit, false, false)
        }
    }
}

fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(header)
        .and_then(|()| rows.iter().try_for_each(|r| w.write_record(r)))
        .and_then(|()| w.flush().map_err(csv::Error::from))
        .map_err(Error::Csv)
}

/// Generate the full table set under `out_dir`, plus `generation_report.json`
/// and `synth_config.json`. Deterministic for a fixed config, regardless of
/// thread count: every patient owns stream `index+1` of the seeded generator.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<GenerationReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let vars = VariableSet::builtin();

    let blocks: Vec<PatientBlock> = (0..cfg.n_patients)
        .into_par_iter()
        .map(|i| generate_patient(cfg, vars, i))
        .collect();

    let mut report = GenerationReport::default();
    let mut patients = Vec::new();
    let mut admissions = Vec::new();
    let mut stays = Vec::new();
    let mut events = Vec::new();
    let mut diagnoses = Vec::new();
    for b in &blocks {
        report.absorb(&b.report);
        patients.push(b.patient_row.to_vec());
        admissions.extend(b.admission_rows.iter().map(|r| r.to_vec()));
        stays.extend(b.stay_rows.iter().map(|r| r.to_vec()));
        events.extend(b.event_rows.iter().map(|e| {
            vec![
                e.subject_id.to_string(),
                e.hadm_id.clone(),
                e.icustay_id.clone(),
                fmt_time(e.charttime),
                e.item_id.to_string(),
                e.value.clone(),
                e.unit.clone(),
            ]
        }));
        diagnoses.extend(b.diagnosis_rows.iter().map(|r| r.to_vec()));
    }

    write_table(
        &out_dir.join("PATIENTS.csv"),
        &["SUBJECT_ID", "GENDER", "DOB", "DOD"],
        &patients,
    )?;
    write_table(
        &out_dir.join("ADMISSIONS.csv"),
        &["SUBJECT_ID", "HADM_ID", "ADMITTIME", "DISCHTIME", "DEATHTIME"],
        &admissions,
    )?;
    write_table(
        &out_dir.join("ICUSTAYS.csv"),
        &["SUBJECT_ID", "HADM_ID", "ICUSTAY_ID", "INTIME", "OUTTIME", "LOS"],
        &stays,
    )?;
    write_table(
        &out_dir.join("CHARTEVENTS.csv"),
        &["SUBJECT_ID", "HADM_ID", "ICUSTAY_ID", "CHARTTIME", "ITEMID", "VALUE", "VALUEUOM"],
        &events,
    )?;
    write_table(
        &out_dir.join("DIAGNOSES.csv"),
        &["SUBJECT_ID", "HADM_ID", "ICD9_CODE"],
        &diagnoses,
    )?;
    report.save(&out_dir.join("generation_report.json"))?;
    let cfg_text = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::invalid(format!("config serialization: {e}")))?;
    let cfg_path = out_dir.join("synth_config.json");
    std::fs::File::create(&cfg_path)
        .and_then(|mut f| f.write_all(cfg_text.as_bytes()).and_then(|()| f.write_all(b"\n")))
        .map_err(|e| Error::io(&cfg_path, e))?;
    Ok(report)
}

/// `generate` with the configured dependency at the given strength.
pub fn plant_signal(cfg: &SynthConfig, strength: f64, out_dir: &Path) -> Result<GenerationReport> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::invalid("signal strength must be in [0,1]"));
    }
    let mut cfg = cfg.clone();
    cfg.signal_strength = strength;
    generate(&cfg, out_dir)
}
