//! Benchmark construction: subject extraction, event validation, episode
//! building, the patient-level split, and the four task-dataset builders,
//! plus the on-disk episode/listfile formats they produce.
//!
//! Every stage is conservation-checked: each input row is either kept or
//! dropped under a named reason, and the totals must reconcile.

use crate::config::{DiagnosisGroups, VarKind, VariableSet};
use crate::syngen::ITEM_ID_BASE;
use crate::types::{
    BucketScheme, EpisodeTimeline, ParsedValue, Target, Task, TaskInstance, TimedValue,
    FIRST_PREDICTION_HOUR, IHM_WINDOW_HOURS, N_PHENOTYPES, N_VARIABLES, SECONDS_PER_YEAR,
};
use crate::{Error, Result};
use chrono::NaiveDateTime;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

/// Ages above this are a de-identification artifact and get replaced.
const AGE_CAP_YEARS: f64 = 120.0;
const AGE_CAP_REPLACEMENT: f64 = 90.0;

fn parse_time(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .ok()
        .or_else(|| {
            chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
}

fn hours_between(from: NaiveDateTime, to: NaiveDateTime) -> f64 {
    (to - from).num_seconds() as f64 / 3600.0
}

// ---------------------------------------------------------------------------
// Cohort report

/// Kept/dropped counters for every stage. `check_conservation` verifies that
/// the counts reconcile; `text` renders the structured summary.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CohortReport {
    pub rows_patients: usize,
    pub rows_admissions: usize,
    pub rows_stays: usize,
    pub rows_events: usize,
    pub rows_diagnoses: usize,
    pub rows_dropped_parse: usize,
    /// First few row-level parse failures, for diagnostics.
    pub parse_notes: Vec<String>,

    pub admissions_multi_stay_excluded: usize,
    pub stays_considered: usize,
    pub stays_in_excluded_admissions: usize,
    pub stays_under18_excluded: usize,
    pub stays_age_capped: usize,
    pub stays_unlinked: usize,
    pub stays_kept: usize,
    pub patients_with_stays: usize,

    pub events_considered: usize,
    pub events_excluded_stay: usize,
    pub events_missing_stay: usize,
    pub events_out_of_window: usize,
    pub events_recovered_via_admission: usize,
    pub events_attached: usize,

    pub events_unmapped_item: usize,
    pub events_unparseable_value: usize,
    pub events_outlier: usize,
    pub events_unknown_category: usize,
    pub events_retained: usize,
    pub episodes_built: usize,
    pub episodes_empty: usize,

    pub ihm_excluded_unknown_or_short_los: usize,
    pub ihm_excluded_no_early_events: usize,
    pub diagnosis_codes_unmapped: usize,

    pub instances_train: BTreeMap<Task, usize>,
    pub instances_test: BTreeMap<Task, usize>,
}

impl CohortReport {
    fn note_parse(&mut self, table: &str, line: usize, what: &str) {
        self.rows_dropped_parse += 1;
        if self.parse_notes.len() < 20 {
            self.parse_notes.push(format!("{table} line {line}: {what}"));
        }
    }

    /// Every stage must account for all of its input.
    pub fn check_conservation(&self) -> Result<()> {
        let stays_accounted = self.stays_in_excluded_admissions
            + self.stays_under18_excluded
            + self.stays_unlinked
            + self.stays_kept;
        if stays_accounted != self.stays_considered {
            return Err(Error::domain(format!(
                "stay conservation broken: {} accounted vs {} considered",
                stays_accounted, self.stays_considered
            )));
        }
        let events_accounted = self.events_excluded_stay
            + self.events_missing_stay
            + self.events_out_of_window
            + self.events_attached;
        if events_accounted != self.events_considered {
            return Err(Error::domain(format!(
                "event conservation broken at validation: {} vs {}",
                events_accounted, self.events_considered
            )));
        }
        let episode_accounted = self.events_unmapped_item
            + self.events_unparseable_value
            + self.events_outlier
            + self.events_unknown_category
            + self.events_retained;
        if episode_accounted != self.events_attached {
            return Err(Error::domain(format!(
                "event conservation broken at episode building: {} vs {}",
                episode_accounted, self.events_attached
            )));
        }
        Ok(())
    }

    pub fn text(&self) -> String {
        let mut s = String::from("cohort report\n");
        let mut kv = |k: &str, v: usize| s.push_str(&format!("{k}: {v}\n"));
        kv("rows_patients", self.rows_patients);
        kv("rows_admissions", self.rows_admissions);
        kv("rows_stays", self.rows_stays);
        kv("rows_events", self.rows_events);
        kv("rows_diagnoses", self.rows_diagnoses);
        kv("rows_dropped_parse", self.rows_dropped_parse);
        kv("admissions_multi_stay_excluded", self.admissions_multi_stay_excluded);
        kv("stays_considered", self.stays_considered);
        kv("stays_in_excluded_admissions", self.stays_in_excluded_admissions);
        kv("stays_under18_excluded", self.stays_under18_excluded);
        kv("stays_age_capped", self.stays_age_capped);
        kv("stays_unlinked", self.stays_unlinked);
        kv("stays_kept", self.stays_kept);
        kv("patients_with_stays", self.patients_with_stays);
        kv("events_considered", self.events_considered);
        kv("events_excluded_stay", self.events_excluded_stay);
        kv("events_missing_stay", self.events_missing_stay);
        kv("events_out_of_window", self.events_out_of_window);
        kv("events_recovered_via_admission", self.events_recovered_via_admission);
        kv("events_attached", self.events_attached);
        kv("events_unmapped_item", self.events_unmapped_item);
        kv("events_unparseable_value", self.events_unparseable_value);
        kv("events_outlier", self.events_outlier);
        kv("events_unknown_category", self.events_unknown_category);
        kv("events_retained", self.events_retained);
        kv("episodes_built", self.episodes_built);
        kv("episodes_empty", self.episodes_empty);
        kv("ihm_excluded_unknown_or_short_los", self.ihm_excluded_unknown_or_short_los);
        kv("ihm_excluded_no_early_events", self.ihm_excluded_no_early_events);
        kv("diagnosis_codes_unmapped", self.diagnosis_codes_unmapped);
        for (task, n) in &self.instances_train {
            s.push_str(&format!("instances_train_{}: {n}\n", task.name()));
        }
        for (task, n) in &self.instances_test {
            s.push_str(&format!("instances_test_{}: {n}\n", task.name()));
        }
        for note in &self.parse_notes {
            s.push_str(&format!("parse_note: {note}\n"));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.text()).map_err(|e| Error::io(path, e))
    }
}

// ---------------------------------------------------------------------------
// Raw tables

#[derive(Debug, Clone)]
pub struct PatientRow {
    pub subject_id: i64,
    pub gender: String,
    pub dob: NaiveDateTime,
    pub dod: Option<NaiveDateTime>,
}

#[derive(Debug, Clone)]
pub struct AdmissionRow {
    pub subject_id: i64,
    pub hadm_id: i64,
    pub admittime: NaiveDateTime,
    pub dischtime: NaiveDateTime,
    pub deathtime: Option<NaiveDateTime>,
}

#[derive(Debug, Clone)]
pub struct StayRow {
    pub subject_id: i64,
    pub hadm_id: i64,
    pub icustay_id: i64,
    pub intime: NaiveDateTime,
    pub outtime: NaiveDateTime,
    pub los_days: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EventRow {
    pub hadm_id: Option<i64>,
    pub icustay_id: Option<i64>,
    pub charttime: NaiveDateTime,
    pub item_id: i64,
    pub value: String,
}

#[derive(Debug, Clone)]
pub struct DiagnosisRow {
    pub hadm_id: i64,
    pub icd9_code: String,
}

#[derive(Debug, Clone, Default)]
pub struct RawTables {
    pub patients: Vec<PatientRow>,
    pub admissions: Vec<AdmissionRow>,
    pub stays: Vec<StayRow>,
    pub events: Vec<EventRow>,
    pub diagnoses: Vec<DiagnosisRow>,
}

/// Resolves required header names to column indices; missing columns are a
/// schema error naming the column and table.
fn header_indices(
    table: &str,
    headers: &csv::StringRecord,
    required: &[&str],
) -> Result<Vec<usize>> {
    required
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| Error::Schema {
                    message: format!("{table} is missing required column {name}"),
                })
        })
        .collect()
}

fn open_table(dir: &Path, name: &str) -> Result<csv::Reader<std::fs::File>> {
    let path = dir.join(name);
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => {
                Error::io(&path, std::io::Error::new(std::io::ErrorKind::NotFound, e))
            }
            _ => Error::Csv(e),
        })
}

macro_rules! try_row {
    ($report:expr, $table:expr, $line:expr, $opt:expr, $what:expr) => {
        match $opt {
            Some(v) => v,
            None => {
                $report.note_parse($table, $line, $what);
                continue;
            }
        }
    };
}

/// Read the five tables, collecting row-level parse failures in the report
/// rather than failing; structural problems (missing files or columns) are
/// hard errors.
pub fn read_tables(dir: &Path, report: &mut CohortReport) -> Result<RawTables> {
    let mut out = RawTables::default();

    let mut rd = open_table(dir, "PATIENTS.csv")?;
    let idx = header_indices("PATIENTS", rd.headers().map_err(Error::Csv)?, &[
        "SUBJECT_ID",
        "GENDER",
        "DOB",
        "DOD",
    ])?;
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(Error::Csv)?;
        report.rows_patients += 1;
        let get = |i: usize| rec.get(idx[i]).unwrap_or("").trim();
        let subject_id =
            try_row!(report, "PATIENTS", line + 2, get(0).parse().ok(), "bad SUBJECT_ID");
        let dob = try_row!(report, "PATIENTS", line + 2, parse_time(get(2)), "bad DOB");
        let dod = if get(3).is_empty() {
            None
        } else {
            Some(try_row!(report, "PATIENTS", line + 2, parse_time(get(3)), "bad DOD"))
        };
        out.patients.push(PatientRow {
            subject_id,
            gender: get(1).to_string(),
            dob,
            dod,
        });
    }

    let mut rd = open_table(dir, "ADMISSIONS.csv")?;
    let idx = header_indices("ADMISSIONS", rd.headers().map_err(Error::Csv)?, &[
        "SUBJECT_ID",
        "HADM_ID",
        "ADMITTIME",
        "DISCHTIME",
        "DEATHTIME",
    ])?;
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(Error::Csv)?;
        report.rows_admissions += 1;
        let get = |i: usize| rec.get(idx[i]).unwrap_or("").trim();
        let subject_id =
            try_row!(report, "ADMISSIONS", line + 2, get(0).parse().ok(), "bad SUBJECT_ID");
        let hadm_id = try_row!(report, "ADMISSIONS", line + 2, get(1).parse().ok(), "bad HADM_ID");
        let admittime =
            try_row!(report, "ADMISSIONS", line + 2, parse_time(get(2)), "bad ADMITTIME");
        let dischtime =
            try_row!(report, "ADMISSIONS", line + 2, parse_time(get(3)), "bad DISCHTIME");
        let deathtime = if get(4).is_empty() {
            None
        } else {
            Some(try_row!(report, "ADMISSIONS", line + 2, parse_time(get(4)), "bad DEATHTIME"))
        };
        out.admissions.push(AdmissionRow {
            subject_id,
            hadm_id,
            admittime,
            dischtime,
            deathtime,
        });
    }

    let mut rd = open_table(dir, "ICUSTAYS.csv")?;
    let idx = header_indices("ICUSTAYS", rd.headers().map_err(Error::Csv)?, &[
        "SUBJECT_ID",
        "HADM_ID",
        "ICUSTAY_ID",
        "INTIME",
        "OUTTIME",
        "LOS",
    ])?;
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(Error::Csv)?;
        report.rows_stays += 1;
        let get = |i: usize| rec.get(idx[i]).unwrap_or("").trim();
        let subject_id =
            try_row!(report, "ICUSTAYS", line + 2, get(0).parse().ok(), "bad SUBJECT_ID");
        let hadm_id = try_row!(report, "ICUSTAYS", line + 2, get(1).parse().ok(), "bad HADM_ID");
        let icustay_id =
            try_row!(report, "ICUSTAYS", line + 2, get(2).parse().ok(), "bad ICUSTAY_ID");
        let intime = try_row!(report, "ICUSTAYS", line + 2, parse_time(get(3)), "bad INTIME");
        let outtime = try_row!(report, "ICUSTAYS", line + 2, parse_time(get(4)), "bad OUTTIME");
        let los_days = if get(5).is_empty() {
            None
        } else {
            Some(try_row!(report, "ICUSTAYS", line + 2, get(5).parse::<f64>().ok(), "bad LOS"))
        };
        out.stays.push(StayRow {
            subject_id,
            hadm_id,
            icustay_id,
            intime,
            outtime,
            los_days,
        });
    }

    let mut rd = open_table(dir, "CHARTEVENTS.csv")?;
    let idx = header_indices("CHARTEVENTS", rd.headers().map_err(Error::Csv)?, &[
        "SUBJECT_ID",
        "HADM_ID",
        "ICUSTAY_ID",
        "CHARTTIME",
        "ITEMID",
        "VALUE",
        "VALUEUOM",
    ])?;
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(Error::Csv)?;
        report.rows_events += 1;
        let get = |i: usize| rec.get(idx[i]).unwrap_or("").trim();
        let hadm_id = if get(1).is_empty() {
            None
        } else {
            Some(try_row!(report, "CHARTEVENTS", line + 2, get(1).parse().ok(), "bad HADM_ID"))
        };
        let icustay_id = if get(2).is_empty() {
            None
        } else {
            Some(try_row!(
                report,
                "CHARTEVENTS",
                line + 2,
                get(2).parse().ok(),
                "bad ICUSTAY_ID"
            ))
        };
        let charttime =
            try_row!(report, "CHARTEVENTS", line + 2, parse_time(get(3)), "bad CHARTTIME");
        let item_id = try_row!(report, "CHARTEVENTS", line + 2, get(4).parse().ok(), "bad ITEMID");
        out.events.push(EventRow {
            hadm_id,
            icustay_id,
            charttime,
            item_id,
            value: get(5).to_string(),
        });
    }

    let mut rd = open_table(dir, "DIAGNOSES.csv")?;
    let idx = header_indices("DIAGNOSES", rd.headers().map_err(Error::Csv)?, &[
        "SUBJECT_ID",
        "HADM_ID",
        "ICD9_CODE",
    ])?;
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(Error::Csv)?;
        report.rows_diagnoses += 1;
        let get = |i: usize| rec.get(idx[i]).unwrap_or("").trim();
        let hadm_id = try_row!(report, "DIAGNOSES", line + 2, get(1).parse().ok(), "bad HADM_ID");
        out.diagnoses.push(DiagnosisRow {
            hadm_id,
            icd9_code: get(2).to_string(),
        });
    }

    Ok(out)
}

// ---------------------------------------------------------------------------
// Subject extraction

#[derive(Debug, Clone)]
pub struct StayRecord {
    pub icustay_id: i64,
    pub hadm_id: i64,
    pub subject_id: i64,
    pub intime: NaiveDateTime,
    pub outtime: NaiveDateTime,
    pub los_days: Option<f64>,
    /// Age at intime, after the de-identification cap.
    pub age_years: f64,
    /// Attached by `validate_events`, sorted by (time, item, value).
    pub events: Vec<(NaiveDateTime, i64, String)>,
}

#[derive(Debug, Clone)]
struct AdmissionInfo {
    admittime: NaiveDateTime,
    dischtime: NaiveDateTime,
}

#[derive(Debug, Clone)]
struct PatientInfo {
    gender: String,
    dod: Option<NaiveDateTime>,
}

/// Per-patient view of the cohort after the admission- and age-level
/// exclusions. Excluded ids are kept so event validation can tell "reference
/// to something excluded" apart from "dangling reference".
#[derive(Debug, Clone, Default)]
pub struct SubjectStore {
    pub stays: BTreeMap<i64, StayRecord>,
    stay_of_admission: BTreeMap<i64, i64>,
    admissions: BTreeMap<i64, AdmissionInfo>,
    patients: BTreeMap<i64, PatientInfo>,
    diagnoses: BTreeMap<i64, Vec<String>>,
    excluded_stays: BTreeSet<i64>,
    excluded_admissions: BTreeSet<i64>,
}

pub fn extract_subjects(tables: &RawTables, report: &mut CohortReport) -> Result<SubjectStore> {
    let mut store = SubjectStore::default();
    for p in &tables.patients {
        store.patients.insert(
            p.subject_id,
            PatientInfo {
                gender: p.gender.clone(),
                dod: p.dod,
            },
        );
    }
    let mut dob_of: BTreeMap<i64, NaiveDateTime> = BTreeMap::new();
    for p in &tables.patients {
        dob_of.insert(p.subject_id, p.dob);
    }
    for a in &tables.admissions {
        store.admissions.insert(
            a.hadm_id,
            AdmissionInfo {
                admittime: a.admittime,
                dischtime: a.dischtime,
            },
        );
    }
    for d in &tables.diagnoses {
        store.diagnoses.entry(d.hadm_id).or_default().push(d.icd9_code.clone());
    }
    for codes in store.diagnoses.values_mut() {
        codes.sort();
    }

    let mut stays_by_admission: BTreeMap<i64, Vec<&StayRow>> = BTreeMap::new();
    for s in &tables.stays {
        stays_by_admission.entry(s.hadm_id).or_default().push(s);
    }

    for (hadm_id, stays) in &stays_by_admission {
        report.stays_considered += stays.len();
        // Admissions with several ICU stays (transfers/readmissions within
        // one hospitalization) are excluded outright.
        if stays.len() >= 2 {
            report.admissions_multi_stay_excluded += 1;
            report.stays_in_excluded_admissions += stays.len();
            store.excluded_admissions.insert(*hadm_id);
            store.excluded_stays.extend(stays.iter().map(|s| s.icustay_id));
            continue;
        }
        let stay = stays[0];
        let (Some(dob), Some(_)) = (dob_of.get(&stay.subject_id), store.admissions.get(hadm_id))
        else {
            report.stays_unlinked += 1;
            store.excluded_stays.insert(stay.icustay_id);
            continue;
        };
        let mut age_years = (stay.intime - *dob).num_seconds() as f64 / SECONDS_PER_YEAR;
        if age_years > AGE_CAP_YEARS {
            age_years = AGE_CAP_REPLACEMENT;
            report.stays_age_capped += 1;
        }
        if age_years < 18.0 {
            report.stays_under18_excluded += 1;
            store.excluded_stays.insert(stay.icustay_id);
            continue;
        }
        report.stays_kept += 1;
        store.stay_of_admission.insert(*hadm_id, stay.icustay_id);
        store.stays.insert(
            stay.icustay_id,
            StayRecord {
                icustay_id: stay.icustay_id,
                hadm_id: *hadm_id,
                subject_id: stay.subject_id,
                intime: stay.intime,
                outtime: stay.outtime,
                los_days: stay.los_days,
                age_years,
                events: Vec::new(),
            },
        );
    }
    report.patients_with_stays = store
        .stays
        .values()
        .map(|s| s.subject_id)
        .collect::<BTreeSet<_>>()
        .len();
    Ok(store)
}

// ---------------------------------------------------------------------------
// Event validation

/// Attach chart events to kept stays. An event resolves through its stay id
/// when that stay is kept, else through its admission when the admission has
/// exactly one kept stay; references to excluded stays/admissions and
/// dangling references are dropped under separate reasons, and out-of-window
/// times are dropped after resolution.
pub fn validate_events(store: &mut SubjectStore, tables: &RawTables, report: &mut CohortReport) {
    for ev in &tables.events {
        report.events_considered += 1;
        let direct = ev.icustay_id.filter(|id| store.stays.contains_key(id));
        let resolved = match direct {
            Some(id) => Some(id),
            None => {
                if ev.icustay_id.is_some_and(|id| store.excluded_stays.contains(&id)) {
                    report.events_excluded_stay += 1;
                    continue;
                }
                let via_admission = ev
                    .hadm_id
                    .and_then(|h| store.stay_of_admission.get(&h))
                    .copied();
                match via_admission {
                    Some(sid) => {
                        report.events_recovered_via_admission += 1;
                        Some(sid)
                    }
                    None => {
                        let admission_known = ev.hadm_id.is_some_and(|h| {
                            store.admissions.contains_key(&h)
                                || store.excluded_admissions.contains(&h)
                        });
                        if admission_known {
                            // The admission exists but has no kept stay.
                            report.events_excluded_stay += 1;
                        } else {
                            report.events_missing_stay += 1;
                        }
                        continue;
                    }
                }
            }
        };
        let stay = store.stays.get_mut(&resolved.expect("resolved above"));
        let stay = stay.expect("resolved ids point at kept stays");
        if ev.charttime < stay.intime || ev.charttime > stay.outtime {
            report.events_out_of_window += 1;
            continue;
        }
        stay.events.push((ev.charttime, ev.item_id, ev.value.clone()));
        report.events_attached += 1;
    }
    for stay in store.stays.values_mut() {
        stay.events.sort();
    }
}

// ---------------------------------------------------------------------------
// Episode extraction

/// Synthetic chart items are the variable index offset by `ITEM_ID_BASE`.
pub fn item_to_variable(item_id: i64, vars: &VariableSet) -> Option<u8> {
    let v = item_id - ITEM_ID_BASE;
    (0..vars.len() as i64).contains(&v).then_some(v as u8)
}

#[derive(Default)]
struct EpisodeCounts {
    unmapped: usize,
    unparseable: usize,
    outlier: usize,
    unknown_category: usize,
    retained: usize,
}

fn build_episode(
    stay: &StayRecord,
    store: &SubjectStore,
    vars: &VariableSet,
) -> (EpisodeTimeline, EpisodeCounts) {
    let mut counts = EpisodeCounts::default();
    let mut events = Vec::with_capacity(stay.events.len());
    for (time, item_id, raw) in &stay.events {
        let Some(variable) = item_to_variable(*item_id, vars) else {
            counts.unmapped += 1;
            continue;
        };
        let spec = vars.get(variable);
        let value = match &spec.kind {
            VarKind::Continuous { valid_lo, valid_hi, .. } => match raw.parse::<f64>() {
                Err(_) => {
                    counts.unparseable += 1;
                    continue;
                }
                Ok(v) if !v.is_finite() || v < *valid_lo || v > *valid_hi => {
                    counts.outlier += 1;
                    continue;
                }
                Ok(v) => ParsedValue::Continuous(v),
            },
            VarKind::Categorical { .. } => match vars.category_index(variable, raw) {
                Some(idx) => ParsedValue::Category(idx as u8),
                None => {
                    counts.unknown_category += 1;
                    continue;
                }
            },
        };
        counts.retained += 1;
        events.push(TimedValue {
            hours: hours_between(stay.intime, *time),
            variable,
            value,
        });
    }
    events.sort_by(|a, b| {
        a.hours
            .partial_cmp(&b.hours)
            .expect("event hours are finite")
            .then(a.variable.cmp(&b.variable))
    });

    let admission = &store.admissions[&stay.hadm_id];
    let patient = &store.patients[&stay.subject_id];
    let mortality = patient
        .dod
        .is_some_and(|d| d >= admission.admittime && d <= admission.dischtime);
    let episode = EpisodeTimeline {
        stay_id: stay.icustay_id,
        patient_id: stay.subject_id,
        gender: patient.gender.clone(),
        age_years: stay.age_years,
        los_hours: stay.los_days.map(|d| d * 24.0),
        end_hours: hours_between(stay.intime, stay.outtime),
        mortality,
        dod_hours: patient.dod.map(|d| hours_between(stay.intime, d)),
        diagnoses: store.diagnoses.get(&stay.hadm_id).cloned().unwrap_or_default(),
        events,
    };
    (episode, counts)
}

/// Build per-stay timelines from attached events, parsing and cleaning values
/// per the variable config. Zero-event stays still yield (empty) episodes.
pub fn extract_episodes(
    store: &SubjectStore,
    vars: &VariableSet,
    report: &mut CohortReport,
) -> Result<Vec<EpisodeTimeline>> {
    let stays: Vec<&StayRecord> = store.stays.values().collect();
    let built: Vec<(EpisodeTimeline, EpisodeCounts)> = stays
        .par_iter()
        .map(|stay| build_episode(stay, store, vars))
        .collect();
    let mut episodes = Vec::with_capacity(built.len());
    for (episode, counts) in built {
        episode.validate()?;
        report.events_unmapped_item += counts.unmapped;
        report.events_unparseable_value += counts.unparseable;
        report.events_outlier += counts.outlier;
        report.events_unknown_category += counts.unknown_category;
        report.events_retained += counts.retained;
        report.episodes_built += 1;
        if episode.events.is_empty() {
            report.episodes_empty += 1;
        }
        episodes.push(episode);
    }
    Ok(episodes)
}

// ---------------------------------------------------------------------------
// Train/test split

#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub test_patients: BTreeSet<i64>,
    pub fraction: f64,
    pub seed: u64,
}

impl SplitManifest {
    pub fn is_test(&self, patient_id: i64) -> bool {
        self.test_patients.contains(&patient_id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut text = format!("split v1\nfraction {}\nseed {}\n", self.fraction, self.seed);
        for id in &self.test_patients {
            text.push_str(&format!("test {id}\n"));
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SplitManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some("split v1") {
            return Err(Error::Schema {
                message: format!("{} is not a split manifest", path.display()),
            });
        }
        let mut fraction = None;
        let mut seed = None;
        let mut test_patients = BTreeSet::new();
        for line in lines {
            match line.split_once(' ') {
                Some(("fraction", v)) => fraction = v.parse().ok(),
                Some(("seed", v)) => seed = v.parse().ok(),
                Some(("test", v)) => {
                    test_patients.insert(v.parse().map_err(|_| Error::Schema {
                        message: format!("bad test patient id {v:?}"),
                    })?);
                }
                _ => {
                    return Err(Error::Schema {
                        message: format!("bad split line {line:?}"),
                    });
                }
            }
        }
        let (Some(fraction), Some(seed)) = (fraction, seed) else {
            return Err(Error::Schema {
                message: "split manifest missing fraction or seed".to_string(),
            });
        };
        Ok(SplitManifest {
            test_patients,
            fraction,
            seed,
        })
    }
}

/// Patient-level split: `round(fraction · N)` patients go to the test side,
/// chosen by a seeded shuffle, so a patient's stays never straddle the split.
pub fn split_train_test(patients: &[i64], fraction: f64, seed: u64) -> Result<SplitManifest> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "split fraction must be in (0,1), got {fraction}"
        )));
    }
    let unique: BTreeSet<i64> = patients.iter().copied().collect();
    if unique.is_empty() {
        return Err(Error::invalid("cannot split an empty patient set"));
    }
    let mut ids: Vec<i64> = unique.into_iter().collect();
    let n_test = (fraction * ids.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    Ok(SplitManifest {
        test_patients: ids.into_iter().take(n_test).collect(),
        fraction,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Task builders

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskDatasets {
    pub train: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
}

impl TaskDatasets {
    fn push(&mut self, test_side: bool, instance: TaskInstance) {
        if test_side {
            self.test.push(instance);
        } else {
            self.train.push(instance);
        }
    }
}

/// ICU-stay duration used for prediction grids and full-stay windows: the LOS
/// field when present, otherwise the intime→outtime duration.
pub fn stay_end_hours(e: &EpisodeTimeline) -> f64 {
    e.los_hours.unwrap_or(e.end_hours)
}

/// Hourly prediction grid: integer hours from the first prediction hour to
/// the last one not after death or discharge.
pub fn prediction_grid(e: &EpisodeTimeline) -> Vec<u64> {
    let mut end = stay_end_hours(e);
    if e.mortality {
        if let Some(dod) = e.dod_hours {
            end = end.min(dod);
        }
    }
    if end < FIRST_PREDICTION_HOUR as f64 {
        return Vec::new();
    }
    (FIRST_PREDICTION_HOUR..=end.floor() as u64).collect()
}

/// One instance per stay with known LOS ≥ 48h and at least one retained
/// event before hour 48; the target is the in-hospital death flag.
pub fn build_ihm(
    episodes: &[EpisodeTimeline],
    split: &SplitManifest,
    report: &mut CohortReport,
) -> TaskDatasets {
    let mut out = TaskDatasets::default();
    for e in episodes {
        match e.los_hours {
            Some(los) if los >= IHM_WINDOW_HOURS => {}
            _ => {
                report.ihm_excluded_unknown_or_short_los += 1;
                continue;
            }
        }
        if !e.events.iter().any(|ev| ev.hours < IHM_WINDOW_HOURS) {
            report.ihm_excluded_no_early_events += 1;
            continue;
        }
        out.push(
            split.is_test(e.patient_id),
            TaskInstance {
                stay_id: e.stay_id,
                task: Task::Ihm,
                window_end_hours: IHM_WINDOW_HOURS,
                target: Target::Mortality(u8::from(e.mortality)),
            },
        );
    }
    report.instances_train.insert(Task::Ihm, out.train.len());
    report.instances_test.insert(Task::Ihm, out.test.len());
    out
}

/// Hourly instances; positive when an in-hospital death falls inside the
/// next 24 hours (inclusive at both ends).
pub fn build_decomp(
    episodes: &[EpisodeTimeline],
    split: &SplitManifest,
    report: &mut CohortReport,
) -> TaskDatasets {
    let mut out = TaskDatasets::default();
    for e in episodes {
        let test_side = split.is_test(e.patient_id);
        let dod = if e.mortality { e.dod_hours } else { None };
        for tau in prediction_grid(e) {
            let t = tau as f64;
            let label = dod.is_some_and(|d| t <= d && d - t <= 24.0);
            out.push(
                test_side,
                TaskInstance {
                    stay_id: e.stay_id,
                    task: Task::Decomp,
                    window_end_hours: t,
                    target: Target::Decomp(u8::from(label)),
                },
            );
        }
    }
    report.instances_train.insert(Task::Decomp, out.train.len());
    report.instances_test.insert(Task::Decomp, out.test.len());
    out
}

/// Hourly instances over stays with known LOS; the target is the remaining
/// time (clamped at zero) and its bucket.
pub fn build_los(
    episodes: &[EpisodeTimeline],
    split: &SplitManifest,
    report: &mut CohortReport,
) -> Result<TaskDatasets> {
    let scheme = BucketScheme::standard();
    let mut out = TaskDatasets::default();
    for e in episodes {
        let Some(los) = e.los_hours else { continue };
        let test_side = split.is_test(e.patient_id);
        for tau in prediction_grid(e) {
            let remaining = (los - tau as f64).max(0.0);
            let bucket = scheme.bucketize(remaining / 24.0)?;
            out.push(
                test_side,
                TaskInstance {
                    stay_id: e.stay_id,
                    task: Task::Los,
                    window_end_hours: tau as f64,
                    target: Target::Los {
                        remaining_hours: remaining,
                        bucket,
                    },
                },
            );
        }
    }
    report.instances_train.insert(Task::Los, out.train.len());
    report.instances_test.insert(Task::Los, out.test.len());
    Ok(out)
}

/// One full-stay instance per stay — no extra filtering. Codes outside the
/// 25 groups are skipped and counted.
pub fn build_pheno(
    episodes: &[EpisodeTimeline],
    split: &SplitManifest,
    groups: &DiagnosisGroups,
    report: &mut CohortReport,
) -> TaskDatasets {
    let mut out = TaskDatasets::default();
    for e in episodes {
        let mut labels = vec![0u8; N_PHENOTYPES];
        for code in &e.diagnoses {
            match groups.map_code(code) {
                Some(group) => labels[group as usize] = 1,
                None => report.diagnosis_codes_unmapped += 1,
            }
        }
        out.push(
            split.is_test(e.patient_id),
            TaskInstance {
                stay_id: e.stay_id,
                task: Task::Pheno,
                window_end_hours: stay_end_hours(e),
                target: Target::Pheno(labels),
            },
        );
    }
    report.instances_train.insert(Task::Pheno, out.train.len());
    report.instances_test.insert(Task::Pheno, out.test.len());
    out
}

// ---------------------------------------------------------------------------
// Episode files

pub fn stay_file_name(stay_id: i64) -> String {
    format!("{stay_id}_timeseries.csv")
}

pub fn parse_stay_file_name(name: &str) -> Result<i64> {
    name.strip_suffix("_timeseries.csv")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Schema {
            message: format!("bad stay file name {name:?}"),
        })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write one `Hours + 17 variable columns` file per stay (blank = missing)
/// plus a `static.csv` with the per-stay header data. Cell text is the
/// numeric value for continuous variables and the canonical category text
/// for categorical ones, so reading back is exact.
pub fn write_episodes(dir: &Path, episodes: &[EpisodeTimeline], vars: &VariableSet) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let static_path = dir.join("static.csv");
    let file = std::fs::File::create(&static_path).map_err(|e| Error::io(&static_path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record([
        "stay",
        "patient",
        "gender",
        "age_years",
        "los_hours",
        "end_hours",
        "mortality",
        "dod_hours",
        "diagnoses",
    ])
    .map_err(Error::Csv)?;
    for e in episodes {
        w.write_record([
            stay_file_name(e.stay_id),
            e.patient_id.to_string(),
            e.gender.clone(),
            e.age_years.to_string(),
            fmt_opt(e.los_hours),
            e.end_hours.to_string(),
            u8::from(e.mortality).to_string(),
            fmt_opt(e.dod_hours),
            e.diagnoses.join(";"),
        ])
        .map_err(Error::Csv)?;
    }
    w.flush().map_err(|e| Error::io(&static_path, e))?;

    episodes
        .par_iter()
        .try_for_each(|e| write_timeseries(&dir.join(stay_file_name(e.stay_id)), e, vars))
}

fn write_timeseries(path: &Path, e: &EpisodeTimeline, vars: &VariableSet) -> Result<()> {
    // Pivot events into one row per distinct time. Sorting positive finite
    // hours by bit pattern matches numeric order, and round-trips exactly.
    let mut rows: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    for ev in &e.events {
        let row = rows
            .entry(ev.hours.to_bits())
            .or_insert_with(|| vec![String::new(); N_VARIABLES]);
        row[ev.variable as usize] = match &ev.value {
            ParsedValue::Continuous(v) => v.to_string(),
            ParsedValue::Category(idx) => {
                vars.get(ev.variable).categories()[*idx as usize].clone()
            }
        };
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header = vec!["Hours".to_string()];
    header.extend(vars.specs().iter().map(|s| s.name.clone()));
    w.write_record(&header).map_err(Error::Csv)?;
    for (bits, cells) in rows {
        let mut record = vec![f64::from_bits(bits).to_string()];
        record.extend(cells);
        w.write_record(&record).map_err(Error::Csv)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_timeseries(path: &Path, vars: &VariableSet) -> Result<Vec<TimedValue>> {
    let mut rd = csv::Reader::from_path(path).map_err(Error::Csv)?;
    let mut expected = vec!["Hours".to_string()];
    expected.extend(vars.specs().iter().map(|s| s.name.clone()));
    let headers = rd.headers().map_err(Error::Csv)?;
    if headers.iter().map(str::to_string).collect::<Vec<_>>() != expected {
        return Err(Error::Schema {
            message: format!("{}: unexpected columns", path.display()),
        });
    }
    let mut events = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(Error::Csv)?;
        let hours: f64 = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Schema {
                message: format!("{}: bad Hours value", path.display()),
            })?;
        for (i, cell) in rec.iter().enumerate().skip(1) {
            if cell.is_empty() {
                continue;
            }
            let variable = (i - 1) as u8;
            let value = if vars.get(variable).is_continuous() {
                ParsedValue::Continuous(cell.parse().map_err(|_| Error::Schema {
                    message: format!("{}: bad value {cell:?}", path.display()),
                })?)
            } else {
                ParsedValue::Category(
                    vars.category_index(variable, cell)
                        .ok_or_else(|| Error::Schema {
                            message: format!("{}: unknown category {cell:?}", path.display()),
                        })? as u8,
                )
            };
            events.push(TimedValue {
                hours,
                variable,
                value,
            });
        }
    }
    Ok(events)
}

/// Read episodes back from `write_episodes` output.
pub fn read_episodes(dir: &Path, vars: &VariableSet) -> Result<Vec<EpisodeTimeline>> {
    let static_path = dir.join("static.csv");
    let mut rd = csv::Reader::from_path(&static_path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => {
            Error::io(&static_path, std::io::Error::new(std::io::ErrorKind::NotFound, e))
        }
        _ => Error::Csv(e),
    })?;
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(Error::Csv)?;
        let field = |i: usize| rec.get(i).unwrap_or("").to_string();
        let parse_f = |s: String| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| Error::Schema {
                    message: format!("static.csv: bad number {s:?}"),
                })
            }
        };
        rows.push((
            parse_stay_file_name(&field(0))?,
            field(1).parse::<i64>().map_err(|_| Error::Schema {
                message: format!("static.csv: bad patient id {:?}", field(1)),
            })?,
            field(2),
            parse_f(field(3))?.ok_or_else(|| Error::Schema {
                message: "static.csv: missing age".to_string(),
            })?,
            parse_f(field(4))?,
            parse_f(field(5))?.ok_or_else(|| Error::Schema {
                message: "static.csv: missing stay end".to_string(),
            })?,
            field(6) == "1",
            parse_f(field(7))?,
            field(8),
        ));
    }
    let episodes: Vec<EpisodeTimeline> = rows
        .into_par_iter()
        .map(
            |(stay_id, patient_id, gender, age, los, end, mortality, dod, diag)| {
                let events = read_timeseries(&dir.join(stay_file_name(stay_id)), vars)?;
                let episode = EpisodeTimeline {
                    stay_id,
                    patient_id,
                    gender,
                    age_years: age,
                    los_hours: los,
                    end_hours: end,
                    mortality,
                    dod_hours: dod,
                    diagnoses: if diag.is_empty() {
                        Vec::new()
                    } else {
                        diag.split(';').map(str::to_string).collect()
                    },
                    events,
                };
                episode.validate()?;
                Ok(episode)
            },
        )
        .collect::<Result<_>>()?;
    Ok(episodes)
}

// ---------------------------------------------------------------------------
// Listfiles

fn listfile_header(task: Task) -> Vec<String> {
    match task {
        Task::Ihm => vec!["stay".into(), "y_true".into()],
        Task::Decomp | Task::Los => {
            vec!["stay".into(), "period_length".into(), "y_true".into()]
        }
        Task::Pheno => {
            let mut h = vec!["stay".into(), "period_length".into()];
            h.extend((0..N_PHENOTYPES).map(|k| format!("y_{k}")));
            h
        }
    }
}

fn instance_record(inst: &TaskInstance) -> Vec<String> {
    let stay = stay_file_name(inst.stay_id);
    match (&inst.task, &inst.target) {
        (Task::Ihm, Target::Mortality(m)) => vec![stay, m.to_string()],
        (Task::Decomp, Target::Decomp(d)) => {
            vec![stay, inst.window_end_hours.to_string(), d.to_string()]
        }
        // The LOS target is stored as raw remaining hours; the bucket is a
        // pure function of it and is recomputed on load.
        (Task::Los, Target::Los { remaining_hours, .. }) => vec![
            stay,
            inst.window_end_hours.to_string(),
            remaining_hours.to_string(),
        ],
        (Task::Pheno, Target::Pheno(labels)) => {
            let mut rec = vec![stay, inst.window_end_hours.to_string()];
            rec.extend(labels.iter().map(u8::to_string));
            rec
        }
        _ => unreachable!("instance task/target mismatch"),
    }
}

pub fn write_listfile(path: &Path, task: Task, instances: &[TaskInstance]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(listfile_header(task)).map_err(Error::Csv)?;
    for inst in instances {
        debug_assert_eq!(inst.task, task);
        w.write_record(instance_record(inst)).map_err(Error::Csv)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_listfile(path: &Path, task: Task) -> Result<Vec<TaskInstance>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => {
            Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, e))
        }
        _ => Error::Csv(e),
    })?;
    let headers: Vec<String> = rd
        .headers()
        .map_err(Error::Csv)?
        .iter()
        .map(str::to_string)
        .collect();
    if headers != listfile_header(task) {
        return Err(Error::Schema {
            message: format!("{}: unexpected listfile columns", path.display()),
        });
    }
    let scheme = BucketScheme::standard();
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(Error::Csv)?;
        let bad = |what: &str| Error::Schema {
            message: format!("{}: bad {what}", path.display()),
        };
        let stay_id = parse_stay_file_name(rec.get(0).unwrap_or(""))?;
        let num = |i: usize, what: &str| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(what))
        };
        let inst = match task {
            Task::Ihm => TaskInstance {
                stay_id,
                task,
                window_end_hours: IHM_WINDOW_HOURS,
                target: Target::Mortality(num(1, "label")? as u8),
            },
            Task::Decomp => TaskInstance {
                stay_id,
                task,
                window_end_hours: num(1, "period length")?,
                target: Target::Decomp(num(2, "label")? as u8),
            },
            Task::Los => {
                let remaining = num(2, "remaining hours")?;
                TaskInstance {
                    stay_id,
                    task,
                    window_end_hours: num(1, "period length")?,
                    target: Target::Los {
                        remaining_hours: remaining,
                        bucket: scheme.bucketize(remaining / 24.0)?,
                    },
                }
            }
            Task::Pheno => {
                let labels: Vec<u8> = (0..N_PHENOTYPES)
                    .map(|k| num(2 + k, "label").map(|v| v as u8))
                    .collect::<Result<_>>()?;
                TaskInstance {
                    stay_id,
                    task,
                    window_end_hours: num(1, "period length")?,
                    target: Target::Pheno(labels),
                }
            }
        };
        out.push(inst);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Orchestration

#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    pub fraction: f64,
    pub seed: u64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            fraction: 0.15,
            seed: 0,
        }
    }
}

pub struct BuildOutput {
    pub report: CohortReport,
    pub split: SplitManifest,
    pub episodes: Vec<EpisodeTimeline>,
    pub datasets: BTreeMap<Task, TaskDatasets>,
}

/// Run every construction stage over the tables in `tables_dir` and write
/// episodes, split manifest, per-task listfiles, and the cohort report under
/// `out_dir`.
pub fn run_build(tables_dir: &Path, out_dir: &Path, opts: &BuildOptions) -> Result<BuildOutput> {
    let vars = VariableSet::builtin();
    let groups = DiagnosisGroups::builtin();
    let mut report = CohortReport::default();

    let tables = read_tables(tables_dir, &mut report)?;
    let mut store = extract_subjects(&tables, &mut report)?;
    validate_events(&mut store, &tables, &mut report);
    let episodes = extract_episodes(&store, vars, &mut report)?;

    let patients: Vec<i64> = episodes.iter().map(|e| e.patient_id).collect();
    let split = split_train_test(&patients, opts.fraction, opts.seed)?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_episodes(&out_dir.join("episodes"), &episodes, vars)?;
    split.save(&out_dir.join("split.txt"))?;

    let mut datasets = BTreeMap::new();
    datasets.insert(Task::Ihm, build_ihm(&episodes, &split, &mut report));
    datasets.insert(Task::Decomp, build_decomp(&episodes, &split, &mut report));
    datasets.insert(Task::Los, build_los(&episodes, &split, &mut report)?);
    datasets.insert(
        Task::Pheno,
        build_pheno(&episodes, &split, groups, &mut report),
    );
    for (task, data) in &datasets {
        let task_dir = out_dir.join(task.name());
        std::fs::create_dir_all(&task_dir).map_err(|e| Error::io(&task_dir, e))?;
        write_listfile(&task_dir.join("train_listfile.csv"), *task, &data.train)?;
        write_listfile(&task_dir.join("test_listfile.csv"), *task, &data.test)?;
    }

    report.check_conservation()?;
    report.save(&out_dir.join("cohort_report.txt"))?;
    Ok(BuildOutput {
        report,
        split,
        episodes,
        datasets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn t(day: u32, hour: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2141, 1, day)
            .unwrap()
            .and_hms_opt(hour, 0, 0)
            .unwrap()
    }

    fn dob_for_age(intime: NaiveDateTime, age_years: f64) -> NaiveDateTime {
        intime - chrono::Duration::seconds((age_years * SECONDS_PER_YEAR) as i64)
    }

    fn base_tables() -> RawTables {
        let intime = t(2, 8);
        RawTables {
            patients: vec![PatientRow {
                subject_id: 1,
                gender: "F".into(),
                dob: dob_for_age(intime, 40.0),
                dod: None,
            }],
            admissions: vec![AdmissionRow {
                subject_id: 1,
                hadm_id: 10,
                admittime: t(1, 12),
                dischtime: t(9, 12),
                deathtime: None,
            }],
            stays: vec![StayRow {
                subject_id: 1,
                hadm_id: 10,
                icustay_id: 100,
                intime,
                outtime: t(6, 8),
                los_days: Some(4.0),
            }],
            events: Vec::new(),
            diagnoses: Vec::new(),
        }
    }

    #[test]
    fn age_boundaries() {
        // 17-year-old excluded; exactly 18.0 kept; 300-year artifact kept as 90.
        let mut tables = base_tables();
        let intime = tables.stays[0].intime;
        tables.patients[0].dob = dob_for_age(intime, 17.0);
        let mut report = CohortReport::default();
        let store = extract_subjects(&tables, &mut report).unwrap();
        assert_eq!(store.stays.len(), 0);
        assert_eq!(report.stays_under18_excluded, 1);

        tables.patients[0].dob = dob_for_age(intime, 18.0);
        let mut report = CohortReport::default();
        let store = extract_subjects(&tables, &mut report).unwrap();
        assert_eq!(store.stays.len(), 1);
        assert!((store.stays[&100].age_years - 18.0).abs() < 1e-9);

        tables.patients[0].dob = dob_for_age(intime, 300.0);
        let mut report = CohortReport::default();
        let store = extract_subjects(&tables, &mut report).unwrap();
        assert_eq!(store.stays[&100].age_years, 90.0);
        assert_eq!(report.stays_age_capped, 1);
    }

    #[test]
    fn multi_stay_admission_excluded() {
        let mut tables = base_tables();
        tables.stays.push(StayRow {
            subject_id: 1,
            hadm_id: 10,
            icustay_id: 101,
            intime: t(7, 8),
            outtime: t(8, 8),
            los_days: Some(1.0),
        });
        let mut report = CohortReport::default();
        let store = extract_subjects(&tables, &mut report).unwrap();
        assert!(store.stays.is_empty());
        assert_eq!(report.admissions_multi_stay_excluded, 1);
        assert_eq!(report.stays_in_excluded_admissions, 2);
    }

    #[test]
    fn event_validation_reasons() {
        let mut tables = base_tables();
        let hr_item = ITEM_ID_BASE + 8;
        tables.events = vec![
            // In-window, direct stay reference: attached.
            EventRow {
                hadm_id: Some(10),
                icustay_id: Some(100),
                charttime: t(3, 0),
                item_id: hr_item,
                value: "88".into(),
            },
            // Empty stay id, recoverable via the admission's unique stay.
            EventRow {
                hadm_id: Some(10),
                icustay_id: None,
                charttime: t(3, 1),
                item_id: hr_item,
                value: "90".into(),
            },
            // Before intime: out of window.
            EventRow {
                hadm_id: Some(10),
                icustay_id: Some(100),
                charttime: t(1, 20),
                item_id: hr_item,
                value: "92".into(),
            },
            // Dangling references: orphan.
            EventRow {
                hadm_id: Some(999),
                icustay_id: Some(9999),
                charttime: t(3, 2),
                item_id: hr_item,
                value: "94".into(),
            },
        ];
        let mut report = CohortReport::default();
        let mut store = extract_subjects(&tables, &mut report).unwrap();
        validate_events(&mut store, &tables, &mut report);
        assert_eq!(report.events_attached, 2);
        assert_eq!(report.events_recovered_via_admission, 1);
        assert_eq!(report.events_out_of_window, 1);
        assert_eq!(report.events_missing_stay, 1);
        assert_eq!(store.stays[&100].events.len(), 2);
        extract_episodes(&store, VariableSet::builtin(), &mut report).unwrap();
        report.check_conservation().unwrap();
    }

    #[test]
    fn episode_cleaning_drops_outliers_and_unknown_categories() {
        let mut tables = base_tables();
        let hr_item = ITEM_ID_BASE + 8;
        let gcs_verbal_item = ITEM_ID_BASE + 6;
        tables.events = vec![
            EventRow {
                hadm_id: Some(10),
                icustay_id: Some(100),
                charttime: t(2, 9),
                item_id: hr_item,
                value: "950".into(),
            },
            EventRow {
                hadm_id: Some(10),
                icustay_id: Some(100),
                charttime: t(2, 10),
                item_id: hr_item,
                value: "95".into(),
            },
            EventRow {
                hadm_id: Some(10),
                icustay_id: Some(100),
                charttime: t(2, 11),
                item_id: gcs_verbal_item,
                value: "not a response".into(),
            },
            EventRow {
                hadm_id: Some(10),
                icustay_id: Some(100),
                charttime: t(2, 12),
                item_id: 777,
                value: "1".into(),
            },
        ];
        let mut report = CohortReport::default();
        let mut store = extract_subjects(&tables, &mut report).unwrap();
        validate_events(&mut store, &tables, &mut report);
        let episodes = extract_episodes(&store, VariableSet::builtin(), &mut report).unwrap();
        assert_eq!(report.events_outlier, 1);
        assert_eq!(report.events_unknown_category, 1);
        assert_eq!(report.events_unmapped_item, 1);
        assert_eq!(report.events_retained, 1);
        assert_eq!(episodes[0].events.len(), 1);
        assert_eq!(episodes[0].events[0].value, ParsedValue::Continuous(95.0));
        report.check_conservation().unwrap();
    }

    fn episode(stay_id: i64, patient_id: i64, los: Option<f64>, dod: Option<f64>) -> EpisodeTimeline {
        EpisodeTimeline {
            stay_id,
            patient_id,
            gender: "M".into(),
            age_years: 60.0,
            los_hours: los,
            end_hours: los.unwrap_or(72.0),
            mortality: dod.is_some(),
            dod_hours: dod,
            diagnoses: Vec::new(),
            events: vec![TimedValue {
                hours: 1.0,
                variable: 8,
                value: ParsedValue::Continuous(80.0),
            }],
        }
    }

    fn everyone_train() -> SplitManifest {
        SplitManifest {
            test_patients: BTreeSet::new(),
            fraction: 0.15,
            seed: 0,
        }
    }

    #[test]
    fn decomp_labels_by_gap() {
        // Death at hour 30: positive from τ=6 (gap 24) through τ=30 (gap 0);
        // τ=5 has gap 25 and stays negative.
        let eps = vec![episode(1, 1, Some(100.0), Some(30.0))];
        let mut report = CohortReport::default();
        let ds = build_decomp(&eps, &everyone_train(), &mut report);
        assert_eq!(ds.train.len(), 27); // τ = 4..=30
        for inst in &ds.train {
            let tau = inst.window_end_hours;
            let expect = u8::from(tau >= 6.0);
            assert_eq!(inst.target, Target::Decomp(expect), "τ={tau}");
        }
    }

    #[test]
    fn survivor_grid_has_47_instances() {
        let eps = vec![episode(1, 1, Some(50.0), None)];
        let mut report = CohortReport::default();
        let ds = build_decomp(&eps, &everyone_train(), &mut report);
        assert_eq!(ds.train.len(), 47);
        assert!(ds.train.iter().all(|i| i.target == Target::Decomp(0)));
    }

    #[test]
    fn los_remaining_and_buckets() {
        let eps = vec![episode(1, 1, Some(100.0), None)];
        let mut report = CohortReport::default();
        let ds = build_los(&eps, &everyone_train(), &mut report).unwrap();
        let at = |tau: f64| {
            ds.train
                .iter()
                .find(|i| i.window_end_hours == tau)
                .unwrap()
                .target
                .clone()
        };
        assert_eq!(
            at(4.0),
            Target::Los {
                remaining_hours: 96.0,
                bucket: 4
            }
        );
        assert_eq!(
            at(90.0),
            Target::Los {
                remaining_hours: 10.0,
                bucket: 0
            }
        );
    }

    #[test]
    fn ihm_filters() {
        let mut short = episode(1, 1, Some(40.0), None);
        short.events[0].hours = 2.0;
        let mut no_early = episode(2, 2, Some(60.0), None);
        no_early.events[0].hours = 50.0;
        let mut unknown = episode(3, 3, None, None);
        unknown.events[0].hours = 2.0;
        let kept = episode(4, 4, Some(60.0), Some(55.0));
        let eps = vec![short, no_early, unknown, kept];
        let mut report = CohortReport::default();
        let ds = build_ihm(&eps, &everyone_train(), &mut report);
        assert_eq!(ds.train.len(), 1);
        assert_eq!(ds.train[0].stay_id, 4);
        assert_eq!(ds.train[0].target, Target::Mortality(1));
        assert_eq!(report.ihm_excluded_unknown_or_short_los, 2);
        assert_eq!(report.ihm_excluded_no_early_events, 1);
    }

    #[test]
    fn pheno_sets_mapped_bits_and_emits_empty_rows() {
        let groups = DiagnosisGroups::builtin();
        let mut with_codes = episode(1, 1, Some(60.0), None);
        // Pick concrete codes from two known groups plus an unmapped one.
        with_codes.diagnoses =
            vec!["42822".to_string(), "03849".to_string(), "V1234".to_string()];
        let bare = episode(2, 2, Some(60.0), None);
        let eps = vec![with_codes, bare];
        let mut report = CohortReport::default();
        let ds = build_pheno(&eps, &everyone_train(), groups, &mut report);
        assert_eq!(ds.train.len(), 2);
        let Target::Pheno(labels) = &ds.train[0].target else {
            panic!("wrong target kind")
        };
        assert_eq!(labels.iter().map(|&b| b as usize).sum::<usize>(), 2);
        let Target::Pheno(labels) = &ds.train[1].target else {
            panic!("wrong target kind")
        };
        assert!(labels.iter().all(|&b| b == 0));
        assert_eq!(report.diagnosis_codes_unmapped, 1);
    }

    #[test]
    fn split_is_deterministic_and_sized() {
        let patients: Vec<i64> = (0..100).collect();
        let a = split_train_test(&patients, 0.15, 9).unwrap();
        let b = split_train_test(&patients, 0.15, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.test_patients.len(), 15);
        let c = split_train_test(&patients, 0.15, 10).unwrap();
        assert_ne!(a.test_patients, c.test_patients);
        assert!(split_train_test(&patients, 1.5, 0).is_err());
        assert!(split_train_test(&[], 0.15, 0).is_err());
    }

    #[test]
    fn split_manifest_round_trips() {
        let patients: Vec<i64> = (0..40).collect();
        let split = split_train_test(&patients, 0.2, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.txt");
        split.save(&path).unwrap();
        assert_eq!(SplitManifest::load(&path).unwrap(), split);
    }

    #[test]
    fn missing_los_stay_skips_ihm_and_los_but_not_decomp_or_pheno() {
        let eps = vec![episode(1, 1, None, None)];
        let mut report = CohortReport::default();
        assert!(build_ihm(&eps, &everyone_train(), &mut report).train.is_empty());
        assert!(build_los(&eps, &everyone_train(), &mut report)
            .unwrap()
            .train
            .is_empty());
        // end_hours = 72 → grid 4..=72.
        assert_eq!(
            build_decomp(&eps, &everyone_train(), &mut report).train.len(),
            69
        );
        assert_eq!(
            build_pheno(&eps, &everyone_train(), DiagnosisGroups::builtin(), &mut report)
                .train
                .len(),
            1
        );
    }
}
