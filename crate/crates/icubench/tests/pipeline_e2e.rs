//! End-to-end checks of benchmark construction on a generated cohort: every
//! planted anomaly must be dropped under its matching reason (exact counts,
//! not tolerances), task labels must agree with an independent relabeling
//! from the raw tables, the patient split must be leak-free, and every
//! on-disk artifact must round-trip exactly.

use chrono::NaiveDateTime;
use icubench::config::DiagnosisGroups;
use icubench::pipeline::{
    self, read_episodes, read_listfile, BuildOptions, BuildOutput, SplitManifest,
};
use icubench::syngen::{self, SynthConfig};
use icubench::types::{BucketScheme, Target, Task, N_PHENOTYPES, SECONDS_PER_YEAR};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

fn build_cohort(seed: u64, n: usize) -> (tempfile::TempDir, syngen::GenerationReport, BuildOutput) {
    let dir = tempfile::tempdir().unwrap();
    let tables = dir.path().join("tables");
    let gen_report = syngen::generate(&SynthConfig::new(seed, n), &tables).unwrap();
    let built = pipeline::run_build(&tables, &dir.path().join("bench"), &BuildOptions::default())
        .unwrap();
    (dir, gen_report, built)
}

#[test]
fn exclusion_counts_match_generator_ground_truth() {
    let (_dir, gen, built) = build_cohort(7, 200);
    let r = &built.report;

    assert_eq!(r.rows_patients, gen.patients);
    assert_eq!(r.rows_admissions, gen.admissions);
    assert_eq!(r.rows_stays, gen.stays);
    assert_eq!(r.rows_events, gen.events);
    assert_eq!(r.rows_diagnoses, gen.diagnosis_rows);
    assert_eq!(r.rows_dropped_parse, 0, "{:?}", r.parse_notes);

    assert_eq!(r.admissions_multi_stay_excluded, gen.multi_stay_admissions);
    assert_eq!(r.stays_in_excluded_admissions, gen.multi_stay_stays);
    assert_eq!(r.stays_under18_excluded, gen.under18_stays);
    assert_eq!(r.stays_age_capped, gen.shifted_dob_patients);
    assert_eq!(r.stays_unlinked, 0);
    assert_eq!(r.stays_kept, gen.clean_stays);
    assert_eq!(r.episodes_built, gen.clean_stays);

    assert_eq!(r.events_missing_stay, gen.orphan_events);
    assert_eq!(r.events_recovered_via_admission, gen.empty_stay_id_events);
    assert_eq!(r.events_out_of_window, gen.out_of_window_events);
    assert_eq!(r.events_unmapped_item, gen.unknown_item_events);
    assert_eq!(r.events_outlier, gen.outlier_values);
    assert_eq!(r.events_unknown_category, gen.unknown_category_values);
    assert_eq!(r.events_unparseable_value, 0);

    r.check_conservation().unwrap();
    // Anomaly bands are exercised at this cohort size, so the equalities
    // above are not vacuous.
    assert!(gen.multi_stay_admissions > 0);
    assert!(gen.under18_stays > 0);
    assert!(gen.shifted_dob_patients > 0);
    assert!(gen.missing_los_stays > 0);
    assert!(gen.orphan_events > 0);
    assert!(gen.empty_stay_id_events > 0);
    assert!(gen.out_of_window_events > 0);
    assert!(gen.unknown_item_events > 0);
    assert!(gen.outlier_values > 0);
    assert!(gen.unknown_category_values > 0);
}

#[test]
fn ihm_cohort_and_labels_match_generator() {
    let (_dir, gen, built) = build_cohort(7, 200);
    let ds = &built.datasets[&Task::Ihm];
    let all: Vec<_> = ds.train.iter().chain(&ds.test).collect();
    assert_eq!(all.len(), gen.ihm_eligible_stays);
    let positives = all
        .iter()
        .filter(|i| i.target == Target::Mortality(1))
        .count();
    assert_eq!(positives, gen.ihm_deaths);
    assert!(gen.ihm_deaths > 0);
    assert!(gen.ihm_eligible_stays > gen.ihm_deaths);
}

// --- independent relabeling from the raw tables -------------------------

fn t(s: &str) -> NaiveDateTime {
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S").unwrap()
}

fn read_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut rd = csv::Reader::from_path(path).unwrap();
    let headers: Vec<String> = rd.headers().unwrap().iter().map(str::to_string).collect();
    rd.records()
        .map(|r| {
            headers
                .iter()
                .cloned()
                .zip(r.unwrap().iter().map(str::to_string))
                .collect()
        })
        .collect()
}

struct RelabeledStay {
    patient_id: i64,
    los_hours: Option<f64>,
    end_hours: f64,
    mortality: bool,
    dod_hours: Option<f64>,
    diagnoses: Vec<String>,
}

/// Rebuild the kept cohort and its per-stay death/duration facts straight
/// from the CSVs, sharing no code with the construction stages.
fn relabel(tables: &Path) -> BTreeMap<i64, RelabeledStay> {
    let mut dob = BTreeMap::new();
    let mut dod = BTreeMap::new();
    for row in read_rows(&tables.join("PATIENTS.csv")) {
        let sid: i64 = row["SUBJECT_ID"].parse().unwrap();
        dob.insert(sid, t(&row["DOB"]));
        if !row["DOD"].is_empty() {
            dod.insert(sid, t(&row["DOD"]));
        }
    }
    let mut admit = BTreeMap::new();
    for row in read_rows(&tables.join("ADMISSIONS.csv")) {
        let hadm: i64 = row["HADM_ID"].parse().unwrap();
        admit.insert(hadm, (t(&row["ADMITTIME"]), t(&row["DISCHTIME"])));
    }
    let mut diagnoses: BTreeMap<i64, Vec<String>> = BTreeMap::new();
    for row in read_rows(&tables.join("DIAGNOSES.csv")) {
        diagnoses
            .entry(row["HADM_ID"].parse().unwrap())
            .or_default()
            .push(row["ICD9_CODE"].clone());
    }

    let stay_rows = read_rows(&tables.join("ICUSTAYS.csv"));
    let mut stays_per_admission: BTreeMap<i64, usize> = BTreeMap::new();
    for row in &stay_rows {
        *stays_per_admission
            .entry(row["HADM_ID"].parse().unwrap())
            .or_default() += 1;
    }

    let mut out = BTreeMap::new();
    for row in &stay_rows {
        let hadm: i64 = row["HADM_ID"].parse().unwrap();
        if stays_per_admission[&hadm] > 1 {
            continue;
        }
        let sid: i64 = row["SUBJECT_ID"].parse().unwrap();
        let intime = t(&row["INTIME"]);
        let mut age = (intime - dob[&sid]).num_seconds() as f64 / SECONDS_PER_YEAR;
        if age > 120.0 {
            age = 90.0;
        }
        if age < 18.0 {
            continue;
        }
        let (admittime, dischtime) = admit[&hadm];
        let hours = |to: NaiveDateTime| (to - intime).num_seconds() as f64 / 3600.0;
        out.insert(
            row["ICUSTAY_ID"].parse().unwrap(),
            RelabeledStay {
                patient_id: sid,
                los_hours: if row["LOS"].is_empty() {
                    None
                } else {
                    Some(row["LOS"].parse::<f64>().unwrap() * 24.0)
                },
                end_hours: hours(t(&row["OUTTIME"])),
                mortality: dod
                    .get(&sid)
                    .is_some_and(|d| *d >= admittime && *d <= dischtime),
                dod_hours: dod.get(&sid).map(|d| hours(*d)),
                diagnoses: diagnoses.get(&hadm).cloned().unwrap_or_default(),
            },
        );
    }
    out
}

fn grid(stay: &RelabeledStay) -> Vec<u64> {
    let mut end = stay.los_hours.unwrap_or(stay.end_hours);
    if stay.mortality {
        end = end.min(stay.dod_hours.unwrap());
    }
    if end < 4.0 {
        return Vec::new();
    }
    (4..=end.floor() as u64).collect()
}

#[test]
fn task_labels_match_independent_relabeling() {
    let (dir, _gen, built) = build_cohort(7, 200);
    let truth = relabel(&dir.path().join("tables"));
    assert_eq!(
        truth.keys().copied().collect::<BTreeSet<_>>(),
        built.episodes.iter().map(|e| e.stay_id).collect::<BTreeSet<_>>()
    );
    for e in &built.episodes {
        assert_eq!(e.patient_id, truth[&e.stay_id].patient_id);
    }
    let bench = dir.path().join("bench");

    // Decompensation, read back from the listfiles on disk.
    let mut decomp: BTreeMap<i64, BTreeMap<u64, u8>> = BTreeMap::new();
    for name in ["train_listfile.csv", "test_listfile.csv"] {
        for inst in read_listfile(&bench.join("decomp").join(name), Task::Decomp).unwrap() {
            let Target::Decomp(label) = inst.target else {
                panic!("wrong target kind")
            };
            let dup = decomp
                .entry(inst.stay_id)
                .or_default()
                .insert(inst.window_end_hours as u64, label);
            assert!(dup.is_none(), "duplicate instance");
        }
    }
    let mut n_decomp = 0usize;
    for (stay_id, stay) in &truth {
        let expect: BTreeMap<u64, u8> = grid(stay)
            .into_iter()
            .map(|tau| {
                let label = stay.mortality && {
                    let d = stay.dod_hours.unwrap();
                    tau as f64 <= d && d - tau as f64 <= 24.0
                };
                (tau, u8::from(label))
            })
            .collect();
        n_decomp += expect.len();
        assert_eq!(
            decomp.get(stay_id).unwrap_or(&BTreeMap::new()),
            &expect,
            "stay {stay_id}"
        );
    }
    assert_eq!(decomp.values().map(BTreeMap::len).sum::<usize>(), n_decomp);

    // Length of stay: exact remaining-hours bits and recomputed bucket.
    let scheme = BucketScheme::standard();
    let mut los: BTreeMap<i64, BTreeMap<u64, (u64, u8)>> = BTreeMap::new();
    for name in ["train_listfile.csv", "test_listfile.csv"] {
        for inst in read_listfile(&bench.join("los").join(name), Task::Los).unwrap() {
            let Target::Los {
                remaining_hours,
                bucket,
            } = inst.target
            else {
                panic!("wrong target kind")
            };
            los.entry(inst.stay_id)
                .or_default()
                .insert(inst.window_end_hours as u64, (remaining_hours.to_bits(), bucket));
        }
    }
    for (stay_id, stay) in &truth {
        let expect: BTreeMap<u64, (u64, u8)> = match stay.los_hours {
            None => BTreeMap::new(),
            Some(los_h) => grid(stay)
                .into_iter()
                .map(|tau| {
                    let remaining = (los_h - tau as f64).max(0.0);
                    let bucket = scheme.bucketize(remaining / 24.0).unwrap();
                    (tau, (remaining.to_bits(), bucket))
                })
                .collect(),
        };
        assert_eq!(
            los.get(stay_id).unwrap_or(&BTreeMap::new()),
            &expect,
            "stay {stay_id}"
        );
        // Known-LOS stays predict on the same hours in both hourly tasks.
        if stay.los_hours.is_some() {
            assert_eq!(
                los.get(stay_id).map(|m| m.keys().copied().collect::<Vec<_>>()),
                decomp.get(stay_id).map(|m| m.keys().copied().collect()),
            );
        }
    }

    // Phenotyping: every kept stay appears once, with bits from a direct
    // prefix mapping of its diagnosis codes.
    let groups = DiagnosisGroups::builtin();
    let mut pheno_rows: BTreeMap<i64, Vec<u8>> = BTreeMap::new();
    for name in ["train_listfile.csv", "test_listfile.csv"] {
        for inst in read_listfile(&bench.join("pheno").join(name), Task::Pheno).unwrap() {
            let Target::Pheno(labels) = inst.target else {
                panic!("wrong target kind")
            };
            assert!(pheno_rows.insert(inst.stay_id, labels).is_none());
        }
    }
    assert_eq!(pheno_rows.len(), truth.len());
    for (stay_id, stay) in &truth {
        let mut expect = vec![0u8; N_PHENOTYPES];
        for code in &stay.diagnoses {
            if let Some(g) = groups.map_code(code) {
                expect[g as usize] = 1;
            }
        }
        assert_eq!(&pheno_rows[stay_id], &expect, "stay {stay_id}");
    }
}

#[test]
fn split_is_leak_free_and_correctly_sized() {
    let (dir, _gen, built) = build_cohort(7, 200);
    let patients: BTreeSet<i64> = built.episodes.iter().map(|e| e.patient_id).collect();
    let expected_test = (0.15 * patients.len() as f64).round() as usize;
    assert_eq!(built.split.test_patients.len(), expected_test);
    assert!(built.split.test_patients.is_subset(&patients));

    let patient_of: BTreeMap<i64, i64> = built
        .episodes
        .iter()
        .map(|e| (e.stay_id, e.patient_id))
        .collect();
    let bench = dir.path().join("bench");
    for task in Task::ALL {
        let dir = bench.join(task.name());
        for inst in read_listfile(&dir.join("train_listfile.csv"), task).unwrap() {
            assert!(
                !built.split.is_test(patient_of[&inst.stay_id]),
                "test patient in {} train file",
                task.name()
            );
        }
        for inst in read_listfile(&dir.join("test_listfile.csv"), task).unwrap() {
            assert!(
                built.split.is_test(patient_of[&inst.stay_id]),
                "train patient in {} test file",
                task.name()
            );
        }
    }
}

#[test]
fn artifacts_round_trip_exactly() {
    let (dir, _gen, built) = build_cohort(11, 120);
    let bench = dir.path().join("bench");

    let reread = read_episodes(&bench.join("episodes"), icubench::config::VariableSet::builtin())
        .unwrap();
    assert_eq!(reread, built.episodes);

    assert_eq!(SplitManifest::load(&bench.join("split.txt")).unwrap(), built.split);

    for task in Task::ALL {
        let data = &built.datasets[&task];
        let dir = bench.join(task.name());
        assert_eq!(
            read_listfile(&dir.join("train_listfile.csv"), task).unwrap(),
            data.train
        );
        assert_eq!(
            read_listfile(&dir.join("test_listfile.csv"), task).unwrap(),
            data.test
        );
    }

    assert!(bench.join("cohort_report.txt").exists());
}

#[test]
fn rebuilding_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let tables = dir.path().join("tables");
    syngen::generate(&SynthConfig::new(3, 60), &tables).unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    pipeline::run_build(&tables, &out_a, &BuildOptions::default()).unwrap();
    pipeline::run_build(&tables, &out_b, &BuildOptions::default()).unwrap();

    fn walk(root: &Path, base: &Path, files: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(root).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, base, files);
            } else {
                let rel = path.strip_prefix(base).unwrap().to_string_lossy().to_string();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let (mut a, mut b) = (BTreeMap::new(), BTreeMap::new());
    walk(&out_a, &out_a, &mut a);
    walk(&out_b, &out_b, &mut b);
    assert_eq!(
        a.keys().collect::<Vec<_>>(),
        b.keys().collect::<Vec<_>>()
    );
    for (name, bytes) in &a {
        assert_eq!(bytes, &b[name], "{name} differs between rebuilds");
    }
}
