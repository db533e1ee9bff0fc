//! Property tests for the shared domain types and config tables.

use icubench::config::VariableSet;
use icubench::types::BucketScheme;
use proptest::prelude::*;

proptest! {
    #[test]
    fn bucketize_is_monotone(a in 0.0f64..400.0, b in 0.0f64..400.0) {
        let s = BucketScheme::standard();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(s.bucketize(lo).unwrap() <= s.bucketize(hi).unwrap());
    }

    #[test]
    fn bucketize_total_on_valid_domain(x in 0.0f64..1e6) {
        let s = BucketScheme::standard();
        let b = s.bucketize(x).unwrap();
        prop_assert!((b as usize) < s.bucket_count());
    }
}

#[test]
fn bucketize_surjective_over_dense_sweep() {
    let s = BucketScheme::standard();
    let mut hit = vec![false; s.bucket_count()];
    let mut x = 0.0;
    while x < 20.0 {
        hit[s.bucketize(x).unwrap() as usize] = true;
        x += 0.01;
    }
    assert!(hit.iter().all(|&h| h), "not surjective: {hit:?}");
}

#[test]
fn variable_config_round_trip_through_file() {
    let set = VariableSet::builtin();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("variables.cfg");
    std::fs::write(&path, set.to_text()).unwrap();
    let reloaded = VariableSet::load(&path).unwrap();
    assert_eq!(*set, reloaded);
}
