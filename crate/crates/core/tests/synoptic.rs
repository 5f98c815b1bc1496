mod common;

use common::{brute_force_events, random_codes, series_from};
use heatwarn::synoptic::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use SscCode::*;

fn code() -> impl Strategy<Value = SscCode> {
    (0..SscCode::ALL.len()).prop_map(|i| SscCode::ALL[i])
}

#[test]
fn detector_matches_brute_force_on_random_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10_000 {
        let codes = random_codes(&mut rng, 30);
        assert_eq!(detect_runs(&codes), brute_force_events(&codes), "{codes:?}");
    }
}

proptest! {
    #[test]
    fn events_are_sorted_disjoint_and_bounded(codes in proptest::collection::vec(code(), 0..60)) {
        let runs = detect_runs(&codes);
        prop_assert_eq!(&runs, &brute_force_events(&codes));
        for w in runs.windows(2) {
            // maximal runs are separated by at least one non-qualifying day
            prop_assert!(w[0].1 + 1 < w[1].0);
        }
        for &(s, e) in &runs {
            prop_assert!(s <= e && e < codes.len());
            for t in s..=e {
                prop_assert!(day_qualifies(&codes, t));
            }
            if s > 0 {
                prop_assert!(!day_qualifies(&codes, s - 1));
            }
            if e + 1 < codes.len() {
                prop_assert!(!day_qualifies(&codes, e + 1));
            }
        }
    }

    #[test]
    fn other_and_short_inputs_never_qualify(codes in proptest::collection::vec(code(), 0..3)) {
        prop_assert!(detect_runs(&codes).is_empty());
        let others = vec![OTHER; codes.len() + 5];
        prop_assert!(detect_runs(&others).is_empty());
    }
}

#[test]
fn mixed_window_includes_polar_day() {
    assert!(window_qualifies(&[DT, MT, DP]));
    assert_eq!(detect_runs(&[DP, DT, MT, DP, DM]), vec![(0, 3)]);
    assert_eq!(detect_runs(&[DM, DM, DT, MT, DP]), vec![(1, 4)]);
}

#[test]
fn series_level_examples() {
    let codes = [DM, DT, DT, DT, DM];
    let series = series_from("2020-07-01", &[1.0; 5], &codes);
    let events = detect_heatwaves(&series).unwrap();
    assert_eq!(events.len(), 1);
    assert_eq!(events[0].start, common::date("2020-07-02"));
    assert_eq!(events[0].end, common::date("2020-07-04"));
    assert_eq!(events[0].length, 3);

    let series = series_from("2020-07-01", &[1.0; 10], &[DT; 10]);
    let events = detect_heatwaves(&series).unwrap();
    assert_eq!(events.len(), 1);
    assert_eq!(events[0].length, 10);

    let series = series_from("2020-07-01", &[1.0; 10], &[DM; 10]);
    assert!(detect_heatwaves(&series).unwrap().is_empty());
}

#[test]
fn events_csv_layout() {
    let series = series_from("2020-07-01", &[1.0; 5], &[DM, DT, DT, DT, DM]);
    let mut out = Vec::new();
    write_events_csv(&detect_heatwaves(&series).unwrap(), &mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap(), "start,end,length\n2020-07-02,2020-07-04,3\n");
}
