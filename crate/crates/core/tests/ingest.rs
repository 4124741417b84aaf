use std::path::PathBuf;

use tdag_core::compgraph::{build_dag, validate_dag};
use tdag_core::ingest::{classify_active, parse_csv, parse_csv_path, write_csv, Partition, Threshold};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/ten_rows.csv")
}

#[test]
fn ten_row_log_parses_to_known_stream() {
    let parsed = parse_csv_path(fixture()).unwrap();
    let s = &parsed.stream;
    // row with timestamp 14 arrives after 15.5
    assert_eq!(parsed.out_of_order_rows, 1);
    assert_eq!(s.len(), 10);
    assert_eq!((s.n_users, s.n_items), (4, 4));
    assert_eq!(s.ids.users, vec![1001, 1002, 1003, 1004]);
    assert_eq!(s.ids.items, vec![77, 78, 90, 91]);
    let times: Vec<f64> = s.events.iter().map(|e| e.time).collect();
    assert_eq!(times, vec![10.0, 11.0, 12.0, 12.0, 14.0, 15.5, 16.0, 20.0, 21.0, 22.0]);
    let pairs: Vec<(u32, u32)> = s.events.iter().map(|e| (e.user, e.item)).collect();
    assert_eq!(
        pairs,
        vec![(0, 0), (1, 1), (0, 1), (2, 0), (0, 2), (1, 2), (3, 0), (2, 3), (1, 0), (3, 3)]
    );
    assert_eq!(s.feature_cardinality, vec![5, 4]);
    assert_eq!(s.events[4].features, vec![3, 0]);
    assert_eq!(s.events[5].label, 1);
}

#[test]
fn csv_round_trip_is_exact() {
    let first = parse_csv_path(fixture()).unwrap().stream;
    let mut out = Vec::new();
    write_csv(&first, &mut out).unwrap();
    let text = String::from_utf8(out.clone()).unwrap();
    assert!(text.starts_with("user_id,item_id,timestamp,label,feat_0,feat_1\n1001,77,10,0,2,0\n"));
    let second = parse_csv(out.as_slice()).unwrap();
    assert_eq!(second.out_of_order_rows, 0);
    assert_eq!(second.stream, first);
    let mut again = Vec::new();
    write_csv(&second.stream, &mut again).unwrap();
    assert_eq!(again, out);
}

#[test]
fn parsed_log_builds_valid_dag() {
    let s = parse_csv_path(fixture()).unwrap().stream;
    let act = classify_active(&s, Threshold::Finite(2), Threshold::Finite(2));
    // users 1001 and 1002 have three interactions, item 77 has four
    assert_eq!(act.members(Partition::User).collect::<Vec<_>>(), vec![0, 1]);
    assert_eq!(act.members(Partition::Item).collect::<Vec<_>>(), vec![0]);
    let dag = build_dag(&s, &act).unwrap();
    assert!(validate_dag(&dag).passed());
}

#[test]
fn missing_file_is_error() {
    assert!(parse_csv_path("/nonexistent/events.csv").is_err());
}
