//! Report output is compared byte-for-byte against checked-in files.
//! Regenerate with `PROXQ_UPDATE_GOLDEN=1 cargo test --test report_golden`.

use std::fs;
use std::path::PathBuf;

use proxq::harness::{
    aggregate, aggregate_csv, emit_report, read_records, render_markdown, ReportFormat,
};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("fixtures")
}

fn check(name: &str, actual: &str) {
    let path = fixtures().join(name);
    if std::env::var_os("PROXQ_UPDATE_GOLDEN").is_some() {
        fs::write(&path, actual).unwrap();
    }
    let expected = fs::read_to_string(&path).unwrap();
    assert_eq!(actual, expected, "{name} differs from the golden file");
}

#[test]
fn markdown_and_csv_match_golden_files() {
    let records = read_records(&fixtures().join("records.jsonl")).unwrap();
    assert_eq!(records.len(), 32);
    check("report.md", &render_markdown(&records).unwrap());
    check("report.csv", &aggregate_csv(&aggregate(&records).unwrap()));
}

#[test]
fn emitted_files_are_byte_stable() {
    let records = read_records(&fixtures().join("records.jsonl")).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for fmt in [ReportFormat::Markdown, ReportFormat::Csv] {
        let fa = emit_report(&records, fmt, a.path()).unwrap();
        let fb = emit_report(&records, fmt, b.path()).unwrap();
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
    }
    // wallclock changes must not reach the report
    let mut shifted = records.clone();
    shifted
        .iter_mut()
        .for_each(|r| r.wallclock_seconds += 100.0);
    assert_eq!(
        render_markdown(&records).unwrap(),
        render_markdown(&shifted).unwrap()
    );
}

#[test]
fn failed_runs_are_counted_not_averaged() {
    let records = read_records(&fixtures().join("records.jsonl")).unwrap();
    let failed: Vec<_> = records.iter().filter(|r| r.failed()).collect();
    assert_eq!(failed.len(), 1);
    assert!(failed[0].return_norm.is_nan());
    let md = render_markdown(&records).unwrap();
    assert!(md.contains("| NoWarmStart | 0.6140 ± 0.0000 |"));
    assert!(md.contains("(1 failed)"));
}
