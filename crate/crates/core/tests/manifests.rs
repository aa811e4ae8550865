mod common;

use common::golden;
use gss::manifests::{load_segments, save_segments, validate_segments, load_recordings, SegmentFormat};

#[test]
fn recordings_golden() {
    golden::recordings().unwrap();
}

#[test]
fn jsonl_golden_plain_and_gzip() {
    golden::jsonl_segments().unwrap();
}

#[test]
fn rttm_golden_plain_and_gzip() {
    golden::rttm_segments().unwrap();
}

#[test]
fn malformed_lines_name_file_and_line() {
    golden::malformed().unwrap();
}

#[test]
fn zero_duration_entries_are_skipped() {
    golden::zero_duration().unwrap();
}

#[test]
fn golden_segments_fit_their_recordings() {
    let recs = load_recordings(&golden::data("recordings.jsonl")).unwrap();
    let segs = load_segments(&golden::data("segments.jsonl"), SegmentFormat::Jsonl).unwrap();
    validate_segments(&recs, &segs.segments).unwrap();
}

#[test]
fn gzip_round_trip_through_save() {
    let dir = tempfile::tempdir().unwrap();
    let segs = load_segments(&golden::data("segments.rttm"), SegmentFormat::Rttm).unwrap().segments;
    let out = dir.path().join("out.jsonl.gz");
    save_segments(&out, &segs).unwrap();
    let bytes = std::fs::read(&out).unwrap();
    assert_eq!(&bytes[..2], &[0x1f, 0x8b]);
    assert_eq!(load_segments(&out, SegmentFormat::Jsonl).unwrap().segments, segs);
}
