//! Golden-file checks for manifest parsing, shared by the manifest tests and
//! the acceptance runner.

use std::path::{Path, PathBuf};

use gss::manifests::{load_recordings, load_segments, Segment, SegmentFormat};
use gss::Error;

pub fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn expected(name: &str) -> Vec<Segment> {
    std::fs::read_to_string(data(name))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn ensure(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn load(name: &str) -> gss::Result<gss::manifests::SegmentLoad> {
    let path = data(name);
    load_segments(&path, SegmentFormat::from_path(&path))
}

pub fn recordings() -> Result<(), String> {
    for name in ["recordings.jsonl", "recordings.jsonl.gz"] {
        let recs = load_recordings(&data(name)).map_err(|e| e.to_string())?;
        ensure(recs.len() == 2, format!("{name}: {} recordings", recs.len()))?;
        ensure(recs[0].id == "rec1" && recs[0].channel_count() == 4, format!("{name}: rec1"))?;
        ensure(recs[0].sources[0].path == data("rec1.wav"), format!("{name}: relative path not resolved"))?;
        ensure(recs[0].num_samples() == 960_000, format!("{name}: rec1 samples"))?;
        ensure(recs[1].channel_count() == 3, format!("{name}: rec2 channels"))?;
        ensure(recs[1].sources[1].path == Path::new("/abs/rec2_b.wav"), format!("{name}: absolute path changed"))?;
        ensure(recs[1].num_samples() == 244_000, format!("{name}: rec2 samples"))?;
    }
    Ok(())
}

pub fn jsonl_segments() -> Result<(), String> {
    let want = expected("segments.jsonl");
    ensure(want.len() == 3, "segments.jsonl has 3 entries")?;
    for name in ["segments.jsonl", "segments.jsonl.gz"] {
        let got = load(name).map_err(|e| e.to_string())?;
        ensure(got.segments == want, format!("{name}: {:?}", got.segments))?;
        ensure(got.skipped == 0, format!("{name}: skipped {}", got.skipped))?;
    }
    Ok(())
}

pub fn rttm_segments() -> Result<(), String> {
    let want = expected("segments_rttm.expected.jsonl");
    for name in ["segments.rttm", "segments.rttm.gz"] {
        let got = load(name).map_err(|e| e.to_string())?;
        ensure(got.segments == want, format!("{name}: {:?}", got.segments))?;
    }
    Ok(())
}

pub fn malformed() -> Result<(), String> {
    for (name, line) in [("malformed.jsonl", 2), ("malformed.rttm", 2), ("short.rttm", 1)] {
        match load(name) {
            Err(Error::Parse { path, line: l, .. }) => {
                ensure(l == line && path == data(name), format!("{name}: error at {}:{l}", path.display()))?
            }
            other => return Err(format!("{name}: expected a parse error, got {other:?}")),
        }
    }
    Ok(())
}

pub fn zero_duration() -> Result<(), String> {
    for name in ["zero_duration.jsonl", "zero_duration.rttm"] {
        let got = load(name).map_err(|e| e.to_string())?;
        ensure(got.skipped == 1, format!("{name}: skipped {}", got.skipped))?;
        ensure(
            got.segments.len() == 1 && got.segments[0].id == "rec1-spkA-0010000_0012500",
            format!("{name}: {:?}", got.segments),
        )?;
    }
    Ok(())
}

pub fn all() -> Result<(), String> {
    recordings()?;
    jsonl_segments()?;
    rttm_segments()?;
    malformed()?;
    zero_duration()
}
