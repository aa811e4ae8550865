//! Recording and segment manifests, RTTM ingestion and frame-level speaker
//! activity.
//!
//! Manifests are JSON lines, optionally gzip-compressed (detected from the
//! `.gz` extension or the gzip magic bytes):
//!
//! ```text
//! recordings: {"id": "rec1", "sources": [{"path": "rec1.wav", "channels": [0, 1, 2, 3]}],
//!              "sample_rate": 16000, "duration": 600.0}
//! segments:   {"id": "rec1-spkA-0010000_0012500", "recording_id": "rec1",
//!              "speaker": "spkA", "start": 10.0, "duration": 2.5}
//! ```
//!
//! A recording's channels are stacked in source order: the first source's
//! listed channels come first.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use log::warn;
use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stft::StftConfig;

/// Class label used for the always-active noise component.
pub const NOISE_CLASS: &str = "<noise>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioSource {
    pub path: PathBuf,
    pub channels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub id: String,
    pub sources: Vec<AudioSource>,
    pub sample_rate: u32,
    pub duration: f64,
}

impl Recording {
    pub fn channel_count(&self) -> usize {
        self.sources.iter().map(|s| s.channels.len()).sum()
    }

    pub fn num_samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::Validation(format!(
                "recording {}: duration must be positive",
                self.id
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::Validation(format!(
                "recording {}: sample_rate must be positive",
                self.id
            )));
        }
        if self.sources.is_empty() {
            return Err(Error::Validation(format!("recording {} has no sources", self.id)));
        }
        for src in &self.sources {
            let unique: HashSet<_> = src.channels.iter().collect();
            if unique.len() != src.channels.len() || src.channels.is_empty() {
                return Err(Error::Validation(format!(
                    "recording {}: source {} lists duplicate or no channels",
                    self.id,
                    src.path.display()
                )));
            }
        }
        Ok(())
    }

    /// Resolves relative source paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for src in &mut self.sources {
            if src.path.is_relative() {
                src.path = base.join(&src.path);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    pub recording_id: String,
    pub speaker: String,
    pub start: f64,
    pub duration: f64,
}

impl Segment {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    pub fn start_sample(&self, sample_rate: u32) -> usize {
        (self.start * sample_rate as f64).round() as usize
    }

    pub fn end_sample(&self, sample_rate: u32) -> usize {
        (self.end() * sample_rate as f64).round() as usize
    }

    /// Canonical id `{recording}-{speaker}-{start_ms:07}_{end_ms:07}`.
    pub fn canonical_id(recording_id: &str, speaker: &str, start: f64, duration: f64) -> String {
        let start_ms = (start * 1000.0).round() as u64;
        let end_ms = ((start + duration) * 1000.0).round() as u64;
        format!("{recording_id}-{speaker}-{start_ms:07}_{end_ms:07}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentFormat {
    Jsonl,
    Rttm,
}

impl SegmentFormat {
    /// `.rttm` (optionally gzipped) is RTTM, anything else JSON lines.
    pub fn from_path(path: &Path) -> Self {
        let name = path.to_string_lossy().to_lowercase();
        if name.ends_with(".rttm") || name.ends_with(".rttm.gz") {
            SegmentFormat::Rttm
        } else {
            SegmentFormat::Jsonl
        }
    }
}

/// Segments read from a file plus the number of lines skipped with a warning.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SegmentLoad {
    pub segments: Vec<Segment>,
    pub skipped: usize,
}

fn open_text(path: &Path) -> Result<Box<dyn BufRead>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic).map_err(|e| Error::io(path, e))?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let gz = path.extension().is_some_and(|e| e == "gz") || (n == 2 && magic == [0x1f, 0x8b]);
    Ok(if gz {
        Box::new(BufReader::new(MultiGzDecoder::new(file)))
    } else {
        Box::new(BufReader::new(file))
    })
}

fn create_text(path: &Path) -> Result<Box<dyn Write>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(if path.extension().is_some_and(|e| e == "gz") {
        Box::new(GzEncoder::new(BufWriter::new(file), Compression::default()))
    } else {
        Box::new(BufWriter::new(file))
    })
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let reader = open_text(path)?;
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create_text(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads and validates a recordings manifest. Relative audio paths are
/// resolved against the manifest's directory. Audio files are not opened.
pub fn load_recordings(path: &Path) -> Result<Vec<Recording>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, mut rec) in read_jsonl::<Recording>(path)? {
        rec.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Validation(format!(
                "{}:{line}: duplicate recording id {}",
                path.display(),
                rec.id
            )));
        }
        rec.resolve_paths(base);
        out.push(rec);
    }
    Ok(out)
}

pub fn save_recordings(path: &Path, recordings: &[Recording]) -> Result<()> {
    write_jsonl(path, recordings)
}

pub fn save_segments(path: &Path, segments: &[Segment]) -> Result<()> {
    write_jsonl(path, segments)
}

pub fn load_segments(path: &Path, format: SegmentFormat) -> Result<SegmentLoad> {
    let mut load = match format {
        SegmentFormat::Jsonl => {
            let mut load = SegmentLoad::default();
            for (line, seg) in read_jsonl::<Segment>(path)? {
                if !(seg.duration > 0.0) || seg.start < 0.0 {
                    warn!("{}:{line}: skipping segment {} with start {} duration {}",
                        path.display(), seg.id, seg.start, seg.duration);
                    load.skipped += 1;
                    continue;
                }
                load.segments.push(seg);
            }
            load
        }
        SegmentFormat::Rttm => parse_rttm(open_text(path)?, path)?,
    };
    let mut ids = HashSet::new();
    for seg in &load.segments {
        if !ids.insert(seg.id.as_str()) {
            return Err(Error::Validation(format!("duplicate segment id {}", seg.id)));
        }
    }
    load.segments.shrink_to_fit();
    Ok(load)
}

/// Parses `SPEAKER` lines: recording from field 2, start/duration from
/// fields 4/5, speaker from field 8 (1-based). Other record types are ignored.
pub fn parse_rttm(reader: impl BufRead, path: &Path) -> Result<SegmentLoad> {
    let mut load = SegmentLoad::default();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() || fields[0].starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if fields[0] != "SPEAKER" {
            continue;
        }
        if fields.len() < 9 {
            return Err(parse_err(format!(
                "SPEAKER line has {} fields, expected at least 9",
                fields.len()
            )));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(format!("bad {what} {s:?}")))
        };
        let start = num(fields[3], "start")?;
        let duration = num(fields[4], "duration")?;
        if !(duration > 0.0) || start < 0.0 {
            warn!("{}:{}: skipping segment with start {start} duration {duration}",
                path.display(), i + 1);
            load.skipped += 1;
            continue;
        }
        let recording_id = fields[1].to_string();
        let speaker = fields[7].to_string();
        let base = Segment::canonical_id(&recording_id, &speaker, start, duration);
        let mut id = base.clone();
        let mut n = 1;
        while !ids.insert(id.clone()) {
            id = format!("{base}-{n}");
            n += 1;
        }
        load.segments.push(Segment {
            id,
            recording_id,
            speaker,
            start,
            duration,
        });
    }
    Ok(load)
}

/// Checks every segment against its recording.
pub fn validate_segments(recordings: &[Recording], segments: &[Segment]) -> Result<()> {
    for seg in segments {
        let rec = recordings
            .iter()
            .find(|r| r.id == seg.recording_id)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "segment {} refers to unknown recording {}",
                    seg.id, seg.recording_id
                ))
            })?;
        // allow one sample of slack for rounding in the manifest
        if seg.end() > rec.duration + 1.0 / rec.sample_rate as f64 {
            return Err(Error::Validation(format!(
                "segment {} ends at {:.3}s beyond recording {} ({:.3}s)",
                seg.id,
                seg.end(),
                rec.id,
                rec.duration
            )));
        }
    }
    Ok(())
}

/// Contiguous stretch of recording samples placed back to back in a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TimelinePiece {
    pub source_start: usize,
    pub len: usize,
}

/// Maps assembled (batch) sample indices to recording sample indices.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize)]
pub struct Timeline {
    pieces: Vec<TimelinePiece>,
}

impl Timeline {
    pub fn new(pieces: Vec<TimelinePiece>) -> Self {
        Self {
            pieces: pieces.into_iter().filter(|p| p.len > 0).collect(),
        }
    }

    pub fn single(source_start: usize, len: usize) -> Self {
        Self::new(vec![TimelinePiece { source_start, len }])
    }

    pub fn pieces(&self) -> &[TimelinePiece] {
        &self.pieces
    }

    pub fn len(&self) -> usize {
        self.pieces.iter().map(|p| p.len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Recording sample for batch sample `idx` (clamped to the last sample).
    pub fn source_sample(&self, idx: usize) -> usize {
        let mut rem = idx.min(self.len().saturating_sub(1));
        for p in &self.pieces {
            if rem < p.len {
                return p.source_start + rem;
            }
            rem -= p.len;
        }
        0
    }
}

/// Binary speaker activity per STFT frame, one column per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivityMatrix {
    classes: Vec<String>,
    // frames × classes
    grid: Array2<bool>,
    target_index: usize,
    noise_index: Option<usize>,
}

impl ActivityMatrix {
    pub fn from_grid(
        classes: Vec<String>,
        grid: Array2<bool>,
        target_index: usize,
        noise_index: Option<usize>,
    ) -> Result<Self> {
        if grid.ncols() != classes.len() {
            return Err(Error::Shape(format!(
                "activity grid has {} columns for {} classes",
                grid.ncols(),
                classes.len()
            )));
        }
        if target_index >= classes.len() || noise_index.is_some_and(|n| n >= classes.len()) {
            return Err(Error::Shape("class index out of range".into()));
        }
        Ok(Self {
            classes,
            grid,
            target_index,
            noise_index,
        })
    }

    /// Builds activities over `timeline` with the "frame centre inside segment"
    /// rule. Classes are the speakers active anywhere in the window (sorted),
    /// followed by the noise class when enabled.
    pub fn build(
        segments: &[Segment],
        timeline: &Timeline,
        target: &str,
        config: &StftConfig,
        noise_class: bool,
    ) -> Result<Self> {
        let frames = config.num_frames(timeline.len());
        let sr = config.sample_rate as f64;
        let centers: Vec<f64> = (0..frames)
            .map(|t| timeline.source_sample(config.frame_center(t)) as f64)
            .collect();
        let speakers: BTreeSet<&str> = segments.iter().map(|s| s.speaker.as_str()).collect();
        let mut classes = Vec::new();
        let mut columns: Vec<Vec<bool>> = Vec::new();
        for spk in speakers {
            let spans: Vec<(f64, f64)> = segments
                .iter()
                .filter(|s| s.speaker == spk)
                .map(|s| (s.start * sr, s.end() * sr))
                .collect();
            let col: Vec<bool> = centers
                .iter()
                .map(|&c| spans.iter().any(|&(a, b)| c >= a && c < b))
                .collect();
            if col.iter().any(|&x| x) {
                classes.push(spk.to_string());
                columns.push(col);
            }
        }
        let target_index = classes
            .iter()
            .position(|c| c == target)
            .ok_or_else(|| Error::EmptyTarget {
                speaker: target.to_string(),
            })?;
        let noise_index = if noise_class {
            classes.push(NOISE_CLASS.to_string());
            columns.push(vec![true; frames]);
            Some(classes.len() - 1)
        } else {
            None
        };
        let grid = Array2::from_shape_fn((frames, classes.len()), |(t, k)| columns[k][t]);
        Self::from_grid(classes, grid, target_index, noise_index)
    }

    pub fn frames(&self) -> usize {
        self.grid.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn grid(&self) -> &Array2<bool> {
        &self.grid
    }

    pub fn is_active(&self, t: usize, k: usize) -> bool {
        self.grid[[t, k]]
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn noise_index(&self) -> Option<usize> {
        self.noise_index
    }

    pub fn active_frames(&self, k: usize) -> usize {
        self.grid.column(k).iter().filter(|&&x| x).count()
    }

    /// Reorders classes so that new class `i` is old class `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let inv = |old: usize| perm.iter().position(|&p| p == old).expect("valid permutation");
        Self {
            classes: perm.iter().map(|&p| self.classes[p].clone()).collect(),
            grid: Array2::from_shape_fn(self.grid.dim(), |(t, k)| self.grid[[t, perm[k]]]),
            target_index: inv(self.target_index),
            noise_index: self.noise_index.map(inv),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(rec: &str, spk: &str, start: f64, duration: f64) -> Segment {
        Segment {
            id: Segment::canonical_id(rec, spk, start, duration),
            recording_id: rec.into(),
            speaker: spk.into(),
            start,
            duration,
        }
    }

    #[test]
    fn rttm_field_mapping() {
        let text = "SPEAKER rec1 1 10.00 2.50 <NA> <NA> spkA <NA> <NA>\n";
        let load = parse_rttm(text.as_bytes(), Path::new("x.rttm")).unwrap();
        assert_eq!(load.skipped, 0);
        let s = &load.segments[0];
        assert_eq!((s.recording_id.as_str(), s.speaker.as_str()), ("rec1", "spkA"));
        assert_eq!((s.start, s.duration), (10.0, 2.5));
        assert_eq!(s.id, "rec1-spkA-0010000_0012500");
    }

    #[test]
    fn rttm_skips_zero_and_negative_durations() {
        let text = "SPEAKER r 1 1.0 0.0 <NA> <NA> a <NA> <NA>\n\
                    SPEAKER r 1 1.0 -2.0 <NA> <NA> a <NA> <NA>\n\
                    SPEAKER r 1 1.0 2.0 <NA> <NA> a <NA> <NA>\n\
                    SPEAKER r 1 1.5 2.0 <NA> <NA> b <NA> <NA>\n";
        let load = parse_rttm(text.as_bytes(), Path::new("x.rttm")).unwrap();
        assert_eq!(load.skipped, 2);
        // overlapping segments of different speakers are both kept
        assert_eq!(load.segments.len(), 2);
    }

    #[test]
    fn rttm_short_line_reports_line_number() {
        let text = "SPEAKER r 1 1.0 2.0 <NA> <NA> a <NA> <NA>\nSPEAKER r 1 1.0\n";
        match parse_rttm(text.as_bytes(), Path::new("x.rttm")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn channel_count_sums_sources() {
        let rec = Recording {
            id: "r".into(),
            sources: vec![
                AudioSource { path: "a.wav".into(), channels: vec![0, 1, 2, 3] },
                AudioSource { path: "b.wav".into(), channels: vec![0, 1, 2, 3] },
            ],
            sample_rate: 16000,
            duration: 1.0,
        };
        assert_eq!(rec.channel_count(), 8);
        let mut bad = rec.clone();
        bad.sources[0].channels = vec![0, 0];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn activity_single_speaker_window_inside_segment() {
        let cfg = StftConfig::default();
        let segs = vec![seg("r", "a", 0.0, 10.0)];
        let act = ActivityMatrix::build(&segs, &Timeline::single(16000, 32000), "a", &cfg, true)
            .unwrap();
        assert_eq!(act.classes(), &["a".to_string(), NOISE_CLASS.to_string()]);
        assert!(act.grid().iter().all(|&x| x));
        let act = ActivityMatrix::build(&segs, &Timeline::single(16000, 32000), "a", &cfg, false)
            .unwrap();
        assert_eq!(act.num_classes(), 1);
        assert_eq!(act.noise_index(), None);
    }

    #[test]
    fn activity_two_fully_overlapped_speakers() {
        let cfg = StftConfig::default();
        let segs = vec![seg("r", "a", 0.0, 10.0), seg("r", "b", 0.0, 10.0)];
        let act = ActivityMatrix::build(&segs, &Timeline::single(0, 80000), "b", &cfg, false)
            .unwrap();
        assert_eq!(act.target_index(), 1);
        assert!(act.grid().iter().all(|&x| x));
    }

    #[test]
    fn activity_flips_at_frame_centre() {
        let cfg = StftConfig::default();
        let segs = vec![seg("r", "a", 10.0, 2.5)];
        let n = 15 * 16000;
        let act = ActivityMatrix::build(&segs, &Timeline::single(0, n), "a", &cfg, false).unwrap();
        // oracle: frame t is centred on sample 256·t; active iff 160000 ≤ 256·t < 200000
        for t in 0..act.frames() {
            let c = 256 * t;
            assert_eq!(act.is_active(t, 0), (160_000..200_000).contains(&c), "frame {t}");
        }
        assert!(!act.is_active(624, 0));
        assert!(act.is_active(625, 0));
        assert!(act.is_active(781, 0));
        assert!(!act.is_active(782, 0));
    }

    #[test]
    fn empty_target_is_an_error() {
        let cfg = StftConfig::default();
        let segs = vec![seg("r", "a", 0.0, 1.0), seg("r", "b", 5.0, 1.0)];
        let err = ActivityMatrix::build(&segs, &Timeline::single(0, 32000), "b", &cfg, true)
            .unwrap_err();
        assert!(matches!(err, Error::EmptyTarget { .. }));
    }

    #[test]
    fn speaker_relabelling_permutes_rows() {
        let cfg = StftConfig::default();
        let segs = vec![
            seg("r", "a", 0.0, 3.0),
            seg("r", "b", 2.0, 3.0),
            seg("r", "c", 4.0, 2.0),
        ];
        let tl = Timeline::single(0, 6 * 16000);
        let act = ActivityMatrix::build(&segs, &tl, "b", &cfg, true).unwrap();
        // rename so the sort order becomes c', a', b' → z, x, y
        let renamed: Vec<Segment> = segs
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.speaker = match s.speaker.as_str() {
                    "a" => "y",
                    "b" => "z",
                    _ => "x",
                }
                .into();
                s
            })
            .collect();
        let act2 = ActivityMatrix::build(&renamed, &tl, "z", &cfg, true).unwrap();
        // classes of act2: x(c), y(a), z(b), noise → perm [2, 0, 1, 3] of act
        let expected = act.permuted(&[2, 0, 1, 3]);
        assert_eq!(act2.grid(), expected.grid());
        assert_eq!(act2.target_index(), expected.target_index());
        assert_eq!(act2.noise_index(), expected.noise_index());
    }

    #[test]
    fn active_frames_match_duration() {
        let cfg = StftConfig::default();
        let segs = vec![seg("r", "a", 1.3, 2.71), seg("r", "a", 5.05, 0.9)];
        let act = ActivityMatrix::build(&segs, &Timeline::single(0, 8 * 16000), "a", &cfg, false)
            .unwrap();
        let expected: f64 = segs.iter().map(|s| s.duration * 16000.0 / 256.0).sum();
        let got = act.active_frames(0) as f64;
        assert!((got - expected).abs() <= segs.len() as f64, "{got} vs {expected}");
    }

    #[test]
    fn timeline_maps_across_pieces() {
        let tl = Timeline::new(vec![
            TimelinePiece { source_start: 100, len: 10 },
            TimelinePiece { source_start: 500, len: 5 },
        ]);
        assert_eq!(tl.len(), 15);
        assert_eq!(tl.source_sample(0), 100);
        assert_eq!(tl.source_sample(9), 109);
        assert_eq!(tl.source_sample(10), 500);
        assert_eq!(tl.source_sample(99), 504);
    }
}
