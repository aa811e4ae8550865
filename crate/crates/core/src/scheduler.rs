//! Batch planning and the loader → compute → writer pipeline.
//!
//! Segments of one (recording, speaker) pair are concatenated into
//! super-segments that share a single context window. Loader threads read
//! and assemble batches into a bounded queue; one compute executor runs the
//! enhancement stages; a writer thread persists the per-segment outputs.
//!
//! Every batch is computed independently and every reduction inside a batch
//! has a fixed order, so outputs do not depend on the number of loaders or
//! the queue capacity.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use crossbeam_channel::bounded;
use log::{info, warn};
use ndarray::{s, Array2, Axis};
use serde::Serialize;

use crate::audio::{read_wav_range, write_mono_wav};
use crate::beamform::{accumulate_stats, apply, mvdr, select_reference};
use crate::cacgmm::em_fit;
use crate::config::{BatchMode, EnhanceConfig};
use crate::error::{Error, Result};
use crate::manifests::{validate_segments, ActivityMatrix, Recording, Segment, Timeline, TimelinePiece};
use crate::numerics::PlanCache;
use crate::stft::{Stft, StftConfig};
use crate::wpe::{dereverberate, unit_normalize};

/// Reads recording audio as `channels × len`, zero past the end.
pub trait AudioProvider: Sync {
    fn read(&self, recording: &Recording, start: usize, len: usize) -> Result<Array2<f64>>;
}

/// Reads the recording's WAV sources, stacking their listed channels.
#[derive(Clone, Copy, Debug, Default)]
pub struct WavAudio;

impl AudioProvider for WavAudio {
    fn read(&self, recording: &Recording, start: usize, len: usize) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((recording.channel_count(), len));
        let mut row = 0;
        for src in &recording.sources {
            let (data, sr) = read_wav_range(&src.path, start, len)?;
            if sr != recording.sample_rate {
                return Err(Error::Validation(format!(
                    "{}: sample rate {sr} differs from recording {} ({})",
                    src.path.display(),
                    recording.id,
                    recording.sample_rate
                )));
            }
            for &ch in &src.channels {
                if ch >= data.nrows() {
                    return Err(Error::Validation(format!(
                        "{}: channel {ch} not present ({} channels)",
                        src.path.display(),
                        data.nrows()
                    )));
                }
                out.row_mut(row).assign(&data.row(ch));
                row += 1;
            }
        }
        Ok(out)
    }
}

/// In-memory signals keyed by recording id.
#[derive(Clone, Debug, Default)]
pub struct MemoryAudio {
    pub signals: HashMap<String, Array2<f64>>,
}

impl AudioProvider for MemoryAudio {
    fn read(&self, recording: &Recording, start: usize, len: usize) -> Result<Array2<f64>> {
        let sig = self
            .signals
            .get(&recording.id)
            .ok_or_else(|| Error::Validation(format!("no audio for recording {}", recording.id)))?;
        let mut out = Array2::zeros((sig.nrows(), len));
        let end = (start + len).min(sig.ncols());
        if start < end {
            out.slice_mut(s![.., ..end - start]).assign(&sig.slice(s![.., start..end]));
        }
        Ok(out)
    }
}

/// Segments of one (recording, speaker) pair enhanced together.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchPlan {
    pub recording_id: String,
    pub speaker: String,
    /// In temporal order.
    pub segments: Vec<Segment>,
}

impl BatchPlan {
    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }
}

/// Groups segments by (recording, speaker), fills batches greedily in
/// temporal order up to `max_batch_duration`, and interleaves the groups
/// round-robin. A segment longer than the cap gets a batch of its own.
pub fn plan_batches(segments: &[Segment], max_batch_duration: f64, mode: BatchMode) -> Vec<BatchPlan> {
    let mut groups: BTreeMap<(&str, &str), Vec<&Segment>> = BTreeMap::new();
    for seg in segments {
        groups
            .entry((seg.recording_id.as_str(), seg.speaker.as_str()))
            .or_default()
            .push(seg);
    }
    let mut queues: Vec<Vec<BatchPlan>> = Vec::with_capacity(groups.len());
    for ((rec, spk), mut segs) in groups {
        segs.sort_by(|a, b| a.start.total_cmp(&b.start).then_with(|| a.id.cmp(&b.id)));
        let mut batches: Vec<Vec<Segment>> = Vec::new();
        let mut current: Vec<Segment> = Vec::new();
        let mut total = 0.0;
        for seg in segs {
            let fits = total + seg.duration <= max_batch_duration;
            if mode == BatchMode::OnePerBatch || (!fits && !current.is_empty()) {
                if !current.is_empty() {
                    batches.push(std::mem::take(&mut current));
                }
                total = 0.0;
            }
            if seg.duration > max_batch_duration {
                warn!(
                    "segment {} ({:.2}s) exceeds the batch cap of {max_batch_duration}s; processed alone",
                    seg.id, seg.duration
                );
            }
            total += seg.duration;
            current.push(seg.clone());
        }
        if !current.is_empty() {
            batches.push(current);
        }
        queues.push(
            batches
                .into_iter()
                .map(|segments| BatchPlan {
                    recording_id: rec.to_string(),
                    speaker: spk.to_string(),
                    segments,
                })
                .collect(),
        );
    }
    let mut out = Vec::new();
    let rounds = queues.iter().map(Vec::len).max().unwrap_or(0);
    let mut iters: Vec<_> = queues.into_iter().map(|q| q.into_iter()).collect();
    for _ in 0..rounds {
        for it in &mut iters {
            if let Some(p) = it.next() {
                out.push(p);
            }
        }
    }
    out
}

/// Where a segment sits inside the assembled batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PartPlacement {
    pub segment_id: String,
    pub offset_samples: usize,
    pub len_samples: usize,
}

#[derive(Clone, Debug)]
pub struct SuperSegment {
    pub index: usize,
    pub recording_id: String,
    pub speaker: String,
    pub segments: Vec<Segment>,
    pub parts: Vec<PartPlacement>,
    /// Left and right context actually used, seconds.
    pub context: (f64, f64),
    /// `M × N`.
    pub audio: Array2<f64>,
    pub timeline: Timeline,
    pub activity: ActivityMatrix,
    pub stft: StftConfig,
}

/// Reads left context, every part and right context back to back, and
/// builds the activity of every speaker of the recording over that timeline.
pub fn assemble(
    index: usize,
    plan: &BatchPlan,
    recording: &Recording,
    recording_segments: &[Segment],
    provider: &dyn AudioProvider,
    cfg: &EnhanceConfig,
) -> Result<SuperSegment> {
    let sr = recording.sample_rate;
    let stft = StftConfig {
        sample_rate: sr,
        ..cfg.stft
    };
    let total = recording.num_samples();
    let first = plan
        .segments
        .first()
        .ok_or_else(|| Error::Pipeline("empty batch plan".into()))?;
    let last = plan.segments.last().expect("non-empty");
    let ctx = (cfg.context_duration * sr as f64).round() as usize;
    let first_start = first.start_sample(sr).min(total);
    let last_end = last.end_sample(sr).min(total);
    let left = ctx.min(first_start);
    let right = ctx.min(total.saturating_sub(last_end));

    let mut pieces = vec![TimelinePiece {
        source_start: first_start - left,
        len: left,
    }];
    let mut parts = Vec::with_capacity(plan.segments.len());
    let mut offset = left;
    for seg in &plan.segments {
        let start = seg.start_sample(sr).min(total);
        let len = seg.end_sample(sr).min(total).saturating_sub(start);
        pieces.push(TimelinePiece { source_start: start, len });
        parts.push(PartPlacement {
            segment_id: seg.id.clone(),
            offset_samples: offset,
            len_samples: len,
        });
        offset += len;
    }
    pieces.push(TimelinePiece {
        source_start: last_end,
        len: right,
    });
    let timeline = Timeline::new(pieces);

    let channels = recording.channel_count();
    let mut audio = Array2::zeros((channels, timeline.len()));
    let mut at = 0;
    for p in timeline.pieces() {
        let chunk = provider.read(recording, p.source_start, p.len)?;
        if chunk.nrows() != channels {
            return Err(Error::Validation(format!(
                "recording {} delivered {} channels, manifest lists {channels}",
                recording.id,
                chunk.nrows()
            )));
        }
        audio.slice_mut(s![.., at..at + p.len]).assign(&chunk);
        at += p.len;
    }
    if let Some(sel) = &cfg.channels {
        if let Some(&bad) = sel.iter().find(|&&c| c >= channels) {
            return Err(Error::Config(format!(
                "channel {bad} selected but recording {} has {channels}",
                recording.id
            )));
        }
        audio = audio.select(Axis(0), sel);
    }

    let same_recording: Vec<Segment> = recording_segments
        .iter()
        .filter(|s| s.recording_id == recording.id)
        .cloned()
        .collect();
    let activity = ActivityMatrix::build(&same_recording, &timeline, &plan.speaker, &stft, cfg.noise_class)?;
    Ok(SuperSegment {
        index,
        recording_id: plan.recording_id.clone(),
        speaker: plan.speaker.clone(),
        segments: plan.segments.clone(),
        parts,
        context: (left as f64 / sr as f64, right as f64 / sr as f64),
        audio,
        timeline,
        activity,
        stft,
    })
}

/// Cumulative seconds per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub load: f64,
    pub stft: f64,
    pub wpe: f64,
    pub mask_estimation: f64,
    pub beamform: f64,
    pub istft: f64,
    pub write: f64,
}

impl StageTimings {
    pub fn add(&mut self, o: &StageTimings) {
        self.load += o.load;
        self.stft += o.stft;
        self.wpe += o.wpe;
        self.mask_estimation += o.mask_estimation;
        self.beamform += o.beamform;
        self.istft += o.istft;
        self.write += o.write;
    }

    pub fn total(&self) -> f64 {
        self.load + self.stft + self.wpe + self.mask_estimation + self.beamform + self.istft + self.write
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BatchDiagnostics {
    pub frames: usize,
    pub classes: Vec<String>,
    pub ref_channel: usize,
    pub zeroed_bins: usize,
    pub log_likelihood: Vec<f64>,
    #[serde(skip)]
    pub timings: StageTimings,
}

#[derive(Clone, Debug)]
pub struct EnhancedSegment {
    pub segment: Segment,
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

#[derive(Clone, Debug)]
pub struct EnhancementResult {
    pub outputs: Vec<EnhancedSegment>,
    pub diagnostics: BatchDiagnostics,
}

/// `{recording}-{speaker}-{start_ms:07}_{end_ms:07}.wav`.
pub fn output_file_name(seg: &Segment) -> String {
    format!(
        "{}.wav",
        Segment::canonical_id(&seg.recording_id, &seg.speaker, seg.start, seg.duration)
    )
}

/// Runs the enhancement stages on one assembled batch and cuts the result
/// back into its segments.
pub fn enhance_batch(ss: &SuperSegment, cfg: &EnhanceConfig) -> Result<EnhancementResult> {
    let mut timings = StageTimings::default();
    let stft = Stft::new(ss.stft)?;

    let t = Instant::now();
    let y = stft.analyze(ss.audio.view())?;
    timings.stft += t.elapsed().as_secs_f64();

    let t = Instant::now();
    let y = if cfg.use_wpe { dereverberate(&y, &cfg.wpe)? } else { y };
    timings.wpe += t.elapsed().as_secs_f64();

    let t = Instant::now();
    let fit = em_fit(&unit_normalize(&y), &ss.activity, &cfg.bss)?;
    timings.mask_estimation += t.elapsed().as_secs_f64();

    let t = Instant::now();
    let stats = accumulate_stats(&y, &fit.posteriors, ss.activity.target_index())?;
    let ref_channel = select_reference(&stats);
    let filter = mvdr(&stats, ref_channel)?;
    let enhanced = apply(&filter, &y)?;
    timings.beamform += t.elapsed().as_secs_f64();

    let t = Instant::now();
    let wave = stft.synthesize(enhanced.view(), ss.timeline.len())?;
    timings.istft += t.elapsed().as_secs_f64();

    let outputs = ss
        .segments
        .iter()
        .zip(&ss.parts)
        .map(|(seg, part)| EnhancedSegment {
            segment: seg.clone(),
            samples: wave[part.offset_samples..part.offset_samples + part.len_samples].to_vec(),
            sample_rate: ss.stft.sample_rate,
        })
        .collect();
    Ok(EnhancementResult {
        outputs,
        diagnostics: BatchDiagnostics {
            frames: y.num_frames(),
            classes: ss.activity.classes().to_vec(),
            ref_channel,
            zeroed_bins: filter.zeroed_bins.len(),
            log_likelihood: fit.log_likelihood,
            timings,
        },
    })
}

/// Destination for enhanced segments.
pub trait OutputSink: Send {
    /// Persists one segment, returning its path if it was written to disk.
    fn write(&mut self, seg: &EnhancedSegment) -> Result<Option<PathBuf>>;
}

/// Writes mono float WAVs into a directory.
#[derive(Clone, Debug)]
pub struct WavDirSink {
    pub dir: PathBuf,
}

impl OutputSink for WavDirSink {
    fn write(&mut self, seg: &EnhancedSegment) -> Result<Option<PathBuf>> {
        let path = self.dir.join(output_file_name(&seg.segment));
        write_mono_wav(&path, &seg.samples, seg.sample_rate)?;
        Ok(Some(path))
    }
}

/// Keeps enhanced segments in memory.
#[derive(Clone, Debug, Default)]
pub struct MemorySink {
    pub outputs: Vec<EnhancedSegment>,
}

impl OutputSink for MemorySink {
    fn write(&mut self, seg: &EnhancedSegment) -> Result<Option<PathBuf>> {
        self.outputs.push(seg.clone());
        Ok(None)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentFailure {
    pub segment_id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OutputRecord {
    pub segment_id: String,
    pub path: Option<PathBuf>,
    pub samples: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct BatchSummary {
    pub index: usize,
    pub recording_id: String,
    pub speaker: String,
    pub segment_ids: Vec<String>,
    pub context: Option<(f64, f64)>,
    pub diagnostics: Option<BatchDiagnostics>,
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct CacheStats {
    pub plans: usize,
    pub computed: usize,
    pub hits: usize,
}

/// Timing and other process-dependent values, kept apart from the
/// deterministic part of the summary.
#[derive(Clone, Debug, Default, Serialize)]
pub struct RuntimeStats {
    pub wall_seconds: f64,
    pub stages: StageTimings,
    pub batch_seconds: Vec<f64>,
    /// Total duration of the recordings that had at least one batch.
    pub audio_seconds: f64,
    pub real_time_factor: f64,
    pub plan_cache: CacheStats,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub config: EnhanceConfig,
    pub segments_total: usize,
    pub segments_succeeded: usize,
    pub segments_failed: usize,
    pub batches: Vec<BatchSummary>,
    pub failures: Vec<SegmentFailure>,
    pub outputs: Vec<OutputRecord>,
    pub runtime: RuntimeStats,
}

impl RunSummary {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

struct Loaded {
    index: usize,
    result: Result<SuperSegment>,
    seconds: f64,
}

enum WriterMsg {
    Batch(usize, Vec<EnhancedSegment>),
}

/// Enhances every segment with WAV input and output, writing
/// `summary.json` next to the outputs.
pub fn run_pipeline(
    recordings: &[Recording],
    segments: &[Segment],
    cfg: &EnhanceConfig,
    out_dir: &Path,
) -> Result<RunSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut sink = WavDirSink {
        dir: out_dir.to_path_buf(),
    };
    let summary = run_with(recordings, segments, cfg, &WavAudio, &mut sink)?;
    summary.write_json(&out_dir.join("summary.json"))?;
    Ok(summary)
}

/// The pipeline with pluggable audio input and output.
pub fn run_with(
    recordings: &[Recording],
    segments: &[Segment],
    cfg: &EnhanceConfig,
    provider: &dyn AudioProvider,
    sink: &mut dyn OutputSink,
) -> Result<RunSummary> {
    cfg.validate()?;
    let wall = Instant::now();
    let cache = PlanCache::global();
    let (computed0, hits0) = (cache.computed(), cache.hits());
    let by_id: HashMap<&str, &Recording> = recordings.iter().map(|r| (r.id.as_str(), r)).collect();

    let mut failures = Vec::new();
    let mut valid = Vec::new();
    for seg in segments {
        match validate_segments(recordings, std::slice::from_ref(seg)) {
            Ok(()) => valid.push(seg.clone()),
            Err(e) => failures.push(SegmentFailure {
                segment_id: seg.id.clone(),
                error: e.to_string(),
            }),
        }
    }
    let plans = &plan_batches(&valid, cfg.max_batch_duration, cfg.mode);
    info!("{} segments in {} batches", valid.len(), plans.len());

    let load = |index: usize| -> Loaded {
        let t = Instant::now();
        let plan = &plans[index];
        let result = assemble(index, plan, by_id[plan.recording_id.as_str()], &valid, provider, cfg);
        Loaded {
            index,
            result,
            seconds: t.elapsed().as_secs_f64(),
        }
    };

    let mut batches: Vec<Option<BatchSummary>> = vec![None; plans.len()];
    let mut batch_seconds = vec![0.0; plans.len()];
    let mut stages = StageTimings::default();
    let audio_seconds: f64 = plans
        .iter()
        .map(|p| p.recording_id.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .map(|id| by_id[id].duration)
        .sum();

    let next = AtomicUsize::new(0);
    let (write_tx, write_rx) = crossbeam_channel::unbounded::<WriterMsg>();
    let written = std::thread::scope(|scope| -> Result<Vec<(usize, Vec<std::result::Result<OutputRecord, SegmentFailure>>, f64)>> {
        let writer = scope.spawn(move || {
            let mut done = Vec::new();
            for WriterMsg::Batch(index, outs) in write_rx {
                let t = Instant::now();
                let records = outs
                    .iter()
                    .map(|o| match sink.write(o) {
                        Ok(path) => Ok(OutputRecord {
                            segment_id: o.segment.id.clone(),
                            path,
                            samples: o.samples.len(),
                        }),
                        Err(e) => Err(SegmentFailure {
                            segment_id: o.segment.id.clone(),
                            error: e.to_string(),
                        }),
                    })
                    .collect();
                done.push((index, records, t.elapsed().as_secs_f64()));
            }
            done
        });

        let mut compute = |loaded: Loaded| {
            let plan = &plans[loaded.index];
            stages.load += loaded.seconds;
            let t = Instant::now();
            let mut summary = BatchSummary {
                index: loaded.index,
                recording_id: plan.recording_id.clone(),
                speaker: plan.speaker.clone(),
                segment_ids: plan.segments.iter().map(|s| s.id.clone()).collect(),
                context: None,
                diagnostics: None,
                error: None,
            };
            let outcome = loaded.result.and_then(|ss| {
                summary.context = Some(ss.context);
                enhance_batch(&ss, cfg)
            });
            match outcome {
                Ok(res) => {
                    stages.add(&res.diagnostics.timings);
                    summary.diagnostics = Some(res.diagnostics);
                    let _ = write_tx.send(WriterMsg::Batch(loaded.index, res.outputs));
                }
                Err(e) => {
                    warn!("batch {} ({} / {}) failed: {e}", loaded.index, plan.recording_id, plan.speaker);
                    summary.error = Some(e.to_string());
                }
            }
            batch_seconds[loaded.index] = loaded.seconds + t.elapsed().as_secs_f64();
            batches[loaded.index] = Some(summary);
        };

        if cfg.workers == 0 {
            for index in 0..plans.len() {
                compute(load(index));
            }
        } else {
            let (tx, rx) = bounded::<Loaded>(cfg.queue_capacity);
            let loaders: Vec<_> = (0..cfg.workers)
                .map(|_| {
                    let tx = tx.clone();
                    let (next, load) = (&next, &load);
                    scope.spawn(move || loop {
                        let index = next.fetch_add(1, Ordering::SeqCst);
                        if index >= plans.len() {
                            break;
                        }
                        if tx.send(load(index)).is_err() {
                            break;
                        }
                    })
                })
                .collect();
            drop(tx);
            for loaded in rx {
                compute(loaded);
            }
            for l in loaders {
                l.join().map_err(|_| Error::Pipeline("loader thread panicked".into()))?;
            }
        }
        drop(write_tx);
        writer.join().map_err(|_| Error::Pipeline("writer thread panicked".into()))
    })?;

    let batches: Vec<BatchSummary> = batches.into_iter().map(|b| b.expect("every batch computed")).collect();
    for b in &batches {
        if let Some(err) = &b.error {
            failures.extend(b.segment_ids.iter().map(|id| SegmentFailure {
                segment_id: id.clone(),
                error: err.clone(),
            }));
        }
    }
    let mut outputs = Vec::new();
    let mut written = written;
    written.sort_by_key(|(index, _, _)| *index);
    for (_, records, seconds) in written {
        stages.write += seconds;
        for r in records {
            match r {
                Ok(o) => outputs.push(o),
                Err(f) => failures.push(f),
            }
        }
    }
    failures.sort_by(|a, b| a.segment_id.cmp(&b.segment_id));
    outputs.sort_by(|a, b| a.segment_id.cmp(&b.segment_id));

    let wall_seconds = wall.elapsed().as_secs_f64();
    let summary = RunSummary {
        config: cfg.clone(),
        segments_total: segments.len(),
        segments_succeeded: outputs.len(),
        segments_failed: failures.len(),
        batches,
        failures,
        outputs,
        runtime: RuntimeStats {
            wall_seconds,
            stages,
            batch_seconds,
            audio_seconds,
            real_time_factor: if audio_seconds > 0.0 { wall_seconds / audio_seconds } else { 0.0 },
            plan_cache: CacheStats {
                plans: cache.len(),
                computed: cache.computed() - computed0,
                hits: cache.hits() - hits0,
            },
        },
    };
    Ok(summary)
}
