//! Synthetic multichannel conversations, SI-SDR scoring, an oracle-mask
//! MVDR reference and the parameter-grid bench.
//!
//! Sources are harmonic "voiced" signals: a gliding, jittered fundamental, a formant
//! envelope that changes per syllable and a syllable-rate amplitude envelope,
//! gated by the speaker's segments. Each speaker reaches every channel with
//! an integer delay and a gain (channel 0 is the unit, undelayed reference),
//! optionally followed by an exponentially decaying noise tail.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::write_wav;
use crate::beamform::{accumulate_stats, apply, mvdr, select_reference};
use crate::cacgmm::PosteriorTensor;
use crate::config::EnhanceConfig;
use crate::error::{Error, Result};
use crate::manifests::{save_recordings, save_segments, AudioSource, Recording, Segment};
use crate::scheduler::{run_with, AudioProvider, EnhancedSegment, MemorySink, RunSummary};
use crate::stft::{Stft, StftConfig};
use crate::wpe::dereverberate;

/// Upper bound reported for a perfect estimate.
pub const SI_SDR_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub start: f64,
    pub duration: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub id: String,
    pub segments: Vec<Span>,
}

/// Random turn-taking conversation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSpec {
    pub speakers: usize,
    /// Overlapped speech time over total speech time.
    pub overlap_ratio: f64,
    #[serde(default = "default_min_turn")]
    pub min_turn: f64,
    #[serde(default = "default_max_turn")]
    pub max_turn: f64,
}

fn default_min_turn() -> f64 {
    3.0
}

fn default_max_turn() -> f64 {
    8.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReverbSpec {
    pub t60: f64,
    pub direct_to_reverb_db: f64,
    /// Per (speaker, channel) DRR offsets are drawn from `±drr_spread_db`.
    #[serde(default)]
    pub drr_spread_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    #[serde(default = "default_recording_id")]
    pub recording_id: String,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    pub duration: f64,
    pub channels: usize,
    /// Explicit layout; mutually exclusive with `layout`.
    #[serde(default)]
    pub speakers: Vec<SpeakerSpec>,
    #[serde(default)]
    pub layout: Option<LayoutSpec>,
    /// Largest inter-channel delay, samples.
    #[serde(default)]
    pub max_delay: usize,
    /// Channel gains are drawn from `[1 - gain_spread, 1]`.
    #[serde(default)]
    pub gain_spread: f64,
    #[serde(default)]
    pub reverb: Option<ReverbSpec>,
    #[serde(default)]
    pub noise_snr_db: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_recording_id() -> String {
    "synth".into()
}

fn default_sample_rate() -> u32 {
    16_000
}

impl MixtureSpec {
    pub fn num_samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    /// The speaker layout, generated from `layout` when given.
    pub fn resolve_speakers(&self) -> Result<Vec<SpeakerSpec>> {
        self.check_scalars()?;
        let speakers = match (&self.layout, self.speakers.is_empty()) {
            (Some(_), false) => return Err(Error::Spec("give either speakers or layout, not both".into())),
            (Some(layout), true) => conversation(layout, self.duration, self.seed)?,
            (None, false) => self.speakers.clone(),
            (None, true) => return Err(Error::Spec("no speakers".into())),
        };
        for spk in &speakers {
            for sp in &spk.segments {
                if !(sp.start >= 0.0 && sp.duration > 0.0) || sp.start + sp.duration > self.duration + 1e-9 {
                    return Err(Error::Spec(format!(
                        "speaker {} segment [{}, +{}] lies outside [0, {}]",
                        spk.id, sp.start, sp.duration, self.duration
                    )));
                }
            }
        }
        let mut ids: Vec<&str> = speakers.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != speakers.len() {
            return Err(Error::Spec("speaker ids must be unique".into()));
        }
        Ok(speakers)
    }

    fn check_scalars(&self) -> Result<()> {
        if self.sample_rate == 0 || !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::Spec("sample rate and duration must be positive".into()));
        }
        if self.channels == 0 {
            return Err(Error::Spec("at least one channel".into()));
        }
        if !(0.0..1.0).contains(&self.gain_spread) {
            return Err(Error::Spec("gain spread must lie in [0, 1)".into()));
        }
        if let Some(r) = &self.reverb {
            if !(r.t60 > 0.0) || !r.direct_to_reverb_db.is_finite() || !(r.drr_spread_db >= 0.0) {
                return Err(Error::Spec("reverb needs a positive T60 and a finite DRR".into()));
            }
        }
        if self.noise_snr_db.is_some_and(|s| !s.is_finite()) {
            return Err(Error::Spec("noise SNR must be finite".into()));
        }
        Ok(())
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream + 1))
}

/// Alternating turns with overlap between consecutive turns. A speaker never
/// overlaps itself; speech starts and ends half a second inside the recording.
fn conversation(layout: &LayoutSpec, duration: f64, seed: u64) -> Result<Vec<SpeakerSpec>> {
    if layout.speakers == 0 {
        return Err(Error::Spec("layout needs at least one speaker".into()));
    }
    if !(0.0..1.0).contains(&layout.overlap_ratio) {
        return Err(Error::Spec("overlap ratio must lie in [0, 1)".into()));
    }
    if !(layout.min_turn > 0.0 && layout.max_turn >= layout.min_turn) {
        return Err(Error::Spec("turn bounds must satisfy 0 < min_turn ≤ max_turn".into()));
    }
    let mut rng = rng_for(seed, 1000);
    let alpha = layout.overlap_ratio / (1.0 + layout.overlap_ratio);
    let mut speakers: Vec<SpeakerSpec> = (0..layout.speakers)
        .map(|i| SpeakerSpec {
            id: format!("spk{i}"),
            segments: Vec::new(),
        })
        .collect();
    let mut last_end = vec![f64::NEG_INFINITY; layout.speakers];
    let limit = duration - 0.5;
    let mut prev_end = 0.5;
    let mut spk = 0;
    let mut first = true;
    loop {
        let d = rng.gen_range(layout.min_turn..=layout.max_turn);
        let start = if first { 0.5 } else { (prev_end - alpha * d).max(last_end[spk]) };
        let d = d.min(limit - start);
        if d < layout.min_turn.min(1.0) {
            break;
        }
        let start = (start * 1000.0).round() / 1000.0;
        let d = (d * 1000.0).floor() / 1000.0;
        speakers[spk].segments.push(Span { start, duration: d });
        last_end[spk] = start + d;
        prev_end = start + d;
        first = false;
        if layout.speakers > 1 {
            let step = rng.gen_range(1..layout.speakers);
            spk = (spk + step) % layout.speakers;
        }
    }
    Ok(speakers)
}

/// Generated recording with its ground truth.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub spec: MixtureSpec,
    pub recording: Recording,
    pub segments: Vec<Segment>,
    pub speakers: Vec<String>,
    /// `M × N`.
    pub mixture: Array2<f64>,
    /// Delayed, scaled dry source per speaker, `M × N`; the scoring
    /// reference. Empty when not kept.
    pub direct: Vec<Array2<f64>>,
    /// Reverberant image per speaker; empty when not kept.
    pub wet: Vec<Array2<f64>>,
    /// Sensor noise, `M × N`; empty when not kept.
    pub noise: Array2<f64>,
}

impl Mixture {
    pub fn speaker_index(&self, speaker: &str) -> Option<usize> {
        self.speakers.iter().position(|s| s == speaker)
    }

    pub fn has_images(&self) -> bool {
        !self.direct.is_empty()
    }

    /// Writes `{id}.wav`, `{id}-{speaker}-direct.wav` and the two manifests;
    /// returns the recording and segment manifest paths.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let id = &self.recording.id;
        let wav = dir.join(format!("{id}.wav"));
        write_wav(&wav, &self.mixture, self.recording.sample_rate)?;
        for (spk, direct) in self.speakers.iter().zip(&self.direct) {
            write_wav(&dir.join(format!("{id}-{spk}-direct.wav")), direct, self.recording.sample_rate)?;
        }
        let mut rec = self.recording.clone();
        rec.sources = vec![AudioSource {
            path: PathBuf::from(format!("{id}.wav")),
            channels: (0..self.mixture.nrows()).collect(),
        }];
        let rec_path = dir.join("recordings.jsonl");
        let seg_path = dir.join("segments.jsonl");
        save_recordings(&rec_path, &[rec])?;
        save_segments(&seg_path, &self.segments)?;
        Ok((rec_path, seg_path))
    }
}

/// Generates the mixture and keeps every ground-truth image.
pub fn generate(spec: &MixtureSpec) -> Result<Mixture> {
    build(spec, true)
}

/// Generates only the mixture, for long throughput fixtures.
pub fn generate_mixture(spec: &MixtureSpec) -> Result<Mixture> {
    build(spec, false)
}

fn build(spec: &MixtureSpec, keep: bool) -> Result<Mixture> {
    let speakers = spec.resolve_speakers()?;
    let n = spec.num_samples();
    let m = spec.channels;
    let sr = spec.sample_rate;
    let mut mixture = Array2::zeros((m, n));
    let mut direct_images = Vec::new();
    let mut wet_images = Vec::new();
    let mut segments = Vec::new();
    let mut signal_energy = 0.0;

    for (k, spk) in speakers.iter().enumerate() {
        let mut rng = rng_for(spec.seed, k as u64);
        let source = voiced_source(&spk.segments, n, sr, &mut rng);
        let (delays, gains) = steering(m, spec.max_delay, spec.gain_spread, &mut rng);
        let mut direct = if keep { Array2::zeros((m, n)) } else { Array2::zeros((0, 0)) };
        let mut wet = if keep && spec.reverb.is_some() { Array2::zeros((m, n)) } else { Array2::zeros((0, 0)) };
        for c in 0..m {
            let reference = delayed(&source, delays[c], gains[c]);
            let image = match &spec.reverb {
                Some(r) => fft_convolve(&source, &room_response(delays[c], gains[c], r, sr, &mut rng)),
                None => reference.clone(),
            };
            signal_energy += image.iter().map(|v| v * v).sum::<f64>();
            mixture.row_mut(c).iter_mut().zip(&image).for_each(|(a, b)| *a += b);
            if keep {
                direct.row_mut(c).assign(&ndarray::ArrayView1::from(&reference));
                if spec.reverb.is_some() {
                    wet.row_mut(c).assign(&ndarray::ArrayView1::from(&image));
                }
            }
        }
        if keep {
            if spec.reverb.is_none() {
                wet = direct.clone();
            }
            direct_images.push(direct);
            wet_images.push(wet);
        }
        for sp in &spk.segments {
            segments.push(Segment {
                id: Segment::canonical_id(&spec.recording_id, &spk.id, sp.start, sp.duration),
                recording_id: spec.recording_id.clone(),
                speaker: spk.id.clone(),
                start: sp.start,
                duration: sp.duration,
            });
        }
    }

    let mut noise = Array2::zeros(if keep { (m, n) } else { (0, 0) });
    if let Some(snr) = spec.noise_snr_db {
        let power = signal_energy / (m * n).max(1) as f64;
        let std = (power / 10f64.powf(snr / 10.0)).sqrt();
        let mut rng = rng_for(spec.seed, 2000);
        let normal = Normal::new(0.0, std.max(f64::MIN_POSITIVE)).expect("finite std");
        for c in 0..m {
            for i in 0..n {
                let v = normal.sample(&mut rng);
                mixture[[c, i]] += v;
                if keep {
                    noise[[c, i]] = v;
                }
            }
        }
    } else if keep {
        noise = Array2::zeros((m, n));
    }

    segments.sort_by(|a, b| a.start.total_cmp(&b.start).then_with(|| a.id.cmp(&b.id)));
    let recording = Recording {
        id: spec.recording_id.clone(),
        sources: vec![AudioSource {
            path: PathBuf::from(format!("{}.wav", spec.recording_id)),
            channels: (0..m).collect(),
        }],
        sample_rate: sr,
        duration: n as f64 / sr as f64,
    };
    Ok(Mixture {
        spec: spec.clone(),
        recording,
        segments,
        speakers: speakers.into_iter().map(|s| s.id).collect(),
        mixture,
        direct: direct_images,
        wet: wet_images,
        noise,
    })
}

fn steering(m: usize, max_delay: usize, spread: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<f64>) {
    let mut delays = vec![0; m];
    let mut gains = vec![1.0; m];
    for c in 1..m {
        delays[c] = rng.gen_range(0..=max_delay);
        gains[c] = 1.0 - spread * rng.gen::<f64>();
    }
    (delays, gains)
}

fn delayed(x: &[f64], delay: usize, gain: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if delay < x.len() {
        out[delay..].iter_mut().zip(x).for_each(|(o, v)| *o = gain * v);
    }
    out
}

/// Direct impulse followed, 2 ms later, by a Gaussian tail decaying 60 dB
/// over `t60`, scaled to the requested direct-to-reverberant ratio.
fn room_response(delay: usize, gain: f64, r: &ReverbSpec, sr: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gap = (0.002 * sr as f64).round() as usize;
    let tail_len = (r.t60 * sr as f64).round() as usize;
    let mut h = vec![0.0; delay + gap + tail_len];
    h[delay] = gain;
    let decay = 3.0 * 10f64.ln() / (r.t60 * sr as f64);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut energy = 0.0;
    for i in 0..tail_len {
        let v = normal.sample(rng) * (-decay * i as f64).exp();
        h[delay + gap + i] = v;
        energy += v * v;
    }
    let drr = r.direct_to_reverb_db + r.drr_spread_db * (2.0 * rng.gen::<f64>() - 1.0);
    let target = gain * gain * 10f64.powf(-drr / 10.0);
    let scale = if energy > 0.0 { (target / energy).sqrt() } else { 0.0 };
    h[delay + gap..].iter_mut().for_each(|v| *v *= scale);
    h
}

/// Linear convolution truncated to `x.len()`, by overlap-add.
fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![0.0; n];
    if h.is_empty() || n == 0 {
        return out;
    }
    let block = 1 << 15;
    let size = (block + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut hf: Vec<Complex<f64>> = h.iter().map(|&v| Complex::new(v, 0.0)).collect();
    hf.resize(size, Complex::new(0.0, 0.0));
    fwd.process(&mut hf);
    let mut buf = vec![Complex::new(0.0, 0.0); size];
    for start in (0..n).step_by(block) {
        let end = (start + block).min(n);
        buf.iter_mut().for_each(|v| *v = Complex::new(0.0, 0.0));
        for (b, &v) in buf.iter_mut().zip(&x[start..end]) {
            b.re = v;
        }
        fwd.process(&mut buf);
        buf.iter_mut().zip(&hf).for_each(|(a, b)| *a *= b);
        inv.process(&mut buf);
        let scale = 1.0 / size as f64;
        for (i, v) in buf.iter().enumerate().take((end - start) + h.len() - 1) {
            if start + i >= n {
                break;
            }
            out[start + i] += v.re * scale;
        }
    }
    out
}

/// Voiced source of unit RMS over its segments (zero elsewhere).
fn voiced_source(spans: &[Span], n: usize, sr: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = sr as f64;
    let mut out = vec![0.0; n];
    let f0_base: f64 = rng.gen_range(90.0..240.0);
    let fade = (0.01 * fs) as usize;
    // smooth random f0 perturbation, roughly 5 % deviation
    let jitter_step = ((0.005 * fs) as usize).max(1);
    let jitter_noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut jitter = 0.0;
    for sp in spans {
        let a = ((sp.start * fs).round() as usize).min(n);
        let b = (((sp.start + sp.duration) * fs).round() as usize).min(n);
        let mut t = a;
        let mut phase = rng.gen_range(0.0..2.0 * PI);
        while t < b {
            let syl = ((rng.gen_range(0.12..0.30) * fs) as usize).min(b - t);
            let gap = (rng.gen_range(0.02..0.10) * fs) as usize;
            let f_start = f0_base * rng.gen_range(0.85..1.15);
            let f_end = f0_base * rng.gen_range(0.85..1.15);
            let formants = [
                (rng.gen_range(300.0..850.0), 120.0, 6.0),
                (rng.gen_range(900.0..2400.0), 180.0, 4.0),
                (rng.gen_range(2400.0..3400.0), 250.0, 2.0),
            ];
            let harmonics = ((0.45 * fs / f_start.max(f_end)) as usize).clamp(1, 48);
            let mut amps = vec![0.0; harmonics + 1];
            for i in 0..syl {
                let u = i as f64 / syl.max(1) as f64;
                if i % jitter_step == 0 {
                    jitter = 0.8 * jitter + 0.03 * jitter_noise.sample(rng);
                }
                let f0 = (f_start + (f_end - f_start) * u) * (1.0 + jitter);
                if i % 64 == 0 {
                    for (h, amp) in amps.iter_mut().enumerate().skip(1) {
                        let f = h as f64 * f0;
                        let boost: f64 = formants
                            .iter()
                            .map(|&(c, w, g)| g * (-((f - c) / w).powi(2)).exp())
                            .sum();
                        *amp = (1.0 + boost) / (1.0 + f / 500.0).powf(1.2);
                    }
                }
                phase += 2.0 * PI * f0 / fs;
                if phase > 2.0 * PI {
                    phase -= 2.0 * PI;
                }
                // sin(hφ) by the Chebyshev recurrence
                let c2 = 2.0 * phase.cos();
                let (mut s_prev, mut s_cur) = (0.0, phase.sin());
                let mut acc = amps[1] * s_cur;
                for amp in &amps[2..] {
                    let s_next = c2 * s_cur - s_prev;
                    s_prev = s_cur;
                    s_cur = s_next;
                    acc += amp * s_cur;
                }
                out[t + i] = acc * (PI * u).sin().powf(0.7);
            }
            t += syl + gap;
        }
        for i in 0..fade.min((b - a) / 2) {
            let w = 0.5 - 0.5 * (PI * i as f64 / fade as f64).cos();
            out[a + i] *= w;
            out[b - 1 - i] *= w;
        }
    }
    let active: usize = spans
        .iter()
        .map(|sp| ((sp.duration * fs).round() as usize).min(n))
        .sum();
    let energy: f64 = out.iter().map(|v| v * v).sum();
    if energy > 0.0 {
        let scale = 0.1 * (active as f64 / energy).sqrt();
        out.iter_mut().for_each(|v| *v *= scale);
    }
    out
}

/// Scale-invariant SDR in dB over the common length, capped at
/// [`SI_SDR_CAP`].
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    let n = estimate.len().min(reference.len());
    let (est, refr) = (&estimate[..n], &reference[..n]);
    let ref_energy: f64 = refr.iter().map(|v| v * v).sum();
    if !(ref_energy > 0.0) {
        return Err(Error::Validation("SI-SDR reference has no energy".into()));
    }
    let alpha = est.iter().zip(refr).map(|(a, b)| a * b).sum::<f64>() / ref_energy;
    let target = alpha * alpha * ref_energy;
    let residual: f64 = est.iter().zip(refr).map(|(e, r)| (alpha * r - e).powi(2)).sum();
    if residual <= target * 10f64.powf(-SI_SDR_CAP / 10.0) {
        return Ok(SI_SDR_CAP);
    }
    if target <= 0.0 {
        return Ok(-SI_SDR_CAP);
    }
    Ok((10.0 * (target / residual).log10()).clamp(-SI_SDR_CAP, SI_SDR_CAP))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentScore {
    pub segment_id: String,
    pub speaker: String,
    pub si_sdr: f64,
    /// Best input channel.
    pub baseline: f64,
    pub improvement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpeakerScore {
    pub speaker: String,
    pub segments: usize,
    pub mean_si_sdr: f64,
    pub median_si_sdr: f64,
    pub mean_baseline: f64,
    pub mean_improvement: f64,
}

fn best_channel_si_sdr(est: &[f64], image: &Array2<f64>, a: usize, b: usize) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for c in 0..image.nrows() {
        let r = image.slice(s![c, a..b]);
        best = best.max(si_sdr(est, r.as_slice().expect("row slice is contiguous"))?);
    }
    Ok(best)
}

/// Scores one estimate of a segment against the speaker's direct-path image
/// (best channel) and the mixture baseline (best channel).
pub fn score_segment(mix: &Mixture, segment: &Segment, estimate: &[f64]) -> Result<SegmentScore> {
    let k = mix
        .speaker_index(&segment.speaker)
        .ok_or_else(|| Error::Validation(format!("unknown speaker {}", segment.speaker)))?;
    if !mix.has_images() {
        return Err(Error::Validation("mixture was generated without images".into()));
    }
    let sr = mix.recording.sample_rate;
    let n = mix.mixture.ncols();
    let a = segment.start_sample(sr).min(n);
    let b = (a + estimate.len()).min(n);
    let est = &estimate[..b - a];
    let enhanced = best_channel_si_sdr(est, &mix.direct[k], a, b)?;
    let mut baseline = f64::NEG_INFINITY;
    for c in 0..mix.mixture.nrows() {
        let y = mix.mixture.slice(s![c, a..b]);
        let r = mix.direct[k].slice(s![c, a..b]);
        baseline = baseline.max(si_sdr(
            y.as_slice().expect("contiguous"),
            r.as_slice().expect("contiguous"),
        )?);
    }
    Ok(SegmentScore {
        segment_id: segment.id.clone(),
        speaker: segment.speaker.clone(),
        si_sdr: enhanced,
        baseline,
        improvement: enhanced - baseline,
    })
}

pub fn score_outputs(mix: &Mixture, outputs: &[EnhancedSegment]) -> Result<Vec<SegmentScore>> {
    outputs.iter().map(|o| score_segment(mix, &o.segment, &o.samples)).collect()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Per-speaker aggregates, sorted by speaker.
pub fn summarize(scores: &[SegmentScore]) -> Vec<SpeakerScore> {
    let mut speakers: Vec<&str> = scores.iter().map(|s| s.speaker.as_str()).collect();
    speakers.sort_unstable();
    speakers.dedup();
    speakers
        .into_iter()
        .map(|spk| {
            let mine: Vec<&SegmentScore> = scores.iter().filter(|s| s.speaker == spk).collect();
            let sdr: Vec<f64> = mine.iter().map(|s| s.si_sdr).collect();
            SpeakerScore {
                speaker: spk.to_string(),
                segments: mine.len(),
                mean_si_sdr: mean(&sdr),
                median_si_sdr: median(&sdr),
                mean_baseline: mean(&mine.iter().map(|s| s.baseline).collect::<Vec<_>>()),
                mean_improvement: mean(&mine.iter().map(|s| s.improvement).collect::<Vec<_>>()),
            }
        })
        .collect()
}

/// MVDR driven by ideal ratio masks from the true direct-path images, one
/// filter per speaker over the whole recording. Reverberation and noise form
/// one residual class. Uses the front end of `cfg` (channel subset, WPE) so
/// it bounds the pipeline run with the same configuration.
pub fn oracle_mvdr(mix: &Mixture, cfg: &EnhanceConfig) -> Result<Vec<SegmentScore>> {
    if !mix.has_images() {
        return Err(Error::Validation("oracle needs the ground-truth images".into()));
    }
    let stft = Stft::new(StftConfig {
        sample_rate: mix.recording.sample_rate,
        ..cfg.stft
    })?;
    let channels: Vec<usize> = match &cfg.channels {
        Some(sel) => sel.clone(),
        None => (0..mix.mixture.nrows()).collect(),
    };
    if channels.iter().any(|&c| c >= mix.mixture.nrows()) {
        return Err(Error::Config("channel subset exceeds the mixture".into()));
    }
    let pick = |x: &Array2<f64>| x.select(Axis(0), &channels);
    let mixture = pick(&mix.mixture);
    let mut y = stft.analyze(mixture.view())?;
    if cfg.use_wpe {
        y = dereverberate(&y, &cfg.wpe)?;
    }
    let (f, t) = (y.num_bins(), y.num_frames());
    let k = mix.speakers.len();
    let power = |x: &Array2<f64>| -> Result<Array2<f64>> {
        let spec = stft.analyze(x.view())?;
        Ok(spec.data.map(|v| v.norm_sqr()).sum_axis(Axis(2)))
    };
    let mut residual = mixture.clone();
    let mut powers = Vec::with_capacity(k + 1);
    for direct in &mix.direct {
        let d = pick(direct);
        residual -= &d;
        powers.push(power(&d)?);
    }
    powers.push(power(&residual)?);
    let mut gamma = Array3::zeros((f, t, k + 1));
    for fi in 0..f {
        for ti in 0..t {
            let total: f64 = powers.iter().map(|p| p[[fi, ti]]).sum();
            for (c, p) in powers.iter().enumerate() {
                gamma[[fi, ti, c]] = if total > 0.0 { p[[fi, ti]] / total } else { 1.0 / (k + 1) as f64 };
            }
        }
    }
    let posteriors = PosteriorTensor { gamma };
    let n = mix.mixture.ncols();
    let sr = mix.recording.sample_rate;
    let mut scores = Vec::new();
    for (spk_index, spk) in mix.speakers.iter().enumerate() {
        let stats = accumulate_stats(&y, &posteriors, spk_index)?;
        let filter = mvdr(&stats, select_reference(&stats))?;
        let wave = stft.synthesize(apply(&filter, &y)?.view(), n)?;
        for seg in mix.segments.iter().filter(|s| &s.speaker == spk) {
            let a = seg.start_sample(sr).min(n);
            let b = seg.end_sample(sr).min(n);
            scores.push(score_segment(mix, seg, &wave[a..b])?);
        }
    }
    scores.sort_by(|a, b| a.segment_id.cmp(&b.segment_id));
    Ok(scores)
}

struct MixtureAudio<'a>(&'a Mixture);

impl AudioProvider for MixtureAudio<'_> {
    fn read(&self, recording: &Recording, start: usize, len: usize) -> Result<Array2<f64>> {
        if recording.id != self.0.recording.id {
            return Err(Error::Validation(format!("no audio for recording {}", recording.id)));
        }
        let sig = &self.0.mixture;
        let mut out = Array2::zeros((sig.nrows(), len));
        let end = (start + len).min(sig.ncols());
        if start < end {
            out.slice_mut(s![.., ..end - start]).assign(&sig.slice(s![.., start..end]));
        }
        Ok(out)
    }
}

/// Runs the enhancement pipeline on an in-memory mixture; outputs are
/// sorted by segment id.
pub fn enhance(mix: &Mixture, cfg: &EnhanceConfig) -> Result<(Vec<EnhancedSegment>, RunSummary)> {
    let mut sink = MemorySink::default();
    let summary = run_with(
        std::slice::from_ref(&mix.recording),
        &mix.segments,
        cfg,
        &MixtureAudio(mix),
        &mut sink,
    )?;
    let mut outputs = sink.outputs;
    outputs.sort_by(|a, b| a.segment.id.cmp(&b.segment.id));
    Ok((outputs, summary))
}

/// Two speakers, 30 % overlap, four anechoic channels, 20 dB sensor noise.
pub fn standard() -> MixtureSpec {
    MixtureSpec {
        recording_id: "standard".into(),
        sample_rate: 16_000,
        duration: 60.0,
        channels: 4,
        speakers: Vec::new(),
        layout: Some(LayoutSpec {
            speakers: 2,
            overlap_ratio: 0.3,
            min_turn: 3.0,
            max_turn: 8.0,
        }),
        max_delay: 8,
        gain_spread: 0.5,
        reverb: None,
        noise_snr_db: Some(20.0),
        seed: 7,
    }
}

/// Two speakers over eight reverberant channels.
pub fn reverberant() -> MixtureSpec {
    MixtureSpec {
        recording_id: "reverberant".into(),
        duration: 60.0,
        channels: 8,
        reverb: Some(ReverbSpec {
            t60: 0.8,
            direct_to_reverb_db: -3.0,
            drr_spread_db: 0.0,
        }),
        noise_snr_db: Some(30.0),
        seed: 11,
        ..standard()
    }
}

/// Long anechoic conversation for throughput measurements.
pub fn long_conversation(duration: f64) -> MixtureSpec {
    MixtureSpec {
        recording_id: "long".into(),
        duration,
        seed: 13,
        ..standard()
    }
}

/// `count` short segments alternating between two speakers.
pub fn short_segments(count: usize) -> MixtureSpec {
    let mut speakers = vec![
        SpeakerSpec { id: "spk0".into(), segments: Vec::new() },
        SpeakerSpec { id: "spk1".into(), segments: Vec::new() },
    ];
    for i in 0..count {
        speakers[i % 2].segments.push(Span {
            start: 0.5 + 2.0 * i as f64,
            duration: 1.5,
        });
    }
    MixtureSpec {
        recording_id: "short".into(),
        duration: 1.0 + 2.0 * count as f64,
        speakers,
        layout: None,
        seed: 17,
        ..standard()
    }
}

/// Parameter grid; every combination is one bench row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchGrid {
    #[serde(default = "default_contexts")]
    pub context: Vec<f64>,
    #[serde(default = "default_iterations")]
    pub iterations: Vec<usize>,
    /// Leading-channel counts; empty means all channels.
    #[serde(default)]
    pub channels: Vec<usize>,
    #[serde(default = "default_wpe")]
    pub wpe: Vec<bool>,
}

fn default_contexts() -> Vec<f64> {
    vec![15.0]
}

fn default_iterations() -> Vec<usize> {
    vec![20]
}

fn default_wpe() -> Vec<bool> {
    vec![true]
}

impl Default for BenchGrid {
    fn default() -> Self {
        Self {
            context: default_contexts(),
            iterations: default_iterations(),
            channels: Vec::new(),
            wpe: default_wpe(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    pub mixture: MixtureSpec,
    #[serde(default)]
    pub grid: BenchGrid,
    /// Base configuration the grid overrides.
    #[serde(default)]
    pub config: Option<EnhanceConfig>,
}

impl BenchSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: BenchSpec = serde_json::from_str(text).map_err(|e| Error::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.mixture.resolve_speakers()?;
        let g = &self.grid;
        if g.context.is_empty() || g.iterations.is_empty() || g.wpe.is_empty() {
            return Err(Error::Spec("grid axes must not be empty".into()));
        }
        if g.context.iter().any(|c| !(*c >= 0.0)) || g.iterations.contains(&0) {
            return Err(Error::Spec("contexts must be ≥ 0 and iterations ≥ 1".into()));
        }
        if g.channels.iter().any(|&c| c == 0 || c > self.mixture.channels) {
            return Err(Error::Spec(format!(
                "channel counts must lie in 1..={}",
                self.mixture.channels
            )));
        }
        if let Some(cfg) = &self.config {
            cfg.validate().map_err(|e| Error::Spec(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub context: f64,
    pub iterations: usize,
    pub channels: usize,
    pub wpe: bool,
    pub segments: usize,
    pub failed: usize,
    pub mean_si_sdr: f64,
    pub median_si_sdr: f64,
    pub mean_improvement: f64,
    pub seconds: f64,
}

pub const BENCH_CSV_HEADER: &str =
    "context,iterations,channels,wpe,segments,failed,mean_si_sdr,median_si_sdr,mean_improvement,seconds";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.4},{:.4},{:.4},{:.3}",
            self.context,
            self.iterations,
            self.channels,
            self.wpe,
            self.segments,
            self.failed,
            self.mean_si_sdr,
            self.median_si_sdr,
            self.mean_improvement,
            self.seconds
        )
    }
}

/// Scores the enhanced segments of one configuration.
pub fn evaluate(mix: &Mixture, cfg: &EnhanceConfig) -> Result<(Vec<SegmentScore>, RunSummary)> {
    let (outputs, summary) = enhance(mix, cfg)?;
    Ok((score_outputs(mix, &outputs)?, summary))
}

/// Runs every grid point on one generated mixture.
pub fn run_bench(spec: &BenchSpec, mix: &Mixture) -> Result<Vec<BenchRow>> {
    spec.validate()?;
    let base = spec.config.clone().unwrap_or_default();
    let channel_axis = if spec.grid.channels.is_empty() {
        vec![mix.mixture.nrows()]
    } else {
        spec.grid.channels.clone()
    };
    let mut rows = Vec::new();
    for &context in &spec.grid.context {
        for &iterations in &spec.grid.iterations {
            for &channels in &channel_axis {
                for &wpe in &spec.grid.wpe {
                    let mut cfg = base.clone();
                    cfg.context_duration = context;
                    cfg.bss.iterations = iterations;
                    cfg.use_wpe = wpe;
                    cfg.channels = (channels < mix.mixture.nrows()).then(|| (0..channels).collect());
                    let t = Instant::now();
                    let (scores, summary) = evaluate(mix, &cfg)?;
                    let sdr: Vec<f64> = scores.iter().map(|s| s.si_sdr).collect();
                    let imp: Vec<f64> = scores.iter().map(|s| s.improvement).collect();
                    rows.push(BenchRow {
                        context,
                        iterations,
                        channels,
                        wpe,
                        segments: summary.segments_total,
                        failed: summary.segments_failed,
                        mean_si_sdr: mean(&sdr),
                        median_si_sdr: median(&sdr),
                        mean_improvement: mean(&imp),
                        seconds: t.elapsed().as_secs_f64(),
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{BENCH_CSV_HEADER}").map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(f, "{}", r.csv()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
