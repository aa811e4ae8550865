//! WAV reading and writing.
//!
//! Reads PCM 8/16/24/32-bit integer and 32-bit float files, scaled to
//! `[-1, 1)`. Writes mono or multi-channel 32-bit float.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WavInfo {
    pub channels: usize,
    pub sample_rate: u32,
    pub frames: usize,
}

pub fn wav_info(path: &Path) -> Result<WavInfo> {
    let reader = WavReader::open(path).map_err(|e| Error::wav(path, e))?;
    let spec = reader.spec();
    Ok(WavInfo {
        channels: spec.channels as usize,
        sample_rate: spec.sample_rate,
        frames: reader.duration() as usize,
    })
}

/// Reads `len` frames starting at frame `start`, returning `channels × len`.
/// Frames past the end of the file are zero.
pub fn read_wav_range(path: &Path, start: usize, len: usize) -> Result<(Array2<f64>, u32)> {
    let mut reader = WavReader::open(path).map_err(|e| Error::wav(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let total = reader.duration() as usize;
    let mut out = Array2::zeros((channels, len));
    if start >= total || len == 0 {
        return Ok((out, spec.sample_rate));
    }
    reader
        .seek(start as u32)
        .map_err(|e| Error::io(path, e))?;
    let avail = len.min(total - start);
    let count = avail * channels;
    match spec.sample_format {
        SampleFormat::Float => {
            for (i, s) in reader.samples::<f32>().take(count).enumerate() {
                let s = s.map_err(|e| Error::wav(path, e))?;
                out[[i % channels, i / channels]] = s as f64;
            }
        }
        SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            for (i, s) in reader.samples::<i32>().take(count).enumerate() {
                let s = s.map_err(|e| Error::wav(path, e))?;
                out[[i % channels, i / channels]] = s as f64 * scale;
            }
        }
    }
    Ok((out, spec.sample_rate))
}

pub fn read_wav(path: &Path) -> Result<(Array2<f64>, u32)> {
    let info = wav_info(path)?;
    read_wav_range(path, 0, info.frames)
}

/// Writes `channels × samples` as 32-bit float.
pub fn write_wav(path: &Path, samples: &Array2<f64>, sample_rate: u32) -> Result<()> {
    let spec = WavSpec {
        channels: samples.nrows() as u16,
        sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| Error::wav(path, e))?;
    for n in 0..samples.ncols() {
        for c in 0..samples.nrows() {
            writer
                .write_sample(samples[[c, n]] as f32)
                .map_err(|e| Error::wav(path, e))?;
        }
    }
    writer.finalize().map_err(|e| Error::wav(path, e))
}

pub fn write_mono_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let view = ndarray::ArrayView2::from_shape((1, samples.len()), samples)
        .expect("mono shape")
        .to_owned();
    write_wav(path, &view, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_and_range_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let x = Array2::from_shape_fn((3, 100), |(c, n)| (c as f64 + 1.0) * n as f64 / 1000.0);
        write_wav(&path, &x, 8000).unwrap();
        let info = wav_info(&path).unwrap();
        assert_eq!(info, WavInfo { channels: 3, sample_rate: 8000, frames: 100 });
        let (y, sr) = read_wav_range(&path, 90, 20).unwrap();
        assert_eq!(sr, 8000);
        for c in 0..3 {
            for n in 0..10 {
                assert!((y[[c, n]] - x[[c, 90 + n]]).abs() < 1e-6);
            }
            for n in 10..20 {
                assert_eq!(y[[c, n]], 0.0);
            }
        }
    }

    #[test]
    fn pcm16_and_pcm24_are_scaled() {
        let dir = tempfile::tempdir().unwrap();
        for bits in [16u16, 24] {
            let path = dir.path().join(format!("p{bits}.wav"));
            let spec = WavSpec {
                channels: 1,
                sample_rate: 16000,
                bits_per_sample: bits,
                sample_format: SampleFormat::Int,
            };
            let mut w = WavWriter::create(&path, spec).unwrap();
            let half = 1i32 << (bits - 2);
            w.write_sample(half).unwrap();
            w.write_sample(-half).unwrap();
            w.finalize().unwrap();
            let (y, _) = read_wav(&path).unwrap();
            assert!((y[[0, 0]] - 0.5).abs() < 1e-12);
            assert!((y[[0, 1]] + 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_wav(Path::new("/nonexistent/a.wav")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/a.wav"));
    }
}
