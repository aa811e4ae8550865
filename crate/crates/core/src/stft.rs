//! Multi-channel STFT analysis and overlap-add synthesis.
//!
//! Conventions used throughout the crate:
//!
//! * Signals are reflect-padded by `fft_size / 2` on both sides, so frame `t`
//!   is centred on sample `t · shift` and covers samples
//!   `[t · shift − fft_size/2, t · shift + fft_size/2)` of the unpadded signal.
//! * A signal of `n` samples yields `n / shift + 1` frames (integer division).
//! * Spectra are one-sided with `fft_size / 2 + 1` bins, unnormalized forward FFT.
//! * Tensors are laid out `(F, T, M)`: frequency, frame, channel.
//!
//! Synthesis divides the overlap-added frames by the summed squared window,
//! which makes `synthesize(analyze(x)) == x` for every sample, including the
//! edges, independent of the window/hop combination.
//!
//! Energy: for each frame, `Σ_f c_f |X[f]|² = fft_size · Σ_n (w[n] x[n])²`
//! with `c_f = 1` for DC and Nyquist and `2` otherwise. Summed over frames of
//! a signal whose ends are silent, total spectral energy is
//! `fft_size · (Σ_n w[n]² / shift) · ‖x‖²`; for Hann at 75% overlap that
//! factor is `fft_size · 1.5`.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64 as C64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    #[default]
    Hann,
    SqrtHann,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PadMode {
    #[default]
    ReflectCenter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub shift: usize,
    pub window: WindowKind,
    pub sample_rate: u32,
    pub pad_mode: PadMode,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_size: 1024,
            shift: 256,
            window: WindowKind::Hann,
            sample_rate: 16_000,
            pad_mode: PadMode::ReflectCenter,
        }
    }
}

impl StftConfig {
    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        num_samples / self.shift + 1
    }

    /// Centre sample of frame `t`, relative to the start of the analyzed signal.
    pub fn frame_center(&self, t: usize) -> usize {
        t * self.shift
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 2 || self.fft_size % 2 != 0 {
            return Err(Error::Config(format!(
                "fft_size must be even and ≥ 2, got {}",
                self.fft_size
            )));
        }
        if self.shift == 0 || self.fft_size % self.shift != 0 {
            return Err(Error::Config(format!(
                "shift {} must divide fft_size {}",
                self.shift, self.fft_size
            )));
        }
        if self.shift > self.fft_size / 2 {
            return Err(Error::Config("shift larger than half the window leaves gaps".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn window(&self) -> Vec<f64> {
        let n = self.fft_size;
        (0..n)
            .map(|i| {
                let hann = 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos();
                match self.window {
                    WindowKind::Hann => hann,
                    WindowKind::SqrtHann => hann.sqrt(),
                }
            })
            .collect()
    }
}

/// Complex STFT cube of shape `(F, T, M)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramTensor {
    pub data: Array3<C64>,
    pub config: StftConfig,
    /// Recording sample index that frame 0 is centred on.
    pub origin_samples: usize,
    /// Length of the analyzed signal in samples.
    pub num_samples: usize,
}

impl SpectrogramTensor {
    pub fn num_bins(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn num_frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn num_channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn with_data(&self, data: Array3<C64>) -> Self {
        Self {
            data,
            config: self.config,
            origin_samples: self.origin_samples,
            num_samples: self.num_samples,
        }
    }

    /// Keeps the listed channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Self {
        self.with_data(self.data.select(Axis(2), channels))
    }
}

/// Planned STFT for one configuration.
pub struct Stft {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: config.window(),
            forward: planner.plan_fft_forward(config.fft_size),
            inverse: planner.plan_fft_inverse(config.fft_size),
            config,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    /// Analyzes an `M × N` real signal.
    pub fn analyze(&self, signal: ArrayView2<'_, f64>) -> Result<SpectrogramTensor> {
        let (channels, n) = signal.dim();
        let nfft = self.config.fft_size;
        if n < nfft {
            return Err(Error::InputTooShort {
                samples: n,
                required: nfft,
            });
        }
        if channels == 0 {
            return Err(Error::Shape("signal has no channels".into()));
        }
        let frames = self.config.num_frames(n);
        let bins = self.config.num_bins();
        let half = nfft / 2;
        let mut data = Array3::<C64>::zeros((bins, frames, channels));
        let mut padded = vec![0.0; n + nfft];
        let mut buf = vec![C64::new(0.0, 0.0); nfft];
        let mut scratch = vec![C64::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        for (m, row) in signal.axis_iter(Axis(0)).enumerate() {
            for (i, p) in padded.iter_mut().enumerate() {
                *p = row[reflect_index(i as isize - half as isize, n)];
            }
            for t in 0..frames {
                let start = t * self.config.shift;
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = C64::new(padded[start + k] * self.window[k], 0.0);
                }
                self.forward.process_with_scratch(&mut buf, &mut scratch);
                for f in 0..bins {
                    data[[f, t, m]] = buf[f];
                }
            }
        }
        Ok(SpectrogramTensor {
            data,
            config: self.config,
            origin_samples: 0,
            num_samples: n,
        })
    }

    /// Overlap-add synthesis of a one-sided `F × T` spectrum into `num_samples` samples.
    pub fn synthesize(&self, spec: ArrayView2<'_, C64>, num_samples: usize) -> Result<Vec<f64>> {
        let (bins, frames) = spec.dim();
        let nfft = self.config.fft_size;
        if bins != self.config.num_bins() {
            return Err(Error::Config(format!(
                "spectrum has {bins} bins, config expects {}",
                self.config.num_bins()
            )));
        }
        let half = nfft / 2;
        let shift = self.config.shift;
        let span = if frames == 0 { 0 } else { (frames - 1) * shift + nfft };
        if num_samples + half > span {
            return Err(Error::Config(format!(
                "{frames} frames cannot cover {num_samples} samples"
            )));
        }
        let mut acc = vec![0.0; span];
        let mut norm = vec![0.0; span];
        let mut buf = vec![C64::new(0.0, 0.0); nfft];
        let mut scratch = vec![C64::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        let scale = 1.0 / nfft as f64;
        for t in 0..frames {
            buf[0] = spec[[0, t]];
            for f in 1..bins {
                buf[f] = spec[[f, t]];
                if f < nfft - f {
                    buf[nfft - f] = spec[[f, t]].conj();
                }
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = t * shift;
            for k in 0..nfft {
                let w = self.window[k];
                acc[start + k] += buf[k].re * scale * w;
                norm[start + k] += w * w;
            }
        }
        Ok((0..num_samples)
            .map(|i| {
                let d = norm[i + half];
                if d > 1e-12 {
                    acc[i + half] / d
                } else {
                    0.0
                }
            })
            .collect())
    }

    /// Synthesizes every channel of a tensor back to an `M × num_samples` signal.
    pub fn synthesize_tensor(&self, spec: &SpectrogramTensor) -> Result<Array2<f64>> {
        if spec.config != self.config {
            return Err(Error::Config("tensor was analyzed with a different config".into()));
        }
        let m = spec.num_channels();
        let mut out = Array2::zeros((m, spec.num_samples));
        for ch in 0..m {
            let y = self.synthesize(spec.data.index_axis(Axis(2), ch), spec.num_samples)?;
            out.row_mut(ch).assign(&ndarray::ArrayView1::from(&y));
        }
        Ok(out)
    }
}

fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // single reflection suffices since padding never exceeds the signal length
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i.clamp(0, n - 1) as usize
}
