//! Weighted prediction error dereverberation and unit-norm channel vectors.
//!
//! Each frequency bin is processed independently (and in parallel): the late
//! reverberation at frame `t` is predicted from the stacked past frames
//! `t−delay … t−delay−taps+1` of all channels with a filter fitted by
//! variance-weighted least squares, then subtracted.

use log::warn;
use ndarray::{s, Array2, Array3, ArrayView2, ArrayViewMut2, Axis};
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{regularize, CMatrix, HermitianMatrix, PdFactor};
use crate::stft::SpectrogramTensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WpeConfig {
    pub taps: usize,
    pub delay: usize,
    pub iterations: usize,
    /// Frames on each side averaged into the variance estimate.
    pub psd_context: usize,
    pub regularization: f64,
}

impl Default for WpeConfig {
    fn default() -> Self {
        Self {
            taps: 10,
            delay: 2,
            iterations: 3,
            psd_context: 0,
            regularization: 1e-10,
        }
    }
}

impl WpeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.taps == 0 || self.delay == 0 || self.iterations == 0 {
            return Err(Error::Config("wpe taps, delay and iterations must be ≥ 1".into()));
        }
        if !(self.regularization >= 0.0) {
            return Err(Error::Config("wpe regularization must be non-negative".into()));
        }
        Ok(())
    }
}

/// Removes the predicted late reverberation from every frequency bin.
///
/// Inputs with `T ≤ taps + delay` frames are returned unchanged (with a
/// warning): there is no past to predict from.
pub fn dereverberate(y: &SpectrogramTensor, cfg: &WpeConfig) -> Result<SpectrogramTensor> {
    cfg.validate()?;
    let frames = y.num_frames();
    if frames <= cfg.taps + cfg.delay {
        warn!(
            "wpe: {frames} frames is too short for taps={} delay={}, passing through",
            cfg.taps, cfg.delay
        );
        return Ok(y.clone());
    }
    let mut out = Array3::<C64>::zeros(y.data.raw_dim());
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(y.data.axis_iter(Axis(0)).into_par_iter())
        .enumerate()
        .try_for_each(|(f, (o, yf))| wpe_bin(yf, o, cfg).map_err(|e| e.at_frequency(f)))?;
    Ok(y.with_data(out))
}

fn wpe_bin(y: ArrayView2<'_, C64>, mut out: ArrayViewMut2<'_, C64>, cfg: &WpeConfig) -> Result<()> {
    let (frames, channels) = y.dim();
    let d = channels * cfg.taps;
    let rows = frames - cfg.delay;
    // real design matrix, one row per predicted frame t ≥ delay:
    // [Re s_t | Im s_t | Re y_t | Im y_t], s_t the stacked past frames
    let width = 2 * d + 2 * channels;
    let mut u = Array2::<f64>::zeros((rows, width));
    for (r, mut row) in u.axis_iter_mut(Axis(0)).enumerate() {
        let t = r + cfg.delay;
        for tap in 0..cfg.taps {
            if let Some(src) = t.checked_sub(cfg.delay + tap) {
                for m in 0..channels {
                    let v = y[[src, m]];
                    row[tap * channels + m] = v.re;
                    row[d + tap * channels + m] = v.im;
                }
            }
        }
        for m in 0..channels {
            row[2 * d + m] = y[[t, m]].re;
            row[2 * d + channels + m] = y[[t, m]].im;
        }
    }
    let stacked = u.slice(s![.., ..2 * d]);

    let mut x: Array2<C64> = y.to_owned();
    let mut power = vec![0.0; frames];
    let mut weighted = Array2::<f64>::zeros((rows, 2 * d));
    for _ in 0..cfg.iterations {
        for (t, pw) in power.iter_mut().enumerate() {
            *pw = x.row(t).iter().map(|v| v.norm_sqr()).sum::<f64>() / channels as f64;
        }
        let lambda = smooth(&power, cfg.psd_context);
        let mean = lambda.iter().sum::<f64>() / frames as f64;
        if !(mean > 0.0) || !mean.is_finite() {
            // silent bin: nothing to predict
            break;
        }
        let floor = 1e-10 * mean;
        for (r, mut row) in weighted.axis_iter_mut(Axis(0)).enumerate() {
            let w = 1.0 / lambda[r + cfg.delay].max(floor);
            row.assign(&stacked.row(r));
            row.mapv_inplace(|v| v * w);
        }
        // g = Σ_t w_t [s; y]-products in real form
        let g = weighted.t().dot(&u);
        let yr = 2 * d;
        let yi = 2 * d + channels;
        let mut corr = CMatrix::zeros(d, d);
        for a in 0..d {
            for b in a..d {
                let re = g[[a, b]] + g[[d + a, d + b]];
                let im = g[[d + a, b]] - g[[a, d + b]];
                corr[(a, b)] = C64::new(re, im);
                corr[(b, a)] = C64::new(re, -im);
            }
            corr[(a, a)].im = 0.0;
        }
        let mut cross = CMatrix::zeros(d, channels);
        for a in 0..d {
            for m in 0..channels {
                let re = g[[a, yr + m]] + g[[d + a, yi + m]];
                let im = g[[d + a, yr + m]] - g[[a, yi + m]];
                cross[(a, m)] = C64::new(re, im);
            }
        }
        let corr = regularize(&HermitianMatrix::from_raw(corr), cfg.regularization);
        let filter = PdFactor::new(&corr)?.solve(&cross)?;

        // prediction Gᴴ s_t in real form: [Re s | Im s] · [[Re G, −Im G], [Im G, Re G]]
        let mut k = Array2::<f64>::zeros((2 * d, 2 * channels));
        for a in 0..d {
            for m in 0..channels {
                let gv = filter[(a, m)];
                k[[a, m]] = gv.re;
                k[[a, channels + m]] = -gv.im;
                k[[d + a, m]] = gv.im;
                k[[d + a, channels + m]] = gv.re;
            }
        }
        let pred = stacked.dot(&k);
        x.assign(&y);
        for r in 0..rows {
            for m in 0..channels {
                x[[r + cfg.delay, m]] -= C64::new(pred[[r, m]], pred[[r, channels + m]]);
            }
        }
    }
    out.assign(&x);
    Ok(())
}

fn smooth(power: &[f64], context: usize) -> Vec<f64> {
    if context == 0 {
        return power.to_vec();
    }
    let n = power.len();
    (0..n)
        .map(|t| {
            let lo = t.saturating_sub(context);
            let hi = (t + context + 1).min(n);
            power[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Divides every `(f, t)` channel vector by its Euclidean norm. Exact zero
/// vectors stay zero.
pub fn unit_normalize(y: &SpectrogramTensor) -> SpectrogramTensor {
    let mut data = y.data.clone();
    data.axis_iter_mut(Axis(0)).into_par_iter().for_each(|mut bin| {
        for mut v in bin.axis_iter_mut(Axis(0)) {
            let scale = v.iter().fold(0.0f64, |acc, c| acc.max(c.re.abs()).max(c.im.abs()));
            if scale == 0.0 || !scale.is_finite() {
                v.fill(C64::new(0.0, 0.0));
                continue;
            }
            let norm = scale * v.iter().map(|c| (c / scale).norm_sqr()).sum::<f64>().sqrt();
            v.mapv_inplace(|c| c / norm);
        }
    });
    y.with_data(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stft::StftConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn tensor(data: Array3<C64>) -> SpectrogramTensor {
        let config = StftConfig::default();
        let frames = data.shape()[1];
        SpectrogramTensor {
            data,
            config,
            origin_samples: 0,
            num_samples: (frames - 1) * config.shift,
        }
    }

    fn cn(rng: &mut impl Rng) -> C64 {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
    }

    fn random_tensor(rng: &mut impl Rng, f: usize, t: usize, m: usize) -> Array3<C64> {
        Array3::from_shape_fn((f, t, m), |_| cn(rng))
    }

    fn energy(a: &Array3<C64>) -> f64 {
        a.iter().map(|v| v.norm_sqr()).sum()
    }

    #[test]
    fn leading_frames_are_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = tensor(random_tensor(&mut rng, 4, 100, 2));
        let cfg = WpeConfig::default();
        let x = dereverberate(&y, &cfg).unwrap();
        for f in 0..4 {
            for t in 0..cfg.delay {
                for m in 0..2 {
                    assert_eq!(x.data[[f, t, m]], y.data[[f, t, m]]);
                }
            }
        }
        assert_eq!(x.data.dim(), y.data.dim());
    }

    #[test]
    fn short_input_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = tensor(random_tensor(&mut rng, 3, 12, 2));
        let x = dereverberate(&y, &WpeConfig::default()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rejects_zero_taps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = tensor(random_tensor(&mut rng, 3, 40, 2));
        let cfg = WpeConfig { taps: 0, ..Default::default() };
        assert!(matches!(dereverberate(&y, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn white_noise_energy_is_kept() {
        // no temporal structure: the prediction removes only what the D-dimensional
        // least-squares fit explains by chance (about D/T of the energy)
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = tensor(random_tensor(&mut rng, 8, 2000, 4));
        let cfg = WpeConfig { iterations: 1, ..Default::default() };
        let x = dereverberate(&y, &cfg).unwrap();
        let ratio = energy(&x.data) / energy(&y.data);
        assert!((0.9..=1.1).contains(&ratio), "energy ratio {ratio}");
    }

    #[test]
    fn single_echo_is_attenuated() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = WpeConfig::default();
        let (f, t, m) = (6, 600, 2);
        let dry = random_tensor(&mut rng, f, t, m);
        let lag = cfg.delay + 1;
        let mut wet = dry.clone();
        for fi in 0..f {
            let gains: Vec<C64> = (0..m).map(|_| cn(&mut rng) * 0.6).collect();
            for ti in lag..t {
                for mi in 0..m {
                    let echo = gains[mi] * dry[[fi, ti - lag, 0]];
                    wet[[fi, ti, mi]] += echo;
                }
            }
        }
        let y = tensor(wet.clone());
        let x = dereverberate(&y, &cfg).unwrap();
        let tail_before = energy(&(&wet - &dry));
        let tail_after = energy(&(&x.data - &dry));
        let direct = energy(&dry);
        let gain_db = 10.0 * (direct / tail_after).log10() - 10.0 * (direct / tail_before).log10();
        assert!(gain_db >= 3.0, "direct-to-tail improvement {gain_db:.2} dB");
    }

    #[test]
    fn output_is_finite_with_silent_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut data = random_tensor(&mut rng, 4, 200, 3);
        data.index_axis_mut(Axis(2), 1).fill(C64::new(0.0, 0.0));
        data.index_axis_mut(Axis(0), 2).fill(C64::new(0.0, 0.0));
        let x = dereverberate(&tensor(data), &WpeConfig::default()).unwrap();
        assert!(x.data.iter().all(|v| v.re.is_finite() && v.im.is_finite()));
    }

    #[test]
    fn scale_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = tensor(random_tensor(&mut rng, 4, 150, 2));
        let c = 37.5;
        let x1 = dereverberate(&y, &WpeConfig::default()).unwrap();
        let x2 = dereverberate(&tensor(y.data.mapv(|v| v * c)), &WpeConfig::default()).unwrap();
        let diff = energy(&(&x2.data - &x1.data.mapv(|v| v * c))).sqrt();
        assert!(diff / energy(&x2.data).sqrt() < 1e-5);
    }

    #[test]
    fn unit_normalize_examples() {
        let mut data = Array3::zeros((1, 2, 2));
        data[[0, 0, 0]] = C64::new(3.0, 0.0);
        data[[0, 0, 1]] = C64::new(0.0, 4.0);
        let n = unit_normalize(&tensor(data));
        assert!((n.data[[0, 0, 0]] - C64::new(0.6, 0.0)).norm() < 1e-15);
        assert!((n.data[[0, 0, 1]] - C64::new(0.0, 0.8)).norm() < 1e-15);
        assert_eq!(n.data[[0, 1, 0]], C64::new(0.0, 0.0));
        assert_eq!(n.data[[0, 1, 1]], C64::new(0.0, 0.0));
    }

    #[test]
    fn unit_normalize_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut data = random_tensor(&mut rng, 5, 50, 3);
        // near-silent vectors across several orders of magnitude
        for (i, v) in data.index_axis_mut(Axis(0), 0).iter_mut().enumerate() {
            *v *= 10f64.powi(-((i % 300) as i32));
        }
        let y = tensor(data);
        let n = unit_normalize(&y);
        for f in 0..5 {
            for t in 0..50 {
                let norm: f64 = (0..3).map(|m| n.data[[f, t, m]].norm_sqr()).sum::<f64>().sqrt();
                assert!(norm == 0.0 || (norm - 1.0).abs() <= 1e-5, "norm {norm}");
                // phase of the dominant channel is preserved (division by a positive real)
                let dom = (0..3)
                    .max_by(|a, b| y.data[[f, t, *a]].norm().total_cmp(&y.data[[f, t, *b]].norm()))
                    .unwrap();
                let (a, b) = (y.data[[f, t, dom]], n.data[[f, t, dom]]);
                if a.norm() > 0.0 {
                    assert!((a.arg() - b.arg()).abs() < 1e-12);
                }
            }
        }
        let nn = unit_normalize(&n);
        let diff: f64 = nn.data.iter().zip(n.data.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(diff < 1e-15);
    }
}
