//! Mask-based MVDR beamforming.

use log::debug;
use ndarray::{s, Array2, Axis};
use num_complex::Complex64 as C64;
use serde::Serialize;

use crate::cacgmm::PosteriorTensor;
use crate::error::{Error, Result};
use crate::numerics::{
    contract, hermitize, regularize, CMatrix, HermitianMatrix, PdFactor, Tensor,
    DEFAULT_REGULARIZATION,
};
use crate::stft::SpectrogramTensor;

/// Below this `|tr(Φ_bg⁻¹ Φ_k)|` the filter of a bin is set to zero.
pub const TRACE_FLOOR: f64 = 1e-10;
/// Denominator used for a channel with no background power.
const SNR_EPS: f64 = 1e-10;

const STATS_SPEC: &str = "ftc,ftm,ftn->fcmn";
const APPLY_SPEC: &str = "fm,ftm->ft";
const STATS_BLOCK: usize = 32;

/// Target and background spatial covariances per frequency.
#[derive(Clone, Debug)]
pub struct BeamformerStats {
    pub target: Vec<HermitianMatrix>,
    pub background: Vec<HermitianMatrix>,
    pub frame_count: usize,
}

impl BeamformerStats {
    pub fn num_bins(&self) -> usize {
        self.target.len()
    }

    pub fn num_channels(&self) -> usize {
        self.target.first().map_or(0, |m| m.dim())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BeamformerFilter {
    /// `F × M`.
    #[serde(skip)]
    pub h: Array2<C64>,
    pub ref_channel: usize,
    /// Bins whose filter was zeroed.
    pub zeroed_bins: Vec<usize>,
}

/// Mask-weighted covariances `(1/T) Σ_t γ y yᴴ` of the target class and of all
/// other classes combined.
pub fn accumulate_stats(
    y: &SpectrogramTensor,
    posteriors: &PosteriorTensor,
    target: usize,
) -> Result<BeamformerStats> {
    let (bins, frames, channels) = y.data.dim();
    let gamma = &posteriors.gamma;
    if gamma.dim().0 != bins || gamma.dim().1 != frames {
        return Err(Error::Shape(format!(
            "posteriors {:?} do not match spectrogram {:?}",
            gamma.dim(),
            y.data.dim()
        )));
    }
    let k = gamma.dim().2;
    if target >= k {
        return Err(Error::Shape(format!("target class {target} out of {k}")));
    }
    let target_mass: f64 = gamma.index_axis(Axis(2), target).sum();
    if !(target_mass > 0.0) {
        return Err(Error::DegenerateStats);
    }

    let mut target_cov = Vec::with_capacity(bins);
    let mut background_cov = Vec::with_capacity(bins);
    let norm = 1.0 / frames as f64;
    for f0 in (0..bins).step_by(STATS_BLOCK) {
        let f1 = (f0 + STATS_BLOCK).min(bins);
        let fb = f1 - f0;
        let mut masks = Vec::with_capacity(fb * frames * 2);
        for g in gamma.slice(s![f0..f1, .., ..]).lanes(Axis(2)) {
            let tgt = g[target];
            let bg: f64 = g.iter().enumerate().filter(|(j, _)| *j != target).map(|(_, v)| v).sum();
            masks.push(C64::new(tgt, 0.0));
            masks.push(C64::new(bg, 0.0));
        }
        let masks = Tensor::new(vec![fb, frames, 2], masks)?;
        let yb = Tensor::new(
            vec![fb, frames, channels],
            y.data.slice(s![f0..f1, .., ..]).iter().copied().collect(),
        )?;
        let cov = contract(STATS_SPEC, &[&masks, &yb, &yb.conj()])?;
        let mm = channels * channels;
        for fi in 0..fb {
            for (c, dst) in [(0, &mut target_cov), (1, &mut background_cov)] {
                let off = (fi * 2 + c) * mm;
                let raw = CMatrix::from_vec(channels, channels, cov.data()[off..off + mm].to_vec())?;
                dst.push(hermitize(&raw.scaled(C64::new(norm, 0.0)))?);
            }
        }
    }
    Ok(BeamformerStats {
        target: target_cov,
        background: background_cov,
        frame_count: frames,
    })
}

/// Channel with the highest ratio of summed target to summed background
/// power; ties go to the lowest index.
pub fn select_reference(stats: &BeamformerStats) -> usize {
    let m = stats.num_channels();
    let mut best = 0;
    let mut best_snr = f64::NEG_INFINITY;
    for ch in 0..m {
        let num: f64 = stats.target.iter().map(|p| p[(ch, ch)].re).sum();
        let den: f64 = stats.background.iter().map(|p| p[(ch, ch)].re).sum();
        let snr = num / if den > 0.0 { den } else { SNR_EPS };
        if snr > best_snr {
            best = ch;
            best_snr = snr;
        }
    }
    best
}

/// Souden MVDR: `h = Φ_bg⁻¹ Φ_k e_ref / tr(Φ_bg⁻¹ Φ_k)` per frequency.
pub fn mvdr(stats: &BeamformerStats, ref_channel: usize) -> Result<BeamformerFilter> {
    let (bins, m) = (stats.num_bins(), stats.num_channels());
    if ref_channel >= m {
        return Err(Error::Shape(format!("reference channel {ref_channel} out of {m}")));
    }
    let mut h = Array2::zeros((bins, m));
    let mut zeroed_bins = Vec::new();
    for f in 0..bins {
        let bg = regularize(&stats.background[f], DEFAULT_REGULARIZATION);
        let factor = PdFactor::new(&bg).map_err(|e| e.at_frequency(f))?;
        let x = factor.solve(stats.target[f].as_matrix()).map_err(|e| e.at_frequency(f))?;
        let tr = x.trace();
        if !(tr.norm() >= TRACE_FLOOR) || !x.is_finite() {
            zeroed_bins.push(f);
            continue;
        }
        for i in 0..m {
            h[[f, i]] = x[(i, ref_channel)] / tr;
        }
    }
    if !zeroed_bins.is_empty() {
        debug!("mvdr: zeroed {} of {bins} bins", zeroed_bins.len());
    }
    Ok(BeamformerFilter {
        h,
        ref_channel,
        zeroed_bins,
    })
}

/// `X̂[f, t] = h(f)ᴴ y[f, t]`.
pub fn apply(filter: &BeamformerFilter, y: &SpectrogramTensor) -> Result<Array2<C64>> {
    let (bins, frames, channels) = y.data.dim();
    if filter.h.dim() != (bins, channels) {
        return Err(Error::Shape(format!(
            "filter {:?} does not match spectrogram {:?}",
            filter.h.dim(),
            y.data.dim()
        )));
    }
    let hc = Tensor::new(vec![bins, channels], filter.h.iter().map(|v| v.conj()).collect())?;
    let yt = Tensor::new(vec![bins, frames, channels], y.data.iter().copied().collect())?;
    let out = contract(APPLY_SPEC, &[&hc, &yt])?;
    Ok(Array2::from_shape_vec((bins, frames), out.into_data()).expect("apply output shape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stft::StftConfig;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn cn(rng: &mut impl Rng) -> C64 {
        C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    }

    fn tensor(data: Array3<C64>) -> SpectrogramTensor {
        let frames = data.shape()[1];
        let config = StftConfig::default();
        SpectrogramTensor { data, config, origin_samples: 0, num_samples: (frames - 1) * config.shift }
    }

    fn single(target: HermitianMatrix, background: HermitianMatrix) -> BeamformerStats {
        BeamformerStats { target: vec![target], background: vec![background], frame_count: 1 }
    }

    fn close(a: &HermitianMatrix, b: &HermitianMatrix, tol: f64) -> bool {
        let d = a.as_matrix().sub(b.as_matrix()).unwrap().frobenius_norm();
        d <= tol * (1.0 + b.as_matrix().frobenius_norm())
    }

    #[test]
    fn unit_mask_on_constant_vector() {
        let y = [C64::new(1.0, 0.5), C64::new(-0.3, 2.0)];
        let data = Array3::from_shape_fn((2, 5, 2), |(_, _, m)| y[m]);
        let mut gamma = Array3::zeros((2, 5, 2));
        gamma.index_axis_mut(Axis(2), 0).fill(1.0);
        let stats = accumulate_stats(&tensor(data), &PosteriorTensor { gamma }, 0).unwrap();
        for f in 0..2 {
            assert!(close(&stats.target[f], &HermitianMatrix::outer(&y), 1e-12));
            assert!(close(&stats.background[f], &HermitianMatrix::zeros(2), 1e-12));
        }
    }

    #[test]
    fn half_masks_give_equal_covariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = Array3::from_shape_fn((3, 20, 3), |_| cn(&mut rng));
        let gamma = Array3::from_elem((3, 20, 2), 0.5);
        let stats = accumulate_stats(&tensor(data), &PosteriorTensor { gamma }, 1).unwrap();
        for f in 0..3 {
            assert!(close(&stats.target[f], &stats.background[f], 1e-12));
        }
    }

    #[test]
    fn masks_partition_total_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (f, t, m, k) = (40, 30, 3, 3);
        let data = Array3::from_shape_fn((f, t, m), |_| cn(&mut rng));
        let mut gamma = Array3::from_shape_fn((f, t, k), |_| rng.gen::<f64>());
        for mut lane in gamma.lanes_mut(Axis(2)) {
            let s = lane.sum();
            lane.mapv_inplace(|v| v / s);
        }
        let stats = accumulate_stats(&tensor(data.clone()), &PosteriorTensor { gamma }, 2).unwrap();
        for fi in 0..f {
            // direct summation oracle
            let mut total = CMatrix::zeros(m, m);
            for ti in 0..t {
                for i in 0..m {
                    for j in 0..m {
                        total[(i, j)] += data[[fi, ti, i]] * data[[fi, ti, j]].conj() / t as f64;
                    }
                }
            }
            let sum = stats.target[fi].add(&stats.background[fi]).unwrap();
            let d = sum.as_matrix().sub(&total).unwrap().frobenius_norm();
            assert!(d <= 1e-10 * total.frobenius_norm());
        }
    }

    #[test]
    fn zero_target_mask_is_degenerate() {
        let data = Array3::from_elem((2, 4, 2), C64::new(1.0, 0.0));
        let mut gamma = Array3::zeros((2, 4, 2));
        gamma.index_axis_mut(Axis(2), 1).fill(1.0);
        let err = accumulate_stats(&tensor(data), &PosteriorTensor { gamma }, 0).unwrap_err();
        assert!(matches!(err, Error::DegenerateStats));
    }

    #[test]
    fn reference_examples() {
        let s = single(HermitianMatrix::diag(&[2.0, 1.0]), HermitianMatrix::identity(2));
        assert_eq!(select_reference(&s), 0);
        let s = single(HermitianMatrix::identity(2), HermitianMatrix::identity(2));
        assert_eq!(select_reference(&s), 0);
        let s = single(HermitianMatrix::diag(&[1.0, 1.0, 3.0]), HermitianMatrix::diag(&[1.0, 0.0, 1.0]));
        // zero background power reads as ε, so channel 1 wins
        assert_eq!(select_reference(&s), 1);
    }

    #[test]
    fn reference_matches_brute_force_and_permutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (bins, m) = (5, 4);
            let tgt: Vec<Vec<f64>> = (0..bins).map(|_| (0..m).map(|_| rng.gen_range(0.1..2.0)).collect()).collect();
            let bg: Vec<Vec<f64>> = (0..bins).map(|_| (0..m).map(|_| rng.gen_range(0.1..2.0)).collect()).collect();
            let stats = BeamformerStats {
                target: tgt.iter().map(|d| HermitianMatrix::diag(d)).collect(),
                background: bg.iter().map(|d| HermitianMatrix::diag(d)).collect(),
                frame_count: 1,
            };
            let ratio = |ch: usize| {
                tgt.iter().map(|d| d[ch]).sum::<f64>() / bg.iter().map(|d| d[ch]).sum::<f64>()
            };
            let expected = (0..m).fold(0, |b, ch| if ratio(ch) > ratio(b) { ch } else { b });
            assert_eq!(select_reference(&stats), expected);
            let perm = [3, 1, 0, 2];
            let permuted = BeamformerStats {
                target: stats.target.iter().map(|p| p.permuted(&perm)).collect(),
                background: stats.background.iter().map(|p| p.permuted(&perm)).collect(),
                frame_count: 1,
            };
            assert_eq!(perm[select_reference(&permuted)], expected);
        }
    }

    #[test]
    fn mvdr_trivial_case() {
        let s = single(HermitianMatrix::diag(&[1.0, 0.0]), HermitianMatrix::identity(2));
        let filt = mvdr(&s, 0).unwrap();
        assert!((filt.h[[0, 0]] - C64::new(1.0, 0.0)).norm() < 1e-9);
        assert!(filt.h[[0, 1]].norm() < 1e-12);
        assert!(filt.zeroed_bins.is_empty());
    }

    #[test]
    fn mvdr_rank_one_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = 4;
        let d: Vec<C64> = (0..m).map(|_| cn(&mut rng)).collect();
        let sigma2 = 0.3;
        let s = single(HermitianMatrix::outer(&d), HermitianMatrix::identity(m).scaled(sigma2));
        for r in 0..m {
            let filt = mvdr(&s, r).unwrap();
            // Φ_bg⁻¹Φ_k = d dᴴ/σ², trace ‖d‖²/σ², so h = d conj(d_r) / ‖d‖²
            let norm2: f64 = d.iter().map(|v| v.norm_sqr()).sum();
            for i in 0..m {
                let expected = d[i] * d[r].conj() / norm2;
                assert!((filt.h[[0, i]] - expected).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn mvdr_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = 3;
        let rand_psd = |rng: &mut ChaCha8Rng| {
            let a = CMatrix::from_fn(m, m + 2, |_, _| cn(rng));
            hermitize(&a.matmul(&a.adjoint()).unwrap()).unwrap()
        };
        let s = single(rand_psd(&mut rng), rand_psd(&mut rng));
        let base = mvdr(&s, 1).unwrap();
        for c in [0.01, 3.0, 250.0] {
            let a = mvdr(&single(s.target[0].scaled(c), s.background[0].clone()), 1).unwrap();
            let b = mvdr(&single(s.target[0].clone(), s.background[0].scaled(c)), 1).unwrap();
            for i in 0..m {
                assert!((a.h[[0, i]] - base.h[[0, i]]).norm() < 1e-8);
                assert!((b.h[[0, i]] - base.h[[0, i]]).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn mvdr_zeroes_bins_without_target() {
        let s = BeamformerStats {
            target: vec![HermitianMatrix::identity(2), HermitianMatrix::zeros(2)],
            background: vec![HermitianMatrix::identity(2), HermitianMatrix::identity(2)],
            frame_count: 1,
        };
        let filt = mvdr(&s, 0).unwrap();
        assert_eq!(filt.zeroed_bins, vec![1]);
        assert_eq!(filt.h[[1, 0]], C64::new(0.0, 0.0));
        assert!(mvdr(&s, 2).is_err());
    }

    #[test]
    fn apply_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = Array3::from_shape_fn((4, 6, 3), |_| cn(&mut rng));
        let y = tensor(data.clone());
        let mut h = Array2::zeros((4, 3));
        h.column_mut(0).fill(C64::new(1.0, 0.0));
        let pass = BeamformerFilter { h, ref_channel: 0, zeroed_bins: vec![] };
        let out = apply(&pass, &y).unwrap();
        assert_eq!(out, data.index_axis(Axis(2), 0));
        let zero = BeamformerFilter { h: Array2::zeros((4, 3)), ref_channel: 0, zeroed_bins: vec![] };
        assert!(apply(&zero, &y).unwrap().iter().all(|v| v.norm() == 0.0));

        let h = Array2::from_shape_fn((4, 3), |_| cn(&mut rng));
        let filt = BeamformerFilter { h: h.clone(), ref_channel: 0, zeroed_bins: vec![] };
        let data2 = Array3::from_shape_fn((4, 6, 3), |_| cn(&mut rng));
        let a = C64::new(0.3, -1.2);
        let lhs = apply(&filt, &tensor(&data * a + &data2)).unwrap();
        let rhs = apply(&filt, &y).unwrap() * a + apply(&filt, &tensor(data2.clone())).unwrap();
        assert!(lhs.iter().zip(rhs.iter()).all(|(p, q)| (p - q).norm() < 1e-10));
        for f in 0..4 {
            for t in 0..6 {
                let direct: C64 = (0..3).map(|m| h[[f, m]].conj() * data[[f, t, m]]).sum();
                assert!((direct - apply(&filt, &y).unwrap()[[f, t]]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn oracle_mask_mvdr_recovers_target_direction() {
        // two point sources with distinct steering vectors plus weak noise;
        // oracle masks from the known dominant source per bin
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (f, t, m) = (8, 400, 4);
        let steer: Vec<[Vec<C64>; 2]> = (0..f)
            .map(|_| [(0..m).map(|_| cn(&mut rng)).collect(), (0..m).map(|_| cn(&mut rng)).collect()])
            .collect();
        let mut data = Array3::zeros((f, t, m));
        let mut clean = Array2::zeros((f, t));
        let mut gamma = Array3::zeros((f, t, 2));
        for fi in 0..f {
            for ti in 0..t {
                let s0 = cn(&mut rng) * if ti % 2 == 0 { 1.0 } else { 0.05 };
                let s1 = cn(&mut rng) * if ti % 2 == 1 { 1.0 } else { 0.05 };
                for mi in 0..m {
                    data[[fi, ti, mi]] = steer[fi][0][mi] * s0 + steer[fi][1][mi] * s1 + cn(&mut rng) * 0.01;
                }
                clean[[fi, ti]] = steer[fi][0][0] * s0;
                let dominant = if s0.norm() > s1.norm() { 0 } else { 1 };
                gamma[[fi, ti, dominant]] = 1.0;
            }
        }
        let y = tensor(data);
        let stats = accumulate_stats(&y, &PosteriorTensor { gamma }, 0).unwrap();
        let filt = mvdr(&stats, 0).unwrap();
        let out = apply(&filt, &y).unwrap();
        let err: f64 = out.iter().zip(clean.iter()).map(|(a, b)| (a - b).norm_sqr()).sum();
        let sig: f64 = clean.iter().map(|v| v.norm_sqr()).sum();
        assert!(10.0 * (sig / err).log10() > 20.0);
    }
}
