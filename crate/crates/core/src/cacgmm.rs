//! Guided complex angular central Gaussian mixture model.
//!
//! Each class `k` at frequency `f` has a shape matrix `B_{f,k}` (trace
//! normalized to `M`) and a time-invariant weight `π_{f,k}`. Per frame the
//! weights are restricted to the classes active in that frame and
//! renormalized, so a class can never claim a frame where it is silent.
//!
//! Frequencies are fitted in independent blocks. The outer products
//! `y yᴴ` of every frame are packed once per block (upper triangle, `X =
//! M(M+1)/2` entries); E-step quadratic forms are then dot products with the
//! packed inverse, and the M-step scatter matrices are one cached tensor
//! contraction `fkt,fxt->fkx` per iteration.

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifests::ActivityMatrix;
use crate::numerics::{
    contract, hermitize, regularize, CMatrix, Cholesky, HermitianMatrix, PdFactor, Tensor,
    DEFAULT_REGULARIZATION,
};
use crate::stft::SpectrogramTensor;

/// Floor on `yᴴB⁻¹y`.
pub const QUAD_FLOOR: f64 = 1e-10;
/// Floor on the mixture weight of a class with no posterior mass.
pub const WEIGHT_FLOOR: f64 = 1e-10;

const SCATTER_SPEC: &str = "fkt,fxt->fkx";

/// Re-estimation rule for the time-invariant weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightUpdate {
    /// `π_k ∝ N_k / Σ_t a_{t,k} / S_t`, with `S_t = Σ_k' π_k' a_{t,k'}` at the
    /// previous weights. Never decreases the likelihood.
    #[default]
    Majorize,
    /// `π_k = N_k / T`.
    PosteriorMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacgmmConfig {
    pub iterations: usize,
    pub weight_update: WeightUpdate,
    /// Frequencies per contraction block.
    pub block_size: usize,
}

impl Default for CacgmmConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            weight_update: WeightUpdate::Majorize,
            block_size: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CacgmmState {
    /// `F × K`, rows sum to one.
    pub weights: Array2<f64>,
    /// Row-major `F × K`.
    shapes: Vec<HermitianMatrix>,
    pub classes: Vec<String>,
}

impl CacgmmState {
    /// Uniform weights and identity shapes.
    pub fn initial(bins: usize, channels: usize, classes: Vec<String>) -> Self {
        let k = classes.len();
        Self {
            weights: Array2::from_elem((bins, k), 1.0 / k as f64),
            shapes: vec![HermitianMatrix::identity(channels); bins * k],
            classes,
        }
    }

    pub fn num_bins(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.ncols()
    }

    pub fn shape(&self, f: usize, k: usize) -> &HermitianMatrix {
        &self.shapes[f * self.num_classes() + k]
    }

    pub fn set_shape(&mut self, f: usize, k: usize, b: HermitianMatrix) {
        let kk = self.num_classes();
        self.shapes[f * kk + k] = b;
    }
}

/// Class posteriors `γ`, laid out `(F, T, K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorTensor {
    pub gamma: Array3<f64>,
}

impl PosteriorTensor {
    pub fn num_classes(&self) -> usize {
        self.gamma.shape()[2]
    }

    /// Mask of one class, `(F, T)`.
    pub fn class_mask(&self, k: usize) -> Array2<f64> {
        self.gamma.index_axis(Axis(2), k).to_owned()
    }
}

#[derive(Clone, Debug)]
pub struct EmFit {
    pub state: CacgmmState,
    pub posteriors: PosteriorTensor,
    /// Log-likelihood before each M-step plus the final value
    /// (`iterations + 1` entries).
    pub log_likelihood: Vec<f64>,
}

/// `ln(M−1)! − M ln 2π`.
fn log_norm_const(m: usize) -> f64 {
    let log_fact: f64 = (1..m).map(|i| (i as f64).ln()).sum();
    log_fact - m as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Cholesky, then Cholesky of the diagonally loaded matrix, then the
/// eigenvalue-floored factor.
fn factor_shape(b: &HermitianMatrix) -> Result<PdFactor> {
    if let Some(c) = Cholesky::factor(b) {
        return Ok(PdFactor::Cholesky(c));
    }
    let loaded = regularize(b, DEFAULT_REGULARIZATION);
    if let Some(c) = Cholesky::factor(&loaded) {
        return Ok(PdFactor::Cholesky(c));
    }
    PdFactor::new(&loaded)
}

/// Log density of a unit vector `y` under the CACG with shape `b`.
pub fn cacg_log_pdf(y: &[C64], b: &HermitianMatrix) -> Result<f64> {
    let m = b.dim();
    if y.len() != m {
        return Err(Error::Shape(format!("vector of length {} for {m}×{m} shape", y.len())));
    }
    let factor = factor_shape(b)?;
    let mut scratch = vec![C64::new(0.0, 0.0); m];
    let q = factor.quad_form(y, &mut scratch).max(QUAD_FLOOR);
    Ok(log_norm_const(m) - factor.log_det() - m as f64 * q.ln())
}

/// Writes the frame weights into `out` and returns `Σ_k π_k a_k`.
///
/// With no active class all weight goes to the noise class, or is spread
/// uniformly when there is none; the return value is then 0.
fn frame_weights(pi: &[f64], active: &[bool], noise: Option<usize>, out: &mut [f64]) -> f64 {
    let total: f64 = pi.iter().zip(active).filter(|(_, &a)| a).map(|(p, _)| p).sum();
    if total > 0.0 {
        for ((o, p), &a) in out.iter_mut().zip(pi).zip(active) {
            *o = if a { p / total } else { 0.0 };
        }
        return total;
    }
    match noise {
        Some(n) => {
            out.iter_mut().for_each(|o| *o = 0.0);
            out[n] = 1.0;
        }
        None => {
            let u = 1.0 / out.len() as f64;
            out.iter_mut().for_each(|o| *o = u);
        }
    }
    0.0
}

/// Time-varying weights of one frame from the time-invariant weights and the
/// frame's activity row.
pub fn time_varying_weights(pi: &[f64], active: &[bool], noise: Option<usize>) -> Vec<f64> {
    let mut out = vec![0.0; pi.len()];
    frame_weights(pi, active, noise, &mut out);
    out
}

/// Upper-triangle `(m, n)` pairs, row-major; index `x` of the packed outer
/// product `y_m conj(y_n)`.
fn upper_pairs(m: usize) -> Vec<(usize, usize)> {
    (0..m).flat_map(|i| (i..m).map(move |j| (i, j))).collect()
}

/// Packs the outer products of one bin (`y` is `T × M`) into `out` (`X × T`).
fn pack_bin(y: &[C64], channels: usize, pairs: &[(usize, usize)], out: &mut [C64]) {
    let frames = y.len() / channels;
    for (x, &(m, n)) in pairs.iter().enumerate() {
        let row = &mut out[x * frames..(x + 1) * frames];
        for (t, r) in row.iter_mut().enumerate() {
            let yt = &y[t * channels..(t + 1) * channels];
            *r = if m == n {
                C64::new(yt[m].norm_sqr(), 0.0)
            } else {
                yt[m] * yt[n].conj()
            };
        }
    }
}

/// Parameters of one bin in the form the E-step consumes.
struct BinParams {
    pi: Vec<f64>,
    /// `ln π_k − ln|B_k|`.
    lc: Vec<f64>,
    /// Packed coefficients with `yᴴB⁻¹y = Σ_x Re(c_x conj(P_x))`.
    coeffs: Vec<Vec<C64>>,
}

impl BinParams {
    fn new(pi: &[f64], shapes: &[HermitianMatrix], pairs: &[(usize, usize)], f: usize) -> Result<Self> {
        let mut lc = Vec::with_capacity(shapes.len());
        let mut coeffs = Vec::with_capacity(shapes.len());
        for (p, b) in pi.iter().zip(shapes) {
            let factor = factor_shape(b).map_err(|e| e.at_frequency(f))?;
            let inv = factor.solve(&CMatrix::identity(b.dim()))?;
            lc.push(p.ln() - factor.log_det());
            coeffs.push(
                pairs
                    .iter()
                    .map(|&(m, n)| {
                        if m == n {
                            C64::new(inv[(m, m)].re, 0.0)
                        } else {
                            // (m, n) and (n, m) terms combined
                            inv[(m, n)] + inv[(n, m)].conj()
                        }
                    })
                    .collect(),
            );
        }
        Ok(Self { pi: pi.to_vec(), lc, coeffs })
    }
}

/// Per-bin outputs of an E-step; `gamma` is `T × K`, `w` (`γ/q`) is `K × T`.
struct EStepOut<'a> {
    gamma: Option<&'a mut [f64]>,
    w: Option<&'a mut [C64]>,
    mass: &'a mut [f64],
    exposure: &'a mut [f64],
}

/// E-step for one bin given its packed outer products `p` (`X × T`).
/// Returns the bin's log-likelihood.
fn e_step_bin(
    p: &[C64],
    channels: usize,
    activity: &[bool],
    noise: Option<usize>,
    params: &BinParams,
    quad: &mut [f64],
    mut out: EStepOut<'_>,
) -> f64 {
    let k = params.pi.len();
    let frames = activity.len() / k;
    let mf = channels as f64;
    let c = log_norm_const(channels);

    for (j, coeffs) in params.coeffs.iter().enumerate() {
        let q = &mut quad[j * frames..(j + 1) * frames];
        q.iter_mut().for_each(|v| *v = 0.0);
        for (x, a) in coeffs.iter().enumerate() {
            let row = &p[x * frames..(x + 1) * frames];
            for (qv, pv) in q.iter_mut().zip(row) {
                *qv += a.re * pv.re + a.im * pv.im;
            }
        }
        q.iter_mut().for_each(|v| *v = v.max(QUAD_FLOOR));
    }

    let lc_max = params.lc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = params.lc.iter().map(|l| (l - lc_max).exp()).collect();
    let mut u = vec![0.0; k];
    let mut g = vec![0.0; k];
    let mut weights = vec![0.0; k];
    let mut ll = 0.0;
    for t in 0..frames {
        let act = &activity[t * k..(t + 1) * k];
        let total: f64 = (0..k).filter(|&j| act[j]).map(|j| params.pi[j]).sum();
        let mut fast = false;
        if total > 0.0 {
            let q_min = (0..k)
                .filter(|&j| act[j])
                .map(|j| quad[j * frames + t])
                .fold(f64::INFINITY, f64::min);
            let mut sum = 0.0;
            for j in 0..k {
                u[j] = if act[j] { e[j] * (q_min / quad[j * frames + t]).powi(channels as i32) } else { 0.0 };
                sum += u[j];
            }
            if sum > 1e-280 && sum.is_finite() {
                ll += c + lc_max - mf * q_min.ln() + (sum / total).ln();
                for j in 0..k {
                    g[j] = u[j] / sum;
                }
                fast = true;
            }
            let inv = 1.0 / total;
            for j in 0..k {
                if act[j] {
                    out.exposure[j] += inv;
                }
            }
        }
        if !fast {
            // fallback weights or extreme dynamic range: plain log-sum-exp
            frame_weights(&params.pi, act, noise, &mut weights);
            let mut max = f64::NEG_INFINITY;
            for j in 0..k {
                u[j] = if weights[j] > 0.0 {
                    weights[j].ln() - params.pi[j].ln() + params.lc[j] + c - mf * quad[j * frames + t].ln()
                } else {
                    f64::NEG_INFINITY
                };
                max = max.max(u[j]);
            }
            let sum: f64 = u.iter().map(|v| (v - max).exp()).sum();
            ll += max + sum.ln();
            for j in 0..k {
                g[j] = if weights[j] > 0.0 { (u[j] - max).exp() / sum } else { 0.0 };
            }
        }
        for j in 0..k {
            out.mass[j] += g[j];
        }
        if let Some(w) = out.w.as_deref_mut() {
            for j in 0..k {
                w[j * frames + t] = C64::new(g[j] / quad[j * frames + t], 0.0);
            }
        }
        if let Some(gamma) = out.gamma.as_deref_mut() {
            gamma[t * k..(t + 1) * k].copy_from_slice(&g);
        }
    }
    ll
}

fn check_inputs(y: &SpectrogramTensor, activity: &ActivityMatrix) -> Result<()> {
    if activity.frames() != y.num_frames() {
        return Err(Error::Shape(format!(
            "activity has {} frames, spectrogram has {}",
            activity.frames(),
            y.num_frames()
        )));
    }
    if activity.num_classes() == 0 {
        return Err(Error::Shape("no classes to fit".into()));
    }
    Ok(())
}

fn activity_rows(activity: &ActivityMatrix) -> Vec<bool> {
    activity.grid().iter().copied().collect()
}

/// Mixture log-likelihood of `y` under `state`, summed over all bins and frames.
pub fn log_likelihood(
    y: &SpectrogramTensor,
    state: &CacgmmState,
    activity: &ActivityMatrix,
) -> Result<f64> {
    check_inputs(y, activity)?;
    let (bins, frames, channels) = y.data.dim();
    let k = activity.num_classes();
    if state.num_bins() != bins || state.num_classes() != k {
        return Err(Error::Shape("state does not match spectrogram/activity".into()));
    }
    let act = activity_rows(activity);
    let pairs = upper_pairs(channels);
    let per_bin = (0..bins)
        .into_par_iter()
        .map(|f| {
            let pi = state.weights.row(f).to_vec();
            let params = BinParams::new(&pi, &state.shapes[f * k..(f + 1) * k], &pairs, f)?;
            let yf = y.data.index_axis(Axis(0), f);
            let yf = yf.as_standard_layout();
            let mut packed = vec![C64::new(0.0, 0.0); pairs.len() * frames];
            pack_bin(yf.as_slice().expect("contiguous"), channels, &pairs, &mut packed);
            let mut quad = vec![0.0; k * frames];
            let (mut mass, mut exposure) = (vec![0.0; k], vec![0.0; k]);
            let out = EStepOut { gamma: None, w: None, mass: &mut mass, exposure: &mut exposure };
            Ok(e_step_bin(&packed, channels, &act, activity.noise_index(), &params, &mut quad, out))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_bin.iter().sum())
}

struct BlockFit {
    weights: Vec<f64>,
    shapes: Vec<HermitianMatrix>,
    gamma: Vec<f64>,
    ll: Vec<f64>,
}

/// Fits the guided mixture to unit-normalized observations.
pub fn em_fit(y: &SpectrogramTensor, activity: &ActivityMatrix, cfg: &CacgmmConfig) -> Result<EmFit> {
    check_inputs(y, activity)?;
    if cfg.block_size == 0 {
        return Err(Error::Config("block_size must be ≥ 1".into()));
    }
    let (bins, frames, channels) = y.data.dim();
    let k = activity.num_classes();
    let act = activity_rows(activity);
    let starts: Vec<usize> = (0..bins).step_by(cfg.block_size).collect();
    let blocks = starts
        .par_iter()
        .map(|&f0| {
            let f1 = (f0 + cfg.block_size).min(bins);
            fit_block(y, f0, f1, &act, activity.noise_index(), k, cfg)
        })
        .collect::<Result<Vec<BlockFit>>>()?;

    let mut state = CacgmmState::initial(bins, channels, activity.classes().to_vec());
    let mut gamma = Vec::with_capacity(bins * frames * k);
    let mut ll = vec![0.0; cfg.iterations + 1];
    let mut shapes = Vec::with_capacity(bins * k);
    let mut weights = Vec::with_capacity(bins * k);
    for b in blocks {
        weights.extend(b.weights);
        shapes.extend(b.shapes);
        gamma.extend(b.gamma);
        for (acc, v) in ll.iter_mut().zip(&b.ll) {
            *acc += v;
        }
    }
    state.weights = Array2::from_shape_vec((bins, k), weights).expect("weights shape");
    state.shapes = shapes;
    let gamma = Array3::from_shape_vec((bins, frames, k), gamma).expect("gamma shape");
    Ok(EmFit {
        state,
        posteriors: PosteriorTensor { gamma },
        log_likelihood: ll,
    })
}

fn fit_block(
    y: &SpectrogramTensor,
    f0: usize,
    f1: usize,
    act: &[bool],
    noise: Option<usize>,
    k: usize,
    cfg: &CacgmmConfig,
) -> Result<BlockFit> {
    let (_, frames, channels) = y.data.dim();
    let fb = f1 - f0;
    let pairs = upper_pairs(channels);
    let nx = pairs.len();

    let mut packed = vec![C64::new(0.0, 0.0); fb * nx * frames];
    for fi in 0..fb {
        let yf = y.data.index_axis(Axis(0), f0 + fi);
        let yf = yf.as_standard_layout();
        pack_bin(
            yf.as_slice().expect("contiguous"),
            channels,
            &pairs,
            &mut packed[fi * nx * frames..(fi + 1) * nx * frames],
        );
    }
    let packed = Tensor::new(vec![fb, nx, frames], packed)?;

    let mut weights = vec![1.0 / k as f64; fb * k];
    let mut shapes = vec![HermitianMatrix::identity(channels); fb * k];
    let mut gamma = Vec::new();
    let mut w = vec![C64::new(0.0, 0.0); fb * k * frames];
    let mut quad = vec![0.0; k * frames];
    let mut mass = vec![0.0; fb * k];
    let mut exposure = vec![0.0; fb * k];
    let mut ll = Vec::with_capacity(cfg.iterations + 1);

    for iter in 0..=cfg.iterations {
        let last = iter == cfg.iterations;
        if last {
            gamma = vec![0.0; fb * frames * k];
        }
        mass.iter_mut().for_each(|v| *v = 0.0);
        exposure.iter_mut().for_each(|v| *v = 0.0);
        let mut total = 0.0;
        for fi in 0..fb {
            let params = BinParams::new(
                &weights[fi * k..(fi + 1) * k],
                &shapes[fi * k..(fi + 1) * k],
                &pairs,
                f0 + fi,
            )?;
            let out = EStepOut {
                gamma: if last { Some(&mut gamma[fi * frames * k..(fi + 1) * frames * k]) } else { None },
                w: if last { None } else { Some(&mut w[fi * k * frames..(fi + 1) * k * frames]) },
                mass: &mut mass[fi * k..(fi + 1) * k],
                exposure: &mut exposure[fi * k..(fi + 1) * k],
            };
            total += e_step_bin(
                &packed.data()[fi * nx * frames..(fi + 1) * nx * frames],
                channels,
                act,
                noise,
                &params,
                &mut quad,
                out,
            );
        }
        ll.push(total);
        if last {
            break;
        }

        // weighted scatter Σ_t (γ/q) y yᴴ for every (f, k), packed
        let wt = Tensor::new(vec![fb, k, frames], std::mem::take(&mut w))?;
        let scatter = contract(SCATTER_SPEC, &[&wt, &packed])?;
        w = wt.into_data();
        let sd = scatter.data();

        for fi in 0..fb {
            for j in 0..k {
                if mass[fi * k + j] <= WEIGHT_FLOOR {
                    // no evidence for this class here: keep its shape
                    continue;
                }
                let s = &sd[(fi * k + j) * nx..(fi * k + j + 1) * nx];
                let mut raw = CMatrix::zeros(channels, channels);
                for (x, &(m, n)) in pairs.iter().enumerate() {
                    raw[(m, n)] = s[x];
                    raw[(n, m)] = s[x].conj();
                }
                let b = hermitize(&raw)?;
                let tr = b.trace();
                if !(tr > 0.0) || !tr.is_finite() {
                    continue;
                }
                shapes[fi * k + j] = regularize(&b.scaled(channels as f64 / tr), DEFAULT_REGULARIZATION);
            }
            let pi = &mut weights[fi * k..(fi + 1) * k];
            for j in 0..k {
                let (n_k, e_k) = (mass[fi * k + j], exposure[fi * k + j]);
                let v = match cfg.weight_update {
                    WeightUpdate::Majorize if e_k > 0.0 => n_k / e_k,
                    WeightUpdate::Majorize => 0.0,
                    WeightUpdate::PosteriorMean => n_k / frames as f64,
                };
                pi[j] = v.max(WEIGHT_FLOOR);
            }
            let sum: f64 = pi.iter().sum();
            pi.iter_mut().for_each(|p| *p /= sum);
        }
    }
    Ok(BlockFit { weights, shapes, gamma, ll })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stft::StftConfig;
    use crate::wpe::unit_normalize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn cn(rng: &mut impl Rng) -> C64 {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        c(re, im)
    }

    fn tensor(data: Array3<C64>) -> SpectrogramTensor {
        let frames = data.shape()[1];
        let config = StftConfig::default();
        SpectrogramTensor { data, config, origin_samples: 0, num_samples: (frames - 1) * config.shift }
    }

    fn classes(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn full_activity(frames: usize, k: usize) -> ActivityMatrix {
        ActivityMatrix::from_grid(classes(k), Array2::from_elem((frames, k), true), 0, None).unwrap()
    }

    /// Rank-one-plus-identity shape with a random steering direction.
    fn random_shape(rng: &mut impl Rng, m: usize, strength: f64) -> HermitianMatrix {
        let d: Vec<C64> = (0..m).map(|_| cn(rng)).collect();
        HermitianMatrix::outer(&d).scaled(strength).add(&HermitianMatrix::identity(m)).unwrap()
    }

    /// Draws `z ~ CN(0, B)` via the Cholesky factor and returns `z/‖z‖`.
    fn cacg_sample(rng: &mut impl Rng, b: &HermitianMatrix) -> Vec<C64> {
        let m = b.dim();
        let a = b.as_matrix();
        // lower Cholesky by hand
        let mut l = vec![c(0.0, 0.0); m * m];
        for j in 0..m {
            let mut d = a[(j, j)].re;
            for p in 0..j {
                d -= l[j * m + p].norm_sqr();
            }
            let djj = d.sqrt();
            l[j * m + j] = c(djj, 0.0);
            for i in j + 1..m {
                let mut s = a[(i, j)];
                for p in 0..j {
                    s -= l[i * m + p] * l[j * m + p].conj();
                }
                l[i * m + j] = s / djj;
            }
        }
        let w: Vec<C64> = (0..m).map(|_| cn(rng)).collect();
        let z: Vec<C64> = (0..m).map(|i| (0..=i).map(|p| l[i * m + p] * w[p]).sum()).collect();
        let n = z.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        z.iter().map(|v| v / n).collect()
    }

    #[test]
    fn log_pdf_trivial_cases() {
        let v = cacg_log_pdf(&[c(1.0, 0.0)], &HermitianMatrix::identity(1)).unwrap();
        assert!((v - (1.0 / (2.0 * PI)).ln()).abs() < 1e-12);
        assert!((v + 1.8379).abs() < 1e-4);
        let s = 0.5f64.sqrt();
        for y in [[c(1.0, 0.0), c(0.0, 0.0)], [c(s, 0.0), c(0.0, s)], [c(0.0, -s), c(-s, 0.0)]] {
            let v = cacg_log_pdf(&y, &HermitianMatrix::identity(2)).unwrap();
            assert!((v + 2.0 * (2.0 * PI).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn log_pdf_diagonal_shape_matches_scalar_evaluation() {
        let b = HermitianMatrix::diag(&[2.0, 0.5]);
        let y = [c(1.0, 0.0), c(0.0, 0.0)];
        // det = 1, yᴴB⁻¹y = 1/2
        let det = 2.0 * 0.5;
        let q: f64 = 1.0 / 2.0;
        let direct = ((1.0 / (2.0 * PI)).powi(2) * 1.0 / det * q.powi(-2)).ln();
        let v = cacg_log_pdf(&y, &b).unwrap();
        assert!((v - direct).abs() < 1e-12, "{v} vs {direct}");
    }

    #[test]
    fn log_pdf_is_scale_invariant_in_b_up_to_det_term() {
        // scaling B by c shifts ln|B| by M ln c and the quadratic term by −M ln c
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_shape(&mut rng, 3, 2.0);
        let y = cacg_sample(&mut rng, &b);
        let a = cacg_log_pdf(&y, &b).unwrap();
        let b2 = cacg_log_pdf(&y, &b.scaled(7.0)).unwrap();
        assert!((a - b2).abs() < 1e-10);
    }

    #[test]
    fn log_pdf_rejects_length_mismatch() {
        assert!(cacg_log_pdf(&[c(1.0, 0.0)], &HermitianMatrix::identity(2)).is_err());
    }

    #[test]
    fn weights_examples() {
        assert_eq!(time_varying_weights(&[0.5, 0.5], &[true, true], None), vec![0.5, 0.5]);
        assert_eq!(time_varying_weights(&[0.5, 0.5], &[true, false], None), vec![1.0, 0.0]);
        assert_eq!(time_varying_weights(&[0.9, 0.1], &[false, true], None), vec![0.0, 1.0]);
        assert_eq!(time_varying_weights(&[0.3, 0.7], &[false, false], Some(1)), vec![0.0, 1.0]);
        assert_eq!(time_varying_weights(&[0.3, 0.7], &[false, false], None), vec![0.5, 0.5]);
    }

    #[test]
    fn symmetric_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = Array3::from_shape_fn((3, 40, 2), |_| cn(&mut rng));
        let y = unit_normalize(&tensor(data));
        let fit = em_fit(&y, &full_activity(40, 2), &CacgmmConfig { iterations: 7, ..Default::default() }).unwrap();
        assert!(fit.posteriors.gamma.iter().all(|g| (g - 0.5).abs() < 1e-12));
        assert_eq!(fit.log_likelihood.len(), 8);
    }

    fn overlap_problem(seed: u64) -> (SpectrogramTensor, ActivityMatrix, Vec<Option<usize>>) {
        // s0 active on [0, 200), s1 on [100, 300); the overlap mixes both per frame
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, t, m) = (4, 300, 4);
        let shapes: Vec<[HermitianMatrix; 2]> = (0..f)
            .map(|_| [random_shape(&mut rng, m, 20.0), random_shape(&mut rng, m, 20.0)])
            .collect();
        let source: Vec<usize> = (0..t)
            .map(|ti| match ti {
                0..=99 => 0,
                200.. => 1,
                _ => rng.gen_range(0..2),
            })
            .collect();
        let mut data = Array3::zeros((f, t, m));
        for fi in 0..f {
            for ti in 0..t {
                let v = cacg_sample(&mut rng, &shapes[fi][source[ti]]);
                for mi in 0..m {
                    data[[fi, ti, mi]] = v[mi];
                }
            }
        }
        let grid = Array2::from_shape_fn((t, 2), |(ti, k)| if k == 0 { ti < 200 } else { ti >= 100 });
        let act = ActivityMatrix::from_grid(classes(2), grid, 0, None).unwrap();
        let truth = source.iter().enumerate().map(|(ti, &s)| (100..200).contains(&ti).then_some(s)).collect();
        (tensor(data), act, truth)
    }

    #[test]
    fn separates_two_sources_in_overlap() {
        let (y, act, truth) = overlap_problem(5);
        let fit = em_fit(&y, &act, &CacgmmConfig { iterations: 10, ..Default::default() }).unwrap();
        for s in 0..2 {
            let mut acc = 0.0;
            let mut n = 0;
            for fi in 0..y.num_bins() {
                for (ti, src) in truth.iter().enumerate() {
                    if *src == Some(s) {
                        acc += fit.posteriors.gamma[[fi, ti, s]];
                        n += 1;
                    }
                }
            }
            let mean = acc / n as f64;
            assert!(mean >= 0.9, "class {s}: mean posterior {mean}");
        }
    }

    #[test]
    fn posteriors_respect_support_and_normalize() {
        let (y, act, _) = overlap_problem(9);
        let fit = em_fit(&y, &act, &CacgmmConfig { iterations: 4, ..Default::default() }).unwrap();
        for ((f, t, k), g) in fit.posteriors.gamma.indexed_iter() {
            if !act.is_active(t, k) {
                assert_eq!(*g, 0.0);
            }
            if k == 0 {
                let sum: f64 = (0..2).map(|j| fit.posteriors.gamma[[f, t, j]]).sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
        for f in 0..y.num_bins() {
            let s: f64 = fit.state.weights.row(f).sum();
            assert!((s - 1.0).abs() < 1e-12);
            for k in 0..2 {
                let b = fit.state.shape(f, k);
                assert!((b.trace() - 4.0).abs() < 1e-6);
            }
        }
    }

    fn random_problem(rng: &mut impl Rng, f: usize, t: usize, m: usize, k: usize) -> (SpectrogramTensor, ActivityMatrix) {
        let data = Array3::from_shape_fn((f, t, m), |_| cn(rng));
        let mut grid = Array2::from_shape_fn((t, k), |_| rng.gen_bool(0.6));
        grid.column_mut(k - 1).fill(true);
        let act = ActivityMatrix::from_grid(classes(k), grid, 0, Some(k - 1)).unwrap();
        (unit_normalize(&tensor(data)), act)
    }

    #[test]
    fn likelihood_is_monotone_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..3 {
            let (y, act) = random_problem(&mut rng, 5, 120, 3, 3);
            let fit = em_fit(&y, &act, &CacgmmConfig::default()).unwrap();
            for w in fit.log_likelihood.windows(2) {
                assert!(w[1] >= w[0] - 1e-5 * w[0].abs(), "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn trace_matches_standalone_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (y, act) = random_problem(&mut rng, 3, 60, 2, 3);
        let fit = em_fit(&y, &act, &CacgmmConfig { iterations: 3, ..Default::default() }).unwrap();
        let ll = log_likelihood(&y, &fit.state, &act).unwrap();
        let last = *fit.log_likelihood.last().unwrap();
        assert!((ll - last).abs() <= 1e-9 * ll.abs());
    }

    #[test]
    fn isotropic_single_class_likelihood_is_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (f, t, m) = (3, 25, 4);
        let y = unit_normalize(&tensor(Array3::from_shape_fn((f, t, m), |_| cn(&mut rng))));
        let act = full_activity(t, 1);
        let state = CacgmmState::initial(f, m, classes(1));
        let ll = log_likelihood(&y, &state, &act).unwrap();
        let expected = (t * f) as f64 * (-(m as f64) * (2.0 * PI).ln() + 6f64.ln());
        assert!((ll - expected).abs() < 1e-9 * expected.abs());
    }

    #[test]
    fn permuting_classes_permutes_posteriors() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (y, act) = random_problem(&mut rng, 4, 80, 3, 3);
        let cfg = CacgmmConfig { iterations: 5, ..Default::default() };
        let a = em_fit(&y, &act, &cfg).unwrap();
        let perm = [2, 0, 1];
        let b = em_fit(&y, &act.permuted(&perm), &cfg).unwrap();
        for ((f, t, k), g) in b.posteriors.gamma.indexed_iter() {
            assert!((g - a.posteriors.gamma[[f, t, perm[k]]]).abs() < 1e-6);
        }
        let lp = log_likelihood(&y, &a.state, &act).unwrap();
        assert!((lp - a.log_likelihood.last().unwrap()).abs() < 1e-9 * lp.abs());
    }

    #[test]
    fn invariant_to_global_phase() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (y, act) = random_problem(&mut rng, 3, 70, 3, 2);
        let cfg = CacgmmConfig { iterations: 5, ..Default::default() };
        let a = em_fit(&y, &act, &cfg).unwrap();
        let rot = C64::from_polar(1.0, 1.234);
        let b = em_fit(&y.with_data(y.data.mapv(|v| v * rot)), &act, &cfg).unwrap();
        let diff = a
            .posteriors
            .gamma
            .iter()
            .zip(b.posteriors.gamma.iter())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-5);
    }

    #[test]
    fn block_size_does_not_change_result() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (y, act) = random_problem(&mut rng, 7, 50, 2, 3);
        let a = em_fit(&y, &act, &CacgmmConfig { iterations: 4, block_size: 3, ..Default::default() }).unwrap();
        let b = em_fit(&y, &act, &CacgmmConfig { iterations: 4, block_size: 16, ..Default::default() }).unwrap();
        assert_eq!(a.posteriors, b.posteriors);
    }

    /// Textbook EM: per-frame log-sum-exp of `cacg_log_pdf` and explicit
    /// scatter sums.
    fn reference_em(y: &SpectrogramTensor, act: &ActivityMatrix, iterations: usize) -> Array3<f64> {
        let (f, t, m) = y.data.dim();
        let k = act.num_classes();
        let mut gamma = Array3::zeros((f, t, k));
        for fi in 0..f {
            let mut pi = vec![1.0 / k as f64; k];
            let mut shapes = vec![HermitianMatrix::identity(m); k];
            for iter in 0..=iterations {
                let mut quads = vec![vec![0.0; t]; k];
                let mut mass = vec![0.0; k];
                let mut exposure = vec![0.0; k];
                for ti in 0..t {
                    let yv: Vec<C64> = (0..m).map(|c| y.data[[fi, ti, c]]).collect();
                    let active: Vec<bool> = (0..k).map(|j| act.is_active(ti, j)).collect();
                    let w = time_varying_weights(&pi, &active, act.noise_index());
                    let logs: Vec<f64> = (0..k)
                        .map(|j| {
                            let inv = PdFactor::new(&shapes[j]).unwrap();
                            quads[j][ti] = inv.quad_form(&yv, &mut vec![C64::new(0.0, 0.0); m]).max(QUAD_FLOOR);
                            if w[j] > 0.0 { w[j].ln() + cacg_log_pdf(&yv, &shapes[j]).unwrap() } else { f64::NEG_INFINITY }
                        })
                        .collect();
                    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
                    let s_t: f64 = (0..k).filter(|&j| active[j]).map(|j| pi[j]).sum();
                    for j in 0..k {
                        let g = (logs[j] - max).exp() / sum;
                        gamma[[fi, ti, j]] = g;
                        mass[j] += g;
                        if active[j] && s_t > 0.0 {
                            exposure[j] += 1.0 / s_t;
                        }
                    }
                }
                if iter == iterations {
                    break;
                }
                for j in 0..k {
                    let mut raw = CMatrix::zeros(m, m);
                    for ti in 0..t {
                        let wgt = gamma[[fi, ti, j]] / quads[j][ti];
                        for a in 0..m {
                            for b in 0..m {
                                raw[(a, b)] += y.data[[fi, ti, a]] * y.data[[fi, ti, b]].conj() * wgt;
                            }
                        }
                    }
                    let b = hermitize(&raw).unwrap();
                    shapes[j] = regularize(&b.scaled(m as f64 / b.trace()), DEFAULT_REGULARIZATION);
                    pi[j] = (mass[j] / exposure[j]).max(WEIGHT_FLOOR);
                }
                let total: f64 = pi.iter().sum();
                pi.iter_mut().for_each(|p| *p /= total);
            }
        }
        gamma
    }

    #[test]
    fn matches_reference_em_at_five_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (f, t, m) = (3, 90, 5);
        let shapes: Vec<HermitianMatrix> = (0..2).map(|_| random_shape(&mut rng, m, 8.0)).collect();
        let mut data = Array3::zeros((f, t, m));
        for fi in 0..f {
            for ti in 0..t {
                let src = rng.gen_range(0..2);
                let v = cacg_sample(&mut rng, &shapes[src]);
                for mi in 0..m {
                    data[[fi, ti, mi]] = v[mi];
                }
            }
        }
        let y = unit_normalize(&tensor(data));
        let mut grid = Array2::from_shape_fn((t, 3), |(ti, k)| match k {
            0 => ti < 60,
            1 => ti >= 30,
            _ => true,
        });
        grid[[5, 2]] = true;
        let act = ActivityMatrix::from_grid(classes(3), grid, 0, Some(2)).unwrap();
        let fast = em_fit(&y, &act, &CacgmmConfig { iterations: 6, ..Default::default() }).unwrap();
        let slow = reference_em(&y, &act, 6);
        let diff = fast
            .posteriors
            .gamma
            .iter()
            .zip(slow.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-8, "max posterior difference {diff}");
    }

    #[test]
    fn frame_count_mismatch_is_a_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (y, _) = random_problem(&mut rng, 2, 30, 2, 2);
        assert!(matches!(em_fit(&y, &full_activity(29, 2), &CacgmmConfig::default()), Err(Error::Shape(_))));
    }
}
