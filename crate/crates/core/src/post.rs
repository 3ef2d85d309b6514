//! Scale restoration, separation metrics and permutation-invariant wrapping.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::{CTensor, C64};
use crate::stft::{fit_length, Stft};

/// Metrics are capped at ±300 dB so perfect estimates stay finite.
pub const DB_CAP: f64 = 300.0;
const CAP_RATIO: f64 = 1e-30;
pub const SCALE_FLOOR: f64 = 1e-30;
pub const COHERENCE_EPS: f64 = 1e-30;

/// Per-source, per-bin complex scale `z: [M × F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleVector(pub CTensor);

/// `z_kf = Σ_n y*_kfn x_fn / max(Σ_n |y_kfn|², 1e-30)`, then `ŷ = z y`.
pub fn minimal_distortion_scale(y: &CTensor, x_ref: &CTensor) -> Result<(CTensor, ScaleVector)> {
    let (m_src, f_bins, n) = match y.shape() {
        [m, f, n] => (*m, *f, *n),
        s => return Err(Error::ShapeMismatch(format!("expected [M × F × N], got {s:?}"))),
    };
    if x_ref.shape() != [f_bins, n] {
        return Err(Error::ShapeMismatch(format!("reference {:?} vs [{f_bins} × {n}]", x_ref.shape())));
    }
    let mut out = y.clone();
    let mut z = CTensor::zeros(&[m_src, f_bins]);
    for k in 0..m_src {
        for f in 0..f_bins {
            let base = (k * f_bins + f) * n;
            let yk = &y.data()[base..base + n];
            let xr = &x_ref.data()[f * n..(f + 1) * n];
            let num: C64 = yk.iter().zip(xr).map(|(a, b)| a.conj() * b).sum();
            let den: f64 = yk.iter().map(|a| a.norm_sqr()).sum::<f64>().max(SCALE_FLOOR);
            let zk = num / den;
            z.data_mut()[k * f_bins + f] = zk;
            out.data_mut()[base..base + n].iter_mut().for_each(|v| *v *= zk);
        }
    }
    Ok((out, ScaleVector(z)))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if num <= 0.0 {
        return -DB_CAP;
    }
    (10.0 * (num / den.max(CAP_RATIO * num)).log10()).clamp(-DB_CAP, DB_CAP)
}

/// Scale-invariant SDR in dB.
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} samples", est.len(), reference.len())));
    }
    let rr = dot(reference, reference);
    if rr <= 0.0 {
        return Err(Error::ZeroReference);
    }
    let alpha = dot(est, reference) / rr;
    let target = alpha * alpha * rr;
    let resid: f64 = est.iter().zip(reference).map(|(e, r)| (alpha * r - e).powi(2)).sum();
    Ok(ratio_db(target, resid))
}

/// SI-SDR and its gradient with respect to `est`. The gradient vanishes
/// wherever the value is clamped.
pub(crate) fn si_sdr_with_grad(est: &[f64], reference: &[f64]) -> Result<(f64, Vec<f64>)> {
    let value = si_sdr(est, reference)?;
    let rr = dot(reference, reference);
    let alpha = dot(est, reference) / rr;
    let target = alpha * alpha * rr;
    let resid: f64 = est.iter().zip(reference).map(|(e, r)| (alpha * r - e).powi(2)).sum();
    let mut grad = vec![0.0; est.len()];
    if target > 0.0 && resid > CAP_RATIO * target && value.abs() < DB_CAP {
        let c = 10.0 / std::f64::consts::LN_10;
        for ((g, e), r) in grad.iter_mut().zip(est).zip(reference) {
            let err = alpha * r - e;
            *g = c * (2.0 * alpha * r / target + 2.0 * err / resid);
        }
    }
    Ok((value, grad))
}

/// Scale-invariant SIR in dB of `est` for reference `k`.
///
/// `est` is projected onto the span of all references by least squares; the
/// target term is the `k`th component, interference the remaining ones.
pub fn si_sir(est: &[f64], refs: &[&[f64]], k: usize) -> Result<f64> {
    let m = refs.len();
    if k >= m || refs.iter().any(|r| r.len() != est.len()) {
        return Err(Error::ShapeMismatch("si-sir references".into()));
    }
    let gram = DMatrix::from_fn(m, m, |i, j| dot(refs[i], refs[j]));
    let rhs = DVector::from_fn(m, |i, _| dot(refs[i], est));
    let diag_max = (0..m).map(|i| gram[(i, i)]).fold(0.0, f64::max);
    if diag_max <= 0.0 {
        return Err(Error::ZeroReference);
    }
    let beta = gram
        .clone()
        .cholesky()
        .filter(|ch| {
            let l = ch.l();
            (0..m).all(|i| l[(i, i)] * l[(i, i)] > 1e-12 * diag_max)
        })
        .ok_or(Error::SingularGram)?
        .solve(&rhs);
    let combo = |sel: &dyn Fn(usize) -> bool| -> f64 {
        let mut acc = vec![0.0; est.len()];
        for j in (0..m).filter(|j| sel(*j)) {
            for (a, r) in acc.iter_mut().zip(refs[j]) {
                *a += beta[j] * r;
            }
        }
        dot(&acc, &acc)
    };
    let target = combo(&|j| j == k);
    let interf = combo(&|j| j != k);
    Ok(ratio_db(target, interf))
}

/// Projection coefficients used by [`si_sir`].
pub fn projection_coefficients(est: &[f64], refs: &[&[f64]]) -> Result<Vec<f64>> {
    let m = refs.len();
    let gram = DMatrix::from_fn(m, m, |i, j| dot(refs[i], refs[j]));
    let rhs = DVector::from_fn(m, |i, _| dot(refs[i], est));
    let beta = gram.cholesky().ok_or(Error::SingularGram)?.solve(&rhs);
    Ok(beta.iter().copied().collect())
}

/// Frequency-averaged normalized cross-correlation magnitude, in `[0, 1]`.
pub fn coherence(est: &CTensor, reference: &CTensor) -> Result<f64> {
    let (f_bins, n) = match est.shape() {
        [f, n] => (*f, *n),
        s => return Err(Error::ShapeMismatch(format!("expected [F × N], got {s:?}"))),
    };
    if reference.shape() != est.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", est.shape(), reference.shape())));
    }
    Ok(coherence_raw(est.data(), reference.data(), f_bins, n))
}

pub(crate) fn coherence_raw(est: &[C64], reference: &[C64], f_bins: usize, n: usize) -> f64 {
    let mut total = 0.0;
    for f in 0..f_bins {
        let e = &est[f * n..(f + 1) * n];
        let s = &reference[f * n..(f + 1) * n];
        let cross: C64 = e.iter().zip(s).map(|(a, b)| a * b.conj()).sum();
        let pe = e.iter().map(|a| a.norm_sqr()).sum::<f64>().max(COHERENCE_EPS);
        let ps = s.iter().map(|a| a.norm_sqr()).sum::<f64>().max(COHERENCE_EPS);
        total += cross.norm() / (pe * ps).sqrt();
    }
    total / f_bins as f64
}

/// Coherence and its gradient with respect to `est` (paired-real adjoint).
pub(crate) fn coherence_with_grad(est: &[C64], reference: &[C64], f_bins: usize, n: usize) -> (f64, Vec<C64>) {
    let mut total = 0.0;
    let mut grad = vec![C64::new(0.0, 0.0); est.len()];
    let scale = 1.0 / f_bins as f64;
    for f in 0..f_bins {
        let e = &est[f * n..(f + 1) * n];
        let s = &reference[f * n..(f + 1) * n];
        let cross: C64 = e.iter().zip(s).map(|(a, b)| a * b.conj()).sum();
        let pe_raw = e.iter().map(|a| a.norm_sqr()).sum::<f64>();
        let pe = pe_raw.max(COHERENCE_EPS);
        let ps = s.iter().map(|a| a.norm_sqr()).sum::<f64>().max(COHERENCE_EPS);
        let mag = cross.norm();
        let denom = (pe * ps).sqrt();
        total += mag / denom;
        if mag == 0.0 {
            continue;
        }
        let phase = cross / mag;
        let pe_term = if pe_raw > COHERENCE_EPS { mag / pe } else { 0.0 };
        for ((g, a), b) in grad[f * n..(f + 1) * n].iter_mut().zip(e).zip(s) {
            *g = (b * phase - a * pe_term) * (scale / denom);
        }
    }
    (total * scale, grad)
}

/// Best assignment of estimates to references.
#[derive(Clone, Debug, PartialEq)]
pub struct PitResult {
    /// Mean of `per_pair`.
    pub value: f64,
    /// `permutation[m]` is the estimate assigned to reference `m`.
    pub permutation: Vec<usize>,
    /// Metric of each reference against its assigned estimate.
    pub per_pair: Vec<f64>,
}

pub const PIT_MAX_SOURCES: usize = 8;

/// Maximizes `(1/M) Σ_m scores[π(m)][m]` over all permutations, where
/// `scores[i][j]` rates estimate `i` against reference `j`.
pub fn pit_from_scores(scores: &[Vec<f64>]) -> Result<PitResult> {
    let m = scores.len();
    if m == 0 || m > PIT_MAX_SOURCES || scores.iter().any(|r| r.len() != m) {
        return Err(Error::ShapeMismatch(format!("PIT needs a square score matrix with 1..={PIT_MAX_SOURCES} rows")));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..m).permutations(m) {
        let total: f64 = perm.iter().enumerate().map(|(r, &e)| scores[e][r]).sum();
        if best.as_ref().map_or(true, |(b, _)| total > *b) {
            best = Some((total, perm));
        }
    }
    let (total, permutation) = best.expect("at least one permutation");
    let per_pair = permutation.iter().enumerate().map(|(r, &e)| scores[e][r]).collect();
    Ok(PitResult { value: total / m as f64, permutation, per_pair })
}

/// Base metrics available for PIT.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PitMetric {
    SiSdr,
    Coherence,
}

/// Time-domain PIT on SI-SDR.
pub fn pit_si_sdr(ests: &[Vec<f64>], refs: &[Vec<f64>]) -> Result<PitResult> {
    if ests.len() != refs.len() {
        return Err(Error::ShapeMismatch("estimate and reference counts differ".into()));
    }
    let scores = ests
        .iter()
        .map(|e| refs.iter().map(|r| si_sdr(e, r)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    pit_from_scores(&scores)
}

/// STFT-domain PIT on coherence.
pub fn pit_coherence(ests: &[CTensor], refs: &[CTensor]) -> Result<PitResult> {
    if ests.len() != refs.len() {
        return Err(Error::ShapeMismatch("estimate and reference counts differ".into()));
    }
    let scores = ests
        .iter()
        .map(|e| refs.iter().map(|r| coherence(e, r)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    pit_from_scores(&scores)
}

/// References and transform needed to score separated spectrograms.
#[derive(Clone, Debug)]
pub struct TraceReference {
    pub stft: Stft,
    /// Time-domain references, one per source.
    pub refs: Vec<Vec<f64>>,
    /// Mixture channel used for scale restoration.
    pub ref_channel: usize,
}

/// Scaled, resynthesized estimates trimmed or padded to `len` samples.
pub fn reconstruct(y: &CTensor, x: &CTensor, stft: &Stft, ref_channel: usize, len: usize) -> Result<Vec<Vec<f64>>> {
    let (m_src, f_bins, n) = match y.shape() {
        [m, f, n] => (*m, *f, *n),
        s => return Err(Error::ShapeMismatch(format!("expected [M × F × N], got {s:?}"))),
    };
    if ref_channel >= x.shape()[0] {
        return Err(Error::Config(format!("reference channel {ref_channel} out of range")));
    }
    let x_ref = CTensor::from_vec(&[f_bins, n], x.outer(ref_channel).to_vec())?;
    let (scaled, _) = minimal_distortion_scale(y, &x_ref)?;
    (0..m_src)
        .map(|k| {
            let spec = CTensor::from_vec(&[f_bins, n], scaled.outer(k).to_vec())?;
            Ok(fit_length(stft.synthesize(&spec)?, len))
        })
        .collect()
}

/// PIT-aligned SI-SDR of the current estimates against the references.
pub fn evaluate_estimates(y: &CTensor, x: &CTensor, reference: &TraceReference) -> Result<PitResult> {
    let len = reference.refs.first().map_or(0, Vec::len);
    let ests = reconstruct(y, x, &reference.stft, reference.ref_channel, len)?;
    pit_si_sdr(&ests, &reference.refs)
}
