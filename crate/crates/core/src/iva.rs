//! AuxIVA with iterative source steering (ISS) and pairwise (IP2) updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gevd2, logdet_abs, quad2, rank1_row_update, CMatrix, CTensor, HermitianPair2, Mat2, C64};
use crate::post::{self, TraceReference};
use crate::source_models::{self, model_weights, SourceModel, SourceWeights};

/// Bins where the steered source has less energy than this are skipped.
pub const DEGENERATE_ENERGY: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Iss,
    Ip2,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iss" => Ok(Self::Iss),
            "ip2" => Ok(Self::Ip2),
            other => Err(Error::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Iss => "iss",
            Algorithm::Ip2 => "ip2",
        })
    }
}

#[derive(Clone, Debug)]
pub struct AuxIvaConfig {
    pub algo: Algorithm,
    pub n_iters: usize,
    pub model: SourceModel,
}

impl AuxIvaConfig {
    pub fn new(algo: Algorithm, n_iters: usize, model: SourceModel) -> Self {
        Self { algo, n_iters, model }
    }

    /// Default iteration count for `m` sources: 20, 50, 80 for 2, 3, 4.
    pub fn default_iters(m: usize) -> usize {
        match m {
            0..=2 => 20,
            3 => 50,
            _ => 80,
        }
    }

    fn validate(&self, m: usize) -> Result<()> {
        if self.n_iters == 0 {
            return Err(Error::Config("at least one iteration is required".into()));
        }
        if self.algo == Algorithm::Ip2 && m != 2 {
            return Err(Error::Config(format!("IP2 needs exactly 2 sources, got {m}")));
        }
        Ok(())
    }
}

#[inline]
fn at(f_bins: usize, n: usize, m: usize, f: usize) -> usize {
    (m * f_bins + f) * n
}

/// ISS steering vector for source `k` at bin `f`, or `None` for a silent bin.
///
/// `y` and `r` are `[M × F × N]` buffers.
pub(crate) fn steering_vector(
    y: &[C64],
    r: &[f64],
    dims: (usize, usize, usize),
    k: usize,
    f: usize,
) -> Option<Vec<C64>> {
    let (m_src, f_bins, n) = dims;
    let yk = &y[at(f_bins, n, k, f)..at(f_bins, n, k, f) + n];
    if yk.iter().map(|z| z.norm_sqr()).sum::<f64>() < DEGENERATE_ENERGY {
        return None;
    }
    let mut v = Vec::with_capacity(m_src);
    for m in 0..m_src {
        let base = at(f_bins, n, m, f);
        let rm = &r[base..base + n];
        let den: f64 = rm.iter().zip(yk).map(|(w, z)| w * z.norm_sqr()).sum();
        if m == k {
            v.push(C64::new(1.0 - (den / n as f64).sqrt().recip(), 0.0));
        } else {
            let ym = &y[base..base + n];
            let num: C64 = rm.iter().zip(ym).zip(yk).map(|((w, a), b)| a * b.conj() * *w).sum();
            v.push(num / den);
        }
    }
    Some(v)
}

/// `Y_m ← Y_m − v_m Y_k` at bin `f` for every source `m`.
pub(crate) fn apply_steering(y: &mut [C64], dims: (usize, usize, usize), v: &[C64], k: usize, f: usize) {
    let (m_src, f_bins, n) = dims;
    let kb = at(f_bins, n, k, f);
    let yk: Vec<C64> = y[kb..kb + n].to_vec();
    for m in 0..m_src {
        let base = at(f_bins, n, m, f);
        for (dst, src) in y[base..base + n].iter_mut().zip(&yk) {
            *dst -= v[m] * src;
        }
    }
}

fn dims3(t: &CTensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [m, f, n] => Ok((*m, *f, *n)),
        s => Err(Error::ShapeMismatch(format!("expected [M × F × N], got {s:?}"))),
    }
}

/// Closed-form ISS steering vector for source `k` at bin `f`.
pub fn iss_vector(y: &CTensor, r: &SourceWeights, k: usize, f: usize) -> Result<Vec<C64>> {
    let dims = dims3(y)?;
    if r.tensor().shape() != y.shape() {
        return Err(Error::ShapeMismatch("weights and estimates differ in shape".into()));
    }
    if k >= dims.0 || f >= dims.1 {
        return Err(Error::ShapeMismatch(format!("source {k} / bin {f} out of range")));
    }
    steering_vector(y.data(), r.data(), dims, k, f).ok_or(Error::DegenerateBin { source_index: k, bin: f })
}

/// Mixture, current estimates and demixing matrices, kept consistent
/// (`Y_f = W_f X_f` for every bin).
#[derive(Clone, Debug)]
pub struct SeparationState {
    x: CTensor,
    y: CTensor,
    w: Vec<CMatrix>,
    iteration: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UpdateReport {
    /// Bins left untouched (silent source or indefinite covariance).
    pub skipped_bins: Vec<usize>,
}

impl SeparationState {
    /// Starts from `W_f = I`, so `Y = X`.
    pub fn new(x: CTensor) -> Result<Self> {
        let (m, f, _) = dims3(&x)?;
        if !x.is_finite() {
            return Err(Error::NonFinite("mixture".into()));
        }
        Ok(Self { y: x.clone(), x, w: vec![CMatrix::identity(m); f], iteration: 0 })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        dims3(&self.x).expect("validated at construction")
    }

    pub fn mixture(&self) -> &CTensor {
        &self.x
    }

    pub fn estimates(&self) -> &CTensor {
        &self.y
    }

    pub fn demixing(&self) -> &[CMatrix] {
        &self.w
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn into_parts(self) -> (CTensor, Vec<CMatrix>) {
        (self.y, self.w)
    }

    fn check_weights(&self, r: &SourceWeights) -> Result<()> {
        if r.tensor().shape() != self.x.shape() {
            return Err(Error::ShapeMismatch(format!(
                "weights {:?} vs estimates {:?}",
                r.tensor().shape(),
                self.x.shape()
            )));
        }
        Ok(())
    }

    /// One ISS step for source `k` at every bin.
    pub fn iss_update_source(&mut self, r: &SourceWeights, k: usize) -> Result<UpdateReport> {
        self.check_weights(r)?;
        let dims = self.dims();
        if k >= dims.0 {
            return Err(Error::ShapeMismatch(format!("source {k} out of range")));
        }
        let mut report = UpdateReport::default();
        for f in 0..dims.1 {
            match steering_vector(self.y.data(), r.data(), dims, k, f) {
                Some(v) => {
                    apply_steering(self.y.data_mut(), dims, &v, k, f);
                    self.w[f] = rank1_row_update(&self.w[f], &v, k)?;
                }
                None => report.skipped_bins.push(f),
            }
        }
        Ok(report)
    }

    /// Exact pairwise update for two sources via generalized eigenvectors of
    /// the weighted mixture covariances.
    pub fn ip2_update(&mut self, r: &SourceWeights) -> Result<UpdateReport> {
        self.check_weights(r)?;
        let (m_src, f_bins, n) = self.dims();
        if m_src != 2 {
            return Err(Error::Config(format!("IP2 needs exactly 2 sources, got {m_src}")));
        }
        let mut report = UpdateReport::default();
        let x = self.x.data();
        for f in 0..f_bins {
            let cov = |k: usize| -> Mat2 {
                let rk = &r.data()[at(f_bins, n, k, f)..at(f_bins, n, k, f) + n];
                let mut v = [[C64::new(0.0, 0.0); 2]; 2];
                for t in 0..n {
                    let xf = [x[at(f_bins, n, 0, f) + t], x[at(f_bins, n, 1, f) + t]];
                    for i in 0..2 {
                        for j in 0..2 {
                            v[i][j] += xf[i] * xf[j].conj() * rk[t];
                        }
                    }
                }
                for row in &mut v {
                    for z in row.iter_mut() {
                        *z /= n as f64;
                    }
                }
                // exact Hermitian symmetry
                v[1][0] = v[0][1].conj();
                v[0][0].im = 0.0;
                v[1][1].im = 0.0;
                v
            };
            let (v1, v2) = (cov(0), cov(1));
            let g = match HermitianPair2::new(v1, v2).and_then(|p| gevd2(&p)) {
                Ok(g) => g,
                Err(Error::NotPositiveDefinite) => {
                    report.skipped_bins.push(f);
                    continue;
                }
                Err(e) => return Err(e),
            };
            // row 0 minimizes its own weighted power: smaller eigenvalue
            let (a, b) = if g.degenerate { (g.vectors[0], g.vectors[1]) } else { (g.vectors[1], g.vectors[0]) };
            let p1 = quad2(&a, &v1, &a).re;
            let p2 = quad2(&b, &v2, &b).re;
            if !(p1 > 0.0 && p2 > 0.0) {
                report.skipped_bins.push(f);
                continue;
            }
            let (s1, s2) = (p1.sqrt().recip(), p2.sqrt().recip());
            let rows = vec![a[0].conj() * s1, a[1].conj() * s1, b[0].conj() * s2, b[1].conj() * s2];
            self.w[f] = CMatrix::from_rows(2, rows)?;
        }
        self.recompute_estimates();
        Ok(report)
    }

    fn recompute_estimates(&mut self) {
        let (m_src, f_bins, n) = self.dims();
        let x = self.x.data();
        let y = self.y.data_mut();
        for f in 0..f_bins {
            let w = &self.w[f];
            for k in 0..m_src {
                let dst = at(f_bins, n, k, f);
                for t in 0..n {
                    y[dst + t] = (0..m_src).map(|m| w.get(k, m) * x[at(f_bins, n, m, f) + t]).sum();
                }
            }
        }
    }

    /// Relative mismatch `‖Y − W X‖ / ‖Y‖`.
    pub fn consistency_error(&self) -> f64 {
        let mut copy = self.clone();
        copy.recompute_estimates();
        let diff: f64 = copy.y.data().iter().zip(self.y.data()).map(|(a, b)| (a - b).norm_sqr()).sum();
        (diff / self.y.norm_sqr().max(f64::MIN_POSITIVE)).sqrt()
    }
}

/// Negative log-likelihood `Σ_k G(Y_k) − 2N Σ_f log|det W_f|` for a
/// classical model, with `G_Laplace = Σ_n ‖y_n‖` and
/// `G_Gauss = F Σ_n log λ_n` (constants dropped).
pub fn neg_log_likelihood(y: &CTensor, w: &[CMatrix], model: &SourceModel) -> Result<f64> {
    let (m_src, f_bins, n) = dims3(y)?;
    if w.len() != f_bins {
        return Err(Error::ShapeMismatch(format!("{} demixing matrices for {f_bins} bins", w.len())));
    }
    let mut g = 0.0;
    for k in 0..m_src {
        g += source_models::contrast(model, y.outer(k), f_bins, n)
            .ok_or_else(|| Error::Config("the learned model has no closed-form contrast".into()))?;
    }
    let mut logdet = 0.0;
    for wf in w {
        logdet += logdet_abs(wf)?;
    }
    Ok(g - 2.0 * n as f64 * logdet)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub iteration: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
    /// Per-reference SI-SDR after scaling and PIT alignment.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub si_sdr: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct AuxIvaOutput {
    pub y: CTensor,
    pub w: Vec<CMatrix>,
    pub trace: Vec<TraceRecord>,
    /// Bins skipped per iteration, summed over all updates.
    pub skipped_bins: usize,
}

fn record(state: &SeparationState, cfg: &AuxIvaConfig, reference: Option<&TraceReference>) -> Result<TraceRecord> {
    let nll = if cfg.model.is_classical() {
        Some(neg_log_likelihood(state.estimates(), state.demixing(), &cfg.model)?)
    } else {
        None
    };
    let si_sdr = match reference {
        Some(r) => Some(post::evaluate_estimates(state.estimates(), state.mixture(), r)?.per_pair),
        None => None,
    };
    Ok(TraceRecord { iteration: state.iteration(), nll, si_sdr })
}

/// Runs AuxIVA from `W_f = I` for `cfg.n_iters` iterations.
///
/// Weights are computed once per iteration from the current estimates; the
/// ISS source loop then uses the running estimates.
pub fn auxiva_run(x: &CTensor, cfg: &AuxIvaConfig, reference: Option<&TraceReference>) -> Result<AuxIvaOutput> {
    let (m_src, _, n) = dims3(x)?;
    if m_src < 2 || n < 2 {
        return Err(Error::Config(format!("need at least 2 sources and 2 frames, got {m_src} and {n}")));
    }
    cfg.validate(m_src)?;
    let mut state = SeparationState::new(x.clone())?;
    let mut trace = vec![record(&state, cfg, reference)?];
    let mut skipped = 0;
    for _ in 0..cfg.n_iters {
        let r = model_weights(&cfg.model, state.estimates())?;
        match cfg.algo {
            Algorithm::Iss => {
                for k in 0..m_src {
                    skipped += state.iss_update_source(&r, k)?.skipped_bins.len();
                }
            }
            Algorithm::Ip2 => skipped += state.ip2_update(&r)?.skipped_bins.len(),
        }
        state.iteration += 1;
        if !state.estimates().is_finite() {
            return Err(Error::NonFinite(format!("estimates after iteration {}", state.iteration)));
        }
        trace.push(record(&state, cfg, reference)?);
    }
    let (y, w) = state.into_parts();
    Ok(AuxIvaOutput { y, w, trace, skipped_bins: skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RTensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp};

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> CTensor {
        let len = shape.iter().product();
        CTensor::from_vec(shape, (0..len).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect())
            .unwrap()
    }

    fn random_weights(rng: &mut ChaCha8Rng, shape: &[usize]) -> SourceWeights {
        let len = shape.iter().product();
        SourceWeights::new(RTensor::from_vec(shape, (0..len).map(|_| rng.gen_range(0.1..2.0)).collect()).unwrap())
            .unwrap()
    }

    /// Instantaneous mixture of Laplacian-envelope sources in the STFT domain.
    fn heavy_tailed_mixture(rng: &mut ChaCha8Rng, m: usize, f: usize, n: usize) -> CTensor {
        let env = Exp::new(1.0).unwrap();
        let mut s = CTensor::zeros(&[m, f, n]);
        for k in 0..m {
            let scales: Vec<f64> = (0..n).map(|_| { let e: f64 = env.sample(rng); e * e }).collect();
            for fi in 0..f {
                for t in 0..n {
                    let z = c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * scales[t];
                    s.data_mut()[(k * f + fi) * n + t] = z;
                }
            }
        }
        let a: Vec<f64> = (0..m * m).map(|i| if i % (m + 1) == 0 { 1.0 } else { rng.gen_range(-0.6..0.6) }).collect();
        let mut x = CTensor::zeros(&[m, f, n]);
        for i in 0..m {
            for j in 0..m {
                for idx in 0..f * n {
                    x.data_mut()[i * f * n + idx] += s.data()[j * f * n + idx] * a[i * m + j];
                }
            }
        }
        x
    }

    #[test]
    fn iss_vector_diagonal_entry() {
        // (1/N) Σ r |y_k|² = 4 → v_k = 0.5
        let y = CTensor::from_vec(&[2, 1, 2], vec![c(2.0, 0.0), c(0.0, 2.0), c(1.0, 0.0), c(0.0, 0.0)]).unwrap();
        let r = SourceWeights::new(RTensor::from_vec(&[2, 1, 2], vec![1.0; 4]).unwrap()).unwrap();
        let v = iss_vector(&y, &r, 0, 0).unwrap();
        assert!((v[0] - c(0.5, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn iss_vector_uncorrelated_is_zero() {
        // y_1 ⟂ y_0 over frames
        let y = CTensor::from_vec(&[2, 1, 2], vec![c(1.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(-1.0, 0.0)]).unwrap();
        let r = SourceWeights::new(RTensor::from_vec(&[2, 1, 2], vec![1.0; 4]).unwrap()).unwrap();
        let v = iss_vector(&y, &r, 0, 0).unwrap();
        assert!(v[1].norm() < 1e-15);
    }

    #[test]
    fn iss_vector_degenerate_bin() {
        let y = CTensor::zeros(&[2, 1, 3]);
        let r = SourceWeights::new(RTensor::from_vec(&[2, 1, 3], vec![1.0; 6]).unwrap()).unwrap();
        assert!(matches!(iss_vector(&y, &r, 1, 0), Err(Error::DegenerateBin { source_index: 1, bin: 0 })));
    }

    #[test]
    fn iss_vector_minimizes_weighted_quadratic() {
        // For m ≠ k, v_m minimizes Σ_n r_m |y_m − v y_k|²: check by grid-free
        // perturbation of the real and imaginary parts.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (m, f, n) = (3, 4, 9);
        let y = random_tensor(&mut rng, &[m, f, n]);
        let r = random_weights(&mut rng, &[m, f, n]);
        for k in 0..m {
            for fi in 0..f {
                let v = iss_vector(&y, &r, k, fi).unwrap();
                for mm in (0..m).filter(|mm| *mm != k) {
                    let cost = |vv: C64| -> f64 {
                        (0..n)
                            .map(|t| {
                                let ym = y.data()[(mm * f + fi) * n + t];
                                let yk = y.data()[(k * f + fi) * n + t];
                                r.data()[(mm * f + fi) * n + t] * (ym - vv * yk).norm_sqr()
                            })
                            .sum()
                    };
                    // independent least squares: normal equation a v = b
                    let (mut a, mut b) = (0.0, c(0.0, 0.0));
                    for t in 0..n {
                        let w = r.data()[(mm * f + fi) * n + t];
                        let yk = y.data()[(k * f + fi) * n + t];
                        a += w * yk.norm_sqr();
                        b += y.data()[(mm * f + fi) * n + t] * yk.conj() * w;
                    }
                    assert!((v[mm] - b / a).norm() < 1e-12);
                    let base = cost(v[mm]);
                    for d in [c(1e-4, 0.0), c(-1e-4, 0.0), c(0.0, 1e-4), c(0.0, -1e-4)] {
                        assert!(cost(v[mm] + d) >= base);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_steering_leaves_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&mut rng, &[2, 3, 5]);
        let mut st = SeparationState::new(x.clone()).unwrap();
        let v = [c(0.0, 0.0); 2];
        let dims = st.dims();
        apply_steering(st.y.data_mut(), dims, &v, 0, 1);
        assert_eq!(st.estimates(), &x);
    }

    #[test]
    fn iss_update_tracks_determinant_and_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, f, n) = (3, 5, 12);
        let x = random_tensor(&mut rng, &[m, f, n]);
        let r = random_weights(&mut rng, &[m, f, n]);
        let mut st = SeparationState::new(x).unwrap();
        for k in 0..m {
            let before: Vec<f64> = st.demixing().iter().map(|w| logdet_abs(w).unwrap()).collect();
            let vs: Vec<Vec<C64>> = (0..f).map(|fi| iss_vector(st.estimates(), &r, k, fi).unwrap()).collect();
            st.iss_update_source(&r, k).unwrap();
            for fi in 0..f {
                let after = logdet_abs(&st.demixing()[fi]).unwrap();
                let expected = before[fi] + (c(1.0, 0.0) - vs[fi][k]).norm().ln();
                assert!((after - expected).abs() < 1e-10);
                let yk = &st.estimates().data()[(k * f + fi) * n..(k * f + fi + 1) * n];
                let rk = &r.data()[(k * f + fi) * n..(k * f + fi + 1) * n];
                let p: f64 = yk.iter().zip(rk).map(|(z, w)| w * z.norm_sqr()).sum::<f64>() / n as f64;
                assert!((p - 1.0).abs() < 1e-12);
            }
            assert!(st.consistency_error() < 1e-8);
        }
    }

    #[test]
    fn ip2_diagonal_example() {
        // X = I-like two frames; weights chosen so V_1 = diag(2,1), V_2 = diag(1,2)
        let x = CTensor::from_vec(&[2, 1, 2], vec![c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]).unwrap();
        // V_k = (1/2) Σ_n r_kn x_n x_nᴴ → diag(r_k0/2, r_k1/2)
        let r = SourceWeights::new(RTensor::from_vec(&[2, 1, 2], vec![4.0, 2.0, 2.0, 4.0]).unwrap()).unwrap();
        let mut st = SeparationState::new(x).unwrap();
        st.ip2_update(&r).unwrap();
        let w = &st.demixing()[0];
        let expected = [c(0.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)];
        for (a, b) in w.data().iter().zip(expected) {
            assert!((a - b).norm() < 1e-12, "{:?}", w);
        }
        assert!(st.consistency_error() < 1e-12);
    }

    #[test]
    fn ip2_degenerate_keeps_canonical_rows() {
        let x = CTensor::from_vec(&[2, 1, 2], vec![c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]).unwrap();
        let r = SourceWeights::new(RTensor::from_vec(&[2, 1, 2], vec![2.0; 4]).unwrap()).unwrap();
        let mut st = SeparationState::new(x).unwrap();
        st.ip2_update(&r).unwrap();
        let w = &st.demixing()[0];
        assert!(w.get(0, 1).norm() < 1e-15 && w.get(1, 0).norm() < 1e-15);
        assert!((w.get(0, 0) - c(1.0, 0.0)).norm() < 1e-12 && (w.get(1, 1) - c(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn ip2_rows_are_normalized_and_decorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (f, n) = (6, 20);
        let x = random_tensor(&mut rng, &[2, f, n]);
        let r = random_weights(&mut rng, &[2, f, n]);
        let mut st = SeparationState::new(x.clone()).unwrap();
        st.ip2_update(&r).unwrap();
        for fi in 0..f {
            let w = &st.demixing()[fi];
            for k in 0..2 {
                // (1/N) Σ r_k |y_k|² = w_kᴴ V_k w_k = 1
                let y = &st.estimates().data()[(k * f + fi) * n..(k * f + fi + 1) * n];
                let rk = &r.data()[(k * f + fi) * n..(k * f + fi + 1) * n];
                let p: f64 = y.iter().zip(rk).map(|(z, w)| w * z.norm_sqr()).sum::<f64>() / n as f64;
                assert!((p - 1.0).abs() < 1e-10);
                // (1/N) Σ r_k y_k y_j* = 0 for j ≠ k
                let j = 1 - k;
                let yj = &st.estimates().data()[(j * f + fi) * n..(j * f + fi + 1) * n];
                let cross: C64 = y.iter().zip(yj).zip(rk).map(|((a, b), w)| a * b.conj() * *w).sum();
                assert!(cross.norm() / (n as f64) < 1e-10);
            }
            assert!(w.is_finite());
        }
        assert!(st.consistency_error() < 1e-10);
    }

    #[test]
    fn ip2_rejects_three_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, &[3, 2, 4]);
        let cfg = AuxIvaConfig::new(Algorithm::Ip2, 3, SourceModel::Laplace);
        assert!(matches!(auxiva_run(&x, &cfg, None), Err(Error::Config(_))));
    }

    #[test]
    fn nll_direct_arithmetic() {
        let y = CTensor::from_vec(&[1, 4, 1], vec![c(1.0, 0.0); 4]).unwrap();
        let w = vec![CMatrix::identity(1); 4];
        // Laplace contrast Σ_n ‖y_n‖ = 2
        assert!((neg_log_likelihood(&y, &w, &SourceModel::Laplace).unwrap() - 2.0).abs() < 1e-15);
        // Gauss: F Σ log λ = 4 log 1 = 0
        assert!(neg_log_likelihood(&y, &w, &SourceModel::Gauss).unwrap().abs() < 1e-15);
    }

    #[test]
    fn nll_doubles_with_repeated_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, f, n) = (2, 3, 4);
        let x = random_tensor(&mut rng, &[m, f, n]);
        let mut st = SeparationState::new(x).unwrap();
        let r = random_weights(&mut rng, &[m, f, n]);
        st.iss_update_source(&r, 0).unwrap();
        let y = st.estimates();
        let mut doubled = Vec::new();
        for k in 0..m {
            for fi in 0..f {
                let row = &y.data()[(k * f + fi) * n..(k * f + fi + 1) * n];
                doubled.extend_from_slice(row);
                doubled.extend_from_slice(row);
            }
        }
        let y2 = CTensor::from_vec(&[m, f, 2 * n], doubled).unwrap();
        for model in [SourceModel::Laplace, SourceModel::Gauss] {
            let a = neg_log_likelihood(y, st.demixing(), &model).unwrap();
            let b = neg_log_likelihood(&y2, st.demixing(), &model).unwrap();
            assert!((b - 2.0 * a).abs() < 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn nll_scaling_terms_compensate() {
        // Scaling row k of every W_f by c scales Y_k by c. The contrast term
        // moves by (c − 1) G_k for Laplace and the log-det term by −2NF log c.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (m, f, n) = (2, 4, 6);
        let x = random_tensor(&mut rng, &[m, f, n]);
        let st = SeparationState::new(x).unwrap();
        let base = neg_log_likelihood(st.estimates(), st.demixing(), &SourceModel::Laplace).unwrap();
        let g0 = source_models::contrast(&SourceModel::Laplace, st.estimates().outer(0), f, n).unwrap();
        let cs = 1.7;
        let mut y = st.estimates().clone();
        y.outer_mut(0).iter_mut().for_each(|z| *z *= cs);
        let w: Vec<CMatrix> = st
            .demixing()
            .iter()
            .map(|wf| {
                let mut wf = wf.clone();
                wf.row_mut(0).iter_mut().for_each(|z| *z *= cs);
                wf
            })
            .collect();
        let scaled = neg_log_likelihood(&y, &w, &SourceModel::Laplace).unwrap();
        let expected = base + (cs - 1.0) * g0 - 2.0 * (n * f) as f64 * cs.ln();
        assert!((scaled - expected).abs() < 1e-10);
    }

    #[test]
    fn trace_has_one_record_per_iteration_plus_initial() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = heavy_tailed_mixture(&mut rng, 2, 8, 40);
        let out = auxiva_run(&x, &AuxIvaConfig::new(Algorithm::Iss, 7, SourceModel::Laplace), None).unwrap();
        assert_eq!(out.trace.len(), 8);
        assert_eq!(out.trace[0].iteration, 0);
    }

    #[test]
    fn mm_monotone_on_random_mixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for trial in 0..20 {
            let m = 2 + trial % 2;
            let x = heavy_tailed_mixture(&mut rng, m, 12, 60);
            for model in [SourceModel::Laplace, SourceModel::Gauss] {
                let out = auxiva_run(&x, &AuxIvaConfig::new(Algorithm::Iss, 15, model), None).unwrap();
                let nll: Vec<f64> = out.trace.iter().map(|t| t.nll.unwrap()).collect();
                for w in nll.windows(2) {
                    assert!(w[1] <= w[0] + 1e-8 * w[0].abs(), "{nll:?}");
                }
            }
        }
    }

    #[test]
    fn mm_monotone_under_ip2() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..10 {
            let x = heavy_tailed_mixture(&mut rng, 2, 10, 50);
            let out = auxiva_run(&x, &AuxIvaConfig::new(Algorithm::Ip2, 10, SourceModel::Laplace), None).unwrap();
            let nll: Vec<f64> = out.trace.iter().map(|t| t.nll.unwrap()).collect();
            for w in nll.windows(2) {
                assert!(w[1] <= w[0] + 1e-8 * w[0].abs(), "{nll:?}");
            }
        }
    }
}
