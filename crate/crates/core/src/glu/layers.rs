//! Layer kernels on `[channels × time]` row-major buffers.
//!
//! Every forward kernel has a matching backward kernel so the same arithmetic
//! serves plain inference and the gradient tape.

/// `dst[t] += c * src[t + shift]` wherever both indices are in range.
#[inline]
fn shifted_axpy(dst: &mut [f64], src: &[f64], c: f64, shift: isize) {
    let n = dst.len() as isize;
    let lo = (-shift).max(0);
    let hi = (n - shift).min(n);
    if lo >= hi {
        return;
    }
    let (lo, hi) = (lo as usize, hi as usize);
    let s0 = (lo as isize + shift) as usize;
    for (d, s) in dst[lo..hi].iter_mut().zip(&src[s0..s0 + (hi - lo)]) {
        *d += c * s;
    }
}

/// `Σ_t a[t] b[t + shift]` over valid indices.
#[inline]
fn shifted_dot(a: &[f64], b: &[f64], shift: isize) -> f64 {
    let n = a.len() as isize;
    let lo = (-shift).max(0);
    let hi = (n - shift).min(n);
    if lo >= hi {
        return 0.0;
    }
    let (lo, hi) = (lo as usize, hi as usize);
    let s0 = (lo as isize + shift) as usize;
    a[lo..hi].iter().zip(&b[s0..s0 + (hi - lo)]).map(|(x, y)| x * y).sum()
}

pub const KERNEL: usize = 3;

/// Time-axis convolution, kernel 3, zero "same" padding.
///
/// `out[o][t] = b[o] + Σ_i Σ_j w[o][i][j] x[i][t + j − 1]`, `w: [c_out × c_in × 3]`.
pub fn conv1d(x: &[f64], c_in: usize, n: usize, w: &[f64], b: &[f64], c_out: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), c_in * n);
    debug_assert_eq!(w.len(), c_out * c_in * KERNEL);
    let mut out = vec![0.0; c_out * n];
    for o in 0..c_out {
        let dst = &mut out[o * n..(o + 1) * n];
        dst.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..c_in {
            let src = &x[i * n..(i + 1) * n];
            for j in 0..KERNEL {
                let c = w[(o * c_in + i) * KERNEL + j];
                if c != 0.0 {
                    shifted_axpy(dst, src, c, j as isize - 1);
                }
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub input: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv1d_backward(x: &[f64], c_in: usize, n: usize, w: &[f64], c_out: usize, gy: &[f64]) -> ConvGrads {
    let mut gx = vec![0.0; c_in * n];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; c_out];
    for o in 0..c_out {
        let g = &gy[o * n..(o + 1) * n];
        gb[o] = g.iter().sum();
        for i in 0..c_in {
            let src = &x[i * n..(i + 1) * n];
            let dst = &mut gx[i * n..(i + 1) * n];
            for j in 0..KERNEL {
                let shift = j as isize - 1;
                let idx = (o * c_in + i) * KERNEL + j;
                gw[idx] = shifted_dot(g, src, shift);
                shifted_axpy(dst, g, w[idx], -shift);
            }
        }
    }
    ConvGrads { input: gx, weight: gw, bias: gb }
}

/// Transposed time-axis convolution, stride 1, kernel 3, padding 1.
///
/// `out[o][t] = b[o] + Σ_i Σ_j w[i][o][j] x[i][t − j + 1]`, `w: [c_in × c_out × 3]`.
pub fn conv_transpose1d(x: &[f64], c_in: usize, n: usize, w: &[f64], b: &[f64], c_out: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), c_in * c_out * KERNEL);
    let mut out = vec![0.0; c_out * n];
    for o in 0..c_out {
        out[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = b[o]);
    }
    for i in 0..c_in {
        let src = &x[i * n..(i + 1) * n];
        for o in 0..c_out {
            let dst = &mut out[o * n..(o + 1) * n];
            for j in 0..KERNEL {
                let c = w[(i * c_out + o) * KERNEL + j];
                if c != 0.0 {
                    shifted_axpy(dst, src, c, 1 - j as isize);
                }
            }
        }
    }
    out
}

pub fn conv_transpose1d_backward(x: &[f64], c_in: usize, n: usize, w: &[f64], c_out: usize, gy: &[f64]) -> ConvGrads {
    let mut gx = vec![0.0; c_in * n];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; c_out];
    for o in 0..c_out {
        gb[o] = gy[o * n..(o + 1) * n].iter().sum();
    }
    for i in 0..c_in {
        let src = &x[i * n..(i + 1) * n];
        let dst = &mut gx[i * n..(i + 1) * n];
        for o in 0..c_out {
            let g = &gy[o * n..(o + 1) * n];
            for j in 0..KERNEL {
                let shift = 1 - j as isize;
                let idx = (i * c_out + o) * KERNEL + j;
                gw[idx] = shifted_dot(g, src, shift);
                shifted_axpy(dst, g, w[idx], -shift);
            }
        }
    }
    ConvGrads { input: gx, weight: gw, bias: gb }
}

pub const NORM_EPS: f64 = 1e-5;

/// Per-channel affine normalization with fixed statistics.
pub fn norm_fixed(x: &[f64], n: usize, mean: &[f64], var: &[f64], scale: &[f64], shift: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for c in 0..mean.len() {
        let inv = 1.0 / (var[c] + NORM_EPS).sqrt();
        for t in 0..n {
            out[c * n + t] = scale[c] * (x[c * n + t] - mean[c]) * inv + shift[c];
        }
    }
    out
}

pub struct NormGrads {
    pub input: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

pub fn norm_fixed_backward(x: &[f64], n: usize, mean: &[f64], var: &[f64], scale: &[f64], gy: &[f64]) -> NormGrads {
    let ch = mean.len();
    let mut gx = vec![0.0; x.len()];
    let mut gs = vec![0.0; ch];
    let mut gb = vec![0.0; ch];
    for c in 0..ch {
        let inv = 1.0 / (var[c] + NORM_EPS).sqrt();
        for t in 0..n {
            let g = gy[c * n + t];
            gx[c * n + t] = g * scale[c] * inv;
            gs[c] += g * (x[c * n + t] - mean[c]) * inv;
            gb[c] += g;
        }
    }
    NormGrads { input: gx, scale: gs, shift: gb }
}

/// Statistics of one batch-normalized call, per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance used for normalization.
    pub var: Vec<f64>,
}

impl BatchStats {
    /// Unbiased variance, for running-average bookkeeping.
    pub fn unbiased_var(&self, n: usize) -> Vec<f64> {
        let k = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        self.var.iter().map(|v| v * k).collect()
    }
}

/// Normalization with statistics taken over the time axis of this input.
pub fn norm_batch(x: &[f64], n: usize, scale: &[f64], shift: &[f64]) -> (Vec<f64>, BatchStats) {
    let ch = scale.len();
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for c in 0..ch {
        let row = &x[c * n..(c + 1) * n];
        let m = row.iter().sum::<f64>() / n as f64;
        mean[c] = m;
        var[c] = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
    }
    let out = norm_fixed(x, n, &mean, &var, scale, shift);
    (out, BatchStats { mean, var })
}

pub fn norm_batch_backward(x: &[f64], n: usize, stats: &BatchStats, scale: &[f64], gy: &[f64]) -> NormGrads {
    let ch = scale.len();
    let mut gx = vec![0.0; x.len()];
    let mut gs = vec![0.0; ch];
    let mut gb = vec![0.0; ch];
    let nf = n as f64;
    for c in 0..ch {
        let inv = 1.0 / (stats.var[c] + NORM_EPS).sqrt();
        let row = &x[c * n..(c + 1) * n];
        let g = &gy[c * n..(c + 1) * n];
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for t in 0..n {
            let xh = (row[t] - stats.mean[c]) * inv;
            sum_g += g[t];
            sum_gx += g[t] * xh;
        }
        gs[c] = sum_gx;
        gb[c] = sum_g;
        for t in 0..n {
            let xh = (row[t] - stats.mean[c]) * inv;
            gx[c * n + t] = scale[c] * inv / nf * (nf * g[t] - sum_g - xh * sum_gx);
        }
    }
    NormGrads { input: gx, scale: gs, shift: gb }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    // Directly indexed reference implementations.
    fn conv_ref(x: &[f64], c_in: usize, n: usize, w: &[f64], b: &[f64], c_out: usize) -> Vec<f64> {
        let mut out = vec![0.0; c_out * n];
        for o in 0..c_out {
            for t in 0..n {
                let mut acc = b[o];
                for i in 0..c_in {
                    for j in 0..3 {
                        let s = t as isize + j as isize - 1;
                        if s >= 0 && (s as usize) < n {
                            acc += w[(o * c_in + i) * 3 + j] * x[i * n + s as usize];
                        }
                    }
                }
                out[o * n + t] = acc;
            }
        }
        out
    }

    fn deconv_ref(x: &[f64], c_in: usize, n: usize, w: &[f64], b: &[f64], c_out: usize) -> Vec<f64> {
        // scatter form: out[t' + j - 1] += w[i][o][j] x[i][t']
        let mut out = vec![0.0; c_out * n];
        for o in 0..c_out {
            for t in 0..n {
                out[o * n + t] = b[o];
            }
        }
        for i in 0..c_in {
            for o in 0..c_out {
                for tp in 0..n {
                    for j in 0..3 {
                        let t = tp as isize + j as isize - 1;
                        if t >= 0 && (t as usize) < n {
                            out[o * n + t as usize] += w[(i * c_out + o) * 3 + j] * x[i * n + tp];
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [1, 2, 7] {
            let x = rand_vec(&mut rng, 4 * n);
            let w = rand_vec(&mut rng, 5 * 4 * 3);
            let b = rand_vec(&mut rng, 5);
            let a = conv1d(&x, 4, n, &w, &b, 5);
            let r = conv_ref(&x, 4, n, &w, &b, 5);
            assert!(a.iter().zip(&r).all(|(p, q)| (p - q).abs() < 1e-12));
            let wt = rand_vec(&mut rng, 4 * 5 * 3);
            let a = conv_transpose1d(&x, 4, n, &wt, &b, 5);
            let r = deconv_ref(&x, 4, n, &wt, &b, 5);
            assert!(a.iter().zip(&r).all(|(p, q)| (p - q).abs() < 1e-12));
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c_in, c_out, n) = (3, 4, 6);
        let x = rand_vec(&mut rng, c_in * n);
        let w = rand_vec(&mut rng, c_out * c_in * 3);
        let zero_b = vec![0.0; c_out];
        let gy = rand_vec(&mut rng, c_out * n);
        let g = conv1d_backward(&x, c_in, n, &w, c_out, &gy);
        // linear in x and in w separately
        let y = conv1d(&x, c_in, n, &w, &zero_b, c_out);
        assert!((dot(&y, &gy) - dot(&g.input, &x)).abs() < 1e-12);
        assert!((dot(&y, &gy) - dot(&g.weight, &w)).abs() < 1e-12);
        assert!((g.bias.iter().sum::<f64>() - gy.iter().sum::<f64>()).abs() < 1e-12);

        let wt = rand_vec(&mut rng, c_in * c_out * 3);
        let g = conv_transpose1d_backward(&x, c_in, n, &wt, c_out, &gy);
        let y = conv_transpose1d(&x, c_in, n, &wt, &zero_b, c_out);
        assert!((dot(&y, &gy) - dot(&g.input, &x)).abs() < 1e-12);
        assert!((dot(&y, &gy) - dot(&g.weight, &wt)).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (ch, n) = (3, 5);
        let x = rand_vec(&mut rng, ch * n);
        let scale = rand_vec(&mut rng, ch);
        let shift = rand_vec(&mut rng, ch);
        let gy = rand_vec(&mut rng, ch * n);
        let loss = |x: &[f64]| dot(&norm_batch(x, n, &scale, &shift).0, &gy);
        let (_, stats) = norm_batch(&x, n, &scale, &shift);
        let g = norm_batch_backward(&x, n, &stats, &scale, &gy);
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - g.input[idx]).abs() < 1e-7, "{fd} vs {}", g.input[idx]);
        }
    }

    #[test]
    fn activations_are_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
