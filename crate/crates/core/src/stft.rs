//! Half-overlap STFT analysis and weighted overlap-add synthesis.
//!
//! Analysis uses a periodic Hamming window. Synthesis windows each inverse
//! frame again and divides by the per-sample sum of squared windows, which
//! makes `istft(stft(x))` reproduce every sample covered by a frame.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::numerics::{CTensor, C64};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_FRAME_SIZE: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    Hamming,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Hamming => (0..len)
                .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    frame_size: usize,
    window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { frame_size: DEFAULT_FRAME_SIZE, window: Window::Hamming }
    }
}

impl StftConfig {
    pub fn new(frame_size: usize) -> Result<Self> {
        if frame_size < 2 || !frame_size.is_power_of_two() {
            return Err(Error::Config(format!("frame size {frame_size} is not a power of two >= 2")));
        }
        Ok(Self { frame_size, window: Window::Hamming })
    }

    pub fn frame_size(&self) -> usize {
        self.frame_size
    }

    pub fn hop(&self) -> usize {
        self.frame_size / 2
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn n_bins(&self) -> usize {
        self.frame_size / 2 + 1
    }

    pub fn n_frames(&self, len: usize) -> Option<usize> {
        (len >= self.frame_size).then(|| (len - self.frame_size) / self.hop() + 1)
    }

    /// Samples produced by synthesis from `n_frames` frames.
    pub fn synthesis_len(&self, n_frames: usize) -> usize {
        if n_frames == 0 {
            0
        } else {
            (n_frames - 1) * self.hop() + self.frame_size
        }
    }
}

/// Reusable transform with cached FFT plans and window tables.
#[derive(Clone)]
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            cfg,
            window: cfg.window().coefficients(cfg.frame_size()),
            forward: planner.plan_fft_forward(cfg.frame_size()),
            inverse: planner.plan_fft_inverse(cfg.frame_size()),
        }
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Complex spectrogram `[F × N]` of a real signal.
    pub fn analyze(&self, x: &[f64]) -> Result<CTensor> {
        let l = self.cfg.frame_size();
        let hop = self.cfg.hop();
        let f_bins = self.cfg.n_bins();
        let n_frames = self
            .cfg
            .n_frames(x.len())
            .ok_or(Error::InputTooShort { len: x.len(), needed: l })?;
        let mut out = CTensor::zeros(&[f_bins, n_frames]);
        let data = out.data_mut();
        let mut buf = vec![C64::new(0.0, 0.0); l];
        for n in 0..n_frames {
            let seg = &x[n * hop..n * hop + l];
            for ((b, s), w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = C64::new(s * w, 0.0);
            }
            self.forward.process(&mut buf);
            for f in 0..f_bins {
                data[f * n_frames + n] = buf[f];
            }
        }
        Ok(out)
    }

    fn synthesis_norm(&self, n_frames: usize) -> Vec<f64> {
        let hop = self.cfg.hop();
        let mut norm = vec![0.0; self.cfg.synthesis_len(n_frames)];
        for n in 0..n_frames {
            for (t, w) in self.window.iter().enumerate() {
                norm[n * hop + t] += w * w;
            }
        }
        norm
    }

    /// Weighted overlap-add synthesis of a `[F × N]` spectrogram.
    ///
    /// The imaginary parts of the DC and Nyquist bins do not contribute.
    pub fn synthesize(&self, spec: &CTensor) -> Result<Vec<f64>> {
        let (f_bins, n_frames) = self.check_spec(spec)?;
        let l = self.cfg.frame_size();
        let hop = self.cfg.hop();
        let norm = self.synthesis_norm(n_frames);
        let mut out = vec![0.0; norm.len()];
        let data = spec.data();
        let mut buf = vec![C64::new(0.0, 0.0); l];
        let scale = 1.0 / l as f64;
        for n in 0..n_frames {
            for f in 0..f_bins {
                buf[f] = data[f * n_frames + n];
            }
            for f in 1..l / 2 {
                buf[l - f] = buf[f].conj();
            }
            self.inverse.process(&mut buf);
            for (t, w) in self.window.iter().enumerate() {
                out[n * hop + t] += w * buf[t].re * scale;
            }
        }
        for (o, d) in out.iter_mut().zip(&norm) {
            if *d > 0.0 {
                *o /= d;
            }
        }
        Ok(out)
    }

    /// Adjoint of [`Stft::synthesize`] on real coordinates.
    ///
    /// Given `g = ∂L/∂out`, returns `∂L/∂Re Y + i ∂L/∂Im Y` for every bin.
    pub fn synthesize_adjoint(&self, grad: &[f64], n_frames: usize) -> Result<CTensor> {
        let l = self.cfg.frame_size();
        let hop = self.cfg.hop();
        let f_bins = self.cfg.n_bins();
        let norm = self.synthesis_norm(n_frames);
        if grad.len() != norm.len() {
            return Err(Error::ShapeMismatch(format!(
                "synthesis adjoint: gradient has {} samples, expected {}",
                grad.len(),
                norm.len()
            )));
        }
        let mut out = CTensor::zeros(&[f_bins, n_frames]);
        let data = out.data_mut();
        let mut buf = vec![C64::new(0.0, 0.0); l];
        for n in 0..n_frames {
            for (t, w) in self.window.iter().enumerate() {
                let idx = n * hop + t;
                buf[t] = C64::new(grad[idx] * w / norm[idx] / l as f64, 0.0);
            }
            self.forward.process(&mut buf);
            for f in 0..f_bins {
                let weight = if f == 0 || f == l / 2 { 1.0 } else { 2.0 };
                data[f * n_frames + n] = buf[f] * weight;
            }
        }
        Ok(out)
    }

    fn check_spec(&self, spec: &CTensor) -> Result<(usize, usize)> {
        match spec.shape() {
            [f, n] if *f == self.cfg.n_bins() => Ok((*f, *n)),
            other => Err(Error::ShapeMismatch(format!(
                "spectrogram shape {other:?}, expected [{} × N]",
                self.cfg.n_bins()
            ))),
        }
    }
}

pub fn stft(x: &Waveform, cfg: StftConfig) -> Result<CTensor> {
    Stft::new(cfg).analyze(&x.samples)
}

pub fn istft(spec: &CTensor, cfg: StftConfig, sample_rate: u32) -> Result<Waveform> {
    Ok(Waveform::new(Stft::new(cfg).synthesize(spec)?, sample_rate))
}

/// Pads with zeros or truncates to `len` samples.
pub fn fit_length(mut x: Vec<f64>, len: usize) -> Vec<f64> {
    x.resize(len, 0.0);
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_signal(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn direct_dft(frame: &[f64], f: usize) -> C64 {
        let l = frame.len() as f64;
        frame
            .iter()
            .enumerate()
            .map(|(t, x)| C64::from_polar(*x, -2.0 * PI * f as f64 * t as f64 / l))
            .sum()
    }

    #[test]
    fn rejects_bad_frames_and_short_input() {
        assert!(StftConfig::new(1000).is_err());
        let s = Stft::new(StftConfig::new(16).unwrap());
        assert!(matches!(s.analyze(&[0.0; 15]), Err(Error::InputTooShort { .. })));
    }

    #[test]
    fn zero_input_gives_zero_spectrogram() {
        let s = Stft::new(StftConfig::new(64).unwrap());
        let spec = s.analyze(&[0.0; 300]).unwrap();
        assert_eq!(spec.shape(), &[33, (300 - 64) / 32 + 1]);
        assert!(spec.data().iter().all(|z| z.norm() == 0.0));
        assert!(s.synthesize(&spec).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn impulse_gives_flat_magnitude() {
        let cfg = StftConfig::new(64).unwrap();
        let s = Stft::new(cfg);
        let mut x = vec![0.0; 64 * 4];
        // frame 2 starts at 64, offset 32 is its center
        x[64 + 32] = 1.0;
        let spec = s.analyze(&x).unwrap();
        let n = spec.shape()[1];
        let w = s.window()[32];
        for f in 0..cfg.n_bins() {
            assert!((spec.data()[f * n + 2].norm() - w).abs() < 1e-12);
        }
    }

    #[test]
    fn frames_match_direct_dft() {
        let cfg = StftConfig::new(256).unwrap();
        let s = Stft::new(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_signal(&mut rng, 16_000);
        let spec = s.analyze(&x).unwrap();
        let n_frames = spec.shape()[1];
        for n in [0, 17, n_frames - 1] {
            let frame: Vec<f64> = (0..256).map(|t| x[n * 128 + t] * s.window()[t]).collect();
            for f in 0..cfg.n_bins() {
                let d = direct_dft(&frame, f);
                assert!((spec.data()[f * n_frames + n] - d).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn round_trip_interior() {
        let cfg = StftConfig::new(512).unwrap();
        let s = Stft::new(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_signal(&mut rng, 9000);
        let y = s.synthesize(&s.analyze(&x).unwrap()).unwrap();
        for t in 512..(9000 - 512).min(y.len()) {
            assert!((x[t] - y[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_bin_synthesis_matches_closed_form() {
        let cfg = StftConfig::new(32).unwrap();
        let s = Stft::new(cfg);
        let n_frames = 5;
        let (f0, n0) = (3, 2);
        let amp = C64::new(0.7, -0.4);
        let mut spec = CTensor::zeros(&[cfg.n_bins(), n_frames]);
        spec.data_mut()[f0 * n_frames + n0] = amp;
        let y = s.synthesize(&spec).unwrap();
        let norm = s.synthesis_norm(n_frames);
        for (t, yt) in y.iter().enumerate() {
            let tau = t as isize - (n0 * 16) as isize;
            let expected = if (0..32).contains(&tau) {
                let tau = tau as usize;
                let burst = 2.0 / 32.0 * (amp * C64::from_polar(1.0, 2.0 * PI * (f0 * tau) as f64 / 32.0)).re;
                s.window()[tau] * burst / norm[t]
            } else {
                0.0
            };
            assert!((yt - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn linearity() {
        let s = Stft::new(StftConfig::new(128).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_signal(&mut rng, 2000);
        let y = random_signal(&mut rng, 2000);
        let (a, b) = (1.7, -0.3);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let (sx, sy, sm) = (s.analyze(&x).unwrap(), s.analyze(&y).unwrap(), s.analyze(&mix).unwrap());
        for i in 0..sm.len() {
            assert!((sm.data()[i] - (sx.data()[i] * a + sy.data()[i] * b)).norm() < 1e-10);
        }
    }

    #[test]
    fn adjoint_identity() {
        // <synth(Y), g> = <Y, adj(g)> on real coordinates
        let s = Stft::new(StftConfig::new(16).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n_frames = 6;
        let data: Vec<C64> = (0..9 * n_frames).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let spec = CTensor::from_vec(&[9, n_frames], data).unwrap();
        let y = s.synthesize(&spec).unwrap();
        let g = random_signal(&mut rng, y.len());
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let adj = s.synthesize_adjoint(&g, n_frames).unwrap();
        let rhs: f64 = spec.data().iter().zip(adj.data()).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
