//! Synthetic multichannel mixtures and on-disk datasets.
//!
//! Every item draws from its own ChaCha8 stream, selected by the item index
//! on a generator seeded with the dataset seed, so items can be generated
//! in any order with identical results.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.jsonl            one JSON record per item
//! items/<id>_mix.wav        M-channel mixture
//! items/<id>_ref<k>.wav     image of source k at microphone 0
//! ```

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stft::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::wav::{read_wav, write_wav, WavFormat};

pub const MAX_CONDITION: f64 = 20.0;
const TAIL_GAIN: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mixing {
    Instantaneous,
    /// Random FIR per microphone/source pair; `decay` in samples.
    ConvolutiveFir { taps: usize, decay: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "dir", rename_all = "snake_case")]
pub enum SourceKind {
    SyntheticSpeechLike,
    /// White noise under a lognormal envelope held for 16 ms blocks.
    SuperGaussian,
    WavPool(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub n_sources: usize,
    pub mixing: Mixing,
    /// Power of each further source relative to the first, in dB.
    pub relative_snr_db: (f64, f64),
    /// Signal-to-noise ratio of the additive white noise; `None` disables it.
    pub noise_snr_db: Option<(f64, f64)>,
    pub source_kind: SourceKind,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            n_sources: 2,
            mixing: Mixing::ConvolutiveFir { taps: 64, decay: 12.0 },
            relative_snr_db: (-5.0, 5.0),
            noise_snr_db: Some((10.0, 30.0)),
            source_kind: SourceKind::SyntheticSpeechLike,
            duration_s: 1.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
            seed: 0,
        }
    }
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if self.n_sources < 2 {
            return Err(Error::Config(format!("need at least 2 sources, got {}", self.n_sources)));
        }
        if let Mixing::ConvolutiveFir { taps, decay } = self.mixing {
            if taps == 0 || !(decay > 0.0) {
                return Err(Error::Config(format!("FIR needs taps >= 1 and decay > 0, got {taps} and {decay}")));
            }
        }
        if !ordered(self.relative_snr_db) || !self.noise_snr_db.map_or(true, ordered) {
            return Err(Error::Config("SNR ranges must be finite and ordered".into()));
        }
        if !(self.duration_s > 0.0) || self.sample_rate == 0 || self.n_samples() == 0 {
            return Err(Error::Config(format!("duration {} s at {} Hz is empty", self.duration_s, self.sample_rate)));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }

    /// Generator for item `index`.
    pub fn item_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn mean_power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// RBJ band-pass biquad with unit peak gain.
fn bandpass(x: &[f64], center: f64, q: f64, sr: f64) -> Vec<f64> {
    let w0 = 2.0 * PI * center / sr;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    x.iter()
        .map(|&v| {
            let y = b0 * v + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = v;
            y2 = y1;
            y1 = y;
            y
        })
        .collect()
}

fn formant_gain(freq: f64, formants: &[(f64, f64)]) -> f64 {
    0.05 + formants.iter().map(|(c, bw)| 1.0 / (1.0 + ((freq - c) / bw).powi(2))).sum::<f64>()
}

/// Voiced, unvoiced and silent segments with lognormal gains.
fn speech_like<R: Rng>(len: usize, sr: f64, rng: &mut R) -> Vec<f64> {
    let gain = LogNormal::new(0.0, 0.8).expect("valid lognormal");
    let mut out = vec![0.0; len];
    let mut start = 0;
    let fade = (0.01 * sr) as usize;
    while start < len {
        let seg = ((rng.gen_range(0.08..0.3) * sr) as usize).max(1).min(len - start);
        let kind: f64 = rng.gen();
        let g: f64 = gain.sample(rng);
        let mut buf = vec![0.0; seg];
        if kind < 0.5 {
            let f0 = rng.gen_range(90.0..250.0);
            let glide = rng.gen_range(-0.1..0.1);
            let formants: Vec<(f64, f64)> = [(300.0, 900.0), (900.0, 2500.0), (2300.0, 3500.0)]
                .iter()
                .map(|&(lo, hi)| (rng.gen_range(lo..hi), rng.gen_range(80.0..200.0)))
                .collect();
            let n_harm = (4000.0 / f0) as usize;
            for h in 1..=n_harm {
                let amp = formant_gain(h as f64 * f0, &formants) / (h as f64).sqrt();
                let mut phase = rng.gen_range(0.0..2.0 * PI);
                for (t, b) in buf.iter_mut().enumerate() {
                    let f = h as f64 * f0 * (1.0 + glide * t as f64 / seg as f64);
                    phase += 2.0 * PI * f / sr;
                    *b += amp * phase.sin();
                }
            }
        } else if kind < 0.7 {
            let noise: Vec<f64> = (0..seg).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            buf = bandpass(&noise, rng.gen_range(2500.0..6000.0), rng.gen_range(1.0..3.0), sr);
        }
        let p = mean_power(&buf);
        if p > 0.0 {
            let s = g / p.sqrt();
            for (t, b) in buf.iter_mut().enumerate() {
                let edge = t.min(seg - 1 - t);
                let ramp = if edge < fade { 0.5 - 0.5 * (PI * edge as f64 / fade as f64).cos() } else { 1.0 };
                out[start + t] = *b * s * ramp;
            }
        }
        start += seg;
    }
    out
}

fn super_gaussian<R: Rng>(len: usize, sr: f64, rng: &mut R) -> Vec<f64> {
    let block = ((0.016 * sr) as usize).max(1);
    let env = LogNormal::new(0.0, 1.5).expect("valid lognormal");
    let mut gain = 1.0;
    (0..len)
        .map(|t| {
            if t % block == 0 {
                gain = env.sample(rng);
            }
            gain * rng.sample::<f64, _>(StandardNormal)
        })
        .collect()
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

/// Draws `spec.n_sources` independent sources; the first has unit average
/// power and the others are scaled by a random relative SNR.
pub fn synth_sources<R: Rng>(spec: &MixtureSpec, rng: &mut R) -> Result<Vec<Waveform>> {
    spec.validate()?;
    let len = spec.n_samples();
    let sr = spec.sample_rate as f64;
    let mut raw: Vec<Vec<f64>> = match &spec.source_kind {
        SourceKind::SyntheticSpeechLike => (0..spec.n_sources)
            .map(|_| loop {
                // short draws can come out entirely silent
                let s = speech_like(len, sr, rng);
                if mean_power(&s) > 0.0 {
                    break s;
                }
            })
            .collect(),
        SourceKind::SuperGaussian => (0..spec.n_sources).map(|_| super_gaussian(len, sr, rng)).collect(),
        SourceKind::WavPool(dir) => {
            let files = wav_files(dir)?;
            if files.len() < spec.n_sources {
                return Err(Error::PoolTooSmall { available: files.len(), needed: spec.n_sources });
            }
            files
                .choose_multiple(rng, spec.n_sources)
                .map(|path| {
                    let wav = read_wav(path)?;
                    if wav.sample_rate != spec.sample_rate {
                        return Err(Error::Config(format!(
                            "{} is sampled at {} Hz, expected {}",
                            path.display(),
                            wav.sample_rate,
                            spec.sample_rate
                        )));
                    }
                    let mono = wav.channels.into_iter().next().unwrap_or_default();
                    if mono.is_empty() {
                        return Err(Error::Config(format!("{} is empty", path.display())));
                    }
                    Ok(mono.iter().cycle().take(len).copied().collect())
                })
                .collect::<Result<_>>()?
        }
    };
    for (k, s) in raw.iter_mut().enumerate() {
        let p = mean_power(s);
        if p <= 0.0 {
            return Err(Error::Config(format!("source {k} is silent")));
        }
        let target_db = if k == 0 { 0.0 } else { uniform(rng, spec.relative_snr_db) };
        let gain = (10f64.powf(target_db / 10.0) / p).sqrt();
        s.iter_mut().for_each(|v| *v *= gain);
    }
    Ok(raw.into_iter().map(|s| Waveform::new(s, spec.sample_rate)).collect())
}

/// Mixing filters `h[mic][src]`, first tap carrying the instantaneous gain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingFilters {
    pub taps: Vec<Vec<Vec<f64>>>,
}

impl MixingFilters {
    pub fn identity(m: usize) -> Self {
        Self { taps: (0..m).map(|i| (0..m).map(|j| vec![if i == j { 1.0 } else { 0.0 }]).collect()).collect() }
    }

    fn draw<R: Rng>(m: usize, mixing: &Mixing, rng: &mut R) -> Self {
        let a = loop {
            let a: Vec<f64> = (0..m * m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let sv = DMatrix::from_row_slice(m, m, &a).singular_values();
            let (hi, lo) = (sv.max(), sv.min());
            if lo > 0.0 && hi / lo <= MAX_CONDITION {
                break a;
            }
        };
        let (len, decay) = match mixing {
            Mixing::Instantaneous => (1, 1.0),
            Mixing::ConvolutiveFir { taps, decay } => (*taps, *decay),
        };
        let rms = (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
        let taps = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| {
                        let mut h = vec![a[i * m + j]];
                        for t in 1..len {
                            let n: f64 = rng.sample(StandardNormal);
                            h.push(TAIL_GAIN * rms * n * (-(t as f64) / decay).exp());
                        }
                        h
                    })
                    .collect()
            })
            .collect();
        Self { taps }
    }
}

fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (k, &c) in h.iter().enumerate().filter(|(_, c)| **c != 0.0) {
        for (o, v) in out[k.min(x.len())..].iter_mut().zip(x) {
            *o += c * v;
        }
    }
    out
}

/// Mixture channels, references, and the parameters used.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub channels: Vec<Vec<f64>>,
    /// Image of each source at microphone 0.
    pub refs: Vec<Vec<f64>>,
    pub filters: MixingFilters,
    /// Realized noise SNR, if noise was added.
    pub noise_snr_db: Option<f64>,
}

/// Source images through `filters` plus white noise at an exact SNR.
pub fn mix_with<R: Rng>(sources: &[Waveform], filters: &MixingFilters, noise_snr_db: Option<f64>, rng: &mut R) -> Result<Mixture> {
    let m = sources.len();
    let len = sources.first().map_or(0, Waveform::len);
    if m == 0 || sources.iter().any(|s| s.len() != len) || filters.taps.len() != m {
        return Err(Error::ShapeMismatch("sources must share one length and match the filter bank".into()));
    }
    let mut channels = vec![vec![0.0; len]; m];
    let mut refs = Vec::with_capacity(m);
    for (i, ch) in channels.iter_mut().enumerate() {
        for (j, s) in sources.iter().enumerate() {
            let img = convolve(&s.samples, &filters.taps[i][j]);
            ch.iter_mut().zip(&img).for_each(|(a, b)| *a += b);
            if i == 0 {
                refs.push(img);
            }
        }
    }
    if let Some(snr) = noise_snr_db {
        let signal: f64 = channels.iter().map(|c| mean_power(c)).sum::<f64>() / m as f64;
        let noise: Vec<Vec<f64>> =
            (0..m).map(|_| (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
        let drawn: f64 = noise.iter().map(|c| mean_power(c)).sum::<f64>() / m as f64;
        let gain = (signal / drawn / 10f64.powf(snr / 10.0)).sqrt();
        for (ch, nz) in channels.iter_mut().zip(&noise) {
            ch.iter_mut().zip(nz).for_each(|(a, b)| *a += gain * b);
        }
    }
    Ok(Mixture { channels, refs, filters: filters.clone(), noise_snr_db })
}

/// Mixes sources with freshly drawn filters and noise level.
pub fn mix<R: Rng>(sources: &[Waveform], spec: &MixtureSpec, rng: &mut R) -> Result<Mixture> {
    let filters = MixingFilters::draw(sources.len(), &spec.mixing, rng);
    let snr = spec.noise_snr_db.map(|r| uniform(rng, r));
    mix_with(sources, &filters, snr, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Item counts per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// 90/5/5 proportions, validation and test rounded down.
    pub fn proportional(n: usize) -> Self {
        let val = n * 5 / 100;
        let test = n * 5 / 100;
        Self { train: n - val - test, val, test }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    /// Paths relative to the manifest directory.
    pub mix_path: String,
    pub ref_paths: Vec<String>,
    #[serde(rename = "M")]
    pub m: usize,
    pub seed: u64,
    pub sample_rate: u32,
    pub mixing: Mixing,
    pub noise_snr_db: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Loaded item: mixture channels and references.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub channels: Vec<Vec<f64>>,
    pub refs: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

impl DatasetManifest {
    /// Reads `manifest.jsonl` from a dataset directory or a manifest path.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut records = Vec::new();
        for line in BufReader::new(fs::File::open(&file)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { root, records })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn load_item(&self, record: &ManifestRecord) -> Result<DatasetItem> {
        let mix = read_wav(self.root.join(&record.mix_path))?;
        let refs = record
            .ref_paths
            .iter()
            .map(|p| Ok(read_wav(self.root.join(p))?.channels.into_iter().next().unwrap_or_default()))
            .collect::<Result<Vec<_>>>()?;
        if mix.channels.len() != record.m || refs.len() != record.m {
            return Err(Error::ShapeMismatch(format!("item {} does not have {} channels", record.id, record.m)));
        }
        Ok(DatasetItem { channels: mix.channels, refs, sample_rate: mix.sample_rate })
    }
}

/// Generates `counts.total()` items into `out_dir` and writes the manifest.
pub fn make_dataset(spec: &MixtureSpec, counts: SplitCounts, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    spec.validate()?;
    let root = out_dir.as_ref().to_path_buf();
    fs::create_dir_all(root.join("items"))?;
    let mut records = Vec::with_capacity(counts.total());
    for index in 0..counts.total() {
        let mut rng = spec.item_rng(index as u64);
        let sources = synth_sources(spec, &mut rng)?;
        let mixture = mix(&sources, spec, &mut rng)?;
        let id = format!("item{index:05}");
        let mix_path = format!("items/{id}_mix.wav");
        write_wav(root.join(&mix_path), &mixture.channels, spec.sample_rate, WavFormat::Float32)?;
        let mut ref_paths = Vec::with_capacity(spec.n_sources);
        for (k, r) in mixture.refs.iter().enumerate() {
            let p = format!("items/{id}_ref{k}.wav");
            write_wav(root.join(&p), std::slice::from_ref(r), spec.sample_rate, WavFormat::Float32)?;
            ref_paths.push(p);
        }
        records.push(ManifestRecord {
            id,
            split: counts.split_of(index),
            mix_path,
            ref_paths,
            m: spec.n_sources,
            seed: spec.seed,
            sample_rate: spec.sample_rate,
            mixing: spec.mixing.clone(),
            noise_snr_db: mixture.noise_snr_db,
        });
    }
    let mut out = fs::File::create(root.join(MANIFEST_NAME))?;
    for r in &records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    Ok(DatasetManifest { root, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> MixtureSpec {
        MixtureSpec { duration_s: 0.5, seed: 3, ..MixtureSpec::default() }
    }

    fn kurtosis(x: &[f64]) -> f64 {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
        x.iter().map(|a| (a - m).powi(4)).sum::<f64>() / n / (v * v) - 3.0
    }

    #[test]
    fn equal_power_at_zero_db() {
        let s = MixtureSpec { relative_snr_db: (0.0, 0.0), ..spec() };
        let src = synth_sources(&s, &mut s.item_rng(0)).unwrap();
        for w in &src {
            assert!((mean_power(&w.samples) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sources_are_reproducible_and_heavy_tailed() {
        for kind in [SourceKind::SyntheticSpeechLike, SourceKind::SuperGaussian] {
            let s = MixtureSpec { duration_s: 10.0, source_kind: kind, ..spec() };
            let a = synth_sources(&s, &mut s.item_rng(4)).unwrap();
            let b = synth_sources(&s, &mut s.item_rng(4)).unwrap();
            assert_eq!(a, b);
            for w in &a {
                assert!(kurtosis(&w.samples) > 0.0);
            }
        }
    }

    #[test]
    fn identity_mixing_passes_sources_through() {
        let s = spec();
        let src = synth_sources(&s, &mut s.item_rng(1)).unwrap();
        let m = mix_with(&src, &MixingFilters::identity(2), None, &mut s.item_rng(2)).unwrap();
        for k in 0..2 {
            assert_eq!(m.channels[k], src[k].samples);
        }
        assert_eq!(m.refs[0], src[0].samples);
        assert!(m.refs[1].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn noise_hits_requested_snr() {
        let s = spec();
        let src = synth_sources(&s, &mut s.item_rng(1)).unwrap();
        let clean = mix_with(&src, &MixingFilters::identity(2), None, &mut s.item_rng(2)).unwrap();
        let noisy = mix_with(&src, &MixingFilters::identity(2), Some(20.0), &mut s.item_rng(2)).unwrap();
        let ps: f64 = clean.channels.iter().map(|c| mean_power(c)).sum();
        let pn: f64 = clean
            .channels
            .iter()
            .zip(&noisy.channels)
            .map(|(a, b)| mean_power(&a.iter().zip(b).map(|(x, y)| y - x).collect::<Vec<_>>()))
            .sum();
        assert!((10.0 * (ps / pn).log10() - 20.0).abs() < 0.1);
    }

    #[test]
    fn single_tap_fir_is_instantaneous() {
        let inst = MixtureSpec { mixing: Mixing::Instantaneous, ..spec() };
        let fir = MixtureSpec { mixing: Mixing::ConvolutiveFir { taps: 1, decay: 5.0 }, ..spec() };
        let src = synth_sources(&inst, &mut inst.item_rng(0)).unwrap();
        let a = mix(&src, &inst, &mut inst.item_rng(9)).unwrap();
        let b = mix(&src, &fir, &mut fir.item_rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn instantaneous_mixing_is_well_conditioned() {
        let s = MixtureSpec { mixing: Mixing::Instantaneous, n_sources: 3, ..spec() };
        for i in 0..20 {
            let f = MixingFilters::draw(3, &s.mixing, &mut s.item_rng(i));
            let a: Vec<f64> = f.taps.iter().flat_map(|row| row.iter().map(|h| h[0])).collect();
            let sv = DMatrix::from_row_slice(3, 3, &a).singular_values();
            assert!(sv.max() / sv.min() <= MAX_CONDITION);
        }
    }

    #[test]
    fn convolution_matches_direct_sum() {
        let x = [1.0, 2.0, -1.0, 0.5];
        let h = [0.5, 0.0, 2.0];
        assert_eq!(convolve(&x, &h), vec![0.5, 1.0, 1.5, 4.25]);
    }

    #[test]
    fn split_counts_round_toward_train() {
        assert_eq!(SplitCounts::proportional(10), SplitCounts { train: 10, val: 0, test: 0 });
        assert_eq!(SplitCounts::proportional(100), SplitCounts { train: 90, val: 5, test: 5 });
        assert_eq!(SplitCounts::proportional(39), SplitCounts { train: 37, val: 1, test: 1 });
    }

    #[test]
    fn dataset_is_deterministic() {
        let s = MixtureSpec { duration_s: 0.2, ..spec() };
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let counts = SplitCounts { train: 3, val: 1, test: 1 };
        let m1 = make_dataset(&s, counts, d1.path()).unwrap();
        make_dataset(&s, counts, d2.path()).unwrap();
        assert_eq!(m1.records.len(), 5);
        let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
        assert_eq!(read(d1.path(), MANIFEST_NAME), read(d2.path(), MANIFEST_NAME));
        for r in &m1.records {
            assert_eq!(read(d1.path(), &r.mix_path), read(d2.path(), &r.mix_path));
        }
        let loaded = DatasetManifest::load(d1.path()).unwrap();
        assert_eq!(loaded.records, m1.records);
        assert_eq!(loaded.split(Split::Val).count(), 1);
        let item = loaded.load_item(&loaded.records[0]).unwrap();
        assert_eq!(item.channels.len(), 2);
        assert_eq!(item.refs[0].len(), s.n_samples());
    }

    #[test]
    fn pool_too_small() {
        let dir = tempfile::tempdir().unwrap();
        write_wav(dir.path().join("a.wav"), &[vec![0.1; 100]], 16_000, WavFormat::Float32).unwrap();
        let s = MixtureSpec { source_kind: SourceKind::WavPool(dir.path().to_path_buf()), ..spec() };
        assert!(matches!(synth_sources(&s, &mut s.item_rng(0)), Err(Error::PoolTooSmall { available: 1, needed: 2 })));
    }
}
