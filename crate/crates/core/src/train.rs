//! Adam with decoupled weight decay, percentile gradient clipping, and the
//! epoch loop that trains the weight network through unrolled separation.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glu::archive::save_to_file;
use crate::glu::{GluParameters, DEFAULT_DROPOUT};
use crate::eval::{median, separate_item};
use crate::iva::Algorithm;
use crate::mixsim::{DatasetItem, DatasetManifest, Split};
use crate::post::pit_si_sdr;
use crate::source_models::SourceModel;
use crate::stft::{Stft, StftConfig};
use crate::unroll::{build_sample_graph, Loss, TrainingSample, UnrollConfig};

/// Momentum of the running normalization statistics.
pub const NORM_MOMENTUM: f64 = 0.1;
/// Fraction of skipped samples in one epoch that aborts training.
pub const MAX_SKIP_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: Loss,
    pub n_iters_unrolled: usize,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub autoclip_percentile: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Training excerpts are cut to this length; `None` keeps whole items.
    pub sample_length_s: Option<f64>,
    pub max_epochs: usize,
    pub seed: u64,
    pub frame_size: usize,
    pub hidden: usize,
    pub dropout_rate: f64,
    pub stop_gradient_on_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: Loss::SiSdr,
            n_iters_unrolled: 20,
            learning_rate: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            autoclip_percentile: 10.0,
            weight_decay: 5e-5,
            batch_size: 1,
            sample_length_s: Some(6.0),
            max_epochs: 30,
            seed: 0,
            frame_size: crate::stft::DEFAULT_FRAME_SIZE,
            hidden: crate::glu::DEFAULT_HIDDEN,
            dropout_rate: DEFAULT_DROPOUT,
            stop_gradient_on_weights: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_iters_unrolled == 0 {
            return bad("n_iters_unrolled must be at least 1".into());
        }
        if !(self.autoclip_percentile > 0.0 && self.autoclip_percentile <= 100.0) {
            return bad(format!("autoclip percentile {} outside (0, 100]", self.autoclip_percentile));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return bad("learning rate and weight decay must be >= 0, eps > 0".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("Adam betas {:?} outside [0, 1)", self.betas));
        }
        if self.batch_size == 0 || self.hidden == 0 {
            return bad("batch size and hidden width must be positive".into());
        }
        if self.sample_length_s.is_some_and(|s| !(s > 0.0)) {
            return bad("sample length must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        StftConfig::new(self.frame_size).map(|_| ())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, betas: self.betas, eps: self.eps, weight_decay: self.weight_decay }
    }
}

/// Observed global gradient norms and the clipping percentile.
#[derive(Clone, Debug, PartialEq)]
pub struct GradClipState {
    history: Vec<f64>,
    pub percentile: f64,
}

impl GradClipState {
    pub fn new(percentile: f64) -> Self {
        Self { history: Vec::new(), percentile }
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn observe(&mut self, norm: f64) {
        self.history.push(norm.max(0.0));
    }

    /// Records `‖g‖`, then rescales `g` to at most the current threshold.
    /// Returns the applied factor.
    pub fn clip(&mut self, grad: &mut [f64]) -> Result<f64> {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        self.observe(norm);
        let threshold = autoclip_threshold(self)?;
        let factor = if norm > threshold { threshold / norm } else { 1.0 };
        grad.iter_mut().for_each(|g| *g *= factor);
        Ok(factor)
    }
}

/// Linear-interpolation percentile of the observed norms.
pub fn autoclip_threshold(state: &GradClipState) -> Result<f64> {
    if state.history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let mut sorted = state.history.clone();
    sorted.sort_by(f64::total_cmp);
    let rank = state.percentile / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One Adam step with bias correction; weight decay is applied to the
/// parameters before the adaptive update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch(format!("{} parameters, {} gradients", params.len(), grads.len())));
    }
    state.t += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] = params[i] * decay - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub loss_name: String,
    pub value: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogRecord>,
    /// Median validation PIT SI-SDR after each epoch, epoch 0 first.
    pub validation: Vec<f64>,
    pub best_epoch: usize,
    pub params: GluParameters,
}

impl TrainReport {
    pub fn best_validation(&self) -> f64 {
        self.validation[self.best_epoch]
    }
}

fn trim(x: &[f64], len: Option<usize>) -> Vec<f64> {
    match len {
        Some(l) if l < x.len() => x[..l].to_vec(),
        _ => x.to_vec(),
    }
}

fn training_sample(item: &DatasetItem, stft: &Stft, len: Option<usize>) -> Result<TrainingSample> {
    let channels: Vec<Vec<f64>> = item.channels.iter().map(|c| trim(c, len)).collect();
    let refs = item.refs.iter().map(|r| trim(r, len)).collect();
    TrainingSample::new(&channels, refs, stft)
}

fn validate_model(items: &[DatasetItem], params: &GluParameters, cfg: &TrainConfig, stft: &Stft) -> Result<f64> {
    let model = SourceModel::glu(params.clone())?;
    let scores = items
        .iter()
        .map(|it| {
            let ests = separate_item(it, &model, Algorithm::Iss, cfg.n_iters_unrolled, stft)?;
            Ok(pit_si_sdr(&ests, &it.refs)?.value)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(median(&scores))
}

/// Trains the weight network on the `train` split, selecting the epoch with
/// the best median validation PIT SI-SDR. The selected parameters are
/// written to `archive`; the log, if requested, as line-delimited JSON.
pub fn train(manifest: &DatasetManifest, cfg: &TrainConfig, archive: &Path, log_path: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    let stft = Stft::new(StftConfig::new(cfg.frame_size)?);
    let load = |split: Split| -> Result<Vec<DatasetItem>> {
        manifest.split(split).map(|r| manifest.load_item(r)).collect()
    };
    let (train_items, val_items) = (load(Split::Train)?, load(Split::Val)?);
    if train_items.is_empty() || val_items.is_empty() {
        return Err(Error::Config("training needs non-empty train and val splits".into()));
    }
    if let Some(bad) = train_items.iter().chain(&val_items).find(|it| it.channels.len() != 2) {
        return Err(Error::Config(format!("training uses two-source mixtures, found {}", bad.channels.len())));
    }
    let sr = train_items[0].sample_rate as f64;
    let len = cfg.sample_length_s.map(|s| (s * sr).round() as usize);
    let samples = train_items.iter().map(|it| training_sample(it, &stft, len)).collect::<Result<Vec<_>>>()?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = GluParameters::init(cfg.frame_size / 2 + 1, cfg.hidden, &mut init_rng);
    params.dropout_rate = cfg.dropout_rate;

    let started = Instant::now();
    let mut log = Vec::new();
    let mut log_file = log_path.map(std::fs::File::create).transpose()?;
    let mut emit = |rec: LogRecord| -> Result<()> {
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        log.push(rec);
        Ok(())
    };
    let elapsed = |t: &Instant| t.elapsed().as_millis() as u64;

    let v0 = validate_model(&val_items, &params, cfg, &stft)?;
    emit(LogRecord { epoch: 0, split: "val".into(), loss_name: "pit_si_sdr".into(), value: v0, wall_ms: elapsed(&started) })?;
    save_to_file(&params, archive)?;
    let mut validation = vec![v0];
    let mut best_epoch = 0;
    let mut best_params = params.clone();

    let unroll = UnrollConfig {
        n_iters: cfg.n_iters_unrolled,
        loss: cfg.loss,
        training: true,
        stop_gradient_on_weights: cfg.stop_gradient_on_weights,
    };
    let adam = cfg.adam();
    let mut adam_state = AdamState::new(params.parameter_count());
    let mut clip = GradClipState::new(cfg.autoclip_percentile);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut losses = Vec::with_capacity(samples.len());
        let mut skipped = 0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad = vec![0.0; params.parameter_count()];
            let mut used = 0;
            let mut stats = Vec::new();
            for (i, &idx) in batch.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(((epoch as u64) << 32) | ((b * cfg.batch_size + i) as u64 + 2));
                let step = build_sample_graph(&params, &samples[idx], &stft, &unroll, &mut rng)
                    .and_then(|g| g.gradient().map(|grad| (g.loss_value(), grad, g.stats)));
                match step {
                    Ok((loss, g, s)) if g.iter().all(|v| v.is_finite()) => {
                        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                        losses.push(loss);
                        stats.extend(s);
                        used += 1;
                    }
                    Ok(_) | Err(Error::NonFiniteGradient { .. }) | Err(Error::NonFinite(_)) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            if used == 0 {
                continue;
            }
            grad.iter_mut().for_each(|g| *g /= used as f64);
            clip.clip(&mut grad)?;
            let mut flat = params.flat_trainable();
            adam_step(&mut flat, &grad, &mut adam_state, &adam)?;
            params.set_flat_trainable(&flat)?;
            // a zero learning rate freezes the model, statistics included
            if adam.lr > 0.0 {
                update_running_stats(&mut params, &stats, samples[batch[0]].mixture.shape()[2]);
            }
        }
        if skipped as f64 > MAX_SKIP_FRACTION * samples.len() as f64 {
            return Err(Error::TrainingDegenerate { epoch, skipped, total: samples.len() });
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        emit(LogRecord {
            epoch,
            split: "train".into(),
            loss_name: format!("neg_pit_{}", cfg.loss.name()),
            value: train_loss,
            wall_ms: elapsed(&started),
        })?;
        let v = validate_model(&val_items, &params, cfg, &stft)?;
        emit(LogRecord { epoch, split: "val".into(), loss_name: "pit_si_sdr".into(), value: v, wall_ms: elapsed(&started) })?;
        validation.push(v);
        if v > validation[best_epoch] {
            best_epoch = epoch;
            best_params = params.clone();
            save_to_file(&best_params, archive)?;
        }
    }
    Ok(TrainReport { log, validation, best_epoch, params: best_params })
}

fn update_running_stats(params: &mut GluParameters, calls: &[crate::unroll::CallStats], n: usize) {
    for call in calls {
        for (i, s) in call.iter().enumerate() {
            let block = &mut params.blocks[i / 2];
            let norm = if i % 2 == 0 { &mut block.lin_norm } else { &mut block.gate_norm };
            norm.update_running(s, n, NORM_MOMENTUM);
        }
    }
}
