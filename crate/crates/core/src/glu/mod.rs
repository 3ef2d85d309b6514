//! GLU surrogate weight network.
//!
//! Pipeline for one source spectrogram `Y: [F × N]`:
//! `log(|Y| + 1e-6)` → GLU block (F → H) → GLU block (H → H) → dropout →
//! GLU block (H → H) → transposed convolution (H → F) → softplus → `+ 1e-6`.
//! Frequency bins are convolution channels; every convolution runs along
//! time with kernel 3 and zero padding, so `N` is preserved.

pub mod archive;
pub mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CTensor, RTensor};
use crate::source_models::WEIGHT_FLOOR;
use layers::{BatchStats, KERNEL};

pub const DEFAULT_HIDDEN: usize = 128;
pub const DEFAULT_DROPOUT: f64 = 0.5;
pub const LOG_MAG_EPS: f64 = 1e-6;

/// Which statistics the normalization layers use outside of training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Stored running statistics.
    #[default]
    Running,
    /// Statistics of the current input along time, as during training.
    Input,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: RTensor,
    pub bias: RTensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub running_mean: RTensor,
    pub running_var: RTensor,
    pub scale: RTensor,
    pub shift: RTensor,
}

impl NormParams {
    fn unit(ch: usize) -> Self {
        Self {
            running_mean: RTensor::zeros(&[ch]),
            running_var: RTensor::from_vec(&[ch], vec![1.0; ch]).unwrap(),
            scale: RTensor::from_vec(&[ch], vec![1.0; ch]).unwrap(),
            shift: RTensor::zeros(&[ch]),
        }
    }

    /// Folds one batch into the running statistics.
    pub fn update_running(&mut self, stats: &BatchStats, n: usize, momentum: f64) {
        let unbiased = stats.unbiased_var(n);
        for (r, m) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(&unbiased) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GluBlockParams {
    pub lin: ConvParams,
    pub gate: ConvParams,
    pub lin_norm: NormParams,
    pub gate_norm: NormParams,
}

impl GluBlockParams {
    fn zeros(c_in: usize, c_out: usize) -> Self {
        let conv = || ConvParams {
            weight: RTensor::zeros(&[c_out, c_in, KERNEL]),
            bias: RTensor::zeros(&[c_out]),
        };
        Self { lin: conv(), gate: conv(), lin_norm: NormParams::unit(c_out), gate_norm: NormParams::unit(c_out) }
    }

    pub fn c_in(&self) -> usize {
        self.lin.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.lin.weight.shape()[0]
    }
}

/// Parameters of the weight network. Shapes are fixed by `f_in` and `hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct GluParameters {
    pub f_in: usize,
    pub hidden: usize,
    pub blocks: [GluBlockParams; 3],
    /// Transposed convolution, weight `[hidden × f_in × 3]`, bias `[f_in]`.
    pub deconv: ConvParams,
    pub dropout_rate: f64,
    pub norm_mode: NormMode,
}

fn uniform_fill<R: Rng>(t: &mut RTensor, bound: f64, rng: &mut R) {
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
}

impl GluParameters {
    /// All-zero convolutions with unit normalization statistics.
    pub fn zeros(f_in: usize, hidden: usize) -> Self {
        Self {
            f_in,
            hidden,
            blocks: [
                GluBlockParams::zeros(f_in, hidden),
                GluBlockParams::zeros(hidden, hidden),
                GluBlockParams::zeros(hidden, hidden),
            ],
            deconv: ConvParams { weight: RTensor::zeros(&[hidden, f_in, KERNEL]), bias: RTensor::zeros(&[f_in]) },
            dropout_rate: DEFAULT_DROPOUT,
            norm_mode: NormMode::default(),
        }
    }

    /// Uniform fan-in initialization of all convolutions.
    pub fn init<R: Rng>(f_in: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(f_in, hidden);
        for block in &mut p.blocks {
            let bound = 1.0 / ((block.c_in() * KERNEL) as f64).sqrt();
            for conv in [&mut block.lin, &mut block.gate] {
                uniform_fill(&mut conv.weight, bound, rng);
                uniform_fill(&mut conv.bias, bound, rng);
            }
        }
        let bound = 1.0 / ((hidden * KERNEL) as f64).sqrt();
        uniform_fill(&mut p.deconv.weight, bound, rng);
        uniform_fill(&mut p.deconv.bias, bound, rng);
        p
    }

    /// Every tensor with its archive name, in archive order.
    pub fn named_tensors(&self) -> Vec<(String, &RTensor)> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            let pre = format!("block{}", b + 1);
            out.push((format!("{pre}.lin_conv"), &block.lin.weight));
            out.push((format!("{pre}.lin_bias"), &block.lin.bias));
            out.push((format!("{pre}.gate_conv"), &block.gate.weight));
            out.push((format!("{pre}.gate_bias"), &block.gate.bias));
            for (path, norm) in [("lin_norm", &block.lin_norm), ("gate_norm", &block.gate_norm)] {
                out.push((format!("{pre}.{path}.running_mean"), &norm.running_mean));
                out.push((format!("{pre}.{path}.running_var"), &norm.running_var));
                out.push((format!("{pre}.{path}.scale"), &norm.scale));
                out.push((format!("{pre}.{path}.shift"), &norm.shift));
            }
        }
        out.push(("deconv.weight".into(), &self.deconv.weight));
        out.push(("deconv.bias".into(), &self.deconv.bias));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut RTensor)> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter_mut().enumerate() {
            let pre = format!("block{}", b + 1);
            out.push((format!("{pre}.lin_conv"), &mut block.lin.weight));
            out.push((format!("{pre}.lin_bias"), &mut block.lin.bias));
            out.push((format!("{pre}.gate_conv"), &mut block.gate.weight));
            out.push((format!("{pre}.gate_bias"), &mut block.gate.bias));
            for (path, norm) in [("lin_norm", &mut block.lin_norm), ("gate_norm", &mut block.gate_norm)] {
                out.push((format!("{pre}.{path}.running_mean"), &mut norm.running_mean));
                out.push((format!("{pre}.{path}.running_var"), &mut norm.running_var));
                out.push((format!("{pre}.{path}.scale"), &mut norm.scale));
                out.push((format!("{pre}.{path}.shift"), &mut norm.shift));
            }
        }
        out.push(("deconv.weight".into(), &mut self.deconv.weight));
        out.push(("deconv.bias".into(), &mut self.deconv.bias));
        out
    }

    fn is_trainable(name: &str) -> bool {
        !name.contains("running_")
    }

    /// Trainable tensors (convolutions, biases, normalization scale/shift).
    pub fn trainable(&self) -> Vec<(String, &RTensor)> {
        self.named_tensors().into_iter().filter(|(n, _)| Self::is_trainable(n)).collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut RTensor)> {
        self.named_tensors_mut().into_iter().filter(|(n, _)| Self::is_trainable(n)).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flat_trainable(&self) -> Vec<f64> {
        self.trainable().iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    pub fn set_flat_trainable(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} trainable parameters",
                flat.len(),
                self.parameter_count()
            )));
        }
        let mut off = 0;
        for (_, t) in self.trainable_mut() {
            let len = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(())
    }

    /// Checks shapes against the architecture plus the value invariants.
    pub fn validate(&self) -> Result<()> {
        let reference = Self::zeros(self.f_in, self.hidden);
        for ((name, t), (_, r)) in self.named_tensors().into_iter().zip(reference.named_tensors()) {
            if t.shape() != r.shape() {
                return Err(Error::ShapeMismatch(format!("{name}: {:?}, expected {:?}", t.shape(), r.shape())));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
            if name.ends_with("running_var") && t.data().iter().any(|v| *v <= 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Applies one GLU block with fixed (running) statistics or input statistics.
pub fn glu_block(x: &[f64], n: usize, p: &GluBlockParams, use_input_stats: bool) -> Result<Vec<f64>> {
    let (c_in, c_out) = (p.c_in(), p.c_out());
    if x.len() != c_in * n || n == 0 {
        return Err(Error::ShapeMismatch(format!("glu block input {} values, expected {c_in} × {n}", x.len())));
    }
    let lin = layers::conv1d(x, c_in, n, p.lin.weight.data(), p.lin.bias.data(), c_out);
    let gate = layers::conv1d(x, c_in, n, p.gate.weight.data(), p.gate.bias.data(), c_out);
    let norm = |v: &[f64], np: &NormParams| {
        if use_input_stats {
            layers::norm_batch(v, n, np.scale.data(), np.shift.data()).0
        } else {
            layers::norm_fixed(v, n, np.running_mean.data(), np.running_var.data(), np.scale.data(), np.shift.data())
        }
    };
    let lin = norm(&lin, &p.lin_norm);
    let gate = norm(&gate, &p.gate_norm);
    Ok(lin.iter().zip(&gate).map(|(a, g)| a * layers::sigmoid(*g)).collect())
}

pub fn log_magnitude(y: &CTensor) -> Vec<f64> {
    y.data().iter().map(|z| (z.norm() + LOG_MAG_EPS).ln()).collect()
}

/// Inverted-dropout mask: zeros with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask<R: Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect()
}

/// Network forward pass for one source spectrogram `[F × N]`.
///
/// In training mode normalization uses input statistics and dropout draws
/// from `rng`; otherwise the pass is deterministic and `rng` is unused.
pub fn glu_forward<R: Rng>(params: &GluParameters, y: &CTensor, training: bool, rng: &mut R) -> Result<RTensor> {
    let (f, n) = match y.shape() {
        [f, n] => (*f, *n),
        s => return Err(Error::ShapeMismatch(format!("glu input shape {s:?}"))),
    };
    if f != params.f_in {
        return Err(Error::ShapeMismatch(format!("glu input has {f} bins, network expects {}", params.f_in)));
    }
    if n == 0 {
        return Err(Error::ShapeMismatch("glu input has no frames".into()));
    }
    let input_stats = training || params.norm_mode == NormMode::Input;
    let x = log_magnitude(y);
    let h = glu_block(&x, n, &params.blocks[0], input_stats)?;
    let mut h = glu_block(&h, n, &params.blocks[1], input_stats)?;
    if training && params.dropout_rate > 0.0 {
        let mask = dropout_mask(h.len(), params.dropout_rate, rng);
        h.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
    }
    let h = glu_block(&h, n, &params.blocks[2], input_stats)?;
    let z = layers::conv_transpose1d(&h, params.hidden, n, params.deconv.weight.data(), params.deconv.bias.data(), f);
    let out: Vec<f64> = z.iter().map(|v| layers::softplus(*v) + WEIGHT_FLOOR).collect();
    RTensor::from_vec(&[f, n], out)
}
