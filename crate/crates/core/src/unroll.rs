//! Differentiable unrolled separation: GLU weights, ISS iterations, scale
//! restoration and a permutation-invariant loss, recorded on one tape.

use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Gradients, NodeId, Tape, Value};
use crate::error::{Error, Result};
use crate::glu::layers::BatchStats;
use crate::glu::{dropout_mask, GluParameters, NormMode};
use crate::numerics::{CTensor, RTensor};
use crate::stft::Stft;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    SiSdr,
    Coherence,
}

impl Loss {
    pub fn name(self) -> &'static str {
        match self {
            Loss::SiSdr => "sisdr",
            Loss::Coherence => "coherence",
        }
    }
}

impl FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sisdr" | "si-sdr" | "sdr" => Ok(Loss::SiSdr),
            "coherence" | "coh" => Ok(Loss::Coherence),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }
}

/// One training example: mixture spectrogram plus references.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    /// `[M × F × N]` mixture STFT.
    pub mixture: CTensor,
    /// Time-domain source images at the reference channel.
    pub refs: Vec<Vec<f64>>,
    /// STFTs of `refs`, `[M × F × N]`.
    pub ref_specs: CTensor,
    pub ref_channel: usize,
}

impl TrainingSample {
    pub fn new(channels: &[Vec<f64>], refs: Vec<Vec<f64>>, stft: &Stft) -> Result<Self> {
        if channels.len() != refs.len() || channels.is_empty() {
            return Err(Error::ShapeMismatch(format!("{} channels for {} references", channels.len(), refs.len())));
        }
        let spec = |xs: &[Vec<f64>]| -> Result<CTensor> {
            CTensor::stack(&xs.iter().map(|c| stft.analyze(c)).collect::<Result<Vec<_>>>()?)
        };
        Ok(Self { mixture: spec(channels)?, ref_specs: spec(&refs)?, refs, ref_channel: 0 })
    }

    pub fn n_sources(&self) -> usize {
        self.mixture.shape()[0]
    }

    fn reference_channel(&self) -> Result<CTensor> {
        let s = self.mixture.shape();
        CTensor::from_vec(&[s[1], s[2]], self.mixture.outer(self.ref_channel).to_vec())
    }
}

/// Tape nodes holding the trainable tensors, in [`GluParameters::trainable`] order.
#[derive(Clone, Debug)]
pub struct GluHandles {
    ids: Vec<NodeId>,
}

const PER_BLOCK: usize = 8;

impl GluHandles {
    pub fn register(tape: &mut Tape, params: &GluParameters) -> Self {
        let ids = params.trainable().into_iter().map(|(_, t)| tape.leaf(Value::Real(t.clone()))).collect();
        Self { ids }
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// Flattened gradient in [`GluParameters::flat_trainable`] order.
    pub fn flat_gradient(&self, tape: &Tape, grads: &Gradients) -> Vec<f64> {
        self.ids
            .iter()
            .flat_map(|&id| grads.real(id, tape.value(id).real().map_or(0, RTensor::len)))
            .collect()
    }
}

/// Batch statistics of every normalization layer for one network call,
/// ordered block by block, linear path before gate path.
pub type CallStats = Vec<BatchStats>;

/// Taped network pass on the complex `[F × N]` node `y`.
pub fn glu_forward_taped<R: Rng>(
    tape: &mut Tape,
    params: &GluParameters,
    handles: &GluHandles,
    y: NodeId,
    training: bool,
    rng: &mut R,
) -> Result<(NodeId, CallStats)> {
    let input_stats = training || params.norm_mode == NormMode::Input;
    let id = |i: usize| handles.ids[i];
    let mut stats = Vec::new();
    let mut h = tape.log_magnitude(y)?;
    for (b, block) in params.blocks.iter().enumerate() {
        let base = b * PER_BLOCK;
        let lin = tape.conv1d(h, id(base), id(base + 1))?;
        let gate = tape.conv1d(h, id(base + 2), id(base + 3))?;
        let mut norm = |x: NodeId, scale: usize, running: &crate::glu::NormParams| -> Result<NodeId> {
            if input_stats {
                let (out, s) = tape.norm_batch(x, id(scale), id(scale + 1))?;
                stats.push(s);
                Ok(out)
            } else {
                tape.norm_fixed(x, id(scale), id(scale + 1), running.running_mean.data(), running.running_var.data())
            }
        };
        let lin = norm(lin, base + 4, &block.lin_norm)?;
        let gate = norm(gate, base + 6, &block.gate_norm)?;
        h = tape.gate(lin, gate)?;
        if b == 1 && training && params.dropout_rate > 0.0 {
            let len = tape.value(h).real().map_or(0, RTensor::len);
            h = tape.mask(h, dropout_mask(len, params.dropout_rate, rng))?;
        }
    }
    let z = tape.conv_transpose1d(h, id(3 * PER_BLOCK), id(3 * PER_BLOCK + 1))?;
    Ok((tape.softplus_floor(z)?, stats))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnrollConfig {
    pub n_iters: usize,
    pub loss: Loss,
    /// Training-mode network (input statistics, dropout).
    pub training: bool,
    /// Detach the network input from the estimates, so gradients reach the
    /// parameters through the weight maps but do not flow back into earlier
    /// iterations through them.
    pub stop_gradient_on_weights: bool,
}

/// Recorded forward pass of one sample.
pub struct SampleGraph {
    pub tape: Tape,
    pub handles: GluHandles,
    pub loss: NodeId,
    /// Normalization statistics of every network call, in call order.
    pub stats: Vec<CallStats>,
}

impl SampleGraph {
    pub fn loss_value(&self) -> f64 {
        self.tape.value(self.loss).real().map_or(f64::NAN, |t| t.data()[0])
    }

    /// Gradient of the loss in flattened trainable order.
    pub fn gradient(&self) -> Result<Vec<f64>> {
        let grads = self.tape.backward(self.loss)?;
        Ok(self.handles.flat_gradient(&self.tape, &grads))
    }
}

/// Runs `cfg.n_iters` ISS iterations with network weights and the chosen
/// loss on one sample, all on a fresh tape.
pub fn build_sample_graph<R: Rng>(
    params: &GluParameters,
    sample: &TrainingSample,
    stft: &Stft,
    cfg: &UnrollConfig,
    rng: &mut R,
) -> Result<SampleGraph> {
    if cfg.n_iters == 0 {
        return Err(Error::Config("at least one unrolled iteration is required".into()));
    }
    let mut tape = Tape::new();
    let handles = GluHandles::register(&mut tape, params);
    let m_src = sample.n_sources();
    let mut stats = Vec::new();
    let mut y = tape.leaf(Value::Complex(sample.mixture.clone()));
    for _ in 0..cfg.n_iters {
        let mut maps = Vec::with_capacity(m_src);
        for m in 0..m_src {
            let mut ym = tape.select(y, m)?;
            if cfg.stop_gradient_on_weights {
                ym = tape.leaf(tape.value(ym).clone());
            }
            let (r, s) = glu_forward_taped(&mut tape, params, &handles, ym, cfg.training, rng)?;
            maps.push(r);
            stats.push(s);
        }
        let r = tape.stack(&maps)?;
        for k in 0..m_src {
            y = tape.iss_step(y, r, k)?;
        }
    }
    let scaled = tape.scale_to_reference(y, &sample.reference_channel()?)?;
    let loss = match cfg.loss {
        Loss::SiSdr => {
            let len = sample.refs.first().map_or(0, Vec::len);
            let est = tape.synthesize(scaled, stft, len)?;
            tape.neg_pit_si_sdr(est, &sample.refs)?
        }
        Loss::Coherence => tape.neg_pit_coherence(scaled, &sample.ref_specs)?,
    };
    if !tape.value(loss).real().is_some_and(RTensor::is_finite) {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok(SampleGraph { tape, handles, loss, stats })
}
