//! Reverse-mode differentiation on a linear tape of coarse operations.
//!
//! Every node keeps its forward value, so adjoints read their inputs
//! straight from the node table. Complex nodes carry adjoints
//! `∂L/∂Re z + i ∂L/∂Im z`.

use crate::error::{Error, Result};
use crate::glu::layers::{self, BatchStats};
use crate::iva::{apply_steering, steering_vector};
use crate::numerics::{CTensor, RTensor, C64};
use crate::post::{coherence_with_grad, pit_from_scores, si_sdr_with_grad, SCALE_FLOOR};
use crate::source_models::WEIGHT_FLOOR;
use crate::stft::{fit_length, Stft};

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Real(RTensor),
    Complex(CTensor),
}

impl Value {
    pub fn shape(&self) -> &[usize] {
        match self {
            Value::Real(t) => t.shape(),
            Value::Complex(t) => t.shape(),
        }
    }

    pub fn real(&self) -> Option<&RTensor> {
        match self {
            Value::Real(t) => Some(t),
            Value::Complex(_) => None,
        }
    }

    pub fn complex(&self) -> Option<&CTensor> {
        match self {
            Value::Complex(t) => Some(t),
            Value::Real(_) => None,
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            Value::Real(t) => t.is_finite(),
            Value::Complex(t) => t.is_finite(),
        }
    }

    fn zeros_like(&self) -> Value {
        match self {
            Value::Real(t) => Value::Real(RTensor::zeros(t.shape())),
            Value::Complex(t) => Value::Complex(CTensor::zeros(t.shape())),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    LogMagnitude { y: NodeId },
    Conv1d { x: NodeId, w: NodeId, b: NodeId },
    ConvTranspose1d { x: NodeId, w: NodeId, b: NodeId },
    NormBatch { x: NodeId, scale: NodeId, shift: NodeId, stats: BatchStats },
    NormFixed { x: NodeId, scale: NodeId, shift: NodeId, mean: Vec<f64>, var: Vec<f64> },
    Gate { lin: NodeId, gate: NodeId },
    Mask { x: NodeId, mask: Vec<f64> },
    SoftplusFloor { x: NodeId },
    Stack { parts: Vec<NodeId> },
    Select { y: NodeId, m: usize },
    IssStep { y: NodeId, r: NodeId, k: usize, steer: Vec<Option<Vec<C64>>> },
    ScaleToReference { y: NodeId, x_ref: CTensor, z: Vec<C64>, floored: Vec<bool> },
    Synthesize { spec: NodeId, stft: Stft },
    PitSiSdr { est: NodeId, grads: Vec<Vec<f64>>, perm: Vec<usize> },
    PitCoherence { est: NodeId, grads: Vec<Vec<C64>>, perm: Vec<usize> },
    Sum { x: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::LogMagnitude { .. } => "log_magnitude",
            Op::Conv1d { .. } => "conv1d",
            Op::ConvTranspose1d { .. } => "conv_transpose1d",
            Op::NormBatch { .. } => "norm_batch",
            Op::NormFixed { .. } => "norm_fixed",
            Op::Gate { .. } => "gate",
            Op::Mask { .. } => "mask",
            Op::SoftplusFloor { .. } => "softplus",
            Op::Stack { .. } => "stack",
            Op::Select { .. } => "select",
            Op::IssStep { .. } => "iss_step",
            Op::ScaleToReference { .. } => "scale_to_reference",
            Op::Synthesize { .. } => "synthesize",
            Op::PitSiSdr { .. } => "pit_si_sdr",
            Op::PitCoherence { .. } => "pit_coherence",
            Op::Sum { .. } => "sum",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Value,
    op: Op,
}

/// Record of a forward computation, replayed in reverse by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node reached from the loss.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Value>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Value> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    /// Real adjoint of `id`, zeros if the loss does not depend on it.
    pub fn real(&self, id: NodeId, len: usize) -> Vec<f64> {
        match self.get(id) {
            Some(Value::Real(t)) => t.data().to_vec(),
            _ => vec![0.0; len],
        }
    }
}

fn shape_err(what: &str, shape: &[usize]) -> Error {
    Error::ShapeMismatch(format!("{what}: unexpected shape {shape:?}"))
}

fn dims2(v: &Value, what: &str) -> Result<(usize, usize)> {
    match v.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(shape_err(what, s)),
    }
}

fn dims3(v: &Value, what: &str) -> Result<(usize, usize, usize)> {
    match v.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(shape_err(what, s)),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Value {
        &self.nodes[id].value
    }

    fn real(&self, id: NodeId) -> Result<&RTensor> {
        self.nodes[id].value.real().ok_or_else(|| Error::ShapeMismatch(format!("node {id} is not real")))
    }

    fn complex(&self, id: NodeId) -> Result<&CTensor> {
        self.nodes[id].value.complex().ok_or_else(|| Error::ShapeMismatch(format!("node {id} is not complex")))
    }

    fn push(&mut self, value: Value, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// Leaf node (input or parameter).
    pub fn leaf(&mut self, value: Value) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn log_magnitude(&mut self, y: NodeId) -> Result<NodeId> {
        let t = self.complex(y)?;
        let out: Vec<f64> = t.data().iter().map(|z| (z.norm() + crate::glu::LOG_MAG_EPS).ln()).collect();
        let v = RTensor::from_vec(t.shape(), out)?;
        Ok(self.push(Value::Real(v), Op::LogMagnitude { y }))
    }

    fn conv_dims(&self, x: NodeId, w: NodeId, b: NodeId, transposed: bool) -> Result<(usize, usize, usize)> {
        let (c_in, n) = dims2(&self.nodes[x].value, "conv input")?;
        let ws = self.real(w)?.shape();
        let (wc_in, c_out) = match ws {
            [o, i, k] if *k == layers::KERNEL && !transposed => (*i, *o),
            [i, o, k] if *k == layers::KERNEL && transposed => (*i, *o),
            s => return Err(shape_err("conv weight", s)),
        };
        if wc_in != c_in || self.real(b)?.shape() != [c_out] {
            return Err(shape_err("conv input/bias", &[c_in, n]));
        }
        Ok((c_in, c_out, n))
    }

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (c_in, c_out, n) = self.conv_dims(x, w, b, false)?;
        let out = layers::conv1d(self.real(x)?.data(), c_in, n, self.real(w)?.data(), self.real(b)?.data(), c_out);
        Ok(self.push(Value::Real(RTensor::from_vec(&[c_out, n], out)?), Op::Conv1d { x, w, b }))
    }

    pub fn conv_transpose1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (c_in, c_out, n) = self.conv_dims(x, w, b, true)?;
        let out =
            layers::conv_transpose1d(self.real(x)?.data(), c_in, n, self.real(w)?.data(), self.real(b)?.data(), c_out);
        Ok(self.push(Value::Real(RTensor::from_vec(&[c_out, n], out)?), Op::ConvTranspose1d { x, w, b }))
    }

    /// Normalization with statistics of this input; the statistics are
    /// returned for running-average bookkeeping.
    pub fn norm_batch(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<(NodeId, BatchStats)> {
        let (_, n) = dims2(&self.nodes[x].value, "norm input")?;
        let (out, stats) = layers::norm_batch(self.real(x)?.data(), n, self.real(scale)?.data(), self.real(shift)?.data());
        let shape = self.real(x)?.shape().to_vec();
        let id = self.push(
            Value::Real(RTensor::from_vec(&shape, out)?),
            Op::NormBatch { x, scale, shift, stats: stats.clone() },
        );
        Ok((id, stats))
    }

    pub fn norm_fixed(&mut self, x: NodeId, scale: NodeId, shift: NodeId, mean: &[f64], var: &[f64]) -> Result<NodeId> {
        let (_, n) = dims2(&self.nodes[x].value, "norm input")?;
        let out =
            layers::norm_fixed(self.real(x)?.data(), n, mean, var, self.real(scale)?.data(), self.real(shift)?.data());
        let shape = self.real(x)?.shape().to_vec();
        Ok(self.push(
            Value::Real(RTensor::from_vec(&shape, out)?),
            Op::NormFixed { x, scale, shift, mean: mean.to_vec(), var: var.to_vec() },
        ))
    }

    /// `lin ⊙ sigmoid(gate)`.
    pub fn gate(&mut self, lin: NodeId, gate: NodeId) -> Result<NodeId> {
        let (a, g) = (self.real(lin)?, self.real(gate)?);
        if a.shape() != g.shape() {
            return Err(shape_err("gate", g.shape()));
        }
        let out = a.data().iter().zip(g.data()).map(|(a, g)| a * layers::sigmoid(*g)).collect();
        let shape = a.shape().to_vec();
        Ok(self.push(Value::Real(RTensor::from_vec(&shape, out)?), Op::Gate { lin, gate }))
    }

    pub fn mask(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        let t = self.real(x)?;
        if t.len() != mask.len() {
            return Err(shape_err("mask", &[mask.len()]));
        }
        let out = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Value::Real(RTensor::from_vec(&shape, out)?), Op::Mask { x, mask }))
    }

    /// `softplus(x) + floor`, the output stage of the weight network.
    pub fn softplus_floor(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.real(x)?;
        let out = t.data().iter().map(|v| layers::softplus(*v) + WEIGHT_FLOOR).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Value::Real(RTensor::from_vec(&shape, out)?), Op::SoftplusFloor { x }))
    }

    /// Stacks equally shaped real nodes along a new leading axis.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.real(*parts.first().ok_or_else(|| shape_err("stack", &[]))?)?.shape().to_vec();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.real(p)?;
            if t.shape() != first.as_slice() {
                return Err(shape_err("stack", t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend(first);
        Ok(self.push(Value::Real(RTensor::from_vec(&shape, data)?), Op::Stack { parts: parts.to_vec() }))
    }

    /// Source `m` of a complex `[M × F × N]` node.
    pub fn select(&mut self, y: NodeId, m: usize) -> Result<NodeId> {
        let t = self.complex(y)?;
        let (m_src, f, n) = dims3(&self.nodes[y].value, "select")?;
        if m >= m_src {
            return Err(shape_err("select", t.shape()));
        }
        let v = CTensor::from_vec(&[f, n], t.outer(m).to_vec())?;
        Ok(self.push(Value::Complex(v), Op::Select { y, m }))
    }

    /// One source-steering update of source `k` in every bin.
    pub fn iss_step(&mut self, y: NodeId, r: NodeId, k: usize) -> Result<NodeId> {
        let dims = dims3(&self.nodes[y].value, "iss estimates")?;
        if self.real(r)?.shape() != [dims.0, dims.1, dims.2] || k >= dims.0 {
            return Err(shape_err("iss weights", self.real(r)?.shape()));
        }
        let mut out = self.complex(y)?.clone();
        let rd = self.real(r)?.data();
        let mut steer = Vec::with_capacity(dims.1);
        for f in 0..dims.1 {
            let v = steering_vector(out.data(), rd, dims, k, f);
            if let Some(v) = &v {
                apply_steering(out.data_mut(), dims, v, k, f);
            }
            steer.push(v);
        }
        Ok(self.push(Value::Complex(out), Op::IssStep { y, r, k, steer }))
    }

    /// Minimal-distortion scaling of every source against `x_ref: [F × N]`.
    pub fn scale_to_reference(&mut self, y: NodeId, x_ref: &CTensor) -> Result<NodeId> {
        let (m_src, f_bins, n) = dims3(&self.nodes[y].value, "scaling")?;
        if x_ref.shape() != [f_bins, n] {
            return Err(shape_err("scaling reference", x_ref.shape()));
        }
        let mut out = self.complex(y)?.clone();
        let mut z = Vec::with_capacity(m_src * f_bins);
        let mut floored = Vec::with_capacity(m_src * f_bins);
        for k in 0..m_src {
            for f in 0..f_bins {
                let base = (k * f_bins + f) * n;
                let row = &mut out.data_mut()[base..base + n];
                let xr = &x_ref.data()[f * n..(f + 1) * n];
                let num: C64 = row.iter().zip(xr).map(|(a, b)| a.conj() * b).sum();
                let den_raw: f64 = row.iter().map(|a| a.norm_sqr()).sum();
                let zk = num / den_raw.max(SCALE_FLOOR);
                row.iter_mut().for_each(|v| *v *= zk);
                z.push(zk);
                floored.push(den_raw <= SCALE_FLOOR);
            }
        }
        Ok(self.push(Value::Complex(out), Op::ScaleToReference { y, x_ref: x_ref.clone(), z, floored }))
    }

    /// Resynthesizes each source of `[M × F × N]`, trimmed or padded to `len`.
    pub fn synthesize(&mut self, spec: NodeId, stft: &Stft, len: usize) -> Result<NodeId> {
        let t = self.complex(spec)?;
        let (m_src, f_bins, n) = dims3(&self.nodes[spec].value, "synthesis")?;
        let mut data = Vec::with_capacity(m_src * len);
        for k in 0..m_src {
            let s = CTensor::from_vec(&[f_bins, n], t.outer(k).to_vec())?;
            data.extend(fit_length(stft.synthesize(&s)?, len));
        }
        Ok(self.push(Value::Real(RTensor::from_vec(&[m_src, len], data)?), Op::Synthesize { spec, stft: stft.clone() }))
    }

    /// Negated permutation-invariant mean SI-SDR of `est: [M × T]` against
    /// `refs`. The permutation is chosen on the forward values and receives
    /// no gradient.
    pub fn neg_pit_si_sdr(&mut self, est: NodeId, refs: &[Vec<f64>]) -> Result<NodeId> {
        let t = self.real(est)?;
        let (m_src, len) = dims2(&self.nodes[est].value, "si-sdr estimates")?;
        if refs.len() != m_src || refs.iter().any(|r| r.len() != len) {
            return Err(shape_err("si-sdr references", &[refs.len()]));
        }
        let mut scores = vec![vec![0.0; m_src]; m_src];
        let mut pair_grads = vec![vec![Vec::new(); m_src]; m_src];
        for e in 0..m_src {
            for (r, reference) in refs.iter().enumerate() {
                let (v, g) = si_sdr_with_grad(t.outer(e), reference)?;
                scores[e][r] = v;
                pair_grads[e][r] = g;
            }
        }
        let pit = pit_from_scores(&scores)?;
        let grads = pit.permutation.iter().enumerate().map(|(r, &e)| std::mem::take(&mut pair_grads[e][r])).collect();
        let v = RTensor::from_vec(&[1], vec![-pit.value])?;
        Ok(self.push(Value::Real(v), Op::PitSiSdr { est, grads, perm: pit.permutation }))
    }

    /// Negated permutation-invariant mean coherence of `est: [M × F × N]`
    /// against reference spectrograms of the same shape.
    pub fn neg_pit_coherence(&mut self, est: NodeId, refs: &CTensor) -> Result<NodeId> {
        let t = self.complex(est)?;
        let (m_src, f_bins, n) = dims3(&self.nodes[est].value, "coherence estimates")?;
        if refs.shape() != t.shape() {
            return Err(shape_err("coherence references", refs.shape()));
        }
        let mut scores = vec![vec![0.0; m_src]; m_src];
        let mut pair_grads = vec![vec![Vec::new(); m_src]; m_src];
        for e in 0..m_src {
            for r in 0..m_src {
                let (v, g) = coherence_with_grad(t.outer(e), refs.outer(r), f_bins, n);
                scores[e][r] = v;
                pair_grads[e][r] = g;
            }
        }
        let pit = pit_from_scores(&scores)?;
        let grads = pit.permutation.iter().enumerate().map(|(r, &e)| std::mem::take(&mut pair_grads[e][r])).collect();
        let v = RTensor::from_vec(&[1], vec![-pit.value])?;
        Ok(self.push(Value::Real(v), Op::PitCoherence { est, grads, perm: pit.permutation }))
    }

    /// Sum of all entries of a real node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.real(x)?.data().iter().sum();
        Ok(self.push(Value::Real(RTensor::from_vec(&[1], vec![s])?), Op::Sum { x }))
    }

    /// Adjoints of every node with respect to the real scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        match &self.nodes[loss].value {
            Value::Real(t) if t.len() == 1 => {}
            v => return Err(shape_err("loss", v.shape())),
        }
        let mut acc = Accumulator { grads: vec![None; self.nodes.len()], nodes: &self.nodes };
        acc.grads[loss] = Some(Value::Real(RTensor::from_vec(&[1], vec![1.0])?));
        for id in (0..=loss).rev() {
            let Some(g) = acc.grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { node: id, op: node.op.name() });
            }
            self.propagate(id, &g, &mut acc)?;
            acc.grads[id] = Some(g);
        }
        Ok(Gradients { grads: acc.grads })
    }

    fn propagate(&self, id: NodeId, g: &Value, acc: &mut Accumulator<'_>) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::LogMagnitude { y } => {
                let gy = real_of(g);
                let yv = self.complex(*y)?.data();
                let out: Vec<C64> = yv
                    .iter()
                    .zip(gy)
                    .map(|(z, g)| {
                        let a = z.norm();
                        if a > 0.0 {
                            z * (g / ((a + crate::glu::LOG_MAG_EPS) * a))
                        } else {
                            C64::new(0.0, 0.0)
                        }
                    })
                    .collect();
                acc.add_complex(*y, &out);
            }
            Op::Conv1d { x, w, b } | Op::ConvTranspose1d { x, w, b } => {
                let transposed = matches!(node.op, Op::ConvTranspose1d { .. });
                let (c_in, c_out, n) = self.conv_dims(*x, *w, *b, transposed)?;
                let (xd, wd) = (self.real(*x)?.data(), self.real(*w)?.data());
                let grads = if transposed {
                    layers::conv_transpose1d_backward(xd, c_in, n, wd, c_out, real_of(g))
                } else {
                    layers::conv1d_backward(xd, c_in, n, wd, c_out, real_of(g))
                };
                acc.add_real(*x, &grads.input);
                acc.add_real(*w, &grads.weight);
                acc.add_real(*b, &grads.bias);
            }
            Op::NormBatch { x, scale, shift, stats } => {
                let (_, n) = dims2(&self.nodes[*x].value, "norm input")?;
                let grads = layers::norm_batch_backward(self.real(*x)?.data(), n, stats, self.real(*scale)?.data(), real_of(g));
                acc.add_real(*x, &grads.input);
                acc.add_real(*scale, &grads.scale);
                acc.add_real(*shift, &grads.shift);
            }
            Op::NormFixed { x, scale, shift, mean, var } => {
                let (_, n) = dims2(&self.nodes[*x].value, "norm input")?;
                let grads =
                    layers::norm_fixed_backward(self.real(*x)?.data(), n, mean, var, self.real(*scale)?.data(), real_of(g));
                acc.add_real(*x, &grads.input);
                acc.add_real(*scale, &grads.scale);
                acc.add_real(*shift, &grads.shift);
            }
            Op::Gate { lin, gate } => {
                let (a, gt) = (self.real(*lin)?.data(), self.real(*gate)?.data());
                let gy = real_of(g);
                let mut ga = Vec::with_capacity(a.len());
                let mut gg = Vec::with_capacity(a.len());
                for ((av, gv), go) in a.iter().zip(gt).zip(gy) {
                    let s = layers::sigmoid(*gv);
                    ga.push(go * s);
                    gg.push(go * av * s * (1.0 - s));
                }
                acc.add_real(*lin, &ga);
                acc.add_real(*gate, &gg);
            }
            Op::Mask { x, mask } => {
                let gx: Vec<f64> = real_of(g).iter().zip(mask).map(|(a, m)| a * m).collect();
                acc.add_real(*x, &gx);
            }
            Op::SoftplusFloor { x } => {
                let gx: Vec<f64> =
                    self.real(*x)?.data().iter().zip(real_of(g)).map(|(v, go)| go * layers::sigmoid(*v)).collect();
                acc.add_real(*x, &gx);
            }
            Op::Stack { parts } => {
                let gy = real_of(g);
                let len = gy.len() / parts.len();
                for (i, p) in parts.iter().enumerate() {
                    acc.add_real(*p, &gy[i * len..(i + 1) * len]);
                }
            }
            Op::Select { y, m } => {
                let gy = complex_of(g);
                acc.add_complex_at(*y, m * gy.len(), gy);
            }
            Op::IssStep { y, r, k, steer } => self.iss_backward(*y, *r, *k, steer, complex_of(g), acc)?,
            Op::ScaleToReference { y, x_ref, z, floored } => {
                let (m_src, f_bins, n) = dims3(&self.nodes[*y].value, "scaling")?;
                let yv = self.complex(*y)?.data();
                let gout = complex_of(g);
                let mut gy = vec![C64::new(0.0, 0.0); yv.len()];
                for k in 0..m_src {
                    for f in 0..f_bins {
                        let idx = k * f_bins + f;
                        let base = idx * n;
                        let (row, grow) = (&yv[base..base + n], &gout[base..base + n]);
                        let xr = &x_ref.data()[f * n..(f + 1) * n];
                        let zk = z[idx];
                        let gz: C64 = grow.iter().zip(row).map(|(a, b)| a * b.conj()).sum();
                        let den_raw: f64 = row.iter().map(|a| a.norm_sqr()).sum();
                        let q = den_raw.max(SCALE_FLOOR);
                        let gp = gz / q;
                        let gq = if floored[idx] { 0.0 } else { -(gz.conj() * zk).re / q };
                        for t in 0..n {
                            gy[base + t] = grow[t] * zk.conj() + xr[t] * gp.conj() + row[t] * (2.0 * gq);
                        }
                    }
                }
                acc.add_complex(*y, &gy);
            }
            Op::Synthesize { spec, stft } => {
                let (m_src, f_bins, n) = dims3(&self.nodes[*spec].value, "synthesis")?;
                let gy = real_of(g);
                let len = gy.len() / m_src;
                let full = stft.config().synthesis_len(n);
                let mut out = Vec::with_capacity(m_src * f_bins * n);
                for k in 0..m_src {
                    let padded = fit_length(gy[k * len..(k + 1) * len].to_vec(), full);
                    out.extend_from_slice(stft.synthesize_adjoint(&padded, n)?.data());
                }
                acc.add_complex(*spec, &out);
            }
            Op::PitSiSdr { est, grads, perm } => {
                let scale = -real_of(g)[0] / perm.len() as f64;
                let len = grads[0].len();
                let mut ge = vec![0.0; perm.len() * len];
                for (r, &e) in perm.iter().enumerate() {
                    for (dst, src) in ge[e * len..(e + 1) * len].iter_mut().zip(&grads[r]) {
                        *dst += scale * src;
                    }
                }
                acc.add_real(*est, &ge);
            }
            Op::PitCoherence { est, grads, perm } => {
                let scale = -real_of(g)[0] / perm.len() as f64;
                let len = grads[0].len();
                let mut ge = vec![C64::new(0.0, 0.0); perm.len() * len];
                for (r, &e) in perm.iter().enumerate() {
                    for (dst, src) in ge[e * len..(e + 1) * len].iter_mut().zip(&grads[r]) {
                        *dst += src * scale;
                    }
                }
                acc.add_complex(*est, &ge);
            }
            Op::Sum { x } => {
                let len = self.real(*x)?.len();
                acc.add_real(*x, &vec![real_of(g)[0]; len]);
            }
        }
        Ok(())
    }

    fn iss_backward(
        &self,
        y: NodeId,
        r: NodeId,
        k: usize,
        steer: &[Option<Vec<C64>>],
        gout: &[C64],
        acc: &mut Accumulator<'_>,
    ) -> Result<()> {
        let (m_src, f_bins, n) = dims3(&self.nodes[y].value, "iss estimates")?;
        let yv = self.complex(y)?.data();
        let rv = self.real(r)?.data();
        let mut gy = gout.to_vec();
        let mut gr = vec![0.0; rv.len()];
        let nf = n as f64;
        for (f, v) in steer.iter().enumerate() {
            let Some(v) = v else { continue };
            let at = |m: usize| (m * f_bins + f) * n;
            let kb = at(k);
            let yk = &yv[kb..kb + n];
            let mut gyk = vec![C64::new(0.0, 0.0); n];
            for m in 0..m_src {
                let mb = at(m);
                let gm = &gout[mb..mb + n];
                // y'_m = y_m − v_m y_k
                let gv: C64 = -gm.iter().zip(yk).map(|(a, b)| a * b.conj()).sum::<C64>();
                for t in 0..n {
                    gyk[t] -= v[m].conj() * gm[t];
                }
                let rm = &rv[mb..mb + n];
                if m == k {
                    // v_k = 1 − d^{-1/2}, d = (1/N) Σ r_k |y_k|²
                    let d: f64 = rm.iter().zip(yk).map(|(w, z)| w * z.norm_sqr()).sum::<f64>() / nf;
                    let gd = gv.re * 0.5 * d.powf(-1.5) / nf;
                    for t in 0..n {
                        gr[mb + t] += gd * yk[t].norm_sqr();
                        gyk[t] += yk[t] * (2.0 * gd * rm[t]);
                    }
                } else {
                    let ym = &yv[mb..mb + n];
                    let den: f64 = rm.iter().zip(yk).map(|(w, z)| w * z.norm_sqr()).sum();
                    let gnum = gv / den;
                    let gden = -(gv.conj() * v[m]).re / den;
                    for t in 0..n {
                        let cross = ym[t] * yk[t].conj();
                        gr[mb + t] += (gnum.conj() * cross).re + gden * yk[t].norm_sqr();
                        gy[mb + t] += gnum * yk[t] * rm[t];
                        gyk[t] += gnum.conj() * ym[t] * rm[t] + yk[t] * (2.0 * gden * rm[t]);
                    }
                }
            }
            for t in 0..n {
                gy[kb + t] += gyk[t];
            }
        }
        acc.add_complex(y, &gy);
        acc.add_real(r, &gr);
        Ok(())
    }
}

fn real_of(v: &Value) -> &[f64] {
    match v {
        Value::Real(t) => t.data(),
        Value::Complex(_) => &[],
    }
}

fn complex_of(v: &Value) -> &[C64] {
    match v {
        Value::Complex(t) => t.data(),
        Value::Real(_) => &[],
    }
}

struct Accumulator<'a> {
    grads: Vec<Option<Value>>,
    nodes: &'a [Node],
}

impl Accumulator<'_> {
    fn slot(&mut self, id: NodeId) -> &mut Value {
        let nodes = self.nodes;
        self.grads[id].get_or_insert_with(|| nodes[id].value.zeros_like())
    }

    fn add_real(&mut self, id: NodeId, g: &[f64]) {
        if let Value::Real(t) = self.slot(id) {
            t.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }

    fn add_complex(&mut self, id: NodeId, g: &[C64]) {
        self.add_complex_at(id, 0, g);
    }

    fn add_complex_at(&mut self, id: NodeId, offset: usize, g: &[C64]) {
        if let Value::Complex(t) = self.slot(id) {
            t.data_mut()[offset..offset + g.len()].iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
}
