//! Surrogate weights `r[m, f, n]` for the current source estimates.
//!
//! Classical circularly symmetric priors give frame-constant weights
//! `u = S'(r)/(2r)`; the learned model maps each source spectrogram through
//! the GLU network. One model is applied to every source.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::glu::{glu_forward, GluParameters};
use crate::numerics::{CTensor, RTensor, C64};

/// Lower bound on every surrogate weight.
pub const WEIGHT_FLOOR: f64 = 1e-6;
const LAPLACE_NORM_FLOOR: f64 = 1e-6;
const GAUSS_POWER_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub enum SourceModel {
    Laplace,
    Gauss,
    Glu(Arc<GluParameters>),
}

impl SourceModel {
    pub fn glu(params: GluParameters) -> Result<Self> {
        params.validate()?;
        Ok(Self::Glu(Arc::new(params)))
    }

    pub fn name(&self) -> &'static str {
        match self {
            SourceModel::Laplace => "laplace",
            SourceModel::Gauss => "gauss",
            SourceModel::Glu(_) => "glu",
        }
    }

    pub fn is_classical(&self) -> bool {
        !matches!(self, SourceModel::Glu(_))
    }
}

/// Strictly positive weights `[M × F × N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceWeights(RTensor);

impl SourceWeights {
    pub fn new(r: RTensor) -> Result<Self> {
        if r.shape().len() != 3 {
            return Err(Error::ShapeMismatch(format!("weights shape {:?}", r.shape())));
        }
        if !r.data().iter().all(|v| v.is_finite() && *v >= WEIGHT_FLOOR) {
            return Err(Error::NonFinite("weights must be finite and >= floor".into()));
        }
        Ok(Self(r))
    }

    pub fn tensor(&self) -> &RTensor {
        &self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn source(&self, m: usize) -> &[f64] {
        self.0.outer(m)
    }
}

fn frame_power(y: &[C64], f: usize, n: usize) -> Vec<f64> {
    let mut p = vec![0.0; n];
    for row in y.chunks_exact(n).take(f) {
        for (acc, z) in p.iter_mut().zip(row) {
            *acc += z.norm_sqr();
        }
    }
    p
}

fn broadcast_frames(per_frame: &[f64], f: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(per_frame.len() * f);
    for _ in 0..f {
        out.extend_from_slice(per_frame);
    }
    out
}

fn spec_dims(y: &CTensor) -> Result<(usize, usize)> {
    match y.shape() {
        [f, n] => Ok((*f, *n)),
        s => Err(Error::ShapeMismatch(format!("expected [F × N], got {s:?}"))),
    }
}

/// Laplace prior: `u_fn = 1 / (2 max(‖y_n‖, 1e-6))`.
pub fn laplace_weights(y: &CTensor) -> Result<RTensor> {
    let (f, n) = spec_dims(y)?;
    RTensor::from_vec(&[f, n], laplace_weights_raw(y.data(), f, n))
}

pub(crate) fn laplace_weights_raw(y: &[C64], f: usize, n: usize) -> Vec<f64> {
    let u: Vec<f64> = frame_power(y, f, n)
        .into_iter()
        .map(|p| (0.5 / p.sqrt().max(LAPLACE_NORM_FLOOR)).max(WEIGHT_FLOOR))
        .collect();
    broadcast_frames(&u, f)
}

/// Time-varying Gaussian prior: `u_fn = 1 / max(mean_f |y_fn|², 1e-12)`.
pub fn gauss_weights(y: &CTensor) -> Result<RTensor> {
    let (f, n) = spec_dims(y)?;
    RTensor::from_vec(&[f, n], gauss_weights_raw(y.data(), f, n))
}

pub(crate) fn gauss_weights_raw(y: &[C64], f: usize, n: usize) -> Vec<f64> {
    let u: Vec<f64> = frame_power(y, f, n)
        .into_iter()
        .map(|p| (1.0 / (p / f as f64).max(GAUSS_POWER_FLOOR)).max(WEIGHT_FLOOR))
        .collect();
    broadcast_frames(&u, f)
}

/// Classical contrast `G(y)` summed over frames. Below the floors the log
/// (Gauss) and the norm (Laplace) continue along their tangent so that the
/// floored weights remain exact majorizer slopes.
pub(crate) fn contrast(model: &SourceModel, y: &[C64], f: usize, n: usize) -> Option<f64> {
    let p = frame_power(y, f, n);
    match model {
        SourceModel::Laplace => Some(
            p.iter()
                .map(|&v| {
                    let r = v.sqrt();
                    if r >= LAPLACE_NORM_FLOOR {
                        r
                    } else {
                        0.5 * (v / LAPLACE_NORM_FLOOR + LAPLACE_NORM_FLOOR)
                    }
                })
                .sum(),
        ),
        SourceModel::Gauss => {
            let fl = f as f64;
            let g: f64 = p
                .iter()
                .map(|&v| {
                    let lam = v / fl;
                    if lam >= GAUSS_POWER_FLOOR {
                        lam.ln()
                    } else {
                        GAUSS_POWER_FLOOR.ln() + lam / GAUSS_POWER_FLOOR - 1.0
                    }
                })
                .sum();
            Some(fl * g)
        }
        SourceModel::Glu(_) => None,
    }
}

/// Weights for every source of `y_all: [M × F × N]` under one shared model.
pub fn model_weights(model: &SourceModel, y_all: &CTensor) -> Result<SourceWeights> {
    let (m_src, f, n) = match y_all.shape() {
        [m, f, n] => (*m, *f, *n),
        s => return Err(Error::ShapeMismatch(format!("expected [M × F × N], got {s:?}"))),
    };
    if !y_all.is_finite() {
        return Err(Error::NonFinite("source estimates".into()));
    }
    let mut out = Vec::with_capacity(m_src * f * n);
    for m in 0..m_src {
        let y = y_all.outer(m);
        match model {
            SourceModel::Laplace => out.extend(laplace_weights_raw(y, f, n)),
            SourceModel::Gauss => out.extend(gauss_weights_raw(y, f, n)),
            SourceModel::Glu(params) => {
                let spec = CTensor::from_vec(&[f, n], y.to_vec())?;
                // inference never draws from the generator
                let mut unused = ChaCha8Rng::seed_from_u64(0);
                out.extend_from_slice(glu_forward(params, &spec, false, &mut unused)?.data());
            }
        }
    }
    SourceWeights::new(RTensor::from_vec(&[m_src, f, n], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glu::GluParameters;
    use proptest::prelude::*;

    fn ones(f: usize, n: usize) -> CTensor {
        CTensor::from_vec(&[f, n], vec![C64::new(1.0, 0.0); f * n]).unwrap()
    }

    #[test]
    fn laplace_examples() {
        let u = laplace_weights(&ones(4, 1)).unwrap();
        assert!(u.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        let u = laplace_weights(&CTensor::zeros(&[4, 1])).unwrap();
        assert!(u.data().iter().all(|v| (v - 5e5).abs() < 1e-6));
    }

    #[test]
    fn gauss_examples() {
        let u = gauss_weights(&ones(4, 3)).unwrap();
        assert!(u.data().iter().all(|v| (v - 1.0).abs() < 1e-15));
        let u = gauss_weights(&CTensor::zeros(&[4, 1])).unwrap();
        assert!(u.data().iter().all(|v| (v - 1e12).abs() < 1.0));
    }

    #[test]
    fn homogeneity() {
        let y = CTensor::from_vec(&[3, 2], (0..6).map(|i| C64::new(i as f64 + 1.0, -0.5)).collect()).unwrap();
        let c = 3.0;
        let yc = CTensor::from_vec(&[3, 2], y.data().iter().map(|z| z * c).collect()).unwrap();
        let (l, lc) = (laplace_weights(&y).unwrap(), laplace_weights(&yc).unwrap());
        let (g, gc) = (gauss_weights(&y).unwrap(), gauss_weights(&yc).unwrap());
        for i in 0..6 {
            assert!((lc.data()[i] - l.data()[i] / c).abs() < 1e-14);
            assert!((gc.data()[i] - g.data()[i] / (c * c)).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_sources_identical_weights() {
        let y = CTensor::stack(&[ones(4, 3), ones(4, 3)]).unwrap();
        let w = model_weights(&SourceModel::Laplace, &y).unwrap();
        assert_eq!(w.source(0), w.source(1));
        let y1 = CTensor::stack(&[ones(4, 3)]).unwrap();
        let w = model_weights(&SourceModel::Gauss, &y1).unwrap();
        assert!(w.data().iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn zero_final_layer_gives_constant_map() {
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(3);
        let mut p = GluParameters::init(5, 4, &mut rng);
        p.deconv.weight = RTensor::zeros(p.deconv.weight.shape());
        p.deconv.bias = RTensor::zeros(p.deconv.bias.shape());
        let y = CTensor::from_vec(&[2, 5, 6], (0..60).map(|i| C64::new((i as f64).sin(), 0.3)).collect()).unwrap();
        let w = model_weights(&SourceModel::glu(p).unwrap(), &y).unwrap();
        let first = w.data()[0];
        assert!(w.data().iter().all(|v| *v == first));
    }

    fn finite_spec() -> impl Strategy<Value = (usize, usize, Vec<(f64, f64)>)> {
        (1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(m, f, n)| {
            let vals = prop_oneof![
                Just(0.0),
                Just(1e-310),
                -1e3..1e3f64,
            ];
            (Just(m), Just(f * 100 + n), proptest::collection::vec((vals.clone(), vals), m * f * n))
        })
        .prop_map(|(m, fn_, v)| (m, fn_, v))
    }

    proptest! {
        #[test]
        fn weights_respect_floor_and_permute((m, fn_, vals) in finite_spec()) {
            let (f, n) = (fn_ / 100, fn_ % 100);
            let data: Vec<C64> = vals.iter().map(|(a, b)| C64::new(*a, *b)).collect();
            let y = CTensor::from_vec(&[m, f, n], data).unwrap();
            for model in [SourceModel::Laplace, SourceModel::Gauss] {
                let w = model_weights(&model, &y).unwrap();
                prop_assert!(w.data().iter().all(|v| *v >= WEIGHT_FLOOR && v.is_finite()));
                // reversing the source axis reverses the weight maps
                let rev: Vec<CTensor> = (0..m).rev()
                    .map(|k| CTensor::from_vec(&[f, n], y.outer(k).to_vec()).unwrap())
                    .collect();
                let wr = model_weights(&model, &CTensor::stack(&rev).unwrap()).unwrap();
                for k in 0..m {
                    prop_assert_eq!(wr.source(k), w.source(m - 1 - k));
                }
                // frame-constant across bins
                for s in 0..m {
                    let map = w.source(s);
                    for fi in 1..f {
                        prop_assert_eq!(&map[fi * n..(fi + 1) * n], &map[..n]);
                    }
                }
            }
        }
    }
}
