//! Scoring separated dataset items: PIT SI-SDR, SI-SIR and the unprocessed
//! baseline, plus per-set medians.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iva::{auxiva_run, Algorithm, AuxIvaConfig};
use crate::mixsim::DatasetItem;
use crate::numerics::CTensor;
use crate::post::{pit_si_sdr, reconstruct, si_sdr, si_sir};
use crate::source_models::SourceModel;
use crate::stft::Stft;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemScores {
    /// SI-SDR per reference, PIT-aligned.
    pub si_sdr: Vec<f64>,
    pub si_sir: Vec<f64>,
    /// SI-SDR of the reference microphone signal against each reference.
    pub input_si_sdr: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

impl ItemScores {
    pub fn mean_si_sdr(&self) -> f64 {
        mean(&self.si_sdr)
    }

    pub fn mean_si_sir(&self) -> f64 {
        mean(&self.si_sir)
    }

    pub fn mean_input_si_sdr(&self) -> f64 {
        mean(&self.input_si_sdr)
    }

    pub fn improvement(&self) -> f64 {
        self.mean_si_sdr() - self.mean_input_si_sdr()
    }
}

/// Median of the finite entries; `NaN` if there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// STFT of every channel, stacked as `[M × F × N]`.
pub fn analyze_channels(channels: &[Vec<f64>], stft: &Stft) -> Result<CTensor> {
    CTensor::stack(&channels.iter().map(|c| stft.analyze(c)).collect::<Result<Vec<_>>>()?)
}

/// Separates `item` and returns the scaled time-domain estimates, trimmed
/// to the reference length.
pub fn separate_item(
    item: &DatasetItem,
    model: &SourceModel,
    algo: Algorithm,
    n_iters: usize,
    stft: &Stft,
) -> Result<Vec<Vec<f64>>> {
    let x = analyze_channels(&item.channels, stft)?;
    let out = auxiva_run(&x, &AuxIvaConfig::new(algo, n_iters, model.clone()), None)?;
    let len = item.refs.first().or(item.channels.first()).map_or(0, Vec::len);
    let ests = reconstruct(&out.y, &x, stft, 0, len)?;
    if ests.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("separated signals".into()));
    }
    Ok(ests)
}

pub fn score_estimates(ests: &[Vec<f64>], item: &DatasetItem) -> Result<ItemScores> {
    let pit = pit_si_sdr(ests, &item.refs)?;
    let refs: Vec<&[f64]> = item.refs.iter().map(Vec::as_slice).collect();
    let si_sir = pit
        .permutation
        .iter()
        .enumerate()
        .map(|(k, &e)| si_sir(&ests[e], &refs, k))
        .collect::<Result<Vec<_>>>()?;
    let input = item.channels.first().ok_or_else(|| Error::ShapeMismatch("item has no channels".into()))?;
    let input_si_sdr = item.refs.iter().map(|r| si_sdr(&input[..r.len().min(input.len())], r)).collect::<Result<_>>()?;
    Ok(ItemScores { si_sdr: pit.per_pair, si_sir, input_si_sdr })
}

pub fn evaluate_item(
    item: &DatasetItem,
    model: &SourceModel,
    algo: Algorithm,
    n_iters: usize,
    stft: &Stft,
) -> Result<ItemScores> {
    score_estimates(&separate_item(item, model, algo, n_iters, stft)?, item)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[f64::NAN, 1.0]), 1.0);
        assert!(median(&[]).is_nan());
    }
}
