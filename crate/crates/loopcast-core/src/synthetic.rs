//! Synthetic series generators: sinusoid mixtures with AR noise for
//! pretraining, an AR(2)+trend testbed, and frequency-shifted transfer pairs.

use crate::error::Result;
use crate::rng::{normal, SplitRng};
use crate::series::SeriesFrame;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinusoidMixtureConfig {
    pub length: usize,
    pub n_components: usize,
    /// Periods are drawn log-uniformly from this range (in samples).
    pub period_range: (f64, f64),
    pub amplitude_range: (f64, f64),
    pub ar_coeff: f64,
    pub noise_std: f64,
}

impl Default for SinusoidMixtureConfig {
    fn default() -> Self {
        SinusoidMixtureConfig {
            length: 4096,
            n_components: 3,
            period_range: (16.0, 512.0),
            amplitude_range: (0.5, 2.0),
            ar_coeff: 0.8,
            noise_std: 0.1,
        }
    }
}

/// One channel: sum of random sinusoids plus AR(1) noise.
pub fn sinusoid_mixture(cfg: &SinusoidMixtureConfig, rng: &mut SplitRng) -> Vec<f64> {
    let mut comps = Vec::with_capacity(cfg.n_components);
    for _ in 0..cfg.n_components {
        let (lo, hi) = cfg.period_range;
        let period = (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp();
        let (alo, ahi) = cfg.amplitude_range;
        let amp = alo + rng.gen::<f64>() * (ahi - alo);
        let phase = rng.gen::<f64>() * std::f64::consts::TAU;
        comps.push((period, amp, phase));
    }
    let mut noise = 0.0;
    (0..cfg.length)
        .map(|t| {
            noise = cfg.ar_coeff * noise + normal(rng) * cfg.noise_std;
            let s: f64 = comps
                .iter()
                .map(|(p, a, ph)| a * (std::f64::consts::TAU * t as f64 / p + ph).sin())
                .sum();
            s + noise
        })
        .collect()
}

/// Multi-channel pretraining corpus of independent sinusoid mixtures.
pub fn pretraining_corpus(
    cfg: &SinusoidMixtureConfig,
    channels: usize,
    rng: &mut SplitRng,
) -> Result<SeriesFrame> {
    let values: Vec<Vec<f64>> = (0..channels).map(|_| sinusoid_mixture(cfg, rng)).collect();
    SeriesFrame::from_channels(values)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ar2TrendConfig {
    pub length: usize,
    pub a1: f64,
    pub a2: f64,
    pub trend_slope: f64,
    pub season_period: f64,
    pub season_amp: f64,
    pub noise_std: f64,
}

impl Default for Ar2TrendConfig {
    fn default() -> Self {
        Ar2TrendConfig {
            length: 4096,
            a1: 1.2,
            a2: -0.4,
            trend_slope: 2e-4,
            season_period: 96.0,
            season_amp: 1.0,
            noise_std: 0.2,
        }
    }
}

/// Forecasting testbed: stationary AR(2) component plus a slow linear trend
/// and a daily-scale seasonal cycle.
pub fn ar2_trend_series(cfg: &Ar2TrendConfig, rng: &mut SplitRng) -> Vec<f64> {
    let mut y1 = 0.0;
    let mut y2 = 0.0;
    (0..cfg.length)
        .map(|t| {
            let ar = cfg.a1 * y1 + cfg.a2 * y2 + normal(rng) * cfg.noise_std;
            y2 = y1;
            y1 = ar;
            ar + cfg.trend_slope * t as f64
                + cfg.season_amp * (std::f64::consts::TAU * t as f64 / cfg.season_period).sin()
        })
        .collect()
}

pub fn ar2_trend_frame(
    cfg: &Ar2TrendConfig,
    channels: usize,
    rng: &mut SplitRng,
) -> Result<SeriesFrame> {
    let values: Vec<Vec<f64>> = (0..channels).map(|_| ar2_trend_series(cfg, rng)).collect();
    SeriesFrame::from_channels(values)
}

/// Source/target pair from the same sinusoid family with all target periods
/// scaled by `frequency_shift`; used for transfer experiments. The two
/// frames draw from independent RNG streams, so their content hashes are
/// disjoint by construction.
pub fn transfer_pair(
    cfg: &SinusoidMixtureConfig,
    channels: usize,
    frequency_shift: f64,
    rng: &mut SplitRng,
) -> Result<(SeriesFrame, SeriesFrame)> {
    assert!(frequency_shift > 0.0);
    let source = pretraining_corpus(cfg, channels, rng)?;
    let mut shifted = cfg.clone();
    shifted.period_range = (
        cfg.period_range.0 / frequency_shift,
        cfg.period_range.1 / frequency_shift,
    );
    let target = pretraining_corpus(&shifted, channels, rng)?;
    Ok((source, target))
}
