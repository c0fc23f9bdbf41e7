//! Autoregressive rollout: open-loop baseline and closed-loop generation
//! with in-loop residual correction, producing a full per-step trace.

use crate::error::{Error, Result};
use crate::numerics::ParamStore;
use crate::observer::{
    measured_residual_history, observer_forward, ObserverModel, ResidualHistory,
};
use crate::plant::{plant_forward, PatchContext, PlantModel};
use crate::series::{destandardize, segment_patches, NormStats};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Any value beyond this magnitude marks the trace diverged; divergence is
/// recorded, not raised, so blow-up experiments can measure it.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutMode {
    Open,
    Closed,
}

/// One rollout step. `corrected == raw + correction` exactly, asserted at
/// construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub raw: Vec<f64>,
    pub correction: Vec<f64>,
    pub corrected: Vec<f64>,
    /// Hash of the context the plant saw at this step.
    pub context_hash: u64,
    pub truth: Option<Vec<f64>>,
    pub residual_true: Option<Vec<f64>>,
    pub residual_est: Vec<f64>,
}

impl TraceStep {
    fn new(
        step: usize,
        raw: Vec<f64>,
        correction: Vec<f64>,
        context_hash: u64,
        truth: Option<Vec<f64>>,
    ) -> Self {
        let corrected: Vec<f64> = raw.iter().zip(&correction).map(|(p, c)| p + c).collect();
        debug_assert!(corrected
            .iter()
            .zip(raw.iter().zip(&correction))
            .all(|(s, (p, c))| *s == p + c));
        let residual_true = truth
            .as_ref()
            .map(|t| t.iter().zip(&raw).map(|(a, b)| a - b).collect());
        TraceStep {
            step,
            raw,
            correction: correction.clone(),
            corrected,
            context_hash,
            truth,
            residual_true,
            residual_est: correction,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub mode: RolloutMode,
    pub steps: Vec<TraceStep>,
    pub diverged: bool,
    /// Step index at which divergence was detected, if any.
    pub diverged_at: Option<usize>,
}

impl RolloutTrace {
    /// Concatenated corrected patches (the forecast in standardized units).
    pub fn corrected_series(&self) -> Vec<f64> {
        self.steps.iter().flat_map(|s| s.corrected.clone()).collect()
    }

    pub fn raw_series(&self) -> Vec<f64> {
        self.steps.iter().flat_map(|s| s.raw.clone()).collect()
    }

    /// JSON-lines export, one record per step.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for s in &self.steps {
            let record = serde_json::json!({
                "step": s.step,
                "raw": s.raw,
                "correction": s.correction,
                "corrected": s.corrected,
                "truth": s.truth,
                "residual_true": s.residual_true,
                "residual_est": s.residual_est,
                "diverged": self.diverged_at.map_or(false, |d| s.step >= d),
            });
            writeln!(out, "{record}")?;
        }
        Ok(())
    }
}

fn non_finite_or_huge(v: &[f64]) -> bool {
    v.iter().any(|x| !x.is_finite() || x.abs() > DIVERGENCE_THRESHOLD)
}

/// Open-loop rollout: each raw prediction re-enters the context unchanged.
pub fn open_loop_rollout(
    plant: &PlantModel,
    store: &ParamStore,
    history: &PatchContext,
    steps: usize,
    truth: Option<&[Vec<f64>]>,
) -> Result<RolloutTrace> {
    assert!(steps >= 1 && history.fill() >= 1);
    let mut ctx = history.clone();
    let lp = plant.config.patch_len;
    let mut trace = RolloutTrace {
        mode: RolloutMode::Open,
        steps: Vec::with_capacity(steps),
        diverged: false,
        diverged_at: None,
    };
    for step in 0..steps {
        let hash = ctx.content_hash();
        let raw = match plant_forward(plant, store, &ctx) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => {
                trace.diverged = true;
                trace.diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        let truth_t = truth.and_then(|t| t.get(step).cloned());
        let step_rec = TraceStep::new(step, raw.clone(), vec![0.0; lp], hash, truth_t);
        let diverged = non_finite_or_huge(&step_rec.corrected);
        trace.steps.push(step_rec);
        if diverged {
            trace.diverged = true;
            trace.diverged_at = Some(step);
            break;
        }
        ctx.push(raw);
    }
    Ok(trace)
}

/// Closed-loop rollout: the observer's correction is added before the patch
/// re-enters the context, and the estimate is pushed into the residual
/// history.
pub fn closed_loop_rollout(
    plant: &PlantModel,
    observer: &ObserverModel,
    store: &ParamStore,
    history: &PatchContext,
    steps: usize,
    truth: Option<&[Vec<f64>]>,
) -> Result<RolloutTrace> {
    let hist = ResidualHistory::new(observer.config.window, plant.config.patch_len);
    closed_loop_rollout_seeded(plant, observer, store, history, hist, steps, truth)
}

/// Closed-loop rollout starting from an already-populated residual history
/// (typically measured residuals over the lookback window).
pub fn closed_loop_rollout_seeded(
    plant: &PlantModel,
    observer: &ObserverModel,
    store: &ParamStore,
    history: &PatchContext,
    seed_history: ResidualHistory,
    steps: usize,
    truth: Option<&[Vec<f64>]>,
) -> Result<RolloutTrace> {
    assert!(steps >= 1 && history.fill() >= 1);
    let mut ctx = history.clone();
    let mut hist = seed_history;
    let mut trace = RolloutTrace {
        mode: RolloutMode::Closed,
        steps: Vec::with_capacity(steps),
        diverged: false,
        diverged_at: None,
    };
    for step in 0..steps {
        let hash = ctx.content_hash();
        let raw = match plant_forward(plant, store, &ctx) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => {
                trace.diverged = true;
                trace.diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        let correction = observer_forward(observer, store, &hist)?;
        let truth_t = truth.and_then(|t| t.get(step).cloned());
        let step_rec = TraceStep::new(step, raw, correction.clone(), hash, truth_t);
        let corrected = step_rec.corrected.clone();
        let diverged = non_finite_or_huge(&corrected);
        trace.steps.push(step_rec);
        if diverged {
            trace.diverged = true;
            trace.diverged_at = Some(step);
            break;
        }
        // Only the corrected patch ever re-enters the context.
        ctx.push(corrected);
        hist.push(correction);
    }
    Ok(trace)
}

/// End-to-end forecast in original units: patch the standardized history,
/// roll out (closed iff an observer is given), concatenate and destandardize.
#[allow(clippy::too_many_arguments)]
pub fn forecast(
    plant: &PlantModel,
    observer: Option<&ObserverModel>,
    store: &ParamStore,
    standardized_history: &[f64],
    stats: &NormStats,
    channel: usize,
    horizon: usize,
) -> Result<Vec<f64>> {
    let lp = plant.config.patch_len;
    assert!(
        horizon % lp == 0,
        "horizon must be a whole number of patches"
    );
    let patches = segment_patches(standardized_history, lp)?;
    let ctx = PatchContext::from_patches(plant.config.n_ctx, lp, &patches.patches);
    let steps = horizon / lp;
    let trace = match observer {
        Some(obs) => {
            let hist =
                measured_residual_history(plant, obs.config.window, store, &patches.patches)?;
            closed_loop_rollout_seeded(plant, obs, store, &ctx, hist, steps, None)?
        }
        None => open_loop_rollout(plant, store, &ctx, steps, None)?,
    };
    if trace.diverged {
        return Err(Error::Diverged {
            step: trace.diverged_at.unwrap_or(0),
            recorded: trace.steps.len(),
        });
    }
    Ok(destandardize(&trace.corrected_series(), stats, channel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DenseMatrix;
    use crate::observer::ObserverConfig;
    use crate::plant::{PlantConfig, PlantModel};
    use approx::assert_abs_diff_eq;

    fn identity_plant(patch: usize, n_ctx: usize) -> (PlantModel, ParamStore) {
        let mut store = ParamStore::new();
        let model = PlantModel::init_identity(PlantConfig::toy_identity(patch, n_ctx), &mut store);
        (model, store)
    }

    #[test]
    fn identity_plant_fixed_point() {
        let (plant, store) = identity_plant(2, 3);
        let ctx = PatchContext::from_patches(3, 2, &[vec![0.7, 0.7]]);
        let trace = open_loop_rollout(&plant, &store, &ctx, 5, None).unwrap();
        assert_eq!(trace.steps.len(), 5);
        for s in &trace.steps {
            assert_eq!(s.raw, vec![0.7, 0.7]);
            assert_eq!(s.correction, vec![0.0, 0.0]);
        }
        assert!(!trace.diverged);
    }

    #[test]
    fn scalar_linear_plant_geometric_growth() {
        // p_hat_t = 1.2 * p_tilde_{t-1}: after 10 steps, 1.2^10.
        let (plant, mut store) = identity_plant(1, 2);
        let mut m = DenseMatrix::identity(1);
        m.values[0] = 1.2;
        *store.matrix_mut(plant.head_w) = m;
        let ctx = PatchContext::from_patches(2, 1, &[vec![1.0]]);
        let trace = open_loop_rollout(&plant, &store, &ctx, 10, None).unwrap();
        let last = trace.steps.last().unwrap().raw[0];
        assert_abs_diff_eq!(last, 1.2_f64.powi(10), epsilon = 1e-9);
    }

    #[test]
    fn step_count_matches_horizon_over_patch_len() {
        let (plant, store) = identity_plant(48, 14);
        let ctx = PatchContext::from_patches(14, 48, &[vec![0.0; 48]]);
        let steps = 96 / 48;
        let trace = open_loop_rollout(&plant, &store, &ctx, steps, None).unwrap();
        assert_eq!(trace.steps.len(), 2);
    }

    #[test]
    fn zero_observer_equals_open_loop() {
        let (plant, mut store) = identity_plant(2, 3);
        let obs = ObserverModel::init_zero(
            ObserverConfig {
                window: 4,
                patch_len: 2,
                hidden: None,
            },
            &mut store,
        );
        let ctx = PatchContext::from_patches(3, 2, &[vec![0.3, -0.8], vec![0.5, 0.1]]);
        let open = open_loop_rollout(&plant, &store, &ctx, 6, None).unwrap();
        let closed = closed_loop_rollout(&plant, &obs, &store, &ctx, 6, None).unwrap();
        assert_eq!(open.steps.len(), closed.steps.len());
        for (a, b) in open.steps.iter().zip(&closed.steps) {
            assert_eq!(a.raw, b.raw);
            assert_eq!(a.corrected, b.corrected);
            assert_eq!(a.context_hash, b.context_hash);
        }
    }

    #[test]
    fn oracle_observer_cancels_constant_bias() {
        // Plant with head bias b; observer emitting -b gives zero error on a
        // constant series.
        let (plant, mut store) = identity_plant(2, 3);
        let bias = vec![0.4, -0.3];
        store.matrix_mut(plant.head_b).values = bias.clone();
        let obs = ObserverModel::init_zero(
            ObserverConfig {
                window: 2,
                patch_len: 2,
                hidden: None,
            },
            &mut store,
        );
        store.matrix_mut(obs.b).values = bias.iter().map(|v| -v).collect();
        let truth = vec![vec![1.0, 1.0]; 5];
        let ctx = PatchContext::from_patches(3, 2, &[vec![1.0, 1.0]]);
        let trace = closed_loop_rollout(&plant, &obs, &store, &ctx, 5, Some(&truth)).unwrap();
        for s in &trace.steps {
            let err: f64 = s
                .corrected
                .iter()
                .zip(s.truth.as_ref().unwrap())
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert_abs_diff_eq!(err, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn divergence_flagged_not_crashed() {
        let (plant, mut store) = identity_plant(1, 2);
        let mut m = DenseMatrix::identity(1);
        m.values[0] = 10.0;
        *store.matrix_mut(plant.head_w) = m;
        let ctx = PatchContext::from_patches(2, 1, &[vec![1.0]]);
        let trace = open_loop_rollout(&plant, &store, &ctx, 50, None).unwrap();
        assert!(trace.diverged);
        assert!(trace.steps.len() < 50);
    }

    #[test]
    fn closed_loop_context_never_sees_raw() {
        // Observer with constant bias: at step t+1 the context hash must
        // reflect the corrected patch, not the raw one.
        let (plant, mut store) = identity_plant(1, 2);
        let obs = ObserverModel::init_zero(
            ObserverConfig {
                window: 1,
                patch_len: 1,
                hidden: None,
            },
            &mut store,
        );
        store.matrix_mut(obs.b).values = vec![0.5];
        let ctx = PatchContext::from_patches(2, 1, &[vec![1.0]]);
        let trace = closed_loop_rollout(&plant, &obs, &store, &ctx, 3, None).unwrap();
        for pair in trace.steps.windows(2) {
            let mut expected_ctx = PatchContext::from_patches(2, 1, &[vec![1.0]]);
            // Rebuild the context from corrected patches up to the prior step.
            for s in &trace.steps {
                if s.step > pair[0].step {
                    break;
                }
                expected_ctx.push(s.corrected.clone());
            }
            assert_eq!(pair[1].context_hash, expected_ctx.content_hash());
            let mut raw_ctx = PatchContext::from_patches(2, 1, &[vec![1.0]]);
            for s in &trace.steps {
                if s.step > pair[0].step {
                    break;
                }
                raw_ctx.push(s.raw.clone());
            }
            assert_ne!(pair[1].context_hash, raw_ctx.content_hash());
        }
    }

    #[test]
    fn forecast_shape_and_destandardization() {
        let (plant, store) = identity_plant(48, 14);
        let stats = NormStats {
            mean: vec![10.0],
            std: vec![2.0],
        };
        let history: Vec<f64> = vec![0.5; 672];
        let out = forecast(&plant, None, &store, &history, &stats, 0, 96).unwrap();
        assert_eq!(out.len(), 96);
        // Identity plant repeats the last patch (0.5 standardized) forever;
        // original units: 0.5 * 2 + 10 = 11.
        for v in &out {
            assert_abs_diff_eq!(*v, 11.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn jsonl_trace_fields() {
        let (plant, store) = identity_plant(1, 2);
        let ctx = PatchContext::from_patches(2, 1, &[vec![1.0]]);
        let truth = vec![vec![1.5]];
        let trace = open_loop_rollout(&plant, &store, &ctx, 1, Some(&truth)).unwrap();
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf).unwrap();
        let line: serde_json::Value =
            serde_json::from_str(std::str::from_utf8(&buf).unwrap().lines().next().unwrap())
                .unwrap();
        for key in [
            "step",
            "raw",
            "correction",
            "corrected",
            "truth",
            "residual_true",
            "residual_est",
            "diverged",
        ] {
            assert!(line.get(key).is_some(), "missing field {key}");
        }
        assert_eq!(line["residual_true"][0], 0.5);
    }
}
