//! Residual estimator ("observer"): predicts the correction patch for the
//! current step from a window of past residual estimates.

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, Gradients, NodeId, ParamId, ParamStore, Tape};
use crate::parallel::par_map_indexed;
use crate::plant::{plant_forward, PatchContext, PatchWindow, PlantModel};
use serde::{Deserialize, Serialize};

/// Ring of the most recent residual-estimate patches, zero-padded on the
/// left while underfilled. Same discipline as the patch context.
pub type ResidualHistory = PatchContext;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObserverConfig {
    /// Number of past residual patches consumed.
    pub window: usize,
    pub patch_len: usize,
    /// None = single affine map (default); Some(h) = one hidden tanh layer.
    #[serde(default)]
    pub hidden: Option<usize>,
}

/// During Stage-2 training the history can hold the observer's own past
/// estimates (default, inference-faithful) or the true residuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    SelfEstimates,
    TrueResiduals,
}

impl Default for HistoryMode {
    fn default() -> Self {
        HistoryMode::SelfEstimates
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObserverModel {
    pub config: ObserverConfig,
    pub w: ParamId,
    pub b: ParamId,
    pub hidden: Option<(ParamId, ParamId)>,
}

impl ObserverModel {
    /// Zero-initialized observer: emits zero corrections until trained, so a
    /// fresh closed loop coincides with the open loop.
    pub fn init_zero(config: ObserverConfig, store: &mut ParamStore) -> Self {
        let lp = config.patch_len;
        let input = config.window * lp;
        match config.hidden {
            None => {
                let w = store.add_matrix("obs_w", DenseMatrix::zeros(lp, input));
                let b = store.add_vector("obs_b", vec![0.0; lp]);
                ObserverModel {
                    config,
                    w,
                    b,
                    hidden: None,
                }
            }
            Some(h) => {
                let w1 = store.add_matrix("obs_w1", DenseMatrix::zeros(h, input));
                let b1 = store.add_vector("obs_b1", vec![0.0; h]);
                let w = store.add_matrix("obs_w2", DenseMatrix::zeros(lp, h));
                let b = store.add_vector("obs_b2", vec![0.0; lp]);
                ObserverModel {
                    config,
                    w,
                    b,
                    hidden: Some((w1, b1)),
                }
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self.hidden {
            None => vec![self.w, self.b],
            Some((w1, b1)) => vec![w1, b1, self.w, self.b],
        }
    }

    pub fn parameter_count(&self, store: &ParamStore) -> usize {
        self.param_ids()
            .iter()
            .map(|&id| store.matrix(id).values.len())
            .sum()
    }

    pub fn forward_traced(
        &self,
        store: &ParamStore,
        hist: &ResidualHistory,
        tape: &mut Tape,
    ) -> Result<NodeId> {
        let flat: Vec<f64> = hist.padded().concat();
        let leaf = tape.leaf(flat)?;
        match self.hidden {
            None => tape.affine(store, self.w, self.b, leaf),
            Some((w1, b1)) => {
                let h = tape.affine(store, w1, b1, leaf)?;
                let h = tape.tanh(h)?;
                tape.affine(store, self.w, self.b, h)
            }
        }
    }
}

/// Value-only observer forward.
pub fn observer_forward(
    model: &ObserverModel,
    store: &ParamStore,
    hist: &ResidualHistory,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let node = model.forward_traced(store, hist, &mut tape)?;
    Ok(tape.value(node).to_vec())
}

/// One supervised pair from a closed-loop rollout: the history the observer
/// saw at step t, and the true residual it should have predicted.
#[derive(Debug, Clone)]
pub struct ResidualSample {
    pub history: ResidualHistory,
    pub true_residual: Vec<f64>,
}

/// Teacher-forced one-step residuals over known patches. The forecast
/// region has no measurements, but the lookback does: running the plant
/// over it yields measured residuals that seed the observer's history, so
/// corrections start from real information instead of zeros.
pub fn measured_residual_history(
    plant: &PlantModel,
    window: usize,
    store: &ParamStore,
    patches: &[Vec<f64>],
) -> Result<ResidualHistory> {
    let cfg = &plant.config;
    let mut hist = ResidualHistory::new(window, cfg.patch_len);
    let start = patches.len().saturating_sub(window).max(1);
    for k in start..patches.len() {
        let lo = k.saturating_sub(cfg.n_ctx);
        let ctx = PatchContext::from_patches(cfg.n_ctx, cfg.patch_len, &patches[lo..k]);
        let raw = plant_forward(plant, store, &ctx)?;
        hist.push(patches[k].iter().zip(&raw).map(|(t, p)| t - p).collect());
    }
    Ok(hist)
}

/// Roll the closed loop over one window with a frozen plant, recording the
/// observer's per-step design matrix. The corrected patch re-enters the
/// context; the history receives estimates (default) or true residuals.
pub fn stage2_rollout_design(
    plant: &PlantModel,
    observer: &ObserverModel,
    store: &ParamStore,
    window: &PatchWindow,
    history_mode: HistoryMode,
) -> Result<Vec<ResidualSample>> {
    if !plant.backbone_frozen {
        return Err(Error::ContractViolation(
            "stage-2 requires a frozen plant backbone".into(),
        ));
    }
    if window.targets.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let cfg = &plant.config;
    let mut ctx = PatchContext::from_patches(cfg.n_ctx, cfg.patch_len, &window.history);
    // Warm-started exactly as deployment does it, so the training design
    // matches the histories the observer will actually see.
    let mut hist = measured_residual_history(plant, observer.config.window, store, &window.history)?;
    let mut samples = Vec::with_capacity(window.targets.len());
    for target in &window.targets {
        let raw = plant_forward(plant, store, &ctx)?;
        let correction = observer_forward(observer, store, &hist)?;
        let true_residual: Vec<f64> = target.iter().zip(&raw).map(|(t, p)| t - p).collect();
        samples.push(ResidualSample {
            history: hist.clone(),
            true_residual: true_residual.clone(),
        });
        let corrected: Vec<f64> = raw.iter().zip(&correction).map(|(p, c)| p + c).collect();
        ctx.push(corrected);
        hist.push(match history_mode {
            HistoryMode::SelfEstimates => correction,
            HistoryMode::TrueResiduals => true_residual,
        });
    }
    Ok(samples)
}

/// Supervised Stage-2 loss on a fixed design: (1/n) sum ||dp_t - r_psi(hist_t)||_2.
/// The histories are data here, so gradients flow only into the observer and
/// the analytic gradient is directly comparable to finite differences.
pub fn stage2_supervised_loss(
    observer: &ObserverModel,
    store: &ParamStore,
    design: &[ResidualSample],
) -> Result<(f64, Gradients)> {
    if design.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut tape = Tape::new();
    let mut terms = Vec::with_capacity(design.len());
    for sample in design {
        let correction = observer.forward_traced(store, &sample.history, &mut tape)?;
        let residual_leaf = tape.leaf(sample.true_residual.clone())?;
        let diff = tape.sub(residual_leaf, correction)?;
        terms.push(tape.l2_norm(diff)?);
    }
    let total = tape.sum(&terms)?;
    let loss = tape.scale(total, 1.0 / terms.len() as f64)?;
    let value = tape.scalar(loss);
    let grads = tape.backward(store, loss, &[1.0])?;
    Ok((value, grads))
}

/// Stage-2 loss for one window: roll out, then supervise on the recorded
/// design.
pub fn stage2_window_loss(
    plant: &PlantModel,
    observer: &ObserverModel,
    store: &ParamStore,
    window: &PatchWindow,
    history_mode: HistoryMode,
) -> Result<(f64, Gradients)> {
    let design = stage2_rollout_design(plant, observer, store, window, history_mode)?;
    stage2_supervised_loss(observer, store, &design)
}

/// Batch Stage-2 loss; windows in parallel, serial gradient reduction.
pub fn stage2_loss(
    plant: &PlantModel,
    observer: &ObserverModel,
    store: &ParamStore,
    batch: &[PatchWindow],
    history_mode: HistoryMode,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let results = par_map_indexed(batch.len(), |i| {
        stage2_window_loss(plant, observer, store, &batch[i], history_mode)
    });
    let mut total = 0.0;
    let mut grads = Gradients::zeros_like(store);
    for r in results {
        let (v, g) = r?;
        total += v;
        grads.add_assign(&g);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}
