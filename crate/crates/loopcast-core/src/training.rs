//! Two-stage training: backbone pretraining, Stage 1 (projections, teacher
//! forcing, Lipschitz penalty) and Stage 2 (observer on closed-loop
//! residuals). Every run audits that frozen parameter groups are bit-equal
//! before and after.

use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamId, ParamStore};
use crate::observer::{stage2_loss, HistoryMode, ObserverModel};
use crate::plant::{stage1_loss, PatchWindow, PlantModel};
use crate::rng::{split, SplitRng};
use crate::series::WindowSet;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Adam over one flattened parameter group.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(dim: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        assert_eq!(theta.len(), grad.len());
        assert_eq!(theta.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            theta[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub lambda: f64,
    pub xi: f64,
    pub kappa: f64,
    pub perturbations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 128,
            max_epochs: 10,
            patience: 3,
            lambda: 0.1,
            xi: 0.1,
            kappa: 1.0,
            perturbations: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub epochs_run: usize,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Number of parameters updated.
    pub trainable_count: usize,
}

/// Convert a window set into patch windows (skipping nothing; infeasible
/// segmentation is an error).
pub fn to_patch_windows(windows: &WindowSet, patch_len: usize) -> Result<Vec<PatchWindow>> {
    windows
        .pairs
        .iter()
        .map(|(h, f)| PatchWindow::from_series(h, f, patch_len))
        .collect()
}

fn flatten_grads(grads: &Gradients, store: &ParamStore, ids: &[ParamId]) -> Vec<f64> {
    let mut out = Vec::new();
    for &id in ids {
        let g = grads.param(id);
        assert_eq!(g.len(), store.matrix(id).values.len());
        out.extend_from_slice(g);
    }
    out
}

/// Epoch loop shared by all stages: minibatch Adam on `trainable`, early
/// stopping on the validation loss, restore of the best epoch's parameters,
/// and a bit-level audit that `frozen` never moved.
fn train_loop<F>(
    store: &mut ParamStore,
    trainable: &[ParamId],
    frozen: &[ParamId],
    train: &[PatchWindow],
    val: &[PatchWindow],
    cfg: &TrainConfig,
    stage: &str,
    mut loss_fn: F,
) -> Result<TrainReport>
where
    F: FnMut(&ParamStore, &[PatchWindow], &mut SplitRng) -> Result<(f64, Gradients)>,
{
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyBatch);
    }
    assert!(cfg.batch_size >= 1 && cfg.max_epochs >= 1);
    let frozen_before = store.snapshot_bits(frozen);
    let mut theta = store.flatten(trainable);
    let mut adam = Adam::new(theta.len(), cfg.lr);
    let mut rng = crate::rng::seed_rng(cfg.seed);

    let mut best = (0usize, f64::INFINITY, theta.clone());
    let mut train_losses = Vec::new();
    let mut val_losses = Vec::new();
    let mut since_best = 0usize;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PatchWindow> = chunk.iter().map(|&i| train[i].clone()).collect();
            let mut child = split(&mut rng);
            let (loss, grads) = loss_fn(store, &batch, &mut child)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("{stage} training loss"),
                    index: epoch,
                });
            }
            let flat = flatten_grads(&grads, store, trainable);
            if flat.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("{stage} gradient"),
                    index: epoch,
                });
            }
            adam.step(&mut theta, &flat);
            store.unflatten(trainable, &theta);
            epoch_loss += loss;
            batches += 1;
        }
        train_losses.push(epoch_loss / batches as f64);

        let mut val_rng = crate::rng::seed_rng(cfg.seed ^ 0x5eed);
        let (val_loss, _) = loss_fn(store, val, &mut val_rng)?;
        val_losses.push(val_loss);
        if val_loss < best.1 {
            best = (epoch, val_loss, theta.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    store.unflatten(trainable, &best.2);
    let frozen_after = store.snapshot_bits(frozen);
    if frozen_before != frozen_after {
        return Err(Error::ContractViolation(format!(
            "{stage} modified frozen parameters"
        )));
    }
    Ok(TrainReport {
        stage: stage.to_string(),
        epochs_run: train_losses.len(),
        train_losses,
        val_losses,
        best_epoch: best.0,
        best_val_loss: best.1,
        trainable_count: best.2.len(),
    })
}

/// Pretrain every plant parameter on a disjoint corpus (teacher forcing, no
/// Lipschitz penalty), then freeze the backbone. Returns the report and the
/// corpus hash for later disjointness checks.
pub fn pretrain_backbone(
    plant: &mut PlantModel,
    store: &mut ParamStore,
    train: &[PatchWindow],
    val: &[PatchWindow],
    cfg: &TrainConfig,
    corpus_hash: u64,
) -> Result<(TrainReport, u64)> {
    let trainable = plant.all_ids();
    let plant_ref = plant.clone();
    let report = train_loop(
        store,
        &trainable,
        &[],
        train,
        val,
        cfg,
        "pretrain",
        |store, batch, rng| stage1_loss(&plant_ref, store, batch, 0.0, cfg.xi, cfg.kappa, 1, rng),
    )?;
    plant.backbone_frozen = true;
    Ok((report, corpus_hash))
}

/// Refuse to fine-tune on data whose content hash matches the pretraining
/// corpus.
pub fn check_corpus_disjoint(pretrain_hash: u64, finetune_hash: u64) -> Result<()> {
    if pretrain_hash == finetune_hash {
        return Err(Error::ContractViolation(
            "fine-tuning data matches the pretraining corpus".into(),
        ));
    }
    Ok(())
}

/// Stage 1: fit encoder and head (backbone frozen) with the teacher-forced
/// reconstruction loss plus the local Lipschitz penalty.
pub fn train_stage1(
    plant: &PlantModel,
    store: &mut ParamStore,
    train: &[PatchWindow],
    val: &[PatchWindow],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if !plant.backbone_frozen {
        return Err(Error::ContractViolation(
            "stage 1 requires a frozen backbone".into(),
        ));
    }
    train_loop(
        store,
        &plant.projection_ids(),
        &plant.backbone_ids(),
        train,
        val,
        cfg,
        "stage1",
        |store, batch, rng| {
            stage1_loss(
                plant,
                store,
                batch,
                cfg.lambda,
                cfg.xi,
                cfg.kappa,
                cfg.perturbations,
                rng,
            )
        },
    )
}

/// Stage 2: fit the observer on closed-loop residuals; the whole plant is
/// frozen and audited.
pub fn train_stage2(
    plant: &PlantModel,
    observer: &ObserverModel,
    store: &mut ParamStore,
    train: &[PatchWindow],
    val: &[PatchWindow],
    cfg: &TrainConfig,
    history_mode: HistoryMode,
) -> Result<TrainReport> {
    if !plant.backbone_frozen {
        return Err(Error::ContractViolation(
            "stage 2 requires a frozen backbone".into(),
        ));
    }
    train_loop(
        store,
        &observer.param_ids(),
        &plant.all_ids(),
        train,
        val,
        cfg,
        "stage2",
        |store, batch, _rng| stage2_loss(plant, observer, store, batch, history_mode),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observer::ObserverConfig;
    use crate::plant::{plant_forward, PatchContext, PlantConfig};
    use crate::rng::seed_rng;
    use crate::synthetic::{sinusoid_mixture, SinusoidMixtureConfig};
    use approx::assert_abs_diff_eq;

    #[test]
    fn adam_minimizes_quadratic() {
        // min (x - 3)^2: gradient 2(x-3); Adam with lr 0.1 converges fast.
        let mut adam = Adam::new(1, 0.1);
        let mut x = vec![0.0];
        for _ in 0..500 {
            let g = vec![2.0 * (x[0] - 3.0)];
            adam.step(&mut x, &g);
        }
        assert_abs_diff_eq!(x[0], 3.0, epsilon = 1e-6);
    }

    #[test]
    fn adam_first_step_magnitude() {
        // With bias correction the first step is exactly lr * sign(g).
        let mut adam = Adam::new(1, 0.05);
        let mut x = vec![1.0];
        adam.step(&mut x, &[7.3]);
        assert_abs_diff_eq!(x[0], 1.0 - 0.05, epsilon = 1e-6);
    }

    fn tiny_windows(seed: u64, n: usize) -> Vec<PatchWindow> {
        let cfg = SinusoidMixtureConfig {
            length: 64 * n + 96,
            n_components: 2,
            noise_std: 0.02,
            ..Default::default()
        };
        let series = sinusoid_mixture(&cfg, &mut seed_rng(seed));
        let scale = series.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let series: Vec<f64> = series.iter().map(|v| v / scale).collect();
        (0..n)
            .map(|i| {
                PatchWindow::from_series(&series[i * 64..i * 64 + 32], &series[i * 64 + 32..i * 64 + 48], 8)
                    .unwrap()
            })
            .collect()
    }

    fn tiny_plant(store: &mut ParamStore) -> PlantModel {
        PlantModel::init(
            PlantConfig {
                patch_len: 8,
                latent_dim: 8,
                n_ctx: 4,
                hidden_width: 16,
                depth: 1,
                activation: crate::plant::Activation::Tanh,
            },
            store,
            &mut seed_rng(5),
        )
    }

    #[test]
    fn stage1_reduces_loss_and_respects_freeze() {
        let mut store = ParamStore::new();
        let mut plant = tiny_plant(&mut store);
        plant.backbone_frozen = true;
        let train = tiny_windows(1, 12);
        let val = tiny_windows(2, 4);
        let cfg = TrainConfig {
            lr: 1e-2,
            batch_size: 4,
            max_epochs: 5,
            lambda: 0.0,
            ..Default::default()
        };
        let before = stage1_loss(&plant, &store, &val, 0.0, cfg.xi, cfg.kappa, 1, &seed_rng(9))
            .unwrap()
            .0;
        let backbone_bits = store.snapshot_bits(&plant.backbone_ids());
        let report = train_stage1(&plant, &mut store, &train, &val, &cfg).unwrap();
        assert!(report.best_val_loss < before, "{} !< {before}", report.best_val_loss);
        assert_eq!(backbone_bits, store.snapshot_bits(&plant.backbone_ids()));
        assert!(report.epochs_run <= 5);
    }

    #[test]
    fn stage1_requires_frozen_backbone() {
        let mut store = ParamStore::new();
        let plant = tiny_plant(&mut store);
        let w = tiny_windows(1, 4);
        let err = train_stage1(&plant, &mut store, &w, &w, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::ContractViolation(_)));
    }

    #[test]
    fn stage2_learns_constant_bias() {
        // Identity plant with a head bias: true residual is constant, so the
        // observer's bias should recover it and stage-2 loss should drop to
        // near zero.
        let mut store = ParamStore::new();
        let mut plant = PlantModel::init_identity(PlantConfig::toy_identity(4, 3), &mut store);
        store.matrix_mut(plant.head_b).values = vec![0.3, -0.2, 0.1, 0.4];
        plant.backbone_frozen = true;
        let obs = ObserverModel::init_zero(
            ObserverConfig {
                window: 2,
                patch_len: 4,
                hidden: None,
            },
            &mut store,
        );
        let windows: Vec<PatchWindow> = (0..8)
            .map(|i| {
                let base = 0.1 * i as f64;
                PatchWindow::from_series(&vec![base; 12], &vec![base; 8], 4).unwrap()
            })
            .collect();
        let cfg = TrainConfig {
            lr: 5e-2,
            batch_size: 8,
            max_epochs: 10,
            patience: 10,
            ..Default::default()
        };
        let report = train_stage2(
            &plant,
            &obs,
            &mut store,
            &windows,
            &windows,
            &cfg,
            HistoryMode::SelfEstimates,
        )
        .unwrap();
        let initial = stage2_loss(&plant, &obs, &store, &windows, HistoryMode::SelfEstimates);
        assert!(report.best_val_loss < 0.2, "{}", report.best_val_loss);
        drop(initial);
        // Plant untouched: identity forward still exact.
        let ctx = PatchContext::from_patches(3, 4, &[vec![1.0; 4]]);
        let out = plant_forward(&plant, &store, &ctx).unwrap();
        for (o, b) in out.iter().zip([0.3, -0.2, 0.1, 0.4]) {
            assert_abs_diff_eq!(*o, 1.0 + b, epsilon = 1e-12);
        }
    }

    #[test]
    fn corpus_disjointness_enforced() {
        assert!(check_corpus_disjoint(42, 42).is_err());
        assert!(check_corpus_disjoint(42, 43).is_ok());
    }

    #[test]
    fn pretrain_freezes_backbone() {
        let mut store = ParamStore::new();
        let mut plant = tiny_plant(&mut store);
        let train = tiny_windows(3, 8);
        let val = tiny_windows(4, 3);
        let cfg = TrainConfig {
            lr: 1e-2,
            batch_size: 4,
            max_epochs: 2,
            ..Default::default()
        };
        assert!(!plant.backbone_frozen);
        let (report, hash) =
            pretrain_backbone(&mut plant, &mut store, &train, &val, &cfg, 777).unwrap();
        assert!(plant.backbone_frozen);
        assert_eq!(hash, 777);
        assert_eq!(report.epochs_run, 2);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut store = ParamStore::new();
            let mut plant = tiny_plant(&mut store);
            plant.backbone_frozen = true;
            let train = tiny_windows(1, 8);
            let val = tiny_windows(2, 3);
            let cfg = TrainConfig {
                lr: 1e-2,
                batch_size: 4,
                max_epochs: 3,
                ..Default::default()
            };
            train_stage1(&plant, &mut store, &train, &val, &cfg).unwrap();
            store.flatten(&plant.projection_ids())
        };
        assert_eq!(run(), run());
    }
}
