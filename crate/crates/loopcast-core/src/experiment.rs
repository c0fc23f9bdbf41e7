//! End-to-end experiment pipeline shared by the benchmark, ablation and
//! transfer runners: pretrain -> stage 1 -> stage 2 -> test-split metrics in
//! original units.

use crate::error::{Error, Result};
use crate::metrics::{aggregate_metrics, pooled_metrics, MetricAggregate, MetricBundle};
use crate::numerics::ParamStore;
use crate::observer::{HistoryMode, ObserverConfig, ObserverModel};
use crate::plant::{PlantConfig, PlantModel};
use crate::rollout::forecast;
use crate::rng::seed_rng;
use crate::series::{chronological_split, standardize, make_windows, NormStats, SeriesFrame, Split};
use crate::synthetic::{pretraining_corpus, SinusoidMixtureConfig};
use crate::training::{
    check_corpus_disjoint, pretrain_backbone, to_patch_windows, train_stage1, train_stage2,
    TrainConfig, TrainReport,
};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;

/// Model variants compared in tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Full pipeline: pretrained frozen backbone, Stage-1 projections,
    /// Stage-2 observer in the loop.
    Closed,
    /// Without feedback: same plant, no observer.
    Open,
    /// Without the pretrained backbone: random frozen backbone, observer on.
    NoBackbone,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Closed => "closed",
            Variant::Open => "open",
            Variant::NoBackbone => "no-llm",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plant: PlantConfig,
    pub observer_window: usize,
    pub lookback: usize,
    pub train_stride: usize,
    /// Evaluation stride; `None` means non-overlapping (stride = horizon).
    pub eval_stride: Option<usize>,
    pub pretrain: TrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub pretrain_corpus: SinusoidMixtureConfig,
    pub pretrain_channels: usize,
    pub history_mode: HistoryMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl ExperimentConfig {
    /// Small configuration sized for laptop-scale experiments.
    pub fn desk_scale() -> Self {
        let plant = PlantConfig {
            patch_len: 48,
            latent_dim: 16,
            n_ctx: 14,
            hidden_width: 32,
            depth: 1,
            activation: crate::plant::Activation::Tanh,
        };
        ExperimentConfig {
            plant,
            observer_window: 4,
            lookback: 672,
            train_stride: 96,
            eval_stride: None,
            pretrain: TrainConfig {
                lr: 1e-3,
                max_epochs: 2,
                lambda: 0.0,
                ..Default::default()
            },
            stage1: TrainConfig {
                lr: 1e-3,
                max_epochs: 3,
                ..Default::default()
            },
            stage2: TrainConfig {
                lr: 1e-2,
                max_epochs: 3,
                ..Default::default()
            },
            pretrain_corpus: SinusoidMixtureConfig {
                // Long enough that every corpus split fits lookback+horizon.
                length: 8192,
                ..Default::default()
            },
            pretrain_channels: 2,
            history_mode: HistoryMode::SelfEstimates,
        }
    }
}

/// Everything needed to forecast: frozen plant, optional observer, parameters
/// and the training data's normalization stats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedModel {
    pub plant: PlantModel,
    pub observer: Option<ObserverModel>,
    pub store: ParamStore,
    pub stats: NormStats,
    /// Content hash of the fine-tuning frame.
    pub train_hash: u64,
    /// Content hash of the pretraining corpus, if one was used.
    pub pretrain_hash: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub variant: Variant,
    pub seed: u64,
    pub pretrain: Option<TrainReport>,
    pub stage1: TrainReport,
    pub stage2: Option<TrainReport>,
}

fn gather_windows(
    frame: &SeriesFrame,
    split: Split,
    lookback: usize,
    horizon: usize,
    stride: usize,
    patch_len: usize,
) -> Result<Vec<crate::plant::PatchWindow>> {
    let mut out = Vec::new();
    for ch in 0..frame.channels() {
        let ws = make_windows(frame, ch, split, lookback, horizon, stride)?;
        out.extend(to_patch_windows(&ws, patch_len)?);
    }
    if out.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(out)
}

/// Train one variant on a split frame. The frame must carry split indices.
pub fn train_pipeline(
    frame: &SeriesFrame,
    horizon: usize,
    variant: Variant,
    seed: u64,
    cfg: &ExperimentConfig,
) -> Result<(TrainedModel, PipelineReport)> {
    if frame.split.is_none() {
        return Err(Error::ContractViolation(
            "training frame must carry split indices".into(),
        ));
    }
    if horizon % cfg.plant.patch_len != 0 {
        return Err(Error::ContractViolation(format!(
            "horizon {horizon} is not a multiple of patch length {}",
            cfg.plant.patch_len
        )));
    }
    let (std_frame, stats) = standardize(frame, false)?;
    let train = gather_windows(
        &std_frame,
        Split::Train,
        cfg.lookback,
        horizon,
        cfg.train_stride,
        cfg.plant.patch_len,
    )?;
    let val = gather_windows(
        &std_frame,
        Split::Val,
        cfg.lookback,
        horizon,
        cfg.train_stride,
        cfg.plant.patch_len,
    )?;

    let mut store = ParamStore::new();
    let mut init_rng = seed_rng(seed);
    let mut plant = PlantModel::init(cfg.plant.clone(), &mut store, &mut init_rng);

    let pretrain_report;
    let pretrain_hash;
    match variant {
        Variant::NoBackbone => {
            plant.backbone_frozen = true;
            pretrain_report = None;
            pretrain_hash = None;
        }
        Variant::Closed | Variant::Open => {
            let mut corpus_rng = seed_rng(seed ^ 0xc0f_f33);
            let corpus = pretraining_corpus(
                &cfg.pretrain_corpus,
                cfg.pretrain_channels,
                &mut corpus_rng,
            )?;
            let hash = corpus.content_hash();
            check_corpus_disjoint(hash, frame.content_hash())?;
            let corpus = chronological_split(&corpus, (0.7, 0.15, 0.15), cfg.lookback + horizon)?;
            let (corpus_std, _) = standardize(&corpus, true)?;
            let ptrain = gather_windows(
                &corpus_std,
                Split::Train,
                cfg.lookback,
                horizon,
                cfg.train_stride,
                cfg.plant.patch_len,
            )?;
            let pval = gather_windows(
                &corpus_std,
                Split::Val,
                cfg.lookback,
                horizon,
                cfg.train_stride,
                cfg.plant.patch_len,
            )?;
            let mut pre_cfg = cfg.pretrain.clone();
            pre_cfg.seed = seed;
            let (report, hash) =
                pretrain_backbone(&mut plant, &mut store, &ptrain, &pval, &pre_cfg, hash)?;
            pretrain_report = Some(report);
            pretrain_hash = Some(hash);
        }
    }

    let mut s1_cfg = cfg.stage1.clone();
    s1_cfg.seed = seed.wrapping_add(1);
    let stage1_report = train_stage1(&plant, &mut store, &train, &val, &s1_cfg)?;

    let (observer, stage2_report) = match variant {
        Variant::Open => (None, None),
        Variant::Closed | Variant::NoBackbone => {
            let obs = ObserverModel::init_zero(
                ObserverConfig {
                    window: cfg.observer_window,
                    patch_len: cfg.plant.patch_len,
                    hidden: None,
                },
                &mut store,
            );
            let mut s2_cfg = cfg.stage2.clone();
            s2_cfg.seed = seed.wrapping_add(2);
            let report = train_stage2(
                &plant,
                &obs,
                &mut store,
                &train,
                &val,
                &s2_cfg,
                cfg.history_mode,
            )?;
            (Some(obs), Some(report))
        }
    };

    let model = TrainedModel {
        plant,
        observer,
        store,
        stats,
        train_hash: frame.content_hash(),
        pretrain_hash,
    };
    let report = PipelineReport {
        variant,
        seed,
        pretrain: pretrain_report,
        stage2: stage2_report,
        stage1: stage1_report,
    };
    Ok((model, report))
}

/// Evaluate a trained model on one split of a frame, in original units.
/// `stats` override lets transfer evaluation use the target's own scaling.
pub fn evaluate_split(
    model: &TrainedModel,
    frame: &SeriesFrame,
    split: Split,
    horizon: usize,
    cfg: &ExperimentConfig,
    stats_override: Option<&NormStats>,
) -> Result<MetricBundle> {
    let stats_owned;
    let stats = match stats_override {
        Some(s) => s,
        None => {
            stats_owned = model.stats.clone();
            &stats_owned
        }
    };
    let mut std_frame = frame.clone();
    for (ch, values) in std_frame.values.iter_mut().enumerate() {
        for v in values.iter_mut() {
            *v = (*v - stats.mean[ch]) / stats.std[ch];
        }
    }
    let stride = cfg.eval_stride.unwrap_or(horizon);
    let mut pairs = Vec::new();
    for ch in 0..frame.channels() {
        let ws = make_windows(&std_frame, ch, split, cfg.lookback, horizon, stride)?;
        for (hist, fut) in &ws.pairs {
            let pred = forecast(
                &model.plant,
                model.observer.as_ref(),
                &model.store,
                hist,
                stats,
                ch,
                horizon,
            )?;
            let truth = crate::series::destandardize(fut, stats, ch);
            pairs.push((pred, truth));
        }
    }
    pooled_metrics(&pairs)
}

/// Zero-shot evaluation on a target frame that must be disjoint from both
/// the fine-tuning frame and the pretraining corpus. Uses the target's own
/// normalization statistics; no parameters move.
pub fn evaluate_transfer(
    model: &TrainedModel,
    target: &SeriesFrame,
    horizon: usize,
    cfg: &ExperimentConfig,
) -> Result<MetricBundle> {
    let target_hash = target.content_hash();
    if target_hash == model.train_hash || Some(target_hash) == model.pretrain_hash {
        return Err(Error::ContractViolation(
            "transfer target overlaps training data".into(),
        ));
    }
    let (_, stats) = standardize(target, true)?;
    evaluate_split(model, target, Split::Test, horizon, cfg, Some(&stats))
}

/// One table cell before aggregation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkCell {
    pub dataset: String,
    pub horizon: usize,
    pub variant: Variant,
    pub seed: u64,
    pub metrics: Option<MetricBundle>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub dataset: String,
    pub horizon: usize,
    pub variant: Variant,
    pub aggregate: MetricAggregate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub cells: Vec<BenchmarkCell>,
    pub rows: Vec<BenchmarkRow>,
    /// Cells that failed, with their error strings.
    pub failures: usize,
}

/// Train and evaluate every (horizon, variant, seed) cell on one dataset.
/// Per-cell failures are recorded, not fatal; aggregation skips them.
pub fn run_benchmark(
    dataset: &str,
    frame: &SeriesFrame,
    horizons: &[usize],
    variants: &[Variant],
    seeds: &[u64],
    cfg: &ExperimentConfig,
) -> Result<BenchmarkResult> {
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    let mut failures = 0;
    for &horizon in horizons {
        for &variant in variants {
            let mut bundles = Vec::new();
            for &seed in seeds {
                let cell = match train_pipeline(frame, horizon, variant, seed, cfg).and_then(
                    |(model, _)| evaluate_split(&model, frame, Split::Test, horizon, cfg, None),
                ) {
                    Ok(metrics) => {
                        bundles.push(metrics);
                        BenchmarkCell {
                            dataset: dataset.to_string(),
                            horizon,
                            variant,
                            seed,
                            metrics: Some(metrics),
                            error: None,
                        }
                    }
                    Err(e) => {
                        failures += 1;
                        BenchmarkCell {
                            dataset: dataset.to_string(),
                            horizon,
                            variant,
                            seed,
                            metrics: None,
                            error: Some(e.to_string()),
                        }
                    }
                };
                cells.push(cell);
            }
            if !bundles.is_empty() {
                rows.push(BenchmarkRow {
                    dataset: dataset.to_string(),
                    horizon,
                    variant,
                    aggregate: aggregate_metrics(&bundles)?,
                });
            }
        }
    }
    Ok(BenchmarkResult {
        cells,
        rows,
        failures,
    })
}

/// Per-seed CSV table: dataset, horizon, variant, seed, mse, mae, smape.
pub fn write_benchmark_csv<W: Write>(mut out: W, result: &BenchmarkResult) -> Result<()> {
    writeln!(out, "dataset,horizon,variant,seed,mse,mae,smape")?;
    for c in &result.cells {
        match &c.metrics {
            Some(m) => writeln!(
                out,
                "{},{},{},{},{},{},{}",
                c.dataset, c.horizon, c.variant, c.seed, m.mse, m.mae, m.smape
            )?,
            None => writeln!(
                out,
                "{},{},{},{},,,",
                c.dataset, c.horizon, c.variant, c.seed
            )?,
        }
    }
    Ok(())
}

/// Aggregated Markdown table (mean, with std when seeds > 1).
pub fn write_benchmark_markdown<W: Write>(mut out: W, result: &BenchmarkResult) -> Result<()> {
    writeln!(out, "| dataset | horizon | variant | mse | mae | smape |")?;
    writeln!(out, "|---|---|---|---|---|---|")?;
    for r in &result.rows {
        let fmt = |mean: f64, std: Option<f64>| match std {
            Some(s) => format!("{mean:.4} ± {s:.4}"),
            None => format!("{mean:.4}"),
        };
        writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} |",
            r.dataset,
            r.horizon,
            r.variant,
            fmt(r.aggregate.mean.mse, r.aggregate.std.as_ref().map(|s| s.mse)),
            fmt(r.aggregate.mean.mae, r.aggregate.std.as_ref().map(|s| s.mae)),
            fmt(
                r.aggregate.mean.smape,
                r.aggregate.std.as_ref().map(|s| s.smape)
            ),
        )?;
    }
    Ok(())
}

/// Ablation over {closed, open, no-llm} with per-horizon direction flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub benchmark: BenchmarkResult,
    /// Per horizon: does the full model beat the no-feedback variant on
    /// seed-mean test MSE? Skipped (None) when both are below the noise
    /// floor.
    pub feedback_helps: Vec<(usize, Option<bool>)>,
}

pub fn run_ablation(
    dataset: &str,
    frame: &SeriesFrame,
    horizons: &[usize],
    seeds: &[u64],
    cfg: &ExperimentConfig,
) -> Result<AblationReport> {
    let variants = [Variant::Closed, Variant::Open, Variant::NoBackbone];
    let benchmark = run_benchmark(dataset, frame, horizons, &variants, seeds, cfg)?;
    let floor = 1e-8;
    let mut feedback_helps = Vec::new();
    for &h in horizons {
        let mean_of = |v: Variant| {
            benchmark
                .rows
                .iter()
                .find(|r| r.horizon == h && r.variant == v)
                .map(|r| r.aggregate.mean.mse)
        };
        let flag = match (mean_of(Variant::Closed), mean_of(Variant::Open)) {
            (Some(c), Some(o)) if c.max(o) > floor => Some(c < o),
            _ => None,
        };
        feedback_helps.push((h, flag));
    }
    Ok(AblationReport {
        benchmark,
        feedback_helps,
    })
}
