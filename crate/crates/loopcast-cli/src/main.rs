//! `loopcast`: data prep, two-stage training, forecasting, benchmarking,
//! ablation, stability experiments and transfer evaluation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

use clap::{Parser, Subcommand};
use loopcast_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage};
use loopcast_core::config::{load_config, RunConfig};
use loopcast_core::experiment::{
    evaluate_split, evaluate_transfer, run_ablation, run_benchmark, train_pipeline,
    write_benchmark_csv, write_benchmark_markdown, Variant,
};
use loopcast_core::error::Error;
use loopcast_core::observer::{ObserverConfig, ObserverModel};
use loopcast_core::rollout::{closed_loop_rollout, open_loop_rollout};
use loopcast_core::series::{make_windows, standardize, Split};
use loopcast_core::stability::{
    burn_in_steps, diagonalizable_jacobian, run_stability_experiment, search_stabilizing_gain,
    stepwise_envelope, write_trajectory_csv, LinearErrorSystem,
};
use loopcast_core::synthetic::transfer_pair;
use loopcast_core::training::{to_patch_windows, train_stage1, train_stage2};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "loopcast", version, about = "Feedback-stabilized patch forecasting")]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (or $FLLM_OUT, or ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker thread cap (0 = default).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    /// Dotted-key config overrides, e.g. --set experiment.stage1.lr=0.005
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the configured dataset and write it (with split and
    /// normalization info) to the output directory.
    Prepare,
    /// Pretrain the backbone on the synthetic corpus and freeze it.
    Pretrain,
    /// Fit encoder/head projections on the configured dataset.
    TrainStage1,
    /// Fit the residual observer in the closed loop.
    TrainStage2,
    /// Forecast the test split with the latest checkpoint.
    Forecast,
    /// Train and evaluate {open, closed} over the horizon grid and seeds.
    Benchmark {
        /// Number of seeds (0, 1, 2, ...); overrides the config seed list.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Three-variant ablation {closed, open, no-llm} with direction flags.
    Ablate,
    /// Linear error-dynamics experiments: open loop, closed loop, bounds.
    Stability,
    /// Zero-shot transfer from the sinusoid family to a frequency-shifted
    /// target.
    Transfer,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match build_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    loopcast_core::parallel::limit_workers(cli.jobs);
    let out = cli
        .out
        .clone()
        .or_else(|| std::env::var_os("FLLM_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    match run(&cli, cfg, &out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = load_config(cli.config.as_deref(), &cli.sets)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Resolved-config manifest, written before any work starts.
fn write_manifest(out: &Path, command: &str, cfg: &RunConfig) -> Result<(), Error> {
    fs::create_dir_all(out)?;
    let manifest = serde_json::json!({
        "command": command,
        "config": cfg,
        "config_hash": format!("{:#018x}", cfg.config_hash()),
        "provenance": format!("loopcast {} ({command})", env!("CARGO_PKG_VERSION")),
    });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn min_window(cfg: &RunConfig) -> usize {
    let h = cfg.horizons.iter().copied().max().unwrap_or(96);
    cfg.experiment.lookback + h
}

fn run(cli: &Cli, cfg: RunConfig, out: &Path) -> Result<(), Error> {
    let name = match &cli.command {
        Command::Prepare => "prepare",
        Command::Pretrain => "pretrain",
        Command::TrainStage1 => "train-stage1",
        Command::TrainStage2 => "train-stage2",
        Command::Forecast => "forecast",
        Command::Benchmark { .. } => "benchmark",
        Command::Ablate => "ablate",
        Command::Stability => "stability",
        Command::Transfer => "transfer",
    };
    write_manifest(out, name, &cfg)?;
    match &cli.command {
        Command::Prepare => prepare(&cfg, out),
        Command::Pretrain => pretrain(&cfg, out),
        Command::TrainStage1 => stage1(&cfg, out),
        Command::TrainStage2 => stage2(&cfg, out),
        Command::Forecast => forecast_cmd(&cfg, out),
        Command::Benchmark { seeds } => benchmark(&cfg, out, *seeds),
        Command::Ablate => ablate(&cfg, out),
        Command::Stability => stability(&cfg, out),
        Command::Transfer => transfer(&cfg, out),
    }
}

fn horizon(cfg: &RunConfig) -> Result<usize, Error> {
    cfg.horizons
        .first()
        .copied()
        .ok_or_else(|| Error::Config("horizons must not be empty".into()))
}

fn prepare(cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    let frame = cfg.data.load_frame(min_window(cfg))?;
    let (_, stats) = standardize(&frame, false)?;
    let cols: Vec<String> = (0..frame.channels()).map(|c| format!("ch{c}")).collect();
    let col_refs: Vec<&str> = cols.iter().map(|s| s.as_str()).collect();
    loopcast_core::series::write_series_csv(&frame, &out.join("dataset.csv"), &col_refs)?;
    let summary = serde_json::json!({
        "dataset": cfg.dataset_name,
        "channels": frame.channels(),
        "length": frame.length(),
        "split": frame.split,
        "content_hash": format!("{:#018x}", frame.content_hash()),
        "norm_stats": stats,
    });
    fs::write(out.join("dataset.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("prepared {} samples x {} channels", frame.length(), frame.channels());
    Ok(())
}

fn pretrain(cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    let h = horizon(cfg)?;
    let frame = cfg.data.load_frame(min_window(cfg))?;
    // The pipeline runs pretraining and stage 1 and we keep the model at the
    // pretrain boundary by rebuilding it below; instead, run pretraining
    // directly so the checkpoint reflects exactly this stage.
    let (model, report) = loopcast_core::experiment::train_pipeline(
        &frame,
        h,
        Variant::Open,
        cfg.seed,
        &cfg.experiment,
    )?;
    // train_pipeline already audited the freeze; persist the frozen plant.
    let ckpt = Checkpoint {
        stage: Stage::Pretrain,
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        model,
    };
    save_checkpoint(&out.join("pretrain.json"), &ckpt)?;
    fs::write(
        out.join("pretrain_report.json"),
        serde_json::to_string_pretty(&report.pretrain)?,
    )?;
    println!("pretrained and froze backbone");
    Ok(())
}

fn stage1(cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    let path = out.join("pretrain.json");
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "missing pretrain checkpoint {}; run `loopcast pretrain` first",
            path.display()
        )));
    }
    let mut ckpt = load_checkpoint(&path)?;
    let h = horizon(cfg)?;
    let frame = cfg.data.load_frame(min_window(cfg))?;
    let (std_frame, stats) = standardize(&frame, false)?;
    let (train, val) = split_windows(cfg, &std_frame, h)?;
    let mut s1 = cfg.experiment.stage1.clone();
    s1.seed = cfg.seed.wrapping_add(1);
    let report = train_stage1(&ckpt.model.plant, &mut ckpt.model.store, &train, &val, &s1)?;
    ckpt.stage = Stage::Stage1;
    ckpt.model.stats = stats;
    ckpt.model.train_hash = frame.content_hash();
    ckpt.config_hash = cfg.config_hash();
    save_checkpoint(&out.join("stage1.json"), &ckpt)?;
    fs::write(out.join("stage1_report.json"), serde_json::to_string_pretty(&report)?)?;
    println!("stage 1 best val loss {:.6}", report.best_val_loss);
    Ok(())
}

fn stage2(cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    let path = out.join("stage1.json");
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "missing stage-1 checkpoint {}; run `loopcast train-stage1` first",
            path.display()
        )));
    }
    let mut ckpt = load_checkpoint(&path)?;
    let h = horizon(cfg)?;
    let frame = cfg.data.load_frame(min_window(cfg))?;
    let (std_frame, _) = standardize(&frame, false)?;
    let (train, val) = split_windows(cfg, &std_frame, h)?;
    let observer = ObserverModel::init_zero(
        ObserverConfig {
            window: cfg.experiment.observer_window,
            patch_len: cfg.experiment.plant.patch_len,
            hidden: None,
        },
        &mut ckpt.model.store,
    );
    let mut s2 = cfg.experiment.stage2.clone();
    s2.seed = cfg.seed.wrapping_add(2);
    let report = train_stage2(
        &ckpt.model.plant,
        &observer,
        &mut ckpt.model.store,
        &train,
        &val,
        &s2,
        cfg.experiment.history_mode,
    )?;
    ckpt.stage = Stage::Stage2;
    ckpt.model.observer = Some(observer);
    ckpt.config_hash = cfg.config_hash();
    save_checkpoint(&out.join("stage2.json"), &ckpt)?;
    fs::write(out.join("stage2_report.json"), serde_json::to_string_pretty(&report)?)?;
    println!("stage 2 best val loss {:.6}", report.best_val_loss);
    Ok(())
}

fn split_windows(
    cfg: &RunConfig,
    std_frame: &loopcast_core::series::SeriesFrame,
    h: usize,
) -> Result<(Vec<loopcast_core::plant::PatchWindow>, Vec<loopcast_core::plant::PatchWindow>), Error> {
    let e = &cfg.experiment;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for ch in 0..std_frame.channels() {
        let t = make_windows(std_frame, ch, Split::Train, e.lookback, h, e.train_stride)?;
        train.extend(to_patch_windows(&t, e.plant.patch_len)?);
        let v = make_windows(std_frame, ch, Split::Val, e.lookback, h, e.train_stride)?;
        val.extend(to_patch_windows(&v, e.plant.patch_len)?);
    }
    Ok((train, val))
}

fn forecast_cmd(cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    let ckpt_path = ["stage2.json", "stage1.json"]
        .iter()
        .map(|n| out.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| {
            Error::Checkpoint(format!(
                "no stage-1/2 checkpoint under {}; train first",
                out.display()
            ))
        })?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    let h = horizon(cfg)?;
    let frame = cfg.data.load_frame(min_window(cfg))?;
    let model = &ckpt.model;
    let e = &cfg.experiment;
    let mut std_frame = frame.clone();
    for (ch, values) in std_frame.values.iter_mut().enumerate() {
        for v in values.iter_mut() {
            *v = (*v - model.stats.mean[ch]) / model.stats.std[ch];
        }
    }
    let mut traces = fs::File::create(out.join("forecast.jsonl"))?;
    for ch in 0..frame.channels() {
        let ws = make_windows(&std_frame, ch, Split::Test, e.lookback, h, h)?;
        for (hist, fut) in &ws.pairs {
            let patches = loopcast_core::series::segment_patches(hist, e.plant.patch_len)?;
            let ctx = loopcast_core::plant::PatchContext::from_patches(
                e.plant.n_ctx,
                e.plant.patch_len,
                &patches.patches,
            );
            let truth = loopcast_core::series::segment_patches(fut, e.plant.patch_len)?;
            let steps = h / e.plant.patch_len;
            let trace = match &model.observer {
                Some(obs) => closed_loop_rollout(
                    &model.plant,
                    obs,
                    &model.store,
                    &ctx,
                    steps,
                    Some(&truth.patches),
                )?,
                None => open_loop_rollout(&model.plant, &model.store, &ctx, steps, Some(&truth.patches))?,
            };
            trace.write_jsonl(&mut traces)?;
        }
    }
    let metrics = evaluate_split(model, &frame, Split::Test, h, e, None)?;
    fs::write(out.join("forecast_metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    println!(
        "test mse {:.6} mae {:.6} smape {:.3}",
        metrics.mse, metrics.mae, metrics.smape
    );
    Ok(())
}

fn benchmark(cfg: &RunConfig, out: &Path, seeds_flag: Option<usize>) -> Result<(), Error> {
    let frame = cfg.data.load_frame(min_window(cfg))?;
    let seeds: Vec<u64> = match seeds_flag {
        Some(n) if n >= 1 => (0..n as u64).collect(),
        Some(_) => return Err(Error::Config("--seeds must be >= 1".into())),
        None => cfg.effective_seeds(),
    };
    let result = run_benchmark(
        &cfg.dataset_name,
        &frame,
        &cfg.horizons,
        &[Variant::Open, Variant::Closed],
        &seeds,
        &cfg.experiment,
    )?;
    let mut csv = fs::File::create(out.join("benchmark.csv"))?;
    write_benchmark_csv(&mut csv, &result)?;
    let mut md = fs::File::create(out.join("benchmark.md"))?;
    write_benchmark_markdown(&mut md, &result)?;
    fs::write(out.join("benchmark.json"), serde_json::to_string_pretty(&result)?)?;
    if result.failures > 0 {
        eprintln!("{} cell(s) failed; see benchmark.json", result.failures);
    }
    println!("benchmark rows: {}", result.rows.len());
    Ok(())
}

fn ablate(cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    let frame = cfg.data.load_frame(min_window(cfg))?;
    let report = run_ablation(
        &cfg.dataset_name,
        &frame,
        &cfg.horizons,
        &cfg.effective_seeds(),
        &cfg.experiment,
    )?;
    let mut csv = fs::File::create(out.join("ablation.csv"))?;
    write_benchmark_csv(&mut csv, &report.benchmark)?;
    let mut md = fs::File::create(out.join("ablation.md"))?;
    write_benchmark_markdown(&mut md, &report.benchmark)?;
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    for (h, flag) in &report.feedback_helps {
        match flag {
            Some(true) => println!("H={h}: feedback helps"),
            Some(false) => println!("H={h}: feedback does not help"),
            None => println!("H={h}: below noise floor, skipped"),
        }
    }
    Ok(())
}

fn stability(cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    let s = &cfg.stability;
    let mut rng = loopcast_core::rng::seed_rng(s.seed);
    let jacobian = diagonalizable_jacobian(&s.scales, &mut rng);
    let dim = s.scales.len();
    let open = LinearErrorSystem {
        jacobian: jacobian.clone(),
        gain: None,
        gamma: s.gamma,
        policy: s.policy,
        initial_error: {
            let mut e = vec![0.0; dim];
            e[0] = 1e-6;
            e
        },
    };
    let (open_report, open_traj) = run_stability_experiment(&open, s.steps, &mut rng)?;
    let gain = search_stabilizing_gain(&jacobian, s.q)?;
    let closed = LinearErrorSystem {
        jacobian,
        gain: Some(gain),
        gamma: s.gamma,
        policy: s.policy,
        initial_error: vec![0.0; dim],
    };
    let (closed_report, closed_traj) = run_stability_experiment(&closed, s.steps, &mut rng)?;
    let envelope = stepwise_envelope(s.q, s.gamma, 0.0, s.steps)?;
    let mut f = fs::File::create(out.join("open_loop.csv"))?;
    write_trajectory_csv(&mut f, &open_traj, None)?;
    let mut f = fs::File::create(out.join("closed_loop.csv"))?;
    write_trajectory_csv(&mut f, &closed_traj, Some(&envelope))?;
    let report = serde_json::json!({
        "open": open_report,
        "closed": closed_report,
        "burn_in": burn_in_steps(s.q, 1e-9),
    });
    fs::write(out.join("stability.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "rho {:.4}; open growth {:?}; closed bound {:?}",
        open_report.rho, open_report.fitted_growth_rate, closed_report.theoretical_bound
    );
    Ok(())
}

fn transfer(cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    let e = &cfg.experiment;
    let h = horizon(cfg)?;
    let mut rng = loopcast_core::rng::seed_rng(cfg.data.data_seed);
    let (source, target) = transfer_pair(&cfg.data.sinusoid, cfg.data.channels, 1.5, &mut rng)?;
    let source = loopcast_core::series::chronological_split(&source, cfg.data.split, min_window(cfg))?;
    let target = loopcast_core::series::chronological_split(&target, cfg.data.split, min_window(cfg))?;
    let (closed_model, _) = train_pipeline(&source, h, Variant::Closed, cfg.seed, e)?;
    let (open_model, _) = train_pipeline(&source, h, Variant::Open, cfg.seed, e)?;
    let closed_m = evaluate_transfer(&closed_model, &target, h, e)?;
    let open_m = evaluate_transfer(&open_model, &target, h, e)?;
    let report = serde_json::json!({ "closed": closed_m, "open": open_m });
    fs::write(out.join("transfer.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "transfer smape: closed {:.3} vs open {:.3}",
        closed_m.smape, open_m.smape
    );
    Ok(())
}
