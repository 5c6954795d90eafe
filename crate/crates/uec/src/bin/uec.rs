//! Command-line entry point composing the library stages into
//! reproducible experiments. Every artifact embeds the hash of the
//! config that produced it; later stages refuse mismatched upstream
//! artifacts unless `--force`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use uec::backbone::{ar_rollout, export_replay, RolloutOptions};
use uec::calibration::{evaluate_beta_grid, select_beta, BetaTable};
use uec::config::RunConfig;
use uec::corrector::{Checkpoint, CorrectionSample, UecStdModel};
use uec::data::make_windows;
use uec::decomp::DecompConfig;
use uec::error::Error;
use uec::evaluation::{accumulation_diagnostic, balanced_windows, prepare, run_protocol, Metric};
use uec::pipeline::{build_samples, split_samples, train_uec};

#[derive(Parser)]
#[command(name = "uec", about = "Post-hoc error correction for chunked autoregressive forecasting", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; omitted means built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the decomposition kernel size (odd).
    #[arg(long)]
    kernel_size: Option<usize>,
    /// Override the history width W.
    #[arg(long)]
    w: Option<usize>,
    /// Override the chunk length L.
    #[arg(long)]
    l: Option<usize>,
    /// Override the validation rollout length T'.
    #[arg(long)]
    t_prime: Option<usize>,
    /// Override the evaluation horizons, comma-separated.
    #[arg(long, value_delimiter = ',')]
    horizons: Option<Vec<usize>>,
    /// Override the sample-building stride.
    #[arg(long)]
    stride_samples: Option<usize>,
    /// Override the test-evaluation stride.
    #[arg(long)]
    stride_eval: Option<usize>,
    /// Worker cap; this build computes serially, so only 1 is accepted.
    #[arg(long)]
    threads: Option<usize>,
    /// Proceed even when upstream artifacts carry a different config hash.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Load, split, and normalize the data; write a summary.
    Ingest(Common),
    /// Roll the backbone out from a given position.
    Rollout {
        #[command(flatten)]
        common: Common,
        /// Absolute index of the last history row.
        #[arg(long)]
        start: usize,
        /// Rollout length.
        #[arg(long)]
        t_total: usize,
        /// Feed ground truth at chunk boundaries instead of predictions.
        #[arg(long)]
        teacher_forced: bool,
    },
    /// Compare autoregressive vs teacher-forced error per horizon.
    Diagnose(Common),
    /// Build corrector training samples from validation rollouts.
    BuildSamples(Common),
    /// Train the corrector on previously built samples.
    TrainUec(Common),
    /// Score the beta grid on the balanced set and record the choice.
    SelectBeta {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "mse")]
        metric: MetricArg,
    },
    /// Run the full protocol and write report.json / report.csv.
    Evaluate(Common),
    /// Export backbone forecasts for a segment as an exchange file.
    ExportForecasts {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        segment: String,
        #[arg(long, default_value = "series")]
        series_id: String,
        /// Stride between exported forecast origins.
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum MetricArg {
    Mse,
    Mae,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::NonFinite(_) => 4,
        Error::Config(_) | Error::BadSplitFractions(_) | Error::Json(_) => 2,
        _ => 3,
    }
}

fn load_config(common: &Common) -> uec::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(ks) = common.kernel_size {
        cfg.decomp = DecompConfig {
            kernel_size: ks,
            ..cfg.decomp
        };
    }
    if let Some(w) = common.w {
        cfg.w = w;
    }
    if let Some(l) = common.l {
        cfg.l = l;
    }
    if let Some(t_prime) = common.t_prime {
        cfg.t_prime = t_prime;
    }
    if let Some(ref horizons) = common.horizons {
        cfg.horizons = horizons.clone();
    }
    if let Some(s) = common.stride_samples {
        cfg.stride_samples = s;
    }
    if let Some(s) = common.stride_eval {
        cfg.stride_eval = s;
    }
    if let Some(threads) = common.threads {
        if threads != 1 {
            return Err(Error::Config(format!(
                "this build computes serially; --threads must be 1, got {threads}"
            )));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> uec::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    std::fs::write(&path, json)?;
    Ok(path)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage_hint: &str) -> uec::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!(
            "missing artifact {}: {e}; run `{stage_hint}` first",
            path.display()
        ))
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn check_hash(artifact: &str, found: &str, expected: &str, force: bool) -> uec::Result<()> {
    if found != expected {
        if force {
            eprintln!(
                "warning: {artifact} was produced by config {found}, expected {expected}; \
                 continuing because of --force"
            );
            return Ok(());
        }
        return Err(Error::Config(format!(
            "{artifact} was produced by a different config (hash {found}, expected {expected}); \
             re-run the earlier stage or pass --force"
        )));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SampleArtifact {
    config_hash: String,
    w: usize,
    l: usize,
    d: usize,
    t_prime: usize,
    samples: Vec<CorrectionSample>,
}

#[derive(Serialize, Deserialize)]
struct BetaRecord {
    config_hash: String,
    table: BetaTable,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta_mae: Option<f64>,
}

fn run(cli: Cli) -> uec::Result<()> {
    match cli.cmd {
        Cmd::Ingest(common) => {
            let cfg = load_config(&common)?;
            let prepared = prepare(&cfg)?;
            #[derive(Serialize)]
            struct IngestSummary {
                config_hash: String,
                rows: usize,
                channels: Vec<String>,
                train_len: usize,
                val_len: usize,
                test_len: usize,
                val_offset: usize,
                test_offset: usize,
                mean: Vec<f64>,
                std: Vec<f64>,
            }
            let summary = IngestSummary {
                config_hash: cfg.hash(),
                rows: prepared.z.len(),
                channels: prepared.z.channel_names.clone(),
                train_len: prepared.z_train.len(),
                val_len: prepared.z_val.len(),
                test_len: prepared.z_test.len(),
                val_offset: prepared.val_offset,
                test_offset: prepared.test_offset,
                mean: prepared.normalizer.mean.to_vec(),
                std: prepared.normalizer.std.to_vec(),
            };
            let path = write_json(&common.out, "ingest.json", &summary)?;
            println!("ingest: {} rows -> {}", summary.rows, path.display());
        }
        Cmd::Rollout {
            common,
            start,
            t_total,
            teacher_forced,
        } => {
            let cfg = load_config(&common)?;
            let prepared = prepare(&cfg)?;
            if start + 1 < cfg.w || start + 1 + t_total > prepared.z.len() {
                return Err(Error::TooShort {
                    needed: start + 1 + t_total,
                    have: prepared.z.len(),
                });
            }
            let history = prepared
                .z
                .values
                .slice(ndarray::s![start + 1 - cfg.w..=start, ..])
                .to_owned();
            let truth = prepared
                .z
                .values
                .slice(ndarray::s![start + 1..start + 1 + t_total, ..])
                .to_owned();
            let opts = RolloutOptions {
                teacher_forced,
                overlap: cfg.overlap,
                start_index: Some(start),
            };
            let out = ar_rollout(
                prepared.forecaster.as_ref(),
                &history,
                t_total,
                teacher_forced.then_some(&truth),
                &opts,
            )?;
            std::fs::create_dir_all(&common.out)?;
            let csv_path = common.out.join("rollout.csv");
            let mut csv = String::from("step,");
            csv.push_str(&prepared.z.channel_names.join(","));
            csv.push('\n');
            for (i, row) in out.rows().into_iter().enumerate() {
                csv.push_str(&format!("{}", i + 1));
                for v in row {
                    csv.push_str(&format!(",{v}"));
                }
                csv.push('\n');
            }
            std::fs::write(&csv_path, csv)?;
            #[derive(Serialize)]
            struct RolloutMeta {
                config_hash: String,
                start: usize,
                t_total: usize,
                teacher_forced: bool,
                space: &'static str,
                mse_vs_truth: f64,
            }
            write_json(
                &common.out,
                "rollout.json",
                &RolloutMeta {
                    config_hash: cfg.hash(),
                    start,
                    t_total,
                    teacher_forced,
                    space: "normalized",
                    mse_vs_truth: uec::evaluation::mse(&out, &truth)?,
                },
            )?;
            println!("rollout: {t_total} steps -> {}", csv_path.display());
        }
        Cmd::Diagnose(common) => {
            let cfg = load_config(&common)?;
            let prepared = prepare(&cfg)?;
            let rows = accumulation_diagnostic(
                prepared.forecaster.as_ref(),
                &prepared.z_test,
                &cfg.horizons,
                cfg.stride_eval,
                Some(prepared.test_offset),
            )?;
            std::fs::create_dir_all(&common.out)?;
            let mut csv = String::from("horizon,windows,ar_mse,tf_mse,rel_increase_pct\n");
            for r in &rows {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.horizon, r.windows, r.ar_mse, r.tf_mse, r.rel_increase_pct
                ));
            }
            let csv_path = common.out.join("diagnose.csv");
            std::fs::write(&csv_path, csv)?;
            #[derive(Serialize)]
            struct Diagnose<'a> {
                config_hash: String,
                rows: &'a [uec::evaluation::DiagnosticRow],
            }
            write_json(
                &common.out,
                "diagnose.json",
                &Diagnose {
                    config_hash: cfg.hash(),
                    rows: &rows,
                },
            )?;
            for r in &rows {
                println!(
                    "horizon {:>4}: ar/tf error increase {:+.2}%",
                    r.horizon, r.rel_increase_pct
                );
            }
            println!("diagnose -> {}", csv_path.display());
        }
        Cmd::BuildSamples(common) => {
            let cfg = load_config(&common)?;
            let prepared = prepare(&cfg)?;
            let samples = build_samples(
                prepared.forecaster.as_ref(),
                &prepared.z_val,
                cfg.t_prime,
                cfg.stride_samples,
                cfg.overlap,
                Some(prepared.val_offset),
            )?;
            let artifact = SampleArtifact {
                config_hash: cfg.hash(),
                w: cfg.w,
                l: cfg.l,
                d: prepared.z.dims(),
                t_prime: cfg.t_prime,
                samples,
            };
            let path = write_json(&common.out, "samples.json", &artifact)?;
            println!(
                "build-samples: {} samples -> {}",
                artifact.samples.len(),
                path.display()
            );
        }
        Cmd::TrainUec(common) => {
            let cfg = load_config(&common)?;
            let artifact: SampleArtifact =
                read_json(&common.out.join("samples.json"), "uec build-samples")?;
            check_hash("samples.json", &artifact.config_hash, &cfg.hash(), common.force)?;
            let set = split_samples(artifact.samples, cfg.train.train_fraction)?;
            let mut rng = <rand_chacha::ChaCha20Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
            let mut model = UecStdModel::new_seeded(
                artifact.w,
                artifact.l,
                artifact.d,
                cfg.hidden,
                cfg.dropout_p,
                cfg.decomp,
                cfg.ablation,
                &mut rng,
            );
            let mut train_cfg = cfg.train.clone();
            train_cfg.seed = cfg.seed.wrapping_add(1);
            let report = train_uec(&mut model, &set, &train_cfg)?;
            let mut ckpt = model.to_checkpoint();
            ckpt.meta.insert(
                "config_hash".into(),
                serde_json::Value::String(cfg.hash()),
            );
            write_json(&common.out, "checkpoint.json", &ckpt)?;
            let path = write_json(&common.out, "train.json", &report)?;
            println!(
                "train-uec: best holdout loss {:.6} at step {} -> {}",
                report.best_holdout,
                report.best_step,
                path.display()
            );
        }
        Cmd::SelectBeta { common, metric } => {
            let cfg = load_config(&common)?;
            let prepared = prepare(&cfg)?;
            let samples: SampleArtifact =
                read_json(&common.out.join("samples.json"), "uec build-samples")?;
            check_hash("samples.json", &samples.config_hash, &cfg.hash(), common.force)?;
            let ckpt: Checkpoint =
                read_json(&common.out.join("checkpoint.json"), "uec train-uec")?;
            let ckpt_hash = ckpt
                .meta
                .get("config_hash")
                .and_then(|v| v.as_str())
                .unwrap_or("")
                .to_string();
            check_hash("checkpoint.json", &ckpt_hash, &cfg.hash(), common.force)?;
            let model = UecStdModel::from_checkpoint(&ckpt)?;
            let set = split_samples(samples.samples, cfg.train.train_fraction)?;
            let balanced = balanced_windows(
                &cfg,
                &prepared.z_train,
                &prepared.z_val,
                prepared.val_offset,
                &set.holdout,
            )?;
            let opts = RolloutOptions {
                teacher_forced: false,
                overlap: cfg.overlap,
                start_index: None,
            };
            let table = evaluate_beta_grid(
                prepared.forecaster.as_ref(),
                &model,
                &balanced,
                &cfg.grid,
                &opts,
            )?;
            let betas_path = common.out.join("betas.json");
            let mut record: BetaRecord = if betas_path.exists() {
                let existing: BetaRecord = read_json(&betas_path, "uec select-beta")?;
                check_hash("betas.json", &existing.config_hash, &cfg.hash(), common.force)?;
                existing
            } else {
                BetaRecord {
                    config_hash: cfg.hash(),
                    table: table.clone(),
                    beta_mse: None,
                    beta_mae: None,
                }
            };
            record.table = table;
            let chosen = match metric {
                MetricArg::Mse => {
                    let (beta, score) = select_beta(&record.table, Metric::Mse);
                    record.beta_mse = Some(beta);
                    (beta, score, "mse")
                }
                MetricArg::Mae => {
                    let (beta, score) = select_beta(&record.table, Metric::Mae);
                    record.beta_mae = Some(beta);
                    (beta, score, "mae")
                }
            };
            let path = write_json(&common.out, "betas.json", &record)?;
            println!(
                "select-beta: beta_{} = {} ({} = {:.6}) -> {}",
                chosen.2,
                chosen.0,
                chosen.2,
                chosen.1,
                path.display()
            );
        }
        Cmd::Evaluate(common) => {
            let cfg = load_config(&common)?;
            // Refuse stale upstream artifacts from other configs.
            for name in ["samples.json", "checkpoint.json", "betas.json"] {
                let path = common.out.join(name);
                if path.exists() {
                    let value: serde_json::Value = read_json(&path, "uec evaluate")?;
                    let found = value
                        .get("config_hash")
                        .or_else(|| value.get("meta").and_then(|m| m.get("config_hash")))
                        .and_then(|v| v.as_str())
                        .unwrap_or("");
                    check_hash(name, found, &cfg.hash(), common.force)?;
                }
            }
            let artifacts = run_protocol(&cfg)?;
            write_json(&common.out, "checkpoint.json", &artifacts.checkpoint)?;
            write_json(&common.out, "train.json", &artifacts.train_report)?;
            let report_path = common.out.join("report.json");
            std::fs::create_dir_all(&common.out)?;
            let mut json = artifacts.report.to_json();
            json.push('\n');
            std::fs::write(&report_path, json)?;
            std::fs::write(common.out.join("report.csv"), artifacts.report.to_csv())?;
            println!(
                "evaluate: beta_mse = {}, beta_mae = {}",
                artifacts.report.beta_mse, artifacts.report.beta_mae
            );
            for row in &artifacts.report.rows {
                println!(
                    "horizon {:>4}: mse {:.6} -> {:.6} ({:+.2}%), mae {:.6} -> {:.6} ({:+.2}%)",
                    row.horizon,
                    row.mse_uncorrected,
                    row.mse_corrected,
                    row.reduction_mse_pct,
                    row.mae_uncorrected,
                    row.mae_corrected,
                    row.reduction_mae_pct,
                );
            }
            println!("report -> {}", report_path.display());
        }
        Cmd::ExportForecasts {
            common,
            segment,
            series_id,
            stride,
        } => {
            let cfg = load_config(&common)?;
            if stride == 0 {
                return Err(Error::Config("stride must be positive".into()));
            }
            let prepared = prepare(&cfg)?;
            let (frame, offset) = match segment.as_str() {
                "train" => (&prepared.z_train, 0usize),
                "val" => (&prepared.z_val, prepared.val_offset),
                "test" => (&prepared.z_test, prepared.test_offset),
                other => {
                    return Err(Error::Config(format!(
                        "unknown segment '{other}' (expected train, val, or test)"
                    )))
                }
            };
            let windows = make_windows(frame, cfg.w, cfg.l, stride)?;
            let mut records = Vec::with_capacity(windows.len());
            for window in &windows {
                let t = offset + window.start_index;
                let chunk = prepared
                    .forecaster
                    .forecast_at(t, &window.history)?;
                records.push((t, chunk));
            }
            std::fs::create_dir_all(&common.out)?;
            let path = common.out.join("forecasts.jsonl");
            export_replay(&path, &series_id, &records)?;
            println!(
                "export-forecasts: {} records for '{series_id}' -> {}",
                records.len(),
                path.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
