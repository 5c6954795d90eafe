//! Metrics, the error-accumulation diagnostic, and the end-to-end
//! protocol that trains a corrector, calibrates beta, and scores
//! corrected against uncorrected rollouts on the test segment.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ar_rollout, make_toy, Forecaster, RolloutOptions};
use crate::calibration::{build_balanced_set, evaluate_beta_grid, select_beta, BetaTable};
use crate::config::{BackboneSpec, DataSource, RunConfig};
use crate::corrector::{Checkpoint, UecStdModel};
use crate::data::{fit_normalizer, load_csv, make_windows, split, SeriesFrame, Window};
use crate::error::{Error, Result};
use crate::pipeline::{
    build_samples, rollout_with_delta, split_samples, train_uec, TrainReport,
};
use crate::synth::generate;

/// Cells whose true magnitude is at or below this bound are excluded
/// from MAPE (and counted) instead of blowing up the percentage.
pub const EPS_MAPE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mse,
    Mae,
}

/// Streaming metric accumulator over (prediction, truth) pairs, so large
/// window sets never need to be stacked in memory. Accumulation order is
/// fixed by the caller's iteration order, keeping results deterministic.
#[derive(Debug, Clone, Default)]
pub struct MetricAccum {
    sq_sum: f64,
    abs_sum: f64,
    cells: usize,
    ape_sum: f64,
    ape_cells: usize,
    excluded: usize,
}

impl MetricAccum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pred: &Array2<f64>, truth: &Array2<f64>) -> Result<()> {
        if pred.dim() != truth.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", truth.dim()),
                got: format!("{:?}", pred.dim()),
            });
        }
        for (&p, &t) in pred.iter().zip(truth.iter()) {
            let r = p - t;
            self.sq_sum += r * r;
            self.abs_sum += r.abs();
            self.cells += 1;
            if t.abs() > EPS_MAPE {
                self.ape_sum += (r / t).abs();
                self.ape_cells += 1;
            } else {
                self.excluded += 1;
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn excluded(&self) -> usize {
        self.excluded
    }

    pub fn mse(&self) -> Result<f64> {
        if self.cells == 0 {
            return Err(Error::EmptySet);
        }
        Ok(self.sq_sum / self.cells as f64)
    }

    pub fn mae(&self) -> Result<f64> {
        if self.cells == 0 {
            return Err(Error::EmptySet);
        }
        Ok(self.abs_sum / self.cells as f64)
    }

    /// MAPE in percent over the non-excluded cells, with the excluded
    /// count. Fails if every cell was excluded.
    pub fn mape(&self) -> Result<(f64, usize)> {
        if self.cells == 0 {
            return Err(Error::EmptySet);
        }
        if self.ape_cells == 0 {
            return Err(Error::AllCellsExcluded);
        }
        Ok((100.0 * self.ape_sum / self.ape_cells as f64, self.excluded))
    }
}

pub fn mse(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    let mut a = MetricAccum::new();
    a.add(pred, truth)?;
    a.mse()
}

pub fn mae(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    let mut a = MetricAccum::new();
    a.add(pred, truth)?;
    a.mae()
}

pub fn mape(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<(f64, usize)> {
    let mut a = MetricAccum::new();
    a.add(pred, truth)?;
    a.mape()
}

/// Signed percentage change of the corrected error relative to the
/// baseline error; negative values are improvements.
pub fn error_reduction(corrected: f64, baseline: f64) -> Result<f64> {
    if baseline == 0.0 {
        return Err(Error::ZeroBaseline);
    }
    Ok(100.0 * (corrected - baseline) / baseline)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub horizon: usize,
    pub windows: usize,
    pub ar_mse: f64,
    pub tf_mse: f64,
    /// `100 * (ar_mse - tf_mse) / tf_mse`: how much error the
    /// autoregressive feedback adds over feeding truth at chunk
    /// boundaries. Exactly 0 when the horizon fits in a single chunk.
    pub rel_increase_pct: f64,
}

/// Compares autoregressive against teacher-forced rollouts over sliding
/// windows, per horizon. Isolates the error contributed by feeding
/// predictions back as inputs.
pub fn accumulation_diagnostic(
    f: &dyn Forecaster,
    frame: &SeriesFrame,
    horizons: &[usize],
    stride: usize,
    base_index: Option<usize>,
) -> Result<Vec<DiagnosticRow>> {
    let w = f.input_width();
    let mut out = Vec::with_capacity(horizons.len());
    for &h in horizons {
        let windows = make_windows(frame, w, h, stride)?;
        let mut ar_acc = MetricAccum::new();
        let mut tf_acc = MetricAccum::new();
        for window in &windows {
            let start_index = base_index.map(|b| b + window.start_index);
            let ar = ar_rollout(
                f,
                &window.history,
                h,
                None,
                &RolloutOptions {
                    teacher_forced: false,
                    start_index,
                    ..Default::default()
                },
            )?;
            let tf = ar_rollout(
                f,
                &window.history,
                h,
                Some(&window.target),
                &RolloutOptions {
                    teacher_forced: true,
                    start_index,
                    ..Default::default()
                },
            )?;
            ar_acc.add(&ar, &window.target)?;
            tf_acc.add(&tf, &window.target)?;
        }
        let ar_mse = ar_acc.mse()?;
        let tf_mse = tf_acc.mse()?;
        let rel_increase_pct = if tf_mse == 0.0 {
            if ar_mse == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            100.0 * (ar_mse - tf_mse) / tf_mse
        };
        out.push(DiagnosticRow {
            horizon: h,
            windows: windows.len(),
            ar_mse,
            tf_mse,
            rel_increase_pct,
        });
    }
    Ok(out)
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon: usize,
    pub windows: usize,
    pub mse_uncorrected: f64,
    pub mse_corrected: f64,
    pub mae_uncorrected: f64,
    pub mae_corrected: f64,
    pub mape_uncorrected: f64,
    pub mape_corrected: f64,
    pub mape_excluded_cells: usize,
    pub reduction_mse_pct: f64,
    pub reduction_mae_pct: f64,
}

/// Final evaluation artifact. Contains no timestamps or machine state,
/// so re-running an identical config yields byte-identical output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub beta_mse: f64,
    pub beta_mae: f64,
    pub beta_table: BetaTable,
    pub rows: Vec<HorizonRow>,
    pub avg_mse_uncorrected: f64,
    pub avg_mse_corrected: f64,
    pub avg_mae_uncorrected: f64,
    pub avg_mae_corrected: f64,
    pub avg_reduction_mse_pct: f64,
    pub avg_reduction_mae_pct: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    /// Flat per-horizon table plus an `avg` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "horizon,windows,mse_uncorrected,mse_corrected,mae_uncorrected,mae_corrected,\
             mape_uncorrected,mape_corrected,mape_excluded_cells,reduction_mse_pct,reduction_mae_pct\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.horizon,
                r.windows,
                r.mse_uncorrected,
                r.mse_corrected,
                r.mae_uncorrected,
                r.mae_corrected,
                r.mape_uncorrected,
                r.mape_corrected,
                r.mape_excluded_cells,
                r.reduction_mse_pct,
                r.reduction_mae_pct,
            ));
        }
        out.push_str(&format!(
            "avg,,{},{},{},{},,,,{},{}\n",
            self.avg_mse_uncorrected,
            self.avg_mse_corrected,
            self.avg_mae_uncorrected,
            self.avg_mae_corrected,
            self.avg_reduction_mse_pct,
            self.avg_reduction_mae_pct,
        ));
        out
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolArtifacts {
    pub report: EvalReport,
    pub checkpoint: Checkpoint,
    pub train_report: TrainReport,
}

fn load_data(cfg: &RunConfig) -> Result<SeriesFrame> {
    match &cfg.data {
        DataSource::Csv {
            path,
            timestamp_column,
        } => load_csv(path, timestamp_column.as_deref()),
        DataSource::Synthetic(synth) => generate(synth),
    }
}

/// Data and backbone shared by every pipeline stage: the full series
/// normalized with training-segment statistics, the segment boundaries,
/// and the fitted (or loaded) forecaster.
pub struct Prepared {
    /// Full normalized series.
    pub z: SeriesFrame,
    pub z_train: SeriesFrame,
    pub z_val: SeriesFrame,
    pub z_test: SeriesFrame,
    /// Absolute index of the first validation row.
    pub val_offset: usize,
    /// Absolute index of the first test row.
    pub test_offset: usize,
    pub normalizer: crate::data::Normalizer,
    pub forecaster: Box<dyn Forecaster + Send + Sync>,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let raw = load_data(cfg)?;
    let segments = split(&raw, &cfg.split)?;
    let val_pos = segments
        .iter()
        .position(|(name, _)| name == "val")
        .expect("split layouts always contain a val segment");
    let val_offset: usize = segments[..val_pos].iter().map(|(_, s)| s.len()).sum();
    let test_offset: usize = raw.len() - segments.last().unwrap().1.len();

    let normalizer = fit_normalizer(&segments[0].1);
    let z = normalizer.apply(&raw);
    let z_train = z.slice_rows(0, segments[0].1.len());
    let z_val = z.slice_rows(val_offset, val_offset + segments[val_pos].1.len());
    let z_test = z.slice_rows(test_offset, raw.len());

    let forecaster: Box<dyn Forecaster + Send + Sync> = match &cfg.backbone {
        BackboneSpec::Toy(kind) => make_toy(kind, &z_train, cfg.w, cfg.l)?,
        BackboneSpec::Replay { path, series_id } => {
            Box::new(crate::backbone::load_replay(path, series_id, cfg.w)?)
        }
    };
    Ok(Prepared {
        z,
        z_train,
        z_val,
        z_test,
        val_offset,
        test_offset,
        normalizer,
        forecaster,
    })
}

/// Beta-selection window set: every distinct corrector-holdout window
/// that can support the calibration horizon, balanced up to the target
/// size with seeded samples from the training segment.
pub fn balanced_windows(
    cfg: &RunConfig,
    z_train: &SeriesFrame,
    z_val: &SeriesFrame,
    val_offset: usize,
    holdout: &[crate::corrector::CorrectionSample],
) -> Result<Vec<Window>> {
    let t_eval = cfg.beta_horizon();
    if z_val.len() < cfg.w + t_eval {
        return Err(Error::TooShort {
            needed: cfg.w + t_eval,
            have: z_val.len(),
        });
    }
    let mut holdout_starts: Vec<usize> = holdout.iter().map(|s| s.window_start).collect();
    holdout_starts.sort_unstable();
    holdout_starts.dedup();
    let holdout_windows: Vec<Window> = holdout_starts
        .iter()
        .filter(|&&start| start + 1 + t_eval <= z_val.len())
        .map(|&start| Window {
            history: z_val
                .values
                .slice(ndarray::s![start + 1 - cfg.w..=start, ..])
                .to_owned(),
            target: z_val
                .values
                .slice(ndarray::s![start + 1..start + 1 + t_eval, ..])
                .to_owned(),
            start_index: val_offset + start,
        })
        .collect();
    let target_size = cfg
        .balanced_target
        .unwrap_or(z_val.len() - cfg.w - t_eval + 1);
    build_balanced_set(
        holdout_windows,
        z_train,
        cfg.w,
        t_eval,
        target_size,
        cfg.seed.wrapping_add(2),
    )
}

/// Runs the full protocol from one config:
///
/// 1. load and chronologically split the data, normalize with
///    training-segment statistics;
/// 2. fit (or load) the backbone forecaster;
/// 3. build correction samples from validation rollouts and train the
///    corrector with early stopping;
/// 4. pick beta per metric on a balanced validation set;
/// 5. score corrected vs uncorrected rollouts over the test segment.
///
/// All stage seeds derive from `cfg.seed`; `cfg.train.seed` is ignored
/// here so a single knob controls reproducibility.
pub fn run_protocol(cfg: &RunConfig) -> Result<ProtocolArtifacts> {
    let prepared = prepare(cfg)?;
    let Prepared {
        z,
        z_train,
        z_val,
        val_offset,
        test_offset,
        forecaster,
        ..
    } = prepared;
    let f = forecaster.as_ref();

    // Corrector training on validation rollouts.
    let samples = build_samples(
        f,
        &z_val,
        cfg.t_prime,
        cfg.stride_samples,
        cfg.overlap,
        Some(val_offset),
    )?;
    let set = split_samples(samples, cfg.train.train_fraction)?;
    let mut model_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut model = UecStdModel::new_seeded(
        cfg.w,
        cfg.l,
        z.dims(),
        cfg.hidden,
        cfg.dropout_p,
        cfg.decomp,
        cfg.ablation,
        &mut model_rng,
    );
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed.wrapping_add(1);
    let train_report = train_uec(&mut model, &set, &train_cfg)?;

    // Beta selection on a balanced set at the calibration horizon.
    let balanced = balanced_windows(cfg, &z_train, &z_val, val_offset, &set.holdout)?;
    let opts = RolloutOptions {
        teacher_forced: false,
        overlap: cfg.overlap,
        start_index: None,
    };
    let table = evaluate_beta_grid(f, &model, &balanced, &cfg.grid, &opts)?;
    let (beta_mse, _) = select_beta(&table, Metric::Mse);
    let (beta_mae, _) = select_beta(&table, Metric::Mae);

    // Test evaluation. Histories may reach back before the test segment;
    // targets lie entirely inside it.
    let mut rows = Vec::with_capacity(cfg.horizons.len());
    for &h in &cfg.horizons {
        let first = (cfg.w - 1).max(test_offset.saturating_sub(1));
        if first + 1 + h > z.len() {
            return Err(Error::TooShort {
                needed: first + 1 + h,
                have: z.len(),
            });
        }
        let mut unc = MetricAccum::new();
        let mut cor_mse = MetricAccum::new();
        let mut cor_mae = MetricAccum::new();
        let mut windows = 0usize;
        let mut t = first;
        while t + 1 + h <= z.len() {
            let history = z.values.slice(ndarray::s![t + 1 - cfg.w..=t, ..]).to_owned();
            let truth = z.values.slice(ndarray::s![t + 1..t + 1 + h, ..]).to_owned();
            let w_opts = RolloutOptions {
                start_index: Some(t),
                ..opts
            };
            let (base, delta) = rollout_with_delta(f, &model, &history, h, &w_opts)?;
            unc.add(&base, &truth)?;
            let pred_mse = if beta_mse == 0.0 {
                base.clone()
            } else {
                &base + &(beta_mse * &delta)
            };
            cor_mse.add(&pred_mse, &truth)?;
            if beta_mae == beta_mse {
                cor_mae.add(&pred_mse, &truth)?;
            } else {
                let pred_mae = &base + &(beta_mae * &delta);
                cor_mae.add(&pred_mae, &truth)?;
            }
            windows += 1;
            t += cfg.stride_eval;
        }
        let (mape_unc, excluded) = unc.mape()?;
        let (mape_cor, _) = cor_mse.mape()?;
        let mse_u = unc.mse()?;
        let mse_c = cor_mse.mse()?;
        let mae_u = unc.mae()?;
        let mae_c = cor_mae.mae()?;
        rows.push(HorizonRow {
            horizon: h,
            windows,
            mse_uncorrected: mse_u,
            mse_corrected: mse_c,
            mae_uncorrected: mae_u,
            mae_corrected: mae_c,
            mape_uncorrected: mape_unc,
            mape_corrected: mape_cor,
            mape_excluded_cells: excluded,
            reduction_mse_pct: error_reduction(mse_c, mse_u)?,
            reduction_mae_pct: error_reduction(mae_c, mae_u)?,
        });
    }

    let n = rows.len() as f64;
    let avg = |sel: fn(&HorizonRow) -> f64| rows.iter().map(sel).sum::<f64>() / n;
    let avg_mse_uncorrected = avg(|r| r.mse_uncorrected);
    let avg_mse_corrected = avg(|r| r.mse_corrected);
    let avg_mae_uncorrected = avg(|r| r.mae_uncorrected);
    let avg_mae_corrected = avg(|r| r.mae_corrected);

    let mut checkpoint = model.to_checkpoint();
    checkpoint.meta.insert(
        "config_hash".into(),
        serde_json::Value::String(cfg.hash()),
    );
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        beta_mse,
        beta_mae,
        beta_table: table,
        rows,
        avg_mse_uncorrected,
        avg_mse_corrected,
        avg_mae_uncorrected,
        avg_mae_corrected,
        avg_reduction_mse_pct: error_reduction(avg_mse_corrected, avg_mse_uncorrected)?,
        avg_reduction_mae_pct: error_reduction(avg_mae_corrected, avg_mae_uncorrected)?,
    };
    Ok(ProtocolArtifacts {
        report,
        checkpoint,
        train_report,
    })
}
