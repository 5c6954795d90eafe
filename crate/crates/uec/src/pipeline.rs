//! Training-sample construction from validation rollouts, the corrector
//! training loop, and the corrected rollout that applies the trained
//! model chunk by chunk.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ar_rollout, chunk_schedule, Forecaster, OverlapMode, RolloutOptions};
use crate::corrector::{std_loss, CorrectionSample, StdLossWeights, UecStdModel};
use crate::data::SeriesFrame;
use crate::error::{Error, Result};
use crate::micronet::{AdamState, LossKind};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub loss: LossKind,
    pub weights: StdLossWeights,
    /// Chronological share of samples used for gradient steps; the rest
    /// is the early-stopping holdout.
    pub train_fraction: f64,
    pub eval_every: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            batch: 64,
            lr: 1e-3,
            loss: LossKind::huber_default(),
            weights: StdLossWeights::default(),
            train_fraction: 0.7,
            eval_every: 10,
            patience: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "steps, batch, and eval_every must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return Err(Error::Config(
                "train fraction must be strictly between 0 and 1".into(),
            ));
        }
        self.weights.validate()
    }
}

/// Correction samples split chronologically into a gradient-step set and
/// an early-stopping holdout.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub train: Vec<CorrectionSample>,
    pub holdout: Vec<CorrectionSample>,
}

/// Builds correction training tuples from stride-`stride` validation
/// windows. Each window is rolled out autoregressively to `t_prime`;
/// every chunk yields one sample pairing the chunk's input window and
/// forecast with the ground-truth forecast error. Chunk 0 sees the true
/// history; later chunks see the model's own (predicted) history, as at
/// deployment. `base_index` is the absolute index of the frame's first
/// row, needed only by positional (replay/oracle) backbones.
pub fn build_samples(
    f: &dyn Forecaster,
    val: &SeriesFrame,
    t_prime: usize,
    stride: usize,
    overlap: OverlapMode,
    base_index: Option<usize>,
) -> Result<Vec<CorrectionSample>> {
    assert!(stride >= 1);
    let w = f.input_width();
    let l = f.output_width();
    if t_prime < l {
        return Err(Error::Config(format!(
            "rollout length {t_prime} is shorter than the chunk length {l}"
        )));
    }
    let t = val.len();
    if t < w + t_prime {
        return Err(Error::TooShort {
            needed: w + t_prime,
            have: t,
        });
    }
    let count = (t - w - t_prime) / stride + 1;
    let mut samples = Vec::with_capacity(count * t_prime.div_ceil(l));
    for i in 0..count {
        let start = w - 1 + i * stride;
        let history = val
            .values
            .slice(ndarray::s![start + 1 - w..=start, ..])
            .to_owned();
        let truth = val
            .values
            .slice(ndarray::s![start + 1..start + 1 + t_prime, ..]);
        let opts = RolloutOptions {
            teacher_forced: false,
            overlap,
            start_index: base_index.map(|b| b + start),
        };
        let rollout = ar_rollout(f, &history, t_prime, None, &opts)?;
        for (k, &s) in chunk_schedule(t_prime, l).iter().enumerate() {
            let forecast = rollout.slice(ndarray::s![s..s + l, ..]).to_owned();
            let target_error = &truth.slice(ndarray::s![s..s + l, ..]) - &forecast;
            let input_history = gather_input(&history, &rollout, s, w);
            samples.push(CorrectionSample {
                input_history,
                forecast,
                target_error,
                chunk_index: k,
                window_start: start,
            });
        }
    }
    Ok(samples)
}

/// The W rows preceding forecast offset `s`, drawn from the true history
/// for negative combined indices and from the rollout otherwise. Matches
/// the input-gathering rule inside `ar_rollout`.
fn gather_input(history: &Array2<f64>, rollout: &Array2<f64>, s: usize, w: usize) -> Array2<f64> {
    let d = history.ncols();
    let mut input = Array2::zeros((w, d));
    for j in 0..w {
        let idx = s as isize - w as isize + j as isize;
        let row = if idx < 0 {
            history.row((w as isize + idx) as usize)
        } else {
            rollout.row(idx as usize)
        };
        input.row_mut(j).assign(&row);
    }
    input
}

/// Chronological split of correction samples: the earliest
/// `train_fraction` of windows train the corrector, the rest form the
/// early-stopping holdout. Both sides are guaranteed non-empty.
pub fn split_samples(samples: Vec<CorrectionSample>, train_fraction: f64) -> Result<SampleSet> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::DegenerateSplit(format!(
            "need at least 2 correction samples to split, have {n}"
        )));
    }
    let cut = ((train_fraction * n as f64 + 1e-9).floor() as usize).clamp(1, n - 1);
    let mut samples = samples;
    let holdout = samples.split_off(cut);
    Ok(SampleSet {
        train: samples,
        holdout,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub train_loss: f64,
    pub holdout_loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub trace: Vec<TracePoint>,
    pub best_holdout: f64,
    pub best_step: usize,
    pub stopped_early: bool,
}

fn batch_arrays(samples: &[CorrectionSample], idx: &[usize]) -> (Vec<Array2<f64>>, Vec<Array2<f64>>, Array3<f64>) {
    let (l, d) = samples[idx[0]].target_error.dim();
    let mut target = Array3::zeros((idx.len(), l, d));
    let mut histories = Vec::with_capacity(idx.len());
    let mut forecasts = Vec::with_capacity(idx.len());
    for (row, &i) in idx.iter().enumerate() {
        histories.push(samples[i].input_history.clone());
        forecasts.push(samples[i].forecast.clone());
        target
            .index_axis_mut(Axis(0), row)
            .assign(&samples[i].target_error);
    }
    (histories, forecasts, target)
}

fn eval_loss(model: &UecStdModel, samples: &[CorrectionSample], cfg: &TrainConfig) -> Result<f64> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let (histories, forecasts, target) = batch_arrays(samples, &idx);
    let views: Vec<ArrayView2<f64>> = histories.iter().map(|a| a.view()).collect();
    let fviews: Vec<ArrayView2<f64>> = forecasts.iter().map(|a| a.view()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let (out, _) = model.forward_batch(&views, &fviews, &mut rng, false)?;
    let (value, _, _) = std_loss(
        &out,
        &target,
        &cfg.weights,
        cfg.loss,
        &model.decomp_cfg,
        model.ablation.output_mode,
    )?;
    Ok(value)
}

/// Minibatch Adam on the correction loss with periodic holdout
/// evaluation, patience-based early stopping, and best-checkpoint
/// restoration. Fully deterministic given `cfg.seed`.
pub fn train_uec(model: &mut UecStdModel, set: &SampleSet, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if set.train.is_empty() || set.holdout.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.param_count(), cfg.lr);
    let mut params = model.params_flat();

    let mut best_holdout = eval_loss(model, &set.holdout, cfg)?;
    let mut best_params = params.clone();
    let mut best_step = 0usize;
    let mut bad_evals = 0usize;
    let mut stopped_early = false;
    let mut trace = Vec::new();

    for step in 1..=cfg.steps {
        let idx: Vec<usize> = if set.train.len() <= cfg.batch {
            (0..set.train.len()).collect()
        } else {
            use rand::Rng;
            (0..cfg.batch)
                .map(|_| rng.gen_range(0..set.train.len()))
                .collect()
        };
        let (histories, forecasts, target) = batch_arrays(&set.train, &idx);
        let views: Vec<ArrayView2<f64>> = histories.iter().map(|a| a.view()).collect();
        let fviews: Vec<ArrayView2<f64>> = forecasts.iter().map(|a| a.view()).collect();
        let (out, cache) = model.forward_batch(&views, &fviews, &mut rng, true)?;
        let (train_loss, grad_t, grad_s) = std_loss(
            &out,
            &target,
            &cfg.weights,
            cfg.loss,
            &model.decomp_cfg,
            model.ablation.output_mode,
        )?;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        let grads = model.backward_batch(&cache, &grad_t, &grad_s);
        adam.update(&mut params, &grads)?;
        model.set_params_flat(&params)?;

        let holdout_loss = if step % cfg.eval_every == 0 || step == cfg.steps {
            let value = eval_loss(model, &set.holdout, cfg)?;
            if value < best_holdout {
                best_holdout = value;
                best_params = params.clone();
                best_step = step;
                bad_evals = 0;
            } else {
                bad_evals += 1;
            }
            Some(value)
        } else {
            None
        };
        trace.push(TracePoint {
            step,
            train_loss,
            holdout_loss,
        });
        if bad_evals >= cfg.patience {
            stopped_early = true;
            break;
        }
    }

    model.set_params_flat(&best_params)?;
    Ok(TrainReport {
        trace,
        best_holdout,
        best_step,
        stopped_early,
    })
}

/// Anything that maps a chunk's input window and forecast to additive
/// trend/seasonal corrections. The trained network is the production
/// implementation; test oracles returning the true error also fit.
/// `t` is the absolute index of the last input row when the rollout
/// knows it, for correctors that look up stored data positionally.
pub trait Corrector {
    fn correct(
        &self,
        t: Option<usize>,
        input: &Array2<f64>,
        forecast: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)>;
}

impl Corrector for UecStdModel {
    fn correct(
        &self,
        _t: Option<usize>,
        input: &Array2<f64>,
        forecast: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        // Inference mode: the RNG is never consumed.
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        self.forward_one(input, forecast, &mut rng, false)
    }
}

/// Runs the uncorrected autoregressive rollout, then computes the
/// corrector's additive delta for every chunk of that rollout. The
/// corrected forecast at strength `beta` is `base + beta * delta`, so
/// `beta = 0` reproduces the uncorrected rollout bit for bit and the
/// corrected forecast is exactly affine in `beta`. Corrections are
/// post hoc: they never feed back into later chunk inputs.
pub fn rollout_with_delta(
    f: &dyn Forecaster,
    corrector: &dyn Corrector,
    history: &Array2<f64>,
    t_total: usize,
    opts: &RolloutOptions,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if opts.teacher_forced {
        return Err(Error::Config(
            "corrected rollouts are autoregressive; teacher forcing does not apply".into(),
        ));
    }
    let w = f.input_width();
    let l = f.output_width();
    if t_total < l {
        return Err(Error::TooShort {
            needed: l,
            have: t_total,
        });
    }
    let base = ar_rollout(f, history, t_total, None, opts)?;
    let d = history.ncols();
    let mut delta = Array2::zeros((t_total, d));
    let mut written_up_to = 0usize;
    for &s in &chunk_schedule(t_total, l) {
        let input = gather_input(history, &base, s, w);
        let forecast = base.slice(ndarray::s![s..s + l, ..]).to_owned();
        let t_abs = opts.start_index.map(|base_idx| base_idx + s);
        let (dt, ds) = corrector.correct(t_abs, &input, &forecast)?;
        let chunk_delta = &dt + &ds;
        for j in 0..l {
            let pos = s + j;
            if opts.overlap == OverlapMode::KeepFirst && pos < written_up_to {
                continue;
            }
            delta.row_mut(pos).assign(&chunk_delta.row(j));
        }
        written_up_to = written_up_to.max(s + l);
    }
    Ok((base, delta))
}

/// Convenience wrapper returning the corrected rollout at strength `beta`.
pub fn corrected_rollout(
    f: &dyn Forecaster,
    corrector: &dyn Corrector,
    history: &Array2<f64>,
    t_total: usize,
    beta: f64,
    opts: &RolloutOptions,
) -> Result<Array2<f64>> {
    let (base, delta) = rollout_with_delta(f, corrector, history, t_total, opts)?;
    if beta == 0.0 {
        return Ok(base);
    }
    Ok(&base + &(beta * &delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{make_toy, ToyForecasterKind};
    use crate::corrector::Ablation;
    use crate::data::{Origin, SeriesFrame};
    use crate::decomp::DecompConfig;
    use crate::synth::{generate, SynthConfig};
    use ndarray::s;

    fn persistence(w: usize, l: usize) -> Box<dyn Forecaster + Send + Sync> {
        let frame = SeriesFrame::new(
            Array2::zeros((w + l + 1, 1)),
            vec!["c0".into()],
            Origin::Raw,
        )
        .unwrap();
        make_toy(&ToyForecasterKind::Persistence, &frame, w, l).unwrap()
    }

    fn ramp_frame(t: usize, d: usize, slope: f64) -> SeriesFrame {
        let values = Array2::from_shape_fn((t, d), |(i, c)| slope * i as f64 + c as f64);
        let names = (0..d).map(|c| format!("c{c}")).collect();
        SeriesFrame::new(values, names, Origin::Raw).unwrap()
    }

    #[test]
    fn sample_count_matches_window_arithmetic() {
        // 400 validation steps, W = L = 96, rollout to 192: 113 windows
        // of two chunks each.
        let val = generate(&SynthConfig {
            length: 400,
            channels: 2,
            ..Default::default()
        })
        .unwrap();
        let f = persistence(96, 96);
        let samples =
            build_samples(f.as_ref(), &val, 192, 1, OverlapMode::Overwrite, None).unwrap();
        assert_eq!(samples.len(), 113 * 2);
        assert!(samples.iter().all(|s| s.chunk_index < 2));
    }

    #[test]
    fn chunk0_true_history_chunk1_predicted() {
        let val = ramp_frame(40, 1, 1.0);
        let f = persistence(8, 8);
        let samples =
            build_samples(f.as_ref(), &val, 16, 100, OverlapMode::Overwrite, None).unwrap();
        assert_eq!(samples.len(), 2);
        // Chunk 0 input is the true first 8 rows.
        assert_eq!(samples[0].input_history, val.values.slice(s![..8, ..]));
        // Persistence repeats row 7 (value 7), so chunk 1's input is the
        // predicted constant block, not the true continuation.
        assert!(samples[1].input_history.iter().all(|&v| v == 7.0));
        // And its target error is truth minus that constant.
        for j in 0..8 {
            assert_eq!(samples[1].target_error[(j, 0)], (16 + j) as f64 - 7.0);
        }
    }

    #[test]
    fn samples_record_forecast_error() {
        let val = ramp_frame(30, 2, 0.5);
        let f = persistence(6, 6);
        let samples =
            build_samples(f.as_ref(), &val, 6, 1, OverlapMode::Overwrite, None).unwrap();
        for s in &samples {
            let recon = &s.forecast + &s.target_error;
            let truth = val
                .values
                .slice(ndarray::s![s.window_start + 1..s.window_start + 7, ..]);
            assert_eq!(recon, truth.to_owned());
        }
    }

    #[test]
    fn split_is_chronological_and_nonempty() {
        let val = generate(&SynthConfig {
            length: 300,
            channels: 1,
            ..Default::default()
        })
        .unwrap();
        let f = persistence(24, 24);
        let samples =
            build_samples(f.as_ref(), &val, 48, 1, OverlapMode::Overwrite, None).unwrap();
        let n = samples.len();
        let set = split_samples(samples, 0.7).unwrap();
        assert_eq!(set.train.len() + set.holdout.len(), n);
        assert!(!set.train.is_empty() && !set.holdout.is_empty());
        let max_train = set.train.iter().map(|s| s.window_start).max().unwrap();
        let min_holdout = set.holdout.iter().map(|s| s.window_start).min().unwrap();
        assert!(max_train <= min_holdout);
    }

    #[test]
    fn split_needs_two_samples() {
        assert!(split_samples(Vec::new(), 0.7).is_err());
    }

    fn small_model(w: usize, l: usize, d: usize, seed: u64) -> UecStdModel {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        UecStdModel::new_seeded(
            w,
            l,
            d,
            16,
            0.5,
            DecompConfig::with_kernel(5),
            Ablation::default(),
            &mut rng,
        )
    }

    #[test]
    fn beta_zero_reproduces_uncorrected_rollout() {
        let frame = generate(&SynthConfig {
            length: 200,
            channels: 2,
            ..Default::default()
        })
        .unwrap();
        let f = persistence(16, 16);
        let model = small_model(16, 16, 2, 1);
        let history = frame.values.slice(s![..16, ..]).to_owned();
        let opts = RolloutOptions::default();
        let base = ar_rollout(f.as_ref(), &history, 48, None, &opts).unwrap();
        let corrected = corrected_rollout(f.as_ref(), &model, &history, 48, 0.0, &opts).unwrap();
        assert_eq!(base, corrected);
    }

    #[test]
    fn corrected_rollout_affine_in_beta() {
        let frame = generate(&SynthConfig {
            length: 200,
            channels: 2,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let f = persistence(16, 16);
        let model = small_model(16, 16, 2, 2);
        let history = frame.values.slice(s![..16, ..]).to_owned();
        let opts = RolloutOptions::default();
        let (base, delta) = rollout_with_delta(f.as_ref(), &model, &history, 40, &opts).unwrap();
        for &beta in &[0.1, 0.3, 0.5, 0.7, 1.0] {
            let corrected =
                corrected_rollout(f.as_ref(), &model, &history, 40, beta, &opts).unwrap();
            let expected = &base + &(beta * &delta);
            let err = (&corrected - &expected)
                .iter()
                .map(|v| v.abs())
                .fold(0.0, f64::max);
            assert!(err <= 1e-12, "beta {beta}: max error {err}");
        }
    }

    #[test]
    fn zero_model_leaves_rollout_unchanged() {
        let frame = ramp_frame(120, 1, 0.2);
        let f = persistence(12, 12);
        let mut model = small_model(12, 12, 1, 3);
        model
            .set_params_flat(&vec![0.0; model.param_count()])
            .unwrap();
        let history = frame.values.slice(s![..12, ..]).to_owned();
        let opts = RolloutOptions::default();
        let base = ar_rollout(f.as_ref(), &history, 36, None, &opts).unwrap();
        let corrected = corrected_rollout(f.as_ref(), &model, &history, 36, 1.0, &opts).unwrap();
        assert_eq!(base, corrected);
    }

    #[test]
    fn training_reduces_holdout_loss_and_is_deterministic() {
        // Persistence on a pure ramp has a deterministic error pattern
        // (slope * (j + 1)), which the corrector can learn quickly.
        let val = ramp_frame(220, 1, 0.1);
        let f = persistence(16, 16);
        let samples =
            build_samples(f.as_ref(), &val, 32, 4, OverlapMode::Overwrite, None).unwrap();
        let set = split_samples(samples, 0.7).unwrap();
        let cfg = TrainConfig {
            steps: 100,
            batch: 16,
            seed: 9,
            ..Default::default()
        };

        let mut model_a = small_model(16, 16, 1, 7);
        let initial = eval_loss(&model_a, &set.holdout, &cfg).unwrap();
        let report_a = train_uec(&mut model_a, &set, &cfg).unwrap();
        assert!(
            report_a.best_holdout < initial,
            "holdout {initial} -> {}",
            report_a.best_holdout
        );
        // The restored parameters reproduce the reported best loss.
        let restored = eval_loss(&model_a, &set.holdout, &cfg).unwrap();
        assert!((restored - report_a.best_holdout).abs() < 1e-12);

        let mut model_b = small_model(16, 16, 1, 7);
        let report_b = train_uec(&mut model_b, &set, &cfg).unwrap();
        assert_eq!(model_a.params_flat(), model_b.params_flat());
        assert_eq!(report_a.trace.len(), report_b.trace.len());
        for (a, b) in report_a.trace.iter().zip(&report_b.trace) {
            assert_eq!(a.train_loss, b.train_loss);
            assert_eq!(a.holdout_loss, b.holdout_loss);
        }
    }

    #[test]
    fn early_stopping_bounds_trace() {
        let val = ramp_frame(120, 1, 0.0);
        let f = persistence(8, 8);
        let samples =
            build_samples(f.as_ref(), &val, 16, 2, OverlapMode::Overwrite, None).unwrap();
        let set = split_samples(samples, 0.7).unwrap();
        // Constant series: persistence is already perfect, the loss is 0
        // and can never improve, so patience trips immediately.
        let cfg = TrainConfig {
            steps: 1000,
            eval_every: 5,
            patience: 2,
            seed: 1,
            ..Default::default()
        };
        let mut model = small_model(8, 8, 1, 11);
        let report = train_uec(&mut model, &set, &cfg).unwrap();
        assert!(report.stopped_early);
        assert!(report.trace.len() < 1000);
    }
}
