//! Black-box forecaster abstraction, toy forecasters, file-replay
//! backbone, and the chunk-based autoregressive rollout engine.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::data::SeriesFrame;
use crate::error::{Error, Result};

/// A fixed forecaster mapping a `W x D` history to an `L x D` forecast.
///
/// `forecast_at` additionally receives the absolute index of the last
/// history row; backbones that replay stored forecasts key on it, all
/// others ignore it.
pub trait Forecaster {
    fn input_width(&self) -> usize;
    fn output_width(&self) -> usize;
    fn forecast(&self, history: &Array2<f64>) -> Result<Array2<f64>>;
    fn forecast_at(&self, _t: usize, history: &Array2<f64>) -> Result<Array2<f64>> {
        self.forecast(history)
    }
}

/// What to do when the realigned final chunk overlaps earlier output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMode {
    /// The final call's full window overwrites the overlap region.
    Overwrite,
    /// Earlier values are kept; only the fresh tail is taken.
    KeepFirst,
}

#[derive(Debug, Clone, Copy)]
pub struct RolloutOptions {
    pub teacher_forced: bool,
    pub overlap: OverlapMode,
    /// Absolute index of the last history row, when known. Forwarded to
    /// `forecast_at` so positional backbones can look up stored chunks.
    pub start_index: Option<usize>,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            teacher_forced: false,
            overlap: OverlapMode::Overwrite,
            start_index: None,
        }
    }
}

/// Output-start offsets (relative to the forecast origin) of the
/// `ceil(t_total / l)` chunks. When more than one chunk is needed the
/// final one is realigned so its window ends exactly at `t_total`; a
/// single chunk covering more than `t_total` is simply truncated.
pub fn chunk_schedule(t_total: usize, l: usize) -> Vec<usize> {
    let m = t_total.div_ceil(l);
    (0..m)
        .map(|k| {
            if k + 1 == m && m > 1 {
                t_total - l
            } else {
                k * l
            }
        })
        .collect()
}

/// Chunk-based autoregressive rollout to an arbitrary horizon.
///
/// Chunk `k`'s input is the last `W` values of the concatenation of the
/// true history and the outputs produced so far (ground truth instead of
/// outputs when `teacher_forced`). If `L` does not divide `T`, the final
/// call is realigned so its output window ends exactly at `T`.
pub fn ar_rollout(
    f: &dyn Forecaster,
    history: &Array2<f64>,
    t_total: usize,
    truth_stream: Option<&Array2<f64>>,
    opts: &RolloutOptions,
) -> Result<Array2<f64>> {
    let w = f.input_width();
    let l = f.output_width();
    let d = history.ncols();
    if history.nrows() != w {
        return Err(Error::ShapeMismatch {
            expected: format!("{w} history rows"),
            got: format!("{}", history.nrows()),
        });
    }
    if opts.teacher_forced {
        match truth_stream {
            Some(truth) if truth.nrows() >= t_total && truth.ncols() == d => {}
            Some(_) => {
                return Err(Error::ShapeMismatch {
                    expected: format!("truth stream of at least {t_total} x {d}"),
                    got: "smaller truth stream".into(),
                })
            }
            None => return Err(Error::MissingTruth),
        }
    }
    assert!(t_total >= 1);

    let mut output = Array2::zeros((t_total, d));
    let mut written_up_to = 0usize; // rows [0, written_up_to) hold outputs
    for &out_start in &chunk_schedule(t_total, l) {
        // Gather the W input rows ending just before `out_start`; negative
        // combined indices come from the true history.
        let mut input = Array2::zeros((w, d));
        for j in 0..w {
            let idx = out_start as isize - w as isize + j as isize;
            let row = if idx < 0 {
                history.row((w as isize + idx) as usize)
            } else if opts.teacher_forced {
                truth_stream.unwrap().row(idx as usize)
            } else {
                output.row(idx as usize)
            };
            input.row_mut(j).assign(&row);
        }
        let chunk = match opts.start_index {
            Some(base) => f.forecast_at(base + out_start, &input)?,
            None => f.forecast(&input)?,
        };
        if chunk.dim() != (l, d) {
            return Err(Error::ShapeMismatch {
                expected: format!("({l}, {d}) forecast"),
                got: format!("{:?}", chunk.dim()),
            });
        }
        for j in 0..l {
            let pos = out_start + j;
            if pos >= t_total {
                break;
            }
            if opts.overlap == OverlapMode::KeepFirst && pos < written_up_to {
                continue;
            }
            output.row_mut(pos).assign(&chunk.row(j));
        }
        written_up_to = written_up_to.max((out_start + l).min(t_total));
    }
    Ok(output)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyForecasterKind {
    /// Repeats the last observation.
    Persistence,
    /// Cyclically copies the last `period` observations.
    SeasonalNaive { period: usize },
    /// Per-channel ridge regression from the W history values to each of
    /// the L targets, fit on training windows.
    RidgeLinear { lambda: f64 },
    /// Repeats the last observation with geometric decay.
    Damped { rho: f64 },
}

pub struct PersistenceForecaster {
    w: usize,
    l: usize,
}

impl Forecaster for PersistenceForecaster {
    fn input_width(&self) -> usize {
        self.w
    }
    fn output_width(&self) -> usize {
        self.l
    }
    fn forecast(&self, history: &Array2<f64>) -> Result<Array2<f64>> {
        let last = history.row(history.nrows() - 1);
        let mut out = Array2::zeros((self.l, history.ncols()));
        for mut row in out.rows_mut() {
            row.assign(&last);
        }
        Ok(out)
    }
}

pub struct SeasonalNaiveForecaster {
    w: usize,
    l: usize,
    period: usize,
}

impl Forecaster for SeasonalNaiveForecaster {
    fn input_width(&self) -> usize {
        self.w
    }
    fn output_width(&self) -> usize {
        self.l
    }
    fn forecast(&self, history: &Array2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((self.l, history.ncols()));
        for j in 0..self.l {
            let src = self.w - self.period + (j % self.period);
            out.row_mut(j).assign(&history.row(src));
        }
        Ok(out)
    }
}

pub struct DampedForecaster {
    w: usize,
    l: usize,
    rho: f64,
}

impl Forecaster for DampedForecaster {
    fn input_width(&self) -> usize {
        self.w
    }
    fn output_width(&self) -> usize {
        self.l
    }
    fn forecast(&self, history: &Array2<f64>) -> Result<Array2<f64>> {
        let last = history.row(history.nrows() - 1).to_owned();
        let mut out = Array2::zeros((self.l, history.ncols()));
        let mut scale = 1.0;
        for j in 0..self.l {
            scale *= self.rho;
            out.row_mut(j).assign(&(&last * scale));
        }
        Ok(out)
    }
}

/// Per-channel linear maps from the W history values to each of the L
/// target steps, fit by ridge-regularized least squares.
pub struct RidgeForecaster {
    w: usize,
    l: usize,
    /// One (W+1) x L coefficient matrix per channel; the last row is the
    /// intercept.
    coeffs: Vec<Array2<f64>>,
}

impl RidgeForecaster {
    pub fn fit(train: &SeriesFrame, w: usize, l: usize, lambda: f64) -> Result<Self> {
        let t = train.len();
        if t < w + l + 1 {
            return Err(Error::InsufficientData(format!(
                "ridge fit needs at least {} steps, have {t}",
                w + l + 1
            )));
        }
        let n = t - w - l + 1;
        let d = train.dims();
        let mut coeffs = Vec::with_capacity(d);
        for c in 0..d {
            // Design matrix with a trailing bias column.
            let mut x = Array2::zeros((n, w + 1));
            let mut y = Array2::zeros((n, l));
            for i in 0..n {
                for j in 0..w {
                    x[(i, j)] = train.values[(i + j, c)];
                }
                x[(i, w)] = 1.0;
                for j in 0..l {
                    y[(i, j)] = train.values[(i + w + j, c)];
                }
            }
            let mut gram = x.t().dot(&x);
            for j in 0..w {
                gram[(j, j)] += lambda;
            }
            let rhs = x.t().dot(&y);
            let beta = solve_multi(&gram, &rhs).ok_or_else(|| {
                Error::InsufficientData("singular normal equations in ridge fit".into())
            })?;
            coeffs.push(beta);
        }
        Ok(Self { w, l, coeffs })
    }
}

impl Forecaster for RidgeForecaster {
    fn input_width(&self) -> usize {
        self.w
    }
    fn output_width(&self) -> usize {
        self.l
    }
    fn forecast(&self, history: &Array2<f64>) -> Result<Array2<f64>> {
        let d = history.ncols();
        let mut out = Array2::zeros((self.l, d));
        for c in 0..d {
            let beta = &self.coeffs[c];
            for j in 0..self.l {
                let mut acc = beta[(self.w, j)];
                for i in 0..self.w {
                    acc += history[(i, c)] * beta[(i, j)];
                }
                out[(j, c)] = acc;
            }
        }
        Ok(out)
    }
}

/// Gaussian elimination with partial pivoting, multiple right-hand sides.
fn solve_multi(a: &Array2<f64>, b: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let m = b.ncols();
    let mut aug = Array2::zeros((n, n + m));
    aug.slice_mut(s![.., ..n]).assign(a);
    aug.slice_mut(s![.., n..]).assign(b);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| aug[(i, col)].abs().total_cmp(&aug[(j, col)].abs()))
            .unwrap();
        if aug[(pivot, col)].abs() < 1e-12 {
            return None;
        }
        if pivot != col {
            for j in 0..n + m {
                aug.swap((col, j), (pivot, j));
            }
        }
        let diag = aug[(col, col)];
        for row in col + 1..n {
            let factor = aug[(row, col)] / diag;
            if factor == 0.0 {
                continue;
            }
            for j in col..n + m {
                let sub = factor * aug[(col, j)];
                aug[(row, j)] -= sub;
            }
        }
    }
    let mut x = Array2::zeros((n, m));
    for rhs in 0..m {
        for row in (0..n).rev() {
            let mut acc = aug[(row, n + rhs)];
            for j in row + 1..n {
                acc -= aug[(row, j)] * x[(j, rhs)];
            }
            x[(row, rhs)] = acc / aug[(row, row)];
        }
    }
    Some(x)
}

pub fn make_toy(
    kind: &ToyForecasterKind,
    train: &SeriesFrame,
    w: usize,
    l: usize,
) -> Result<Box<dyn Forecaster + Send + Sync>> {
    match *kind {
        ToyForecasterKind::Persistence => Ok(Box::new(PersistenceForecaster { w, l })),
        ToyForecasterKind::SeasonalNaive { period } => {
            if period == 0 || period > w {
                return Err(Error::Config(format!(
                    "seasonal period must be in 1..={w}, got {period}"
                )));
            }
            Ok(Box::new(SeasonalNaiveForecaster { w, l, period }))
        }
        ToyForecasterKind::RidgeLinear { lambda } => {
            if lambda < 0.0 {
                return Err(Error::Config("ridge lambda must be non-negative".into()));
            }
            Ok(Box::new(RidgeForecaster::fit(train, w, l, lambda)?))
        }
        ToyForecasterKind::Damped { rho } => {
            if !(0.0 < rho && rho <= 1.0) {
                return Err(Error::Config("damping rho must be in (0, 1]".into()));
            }
            Ok(Box::new(DampedForecaster { w, l, rho }))
        }
    }
}

/// Forecaster that reads the true future off a stored frame; the exact
/// upper bound for rollout and correction tests. Requires positional
/// lookups (`forecast_at`).
pub struct OracleForecaster {
    pub frame: Array2<f64>,
    pub w: usize,
    pub l: usize,
}

impl Forecaster for OracleForecaster {
    fn input_width(&self) -> usize {
        self.w
    }
    fn output_width(&self) -> usize {
        self.l
    }
    fn forecast(&self, _history: &Array2<f64>) -> Result<Array2<f64>> {
        Err(Error::Config(
            "oracle forecaster requires positional lookup (forecast_at)".into(),
        ))
    }
    fn forecast_at(&self, t: usize, _history: &Array2<f64>) -> Result<Array2<f64>> {
        if t + 1 + self.l > self.frame.nrows() {
            return Err(Error::TooShort {
                needed: t + 1 + self.l,
                have: self.frame.nrows(),
            });
        }
        Ok(self.frame.slice(s![t + 1..t + 1 + self.l, ..]).to_owned())
    }
}

const EXCHANGE_FORMAT: &str = "uec-forecast-exchange";
const EXCHANGE_VERSION: u32 = 1;
// Values are hex-encoded little-endian f64 bytes, row-major; JSON
// numbers do not guarantee bit-exact round trips.
const EXCHANGE_ENCODING: &str = "f64-le-hex";

#[derive(Debug, Serialize, Deserialize)]
struct ExchangeHeader {
    format: String,
    version: u32,
    encoding: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExchangeRecord {
    series_id: String,
    t: usize,
    l: usize,
    d: usize,
    /// Row-major L x D values in the header's encoding.
    values: String,
}

/// Replays forecasts exported by an external backbone, keyed by the
/// absolute index of the last input row. Unknown positions fail loudly.
pub struct ReplayForecaster {
    pub series_id: String,
    w: usize,
    l: usize,
    map: HashMap<usize, Array2<f64>>,
}

impl Forecaster for ReplayForecaster {
    fn input_width(&self) -> usize {
        self.w
    }
    fn output_width(&self) -> usize {
        self.l
    }
    fn forecast(&self, _history: &Array2<f64>) -> Result<Array2<f64>> {
        Err(Error::Config(
            "replay forecaster requires positional lookup (forecast_at)".into(),
        ))
    }
    fn forecast_at(&self, t: usize, _history: &Array2<f64>) -> Result<Array2<f64>> {
        self.map.get(&t).cloned().ok_or(Error::MissingForecast {
            series_id: self.series_id.clone(),
            t,
        })
    }
}

pub fn export_replay(
    path: &Path,
    series_id: &str,
    records: &[(usize, Array2<f64>)],
) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = ExchangeHeader {
        format: EXCHANGE_FORMAT.into(),
        version: EXCHANGE_VERSION,
        encoding: EXCHANGE_ENCODING.into(),
    };
    writeln!(file, "{}", serde_json::to_string(&header)?)?;
    for (t, values) in records {
        let (l, d) = values.dim();
        let record = ExchangeRecord {
            series_id: series_id.to_string(),
            t: *t,
            l,
            d,
            values: crate::codec::encode_f64s(values.iter().copied()),
        };
        writeln!(file, "{}", serde_json::to_string(&record)?)?;
    }
    Ok(())
}

pub fn load_replay(path: &Path, series_id: &str, w: usize) -> Result<ReplayForecaster> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Schema("empty replay file".into()))??;
    let header: ExchangeHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::Schema(format!("bad header line: {e}")))?;
    if header.format != EXCHANGE_FORMAT {
        return Err(Error::Schema(format!("unknown format '{}'", header.format)));
    }
    if header.version != EXCHANGE_VERSION {
        return Err(Error::Schema(format!(
            "unsupported version {}",
            header.version
        )));
    }
    if header.encoding != EXCHANGE_ENCODING {
        return Err(Error::Schema(format!(
            "unsupported encoding '{}'",
            header.encoding
        )));
    }
    let mut map = HashMap::new();
    let mut l = None;
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ExchangeRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("bad record on line {}: {e}", i + 2)))?;
        if record.series_id != series_id {
            continue;
        }
        let decoded = crate::codec::decode_f64s(&record.values)?;
        if decoded.len() != record.l * record.d {
            return Err(Error::Schema(format!(
                "record at t={} declares {}x{} but carries {} values",
                record.t,
                record.l,
                record.d,
                decoded.len()
            )));
        }
        match l {
            None => l = Some(record.l),
            Some(existing) if existing != record.l => {
                return Err(Error::Schema("inconsistent chunk lengths".into()))
            }
            _ => {}
        }
        let values = Array2::from_shape_vec((record.l, record.d), decoded)
            .expect("length checked above");
        map.insert(record.t, values);
    }
    if map.is_empty() {
        return Err(Error::Schema(format!(
            "no records for series '{series_id}'"
        )));
    }
    Ok(ReplayForecaster {
        series_id: series_id.to_string(),
        w,
        l: l.unwrap(),
        map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Origin, SeriesFrame};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn series(t: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut values = Array2::zeros((t, d));
        for c in 0..d {
            let mut level = rng.gen_range(-1.0..1.0);
            for r in 0..t {
                level += rng.gen_range(-0.1..0.1);
                values[(r, c)] = level;
            }
        }
        values
    }

    #[test]
    fn chunk_schedule_exact_division() {
        assert_eq!(chunk_schedule(384, 96), vec![0, 96, 192, 288]);
    }

    #[test]
    fn chunk_schedule_final_realignment() {
        // 720 with L=96: eight chunks, last one realigned to end at 720.
        let sched = chunk_schedule(720, 96);
        assert_eq!(sched.len(), 8);
        assert_eq!(&sched[..7], &[0, 96, 192, 288, 384, 480, 576]);
        assert_eq!(sched[7], 624);
    }

    #[test]
    fn single_chunk_equals_direct_forecast() {
        let f = PersistenceForecaster { w: 4, l: 3 };
        let history = array![[1.0], [2.0], [3.0], [4.0]];
        let direct = f.forecast(&history).unwrap();
        let rolled = ar_rollout(&f, &history, 3, None, &RolloutOptions::default()).unwrap();
        assert_eq!(direct, rolled);
    }

    #[test]
    fn persistence_repeats_last() {
        let f = PersistenceForecaster { w: 2, l: 3 };
        let out = f.forecast(&array![[1.0], [3.0]]).unwrap();
        assert!(out.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn seasonal_naive_cycles() {
        let f = SeasonalNaiveForecaster {
            w: 2,
            l: 4,
            period: 2,
        };
        let out = f.forecast(&array![[1.0], [2.0]]).unwrap();
        assert_eq!(out, array![[1.0], [2.0], [1.0], [2.0]]);
    }

    #[test]
    fn damped_decays_geometrically() {
        let f = DampedForecaster {
            w: 1,
            l: 3,
            rho: 0.5,
        };
        let out = f.forecast(&array![[8.0]]).unwrap();
        assert_eq!(out, array![[4.0], [2.0], [1.0]]);
    }

    #[test]
    fn ridge_recovers_linear_map() {
        // Two incommensurate sinusoids plus an offset span a 5-dim signal
        // space; with W=4 lags plus bias the future is an exact linear
        // function of the history, so a lambda=0 fit is machine-precise.
        let t = 200;
        let w = 4;
        let l = 2;
        let mut lin = Array2::zeros((t, 1));
        for r in 0..t {
            let x = r as f64;
            lin[(r, 0)] = 1.5 + (0.31 * x).sin() + 0.7 * (0.83 * x + 0.4).sin();
        }
        let frame = SeriesFrame::new(lin.clone(), vec!["c0".into()], Origin::Raw).unwrap();
        let f = RidgeForecaster::fit(&frame, w, l, 0.0).unwrap();
        let n = t - w - l + 1;
        let mut mse = 0.0;
        for i in 0..n {
            let hist = lin.slice(s![i..i + w, ..]).to_owned();
            let pred = f.forecast(&hist).unwrap();
            for j in 0..l {
                let err = pred[(j, 0)] - lin[(i + w + j, 0)];
                mse += err * err;
            }
        }
        mse /= (n * l) as f64;
        assert!(mse < 1e-8, "training mse {mse}");
    }

    #[test]
    fn make_toy_validates_params() {
        let frame = SeriesFrame::new(series(50, 1, 0), vec!["c0".into()], Origin::Raw).unwrap();
        assert!(make_toy(&ToyForecasterKind::SeasonalNaive { period: 0 }, &frame, 4, 2).is_err());
        assert!(make_toy(&ToyForecasterKind::Damped { rho: 0.0 }, &frame, 4, 2).is_err());
        assert!(make_toy(&ToyForecasterKind::Persistence, &frame, 4, 2).is_ok());
    }

    #[test]
    fn oracle_rollout_reproduces_truth() {
        let truth = series(1000, 2, 1);
        let w = 96;
        let l = 96;
        let f = OracleForecaster {
            frame: truth.clone(),
            w,
            l,
        };
        let t0 = w - 1;
        let history = truth.slice(s![..w, ..]).to_owned();
        for &horizon in &[96usize, 384, 720] {
            let opts = RolloutOptions {
                start_index: Some(t0),
                ..Default::default()
            };
            let out = ar_rollout(&f, &history, horizon, None, &opts).unwrap();
            let expected = truth.slice(s![w..w + horizon, ..]);
            assert_eq!(out, expected.to_owned(), "horizon {horizon}");
        }
    }

    #[test]
    fn four_chunks_feed_previous_outputs() {
        // Damped forecaster: each chunk's outputs depend only on the last
        // input value, so the rollout is a pure geometric decay of the
        // last history value across chunk boundaries.
        let f = DampedForecaster {
            w: 2,
            l: 2,
            rho: 0.5,
        };
        let history = array![[0.0], [16.0]];
        let out = ar_rollout(&f, &history, 8, None, &RolloutOptions::default()).unwrap();
        let expected = array![[8.0], [4.0], [2.0], [1.0], [0.5], [0.25], [0.125], [0.0625]];
        assert_eq!(out, expected);
    }

    #[test]
    fn teacher_forced_uses_truth_at_boundaries() {
        let f = DampedForecaster {
            w: 2,
            l: 2,
            rho: 0.5,
        };
        let history = array![[0.0], [16.0]];
        let truth = array![[100.0], [8.0], [100.0], [4.0], [0.0], [0.0], [0.0], [0.0]];
        let opts = RolloutOptions {
            teacher_forced: true,
            ..Default::default()
        };
        let out = ar_rollout(&f, &history, 8, Some(&truth), &opts).unwrap();
        // Chunk 0 reads the history (same as AR); chunk 1 reads truth rows
        // 0..2 (last value 8), chunk 2 reads rows 2..4 (last value 4).
        assert_eq!(out[(0, 0)], 8.0);
        assert_eq!(out[(1, 0)], 4.0);
        assert_eq!(out[(2, 0)], 4.0);
        assert_eq!(out[(3, 0)], 2.0);
        assert_eq!(out[(4, 0)], 2.0);
        assert_eq!(out[(5, 0)], 1.0);
    }

    #[test]
    fn teacher_forced_requires_truth() {
        let f = PersistenceForecaster { w: 2, l: 2 };
        let history = array![[1.0], [2.0]];
        let opts = RolloutOptions {
            teacher_forced: true,
            ..Default::default()
        };
        assert!(matches!(
            ar_rollout(&f, &history, 4, None, &opts),
            Err(Error::MissingTruth)
        ));
    }

    #[test]
    fn teacher_forced_matches_ar_on_first_chunk() {
        let truth = series(300, 2, 3);
        let w = 24;
        let l = 24;
        let f = PersistenceForecaster { w, l };
        let history = truth.slice(s![..w, ..]).to_owned();
        let future = truth.slice(s![w..w + 96, ..]).to_owned();
        let ar = ar_rollout(&f, &history, 96, None, &RolloutOptions::default()).unwrap();
        let tf = ar_rollout(
            &f,
            &history,
            96,
            Some(&future),
            &RolloutOptions {
                teacher_forced: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(ar.slice(s![..l, ..]), tf.slice(s![..l, ..]));
    }

    #[test]
    fn output_length_always_t() {
        let f = PersistenceForecaster { w: 8, l: 96 };
        let history = series(8, 3, 7);
        for &t in &[1usize, 95, 96, 97, 200, 720] {
            let out = ar_rollout(&f, &history, t, None, &RolloutOptions::default()).unwrap();
            assert_eq!(out.nrows(), t);
        }
    }

    /// Outputs `history[0] + j + 1` at step j; not shift-consistent, so
    /// overlapping re-forecasts disagree with the chunk they overwrite.
    struct SlopeFromFirst {
        w: usize,
        l: usize,
    }

    impl Forecaster for SlopeFromFirst {
        fn input_width(&self) -> usize {
            self.w
        }
        fn output_width(&self) -> usize {
            self.l
        }
        fn forecast(&self, history: &Array2<f64>) -> Result<Array2<f64>> {
            let base = history[(0, 0)];
            let mut out = Array2::zeros((self.l, history.ncols()));
            for j in 0..self.l {
                out.row_mut(j).fill(base + (j + 1) as f64);
            }
            Ok(out)
        }
    }

    #[test]
    fn overlap_overwrite_vs_keep_first() {
        // L=4, T=6: chunks at 0 and 2; the final chunk overlaps rows 2..4.
        let f = SlopeFromFirst { w: 2, l: 4 };
        let history = array![[0.0], [10.0]];
        let overwrite = ar_rollout(&f, &history, 6, None, &RolloutOptions::default()).unwrap();
        let keep = ar_rollout(
            &f,
            &history,
            6,
            None,
            &RolloutOptions {
                overlap: OverlapMode::KeepFirst,
                ..Default::default()
            },
        )
        .unwrap();
        // Chunk 0 (base 0) writes 1,2,3,4; the final chunk (base = output
        // row 0 = 1) produces 2,3,4,5 over rows 2..6.
        assert_eq!(overwrite.slice(s![..2, ..]), keep.slice(s![..2, ..]));
        assert_eq!(keep[(2, 0)], 3.0);
        assert_eq!(keep[(3, 0)], 4.0);
        assert_eq!(overwrite[(2, 0)], 2.0);
        assert_eq!(overwrite[(3, 0)], 3.0);
        // The fresh tail beyond the overlap agrees.
        assert_eq!(overwrite.slice(s![4.., ..]), keep.slice(s![4.., ..]));
    }

    #[test]
    fn replay_round_trip_bit_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let chunk: Array2<f64> =
            Array2::from_shape_fn((96, 7), |_| rng.gen::<f64>() * 1e3 - 500.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forecasts.jsonl");
        export_replay(&path, "etth1", &[(96, chunk.clone())]).unwrap();
        let replay = load_replay(&path, "etth1", 96).unwrap();
        let restored = replay.forecast_at(96, &Array2::zeros((96, 7))).unwrap();
        for (a, b) in chunk.iter().zip(restored.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn replay_unknown_position_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forecasts.jsonl");
        export_replay(&path, "s", &[(96, Array2::zeros((4, 1)))]).unwrap();
        let replay = load_replay(&path, "s", 4).unwrap();
        assert!(matches!(
            replay.forecast_at(100, &Array2::zeros((4, 1))),
            Err(Error::MissingForecast { t: 100, .. })
        ));
    }

    #[test]
    fn replay_bad_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"format\":\"something-else\",\"version\":1,\"encoding\":\"x\"}\n").unwrap();
        assert!(matches!(
            load_replay(&path, "s", 4),
            Err(Error::Schema(_))
        ));
    }
}
