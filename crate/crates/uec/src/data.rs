//! Time-series container, chronological splitting, per-channel
//! normalization, and window extraction.

use std::path::Path;

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound for per-channel standard deviations so constant channels
/// normalize to zero instead of dividing by zero.
pub const EPS_STD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Raw,
    Normalized,
}

/// A T x D multivariate series in chronological row order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesFrame {
    pub values: Array2<f64>,
    pub channel_names: Vec<String>,
    pub origin: Origin,
}

impl SeriesFrame {
    pub fn new(values: Array2<f64>, channel_names: Vec<String>, origin: Origin) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::EmptyFile);
        }
        if channel_names.len() != values.ncols() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channel names", values.ncols()),
                got: format!("{}", channel_names.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("frame construction".into()));
        }
        Ok(Self {
            values,
            channel_names,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dims(&self) -> usize {
        self.values.ncols()
    }

    /// Contiguous sub-frame covering rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> SeriesFrame {
        SeriesFrame {
            values: self.values.slice(s![start..end, ..]).to_owned(),
            channel_names: self.channel_names.clone(),
            origin: self.origin,
        }
    }
}

/// Chronological split layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitSpec {
    /// Train / val / test fractions, e.g. (0.7, 0.1, 0.2).
    Standard { train: f64, val: f64, test: f64 },
    /// Train1 -> Val -> Train2 -> Test layout.
    Staggered {
        train1: f64,
        val: f64,
        train2: f64,
        test: f64,
    },
}

impl SplitSpec {
    pub fn standard(train: f64, val: f64, test: f64) -> Self {
        SplitSpec::Standard { train, val, test }
    }

    fn fractions(&self) -> Vec<(&'static str, f64)> {
        match *self {
            SplitSpec::Standard { train, val, test } => {
                vec![("train", train), ("val", val), ("test", test)]
            }
            SplitSpec::Staggered {
                train1,
                val,
                train2,
                test,
            } => vec![
                ("train1", train1),
                ("val", val),
                ("train2", train2),
                ("test", test),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fracs = self.fractions();
        if fracs.iter().any(|&(_, f)| f <= 0.0) {
            return Err(Error::Config("split fractions must be positive".into()));
        }
        let sum: f64 = fracs.iter().map(|&(_, f)| f).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::BadSplitFractions(sum));
        }
        Ok(())
    }
}

/// Splits a frame into contiguous chronological segments. Boundaries use
/// floor of the cumulative fractions; the remainder accrues to the last
/// segment.
pub fn split(frame: &SeriesFrame, spec: &SplitSpec) -> Result<Vec<(String, SeriesFrame)>> {
    spec.validate()?;
    let t = frame.len();
    let fracs = spec.fractions();
    let mut boundaries = Vec::with_capacity(fracs.len() + 1);
    boundaries.push(0usize);
    let mut cum = 0.0;
    for &(_, f) in &fracs[..fracs.len() - 1] {
        cum += f;
        // Guard against accumulated representation error in the cumulative
        // fraction (0.7 + 0.1 < 0.8 in binary) before taking the floor.
        boundaries.push((cum * t as f64 + 1e-9).floor() as usize);
    }
    boundaries.push(t);
    let mut out = Vec::with_capacity(fracs.len());
    for (i, &(name, _)) in fracs.iter().enumerate() {
        let (a, b) = (boundaries[i], boundaries[i + 1]);
        if b <= a {
            return Err(Error::DegenerateSplit(name.to_string()));
        }
        out.push((name.to_string(), frame.slice_rows(a, b)));
    }
    Ok(out)
}

/// Per-channel z-score statistics, fit on the training segment only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

pub fn fit_normalizer(frame: &SeriesFrame) -> Normalizer {
    let t = frame.len() as f64;
    let mean = frame.values.sum_axis(ndarray::Axis(0)) / t;
    let mut std = Array1::zeros(frame.dims());
    for d in 0..frame.dims() {
        let col = frame.values.column(d);
        let var = col.iter().map(|v| (v - mean[d]).powi(2)).sum::<f64>() / t;
        std[d] = var.sqrt().max(EPS_STD);
    }
    Normalizer { mean, std }
}

impl Normalizer {
    pub fn apply(&self, frame: &SeriesFrame) -> SeriesFrame {
        let mut values = frame.values.clone();
        for mut row in values.rows_mut() {
            for d in 0..row.len() {
                row[d] = (row[d] - self.mean[d]) / self.std[d];
            }
        }
        SeriesFrame {
            values,
            channel_names: frame.channel_names.clone(),
            origin: Origin::Normalized,
        }
    }

    pub fn invert(&self, frame: &SeriesFrame) -> SeriesFrame {
        let mut values = frame.values.clone();
        for mut row in values.rows_mut() {
            for d in 0..row.len() {
                row[d] = row[d] * self.std[d] + self.mean[d];
            }
        }
        SeriesFrame {
            values,
            channel_names: frame.channel_names.clone(),
            origin: Origin::Raw,
        }
    }
}

/// A (history, target) pair cut from a frame. `start_index` is the last
/// history row, so history covers rows `start_index-W+1 ..= start_index`
/// and the target covers the `H` rows after it.
#[derive(Debug, Clone)]
pub struct Window {
    pub history: Array2<f64>,
    pub target: Array2<f64>,
    pub start_index: usize,
}

pub fn make_windows(frame: &SeriesFrame, w: usize, h: usize, stride: usize) -> Result<Vec<Window>> {
    assert!(w >= 1 && h >= 1 && stride >= 1);
    let t = frame.len();
    if w + h > t {
        return Err(Error::TooShort {
            needed: w + h,
            have: t,
        });
    }
    let count = (t - w - h) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let start = w - 1 + i * stride;
        out.push(Window {
            history: frame.values.slice(s![start + 1 - w..=start, ..]).to_owned(),
            target: frame.values.slice(s![start + 1..start + 1 + h, ..]).to_owned(),
            start_index: start,
        });
    }
    Ok(out)
}

/// Loads a CSV with a header row. If `timestamp_column` names a column it
/// is dropped from the values; every remaining column must parse as f64.
pub fn load_csv(path: &Path, timestamp_column: Option<&str>) -> Result<SeriesFrame> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.to_string()).collect();
    let ts_idx = timestamp_column.and_then(|name| headers.iter().position(|h| h == name));
    let channel_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| Some(i) != ts_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(channel_names.len());
        for (col_idx, field) in record.iter().enumerate() {
            if Some(col_idx) == ts_idx {
                continue;
            }
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                row: row_idx,
                column: headers
                    .get(col_idx)
                    .cloned()
                    .unwrap_or_else(|| col_idx.to_string()),
                message: format!("cannot parse '{}' as a number", field),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: row_idx,
                    column: headers
                        .get(col_idx)
                        .cloned()
                        .unwrap_or_else(|| col_idx.to_string()),
                    message: "non-finite value".into(),
                });
            }
            row.push(v);
        }
        if row.len() != channel_names.len() {
            return Err(Error::Parse {
                row: row_idx,
                column: "<record>".into(),
                message: format!(
                    "expected {} value columns, found {}",
                    channel_names.len(),
                    row.len()
                ),
            });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyFile);
    }
    let d = channel_names.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let values = Array2::from_shape_vec((flat.len() / d, d), flat)
        .map_err(|e| Error::Config(e.to_string()))?;
    SeriesFrame::new(values, channel_names, Origin::Raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Write;

    fn frame(values: Array2<f64>) -> SeriesFrame {
        let names = (0..values.ncols()).map(|i| format!("c{i}")).collect();
        SeriesFrame::new(values, names, Origin::Raw).unwrap()
    }

    #[test]
    fn load_csv_identity() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a,b\n1,2\n3,4\n5,6").unwrap();
        let frame = load_csv(f.path(), None).unwrap();
        assert_eq!(frame.len(), 3);
        assert_eq!(frame.dims(), 2);
        assert_eq!(frame.values, array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
    }

    #[test]
    fn load_csv_bad_cell_reports_row() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "a\n").unwrap();
        for i in 0..10 {
            if i == 7 {
                writeln!(f, "oops").unwrap();
            } else {
                writeln!(f, "{i}").unwrap();
            }
        }
        match load_csv(f.path(), None) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 7),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_csv_drops_timestamp_column() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "date,x,y\n2020-01-01,1,2\n2020-01-02,3,4").unwrap();
        let frame = load_csv(f.path(), Some("date")).unwrap();
        assert_eq!(frame.dims(), 2);
        assert_eq!(frame.channel_names, vec!["x", "y"]);
    }

    #[test]
    fn load_csv_etth_shaped_header() {
        // ETT-style layout: "date" first, seven value columns after it.
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT").unwrap();
        writeln!(f, "2016-07-01 00:00:00,5.827,2.009,1.599,0.462,4.203,1.340,30.531").unwrap();
        writeln!(f, "2016-07-01 01:00:00,5.693,2.076,1.492,0.426,4.142,1.371,27.787").unwrap();
        let frame = load_csv(f.path(), Some("date")).unwrap();
        assert_eq!(frame.dims(), 7);
        assert_eq!(frame.len(), 2);
    }

    #[test]
    fn standard_split_lengths() {
        let f = frame(Array2::zeros((100, 2)));
        let segs = split(&f, &SplitSpec::standard(0.7, 0.1, 0.2)).unwrap();
        let lens: Vec<usize> = segs.iter().map(|(_, s)| s.len()).collect();
        assert_eq!(lens, vec![70, 10, 20]);
    }

    #[test]
    fn standard_split_floor_lengths() {
        let f = frame(Array2::zeros((10, 1)));
        let segs = split(&f, &SplitSpec::standard(0.7, 0.1, 0.2)).unwrap();
        let lens: Vec<usize> = segs.iter().map(|(_, s)| s.len()).collect();
        assert_eq!(lens, vec![7, 1, 2]);
    }

    #[test]
    fn staggered_split_lengths() {
        let f = frame(Array2::zeros((100, 1)));
        let spec = SplitSpec::Staggered {
            train1: 0.4,
            val: 0.1,
            train2: 0.3,
            test: 0.2,
        };
        let segs = split(&f, &spec).unwrap();
        let lens: Vec<usize> = segs.iter().map(|(_, s)| s.len()).collect();
        assert_eq!(lens, vec![40, 10, 30, 20]);
        let names: Vec<&str> = segs.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["train1", "val", "train2", "test"]);
    }

    #[test]
    fn split_segments_partition_frame() {
        let values = Array2::from_shape_fn((57, 3), |(i, j)| (i * 3 + j) as f64);
        let f = frame(values.clone());
        let segs = split(&f, &SplitSpec::standard(0.7, 0.1, 0.2)).unwrap();
        let total: usize = segs.iter().map(|(_, s)| s.len()).sum();
        assert_eq!(total, 57);
        let mut row = 0;
        for (_, seg) in &segs {
            for r in seg.values.rows() {
                assert_eq!(r, values.row(row));
                row += 1;
            }
        }
    }

    #[test]
    fn degenerate_split_rejected() {
        let f = frame(Array2::zeros((3, 1)));
        assert!(matches!(
            split(&f, &SplitSpec::standard(0.7, 0.1, 0.2)),
            Err(Error::DegenerateSplit(_))
        ));
    }

    #[test]
    fn normalizer_constant_channel_clamped() {
        let f = frame(array![[2.0], [2.0], [2.0]]);
        let norm = fit_normalizer(&f);
        assert_eq!(norm.mean[0], 2.0);
        assert_eq!(norm.std[0], EPS_STD);
        let applied = norm.apply(&f);
        assert!(applied.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalizer_two_points() {
        let f = frame(array![[0.0], [2.0]]);
        let norm = fit_normalizer(&f);
        assert_eq!(norm.mean[0], 1.0);
        assert_eq!(norm.std[0], 1.0);
        let applied = norm.apply(&f);
        assert_eq!(applied.values, array![[-1.0], [1.0]]);
    }

    #[test]
    fn normalizer_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        let values = Array2::from_shape_fn((50, 3), |_| rng.gen_range(-5.0..5.0));
        let f = frame(values.clone());
        let norm = fit_normalizer(&f);
        let back = norm.invert(&norm.apply(&f));
        let max_err = (&back.values - &values)
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-10, "round-trip error {max_err}");
    }

    #[test]
    fn normalized_train_segment_stats() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let values = Array2::from_shape_fn((200, 2), |_| rng.gen_range(0.0..10.0));
        let f = frame(values);
        let norm = fit_normalizer(&f);
        let z = norm.apply(&f);
        for d in 0..2 {
            let col = z.values.column(d);
            let m = col.sum() / 200.0;
            let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 200.0).sqrt();
            assert!(m.abs() < 1e-9);
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn window_counts() {
        let f = frame(Array2::from_shape_fn((10, 1), |(i, _)| i as f64));
        assert_eq!(make_windows(&f, 3, 2, 1).unwrap().len(), 6);
        assert_eq!(make_windows(&f, 3, 2, 5).unwrap().len(), 2);
    }

    #[test]
    fn windows_too_short() {
        let f = frame(Array2::zeros((5, 1)));
        assert!(matches!(
            make_windows(&f, 3, 3, 1),
            Err(Error::TooShort { .. })
        ));
    }

    #[test]
    fn window_contents_contiguous() {
        let f = frame(Array2::from_shape_fn((10, 1), |(i, _)| i as f64));
        let ws = make_windows(&f, 3, 2, 1).unwrap();
        let w0 = &ws[0];
        assert_eq!(w0.start_index, 2);
        assert_eq!(w0.history, array![[0.0], [1.0], [2.0]]);
        assert_eq!(w0.target, array![[3.0], [4.0]]);
    }
}
