//! Correction-strength calibration: a beta grid is scored on a balanced
//! validation set and the best value is selected per metric.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Forecaster, RolloutOptions};
use crate::data::{make_windows, SeriesFrame, Window};
use crate::error::{Error, Result};
use crate::evaluation::{Metric, MetricAccum};
use crate::pipeline::{rollout_with_delta, Corrector};

/// Candidate correction strengths, sorted ascending. The grid must
/// contain 0 so an unhelpful corrector can always be switched off.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BetaGrid {
    pub values: Vec<f64>,
}

impl Default for BetaGrid {
    fn default() -> Self {
        Self {
            values: vec![0.0, 0.1, 0.3, 0.5, 0.7, 1.0],
        }
    }
}

impl BetaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let grid = Self { values };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("beta grid is empty".into()));
        }
        if self.values.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config(
                "beta grid must be strictly increasing".into(),
            ));
        }
        if self.values.iter().any(|&b| !(0.0..=1.0).contains(&b)) {
            return Err(Error::Config("beta values must lie in [0, 1]".into()));
        }
        if self.values[0] != 0.0 {
            return Err(Error::Config("beta grid must contain 0".into()));
        }
        Ok(())
    }
}

/// Evaluation windows for beta selection: every corrector-holdout window
/// plus enough windows sampled (without replacement, seeded) from the
/// training segment to reach `target_size`. Mixing training windows back
/// in keeps the set from over-representing the holdout tail.
pub fn build_balanced_set(
    holdout_windows: Vec<Window>,
    train: &SeriesFrame,
    w: usize,
    horizon: usize,
    target_size: usize,
    seed: u64,
) -> Result<Vec<Window>> {
    if target_size == 0 {
        return Err(Error::EmptySet);
    }
    let mut windows = holdout_windows;
    // Keep the latest holdout windows if there are more than requested.
    if windows.len() > target_size {
        windows.drain(..windows.len() - target_size);
    }
    let need = target_size - windows.len();
    if need > 0 {
        let candidates = make_windows(train, w, horizon, 1)?;
        if candidates.len() < need {
            return Err(Error::InsufficientTrainWindows {
                needed: need,
                available: candidates.len(),
            });
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let picks = rand::seq::index::sample(&mut rng, candidates.len(), need);
        let mut sampled: Vec<usize> = picks.into_iter().collect();
        sampled.sort_unstable();
        for i in sampled {
            windows.push(candidates[i].clone());
        }
    }
    Ok(windows)
}

/// Per-beta MSE and MAE over a window set, computed from one shared
/// rollout (and one corrector pass) per window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BetaTable {
    pub grid: Vec<f64>,
    pub mse: Vec<f64>,
    pub mae: Vec<f64>,
}

pub fn evaluate_beta_grid(
    f: &dyn Forecaster,
    corrector: &dyn Corrector,
    windows: &[Window],
    grid: &BetaGrid,
    opts: &RolloutOptions,
) -> Result<BetaTable> {
    grid.validate()?;
    if windows.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut accums: Vec<MetricAccum> = grid.values.iter().map(|_| MetricAccum::new()).collect();
    for window in windows {
        let horizon = window.target.nrows();
        // Positional backbones need each window's own absolute index.
        let w_opts = RolloutOptions {
            start_index: Some(window.start_index),
            ..*opts
        };
        let (base, delta) = rollout_with_delta(f, corrector, &window.history, horizon, &w_opts)?;
        for (accum, &beta) in accums.iter_mut().zip(&grid.values) {
            let pred = if beta == 0.0 {
                base.clone()
            } else {
                &base + &(beta * &delta)
            };
            accum.add(&pred, &window.target)?;
        }
    }
    Ok(BetaTable {
        grid: grid.values.clone(),
        mse: accums.iter().map(|a| a.mse()).collect::<Result<_>>()?,
        mae: accums.iter().map(|a| a.mae()).collect::<Result<_>>()?,
    })
}

/// The grid value minimizing the given metric; ties go to the smallest
/// beta. Returns `(beta, metric value)`.
pub fn select_beta(table: &BetaTable, metric: Metric) -> (f64, f64) {
    let scores = match metric {
        Metric::Mse => &table.mse,
        Metric::Mae => &table.mae,
    };
    let mut best = 0usize;
    for i in 1..scores.len() {
        if scores[i] < scores[best] {
            best = i;
        }
    }
    (table.grid[best], scores[best])
}
