//! Moving-average trend extraction and seasonal-trend decomposition.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    /// Out-of-range positions take the first/last in-range value.
    Replicate,
    /// Out-of-range positions contribute zero.
    Zero,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DecompConfig {
    pub kernel_size: usize,
    pub pad_mode: PadMode,
}

impl Default for DecompConfig {
    fn default() -> Self {
        Self {
            kernel_size: 25,
            pad_mode: PadMode::Replicate,
        }
    }
}

impl DecompConfig {
    pub fn with_kernel(kernel_size: usize) -> Self {
        Self {
            kernel_size,
            ..Self::default()
        }
    }

    pub fn pad(&self) -> usize {
        (self.kernel_size - 1) / 2
    }
}

/// Trend and seasonal components of a series. `trend + seasonal`
/// reconstructs the input exactly by construction.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub trend: Array2<f64>,
    pub seasonal: Array2<f64>,
}

/// Centred moving average along time, one column per channel. Each output
/// element is the mean of the `kernel_size` values around it, with
/// out-of-range positions filled per `pad_mode`.
pub fn moving_average(x: &Array2<f64>, cfg: &DecompConfig) -> Result<Array2<f64>> {
    if cfg.kernel_size % 2 == 0 || cfg.kernel_size == 0 {
        return Err(Error::EvenKernel(cfg.kernel_size));
    }
    let (h, d) = x.dim();
    let pad = cfg.pad() as isize;
    let ks = cfg.kernel_size as f64;
    let mut out = Array2::zeros((h, d));
    for c in 0..d {
        for t in 0..h {
            let mut acc = 0.0;
            for off in -pad..=pad {
                let idx = t as isize + off;
                acc += if idx < 0 {
                    match cfg.pad_mode {
                        PadMode::Replicate => x[(0, c)],
                        PadMode::Zero => 0.0,
                    }
                } else if idx >= h as isize {
                    match cfg.pad_mode {
                        PadMode::Replicate => x[(h - 1, c)],
                        PadMode::Zero => 0.0,
                    }
                } else {
                    x[(idx as usize, c)]
                };
            }
            out[(t, c)] = acc / ks;
        }
    }
    Ok(out)
}

/// Splits `x` into a moving-average trend and the seasonal residual.
pub fn decompose(x: &Array2<f64>, cfg: &DecompConfig) -> Result<Decomposition> {
    let trend = moving_average(x, cfg)?;
    let seasonal = x - &trend;
    Ok(Decomposition { trend, seasonal })
}
