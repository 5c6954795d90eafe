//! Two-stage corrector network: a temporal MLP applied per channel
//! followed by a channel MLP applied per time step. Takes the chunk
//! input window and the chunk forecast (optionally decomposed into
//! trend and seasonal parts) and predicts additive corrections.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decomp::{decompose, DecompConfig};
use crate::error::{Error, Result};
use crate::micronet::{dropout, loss, relu, relu_backward, Dense, LossKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// Separate trend and seasonal correction heads (the full model).
    Both,
    /// Seasonal half forced to zero.
    TrendOnly,
    /// Trend half forced to zero.
    SeasonalOnly,
    /// Single undecomposed correction head (the plain-MLP variant).
    Undecomposed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    /// Concatenate trend and seasonal parts of the forecast into the
    /// input instead of the raw forecast.
    pub use_decomposed_input: bool,
    pub output_mode: OutputMode,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_decomposed_input: true,
            output_mode: OutputMode::Both,
        }
    }
}

/// Trend/seasonal loss weights. In the undecomposed variant only the
/// plain correction loss applies and the weights are unused.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StdLossWeights {
    pub lambda_t: f64,
    pub lambda_s: f64,
}

impl Default for StdLossWeights {
    fn default() -> Self {
        Self {
            lambda_t: 0.5,
            lambda_s: 0.5,
        }
    }
}

impl StdLossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_t < 0.0 || self.lambda_s < 0.0 || self.lambda_t + self.lambda_s <= 0.0 {
            return Err(Error::Config(
                "loss weights must be non-negative with positive sum".into(),
            ));
        }
        Ok(())
    }
}

/// One training tuple: (chunk input window, chunk forecast) paired with
/// the ground-truth error of that forecast.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectionSample {
    pub input_history: Array2<f64>,
    pub forecast: Array2<f64>,
    pub target_error: Array2<f64>,
    pub chunk_index: usize,
    pub window_start: usize,
}

#[derive(Debug, Clone)]
pub struct UecStdModel {
    pub w: usize,
    pub l: usize,
    pub d: usize,
    pub hidden: usize,
    pub dropout_p: f64,
    pub decomp_cfg: DecompConfig,
    pub ablation: Ablation,
    /// Temporal subnetwork, applied per channel: T_in -> hidden -> out rows.
    pub sub1_a: Dense,
    pub sub1_b: Dense,
    /// Channel subnetwork, applied per output time step: D -> hidden -> D.
    pub sub2_a: Dense,
    pub sub2_b: Dense,
}

impl UecStdModel {
    pub fn new_seeded(
        w: usize,
        l: usize,
        d: usize,
        hidden: usize,
        dropout_p: f64,
        decomp_cfg: DecompConfig,
        ablation: Ablation,
        rng: &mut impl Rng,
    ) -> Self {
        let t_in = Self::input_rows(w, l, &ablation);
        let out_rows = Self::output_rows(l, &ablation);
        Self {
            w,
            l,
            d,
            hidden,
            dropout_p,
            decomp_cfg,
            ablation,
            sub1_a: Dense::new_seeded(t_in, hidden, rng),
            sub1_b: Dense::new_seeded(hidden, out_rows, rng),
            sub2_a: Dense::new_seeded(d, hidden, rng),
            sub2_b: Dense::new_seeded(hidden, d, rng),
        }
    }

    fn input_rows(w: usize, l: usize, ablation: &Ablation) -> usize {
        if ablation.use_decomposed_input {
            w + 2 * l
        } else {
            w + l
        }
    }

    fn output_rows(l: usize, ablation: &Ablation) -> usize {
        match ablation.output_mode {
            OutputMode::Undecomposed => l,
            _ => 2 * l,
        }
    }

    /// Length of the concatenated time axis fed to subnetwork 1.
    pub fn t_in(&self) -> usize {
        Self::input_rows(self.w, self.l, &self.ablation)
    }

    pub fn out_rows(&self) -> usize {
        Self::output_rows(self.l, &self.ablation)
    }

    pub fn param_count(&self) -> usize {
        self.sub1_a.param_count()
            + self.sub1_b.param_count()
            + self.sub2_a.param_count()
            + self.sub2_b.param_count()
    }

    fn layers(&self) -> [&Dense; 4] {
        [&self.sub1_a, &self.sub1_b, &self.sub2_a, &self.sub2_b]
    }

    /// Row-major flat parameters in layer order (weight then bias).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in self.layers() {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", self.param_count()),
                got: format!("{}", flat.len()),
            });
        }
        let mut offset = 0;
        for layer in [
            &mut self.sub1_a,
            &mut self.sub1_b,
            &mut self.sub2_a,
            &mut self.sub2_b,
        ] {
            for v in layer.weight.iter_mut() {
                *v = flat[offset];
                offset += 1;
            }
            for v in layer.bias.iter_mut() {
                *v = flat[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    /// Builds the `T_in x D` input for one sample: history rows followed
    /// by the forecast, decomposed when the ablation asks for it.
    fn build_input(&self, history: &ArrayView2<f64>, forecast: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if history.dim() != (self.w, self.d) {
            return Err(Error::ShapeMismatch {
                expected: format!("history ({}, {})", self.w, self.d),
                got: format!("{:?}", history.dim()),
            });
        }
        if forecast.dim() != (self.l, self.d) {
            return Err(Error::ShapeMismatch {
                expected: format!("forecast ({}, {})", self.l, self.d),
                got: format!("{:?}", forecast.dim()),
            });
        }
        let t_in = self.t_in();
        let mut x = Array2::zeros((t_in, self.d));
        for (i, row) in history.rows().into_iter().enumerate() {
            x.row_mut(i).assign(&row);
        }
        if self.ablation.use_decomposed_input {
            let dec = decompose(&forecast.to_owned(), &self.decomp_cfg)?;
            for j in 0..self.l {
                x.row_mut(self.w + j).assign(&dec.trend.row(j));
                x.row_mut(self.w + self.l + j).assign(&dec.seasonal.row(j));
            }
        } else {
            for j in 0..self.l {
                x.row_mut(self.w + j).assign(&forecast.row(j));
            }
        }
        Ok(x)
    }

    /// Batched forward pass; returns the per-sample trend and seasonal
    /// corrections (B x L x D each) and the cached intermediates needed
    /// by `backward_batch`. In undecomposed mode the full correction is
    /// carried in the trend slot and the seasonal slot is zero.
    pub fn forward_batch(
        &self,
        histories: &[ArrayView2<f64>],
        forecasts: &[ArrayView2<f64>],
        rng: &mut impl Rng,
        training: bool,
    ) -> Result<(BatchOutput, ForwardCache)> {
        let b = histories.len();
        if b == 0 || forecasts.len() != b {
            return Err(Error::ShapeMismatch {
                expected: format!("{b} forecasts"),
                got: format!("{}", forecasts.len()),
            });
        }
        let (t_in, d, r) = (self.t_in(), self.d, self.out_rows());

        // Stage 1 operates on each channel's time vector: (B*D, T_in).
        let mut a1 = Array2::zeros((b * d, t_in));
        for (i, (h, f)) in histories.iter().zip(forecasts).enumerate() {
            let x = self.build_input(h, f)?;
            for c in 0..d {
                for t in 0..t_in {
                    a1[(i * d + c, t)] = x[(t, c)];
                }
            }
        }
        let z1 = self.sub1_a.forward(&a1)?;
        let r1 = relu(&z1);
        let z2 = self.sub1_b.forward(&r1)?;
        let (drop2, mask2) = dropout(&z2, self.dropout_p, rng, training);

        // Stage 2 operates on each time step's channel vector: (B*R, D).
        let mut h2 = Array2::zeros((b * r, d));
        for i in 0..b {
            for row in 0..r {
                for c in 0..d {
                    h2[(i * r + row, c)] = drop2[(i * d + c, row)];
                }
            }
        }
        let z3 = self.sub2_a.forward(&h2)?;
        let r3 = relu(&z3);
        let z4 = self.sub2_b.forward(&r3)?;
        let (y, mask4) = dropout(&z4, self.dropout_p, rng, training);

        let l = self.l;
        let mut trend = Array3::zeros((b, l, d));
        let mut seasonal = Array3::zeros((b, l, d));
        for i in 0..b {
            for j in 0..l {
                for c in 0..d {
                    match self.ablation.output_mode {
                        OutputMode::Undecomposed => {
                            trend[(i, j, c)] = y[(i * r + j, c)];
                        }
                        OutputMode::Both => {
                            trend[(i, j, c)] = y[(i * r + j, c)];
                            seasonal[(i, j, c)] = y[(i * r + l + j, c)];
                        }
                        OutputMode::TrendOnly => {
                            trend[(i, j, c)] = y[(i * r + j, c)];
                        }
                        OutputMode::SeasonalOnly => {
                            seasonal[(i, j, c)] = y[(i * r + l + j, c)];
                        }
                    }
                }
            }
        }
        Ok((
            BatchOutput { trend, seasonal },
            ForwardCache {
                a1,
                z1,
                r1,
                mask2,
                h2,
                z3,
                r3,
                mask4,
                batch: b,
            },
        ))
    }

    /// Single-sample inference forward pass.
    pub fn forward_one(
        &self,
        history: &Array2<f64>,
        forecast: &Array2<f64>,
        rng: &mut impl Rng,
        training: bool,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let (out, _) =
            self.forward_batch(&[history.view()], &[forecast.view()], rng, training)?;
        Ok((
            out.trend.index_axis(Axis(0), 0).to_owned(),
            out.seasonal.index_axis(Axis(0), 0).to_owned(),
        ))
    }

    /// Backpropagates output gradients to a flat parameter gradient in
    /// `params_flat` order. Gradients for force-zeroed output halves are
    /// discarded, matching the forward masking.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        d_trend: &Array3<f64>,
        d_seasonal: &Array3<f64>,
    ) -> Vec<f64> {
        let (b, l, d, r) = (cache.batch, self.l, self.d, self.out_rows());
        let mut dy = Array2::zeros((b * r, d));
        for i in 0..b {
            for j in 0..l {
                for c in 0..d {
                    match self.ablation.output_mode {
                        OutputMode::Undecomposed => {
                            dy[(i * r + j, c)] = d_trend[(i, j, c)];
                        }
                        OutputMode::Both => {
                            dy[(i * r + j, c)] = d_trend[(i, j, c)];
                            dy[(i * r + l + j, c)] = d_seasonal[(i, j, c)];
                        }
                        OutputMode::TrendOnly => {
                            dy[(i * r + j, c)] = d_trend[(i, j, c)];
                        }
                        OutputMode::SeasonalOnly => {
                            dy[(i * r + l + j, c)] = d_seasonal[(i, j, c)];
                        }
                    }
                }
            }
        }

        let dz4 = &dy * &cache.mask4;
        let g4 = self.sub2_b.backward(&cache.r3, &dz4);
        let dz3 = relu_backward(&cache.z3, &g4.dx);
        let g3 = self.sub2_a.backward(&cache.h2, &dz3);

        // Undo the stage-1 -> stage-2 permutation.
        let mut ddrop2 = Array2::zeros((b * d, r));
        for i in 0..b {
            for row in 0..r {
                for c in 0..d {
                    ddrop2[(i * d + c, row)] = g3.dx[(i * r + row, c)];
                }
            }
        }
        let dz2 = &ddrop2 * &cache.mask2;
        let g2 = self.sub1_b.backward(&cache.r1, &dz2);
        let dz1 = relu_backward(&cache.z1, &g2.dx);
        let g1 = self.sub1_a.backward(&cache.a1, &dz1);

        let mut flat = Vec::with_capacity(self.param_count());
        for g in [&g1, &g2, &g3, &g4] {
            flat.extend(g.dw.iter());
            flat.extend(g.db.iter());
        }
        flat
    }
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub trend: Array3<f64>,
    pub seasonal: Array3<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub a1: Array2<f64>,
    pub z1: Array2<f64>,
    pub r1: Array2<f64>,
    pub mask2: Array2<f64>,
    pub h2: Array2<f64>,
    pub z3: Array2<f64>,
    pub r3: Array2<f64>,
    pub mask4: Array2<f64>,
    pub batch: usize,
}

/// Corrected forecast `X + beta * (dt + ds)`.
pub fn apply_correction(
    forecast: &Array2<f64>,
    delta_trend: &Array2<f64>,
    delta_seasonal: &Array2<f64>,
    beta: f64,
) -> Array2<f64> {
    debug_assert!((0.0..=1.0).contains(&beta));
    forecast + &(beta * &(delta_trend + delta_seasonal))
}

/// Weighted trend/seasonal correction loss over a batch, with gradients
/// wrt the two output heads. The ground-truth error is decomposed with
/// the same moving-average config the model uses. In undecomposed mode
/// the plain correction loss on the single head applies instead.
pub fn std_loss(
    output: &BatchOutput,
    target_error: &Array3<f64>,
    weights: &StdLossWeights,
    kind: LossKind,
    decomp_cfg: &DecompConfig,
    output_mode: OutputMode,
) -> Result<(f64, Array3<f64>, Array3<f64>)> {
    weights.validate()?;
    let (b, l, d) = target_error.dim();
    if output.trend.dim() != (b, l, d) {
        return Err(Error::ShapeMismatch {
            expected: format!("({b}, {l}, {d})"),
            got: format!("{:?}", output.trend.dim()),
        });
    }

    let flatten = |a: &Array3<f64>| -> Array2<f64> {
        a.to_shape((b * l, d)).expect("standard layout").to_owned()
    };
    let unflatten = |a: Array2<f64>| -> Array3<f64> {
        a.into_shape((b, l, d)).expect("standard layout")
    };

    if output_mode == OutputMode::Undecomposed {
        let (value, grad) = loss(kind, &flatten(&output.trend), &flatten(target_error))?;
        return Ok((value, unflatten(grad), Array3::zeros((b, l, d))));
    }

    let mut target_trend = Array3::zeros((b, l, d));
    let mut target_seasonal = Array3::zeros((b, l, d));
    for i in 0..b {
        let err = target_error.index_axis(Axis(0), i).to_owned();
        let dec = decompose(&err, decomp_cfg)?;
        target_trend.index_axis_mut(Axis(0), i).assign(&dec.trend);
        target_seasonal
            .index_axis_mut(Axis(0), i)
            .assign(&dec.seasonal);
    }

    let (loss_t, grad_t) = loss(kind, &flatten(&output.trend), &flatten(&target_trend))?;
    let (loss_s, grad_s) = loss(kind, &flatten(&output.seasonal), &flatten(&target_seasonal))?;
    let total = weights.lambda_t * loss_t + weights.lambda_s * loss_s;
    Ok((
        total,
        unflatten(grad_t * weights.lambda_t),
        unflatten(grad_s * weights.lambda_s),
    ))
}

/// Serialized model: hyperparameters, shapes, and the flat row-major
/// parameter vector (hex-encoded f64 bits so restores are bit-exact).
/// A checkpoint fully determines behavior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub w: usize,
    pub l: usize,
    pub d: usize,
    pub hidden: usize,
    pub dropout_p: f64,
    pub decomp: DecompConfig,
    pub ablation: Ablation,
    pub params_hex: String,
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

impl UecStdModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            w: self.w,
            l: self.l,
            d: self.d,
            hidden: self.hidden,
            dropout_p: self.dropout_p,
            decomp: self.decomp_cfg,
            ablation: self.ablation,
            params_hex: crate::codec::encode_f64s(self.params_flat()),
            meta: serde_json::Map::new(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint schema version {}",
                ckpt.schema_version
            )));
        }
        let t_in = Self::input_rows(ckpt.w, ckpt.l, &ckpt.ablation);
        let out_rows = Self::output_rows(ckpt.l, &ckpt.ablation);
        let mut model = Self {
            w: ckpt.w,
            l: ckpt.l,
            d: ckpt.d,
            hidden: ckpt.hidden,
            dropout_p: ckpt.dropout_p,
            decomp_cfg: ckpt.decomp,
            ablation: ckpt.ablation,
            sub1_a: Dense::zeros(t_in, ckpt.hidden),
            sub1_b: Dense::zeros(ckpt.hidden, out_rows),
            sub2_a: Dense::zeros(ckpt.d, ckpt.hidden),
            sub2_b: Dense::zeros(ckpt.hidden, ckpt.d),
        };
        model.set_params_flat(&crate::codec::decode_f64s(&ckpt.params_hex)?)?;
        Ok(model)
    }
}
