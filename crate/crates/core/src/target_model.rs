//! The convolutional target model, its weighted loss and gradient-descent updates.
//!
//! The model is a single bias-free 3×3 convolution whose output channels are
//! summed into one score map. Training minimizes
//!
//! ```text
//! Σ_n ‖ w_n · W_n ⊙ (Y_n − C(X_n)) ‖² + λ Σ_k θ_k²
//! ```
//!
//! where `w_n` is a per-sample weight (temporal decay or reconstruction
//! coefficient), `W_n` the class-balancing pixel weights and the label encoder
//! is the identity.

use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{ensure, Error, Result};
use crate::grcl::{mas_penalty, mas_penalty_grad, GateMap};
use crate::numerics::{conv2d, correlate_taps, ConvWeights, FeatureGrid, MaskGrid, TAPS};
use crate::par::{self, Execution};

pub const CANONICAL_C_IN: usize = 512;
pub const CANONICAL_C_OUT: usize = 16;
/// Parameter count of the full-scale target model.
pub const CANONICAL_PARAM_COUNT: usize = CANONICAL_C_OUT * CANONICAL_C_IN * TAPS;

const MODEL_MAGIC: &[u8; 4] = b"DGTM";
const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TargetModel {
    weights: ConvWeights,
}

impl TargetModel {
    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        Self {
            weights: ConvWeights::zeros(c_out, c_in),
        }
    }

    pub fn from_weights(weights: ConvWeights) -> Self {
        Self { weights }
    }

    /// Full-scale shape (16 outputs over 512 input channels).
    pub fn canonical() -> Self {
        Self::zeros(CANONICAL_C_OUT, CANONICAL_C_IN)
    }

    pub fn weights(&self) -> &ConvWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut ConvWeights {
        &mut self.weights
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }

    pub fn params(&self) -> &[f64] {
        self.weights.data()
    }

    pub fn c_in(&self) -> usize {
        self.weights.c_in()
    }

    pub fn c_out(&self) -> usize {
        self.weights.c_out()
    }

    /// Score map: the convolution response summed over output channels.
    pub fn forward(&self, x: &FeatureGrid) -> Result<MaskGrid> {
        let conv = conv2d(x, &self.weights)?;
        let n = x.spatial_len();
        let mut scores = conv.channel(0).to_vec();
        for o in 1..conv.channels() {
            for (s, v) in scores.iter_mut().zip(conv.channel(o)) {
                *s += v;
            }
        }
        debug_assert_eq!(scores.len(), n);
        MaskGrid::scores(x.height(), x.width(), scores)
    }

    pub fn predict_mask(&self, x: &FeatureGrid, threshold: f64) -> Result<MaskGrid> {
        Ok(self.forward(x)?.threshold(threshold))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        binio::write_u32(w, MODEL_VERSION)?;
        binio::write_u32(w, self.c_out() as u32)?;
        binio::write_u32(w, self.c_in() as u32)?;
        binio::write_f64s(w, self.params())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        binio::expect_magic(r, MODEL_MAGIC)?;
        let version = binio::read_u32(r)?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {version}"
            )));
        }
        let c_out = binio::read_u32(r)? as usize;
        let c_in = binio::read_u32(r)? as usize;
        let data = binio::read_f64s(r, c_out * c_in * TAPS)?;
        Ok(Self {
            weights: ConvWeights::new(c_out, c_in, data)?,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// Gated parameters receive no update at all (infinite gate strength).
    #[default]
    HardFreeze,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub l2_lambda: f64,
    pub epochs_per_update: usize,
    /// Epochs used to fit the initial model on the ground-truth frame.
    pub init_epochs: usize,
    pub learning_rate: f64,
    pub temporal_decay_base: f64,
    pub gate_mode: GateMode,
    pub execution: Execution,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            l2_lambda: 1e-4,
            epochs_per_update: 3,
            init_epochs: 60,
            learning_rate: 3e-5,
            temporal_decay_base: 0.9,
            gate_mode: GateMode::HardFreeze,
            execution: Execution::Sequential,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.l2_lambda >= 0.0, "l2_lambda must be nonnegative");
        ensure!(
            self.epochs_per_update > 0,
            "epochs_per_update must be positive"
        );
        ensure!(self.learning_rate > 0.0, "learning_rate must be positive");
        ensure!(
            self.temporal_decay_base > 0.0 && self.temporal_decay_base <= 1.0,
            "temporal_decay_base must lie in (0, 1]"
        );
        Ok(())
    }
}

/// Per-pixel class-balancing weights: each present class gets total weight `H·W/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelWeight {
    values: Vec<f64>,
}

impl PixelWeight {
    pub fn from_mask(mask: &MaskGrid) -> Self {
        let n = mask.len();
        let pos = mask.positive_count();
        let neg = n - pos;
        if pos == 0 || neg == 0 {
            return Self {
                values: vec![1.0; n],
            };
        }
        let half = n as f64 / 2.0;
        let (wp, wn) = (half / pos as f64, half / neg as f64);
        Self {
            values: mask
                .bits()
                .into_iter()
                .map(|b| if b { wp } else { wn })
                .collect(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// One training sample with its per-sample weight (`d_n` or `ψ_n`).
#[derive(Clone, Debug)]
pub struct WeightedSample<'a> {
    pub feature: &'a FeatureGrid,
    pub mask: &'a MaskGrid,
    pub weight: f64,
    pub pixel_weight: PixelWeight,
}

impl<'a> WeightedSample<'a> {
    pub fn new(feature: &'a FeatureGrid, mask: &'a MaskGrid, weight: f64) -> Self {
        Self {
            feature,
            mask,
            weight,
            pixel_weight: PixelWeight::from_mask(mask),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossGrad {
    /// Data term plus ridge term.
    pub loss: f64,
    pub data_loss: f64,
    /// Gradient of `loss`.
    pub grad: Vec<f64>,
    /// Gradient of the data term alone.
    pub data_grad: Vec<f64>,
}

fn check_batch(model: &TargetModel, batch: &[WeightedSample<'_>]) -> Result<()> {
    ensure!(!batch.is_empty(), "empty training batch");
    let first = batch[0].feature;
    for s in batch {
        ensure!(
            s.feature.channels() == model.c_in(),
            "sample has {} channels, model expects {}",
            s.feature.channels(),
            model.c_in()
        );
        ensure!(
            s.feature.height() == first.height() && s.feature.width() == first.width(),
            "batch samples disagree on spatial size"
        );
        ensure!(
            s.mask.matches_spatial(s.feature),
            "mask does not match its feature"
        );
        ensure!(
            s.pixel_weight.values.len() == s.mask.len(),
            "pixel weights do not match mask"
        );
        ensure!(s.weight.is_finite(), "sample weight must be finite");
    }
    Ok(())
}

/// Data loss and per-input-tap gradient (length `C_in·9`) of one sample.
fn sample_term(model: &TargetModel, s: &WeightedSample<'_>) -> Result<(f64, Vec<f64>)> {
    let scores = model.forward(s.feature)?;
    let mut data = 0.0;
    let upstream: Vec<f64> = scores
        .values()
        .iter()
        .zip(s.mask.values())
        .zip(s.pixel_weight.values())
        .map(|((&score, &y), &wp)| {
            let scale = s.weight * wp;
            let r = y - score;
            let e = scale * r;
            data += e * e;
            -2.0 * scale * scale * r
        })
        .collect();
    Ok((data, correlate_taps(s.feature, &upstream)))
}

/// Loss of the weighted batch and its exact analytic gradient.
pub fn loss_and_grad(
    model: &TargetModel,
    batch: &[WeightedSample<'_>],
    cfg: &LossConfig,
) -> Result<LossGrad> {
    check_batch(model, batch)?;
    let terms = par::map(cfg.execution, batch, |s| sample_term(model, s));
    let per_tap = model.c_in() * TAPS;
    let mut data_loss = 0.0;
    let mut taps = vec![0.0; per_tap];
    for term in terms {
        let (d, g) = term?;
        data_loss += d;
        for (t, v) in taps.iter_mut().zip(&g) {
            *t += v;
        }
    }
    // Output channels are summed, so every output channel sees the same gradient.
    let mut data_grad = Vec::with_capacity(model.param_count());
    for _ in 0..model.c_out() {
        data_grad.extend_from_slice(&taps);
    }
    let theta = model.params();
    let ridge: f64 = theta.iter().map(|t| t * t).sum::<f64>() * cfg.l2_lambda;
    let grad = data_grad
        .iter()
        .zip(theta)
        .map(|(g, t)| g + 2.0 * cfg.l2_lambda * t)
        .collect();
    Ok(LossGrad {
        loss: data_loss + ridge,
        data_loss,
        grad,
        data_grad,
    })
}

/// Soft quadratic anchor `γ Σ ω_k (θ_k − θ_k^prev)²` added to the loss during an update.
#[derive(Clone, Copy, Debug)]
pub struct MasAnchor<'a> {
    pub anchor: &'a [f64],
    pub omega: &'a [f64],
    pub gamma: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct UpdateSummary {
    pub epochs: usize,
    /// Objective before each epoch, then after the last one (`epochs + 1` values).
    pub loss_trajectory: Vec<f64>,
    pub frozen_count: usize,
    /// Data-term gradients actually applied in each epoch (zero where frozen).
    #[serde(skip)]
    pub grad_trace: Vec<Vec<f64>>,
    pub duration_ms: f64,
}

impl UpdateSummary {
    pub fn initial_loss(&self) -> f64 {
        self.loss_trajectory.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.loss_trajectory.last().copied().unwrap_or(f64::NAN)
    }
}

/// Runs `cfg.epochs_per_update` full-batch gradient-descent epochs.
pub fn train_update(
    model: &mut TargetModel,
    batch: &[WeightedSample<'_>],
    cfg: &LossConfig,
    freeze_mask: Option<&GateMap>,
    mas: Option<MasAnchor<'_>>,
) -> Result<UpdateSummary> {
    train_epochs(model, batch, cfg, cfg.epochs_per_update, freeze_mask, mas)
}

pub fn train_epochs(
    model: &mut TargetModel,
    batch: &[WeightedSample<'_>],
    cfg: &LossConfig,
    epochs: usize,
    freeze_mask: Option<&GateMap>,
    mas: Option<MasAnchor<'_>>,
) -> Result<UpdateSummary> {
    let start = Instant::now();
    let k = model.param_count();
    let frozen: Vec<bool> = match freeze_mask {
        Some(g) => {
            ensure!(
                g.len() == k,
                "freeze mask has {} bits, model has {k} parameters",
                g.len()
            );
            g.bits().to_vec()
        }
        None => vec![false; k],
    };
    if let Some(m) = &mas {
        ensure!(
            m.anchor.len() == k && m.omega.len() == k,
            "MAS anchor/importance length must equal the parameter count"
        );
    }
    let frozen_count = frozen.iter().filter(|&&b| b).count();
    let lr = cfg.learning_rate;
    let mut trajectory = Vec::with_capacity(epochs + 1);
    let mut trace = Vec::with_capacity(epochs);

    let objective = |model: &TargetModel, lg: &LossGrad| match &mas {
        Some(m) if m.gamma != 0.0 => {
            lg.loss + mas_penalty(model.params(), m.anchor, m.omega, m.gamma)
        }
        _ => lg.loss,
    };

    for _ in 0..epochs {
        let lg = loss_and_grad(model, batch, cfg)?;
        trajectory.push(objective(model, &lg));
        let penalty = match &mas {
            Some(m) if m.gamma != 0.0 => {
                Some(mas_penalty_grad(model.params(), m.anchor, m.omega, m.gamma))
            }
            _ => None,
        };
        let theta = model.weights_mut().data_mut();
        let mut applied = lg.data_grad;
        for j in 0..k {
            if frozen[j] {
                applied[j] = 0.0;
                continue;
            }
            let mut step = lg.grad[j];
            if let (Some(pg), Some(m)) = (&penalty, &mas) {
                // Cap the anchor's curvature at 1/lr so a saturated importance
                // pins the parameter to its anchor instead of overshooting.
                let curvature = 2.0 * m.gamma * m.omega[j];
                if lr * curvature > 1.0 {
                    step += (theta[j] - m.anchor[j]) / lr;
                } else {
                    step += pg[j];
                }
            }
            theta[j] -= lr * step;
        }
        trace.push(applied);
    }
    let last = loss_and_grad(model, batch, cfg)?;
    trajectory.push(objective(model, &last));
    ensure!(
        model.params().iter().all(|v| v.is_finite()),
        "training diverged (non-finite weights); reduce learning_rate"
    );
    Ok(UpdateSummary {
        epochs,
        loss_trajectory: trajectory,
        frozen_count,
        grad_trace: trace,
        duration_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}
