//! Noise-prediction loss, optionally restricted to the latent cells covered
//! by a subject mask.

use ndarray::Array2;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::grid::BoolGrid;
use crate::model::ModelDims;

/// Majority-vote downsample of a pixel mask onto the latent grid: a cell is
/// kept when at least half of its pixel block is selected. Pixel dimensions
/// must be integer multiples of the latent dimensions.
pub fn downsample_mask(mask: &BoolGrid, latent_h: usize, latent_w: usize) -> Result<BoolGrid> {
    let (h, w) = mask.dim();
    if latent_h == 0 || latent_w == 0 || h % latent_h != 0 || w % latent_w != 0 {
        return Err(Error::invalid(format!(
            "mask {h}x{w} does not tile a {latent_h}x{latent_w} latent grid"
        )));
    }
    let by = h / latent_h;
    let bx = w / latent_w;
    let area = by * bx;
    let mut out = Array2::from_elem((latent_h, latent_w), false);
    for cy in 0..latent_h {
        for cx in 0..latent_w {
            let mut count = 0usize;
            for y in 0..by {
                for x in 0..bx {
                    if mask[[cy * by + y, cx * bx + x]] {
                        count += 1;
                    }
                }
            }
            out[[cy, cx]] = 2 * count >= area;
        }
    }
    Ok(out)
}

/// Per-entry weights over a flattened latent, in the same row-major cell
/// order as [`crate::diffusion::codec::Latent::flat`]: selected cells weigh
/// 1 across every channel, the rest 0.
pub fn flatten_mask_weights(latent_mask: &BoolGrid, channels: usize) -> Array2<f64> {
    let (h, w) = latent_mask.dim();
    let mut weights = Array2::zeros((h * w, channels));
    for cy in 0..h {
        for cx in 0..w {
            if latent_mask[[cy, cx]] {
                for c in 0..channels {
                    weights[[cy * w + cx, c]] = 1.0;
                }
            }
        }
    }
    weights
}

/// Weights for one training example's loss term.
#[derive(Debug, Clone)]
pub struct LossWeights {
    /// (latent_h·latent_w) x latent_c weight matrix for the weighted mean.
    pub matrix: Array2<f64>,
    /// Whether the mask actually restricted the loss. False both when no
    /// mask was requested and when an empty mask forced the fallback.
    pub used_mask: bool,
}

/// Resolves the loss weights for an example. `mask` is the pixel-space
/// subject mask; `None` trains on the whole latent. A mask that covers no
/// latent cell after downsampling falls back to the unmasked loss (with a
/// warning) rather than producing a degenerate all-zero weighting.
pub fn diffusion_loss_weights(mask: Option<&BoolGrid>, dims: &ModelDims) -> Result<LossWeights> {
    let rows = dims.latent_h * dims.latent_w;
    let full = Array2::ones((rows, dims.latent_c));
    let Some(mask) = mask else {
        return Ok(LossWeights { matrix: full, used_mask: false });
    };
    let latent_mask = downsample_mask(mask, dims.latent_h, dims.latent_w)?;
    if !latent_mask.iter().any(|&v| v) {
        log::warn!("subject mask covers no latent cell; falling back to the unmasked loss");
        return Ok(LossWeights { matrix: full, used_mask: false });
    }
    Ok(LossWeights { matrix: flatten_mask_weights(&latent_mask, dims.latent_c), used_mask: true })
}

/// Weighted mean squared error between a noise prediction and the true noise
/// (both flattened latents). This is the plain-value twin of the tape
/// program the trainer differentiates.
pub fn masked_diffusion_loss(
    prediction: &Array2<f64>,
    target: &Array2<f64>,
    weights: &LossWeights,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.leaf(prediction.clone());
    let t = tape.leaf(target.clone());
    let loss = loss_node(&mut tape, p, t, weights)?;
    Ok(tape.value(loss)[[0, 0]])
}

/// Appends the loss program to an existing tape and returns the scalar node.
pub fn loss_node(
    tape: &mut Tape,
    prediction: crate::autodiff::NodeId,
    target: crate::autodiff::NodeId,
    weights: &LossWeights,
) -> Result<crate::autodiff::NodeId> {
    let diff = tape.sub(prediction, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.weighted_mean(sq, weights.matrix.clone())
}
