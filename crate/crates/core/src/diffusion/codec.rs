//! Fixed (parameter-free) image ↔ latent codec.
//!
//! Each latent cell summarizes one square pixel block: channels are the
//! block means of red, green, blue, and luma, mapped from [0,1] to [−1,1].
//! Decoding paints blocks back from the rgb channels. Realism is not a
//! goal; the codec exists so latents correspond to image content.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::grid::PixelGrid;
use crate::model::ModelDims;

/// A spatial latent with its diffusion timestep.
#[derive(Debug, Clone)]
pub struct Latent {
    pub tensor: Array3<f64>,
    pub timestep: usize,
}

impl Latent {
    pub fn new(tensor: Array3<f64>, timestep: usize) -> Result<Self> {
        if !tensor.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("latent has non-finite entries".into()));
        }
        Ok(Self { tensor, timestep })
    }

    /// Row-major flattening to (h·w)×c.
    pub fn flat(&self) -> Array2<f64> {
        let (h, w, c) = self.tensor.dim();
        let mut out = Array2::zeros((h * w, c));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[[y * w + x, ch]] = self.tensor[[y, x, ch]];
                }
            }
        }
        out
    }

    pub fn from_flat(flat: &Array2<f64>, h: usize, w: usize, timestep: usize) -> Result<Self> {
        if flat.nrows() != h * w {
            return Err(Error::dim("latent rows", format!("{}", h * w), format!("{}", flat.nrows())));
        }
        let c = flat.ncols();
        let mut tensor = Array3::zeros((h, w, c));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    tensor[[y, x, ch]] = flat[[y * w + x, ch]];
                }
            }
        }
        Latent::new(tensor, timestep)
    }
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Encodes an image whose sides are integer multiples of the latent sides.
pub fn encode_image(image: &PixelGrid, dims: &ModelDims) -> Result<Array3<f64>> {
    if dims.latent_c != 4 {
        return Err(Error::config(format!(
            "codec produces 4 channels, model expects {}",
            dims.latent_c
        )));
    }
    let (h, w, _) = image.dim();
    if h % dims.latent_h != 0 || w % dims.latent_w != 0 {
        return Err(Error::dim(
            "codec image",
            format!("multiples of {}x{}", dims.latent_h, dims.latent_w),
            format!("{h}x{w}"),
        ));
    }
    let (bh, bw) = (h / dims.latent_h, w / dims.latent_w);
    let area = (bh * bw) as f64;
    let mut latent = Array3::zeros((dims.latent_h, dims.latent_w, 4));
    for ly in 0..dims.latent_h {
        for lx in 0..dims.latent_w {
            let mut rgb = [0.0; 3];
            for dy in 0..bh {
                for dx in 0..bw {
                    for (c, acc) in rgb.iter_mut().enumerate() {
                        *acc += image[[ly * bh + dy, lx * bw + dx, c]];
                    }
                }
            }
            for v in rgb.iter_mut() {
                *v /= area;
            }
            let luma = LUMA[0] * rgb[0] + LUMA[1] * rgb[1] + LUMA[2] * rgb[2];
            for (c, v) in rgb.iter().enumerate() {
                latent[[ly, lx, c]] = 2.0 * v - 1.0;
            }
            latent[[ly, lx, 3]] = 2.0 * luma - 1.0;
        }
    }
    Ok(latent)
}

/// Decodes a latent back to pixels with the given block size, clamping into
/// [0,1]. The luma channel is ignored; rgb carries the content.
pub fn decode_latent(latent: &Array3<f64>, block: usize) -> Result<PixelGrid> {
    if block == 0 {
        return Err(Error::config("decode block size must be positive"));
    }
    let (lh, lw, lc) = latent.dim();
    if lc < 3 {
        return Err(Error::dim("decode latent channels", ">= 3".to_string(), format!("{lc}")));
    }
    let mut image = Array3::zeros((lh * block, lw * block, 3));
    for ly in 0..lh {
        for lx in 0..lw {
            for c in 0..3 {
                let v = ((latent[[ly, lx, c]] + 1.0) / 2.0).clamp(0.0, 1.0);
                for dy in 0..block {
                    for dx in 0..block {
                        image[[ly * block + dy, lx * block + dx, c]] = v;
                    }
                }
            }
        }
    }
    Ok(image)
}
