//! Pixel grids, face boxes, and binary masks, plus the image file I/O the
//! dataset pipeline and CLI need.
//!
//! Images are `H x W x 3` arrays of `f64` in `[0, 1]`. Masks are `H x W`
//! boolean arrays. Keeping everything in double precision avoids a second
//! numeric type in the math-heavy modules.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type PixelGrid = Array3<f64>;
pub type BoolGrid = Array2<bool>;

/// Axis-aligned face detection in pixel coordinates (origin top-left).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub confidence: f64,
}

impl FaceBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize, confidence: f64) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::invalid(format!("face box must have positive extent, got {w}x{h}")));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::invalid(format!("face box confidence {confidence} outside [0, 1]")));
        }
        Ok(FaceBox { x, y, w, h, confidence })
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    /// Intersection with a rectangle given as (x, y, w, h); `None` when disjoint.
    pub fn intersect(&self, x: usize, y: usize, w: usize, h: usize) -> Option<FaceBox> {
        let x0 = self.x.max(x);
        let y0 = self.y.max(y);
        let x1 = (self.x + self.w).min(x + w);
        let y1 = (self.y + self.h).min(y + h);
        if x1 > x0 && y1 > y0 {
            Some(FaceBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0, confidence: self.confidence })
        } else {
            None
        }
    }

    /// Number of `true` mask cells inside the box, treating out-of-mask area as false.
    pub fn overlap_with_mask(&self, mask: &BoolGrid) -> usize {
        let (mh, mw) = mask.dim();
        let mut n = 0;
        for y in self.y..(self.y + self.h).min(mh) {
            for x in self.x..(self.x + self.w).min(mw) {
                if mask[[y, x]] {
                    n += 1;
                }
            }
        }
        n
    }
}

/// One class-labelled region proposed by a segmentation adapter.
#[derive(Debug, Clone)]
pub struct SegmentMask {
    pub bitmap: BoolGrid,
    pub class_label: String,
}

pub fn grid_height(g: &PixelGrid) -> usize {
    g.dim().0
}

pub fn grid_width(g: &PixelGrid) -> usize {
    g.dim().1
}

/// Solid-colour image.
pub fn filled(h: usize, w: usize, rgb: [f64; 3]) -> PixelGrid {
    let mut g = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                g[[y, x, c]] = rgb[c];
            }
        }
    }
    g
}

/// Area-weighted box resampling to `gh x gw`. Exact block averaging when the
/// source divides evenly; fractional pixel coverage otherwise.
pub fn downsample(src: &PixelGrid, gh: usize, gw: usize) -> Result<PixelGrid> {
    let (h, w, _) = src.dim();
    if h == 0 || w == 0 || gh == 0 || gw == 0 {
        return Err(Error::invalid("downsample requires non-empty source and target"));
    }
    let mut out = Array3::zeros((gh, gw, 3));
    let sy = h as f64 / gh as f64;
    let sx = w as f64 / gw as f64;
    for oy in 0..gh {
        let y0 = oy as f64 * sy;
        let y1 = (oy + 1) as f64 * sy;
        for ox in 0..gw {
            let x0 = ox as f64 * sx;
            let x1 = (ox + 1) as f64 * sx;
            let mut acc = [0.0f64; 3];
            let mut area = 0.0;
            let mut y = y0;
            while y < y1 - 1e-12 {
                let yi = y.floor() as usize;
                let ny = (yi as f64 + 1.0).min(y1);
                let wy = ny - y;
                let mut x = x0;
                while x < x1 - 1e-12 {
                    let xi = x.floor() as usize;
                    let nx = (xi as f64 + 1.0).min(x1);
                    let wx = nx - x;
                    let wgt = wy * wx;
                    for c in 0..3 {
                        acc[c] += src[[yi.min(h - 1), xi.min(w - 1), c]] * wgt;
                    }
                    area += wgt;
                    x = nx;
                }
                y = ny;
            }
            for c in 0..3 {
                out[[oy, ox, c]] = acc[c] / area;
            }
        }
    }
    Ok(out)
}

/// Crops `[y..y+h, x..x+w]`; the window must lie inside the image.
pub fn crop(src: &PixelGrid, x: usize, y: usize, w: usize, h: usize) -> Result<PixelGrid> {
    let (sh, sw, _) = src.dim();
    if x + w > sw || y + h > sh || w == 0 || h == 0 {
        return Err(Error::invalid(format!(
            "crop {w}x{h}+{x}+{y} outside image {sw}x{sh}"
        )));
    }
    let mut out = Array3::zeros((h, w, 3));
    for yy in 0..h {
        for xx in 0..w {
            for c in 0..3 {
                out[[yy, xx, c]] = src[[y + yy, x + xx, c]];
            }
        }
    }
    Ok(out)
}

pub fn crop_mask(src: &BoolGrid, x: usize, y: usize, w: usize, h: usize) -> Result<BoolGrid> {
    let (sh, sw) = src.dim();
    if x + w > sw || y + h > sh || w == 0 || h == 0 {
        return Err(Error::invalid(format!(
            "mask crop {w}x{h}+{x}+{y} outside mask {sw}x{sh}"
        )));
    }
    let mut out = Array2::from_elem((h, w), false);
    for yy in 0..h {
        for xx in 0..w {
            out[[yy, xx]] = src[[y + yy, x + xx]];
        }
    }
    Ok(out)
}

fn to_unit(v: u8) -> f64 {
    f64::from(v) / 255.0
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Decodes a PNG or JPEG into an RGB grid.
pub fn load_image(path: &Path) -> Result<PixelGrid> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let mut g = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            g[[y as usize, x as usize, c]] = to_unit(p.0[c]);
        }
    }
    Ok(g)
}

/// Writes an 8-bit RGB PNG; values are clamped to `[0, 1]`.
pub fn save_image(path: &Path, g: &PixelGrid) -> Result<()> {
    let (h, w, _) = g.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([to_byte(g[[y, x, 0]]), to_byte(g[[y, x, 1]]), to_byte(g[[y, x, 2]])]),
            );
        }
    }
    img.save(path)?;
    Ok(())
}

/// Writes a mask as a 1-bit grayscale PNG (bit set = selected pixel).
pub fn save_mask(path: &Path, mask: &BoolGrid) -> Result<()> {
    let (h, w) = mask.dim();
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let mut writer = enc.write_header()?;
    let row_bytes = w.div_ceil(8);
    let mut data = vec![0u8; row_bytes * h];
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                data[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    writer.write_image_data(&data)?;
    Ok(())
}

/// Reads a mask written by [`save_mask`]; any nonzero sample counts as true,
/// so 8-bit binary masks from other tools load as well.
pub fn load_mask(path: &Path) -> Result<BoolGrid> {
    let dec = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = dec.read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    let w = info.width as usize;
    let h = info.height as usize;
    let mut mask = Array2::from_elem((h, w), false);
    match (info.color_type, info.bit_depth) {
        (png::ColorType::Grayscale, png::BitDepth::One) => {
            let row_bytes = info.line_size;
            for y in 0..h {
                for x in 0..w {
                    let byte = buf[y * row_bytes + x / 8];
                    mask[[y, x]] = byte & (0x80 >> (x % 8)) != 0;
                }
            }
        }
        (png::ColorType::Grayscale, png::BitDepth::Eight) => {
            for y in 0..h {
                for x in 0..w {
                    mask[[y, x]] = buf[y * w + x] != 0;
                }
            }
        }
        (ct, bd) => {
            return Err(Error::invalid(format!(
                "unsupported mask png format {ct:?}/{bd:?} in {}",
                path.display()
            )))
        }
    }
    Ok(mask)
}
