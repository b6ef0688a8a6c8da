//! Synthetic fixture corpus.
//!
//! Produces small labelled "person photo" images that every mock adapter
//! understands, with enough identity structure that the full loop — dataset
//! build, training, generation, metric scoring — behaves qualitatively like
//! it would on real data:
//!
//! - Each image carries a centered square face framed by the one-pixel
//!   magenta marker the mock detector scans for.
//! - The face interior is an 8×8 grid of grayscale cells encoding the
//!   identity as a row of a Hadamard matrix, so identities are mutually
//!   orthogonal in exactly the cell space the mock face embedder measures
//!   (8×8 mean-subtracted downsample).
//! - Cells are 4 pixels square: at the default 64-pixel image over a
//!   16×16-cell latent, one pattern cell lands on one latent cell, making
//!   the identity directly expressible by the toy denoiser.
//! - Per-variant cell noise, background tint, and a torso block below the
//!   face give same-identity images natural variation.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use crate::adapters::mock::MockSegmenter;
use crate::adapters::Segmenter;
use crate::encoders::IdImage;
use crate::error::{Error, Result};
use crate::grid::{filled, save_image, PixelGrid};
use crate::rng::{derive_seed_str, rng_from};

/// Geometry and noise levels for fixture images.
#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    /// Square image side in pixels.
    pub image_side: usize,
    /// Face box side including the one-pixel frame; the interior must be
    /// divisible into the 8×8 pattern grid.
    pub face_side: usize,
    /// Half-range of the grayscale identity pattern around mid-grey.
    pub pattern_amp: f64,
    /// Half-range of per-variant uniform noise added per pattern cell.
    pub cell_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { image_side: 64, face_side: 34, pattern_amp: 0.32, cell_noise: 0.08, seed: 0 }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.face_side < 10 || self.face_side + 2 > self.image_side {
            return Err(Error::config(format!(
                "face side {} does not fit a {}-pixel image",
                self.face_side, self.image_side
            )));
        }
        if (self.face_side - 2) % 8 != 0 {
            return Err(Error::config(format!(
                "face interior {} is not divisible into 8x8 cells",
                self.face_side - 2
            )));
        }
        Ok(())
    }

    /// Top-left corner of the (centered) face box.
    pub fn face_origin(&self) -> (usize, usize) {
        let o = (self.image_side - self.face_side) / 2;
        (o, o)
    }
}

/// Sylvester Hadamard matrix of power-of-two order; rows are mutually
/// orthogonal and every entry is ±1.
pub fn hadamard(order: usize) -> Result<Array2<f64>> {
    if order == 0 || !order.is_power_of_two() {
        return Err(Error::invalid(format!("hadamard order must be a power of two, got {order}")));
    }
    let mut h = Array2::from_elem((1, 1), 1.0);
    let mut n = 1;
    while n < order {
        let mut next = Array2::zeros((2 * n, 2 * n));
        for y in 0..n {
            for x in 0..n {
                let v = h[[y, x]];
                next[[y, x]] = v;
                next[[y, x + n]] = v;
                next[[y + n, x]] = v;
                next[[y + n, x + n]] = -v;
            }
        }
        h = next;
        n *= 2;
    }
    Ok(h)
}

/// Maximum number of distinct identities the pattern space supports.
pub const MAX_IDENTITIES: usize = 63;

/// The ±1 cell pattern for identity `index`, as an 8×8 grid. Row 0 of the
/// Hadamard matrix (all ones) is skipped — a constant pattern would vanish
/// under the embedder's mean subtraction.
pub fn identity_pattern(index: usize) -> Result<Array2<f64>> {
    if index >= MAX_IDENTITIES {
        return Err(Error::invalid(format!(
            "identity index {index} exceeds the {MAX_IDENTITIES}-pattern budget"
        )));
    }
    let h = hadamard(64)?;
    let mut cells = Array2::zeros((8, 8));
    for c in 0..64 {
        cells[[c / 8, c % 8]] = h[[index + 1, c]];
    }
    Ok(cells)
}

/// Renders one fixture image: tinted background, framed face carrying the
/// identity pattern (plus per-variant cell noise), and a torso block below
/// the face. Deterministic in `(config, pattern_index, variant_seed)`.
pub fn synth_image(
    cfg: &SyntheticConfig,
    pattern_index: usize,
    variant_seed: u64,
) -> Result<PixelGrid> {
    cfg.validate()?;
    let pattern = identity_pattern(pattern_index)?;
    let mut rng = rng_from(variant_seed);
    let side = cfg.image_side;

    // Flat mid-grey background with a gentle per-variant tint.
    let tint: [f64; 3] = [
        0.5 + 0.05 * (rng.gen::<f64>() - 0.5),
        0.5 + 0.05 * (rng.gen::<f64>() - 0.5),
        0.5 + 0.05 * (rng.gen::<f64>() - 0.5),
    ];
    let mut img = filled(side, side, tint);

    let (fy, fx) = cfg.face_origin();
    let f = cfg.face_side;
    // One-pixel frame the mock detector recognizes.
    for d in 0..f {
        for c in 0..3 {
            img[[fy, fx + d, c]] = crate::adapters::mock::MARKER_RGB[c];
            img[[fy + f - 1, fx + d, c]] = crate::adapters::mock::MARKER_RGB[c];
            img[[fy + d, fx, c]] = crate::adapters::mock::MARKER_RGB[c];
            img[[fy + d, fx + f - 1, c]] = crate::adapters::mock::MARKER_RGB[c];
        }
    }
    // Identity cells: grayscale around mid-grey, one noise draw per cell.
    let cell = (f - 2) / 8;
    for cy in 0..8 {
        for cx in 0..8 {
            let noise = cfg.cell_noise * (2.0 * rng.gen::<f64>() - 1.0);
            let v = (0.5 + cfg.pattern_amp * pattern[[cy, cx]] + noise).clamp(0.0, 1.0);
            for y in 0..cell {
                for x in 0..cell {
                    let py = fy + 1 + cy * cell + y;
                    let px = fx + 1 + cx * cell + x;
                    for c in 0..3 {
                        img[[py, px, c]] = v;
                    }
                }
            }
        }
    }
    // Torso block below the face, inside the segmenter's person region.
    let torso: [f64; 3] = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
    let ty0 = fy + f;
    let ty1 = (ty0 + f / 2).min(side);
    let tx0 = fx + f / 8;
    let tx1 = fx + f - f / 8;
    for y in ty0..ty1 {
        for x in tx0..tx1 {
            for c in 0..3 {
                img[[y, x, c]] = torso[c];
            }
        }
    }
    Ok(img)
}

/// The image paired with its person mask (as the mock segmenter would
/// produce for it), ready for the reference-encoding path.
pub fn synth_id_image(
    cfg: &SyntheticConfig,
    pattern_index: usize,
    variant_seed: u64,
) -> Result<IdImage> {
    let pixels = synth_image(cfg, pattern_index, variant_seed)?;
    let masks = MockSegmenter.segment(&pixels)?;
    let person = masks
        .into_iter()
        .find(|m| m.class_label == "person")
        .ok_or_else(|| Error::invalid("synthetic image produced no person mask"))?;
    IdImage::new(pixels, person.bitmap)
}

/// One labelled corpus file.
#[derive(Debug, Clone)]
pub struct CorpusImage {
    pub id_tag: String,
    /// File name within the identity folder, extension included.
    pub name: String,
    pub pixels: PixelGrid,
}

/// Stable identity tags `id00`, `id01`, ...
pub fn corpus_ids(count: usize) -> Vec<String> {
    (0..count).map(|i| format!("id{i:02}")).collect()
}

/// A clean corpus: `images_per_id` variants for each tag, the i-th tag
/// carrying pattern i. Variant randomness derives from the config seed, so
/// the corpus is a pure function of its arguments.
pub fn build_corpus(
    cfg: &SyntheticConfig,
    ids: &[String],
    images_per_id: usize,
) -> Result<Vec<CorpusImage>> {
    if ids.is_empty() || images_per_id == 0 {
        return Err(Error::invalid("corpus needs at least one identity and one image"));
    }
    let mut out = Vec::with_capacity(ids.len() * images_per_id);
    for (index, id) in ids.iter().enumerate() {
        for v in 0..images_per_id {
            let key = format!("{id}:{v}");
            let pixels = synth_image(cfg, index, derive_seed_str(cfg.seed, "corpus-variant", &key))?;
            out.push(CorpusImage { id_tag: id.clone(), name: format!("v{v:02}.png"), pixels });
        }
    }
    Ok(out)
}

/// An image carrying `wrong_index`'s pattern, named so it sorts after the
/// clean variants; tests drop it into another identity's folder to exercise
/// outlier rejection.
pub fn plant_image(
    cfg: &SyntheticConfig,
    group_tag: &str,
    wrong_index: usize,
) -> Result<CorpusImage> {
    let key = format!("{group_tag}:plant{wrong_index}");
    let pixels = synth_image(cfg, wrong_index, derive_seed_str(cfg.seed, "corpus-variant", &key))?;
    Ok(CorpusImage { id_tag: group_tag.to_string(), name: format!("zplant{wrong_index:02}.png"), pixels })
}

/// Writes `root/<id_tag>/<name>` for every image; returns the file count.
pub fn write_corpus(root: &Path, images: &[CorpusImage]) -> Result<usize> {
    for img in images {
        let dir = root.join(&img.id_tag);
        std::fs::create_dir_all(&dir)?;
        save_image(&dir.join(&img.name), &img.pixels)?;
    }
    Ok(images.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::mock::{MockFaceDetector, MockFaceEmbedder};
    use crate::adapters::{FaceDetector, FaceEmbedder};
    use crate::diffusion::codec::encode_image;
    use crate::grid::{crop, load_image};
    use crate::model::ModelDims;

    #[test]
    fn hadamard_rows_are_orthogonal() {
        let h = hadamard(64).unwrap();
        for a in 0..64 {
            for b in 0..64 {
                let dot: f64 = (0..64).map(|c| h[[a, c]] * h[[b, c]]).sum();
                let expected = if a == b { 64.0 } else { 0.0 };
                assert_eq!(dot, expected, "rows {a},{b}");
            }
        }
        assert!(hadamard(12).is_err());
    }

    #[test]
    fn detector_reports_the_face_box_exactly() {
        let cfg = SyntheticConfig::default();
        let img = synth_image(&cfg, 0, 5).unwrap();
        let boxes = MockFaceDetector.detect(&img).unwrap();
        assert_eq!(boxes.len(), 1);
        let (fy, fx) = cfg.face_origin();
        assert_eq!((boxes[0].x, boxes[0].y, boxes[0].w, boxes[0].h), (fx, fy, 34, 34));
        assert_eq!(boxes[0].confidence, 1.0);
    }

    #[test]
    fn crop_embeddings_separate_identities() {
        let cfg = SyntheticConfig::default();
        let emb = MockFaceEmbedder::new(512, 3);
        let crop_of = |pattern: usize, variant: u64| {
            let img = synth_image(&cfg, pattern, variant).unwrap();
            let b = &MockFaceDetector.detect(&img).unwrap()[0];
            let face = crop(&img, b.x, b.y, b.w, b.h).unwrap();
            emb.embed_crop(&face).unwrap()
        };
        let a1 = crop_of(0, 1);
        let a2 = crop_of(0, 2);
        let b1 = crop_of(1, 1);
        let same = a1.cosine(&a2).unwrap();
        let diff = a1.cosine(&b1).unwrap();
        assert!(same > 0.9, "same identity should stay close, got {same}");
        assert!(diff < 0.4, "different identities should separate, got {diff}");
    }

    #[test]
    fn pattern_cells_land_on_latent_cells() {
        let cfg = SyntheticConfig::default();
        let dims = ModelDims::default();
        let img = synth_image(&cfg, 4, 9).unwrap();
        let latent = encode_image(&img, &dims).unwrap();
        let pattern = identity_pattern(4).unwrap();
        // Face interior pixels 16..48 are latent cells 4..12; each pattern
        // cell is exactly one latent cell, so the luma channel's sign must
        // track the pattern (amp 0.32 dominates noise 0.08).
        for cy in 0..8 {
            for cx in 0..8 {
                let v = latent[[4 + cy, 4 + cx, 3]];
                assert!(
                    v.signum() == pattern[[cy, cx]].signum(),
                    "cell ({cy},{cx}): latent {v} vs pattern {}",
                    pattern[[cy, cx]]
                );
            }
        }
    }

    #[test]
    fn id_image_mask_covers_face_and_torso() {
        let cfg = SyntheticConfig::default();
        let id = synth_id_image(&cfg, 2, 3).unwrap();
        let (fy, fx) = cfg.face_origin();
        // Face center and torso center are masked; far corner is not.
        assert!(id.mask[[fy + 17, fx + 17]]);
        assert!(id.mask[[(fy + 34 + 8).min(63), 32]]);
        assert!(!id.mask[[0, 0]]);
    }

    #[test]
    fn corpus_is_deterministic_and_complete() {
        let cfg = SyntheticConfig::default();
        let ids = corpus_ids(3);
        let a = build_corpus(&cfg, &ids, 4).unwrap();
        let b = build_corpus(&cfg, &ids, 4).unwrap();
        assert_eq!(a.len(), 12);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.id_tag, y.id_tag);
            assert_eq!(x.name, y.name);
            assert_eq!(x.pixels, y.pixels);
        }
        // Same id, different variants differ; variants across ids differ.
        assert_ne!(a[0].pixels, a[1].pixels);
        assert_ne!(a[0].pixels, a[4].pixels);
    }

    #[test]
    fn written_corpus_survives_png_round_trip_for_the_detector() {
        let cfg = SyntheticConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let ids = corpus_ids(2);
        let images = build_corpus(&cfg, &ids, 2).unwrap();
        let n = write_corpus(dir.path(), &images).unwrap();
        assert_eq!(n, 4);
        let back = load_image(&dir.path().join("id01").join("v00.png")).unwrap();
        let boxes = MockFaceDetector.detect(&back).unwrap();
        assert_eq!(boxes.len(), 1, "marker frame must survive 8-bit quantization");
        assert_eq!(boxes[0].w, 34);
    }

    #[test]
    fn plant_carries_the_wrong_identity_pattern() {
        let cfg = SyntheticConfig::default();
        let emb = MockFaceEmbedder::new(512, 3);
        let embed = |img: &PixelGrid| {
            let b = &MockFaceDetector.detect(img).unwrap()[0];
            emb.embed_crop(&crop(img, b.x, b.y, b.w, b.h).unwrap()).unwrap()
        };
        let clean = synth_image(&cfg, 0, 1).unwrap();
        let plant = plant_image(&cfg, "id00", 7).unwrap();
        assert_eq!(plant.id_tag, "id00");
        let wrong_ref = synth_image(&cfg, 7, 2).unwrap();
        assert!(embed(&plant.pixels).cosine(&embed(&wrong_ref)).unwrap() > 0.9);
        assert!(embed(&plant.pixels).cosine(&embed(&clean)).unwrap() < 0.4);
    }
}
