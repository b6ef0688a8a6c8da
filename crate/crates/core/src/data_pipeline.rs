//! Identity-oriented dataset construction.
//!
//! Turns a folder tree of person photos (`<root>/<id_tag>/*.png|jpg`) into a
//! training manifest by running, in order: image-size filtering, face-size
//! filtering, identity verification (sum-similarity outlier rejection),
//! square cropping under a face-area floor, person-mask selection,
//! captioning with class-word retries, and class-word marking. Each stage
//! only ever removes images; per-image failures are logged and counted, not
//! fatal.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSet, CaptionMode, FaceEmbedding};
use crate::error::{Error, Result};
use crate::grid::{
    crop, grid_height, grid_width, load_image, save_image, save_mask, BoolGrid, FaceBox,
    PixelGrid, SegmentMask,
};
use crate::vocab::{self, Occurrence};

/// Thresholds for dataset construction. The defaults suit real photographs;
/// fixture-scale corpora pass smaller sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Minimum shortest image side accepted at ingestion.
    pub min_image_side: usize,
    /// Minimum face box width and height.
    pub min_face_side: usize,
    /// Floor for area(face) / area(crop) after square cropping.
    pub face_area_ratio: f64,
    /// Random-mode caption attempts after a class-word-free greedy caption.
    pub caption_retry_limit: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            min_image_side: 512,
            min_face_side: 256,
            face_area_ratio: 0.10,
            caption_retry_limit: 10,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_image_side == 0 || self.min_face_side == 0 {
            return Err(Error::config("size thresholds must be positive"));
        }
        if !(self.face_area_ratio > 0.0 && self.face_area_ratio <= 1.0) {
            return Err(Error::config(format!(
                "face_area_ratio must lie in (0, 1], got {}",
                self.face_area_ratio
            )));
        }
        Ok(())
    }
}

/// One surviving image with everything the trainer needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id_tag: String,
    /// Path relative to the dataset output root, forward slashes.
    pub image_path: String,
    pub mask_path: String,
    /// Face box in cropped-image coordinates.
    pub face_box: FaceBox,
    pub caption: String,
    /// Singular class word marked in the caption.
    pub class_word: String,
    /// Byte span of the marked word: `caption[span.0..span.1] == class_word`.
    pub class_span: (usize, usize),
}

impl ManifestEntry {
    pub fn span(&self) -> Range<usize> {
        self.class_span.0..self.class_span.1
    }

    pub fn load_image(&self, root: &Path) -> Result<PixelGrid> {
        load_image(&root.join(&self.image_path))
    }

    pub fn load_mask(&self, root: &Path) -> Result<BoolGrid> {
        crate::grid::load_mask(&root.join(&self.mask_path))
    }
}

/// Per-stage rejection counts; `input_images` minus all rejections equals
/// `surviving`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attrition {
    pub input_images: usize,
    pub decode_failure: usize,
    pub image_size: usize,
    pub face_size: usize,
    pub verification: usize,
    pub mask: usize,
    pub caption: usize,
    pub marking: usize,
    pub surviving: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetSummary {
    pub entries: usize,
    pub attrition: Attrition,
    pub manifest_path: PathBuf,
}

// ---------------------------------------------------------------------------
// Stage: face-size filter
// ---------------------------------------------------------------------------

/// Keeps boxes at least `min_side` on each axis.
pub fn filter_face_boxes(boxes: &[FaceBox], min_side: usize) -> Vec<FaceBox> {
    boxes.iter().filter(|b| b.w >= min_side && b.h >= min_side).cloned().collect()
}

// ---------------------------------------------------------------------------
// Stage: identity verification
// ---------------------------------------------------------------------------

/// Outcome for one image of a verified group.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxChoice {
    /// Index of the selected box within the image's candidate list.
    pub box_index: usize,
    /// Sum similarity over the other selected boxes.
    pub score: f64,
    /// False when the image was rejected as an identity outlier.
    pub kept: bool,
}

/// Verification on a precomputed distance matrix over the group's flattened
/// box list. `boxes_per_image[i]` gives image i's candidate count; the flat
/// index of image i's box b is `sum(boxes_per_image[..i]) + b`. Similarity
/// is negated distance, so higher scores mean tighter identity agreement.
///
/// Selection: per image, the box whose similarity summed over all *other*
/// boxes is highest (ties break to the lowest box index). Rejection: sum
/// scores are recomputed over the selected boxes only, and an image is
/// dropped when its score falls below mean − 8·σ (population σ). A
/// single-image group is kept unconditionally.
pub fn verify_from_distances(
    boxes_per_image: &[usize],
    distances: &[Vec<f64>],
) -> Result<Vec<BoxChoice>> {
    let total: usize = boxes_per_image.iter().sum();
    if boxes_per_image.is_empty() || boxes_per_image.iter().any(|&n| n == 0) {
        return Err(Error::invalid("every image in a verified group needs at least one face"));
    }
    if distances.len() != total || distances.iter().any(|row| row.len() != total) {
        return Err(Error::dim("verification distances", format!("{total}x{total}"), format!("{}x_", distances.len())));
    }

    let offsets: Vec<usize> = boxes_per_image
        .iter()
        .scan(0, |acc, &n| {
            let o = *acc;
            *acc += n;
            Some(o)
        })
        .collect();

    // Box selection: argmax of sum similarity over all other boxes.
    let mut selected = Vec::with_capacity(boxes_per_image.len());
    for (i, &n) in boxes_per_image.iter().enumerate() {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for b in 0..n {
            let flat = offsets[i] + b;
            let score: f64 = (0..total).filter(|&j| j != flat).map(|j| -distances[flat][j]).sum();
            if score > best_score {
                best_score = score;
                best = b;
            }
        }
        selected.push(best);
    }

    // Recompute over selected boxes only, then apply the outlier rule.
    let flat_of = |i: usize| offsets[i] + selected[i];
    let n_images = boxes_per_image.len();
    let scores: Vec<f64> = (0..n_images)
        .map(|i| (0..n_images).filter(|&j| j != i).map(|j| -distances[flat_of(i)][flat_of(j)]).sum())
        .collect();
    let mean = scores.iter().sum::<f64>() / n_images as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n_images as f64;
    let threshold = mean - 8.0 * var.sqrt();

    Ok(scores
        .iter()
        .zip(&selected)
        .map(|(&score, &box_index)| BoxChoice { box_index, score, kept: !(score < threshold) })
        .collect())
}

/// Verification over face embeddings (one list per image), using negated
/// Euclidean distance between unit-norm embeddings as the similarity.
pub fn verify_identity_group(embeddings: &[Vec<FaceEmbedding>]) -> Result<Vec<BoxChoice>> {
    let counts: Vec<usize> = embeddings.iter().map(|v| v.len()).collect();
    let flat: Vec<&FaceEmbedding> = embeddings.iter().flatten().collect();
    let mut distances = vec![vec![0.0; flat.len()]; flat.len()];
    for a in 0..flat.len() {
        for b in (a + 1)..flat.len() {
            let d = -flat[a].neg_l2(flat[b])?;
            distances[a][b] = d;
            distances[b][a] = d;
        }
    }
    verify_from_distances(&counts, &distances)
}

// ---------------------------------------------------------------------------
// Stage: square crop
// ---------------------------------------------------------------------------

/// Square crop around the face with area(face)/area(crop) ≥ `ratio`.
///
/// The side is `floor(sqrt(area(face)/ratio))`, clamped to the image's
/// shorter side; the window centers on the face-box center, shifting inward
/// at borders so it stays square and inside the image. Returns the crop and
/// the face box translated (and clipped) into crop coordinates. A face box
/// larger than the image passes the image through unchanged with a warning.
pub fn crop_square(image: &PixelGrid, face_box: &FaceBox, ratio: f64) -> Result<(PixelGrid, FaceBox)> {
    let (h, w, _) = image.dim();
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config(format!("face_area_ratio must lie in (0, 1], got {ratio}")));
    }
    if face_box.w > w || face_box.h > h {
        log::warn!(
            "face box {}x{} exceeds image {w}x{h}; passing the image through uncropped",
            face_box.w,
            face_box.h
        );
        return Ok((image.clone(), face_box.clone()));
    }
    let max_allowed = (face_box.area() as f64 / ratio).sqrt().floor() as usize;
    let side = max_allowed.min(h.min(w)).max(1);
    let cx = face_box.x + face_box.w / 2;
    let cy = face_box.y + face_box.h / 2;
    let x0 = cx.saturating_sub(side / 2).min(w - side);
    let y0 = cy.saturating_sub(side / 2).min(h - side);
    let cropped = crop(image, x0, y0, side, side)?;
    let adjusted = face_box
        .intersect(x0, y0, side, side)
        .map(|b| FaceBox { x: b.x - x0, y: b.y - y0, ..b })
        .ok_or_else(|| Error::invalid("crop window lost the face box entirely"))?;
    Ok((cropped, adjusted))
}

// ---------------------------------------------------------------------------
// Stage: person-mask selection
// ---------------------------------------------------------------------------

/// Index of the person-class mask with the largest pixel overlap with the
/// face box (ties break to the first). `None` when no person mask exists or
/// the best overlap is zero pixels.
pub fn select_person_mask(masks: &[SegmentMask], face_box: &FaceBox) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (i, m) in masks.iter().enumerate() {
        if m.class_label != "person" {
            continue;
        }
        let overlap = face_box.overlap_with_mask(&m.bitmap);
        if best.map_or(true, |(_, b)| overlap > b) {
            best = Some((i, overlap));
        }
    }
    match best {
        Some((i, overlap)) if overlap > 0 => Some(i),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Stage: captioning
// ---------------------------------------------------------------------------

/// Greedy caption first, then random-mode retries until a class word
/// appears; the surviving caption has its class words singularized. `None`
/// after `retry_limit` failed retries.
pub fn caption_with_class_word(
    image: &PixelGrid,
    tag: &str,
    adapters: &AdapterSet,
    retry_limit: u32,
) -> Result<Option<String>> {
    let greedy = adapters.captioner.caption(image, tag, CaptionMode::Greedy)?;
    if !vocab::find_occurrences(&greedy).is_empty() {
        return Ok(Some(vocab::singularize(&greedy)));
    }
    for attempt in 0..retry_limit {
        let candidate = adapters.captioner.caption(image, tag, CaptionMode::Random { attempt })?;
        if !vocab::find_occurrences(&candidate).is_empty() {
            return Ok(Some(vocab::singularize(&candidate)));
        }
    }
    Ok(None)
}

/// The group's majority class word: the singular form with the most
/// occurrences across the captions. Ties break to the lexicographically
/// smallest word so the result never depends on iteration order.
pub fn group_class_word(captions: &[String]) -> Option<String> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for caption in captions {
        for occ in vocab::find_occurrences(caption) {
            *counts.entry(occ.singular).or_insert(0) += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(word, _)| word)
}

// ---------------------------------------------------------------------------
// Stage: class-word marking
// ---------------------------------------------------------------------------

/// Chooses which class-word occurrence anchors the identity.
///
/// Exactly one occurrence → that one. Several → the earliest occurrence of
/// the group's majority word when present; otherwise the caption is split
/// into per-occurrence segments and each is scored by
/// clip(segment, face region) × label-similarity(segment word, group word),
/// earliest argmax winning. `None` when the parser cannot segment.
pub fn mark_class_word(
    caption: &str,
    group_word: &str,
    face_region: &PixelGrid,
    adapters: &AdapterSet,
) -> Result<Option<Occurrence>> {
    let occurrences = vocab::find_occurrences(caption);
    match occurrences.len() {
        0 => Ok(None),
        1 => Ok(Some(occurrences.into_iter().next().unwrap())),
        _ => {
            if let Some(direct) = occurrences.iter().find(|o| o.singular == group_word) {
                return Ok(Some(direct.clone()));
            }
            let segments = match adapters.parser.segment_by_class_words(caption) {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("caption segmentation failed for {caption:?}: {e}");
                    return Ok(None);
                }
            };
            let mut best: Option<(f64, Occurrence)> = None;
            for seg in segments {
                let clip = adapters.clip_similarity(&seg.text, face_region)?;
                let label = adapters.label_similarity.similarity(&seg.occurrence.singular, group_word)?;
                let score = clip * label;
                if best.as_ref().map_or(true, |(b, _)| score > *b) {
                    best = Some((score, seg.occurrence));
                }
            }
            Ok(best.map(|(_, occ)| occ))
        }
    }
}

// ---------------------------------------------------------------------------
// Full pipeline
// ---------------------------------------------------------------------------

struct Survivor {
    id_tag: String,
    stem: String,
    pixels: PixelGrid,
    boxes: Vec<FaceBox>,
}

fn scan_input(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut files = Vec::new();
    for dir in dirs {
        let id_tag = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::invalid(format!("non-unicode folder name under {}", root.display())))?
            .to_string();
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                    .unwrap_or(false)
            })
            .collect();
        entries.sort();
        files.extend(entries.into_iter().map(|p| (id_tag.clone(), p)));
    }
    if files.is_empty() {
        return Err(Error::invalid(format!(
            "no images found under {} (expected <root>/<id_tag>/*.png|jpg)",
            root.display()
        )));
    }
    Ok(files)
}

/// Runs every stage over `input_root` and writes the dataset to `out_root`:
/// `images/<id>/<stem>.png` (cropped), `masks/<id>/<stem>.png` (1-bit),
/// `manifest.jsonl` (sorted by id then path), and `attrition.json`. The
/// output is a pure function of the inputs and the adapter seeds, so
/// identical runs produce byte-identical manifests.
pub fn build_dataset(
    input_root: &Path,
    out_root: &Path,
    config: &PipelineConfig,
    adapters: &AdapterSet,
) -> Result<DatasetSummary> {
    config.validate()?;
    let files = scan_input(input_root)?;
    let mut attrition = Attrition { input_images: files.len(), ..Attrition::default() };

    // Per-image stages: decode, image size, detection size.
    let mut groups: BTreeMap<String, Vec<Survivor>> = BTreeMap::new();
    for (id_tag, path) in files {
        let pixels = match load_image(&path) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("skipping undecodable {}: {e}", path.display());
                attrition.decode_failure += 1;
                continue;
            }
        };
        if grid_height(&pixels).min(grid_width(&pixels)) < config.min_image_side {
            attrition.image_size += 1;
            continue;
        }
        let boxes = match adapters.face_detector.detect(&pixels) {
            Ok(b) => filter_face_boxes(&b, config.min_face_side),
            Err(e) => {
                log::warn!("face detection failed on {}: {e}", path.display());
                attrition.face_size += 1;
                continue;
            }
        };
        if boxes.is_empty() {
            attrition.face_size += 1;
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        groups.entry(id_tag.clone()).or_default().push(Survivor { id_tag, stem, pixels, boxes });
    }

    // Group stages and per-image tail stages.
    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut outputs: Vec<(ManifestEntry, PixelGrid, BoolGrid)> = Vec::new();
    for (_, group) in groups.iter() {
        // Embed every candidate box; an image whose embedding fails is
        // rejected here rather than aborting the group.
        let mut embeddable = Vec::new();
        for survivor in group {
            let per_box: Result<Vec<FaceEmbedding>> = survivor
                .boxes
                .iter()
                .map(|b| {
                    let face = crop(&survivor.pixels, b.x, b.y, b.w, b.h)?;
                    adapters.face_embedder.embed_crop(&face)
                })
                .collect();
            match per_box {
                Ok(embs) => embeddable.push((survivor, embs)),
                Err(e) => {
                    log::warn!("embedding failed for {}/{}: {e}", survivor.id_tag, survivor.stem);
                    attrition.verification += 1;
                }
            }
        }
        if embeddable.is_empty() {
            continue;
        }
        let choices =
            verify_identity_group(&embeddable.iter().map(|(_, e)| e.clone()).collect::<Vec<_>>())?;

        // Crop, mask, caption for the verified images.
        let mut staged: Vec<(&Survivor, PixelGrid, FaceBox, BoolGrid, String)> = Vec::new();
        for ((survivor, _), choice) in embeddable.iter().zip(&choices) {
            if !choice.kept {
                log::info!(
                    "identity outlier rejected: {}/{} (score {:.3})",
                    survivor.id_tag,
                    survivor.stem,
                    choice.score
                );
                attrition.verification += 1;
                continue;
            }
            let (cropped, adjusted) =
                crop_square(&survivor.pixels, &survivor.boxes[choice.box_index], config.face_area_ratio)?;
            let masks = match adapters.segmenter.segment(&cropped) {
                Ok(m) => m,
                Err(e) => {
                    log::warn!("segmentation failed for {}/{}: {e}", survivor.id_tag, survivor.stem);
                    attrition.mask += 1;
                    continue;
                }
            };
            let Some(mask_index) = select_person_mask(&masks, &adjusted) else {
                attrition.mask += 1;
                continue;
            };
            let tag = format!("{}:{}", survivor.id_tag, survivor.stem);
            let caption = match caption_with_class_word(&cropped, &tag, adapters, config.caption_retry_limit)? {
                Some(c) => c,
                None => {
                    attrition.caption += 1;
                    continue;
                }
            };
            staged.push((survivor, cropped, adjusted, masks[mask_index].bitmap.clone(), caption));
        }

        // Group statistics feed the marking stage.
        let captions: Vec<String> = staged.iter().map(|(_, _, _, _, c)| c.clone()).collect();
        let Some(group_word) = group_class_word(&captions) else {
            continue;
        };
        for (survivor, cropped, adjusted, mask, caption) in staged {
            let face_region = crop(&cropped, adjusted.x, adjusted.y, adjusted.w, adjusted.h)?;
            let Some(occ) = mark_class_word(&caption, &group_word, &face_region, adapters)? else {
                attrition.marking += 1;
                continue;
            };
            let entry = ManifestEntry {
                id_tag: survivor.id_tag.clone(),
                image_path: format!("images/{}/{}.png", survivor.id_tag, survivor.stem),
                mask_path: format!("masks/{}/{}.png", survivor.id_tag, survivor.stem),
                face_box: adjusted.clone(),
                caption: caption.clone(),
                class_word: occ.singular.clone(),
                class_span: (occ.start, occ.end),
            };
            entries.push(entry.clone());
            outputs.push((entry, cropped, mask));
        }
    }

    attrition.surviving = entries.len();

    // Write images, masks, manifest, attrition.
    for (entry, image, mask) in &outputs {
        let image_path = out_root.join(&entry.image_path);
        let mask_path = out_root.join(&entry.mask_path);
        fs::create_dir_all(image_path.parent().expect("images/<id> has a parent"))?;
        fs::create_dir_all(mask_path.parent().expect("masks/<id> has a parent"))?;
        save_image(&image_path, image)?;
        save_mask(&mask_path, mask)?;
    }
    entries.sort_by(|a, b| (&a.id_tag, &a.image_path).cmp(&(&b.id_tag, &b.image_path)));
    fs::create_dir_all(out_root)?;
    let manifest_path = out_root.join("manifest.jsonl");
    let mut manifest = fs::File::create(&manifest_path)?;
    for entry in &entries {
        writeln!(manifest, "{}", serde_json::to_string(entry)?)?;
    }
    let attrition_path = out_root.join("attrition.json");
    fs::write(&attrition_path, serde_json::to_string_pretty(&attrition)?)?;

    Ok(DatasetSummary { entries: entries.len(), attrition, manifest_path })
}

/// Reads a manifest written by [`build_dataset`].
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
            Error::invalid(format!("manifest line {} unparsable: {e}", i + 1))
        })?;
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(Error::invalid(format!("manifest {} holds no entries", path.display())));
    }
    Ok(entries)
}
