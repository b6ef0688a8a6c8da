//! Metric suite and benchmark driver.
//!
//! Scores generated images for prompt fidelity (CLIP-T), identity fidelity
//! (CLIP-I, DINO-style feature cosine, face-embedding similarity), variety
//! (face diversity), and distribution distance (Fréchet distance over a
//! feature extractor), then drives the full id × prompt benchmark grid over
//! a trained checkpoint. All perception runs through [`AdapterSet`], so the
//! whole suite works hermetically with mocks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::diffusion::checkpoint::Checkpoint;
use crate::diffusion::generate::{generate, GenerateOptions};
use crate::diffusion::schedule::NoiseSchedule;
use crate::encoders::IdImage;
use crate::error::{Error, Result};
use crate::grid::{crop, downsample, load_image, PixelGrid};
use crate::rng::{derive_seed_str, fnv1a};

/// Placeholder substituted with each identity group's class word when a
/// benchmark prompt is instantiated.
pub const CLASS_WORD_PLACEHOLDER: &str = "<class word>";

/// Side of the square that face crops are resampled to before pairwise
/// perceptual distances; pairwise comparison needs a common size.
const DIVERSITY_CROP_SIDE: usize = 160;

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

/// Crop of the largest detected face, or `None` when the detector finds
/// nothing. Ties on area keep the first (lowest-index) box.
fn largest_face_crop(image: &PixelGrid, adapters: &AdapterSet) -> Result<Option<PixelGrid>> {
    let boxes = adapters.face_detector.detect(image)?;
    let mut best: Option<&crate::grid::FaceBox> = None;
    for b in &boxes {
        if best.map_or(true, |cur| b.area() > cur.area()) {
            best = Some(b);
        }
    }
    match best {
        Some(b) => Ok(Some(crop(image, b.x, b.y, b.w, b.h)?)),
        None => Ok(None),
    }
}

/// Cosine similarity between feature vectors. Bitwise-identical inputs
/// short-circuit to exactly 1 so that "generated equals reference" scores
/// without float noise; zero-norm inputs score 0.
fn feature_cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    if a == b {
        return if a.iter().all(|v| *v == 0.0) { 0.0 } else { 1.0 };
    }
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0)
}

// ---------------------------------------------------------------------------
// Prompt fidelity
// ---------------------------------------------------------------------------

/// Cosine between the pooled prompt feature and the generated image feature.
pub fn clip_t(generated: &PixelGrid, prompt: &str, adapters: &AdapterSet) -> Result<f64> {
    adapters.clip_similarity(prompt, generated)
}

// ---------------------------------------------------------------------------
// Identity fidelity
// ---------------------------------------------------------------------------

fn mean_feature_cosine<F>(generated: &PixelGrid, references: &[PixelGrid], extract: F) -> Result<f64>
where
    F: Fn(&PixelGrid) -> Result<Array1<f64>>,
{
    if references.is_empty() {
        return Err(Error::config("identity-fidelity metrics need at least one reference image"));
    }
    let g = extract(generated)?;
    let mut acc = 0.0;
    for r in references {
        acc += feature_cosine(&g, &extract(r)?);
    }
    Ok(acc / references.len() as f64)
}

/// Mean cosine between the generated image and each reference under the
/// prompt-aligned image encoder.
pub fn clip_i(generated: &PixelGrid, references: &[PixelGrid], adapters: &AdapterSet) -> Result<f64> {
    mean_feature_cosine(generated, references, |img| adapters.image_encoder.encode(img, None))
}

/// Mean cosine between the generated image and each reference under the
/// self-supervised feature extractor.
pub fn dino_sim(generated: &PixelGrid, references: &[PixelGrid], adapters: &AdapterSet) -> Result<f64> {
    mean_feature_cosine(generated, references, |img| adapters.dino_features.features(img))
}

/// Face-embedding similarity of one generated image against reference faces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceSimScore {
    /// Mean cosine between the generated face embedding and each reference
    /// face embedding; 0 when the generated image carries no face.
    pub score: f64,
    /// True when no face was detected in the generated image.
    pub generated_faceless: bool,
}

/// Detects and crops the largest face per image, embeds the crops, and
/// averages the cosine between the generated face and every reference face.
/// References without a detectable face are skipped; if none remain the
/// configuration is rejected. A faceless generated image scores 0, flagged.
pub fn face_similarity(
    generated: &PixelGrid,
    references: &[PixelGrid],
    adapters: &AdapterSet,
) -> Result<FaceSimScore> {
    if references.is_empty() {
        return Err(Error::config("face similarity needs at least one reference image"));
    }
    let mut ref_embeddings = Vec::new();
    for r in references {
        if let Some(face) = largest_face_crop(r, adapters)? {
            ref_embeddings.push(adapters.face_embedder.embed_crop(&face)?);
        }
    }
    if ref_embeddings.is_empty() {
        return Err(Error::config("no reference image contains a detectable face"));
    }
    let Some(face) = largest_face_crop(generated, adapters)? else {
        return Ok(FaceSimScore { score: 0.0, generated_faceless: true });
    };
    let g = adapters.face_embedder.embed_crop(&face)?;
    let mut acc = 0.0;
    for r in &ref_embeddings {
        acc += g.cosine(r)?;
    }
    Ok(FaceSimScore { score: acc / ref_embeddings.len() as f64, generated_faceless: false })
}

// ---------------------------------------------------------------------------
// Face diversity
// ---------------------------------------------------------------------------

/// Mean pairwise perceptual distance between the face regions of a generated
/// set. Faces are cropped and resampled to a common square before comparison.
/// Returns `None` (missing, not zero) when fewer than two images carry a
/// detectable face.
pub fn face_diversity(generated: &[PixelGrid], adapters: &AdapterSet) -> Result<Option<f64>> {
    let mut crops = Vec::new();
    for img in generated {
        if let Some(face) = largest_face_crop(img, adapters)? {
            crops.push(downsample(&face, DIVERSITY_CROP_SIDE, DIVERSITY_CROP_SIDE)?);
        }
    }
    if crops.len() < 2 {
        return Ok(None);
    }
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..crops.len() {
        for j in i + 1..crops.len() {
            acc += adapters.perceptual.distance(&crops[i], &crops[j])?;
            pairs += 1;
        }
    }
    Ok(Some(acc / pairs as f64))
}

// ---------------------------------------------------------------------------
// Fréchet distance
// ---------------------------------------------------------------------------

/// Mean and unbiased covariance of row-stacked features.
fn gaussian_fit(features: &Array2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = features.dim();
    let mu = features.mean_axis(ndarray::Axis(0)).expect("nonempty feature set");
    let mut cov = DMatrix::zeros(d, d);
    for row in features.rows() {
        let centered = DVector::from_iterator(d, row.iter().zip(mu.iter()).map(|(x, m)| x - m));
        cov += &centered * centered.transpose();
    }
    if n > 1 {
        cov /= (n - 1) as f64;
    }
    (DVector::from_iterator(d, mu.iter().copied()), cov)
}

/// Symmetric PSD square root via eigendecomposition. Eigenvalues below the
/// negative tolerance reject the matrix; tiny negatives clamp to zero.
fn sym_sqrt(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -1e-9 * scale {
            return Err(Error::invalid(format!("{context}: negative eigenvalue {v:.3e}")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// `sym_sqrt` with one fallback: matrices that fail the PSD check get an
/// `eps`-scaled identity added and one retry before the failure is final.
fn sym_sqrt_stabilized(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    const EPS: f64 = 1e-6;
    match sym_sqrt(m, context) {
        Ok(s) => Ok(s),
        Err(_) => {
            let stabilized = m + DMatrix::identity(m.nrows(), m.ncols()) * EPS;
            sym_sqrt(&stabilized, context)
                .map_err(|e| Error::invalid(format!("{e} (after eps stabilization)")))
        }
    }
}

fn feature_matrix(images: &[PixelGrid], adapters: &AdapterSet) -> Result<Array2<f64>> {
    let dim = adapters.fid_features.dim();
    let mut out = Array2::zeros((images.len(), dim));
    for (i, img) in images.iter().enumerate() {
        let f = adapters.fid_features.features(img)?;
        if f.len() != dim {
            return Err(Error::dim("fid feature length", dim, f.len()));
        }
        out.row_mut(i).assign(&f);
    }
    Ok(out)
}

/// Fréchet distance between Gaussians fitted to the two sets' features:
/// ‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^½). The cross term runs through the
/// symmetric form √Σ₁ Σ₂ √Σ₁ so the square root stays real.
pub fn fid_score(
    generated: &[PixelGrid],
    reference: &[PixelGrid],
    adapters: &AdapterSet,
) -> Result<f64> {
    if generated.len() < 2 || reference.len() < 2 {
        return Err(Error::config(format!(
            "fid needs at least two images per set, got {} and {}",
            generated.len(),
            reference.len()
        )));
    }
    let (mu1, c1) = gaussian_fit(&feature_matrix(generated, adapters)?);
    let (mu2, c2) = gaussian_fit(&feature_matrix(reference, adapters)?);

    let s1 = sym_sqrt_stabilized(&c1, "generated-set covariance")?;
    let prod = &s1 * &c2 * &s1;
    // Symmetrize before the eigen pass; float error skews the product.
    let prod = (&prod + prod.transpose()) * 0.5;
    let eig = prod.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut tr_cross = 0.0;
    for v in eig.eigenvalues.iter() {
        if *v < -1e-9 * scale {
            return Err(Error::invalid(format!(
                "cross-covariance term not PSD: eigenvalue {v:.3e}"
            )));
        }
        tr_cross += v.max(0.0).sqrt();
    }
    let mean_diff = (&mu1 - &mu2).norm_squared();
    let d2 = mean_diff + c1.trace() + c2.trace() - 2.0 * tr_cross;
    // Identical sets cancel to zero only up to float error.
    Ok(d2.max(0.0))
}

// ---------------------------------------------------------------------------
// Benchmark configuration
// ---------------------------------------------------------------------------

/// One identity's evaluation inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalGroup {
    /// Reference image paths, resolved against the benchmark root.
    pub references: Vec<PathBuf>,
    /// Word substituted for the prompt placeholder, e.g. "man".
    pub class_word: String,
}

/// Benchmark shape: which identities, which prompts, how many samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub id_groups: BTreeMap<String, EvalGroup>,
    /// Prompt templates, each containing [`CLASS_WORD_PLACEHOLDER`] once.
    pub prompts: Vec<String>,
    pub images_per_prompt: usize,
    pub references_per_id: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            id_groups: BTreeMap::new(),
            prompts: default_prompts(),
            images_per_prompt: 4,
            references_per_id: 4,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.id_groups.is_empty() {
            return Err(Error::config("benchmark needs at least one identity group"));
        }
        for (tag, group) in &self.id_groups {
            if group.references.len() != self.references_per_id {
                return Err(Error::config(format!(
                    "identity {tag} has {} references, expected {}",
                    group.references.len(),
                    self.references_per_id
                )));
            }
            if group.class_word.trim().is_empty() {
                return Err(Error::config(format!("identity {tag} has an empty class word")));
            }
        }
        if self.prompts.is_empty() {
            return Err(Error::config("benchmark needs at least one prompt"));
        }
        for p in &self.prompts {
            if p.matches(CLASS_WORD_PLACEHOLDER).count() != 1 {
                return Err(Error::config(format!(
                    "prompt {p:?} must contain {CLASS_WORD_PLACEHOLDER} exactly once"
                )));
            }
        }
        if self.images_per_prompt == 0 {
            return Err(Error::config("images_per_prompt must be at least 1"));
        }
        if self.references_per_id == 0 {
            return Err(Error::config("references_per_id must be at least 1"));
        }
        Ok(())
    }
}

/// The default benchmark prompt set: expressions, attributes, decorations,
/// actions, and backgrounds, with the class-word slot left open.
pub fn default_prompts() -> Vec<String> {
    const PROMPTS: [&str; 40] = [
        "a photo of a <class word>",
        "a <class word> wearing a Superman outfit",
        "a <class word> wearing a spacesuit",
        "a <class word> wearing a red sweater",
        "a <class word> wearing a purple wizard outfit",
        "a <class word> wearing a blue hoodie",
        "a <class word> wearing headphones",
        "a <class word> with red hair",
        "a <class word> wearing headphones with red hair",
        "a <class word> wearing a Christmas hat",
        "a <class word> wearing sunglasses",
        "a <class word> wearing sunglasses and necklace",
        "a <class word> wearing a blue cap",
        "a <class word> wearing a doctoral cap",
        "a <class word> with white hair, wearing glasses",
        "a <class word> in a helmet and vest riding a motorcycle",
        "a <class word> holding a bottle of red wine",
        "a <class word> driving a bus in the desert",
        "a <class word> playing basketball",
        "a <class word> playing the violin",
        "a <class word> piloting a spaceship",
        "a <class word> riding a horse",
        "a <class word> coding in front of a computer",
        "a <class word> playing the guitar",
        "a <class word> laughing on the lawn",
        "a <class word> frowning at the camera",
        "a <class word> happily smiling, looking at the camera",
        "a <class word> crying disappointedly, with tears flowing",
        "a <class word> playing the guitar in the view of left side",
        "a <class word> holding a bottle of red wine, upper body",
        "a <class word> wearing sunglasses and necklace, close-up, in the view of right side",
        "a <class word> riding a horse, in the view of the top",
        "a <class word> wearing a doctoral cap, upper body, with the left side of the face facing the camera",
        "a <class word> crying disappointedly, with tears flowing, with left side of the face facing the camera",
        "a <class word> sitting in front of the camera, with a beautiful purple sunset at the beach in the background",
        "a <class word> swimming in the pool",
        "a <class word> climbing a mountain",
        "a <class word> skiing on the snowy mountain",
        "a <class word> in the snow",
        "a <class word> in space wearing a spacesuit",
    ];
    PROMPTS.iter().map(|s| s.to_string()).collect()
}

// ---------------------------------------------------------------------------
// Benchmark driver
// ---------------------------------------------------------------------------

/// Scores for one (identity, prompt) cell, averaged over its generations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScores {
    pub id_tag: String,
    pub prompt_index: usize,
    /// Prompt with the class word filled in.
    pub prompt: String,
    pub clip_t: f64,
    pub clip_i: f64,
    pub dino: f64,
    pub face_sim: f64,
    /// How many of the cell's generations carried no detectable face.
    pub faceless: usize,
    /// Mean pairwise face distance across the cell's generations; absent
    /// when fewer than two faces were detected.
    pub face_div: Option<f64>,
}

/// Grand means over cells, one value per metric column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub clip_t: f64,
    pub clip_i: f64,
    pub dino: f64,
    pub face_sim: f64,
    pub face_div: Option<f64>,
}

/// Full benchmark output: per-cell scores, grand means, the pooled
/// distribution distance, and provenance hashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cells: Vec<CellScores>,
    pub means: MetricMeans,
    /// Fréchet distance between all generated images and all references,
    /// computed once per run over the pooled sets.
    pub fid: f64,
    /// Total images generated (successful generations only).
    pub generations: usize,
    /// Per-generation failures, as "id/prompt_index/sample: cause".
    pub failures: Vec<String>,
    pub config_hash: String,
    pub checkpoint_hash: String,
    /// Mean wall-clock seconds per generated image; recorded only when the
    /// caller asks, since timing breaks byte-for-byte reproducibility.
    pub seconds_per_image: Option<f64>,
}

impl MetricReport {
    /// Every recorded score must be finite.
    pub fn validate(&self) -> Result<()> {
        let mut values = vec![
            self.means.clip_t,
            self.means.clip_i,
            self.means.dino,
            self.means.face_sim,
            self.fid,
        ];
        values.extend(self.means.face_div);
        for c in &self.cells {
            values.extend([c.clip_t, c.clip_i, c.dino, c.face_sim]);
            values.extend(c.face_div);
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("metric report contains non-finite score {bad}")));
        }
        Ok(())
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Runs the id × prompt benchmark grid: generates `images_per_prompt`
/// samples per cell from the checkpoint, scores every metric against the
/// cell's references, and pools all images for one Fréchet distance.
/// Individual generation failures are recorded and skipped; the run aborts
/// only when nothing generates. Reference paths resolve against `root`.
pub fn run_benchmark(
    checkpoint: &Checkpoint,
    config: &EvalConfig,
    options: &GenerateOptions,
    adapters: &AdapterSet,
    root: &Path,
    record_speed: bool,
) -> Result<MetricReport> {
    config.validate()?;
    let params = checkpoint.param_store()?;
    let dims = checkpoint.dims.clone();
    let schedule = NoiseSchedule::scaled_linear(checkpoint.schedule.clone())?;

    // Reference pixels load once per identity.
    let mut ref_images: BTreeMap<&str, Vec<PixelGrid>> = BTreeMap::new();
    for (tag, group) in &config.id_groups {
        let mut images = Vec::with_capacity(group.references.len());
        for p in &group.references {
            let path = if p.is_absolute() { p.clone() } else { root.join(p) };
            images.push(load_image(&path).map_err(|e| {
                Error::invalid(format!("reference {} failed to load: {e}", path.display()))
            })?);
        }
        ref_images.insert(tag, images);
    }

    let mut cells = Vec::new();
    let mut failures = Vec::new();
    let mut pooled_generated: Vec<PixelGrid> = Vec::new();
    let mut elapsed = 0.0f64;

    for (tag, group) in &config.id_groups {
        let refs = &ref_images[tag.as_str()];
        let id_refs: Vec<(String, IdImage)> =
            refs.iter().map(|img| (tag.clone(), IdImage::unmasked(img.clone()))).collect();

        for (pi, template) in config.prompts.iter().enumerate() {
            let prompt = template.replace(CLASS_WORD_PLACEHOLDER, &group.class_word);
            let mut images = Vec::new();
            for k in 0..config.images_per_prompt {
                let seed = derive_seed_str(config.seed, "benchmark-gen", &format!("{tag}/{pi}/{k}"));
                let start = Instant::now();
                match generate(
                    &prompt, &id_refs, &params, &dims, &schedule, options, adapters, seed,
                ) {
                    Ok((img, _)) => {
                        elapsed += start.elapsed().as_secs_f64();
                        images.push(img);
                    }
                    Err(e) => failures.push(format!("{tag}/{pi}/{k}: {e}")),
                }
            }
            if images.is_empty() {
                continue;
            }

            let mut cell_clip_t = Vec::new();
            let mut cell_clip_i = Vec::new();
            let mut cell_dino = Vec::new();
            let mut cell_face = Vec::new();
            let mut faceless = 0usize;
            for img in &images {
                cell_clip_t.push(clip_t(img, &prompt, adapters)?);
                cell_clip_i.push(clip_i(img, refs, adapters)?);
                cell_dino.push(dino_sim(img, refs, adapters)?);
                let fs = face_similarity(img, refs, adapters)?;
                cell_face.push(fs.score);
                faceless += fs.generated_faceless as usize;
            }
            let face_div = face_diversity(&images, adapters)?;
            cells.push(CellScores {
                id_tag: tag.clone(),
                prompt_index: pi,
                prompt,
                clip_t: mean(&cell_clip_t),
                clip_i: mean(&cell_clip_i),
                dino: mean(&cell_dino),
                face_sim: mean(&cell_face),
                faceless,
                face_div,
            });
            pooled_generated.extend(images);
        }
    }

    if cells.is_empty() {
        return Err(Error::invalid(format!(
            "benchmark produced no images; first failure: {}",
            failures.first().map(String::as_str).unwrap_or("none recorded")
        )));
    }

    let pooled_refs: Vec<PixelGrid> =
        ref_images.values().flat_map(|v| v.iter().cloned()).collect();
    let fid = fid_score(&pooled_generated, &pooled_refs, adapters)?;

    let divs: Vec<f64> = cells.iter().filter_map(|c| c.face_div).collect();
    let means = MetricMeans {
        clip_t: mean(&cells.iter().map(|c| c.clip_t).collect::<Vec<_>>()),
        clip_i: mean(&cells.iter().map(|c| c.clip_i).collect::<Vec<_>>()),
        dino: mean(&cells.iter().map(|c| c.dino).collect::<Vec<_>>()),
        face_sim: mean(&cells.iter().map(|c| c.face_sim).collect::<Vec<_>>()),
        face_div: if divs.is_empty() { None } else { Some(mean(&divs)) },
    };

    let generations = pooled_generated.len();
    let report = MetricReport {
        cells,
        means,
        fid,
        generations,
        failures,
        config_hash: format!("{:016x}", fnv1a(&serde_json::to_vec(config)?)),
        checkpoint_hash: format!("{:016x}", fnv1a(&serde_json::to_vec(checkpoint)?)),
        seconds_per_image: record_speed.then(|| elapsed / generations as f64),
    };
    report.validate()?;
    Ok(report)
}

/// Writes the full report as JSON plus a one-row CSV summary whose columns
/// follow the customary reporting order. Returns (json_path, csv_path).
pub fn write_report(report: &MetricReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let json_path = dir.join("report.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(report)?)?;

    let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let csv = format!(
        "clip_t,clip_i,dino,face_sim,face_div,fid,seconds_per_image\n{},{},{},{},{},{},{}\n",
        report.means.clip_t,
        report.means.clip_i,
        report.means.dino,
        report.means.face_sim,
        fmt_opt(report.means.face_div),
        report.fid,
        fmt_opt(report.seconds_per_image),
    );
    let csv_path = dir.join("report.csv");
    std::fs::write(&csv_path, csv)?;
    Ok((json_path, csv_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterBuildContext, FaceDetector, FeatureExtractor};
    use crate::diffusion::sampler::SamplerConfig;
    use crate::diffusion::schedule::ScheduleConfig;
    use crate::grid::{filled, FaceBox};
    use crate::model::{ModelDims, ParamStore};
    use crate::synthetic::{build_corpus, corpus_ids, write_corpus, SyntheticConfig};
    use ndarray::array;
    use std::sync::Arc;

    fn adapters() -> AdapterSet {
        AdapterSet::mocks(5, &AdapterBuildContext::default())
    }

    /// First corpus image of the given identity index.
    fn corpus_image(id: usize, variant: usize) -> PixelGrid {
        let cfg = SyntheticConfig::default();
        let ids = corpus_ids(8);
        let corpus = build_corpus(&cfg, &ids, variant + 1).unwrap();
        corpus
            .iter()
            .find(|img| img.id_tag == ids[id] && img.name == format!("v{variant:02}.png"))
            .unwrap()
            .pixels
            .clone()
    }

    #[test]
    fn default_prompt_set_is_forty_unique_templates() {
        let prompts = default_prompts();
        assert_eq!(prompts.len(), 40);
        let unique: std::collections::BTreeSet<&str> =
            prompts.iter().map(String::as_str).collect();
        assert_eq!(unique.len(), 40, "templates must not repeat");
        for p in &prompts {
            assert_eq!(
                p.matches(CLASS_WORD_PLACEHOLDER).count(),
                1,
                "every template carries exactly one class-word slot: {p}"
            );
        }
    }

    #[test]
    fn identical_images_score_exactly_one_on_feature_cosines() {
        let a = adapters();
        let img = corpus_image(0, 0);
        assert_eq!(clip_i(&img, &[img.clone()], &a).unwrap(), 1.0);
        assert_eq!(dino_sim(&img, &[img.clone()], &a).unwrap(), 1.0);
    }

    /// Feature stub keyed on the first pixel's red channel; lets tests pin
    /// exact cosines.
    struct KeyedFeatures;

    impl FeatureExtractor for KeyedFeatures {
        fn dim(&self) -> usize {
            2
        }
        fn features(&self, image: &PixelGrid) -> crate::error::Result<Array1<f64>> {
            let key = image[[0, 0, 0]];
            // Unit vectors at preset angles to (1, 0).
            let cos = if key < 0.1 {
                1.0
            } else if key < 0.3 {
                0.2
            } else if key < 0.6 {
                0.4
            } else if key < 0.8 {
                0.6
            } else {
                0.0
            };
            Ok(array![cos, (1.0f64 - cos * cos).sqrt()])
        }
    }

    #[test]
    fn mean_cosine_over_references_is_arithmetic() {
        let mut a = adapters();
        a.dino_features = Arc::new(KeyedFeatures);
        let gen = filled(4, 4, [0.0, 0.0, 0.0]);
        let refs =
            [filled(4, 4, [0.2, 0.0, 0.0]), filled(4, 4, [0.4, 0.0, 0.0]), filled(4, 4, [0.7, 0.0, 0.0])];
        let got = dino_sim(&gen, &refs, &a).unwrap();
        assert!((got - 0.4).abs() < 1e-12, "mean of cosines 0.2, 0.4, 0.6: got {got}");

        let orthogonal = [filled(4, 4, [0.9, 0.0, 0.0])];
        assert_eq!(dino_sim(&gen, &orthogonal, &a).unwrap(), 0.0);
    }

    #[test]
    fn face_similarity_of_identical_faces_is_one() {
        let a = adapters();
        let img = corpus_image(2, 0);
        let s = face_similarity(&img, &[img.clone()], &a).unwrap();
        assert!(!s.generated_faceless);
        assert!((s.score - 1.0).abs() < 1e-6, "same face both sides: got {}", s.score);
    }

    #[test]
    fn face_similarity_across_identities_stays_low() {
        let a = adapters();
        let gen = corpus_image(0, 0);
        let refs = [corpus_image(1, 0), corpus_image(3, 0)];
        let s = face_similarity(&gen, &refs, &a).unwrap();
        assert!(s.score < 0.3, "distinct identity patterns: got {}", s.score);
    }

    /// Detector stub that sees nothing in all-black images and defers to the
    /// standard mock otherwise.
    struct BlindToBlack;

    impl FaceDetector for BlindToBlack {
        fn detect(&self, image: &PixelGrid) -> crate::error::Result<Vec<FaceBox>> {
            if image.iter().all(|v| *v == 0.0) {
                return Ok(Vec::new());
            }
            crate::adapters::mock::MockFaceDetector.detect(image)
        }
    }

    #[test]
    fn faceless_generation_scores_zero_with_flag() {
        let mut a = adapters();
        a.face_detector = Arc::new(BlindToBlack);
        let black = filled(16, 16, [0.0, 0.0, 0.0]);
        let face = corpus_image(0, 0);

        let s = face_similarity(&black, &[face.clone()], &a).unwrap();
        assert_eq!(s.score, 0.0);
        assert!(s.generated_faceless);

        let err = face_similarity(&face, &[black], &a).unwrap_err();
        assert!(err.to_string().contains("no reference image"), "got: {err}");
    }

    #[test]
    fn face_diversity_of_identical_copies_is_zero() {
        let a = adapters();
        let img = corpus_image(1, 0);
        let d = face_diversity(&[img.clone(), img.clone(), img], &a).unwrap();
        assert_eq!(d, Some(0.0));
    }

    #[test]
    fn face_diversity_enumerates_unordered_pairs() {
        let a = adapters();
        let ia = corpus_image(0, 0);
        let ib = corpus_image(4, 0);

        let two = face_diversity(&[ia.clone(), ib.clone()], &a).unwrap().unwrap();
        assert!(two > 0.0, "different identity patterns must differ perceptually");

        // {A, A, B}: pairs (A,A)=0, (A,B), (A,B) -> mean 2x/3.
        let three = face_diversity(&[ia.clone(), ia.clone(), ib.clone()], &a).unwrap().unwrap();
        assert!(
            (three - 2.0 * two / 3.0).abs() < 1e-12,
            "expected (0 + x + x)/3 = {}, got {three}",
            2.0 * two / 3.0
        );
    }

    #[test]
    fn face_diversity_needs_two_detectable_faces() {
        let a = adapters();
        assert_eq!(face_diversity(&[], &a).unwrap(), None);
        assert_eq!(face_diversity(&[corpus_image(0, 0)], &a).unwrap(), None);
    }

    #[test]
    fn duplicating_a_central_image_does_not_raise_diversity() {
        // The general duplicate-never-increases claim is false for a mean
        // over pairs (duplicating an outlier raises it); the provable form
        // duplicates the image with the smallest summed distance.
        let a = adapters();
        let set = [corpus_image(0, 0), corpus_image(1, 0), corpus_image(2, 0)];
        let base = face_diversity(&set, &a).unwrap().unwrap();

        let mut best = 0;
        let mut best_sum = f64::INFINITY;
        for i in 0..set.len() {
            let sum: f64 = (0..set.len())
                .filter(|&j| j != i)
                .map(|j| face_diversity(&[set[i].clone(), set[j].clone()], &a).unwrap().unwrap())
                .sum();
            if sum < best_sum {
                best_sum = sum;
                best = i;
            }
        }
        let mut with_dup = set.to_vec();
        with_dup.push(set[best].clone());
        let extended = face_diversity(&with_dup, &a).unwrap().unwrap();
        assert!(extended <= base + 1e-12, "central duplicate raised {base} to {extended}");
    }

    #[test]
    fn fid_of_a_set_against_itself_vanishes() {
        let a = adapters();
        let set: Vec<PixelGrid> = (0..4).map(|i| corpus_image(i, 0)).collect();
        let d = fid_score(&set, &set, &a).unwrap();
        assert!(d <= 1e-5, "self-distance must vanish, got {d}");
    }

    #[test]
    fn fid_reduces_to_squared_mean_shift_under_equal_covariance() {
        let mut a = adapters();
        struct FirstPixel;
        impl FeatureExtractor for FirstPixel {
            fn dim(&self) -> usize {
                2
            }
            fn features(&self, image: &PixelGrid) -> crate::error::Result<Array1<f64>> {
                Ok(array![image[[0, 0, 0]], image[[0, 0, 1]]])
            }
        }
        a.fid_features = Arc::new(FirstPixel);
        let set_a = [filled(2, 2, [0.0, 0.0, 0.0]), filled(2, 2, [1.0, 1.0, 0.0])];
        // Same covariance, features shifted by (0.25, 0.25).
        let set_b = [filled(2, 2, [0.25, 0.25, 0.0]), filled(2, 2, [1.25, 1.25, 0.0])];
        let d = fid_score(&set_a, &set_b, &a).unwrap();
        assert!((d - 0.125).abs() < 1e-9, "expected 2 * 0.25^2 = 0.125, got {d}");
    }

    #[test]
    fn fid_recovers_unit_separation_of_shifted_gaussians() {
        let mut a = adapters();
        struct Scalar;
        impl FeatureExtractor for Scalar {
            fn dim(&self) -> usize {
                1
            }
            fn features(&self, image: &PixelGrid) -> crate::error::Result<Array1<f64>> {
                Ok(array![image[[0, 0, 0]]])
            }
        }
        a.fid_features = Arc::new(Scalar);
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut rng = crate::rng::rng_from(77);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng, shift: f64| -> Vec<PixelGrid> {
            (0..512)
                .map(|_| {
                    let v: f64 = rng.sample(StandardNormal);
                    filled(1, 1, [v + shift, 0.0, 0.0])
                })
                .collect()
        };
        let set_a = draw(&mut rng, 0.0);
        let set_b = draw(&mut rng, 1.0);
        let d = fid_score(&set_a, &set_b, &a).unwrap();
        assert!((d - 1.0).abs() < 0.2, "unit mean shift, equal variance: got {d}");
    }

    #[test]
    fn eval_config_rejects_malformed_shapes() {
        let ok_group = EvalGroup {
            references: (0..4).map(|i| PathBuf::from(format!("r{i}.png"))).collect(),
            class_word: "man".to_string(),
        };
        let mut cfg = EvalConfig {
            id_groups: BTreeMap::from([("id00".to_string(), ok_group.clone())]),
            prompts: vec!["a photo of a <class word>".to_string()],
            ..EvalConfig::default()
        };
        cfg.validate().unwrap();

        assert!(EvalConfig { id_groups: BTreeMap::new(), ..cfg.clone() }.validate().is_err());
        let short = EvalGroup { references: vec![PathBuf::from("r.png")], ..ok_group.clone() };
        assert!(EvalConfig {
            id_groups: BTreeMap::from([("id00".to_string(), short)]),
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(EvalConfig { prompts: vec!["no placeholder".into()], ..cfg.clone() }
            .validate()
            .is_err());
        assert!(EvalConfig { images_per_prompt: 0, ..cfg.clone() }.validate().is_err());
        cfg.id_groups.get_mut("id00").unwrap().class_word = "  ".to_string();
        assert!(cfg.validate().is_err());
    }

    fn benchmark_fixture(dir: &Path) -> (Checkpoint, EvalConfig) {
        let cfg = SyntheticConfig::default();
        let ids = corpus_ids(2);
        write_corpus(dir, &build_corpus(&cfg, &ids, 4).unwrap()).unwrap();

        let mut groups = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            groups.insert(
                id.clone(),
                EvalGroup {
                    references: (0..4).map(|v| PathBuf::from(format!("{id}/v{v:02}.png"))).collect(),
                    class_word: if i == 0 { "man" } else { "woman" }.to_string(),
                },
            );
        }
        let eval = EvalConfig {
            id_groups: groups,
            prompts: vec![
                "a photo of a <class word>".to_string(),
                "a <class word> wearing a red sweater".to_string(),
            ],
            images_per_prompt: 2,
            references_per_id: 4,
            seed: 9,
        };

        let dims = ModelDims::default();
        let schedule = ScheduleConfig { timesteps: 30, ..ScheduleConfig::default() };
        let params = ParamStore::init(&dims, 1).unwrap();
        let checkpoint = Checkpoint::new(0, dims, schedule, "fixture".to_string(), &params, None);
        (checkpoint, eval)
    }

    #[test]
    fn benchmark_covers_the_grid_and_repeats_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (checkpoint, eval) = benchmark_fixture(dir.path());
        let options = GenerateOptions {
            sampler: SamplerConfig { steps: 4, ..SamplerConfig::default() },
            ..GenerateOptions::default()
        };
        let a = adapters();

        let run = || run_benchmark(&checkpoint, &eval, &options, &a, dir.path(), false).unwrap();
        let report = run();
        assert_eq!(report.cells.len(), 4, "2 ids x 2 prompts");
        assert_eq!(report.generations, 8, "2 images per cell");
        assert!(report.failures.is_empty());
        assert_eq!(report.seconds_per_image, None, "timing stays off unless requested");
        assert!(report.cells.iter().all(|c| c.face_div.is_some()));
        report.validate().unwrap();
        let prompts: Vec<&str> = report.cells.iter().map(|c| c.prompt.as_str()).collect();
        assert!(prompts.contains(&"a photo of a man"));
        assert!(prompts.contains(&"a woman wearing a red sweater"));

        let again = run();
        assert_eq!(
            serde_json::to_string(&report).unwrap(),
            serde_json::to_string(&again).unwrap(),
            "same seed must reproduce the report byte for byte"
        );

        let timed = run_benchmark(&checkpoint, &eval, &options, &a, dir.path(), true).unwrap();
        assert!(timed.seconds_per_image.unwrap() > 0.0);
    }

    #[test]
    fn report_files_carry_the_summary_row() {
        let dir = tempfile::tempdir().unwrap();
        let (checkpoint, eval) = benchmark_fixture(dir.path());
        let options = GenerateOptions {
            sampler: SamplerConfig { steps: 3, ..SamplerConfig::default() },
            ..GenerateOptions::default()
        };
        let a = adapters();
        let report = run_benchmark(&checkpoint, &eval, &options, &a, dir.path(), false).unwrap();

        let out = dir.path().join("report");
        let (json_path, csv_path) = write_report(&report, &out).unwrap();
        let loaded: MetricReport =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(loaded, report);

        let csv = std::fs::read_to_string(&csv_path).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "clip_t,clip_i,dino,face_sim,face_div,fid,seconds_per_image");
        let row = lines.next().unwrap();
        assert_eq!(row.split(',').count(), 7);
        assert!(row.ends_with(','), "unset speed leaves the last column empty");
        assert_eq!(lines.next(), None);
    }

    #[test]
    fn corrupt_reference_path_fails_before_any_generation() {
        let dir = tempfile::tempdir().unwrap();
        let (checkpoint, mut eval) = benchmark_fixture(dir.path());
        eval.id_groups.get_mut("id00").unwrap().references[0] = PathBuf::from("missing.png");
        let a = adapters();
        let err = run_benchmark(
            &checkpoint,
            &eval,
            &GenerateOptions::default(),
            &a,
            dir.path(),
            false,
        )
        .unwrap_err();
        assert!(err.to_string().contains("missing.png"), "got: {err}");
    }
}
