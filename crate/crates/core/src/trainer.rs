//! Training: same-identity reference sampling, the differentiable forward
//! pass (shared with inference), the masked-loss and null-text recipe draws,
//! a two-rate Adam update, CSV logging, and resumable checkpoints.
//!
//! Every random draw derives from `(run seed, step index)`, never from a
//! long-lived RNG, so a run resumed from any checkpoint continues
//! bit-identically to the uninterrupted run.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::autodiff::{NodeId, Tape};
use crate::data_pipeline::ManifestEntry;
use crate::diffusion::checkpoint::{AdamSlot, ArrayData, Checkpoint, OptimizerState};
use crate::diffusion::codec::{encode_image, Latent};
use crate::diffusion::denoiser::DenoiserGraph;
use crate::diffusion::loss::{diffusion_loss_weights, loss_node};
use crate::diffusion::schedule::NoiseSchedule;
use crate::encoders::{encode_null_text, encode_text_with_span, noise_background, FusionGraph, IdEncoderGraph};
use crate::error::{Error, Result};
use crate::grid::{BoolGrid, PixelGrid};
use crate::model::{group_of, ModelDims, ParamGroup, ParamStore};
use crate::rng::{derive_seed, fnv1a, rng_from};
use crate::stacked::merge_rows_graph;

/// Training hyperparameters. Residual and tuned parameters get separate
/// learning rates; the base denoiser and time conditioning never update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Learning rate for the low-rank attention residuals.
    pub lr_lora: f64,
    /// Learning rate for the identity branch (encoder block, projection,
    /// fusion).
    pub lr_other: f64,
    pub batch_size: usize,
    /// Chance of replacing the merged context with the null-text embedding.
    pub null_text_prob: f64,
    /// Chance of restricting the loss to the person mask.
    pub masked_loss_prob: f64,
    /// Reference-count bounds; the draw clips to the identity's group size.
    pub n_min: usize,
    pub n_max: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Periodic checkpoint interval in steps; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_lora: 1e-4,
            lr_other: 1e-5,
            batch_size: 4,
            null_text_prob: 0.1,
            masked_loss_prob: 0.5,
            n_min: 1,
            n_max: 4,
            max_steps: 1000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("null_text_prob", self.null_text_prob), ("masked_loss_prob", self.masked_loss_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0,1], got {p}")));
            }
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return Err(Error::config(format!(
                "reference bounds need 1 <= n_min <= n_max, got {}..{}",
                self.n_min, self.n_max
            )));
        }
        if !(self.lr_lora > 0.0 && self.lr_other > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0,1), got {b}")));
            }
        }
        Ok(())
    }

    /// Hash of everything that must match for a resumed run to continue
    /// bit-identically. Schedule-length knobs (`max_steps`,
    /// `checkpoint_every`) are deliberately excluded so a run can be
    /// extended.
    pub fn resume_hash(&self, dims: &ModelDims, schedule: &NoiseSchedule) -> String {
        let key = serde_json::json!({
            "lr_lora": self.lr_lora,
            "lr_other": self.lr_other,
            "batch_size": self.batch_size,
            "null_text_prob": self.null_text_prob,
            "masked_loss_prob": self.masked_loss_prob,
            "n_min": self.n_min,
            "n_max": self.n_max,
            "seed": self.seed,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "dims": dims,
            "schedule": schedule.config,
        });
        format!("{:016x}", fnv1a(key.to_string().as_bytes()))
    }
}

/// One manifest entry with its pixels and person mask resident in memory.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub entry: ManifestEntry,
    pub image: PixelGrid,
    pub mask: BoolGrid,
}

/// The training dataset, grouped by identity tag.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub items: Vec<TrainItem>,
    /// Identity tag → indices into `items`.
    pub groups: BTreeMap<String, Vec<usize>>,
}

impl TrainSet {
    pub fn from_items(items: Vec<TrainItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("training set holds no items"));
        }
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, item) in items.iter().enumerate() {
            groups.entry(item.entry.id_tag.clone()).or_default().push(i);
        }
        Ok(TrainSet { items, groups })
    }

    /// Loads every image and mask referenced by the manifest entries,
    /// resolving paths against the dataset root.
    pub fn load(root: &Path, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut items = Vec::with_capacity(entries.len());
        for entry in entries {
            let image = entry.load_image(root)?;
            let mask = entry.load_mask(root)?;
            items.push(TrainItem { entry, image, mask });
        }
        Self::from_items(items)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// One training example: a target plus same-identity references (which may
/// include the target itself). Values index into the set's items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub target: usize,
    pub references: Vec<usize>,
}

/// Draws a batch: target uniform over all images, then a reference count
/// uniform over `[n_min, n_max]` clipped to the target's group size, then
/// that many same-identity references without replacement.
pub fn sample_training_batch(
    set: &TrainSet,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<TrainingExample>> {
    if set.is_empty() {
        return Err(Error::invalid("cannot sample from an empty training set"));
    }
    let mut batch = Vec::with_capacity(config.batch_size);
    for _ in 0..config.batch_size {
        let target = rng.gen_range(0..set.len());
        let group = &set.groups[&set.items[target].entry.id_tag];
        let lo = config.n_min.min(group.len());
        let hi = config.n_max.min(group.len());
        let n = rng.gen_range(lo..=hi);
        let references = rand::seq::index::sample(rng, group.len(), n)
            .into_iter()
            .map(|i| group[i])
            .collect();
        batch.push(TrainingExample { target, references });
    }
    Ok(batch)
}

/// Per-example recipe coin flips, in a fixed draw order (null text first).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecipeDraw {
    pub use_null_text: bool,
    pub use_mask: bool,
}

pub fn draw_recipe(config: &TrainConfig, rng: &mut impl Rng) -> RecipeDraw {
    RecipeDraw {
        use_null_text: rng.gen::<f64>() < config.null_text_prob,
        use_mask: rng.gen::<f64>() < config.masked_loss_prob,
    }
}

/// Adam moments for the trainable parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Adam {
    pub step: usize,
    pub m: BTreeMap<String, Array2<f64>>,
    pub v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn to_state(&self) -> OptimizerState {
        let mut slots = BTreeMap::new();
        for (name, m) in &self.m {
            slots.insert(
                name.clone(),
                AdamSlot {
                    m: ArrayData::from_array(m),
                    v: ArrayData::from_array(&self.v[name]),
                },
            );
        }
        OptimizerState { step: self.step, slots }
    }

    pub fn from_state(state: &OptimizerState) -> Result<Self> {
        let mut adam = Adam { step: state.step, ..Adam::default() };
        for (name, slot) in &state.slots {
            adam.m.insert(name.clone(), slot.m.to_array()?);
            adam.v.insert(name.clone(), slot.v.to_array()?);
        }
        Ok(adam)
    }
}

/// What one optimizer step produced, for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Fraction of the batch whose loss was actually mask-restricted.
    pub used_mask: f64,
    /// Fraction of the batch trained against the null-text context.
    pub used_null_text_fraction: f64,
}

/// Runs one optimizer step over a batch.
///
/// Every example shares a single tape (and thus one set of parameter
/// leaves): references encode through the tunable encoder tail, fuse with
/// the target caption's class vector, splice into the caption embedding
/// (or yield to the null-text context), and the denoiser predicts the noise
/// added to the target latent at a uniformly drawn timestep. Gradients of
/// the batch-mean loss update the low-rank residuals at `lr_lora` and the
/// identity branch at `lr_other`; everything else stays frozen.
#[allow(clippy::too_many_arguments)]
pub fn training_step(
    set: &TrainSet,
    batch: &[TrainingExample],
    params: &mut ParamStore,
    adam: &mut Adam,
    step_seed: u64,
    config: &TrainConfig,
    dims: &ModelDims,
    schedule: &NoiseSchedule,
    adapters: &AdapterSet,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::invalid("training step needs a non-empty batch"));
    }
    let null = encode_null_text(adapters)?;

    let mut tape = Tape::new();
    let denoiser = DenoiserGraph::from_params(&mut tape, params, dims)?;
    let encoder = IdEncoderGraph::from_params(&mut tape, params)?;
    let fusion = FusionGraph::from_params(&mut tape, params)?;

    let mut example_losses: Vec<NodeId> = Vec::with_capacity(batch.len());
    let mut diagnostics: Vec<(usize, usize, bool)> = Vec::with_capacity(batch.len());
    let mut masked = 0usize;
    let mut nulled = 0usize;
    for (e, example) in batch.iter().enumerate() {
        let example_seed = derive_seed(step_seed, "example", e as u64);
        let mut rng = rng_from(example_seed);
        let recipe = draw_recipe(config, &mut rng);
        let t = rng.gen_range(0..schedule.timesteps());

        let item = set
            .items
            .get(example.target)
            .ok_or_else(|| Error::invalid(format!("batch target {} out of range", example.target)))?;

        let context = if recipe.use_null_text {
            nulled += 1;
            tape.leaf(null.matrix.clone())
        } else {
            if example.references.is_empty() {
                return Err(Error::invalid("training example carries no references"));
            }
            let text = encode_text_with_span(&item.entry.caption, item.entry.span(), adapters)?;
            let class_node = tape.leaf(text.class_vector());
            let mut rows = Vec::with_capacity(example.references.len());
            for (r, &ref_index) in example.references.iter().enumerate() {
                let reference = set.items.get(ref_index).ok_or_else(|| {
                    Error::invalid(format!("batch reference {ref_index} out of range"))
                })?;
                if reference.entry.id_tag != item.entry.id_tag {
                    return Err(Error::invalid(format!(
                        "reference identity {:?} does not match target {:?}",
                        reference.entry.id_tag, item.entry.id_tag
                    )));
                }
                let noised = noise_background(
                    &reference.image,
                    &reference.mask,
                    derive_seed(example_seed, "ref-noise", r as u64),
                )?;
                let feature = adapters.image_encoder.encode(&noised, Some(&reference.mask))?;
                let feature = tape.leaf(feature.insert_axis(Axis(0)));
                let projected = encoder.project(&mut tape, feature)?;
                rows.push(fusion.fuse(&mut tape, projected, class_node)?);
            }
            let id_block = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows)? };
            let text_leaf = tape.leaf(text.matrix.clone());
            merge_rows_graph(&mut tape, text_leaf, text.class_span.clone(), id_block)?
        };

        let z0 = Latent::new(encode_image(&item.image, dims)?, 0)?.flat();
        let eps = Array2::from_shape_fn(z0.dim(), |_| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let zt = schedule.add_noise(&z0, &eps, t)?;
        let z_node = tape.leaf(zt);
        let prediction = denoiser.predict(&mut tape, z_node, t, context)?;

        let weights = diffusion_loss_weights(recipe.use_mask.then_some(&item.mask), dims)?;
        if weights.used_mask {
            masked += 1;
        }
        let eps_node = tape.leaf(eps);
        let example_loss = loss_node(&mut tape, prediction, eps_node, &weights)?;
        example_losses.push(example_loss);
        diagnostics.push((e, t, weights.used_mask));
    }

    let mut total = example_losses[0];
    for &l in &example_losses[1..] {
        total = tape.add(total, l)?;
    }
    let mean = tape.scale(total, 1.0 / batch.len() as f64);
    let loss = tape.value(mean)[[0, 0]];
    if !loss.is_finite() {
        let per_example: Vec<String> = example_losses
            .iter()
            .zip(&diagnostics)
            .map(|(&node, &(e, t, m))| {
                format!("example {e}: t={t} masked={m} loss={}", tape.value(node)[[0, 0]])
            })
            .collect();
        return Err(Error::invalid(format!(
            "non-finite loss {loss} at optimizer step {}; {}",
            adam.step + 1,
            per_example.join("; ")
        )));
    }
    let grads = tape.backward(mean)?;

    // Two-rate Adam over every parameter leaf on the tape; frozen names are
    // skipped before any state is touched.
    adam.step += 1;
    let bc1 = 1.0 - config.beta1.powi(adam.step as i32);
    let bc2 = 1.0 - config.beta2.powi(adam.step as i32);
    let mut trainable: Vec<(String, NodeId)> = denoiser.param_nodes().to_vec();
    trainable.extend([
        ("enc_block.w".to_string(), encoder.enc_w),
        ("enc_block.b".to_string(), encoder.enc_b),
        ("proj.w".to_string(), encoder.proj_w),
        ("proj.b".to_string(), encoder.proj_b),
        ("fusion.w1".to_string(), fusion.w1),
        ("fusion.b1".to_string(), fusion.b1),
        ("fusion.w2".to_string(), fusion.w2),
        ("fusion.b2".to_string(), fusion.b2),
    ]);
    for (name, node) in trainable {
        let lr = match group_of(&name) {
            ParamGroup::Lora => config.lr_lora,
            ParamGroup::Tuned => config.lr_other,
            ParamGroup::Frozen => continue,
        };
        let shape = tape.shape(node);
        let zero = Array2::zeros(shape);
        let grad = grads.get(node).unwrap_or(&zero);
        let m = adam.m.entry(name.clone()).or_insert_with(|| Array2::zeros(shape));
        let v = adam.v.entry(name.clone()).or_insert_with(|| Array2::zeros(shape));
        m.zip_mut_with(grad, |m, &g| *m = config.beta1 * *m + (1.0 - config.beta1) * g);
        v.zip_mut_with(grad, |v, &g| *v = config.beta2 * *v + (1.0 - config.beta2) * g * g);
        let p = params.get_mut(&name)?;
        Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
            *p -= lr * (m / bc1) / ((v / bc2).sqrt() + config.adam_eps);
        });
    }

    Ok(StepOutcome {
        loss,
        used_mask: masked as f64 / batch.len() as f64,
        used_null_text_fraction: nulled as f64 / batch.len() as f64,
    })
}

/// Moving average with the given window (clamped to the series length);
/// entry i averages the window ending at i.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1).min(values.len().max(1));
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// Runs the full loop: seeded batches, optimizer steps, a CSV loss log
/// (`loss_log.csv`), periodic checkpoints, and a final checkpoint. Resuming
/// from a checkpoint continues bit-identically because every step reseeds
/// from `(seed, step index)` alone.
pub fn train(
    set: &TrainSet,
    config: &TrainConfig,
    dims: &ModelDims,
    schedule: &NoiseSchedule,
    adapters: &AdapterSet,
    out_dir: &Path,
    resume: Option<&Checkpoint>,
) -> Result<Checkpoint> {
    config.validate()?;
    dims.validate()?;
    let hash = config.resume_hash(dims, schedule);

    let (mut params, mut adam, start) = match resume {
        Some(ckpt) => {
            if ckpt.config_hash != hash {
                return Err(Error::config(format!(
                    "checkpoint was written by a different run configuration ({} != {hash})",
                    ckpt.config_hash
                )));
            }
            let adam = match &ckpt.optimizer {
                Some(state) => Adam::from_state(state)?,
                None => Adam::default(),
            };
            (ckpt.param_store()?, adam, ckpt.step)
        }
        None => (ParamStore::init(dims, config.seed)?, Adam::default(), 0),
    };
    if start > config.max_steps {
        return Err(Error::config(format!(
            "checkpoint is at step {start}, beyond max_steps {}",
            config.max_steps
        )));
    }

    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("loss_log.csv");
    let mut log = if start == 0 {
        let mut f = fs::File::create(&log_path)?;
        writeln!(f, "step,loss,used_mask,used_null_text_fraction")?;
        f
    } else {
        fs::OpenOptions::new().create(true).append(true).open(&log_path)?
    };

    for step in start..config.max_steps {
        let step_seed = derive_seed(config.seed, "train-step", step as u64);
        let mut batch_rng = rng_from(derive_seed(step_seed, "batch", 0));
        let batch = sample_training_batch(set, config, &mut batch_rng)?;
        let outcome = training_step(
            set, &batch, &mut params, &mut adam, step_seed, config, dims, schedule, adapters,
        )?;
        writeln!(
            log,
            "{},{},{},{}",
            step + 1,
            outcome.loss,
            outcome.used_mask,
            outcome.used_null_text_fraction
        )?;
        let done = step + 1;
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.max_steps {
            let ckpt = Checkpoint::new(
                done,
                dims.clone(),
                schedule.config.clone(),
                hash.clone(),
                &params,
                Some(adam.to_state()),
            );
            ckpt.save(&out_dir.join(format!("checkpoint_{done:06}.json")))?;
        }
    }
    log.flush()?;

    let final_ckpt = Checkpoint::new(
        config.max_steps,
        dims.clone(),
        schedule.config.clone(),
        hash,
        &params,
        Some(adam.to_state()),
    );
    final_ckpt.save(&out_dir.join("checkpoint_final.json"))?;
    Ok(final_ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterBuildContext, AdapterSet};
    use crate::diffusion::schedule::ScheduleConfig;
    use crate::grid::{filled, FaceBox};
    use crate::vocab;

    fn small_dims() -> ModelDims {
        ModelDims {
            latent_h: 4,
            latent_w: 4,
            latent_c: 4,
            feat_width: 8,
            ctx_dim: 32,
            image_feature_dim: 32,
            heads: 2,
            head_dim: 4,
            lora_rank: 2,
            lora_scale: 1.0,
            time_feat: 8,
        }
    }

    fn small_schedule() -> NoiseSchedule {
        NoiseSchedule::scaled_linear(ScheduleConfig { timesteps: 40, ..ScheduleConfig::default() })
            .unwrap()
    }

    fn test_adapters() -> AdapterSet {
        AdapterSet::mocks(7, &AdapterBuildContext::default())
    }

    fn test_item(id: &str, variant: u64) -> TrainItem {
        let mut rng = rng_from(derive_seed(1000, id, variant));
        let tone = rng.gen::<f64>();
        let mut image = filled(16, 16, [0.3, 0.4, 0.5]);
        for y in 4..12 {
            for x in 4..12 {
                image[[y, x, 0]] = (tone + 0.1 * rng.gen::<f64>()).clamp(0.0, 1.0);
                image[[y, x, 1]] = 1.0 - image[[y, x, 0]];
            }
        }
        let mut mask = BoolGrid::from_elem((16, 16), false);
        for y in 4..12 {
            for x in 4..12 {
                mask[[y, x]] = true;
            }
        }
        let caption = "a photo of a man".to_string();
        let occ = vocab::unique_occurrence(&caption).unwrap();
        let entry = ManifestEntry {
            id_tag: id.to_string(),
            image_path: format!("images/{id}/v{variant}.png"),
            mask_path: format!("masks/{id}/v{variant}.png"),
            face_box: FaceBox::new(4, 4, 8, 8, 1.0).unwrap(),
            caption,
            class_word: occ.singular,
            class_span: (occ.start, occ.end),
        };
        TrainItem { entry, image, mask }
    }

    fn test_set(ids: usize, per_id: usize) -> TrainSet {
        let mut items = Vec::new();
        for i in 0..ids {
            for v in 0..per_id {
                items.push(test_item(&format!("id{i}"), v as u64));
            }
        }
        TrainSet::from_items(items).unwrap()
    }

    fn quick_config() -> TrainConfig {
        TrainConfig { batch_size: 2, max_steps: 3, seed: 11, ..TrainConfig::default() }
    }

    #[test]
    fn batches_stay_inside_the_target_group() {
        let set = test_set(3, 6);
        let config = TrainConfig { batch_size: 64, ..TrainConfig::default() };
        let mut rng = rng_from(2);
        for _ in 0..5 {
            let batch = sample_training_batch(&set, &config, &mut rng).unwrap();
            for ex in &batch {
                let target_id = &set.items[ex.target].entry.id_tag;
                assert!(
                    (config.n_min..=config.n_max).contains(&ex.references.len()),
                    "reference count {} outside bounds",
                    ex.references.len()
                );
                let mut seen = std::collections::BTreeSet::new();
                for &r in &ex.references {
                    assert_eq!(&set.items[r].entry.id_tag, target_id, "cross-identity reference");
                    assert!(seen.insert(r), "reference {r} drawn twice");
                }
            }
        }
    }

    #[test]
    fn singleton_groups_force_a_single_self_reference() {
        let set = test_set(1, 1);
        let config = TrainConfig { batch_size: 8, ..TrainConfig::default() };
        let mut rng = rng_from(3);
        let batch = sample_training_batch(&set, &config, &mut rng).unwrap();
        for ex in &batch {
            assert_eq!(ex.references, vec![ex.target], "the only image must reference itself");
        }
    }

    #[test]
    fn reference_count_is_uniform_over_large_groups() {
        let set = test_set(1, 8);
        let config = TrainConfig { batch_size: 1, ..TrainConfig::default() };
        let mut rng = rng_from(4);
        let mut counts = [0usize; 4];
        let draws = 8000;
        for _ in 0..draws {
            let batch = sample_training_batch(&set, &config, &mut rng).unwrap();
            counts[batch[0].references.len() - 1] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let frac = c as f64 / draws as f64;
            assert!(
                (frac - 0.25).abs() < 0.03,
                "N={} drawn with frequency {frac:.3}, expected 0.25 +/- 0.03",
                i + 1
            );
        }
    }

    #[test]
    fn recipe_coin_flips_match_their_probabilities() {
        let config = TrainConfig::default();
        let mut rng = rng_from(5);
        let draws = 4000;
        let mut nulls = 0;
        let mut masks = 0;
        for _ in 0..draws {
            let r = draw_recipe(&config, &mut rng);
            nulls += r.use_null_text as usize;
            masks += r.use_mask as usize;
        }
        let null_frac = nulls as f64 / draws as f64;
        let mask_frac = masks as f64 / draws as f64;
        assert!((null_frac - 0.1).abs() < 0.02, "null-text fraction {null_frac}");
        assert!((mask_frac - 0.5).abs() < 0.03, "masked fraction {mask_frac}");
    }

    #[test]
    fn identical_state_and_seed_give_identical_steps() {
        let set = test_set(2, 3);
        let dims = small_dims();
        let schedule = small_schedule();
        let adapters = test_adapters();
        let config = quick_config();
        let batch = {
            let mut rng = rng_from(6);
            sample_training_batch(&set, &config, &mut rng).unwrap()
        };

        let mut params_a = ParamStore::init(&dims, 9).unwrap();
        let mut params_b = params_a.clone();
        let mut adam_a = Adam::default();
        let mut adam_b = Adam::default();
        let out_a = training_step(&set, &batch, &mut params_a, &mut adam_a, 77, &config, &dims, &schedule, &adapters).unwrap();
        let out_b = training_step(&set, &batch, &mut params_b, &mut adam_b, 77, &config, &dims, &schedule, &adapters).unwrap();
        assert_eq!(out_a.loss, out_b.loss, "same inputs must give the same loss");
        assert_eq!(params_a, params_b, "same inputs must give the same update");
        assert_eq!(adam_a, adam_b);

        let mut params_c = ParamStore::init(&dims, 9).unwrap();
        let mut adam_c = Adam::default();
        let out_c = training_step(&set, &batch, &mut params_c, &mut adam_c, 78, &config, &dims, &schedule, &adapters).unwrap();
        assert_ne!(out_a.loss, out_c.loss, "a different step seed must change the draw");
    }

    #[test]
    fn frozen_parameters_never_move_and_trainable_ones_do() {
        let set = test_set(2, 3);
        let dims = small_dims();
        let schedule = small_schedule();
        let adapters = test_adapters();
        // Null text off so the identity branch receives gradients each step.
        let config = TrainConfig { null_text_prob: 0.0, batch_size: 2, ..TrainConfig::default() };

        let init = ParamStore::init(&dims, 10).unwrap();
        let mut params = init.clone();
        let mut adam = Adam::default();
        for step in 0..3u64 {
            let step_seed = derive_seed(config.seed, "train-step", step);
            let mut rng = rng_from(derive_seed(step_seed, "batch", 0));
            let batch = sample_training_batch(&set, &config, &mut rng).unwrap();
            training_step(&set, &batch, &mut params, &mut adam, step_seed, &config, &dims, &schedule, &adapters).unwrap();
        }

        for name in init.names_in_group(ParamGroup::Frozen) {
            assert_eq!(
                init.get(&name).unwrap(),
                params.get(&name).unwrap(),
                "frozen parameter {name} must stay bit-identical"
            );
        }
        for prefix in ["lora.", "enc_block.", "proj.", "fusion."] {
            let moved = init
                .names()
                .filter(|n| n.starts_with(prefix))
                .any(|n| init.get(n).unwrap() != params.get(n).unwrap());
            assert!(moved, "no parameter under {prefix} moved in three steps");
        }
    }

    #[test]
    fn null_text_probability_one_makes_references_irrelevant() {
        let dims = small_dims();
        let schedule = small_schedule();
        let adapters = test_adapters();
        let config = TrainConfig { null_text_prob: 1.0, batch_size: 1, ..TrainConfig::default() };

        // Two sets sharing the target item but with different second images.
        let target = test_item("id0", 0);
        let mut other_a = test_item("id0", 1);
        let mut other_b = test_item("id0", 2);
        other_a.entry.image_path = "images/id0/other.png".into();
        other_b.entry.image_path = "images/id0/other.png".into();
        let set_a = TrainSet::from_items(vec![target.clone(), other_a]).unwrap();
        let set_b = TrainSet::from_items(vec![target, other_b]).unwrap();
        let batch = vec![TrainingExample { target: 0, references: vec![1] }];

        let mut params_a = ParamStore::init(&dims, 12).unwrap();
        let mut params_b = params_a.clone();
        let mut adam_a = Adam::default();
        let mut adam_b = Adam::default();
        let out_a = training_step(&set_a, &batch, &mut params_a, &mut adam_a, 5, &config, &dims, &schedule, &adapters).unwrap();
        let out_b = training_step(&set_b, &batch, &mut params_b, &mut adam_b, 5, &config, &dims, &schedule, &adapters).unwrap();
        assert_eq!(out_a.loss, out_b.loss, "null-text training must ignore the references");
        assert_eq!(params_a, params_b);
        assert_eq!(out_a.used_null_text_fraction, 1.0);
    }

    #[test]
    fn loss_trends_down_when_overfitting_one_image() {
        let set = test_set(1, 1);
        let dims = small_dims();
        let schedule = small_schedule();
        let adapters = test_adapters();
        // Descent through the attention-only conditioning path is slow at
        // the recipe rates, so the overfit check pins faster ones.
        let config = TrainConfig {
            batch_size: 2,
            null_text_prob: 0.0,
            masked_loss_prob: 0.0,
            max_steps: 300,
            lr_lora: 3e-3,
            lr_other: 3e-4,
            seed: 21,
            ..TrainConfig::default()
        };

        let mut params = ParamStore::init(&dims, 13).unwrap();
        let mut adam = Adam::default();
        let mut losses = Vec::with_capacity(config.max_steps);
        for step in 0..config.max_steps {
            let step_seed = derive_seed(config.seed, "train-step", step as u64);
            let mut rng = rng_from(derive_seed(step_seed, "batch", 0));
            let batch = sample_training_batch(&set, &config, &mut rng).unwrap();
            let out = training_step(&set, &batch, &mut params, &mut adam, step_seed, &config, &dims, &schedule, &adapters).unwrap();
            losses.push(out.loss);
        }
        let smooth = smoothed(&losses, 20);
        let first = smooth[19];
        let last = *smooth.last().unwrap();
        println!("overfit smoothed: first {first:.4} mid {:.4} last {last:.4}", smooth[150]);
        assert!(
            last < first,
            "smoothed loss should fall on a one-image overfit: first {first:.4}, last {last:.4}"
        );
    }

    #[test]
    fn zero_steps_checkpoint_equals_initialization() {
        let set = test_set(1, 2);
        let dims = small_dims();
        let schedule = small_schedule();
        let adapters = test_adapters();
        let config = TrainConfig { max_steps: 0, seed: 31, ..TrainConfig::default() };
        let dir = tempfile::tempdir().unwrap();

        let ckpt = train(&set, &config, &dims, &schedule, &adapters, dir.path(), None).unwrap();
        assert_eq!(ckpt.step, 0);
        let restored = ckpt.param_store().unwrap();
        assert_eq!(restored, ParamStore::init(&dims, config.seed).unwrap());
        assert!(dir.path().join("checkpoint_final.json").exists());
        let log = fs::read_to_string(dir.path().join("loss_log.csv")).unwrap();
        assert_eq!(log.trim(), "step,loss,used_mask,used_null_text_fraction");
    }

    #[test]
    fn resume_continues_bit_identically() {
        let set = test_set(2, 3);
        let dims = small_dims();
        let schedule = small_schedule();
        let adapters = test_adapters();
        let base = TrainConfig { batch_size: 2, seed: 41, ..TrainConfig::default() };

        let dir_full = tempfile::tempdir().unwrap();
        let full = train(
            &set,
            &TrainConfig { max_steps: 6, ..base.clone() },
            &dims,
            &schedule,
            &adapters,
            dir_full.path(),
            None,
        )
        .unwrap();

        let dir_split = tempfile::tempdir().unwrap();
        let half = train(
            &set,
            &TrainConfig { max_steps: 3, ..base.clone() },
            &dims,
            &schedule,
            &adapters,
            dir_split.path(),
            None,
        )
        .unwrap();
        let resumed = train(
            &set,
            &TrainConfig { max_steps: 6, ..base },
            &dims,
            &schedule,
            &adapters,
            dir_split.path(),
            Some(&half),
        )
        .unwrap();

        assert_eq!(full.params, resumed.params, "resumed run must match the uninterrupted one");
        assert_eq!(full.optimizer, resumed.optimizer);
        assert_eq!(full.step, resumed.step);
    }

    #[test]
    fn resume_rejects_a_different_configuration() {
        let set = test_set(1, 2);
        let dims = small_dims();
        let schedule = small_schedule();
        let adapters = test_adapters();
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig { max_steps: 1, seed: 51, batch_size: 1, ..TrainConfig::default() };
        let ckpt = train(&set, &config, &dims, &schedule, &adapters, dir.path(), None).unwrap();

        let other = TrainConfig { lr_lora: 5e-4, max_steps: 2, ..config };
        let err = train(&set, &other, &dims, &schedule, &adapters, dir.path(), Some(&ckpt));
        assert!(err.is_err(), "a changed learning rate must not resume silently");
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let set = test_set(1, 1);
        let dims = small_dims();
        let schedule = small_schedule();
        let adapters = test_adapters();
        let config = TrainConfig { batch_size: 1, ..TrainConfig::default() };

        let mut params = ParamStore::init(&dims, 61).unwrap();
        let poisoned = params.get("denoiser.out.w").unwrap().mapv(|_| f64::MAX);
        params.insert("denoiser.out.w".to_string(), poisoned);
        let mut adam = Adam::default();
        let batch = vec![TrainingExample { target: 0, references: vec![0] }];
        let err = training_step(&set, &batch, &mut params, &mut adam, 1, &config, &dims, &schedule, &adapters)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("non-finite"), "diagnostic message missing: {msg}");
        assert!(msg.contains("t="), "diagnostics should include the timestep: {msg}");
    }

    #[test]
    fn loss_log_has_one_row_per_step() {
        let set = test_set(1, 2);
        let dims = small_dims();
        let schedule = small_schedule();
        let adapters = test_adapters();
        let config = TrainConfig { max_steps: 3, batch_size: 1, seed: 71, checkpoint_every: 2, ..TrainConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        train(&set, &config, &dims, &schedule, &adapters, dir.path(), None).unwrap();

        let log = fs::read_to_string(dir.path().join("loss_log.csv")).unwrap();
        let lines: Vec<&str> = log.trim().lines().collect();
        assert_eq!(lines[0], "step,loss,used_mask,used_null_text_fraction");
        assert_eq!(lines.len(), 4, "header plus one row per step");
        for (i, line) in lines[1..].iter().enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 4);
            assert_eq!(fields[0], (i + 1).to_string());
            assert!(fields[1].parse::<f64>().unwrap().is_finite());
        }
        assert!(dir.path().join("checkpoint_000002.json").exists(), "periodic checkpoint missing");
    }

    #[test]
    fn smoothing_averages_trailing_windows() {
        let vals = [4.0, 2.0, 6.0, 0.0];
        assert_eq!(smoothed(&vals, 2), vec![4.0, 3.0, 4.0, 3.0]);
        assert_eq!(smoothed(&vals, 1), vals.to_vec());
        assert_eq!(smoothed(&[], 5), Vec::<f64>::new());
    }
}
