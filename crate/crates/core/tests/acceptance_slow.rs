//! Slow end-to-end acceptance check: trains the toy model from scratch and
//! measures the identity signal carried by its generations.
//!
//! This is the long-running half of the acceptance suite (several minutes in
//! release mode); run it explicitly:
//!
//! ```text
//! cargo test --release -p photomaker-core --test acceptance_slow -- --ignored --nocapture
//! ```
//!
//! Three checks share one training run:
//!   9a. the smoothed training loss falls below 0.1x its starting value
//!       within 5,000 steps;
//!   9b. generations conditioned on an identity score higher mock
//!       face-similarity against that identity than against every other
//!       identity in at least 80% of 64 trials;
//!   9c. over 32 paired seeds, the mean mock face-similarity with four
//!       references is at least the mean with one reference.

use std::time::Instant;

use photomaker_core::adapters::{AdapterBuildContext, AdapterSet};
use photomaker_core::data_pipeline::{build_dataset, load_manifest, PipelineConfig};
use photomaker_core::diffusion::generate::{generate, GenerateOptions};
use photomaker_core::diffusion::sampler::SamplerConfig;
use photomaker_core::diffusion::schedule::{NoiseSchedule, ScheduleConfig};
use photomaker_core::encoders::IdImage;
use photomaker_core::evaluation::face_similarity;
use photomaker_core::grid::PixelGrid;
use photomaker_core::model::ModelDims;
use photomaker_core::rng::derive_seed;
use photomaker_core::synthetic::{build_corpus, corpus_ids, write_corpus, SyntheticConfig};
use photomaker_core::trainer::{smoothed, train, TrainConfig, TrainSet};

const IDS: usize = 8;
const IMAGES_PER_ID: usize = 8;
const TRAIN_STEPS: usize = 5_000;
const LOSS_WINDOW: usize = 50;
const LOSS_RATIO_LIMIT: f64 = 0.1;
const TRIALS_PER_ID: u64 = 8;
const REQUIRED_HITS: usize = 52; // 80% of 64 trials
const PAIRED_SEEDS: u64 = 32;

fn check(results: &mut Vec<(String, bool)>, label: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("[{verdict}] {label}: {detail}");
    results.push((label.to_string(), pass));
}

#[test]
#[ignore = "trains for 5,000 steps; run explicitly with --ignored"]
fn toy_overfit_and_identity_signal() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    let dataset = dir.path().join("dataset");
    let run = dir.path().join("run");

    // Corpus: 8 identities x 8 images at full pattern contrast, curated into
    // a training set of 16x16 latents.
    let corpus_cfg = SyntheticConfig { pattern_amp: 0.6, ..SyntheticConfig::default() };
    let ids = corpus_ids(IDS);
    write_corpus(&raw, &build_corpus(&corpus_cfg, &ids, IMAGES_PER_ID).unwrap()).unwrap();
    let adapters = AdapterSet::mocks(3, &AdapterBuildContext::default());
    let pipeline = PipelineConfig {
        min_image_side: 48,
        min_face_side: 24,
        ..PipelineConfig::default()
    };
    let summary = build_dataset(&raw, &dataset, &pipeline, &adapters).unwrap();
    assert_eq!(summary.entries, IDS * IMAGES_PER_ID, "curation must keep all toy images");
    let set = TrainSet::load(&dataset, load_manifest(&summary.manifest_path).unwrap()).unwrap();

    let dims = ModelDims {
        feat_width: 48,
        heads: 4,
        head_dim: 12,
        lora_rank: 16,
        lora_scale: 3.0,
        ..ModelDims::default()
    };
    assert_eq!((dims.latent_h, dims.latent_w), (16, 16), "toy regime runs on 16x16 latents");
    let schedule = NoiseSchedule::scaled_linear(ScheduleConfig {
        timesteps: 50,
        beta_start: 0.07,
        beta_end: 0.18,
    })
    .unwrap();
    let config = TrainConfig {
        lr_lora: 5e-3,
        lr_other: 5e-4,
        batch_size: 4,
        max_steps: TRAIN_STEPS,
        seed: 0,
        ..TrainConfig::default()
    };

    let checkpoint = train(&set, &config, &dims, &schedule, &adapters, &run, None).unwrap();
    let params = checkpoint.param_store().unwrap();
    println!(
        "trained {} steps in {:.0}s",
        checkpoint.step,
        started.elapsed().as_secs_f64()
    );

    // 9a: smoothed loss from the run's own log.
    let log = std::fs::read_to_string(run.join("loss_log.csv")).unwrap();
    let losses: Vec<f64> = log
        .lines()
        .skip(1)
        .map(|line| line.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), TRAIN_STEPS, "loss log must cover every step");
    let curve = smoothed(&losses, LOSS_WINDOW);
    let initial = curve[0];
    let crossed = curve.iter().position(|&v| v < LOSS_RATIO_LIMIT * initial);
    let final_ratio = curve.last().unwrap() / initial;

    let mut results = Vec::new();
    check(
        &mut results,
        "9a toy overfit",
        crossed.is_some() && final_ratio < LOSS_RATIO_LIMIT,
        format!(
            "smoothed loss {:.4} -> {:.4} (ratio {:.4}, crossed 0.1x at step {})",
            initial,
            curve.last().unwrap(),
            final_ratio,
            crossed.map_or_else(|| "never".to_string(), |s| (s + 1).to_string()),
        ),
    );

    // Reference galleries and conditioning inputs per identity.
    let mut galleries: Vec<Vec<PixelGrid>> = Vec::new();
    let mut cond: Vec<Vec<(String, IdImage)>> = Vec::new();
    let mut class_words: Vec<String> = Vec::new();
    for id in &ids {
        let idxs = &set.groups[id];
        galleries.push(idxs.iter().map(|&i| set.items[i].image.clone()).collect());
        cond.push(
            idxs.iter()
                .map(|&i| {
                    let item = &set.items[i];
                    (id.clone(), IdImage::new(item.image.clone(), item.mask.clone()).unwrap())
                })
                .collect(),
        );
        class_words.push(set.items[idxs[0]].entry.class_word.clone());
    }

    let options = GenerateOptions {
        sampler: SamplerConfig { steps: 50, cfg_scale: 1.0, delay_ratio: 0.0, eta: 0.0 },
        ..GenerateOptions::default()
    };

    // 9b: similarity argmax over 64 trials (8 identities x 8 seeds, N=4).
    let mut hits = 0;
    let mut trials = 0;
    for (i, id) in ids.iter().enumerate() {
        let prompt = format!("a photo of a {}", class_words[i]);
        for k in 0..TRIALS_PER_ID {
            let seed = derive_seed(1000, id, k);
            let (image, _) = generate(
                &prompt, &cond[i][..4], &params, &dims, &schedule, &options, &adapters, seed,
            )
            .unwrap();
            let scores: Vec<f64> = galleries
                .iter()
                .map(|gallery| face_similarity(&image, gallery, &adapters).unwrap().score)
                .collect();
            let win = scores
                .iter()
                .enumerate()
                .all(|(j, &s)| j == i || scores[i] > s);
            trials += 1;
            if win {
                hits += 1;
            }
        }
    }
    check(
        &mut results,
        "9b identity argmax",
        hits >= REQUIRED_HITS,
        format!("conditioned id won {hits}/{trials} trials (needs >= {REQUIRED_HITS})"),
    );

    // 9c: N=4 vs N=1 mean similarity over paired seeds.
    let mut mean_one = 0.0;
    let mut mean_four = 0.0;
    for pair in 0..PAIRED_SEEDS {
        let i = (pair % IDS as u64) as usize;
        let prompt = format!("a photo of a {}", class_words[i]);
        let seed = derive_seed(2000, "paired", pair);
        for (n, acc) in [(1usize, &mut mean_one), (4usize, &mut mean_four)] {
            let (image, _) = generate(
                &prompt, &cond[i][..n], &params, &dims, &schedule, &options, &adapters, seed,
            )
            .unwrap();
            *acc += face_similarity(&image, &galleries[i], &adapters).unwrap().score
                / PAIRED_SEEDS as f64;
        }
    }
    check(
        &mut results,
        "9c reference scaling",
        mean_four >= mean_one,
        format!("mean similarity N=4 {mean_four:.4} vs N=1 {mean_one:.4}"),
    );

    println!("total elapsed {:.0}s", started.elapsed().as_secs_f64());
    let failed: Vec<&str> =
        results.iter().filter(|(_, p)| !p).map(|(l, _)| l.as_str()).collect();
    assert!(failed.is_empty(), "failed checks: {}", failed.join(", "));
}
