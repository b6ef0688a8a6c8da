//! Model dimensions, the named parameter store, and trainable-group
//! classification.
//!
//! Parameters live in a single ordered map keyed by hierarchical names.
//! Name prefixes decide the optimizer treatment: low-rank residual
//! parameters (`lora.`) train at the residual learning rate, the identity
//! branch (`enc_block.`, `proj.`, `fusion.`, `compose_linear.`) at the
//! tuned learning rate, and the base denoiser plus time conditioning
//! (`denoiser.`, `time.`) stay frozen.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed_str, rng_from};

/// Static shape configuration for the model stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub latent_h: usize,
    pub latent_w: usize,
    pub latent_c: usize,
    /// Channel width of the denoiser feature maps.
    pub feat_width: usize,
    /// Text/context embedding dimension D.
    pub ctx_dim: usize,
    /// Raw image-encoder feature dimension C.
    pub image_feature_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    /// Sinusoidal timestep feature count.
    pub time_feat: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            latent_h: 16,
            latent_w: 16,
            latent_c: 4,
            feat_width: 32,
            ctx_dim: 32,
            image_feature_dim: 32,
            heads: 2,
            head_dim: 16,
            lora_rank: 4,
            lora_scale: 1.0,
            time_feat: 16,
        }
    }
}

impl ModelDims {
    /// Fusion hidden width, fixed at twice the embedding dimension.
    pub fn fusion_hidden(&self) -> usize {
        2 * self.ctx_dim
    }

    /// Total attention inner dimension across heads.
    pub fn attn_inner(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_h", self.latent_h),
            ("latent_w", self.latent_w),
            ("latent_c", self.latent_c),
            ("feat_width", self.feat_width),
            ("ctx_dim", self.ctx_dim),
            ("image_feature_dim", self.image_feature_dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("time_feat", self.time_feat),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model dimension {name} must be positive")));
            }
        }
        if self.latent_h % 2 != 0 || self.latent_w % 2 != 0 {
            return Err(Error::config(
                "latent_h and latent_w must be even for the down/up level".to_string(),
            ));
        }
        if self.lora_rank == 0 {
            return Err(Error::config("lora_rank must be positive".to_string()));
        }
        if !self.lora_scale.is_finite() {
            return Err(Error::config("lora_scale must be finite".to_string()));
        }
        if self.time_feat % 4 != 0 {
            return Err(Error::config("time_feat must be a multiple of 4".to_string()));
        }
        Ok(())
    }
}

/// Optimizer treatment of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Low-rank attention residuals.
    Lora,
    /// Identity branch: encoder tunable block, projection, fusion, and the
    /// linear compose head.
    Tuned,
    /// Base denoiser and time conditioning.
    Frozen,
}

pub fn group_of(name: &str) -> ParamGroup {
    if name.starts_with("lora.") {
        ParamGroup::Lora
    } else if name.starts_with("enc_block.")
        || name.starts_with("proj.")
        || name.starts_with("fusion.")
        || name.starts_with("compose_linear.")
    {
        ParamGroup::Tuned
    } else {
        ParamGroup::Frozen
    }
}

/// Ordered named parameter arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    /// Freshly initialized parameters for `dims`.
    ///
    /// Weights are Gaussian with `1/sqrt(fan_in)` scale, biases zero. The
    /// low-rank `b` factors start at zero so residuals vanish at
    /// initialization and the model is exactly the base model. The output
    /// head is additionally shrunk so the untrained noise prediction is
    /// small relative to the noise target. Positional rows are fixed
    /// sinusoids, not random draws.
    pub fn init(dims: &ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let w = dims.feat_width;
        let d = dims.ctx_dim;
        let c = dims.image_feature_dim;
        let inner = dims.attn_inner();
        let r = dims.lora_rank;
        let hidden = dims.fusion_hidden();
        let (lh, lw, lc) = (dims.latent_h, dims.latent_w, dims.latent_c);

        let mut store = ParamStore::default();
        let add_gauss = |store: &mut ParamStore, name: &str, rows: usize, cols: usize, scale_mult: f64| {
            let mut rng = rng_from(derive_seed_str(seed, "param-init", name));
            let scale = scale_mult / (rows as f64).sqrt();
            let arr = Array2::from_shape_fn((rows, cols), |_| {
                let z: f64 = rng.sample(StandardNormal);
                z * scale
            });
            store.params.insert(name.to_string(), arr);
        };
        let add_zeros = |store: &mut ParamStore, name: &str, rows: usize, cols: usize| {
            store.params.insert(name.to_string(), Array2::zeros((rows, cols)));
        };

        // Identity branch.
        add_gauss(&mut store, "enc_block.w", c, c, 1.0);
        add_zeros(&mut store, "enc_block.b", 1, c);
        add_gauss(&mut store, "proj.w", c, d, 1.0);
        add_zeros(&mut store, "proj.b", 1, d);
        add_gauss(&mut store, "fusion.w1", 2 * d, hidden, 1.0);
        add_zeros(&mut store, "fusion.b1", 1, hidden);
        add_gauss(&mut store, "fusion.w2", hidden, d, 1.0);
        add_zeros(&mut store, "fusion.b2", 1, d);
        add_gauss(&mut store, "compose_linear.w", d, d, 1.0);
        add_zeros(&mut store, "compose_linear.b", 1, d);

        // Time conditioning.
        add_gauss(&mut store, "time.w1", dims.time_feat, w, 1.0);
        add_zeros(&mut store, "time.b1", 1, w);
        add_gauss(&mut store, "time.w2", w, w, 1.0);
        add_zeros(&mut store, "time.b2", 1, w);

        // Denoiser trunk.
        store
            .params
            .insert("denoiser.pos0".to_string(), positional_rows(lh, lw, w));
        store
            .params
            .insert("denoiser.pos1".to_string(), positional_rows(lh / 2, lw / 2, w));
        add_gauss(&mut store, "denoiser.in.w", lc, w, 1.0);
        add_zeros(&mut store, "denoiser.in.b", 1, w);
        for level in 0..2 {
            add_gauss(&mut store, &format!("denoiser.film{level}.w"), w, 2 * w, 0.5);
            add_zeros(&mut store, &format!("denoiser.film{level}.b"), 1, 2 * w);
            add_gauss(&mut store, &format!("denoiser.mix{level}.w"), w, w, 1.0);
            add_zeros(&mut store, &format!("denoiser.mix{level}.b"), 1, w);
            add_gauss(&mut store, &format!("denoiser.attn{level}.q"), w, inner, 1.0);
            add_gauss(&mut store, &format!("denoiser.attn{level}.k"), d, inner, 1.0);
            add_gauss(&mut store, &format!("denoiser.attn{level}.v"), d, inner, 1.0);
            add_gauss(&mut store, &format!("denoiser.attn{level}.o"), inner, w, 1.0);
            for which in ["q", "k", "v", "o"] {
                let (rows, cols) = match which {
                    "q" => (w, inner),
                    "k" | "v" => (d, inner),
                    _ => (inner, w),
                };
                add_gauss(&mut store, &format!("lora.attn{level}.{which}.a"), rows, r, 1.0);
                add_zeros(&mut store, &format!("lora.attn{level}.{which}.b"), r, cols);
            }
        }
        add_gauss(&mut store, "denoiser.fuse.w", 2 * w, w, 1.0);
        add_zeros(&mut store, "denoiser.fuse.b", 1, w);
        add_gauss(&mut store, "denoiser.out.w", w, lc, 0.3);
        add_zeros(&mut store, "denoiser.out.b", 1, lc);

        Ok(store)
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))
    }

    pub fn insert(&mut self, name: String, value: Array2<f64>) {
        self.params.insert(name, value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    /// Names in a group, in stable (sorted) order.
    pub fn names_in_group(&self, group: ParamGroup) -> Vec<String> {
        self.params
            .keys()
            .filter(|n| group_of(n) == group)
            .cloned()
            .collect()
    }
}

/// Fixed 2-D sinusoidal positional rows for an `h x w` grid, row-major.
fn positional_rows(h: usize, w: usize, width: usize) -> Array2<f64> {
    let bands = width / 4;
    let mut out = Array2::zeros((h * w, width));
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            for k in 0..bands {
                let omega = 1.0 / (100.0f64).powf(k as f64 / bands as f64);
                out[[p, 4 * k]] = (y as f64 * omega).sin();
                out[[p, 4 * k + 1]] = (y as f64 * omega).cos();
                out[[p, 4 * k + 2]] = (x as f64 * omega).sin();
                out[[p, 4 * k + 3]] = (x as f64 * omega).cos();
            }
            for rem in 4 * bands..width {
                out[[p, rem]] = 0.0;
            }
        }
    }
    out
}
