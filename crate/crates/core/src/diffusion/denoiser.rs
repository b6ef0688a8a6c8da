//! Two-level UNet-shaped toy denoiser.
//!
//! Latents are flattened to rows (one per spatial cell). Each level adds
//! fixed sinusoidal positional rows, modulates by a time-conditioned
//! scale/shift, mixes channels, and cross-attends into the text/identity
//! context. Pooling and upsampling are constant matrices so the whole
//! forward pass stays inside the tape.

use ndarray::Array2;

use crate::autodiff::{NodeId, Tape};
use crate::diffusion::attention::AttentionGraph;
use crate::diffusion::codec::Latent;
use crate::error::{Error, Result};
use crate::model::{ModelDims, ParamStore};

/// Sinusoidal timestep features, one 1×width row.
pub fn time_features(t: usize, width: usize) -> Array2<f64> {
    let bands = width / 2;
    let mut row = Array2::zeros((1, width));
    for k in 0..bands {
        let omega = 1.0 / (10_000.0f64).powf(k as f64 / bands as f64);
        row[[0, 2 * k]] = (t as f64 * omega).sin();
        row[[0, 2 * k + 1]] = (t as f64 * omega).cos();
    }
    row
}

/// 2×2 mean-pool as an (h/2·w/2)×(h·w) constant matrix over row-major cells.
fn pool_matrix(h: usize, w: usize) -> Array2<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut m = Array2::zeros((oh * ow, h * w));
    for y in 0..oh {
        for x in 0..ow {
            let row = y * ow + x;
            for dy in 0..2 {
                for dx in 0..2 {
                    m[[row, (2 * y + dy) * w + (2 * x + dx)]] = 0.25;
                }
            }
        }
    }
    m
}

/// Nearest-neighbor 2× upsampling as an (h·w)×(h/2·w/2) constant matrix.
fn unpool_matrix(h: usize, w: usize) -> Array2<f64> {
    let (ih, iw) = (h / 2, w / 2);
    let mut m = Array2::zeros((h * w, ih * iw));
    for y in 0..h {
        for x in 0..w {
            m[[y * w + x, (y / 2) * iw + x / 2]] = 1.0;
        }
    }
    m
}

/// The denoiser wired onto a tape: parameter leaves, constant resampling
/// matrices, and two attention blocks. Build once per tape, then run any
/// number of forward passes through it.
pub struct DenoiserGraph {
    dims: ModelDims,
    time_w1: NodeId,
    time_b1: NodeId,
    time_w2: NodeId,
    time_b2: NodeId,
    in_w: NodeId,
    in_b: NodeId,
    pos: [NodeId; 2],
    film: [(NodeId, NodeId); 2],
    mix: [(NodeId, NodeId); 2],
    attn: [AttentionGraph; 2],
    fuse_w: NodeId,
    fuse_b: NodeId,
    out_w: NodeId,
    out_b: NodeId,
    down: NodeId,
    up: NodeId,
    param_nodes: Vec<(String, NodeId)>,
}

impl DenoiserGraph {
    pub fn from_params(tape: &mut Tape, params: &ParamStore, dims: &ModelDims) -> Result<Self> {
        dims.validate()?;
        let mut param_nodes = Vec::new();
        fn leaf(
            tape: &mut Tape,
            params: &ParamStore,
            nodes: &mut Vec<(String, NodeId)>,
            name: &str,
        ) -> Result<NodeId> {
            let id = tape.leaf(params.get(name)?.clone());
            nodes.push((name.to_string(), id));
            Ok(id)
        }
        let time_w1 = leaf(tape, params, &mut param_nodes, "time.w1")?;
        let time_b1 = leaf(tape, params, &mut param_nodes, "time.b1")?;
        let time_w2 = leaf(tape, params, &mut param_nodes, "time.w2")?;
        let time_b2 = leaf(tape, params, &mut param_nodes, "time.b2")?;
        let in_w = leaf(tape, params, &mut param_nodes, "denoiser.in.w")?;
        let in_b = leaf(tape, params, &mut param_nodes, "denoiser.in.b")?;
        let pos = [
            leaf(tape, params, &mut param_nodes, "denoiser.pos0")?,
            leaf(tape, params, &mut param_nodes, "denoiser.pos1")?,
        ];
        let mut film = Vec::new();
        let mut mix = Vec::new();
        let mut attn = Vec::new();
        for level in 0..2 {
            film.push((
                leaf(tape, params, &mut param_nodes, &format!("denoiser.film{level}.w"))?,
                leaf(tape, params, &mut param_nodes, &format!("denoiser.film{level}.b"))?,
            ));
            mix.push((
                leaf(tape, params, &mut param_nodes, &format!("denoiser.mix{level}.w"))?,
                leaf(tape, params, &mut param_nodes, &format!("denoiser.mix{level}.b"))?,
            ));
            let block = AttentionGraph::from_params(tape, params, dims, level)?;
            param_nodes.extend(block.param_nodes.iter().cloned());
            attn.push(block);
        }
        let fuse_w = leaf(tape, params, &mut param_nodes, "denoiser.fuse.w")?;
        let fuse_b = leaf(tape, params, &mut param_nodes, "denoiser.fuse.b")?;
        let out_w = leaf(tape, params, &mut param_nodes, "denoiser.out.w")?;
        let out_b = leaf(tape, params, &mut param_nodes, "denoiser.out.b")?;
        let down = tape.leaf(pool_matrix(dims.latent_h, dims.latent_w));
        let up = tape.leaf(unpool_matrix(dims.latent_h, dims.latent_w));
        Ok(Self {
            dims: dims.clone(),
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            in_w,
            in_b,
            pos,
            film: [film[0], film[1]],
            mix: [mix[0], mix[1]],
            attn: [attn.remove(0), attn.remove(0)],
            fuse_w,
            fuse_b,
            out_w,
            out_b,
            down,
            up,
            param_nodes,
        })
    }

    /// Every named parameter leaf in this graph (for gradient extraction).
    pub fn param_nodes(&self) -> &[(String, NodeId)] {
        &self.param_nodes
    }

    fn time_embedding(&self, tape: &mut Tape, t: usize) -> Result<NodeId> {
        let tf = tape.leaf(time_features(t, self.dims.time_feat));
        let h = tape.matmul(tf, self.time_w1)?;
        let h = tape.add_row(h, self.time_b1)?;
        let h = tape.silu(h);
        let out = tape.matmul(h, self.time_w2)?;
        tape.add_row(out, self.time_b2)
    }

    /// Position + FiLM + channel mix + cross-attention for one level.
    fn level(
        &self,
        tape: &mut Tape,
        level: usize,
        features: NodeId,
        temb: NodeId,
        context: NodeId,
    ) -> Result<NodeId> {
        let w = self.dims.feat_width;
        let h = tape.add(features, self.pos[level])?;
        let (film_w, film_b) = self.film[level];
        let film = tape.matmul(temb, film_w)?;
        let film = tape.add_row(film, film_b)?;
        let gamma_raw = tape.slice_cols(film, 0, w)?;
        // Scale centered at one so an untrained film layer is near-identity.
        let gamma = tape.add_scalar(gamma_raw, 1.0);
        let beta = tape.slice_cols(film, w, w)?;
        let h = tape.mul_row(h, gamma)?;
        let h = tape.add_row(h, beta)?;
        let (mix_w, mix_b) = self.mix[level];
        let h2 = tape.matmul(h, mix_w)?;
        let h2 = tape.add_row(h2, mix_b)?;
        let h2 = tape.silu(h2);
        Ok(self.attn[level].apply(tape, h2, context)?.output)
    }

    /// Noise prediction on a flattened (h·w)×c latent.
    pub fn predict(
        &self,
        tape: &mut Tape,
        latent: NodeId,
        t: usize,
        context: NodeId,
    ) -> Result<NodeId> {
        let m0 = self.dims.latent_h * self.dims.latent_w;
        let shape = tape.shape(latent);
        if shape != (m0, self.dims.latent_c) {
            return Err(Error::dim(
                "denoiser latent",
                format!("{m0}x{}", self.dims.latent_c),
                format!("{}x{}", shape.0, shape.1),
            ));
        }
        let (_, ctx_cols) = tape.shape(context);
        if ctx_cols != self.dims.ctx_dim {
            return Err(Error::dim(
                "denoiser context",
                format!("{}", self.dims.ctx_dim),
                format!("{ctx_cols}"),
            ));
        }
        let temb = self.time_embedding(tape, t)?;
        let h = tape.matmul(latent, self.in_w)?;
        let h = tape.add_row(h, self.in_b)?;
        let h0 = self.level(tape, 0, h, temb, context)?;
        let pooled = tape.matmul(self.down, h0)?;
        let h1 = self.level(tape, 1, pooled, temb, context)?;
        let upsampled = tape.matmul(self.up, h1)?;
        let cat = tape.concat_cols(&[h0, upsampled])?;
        let fused = tape.matmul(cat, self.fuse_w)?;
        let fused = tape.add_row(fused, self.fuse_b)?;
        let fused = tape.silu(fused);
        let out = tape.matmul(fused, self.out_w)?;
        tape.add_row(out, self.out_b)
    }
}

/// Plain forward pass: builds a throwaway tape and reads the value.
pub fn predict_noise_flat(
    params: &ParamStore,
    dims: &ModelDims,
    latent: &Array2<f64>,
    t: usize,
    context: &Array2<f64>,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let graph = DenoiserGraph::from_params(&mut tape, params, dims)?;
    let z = tape.leaf(latent.clone());
    let ctx = tape.leaf(context.clone());
    let out = graph.predict(&mut tape, z, t, ctx)?;
    Ok(tape.value(out).clone())
}

/// Noise prediction on a spatial latent; shape-preserving.
pub fn predict_noise(
    params: &ParamStore,
    dims: &ModelDims,
    latent: &Latent,
    context: &Array2<f64>,
) -> Result<Latent> {
    let flat = latent.flat();
    let out = predict_noise_flat(params, dims, &flat, latent.timestep, context)?;
    Latent::from_flat(&out, latent.tensor.dim().0, latent.tensor.dim().1, latent.timestep)
}
