//! Multi-head cross-attention over the updated text embedding, with
//! low-rank residuals folded into the projection matrices.

use ndarray::Array2;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::{ModelDims, ParamStore};

/// Projection matrices of one cross-attention block.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    /// c_f×(heads·head_dim)
    pub w_q: Array2<f64>,
    /// D×(heads·head_dim)
    pub w_k: Array2<f64>,
    /// D×(heads·head_dim)
    pub w_v: Array2<f64>,
    /// (heads·head_dim)×c_f
    pub w_o: Array2<f64>,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionWeights {
    pub fn new(
        w_q: Array2<f64>,
        w_k: Array2<f64>,
        w_v: Array2<f64>,
        w_o: Array2<f64>,
        heads: usize,
        head_dim: usize,
    ) -> Result<Self> {
        let inner = heads * head_dim;
        if inner == 0 {
            return Err(Error::config("attention needs at least one head and dimension"));
        }
        if w_q.ncols() != inner || w_k.ncols() != inner || w_v.ncols() != inner {
            return Err(Error::dim(
                "attention projections",
                format!("{inner} inner columns"),
                format!("q {}, k {}, v {}", w_q.ncols(), w_k.ncols(), w_v.ncols()),
            ));
        }
        if w_k.nrows() != w_v.nrows() {
            return Err(Error::dim(
                "attention context dim",
                format!("{}", w_k.nrows()),
                format!("{}", w_v.nrows()),
            ));
        }
        if w_o.dim() != (inner, w_q.nrows()) {
            return Err(Error::dim(
                "attention output projection",
                format!("{inner}x{}", w_q.nrows()),
                format!("{}x{}", w_o.nrows(), w_o.ncols()),
            ));
        }
        Ok(Self { w_q, w_k, w_v, w_o, heads, head_dim })
    }
}

/// Trainable low-rank delta added onto a frozen projection matrix.
#[derive(Debug, Clone)]
pub struct LoraResidual {
    /// in×r
    pub a: Array2<f64>,
    /// r×out, zero at initialization so the residual vanishes.
    pub b: Array2<f64>,
    pub scale: f64,
}

impl LoraResidual {
    pub fn new(a: Array2<f64>, b: Array2<f64>, scale: f64) -> Result<Self> {
        if a.ncols() == 0 || a.ncols() != b.nrows() {
            return Err(Error::dim(
                "low-rank residual",
                format!("a cols == b rows >= 1"),
                format!("a {:?}, b {:?}", a.dim(), b.dim()),
            ));
        }
        Ok(Self { a, b, scale })
    }
}

/// One residual per attention projection.
#[derive(Debug, Clone)]
pub struct LoraSet {
    pub q: LoraResidual,
    pub k: LoraResidual,
    pub v: LoraResidual,
    pub o: LoraResidual,
}

/// W + scale·A·B.
pub fn lora_effective_weight(w: &Array2<f64>, res: &LoraResidual) -> Result<Array2<f64>> {
    if res.a.nrows() != w.nrows() || res.b.ncols() != w.ncols() {
        return Err(Error::dim(
            "lora_effective_weight",
            format!("{}x{}", w.nrows(), w.ncols()),
            format!("{}x{} via rank {}", res.a.nrows(), res.b.ncols(), res.a.ncols()),
        ));
    }
    Ok(w + &(res.a.dot(&res.b) * res.scale))
}

/// Attention block on a tape: effective projection nodes plus the leaves of
/// the trainable low-rank factors (for gradient extraction).
#[derive(Debug, Clone)]
pub struct AttentionGraph {
    pub w_q_eff: NodeId,
    pub w_k_eff: NodeId,
    pub w_v_eff: NodeId,
    pub w_o_eff: NodeId,
    pub heads: usize,
    pub head_dim: usize,
    /// Parameter name → leaf for every named tensor this block consumed.
    pub param_nodes: Vec<(String, NodeId)>,
}

/// Output nodes of one attention application.
#[derive(Debug, Clone)]
pub struct AttentionApplied {
    /// M×c_f, output projection plus residual connection.
    pub output: NodeId,
    /// Per-head M×K attention maps.
    pub attn: Vec<NodeId>,
    /// M×(heads·head_dim) concatenated head outputs before W_O.
    pub pre_projection: NodeId,
}

impl AttentionGraph {
    /// Builds the block from the parameter store: frozen base projections
    /// `denoiser.attn{level}.*` plus residual factors `lora.attn{level}.*`.
    pub fn from_params(
        tape: &mut Tape,
        params: &ParamStore,
        dims: &ModelDims,
        level: usize,
    ) -> Result<Self> {
        let mut param_nodes = Vec::new();
        let mut leaf = |tape: &mut Tape, name: String| -> Result<NodeId> {
            let id = tape.leaf(params.get(&name)?.clone());
            param_nodes.push((name, id));
            Ok(id)
        };
        let mut eff = |tape: &mut Tape, which: &str| -> Result<NodeId> {
            let w = leaf(tape, format!("denoiser.attn{level}.{which}"))?;
            let a = leaf(tape, format!("lora.attn{level}.{which}.a"))?;
            let b = leaf(tape, format!("lora.attn{level}.{which}.b"))?;
            let delta = tape.matmul(a, b)?;
            let scaled = tape.scale(delta, dims.lora_scale);
            tape.add(w, scaled)
        };
        let w_q_eff = eff(tape, "q")?;
        let w_k_eff = eff(tape, "k")?;
        let w_v_eff = eff(tape, "v")?;
        let w_o_eff = eff(tape, "o")?;
        Ok(Self {
            w_q_eff,
            w_k_eff,
            w_v_eff,
            w_o_eff,
            heads: dims.heads,
            head_dim: dims.head_dim,
            param_nodes,
        })
    }

    /// Builds the block from explicit weights (tests and the plain wrapper).
    pub fn from_weights(
        tape: &mut Tape,
        weights: &AttentionWeights,
        lora: Option<&LoraSet>,
    ) -> Result<Self> {
        let load = |tape: &mut Tape, w: &Array2<f64>, res: Option<&LoraResidual>| -> Result<NodeId> {
            let base = tape.leaf(w.clone());
            match res {
                None => Ok(base),
                Some(r) => {
                    let a = tape.leaf(r.a.clone());
                    let b = tape.leaf(r.b.clone());
                    let delta = tape.matmul(a, b)?;
                    let scaled = tape.scale(delta, r.scale);
                    tape.add(base, scaled)
                }
            }
        };
        let w_q_eff = load(tape, &weights.w_q, lora.map(|l| &l.q))?;
        let w_k_eff = load(tape, &weights.w_k, lora.map(|l| &l.k))?;
        let w_v_eff = load(tape, &weights.w_v, lora.map(|l| &l.v))?;
        let w_o_eff = load(tape, &weights.w_o, lora.map(|l| &l.o))?;
        Ok(Self {
            w_q_eff,
            w_k_eff,
            w_v_eff,
            w_o_eff,
            heads: weights.heads,
            head_dim: weights.head_dim,
            param_nodes: Vec::new(),
        })
    }

    /// Queries from `features` (M×c_f), keys and values from the full
    /// context (K×D); per-row softmax over all K keys, heads concatenated,
    /// projected back and residual-added.
    pub fn apply(&self, tape: &mut Tape, features: NodeId, context: NodeId) -> Result<AttentionApplied> {
        let q = tape.matmul(features, self.w_q_eff)?;
        let k = tape.matmul(context, self.w_k_eff)?;
        let v = tape.matmul(context, self.w_v_eff)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads);
        let mut attn_maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let offset = h * self.head_dim;
            let qh = tape.slice_cols(q, offset, self.head_dim)?;
            let kh = tape.slice_cols(k, offset, self.head_dim)?;
            let vh = tape.slice_cols(v, offset, self.head_dim)?;
            let scores = tape.matmul_bt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            attn_maps.push(attn);
            head_outputs.push(tape.matmul(attn, vh)?);
        }
        let pre_projection = tape.concat_cols(&head_outputs)?;
        let projected = tape.matmul(pre_projection, self.w_o_eff)?;
        let output = tape.add(features, projected)?;
        Ok(AttentionApplied { output, attn: attn_maps, pre_projection })
    }
}

/// Values produced by one plain (non-training) attention evaluation.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Array2<f64>,
    pub attn: Vec<Array2<f64>>,
    pub pre_projection: Array2<f64>,
}

/// Plain wrapper over the tape builder so inference and training share one
/// arithmetic path.
pub fn cross_attention(
    features: &Array2<f64>,
    context: &Array2<f64>,
    weights: &AttentionWeights,
    lora: Option<&LoraSet>,
) -> Result<AttentionOutput> {
    if context.ncols() != weights.w_k.nrows() {
        return Err(Error::dim(
            "cross_attention context",
            format!("{}", weights.w_k.nrows()),
            format!("{}", context.ncols()),
        ));
    }
    if features.ncols() != weights.w_q.nrows() {
        return Err(Error::dim(
            "cross_attention features",
            format!("{}", weights.w_q.nrows()),
            format!("{}", features.ncols()),
        ));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(features.clone());
    let ctx = tape.leaf(context.clone());
    let graph = AttentionGraph::from_weights(&mut tape, weights, lora)?;
    let applied = graph.apply(&mut tape, x, ctx)?;
    Ok(AttentionOutput {
        output: tape.value(applied.output).clone(),
        attn: applied.attn.iter().map(|&a| tape.value(a).clone()).collect(),
        pre_projection: tape.value(applied.pre_projection).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use ndarray::arr2;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_from(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.gen::<f64>() - 0.5)
    }

    #[test]
    fn lora_zero_b_and_zero_scale_are_identity() {
        let w = random(5, 3, 1);
        let zero_b = LoraResidual::new(random(5, 2, 2), Array2::zeros((2, 3)), 1.0).unwrap();
        assert_eq!(lora_effective_weight(&w, &zero_b).unwrap(), w);

        let zero_scale = LoraResidual::new(random(5, 2, 3), random(2, 3, 4), 0.0).unwrap();
        assert_eq!(lora_effective_weight(&w, &zero_scale).unwrap(), w);
    }

    #[test]
    fn lora_matches_explicit_multiplication() {
        let w = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let a = arr2(&[[0.5, -1.0], [2.0, 0.25]]);
        let b = arr2(&[[1.0, 0.0], [0.0, -2.0]]);
        let res = LoraResidual::new(a.clone(), b.clone(), 0.5).unwrap();
        let got = lora_effective_weight(&w, &res).unwrap();
        // Dense multiply by hand: 0.5 * a.dot(b) added entrywise.
        let ab = arr2(&[[0.5, 2.0], [2.0, -0.5]]);
        assert_eq!(got, &w + &(ab * 0.5));

        let bad = LoraResidual::new(random(3, 2, 5), random(2, 2, 6), 1.0).unwrap();
        assert!(lora_effective_weight(&w, &bad).is_err(), "row mismatch must fail");
    }

    #[test]
    fn single_key_gets_full_attention_weight() {
        let d = 3;
        let weights = AttentionWeights::new(
            Array2::eye(d),
            Array2::eye(d),
            Array2::eye(d),
            Array2::eye(d),
            1,
            d,
        )
        .unwrap();
        let features = random(1, d, 7);
        let context = random(1, d, 8);
        let out = cross_attention(&features, &context, &weights, None).unwrap();
        assert_eq!(out.attn.len(), 1);
        assert!((out.attn[0][[0, 0]] - 1.0).abs() < 1e-15, "lone key takes weight one");
        // Pre-projection output is exactly the V row (identity W_V).
        for c in 0..d {
            assert!((out.pre_projection[[0, c]] - context[[0, c]]).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_share_attention_equally() {
        let d = 4;
        let weights = AttentionWeights::new(
            Array2::eye(d),
            Array2::eye(d),
            Array2::eye(d),
            Array2::eye(d),
            2,
            2,
        )
        .unwrap();
        let features = random(3, d, 9);
        let key = random(1, d, 10);
        let mut context = Array2::zeros((2, d));
        context.row_mut(0).assign(&key.row(0));
        context.row_mut(1).assign(&key.row(0));
        let out = cross_attention(&features, &context, &weights, None).unwrap();
        for attn in &out.attn {
            for r in 0..attn.nrows() {
                assert!((attn[[r, 0]] - 0.5).abs() < 1e-12, "identical keys must split evenly");
                assert!((attn[[r, 1]] - 0.5).abs() < 1e-12);
            }
        }
    }

    /// Scalar-loop reference with explicit head bookkeeping.
    fn naive_attention(
        x: &Array2<f64>,
        ctx: &Array2<f64>,
        w: &AttentionWeights,
    ) -> Array2<f64> {
        let m = x.nrows();
        let kn = ctx.nrows();
        let inner = w.heads * w.head_dim;
        let q = x.dot(&w.w_q);
        let k = ctx.dot(&w.w_k);
        let v = ctx.dot(&w.w_v);
        let mut concat = Array2::zeros((m, inner));
        for h in 0..w.heads {
            let off = h * w.head_dim;
            for i in 0..m {
                let mut scores = vec![0.0; kn];
                for (j, s) in scores.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for c in 0..w.head_dim {
                        dot += q[[i, off + c]] * k[[j, off + c]];
                    }
                    *s = dot / (w.head_dim as f64).sqrt();
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in 0..w.head_dim {
                    let mut acc = 0.0;
                    for (j, e) in exps.iter().enumerate() {
                        acc += e / z * v[[j, off + c]];
                    }
                    concat[[i, off + c]] = acc;
                }
            }
        }
        concat.dot(&w.w_o) + x
    }

    #[test]
    fn matches_scalar_loop_reference_on_random_instances() {
        for seed in 0..20 {
            let mut rng = rng_from(1000 + seed);
            let heads = [1, 2][rng.gen_range(0..2)];
            let head_dim = rng.gen_range(1..5);
            let inner = heads * head_dim;
            let cf = rng.gen_range(1..7);
            let d = rng.gen_range(1..7);
            let m = rng.gen_range(1..9);
            let kn = rng.gen_range(1..9);
            let weights = AttentionWeights::new(
                random(cf, inner, seed * 7 + 1),
                random(d, inner, seed * 7 + 2),
                random(d, inner, seed * 7 + 3),
                random(inner, cf, seed * 7 + 4),
                heads,
                head_dim,
            )
            .unwrap();
            let x = random(m, cf, seed * 7 + 5);
            let ctx = random(kn, d, seed * 7 + 6);
            let fast = cross_attention(&x, &ctx, &weights, None).unwrap();
            let slow = naive_attention(&x, &ctx, &weights);
            for (a, b) in fast.output.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-6, "attention mismatch: {a} vs {b}");
            }
            for attn in &fast.attn {
                for row in attn.rows() {
                    let sum: f64 = row.sum();
                    assert!((sum - 1.0).abs() < 1e-6, "softmax row sums to {sum}");
                }
            }
        }
    }

    #[test]
    fn lora_residual_shifts_the_output() {
        let d = 4;
        let weights = AttentionWeights::new(
            random(d, d, 20),
            random(d, d, 21),
            random(d, d, 22),
            random(d, d, 23),
            2,
            2,
        )
        .unwrap();
        let mk = |seed| LoraResidual::new(random(d, 2, seed), random(2, d, seed + 1), 1.0).unwrap();
        let lora = LoraSet { q: mk(30), k: mk(32), v: mk(34), o: mk(36) };
        let x = random(2, d, 40);
        let ctx = random(3, d, 41);
        let base = cross_attention(&x, &ctx, &weights, None).unwrap();
        let with = cross_attention(&x, &ctx, &weights, Some(&lora)).unwrap();
        assert_ne!(base.output, with.output, "nonzero residual must change the output");

        // Folding the residuals into the weights matches the runtime path.
        let folded = AttentionWeights::new(
            lora_effective_weight(&weights.w_q, &lora.q).unwrap(),
            lora_effective_weight(&weights.w_k, &lora.k).unwrap(),
            lora_effective_weight(&weights.w_v, &lora.v).unwrap(),
            lora_effective_weight(&weights.w_o, &lora.o).unwrap(),
            2,
            2,
        )
        .unwrap();
        let direct = cross_attention(&x, &ctx, &folded, None).unwrap();
        for (a, b) in with.output.iter().zip(direct.output.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
