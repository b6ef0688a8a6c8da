//! The stacked identity embedding: weight-scaled stacking of fused
//! per-image embeddings, the three composing modes, prompt weighting,
//! proportional identity-mixing pools, and the splice that replaces the
//! class-word rows of a text embedding with the identity rows.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::encoders::TextEmbedding;
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::rng::{derive_seed_str, rng_from};

/// One fused per-image identity embedding with its provenance tag and a
/// stacking weight. The weight defaults to 1 and may be zeroed explicitly
/// (prompt-weighting ablations); negative weights are rejected.
#[derive(Debug, Clone)]
pub struct FusedEmbedding {
    /// 1×D row.
    pub vector: Array2<f64>,
    pub source_id: String,
    pub weight: f64,
}

impl FusedEmbedding {
    pub fn new(vector: Array2<f64>, source_id: impl Into<String>) -> Result<Self> {
        Self::weighted(vector, source_id, 1.0)
    }

    pub fn weighted(vector: Array2<f64>, source_id: impl Into<String>, weight: f64) -> Result<Self> {
        if vector.nrows() != 1 {
            return Err(Error::dim("fused embedding", "1 row", format!("{} rows", vector.nrows())));
        }
        if !vector.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("fused embedding has non-finite entries"));
        }
        if !weight.is_finite() || weight < 0.0 {
            return Err(Error::invalid(format!("fused embedding weight must be >= 0, got {weight}")));
        }
        Ok(Self { vector, source_id: source_id.into(), weight })
    }

    pub fn dim(&self) -> usize {
        self.vector.ncols()
    }
}

/// N×D identity matrix block spliced into text embeddings, one row per
/// reference image (stacked mode) or a single reduced row (average/linear).
#[derive(Debug, Clone)]
pub struct StackedIdEmbedding {
    pub matrix: Array2<f64>,
    pub sources: Vec<String>,
}

impl StackedIdEmbedding {
    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }
}

/// How fused embeddings combine before the text splice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComposeMode {
    Average,
    Linear,
    Stacked,
}

impl std::fmt::Display for ComposeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ComposeMode::Average => "average",
            ComposeMode::Linear => "linear",
            ComposeMode::Stacked => "stacked",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ComposeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(ComposeMode::Average),
            "linear" => Ok(ComposeMode::Linear),
            "stacked" => Ok(ComposeMode::Stacked),
            other => Err(Error::config(format!(
                "unknown compose mode {other:?} (expected average, linear, or stacked)"
            ))),
        }
    }
}

/// Shared D→D projection used by the linear composing mode.
#[derive(Debug, Clone)]
pub struct LinearComposeWeights {
    /// D×D
    pub weight: Array2<f64>,
    /// 1×D
    pub bias: Array2<f64>,
}

impl LinearComposeWeights {
    pub fn new(weight: Array2<f64>, bias: Array2<f64>) -> Result<Self> {
        if weight.nrows() != weight.ncols() || bias.dim() != (1, weight.ncols()) {
            return Err(Error::dim(
                "linear compose weights",
                "DxD weight with 1xD bias",
                format!("{:?} with {:?}", weight.dim(), bias.dim()),
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn from_params(params: &ParamStore) -> Result<Self> {
        Self::new(params.get("compose_linear.w")?.clone(), params.get("compose_linear.b")?.clone())
    }
}

fn check_uniform_dim(fused: &[FusedEmbedding]) -> Result<usize> {
    let first = fused.first().ok_or_else(|| Error::invalid("cannot stack zero fused embeddings"))?;
    let d = first.dim();
    for f in fused {
        if f.dim() != d {
            return Err(Error::dim("fused embedding stack", format!("{d}"), format!("{}", f.dim())));
        }
    }
    Ok(d)
}

/// Stacks fused embeddings along the length dimension: row i is input i's
/// vector scaled by its weight, sources recorded in order.
pub fn stack(fused: &[FusedEmbedding]) -> Result<StackedIdEmbedding> {
    let d = check_uniform_dim(fused)?;
    let mut matrix = Array2::zeros((fused.len(), d));
    let mut sources = Vec::with_capacity(fused.len());
    for (i, f) in fused.iter().enumerate() {
        for (c, v) in f.vector.row(0).iter().enumerate() {
            matrix[[i, c]] = v * f.weight;
        }
        sources.push(f.source_id.clone());
    }
    Ok(StackedIdEmbedding { matrix, sources })
}

/// Combines fused embeddings under the chosen mode: elementwise mean
/// (average), a learned projection of the mean (linear), or row stacking.
pub fn compose(
    fused: &[FusedEmbedding],
    mode: ComposeMode,
    linear: Option<&LinearComposeWeights>,
) -> Result<StackedIdEmbedding> {
    match mode {
        ComposeMode::Stacked => stack(fused),
        ComposeMode::Average => {
            let stacked = stack(fused)?;
            Ok(StackedIdEmbedding {
                matrix: mean_row(&stacked.matrix),
                sources: vec![joined_tag("average", &stacked.sources)],
            })
        }
        ComposeMode::Linear => {
            let weights = linear.ok_or_else(|| {
                Error::config("linear compose mode requires compose_linear weights")
            })?;
            let stacked = stack(fused)?;
            if stacked.dim() != weights.weight.nrows() {
                return Err(Error::dim(
                    "linear compose",
                    format!("{}", weights.weight.nrows()),
                    format!("{}", stacked.dim()),
                ));
            }
            let mean = mean_row(&stacked.matrix);
            Ok(StackedIdEmbedding {
                matrix: mean.dot(&weights.weight) + &weights.bias,
                sources: vec![joined_tag("linear", &stacked.sources)],
            })
        }
    }
}

fn mean_row(matrix: &Array2<f64>) -> Array2<f64> {
    let n = matrix.nrows() as f64;
    let mut row = Array2::zeros((1, matrix.ncols()));
    for r in matrix.rows() {
        for (c, v) in r.iter().enumerate() {
            row[[0, c]] += v;
        }
    }
    row.mapv_inplace(|v| v / n);
    row
}

fn joined_tag(mode: &str, sources: &[String]) -> String {
    format!("{mode}({})", sources.join("+"))
}

/// Scales each fused embedding's weight by its coefficient. Vectors stay
/// untouched; the scaling lands at stack time.
pub fn apply_prompt_weights(
    fused: &[FusedEmbedding],
    coefficients: &[f64],
) -> Result<Vec<FusedEmbedding>> {
    if fused.len() != coefficients.len() {
        return Err(Error::invalid(format!(
            "{} coefficients for {} embeddings",
            coefficients.len(),
            fused.len()
        )));
    }
    fused
        .iter()
        .zip(coefficients)
        .map(|(f, &c)| {
            if !c.is_finite() || c < 0.0 {
                return Err(Error::invalid(format!("prompt-weight coefficient must be >= 0, got {c}")));
            }
            FusedEmbedding::weighted(f.vector.clone(), f.source_id.clone(), f.weight * c)
        })
        .collect()
}

/// Builds an identity-mixing input pool with exact per-identity counts.
///
/// Selection within each identity is a seeded draw without replacement;
/// output order round-robins across identities (sorted by tag) so no
/// identity monopolizes the leading stack rows.
pub fn build_mixing_pool<T: Clone>(
    groups: &BTreeMap<String, Vec<T>>,
    proportions: &BTreeMap<String, usize>,
    seed: u64,
) -> Result<Vec<(String, T)>> {
    let total: usize = proportions.values().sum();
    if total == 0 {
        return Err(Error::invalid("mixing pool proportions sum to zero"));
    }
    let mut queues: Vec<(String, Vec<T>)> = Vec::new();
    for (id, &count) in proportions {
        if count == 0 {
            continue;
        }
        let avail = groups
            .get(id)
            .ok_or_else(|| Error::invalid(format!("mixing pool references unknown identity {id:?}")))?;
        if count > avail.len() {
            return Err(Error::invalid(format!(
                "identity {id:?} has {} images, {count} requested",
                avail.len()
            )));
        }
        let mut rng = rng_from(derive_seed_str(seed, "mixing-pool", id));
        let picked = rand::seq::index::sample(&mut rng, avail.len(), count)
            .into_iter()
            .map(|i| avail[i].clone())
            .collect::<Vec<_>>();
        queues.push((id.clone(), picked));
    }
    // BTreeMap iteration already sorted queues by tag.
    let mut out = Vec::with_capacity(total);
    let mut offset = 0;
    while out.len() < total {
        for (id, picked) in &queues {
            if offset < picked.len() {
                out.push((id.clone(), picked[offset].clone()));
            }
        }
        offset += 1;
    }
    Ok(out)
}

/// Where each row of an updated text embedding came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowProvenance {
    /// Row index in the original text embedding.
    Text(usize),
    /// Row index in the stacked identity embedding.
    Id(usize),
}

/// Text embedding with the class-word rows replaced by identity rows.
#[derive(Debug, Clone)]
pub struct UpdatedTextEmbedding {
    pub matrix: Array2<f64>,
    pub provenance: Vec<RowProvenance>,
}

impl UpdatedTextEmbedding {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Replaces the class-word span of `t` with the rows of `s`, keeping every
/// other text row in place: rows(out) = rows(t) − span_len + N.
pub fn merge_into_text(t: &TextEmbedding, s: &StackedIdEmbedding) -> Result<UpdatedTextEmbedding> {
    let l = t.rows();
    let span = t.class_span.clone();
    if span.is_empty() || span.end > l {
        return Err(Error::invalid(format!(
            "class span {span:?} invalid for a {l}-row text embedding"
        )));
    }
    if s.dim() != t.dim() {
        return Err(Error::dim("merge_into_text", format!("{}", t.dim()), format!("{}", s.dim())));
    }
    if s.is_empty() {
        return Err(Error::invalid("cannot merge an empty identity stack"));
    }
    let n = s.len();
    let out_rows = l - span.len() + n;
    let mut matrix = Array2::zeros((out_rows, t.dim()));
    let mut provenance = Vec::with_capacity(out_rows);
    let mut at = 0;
    for r in 0..span.start {
        matrix.row_mut(at).assign(&t.matrix.row(r));
        provenance.push(RowProvenance::Text(r));
        at += 1;
    }
    for r in 0..n {
        matrix.row_mut(at).assign(&s.matrix.row(r));
        provenance.push(RowProvenance::Id(r));
        at += 1;
    }
    for r in span.end..l {
        matrix.row_mut(at).assign(&t.matrix.row(r));
        provenance.push(RowProvenance::Text(r));
        at += 1;
    }
    Ok(UpdatedTextEmbedding { matrix, provenance })
}

/// Tape version of the splice for the training path: text rows stay constant
/// leaves while the identity block keeps its gradient history.
pub fn merge_rows_graph(
    tape: &mut Tape,
    text_matrix: NodeId,
    class_span: std::ops::Range<usize>,
    id_block: NodeId,
) -> Result<NodeId> {
    let (l, _) = tape.shape(text_matrix);
    if class_span.is_empty() || class_span.end > l {
        return Err(Error::invalid(format!(
            "class span {class_span:?} invalid for a {l}-row text embedding"
        )));
    }
    let mut parts = Vec::with_capacity(3);
    if class_span.start > 0 {
        parts.push(tape.slice_rows(text_matrix, 0, class_span.start)?);
    }
    parts.push(id_block);
    if class_span.end < l {
        parts.push(tape.slice_rows(text_matrix, class_span.end, l - class_span.end)?);
    }
    tape.concat_rows(&parts)
}
