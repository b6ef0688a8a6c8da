//! Minimal reverse-mode automatic differentiation over `f64` matrices.
//!
//! All differentiable forward math in the crate (fusion network, attention,
//! denoiser, losses) is expressed once as tape programs; inference wrappers
//! simply run the tape and read values while the trainer additionally calls
//! [`Tape::backward`]. One implementation path means the finite-difference
//! gradient checks exercise exactly the code that trains.
//!
//! The op set is intentionally small: matrix product (plain and with a
//! transposed right factor), elementwise arithmetic, row broadcasts, SiLU,
//! row softmax, concatenation/slicing along either axis, and a weighted
//! mean reduction for losses. Pooling and upsampling are expressed as
//! products with constant matrices.

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a @ b
    MatMul(NodeId, NodeId),
    /// a @ b.T
    MatMulBT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    /// (m x n) + broadcast (1 x n)
    AddRow(NodeId, NodeId),
    /// (m x n) * broadcast (1 x n)
    MulRow(NodeId, NodeId),
    Silu(NodeId),
    SoftmaxRows(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    /// sum(x * w) / sum(w), a 1x1 output; weights are a constant.
    WeightedMean(NodeId, Array2<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Convenience leaf for a 1 x n row.
    pub fn leaf_row(&mut self, row: &[f64]) -> NodeId {
        self.leaf(Array2::from_shape_vec((1, row.len()), row.to_vec()).expect("row shape"))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::dim("matmul", format!("inner {ac}"), format!("{br}")));
        }
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        debug_assert_eq!(v.dim(), (ar, bc));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// a @ b.T without materializing the transpose on the tape.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, ac) = self.shape(a);
        let (_, bc) = self.shape(b);
        if ac != bc {
            return Err(Error::dim("matmul_bt", format!("inner {ac}"), format!("{bc}")));
        }
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        Ok(self.push(v, Op::MatMulBT(a, b)))
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                what,
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a.0].value + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, ac) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != ac {
            return Err(Error::dim("add_row", format!("1x{ac}"), format!("{rr}x{rc}")));
        }
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, ac) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != ac {
            return Err(Error::dim("mul_row", format!("1x{ac}"), format!("{rr}x{rc}")));
        }
        let v = &self.nodes[a.0].value * &self.nodes[row.0].value;
        Ok(self.push(v, Op::MulRow(a, row)))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.axis_iter_mut(Axis(0)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                z += *e;
            }
            for e in row.iter_mut() {
                *e /= z;
            }
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows needs at least one part"));
        }
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(Error::dim("concat_rows", format!("{cols} cols"), format!("{c}")));
            }
            rows += r;
        }
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let (r, _) = self.shape(p);
            v.slice_mut(s![at..at + r, ..]).assign(&self.nodes[p.0].value);
            at += r;
        }
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols needs at least one part"));
        }
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(Error::dim("concat_cols", format!("{rows} rows"), format!("{r}")));
            }
            cols += c;
        }
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let (_, c) = self.shape(p);
            v.slice_mut(s![.., at..at + c]).assign(&self.nodes[p.0].value);
            at += c;
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, _) = self.shape(a);
        if start + len > r || len == 0 {
            return Err(Error::invalid(format!("slice_rows {start}..{} of {r}", start + len)));
        }
        let v = self.nodes[a.0].value.slice(s![start..start + len, ..]).to_owned();
        Ok(self.push(v, Op::SliceRows(a, start, len)))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (_, c) = self.shape(a);
        if start + len > c || len == 0 {
            return Err(Error::invalid(format!("slice_cols {start}..{} of {c}", start + len)));
        }
        let v = self.nodes[a.0].value.slice(s![.., start..start + len]).to_owned();
        Ok(self.push(v, Op::SliceCols(a, start, len)))
    }

    /// Weighted mean reduction; `weights` must match `a` and have a positive sum.
    pub fn weighted_mean(&mut self, a: NodeId, weights: Array2<f64>) -> Result<NodeId> {
        if self.shape(a) != weights.dim() {
            return Err(Error::dim(
                "weighted_mean",
                format!("{:?}", self.shape(a)),
                format!("{:?}", weights.dim()),
            ));
        }
        let wsum: f64 = weights.sum();
        if wsum <= 0.0 {
            return Err(Error::invalid("weighted_mean requires a positive weight sum"));
        }
        let v = (&self.nodes[a.0].value * &weights).sum() / wsum;
        Ok(self.push(Array2::from_elem((1, 1), v), Op::WeightedMean(a, weights)))
    }

    /// Mean of squared entries, used for unmasked losses.
    pub fn mean_sq(&mut self, a: NodeId) -> Result<NodeId> {
        let sq = self.mul(a, a)?;
        let w = Array2::ones(self.shape(sq));
        self.weighted_mean(sq, w)
    }

    /// Gradients of a scalar (1x1) node with respect to every tape node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let g = match grads[i].clone() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulBT(a, b) => {
                    // y = a b^T: dL/da = g b, dL/db = g^T a
                    let ga = g.dot(&self.nodes[b.0].value);
                    let gb = g.t().dot(&self.nodes[a.0].value);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g * *c),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, gr);
                }
                Op::MulRow(a, row) => {
                    let ga = &g * &self.nodes[row.0].value;
                    let gr = (&g * &self.nodes[a.0].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *row, gr);
                }
                Op::Silu(a) => {
                    let ga = self.nodes[a.0]
                        .value
                        .mapv(|x| {
                            let s = sigmoid(x);
                            s * (1.0 + x * (1.0 - s))
                        })
                        * &g;
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    // dx = y * (g - rowsum(g * y))
                    let y = &node.value;
                    let mut ga = Array2::zeros(y.dim());
                    for (r, row_y) in y.axis_iter(Axis(0)).enumerate() {
                        let row_g = g.index_axis(Axis(0), r);
                        let dot: f64 = row_y.iter().zip(row_g.iter()).map(|(a, b)| a * b).sum();
                        for (c, (&yv, &gv)) in row_y.iter().zip(row_g.iter()).enumerate() {
                            ga[[r, c]] = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let (r, _) = self.shape(p);
                        let gp = g.slice(s![at..at + r, ..]).to_owned();
                        accumulate(&mut grads, p, gp);
                        at += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let (_, c) = self.shape(p);
                        let gp = g.slice(s![.., at..at + c]).to_owned();
                        accumulate(&mut grads, p, gp);
                        at += c;
                    }
                }
                Op::SliceRows(a, start, len) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![*start..start + len, ..]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start, len) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![.., *start..start + len]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::WeightedMean(a, w) => {
                    let ga = w * (g[[0, 0]] / w.sum());
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
    match &mut grads[id.0] {
        Some(acc) => *acc = &*acc + &g,
        slot @ None => *slot = Some(g),
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to node `id`; zero-shaped `None`
    /// means the node did not influence the root.
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }
}
