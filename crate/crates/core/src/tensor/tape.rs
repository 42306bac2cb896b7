//! The recorded compute graph.
//!
//! Every primitive appends a node holding its output values, the op tag, and
//! whatever forward state the backward pass needs. Node ids are indices into
//! the tape, so the insertion order is already a topological order and the
//! backward pass is a single reverse sweep. Gradients accumulate additively
//! when a node feeds several consumers; nodes whose inputs are all frozen are
//! skipped entirely.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Reshape { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddRowVec { a: NodeId, v: NodeId },
    MulRowVec { a: NodeId, v: NodeId },
    AddScalar { a: NodeId },
    MulScalar { a: NodeId, c: f64 },
    Gelu { a: NodeId },
    SoftmaxRows { a: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    Embedding { table: NodeId, ids: Vec<usize> },
    ConcatCols { a: NodeId, b: NodeId },
    SelectRows { a: NodeId, rows: Vec<usize> },
    MeanAll { a: NodeId },
    SumAll { a: NodeId },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, batch: usize, seq: usize, lens: Vec<usize>, scale: f64 },
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    CapClip { a: NodeId, cap: f64 },
    CapRescale { a: NodeId, cap: f64 },
}

#[derive(Debug)]
enum Aux {
    None,
    // per-row mean and 1/sqrt(var+eps)
    LayerNorm { mean: Vec<f64>, inv_std: Vec<f64> },
    // attention probabilities, laid out [batch][head][query][key]
    Probs(Vec<f64>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    aux: Aux,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.grads[id.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Attention probabilities saved by the forward pass, `[b][h][query][key]`.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].aux {
            Aux::Probs(p) => Some(p),
            _ => None,
        }
    }

    fn rc(&self, id: NodeId) -> (usize, usize) {
        let s = &self.nodes[id.0].shape;
        match s.len() {
            1 => (1, s[0]),
            _ => (s[..s.len() - 1].iter().product(), *s.last().unwrap()),
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, aux: Aux, requires_grad: bool, name: &'static str) -> Result<NodeId> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite { op: name });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, shape, values, aux, requires_grad });
        Ok(id)
    }

    // ── inputs ──────────────────────────────────────────────────────────

    /// Binds a tensor as a graph input. Frozen tensors (requires_grad false)
    /// never receive gradient.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            values: t.values().to_vec(),
            aux: Aux::None,
            requires_grad: t.requires_grad,
        });
        id
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<NodeId> {
        self.push(Op::Leaf, shape, values, Aux::None, false, "constant")
    }

    pub fn scalar(&mut self, v: f64) -> Result<NodeId> {
        self.constant(vec![1], vec![v])
    }

    // ── primitives ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.rc(a);
        let (kb, n) = self.rc(b);
        if ka != kb {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                detail: format!("({m}x{ka}) x ({kb}x{n})"),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(&self.nodes[a.0].values, &self.nodes[b.0].values, m, ka, n, &mut out);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(Op::MatMul { a, b }, vec![m, n], out, Aux::None, rg, "matmul")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.rc(a);
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.requires_grad(a);
        self.push(Op::Transpose { a }, vec![n, m], out, Aux::None, rg, "transpose")
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].values.len() {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.nodes[a.0].shape),
            });
        }
        let values = self.nodes[a.0].values.clone();
        let rg = self.requires_grad(a);
        self.push(Op::Reshape { a }, shape, values, Aux::None, rg, "reshape")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same_shape(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same_shape(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same_shape(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    fn zip_same_shape(&mut self, a: NodeId, b: NodeId, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(CoreError::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(op, shape, out, Aux::None, rg, name)
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_rowvec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (r, c) = self.rc(a);
        if self.nodes[v.0].values.len() != c {
            return Err(CoreError::ShapeMismatch {
                op: "add_rowvec",
                detail: format!("vector {} vs {c} cols", self.nodes[v.0].values.len()),
            });
        }
        let vv = &self.nodes[v.0].values;
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = av[i * c + j] + vv[j];
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires_grad(a) || self.requires_grad(v);
        self.push(Op::AddRowVec { a, v }, shape, out, Aux::None, rg, "add_rowvec")
    }

    /// Multiplies every row of `a` elementwise by a length-`cols` vector.
    pub fn mul_rowvec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (r, c) = self.rc(a);
        if self.nodes[v.0].values.len() != c {
            return Err(CoreError::ShapeMismatch {
                op: "mul_rowvec",
                detail: format!("vector {} vs {c} cols", self.nodes[v.0].values.len()),
            });
        }
        let vv = &self.nodes[v.0].values;
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = av[i * c + j] * vv[j];
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires_grad(a) || self.requires_grad(v);
        self.push(Op::MulRowVec { a, v }, shape, out, Aux::None, rg, "mul_rowvec")
    }

    /// Adds a scalar node (shape `[1]`) to every element.
    pub fn add_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.nodes[s.0].values.len() != 1 {
            return Err(CoreError::ShapeMismatch { op: "add_scalar", detail: "scalar operand must have one element".into() });
        }
        let sv = self.nodes[s.0].values[0];
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|&x| x + sv).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires_grad(a) || self.requires_grad(s);
        self.push(Op::AddScalar { a }, shape, out, Aux::None, rg, "add_scalar")
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires_grad(a);
        self.push(Op::MulScalar { a, c }, shape, out, Aux::None, rg, "mul_scalar")
    }

    /// Exact Gaussian-CDF GeLU, so that `gelu'(0) = 0.5` holds exactly.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|&x| gelu(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires_grad(a);
        self.push(Op::Gelu { a }, shape, out, Aux::None, rg, "gelu")
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.rc(a);
        if c == 0 {
            return Err(CoreError::EmptyInput("softmax over zero-length axis"));
        }
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_into(&av[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires_grad(a);
        self.push(Op::SoftmaxRows { a }, shape, out, Aux::None, rg, "softmax")
    }

    /// Layer normalization over the last axis:
    /// `gamma * (x - mean) / sqrt(var + eps) + beta`, biased variance.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = self.rc(x);
        if c == 0 {
            return Err(CoreError::EmptyInput("layer_norm over zero-length axis"));
        }
        if self.nodes[gamma.0].values.len() != c || self.nodes[beta.0].values.len() != c {
            return Err(CoreError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gamma {} / beta {} vs {c} cols",
                    self.nodes[gamma.0].values.len(),
                    self.nodes[beta.0].values.len()
                ),
            });
        }
        if eps <= 0.0 {
            return Err(CoreError::InvalidConfig("layer_norm eps must be positive".into()));
        }
        let xv = &self.nodes[x.0].values;
        let gv = &self.nodes[gamma.0].values;
        let bv = &self.nodes[beta.0].values;
        let mut out = vec![0.0; r * c];
        let mut means = vec![0.0; r];
        let mut inv_stds = vec![0.0; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            means[i] = mean;
            inv_stds[i] = inv_std;
            for j in 0..c {
                out[i * c + j] = gv[j] * (row[j] - mean) * inv_std + bv[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        self.push(
            Op::LayerNorm { x, gamma, beta },
            shape,
            out,
            Aux::LayerNorm { mean: means, inv_std: inv_stds },
            rg,
            "layer_norm",
        )
    }

    /// Gathers rows of an embedding table; gradient scatter-adds back.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, d) = self.rc(table);
        let mut out = vec![0.0; ids.len() * d];
        let tv = &self.nodes[table.0].values;
        for (r, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(CoreError::TokenOutOfRange { id: id as u32, vocab: rows });
            }
            out[r * d..(r + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.requires_grad(table);
        self.push(Op::Embedding { table, ids: ids.to_vec() }, vec![ids.len(), d], out, Aux::None, rg, "embedding")
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.rc(a);
        let (rb, cb) = self.rc(b);
        if ra != rb {
            return Err(CoreError::ShapeMismatch {
                op: "concat_cols",
                detail: format!("{ra} rows vs {rb} rows"),
            });
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let c = ca + cb;
        let mut out = vec![0.0; ra * c];
        for i in 0..ra {
            out[i * c..i * c + ca].copy_from_slice(&av[i * ca..(i + 1) * ca]);
            out[i * c + ca..(i + 1) * c].copy_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(Op::ConcatCols { a, b }, vec![ra, c], out, Aux::None, rg, "concat_cols")
    }

    pub fn select_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (r, c) = self.rc(a);
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; rows.len() * c];
        for (i, &row) in rows.iter().enumerate() {
            if row >= r {
                return Err(CoreError::ShapeMismatch {
                    op: "select_rows",
                    detail: format!("row {row} out of {r}"),
                });
            }
            out[i * c..(i + 1) * c].copy_from_slice(&av[row * c..(row + 1) * c]);
        }
        let rg = self.requires_grad(a);
        self.push(Op::SelectRows { a, rows: rows.to_vec() }, vec![rows.len(), c], out, Aux::None, rg, "select_rows")
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a.0].values.len();
        if n == 0 {
            return Err(CoreError::EmptyInput("mean over empty tensor"));
        }
        let m = self.nodes[a.0].values.iter().sum::<f64>() / n as f64;
        let rg = self.requires_grad(a);
        self.push(Op::MeanAll { a }, vec![1], vec![m], Aux::None, rg, "mean_all")
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.nodes[a.0].values.iter().sum::<f64>();
        let rg = self.requires_grad(a);
        self.push(Op::SumAll { a }, vec![1], vec![s], Aux::None, rg, "sum_all")
    }

    /// Multi-head scaled dot-product attention over a `(batch*seq, d)` layout.
    ///
    /// `lens[b]` gives the number of valid positions of example `b`; padded
    /// key positions receive exactly zero attention weight. The probabilities
    /// are saved and can be inspected via [`Tape::attention_probs`].
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, batch: usize, seq: usize, lens: &[usize]) -> Result<NodeId> {
        let (rq, d) = self.rc(q);
        if rq != batch * seq || self.rc(k) != (rq, d) || self.rc(v) != (rq, d) {
            return Err(CoreError::ShapeMismatch {
                op: "attention",
                detail: format!("q/k/v must all be ({}x{d})", batch * seq),
            });
        }
        if d % heads != 0 {
            return Err(CoreError::ShapeMismatch {
                op: "attention",
                detail: format!("{d} dims not divisible by {heads} heads"),
            });
        }
        if lens.len() != batch || lens.iter().any(|&l| l == 0 || l > seq) {
            return Err(CoreError::ShapeMismatch {
                op: "attention",
                detail: "lens must have one entry in 1..=seq per example".into(),
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = &self.nodes[q.0].values;
        let kv = &self.nodes[k.0].values;
        let vv = &self.nodes[v.0].values;
        let mut out = vec![0.0; batch * seq * d];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            let len = lens[b];
            for h in 0..heads {
                let col0 = h * dh;
                for i in 0..seq {
                    let qrow = &qv[(b * seq + i) * d + col0..(b * seq + i) * d + col0 + dh];
                    for (j, s) in scores.iter_mut().enumerate().take(len) {
                        let krow = &kv[(b * seq + j) * d + col0..(b * seq + j) * d + col0 + dh];
                        *s = scale * dot(qrow, krow);
                    }
                    let pbase = ((b * heads + h) * seq + i) * seq;
                    softmax_into(&scores[..len], &mut probs[pbase..pbase + len]);
                    let orow = (b * seq + i) * d + col0;
                    for j in 0..len {
                        let p = probs[pbase + j];
                        let vrow = &vv[(b * seq + j) * d + col0..(b * seq + j) * d + col0 + dh];
                        for t in 0..dh {
                            out[orow + t] += p * vrow[t];
                        }
                    }
                }
            }
        }
        let rg = self.requires_grad(q) || self.requires_grad(k) || self.requires_grad(v);
        self.push(
            Op::Attention { q, k, v, heads, batch, seq, lens: lens.to_vec(), scale },
            vec![batch * seq, d],
            out,
            Aux::Probs(probs),
            rg,
            "attention",
        )
    }

    /// Per-example cross-entropy `-log softmax(logits)[label]`, shape `(batch,)`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (r, c) = self.rc(logits);
        if labels.len() != r {
            return Err(CoreError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{} labels for {r} rows", labels.len()),
            });
        }
        let lv = &self.nodes[logits.0].values;
        let mut probs = vec![0.0; r * c];
        let mut out = vec![0.0; r];
        for i in 0..r {
            let label = labels[i];
            if label >= c {
                return Err(CoreError::LabelOutOfRange { label, classes: c });
            }
            softmax_into(&lv[i * c..(i + 1) * c], &mut probs[i * c..(i + 1) * c]);
            // -log p, clamped away from log(0) for pathological logits
            out[i] = -probs[i * c + label].max(1e-300).ln();
        }
        let rg = self.requires_grad(logits);
        self.push(
            Op::CrossEntropy { logits, labels: labels.to_vec() },
            vec![r],
            out,
            Aux::Probs(probs),
            rg,
            "cross_entropy",
        )
    }

    /// `min(x, cap)` with zero gradient where the input exceeds the cap.
    pub fn cap_clip(&mut self, a: NodeId, cap: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|&x| x.min(cap)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires_grad(a);
        self.push(Op::CapClip { a, cap }, shape, out, Aux::None, rg, "cap_clip")
    }

    /// `min(x, cap)` with the gradient rescaled by `cap/x` above the cap, so
    /// the update direction is kept while the contribution stays bounded.
    pub fn cap_rescale(&mut self, a: NodeId, cap: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|&x| x.min(cap)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires_grad(a);
        self.push(Op::CapRescale { a, cap }, shape, out, Aux::None, rg, "cap_rescale")
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Returns one gradient buffer per
    /// node that requires grad and participates in the loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(CoreError::ShapeMismatch {
                op: "backward",
                detail: "loss node must be scalar".into(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.accumulate(node, &dy, &mut grads);
            // leaves keep their gradient; interior grads are dropped after use
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
            }
        }
        Ok(Gradients { grads })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].values.len()]))
    }

    fn accumulate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.rc(*a);
                let n = self.rc(*b).1;
                if self.nodes[a.0].requires_grad {
                    let bv = &self.nodes[b.0].values;
                    let da = self.grad_buf(grads, *a).unwrap();
                    matmul_nt_acc(dy, bv, m, n, k, da);
                }
                if self.nodes[b.0].requires_grad {
                    let av = &self.nodes[a.0].values;
                    let db = self.grad_buf(grads, *b).unwrap();
                    matmul_tn_acc(av, dy, m, k, n, db);
                }
            }
            Op::Transpose { a } => {
                let (m, n) = self.rc(*a);
                if let Some(da) = self.grad_buf(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += dy[j * m + i];
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (g, &d) in da.iter_mut().zip(dy) {
                        *g += d;
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (g, &d) in da.iter_mut().zip(dy) {
                        *g += d;
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    for (g, &d) in db.iter_mut().zip(dy) {
                        *g += d;
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (g, &d) in da.iter_mut().zip(dy) {
                        *g += d;
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    for (g, &d) in db.iter_mut().zip(dy) {
                        *g -= d;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let bv = &self.nodes[b.0].values;
                    let da = self.grad_buf(grads, *a).unwrap();
                    for i in 0..dy.len() {
                        da[i] += dy[i] * bv[i];
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let av = &self.nodes[a.0].values;
                    let db = self.grad_buf(grads, *b).unwrap();
                    for i in 0..dy.len() {
                        db[i] += dy[i] * av[i];
                    }
                }
            }
            Op::AddRowVec { a, v } => {
                let (r, c) = self.rc(*a);
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (g, &d) in da.iter_mut().zip(dy) {
                        *g += d;
                    }
                }
                if let Some(dv) = self.grad_buf(grads, *v) {
                    for i in 0..r {
                        for j in 0..c {
                            dv[j] += dy[i * c + j];
                        }
                    }
                }
            }
            Op::MulRowVec { a, v } => {
                let (r, c) = self.rc(*a);
                if self.nodes[a.0].requires_grad {
                    let vv = &self.nodes[v.0].values;
                    let da = self.grad_buf(grads, *a).unwrap();
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += dy[i * c + j] * vv[j];
                        }
                    }
                }
                if self.nodes[v.0].requires_grad {
                    let av = &self.nodes[a.0].values;
                    let dv = self.grad_buf(grads, *v).unwrap();
                    for i in 0..r {
                        for j in 0..c {
                            dv[j] += dy[i * c + j] * av[i * c + j];
                        }
                    }
                }
            }
            Op::AddScalar { a } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (g, &d) in da.iter_mut().zip(dy) {
                        *g += d;
                    }
                }
            }
            Op::MulScalar { a, c } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (g, &d) in da.iter_mut().zip(dy) {
                        *g += c * d;
                    }
                }
            }
            Op::Gelu { a } => {
                if self.nodes[a.0].requires_grad {
                    let av = &self.nodes[a.0].values;
                    let da = self.grad_buf(grads, *a).unwrap();
                    for i in 0..dy.len() {
                        da[i] += dy[i] * gelu_derivative(av[i]);
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                let (r, c) = self.rc(*a);
                if let Some(da) = self.grad_buf(grads, *a) {
                    let p = &node.values;
                    for i in 0..r {
                        let row = i * c;
                        let dotv = dot(&dy[row..row + c], &p[row..row + c]);
                        for j in 0..c {
                            da[row + j] += p[row + j] * (dy[row + j] - dotv);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (r, c) = self.rc(*x);
                let Aux::LayerNorm { mean, inv_std } = &node.aux else { unreachable!() };
                let xv = &self.nodes[x.0].values;
                let gv = &self.nodes[gamma.0].values;
                if self.nodes[beta.0].requires_grad {
                    let db = self.grad_buf(grads, *beta).unwrap();
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += dy[i * c + j];
                        }
                    }
                }
                if self.nodes[gamma.0].requires_grad {
                    let dg = self.grad_buf(grads, *gamma).unwrap();
                    for i in 0..r {
                        for j in 0..c {
                            let xhat = (xv[i * c + j] - mean[i]) * inv_std[i];
                            dg[j] += dy[i * c + j] * xhat;
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let dx = self.grad_buf(grads, *x).unwrap();
                    for i in 0..r {
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for j in 0..c {
                            let g = dy[i * c + j] * gv[j];
                            let xhat = (xv[i * c + j] - mean[i]) * inv_std[i];
                            sum_g += g;
                            sum_gx += g * xhat;
                        }
                        let inv_c = 1.0 / c as f64;
                        for j in 0..c {
                            let g = dy[i * c + j] * gv[j];
                            let xhat = (xv[i * c + j] - mean[i]) * inv_std[i];
                            dx[i * c + j] += inv_std[i] * (g - inv_c * sum_g - xhat * inv_c * sum_gx);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.rc(*table).1;
                if let Some(dt) = self.grad_buf(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += dy[r * d + j];
                        }
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let (r, ca) = self.rc(*a);
                let cb = self.rc(*b).1;
                let c = ca + cb;
                if let Some(da) = self.grad_buf(grads, *a) {
                    for i in 0..r {
                        for j in 0..ca {
                            da[i * ca + j] += dy[i * c + j];
                        }
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    for i in 0..r {
                        for j in 0..cb {
                            db[i * cb + j] += dy[i * c + ca + j];
                        }
                    }
                }
            }
            Op::SelectRows { a, rows } => {
                let c = self.rc(*a).1;
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (i, &row) in rows.iter().enumerate() {
                        for j in 0..c {
                            da[row * c + j] += dy[i * c + j];
                        }
                    }
                }
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a.0].values.len() as f64;
                if let Some(da) = self.grad_buf(grads, *a) {
                    let d = dy[0] / n;
                    for g in da.iter_mut() {
                        *g += d;
                    }
                }
            }
            Op::SumAll { a } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    for g in da.iter_mut() {
                        *g += dy[0];
                    }
                }
            }
            Op::Attention { q, k, v, heads, batch, seq, lens, scale } => {
                let d = self.rc(*q).1;
                let dh = d / heads;
                let Aux::Probs(probs) = &node.aux else { unreachable!() };
                let qv = &self.nodes[q.0].values;
                let kv = &self.nodes[k.0].values;
                let vv = &self.nodes[v.0].values;
                let need_q = self.nodes[q.0].requires_grad;
                let need_k = self.nodes[k.0].requires_grad;
                let need_v = self.nodes[v.0].requires_grad;
                let mut dq = if need_q { vec![0.0; qv.len()] } else { Vec::new() };
                let mut dk = if need_k { vec![0.0; kv.len()] } else { Vec::new() };
                let mut dvv = if need_v { vec![0.0; vv.len()] } else { Vec::new() };
                let mut dp = vec![0.0; *seq];
                let mut ds = vec![0.0; *seq];
                for b in 0..*batch {
                    let len = lens[b];
                    for h in 0..*heads {
                        let col0 = h * dh;
                        for i in 0..*seq {
                            let orow = (b * seq + i) * d + col0;
                            let pbase = ((b * heads + h) * seq + i) * seq;
                            // dP = dO V^T ; dV += P^T dO
                            for j in 0..len {
                                let vrow = &vv[(b * seq + j) * d + col0..(b * seq + j) * d + col0 + dh];
                                dp[j] = dot(&dy[orow..orow + dh], vrow);
                                if need_v {
                                    let p = probs[pbase + j];
                                    let dv_row = &mut dvv[(b * seq + j) * d + col0..(b * seq + j) * d + col0 + dh];
                                    for t in 0..dh {
                                        dv_row[t] += p * dy[orow + t];
                                    }
                                }
                            }
                            if !(need_q || need_k) {
                                continue;
                            }
                            // softmax backward per query row
                            let mut dotv = 0.0;
                            for j in 0..len {
                                dotv += dp[j] * probs[pbase + j];
                            }
                            for j in 0..len {
                                ds[j] = probs[pbase + j] * (dp[j] - dotv);
                            }
                            // S = scale * Q K^T
                            for j in 0..len {
                                let s = scale * ds[j];
                                if need_q {
                                    let krow = &kv[(b * seq + j) * d + col0..(b * seq + j) * d + col0 + dh];
                                    let dq_row = &mut dq[(b * seq + i) * d + col0..(b * seq + i) * d + col0 + dh];
                                    for t in 0..dh {
                                        dq_row[t] += s * krow[t];
                                    }
                                }
                                if need_k {
                                    let qrow = &qv[(b * seq + i) * d + col0..(b * seq + i) * d + col0 + dh];
                                    let dk_row = &mut dk[(b * seq + j) * d + col0..(b * seq + j) * d + col0 + dh];
                                    for t in 0..dh {
                                        dk_row[t] += s * qrow[t];
                                    }
                                }
                            }
                        }
                    }
                }
                if need_q {
                    let gq = self.grad_buf(grads, *q).unwrap();
                    for (g, d) in gq.iter_mut().zip(dq) {
                        *g += d;
                    }
                }
                if need_k {
                    let gk = self.grad_buf(grads, *k).unwrap();
                    for (g, d) in gk.iter_mut().zip(dk) {
                        *g += d;
                    }
                }
                if need_v {
                    let gv = self.grad_buf(grads, *v).unwrap();
                    for (g, d) in gv.iter_mut().zip(dvv) {
                        *g += d;
                    }
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let (r, c) = self.rc(*logits);
                let Aux::Probs(probs) = &node.aux else { unreachable!() };
                if let Some(dl) = self.grad_buf(grads, *logits) {
                    for i in 0..r {
                        let di = dy[i];
                        for j in 0..c {
                            let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                            dl[i * c + j] += di * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::CapClip { a, cap } => {
                if self.nodes[a.0].requires_grad {
                    let av = &self.nodes[a.0].values;
                    let da = self.grad_buf(grads, *a).unwrap();
                    for i in 0..dy.len() {
                        if av[i] <= *cap {
                            da[i] += dy[i];
                        }
                    }
                }
            }
            Op::CapRescale { a, cap } => {
                if self.nodes[a.0].requires_grad {
                    let av = &self.nodes[a.0].values;
                    let da = self.grad_buf(grads, *a).unwrap();
                    for i in 0..dy.len() {
                        let f = if av[i] > *cap { cap / av[i] } else { 1.0 };
                        da[i] += f * dy[i];
                    }
                }
            }
        }
    }
}

// ── raw kernels ─────────────────────────────────────────────────────────

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// `C = A B`, shapes `(m,k) x (k,n)`, ikj loop order.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

/// `C += A B^T`, shapes `(m,n) x (k,n)^T -> (m,k)`.
fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            c[i * k + j] += dot(arow, &b[j * n..(j + 1) * n]);
        }
    }
}

/// `C += A^T B`, shapes `(m,k)^T x (m,n) -> (k,n)`.
fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    fn t(shape: Vec<usize>, v: Vec<f64>) -> Tensor {
        Tensor::new(shape, v).unwrap()
    }

    #[test]
    fn gelu_at_zero_and_derivative() {
        assert_eq!(gelu(0.0), 0.0);
        assert_eq!(gelu_derivative(0.0), 0.5);
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![1, 2], vec![0.0, 0.0]));
        let s = tape.softmax_rows(a).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.leaf(&t(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let a = tape.leaf(&t(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(c), tape.value(a));
    }

    #[test]
    fn layer_norm_hand_values() {
        let mut tape = Tape::new();
        // constant input: centered part is exactly zero, output is beta
        let x = tape.leaf(&t(vec![1, 3], vec![5.0, 5.0, 5.0]));
        let g = tape.leaf(&t(vec![3], vec![2.0, 2.0, 2.0]));
        let b = tape.leaf(&t(vec![3], vec![0.25, -1.0, 3.0]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        for (got, want) in tape.value(y).iter().zip([0.25, -1.0, 3.0]) {
            assert!((got - want).abs() < 1e-5);
        }

        // x=[2,4], gamma=3, beta=1: mean 3, std 1 -> [-2, 4]
        let x = tape.leaf(&t(vec![1, 2], vec![2.0, 4.0]));
        let g = tape.leaf(&t(vec![2], vec![3.0, 3.0]));
        let b = tape.leaf(&t(vec![2], vec![1.0, 1.0]));
        let y = tape.layer_norm(x, g, b, 1e-15).unwrap();
        assert!((tape.value(y)[0] + 2.0).abs() < 1e-6);
        assert!((tape.value(y)[1] - 4.0).abs() < 1e-6);

        // already zero-mean unit-variance passes through
        let x = tape.leaf(&t(vec![1, 2], vec![1.0, -1.0]));
        let g = tape.leaf(&t(vec![2], vec![1.0, 1.0]));
        let b = tape.leaf(&t(vec![2], vec![0.0, 0.0]));
        let y = tape.layer_norm(x, g, b, 1e-15).unwrap();
        assert!((tape.value(y)[0] - 1.0).abs() < 1e-7);
        assert!((tape.value(y)[1] + 1.0).abs() < 1e-7);
    }

    #[test]
    fn cross_entropy_hand_values() {
        let mut tape = Tape::new();
        let uniform4 = tape.leaf(&t(vec![1, 4], vec![0.0; 4]));
        let l4 = tape.cross_entropy(uniform4, &[1]).unwrap();
        assert!((tape.value(l4)[0] - 4.0f64.ln()).abs() < 1e-12);

        let two = tape.leaf(&t(vec![1, 2], vec![0.0, 0.0]));
        let l2 = tape.cross_entropy(two, &[0]).unwrap();
        assert!((tape.value(l2)[0] - 2.0f64.ln()).abs() < 1e-12);

        let peaked = tape.leaf(&t(vec![1, 2], vec![100.0, 0.0]));
        let l0 = tape.cross_entropy(peaked, &[0]).unwrap();
        assert!(tape.value(l0)[0] < 1e-12);

        let bad = tape.cross_entropy(two, &[5]);
        assert!(matches!(bad, Err(CoreError::LabelOutOfRange { .. })));
    }

    #[test]
    fn backward_square() {
        // f(x) = x^2 at x=3 -> gradient 6
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1], vec![3.0]).trainable());
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_cross_entropy_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(vec![1, 2], vec![0.0, 0.0]).trainable());
        let ce = tape.cross_entropy(logits, &[0]).unwrap();
        let loss = tape.mean_all(ce).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(logits).unwrap();
        assert!((g[0] + 0.5).abs() < 1e-12);
        assert!((g[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn backward_gelu_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1], vec![0.0]).trainable());
        let y = tape.gelu(x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.5]);
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        // f(x) = x*x + 3x -> f'(2) = 2*2 + 3 = 7
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1], vec![2.0]).trainable());
        let sq = tape.mul(x, x).unwrap();
        let three = tape.mul_scalar(x, 3.0).unwrap();
        let y = tape.add(sq, three).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[7.0]);
    }

    #[test]
    fn frozen_tensors_get_no_gradient() {
        let mut tape = Tape::new();
        let frozen = tape.leaf(&t(vec![1], vec![4.0]));
        let live = tape.leaf(&t(vec![1], vec![2.0]).trainable());
        let y = tape.mul(frozen, live).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(frozen).is_none());
        assert_eq!(grads.get(live).unwrap(), &[4.0]);
    }

    #[test]
    fn cap_clip_zeroes_gradient_above_cap() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1], vec![3.0]).trainable());
        let capped = tape.cap_clip(x, 1.0).unwrap();
        assert_eq!(tape.value(capped), &[1.0]);
        let loss = tape.sum_all(capped).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1], vec![0.5]).trainable());
        let capped = tape.cap_clip(x, 1.0).unwrap();
        assert_eq!(tape.value(capped), &[0.5]);
        let loss = tape.sum_all(capped).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0]);
    }

    #[test]
    fn cap_rescale_scales_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1], vec![4.0]).trainable());
        let capped = tape.cap_rescale(x, 1.0).unwrap();
        assert_eq!(tape.value(capped), &[1.0]);
        let loss = tape.sum_all(capped).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.25]);
    }

    #[test]
    fn attention_single_token_is_value_projection() {
        let mut tape = Tape::new();
        let q = tape.leaf(&t(vec![1, 4], vec![0.3, -1.0, 2.0, 0.7]));
        let k = tape.leaf(&t(vec![1, 4], vec![1.0, 1.0, -0.5, 0.0]));
        let v = tape.leaf(&t(vec![1, 4], vec![9.0, 8.0, 7.0, 6.0]));
        let o = tape.attention(q, k, v, 1, 1, 1, &[1]).unwrap();
        assert_eq!(tape.value(o), tape.value(v));
        assert_eq!(tape.attention_probs(o).unwrap(), &[1.0]);
    }

    #[test]
    fn attention_masks_padding_and_rows_sum_to_one() {
        let mut rng = seeded_rng(3, "attn");
        let d = 8;
        let seq = 5;
        let lens = [3usize];
        let mut tape = Tape::new();
        let q = tape.leaf(&Tensor::randn(vec![seq, d], 1.0, &mut rng));
        let k = tape.leaf(&Tensor::randn(vec![seq, d], 1.0, &mut rng));
        let v = tape.leaf(&Tensor::randn(vec![seq, d], 1.0, &mut rng));
        let o = tape.attention(q, k, v, 2, 1, seq, &lens).unwrap();
        let probs = tape.attention_probs(o).unwrap();
        for h in 0..2 {
            for i in 0..seq {
                let base = (h * seq + i) * seq;
                let sum: f64 = probs[base..base + seq].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
                for j in lens[0]..seq {
                    assert_eq!(probs[base + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn backward_before_any_loss_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], vec![1.0, 2.0]).trainable());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn embedding_scatter_gradient() {
        let mut tape = Tape::new();
        let table = tape.leaf(&t(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).trainable());
        let looked = tape.embedding(table, &[1, 1, 0]).unwrap();
        assert_eq!(tape.value(looked), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let loss = tape.sum_all(looked).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(table).unwrap(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_and_select_round_trip() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).trainable());
        let b = tape.leaf(&t(vec![2, 1], vec![5.0, 6.0]).trainable());
        let cat = tape.concat_cols(a, b).unwrap();
        assert_eq!(tape.value(cat), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let sel = tape.select_rows(cat, &[1]).unwrap();
        assert_eq!(tape.value(sel), &[3.0, 4.0, 6.0]);
        let loss = tape.sum_all(sel).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(grads.get(b).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = seeded_rng(11, "det");
        let x = Tensor::randn(vec![4, 6], 1.0, &mut rng);
        let w = Tensor::randn(vec![6, 3], 0.5, &mut rng);
        let run = |x: &Tensor, w: &Tensor| -> Vec<f64> {
            let mut tape = Tape::new();
            let xi = tape.leaf(x);
            let wi = tape.leaf(w);
            let h = tape.matmul(xi, wi).unwrap();
            let g = tape.gelu(h).unwrap();
            let s = tape.softmax_rows(g).unwrap();
            tape.value(s).to_vec()
        };
        assert_eq!(run(&x, &w), run(&x, &w));
    }

    #[test]
    fn nonfinite_values_are_rejected() {
        let mut tape = Tape::new();
        let big = tape.leaf(&t(vec![1], vec![1e308]));
        let r = tape.mul(big, big);
        assert!(matches!(r, Err(CoreError::NonFinite { .. })));
    }
}
