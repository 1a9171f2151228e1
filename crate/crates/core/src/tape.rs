//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and the inputs it
//! read. [`Tape::backward`] consumes the tape and walks the nodes in reverse
//! record order, so gradients are deterministic for a fixed sequence of calls.
//! Node values are stored flat and row-major; most operations treat their
//! input as a matrix whose row length is the last extent.

use crate::error::{Error, Result};
use crate::kernels::{dot, gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{lit, Scalar, Tensor};

const GELU_COEF: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    AddTiled {
        a: Var,
        b: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    SoftmaxRows {
        a: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        dim: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        a: Var,
    },
    L2NormalizeRows {
        a: Var,
        cols: usize,
        norms: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    GatherRows {
        a: Var,
        indices: Vec<usize>,
        cols: usize,
    },
    PrependRow {
        tokens: Var,
        row: Var,
        batch: usize,
        seq: usize,
        cols: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        scale: T,
        probs: Vec<T>,
    },
    MarginContrastive {
        sim: Var,
        labels: Vec<usize>,
        alpha: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Add the gradient of `var` into the tensor's grad buffer. Tensors without
    /// a grad buffer, or vars that received no gradient, are left untouched.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor<T>) -> Result<()> {
        let Some(g) = self.get(var) else { return Ok(()) };
        let numel = tensor.numel();
        let Some(buf) = tensor.grad_mut() else { return Ok(()) };
        if g.len() != numel {
            return Err(Error::shape("accumulate_into", &[g.len()], &[numel]));
        }
        for (b, &v) in buf.iter_mut().zip(g) {
            *b = *b + v;
        }
        Ok(())
    }
}

/// Borrowed view of an attention node's weights.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights<'a, T> {
    /// `[batch, heads, seq, seq]`, row-major.
    pub probs: &'a [T],
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

impl<'a, T> AttentionWeights<'a, T> {
    /// The `seq × seq` matrix of head `h` for sequence `b`.
    pub fn matrix(&self, b: usize, h: usize) -> &'a [T] {
        let n = self.seq * self.seq;
        let start = (b * self.heads + h) * n;
        &self.probs[start..start + n]
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap();
    (shape.iter().product::<usize>() / cols, cols)
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], var: Var, len: usize) -> &mut Vec<T> {
    grads[var.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    /// Record a leaf. It receives a gradient iff the tensor carries a grad buffer.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad(),
            Op::Leaf,
        )
    }

    /// Record a leaf that always receives a gradient.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), true, Op::Leaf)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are valid")
    }

    pub fn scalar_value(&self, v: Var) -> Result<T> {
        match self.node(v).value[..] {
            [x] => Ok(x),
            _ => Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.node(v).shape
            ))),
        }
    }

    /// Softmaxed attention weights recorded by [`Tape::attention`], laid out
    /// as `[batch, heads, seq, seq]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        self.attention_weights(v).map(|w| w.probs)
    }

    pub fn attention_weights(&self, v: Var) -> Option<AttentionWeights<'_, T>> {
        match &self.node(v).op {
            &Op::Attention {
                batch,
                seq,
                heads,
                ref probs,
                ..
            } => Some(AttentionWeights {
                probs,
                batch,
                seq,
                heads,
            }),
            _ => None,
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.node(v).shape[..] {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "transpose")?;
        let src = self.value(a);
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let rg = self.grad_flag(&[a]);
        Ok(self.push(vec![cols, rows], out, rg, Op::Transpose { a, rows, cols }))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((self.shape(a).to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * factor).collect();
        let rg = self.grad_flag(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Scale { a, factor })
    }

    /// `a + b` where `b` is repeated along `a`'s flat layout; `b`'s element
    /// count must divide `a`'s. Covers row biases (`b` of length D against
    /// `[rows, D]`) and per-image position tables.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        let tail_ok = self.shape(a).last() == self.shape(b).last();
        if nb == 0 || na % nb != 0 || !tail_ok {
            return Err(Error::shape("add_tiled", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b);
        let out = self
            .value(a)
            .chunks(nb)
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::AddTiled { a, b }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.grad_flag(&[a]);
        self.push(vec![1], vec![s], rg, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().copied().sum::<T>() / lit(v.len() as f64);
        let rg = self.grad_flag(&[a]);
        self.push(vec![1], vec![s], rg, Op::Mean { a })
    }

    /// Softmax over the last axis, stabilised by subtracting each row's max.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (_, cols) = rows_of(self.shape(a));
        let mut out = self.value(a).to_vec();
        out.chunks_mut(cols).for_each(softmax_in_place);
        let rg = self.grad_flag(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::SoftmaxRows { a, cols })
    }

    /// Layer normalization over the last axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, dim) = rows_of(self.shape(x));
        if self.shape(gain) != [dim] || self.shape(bias) != [dim] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let eps = lit::<T>(eps);
        let inv_d = lit::<T>(1.0 / dim as f64);
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let mut xhat = vec![T::zero(); rows * dim];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * dim];
        for r in 0..rows {
            let row = &xv[r * dim..(r + 1) * dim];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..dim {
                let h = (row[c] - mean) * rs;
                xhat[r * dim + c] = h;
                out[r * dim + c] = h * g[c] + b[c];
            }
        }
        let rg = self.grad_flag(&[x, gain, bias]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                dim,
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu_value(x)).collect();
        let rg = self.grad_flag(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Gelu { a })
    }

    /// Scale every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = rows_of(self.shape(a));
        let src = self.value(a);
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for (r, row) in src.chunks(cols).enumerate() {
            let norm = dot(row, row).sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(Error::Degenerate(format!(
                    "row {r} has norm {norm}; cannot l2-normalize"
                )));
            }
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let rg = self.grad_flag(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::L2NormalizeRows { a, cols, norms }))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Index {
                what: "label",
                index: bad,
                limit: c,
            });
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = T::zero();
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total = total + (lse - row[y]);
            softmax_in_place(row);
        }
        let loss = total / lit(b as f64);
        let rg = self.grad_flag(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Pick rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "gather_rows")?;
        if indices.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one index".into()));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::Index {
                    what: "row",
                    index: i,
                    limit: rows,
                });
            }
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.grad_flag(&[a]);
        Ok(self.push(
            vec![indices.len(), cols],
            out,
            rg,
            Op::GatherRows {
                a,
                indices: indices.to_vec(),
                cols,
            },
        ))
    }

    /// Insert `row` in front of each of the `batch` blocks of `tokens`,
    /// turning `[batch*seq, D]` into `[batch*(seq+1), D]`.
    pub fn prepend_row(&mut self, tokens: Var, row: Var, batch: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(tokens, "prepend_row")?;
        if self.value(row).len() != cols {
            return Err(Error::shape("prepend_row", self.shape(tokens), self.shape(row)));
        }
        if batch == 0 || rows % batch != 0 {
            return Err(Error::Contract(format!("{rows} rows do not split into {batch} blocks")));
        }
        let seq = rows / batch;
        let (tv, rv) = (self.value(tokens), self.value(row));
        let mut out = Vec::with_capacity((rows + batch) * cols);
        for b in 0..batch {
            out.extend_from_slice(rv);
            out.extend_from_slice(&tv[b * seq * cols..(b + 1) * seq * cols]);
        }
        let rg = self.grad_flag(&[tokens, row]);
        Ok(self.push(
            vec![rows + batch, cols],
            out,
            rg,
            Op::PrependRow {
                tokens,
                row,
                batch,
                seq,
                cols,
            },
        ))
    }

    /// Multi-head scaled dot-product attention over `batch` independent
    /// sequences. `q`, `k`, `v` are `[batch*seq, D]`; head `h` reads columns
    /// `h*D/heads .. (h+1)*D/heads`. Scores are scaled by `1/sqrt(D/heads)`.
    /// Output heads are concatenated back into `[batch*seq, D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (rows, dim) = self.dims2(q, "attention")?;
        for other in [k, v] {
            if self.shape(other) != self.shape(q) {
                return Err(Error::shape("attention", self.shape(q), self.shape(other)));
            }
        }
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} is not divisible by {heads} heads")));
        }
        if batch == 0 || rows % batch != 0 {
            return Err(Error::Contract(format!(
                "{rows} rows do not split into {batch} sequences"
            )));
        }
        let seq = rows / batch;
        let dh = dim / heads;
        let scale = lit::<T>(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * dim];
        for b in 0..batch {
            for h in 0..heads {
                let at = |r: usize| (b * seq + r) * dim + h * dh;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qv[at(i)..at(i) + dh];
                    let prow = &mut probs[pbase + i * seq..pbase + (i + 1) * seq];
                    for (j, p) in prow.iter_mut().enumerate() {
                        *p = dot(qi, &kv[at(j)..at(j) + dh]) * scale;
                    }
                    softmax_in_place(prow);
                    let oi = &mut out[at(i)..at(i) + dh];
                    for (j, &p) in prow.iter().enumerate() {
                        for (o, &x) in oi.iter_mut().zip(&vv[at(j)..at(j) + dh]) {
                            *o = *o + p * x;
                        }
                    }
                }
            }
        }
        let rg = self.grad_flag(&[q, k, v]);
        Ok(self.push(
            vec![rows, dim],
            out,
            rg,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                scale,
                probs,
            },
        ))
    }

    /// Margin contrastive objective on a `[B, B]` cosine-similarity matrix:
    /// `(1/B²) Σ_ij [same(i,j)·(1 − S_ij) + diff(i,j)·max(S_ij − alpha, 0)]`.
    /// The hinge is inactive (zero subgradient) at `S_ij == alpha`.
    pub fn margin_contrastive(&mut self, sim: Var, labels: &[usize], alpha: f64) -> Result<Var> {
        let (r, c) = self.dims2(sim, "margin_contrastive")?;
        if r != c || labels.len() != r {
            return Err(Error::shape("margin_contrastive", self.shape(sim), &[labels.len()]));
        }
        let alpha = lit::<T>(alpha);
        let s = self.value(sim);
        let mut total = T::zero();
        for i in 0..r {
            for j in 0..r {
                let v = s[i * r + j];
                total = total
                    + if labels[i] == labels[j] {
                        T::one() - v
                    } else {
                        (v - alpha).max(T::zero())
                    };
            }
        }
        let loss = total / lit((r * r) as f64);
        let rg = self.grad_flag(&[sim]);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::MarginContrastive {
                sim,
                labels: labels.to_vec(),
                alpha,
            },
        ))
    }

    /// Consume the tape and propagate d`loss` back to every node that requires
    /// a gradient.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let ln = self.nodes.get(loss.0).ok_or(Error::Index {
            what: "tape node",
            index: loss.0,
            limit: self.nodes.len(),
        })?;
        if ln.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let needs = |v: Var| nodes[v.0].requires_grad;
            let len = |v: Var| nodes[v.0].value.len();
            let val = |v: Var| nodes[v.0].value.as_slice();

            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                &Op::MatMul { a, b, m, k, n } => {
                    if needs(a) {
                        gemm_nt(&g, val(b), slot(&mut grads, a, m * k), m, n, k);
                    }
                    if needs(b) {
                        gemm_tn(val(a), &g, slot(&mut grads, b, k * n), k, m, n);
                    }
                }
                &Op::Transpose { a, rows, cols } => {
                    let da = slot(&mut grads, a, rows * cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            da[i * cols + j] = da[i * cols + j] + g[j * rows + i];
                        }
                    }
                }
                &Op::Add { a, b } | &Op::Sub { a, b } => {
                    let sign = if matches!(node.op, Op::Sub { .. }) {
                        -T::one()
                    } else {
                        T::one()
                    };
                    if needs(a) {
                        add_into(slot(&mut grads, a, g.len()), &g, T::one());
                    }
                    if needs(b) {
                        add_into(slot(&mut grads, b, g.len()), &g, sign);
                    }
                }
                &Op::Mul { a, b } => {
                    if needs(a) {
                        let bv = val(b);
                        let da = slot(&mut grads, a, g.len());
                        for i in 0..g.len() {
                            da[i] = da[i] + g[i] * bv[i];
                        }
                    }
                    if needs(b) {
                        let av = val(a);
                        let db = slot(&mut grads, b, g.len());
                        for i in 0..g.len() {
                            db[i] = db[i] + g[i] * av[i];
                        }
                    }
                }
                &Op::Scale { a, factor } => {
                    add_into(slot(&mut grads, a, g.len()), &g, factor);
                }
                &Op::AddTiled { a, b } => {
                    if needs(a) {
                        add_into(slot(&mut grads, a, g.len()), &g, T::one());
                    }
                    if needs(b) {
                        let nb = len(b);
                        let db = slot(&mut grads, b, nb);
                        for chunk in g.chunks(nb) {
                            add_into(db, chunk, T::one());
                        }
                    }
                }
                &Op::Sum { a } => {
                    let da = slot(&mut grads, a, len(a));
                    da.iter_mut().for_each(|d| *d = *d + g[0]);
                }
                &Op::Mean { a } => {
                    let n = len(a);
                    let share = g[0] / lit(n as f64);
                    let da = slot(&mut grads, a, n);
                    da.iter_mut().for_each(|d| *d = *d + share);
                }
                &Op::SoftmaxRows { a, cols } => {
                    let y = &node.value;
                    let da = slot(&mut grads, a, y.len());
                    for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(da.chunks_mut(cols)) {
                        let inner = dot(yr, gr);
                        for c in 0..cols {
                            dr[c] = dr[c] + yr[c] * (gr[c] - inner);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    dim,
                    xhat,
                    rstd,
                } => {
                    let (x, gain, bias, dim) = (*x, *gain, *bias, *dim);
                    let gv = val(gain);
                    if needs(gain) {
                        let dg = slot(&mut grads, gain, dim);
                        for (gr, hr) in g.chunks(dim).zip(xhat.chunks(dim)) {
                            for c in 0..dim {
                                dg[c] = dg[c] + gr[c] * hr[c];
                            }
                        }
                    }
                    if needs(bias) {
                        let db = slot(&mut grads, bias, dim);
                        for gr in g.chunks(dim) {
                            add_into(db, gr, T::one());
                        }
                    }
                    if needs(x) {
                        let inv_d = lit::<T>(1.0 / dim as f64);
                        let dx = slot(&mut grads, x, g.len());
                        let mut dh = vec![T::zero(); dim];
                        for (r, &rs) in rstd.iter().enumerate() {
                            let gr = &g[r * dim..(r + 1) * dim];
                            let hr = &xhat[r * dim..(r + 1) * dim];
                            for c in 0..dim {
                                dh[c] = gr[c] * gv[c];
                            }
                            let mean_dh = dh.iter().copied().sum::<T>() * inv_d;
                            let mean_dhh = dot(&dh, hr) * inv_d;
                            let dr = &mut dx[r * dim..(r + 1) * dim];
                            for c in 0..dim {
                                dr[c] = dr[c] + rs * (dh[c] - mean_dh - hr[c] * mean_dhh);
                            }
                        }
                    }
                }
                &Op::Gelu { a } => {
                    let av = val(a);
                    let da = slot(&mut grads, a, g.len());
                    for i in 0..g.len() {
                        da[i] = da[i] + g[i] * gelu_derivative(av[i]);
                    }
                }
                Op::L2NormalizeRows { a, cols, norms } => {
                    let (a, cols) = (*a, *cols);
                    let y = &node.value;
                    let da = slot(&mut grads, a, y.len());
                    for (r, &norm) in norms.iter().enumerate() {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let proj = dot(yr, gr);
                        let dr = &mut da[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dr[c] = dr[c] + (gr[c] - yr[c] * proj) / norm;
                        }
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let b = labels.len();
                    let c = probs.len() / b;
                    let share = g[0] / lit(b as f64);
                    let dl = slot(&mut grads, *logits, probs.len());
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { T::one() } else { T::zero() };
                            dl[r * c + j] = dl[r * c + j] + share * (probs[r * c + j] - onehot);
                        }
                    }
                }
                Op::GatherRows { a, indices, cols } => {
                    let (a, cols) = (*a, *cols);
                    let da = slot(&mut grads, a, len(a));
                    for (o, &i) in indices.iter().enumerate() {
                        add_into(
                            &mut da[i * cols..(i + 1) * cols],
                            &g[o * cols..(o + 1) * cols],
                            T::one(),
                        );
                    }
                }
                &Op::PrependRow {
                    tokens,
                    row,
                    batch,
                    seq,
                    cols,
                } => {
                    let block = (seq + 1) * cols;
                    if needs(row) {
                        let dr = slot(&mut grads, row, cols);
                        for b in 0..batch {
                            add_into(dr, &g[b * block..b * block + cols], T::one());
                        }
                    }
                    if needs(tokens) {
                        let dt = slot(&mut grads, tokens, batch * seq * cols);
                        for b in 0..batch {
                            add_into(
                                &mut dt[b * seq * cols..(b + 1) * seq * cols],
                                &g[b * block + cols..(b + 1) * block],
                                T::one(),
                            );
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    batch,
                    seq,
                    heads,
                    scale,
                    probs,
                } => {
                    let (q, k, v) = (*q, *k, *v);
                    let (batch, seq, heads, scale) = (*batch, *seq, *heads, *scale);
                    let dim = node.shape[1];
                    let dh = dim / heads;
                    let n = batch * seq * dim;
                    let mut dq = vec![T::zero(); n];
                    let mut dk = vec![T::zero(); n];
                    let mut dv = vec![T::zero(); n];
                    let (qv, kv, vv) = (val(q), val(k), val(v));
                    let mut ds = vec![T::zero(); seq];
                    for b in 0..batch {
                        for h in 0..heads {
                            let at = |r: usize| (b * seq + r) * dim + h * dh;
                            let pbase = (b * heads + h) * seq * seq;
                            for i in 0..seq {
                                let p = &probs[pbase + i * seq..pbase + (i + 1) * seq];
                                let go = &g[at(i)..at(i) + dh];
                                for j in 0..seq {
                                    ds[j] = dot(go, &vv[at(j)..at(j) + dh]);
                                    let dvj = &mut dv[at(j)..at(j) + dh];
                                    for (d, &x) in dvj.iter_mut().zip(go) {
                                        *d = *d + p[j] * x;
                                    }
                                }
                                let inner = dot(p, &ds);
                                for j in 0..seq {
                                    ds[j] = p[j] * (ds[j] - inner) * scale;
                                }
                                for j in 0..seq {
                                    let s = ds[j];
                                    if s == T::zero() {
                                        continue;
                                    }
                                    for c in 0..dh {
                                        dq[at(i) + c] = dq[at(i) + c] + s * kv[at(j) + c];
                                        dk[at(j) + c] = dk[at(j) + c] + s * qv[at(i) + c];
                                    }
                                }
                            }
                        }
                    }
                    for (var, d) in [(q, dq), (k, dk), (v, dv)] {
                        if needs(var) {
                            add_into(slot(&mut grads, var, n), &d, T::one());
                        }
                    }
                }
                Op::MarginContrastive { sim, labels, alpha } => {
                    let r = labels.len();
                    let share = g[0] / lit((r * r) as f64);
                    let sv = val(*sim);
                    let ds = slot(&mut grads, *sim, r * r);
                    for i in 0..r {
                        for j in 0..r {
                            let d = if labels[i] == labels[j] {
                                -share
                            } else if sv[i * r + j] > *alpha {
                                share
                            } else {
                                continue;
                            };
                            ds[i * r + j] = ds[i * r + j] + d;
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T], factor: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + factor * s;
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn gelu_value<T: Scalar>(x: T) -> T {
    let u = lit::<T>(GELU_SCALE) * (x + lit::<T>(GELU_COEF) * x * x * x);
    lit::<T>(0.5) * x * (T::one() + u.tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = lit::<T>(GELU_SCALE);
    let a = lit::<T>(GELU_COEF);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = lit::<T>(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + lit::<T>(3.0) * a * x * x)
}
