//! Define-by-run tape. Every op appends one node whose inputs already exist,
//! so node order is a topological order and backward is a single reverse sweep.

use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on the active [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var, n: usize },
    Mul { a: Var, b: Var },
    MulRow { a: Var, row: Var, n: usize },
    Scale { a: Var, s: f64 },
    Relu { a: Var },
    Sigmoid { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, n: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    SoftmaxCe { logits: Var, labels: Vec<usize>, c: usize, probs: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize>, d: usize },
    SelectRows { a: Var, rows: Vec<usize>, n: usize },
    Mean { a: Var },
    Sum { a: Var },
    Attention(Box<AttentionSaved>),
}

#[derive(Debug, Clone)]
struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    seq: usize,
    heads: usize,
    d: usize,
    probs: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// One forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

fn check_2d(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::dim(op, format!("expected a matrix, got shape {shape:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are valid")
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn constant_vec(&mut self, data: Vec<f64>) -> Var {
        let n = data.len();
        self.push(vec![n], data, false, Op::Leaf)
    }

    /// Differentiable leaf that is not tied to a parameter store (tests, probes).
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    /// Leaf mirroring a stored parameter. Gradients flow back into the store
    /// only when the parameter's `requires_grad` flag is set.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.tensor(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf);
        if t.requires_grad() {
            self.params.push((id, v));
        }
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_2d("matmul", self.shape(a))?;
        let (k2, n) = check_2d("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("lhs {:?} and rhs {:?} disagree on the inner extent", [m, k], [k2, n]),
            ));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &x) in av[i * k..(i + 1) * k].iter().enumerate() {
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, m, k, n }))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_2d("matmul_nt", self.shape(a))?;
        let (n, k2) = check_2d("matmul_nt", self.shape(b))?;
        if k != k2 {
            return Err(Error::dim(
                "matmul_nt",
                format!("lhs {:?} and transposed rhs {:?} disagree", [m, k], [n, k2]),
            ));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(arow, &bv[j * k..(j + 1) * k]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMulNt { a, b, m, k, n }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add { a, b }))
    }

    fn row_extent(&self, op: &'static str, a: Var, row: Var) -> Result<usize> {
        let n = *self.shape(a).last().expect("non-empty shape");
        if self.shape(row) != [n] {
            return Err(Error::dim(
                op,
                format!("row vector {:?} does not match trailing extent of {:?}", self.shape(row), self.shape(a)),
            ));
        }
        Ok(n)
    }

    /// Adds a length-`n` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.row_extent("add_row", a, row)?;
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::AddRow { a, row, n }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Mul { a, b }))
    }

    /// Multiplies every row of `a` elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.row_extent("mul_row", a, row)?;
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x * y))
            .collect();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::MulRow { a, row, n }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, rg, Op::Scale { a, s })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, rg, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, rg, Op::Sigmoid { a })
    }

    /// Normalises each row over the last axis, then applies `gamma`/`beta`.
    /// A row whose entries are all equal normalises to exactly zero.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.row_extent("layer_norm", x, gamma)?;
        self.row_extent("layer_norm", x, beta)?;
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let first = row[0];
            let constant = row.iter().all(|&v| v == first);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = if constant { 0.0 } else { (row[j] - mean) * is };
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::LayerNorm { x, gamma, beta, n, xhat, inv_std },
        ))
    }

    /// Mean categorical cross-entropy of `logits: [batch, classes]` against
    /// integer labels. Returns a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, c) = check_2d("softmax_cross_entropy", self.shape(logits))?;
        if labels.len() != m {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} labels for {m} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index { op: "softmax_cross_entropy", index: bad, extent: c });
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; m * c];
        let mut loss = 0.0;
        for i in 0..m {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &x) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            probs[i * c..(i + 1) * c].iter_mut().for_each(|p| *p /= z);
            loss += z.ln() + max - row[labels[i]];
        }
        loss /= m as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::SoftmaxCe { logits, labels: labels.to_vec(), c, probs },
        ))
    }

    /// Softmax probabilities saved by a cross-entropy node.
    pub fn ce_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::SoftmaxCe { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Gathers rows of `table: [vocab, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = check_2d("embedding", self.shape(table))?;
        if ids.is_empty() {
            return Err(Error::dim("embedding", "no indices"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index { op: "embedding", index: bad, extent: vocab });
        }
        let tv = self.value(table);
        let out = ids.iter().flat_map(|&i| tv[i * d..(i + 1) * d].iter().copied()).collect();
        let rg = self.rg(table);
        Ok(self.push(vec![ids.len(), d], out, rg, Op::Embedding { table, ids: ids.to_vec(), d }))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = check_2d("select_rows", self.shape(a))?;
        if rows.is_empty() {
            return Err(Error::dim("select_rows", "no rows selected"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Index { op: "select_rows", index: bad, extent: m });
        }
        let av = self.value(a);
        let out = rows.iter().flat_map(|&r| av[r * n..(r + 1) * n].iter().copied()).collect();
        let rg = self.rg(a);
        Ok(self.push(vec![rows.len(), n], out, rg, Op::SelectRows { a, rows: rows.to_vec(), n }))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![out], rg, Op::Mean { a })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().sum::<f64>();
        let rg = self.rg(a);
        self.push(vec![1], vec![out], rg, Op::Sum { a })
    }

    /// Multi-head scaled dot-product self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[batch * seq, d]`; `key_valid[b * seq + j]` marks
    /// whether position `j` of sequence `b` may be attended to. Every
    /// sequence needs at least one valid key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        key_valid: &[bool],
    ) -> Result<Var> {
        let (rows, d) = check_2d("attention", self.shape(q))?;
        if self.shape(k) != [rows, d] || self.shape(v) != [rows, d] {
            return Err(Error::dim("attention", "q, k and v shapes differ"));
        }
        if rows != batch * seq || key_valid.len() != rows {
            return Err(Error::dim(
                "attention",
                format!("{rows} rows for batch {batch} x seq {seq}, {} validity flags", key_valid.len()),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim("attention", format!("d {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            if !key_valid[b * seq..(b + 1) * seq].iter().any(|&x| x) {
                return Err(Error::contract(format!("sequence {b} has no valid keys")));
            }
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq {
                        if key_valid[b * seq + j] {
                            let kj = &kv[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                            scores[j] = dot(qi, kj) * scale;
                            max = max.max(scores[j]);
                        }
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..((b * heads + h) * seq + i + 1) * seq];
                    let mut z = 0.0;
                    for j in 0..seq {
                        if key_valid[b * seq + j] {
                            p[j] = (scores[j] - max).exp();
                            z += p[j];
                        }
                    }
                    p.iter_mut().for_each(|x| *x /= z);
                    let o = &mut out[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                    for j in 0..seq {
                        if p[j] != 0.0 {
                            let vj = &vv[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                            for (oe, &ve) in o.iter_mut().zip(vj) {
                                *oe += p[j] * ve;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            vec![rows, d],
            out,
            rg,
            Op::Attention(Box::new(AttentionSaved { q, k, v, batch, seq, heads, d, probs })),
        ))
    }

    /// Attention probabilities `[batch, heads, seq, seq]` saved by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention(s) => Some(&s.probs),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `loss`. Returns per-node gradients; use
    /// [`Graph::backward`] to also accumulate them into a parameter store.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != [1] {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    /// Backpropagates `loss` and adds the gradient of every trainable
    /// parameter leaf into the store's gradient slots. Trainable parameters
    /// that the loss does not reach receive an explicit zero gradient.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for &(id, var) in &self.params {
            let t = store.tensor_mut(id);
            match grads.get(var) {
                Some(g) => t.accumulate_grad(g),
                None => t.accumulate_grad(&vec![0.0; t.numel()]),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let ga = slot(grads, *a, m * k);
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] += dot(grow, &bv[p * n..(p + 1) * n]);
                        }
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let gb = slot(grads, *b, k * n);
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            for (g, &y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *g += x * y;
                            }
                        }
                    }
                }
            }
            Op::MatMulNt { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let ga = slot(grads, *a, m * k);
                    for i in 0..m {
                        for j in 0..n {
                            let g = gout[i * n + j];
                            for (x, &y) in ga[i * k..(i + 1) * k].iter_mut().zip(&bv[j * k..(j + 1) * k]) {
                                *x += g * y;
                            }
                        }
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let gb = slot(grads, *b, n * k);
                    for i in 0..m {
                        for j in 0..n {
                            let g = gout[i * n + j];
                            for (x, &y) in gb[j * k..(j + 1) * k].iter_mut().zip(&av[i * k..(i + 1) * k]) {
                                *x += g * y;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        slot(grads, v, gout.len()).iter_mut().zip(gout).for_each(|(x, g)| *x += g);
                    }
                }
            }
            Op::AddRow { a, row, n } => {
                if self.rg(*a) {
                    slot(grads, *a, gout.len()).iter_mut().zip(gout).for_each(|(x, g)| *x += g);
                }
                if self.rg(*row) {
                    let gr = slot(grads, *row, *n);
                    for chunk in gout.chunks(*n) {
                        gr.iter_mut().zip(chunk).for_each(|(x, g)| *x += g);
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let bv = self.value(*b);
                    slot(grads, *a, gout.len())
                        .iter_mut()
                        .zip(gout.iter().zip(bv))
                        .for_each(|(x, (g, y))| *x += g * y);
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    slot(grads, *b, gout.len())
                        .iter_mut()
                        .zip(gout.iter().zip(av))
                        .for_each(|(x, (g, y))| *x += g * y);
                }
            }
            Op::MulRow { a, row, n } => {
                let n = *n;
                if self.rg(*a) {
                    let r = self.value(*row);
                    let ga = slot(grads, *a, gout.len());
                    for (gchunk, ochunk) in ga.chunks_mut(n).zip(gout.chunks(n)) {
                        for j in 0..n {
                            gchunk[j] += ochunk[j] * r[j];
                        }
                    }
                }
                if self.rg(*row) {
                    let av = self.value(*a);
                    let gr = slot(grads, *row, n);
                    for (achunk, ochunk) in av.chunks(n).zip(gout.chunks(n)) {
                        for j in 0..n {
                            gr[j] += ochunk[j] * achunk[j];
                        }
                    }
                }
            }
            Op::Scale { a, s } => {
                if self.rg(*a) {
                    slot(grads, *a, gout.len()).iter_mut().zip(gout).for_each(|(x, g)| *x += g * s);
                }
            }
            Op::Relu { a } => {
                if self.rg(*a) {
                    let av = self.value(*a);
                    slot(grads, *a, gout.len())
                        .iter_mut()
                        .zip(gout.iter().zip(av))
                        .for_each(|(x, (g, &y))| {
                            if y > 0.0 {
                                *x += g
                            }
                        });
                }
            }
            Op::Sigmoid { a } => {
                if self.rg(*a) {
                    let yv = &node.value;
                    slot(grads, *a, gout.len())
                        .iter_mut()
                        .zip(gout.iter().zip(yv))
                        .for_each(|(x, (g, y))| *x += g * y * (1.0 - y));
                }
            }
            Op::LayerNorm { x, gamma, beta, n, xhat, inv_std } => {
                let n = *n;
                let rows = xhat.len() / n;
                if self.rg(*gamma) {
                    let gg = slot(grads, *gamma, n);
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += gout[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if self.rg(*beta) {
                    let gb = slot(grads, *beta, n);
                    for chunk in gout.chunks(n) {
                        gb.iter_mut().zip(chunk).for_each(|(x, g)| *x += g);
                    }
                }
                if self.rg(*x) {
                    let gamma_v = self.value(*gamma);
                    let gx = slot(grads, *x, rows * n);
                    let mut dxhat = vec![0.0; n];
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            dxhat[j] = gout[r * n + j] * gamma_v[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat[r * n + j];
                        }
                        let coef = inv_std[r] / n as f64;
                        for j in 0..n {
                            gx[r * n + j] += coef * (n as f64 * dxhat[j] - s1 - xhat[r * n + j] * s2);
                        }
                    }
                }
            }
            Op::SoftmaxCe { logits, labels, c, probs } => {
                if self.rg(*logits) {
                    let c = *c;
                    let m = labels.len();
                    let scale = gout[0] / m as f64;
                    let gl = slot(grads, *logits, m * c);
                    for i in 0..m {
                        for j in 0..c {
                            let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                            gl[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids, d } => {
                if self.rg(*table) {
                    let d = *d;
                    let gt = slot(grads, *table, len(*table));
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += gout[r * d + j];
                        }
                    }
                }
            }
            Op::SelectRows { a, rows, n } => {
                if self.rg(*a) {
                    let n = *n;
                    let ga = slot(grads, *a, len(*a));
                    for (r, &src) in rows.iter().enumerate() {
                        for j in 0..n {
                            ga[src * n + j] += gout[r * n + j];
                        }
                    }
                }
            }
            Op::Mean { a } => {
                if self.rg(*a) {
                    let n = len(*a);
                    let g = gout[0] / n as f64;
                    slot(grads, *a, n).iter_mut().for_each(|x| *x += g);
                }
            }
            Op::Sum { a } => {
                if self.rg(*a) {
                    let n = len(*a);
                    slot(grads, *a, n).iter_mut().for_each(|x| *x += gout[0]);
                }
            }
            Op::Attention(s) => self.backprop_attention(s, gout, grads),
        }
    }

    fn backprop_attention(&self, s: &AttentionSaved, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let AttentionSaved { q, k, v, batch, seq, heads, d, ref probs } = *s;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let rows = batch * seq;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut gq = vec![0.0; rows * d];
        let mut gk = vec![0.0; rows * d];
        let mut gv = vec![0.0; rows * d];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let p = &probs[((b * heads + h) * seq + i) * seq..((b * heads + h) * seq + i + 1) * seq];
                    let go = &gout[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                    let mut weighted = 0.0;
                    for j in 0..seq {
                        if p[j] != 0.0 {
                            let vj = &vv[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                            dp[j] = dot(go, vj);
                            weighted += p[j] * dp[j];
                            let gvj = &mut gv[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                            for (x, &g) in gvj.iter_mut().zip(go) {
                                *x += p[j] * g;
                            }
                        }
                    }
                    for j in 0..seq {
                        if p[j] != 0.0 {
                            let ds = p[j] * (dp[j] - weighted) * scale;
                            let (qrow, krow) = ((b * seq + i) * d + off, (b * seq + j) * d + off);
                            for e in 0..dh {
                                gq[qrow + e] += ds * kv[krow + e];
                                gk[krow + e] += ds * qv[qrow + e];
                            }
                        }
                    }
                }
            }
        }
        for (var, g) in [(q, gq), (k, gk), (v, gv)] {
            if self.rg(var) {
                slot(grads, var, rows * d).iter_mut().zip(&g).for_each(|(x, y)| *x += y);
            }
        }
    }
}

/// Per-node gradients produced by [`Graph::gradients`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logistic function. Saturates to exactly 0 or 1 without overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
