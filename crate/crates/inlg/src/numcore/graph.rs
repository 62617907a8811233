//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Graph`] is built eagerly: each builder call computes the node value
//! immediately and appends the operation, so insertion order is a valid
//! topological order. `backward` replays the list in reverse, accumulating
//! vector-Jacobian products into per-node gradient slots and finally maps
//! parameter gradients back to named f32 tensors.
//!
//! Node values are at most two-dimensional (rows x cols); vectors are rows
//! of height one and scalars are 1x1. Compute is f64 so that analytic
//! gradients survive comparison against central finite differences at tight
//! tolerances; parameters and results stay f32 at the boundary.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

pub type NodeId = usize;

/// Which rows of an InfoNCE denominator to sum over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfoNceMode {
    /// Denominator over all j, positive pair included.
    Standard,
    /// Denominator over j != i, as printed in the loss definition.
    ExcludePositive,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// (m,k) @ (k,n)
    Matmul { a: NodeId, b: NodeId },
    /// (m,k) @ (n,k)^T -> (m,n)
    MatmulBt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// (m,n) + broadcast (1,n)
    AddRow { a: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    /// Elementwise sum of same-shape nodes.
    AddN { parts: Vec<NodeId> },
    SumAll { a: NodeId },
    Gelu { a: NodeId },
    Tanh { a: NodeId },
    SoftmaxRows { a: NodeId },
    LayerNorm { a: NodeId, gain: NodeId, bias: NodeId },
    /// Gather rows of `table` at fixed indices.
    Embedding { table: NodeId, ids: Vec<usize> },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    /// Mean of the selected rows -> (1, n).
    MeanRows { a: NodeId, rows: Vec<usize> },
    /// Sum over rows with a target of -log softmax(row)[target].
    CrossEntropySum {
        logits: NodeId,
        targets: Vec<Option<usize>>,
    },
    RowL2Normalize { a: NodeId },
    /// Scalar InfoNCE from an already temperature-scaled similarity matrix.
    InfoNce { sim: NodeId, mode: InfoNceMode },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
}

struct ParamLeaf {
    name: String,
    node: NodeId,
    shape: Vec<usize>,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<ParamLeaf>,
}

// ── dense kernels ────────────────────────────────────────────────────

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// (m,k) @ (n,k)^T -> (m,n)
fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// (m,k)^T @ (m,n) -> (k,n)
fn matmul_tn(a: &[f64], c: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * crow[j];
            }
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

/// Stable log-sum-exp of a slice.
fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
        });
        self.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn rows(&self, id: NodeId) -> usize {
        self.nodes[id].rows
    }

    pub fn cols(&self, id: NodeId) -> usize {
        self.nodes[id].cols
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    /// Scalar node value.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        assert_eq!(self.nodes[id].value.len(), 1, "node {id} is not scalar");
        self.nodes[id].value[0]
    }

    fn leaf_from_tensor(&mut self, t: &Tensor) -> NodeId {
        let (rows, cols) = match t.shape() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => panic!("graph leaves must be rank 1 or 2, got {s:?}"),
        };
        self.push(Op::Leaf, rows, cols, t.to_f64())
    }

    /// Register a named trainable parameter; its gradient is reported by
    /// `backward` keyed by this name (zeros if the loss never reaches it).
    pub fn param(&mut self, name: &str, t: &Tensor) -> NodeId {
        let node = self.leaf_from_tensor(t);
        self.params.push(ParamLeaf {
            name: name.to_string(),
            node,
            shape: t.shape().to_vec(),
        });
        node
    }

    /// Constant input; no gradient reported.
    pub fn input(&mut self, t: &Tensor) -> NodeId {
        self.leaf_from_tensor(t)
    }

    pub fn input_rows(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        assert_eq!(value.len(), rows * cols);
        self.push(Op::Leaf, rows, cols, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = (self.rows(a), self.cols(a));
        let (k2, n) = (self.rows(b), self.cols(b));
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let v = matmul(&self.nodes[a].value, &self.nodes[b].value, m, k, n);
        self.push(Op::Matmul { a, b }, m, n, v)
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = (self.rows(a), self.cols(a));
        let (n, k2) = (self.rows(b), self.cols(b));
        assert_eq!(k, k2, "matmul_bt inner dims {k} vs {k2}");
        let v = matmul_bt(&self.nodes[a].value, &self.nodes[b].value, m, k, n);
        self.push(Op::MatmulBt { a, b }, m, n, v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            (self.rows(a), self.cols(a)),
            (self.rows(b), self.cols(b)),
            "add shape mismatch"
        );
        let v = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add { a, b }, self.rows(a), self.cols(a), v)
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (m, n) = (self.rows(a), self.cols(a));
        assert_eq!((self.rows(bias), self.cols(bias)), (1, n), "bias shape");
        let bv = self.nodes[bias].value.clone();
        let v = self.nodes[a]
            .value
            .iter()
            .enumerate()
            .map(|(idx, x)| x + bv[idx % n])
            .collect();
        self.push(Op::AddRow { a, bias }, m, n, v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            (self.rows(a), self.cols(a)),
            (self.rows(b), self.cols(b)),
            "mul shape mismatch"
        );
        let v = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x * y)
            .collect();
        self.push(Op::Mul { a, b }, self.rows(a), self.cols(a), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.iter().map(|x| x * c).collect();
        self.push(Op::Scale { a, c }, self.rows(a), self.cols(a), v)
    }

    pub fn add_n(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let (m, n) = (self.rows(parts[0]), self.cols(parts[0]));
        let mut v = vec![0.0; m * n];
        for &p in parts {
            assert_eq!((self.rows(p), self.cols(p)), (m, n), "add_n shape mismatch");
            for (o, x) in v.iter_mut().zip(&self.nodes[p].value) {
                *o += x;
            }
        }
        self.push(
            Op::AddN {
                parts: parts.to_vec(),
            },
            m,
            n,
            v,
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.iter().sum();
        self.push(Op::SumAll { a }, 1, 1, vec![s])
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.iter().map(|&x| gelu(x)).collect();
        self.push(Op::Gelu { a }, self.rows(a), self.cols(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh { a }, self.rows(a), self.cols(a), v)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = (self.rows(a), self.cols(a));
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.nodes[a].value[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                v[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                v[i * n + j] /= z;
            }
        }
        self.push(Op::SoftmaxRows { a }, m, n, v)
    }

    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (m, n) = (self.rows(a), self.cols(a));
        assert_eq!((self.rows(gain), self.cols(gain)), (1, n), "ln gain shape");
        assert_eq!((self.rows(bias), self.cols(bias)), (1, n), "ln bias shape");
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.nodes[a].value[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let s = (var + LN_EPS).sqrt();
            for j in 0..n {
                let xhat = (row[j] - mean) / s;
                v[i * n + j] = xhat * self.nodes[gain].value[j] + self.nodes[bias].value[j];
            }
        }
        self.push(Op::LayerNorm { a, gain, bias }, m, n, v)
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let (vocab, d) = (self.rows(table), self.cols(table));
        let mut v = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < vocab, "embedding id {id} out of range {vocab}");
            v.extend_from_slice(&self.nodes[table].value[id * d..(id + 1) * d]);
        }
        self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ids.len(),
            d,
            v,
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.cols(parts[0]);
        let mut v = Vec::new();
        let mut m = 0;
        for &p in parts {
            assert_eq!(self.cols(p), n, "concat_rows col mismatch");
            m += self.rows(p);
            v.extend_from_slice(&self.nodes[p].value);
        }
        self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            m,
            n,
            v,
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = (self.rows(a), self.cols(a));
        assert!(start + len <= m, "slice_rows out of range");
        let v = self.nodes[a].value[start * n..(start + len) * n].to_vec();
        self.push(Op::SliceRows { a, start }, len, n, v)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = (self.rows(a), self.cols(a));
        assert!(start + len <= n, "slice_cols out of range");
        let mut v = Vec::with_capacity(m * len);
        for i in 0..m {
            v.extend_from_slice(&self.nodes[a].value[i * n + start..i * n + start + len]);
        }
        self.push(Op::SliceCols { a, start }, m, len, v)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let m = self.rows(parts[0]);
        let total: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut v = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                assert_eq!(self.rows(p), m, "concat_cols row mismatch");
                let n = self.cols(p);
                v.extend_from_slice(&self.nodes[p].value[i * n..(i + 1) * n]);
            }
        }
        self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            m,
            total,
            v,
        )
    }

    /// Mean of the given rows, producing a single row.
    pub fn mean_rows(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let (m, n) = (self.rows(a), self.cols(a));
        assert!(!rows.is_empty(), "mean_rows over empty selection");
        assert!(rows.iter().all(|&r| r < m), "mean_rows index out of range");
        let mut v = vec![0.0; n];
        for &r in rows {
            for j in 0..n {
                v[j] += self.nodes[a].value[r * n + j];
            }
        }
        let inv = 1.0 / rows.len() as f64;
        for x in v.iter_mut() {
            *x *= inv;
        }
        self.push(
            Op::MeanRows {
                a,
                rows: rows.to_vec(),
            },
            1,
            n,
            v,
        )
    }

    /// Sum of -log softmax(logits_row)[target] over rows with a target.
    /// Returns the scalar node and the number of contributing rows.
    pub fn cross_entropy_sum(&mut self, logits: NodeId, targets: &[Option<usize>]) -> (NodeId, usize) {
        let (m, n) = (self.rows(logits), self.cols(logits));
        assert_eq!(targets.len(), m, "one target slot per logit row");
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(y) = t {
                assert!(*y < n, "target id {y} out of vocab {n}");
                let row = &self.nodes[logits].value[i * n..(i + 1) * n];
                total += logsumexp(row) - row[*y];
                count += 1;
            }
        }
        let id = self.push(
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
            },
            1,
            1,
            vec![total],
        );
        (id, count)
    }

    /// Normalize each row to unit L2 norm. Zero rows are a contract
    /// violation because the downstream cosine is undefined.
    pub fn row_l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = (self.rows(a), self.cols(a));
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.nodes[a].value[i * n..(i + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::contract(format!(
                    "row {i} has (near-)zero norm; cosine similarity undefined"
                )));
            }
            for j in 0..n {
                v[i * n + j] = row[j] / norm;
            }
        }
        Ok(self.push(Op::RowL2Normalize { a }, m, n, v))
    }

    /// InfoNCE over a square, already temperature-scaled similarity matrix:
    /// mean over rows i of log-denominator minus the diagonal entry.
    pub fn info_nce(&mut self, sim: NodeId, mode: InfoNceMode) -> NodeId {
        let (b, b2) = (self.rows(sim), self.cols(sim));
        assert_eq!(b, b2, "similarity matrix must be square");
        assert!(b >= 2, "InfoNCE needs at least 2 samples for negatives");
        let mut total = 0.0;
        for i in 0..b {
            let row = &self.nodes[sim].value[i * b..(i + 1) * b];
            let denom = match mode {
                InfoNceMode::Standard => logsumexp(row),
                InfoNceMode::ExcludePositive => {
                    let others: Vec<f64> = row
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != i)
                        .map(|(_, &x)| x)
                        .collect();
                    logsumexp(&others)
                }
            };
            total += denom - row[i];
        }
        self.push(Op::InfoNce { sim, mode }, 1, 1, vec![total / b as f64])
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar loss with respect to every
    /// registered parameter. Parameters the loss cannot reach get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        let raw = self.backward_raw(loss)?;
        let mut out = BTreeMap::new();
        for leaf in &self.params {
            let grad = match &raw[leaf.node] {
                Some(g) => Tensor::from_f64(leaf.shape.clone(), g)?,
                None => Tensor::zeros(leaf.shape.clone()),
            };
            if let Some(idx) = grad.first_non_finite() {
                return Err(Error::NumericFault {
                    node: leaf.node,
                    detail: format!("gradient of {} non-finite at element {idx}", leaf.name),
                });
            }
            out.insert(leaf.name.clone(), grad);
        }
        Ok(out)
    }

    fn backward_raw(&self, loss: NodeId) -> Result<Vec<Option<Vec<f64>>>> {
        let node = self
            .nodes
            .get(loss)
            .ok_or_else(|| Error::contract(format!("loss node {loss} does not exist")))?;
        if node.value.len() != 1 {
            return Err(Error::contract(format!(
                "loss must be scalar, node {loss} has {} elements",
                node.value.len()
            )));
        }
        for (id, n) in self.nodes.iter().enumerate() {
            if let Some(pos) = n.value.iter().position(|v| !v.is_finite()) {
                return Err(Error::NumericFault {
                    node: id,
                    detail: format!("forward value non-finite at element {pos}"),
                });
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_op(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, delta: &[f64]) {
        match &mut grads[id] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            None => grads[id] = Some(delta.to_vec()),
        }
    }

    fn backward_op(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.rows(*a), self.cols(*a));
                let n = self.cols(*b);
                // dA = dC @ B^T, dB = A^T @ dC
                let da = matmul_bt(g, &self.nodes[*b].value, m, n, k);
                let db = matmul_tn(&self.nodes[*a].value, g, m, k, n);
                Self::accumulate(grads, *a, &da);
                Self::accumulate(grads, *b, &db);
            }
            Op::MatmulBt { a, b } => {
                let (m, k) = (self.rows(*a), self.cols(*a));
                let n = self.rows(*b);
                // C = A @ B^T: dA = dC @ B, dB = dC^T @ A
                let da = matmul(g, &self.nodes[*b].value, m, n, k);
                let db = matmul_tn(g, &self.nodes[*a].value, m, n, k);
                Self::accumulate(grads, *a, &da);
                Self::accumulate(grads, *b, &db);
            }
            Op::Add { a, b } => {
                Self::accumulate(grads, *a, g);
                Self::accumulate(grads, *b, g);
            }
            Op::AddRow { a, bias } => {
                Self::accumulate(grads, *a, g);
                let n = self.cols(*bias);
                let mut db = vec![0.0; n];
                for (idx, &gv) in g.iter().enumerate() {
                    db[idx % n] += gv;
                }
                Self::accumulate(grads, *bias, &db);
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[*b].value)
                    .map(|(gv, bv)| gv * bv)
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[*a].value)
                    .map(|(gv, av)| gv * av)
                    .collect();
                Self::accumulate(grads, *a, &da);
                Self::accumulate(grads, *b, &db);
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|gv| gv * c).collect();
                Self::accumulate(grads, *a, &da);
            }
            Op::AddN { parts } => {
                for &p in parts {
                    Self::accumulate(grads, p, g);
                }
            }
            Op::SumAll { a } => {
                let da = vec![g[0]; self.nodes[*a].value.len()];
                Self::accumulate(grads, *a, &da);
            }
            Op::Gelu { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[*a].value)
                    .map(|(gv, &x)| gv * gelu_prime(x))
                    .collect();
                Self::accumulate(grads, *a, &da);
            }
            Op::Tanh { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&node.value)
                    .map(|(gv, &y)| gv * (1.0 - y * y))
                    .collect();
                Self::accumulate(grads, *a, &da);
            }
            Op::SoftmaxRows { a } => {
                let (m, n) = (node.rows, node.cols);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let y = &node.value[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for j in 0..n {
                        da[i * n + j] = y[j] * (gr[j] - dot);
                    }
                }
                Self::accumulate(grads, *a, &da);
            }
            Op::LayerNorm { a, gain, bias } => {
                let (m, n) = (node.rows, node.cols);
                let nn = n as f64;
                let mut da = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for i in 0..m {
                    let row = &self.nodes[*a].value[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / nn;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / nn;
                    let s = (var + LN_EPS).sqrt();
                    let gv = &self.nodes[*gain].value;
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for j in 0..n {
                        let xhat = (row[j] - mean) / s;
                        let dy = gr[j] * gv[j];
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat;
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                    }
                    for j in 0..n {
                        let xhat = (row[j] - mean) / s;
                        let dy = gr[j] * gv[j];
                        da[i * n + j] = (dy - sum_dy / nn - xhat * sum_dy_xhat / nn) / s;
                    }
                }
                Self::accumulate(grads, *a, &da);
                Self::accumulate(grads, *gain, &dgain);
                Self::accumulate(grads, *bias, &dbias);
            }
            Op::Embedding { table, ids } => {
                let d = node.cols;
                let (vocab, _) = (self.rows(*table), self.cols(*table));
                let mut dt = vec![0.0; vocab * d];
                for (r, &tid) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[tid * d + j] += g[r * d + j];
                    }
                }
                Self::accumulate(grads, *table, &dt);
            }
            Op::ConcatRows { parts } => {
                let n = node.cols;
                let mut offset = 0;
                for &p in parts {
                    let rows = self.rows(p);
                    Self::accumulate(grads, p, &g[offset * n..(offset + rows) * n]);
                    offset += rows;
                }
            }
            Op::SliceRows { a, start } => {
                let n = node.cols;
                let mut da = vec![0.0; self.nodes[*a].value.len()];
                da[start * n..start * n + g.len()].copy_from_slice(g);
                Self::accumulate(grads, *a, &da);
            }
            Op::SliceCols { a, start } => {
                let (m, len) = (node.rows, node.cols);
                let n = self.cols(*a);
                let mut da = vec![0.0; self.nodes[*a].value.len()];
                for i in 0..m {
                    for j in 0..len {
                        da[i * n + start + j] = g[i * len + j];
                    }
                }
                Self::accumulate(grads, *a, &da);
            }
            Op::ConcatCols { parts } => {
                let m = node.rows;
                let total = node.cols;
                let mut offset = 0;
                for &p in parts {
                    let n = self.cols(p);
                    let mut dp = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dp[i * n + j] = g[i * total + offset + j];
                        }
                    }
                    Self::accumulate(grads, p, &dp);
                    offset += n;
                }
            }
            Op::MeanRows { a, rows } => {
                let n = node.cols;
                let inv = 1.0 / rows.len() as f64;
                let mut da = vec![0.0; self.nodes[*a].value.len()];
                for &r in rows {
                    for j in 0..n {
                        da[r * n + j] += g[j] * inv;
                    }
                }
                Self::accumulate(grads, *a, &da);
            }
            Op::CrossEntropySum { logits, targets } => {
                let (m, n) = (self.rows(*logits), self.cols(*logits));
                let mut da = vec![0.0; m * n];
                for (i, t) in targets.iter().enumerate() {
                    let Some(y) = t else { continue };
                    let row = &self.nodes[*logits].value[i * n..(i + 1) * n];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
                    for j in 0..n {
                        let p = (row[j] - mx).exp() / z;
                        da[i * n + j] = g[0] * (p - if j == *y { 1.0 } else { 0.0 });
                    }
                }
                Self::accumulate(grads, *logits, &da);
            }
            Op::RowL2Normalize { a } => {
                let (m, n) = (node.rows, node.cols);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let x = &self.nodes[*a].value[i * n..(i + 1) * n];
                    let y = &node.value[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = gr.iter().zip(y).map(|(gv, yv)| gv * yv).sum();
                    for j in 0..n {
                        da[i * n + j] = (gr[j] - dot * y[j]) / norm;
                    }
                }
                Self::accumulate(grads, *a, &da);
            }
            Op::InfoNce { sim, mode } => {
                let b = self.rows(*sim);
                let inv = g[0] / b as f64;
                let mut da = vec![0.0; b * b];
                for i in 0..b {
                    let row = &self.nodes[*sim].value[i * b..(i + 1) * b];
                    match mode {
                        InfoNceMode::Standard => {
                            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
                            for j in 0..b {
                                let p = (row[j] - mx).exp() / z;
                                da[i * b + j] = inv * (p - if j == i { 1.0 } else { 0.0 });
                            }
                        }
                        InfoNceMode::ExcludePositive => {
                            let mx = row
                                .iter()
                                .enumerate()
                                .filter(|(j, _)| *j != i)
                                .map(|(_, &x)| x)
                                .fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = row
                                .iter()
                                .enumerate()
                                .filter(|(j, _)| *j != i)
                                .map(|(_, &x)| (x - mx).exp())
                                .sum();
                            for j in 0..b {
                                if j == i {
                                    da[i * b + j] = -inv;
                                } else {
                                    da[i * b + j] = inv * (row[j] - mx).exp() / z;
                                }
                            }
                        }
                    }
                }
                Self::accumulate(grads, *sim, &da);
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}
