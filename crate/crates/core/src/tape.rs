//! Reverse-mode differentiation over a linear tape of matrix ops.
//!
//! Ops are fused at the granularity the encoder needs (layer norm, causal
//! attention, row-wise cross-entropy) so each backward rule is written once
//! by hand. Parameters are read by index from a borrowed slice and their
//! gradients are accumulated into a caller-owned buffer; other leaves are
//! plain inputs whose gradients can be read back after the pass.

use crate::tensor::{dot, matmul, matmul_acc, matmul_at_acc, matmul_bt, softmax_in_place, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Embed {
        param: usize,
        rows: Vec<usize>,
    },
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Matrix,
        rstd: Vec<f64>,
    },
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<Matrix>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    MeanRows(NodeId),
    CumulativeMean(NodeId),
    SelectRow(NodeId, usize),
    TailRows(NodeId, usize),
    Stack(Vec<NodeId>),
    NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
    },
    CrossEntropyRows {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Matrix,
    },
    WeightedSum {
        x: NodeId,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p [Matrix],
    nodes: Vec<Node>,
}

/// Node gradients after a backward pass.
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads[id.0].take()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Matrix]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        let value = self.params[index].clone();
        self.push(value, Op::Param(index))
    }

    /// Gathers rows of a parameter matrix without copying the rest of it.
    pub fn embed(&mut self, param: usize, rows: Vec<usize>) -> NodeId {
        let table = &self.params[param];
        let mut value = Matrix::zeros(rows.len(), table.cols);
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).copy_from_slice(table.row(r));
        }
        self.push(value, Op::Embed { param, rows })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!((b.rows, b.cols), (1, v.cols), "bias shape");
        for r in 0..v.rows {
            for (x, y) in v.row_mut(r).iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        self.push(v, Op::AddBias(a, bias))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_bt(self.value(a), self.value(b));
        self.push(v, Op::MatMulBt(a, b))
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add_bias(xw, b)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let mut v = self.value(x).clone();
        v.scale_in_place(s);
        self.push(v, Op::Scale(x, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        for z in v.data.iter_mut() {
            let u = GELU_C * (*z + GELU_A * *z * *z * *z);
            *z = 0.5 * *z * (1.0 + u.tanh());
        }
        self.push(v, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut normalized = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(s);
            for c in 0..cols {
                let n = (row[c] - mean) * s;
                normalized.data[r * cols + c] = n;
                out.data[r * cols + c] = n * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                rstd,
            },
        )
    }

    /// Multi-head scaled dot-product attention where position `i` only
    /// attends to positions `<= i`. Heads split the columns evenly.
    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        assert_eq!(d % heads, 0, "embedding width must divide into heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut p = Matrix::zeros(n, n);
            for i in 0..n {
                let qi = &qv.row(i)[cols.clone()];
                let row = &mut p.data[i * n..i * n + i + 1];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &kv.row(j)[cols.clone()]) * scale;
                }
                softmax_in_place(row);
                let orow = &mut out.data[i * d + h * dh..i * d + (h + 1) * dh];
                for j in 0..=i {
                    let pij = p.data[i * n + j];
                    for (o, x) in orow.iter_mut().zip(&vv.row(j)[cols.clone()]) {
                        *o += pij * x;
                    }
                }
            }
            probs.push(p);
        }
        self.push(
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// Multiplies by a fixed mask (already scaled by `1 / (1 - rate)`).
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f64>) -> NodeId {
        let mut v = self.value(x).clone();
        assert_eq!(mask.len(), v.len());
        for (a, m) in v.data.iter_mut().zip(&mask) {
            *a *= m;
        }
        self.push(v, Op::Dropout { x, mask })
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut v = Matrix::zeros(1, xv.cols);
        for r in 0..xv.rows {
            for (a, b) in v.data.iter_mut().zip(xv.row(r)) {
                *a += b;
            }
        }
        v.scale_in_place(1.0 / xv.rows as f64);
        self.push(v, Op::MeanRows(x))
    }

    /// Row `i` of the result is the mean of rows `0..=i` of `x`.
    pub fn cumulative_mean(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut v = Matrix::zeros(xv.rows, xv.cols);
        let mut running = vec![0.0; xv.cols];
        for r in 0..xv.rows {
            for (a, b) in running.iter_mut().zip(xv.row(r)) {
                *a += b;
            }
            let inv = 1.0 / (r + 1) as f64;
            for (o, a) in v.row_mut(r).iter_mut().zip(&running) {
                *o = a * inv;
            }
        }
        self.push(v, Op::CumulativeMean(x))
    }

    /// Rows `from..` of `x`.
    pub fn tail_rows(&mut self, x: NodeId, from: usize) -> NodeId {
        let xv = self.value(x);
        assert!(from < xv.rows, "tail_rows start out of range");
        let v = Matrix::from_vec(xv.rows - from, xv.cols, xv.data[from * xv.cols..].to_vec());
        self.push(v, Op::TailRows(x, from))
    }

    pub fn select_row(&mut self, x: NodeId, row: usize) -> NodeId {
        let v = Matrix::row_vector(self.value(x).row(row).to_vec());
        self.push(v, Op::SelectRow(x, row))
    }

    /// Concatenates nodes with equal column counts vertically.
    pub fn stack(&mut self, rows: Vec<NodeId>) -> NodeId {
        let cols = self.value(rows[0]).cols;
        let mut data = Vec::new();
        for &r in &rows {
            let v = self.value(r);
            assert_eq!(v.cols, cols, "stack expects equal column counts");
            data.extend_from_slice(&v.data);
        }
        let v = Matrix::from_vec(data.len() / cols, cols, data);
        self.push(v, Op::Stack(rows))
    }

    /// Scales every row to unit Euclidean norm. Returns the offending row if
    /// a norm is zero.
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId, usize> {
        let mut v = self.value(x).clone();
        let mut norms = Vec::with_capacity(v.rows);
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let n = dot(row, row).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(r);
            }
            row.iter_mut().for_each(|a| *a /= n);
            norms.push(n);
        }
        Ok(self.push(v, Op::NormalizeRows { x, norms }))
    }

    /// Per-row `-log softmax(logits)[target]`, as an `n × 1` column.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len());
        let mut probs = lv.clone();
        let mut out = Matrix::zeros(lv.rows, 1);
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
            out.data[r] = max + sum.ln() - row[t];
            softmax_in_place(probs.row_mut(r));
        }
        self.push(
            out,
            Op::CrossEntropyRows {
                logits,
                targets,
                probs,
            },
        )
    }

    /// `Σ_i weights[i] · x[i]` for a column `x`, as a `1 × 1` scalar.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<f64>) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.len(), weights.len());
        let s: f64 = xv.data.iter().zip(&weights).map(|(a, w)| a * w).sum();
        self.push(
            Matrix::from_vec(1, 1, vec![s]),
            Op::WeightedSum { x, weights },
        )
    }

    /// Propagates the seed gradients backwards. Parameter gradients are
    /// added into `param_grads` (indexed like the parameter slice).
    pub fn backward(&self, seeds: Vec<(NodeId, Matrix)>, param_grads: &mut [Matrix]) -> Grads {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            assert_eq!(g.shape(), self.value(id).shape(), "seed gradient shape");
            accumulate(&mut grads, id, g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            // Inputs keep their gradient so callers can read it back.
            if matches!(node.op, Op::Input) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Input => unreachable!(),
                Op::Param(p) => param_grads[*p].add_assign(&g),
                Op::Embed { param, rows } => {
                    let pg = &mut param_grads[*param];
                    for (i, &r) in rows.iter().enumerate() {
                        for (a, b) in pg.row_mut(r).iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddBias(a, bias) => {
                    let mut gb = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (x, y) in gb.data.iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Matrix::zeros(av.rows, av.cols);
                    let mut gb = Matrix::zeros(bv.rows, bv.cols);
                    // dA = G Bᵀ, dB = Aᵀ G
                    let bt = matmul_bt(&g, bv);
                    ga.add_assign(&bt);
                    matmul_at_acc(av, &g, &mut gb);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // C = A Bᵀ: dA = G B, dB = Gᵀ A
                    let mut ga = Matrix::zeros(av.rows, av.cols);
                    matmul_acc(&g, bv, &mut ga);
                    let mut gb = Matrix::zeros(bv.rows, bv.cols);
                    matmul_at_acc(&g, av, &mut gb);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(x, s) => {
                    let mut gx = g;
                    gx.scale_in_place(*s);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (gi, &z) in gx.data.iter_mut().zip(&xv.data) {
                        let u = GELU_C * (z + GELU_A * z * z * z);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * z * z);
                        *gi *= 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    rstd,
                } => {
                    let (rows, cols) = g.shape();
                    let gv = &self.value(*gain).data;
                    let mut gg = Matrix::zeros(1, cols);
                    let mut gbias = Matrix::zeros(1, cols);
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let nr = normalized.row(r);
                        let mut mean_dn = 0.0;
                        let mut mean_dn_n = 0.0;
                        for c in 0..cols {
                            gg.data[c] += gr[c] * nr[c];
                            gbias.data[c] += gr[c];
                            let dn = gr[c] * gv[c];
                            mean_dn += dn;
                            mean_dn_n += dn * nr[c];
                        }
                        mean_dn /= cols as f64;
                        mean_dn_n /= cols as f64;
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            let dn = gr[c] * gv[c];
                            out[c] = rstd[r] * (dn - mean_dn - nr[c] * mean_dn_n);
                        }
                    }
                    accumulate(&mut grads, *gain, gg);
                    accumulate(&mut grads, *bias, gbias);
                    accumulate(&mut grads, *x, gx);
                }
                Op::CausalAttention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (n, d) = qv.shape();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Matrix::zeros(n, d);
                    let mut gk = Matrix::zeros(n, d);
                    let mut gvv = Matrix::zeros(n, d);
                    let mut dscore = vec![0.0; n];
                    for (h, p) in probs.iter().enumerate() {
                        let cols = h * dh..(h + 1) * dh;
                        for i in 0..n {
                            let go = &g.row(i)[cols.clone()];
                            // dP_ij = dO_i · V_j ; dV_j += P_ij dO_i
                            let mut weighted = 0.0;
                            for j in 0..=i {
                                let pij = p.data[i * n + j];
                                let dp = dot(go, &vv.row(j)[cols.clone()]);
                                dscore[j] = dp;
                                weighted += pij * dp;
                                for (a, b) in gvv.row_mut(j)[cols.clone()].iter_mut().zip(go) {
                                    *a += pij * b;
                                }
                            }
                            // dS_ij = P_ij (dP_ij - Σ_k P_ik dP_ik)
                            for j in 0..=i {
                                let ds = p.data[i * n + j] * (dscore[j] - weighted) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = &kv.row(j)[cols.clone()];
                                for (a, b) in gq.row_mut(i)[cols.clone()].iter_mut().zip(krow) {
                                    *a += ds * b;
                                }
                                let qrow = &qv.row(i)[cols.clone()];
                                for (a, b) in gk.row_mut(j)[cols.clone()].iter_mut().zip(qrow) {
                                    *a += ds * b;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gvv);
                }
                Op::Dropout { x, mask } => {
                    let mut gx = g;
                    for (a, m) in gx.data.iter_mut().zip(mask) {
                        *a *= m;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MeanRows(x) => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    let inv = 1.0 / xv.rows as f64;
                    for r in 0..xv.rows {
                        for (a, b) in gx.row_mut(r).iter_mut().zip(&g.data) {
                            *a = b * inv;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::CumulativeMean(x) => {
                    let (rows, cols) = g.shape();
                    let mut gx = Matrix::zeros(rows, cols);
                    let mut running = vec![0.0; cols];
                    for r in (0..rows).rev() {
                        let inv = 1.0 / (r + 1) as f64;
                        for (a, b) in running.iter_mut().zip(g.row(r)) {
                            *a += b * inv;
                        }
                        gx.row_mut(r).copy_from_slice(&running);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::TailRows(x, from) => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    gx.data[from * xv.cols..].copy_from_slice(&g.data);
                    accumulate(&mut grads, *x, gx);
                }
                Op::SelectRow(x, row) => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    gx.row_mut(*row).copy_from_slice(&g.data);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Stack(rows) => {
                    let mut offset = 0;
                    for &r in rows {
                        let n = self.value(r).len();
                        let (rr, cc) = self.value(r).shape();
                        accumulate(
                            &mut grads,
                            r,
                            Matrix::from_vec(rr, cc, g.data[offset..offset + n].to_vec()),
                        );
                        offset += n;
                    }
                }
                Op::NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut gx = g.clone();
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gy = dot(g.row(r), yr);
                        for (a, &yc) in gx.row_mut(r).iter_mut().zip(yr) {
                            *a = (*a - yc * gy) / norms[r];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::CrossEntropyRows {
                    logits,
                    targets,
                    probs,
                } => {
                    let mut gl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        gl.data[r * gl.cols + t] -= 1.0;
                        let s = g.data[r];
                        gl.row_mut(r).iter_mut().for_each(|a| *a *= s);
                    }
                    accumulate(&mut grads, *logits, gl);
                }
                Op::WeightedSum { x, weights } => {
                    let s = g.data[0];
                    let (rows, cols) = self.value(*x).shape();
                    let gx = Matrix::from_vec(rows, cols, weights.iter().map(|w| w * s).collect());
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        Grads { grads }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
