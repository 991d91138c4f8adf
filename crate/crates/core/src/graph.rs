//! Reverse-mode differentiation over a linear tape of 2-D buffers.
//!
//! A `Graph` records operations during the forward pass and replays them in
//! reverse to accumulate gradients. Buffers are row-major `rows x cols`
//! matrices; scalars are 1x1. Matrix products go through `matrixmultiply`,
//! which is single-threaded and order-deterministic, so identical inputs
//! produce bit-identical outputs and gradients.

use crate::tensor::Tensor;

/// Handle to a buffer in the tape arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node(usize);

struct Buf {
    rows: usize,
    cols: usize,
    needs_grad: bool,
}

enum Op {
    Matmul { a: Node, b: Node, out: Node, ta: bool, tb: bool },
    Add { a: Node, b: Node, out: Node },
    Sub { a: Node, b: Node, out: Node },
    Mul { a: Node, b: Node, out: Node },
    AddRow { x: Node, row: Node, out: Node },
    MulRow { x: Node, row: Node, out: Node },
    Scale { x: Node, c: f32, out: Node },
    AddScaled { a: Node, b: Node, cb: f32, out: Node },
    AffineConst { x: Node, mul: f32, out: Node },
    Relu { x: Node, out: Node },
    Gelu { x: Node, out: Node },
    Tanh { x: Node, out: Node },
    Sigmoid { x: Node, out: Node },
    Exp { x: Node, out: Node },
    LayerNorm { x: Node, eps: f32, out: Node },
    SoftmaxRows { x: Node, out: Node },
    LogSoftmaxRows { x: Node, out: Node },
    CrossEntropySum { logits: Node, targets: Vec<u32>, weights: Option<Vec<f32>>, out: Node },
    BceWithLogitsSum { logits: Node, targets: Vec<f32>, out: Node },
    Embed { table: Node, ids: Vec<u32>, out: Node },
    SliceCols { x: Node, start: usize, len: usize, out: Node },
    ConcatCols { parts: Vec<Node>, out: Node },
    ConcatRows { parts: Vec<Node>, out: Node },
    SliceRows { x: Node, start: usize, len: usize, out: Node },
    L2NormalizeRows { x: Node, out: Node },
    SumAll { x: Node, out: Node },
    MeanAll { x: Node, out: Node },
    Conv2d {
        x: Node,
        w: Node,
        bias: Node,
        out: Node,
        shape: ConvShape,
        cols: Vec<f32>,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct ConvShape {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }
}

/// Recorded computation with values and (after `backward`) gradients.
pub struct Graph {
    bufs: Vec<Buf>,
    datas: Vec<Vec<f32>>,
    grads: Vec<Option<Vec<f32>>>,
    ops: Vec<Op>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { bufs: Vec::new(), datas: Vec::new(), grads: Vec::new(), ops: Vec::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f32>, needs_grad: bool) -> Node {
        assert_eq!(data.len(), rows * cols);
        self.bufs.push(Buf { rows, cols, needs_grad });
        self.datas.push(data);
        self.grads.push(None);
        Node(self.bufs.len() - 1)
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, data: &[f32], needs_grad: bool) -> Node {
        self.push(rows, cols, data.to_vec(), needs_grad)
    }

    /// Leaf from a tensor, reshaped to (rows, cols); gradients enabled.
    pub fn param(&mut self, t: &Tensor) -> Node {
        let (r, c) = t.dims2();
        self.push(r, c, t.data().to_vec(), true)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: &[f32]) -> Node {
        self.push(rows, cols, data.to_vec(), false)
    }

    pub fn value(&self, n: Node) -> &[f32] {
        &self.datas[n.0]
    }

    pub fn grad(&self, n: Node) -> Option<&[f32]> {
        self.grads[n.0].as_deref()
    }

    pub fn rows(&self, n: Node) -> usize {
        self.bufs[n.0].rows
    }

    pub fn cols(&self, n: Node) -> usize {
        self.bufs[n.0].cols
    }

    pub fn scalar_value(&self, n: Node) -> f32 {
        debug_assert_eq!(self.datas[n.0].len(), 1);
        self.datas[n.0][0]
    }

    fn out_of(&mut self, rows: usize, cols: usize, data: Vec<f32>, inputs: &[Node]) -> Node {
        let needs = inputs.iter().any(|n| self.bufs[n.0].needs_grad);
        self.push(rows, cols, data, needs)
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Node, b: Node) -> Node {
        self.matmul_general(a, b, false, false)
    }

    /// a @ b^T
    pub fn matmul_tb(&mut self, a: Node, b: Node) -> Node {
        self.matmul_general(a, b, false, true)
    }

    /// a^T @ b
    pub fn matmul_ta(&mut self, a: Node, b: Node) -> Node {
        self.matmul_general(a, b, true, false)
    }

    fn matmul_general(&mut self, a: Node, b: Node, ta: bool, tb: bool) -> Node {
        let (ar, ac) = (self.rows(a), self.cols(a));
        let (br, bc) = (self.rows(b), self.cols(b));
        let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
        let mut out = vec![0.0; m * n];
        gemm(m, ka, n, 1.0, &self.datas[a.0], ta, &self.datas[b.0], tb, 0.0, &mut out);
        let node = self.out_of(m, n, out, &[a, b]);
        self.ops.push(Op::Matmul { a, b, out: node, ta, tb });
        node
    }

    pub fn add(&mut self, a: Node, b: Node) -> Node {
        assert_eq!(self.datas[a.0].len(), self.datas[b.0].len());
        let data: Vec<f32> =
            self.datas[a.0].iter().zip(&self.datas[b.0]).map(|(x, y)| x + y).collect();
        let node = self.out_of(self.rows(a), self.cols(a), data, &[a, b]);
        self.ops.push(Op::Add { a, b, out: node });
        node
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Node {
        assert_eq!(self.datas[a.0].len(), self.datas[b.0].len());
        let data: Vec<f32> =
            self.datas[a.0].iter().zip(&self.datas[b.0]).map(|(x, y)| x - y).collect();
        let node = self.out_of(self.rows(a), self.cols(a), data, &[a, b]);
        self.ops.push(Op::Sub { a, b, out: node });
        node
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Node {
        assert_eq!(self.datas[a.0].len(), self.datas[b.0].len());
        let data: Vec<f32> =
            self.datas[a.0].iter().zip(&self.datas[b.0]).map(|(x, y)| x * y).collect();
        let node = self.out_of(self.rows(a), self.cols(a), data, &[a, b]);
        self.ops.push(Op::Mul { a, b, out: node });
        node
    }

    /// x[n,d] + row broadcast over rows; row is 1xd.
    pub fn add_row(&mut self, x: Node, row: Node) -> Node {
        let (n, d) = (self.rows(x), self.cols(x));
        assert_eq!(self.datas[row.0].len(), d);
        let mut data = self.datas[x.0].clone();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += self.datas[row.0][j];
            }
        }
        let node = self.out_of(n, d, data, &[x, row]);
        self.ops.push(Op::AddRow { x, row, out: node });
        node
    }

    pub fn mul_row(&mut self, x: Node, row: Node) -> Node {
        let (n, d) = (self.rows(x), self.cols(x));
        assert_eq!(self.datas[row.0].len(), d);
        let mut data = self.datas[x.0].clone();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] *= self.datas[row.0][j];
            }
        }
        let node = self.out_of(n, d, data, &[x, row]);
        self.ops.push(Op::MulRow { x, row, out: node });
        node
    }

    pub fn scale(&mut self, x: Node, c: f32) -> Node {
        let data: Vec<f32> = self.datas[x.0].iter().map(|v| v * c).collect();
        let node = self.out_of(self.rows(x), self.cols(x), data, &[x]);
        self.ops.push(Op::Scale { x, c, out: node });
        node
    }

    /// a + cb * b
    pub fn add_scaled(&mut self, a: Node, b: Node, cb: f32) -> Node {
        assert_eq!(self.datas[a.0].len(), self.datas[b.0].len());
        let data: Vec<f32> =
            self.datas[a.0].iter().zip(&self.datas[b.0]).map(|(x, y)| x + cb * y).collect();
        let node = self.out_of(self.rows(a), self.cols(a), data, &[a, b]);
        self.ops.push(Op::AddScaled { a, b, cb, out: node });
        node
    }

    /// mul * x + add, with constant coefficients.
    pub fn affine_const(&mut self, x: Node, mul: f32, add: f32) -> Node {
        let data: Vec<f32> = self.datas[x.0].iter().map(|v| mul * v + add).collect();
        let node = self.out_of(self.rows(x), self.cols(x), data, &[x]);
        self.ops.push(Op::AffineConst { x, mul, out: node });
        node
    }

    pub fn relu(&mut self, x: Node) -> Node {
        let data: Vec<f32> = self.datas[x.0].iter().map(|v| v.max(0.0)).collect();
        let node = self.out_of(self.rows(x), self.cols(x), data, &[x]);
        self.ops.push(Op::Relu { x, out: node });
        node
    }

    pub fn gelu(&mut self, x: Node) -> Node {
        let data: Vec<f32> = self.datas[x.0].iter().map(|&v| gelu_fwd(v)).collect();
        let node = self.out_of(self.rows(x), self.cols(x), data, &[x]);
        self.ops.push(Op::Gelu { x, out: node });
        node
    }

    pub fn tanh(&mut self, x: Node) -> Node {
        let data: Vec<f32> = self.datas[x.0].iter().map(|v| v.tanh()).collect();
        let node = self.out_of(self.rows(x), self.cols(x), data, &[x]);
        self.ops.push(Op::Tanh { x, out: node });
        node
    }

    pub fn sigmoid(&mut self, x: Node) -> Node {
        let data: Vec<f32> = self.datas[x.0].iter().map(|&v| sigmoid_fwd(v)).collect();
        let node = self.out_of(self.rows(x), self.cols(x), data, &[x]);
        self.ops.push(Op::Sigmoid { x, out: node });
        node
    }

    pub fn exp(&mut self, x: Node) -> Node {
        let data: Vec<f32> = self.datas[x.0].iter().map(|v| v.exp()).collect();
        let node = self.out_of(self.rows(x), self.cols(x), data, &[x]);
        self.ops.push(Op::Exp { x, out: node });
        node
    }

    /// Per-row normalization to zero mean, unit variance. No affine part;
    /// compose with `mul_row`/`add_row` for gains and biases.
    pub fn layer_norm(&mut self, x: Node, eps: f32) -> Node {
        let (n, d) = (self.rows(x), self.cols(x));
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &self.datas[x.0][i * d..(i + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv;
            }
        }
        let node = self.out_of(n, d, data, &[x]);
        self.ops.push(Op::LayerNorm { x, eps, out: node });
        node
    }

    pub fn softmax_rows(&mut self, x: Node) -> Node {
        let (n, d) = (self.rows(x), self.cols(x));
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &self.datas[x.0][i * d..(i + 1) * d];
            softmax_into(row, &mut data[i * d..(i + 1) * d]);
        }
        let node = self.out_of(n, d, data, &[x]);
        self.ops.push(Op::SoftmaxRows { x, out: node });
        node
    }

    pub fn log_softmax_rows(&mut self, x: Node) -> Node {
        let (n, d) = (self.rows(x), self.cols(x));
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &self.datas[x.0][i * d..(i + 1) * d];
            let lse = log_sum_exp(row);
            for j in 0..d {
                data[i * d + j] = row[j] - lse;
            }
        }
        let node = self.out_of(n, d, data, &[x]);
        self.ops.push(Op::LogSoftmaxRows { x, out: node });
        node
    }

    /// Weighted sum of per-row negative log-likelihoods. Weight defaults
    /// to 1 per row; rows with weight 0 contribute nothing to the loss or
    /// the gradient.
    pub fn cross_entropy_sum(
        &mut self,
        logits: Node,
        targets: &[u32],
        weights: Option<&[f32]>,
    ) -> Node {
        let (n, v) = (self.rows(logits), self.cols(logits));
        assert_eq!(targets.len(), n);
        if let Some(w) = weights {
            assert_eq!(w.len(), n);
        }
        let mut total = 0.0f64;
        for i in 0..n {
            let w = weights.map_or(1.0, |w| w[i]);
            if w == 0.0 {
                continue;
            }
            let row = &self.datas[logits.0][i * v..(i + 1) * v];
            let lse = log_sum_exp(row);
            total += (w * (lse - row[targets[i] as usize])) as f64;
        }
        let node = self.out_of(1, 1, vec![total as f32], &[logits]);
        self.ops.push(Op::CrossEntropySum {
            logits,
            targets: targets.to_vec(),
            weights: weights.map(|w| w.to_vec()),
            out: node,
        });
        node
    }

    /// Sum of binary cross-entropy terms over 1-column logits.
    pub fn bce_with_logits_sum(&mut self, logits: Node, targets: &[f32]) -> Node {
        let n = self.datas[logits.0].len();
        assert_eq!(targets.len(), n);
        let mut total = 0.0f64;
        for i in 0..n {
            let x = self.datas[logits.0][i];
            let t = targets[i];
            // stable form: max(x,0) - x*t + ln(1 + e^-|x|)
            total += (x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()) as f64;
        }
        let node = self.out_of(1, 1, vec![total as f32], &[logits]);
        self.ops.push(Op::BceWithLogitsSum { logits, targets: targets.to_vec(), out: node });
        node
    }

    /// Row lookup: out[i] = table[ids[i]].
    pub fn embed(&mut self, table: Node, ids: &[u32]) -> Node {
        let (v, d) = (self.rows(table), self.cols(table));
        let mut data = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            assert!((id as usize) < v, "embed id {id} out of range {v}");
            data[i * d..(i + 1) * d]
                .copy_from_slice(&self.datas[table.0][id as usize * d..(id as usize + 1) * d]);
        }
        let node = self.out_of(ids.len(), d, data, &[table]);
        self.ops.push(Op::Embed { table, ids: ids.to_vec(), out: node });
        node
    }

    pub fn slice_cols(&mut self, x: Node, start: usize, len: usize) -> Node {
        let (n, d) = (self.rows(x), self.cols(x));
        assert!(start + len <= d);
        let mut data = vec![0.0; n * len];
        for i in 0..n {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&self.datas[x.0][i * d + start..i * d + start + len]);
        }
        let node = self.out_of(n, len, data, &[x]);
        self.ops.push(Op::SliceCols { x, start, len, out: node });
        node
    }

    pub fn concat_cols(&mut self, parts: &[Node]) -> Node {
        let n = self.rows(parts[0]);
        let total: usize = parts.iter().map(|p| self.cols(*p)).sum();
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for &p in parts {
            let d = self.cols(p);
            assert_eq!(self.rows(p), n);
            for i in 0..n {
                data[i * total + off..i * total + off + d]
                    .copy_from_slice(&self.datas[p.0][i * d..(i + 1) * d]);
            }
            off += d;
        }
        let node = self.out_of(n, total, data, parts);
        self.ops.push(Op::ConcatCols { parts: parts.to_vec(), out: node });
        node
    }

    pub fn concat_rows(&mut self, parts: &[Node]) -> Node {
        let d = self.cols(parts[0]);
        let total: usize = parts.iter().map(|p| self.rows(*p)).sum();
        let mut data = Vec::with_capacity(total * d);
        for &p in parts {
            assert_eq!(self.cols(p), d);
            data.extend_from_slice(&self.datas[p.0]);
        }
        let node = self.out_of(total, d, data, parts);
        self.ops.push(Op::ConcatRows { parts: parts.to_vec(), out: node });
        node
    }

    pub fn slice_rows(&mut self, x: Node, start: usize, len: usize) -> Node {
        let (n, d) = (self.rows(x), self.cols(x));
        assert!(start + len <= n);
        let data = self.datas[x.0][start * d..(start + len) * d].to_vec();
        let node = self.out_of(len, d, data, &[x]);
        self.ops.push(Op::SliceRows { x, start, len, out: node });
        node
    }

    /// Rows scaled to unit L2 norm (norm floored at 1e-8).
    pub fn l2_normalize_rows(&mut self, x: Node) -> Node {
        let (n, d) = (self.rows(x), self.cols(x));
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &self.datas[x.0][i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-8);
            for j in 0..d {
                data[i * d + j] = row[j] / norm;
            }
        }
        let node = self.out_of(n, d, data, &[x]);
        self.ops.push(Op::L2NormalizeRows { x, out: node });
        node
    }

    pub fn sum_all(&mut self, x: Node) -> Node {
        let s: f32 = self.datas[x.0].iter().sum();
        let node = self.out_of(1, 1, vec![s], &[x]);
        self.ops.push(Op::SumAll { x, out: node });
        node
    }

    pub fn mean_all(&mut self, x: Node) -> Node {
        let n = self.datas[x.0].len();
        let s: f32 = self.datas[x.0].iter().sum::<f32>() / n as f32;
        let node = self.out_of(1, 1, vec![s], &[x]);
        self.ops.push(Op::MeanAll { x, out: node });
        node
    }

    /// 2-D convolution via im2col. `x` is [batch, in_c*in_h*in_w] with
    /// channel-major images; `w` is [out_c, in_c*k*k]; `bias` is 1x[out_c].
    /// Output is [batch, out_c*out_h*out_w], channel-major.
    pub fn conv2d(&mut self, x: Node, w: Node, bias: Node, shape: ConvShape) -> Node {
        let (oh, ow) = (shape.out_h(), shape.out_w());
        let p = oh * ow;
        let k = shape.patch_len();
        assert_eq!(self.cols(x), shape.in_c * shape.in_h * shape.in_w);
        assert_eq!(self.rows(x), shape.batch);
        assert_eq!(self.rows(w), shape.out_c);
        assert_eq!(self.cols(w), k);
        let mut cols = vec![0.0; shape.batch * p * k];
        let mut data = vec![0.0; shape.batch * shape.out_c * p];
        for img in 0..shape.batch {
            let xi = &self.datas[x.0][img * self.cols(x)..(img + 1) * self.cols(x)];
            let ci = &mut cols[img * p * k..(img + 1) * p * k];
            im2col(xi, shape, ci);
            // out_img[out_c, p] = w @ cols^T
            let oi = &mut data[img * shape.out_c * p..(img + 1) * shape.out_c * p];
            gemm(shape.out_c, k, p, 1.0, &self.datas[w.0], false, ci, true, 0.0, oi);
            for oc in 0..shape.out_c {
                let b = self.datas[bias.0][oc];
                for v in &mut oi[oc * p..(oc + 1) * p] {
                    *v += b;
                }
            }
        }
        let node = self.out_of(shape.batch, shape.out_c * p, data, &[x, w, bias]);
        self.ops.push(Op::Conv2d { x, w, bias, out: node, shape, cols });
        node
    }

    // ── backward ────────────────────────────────────────────────────────

    fn ensure_grad(&mut self, n: Node) {
        if self.grads[n.0].is_none() {
            self.grads[n.0] = Some(vec![0.0; self.datas[n.0].len()]);
        }
    }

    fn wants(&self, n: Node) -> bool {
        self.bufs[n.0].needs_grad
    }

    /// Accumulate gradients of `loss` (a scalar) into every buffer with
    /// `needs_grad`.
    pub fn backward(&mut self, loss: Node) {
        assert_eq!(self.datas[loss.0].len(), 1, "backward target must be scalar");
        self.ensure_grad(loss);
        self.grads[loss.0].as_mut().unwrap()[0] = 1.0;
        for oi in (0..self.ops.len()).rev() {
            self.backward_op(oi);
        }
    }

    fn backward_op(&mut self, oi: usize) {
        // Ops are receipt-ordered SSA: outputs are unique, inputs precede
        // outputs. Take the op out to appease the borrow checker; Conv2d
        // carries its im2col buffer along.
        let op = std::mem::replace(&mut self.ops[oi], Op::SumAll { x: Node(0), out: Node(0) });
        match &op {
            Op::Matmul { a, b, out, ta, tb } => {
                if self.grads[out.0].is_some() {
                    self.backward_matmul(*a, *b, *out, *ta, *tb);
                }
            }
            Op::Add { a, b, out } => {
                if let Some(go) = self.grads[out.0].take() {
                    for &n in &[*a, *b] {
                        if self.wants(n) {
                            self.ensure_grad(n);
                            let g = self.grads[n.0].as_mut().unwrap();
                            for (gi, &gv) in g.iter_mut().zip(&go) {
                                *gi += gv;
                            }
                        }
                    }
                    self.grads[out.0] = Some(go);
                }
            }
            Op::Sub { a, b, out } => {
                if let Some(go) = self.grads[out.0].take() {
                    if self.wants(*a) {
                        self.ensure_grad(*a);
                        let g = self.grads[a.0].as_mut().unwrap();
                        for (gi, &gv) in g.iter_mut().zip(&go) {
                            *gi += gv;
                        }
                    }
                    if self.wants(*b) {
                        self.ensure_grad(*b);
                        let g = self.grads[b.0].as_mut().unwrap();
                        for (gi, &gv) in g.iter_mut().zip(&go) {
                            *gi -= gv;
                        }
                    }
                    self.grads[out.0] = Some(go);
                }
            }
            Op::Mul { a, b, out } => {
                if let Some(go) = self.grads[out.0].take() {
                    if self.wants(*a) {
                        let bd = self.datas[b.0].clone();
                        self.ensure_grad(*a);
                        let g = self.grads[a.0].as_mut().unwrap();
                        for i in 0..go.len() {
                            g[i] += go[i] * bd[i];
                        }
                    }
                    if self.wants(*b) {
                        let ad = self.datas[a.0].clone();
                        self.ensure_grad(*b);
                        let g = self.grads[b.0].as_mut().unwrap();
                        for i in 0..go.len() {
                            g[i] += go[i] * ad[i];
                        }
                    }
                    self.grads[out.0] = Some(go);
                }
            }
            Op::AddRow { x, row, out } => {
                if let Some(go) = self.grads[out.0].take() {
                    let d = self.cols(*x);
                    if self.wants(*x) {
                        self.ensure_grad(*x);
                        let g = self.grads[x.0].as_mut().unwrap();
                        for (gi, &gv) in g.iter_mut().zip(&go) {
                            *gi += gv;
                        }
                    }
                    if self.wants(*row) {
                        self.ensure_grad(*row);
                        let g = self.grads[row.0].as_mut().unwrap();
                        for (i, &gv) in go.iter().enumerate() {
                            g[i % d] += gv;
                        }
                    }
                    self.grads[out.0] = Some(go);
                }
            }
            Op::MulRow { x, row, out } => {
                if let Some(go) = self.grads[out.0].take() {
                    let d = self.cols(*x);
                    if self.wants(*x) {
                        let rd = self.datas[row.0].clone();
                        self.ensure_grad(*x);
                        let g = self.grads[x.0].as_mut().unwrap();
                        for (i, &gv) in go.iter().enumerate() {
                            g[i] += gv * rd[i % d];
                        }
                    }
                    if self.wants(*row) {
                        let xd = self.datas[x.0].clone();
                        self.ensure_grad(*row);
                        let g = self.grads[row.0].as_mut().unwrap();
                        for (i, &gv) in go.iter().enumerate() {
                            g[i % d] += gv * xd[i];
                        }
                    }
                    self.grads[out.0] = Some(go);
                }
            }
            Op::Scale { x, c, out } => {
                if let Some(go) = self.grads[out.0].take() {
                    if self.wants(*x) {
                        self.ensure_grad(*x);
                        let g = self.grads[x.0].as_mut().unwrap();
                        for (gi, &gv) in g.iter_mut().zip(&go) {
                            *gi += c * gv;
                        }
                    }
                    self.grads[out.0] = Some(go);
                }
            }
            Op::AddScaled { a, b, cb, out } => {
                if let Some(go) = self.grads[out.0].take() {
                    if self.wants(*a) {
                        self.ensure_grad(*a);
                        let g = self.grads[a.0].as_mut().unwrap();
                        for (gi, &gv) in g.iter_mut().zip(&go) {
                            *gi += gv;
                        }
                    }
                    if self.wants(*b) {
                        self.ensure_grad(*b);
                        let g = self.grads[b.0].as_mut().unwrap();
                        for (gi, &gv) in g.iter_mut().zip(&go) {
                            *gi += cb * gv;
                        }
                    }
                    self.grads[out.0] = Some(go);
                }
            }
            Op::AffineConst { x, mul, out } => {
                if let Some(go) = self.grads[out.0].take() {
                    if self.wants(*x) {
                        self.ensure_grad(*x);
                        let g = self.grads[x.0].as_mut().unwrap();
                        for (gi, &gv) in g.iter_mut().zip(&go) {
                            *gi += mul * gv;
                        }
                    }
                    self.grads[out.0] = Some(go);
                }
            }
            Op::Relu { x, out } => {
                self.unary_backward(*x, *out, |xi, _yi, gv| if xi > 0.0 { gv } else { 0.0 });
            }
            Op::Gelu { x, out } => {
                self.unary_backward(*x, *out, |xi, _yi, gv| gv * gelu_grad(xi));
            }
            Op::Tanh { x, out } => {
                self.unary_backward(*x, *out, |_xi, yi, gv| gv * (1.0 - yi * yi));
            }
            Op::Sigmoid { x, out } => {
                self.unary_backward(*x, *out, |_xi, yi, gv| gv * yi * (1.0 - yi));
            }
            Op::Exp { x, out } => {
                self.unary_backward(*x, *out, |_xi, yi, gv| gv * yi);
            }
            Op::LayerNorm { x, eps, out } => {
                if let Some(go) = self.grads[out.0].take() {
                    if self.wants(*x) {
                        let (n, d) = (self.rows(*x), self.cols(*x));
                        let xd = self.datas[x.0].clone();
                        let yd = self.datas[out.0].clone();
                        self.ensure_grad(*x);
                        let g = self.grads[x.0].as_mut().unwrap();
                        for i in 0..n {
                            let xr = &xd[i * d..(i + 1) * d];
                            let yr = &yd[i * d..(i + 1) * d];
                            let gr = &go[i * d..(i + 1) * d];
                            let mean = xr.iter().sum::<f32>() / d as f32;
                            let var =
                                xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
                            let inv = 1.0 / (var + eps).sqrt();
                            let mg = gr.iter().sum::<f32>() / d as f32;
                            let mgy =
                                gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                            for j in 0..d {
                                g[i * d + j] += inv * (gr[j] - mg - yr[j] * mgy);
                            }
                        }
                    }
                    self.grads[out.0] = Some(go);
                }
            }
            Op::SoftmaxRows { x, out } => {
                if let Some(go) = self.grads[out.0].take() {
                    if self.wants(*x) {
                        let (n, d) = (self.rows(*x), self.cols(*x));
                        let yd = self.datas[out.0].clone();
                        self.ensure_grad(*x);
                        let g = self.grads[x.0].as_mut().unwrap();
                        for i in 0..n {
                            let yr = &yd[i * d..(i + 1) * d];
                            let gr = &go[i * d..(i + 1) * d];
                            let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..d {
                                g[i * d + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                    self.grads[out.0] = Some(go);
                }
            }
            Op::LogSoftmaxRows { x, out } => {
                if let Some(go) = self.grads[out.0].take() {
                    if self.wants(*x) {
                        let (n, d) = (self.rows(*x), self.cols(*x));
                        let yd = self.datas[out.0].clone();
                        self.ensure_grad(*x);
                        let g = self.grads[x.0].as_mut().unwrap();
                        for i in 0..n {
                            let yr = &yd[i * d..(i + 1) * d];
                            let gr = &go[i * d..(i + 1) * d];
                            let gsum: f32 = gr.iter().sum();
                            for j in 0..d {
                                g[i * d + j] += gr[j] - yr[j].exp() * gsum;
                            }
                        }
                    }
                    self.grads[out.0] = Some(go);
                }
            }
            Op::CrossEntropySum { logits, targets, weights, out } => {
                if let Some(go) = self.grads[out.0].take() {
                    if self.wants(*logits) {
                        let gscale = go[0];
                        let (n, v) = (self.rows(*logits), self.cols(*logits));
                        let ld = self.datas[logits.0].clone();
                        self.ensure_grad(*logits);
                        let g = self.grads[logits.0].as_mut().unwrap();
                        let mut probs = vec![0.0f32; v];
                        for i in 0..n {
                            let w = weights.as_ref().map_or(1.0, |w| w[i]);
                            if w == 0.0 {
                                continue;
                            }
                            softmax_into(&ld[i * v..(i + 1) * v], &mut probs);
                            for j in 0..v {
                                g[i * v + j] += gscale * w * probs[j];
                            }
                            g[i * v + targets[i] as usize] -= gscale * w;
                        }
                    }
                    self.grads[out.0] = Some(go);
                }
            }
            Op::BceWithLogitsSum { logits, targets, out } => {
                if let Some(go) = self.grads[out.0].take() {
                    if self.wants(*logits) {
                        let gscale = go[0];
                        let ld = self.datas[logits.0].clone();
                        self.ensure_grad(*logits);
                        let g = self.grads[logits.0].as_mut().unwrap();
                        for i in 0..ld.len() {
                            g[i] += gscale * (sigmoid_fwd(ld[i]) - targets[i]);
                        }
                    }
                    self.grads[out.0] = Some(go);
                }
            }
            Op::Embed { table, ids, out } => {
                if let Some(go) = self.grads[out.0].take() {
                    if self.wants(*table) {
                        let d = self.cols(*table);
                        self.ensure_grad(*table);
                        let g = self.grads[table.0].as_mut().unwrap();
                        for (i, &id) in ids.iter().enumerate() {
                            let dst = &mut g[id as usize * d..(id as usize + 1) * d];
                            for (dj, &gv) in dst.iter_mut().zip(&go[i * d..(i + 1) * d]) {
                                *dj += gv;
                            }
                        }
                    }
                    self.grads[out.0] = Some(go);
                }
            }
            Op::SliceCols { x, start, len, out } => {
                if let Some(go) = self.grads[out.0].take() {
                    if self.wants(*x) {
                        let (n, d) = (self.rows(*x), self.cols(*x));
                        self.ensure_grad(*x);
                        let g = self.grads[x.0].as_mut().unwrap();
                        for i in 0..n {
                            for j in 0..*len {
                                g[i * d + start + j] += go[i * len + j];
                            }
                        }
                    }
                    self.grads[out.0] = Some(go);
                }
            }
            Op::ConcatCols { parts, out } => {
                if let Some(go) = self.grads[out.0].take() {
                    let n = self.rows(*out);
                    let total = self.cols(*out);
                    let mut off = 0;
                    for &p in parts {
                        let d = self.cols(p);
                        if self.wants(p) {
                            self.ensure_grad(p);
                            let g = self.grads[p.0].as_mut().unwrap();
                            for i in 0..n {
                                for j in 0..d {
                                    g[i * d + j] += go[i * total + off + j];
                                }
                            }
                        }
                        off += d;
                    }
                    self.grads[out.0] = Some(go);
                }
            }
            Op::ConcatRows { parts, out } => {
                if let Some(go) = self.grads[out.0].take() {
                    let d = self.cols(*out);
                    let mut row = 0;
                    for &p in parts {
                        let pr = self.rows(p);
                        if self.wants(p) {
                            self.ensure_grad(p);
                            let g = self.grads[p.0].as_mut().unwrap();
                            for (gi, &gv) in
                                g.iter_mut().zip(&go[row * d..(row + pr) * d])
                            {
                                *gi += gv;
                            }
                        }
                        row += pr;
                    }
                    self.grads[out.0] = Some(go);
                }
            }
            Op::SliceRows { x, start, len, out } => {
                if let Some(go) = self.grads[out.0].take() {
                    if self.wants(*x) {
                        let d = self.cols(*x);
                        self.ensure_grad(*x);
                        let g = self.grads[x.0].as_mut().unwrap();
                        for (gi, &gv) in
                            g[start * d..(start + len) * d].iter_mut().zip(&go)
                        {
                            *gi += gv;
                        }
                    }
                    self.grads[out.0] = Some(go);
                }
            }
            Op::L2NormalizeRows { x, out } => {
                if let Some(go) = self.grads[out.0].take() {
                    if self.wants(*x) {
                        let (n, d) = (self.rows(*x), self.cols(*x));
                        let xd = self.datas[x.0].clone();
                        let yd = self.datas[out.0].clone();
                        self.ensure_grad(*x);
                        let g = self.grads[x.0].as_mut().unwrap();
                        for i in 0..n {
                            let xr = &xd[i * d..(i + 1) * d];
                            let yr = &yd[i * d..(i + 1) * d];
                            let gr = &go[i * d..(i + 1) * d];
                            let norm = xr.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-8);
                            let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..d {
                                g[i * d + j] += (gr[j] - yr[j] * dot) / norm;
                            }
                        }
                    }
                    self.grads[out.0] = Some(go);
                }
            }
            Op::SumAll { x, out } => {
                if let Some(go) = self.grads[out.0].take() {
                    if self.wants(*x) {
                        self.ensure_grad(*x);
                        let g = self.grads[x.0].as_mut().unwrap();
                        for gi in g.iter_mut() {
                            *gi += go[0];
                        }
                    }
                    self.grads[out.0] = Some(go);
                }
            }
            Op::MeanAll { x, out } => {
                if let Some(go) = self.grads[out.0].take() {
                    if self.wants(*x) {
                        self.ensure_grad(*x);
                        let g = self.grads[x.0].as_mut().unwrap();
                        let c = go[0] / g.len() as f32;
                        for gi in g.iter_mut() {
                            *gi += c;
                        }
                    }
                    self.grads[out.0] = Some(go);
                }
            }
            Op::Conv2d { x, w, bias, out, shape, cols } => {
                if let Some(go) = self.grads[out.0].take() {
                    self.backward_conv2d(*x, *w, *bias, &go, *shape, cols);
                    self.grads[out.0] = Some(go);
                }
            }
        }
        self.ops[oi] = op;
    }

    fn unary_backward(&mut self, x: Node, out: Node, f: impl Fn(f32, f32, f32) -> f32) {
        if let Some(go) = self.grads[out.0].take() {
            if self.wants(x) {
                let xd = self.datas[x.0].clone();
                let yd = self.datas[out.0].clone();
                self.ensure_grad(x);
                let g = self.grads[x.0].as_mut().unwrap();
                for i in 0..go.len() {
                    g[i] += f(xd[i], yd[i], go[i]);
                }
            }
            self.grads[out.0] = Some(go);
        }
    }

    fn backward_matmul(&mut self, a: Node, b: Node, out: Node, ta: bool, tb: bool) {
        let go = self.grads[out.0].take().unwrap();
        let (m, n) = (self.rows(out), self.cols(out));
        let k = if ta { self.rows(a) } else { self.cols(a) };
        if self.wants(a) {
            let bd = self.datas[b.0].clone();
            self.ensure_grad(a);
            let g = self.grads[a.0].as_mut().unwrap();
            match (ta, tb) {
                // C = A B        dA = dC B^T
                (false, false) => gemm(m, n, k, 1.0, &go, false, &bd, true, 1.0, g),
                // C = A B^T      dA = dC B
                (false, true) => gemm(m, n, k, 1.0, &go, false, &bd, false, 1.0, g),
                // C = A^T B      dA = B dC^T
                (true, false) => gemm(k, n, m, 1.0, &bd, false, &go, true, 1.0, g),
                // C = A^T B^T    dA = B^T dC^T
                (true, true) => gemm(k, n, m, 1.0, &bd, true, &go, true, 1.0, g),
            }
        }
        if self.wants(b) {
            let ad = self.datas[a.0].clone();
            self.ensure_grad(b);
            let g = self.grads[b.0].as_mut().unwrap();
            match (ta, tb) {
                // dB = A^T dC
                (false, false) => gemm(k, m, n, 1.0, &ad, true, &go, false, 1.0, g),
                // C = A B^T   dB = dC^T A
                (false, true) => gemm(n, m, k, 1.0, &go, true, &ad, false, 1.0, g),
                // C = A^T B   dB = A dC
                (true, false) => gemm(k, m, n, 1.0, &ad, false, &go, false, 1.0, g),
                // C = A^T B^T dB = dC^T A^T
                (true, true) => gemm(n, m, k, 1.0, &go, true, &ad, true, 1.0, g),
            }
        }
        self.grads[out.0] = Some(go);
    }

    fn backward_conv2d(
        &mut self,
        x: Node,
        w: Node,
        bias: Node,
        go: &[f32],
        shape: ConvShape,
        cols: &[f32],
    ) {
        let p = shape.out_h() * shape.out_w();
        let k = shape.patch_len();
        let xc = self.cols(x);
        if self.wants(bias) {
            self.ensure_grad(bias);
            let g = self.grads[bias.0].as_mut().unwrap();
            for img in 0..shape.batch {
                for oc in 0..shape.out_c {
                    let base = img * shape.out_c * p + oc * p;
                    g[oc] += go[base..base + p].iter().sum::<f32>();
                }
            }
        }
        if self.wants(w) {
            self.ensure_grad(w);
            let mut gw = self.grads[w.0].take().unwrap();
            for img in 0..shape.batch {
                let goi = &go[img * shape.out_c * p..(img + 1) * shape.out_c * p];
                let ci = &cols[img * p * k..(img + 1) * p * k];
                // dW[out_c,k] += dout[out_c,p] @ cols[p,k]
                gemm(shape.out_c, p, k, 1.0, goi, false, ci, false, 1.0, &mut gw);
            }
            self.grads[w.0] = Some(gw);
        }
        if self.wants(x) {
            self.ensure_grad(x);
            let wd = self.datas[w.0].clone();
            let mut gx = self.grads[x.0].take().unwrap();
            let mut dcols = vec![0.0; p * k];
            for img in 0..shape.batch {
                let goi = &go[img * shape.out_c * p..(img + 1) * shape.out_c * p];
                // dcols[p,k] = dout^T[p,out_c] @ W[out_c,k]
                gemm(p, shape.out_c, k, 1.0, goi, true, &wd, false, 0.0, &mut dcols);
                col2im_acc(&dcols, shape, &mut gx[img * xc..(img + 1) * xc]);
            }
            self.grads[x.0] = Some(gx);
        }
    }
}

// ── kernels ─────────────────────────────────────────────────────────────

/// C[m,n] = alpha * op(A) @ op(B) + beta * C with row-major storage.
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(img: &[f32], s: ConvShape, cols: &mut [f32]) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let mut idx = 0;
    for oy in 0..oh {
        for ox in 0..ow {
            for c in 0..s.in_c {
                for ky in 0..s.kernel {
                    for kx in 0..s.kernel {
                        let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        cols[idx] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < s.in_h
                            && (ix as usize) < s.in_w
                        {
                            img[c * s.in_h * s.in_w + iy as usize * s.in_w + ix as usize]
                        } else {
                            0.0
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

fn col2im_acc(dcols: &[f32], s: ConvShape, dimg: &mut [f32]) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let mut idx = 0;
    for oy in 0..oh {
        for ox in 0..ow {
            for c in 0..s.in_c {
                for ky in 0..s.kernel {
                    for kx in 0..s.kernel {
                        let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < s.in_h && (ix as usize) < s.in_w {
                            dimg[c * s.in_h * s.in_w + iy as usize * s.in_w + ix as usize] +=
                                dcols[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

pub fn softmax_into(row: &[f32], out: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn log_sum_exp(row: &[f32]) -> f32 {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln()
}

fn gelu_fwd(x: f32) -> f32 {
    const C0: f32 = 0.797_884_6;
    const C1: f32 = 0.044715;
    0.5 * x * (1.0 + (C0 * (x + C1 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    const C0: f32 = 0.797_884_6;
    const C1: f32 = 0.044715;
    let u = C0 * (x + C1 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C0 * (1.0 + 3.0 * C1 * x * x)
}

fn sigmoid_fwd(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_stream;
    use rand::Rng;

    // Central finite differences on a scalar closure.
    fn finite_diff(f: &mut dyn FnMut(&[f32]) -> f32, x: &[f32], eps: f32) -> Vec<f32> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + eps;
            let fp = f(&xp);
            xp[i] = x[i] - eps;
            let fm = f(&xp);
            xp[i] = x[i];
            g[i] = (fp - fm) / (2.0 * eps);
        }
        g
    }

    // Relative error between gradient vectors: ||a-b|| / max(||a||, ||b||).
    // Elementwise comparison at f32 cannot resolve entries near the finite
    // difference noise floor, so the norm ratio is the meaningful metric.
    fn norm_rel_err(a: &[f32], b: &[f32]) -> f32 {
        let diff: f32 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt();
        let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
        let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
        diff / na.max(nb).max(1e-12)
    }

    #[test]
    fn matmul_matches_reference() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut g = Graph::new();
        let na = g.leaf(2, 3, &a, false);
        let nb = g.leaf(3, 2, &b, false);
        let nc = g.matmul(na, nb);
        assert_eq!(g.value(nc), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_matmuls_agree_with_explicit_transpose() {
        let mut rng = rng_stream(11, "t");
        let a: Vec<f32> = (0..12).map(|_| rng.gen::<f32>() - 0.5).collect(); // 3x4
        let b: Vec<f32> = (0..12).map(|_| rng.gen::<f32>() - 0.5).collect(); // 3x4
        let mut g = Graph::new();
        let na = g.leaf(3, 4, &a, false);
        let nb = g.leaf(3, 4, &b, false);
        let tb = g.matmul_tb(na, nb); // 3x3
        let ta = g.matmul_ta(na, nb); // 4x4
        for i in 0..3 {
            for j in 0..3 {
                let want: f32 = (0..4).map(|k| a[i * 4 + k] * b[j * 4 + k]).sum();
                assert!((g.value(tb)[i * 3 + j] - want).abs() < 1e-5);
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                let want: f32 = (0..3).map(|k| a[k * 4 + i] * b[k * 4 + j]).sum();
                assert!((g.value(ta)[i * 4 + j] - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn square_gradient() {
        // d(x^2)/dx at 3 is 6
        let mut g = Graph::new();
        let x = g.leaf(1, 1, &[3.0], true);
        let y = g.mul(x, x);
        g.backward(y);
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn per_op_gradients_match_finite_differences() {
        let mut rng = rng_stream(5, "fd");
        let x0: Vec<f32> = (0..12).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
        type BuildFn = fn(&mut Graph, Node) -> Node;
        let cases: Vec<(&str, BuildFn)> = vec![
            ("relu", |g, x| g.relu(x)),
            ("gelu", |g, x| g.gelu(x)),
            ("tanh", |g, x| g.tanh(x)),
            ("sigmoid", |g, x| g.sigmoid(x)),
            ("exp", |g, x| g.exp(x)),
            ("layer_norm", |g, x| g.layer_norm(x, 1e-5)),
            ("softmax", |g, x| g.softmax_rows(x)),
            ("log_softmax", |g, x| g.log_softmax_rows(x)),
            ("l2norm", |g, x| g.l2_normalize_rows(x)),
        ];
        // zero-mean, high-contrast weights keep the projected gradient well
        // above the f32 finite-difference noise floor
        let wv: Vec<f32> = (0..12).map(|i| 2.0 * (0.37 * i as f32 + 0.4).sin()).collect();
        for (name, build) in cases {
            let mut eval = |xs: &[f32]| -> f32 {
                let mut g = Graph::new();
                let x = g.leaf(3, 4, xs, false);
                let y = build(&mut g, x);
                let w = g.constant(3, 4, &wv);
                let m = g.mul(y, w);
                let s = g.sum_all(m);
                g.scalar_value(s)
            };
            let fd = finite_diff(&mut eval, &x0, 1e-3);
            let mut g = Graph::new();
            let x = g.leaf(3, 4, &x0, true);
            let y = build(&mut g, x);
            let w = g.constant(3, 4, &wv);
            let m = g.mul(y, w);
            let s = g.sum_all(m);
            g.backward(s);
            let err = norm_rel_err(g.grad(x).unwrap(), &fd);
            assert!(err < 1e-3, "{name}: rel err {err}");
        }
    }

    #[test]
    fn matmul_and_ce_gradients_match_finite_differences() {
        let mut rng = rng_stream(6, "fd2");
        let w0: Vec<f32> = (0..20).map(|_| rng.gen::<f32>() - 0.5).collect(); // 4x5
        let x: Vec<f32> = (0..8).map(|_| rng.gen::<f32>() - 0.5).collect(); // 2x4
        let targets = [1u32, 4u32];
        let mut eval = |ws: &[f32]| -> f32 {
            let mut g = Graph::new();
            let xn = g.leaf(2, 4, &x, false);
            let wn = g.leaf(4, 5, ws, false);
            let logits = g.matmul(xn, wn);
            let loss = g.cross_entropy_sum(logits, &targets, None);
            g.scalar_value(loss)
        };
        let fd = finite_diff(&mut eval, &w0, 1e-3);
        let mut g = Graph::new();
        let xn = g.leaf(2, 4, &x, false);
        let wn = g.leaf(4, 5, &w0, true);
        let logits = g.matmul(xn, wn);
        let loss = g.cross_entropy_sum(logits, &targets, None);
        g.backward(loss);
        let err = norm_rel_err(g.grad(wn).unwrap(), &fd);
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn uniform_logits_ce_is_ln_v() {
        let mut g = Graph::new();
        let logits = g.leaf(1, 8, &[0.0; 8], true);
        let loss = g.cross_entropy_sum(logits, &[3], None);
        assert!((g.scalar_value(loss) - (8.0f32).ln()).abs() < 1e-6);
        g.backward(loss);
        let grad = g.grad(logits).unwrap();
        for (j, &gv) in grad.iter().enumerate() {
            let want = if j == 3 { 1.0 / 8.0 - 1.0 } else { 1.0 / 8.0 };
            assert!((gv - want).abs() < 1e-6);
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = rng_stream(9, "conv");
        let shape = ConvShape {
            batch: 2,
            in_c: 2,
            in_h: 5,
            in_w: 5,
            out_c: 3,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let xs: Vec<f32> = (0..2 * 50).map(|_| rng.gen::<f32>() - 0.5).collect();
        let w0: Vec<f32> = (0..3 * 18).map(|_| rng.gen::<f32>() - 0.5).collect();
        let b0: Vec<f32> = (0..3).map(|_| rng.gen::<f32>() - 0.5).collect();
        let run = |xv: &[f32], wv: &[f32], bv: &[f32], which: usize| -> (f32, Vec<f32>) {
            let mut g = Graph::new();
            let x = g.leaf(2, 50, xv, which == 0);
            let w = g.leaf(3, 18, wv, which == 1);
            let b = g.leaf(1, 3, bv, which == 2);
            let y = g.conv2d(x, w, b, shape);
            let y2 = g.mul(y, y);
            let s = g.sum_all(y2);
            g.backward(s);
            let grad = match which {
                0 => g.grad(x).unwrap().to_vec(),
                1 => g.grad(w).unwrap().to_vec(),
                _ => g.grad(b).unwrap().to_vec(),
            };
            (g.scalar_value(s), grad)
        };
        // check weight grads
        let (_, gw) = run(&xs, &w0, &b0, 1);
        let mut evalw = |wv: &[f32]| run(&xs, wv, &b0, 1).0;
        let fdw = finite_diff(&mut evalw, &w0, 1e-3);
        assert!(norm_rel_err(&gw, &fdw) < 1e-3, "conv weight grads");
        // check input grads
        let (_, gx) = run(&xs, &w0, &b0, 0);
        let mut evalx = |xv: &[f32]| run(xv, &w0, &b0, 0).0;
        let fdx = finite_diff(&mut evalx, &xs, 1e-3);
        assert!(norm_rel_err(&gx, &fdx) < 1e-3, "conv input grads");
        // check bias grads
        let (_, gb) = run(&xs, &w0, &b0, 2);
        let mut evalb = |bv: &[f32]| run(&xs, &w0, bv, 2).0;
        let fdb = finite_diff(&mut evalb, &b0, 1e-3);
        assert!(norm_rel_err(&gb, &fdb) < 1e-3, "conv bias grads");
    }

    #[test]
    fn embed_accumulates_repeated_ids() {
        let mut g = Graph::new();
        let table = g.leaf(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true);
        let e = g.embed(table, &[1, 1, 2]);
        let s = g.sum_all(e);
        g.backward(s);
        assert_eq!(g.grad(table).unwrap(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }
}
