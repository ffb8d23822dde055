//! Dense f32 tensors with reverse-mode differentiation on an arena tape.
//!
//! Tensors are handles into a [`Graph`]; every forward op records enough
//! context to compute exact gradients in [`Graph::backward`]. Shapes are
//! rank 1 or 2 (scalars are `[1]`). Shape violations are programming
//! errors and panic with both shapes in the message.

use std::cell::RefCell;
use std::rc::Rc;

/// Arena of tape nodes. One graph per forward/backward episode; training
/// builds a fresh graph per step, inference simply never calls `backward`.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    AddScalar(usize),
    MulScalar(usize, f32),
    /// (m,n) + (n,) broadcast over rows.
    AddBias(usize, usize),
    /// (m,n) * (n,) broadcast over rows.
    MulBias(usize, usize),
    /// tensor * scalar tensor (len 1).
    Scale(usize, usize),
    Matmul(usize, usize),
    /// A (m,k) x B (n,k)^T -> (m,n).
    MatmulBt(usize, usize),
    Transpose(usize),
    Relu(usize),
    LeakyRelu(usize, f32),
    Exp(usize),
    Log(usize),
    SoftmaxRows(usize),
    MaskedSoftmaxRows(usize, Rc<Vec<bool>>),
    LayerNormRows(usize, f32),
    L2NormalizeRows(usize),
    /// (rows, cols) reduced along `axis`.
    MaxAxis(usize, usize, Vec<usize>),
    MeanAxis(usize, usize),
    SumAll(usize),
    Concat(Vec<usize>, usize),
    /// Slice of the flattened buffer: (src, start).
    Slice(usize, usize),
    Reshape(usize),
    GatherRows(usize, Rc<Vec<usize>>),
    /// e_ij = s_i + t_j.
    OuterSum(usize, usize),
}

/// Handle to a tape node. Cheap to copy; all arithmetic lives on [`Graph`]
/// methods exposed through this handle.
#[derive(Clone, Copy)]
pub struct Tensor<'g> {
    graph: &'g Graph,
    id: usize,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// (rows, cols) view of a rank-1 or rank-2 shape: rank 1 is a single row.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => panic!("expected rank 1 or 2 tensor, got shape {shape:?}"),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, op: Op) -> usize {
        debug_assert_eq!(numel(&shape), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        nodes.len() - 1
    }

    fn tensor(&self, id: usize) -> Tensor<'_> {
        Tensor { graph: self, id }
    }

    /// Constant input: participates in forward only.
    pub fn leaf(&self, data: Vec<f32>, shape: &[usize]) -> Tensor<'_> {
        assert_eq!(
            numel(shape),
            data.len(),
            "leaf shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        let id = self.push(shape.to_vec(), data, false, Op::Leaf);
        self.tensor(id)
    }

    /// Trainable input: receives a gradient buffer during backward.
    pub fn param(&self, data: Vec<f32>, shape: &[usize]) -> Tensor<'_> {
        assert_eq!(
            numel(shape),
            data.len(),
            "param shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        let id = self.push(shape.to_vec(), data, true, Op::Leaf);
        self.tensor(id)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Hash of every non-smooth decision taken during the forward pass:
    /// relu/leaky_relu input signs, max-reduction argmaxes, zero-norm rows.
    /// Two evaluations with equal signatures took the same linear pieces,
    /// so central differences across them are kink-free.
    pub fn activation_signature(&self) -> u64 {
        fn feed(hash: &mut u64, value: u64) {
            *hash ^= value.wrapping_add(0x9e37);
            *hash = hash.wrapping_mul(0x100_0000_01b3);
        }
        let nodes = self.nodes.borrow();
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for node in nodes.iter() {
            match node.op {
                Op::Relu(a) | Op::LeakyRelu(a, _) => {
                    for &v in &nodes[a].data {
                        feed(&mut hash, (v > 0.0) as u64);
                    }
                }
                Op::MaxAxis(a, axis, ref in_shape) => {
                    let (rows, cols) = rows_cols(in_shape);
                    let ad = &nodes[a].data;
                    if axis == 0 {
                        for c in 0..cols {
                            let mut best = 0usize;
                            for r in 1..rows {
                                if ad[r * cols + c] > ad[best * cols + c] {
                                    best = r;
                                }
                            }
                            feed(&mut hash, best as u64);
                        }
                    } else {
                        for r in 0..rows {
                            let mut best = 0usize;
                            for c in 1..cols {
                                if ad[r * cols + c] > ad[r * cols + best] {
                                    best = c;
                                }
                            }
                            feed(&mut hash, best as u64);
                        }
                    }
                }
                Op::L2NormalizeRows(a) => {
                    let (rows, cols) = rows_cols(&nodes[a].shape);
                    for r in 0..rows {
                        let zero = nodes[a].data[r * cols..(r + 1) * cols]
                            .iter()
                            .all(|v| *v == 0.0);
                        feed(&mut hash, zero as u64);
                    }
                }
                _ => {}
            }
        }
        hash
    }

    /// Bytes held by value buffers (plus gradient buffers when present).
    pub fn buffer_bytes(&self) -> usize {
        self.nodes
            .borrow()
            .iter()
            .map(|n| 4 * (n.data.len() + n.grad.as_ref().map_or(0, Vec::len)))
            .sum()
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Populate gradient buffers of everything reachable from `loss`.
    ///
    /// Panics if `loss` is not scalar. Gradients of nodes not on a path to a
    /// `param` leaf are skipped entirely.
    pub fn backward(&self, loss: Tensor<'_>) {
        let mut grads: Vec<Option<Vec<f32>>> = {
            let nodes = self.nodes.borrow();
            let n = &nodes[loss.id];
            assert_eq!(
                numel(&n.shape),
                1,
                "backward requires a scalar loss, got shape {:?}",
                n.shape
            );
            let mut grads: Vec<Option<Vec<f32>>> = vec![None; nodes.len()];
            grads[loss.id] = Some(vec![1.0f32]);
            for id in (0..=loss.id).rev() {
                if grads[id].is_none() || !nodes[id].requires_grad {
                    continue;
                }
                let gout = grads[id].take().expect("just checked");
                backprop(&nodes, &mut grads, id, &gout);
                grads[id] = Some(gout);
            }
            grads
        };
        let mut nodes = self.nodes.borrow_mut();
        for (node, grad) in nodes.iter_mut().zip(grads.drain(..)) {
            if node.requires_grad {
                node.grad = grad;
            }
        }
    }
}

/// Zero-initialized gradient buffer of `pid`, or None when the parent does
/// not require gradients. Parents always precede children on the tape, so
/// the caller's moved-out `gout` never aliases this buffer.
fn grad_buf<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f32>>],
    pid: usize,
) -> Option<&'a mut Vec<f32>> {
    if !nodes[pid].requires_grad {
        return None;
    }
    if grads[pid].is_none() {
        grads[pid] = Some(vec![0.0f32; nodes[pid].data.len()]);
    }
    grads[pid].as_mut()
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f32>>], id: usize, gout: &[f32]) {
    match nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(gin) = grad_buf(nodes, grads, a) {
                for (gi, gv) in gin.iter_mut().zip(gout) {
                    *gi += gv;
                }
            }
            if let Some(gin) = grad_buf(nodes, grads, b) {
                for (gi, gv) in gin.iter_mut().zip(gout) {
                    *gi += gv;
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(gin) = grad_buf(nodes, grads, a) {
                for (gi, gv) in gin.iter_mut().zip(gout) {
                    *gi += gv;
                }
            }
            if let Some(gin) = grad_buf(nodes, grads, b) {
                for (gi, gv) in gin.iter_mut().zip(gout) {
                    *gi -= gv;
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(gin) = grad_buf(nodes, grads, a) {
                let bd = &nodes[b].data;
                for i in 0..gin.len() {
                    gin[i] += gout[i] * bd[i];
                }
            }
            if let Some(gin) = grad_buf(nodes, grads, b) {
                let ad = &nodes[a].data;
                for i in 0..gin.len() {
                    gin[i] += gout[i] * ad[i];
                }
            }
        }
        Op::Neg(a) => {
            if let Some(gin) = grad_buf(nodes, grads, a) {
                for (gi, gv) in gin.iter_mut().zip(gout) {
                    *gi -= gv;
                }
            }
        }
        Op::AddScalar(a) => {
            if let Some(gin) = grad_buf(nodes, grads, a) {
                for (gi, gv) in gin.iter_mut().zip(gout) {
                    *gi += gv;
                }
            }
        }
        Op::MulScalar(a, c) => {
            if let Some(gin) = grad_buf(nodes, grads, a) {
                for (gi, gv) in gin.iter_mut().zip(gout) {
                    *gi += gv * c;
                }
            }
        }
        Op::AddBias(a, b) => {
            let (rows, cols) = rows_cols(&nodes[a].shape);
            if let Some(gin) = grad_buf(nodes, grads, a) {
                for (gi, gv) in gin.iter_mut().zip(gout) {
                    *gi += gv;
                }
            }
            if let Some(gin) = grad_buf(nodes, grads, b) {
                for r in 0..rows {
                    for c in 0..cols {
                        gin[c] += gout[r * cols + c];
                    }
                }
            }
        }
        Op::MulBias(a, b) => {
            let (rows, cols) = rows_cols(&nodes[a].shape);
            if let Some(gin) = grad_buf(nodes, grads, a) {
                let bd = &nodes[b].data;
                for r in 0..rows {
                    for c in 0..cols {
                        gin[r * cols + c] += gout[r * cols + c] * bd[c];
                    }
                }
            }
            if let Some(gin) = grad_buf(nodes, grads, b) {
                let ad = &nodes[a].data;
                for r in 0..rows {
                    for c in 0..cols {
                        gin[c] += gout[r * cols + c] * ad[r * cols + c];
                    }
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(gin) = grad_buf(nodes, grads, a) {
                let sv = nodes[s].data[0];
                for (gi, gv) in gin.iter_mut().zip(gout) {
                    *gi += gv * sv;
                }
            }
            if let Some(gin) = grad_buf(nodes, grads, s) {
                let ad = &nodes[a].data;
                let mut acc = 0.0f32;
                for i in 0..ad.len() {
                    acc += gout[i] * ad[i];
                }
                gin[0] += acc;
            }
        }
        Op::Matmul(a, b) => {
            // C = A (m,k) @ B (k,n); dA = dC @ B^T, dB = A^T @ dC.
            let (m, k) = rows_cols(&nodes[a].shape);
            let n = rows_cols(&nodes[b].shape).1;
            if let Some(gin) = grad_buf(nodes, grads, a) {
                matmul_bt_kernel(gout, &nodes[b].data, m, k, n, gin);
            }
            if let Some(gin) = grad_buf(nodes, grads, b) {
                matmul_at_kernel(&nodes[a].data, gout, m, k, n, gin);
            }
        }
        Op::MatmulBt(a, b) => {
            // C = A (m,k) @ B (n,k)^T; dA = dC @ B, dB = dC^T @ A.
            let (m, k) = rows_cols(&nodes[a].shape);
            let n = rows_cols(&nodes[b].shape).0;
            if let Some(gin) = grad_buf(nodes, grads, a) {
                matmul_kernel(gout, &nodes[b].data, m, n, k, gin);
            }
            if let Some(gin) = grad_buf(nodes, grads, b) {
                matmul_at_kernel(gout, &nodes[a].data, m, n, k, gin);
            }
        }
        Op::Transpose(a) => {
            let (rows, cols) = rows_cols(&nodes[a].shape);
            if let Some(gin) = grad_buf(nodes, grads, a) {
                for r in 0..rows {
                    for c in 0..cols {
                        gin[r * cols + c] += gout[c * rows + r];
                    }
                }
            }
        }
        Op::Relu(a) => {
            if let Some(gin) = grad_buf(nodes, grads, a) {
                let ad = &nodes[a].data;
                for i in 0..gin.len() {
                    if ad[i] > 0.0 {
                        gin[i] += gout[i];
                    }
                }
            }
        }
        Op::LeakyRelu(a, slope) => {
            if let Some(gin) = grad_buf(nodes, grads, a) {
                let ad = &nodes[a].data;
                for i in 0..gin.len() {
                    gin[i] += gout[i] * if ad[i] > 0.0 { 1.0 } else { slope };
                }
            }
        }
        Op::Exp(a) => {
            if let Some(gin) = grad_buf(nodes, grads, a) {
                let out = &nodes[id].data;
                for i in 0..gin.len() {
                    gin[i] += gout[i] * out[i];
                }
            }
        }
        Op::Log(a) => {
            if let Some(gin) = grad_buf(nodes, grads, a) {
                let ad = &nodes[a].data;
                for i in 0..gin.len() {
                    gin[i] += gout[i] / ad[i];
                }
            }
        }
        Op::SoftmaxRows(a) => {
            let (rows, cols) = rows_cols(&nodes[id].shape);
            if let Some(gin) = grad_buf(nodes, grads, a) {
                let out = &nodes[id].data;
                for r in 0..rows {
                    let o = &out[r * cols..(r + 1) * cols];
                    let gr = &gout[r * cols..(r + 1) * cols];
                    let dot: f32 = o.iter().zip(gr).map(|(y, gy)| y * gy).sum();
                    for c in 0..cols {
                        gin[r * cols + c] += o[c] * (gr[c] - dot);
                    }
                }
            }
        }
        Op::MaskedSoftmaxRows(a, ref mask) => {
            let (rows, cols) = rows_cols(&nodes[id].shape);
            if let Some(gin) = grad_buf(nodes, grads, a) {
                let out = &nodes[id].data;
                for r in 0..rows {
                    let o = &out[r * cols..(r + 1) * cols];
                    let gr = &gout[r * cols..(r + 1) * cols];
                    let mr = &mask[r * cols..(r + 1) * cols];
                    let mut dot = 0.0f32;
                    for c in 0..cols {
                        if mr[c] {
                            dot += o[c] * gr[c];
                        }
                    }
                    for c in 0..cols {
                        if mr[c] {
                            gin[r * cols + c] += o[c] * (gr[c] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNormRows(a, eps) => {
            let (rows, cols) = rows_cols(&nodes[a].shape);
            if let Some(gin) = grad_buf(nodes, grads, a) {
                let ad = &nodes[a].data;
                let nf = cols as f32;
                for r in 0..rows {
                    let x = &ad[r * cols..(r + 1) * cols];
                    let gr = &gout[r * cols..(r + 1) * cols];
                    let mean = x.iter().sum::<f32>() / nf;
                    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / nf;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f32> = x.iter().map(|v| (v - mean) * inv_std).collect();
                    let mean_g = gr.iter().sum::<f32>() / nf;
                    let mean_gx = gr.iter().zip(&xhat).map(|(gy, xh)| gy * xh).sum::<f32>() / nf;
                    for c in 0..cols {
                        gin[r * cols + c] += inv_std * (gr[c] - mean_g - xhat[c] * mean_gx);
                    }
                }
            }
        }
        Op::L2NormalizeRows(a) => {
            let (rows, cols) = rows_cols(&nodes[a].shape);
            if let Some(gin) = grad_buf(nodes, grads, a) {
                let ad = &nodes[a].data;
                let out = &nodes[id].data;
                for r in 0..rows {
                    let x = &ad[r * cols..(r + 1) * cols];
                    let y = &out[r * cols..(r + 1) * cols];
                    let gr = &gout[r * cols..(r + 1) * cols];
                    let norm = x.iter().map(|v| v * v).sum::<f32>().sqrt();
                    if norm == 0.0 {
                        continue; // zero rows map to zero; gradient defined as zero
                    }
                    let dot: f32 = y.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for c in 0..cols {
                        gin[r * cols + c] += (gr[c] - y[c] * dot) / norm;
                    }
                }
            }
        }
        Op::MaxAxis(a, axis, ref in_shape) => {
            let (rows, cols) = rows_cols(in_shape);
            if let Some(gin) = grad_buf(nodes, grads, a) {
                let ad = &nodes[a].data;
                if axis == 0 {
                    for c in 0..cols {
                        let mut best = 0usize;
                        for r in 1..rows {
                            if ad[r * cols + c] > ad[best * cols + c] {
                                best = r;
                            }
                        }
                        gin[best * cols + c] += gout[c];
                    }
                } else {
                    for r in 0..rows {
                        let mut best = 0usize;
                        for c in 1..cols {
                            if ad[r * cols + c] > ad[r * cols + best] {
                                best = c;
                            }
                        }
                        gin[r * cols + best] += gout[r];
                    }
                }
            }
        }
        Op::MeanAxis(a, axis) => {
            let (rows, cols) = rows_cols(&nodes[a].shape);
            if let Some(gin) = grad_buf(nodes, grads, a) {
                if axis == 0 {
                    let inv = 1.0 / rows as f32;
                    for r in 0..rows {
                        for c in 0..cols {
                            gin[r * cols + c] += gout[c] * inv;
                        }
                    }
                } else {
                    let inv = 1.0 / cols as f32;
                    for r in 0..rows {
                        for c in 0..cols {
                            gin[r * cols + c] += gout[r] * inv;
                        }
                    }
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(gin) = grad_buf(nodes, grads, a) {
                for gi in gin.iter_mut() {
                    *gi += gout[0];
                }
            }
        }
        Op::Concat(ref parts, axis) => {
            if axis == 0 {
                let mut offset = 0usize;
                for &p in parts {
                    let len = nodes[p].data.len();
                    if let Some(gin) = grad_buf(nodes, grads, p) {
                        for i in 0..len {
                            gin[i] += gout[offset + i];
                        }
                    }
                    offset += len;
                }
            } else {
                let (out_rows, out_cols) = rows_cols(&nodes[id].shape);
                let mut col_off = 0usize;
                for &p in parts {
                    let pc = rows_cols(&nodes[p].shape).1;
                    if let Some(gin) = grad_buf(nodes, grads, p) {
                        for r in 0..out_rows {
                            for c in 0..pc {
                                gin[r * pc + c] += gout[r * out_cols + col_off + c];
                            }
                        }
                    }
                    col_off += pc;
                }
            }
        }
        Op::Slice(a, start) => {
            if let Some(gin) = grad_buf(nodes, grads, a) {
                for (i, gv) in gout.iter().enumerate() {
                    gin[start + i] += gv;
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(gin) = grad_buf(nodes, grads, a) {
                for (gi, gv) in gin.iter_mut().zip(gout) {
                    *gi += gv;
                }
            }
        }
        Op::GatherRows(a, ref idx) => {
            let cols = rows_cols(&nodes[a].shape).1;
            if let Some(gin) = grad_buf(nodes, grads, a) {
                for (out_r, &src_r) in idx.iter().enumerate() {
                    for c in 0..cols {
                        gin[src_r * cols + c] += gout[out_r * cols + c];
                    }
                }
            }
        }
        Op::OuterSum(s, t) => {
            let (m, n) = rows_cols(&nodes[id].shape);
            if let Some(gin) = grad_buf(nodes, grads, s) {
                for i in 0..m {
                    let mut acc = 0.0f32;
                    for j in 0..n {
                        acc += gout[i * n + j];
                    }
                    gin[i] += acc;
                }
            }
            if let Some(gin) = grad_buf(nodes, grads, t) {
                for j in 0..n {
                    let mut acc = 0.0f32;
                    for i in 0..m {
                        acc += gout[i * n + j];
                    }
                    gin[j] += acc;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// matmul kernels (also used by backward)
// ---------------------------------------------------------------------------

/// Dot product with 8 independent accumulators so the sum vectorizes.
#[inline]
fn dot_slices(x: &[f32], y: &[f32]) -> f32 {
    let lanes = 8;
    let head = x.len() - x.len() % lanes;
    let mut acc = [0.0f32; 8];
    let (xh, xt) = x.split_at(head);
    let (yh, yt) = y.split_at(head);
    for (xc, yc) in xh.chunks_exact(lanes).zip(yh.chunks_exact(lanes)) {
        for u in 0..lanes {
            acc[u] += xc[u] * yc[u];
        }
    }
    let mut tail = 0.0f32;
    for (xv, yv) in xt.iter().zip(yt) {
        tail += xv * yv;
    }
    acc.iter().sum::<f32>() + tail
}

/// C (m,n) += A (m,k) @ B (k,n). ikj order so the inner loop runs over
/// contiguous rows of B and C.
pub(crate) fn matmul_kernel(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il == 0.0 {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += a_il * bv;
            }
        }
    }
}

/// C (m,n) += A (m,k) @ B (n,k)^T: contiguous row dots.
pub(crate) fn matmul_bt_kernel(a: &[f32], b: &[f32], m: usize, n: usize, k: usize, out: &mut [f32]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot_slices(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// C (k,n) += A (m,k)^T @ B (m,n): axpy over contiguous rows of B.
pub(crate) fn matmul_at_kernel(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il == 0.0 {
                continue;
            }
            let out_row = &mut out[l * n..(l + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += a_il * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// forward ops
// ---------------------------------------------------------------------------

impl<'g> Tensor<'g> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn shape(self) -> Vec<usize> {
        self.graph.shape_of(self.id)
    }

    pub fn value(self) -> Vec<f32> {
        self.graph.nodes.borrow()[self.id].data.clone()
    }

    /// Scalar value of a length-1 tensor.
    pub fn item(self) -> f32 {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        assert_eq!(n.data.len(), 1, "item() on shape {:?}", n.shape);
        n.data[0]
    }

    pub fn grad(self) -> Option<Vec<f32>> {
        self.graph.nodes.borrow()[self.id].grad.clone()
    }

    fn binary_same_shape<F>(self, other: Tensor<'g>, op_name: &str, f: F) -> (Vec<usize>, Vec<f32>)
    where
        F: Fn(f32, f32) -> f32,
    {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let b = &nodes[other.id];
        assert_eq!(
            a.shape, b.shape,
            "shape mismatch in {op_name}: left {:?}, right {:?}",
            a.shape, b.shape
        );
        let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
        (a.shape.clone(), data)
    }

    fn unary<F>(self, op: Op, f: F) -> Tensor<'g>
    where
        F: Fn(&[f32]) -> Vec<f32>,
    {
        let (shape, data, req) = {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), f(&n.data), n.requires_grad)
        };
        let id = self.graph.push(shape, data, req, op);
        self.graph.tensor(id)
    }

    pub fn add(self, other: Tensor<'g>) -> Tensor<'g> {
        let (shape, data) = self.binary_same_shape(other, "add", |x, y| x + y);
        let req = self.graph.requires(self.id) || self.graph.requires(other.id);
        let id = self.graph.push(shape, data, req, Op::Add(self.id, other.id));
        self.graph.tensor(id)
    }

    pub fn sub(self, other: Tensor<'g>) -> Tensor<'g> {
        let (shape, data) = self.binary_same_shape(other, "sub", |x, y| x - y);
        let req = self.graph.requires(self.id) || self.graph.requires(other.id);
        let id = self.graph.push(shape, data, req, Op::Sub(self.id, other.id));
        self.graph.tensor(id)
    }

    pub fn mul(self, other: Tensor<'g>) -> Tensor<'g> {
        let (shape, data) = self.binary_same_shape(other, "mul", |x, y| x * y);
        let req = self.graph.requires(self.id) || self.graph.requires(other.id);
        let id = self.graph.push(shape, data, req, Op::Mul(self.id, other.id));
        self.graph.tensor(id)
    }

    pub fn neg(self) -> Tensor<'g> {
        self.unary(Op::Neg(self.id), |d| d.iter().map(|x| -x).collect())
    }

    pub fn add_scalar(self, c: f32) -> Tensor<'g> {
        self.unary(Op::AddScalar(self.id), |d| d.iter().map(|x| x + c).collect())
    }

    pub fn mul_scalar(self, c: f32) -> Tensor<'g> {
        self.unary(Op::MulScalar(self.id, c), |d| d.iter().map(|x| x * c).collect())
    }

    /// (m,n) + (n,) broadcast over rows.
    pub fn add_bias(self, bias: Tensor<'g>) -> Tensor<'g> {
        let g = self.graph;
        let (shape, data) = {
            let nodes = g.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[bias.id];
            let (rows, cols) = rows_cols(&a.shape);
            assert_eq!(
                b.shape,
                vec![cols],
                "shape mismatch in add_bias: left {:?}, right {:?}",
                a.shape,
                b.shape
            );
            let mut data = a.data.clone();
            for r in 0..rows {
                for c in 0..cols {
                    data[r * cols + c] += b.data[c];
                }
            }
            (a.shape.clone(), data)
        };
        let req = g.requires(self.id) || g.requires(bias.id);
        let id = g.push(shape, data, req, Op::AddBias(self.id, bias.id));
        g.tensor(id)
    }

    /// (m,n) * (n,) broadcast over rows.
    pub fn mul_bias(self, scale: Tensor<'g>) -> Tensor<'g> {
        let g = self.graph;
        let (shape, data) = {
            let nodes = g.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[scale.id];
            let (rows, cols) = rows_cols(&a.shape);
            assert_eq!(
                b.shape,
                vec![cols],
                "shape mismatch in mul_bias: left {:?}, right {:?}",
                a.shape,
                b.shape
            );
            let mut data = a.data.clone();
            for r in 0..rows {
                for c in 0..cols {
                    data[r * cols + c] *= b.data[c];
                }
            }
            (a.shape.clone(), data)
        };
        let req = g.requires(self.id) || g.requires(scale.id);
        let id = g.push(shape, data, req, Op::MulBias(self.id, scale.id));
        g.tensor(id)
    }

    /// Multiply by a scalar tensor (length 1); gradient flows to both.
    pub fn scale_by(self, s: Tensor<'g>) -> Tensor<'g> {
        let g = self.graph;
        let (shape, data) = {
            let nodes = g.nodes.borrow();
            let a = &nodes[self.id];
            let sv = &nodes[s.id];
            assert_eq!(
                sv.data.len(),
                1,
                "shape mismatch in scale_by: left {:?}, right {:?}",
                a.shape,
                sv.shape
            );
            let c = sv.data[0];
            (a.shape.clone(), a.data.iter().map(|x| x * c).collect())
        };
        let req = g.requires(self.id) || g.requires(s.id);
        let id = g.push(shape, data, req, Op::Scale(self.id, s.id));
        g.tensor(id)
    }

    /// (m,k) @ (k,n) -> (m,n).
    pub fn matmul(self, other: Tensor<'g>) -> Tensor<'g> {
        let g = self.graph;
        let (m, k, n, data) = {
            let nodes = g.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            let (m, ka) = rows_cols(&a.shape);
            let (kb, n) = rows_cols(&b.shape);
            assert_eq!(
                ka, kb,
                "shape mismatch in matmul: left {:?}, right {:?}",
                a.shape, b.shape
            );
            let mut data = vec![0.0f32; m * n];
            matmul_kernel(&a.data, &b.data, m, ka, n, &mut data);
            (m, ka, n, data)
        };
        let _ = k;
        let req = g.requires(self.id) || g.requires(other.id);
        let id = g.push(vec![m, n], data, req, Op::Matmul(self.id, other.id));
        g.tensor(id)
    }

    /// (m,k) @ (n,k)^T -> (m,n): pairwise row dots.
    pub fn matmul_bt(self, other: Tensor<'g>) -> Tensor<'g> {
        let g = self.graph;
        let (m, n, data) = {
            let nodes = g.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            let (m, ka) = rows_cols(&a.shape);
            let (n, kb) = rows_cols(&b.shape);
            assert_eq!(
                ka, kb,
                "shape mismatch in matmul_bt: left {:?}, right {:?}",
                a.shape, b.shape
            );
            let mut data = vec![0.0f32; m * n];
            matmul_bt_kernel(&a.data, &b.data, m, n, ka, &mut data);
            (m, n, data)
        };
        let req = g.requires(self.id) || g.requires(other.id);
        let id = g.push(vec![m, n], data, req, Op::MatmulBt(self.id, other.id));
        g.tensor(id)
    }

    pub fn transpose(self) -> Tensor<'g> {
        let g = self.graph;
        let (rows, cols, data) = {
            let nodes = g.nodes.borrow();
            let a = &nodes[self.id];
            let (rows, cols) = rows_cols(&a.shape);
            let mut data = vec![0.0f32; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    data[c * rows + r] = a.data[r * cols + c];
                }
            }
            (rows, cols, data)
        };
        let req = g.requires(self.id);
        let id = g.push(vec![cols, rows], data, req, Op::Transpose(self.id));
        g.tensor(id)
    }

    pub fn relu(self) -> Tensor<'g> {
        self.unary(Op::Relu(self.id), |d| d.iter().map(|x| x.max(0.0)).collect())
    }

    pub fn leaky_relu(self, slope: f32) -> Tensor<'g> {
        self.unary(Op::LeakyRelu(self.id, slope), move |d| {
            d.iter().map(|x| if *x > 0.0 { *x } else { slope * x }).collect()
        })
    }

    pub fn exp(self) -> Tensor<'g> {
        self.unary(Op::Exp(self.id), |d| d.iter().map(|x| x.exp()).collect())
    }

    pub fn log(self) -> Tensor<'g> {
        self.unary(Op::Log(self.id), |d| d.iter().map(|x| x.ln()).collect())
    }

    fn softmax_rows_raw(self) -> Tensor<'g> {
        let g = self.graph;
        let (shape, data) = {
            let nodes = g.nodes.borrow();
            let a = &nodes[self.id];
            let (rows, cols) = rows_cols(&a.shape);
            let mut data = vec![0.0f32; rows * cols];
            for r in 0..rows {
                let row = &a.data[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f32;
                for c in 0..cols {
                    let e = (row[c] - max).exp();
                    data[r * cols + c] = e;
                    sum += e;
                }
                for c in 0..cols {
                    data[r * cols + c] /= sum;
                }
            }
            (a.shape.clone(), data)
        };
        let req = g.requires(self.id);
        let id = g.push(shape, data, req, Op::SoftmaxRows(self.id));
        g.tensor(id)
    }

    /// Softmax along `axis` (rank-1 tensors use axis 0 over the whole vector).
    pub fn softmax(self, axis: usize) -> Tensor<'g> {
        let rank = self.shape().len();
        if rank == 1 || axis == 1 {
            self.softmax_rows_raw()
        } else {
            self.transpose().softmax_rows_raw().transpose()
        }
    }

    /// Row softmax restricted to `mask` entries; unmasked outputs are zero.
    /// Rows with an all-false mask yield all zeros.
    pub fn masked_softmax(self, mask: &[bool]) -> Tensor<'g> {
        let g = self.graph;
        let (shape, data) = {
            let nodes = g.nodes.borrow();
            let a = &nodes[self.id];
            assert_eq!(
                mask.len(),
                a.data.len(),
                "mask length {} does not match tensor shape {:?}",
                mask.len(),
                a.shape
            );
            let (rows, cols) = rows_cols(&a.shape);
            let mut data = vec![0.0f32; rows * cols];
            for r in 0..rows {
                let row = &a.data[r * cols..(r + 1) * cols];
                let mrow = &mask[r * cols..(r + 1) * cols];
                let mut max = f32::NEG_INFINITY;
                for c in 0..cols {
                    if mrow[c] && row[c] > max {
                        max = row[c];
                    }
                }
                if max == f32::NEG_INFINITY {
                    continue;
                }
                let mut sum = 0.0f32;
                for c in 0..cols {
                    if mrow[c] {
                        let e = (row[c] - max).exp();
                        data[r * cols + c] = e;
                        sum += e;
                    }
                }
                for c in 0..cols {
                    if mrow[c] {
                        data[r * cols + c] /= sum;
                    }
                }
            }
            (a.shape.clone(), data)
        };
        let req = g.requires(self.id);
        let id = g.push(
            shape,
            data,
            req,
            Op::MaskedSoftmaxRows(self.id, Rc::new(mask.to_vec())),
        );
        g.tensor(id)
    }

    /// Per-row normalization to zero mean / unit variance (no affine part).
    pub fn layer_norm(self, eps: f32) -> Tensor<'g> {
        let g = self.graph;
        let (shape, data) = {
            let nodes = g.nodes.borrow();
            let a = &nodes[self.id];
            let (rows, cols) = rows_cols(&a.shape);
            let nf = cols as f32;
            let mut data = vec![0.0f32; rows * cols];
            for r in 0..rows {
                let x = &a.data[r * cols..(r + 1) * cols];
                let mean = x.iter().sum::<f32>() / nf;
                let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / nf;
                let inv_std = 1.0 / (var + eps).sqrt();
                for c in 0..cols {
                    data[r * cols + c] = (x[c] - mean) * inv_std;
                }
            }
            (a.shape.clone(), data)
        };
        let req = g.requires(self.id);
        let id = g.push(shape, data, req, Op::LayerNormRows(self.id, eps));
        g.tensor(id)
    }

    /// Per-row L2 normalization; zero rows stay zero.
    pub fn l2_normalize(self) -> Tensor<'g> {
        let g = self.graph;
        let (shape, data) = {
            let nodes = g.nodes.borrow();
            let a = &nodes[self.id];
            let (rows, cols) = rows_cols(&a.shape);
            let mut data = vec![0.0f32; rows * cols];
            for r in 0..rows {
                let x = &a.data[r * cols..(r + 1) * cols];
                let norm = x.iter().map(|v| v * v).sum::<f32>().sqrt();
                if norm > 0.0 {
                    for c in 0..cols {
                        data[r * cols + c] = x[c] / norm;
                    }
                }
            }
            (a.shape.clone(), data)
        };
        let req = g.requires(self.id);
        let id = g.push(shape, data, req, Op::L2NormalizeRows(self.id));
        g.tensor(id)
    }

    /// Reduce a rank-2 tensor along `axis` by maximum.
    pub fn max_axis(self, axis: usize) -> Tensor<'g> {
        let g = self.graph;
        assert!(axis < 2, "max_axis axis must be 0 or 1");
        let (in_shape, out_shape, data) = {
            let nodes = g.nodes.borrow();
            let a = &nodes[self.id];
            assert_eq!(a.shape.len(), 2, "max_axis expects rank 2, got {:?}", a.shape);
            let (rows, cols) = rows_cols(&a.shape);
            if axis == 0 {
                let mut data = vec![f32::NEG_INFINITY; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let v = a.data[r * cols + c];
                        if v > data[c] {
                            data[c] = v;
                        }
                    }
                }
                (a.shape.clone(), vec![cols], data)
            } else {
                let mut data = vec![f32::NEG_INFINITY; rows];
                for r in 0..rows {
                    for c in 0..cols {
                        let v = a.data[r * cols + c];
                        if v > data[r] {
                            data[r] = v;
                        }
                    }
                }
                (a.shape.clone(), vec![rows], data)
            }
        };
        let req = g.requires(self.id);
        let id = g.push(out_shape, data, req, Op::MaxAxis(self.id, axis, in_shape));
        g.tensor(id)
    }

    /// Reduce a rank-2 tensor along `axis` by arithmetic mean.
    pub fn mean_axis(self, axis: usize) -> Tensor<'g> {
        let g = self.graph;
        assert!(axis < 2, "mean_axis axis must be 0 or 1");
        let (out_shape, data) = {
            let nodes = g.nodes.borrow();
            let a = &nodes[self.id];
            assert_eq!(a.shape.len(), 2, "mean_axis expects rank 2, got {:?}", a.shape);
            let (rows, cols) = rows_cols(&a.shape);
            if axis == 0 {
                let mut data = vec![0.0f32; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        data[c] += a.data[r * cols + c];
                    }
                }
                for v in data.iter_mut() {
                    *v /= rows as f32;
                }
                (vec![cols], data)
            } else {
                let mut data = vec![0.0f32; rows];
                for r in 0..rows {
                    for c in 0..cols {
                        data[r] += a.data[r * cols + c];
                    }
                }
                for v in data.iter_mut() {
                    *v /= cols as f32;
                }
                (vec![rows], data)
            }
        };
        let req = g.requires(self.id);
        let id = g.push(out_shape, data, req, Op::MeanAxis(self.id, axis));
        g.tensor(id)
    }

    /// Sum all entries into a scalar (shape `[1]`).
    pub fn sum_all(self) -> Tensor<'g> {
        let g = self.graph;
        let total = {
            let nodes = g.nodes.borrow();
            nodes[self.id].data.iter().sum::<f32>()
        };
        let req = g.requires(self.id);
        let id = g.push(vec![1], vec![total], req, Op::SumAll(self.id));
        g.tensor(id)
    }

    pub fn mean_all(self) -> Tensor<'g> {
        let n = numel(&self.shape()) as f32;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Elementwise dot product reduced to a scalar.
    pub fn dot(self, other: Tensor<'g>) -> Tensor<'g> {
        self.mul(other).sum_all()
    }

    /// Slice `len` entries of the flattened buffer starting at `start`.
    pub fn slice(self, start: usize, len: usize) -> Tensor<'g> {
        let g = self.graph;
        let data = {
            let nodes = g.nodes.borrow();
            let a = &nodes[self.id];
            assert!(
                start + len <= a.data.len(),
                "slice [{start}, {}) out of bounds for shape {:?}",
                start + len,
                a.shape
            );
            a.data[start..start + len].to_vec()
        };
        let req = g.requires(self.id);
        let id = g.push(vec![len], data, req, Op::Slice(self.id, start));
        g.tensor(id)
    }

    pub fn reshape(self, shape: &[usize]) -> Tensor<'g> {
        let g = self.graph;
        let data = {
            let nodes = g.nodes.borrow();
            let a = &nodes[self.id];
            assert_eq!(
                numel(shape),
                a.data.len(),
                "reshape to {:?} from shape {:?}",
                shape,
                a.shape
            );
            a.data.clone()
        };
        let req = g.requires(self.id);
        let id = g.push(shape.to_vec(), data, req, Op::Reshape(self.id));
        g.tensor(id)
    }

    /// Select rows of a rank-2 tensor; duplicate indices are allowed.
    pub fn gather_rows(self, indices: &[usize]) -> Tensor<'g> {
        let g = self.graph;
        let (cols, data) = {
            let nodes = g.nodes.borrow();
            let a = &nodes[self.id];
            let (rows, cols) = rows_cols(&a.shape);
            let mut data = Vec::with_capacity(indices.len() * cols);
            for &r in indices {
                assert!(r < rows, "gather_rows index {r} out of bounds for shape {:?}", a.shape);
                data.extend_from_slice(&a.data[r * cols..(r + 1) * cols]);
            }
            (cols, data)
        };
        let req = g.requires(self.id);
        let id = g.push(
            vec![indices.len(), cols],
            data,
            req,
            Op::GatherRows(self.id, Rc::new(indices.to_vec())),
        );
        g.tensor(id)
    }

    /// Pairwise sums: out[i][j] = self[i] + other[j] for rank-1 inputs.
    pub fn outer_sum(self, other: Tensor<'g>) -> Tensor<'g> {
        let g = self.graph;
        let (m, n, data) = {
            let nodes = g.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            assert!(
                a.shape.len() == 1 && b.shape.len() == 1,
                "shape mismatch in outer_sum: left {:?}, right {:?}",
                a.shape,
                b.shape
            );
            let m = a.shape[0];
            let n = b.shape[0];
            let mut data = vec![0.0f32; m * n];
            for i in 0..m {
                for j in 0..n {
                    data[i * n + j] = a.data[i] + b.data[j];
                }
            }
            (m, n, data)
        };
        let req = g.requires(self.id) || g.requires(other.id);
        let id = g.push(vec![m, n], data, req, Op::OuterSum(self.id, other.id));
        g.tensor(id)
    }
}

/// Concatenate along `axis` (0 stacks rows, 1 joins columns).
pub fn concat<'g>(parts: &[Tensor<'g>], axis: usize) -> Tensor<'g> {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let g = parts[0].graph;
    let ids: Vec<usize> = parts.iter().map(|t| t.id).collect();
    let (shape, data, req) = {
        let nodes = g.nodes.borrow();
        let req = ids.iter().any(|&i| nodes[i].requires_grad);
        if axis == 0 {
            let cols = rows_cols(&nodes[ids[0]].shape).1;
            let mut rows = 0usize;
            let mut data = Vec::new();
            for &i in &ids {
                let (r, c) = rows_cols(&nodes[i].shape);
                assert_eq!(
                    c, cols,
                    "shape mismatch in concat axis 0: {:?} vs {:?}",
                    nodes[ids[0]].shape, nodes[i].shape
                );
                rows += r;
                data.extend_from_slice(&nodes[i].data);
            }
            (vec![rows, cols], data, req)
        } else {
            let rows = rows_cols(&nodes[ids[0]].shape).0;
            let widths: Vec<usize> = ids
                .iter()
                .map(|&i| {
                    let (r, c) = rows_cols(&nodes[i].shape);
                    assert_eq!(
                        r, rows,
                        "shape mismatch in concat axis 1: {:?} vs {:?}",
                        nodes[ids[0]].shape, nodes[i].shape
                    );
                    c
                })
                .collect();
            let total: usize = widths.iter().sum();
            let mut data = vec![0.0f32; rows * total];
            let mut off = 0usize;
            for (part, &w) in ids.iter().zip(&widths) {
                let pd = &nodes[*part].data;
                for r in 0..rows {
                    data[r * total + off..r * total + off + w]
                        .copy_from_slice(&pd[r * w..(r + 1) * w]);
                }
                off += w;
            }
            (vec![rows, total], data, req)
        }
    };
    let id = g.push(shape, data, req, Op::Concat(ids, axis));
    g.tensor(id)
}

/// Stack rank-1 tensors of equal length into a rank-2 tensor, one per row.
pub fn stack_rows<'g>(rows: &[Tensor<'g>]) -> Tensor<'g> {
    assert!(!rows.is_empty(), "stack_rows of zero tensors");
    let reshaped: Vec<Tensor<'g>> = rows
        .iter()
        .map(|t| {
            let n = numel(&t.shape());
            t.reshape(&[1, n])
        })
        .collect();
    concat(&reshaped, 0)
}

/// x @ w + b for x (m,in), w (in,out), b (out,).
pub fn linear<'g>(x: Tensor<'g>, w: Tensor<'g>, b: Tensor<'g>) -> Tensor<'g> {
    x.matmul(w).add_bias(b)
}
