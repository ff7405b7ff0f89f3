//! Reverse-mode differentiation over an eagerly evaluated op tape.
//!
//! Nodes are appended in topological order; `backward` walks the tape in
//! reverse and accumulates exact analytic gradients into every node that
//! (transitively) requires them.

use super::kernels;
use super::tensor::Tensor;
use super::{shape_err, TensorError};
use crate::scalar::Scalar;

pub type NodeId = usize;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Matmul(NodeId, NodeId),
    Bmm(NodeId, NodeId),
    /// a[B,m,k] · b[B,n,k]ᵀ
    BmmNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Broadcast `bias` over the leading axes of `x`.
    AddBias { x: NodeId, bias: NodeId },
    /// x[b,c,h,w] + bias[c]
    AddChannelBias { x: NodeId, bias: NodeId },
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    Relu(NodeId),
    SoftmaxLast(NodeId),
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    GlobalAvgPool(NodeId),
    MeanAxis1(NodeId),
    Reshape(NodeId),
    /// [a,b,c,d] -> [a,c,b,d]
    SwapAxes12(NodeId),
    /// [b,c,h,w] -> [b, (h/p)·(w/p), c·p·p]
    ExtractPatches { x: NodeId, patch: usize },
    /// [b,g·g,d] -> [b, g²/4, 4d] by 2×2 grouping of the token grid
    MergePatches(NodeId),
    /// Layer norm over the last axis followed by a learned per-feature scale.
    LayerNormScale { x: NodeId, scale: NodeId },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node id.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<S>> {
        self.grads.get_mut(id).and_then(Option::take)
    }
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Insert an input node. `requires_grad` marks trainable leaves.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Insert a non-trainable input.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite value out of {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        kernels::matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            out.data_mut(),
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = Tensor::zeros(&[bsz, m, n]);
        for i in 0..bsz {
            kernels::matmul_acc(
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Bmm(a, b), rg))
    }

    /// a[B,m,k] · b[B,n,k]ᵀ -> [B,m,n]
    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(shape_err("bmm_nt", format!("{sa:?} x {sb:?}")));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = Tensor::zeros(&[bsz, m, n]);
        for i in 0..bsz {
            kernels::matmul_bt_acc(
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * n * k..(i + 1) * n * k],
                m,
                k,
                n,
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::BmmNt(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o + v;
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Broadcast-add `bias` whose shape equals the trailing axes of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sb.len() >= sx.len() || &sx[sx.len() - sb.len()..] != sb {
            return Err(shape_err("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let blen = self.value(bias).len();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_exact_mut(blen) {
            for (o, &v) in chunk.iter_mut().zip(self.value(bias).data()) {
                *o = *o + v;
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddBias { x, bias }, rg))
    }

    /// x[b,c,h,w] + bias[c], broadcast over batch and spatial axes.
    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sx.len() != 4 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(shape_err("add_channel_bias", format!("{sx:?} + {sb:?}")));
        }
        let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let mut out = self.value(x).clone();
        for bi in 0..b {
            for ci in 0..c {
                let bv = self.value(bias).data()[ci];
                for v in &mut out.data_mut()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                    *v = *v + bv;
                }
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddChannelBias { x, bias }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                "mul",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o * v;
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: S) -> NodeId {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.nodes[x].requires_grad;
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(S::zero()));
        let rg = self.nodes[x].requires_grad;
        self.push(out, Op::Relu(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let sx = self.value(x).shape();
        let row = *sx.last().ok_or_else(|| shape_err("softmax", "rank 0".into()))?;
        let mut out = Tensor::zeros(sx);
        kernels::softmax_rows(self.value(x).data(), row, out.data_mut());
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(out, Op::SoftmaxLast(x), rg))
    }

    /// Cross-correlation of x[b,ic,h,w] with w[oc,ic,kh,kw].
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", format!("{sx:?} * {sw:?}")));
        }
        let (b, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (oc, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw || stride == 0 {
            return Err(shape_err("conv2d", format!("kernel {sw:?} on {sx:?} pad {pad}")));
        }
        let oh = kernels::conv_out_len(h, kh, stride, pad);
        let ow = kernels::conv_out_len(wd, kw, stride, pad);
        let patch = c * kh * kw;
        let mut out = Tensor::zeros(&[b, oc, oh, ow]);
        let mut cols = vec![S::zero(); oh * ow * patch];
        for bi in 0..b {
            kernels::im2col(
                &self.value(x).data()[bi * c * h * wd..(bi + 1) * c * h * wd],
                c,
                h,
                wd,
                kh,
                kw,
                stride,
                pad,
                &mut cols,
            );
            // out[oc, oh·ow] = w[oc, patch] · cols[oh·ow, patch]ᵀ
            kernels::matmul_bt_acc(
                self.value(w).data(),
                &cols,
                oc,
                patch,
                oh * ow,
                &mut out.data_mut()[bi * oc * oh * ow..(bi + 1) * oc * oh * ow],
            );
        }
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(out, Op::Conv2d { x, w, stride, pad }, rg))
    }

    /// [b,c,h,w] -> [b,c] mean over the spatial axes.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let sx = self.value(x).shape();
        if sx.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("{sx:?}")));
        }
        let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let inv = S::cast(1.0 / hw as f64);
        let mut out = Tensor::zeros(&[b, c]);
        for i in 0..b * c {
            let sum: S = self.value(x).data()[i * hw..(i + 1) * hw]
                .iter()
                .copied()
                .sum();
            out.data_mut()[i] = sum * inv;
        }
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    /// [b,t,d] -> [b,d] mean over tokens.
    pub fn mean_axis1(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let sx = self.value(x).shape();
        if sx.len() != 3 {
            return Err(shape_err("mean_axis1", format!("{sx:?}")));
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        let inv = S::cast(1.0 / t as f64);
        let mut out = Tensor::zeros(&[b, d]);
        for bi in 0..b {
            for ti in 0..t {
                let row = &self.value(x).data()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                let orow = &mut out.data_mut()[bi * d..(bi + 1) * d];
                for (o, &v) in orow.iter_mut().zip(row) {
                    *o = *o + v * inv;
                }
            }
        }
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(out, Op::MeanAxis1(x), rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// [a,b,c,d] -> [a,c,b,d]
    pub fn swap_axes_1_2(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 4 {
            return Err(shape_err("swap_axes_1_2", format!("{sx:?}")));
        }
        let out = swap12(self.value(x), &sx);
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(out, Op::SwapAxes12(x), rg))
    }

    /// [b,c,h,w] -> [b, (h/p)(w/p), c·p·p]
    pub fn extract_patches(&mut self, x: NodeId, patch: usize) -> Result<NodeId, TensorError> {
        let sx = self.value(x).shape();
        if sx.len() != 4 || patch == 0 || sx[2] % patch != 0 || sx[3] % patch != 0 {
            return Err(shape_err("extract_patches", format!("{sx:?} patch {patch}")));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (gh, gw) = (h / patch, w / patch);
        let feat = c * patch * patch;
        let mut out = Tensor::zeros(&[b, gh * gw, feat]);
        {
            let src = self.value(x).data();
            let dst = out.data_mut();
            for bi in 0..b {
                for gy in 0..gh {
                    for gx in 0..gw {
                        let tok = gy * gw + gx;
                        for ci in 0..c {
                            for py in 0..patch {
                                for px in 0..patch {
                                    let sy = gy * patch + py;
                                    let sx_ = gx * patch + px;
                                    dst[(bi * gh * gw + tok) * feat
                                        + ci * patch * patch
                                        + py * patch
                                        + px] = src[((bi * c + ci) * h + sy) * w + sx_];
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(out, Op::ExtractPatches { x, patch }, rg))
    }

    /// [b, g·g, d] -> [b, g²/4, 4d]: concatenate each 2×2 group of the
    /// row-major token grid.
    pub fn merge_patches(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let sx = self.value(x).shape();
        if sx.len() != 3 {
            return Err(shape_err("merge_patches", format!("{sx:?}")));
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        let g = (t as f64).sqrt().round() as usize;
        if g * g != t || g % 2 != 0 {
            return Err(shape_err(
                "merge_patches",
                format!("token count {t} is not an even square"),
            ));
        }
        let g2 = g / 2;
        let mut out = Tensor::zeros(&[b, g2 * g2, 4 * d]);
        {
            let src = self.value(x).data();
            let dst = out.data_mut();
            for bi in 0..b {
                for my in 0..g2 {
                    for mx in 0..g2 {
                        let mtok = my * g2 + mx;
                        for (quad, (dy, dx)) in
                            [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate()
                        {
                            let stok = (2 * my + dy) * g + (2 * mx + dx);
                            let s = &src[(bi * t + stok) * d..(bi * t + stok + 1) * d];
                            let o = &mut dst[(bi * g2 * g2 + mtok) * 4 * d + quad * d
                                ..(bi * g2 * g2 + mtok) * 4 * d + (quad + 1) * d];
                            o.copy_from_slice(s);
                        }
                    }
                }
            }
        }
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(out, Op::MergePatches(x), rg))
    }

    /// Layer norm over the last axis with a learned per-feature scale.
    pub fn layer_norm_scale(&mut self, x: NodeId, scale: NodeId) -> Result<NodeId, TensorError> {
        let (sx, ss) = (self.value(x).shape(), self.value(scale).shape());
        let d = *sx.last().ok_or_else(|| shape_err("layer_norm", "rank 0".into()))?;
        if ss != [d] {
            return Err(shape_err("layer_norm", format!("{sx:?} with scale {ss:?}")));
        }
        let mut out = Tensor::zeros(sx);
        {
            let src = self.value(x).data();
            let sc = self.value(scale).data();
            for (xr, or) in src.chunks_exact(d).zip(out.data_mut().chunks_exact_mut(d)) {
                let (mean, inv_sd) = row_norm_stats(xr);
                for ((o, &v), &s) in or.iter_mut().zip(xr).zip(sc) {
                    *o = (v - mean) * inv_sd * s;
                }
            }
        }
        let rg = self.any_grad(&[x, scale]);
        Ok(self.push(out, Op::LayerNormScale { x, scale }, rg))
    }

    /// Multi-head scaled dot-product self-attention composed from primitives.
    ///
    /// x[b,t,d] with square projections wq/wk/wv/wo of shape [d,d]; `heads`
    /// must divide d. Softmax runs over the token axis.
    pub fn attention(
        &mut self,
        x: NodeId,
        wq: NodeId,
        wk: NodeId,
        wv: NodeId,
        wo: NodeId,
        heads: usize,
    ) -> Result<NodeId, TensorError> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 3 {
            return Err(shape_err("attention", format!("input {sx:?}")));
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        if heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        for &w in &[wq, wk, wv, wo] {
            if self.value(w).shape() != [d, d] {
                return Err(shape_err(
                    "attention",
                    format!("projection {:?}, want [{d},{d}]", self.value(w).shape()),
                ));
            }
        }
        let dh = d / heads;
        let flat = self.reshape(x, &[b * t, d])?;
        let split = |g: &mut Self, m: NodeId| -> Result<NodeId, TensorError> {
            let r = g.reshape(m, &[b, t, heads, dh])?;
            let s = g.swap_axes_1_2(r)?; // [b, heads, t, dh]
            g.reshape(s, &[b * heads, t, dh])
        };
        let q0 = self.matmul(flat, wq)?;
        let k0 = self.matmul(flat, wk)?;
        let v0 = self.matmul(flat, wv)?;
        let q = split(self, q0)?;
        let k = split(self, k0)?;
        let v = split(self, v0)?;
        let scores = self.bmm_nt(q, k)?;
        let scaled = self.scale(scores, S::cast(1.0 / (dh as f64).sqrt()));
        let attn = self.softmax_last(scaled)?;
        let ctx = self.bmm(attn, v)?;
        let ctx = self.reshape(ctx, &[b, heads, t, dh])?;
        let ctx = self.swap_axes_1_2(ctx)?; // [b, t, heads, dh]
        let ctx = self.reshape(ctx, &[b * t, d])?;
        let out = self.matmul(ctx, wo)?;
        self.reshape(out, &[b, t, d])
    }

    /// Backward pass: seed the gradient at `node` and accumulate analytic
    /// gradients into every reachable node that requires them.
    pub fn backward(&self, node: NodeId, seed: Tensor<S>) -> Result<Gradients<S>, TensorError> {
        if seed.shape() != self.value(node).shape() {
            return Err(shape_err(
                "backward",
                format!(
                    "seed {:?} vs node {:?}",
                    seed.shape(),
                    self.value(node).shape()
                ),
            ));
        }
        // Construction appends nodes in topological order; a parent id at or
        // past its consumer means the tape was corrupted.
        for (id, n) in self.nodes.iter().enumerate() {
            if parent_ids(&n.op).into_iter().any(|p| p >= id) {
                return Err(TensorError::GraphCycle(id));
            }
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[node] = Some(seed);
        for id in (0..=node).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let dy = match self.nodes[id].op {
                Op::Leaf => continue,
                _ => grads[id].clone().expect("grad present"),
            };
            self.backprop_one(id, &dy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_one(&self, id: NodeId, dy: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let n = self.value(b).shape()[1];
                if self.nodes[a].requires_grad {
                    let mut da = self.grad_slot(grads, a);
                    kernels::matmul_bt_acc(dy.data(), self.value(b).data(), m, n, k, da.data_mut());
                    grads[a] = Some(da);
                }
                if self.nodes[b].requires_grad {
                    let mut db = self.grad_slot(grads, b);
                    kernels::matmul_at_acc(self.value(a).data(), dy.data(), m, k, n, db.data_mut());
                    grads[b] = Some(db);
                }
            }
            Op::Bmm(a, b) => {
                let sa = self.value(a).shape();
                let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.value(b).shape()[2];
                if self.nodes[a].requires_grad {
                    let mut da = self.grad_slot(grads, a);
                    for i in 0..bsz {
                        kernels::matmul_bt_acc(
                            &dy.data()[i * m * n..(i + 1) * m * n],
                            &self.value(b).data()[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut da.data_mut()[i * m * k..(i + 1) * m * k],
                        );
                    }
                    grads[a] = Some(da);
                }
                if self.nodes[b].requires_grad {
                    let mut db = self.grad_slot(grads, b);
                    for i in 0..bsz {
                        kernels::matmul_at_acc(
                            &self.value(a).data()[i * m * k..(i + 1) * m * k],
                            &dy.data()[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db.data_mut()[i * k * n..(i + 1) * k * n],
                        );
                    }
                    grads[b] = Some(db);
                }
            }
            Op::BmmNt(a, b) => {
                let sa = self.value(a).shape();
                let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.value(b).shape()[1];
                if self.nodes[a].requires_grad {
                    let mut da = self.grad_slot(grads, a);
                    for i in 0..bsz {
                        kernels::matmul_acc(
                            &dy.data()[i * m * n..(i + 1) * m * n],
                            &self.value(b).data()[i * n * k..(i + 1) * n * k],
                            m,
                            n,
                            k,
                            &mut da.data_mut()[i * m * k..(i + 1) * m * k],
                        );
                    }
                    grads[a] = Some(da);
                }
                if self.nodes[b].requires_grad {
                    let mut db = self.grad_slot(grads, b);
                    for i in 0..bsz {
                        kernels::matmul_at_acc(
                            &dy.data()[i * m * n..(i + 1) * m * n],
                            &self.value(a).data()[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                            &mut db.data_mut()[i * n * k..(i + 1) * n * k],
                        );
                    }
                    grads[b] = Some(db);
                }
            }
            Op::Add(a, b) => {
                for &p in &[a, b] {
                    if self.nodes[p].requires_grad {
                        let mut dp = self.grad_slot(grads, p);
                        for (o, &v) in dp.data_mut().iter_mut().zip(dy.data()) {
                            *o = *o + v;
                        }
                        grads[p] = Some(dp);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if self.nodes[x].requires_grad {
                    let mut dx = self.grad_slot(grads, x);
                    for (o, &v) in dx.data_mut().iter_mut().zip(dy.data()) {
                        *o = *o + v;
                    }
                    grads[x] = Some(dx);
                }
                if self.nodes[bias].requires_grad {
                    let blen = self.value(bias).len();
                    let mut db = self.grad_slot(grads, bias);
                    for chunk in dy.data().chunks_exact(blen) {
                        for (o, &v) in db.data_mut().iter_mut().zip(chunk) {
                            *o = *o + v;
                        }
                    }
                    grads[bias] = Some(db);
                }
            }
            Op::AddChannelBias { x, bias } => {
                if self.nodes[x].requires_grad {
                    let mut dx = self.grad_slot(grads, x);
                    for (o, &v) in dx.data_mut().iter_mut().zip(dy.data()) {
                        *o = *o + v;
                    }
                    grads[x] = Some(dx);
                }
                if self.nodes[bias].requires_grad {
                    let sx = self.value(x).shape();
                    let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                    let mut db = self.grad_slot(grads, bias);
                    for bi in 0..b {
                        for ci in 0..c {
                            let sum: S = dy.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]
                                .iter()
                                .copied()
                                .sum();
                            db.data_mut()[ci] = db.data()[ci] + sum;
                        }
                    }
                    grads[bias] = Some(db);
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a].requires_grad {
                    let mut da = self.grad_slot(grads, a);
                    for ((o, &g), &bv) in
                        da.data_mut().iter_mut().zip(dy.data()).zip(self.value(b).data())
                    {
                        *o = *o + g * bv;
                    }
                    grads[a] = Some(da);
                }
                if self.nodes[b].requires_grad {
                    let mut db = self.grad_slot(grads, b);
                    for ((o, &g), &av) in
                        db.data_mut().iter_mut().zip(dy.data()).zip(self.value(a).data())
                    {
                        *o = *o + g * av;
                    }
                    grads[b] = Some(db);
                }
            }
            Op::Scale(x, factor) => {
                if self.nodes[x].requires_grad {
                    let mut dx = self.grad_slot(grads, x);
                    for (o, &v) in dx.data_mut().iter_mut().zip(dy.data()) {
                        *o = *o + v * factor;
                    }
                    grads[x] = Some(dx);
                }
            }
            Op::Relu(x) => {
                if self.nodes[x].requires_grad {
                    let mut dx = self.grad_slot(grads, x);
                    for ((o, &g), &v) in
                        dx.data_mut().iter_mut().zip(dy.data()).zip(self.value(x).data())
                    {
                        if v > S::zero() {
                            *o = *o + g;
                        }
                    }
                    grads[x] = Some(dx);
                }
            }
            Op::SoftmaxLast(x) => {
                if self.nodes[x].requires_grad {
                    let row = *self.value(id).shape().last().expect("rank>=1");
                    let y = self.value(id).data();
                    let mut dx = self.grad_slot(grads, x);
                    for ((yr, gr), or) in y
                        .chunks_exact(row)
                        .zip(dy.data().chunks_exact(row))
                        .zip(dx.data_mut().chunks_exact_mut(row))
                    {
                        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
                            *o = *o + yv * (gv - dot);
                        }
                    }
                    grads[x] = Some(dx);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let sx = self.value(x).shape();
                let sw = self.value(w).shape();
                let (b, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (oc, kh, kw) = (sw[0], sw[2], sw[3]);
                let oh = kernels::conv_out_len(h, kh, stride, pad);
                let ow = kernels::conv_out_len(wd, kw, stride, pad);
                let patch = c * kh * kw;
                let mut cols = vec![S::zero(); oh * ow * patch];
                let mut dw_opt = if self.nodes[w].requires_grad {
                    Some(self.grad_slot(grads, w))
                } else {
                    None
                };
                let mut dx_opt = if self.nodes[x].requires_grad {
                    Some(self.grad_slot(grads, x))
                } else {
                    None
                };
                let mut dcols = vec![S::zero(); oh * ow * patch];
                for bi in 0..b {
                    let dout = &dy.data()[bi * oc * oh * ow..(bi + 1) * oc * oh * ow];
                    if let Some(dw) = dw_opt.as_mut() {
                        kernels::im2col(
                            &self.value(x).data()[bi * c * h * wd..(bi + 1) * c * h * wd],
                            c,
                            h,
                            wd,
                            kh,
                            kw,
                            stride,
                            pad,
                            &mut cols,
                        );
                        // dW[oc, patch] += dout[oc, oh·ow] · cols[oh·ow, patch]
                        kernels::matmul_acc(dout, &cols, oc, oh * ow, patch, dw.data_mut());
                    }
                    if let Some(dx) = dx_opt.as_mut() {
                        for v in dcols.iter_mut() {
                            *v = S::zero();
                        }
                        // dcols[oh·ow, patch] = doutᵀ[oh·ow, oc] · w[oc, patch]
                        kernels::matmul_at_acc(
                            dout,
                            self.value(w).data(),
                            oc,
                            oh * ow,
                            patch,
                            &mut dcols,
                        );
                        kernels::col2im_acc(
                            &dcols,
                            c,
                            h,
                            wd,
                            kh,
                            kw,
                            stride,
                            pad,
                            &mut dx.data_mut()[bi * c * h * wd..(bi + 1) * c * h * wd],
                        );
                    }
                }
                if let Some(dw) = dw_opt {
                    grads[w] = Some(dw);
                }
                if let Some(dx) = dx_opt {
                    grads[x] = Some(dx);
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.nodes[x].requires_grad {
                    let sx = self.value(x).shape();
                    let hw = sx[2] * sx[3];
                    let inv = S::cast(1.0 / hw as f64);
                    let mut dx = self.grad_slot(grads, x);
                    for (i, &g) in dy.data().iter().enumerate() {
                        for v in &mut dx.data_mut()[i * hw..(i + 1) * hw] {
                            *v = *v + g * inv;
                        }
                    }
                    grads[x] = Some(dx);
                }
            }
            Op::MeanAxis1(x) => {
                if self.nodes[x].requires_grad {
                    let sx = self.value(x).shape();
                    let (b, t, d) = (sx[0], sx[1], sx[2]);
                    let inv = S::cast(1.0 / t as f64);
                    let mut dx = self.grad_slot(grads, x);
                    for bi in 0..b {
                        let grow = &dy.data()[bi * d..(bi + 1) * d];
                        for ti in 0..t {
                            let orow =
                                &mut dx.data_mut()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                            for (o, &g) in orow.iter_mut().zip(grow) {
                                *o = *o + g * inv;
                            }
                        }
                    }
                    grads[x] = Some(dx);
                }
            }
            Op::Reshape(x) => {
                if self.nodes[x].requires_grad {
                    let mut dx = self.grad_slot(grads, x);
                    for (o, &v) in dx.data_mut().iter_mut().zip(dy.data()) {
                        *o = *o + v;
                    }
                    grads[x] = Some(dx);
                }
            }
            Op::SwapAxes12(x) => {
                if self.nodes[x].requires_grad {
                    // Swapping axes 1 and 2 is an involution; push the
                    // gradient through the inverse permutation.
                    let sy = self.value(id).shape().to_vec();
                    let back = swap12(dy, &sy);
                    let mut dx = self.grad_slot(grads, x);
                    for (o, &v) in dx.data_mut().iter_mut().zip(back.data()) {
                        *o = *o + v;
                    }
                    grads[x] = Some(dx);
                }
            }
            Op::ExtractPatches { x, patch } => {
                if self.nodes[x].requires_grad {
                    let sx = self.value(x).shape();
                    let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                    let (gh, gw) = (h / patch, w / patch);
                    let feat = c * patch * patch;
                    let mut dx = self.grad_slot(grads, x);
                    let dst = dx.data_mut();
                    for bi in 0..b {
                        for gy in 0..gh {
                            for gx in 0..gw {
                                let tok = gy * gw + gx;
                                for ci in 0..c {
                                    for py in 0..patch {
                                        for px in 0..patch {
                                            let sy = gy * patch + py;
                                            let sxx = gx * patch + px;
                                            dst[((bi * c + ci) * h + sy) * w + sxx] = dst
                                                [((bi * c + ci) * h + sy) * w + sxx]
                                                + dy.data()[(bi * gh * gw + tok) * feat
                                                    + ci * patch * patch
                                                    + py * patch
                                                    + px];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    grads[x] = Some(dx);
                }
            }
            Op::MergePatches(x) => {
                if self.nodes[x].requires_grad {
                    let sx = self.value(x).shape();
                    let (b, t, d) = (sx[0], sx[1], sx[2]);
                    let g = (t as f64).sqrt().round() as usize;
                    let g2 = g / 2;
                    let mut dx = self.grad_slot(grads, x);
                    let dst = dx.data_mut();
                    for bi in 0..b {
                        for my in 0..g2 {
                            for mx in 0..g2 {
                                let mtok = my * g2 + mx;
                                for (quad, (ddy, ddx)) in
                                    [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate()
                                {
                                    let stok = (2 * my + ddy) * g + (2 * mx + ddx);
                                    let s = &dy.data()[(bi * g2 * g2 + mtok) * 4 * d + quad * d
                                        ..(bi * g2 * g2 + mtok) * 4 * d + (quad + 1) * d];
                                    let o = &mut dst[(bi * t + stok) * d..(bi * t + stok + 1) * d];
                                    for (ov, &sv) in o.iter_mut().zip(s) {
                                        *ov = *ov + sv;
                                    }
                                }
                            }
                        }
                    }
                    grads[x] = Some(dx);
                }
            }
            Op::LayerNormScale { x, scale } => {
                let d = *self.value(x).shape().last().expect("rank>=1");
                let src = self.value(x).data();
                let sc = self.value(scale).data();
                let mut dx_opt = if self.nodes[x].requires_grad {
                    Some(self.grad_slot(grads, x))
                } else {
                    None
                };
                let mut ds_opt = if self.nodes[scale].requires_grad {
                    Some(self.grad_slot(grads, scale))
                } else {
                    None
                };
                let rows = src.len() / d;
                for r in 0..rows {
                    let xr = &src[r * d..(r + 1) * d];
                    let gr = &dy.data()[r * d..(r + 1) * d];
                    let (mean, inv_sd) = row_norm_stats(xr);
                    // norm_j = (x_j - mean) * inv_sd
                    if let Some(ds) = ds_opt.as_mut() {
                        for j in 0..d {
                            let norm = (xr[j] - mean) * inv_sd;
                            ds.data_mut()[j] = ds.data()[j] + gr[j] * norm;
                        }
                    }
                    if let Some(dx) = dx_opt.as_mut() {
                        // dnorm_j = g_j * scale_j; standard layer-norm backward
                        let inv_d = S::cast(1.0 / d as f64);
                        let mut mean_dn = S::zero();
                        let mut mean_dn_norm = S::zero();
                        for j in 0..d {
                            let dn = gr[j] * sc[j];
                            let norm = (xr[j] - mean) * inv_sd;
                            mean_dn = mean_dn + dn;
                            mean_dn_norm = mean_dn_norm + dn * norm;
                        }
                        mean_dn = mean_dn * inv_d;
                        mean_dn_norm = mean_dn_norm * inv_d;
                        let row = &mut dx.data_mut()[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dn = gr[j] * sc[j];
                            let norm = (xr[j] - mean) * inv_sd;
                            row[j] = row[j] + inv_sd * (dn - mean_dn - norm * mean_dn_norm);
                        }
                    }
                }
                if let Some(dx) = dx_opt {
                    grads[x] = Some(dx);
                }
                if let Some(ds) = ds_opt {
                    grads[scale] = Some(ds);
                }
            }
        }
    }

    fn grad_slot(&self, grads: &mut [Option<Tensor<S>>], id: NodeId) -> Tensor<S> {
        grads[id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.value(id).shape()))
    }
}

fn parent_ids<S>(op: &Op<S>) -> Vec<NodeId> {
    match *op {
        Op::Leaf => vec![],
        Op::Matmul(a, b)
        | Op::Bmm(a, b)
        | Op::BmmNt(a, b)
        | Op::Add(a, b)
        | Op::Mul(a, b)
        | Op::AddBias { x: a, bias: b }
        | Op::AddChannelBias { x: a, bias: b }
        | Op::LayerNormScale { x: a, scale: b } => vec![a, b],
        Op::Scale(x, _)
        | Op::Relu(x)
        | Op::SoftmaxLast(x)
        | Op::GlobalAvgPool(x)
        | Op::MeanAxis1(x)
        | Op::Reshape(x)
        | Op::SwapAxes12(x)
        | Op::ExtractPatches { x, .. }
        | Op::MergePatches(x) => vec![x],
        Op::Conv2d { x, w, .. } => vec![x, w],
    }
}

fn swap12<S: Scalar>(t: &Tensor<S>, shape: &[usize]) -> Tensor<S> {
    let (a, b, c, d) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = Tensor::zeros(&[a, c, b, d]);
    {
        let src = t.data();
        let dst = out.data_mut();
        for ai in 0..a {
            for bi in 0..b {
                for ci in 0..c {
                    let s = &src[((ai * b + bi) * c + ci) * d..((ai * b + bi) * c + ci + 1) * d];
                    let o = &mut dst[((ai * c + ci) * b + bi) * d..((ai * c + ci) * b + bi + 1) * d];
                    o.copy_from_slice(s);
                }
            }
        }
    }
    out
}

fn row_norm_stats<S: Scalar>(row: &[S]) -> (S, S) {
    let inv_d = S::cast(1.0 / row.len() as f64);
    let mean = row.iter().copied().sum::<S>() * inv_d;
    let var = row
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<S>()
        * inv_d;
    let inv_sd = S::one() / (var + S::cast(LAYER_NORM_EPS)).sqrt();
    (mean, inv_sd)
}
