//! Define-by-run reverse-mode autodiff tape.
//!
//! Each op records its parents at construction; `backward` walks the tape in
//! reverse creation order, which is a valid topological order. Nodes whose
//! ancestors contain no trainable parameter are skipped during the backward
//! pass, so frozen submodels cost forward time only.

use crate::kernels::{self, ConvDims};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    AddScaled { a: NodeId, b: NodeId, alpha: f64 },
    Affine { x: NodeId, mul: f64 },
    Mul { a: NodeId, b: NodeId },
    AddChanBias { x: NodeId, b: NodeId },
    AddSampleChan { x: NodeId, b: NodeId },
    ScalePerSample { x: NodeId, s: Vec<f64> },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Bmm { a: NodeId, b: NodeId },
    BmmTransB { a: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, dims: ConvDims, batch: usize },
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, stats: Vec<(f64, f64)> },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, stats: Vec<(f64, f64)> },
    Silu { x: NodeId },
    Relu { x: NodeId },
    SoftmaxLast { x: NodeId, d: usize },
    LogClamped { x: NodeId, eps: f64 },
    PowConst { x: NodeId, p: f64 },
    Reshape { x: NodeId },
    Permute { x: NodeId, perm: Vec<usize> },
    Concat { axis: usize, parts: Vec<NodeId> },
    SelectLast { x: NodeId, cols: Vec<usize> },
    Upsample2x { x: NodeId },
    AvgPool { x: NodeId, k: usize },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    MeanAxis { x: NodeId, axis: usize },
    GatherRows { table: NodeId, ids: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn permute_data(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    assert_eq!(perm.len(), rank);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let numel: usize = shape.iter().product();
    let mut out = vec![0.0; numel];
    // stride of the output walk expressed in input coordinates
    let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = x[src];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += walk[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= walk[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, needs_grad });
        id
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, t, false)
    }

    /// Parameter leaf. Gradients flow back into the store only when the
    /// parameter is trainable; frozen parameters act as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let t = store.tensor(id);
        let needs = store.is_trainable(id);
        self.push(Op::Param(id), t, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.add_scaled(a, b, 1.0)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.add_scaled(a, b, -1.0)
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, alpha: f64) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "add_scaled shape mismatch");
        let data: Vec<f64> = ta.iter().zip(tb.iter()).map(|(x, y)| x + alpha * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        let needs = self.ng(a) || self.ng(b);
        self.push(Op::AddScaled { a, b, alpha }, t, needs)
    }

    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let data: Vec<f64> = tx.iter().map(|v| mul * v + add).collect();
        let t = Tensor::new(tx.shape().to_vec(), data);
        let needs = self.ng(x);
        self.push(Op::Affine { x, mul }, t, needs)
    }

    pub fn scale(&mut self, x: NodeId, mul: f64) -> NodeId {
        self.affine(x, mul, 0.0)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data: Vec<f64> = ta.iter().zip(tb.iter()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        let needs = self.ng(a) || self.ng(b);
        self.push(Op::Mul { a, b }, t, needs)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.mul(x, x)
    }

    /// x [B,C,H,W] plus per-channel bias [C].
    pub fn add_chan_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let tb = &self.nodes[b.0].value;
        let sh = tx.shape().to_vec();
        assert_eq!(sh.len(), 4);
        assert_eq!(tb.shape(), &[sh[1]], "channel bias shape");
        let hw = sh[2] * sh[3];
        let mut data = tx.to_vec();
        for bi in 0..sh[0] {
            for c in 0..sh[1] {
                let v = tb.data()[c];
                let o = (bi * sh[1] + c) * hw;
                for e in &mut data[o..o + hw] {
                    *e += v;
                }
            }
        }
        let needs = self.ng(x) || self.ng(b);
        self.push(Op::AddChanBias { x, b }, Tensor::new(sh, data), needs)
    }

    /// x [B,C,H,W] plus per-sample, per-channel bias [B,C].
    pub fn add_sample_chan(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let tb = &self.nodes[b.0].value;
        let sh = tx.shape().to_vec();
        assert_eq!(sh.len(), 4);
        assert_eq!(tb.shape(), &[sh[0], sh[1]], "sample-channel bias shape");
        let hw = sh[2] * sh[3];
        let mut data = tx.to_vec();
        for bi in 0..sh[0] {
            for c in 0..sh[1] {
                let v = tb.data()[bi * sh[1] + c];
                let o = (bi * sh[1] + c) * hw;
                for e in &mut data[o..o + hw] {
                    *e += v;
                }
            }
        }
        let needs = self.ng(x) || self.ng(b);
        self.push(Op::AddSampleChan { x, b }, Tensor::new(sh, data), needs)
    }

    /// Multiply sample b of x by the constant s[b]. First axis is the batch.
    pub fn scale_per_sample(&mut self, x: NodeId, s: Vec<f64>) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let sh = tx.shape().to_vec();
        assert_eq!(sh[0], s.len(), "per-sample scale length");
        let stride = tx.numel() / sh[0];
        let mut data = tx.to_vec();
        for (bi, &sv) in s.iter().enumerate() {
            for e in &mut data[bi * stride..(bi + 1) * stride] {
                *e *= sv;
            }
        }
        let needs = self.ng(x);
        self.push(Op::ScalePerSample { x, s }, Tensor::new(sh, data), needs)
    }

    /// x [..., K] times w [O, K] transposed, plus optional bias [O].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let tw = &self.nodes[w.0].value;
        let k = *tx.shape().last().unwrap();
        assert_eq!(tw.shape().len(), 2);
        assert_eq!(tw.shape()[1], k, "linear in-dim mismatch");
        let o = tw.shape()[0];
        let m = tx.numel() / k;
        let mut data = vec![0.0; m * o];
        kernels::gemm_nt(m, k, o, 1.0, tx.data(), tw.data(), 0.0, &mut data);
        if let Some(bid) = b {
            let tb = &self.nodes[bid.0].value;
            assert_eq!(tb.shape(), &[o], "linear bias shape");
            for row in data.chunks_exact_mut(o) {
                for (e, bv) in row.iter_mut().zip(tb.iter()) {
                    *e += bv;
                }
            }
        }
        let mut sh = tx.shape().to_vec();
        *sh.last_mut().unwrap() = o;
        let needs = self.ng(x) || self.ng(w) || b.map(|bb| self.ng(bb)).unwrap_or(false);
        self.push(Op::Linear { x, w, b }, Tensor::new(sh, data), needs)
    }

    /// Batched matmul [N,m,k] x [N,k,n] -> [N,m,n].
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1], "bmm shapes {:?} {:?}", sa, sb);
        let (nb, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![0.0; nb * m * n];
        for i in 0..nb {
            kernels::gemm_nn(m, k, n, 1.0, &ta.data()[i * m * k..(i + 1) * m * k], &tb.data()[i * k * n..(i + 1) * k * n], 0.0, &mut data[i * m * n..(i + 1) * m * n]);
        }
        let needs = self.ng(a) || self.ng(b);
        self.push(Op::Bmm { a, b }, Tensor::new(vec![nb, m, n], data), needs)
    }

    /// Batched matmul with transposed right side: [N,m,k] x [N,n,k] -> [N,m,n].
    pub fn bmm_trans_b(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[2], "bmm_t shapes {:?} {:?}", sa, sb);
        let (nb, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut data = vec![0.0; nb * m * n];
        for i in 0..nb {
            kernels::gemm_nt(m, k, n, 1.0, &ta.data()[i * m * k..(i + 1) * m * k], &tb.data()[i * n * k..(i + 1) * n * k], 0.0, &mut data[i * m * n..(i + 1) * m * n]);
        }
        let needs = self.ng(a) || self.ng(b);
        self.push(Op::BmmTransB { a, b }, Tensor::new(vec![nb, m, n], data), needs)
    }

    /// x [B,C,H,W], w [O,C,kh,kw], optional bias [O].
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let tw = &self.nodes[w.0].value;
        let (sx, sw) = (tx.shape(), tw.shape());
        assert!(sx.len() == 4 && sw.len() == 4 && sx[1] == sw[1], "conv shapes {:?} {:?}", sx, sw);
        let dims = ConvDims::new(sw[1], sw[0], sw[2], sw[3], sx[2], sx[3], stride, pad);
        let batch = sx[0];
        let mut y = vec![0.0; batch * dims.c_out * dims.oh * dims.ow];
        let mut cols = vec![0.0; dims.c_in * dims.kh * dims.kw * dims.oh * dims.ow];
        let bias = b.map(|bid| {
            let tb = &self.nodes[bid.0].value;
            assert_eq!(tb.shape(), &[sw[0]], "conv bias shape");
            tb.data().to_vec()
        });
        kernels::conv2d_forward(tx.data(), tw.data(), bias.as_deref(), &dims, batch, &mut y, &mut cols);
        let t = Tensor::new(vec![batch, dims.c_out, dims.oh, dims.ow], y);
        let needs = self.ng(x) || self.ng(w) || b.map(|bb| self.ng(bb)).unwrap_or(false);
        self.push(Op::Conv2d { x, w, b, dims, batch }, t, needs)
    }

    /// x [B,C,H,W] normalized per (sample, group), then scaled by gamma/beta [C].
    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, eps: f64) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let sh = tx.shape().to_vec();
        assert_eq!(sh.len(), 4);
        let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        assert!(c % groups == 0, "channels {} not divisible by groups {}", c, groups);
        let cg = c / groups;
        let n = cg * h * w;
        let tg = &self.nodes[gamma.0].value;
        let tb = &self.nodes[beta.0].value;
        assert_eq!(tg.shape(), &[c]);
        assert_eq!(tb.shape(), &[c]);
        let mut data = vec![0.0; tx.numel()];
        let mut stats = Vec::with_capacity(b * groups);
        let xs = tx.data();
        for bi in 0..b {
            for g in 0..groups {
                let start = (bi * c + g * cg) * h * w;
                let sl = &xs[start..start + n];
                let mean = sl.iter().sum::<f64>() / n as f64;
                let var = sl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                stats.push((mean, rstd));
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let (gv, bv) = (tg.data()[ch], tb.data()[ch]);
                    let o = (bi * c + ch) * h * w;
                    for i in 0..h * w {
                        data[o + i] = gv * (xs[o + i] - mean) * rstd + bv;
                    }
                }
            }
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(Op::GroupNorm { x, gamma, beta, groups, stats }, Tensor::new(sh, data), needs)
    }

    /// Normalize over the last axis; gamma/beta have that axis's length.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let sh = tx.shape().to_vec();
        let d = *sh.last().unwrap();
        let tg = &self.nodes[gamma.0].value;
        let tb = &self.nodes[beta.0].value;
        assert_eq!(tg.shape(), &[d]);
        assert_eq!(tb.shape(), &[d]);
        let rows = tx.numel() / d;
        let mut data = vec![0.0; tx.numel()];
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = &tx.data()[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            stats.push((mean, rstd));
            for i in 0..d {
                data[r * d + i] = tg.data()[i] * (xr[i] - mean) * rstd + tb.data()[i];
            }
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(Op::LayerNorm { x, gamma, beta, stats }, Tensor::new(sh, data), needs)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let data: Vec<f64> = tx.iter().map(|&v| v / (1.0 + (-v).exp())).collect();
        let t = Tensor::new(tx.shape().to_vec(), data);
        let needs = self.ng(x);
        self.push(Op::Silu { x }, t, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let data: Vec<f64> = tx.iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data);
        let needs = self.ng(x);
        self.push(Op::Relu { x }, t, needs)
    }

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let d = *tx.shape().last().unwrap();
        let mut data = vec![0.0; tx.numel()];
        kernels::softmax_rows(tx.data(), d, &mut data);
        let t = Tensor::new(tx.shape().to_vec(), data);
        let needs = self.ng(x);
        self.push(Op::SoftmaxLast { x, d }, t, needs)
    }

    /// ln(max(x, eps)); gradient is zero on the clamped region.
    pub fn log_clamped(&mut self, x: NodeId, eps: f64) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let data: Vec<f64> = tx.iter().map(|&v| v.max(eps).ln()).collect();
        let t = Tensor::new(tx.shape().to_vec(), data);
        let needs = self.ng(x);
        self.push(Op::LogClamped { x, eps }, t, needs)
    }

    pub fn pow_const(&mut self, x: NodeId, p: f64) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let data: Vec<f64> = tx.iter().map(|&v| v.powf(p)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data);
        let needs = self.ng(x);
        self.push(Op::PowConst { x, p }, t, needs)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let t = self.nodes[x.0].value.reshaped(shape);
        let needs = self.ng(x);
        self.push(Op::Reshape { x }, t, needs)
    }

    pub fn permute(&mut self, x: NodeId, perm: Vec<usize>) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let (sh, data) = permute_data(tx.data(), tx.shape(), &perm);
        let needs = self.ng(x);
        self.push(Op::Permute { x, perm }, Tensor::new(sh, data), needs)
    }

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let base = self.nodes[parts[0].0].value.shape().to_vec();
        let mut axis_len = 0usize;
        for &p in parts {
            let sh = self.nodes[p.0].value.shape();
            assert_eq!(sh.len(), base.len(), "concat rank mismatch");
            for (i, (&a, &b)) in sh.iter().zip(base.iter()).enumerate() {
                if i != axis {
                    assert_eq!(a, b, "concat shape mismatch off-axis");
                }
            }
            axis_len += sh[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_len;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_len * inner];
        let row_out = axis_len * inner;
        let mut off = 0usize;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            let la = t.shape()[axis];
            let row_in = la * inner;
            for o in 0..outer {
                let dst = o * row_out + off;
                data[dst..dst + row_in].copy_from_slice(&t.data()[o * row_in..(o + 1) * row_in]);
            }
            off += row_in;
        }
        let needs = parts.iter().any(|&p| self.ng(p));
        self.push(Op::Concat { axis, parts: parts.to_vec() }, Tensor::new(out_shape, data), needs)
    }

    /// Gather the given columns of the last axis.
    pub fn select_last(&mut self, x: NodeId, cols: Vec<usize>) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let d = *tx.shape().last().unwrap();
        for &c in &cols {
            assert!(c < d, "select_last column {} out of {}", c, d);
        }
        let rows = tx.numel() / d;
        let mut data = vec![0.0; rows * cols.len()];
        for r in 0..rows {
            let xr = &tx.data()[r * d..(r + 1) * d];
            for (i, &c) in cols.iter().enumerate() {
                data[r * cols.len() + i] = xr[c];
            }
        }
        let mut sh = tx.shape().to_vec();
        *sh.last_mut().unwrap() = cols.len();
        let needs = self.ng(x);
        self.push(Op::SelectLast { x, cols }, Tensor::new(sh, data), needs)
    }

    pub fn upsample_nearest2x(&mut self, x: NodeId) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let sh = tx.shape();
        assert_eq!(sh.len(), 4);
        let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let mut data = vec![0.0; b * c * 4 * h * w];
        kernels::upsample_nearest2x(tx.data(), b, c, h, w, &mut data);
        let t = Tensor::new(vec![b, c, 2 * h, 2 * w], data);
        let needs = self.ng(x);
        self.push(Op::Upsample2x { x }, t, needs)
    }

    pub fn avg_pool2d(&mut self, x: NodeId, k: usize) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let sh = tx.shape();
        assert_eq!(sh.len(), 4);
        let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let mut data = vec![0.0; b * c * (h / k) * (w / k)];
        kernels::avg_pool2d(tx.data(), b, c, h, w, k, &mut data);
        let t = Tensor::new(vec![b, c, h / k, w / k], data);
        let needs = self.ng(x);
        self.push(Op::AvgPool { x, k }, t, needs)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].value.iter().sum::<f64>();
        let needs = self.ng(x);
        self.push(Op::SumAll { x }, Tensor::scalar(s), needs)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x.0].value;
        let s = t.iter().sum::<f64>() / t.numel() as f64;
        let needs = self.ng(x);
        self.push(Op::MeanAll { x }, Tensor::scalar(s), needs)
    }

    /// Mean over one axis; that axis is dropped from the shape.
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let sh = tx.shape().to_vec();
        assert!(axis < sh.len());
        let outer: usize = sh[..axis].iter().product();
        let n = sh[axis];
        let inner: usize = sh[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        let inv = 1.0 / n as f64;
        for o in 0..outer {
            for j in 0..n {
                let src = (o * n + j) * inner;
                let dst = o * inner;
                for i in 0..inner {
                    data[dst + i] += tx.data()[src + i];
                }
            }
        }
        data.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = sh.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let needs = self.ng(x);
        self.push(Op::MeanAxis { x, axis }, Tensor::new(out_shape, data), needs)
    }

    /// Gather rows of a [R,C] table.
    pub fn gather_rows(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        let tt = &self.nodes[table.0].value;
        assert_eq!(tt.shape().len(), 2);
        let (r, c) = (tt.shape()[0], tt.shape()[1]);
        let mut data = vec![0.0; ids.len() * c];
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < r, "gather row {} out of {}", id, r);
            data[i * c..(i + 1) * c].copy_from_slice(&tt.data()[id * c..(id + 1) * c]);
        }
        let t = Tensor::new(vec![ids.len(), c], data);
        let needs = self.ng(table);
        self.push(Op::GatherRows { table, ids }, t, needs)
    }

    /// Reverse pass from a scalar loss. Gradients of trainable parameters are
    /// accumulated into the store.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads, store);
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[id.0].value.numel()]);
        }
        f(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], store: &mut ParamStore) {
        let node = &self.nodes[id];
        let val = |nid: NodeId| self.nodes[nid.0].value.data();
        match &node.op {
            Op::Input => {}
            Op::Param(pid) => store.accumulate_grad(*pid, g),
            Op::AddScaled { a, b, alpha } => {
                let alpha = *alpha;
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += alpha * y));
            }
            Op::Affine { x, mul } => {
                let mul = *mul;
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += mul * y));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddChanBias { x, b } => {
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let sh = self.nodes[x.0].value.shape();
                let (bs, c, hw) = (sh[0], sh[1], sh[2] * sh[3]);
                self.acc(grads, *b, |d| {
                    for bi in 0..bs {
                        for ch in 0..c {
                            let o = (bi * c + ch) * hw;
                            d[ch] += g[o..o + hw].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::AddSampleChan { x, b } => {
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let sh = self.nodes[x.0].value.shape();
                let (bs, c, hw) = (sh[0], sh[1], sh[2] * sh[3]);
                self.acc(grads, *b, |d| {
                    for bi in 0..bs {
                        for ch in 0..c {
                            let o = (bi * c + ch) * hw;
                            d[bi * c + ch] += g[o..o + hw].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::ScalePerSample { x, s } => {
                let stride = node.value.numel() / s.len();
                self.acc(grads, *x, |d| {
                    for (bi, &sv) in s.iter().enumerate() {
                        for i in 0..stride {
                            d[bi * stride + i] += sv * g[bi * stride + i];
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let tx = &self.nodes[x.0].value;
                let tw = &self.nodes[w.0].value;
                let k = *tx.shape().last().unwrap();
                let o = tw.shape()[0];
                let m = tx.numel() / k;
                self.acc(grads, *x, |d| kernels::gemm_nn(m, o, k, 1.0, g, tw.data(), 1.0, d));
                self.acc(grads, *w, |d| kernels::gemm_tn(o, m, k, 1.0, g, tx.data(), 1.0, d));
                if let Some(bid) = b {
                    self.acc(grads, *bid, |d| {
                        for row in g.chunks_exact(o) {
                            for (e, gv) in d.iter_mut().zip(row) {
                                *e += gv;
                            }
                        }
                    });
                }
            }
            Op::Bmm { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (nb, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = tb.shape()[2];
                self.acc(grads, *a, |d| {
                    for i in 0..nb {
                        kernels::gemm_nt(m, n, k, 1.0, &g[i * m * n..(i + 1) * m * n], &tb.data()[i * k * n..(i + 1) * k * n], 1.0, &mut d[i * m * k..(i + 1) * m * k]);
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..nb {
                        kernels::gemm_tn(k, m, n, 1.0, &ta.data()[i * m * k..(i + 1) * m * k], &g[i * m * n..(i + 1) * m * n], 1.0, &mut d[i * k * n..(i + 1) * k * n]);
                    }
                });
            }
            Op::BmmTransB { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (nb, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = tb.shape()[1];
                self.acc(grads, *a, |d| {
                    for i in 0..nb {
                        kernels::gemm_nn(m, n, k, 1.0, &g[i * m * n..(i + 1) * m * n], &tb.data()[i * n * k..(i + 1) * n * k], 1.0, &mut d[i * m * k..(i + 1) * m * k]);
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..nb {
                        kernels::gemm_tn(n, m, k, 1.0, &g[i * m * n..(i + 1) * m * n], &ta.data()[i * m * k..(i + 1) * m * k], 1.0, &mut d[i * n * k..(i + 1) * n * k]);
                    }
                });
            }
            Op::Conv2d { x, w, b, dims, batch } => {
                let tx = &self.nodes[x.0].value;
                let tw = &self.nodes[w.0].value;
                let mut cols = vec![0.0; dims.c_in * dims.kh * dims.kw * dims.oh * dims.ow];
                let mut dcols = vec![0.0; cols.len()];
                // weight and bias grads always accumulate into local buffers,
                // input grad only when the input itself needs it
                let mut dw = vec![0.0; tw.numel()];
                let mut db = b.map(|bid| vec![0.0; self.nodes[bid.0].value.numel()]);
                let want_dx = self.nodes[x.0].needs_grad;
                let mut dx = if want_dx { Some(vec![0.0; tx.numel()]) } else { None };
                kernels::conv2d_backward(
                    tx.data(),
                    tw.data(),
                    g,
                    dims,
                    *batch,
                    dx.as_deref_mut(),
                    &mut dw,
                    db.as_deref_mut(),
                    &mut cols,
                    &mut dcols,
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, |d| d.iter_mut().zip(&dx).for_each(|(a, b)| *a += b));
                }
                self.acc(grads, *w, |d| d.iter_mut().zip(&dw).for_each(|(a, b)| *a += b));
                if let (Some(bid), Some(db)) = (b, db) {
                    self.acc(grads, *bid, |d| d.iter_mut().zip(&db).for_each(|(a, b)| *a += b));
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let tx = &self.nodes[x.0].value;
                let tg = &self.nodes[gamma.0].value;
                let sh = tx.shape();
                let (bs, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                let cg = c / groups;
                let n = cg * h * w;
                let xs = tx.data();
                let gammas = tg.data();
                self.acc(grads, *x, |d| {
                    for bi in 0..bs {
                        for gi in 0..*groups {
                            let (mean, rstd) = stats[bi * groups + gi];
                            let start = (bi * c + gi * cg) * h * w;
                            let mut sum1 = 0.0;
                            let mut sum2 = 0.0;
                            for ci in 0..cg {
                                let ch = gi * cg + ci;
                                let o = (bi * c + ch) * h * w;
                                for i in 0..h * w {
                                    let dxh = g[o + i] * gammas[ch];
                                    let xh = (xs[o + i] - mean) * rstd;
                                    sum1 += dxh;
                                    sum2 += dxh * xh;
                                }
                            }
                            let inv_n = 1.0 / n as f64;
                            for ci in 0..cg {
                                let ch = gi * cg + ci;
                                let o = (bi * c + ch) * h * w;
                                for i in 0..h * w {
                                    let dxh = g[o + i] * gammas[ch];
                                    let xh = (xs[o + i] - mean) * rstd;
                                    d[start + ci * h * w + i] += rstd * (dxh - sum1 * inv_n - xh * sum2 * inv_n);
                                }
                            }
                        }
                    }
                });
                self.acc(grads, *gamma, |d| {
                    for bi in 0..bs {
                        for ch in 0..c {
                            let (mean, rstd) = stats[bi * groups + ch / cg];
                            let o = (bi * c + ch) * h * w;
                            for i in 0..h * w {
                                d[ch] += g[o + i] * (xs[o + i] - mean) * rstd;
                            }
                        }
                    }
                });
                self.acc(grads, *beta, |d| {
                    for bi in 0..bs {
                        for ch in 0..c {
                            let o = (bi * c + ch) * h * w;
                            d[ch] += g[o..o + h * w].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let tx = &self.nodes[x.0].value;
                let tg = &self.nodes[gamma.0].value;
                let dlen = *tx.shape().last().unwrap();
                let rows = tx.numel() / dlen;
                let xs = tx.data();
                let gammas = tg.data();
                self.acc(grads, *x, |d| {
                    for r in 0..rows {
                        let (mean, rstd) = stats[r];
                        let base = r * dlen;
                        let mut sum1 = 0.0;
                        let mut sum2 = 0.0;
                        for i in 0..dlen {
                            let dxh = g[base + i] * gammas[i];
                            let xh = (xs[base + i] - mean) * rstd;
                            sum1 += dxh;
                            sum2 += dxh * xh;
                        }
                        let inv = 1.0 / dlen as f64;
                        for i in 0..dlen {
                            let dxh = g[base + i] * gammas[i];
                            let xh = (xs[base + i] - mean) * rstd;
                            d[base + i] += rstd * (dxh - sum1 * inv - xh * sum2 * inv);
                        }
                    }
                });
                self.acc(grads, *gamma, |d| {
                    for r in 0..rows {
                        let (mean, rstd) = stats[r];
                        for i in 0..dlen {
                            d[i] += g[r * dlen + i] * (xs[r * dlen + i] - mean) * rstd;
                        }
                    }
                });
                self.acc(grads, *beta, |d| {
                    for r in 0..rows {
                        for i in 0..dlen {
                            d[i] += g[r * dlen + i];
                        }
                    }
                });
            }
            Op::Silu { x } => {
                let xs = val(*x);
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        let s = 1.0 / (1.0 + (-xs[i]).exp());
                        d[i] += g[i] * s * (1.0 + xs[i] * (1.0 - s));
                    }
                });
            }
            Op::Relu { x } => {
                let xs = val(*x);
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        if xs[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::SoftmaxLast { x, d: dim } => {
                let ys = node.value.data();
                let dim = *dim;
                self.acc(grads, *x, |d| {
                    for r in 0..d.len() / dim {
                        let base = r * dim;
                        let mut dot = 0.0;
                        for i in 0..dim {
                            dot += g[base + i] * ys[base + i];
                        }
                        for i in 0..dim {
                            d[base + i] += ys[base + i] * (g[base + i] - dot);
                        }
                    }
                });
            }
            Op::LogClamped { x, eps } => {
                let xs = val(*x);
                let eps = *eps;
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        if xs[i] > eps {
                            d[i] += g[i] / xs[i];
                        }
                    }
                });
            }
            Op::PowConst { x, p } => {
                let xs = val(*x);
                let p = *p;
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        if p == 0.0 {
                            continue;
                        }
                        let dv = if p == 1.0 { 1.0 } else { p * xs[i].powf(p - 1.0) };
                        if dv.is_finite() {
                            d[i] += g[i] * dv;
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            }
            Op::Permute { x, perm } => {
                let inv = invert_perm(perm);
                let (_, gperm) = permute_data(g, node.value.shape(), &inv);
                self.acc(grads, *x, |d| d.iter_mut().zip(&gperm).for_each(|(a, b)| *a += b));
            }
            Op::Concat { axis, parts } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let row_out = out_shape[*axis] * inner;
                let mut off = 0usize;
                for &p in parts {
                    let la = self.nodes[p.0].value.shape()[*axis];
                    let row_in = la * inner;
                    let cur = off;
                    self.acc(grads, p, |d| {
                        for o in 0..outer {
                            let src = o * row_out + cur;
                            for i in 0..row_in {
                                d[o * row_in + i] += g[src + i];
                            }
                        }
                    });
                    off += row_in;
                }
            }
            Op::SelectLast { x, cols } => {
                let d_in = *self.nodes[x.0].value.shape().last().unwrap();
                let rows = self.nodes[x.0].value.numel() / d_in;
                self.acc(grads, *x, |d| {
                    for r in 0..rows {
                        for (i, &c) in cols.iter().enumerate() {
                            d[r * d_in + c] += g[r * cols.len() + i];
                        }
                    }
                });
            }
            Op::Upsample2x { x } => {
                let sh = self.nodes[x.0].value.shape();
                let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                self.acc(grads, *x, |d| kernels::upsample_nearest2x_backward(g, b, c, h, w, d));
            }
            Op::AvgPool { x, k } => {
                let sh = self.nodes[x.0].value.shape();
                let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                self.acc(grads, *x, |d| kernels::avg_pool2d_backward(g, b, c, h, w, *k, d));
            }
            Op::SumAll { x } => {
                let gv = g[0];
                self.acc(grads, *x, |d| d.iter_mut().for_each(|a| *a += gv));
            }
            Op::MeanAll { x } => {
                let n = self.nodes[x.0].value.numel();
                let gv = g[0] / n as f64;
                self.acc(grads, *x, |d| d.iter_mut().for_each(|a| *a += gv));
            }
            Op::MeanAxis { x, axis } => {
                let sh = self.nodes[x.0].value.shape();
                let outer: usize = sh[..*axis].iter().product();
                let n = sh[*axis];
                let inner: usize = sh[*axis + 1..].iter().product();
                let inv = 1.0 / n as f64;
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        for j in 0..n {
                            let dst = (o * n + j) * inner;
                            let src = o * inner;
                            for i in 0..inner {
                                d[dst + i] += g[src + i] * inv;
                            }
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let c = self.nodes[table.0].value.shape()[1];
                self.acc(grads, *table, |d| {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            d[id * c + j] += g[i * c + j];
                        }
                    }
                });
            }
        }
    }
}
