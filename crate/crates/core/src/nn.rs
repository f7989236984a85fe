//! Shared network building blocks: parameterized layers, residual blocks,
//! head-averaged cross-attention, and sinusoidal time embeddings.
//!
//! Layer structs own parameter ids in a ParamStore and build graph nodes on
//! demand, so one set of weights can serve many graphs.

use crate::util::randn;
use rand_chacha::ChaCha8Rng;
use seas_tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};

pub const NORM_EPS: f64 = 1e-5;

fn scaled(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    randn(rng, n).iter().map(|v| v * std).collect()
}

#[derive(Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let w = store.add(&format!("{}.w", name), vec![c_out, c_in, k, k], scaled(rng, c_out * c_in * k * k, std), true);
        let b = store.add(&format!("{}.b", name), vec![c_out], vec![0.0; c_out], true);
        Conv2d { w, b: Some(b), stride, pad }
    }

    /// Zero-initialized weights and bias, for output heads that should start
    /// as the identity contribution.
    pub fn zeroed(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(&format!("{}.w", name), vec![c_out, c_in, k, k], vec![0.0; c_out * c_in * k * k], true);
        let b = store.add(&format!("{}.b", name), vec![c_out], vec![0.0; c_out], true);
        Conv2d { w, b: Some(b), stride, pad }
    }

    /// Bias-free conv with caller-chosen weight scale, for layers whose output
    /// multiplies another activation and must not start at full gain.
    pub fn no_bias(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        std: f64,
    ) -> Self {
        let w = store.add(&format!("{}.w", name), vec![c_out, c_in, k, k], scaled(rng, c_out * c_in * k * k, std), true);
        Conv2d { w, b: None, stride, pad }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(store, self.w);
        let b = self.b.map(|id| g.param(store, id));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        let w = store.add(&format!("{}.w", name), vec![d_out, d_in], scaled(rng, d_out * d_in, std), true);
        let b = store.add(&format!("{}.b", name), vec![d_out], vec![0.0; d_out], true);
        Linear { w, b: Some(b) }
    }

    pub fn no_bias(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        let w = store.add(&format!("{}.w", name), vec![d_out, d_in], scaled(rng, d_out * d_in, std), true);
        Linear { w, b: None }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(store, self.w);
        let b = self.b.map(|id| g.param(store, id));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Copy)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "channels {} not divisible by groups {}", channels, groups);
        let gamma = store.add(&format!("{}.g", name), vec![channels], vec![1.0; channels], true);
        let beta = store.add(&format!("{}.b", name), vec![channels], vec![0.0; channels], true);
        GroupNorm { gamma, beta, groups }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let gm = g.param(store, self.gamma);
        let bt = g.param(store, self.beta);
        g.group_norm(x, gm, bt, self.groups, NORM_EPS)
    }
}

#[derive(Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(&format!("{}.g", name), vec![dim], vec![1.0; dim], true);
        let beta = store.add(&format!("{}.b", name), vec![dim], vec![0.0; dim], true);
        LayerNorm { gamma, beta }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let gm = g.param(store, self.gamma);
        let bt = g.param(store, self.beta);
        g.layer_norm(x, gm, bt, NORM_EPS)
    }
}

/// norm-act-conv twice with a learned skip when widths change; an optional
/// per-sample time embedding is added between the convolutions.
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        groups: usize,
        temb_dim: Option<usize>,
    ) -> Self {
        ResBlock {
            norm1: GroupNorm::new(store, &format!("{}.norm1", name), c_in, groups),
            conv1: Conv2d::new(store, rng, &format!("{}.conv1", name), c_in, c_out, 3, 1, 1),
            temb: temb_dim.map(|d| Linear::new(store, rng, &format!("{}.temb", name), d, c_out)),
            norm2: GroupNorm::new(store, &format!("{}.norm2", name), c_out, groups),
            conv2: Conv2d::new(store, rng, &format!("{}.conv2", name), c_out, c_out, 3, 1, 1),
            skip: if c_in == c_out {
                None
            } else {
                Some(Conv2d::new(store, rng, &format!("{}.skip", name), c_in, c_out, 1, 1, 0))
            },
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId, temb: Option<NodeId>) -> NodeId {
        let mut h = self.norm1.apply(g, store, x);
        h = g.silu(h);
        h = self.conv1.apply(g, store, h);
        if let Some(tl) = &self.temb {
            let t = temb.expect("time embedding node required");
            let ts = g.silu(t);
            let proj = tl.apply(g, store, ts);
            h = g.add_sample_chan(h, proj);
        }
        h = self.norm2.apply(g, store, h);
        h = g.silu(h);
        h = self.conv2.apply(g, store, h);
        let s = match &self.skip {
            Some(c) => c.apply(g, store, x),
            None => x,
        };
        g.add(h, s)
    }
}

/// Cross-attention over prompt tokens with the head-averaged map exposed.
pub struct CrossAttention {
    pub norm: GroupNorm,
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl CrossAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        cond_dim: usize,
        heads: usize,
        head_dim: usize,
        groups: usize,
    ) -> Self {
        let inner = heads * head_dim;
        CrossAttention {
            norm: GroupNorm::new(store, &format!("{}.norm", name), channels, groups),
            to_q: Linear::no_bias(store, rng, &format!("{}.q", name), channels, inner),
            to_k: Linear::no_bias(store, rng, &format!("{}.k", name), cond_dim, inner),
            to_v: Linear::no_bias(store, rng, &format!("{}.v", name), cond_dim, inner),
            to_out: Linear::new(store, rng, &format!("{}.out", name), inner, channels),
            heads,
            head_dim,
        }
    }

    /// x [B,C,H,W], cond [B,Z,cond_dim]. Returns the residual output and the
    /// head-averaged attention map [B,H*W,Z], which sums to 1 over tokens.
    pub fn apply(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        cond: NodeId,
    ) -> (NodeId, NodeId) {
        let sh = g.shape(x).to_vec();
        let (b, c, hh, ww) = (sh[0], sh[1], sh[2], sh[3]);
        let n = hh * ww;
        let (heads, hd) = (self.heads, self.head_dim);
        let z = g.shape(cond)[1];

        let xn = self.norm.apply(g, store, x);
        let flat = g.reshape(xn, vec![b, c, n]);
        let tokens = g.permute(flat, vec![0, 2, 1]);

        let q = self.to_q.apply(g, store, tokens);
        let q = g.reshape(q, vec![b, n, heads, hd]);
        let q = g.permute(q, vec![0, 2, 1, 3]);
        let q = g.reshape(q, vec![b * heads, n, hd]);

        let k = self.to_k.apply(g, store, cond);
        let k = g.reshape(k, vec![b, z, heads, hd]);
        let k = g.permute(k, vec![0, 2, 1, 3]);
        let k = g.reshape(k, vec![b * heads, z, hd]);

        let v = self.to_v.apply(g, store, cond);
        let v = g.reshape(v, vec![b, z, heads, hd]);
        let v = g.permute(v, vec![0, 2, 1, 3]);
        let v = g.reshape(v, vec![b * heads, z, hd]);

        let scores = g.bmm_trans_b(q, k);
        let scaled = g.affine(scores, 1.0 / (hd as f64).sqrt(), 0.0);
        let attn = g.softmax_last(scaled);

        let per_head = g.reshape(attn, vec![b, heads, n, z]);
        let attn_mean = g.mean_axis(per_head, 1);

        let ctx = g.bmm(attn, v);
        let ctx = g.reshape(ctx, vec![b, heads, n, hd]);
        let ctx = g.permute(ctx, vec![0, 2, 1, 3]);
        let ctx = g.reshape(ctx, vec![b, n, heads * hd]);
        let out = self.to_out.apply(g, store, ctx);
        let out = g.permute(out, vec![0, 2, 1]);
        let out = g.reshape(out, vec![b, c, hh, ww]);
        let res = g.add(out, x);
        (res, attn_mean)
    }
}

/// Self-attention over token rows with a pre-norm residual, for sequence
/// fusion stacks.
pub struct SelfAttention {
    pub norm: LayerNorm,
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl SelfAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        head_dim: usize,
    ) -> Self {
        let inner = heads * head_dim;
        SelfAttention {
            norm: LayerNorm::new(store, &format!("{}.norm", name), dim),
            to_q: Linear::no_bias(store, rng, &format!("{}.q", name), dim, inner),
            to_k: Linear::no_bias(store, rng, &format!("{}.k", name), dim, inner),
            to_v: Linear::no_bias(store, rng, &format!("{}.v", name), dim, inner),
            to_out: Linear::new(store, rng, &format!("{}.out", name), inner, dim),
            heads,
            head_dim,
        }
    }

    /// x [B,T,dim] -> [B,T,dim].
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let sh = g.shape(x).to_vec();
        let (b, t) = (sh[0], sh[1]);
        let (heads, hd) = (self.heads, self.head_dim);
        let xn = self.norm.apply(g, store, x);
        let split = |g: &mut Graph, node: NodeId| {
            let r = g.reshape(node, vec![b, t, heads, hd]);
            let p = g.permute(r, vec![0, 2, 1, 3]);
            g.reshape(p, vec![b * heads, t, hd])
        };
        let q0 = self.to_q.apply(g, store, xn);
        let k0 = self.to_k.apply(g, store, xn);
        let v0 = self.to_v.apply(g, store, xn);
        let q = split(g, q0);
        let k = split(g, k0);
        let v = split(g, v0);
        let scores = g.bmm_trans_b(q, k);
        let scaled = g.affine(scores, 1.0 / (hd as f64).sqrt(), 0.0);
        let attn = g.softmax_last(scaled);
        let ctx = g.bmm(attn, v);
        let ctx = g.reshape(ctx, vec![b, heads, t, hd]);
        let ctx = g.permute(ctx, vec![0, 2, 1, 3]);
        let ctx = g.reshape(ctx, vec![b, t, heads * hd]);
        let out = self.to_out.apply(g, store, ctx);
        g.add(out, x)
    }
}

/// Pre-norm two-layer feed-forward residual, companion to SelfAttention.
pub struct FeedForward {
    pub norm: LayerNorm,
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            norm: LayerNorm::new(store, &format!("{}.norm", name), dim),
            l1: Linear::new(store, rng, &format!("{}.l1", name), dim, hidden),
            l2: Linear::new(store, rng, &format!("{}.l2", name), hidden, dim),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let xn = self.norm.apply(g, store, x);
        let h = self.l1.apply(g, store, xn);
        let h = g.silu(h);
        let h = self.l2.apply(g, store, h);
        g.add(h, x)
    }
}

/// Sinusoidal position features for integer timesteps, [B, dim].
pub fn sinusoidal_time_embedding(ts: &[usize], dim: usize) -> Tensor {
    assert!(dim >= 2 && dim % 2 == 0, "time embedding dim must be even");
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos());
        }
        for i in 0..half {
            let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin());
        }
    }
    Tensor::new(vec![ts.len(), dim], data)
}

/// Two-layer MLP lifting sinusoidal features to the conditioning width.
pub struct TimeMlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl TimeMlp {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, time_dim: usize, temb_dim: usize) -> Self {
        TimeMlp {
            l1: Linear::new(store, rng, &format!("{}.l1", name), time_dim, temb_dim),
            l2: Linear::new(store, rng, &format!("{}.l2", name), temb_dim, temb_dim),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, emb: NodeId) -> NodeId {
        let h = self.l1.apply(g, store, emb);
        let h = g.silu(h);
        self.l2.apply(g, store, h)
    }
}
