//! Training losses for the generative stage: decoupled attention alignment
//! on abnormal batches, plain denoising regression on both batch kinds, and
//! the replace-second-term alignment variant.
//!
//! Alignment terms are raw squared Frobenius sums over the selected layers
//! (no per-layer normalization); denoising terms are elementwise MSE means.
//! Ground-truth masks reach each alignment layer by max-pooling, so a single
//! anomalous pixel survives every downsampling.

use crate::config::ModelConfig;
use crate::error::{Result, SeasError};
use crate::imagedata::MaskImage;
use crate::prompt::{Prompt, TokenTable};
use crate::schedule::NoiseSchedule;
use crate::unet::{Unet, UnetOutputs};
use crate::util::randn;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use seas_tensor::{Graph, NodeId, ParamStore, Tensor};

/// Per-step loss terms. `total` is the weighted sum actually optimized.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub da_term1: f64,
    pub da_term2: f64,
    pub diffusion_df: f64,
    pub diffusion_ob: f64,
    pub at_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn log_line(&self, step: usize) -> String {
        format!(
            "step {} da1 {:.6} da2 {:.6} df {:.6} ob {:.6} at {:.6} total {:.6}",
            step, self.da_term1, self.da_term2, self.diffusion_df, self.diffusion_ob, self.at_term, self.total
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.da_term1, self.da_term2, self.diffusion_df, self.diffusion_ob, self.at_term, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        let pairs = [
            ("da1", self.da_term1),
            ("da2", self.da_term2),
            ("df", self.diffusion_df),
            ("ob", self.diffusion_ob),
            ("at", self.at_term),
            ("total", self.total),
        ];
        pairs.iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub da1: f64,
    pub da2: f64,
    pub df: f64,
    pub ob: f64,
    pub at: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { da1: 1.0, da2: 1.0, df: 1.0, ob: 1.0, at: 1.0 }
    }
}

/// Max-pool a full-resolution mask to each requested square resolution,
/// returned flattened [r*r] with values exactly 0 or 1.
pub fn mask_layers(mask: &MaskImage, resolutions: &[usize]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(resolutions.len());
    for &r in resolutions {
        if r == 0 || mask.h % r != 0 || mask.w % r != 0 {
            return Err(SeasError::Dimension(format!(
                "mask {}x{} not divisible by layer resolution {}",
                mask.h, mask.w, r
            )));
        }
        let (bh, bw) = (mask.h / r, mask.w / r);
        let mut data = vec![0.0; r * r];
        for cy in 0..r {
            for cx in 0..r {
                let mut hit = 0.0;
                'block: for dy in 0..bh {
                    for dx in 0..bw {
                        if mask.get(cy * bh + dy, cx * bw + dx) == 1 {
                            hit = 1.0;
                            break 'block;
                        }
                    }
                }
                data[cy * r + cx] = hit;
            }
        }
        out.push(Tensor::new(vec![r * r], data));
    }
    Ok(out)
}

/// Mean attention over a set of token columns for one sample: map [B,n,Z]
/// viewed as [B*Z, n], the sample's columns gathered and averaged to [n].
fn mean_columns(g: &mut Graph, map_t: NodeId, z: usize, sample: usize, cols: &[usize]) -> NodeId {
    let ids: Vec<usize> = cols.iter().map(|c| sample * z + c).collect();
    let rows = g.gather_rows(map_t, ids);
    g.mean_axis(rows, 0)
}

fn check_alignment_inputs(
    n_maps: usize,
    layers: &[usize],
    prompts: &[&Prompt],
    masks: &[Vec<Tensor>],
) -> Result<()> {
    for &l in layers {
        if l == 0 || l > n_maps {
            return Err(SeasError::Config(format!(
                "alignment layer {} outside available 1..={}",
                l, n_maps
            )));
        }
    }
    if prompts.len() != masks.len() {
        return Err(SeasError::Dimension(format!(
            "{} prompts vs {} mask sets",
            prompts.len(),
            masks.len()
        )));
    }
    for (i, m) in masks.iter().enumerate() {
        if m.len() != layers.len() {
            return Err(SeasError::Dimension(format!(
                "sample {} has {} layer masks, need {}",
                i,
                m.len(),
                layers.len()
            )));
        }
    }
    Ok(())
}

/// Decoupled alignment terms over the selected layers.
/// term1 = sum_l sum_b ||mean_df A - M||^2, term2 = sum_l sum_b ||mean_ob A (.) M||^2.
pub fn da_loss_nodes(
    g: &mut Graph,
    attn: &[NodeId],
    layers: &[usize],
    prompts: &[&Prompt],
    masks: &[Vec<Tensor>],
) -> Result<(NodeId, NodeId)> {
    check_alignment_inputs(attn.len(), layers, prompts, masks)?;
    let mut t1: Option<NodeId> = None;
    let mut t2: Option<NodeId> = None;
    for (li, &l) in layers.iter().enumerate() {
        let map = attn[l - 1];
        let sh = g.shape(map).to_vec();
        let (b, n, z) = (sh[0], sh[1], sh[2]);
        if b != prompts.len() {
            return Err(SeasError::Dimension(format!("map batch {} vs {} prompts", b, prompts.len())));
        }
        let mp = g.permute(map, vec![0, 2, 1]);
        let map_t = g.reshape(mp, vec![b * z, n]);
        for (s, prompt) in prompts.iter().enumerate() {
            let mt = &masks[s][li];
            if mt.numel() != n {
                return Err(SeasError::Dimension(format!(
                    "layer {} mask has {} cells, map has {}",
                    l,
                    mt.numel(),
                    n
                )));
            }
            let m = g.input(mt.clone());
            let df = mean_columns(g, map_t, z, s, &prompt.df_columns);
            let diff = g.sub(df, m);
            let sq = g.square(diff);
            let s1 = g.sum_all(sq);
            t1 = Some(match t1 {
                Some(acc) => g.add(acc, s1),
                None => s1,
            });
            let ob = mean_columns(g, map_t, z, s, &prompt.ob_columns);
            let gated = g.mul(ob, m);
            let sq2 = g.square(gated);
            let s2 = g.sum_all(sq2);
            t2 = Some(match t2 {
                Some(acc) => g.add(acc, s2),
                None => s2,
            });
        }
    }
    Ok((t1.expect("at least one layer"), t2.expect("at least one layer")))
}

/// Replacement alignment term: sum_l sum_b ||mean_ob A - (1 - M)||^2.
pub fn at_term_nodes(
    g: &mut Graph,
    attn: &[NodeId],
    layers: &[usize],
    prompts: &[&Prompt],
    masks: &[Vec<Tensor>],
) -> Result<NodeId> {
    check_alignment_inputs(attn.len(), layers, prompts, masks)?;
    let mut acc: Option<NodeId> = None;
    for (li, &l) in layers.iter().enumerate() {
        let map = attn[l - 1];
        let sh = g.shape(map).to_vec();
        let (b, n, z) = (sh[0], sh[1], sh[2]);
        let mp = g.permute(map, vec![0, 2, 1]);
        let map_t = g.reshape(mp, vec![b * z, n]);
        for (s, prompt) in prompts.iter().enumerate() {
            let mt = &masks[s][li];
            if mt.numel() != n {
                return Err(SeasError::Dimension(format!(
                    "layer {} mask has {} cells, map has {}",
                    l,
                    mt.numel(),
                    n
                )));
            }
            let inv: Vec<f64> = mt.data().iter().map(|v| 1.0 - v).collect();
            let m = g.input(Tensor::new(vec![n], inv));
            let ob = mean_columns(g, map_t, z, s, &prompt.ob_columns);
            let diff = g.sub(ob, m);
            let sq = g.square(diff);
            let t = g.sum_all(sq);
            acc = Some(match acc {
                Some(a) => g.add(a, t),
                None => t,
            });
        }
    }
    Ok(acc.expect("at least one layer"))
}

/// Elementwise mean squared error.
pub fn mse_node(g: &mut Graph, a: NodeId, b: NodeId) -> NodeId {
    let diff = g.sub(a, b);
    let sq = g.square(diff);
    g.mean_all(sq)
}

/// Everything a loss builder needs from the surrounding run.
pub struct GenContext<'a> {
    pub model: &'a ModelConfig,
    pub unet: &'a Unet,
    pub store: &'a ParamStore,
    pub table: &'a TokenTable,
    pub schedule: &'a NoiseSchedule,
}

/// Draw per-sample timesteps and noise, and assemble the noisy batch.
fn noise_batch(
    latents: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Tensor, Tensor) {
    let sh = latents.shape().to_vec();
    let b = sh[0];
    let n = latents.numel() / b;
    let mut ts = Vec::with_capacity(b);
    let mut eps = Vec::with_capacity(b * n);
    let mut noisy = Vec::with_capacity(b * n);
    for s in 0..b {
        let t = (rng.next_u64() % schedule.len() as u64) as usize;
        ts.push(t);
        let (a, bt) = (schedule.alpha(t), schedule.beta(t));
        let e = randn(rng, n);
        for i in 0..n {
            let z = latents.data()[s * n + i];
            noisy.push(a * z + bt * e[i]);
            eps.push(e[i]);
        }
    }
    (ts, Tensor::new(sh.clone(), noisy), Tensor::new(sh, eps))
}

/// Stack per-prompt conditioning rows into [B,Z,C1].
pub fn conditioning_batch(
    g: &mut Graph,
    table: &TokenTable,
    store: &ParamStore,
    prompts: &[&Prompt],
) -> NodeId {
    let tnode = table.node(g, store);
    let parts: Vec<NodeId> = prompts
        .iter()
        .map(|p| {
            let rows = g.gather_rows(tnode, p.slots.clone());
            g.reshape(rows, vec![1, p.slots.len(), table.cond_dim()])
        })
        .collect();
    g.concat(0, &parts)
}

pub struct AbnormalLossNodes {
    pub total: NodeId,
    pub da_term1: NodeId,
    pub da_term2: Option<NodeId>,
    pub diffusion_df: NodeId,
    pub at_term: Option<NodeId>,
    pub outputs: UnetOutputs,
}

/// Alignment + denoising loss on an abnormal batch. When `at_variant` is set
/// the second alignment term is replaced by the inverse-mask object term.
#[allow(clippy::too_many_arguments)]
pub fn abnormal_loss(
    g: &mut Graph,
    ctx: &GenContext,
    latents: &Tensor,
    prompts: &[&Prompt],
    masks: &[&MaskImage],
    layers: &[usize],
    weights: &LossWeights,
    enable_st: bool,
    at_variant: bool,
    rng: &mut ChaCha8Rng,
) -> Result<AbnormalLossNodes> {
    if prompts.len() != masks.len() || prompts.len() != latents.shape()[0] {
        return Err(SeasError::Dimension(format!(
            "abnormal batch: {} latents, {} prompts, {} masks",
            latents.shape()[0],
            prompts.len(),
            masks.len()
        )));
    }
    for (i, p) in prompts.iter().enumerate() {
        if p.anomaly_type == 0 || p.df_columns.is_empty() {
            return Err(SeasError::Validation(format!("prompt {} is not abnormal", i)));
        }
    }
    let resolutions: Vec<usize> = layers.iter().map(|&l| ctx.model.attn_resolution(l)).collect();
    let layer_masks: Vec<Vec<Tensor>> = masks
        .iter()
        .map(|m| mask_layers(m, &resolutions))
        .collect::<Result<_>>()?;
    // per-layer masks are indexed by position in `layers`, so remap attention
    // maps to that order before the shared column logic
    let (ts, noisy, eps) = noise_batch(latents, ctx.schedule, rng);
    let zin = g.input(noisy);
    let ein = g.input(eps);
    let cond = conditioning_batch(g, ctx.table, ctx.store, prompts);
    let outputs = ctx.unet.forward(g, ctx.store, zin, &ts, cond)?;

    let (t1, t2) = da_loss_nodes(g, &outputs.attn, layers, prompts, &layer_masks)?;
    let df = mse_node(g, outputs.eps, ein);

    let scaled_t1 = g.affine(t1, weights.da1, 0.0);
    let mut total = g.add_scaled(scaled_t1, df, weights.df);
    let mut da_term2 = None;
    let mut at_term = None;
    if at_variant {
        let at = at_term_nodes(g, &outputs.attn, layers, prompts, &layer_masks)?;
        total = g.add_scaled(total, at, weights.at);
        at_term = Some(at);
    } else if enable_st {
        total = g.add_scaled(total, t2, weights.da2);
        da_term2 = Some(t2);
    }
    Ok(AbnormalLossNodes {
        total,
        da_term1: t1,
        da_term2,
        diffusion_df: df,
        at_term,
        outputs,
    })
}

/// Denoising loss on a normal batch conditioned on the object-only prompt.
pub fn normal_loss(
    g: &mut Graph,
    ctx: &GenContext,
    latents: &Tensor,
    prompt: &Prompt,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    if prompt.anomaly_type != 0 || !prompt.df_columns.is_empty() {
        return Err(SeasError::Validation("normal batch needs the object-only prompt".into()));
    }
    let b = latents.shape()[0];
    let (ts, noisy, eps) = noise_batch(latents, ctx.schedule, rng);
    let zin = g.input(noisy);
    let ein = g.input(eps);
    let prompts: Vec<&Prompt> = std::iter::repeat(prompt).take(b).collect();
    let cond = conditioning_batch(g, ctx.table, ctx.store, &prompts);
    let outputs = ctx.unet.forward(g, ctx.store, zin, &ts, cond)?;
    Ok(mse_node(g, outputs.eps, ein))
}
