//! Refined mask prediction: fuse denoiser decoder features into a coarse
//! per-cell classification, then refine it through three cascaded stages,
//! each gated by an autoencoder feature at twice the working resolution.
//!
//! The coarse grid is image_size/8, so the three doublings land exactly on
//! the image grid. Selected decoder taps are channel-compressed (coarser taps
//! get twice the budget of the next finer one) and resampled to the coarse
//! grid before transformer fusion. Score maps are stored [B, cells, 2] with a
//! per-cell softmax over {normal, anomalous}.

use crate::config::{ModelConfig, MrmVariant, RmpTrainConfig, VaeFeatureSource};
use crate::error::{Result, SeasError};
use crate::imagedata::MaskImage;
use crate::losses::{conditioning_batch, mask_layers};
use crate::prompt::Prompt;
use crate::schedule::NoiseSchedule;
use crate::synthdata::Corpus;
use crate::trainer::{Generator, LatentCache};
use crate::util::rng_for;
use crate::vae::Vae;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use seas_tensor::{AdamW, AdamWConfig, Graph, NodeId, ParamStore, Tensor};

use crate::nn::{Conv2d, FeedForward, SelfAttention};

/// Channel budgets for the selected taps, coarsest first: the finest selected
/// tap gets `base`, each coarser one doubles it.
pub fn compression_channels(taps: &[usize], base: usize) -> Vec<usize> {
    (0..taps.len()).map(|i| base << (taps.len() - 1 - i)).collect()
}

struct CoarseExtractor {
    taps: Vec<usize>,
    compress: Vec<Conv2d>,
    fusion: Vec<(SelfAttention, FeedForward)>,
    head: Conv2d,
    grid: usize,
    fused_dim: usize,
}

impl CoarseExtractor {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        model: &ModelConfig,
        cfg: &RmpTrainConfig,
        grid: usize,
    ) -> Result<Self> {
        let n_levels = model.unet_widths.len();
        for &t in &cfg.coarse_features {
            if t == 0 || t > n_levels {
                return Err(SeasError::Config(format!(
                    "coarse feature tap {} outside decoder stages 1..={}",
                    t, n_levels
                )));
            }
        }
        let channels = compression_channels(&cfg.coarse_features, cfg.coarse_base_channels);
        let fused_dim: usize = channels.iter().sum();
        if fused_dim % cfg.fusion_heads != 0 {
            return Err(SeasError::Config(format!(
                "fused width {} not divisible by {} heads",
                fused_dim, cfg.fusion_heads
            )));
        }
        let mut compress = Vec::new();
        for (i, (&tap, &ch)) in cfg.coarse_features.iter().zip(&channels).enumerate() {
            let c_in = model.decoder_tap_channels(tap);
            compress.push(Conv2d::new(store, rng, &format!("rmp.compress{}", i), c_in, ch, 1, 1, 0));
        }
        let mut fusion = Vec::new();
        for l in 0..cfg.fusion_layers {
            fusion.push((
                SelfAttention::new(
                    store,
                    rng,
                    &format!("rmp.fuse{}.attn", l),
                    fused_dim,
                    cfg.fusion_heads,
                    fused_dim / cfg.fusion_heads,
                ),
                FeedForward::new(store, rng, &format!("rmp.fuse{}.ff", l), fused_dim, 2 * fused_dim),
            ));
        }
        let head = Conv2d::new(store, rng, "rmp.coarse_head", fused_dim, 2, 1, 1, 0);
        Ok(CoarseExtractor {
            taps: cfg.coarse_features.clone(),
            compress,
            fusion,
            head,
            grid,
            fused_dim,
        })
    }

    fn resample_to_grid(&self, g: &mut Graph, mut x: NodeId) -> NodeId {
        loop {
            let r = g.shape(x)[2];
            if r == self.grid {
                return x;
            }
            if r < self.grid {
                x = g.upsample_nearest2x(x);
            } else {
                x = g.avg_pool2d(x, r / self.grid);
            }
        }
    }

    /// -> (fused feature [B,C,g,g], coarse scores [B,g*g,2])
    fn extract(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        decoder_taps: &[NodeId],
    ) -> Result<(NodeId, NodeId)> {
        let mut parts = Vec::with_capacity(self.taps.len());
        for (tap, conv) in self.taps.iter().zip(&self.compress) {
            let node = *decoder_taps.get(tap - 1).ok_or_else(|| {
                SeasError::Config(format!("decoder tap {} missing from forward outputs", tap))
            })?;
            let c = conv.apply(g, store, node);
            parts.push(self.resample_to_grid(g, c));
        }
        let mut fused = g.concat(1, &parts);
        let b = g.shape(fused)[0];
        let n = self.grid * self.grid;
        let flat = g.reshape(fused, vec![b, self.fused_dim, n]);
        let mut tokens = g.permute(flat, vec![0, 2, 1]);
        for (attn, ff) in &self.fusion {
            tokens = attn.apply(g, store, tokens);
            tokens = ff.apply(g, store, tokens);
        }
        let back = g.permute(tokens, vec![0, 2, 1]);
        fused = g.reshape(back, vec![b, self.fused_dim, self.grid, self.grid]);
        let logits = self.head.apply(g, store, fused);
        let scores = scores_from_logits(g, logits);
        Ok((fused, scores))
    }
}

/// [B,2,r,r] logits -> [B,r*r,2] per-cell softmax scores.
fn scores_from_logits(g: &mut Graph, logits: NodeId) -> NodeId {
    let sh = g.shape(logits).to_vec();
    let (b, n) = (sh[0], sh[2] * sh[3]);
    let flat = g.reshape(logits, vec![b, 2, n]);
    let t = g.permute(flat, vec![0, 2, 1]);
    g.softmax_last(t)
}

struct ConvBlock {
    a: Conv2d,
    b: Conv2d,
    c: Conv2d,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize) -> Self {
        ConvBlock {
            a: Conv2d::new(store, rng, &format!("{}.a", name), c_in, c_out, 1, 1, 0),
            b: Conv2d::new(store, rng, &format!("{}.b", name), c_out, c_out, 1, 1, 0),
            c: Conv2d::new(store, rng, &format!("{}.c", name), c_out, c_out, 3, 1, 1),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let h = self.a.apply(g, store, x);
        let h = g.silu(h);
        let h = self.b.apply(g, store, h);
        let h = g.silu(h);
        self.c.apply(g, store, h)
    }
}

/// One refinement stage: upsample, run the variant's conv path plus a
/// parallel 1x1 projection, gate by the projected autoencoder feature,
/// fuse with a 3x3 conv.
struct Mrm {
    blocks: Vec<ConvBlock>,
    parallel: Conv2d,
    vae_proj: Conv2d,
    fuse: Conv2d,
}

impl Mrm {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        vae_channels: usize,
        variant: MrmVariant,
    ) -> Self {
        let n_blocks = match variant {
            MrmVariant::A => 0,
            MrmVariant::B => 1,
            MrmVariant::C => 2,
        };
        let mut blocks = Vec::new();
        for i in 0..n_blocks {
            let block_in = if i == 0 { c_in } else { c_out };
            blocks.push(ConvBlock::new(store, rng, &format!("{}.block{}", name, i), block_in, c_out));
        }
        // The gate multiplies the conv path, so stacked stages amplify scale
        // multiplicatively; a damped projection keeps init logits unsaturated.
        let gate_std = 0.2 * (2.0 / vae_channels as f64).sqrt();
        Mrm {
            blocks,
            parallel: Conv2d::new(store, rng, &format!("{}.parallel", name), c_in, c_out, 1, 1, 0),
            vae_proj: Conv2d::no_bias(store, rng, &format!("{}.vproj", name), vae_channels, c_out, 1, 1, 0, gate_std),
            fuse: Conv2d::new(store, rng, &format!("{}.fuse", name), c_out, c_out, 3, 1, 1),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId, vae_feature: NodeId) -> Result<NodeId> {
        let rx = g.shape(x)[2];
        let rv = g.shape(vae_feature)[2];
        if rv != 2 * rx {
            return Err(SeasError::Dimension(format!(
                "gating feature at {} must be twice the working resolution {}",
                rv, rx
            )));
        }
        let up = g.upsample_nearest2x(x);
        let mut sum = self.parallel.apply(g, store, up);
        let mut path = up;
        for (i, block) in self.blocks.iter().enumerate() {
            path = block.apply(g, store, path);
            if i + 1 == self.blocks.len() {
                sum = g.add(sum, path);
            }
        }
        let vp = self.vae_proj.apply(g, store, vae_feature);
        let gated = g.mul(sum, vp);
        Ok(self.fuse.apply(g, store, gated))
    }
}

pub struct RmpOutputs {
    /// [B, grid*grid, 2]
    pub coarse_scores: NodeId,
    /// [B, image*image, 2]
    pub refined_scores: NodeId,
}

pub struct RmpModel {
    pub store: ParamStore,
    coarse: CoarseExtractor,
    mrms: Vec<Mrm>,
    final_head: Conv2d,
    pub grid: usize,
    pub image_size: usize,
    /// Which autoencoder pass supplies the gating features.
    pub feature_source: VaeFeatureSource,
}

impl RmpModel {
    pub fn new(model: &ModelConfig, cfg: &RmpTrainConfig, vae_taps: &[(usize, usize)], seed: u64) -> Result<Self> {
        if model.image_size % 8 != 0 {
            return Err(SeasError::Config(format!("image size {} not divisible by 8", model.image_size)));
        }
        let grid = model.image_size / 8;
        if vae_taps.len() != 3 {
            return Err(SeasError::Config(format!(
                "refinement chain needs 3 gating features, got {}",
                vae_taps.len()
            )));
        }
        if cfg.mrm_widths.len() != 3 {
            return Err(SeasError::Config(format!(
                "refinement chain needs 3 stage widths, got {}",
                cfg.mrm_widths.len()
            )));
        }
        for (k, &(_, r)) in vae_taps.iter().enumerate() {
            let want = grid << (k + 1);
            if r != want {
                return Err(SeasError::Dimension(format!(
                    "gating feature {} at resolution {}, chain needs {}",
                    k + 1,
                    r,
                    want
                )));
            }
        }
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "rmp-init");
        let coarse = CoarseExtractor::new(&mut store, &mut rng, model, cfg, grid)?;
        let mut mrms = Vec::with_capacity(3);
        let mut c_in = coarse.fused_dim;
        for (k, (&w, &(vc, _))) in cfg.mrm_widths.iter().zip(vae_taps).enumerate() {
            mrms.push(Mrm::new(&mut store, &mut rng, &format!("rmp.mrm{}", k + 1), c_in, w, vc, cfg.mrm_variant));
            c_in = w;
        }
        let final_head = Conv2d::new(&mut store, &mut rng, "rmp.final_head", c_in, 2, 3, 1, 1);
        Ok(RmpModel {
            store,
            coarse,
            mrms,
            final_head,
            grid,
            image_size: model.image_size,
            feature_source: cfg.vae_feature_source,
        })
    }

    pub fn param_count(&self) -> usize {
        let ids: Vec<_> = self.store.ids().collect();
        ids.iter().map(|id| self.store.value(*id).len()).sum()
    }

    /// Full branch: decoder taps -> coarse scores, then three gated
    /// refinements -> per-pixel scores.
    pub fn forward(
        &self,
        g: &mut Graph,
        unet_decoder_taps: &[NodeId],
        vae_taps: &[NodeId],
    ) -> Result<RmpOutputs> {
        self.forward_with(g, &self.store, unet_decoder_taps, vae_taps)
    }

    /// Same as forward but reading weights from an external store with the
    /// layout of self.store.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        unet_decoder_taps: &[NodeId],
        vae_taps: &[NodeId],
    ) -> Result<RmpOutputs> {
        if vae_taps.len() != 3 {
            return Err(SeasError::Config(format!(
                "refinement chain needs 3 gating features, got {}",
                vae_taps.len()
            )));
        }
        let (mut h, coarse_scores) = self.coarse.extract(g, store, unet_decoder_taps)?;
        for (mrm, &vt) in self.mrms.iter().zip(vae_taps) {
            h = mrm.apply(g, store, h, vt)?;
        }
        let head_in = logits_input(g, h, self.image_size)?;
        let logits = self.final_head.apply(g, store, head_in);
        let refined_scores = scores_from_logits(g, logits);
        Ok(RmpOutputs { coarse_scores, refined_scores })
    }

    pub fn fingerprint(&self) -> String {
        let ids: Vec<_> = self.store.ids().collect();
        crate::util::fingerprint_f64(ids.iter().flat_map(|id| self.store.value(*id).iter().copied()))
    }
}

fn logits_input(g: &mut Graph, h: NodeId, image_size: usize) -> Result<NodeId> {
    let r = g.shape(h)[2];
    if r != image_size {
        return Err(SeasError::Dimension(format!(
            "refined feature at {}, image grid is {}",
            r, image_size
        )));
    }
    Ok(h)
}

/// Focal loss over [B,n,2] scores against per-sample flat 0/1 masks.
/// `alpha` weights the anomalous class; None means unweighted, and gamma=0
/// with None reduces exactly to mean cross-entropy.
pub fn focal_loss(
    g: &mut Graph,
    scores: NodeId,
    gt: &[Tensor],
    gamma: f64,
    alpha: Option<f64>,
) -> Result<NodeId> {
    let sh = g.shape(scores).to_vec();
    let (b, n) = (sh[0], sh[1]);
    if gt.len() != b {
        return Err(SeasError::Dimension(format!("{} masks for batch {}", gt.len(), b)));
    }
    let mut mdata = Vec::with_capacity(b * n);
    for m in gt {
        if m.numel() != n {
            return Err(SeasError::Dimension(format!("mask {} cells vs {} scores", m.numel(), n)));
        }
        if m.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(SeasError::Validation("focal target must be binary".into()));
        }
        mdata.extend_from_slice(m.data());
    }
    let m = g.input(Tensor::new(vec![b, n, 1], mdata));
    let ones = g.input(Tensor::full(vec![b, n, 1], 1.0));
    let p1 = g.select_last(scores, vec![1]);
    let inv_m = g.sub(ones, m);
    let inv_p = g.sub(ones, p1);
    let hit = g.mul(m, p1);
    let miss = g.mul(inv_m, inv_p);
    let pt = g.add(hit, miss);
    let logp = g.log_clamped(pt, 1e-12);
    let focus = g.sub(ones, pt);
    let weighted = if gamma != 0.0 {
        let w = g.pow_const(focus, gamma);
        g.mul(w, logp)
    } else {
        logp
    };
    let weighted = match alpha {
        Some(a) => {
            let am = g.affine(m, 2.0 * a - 1.0, 1.0 - a);
            g.mul(am, weighted)
        }
        None => weighted,
    };
    let mean = g.mean_all(weighted);
    Ok(g.affine(mean, -1.0, 0.0))
}

/// Per-step focal terms. Zero-valued slots mean the term was disabled.
#[derive(Clone, Copy, Debug, Default)]
pub struct RmpStepLoss {
    pub coarse_df: f64,
    pub refined_df: f64,
    pub coarse_ob: f64,
    pub refined_ob: f64,
    pub total: f64,
}

impl RmpStepLoss {
    pub fn log_line(&self, step: usize) -> String {
        format!(
            "rmp step {} coarse_df {:.6} refined_df {:.6} coarse_ob {:.6} refined_ob {:.6} total {:.6}",
            step, self.coarse_df, self.refined_df, self.coarse_ob, self.refined_ob, self.total
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.coarse_df, self.refined_df, self.coarse_ob, self.refined_ob, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Coarse-grid and full-resolution flat targets for one sample.
pub fn rmp_targets(mask: Option<&MaskImage>, image_size: usize, grid: usize) -> Result<(Tensor, Tensor)> {
    match mask {
        Some(m) => {
            let coarse = mask_layers(m, &[grid])?.remove(0);
            let full: Vec<f64> = m.data.iter().map(|v| *v as f64).collect();
            Ok((coarse, Tensor::new(vec![image_size * image_size], full)))
        }
        None => Ok((
            Tensor::new(vec![grid * grid], vec![0.0; grid * grid]),
            Tensor::new(vec![image_size * image_size], vec![0.0; image_size * image_size]),
        )),
    }
}

pub struct RmpTrainReport {
    pub steps: usize,
    pub curve: Vec<RmpStepLoss>,
    pub log: Vec<String>,
}

/// Refined anomaly probabilities for one real image under one prompt: the
/// teacher view used in training, at a fixed noise level.
pub fn refined_scores_for_image(
    rmp: &RmpModel,
    gen: &Generator,
    vae: &Vae,
    model: &ModelConfig,
    image: &crate::imagedata::ImageF,
    prompt: &Prompt,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let schedule = NoiseSchedule::cosine(model.schedule_steps)?;
    schedule.check_t(t)?;
    let z = vae.encode(&[image])?;
    let eps = crate::util::randn(rng, z.numel());
    let noisy = crate::schedule::forward_diffuse(z.data(), t, &eps, &schedule)?;
    let mut g = Graph::new();
    let zn = g.input(Tensor::new(z.shape().to_vec(), noisy));
    let cond = conditioning_batch(&mut g, &gen.table, &gen.store, &[prompt]);
    let out = gen.unet.forward(&mut g, &gen.store, zn, &[t], cond)?;
    let zc = g.input(z);
    let vtaps = vae.feature_taps(&mut g, zc, rmp.feature_source);
    let rout = rmp.forward(&mut g, &out.decoder_taps, &vtaps)?;
    let sc = g.value(rout.refined_scores);
    let n_px = model.image_size * model.image_size;
    Ok((0..n_px).map(|i| sc.data()[i * 2 + 1]).collect())
}

/// Teacher pass shared by training and tests: noise the clean latents at one
/// of the configured levels, run the frozen denoiser for decoder taps, and
/// take gating features from the frozen autoencoder on the clean latents.
#[allow(clippy::too_many_arguments)]
fn teacher_taps(
    g: &mut Graph,
    gen: &Generator,
    vae: &Vae,
    schedule: &NoiseSchedule,
    latents: &Tensor,
    prompts: &[&Prompt],
    cfg: &RmpTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
    let b = latents.shape()[0];
    let n = latents.numel() / b;
    let mut ts = Vec::with_capacity(b);
    let mut noisy = Vec::with_capacity(b * n);
    for s in 0..b {
        let t = cfg.noise_levels[(rng.next_u64() % cfg.noise_levels.len() as u64) as usize];
        ts.push(t);
        let (a, bt) = (schedule.alpha(t), schedule.beta(t));
        let eps = crate::util::randn(rng, n);
        for i in 0..n {
            noisy.push(a * latents.data()[s * n + i] + bt * eps[i]);
        }
    }
    let zn = g.input(Tensor::new(latents.shape().to_vec(), noisy));
    let cond = conditioning_batch(g, &gen.table, &gen.store, prompts);
    let out = gen.unet.forward(g, &gen.store, zn, &ts, cond)?;
    let zc = g.input(latents.clone());
    let vae_taps = vae.feature_taps(g, zc, cfg.vae_feature_source);
    Ok((out.decoder_taps, vae_taps))
}

/// Train the refinement branch against frozen generator and autoencoder.
pub fn train_rmp(
    rmp: &mut RmpModel,
    gen: &Generator,
    vae: &Vae,
    corpus: &Corpus,
    model: &ModelConfig,
    cfg: &RmpTrainConfig,
    seed: u64,
) -> Result<RmpTrainReport> {
    if !gen.is_frozen() {
        return Err(SeasError::Config("generator must be frozen before refinement training".into()));
    }
    if !vae.store.trainable_names().is_empty() {
        return Err(SeasError::Config("autoencoder must be frozen before refinement training".into()));
    }
    for &t in &cfg.noise_levels {
        if t >= model.schedule_steps {
            return Err(SeasError::Range(format!("noise level {} outside schedule", t)));
        }
    }
    let abnormals = corpus.abnormals();
    let normals = corpus.normals();
    if abnormals.is_empty() {
        return Err(SeasError::Data("corpus has no abnormal samples".into()));
    }
    if cfg.use_normal_images && normals.is_empty() {
        return Err(SeasError::Data("corpus has no normal samples".into()));
    }

    let schedule = NoiseSchedule::cosine(model.schedule_steps)?;
    let cache = LatentCache::build(vae, corpus)?;
    let prompts: Vec<Prompt> = (1..=gen.n_types)
        .map(|n| gen.abnormal_prompt(n))
        .collect::<Result<_>>()?;
    let normal_prompt = gen.normal_prompt()?;
    let gen_fp_before = gen.fingerprint();

    let lr_ids: Vec<_> = rmp
        .store
        .ids()
        .filter(|id| rmp.store.is_trainable(*id))
        .map(|id| (id, cfg.lr))
        .collect();
    let opt_cfg = AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    let mut opt = AdamW::new(opt_cfg, lr_ids, &rmp.store);

    let total = cfg.total_steps(gen.n_types);
    let mut rng = rng_for(seed, "rmp-train");
    let mut curve = Vec::with_capacity(total);
    let mut log = Vec::with_capacity(total);

    for step in 0..total {
        let mut g = Graph::new();
        let mut losses = RmpStepLoss::default();

        let mut idx = Vec::with_capacity(cfg.batch_abnormal);
        let mut bp: Vec<&Prompt> = Vec::with_capacity(cfg.batch_abnormal);
        let mut coarse_gt = Vec::with_capacity(cfg.batch_abnormal);
        let mut full_gt = Vec::with_capacity(cfg.batch_abnormal);
        for _ in 0..cfg.batch_abnormal {
            let s = &abnormals[(rng.next_u64() % abnormals.len() as u64) as usize];
            idx.push(s.index);
            bp.push(&prompts[s.anomaly_type - 1]);
            let mask = s.mask.as_ref().ok_or_else(|| {
                SeasError::Validation(format!("abnormal sample {} lacks a mask", s.index))
            })?;
            let (c, f) = rmp_targets(Some(mask), model.image_size, rmp.grid)?;
            coarse_gt.push(c);
            full_gt.push(f);
        }
        let latents = cache.batch(&idx);
        let (u_taps, v_taps) = teacher_taps(&mut g, gen, vae, &schedule, &latents, &bp, cfg, &mut rng)?;
        let out = rmp.forward(&mut g, &u_taps, &v_taps)?;
        let c_df = focal_loss(&mut g, out.coarse_scores, &coarse_gt, cfg.focal_gamma, cfg.focal_alpha)?;
        let r_df = focal_loss(&mut g, out.refined_scores, &full_gt, cfg.focal_gamma, cfg.focal_alpha)?;
        losses.coarse_df = g.value(c_df).item();
        losses.refined_df = g.value(r_df).item();
        let mut total_node = g.add(c_df, r_df);

        if cfg.use_normal_images && cfg.batch_normal > 0 {
            let nidx: Vec<usize> = (0..cfg.batch_normal)
                .map(|_| normals[(rng.next_u64() % normals.len() as u64) as usize].index)
                .collect();
            let nprompts: Vec<&Prompt> = std::iter::repeat(&normal_prompt).take(nidx.len()).collect();
            let mut ncoarse = Vec::with_capacity(nidx.len());
            let mut nfull = Vec::with_capacity(nidx.len());
            for _ in &nidx {
                let (c, f) = rmp_targets(None, model.image_size, rmp.grid)?;
                ncoarse.push(c);
                nfull.push(f);
            }
            let nlat = cache.batch(&nidx);
            let (u2, v2) = teacher_taps(&mut g, gen, vae, &schedule, &nlat, &nprompts, cfg, &mut rng)?;
            let out2 = rmp.forward(&mut g, &u2, &v2)?;
            let c_ob = focal_loss(&mut g, out2.coarse_scores, &ncoarse, cfg.focal_gamma, cfg.focal_alpha)?;
            let r_ob = focal_loss(&mut g, out2.refined_scores, &nfull, cfg.focal_gamma, cfg.focal_alpha)?;
            losses.coarse_ob = g.value(c_ob).item();
            losses.refined_ob = g.value(r_ob).item();
            let ob_sum = g.add(c_ob, r_ob);
            total_node = g.add(total_node, ob_sum);
        }

        losses.total = g.value(total_node).item();
        if !losses.is_finite() {
            return Err(SeasError::Divergence { step, term: "rmp".into() });
        }
        curve.push(losses);
        log.push(losses.log_line(step));

        rmp.store.zero_grads();
        g.backward(total_node, &mut rmp.store);
        opt.step(&mut rmp.store);
        if step % 25 == 0 || step + 1 == total {
            println!("{}", losses.log_line(step));
        }
    }

    if gen.fingerprint() != gen_fp_before {
        return Err(SeasError::Compatibility("generator parameters moved during refinement training".into()));
    }
    Ok(RmpTrainReport { steps: total, curve, log })
}
