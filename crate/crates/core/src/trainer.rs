//! Mixed-batch fine-tuning of the generative stage: the U-Net and the added
//! token rows train together while the autoencoder and scaffold vocabulary
//! stay frozen.
//!
//! Latents for the whole corpus are encoded once up front; with the encoder
//! frozen they never change, so each step only runs the denoiser. The default
//! strategy mixes abnormal and normal samples in one batch and one backward
//! pass; the phase strategies run the two populations in separate halves of
//! the schedule.

use crate::config::{GenTrainConfig, MixStrategy, ModelConfig};
use crate::error::{Result, SeasError};
use crate::losses::{
    abnormal_loss, mask_layers, normal_loss, GenContext, LossBreakdown, LossWeights,
};
use crate::prompt::{build_abnormal_prompt, build_normal_prompt, setup_tokens, Prompt, TokenTable};
use crate::schedule::NoiseSchedule;
use crate::synthdata::Corpus;
use crate::unet::Unet;
use crate::util::{fingerprint_f64, rng_for};
use crate::vae::Vae;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use seas_tensor::{AdamW, AdamWConfig, Graph, ParamStore, Tensor};

/// The trainable generative stage: denoiser plus token table in one store.
pub struct Generator {
    pub store: ParamStore,
    pub unet: Unet,
    pub table: TokenTable,
    pub n_types: usize,
    pub n_anomaly_tokens: usize,
    pub n_normal_tokens: usize,
    z_len: usize,
}

impl Generator {
    pub fn new(model: &ModelConfig, cfg: &GenTrainConfig, n_types: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let unet = Unet::new(model, &mut store, seed);
        let mut rng = rng_for(seed, "tokens");
        let mut table = TokenTable::new(&mut store, &mut rng, model.cond_dim);
        setup_tokens(
            &mut table,
            &mut store,
            &mut rng,
            n_types,
            cfg.n_anomaly_tokens,
            cfg.n_normal_tokens,
            cfg.frozen_tokens,
        )?;
        Ok(Generator {
            store,
            unet,
            table,
            n_types,
            n_anomaly_tokens: cfg.n_anomaly_tokens,
            n_normal_tokens: cfg.n_normal_tokens,
            z_len: model.z_len,
        })
    }

    pub fn abnormal_prompt(&self, anomaly_type: usize) -> Result<Prompt> {
        build_abnormal_prompt(
            &self.table,
            anomaly_type,
            self.n_types,
            self.n_anomaly_tokens,
            self.n_normal_tokens,
            self.z_len,
        )
    }

    pub fn normal_prompt(&self) -> Result<Prompt> {
        build_normal_prompt(&self.table, self.n_normal_tokens, self.z_len)
    }

    pub fn is_frozen(&self) -> bool {
        self.store.trainable_names().is_empty()
    }

    pub fn freeze(&mut self) {
        self.store.freeze_all();
    }

    /// Hash of every parameter value, order-stable.
    pub fn fingerprint(&self) -> String {
        let ids: Vec<_> = self.store.ids().collect();
        fingerprint_f64(ids.iter().flat_map(|id| self.store.value(*id).iter().copied()))
    }
}

/// Per-sample latents for the whole corpus, encoded once.
pub struct LatentCache {
    latents: Vec<Option<Vec<f64>>>,
    channels: usize,
    size: usize,
}

impl LatentCache {
    pub fn build(vae: &Vae, corpus: &Corpus) -> Result<Self> {
        let max_index = corpus.samples.iter().map(|s| s.index).max().unwrap_or(0);
        let mut latents = vec![None; max_index + 1];
        for chunk in corpus.samples.chunks(8) {
            let imgs: Vec<_> = chunk.iter().map(|s| &s.image).collect();
            let z = vae.encode(&imgs)?;
            let n = z.numel() / chunk.len();
            for (i, s) in chunk.iter().enumerate() {
                latents[s.index] = Some(z.data()[i * n..(i + 1) * n].to_vec());
            }
        }
        Ok(LatentCache {
            latents,
            channels: vae.latent_channels(),
            size: vae.latent_size(),
        })
    }

    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let n = self.channels * self.size * self.size;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.latents[i].as_ref().expect("latent cached"));
        }
        Tensor::new(vec![indices.len(), self.channels, self.size, self.size], data)
    }
}

fn pick<'a, T>(pool: &'a [T], rng: &mut ChaCha8Rng) -> &'a T {
    &pool[(rng.next_u64() % pool.len() as u64) as usize]
}

enum StepKind {
    Mixed,
    AbnormalOnly,
    NormalOnly,
}

fn step_kind(strategy: MixStrategy, step: usize, total: usize) -> StepKind {
    let first_half = step < total / 2;
    match strategy {
        MixStrategy::Mixed => StepKind::Mixed,
        MixStrategy::AbnormalThenNormal => {
            if first_half {
                StepKind::AbnormalOnly
            } else {
                StepKind::NormalOnly
            }
        }
        MixStrategy::NormalThenAbnormal => {
            if first_half {
                StepKind::NormalOnly
            } else {
                StepKind::AbnormalOnly
            }
        }
    }
}

pub struct TrainReport {
    pub steps: usize,
    pub curve: Vec<LossBreakdown>,
    pub log: Vec<String>,
}

/// Fine-tune the generator on the corpus. The autoencoder must already be
/// frozen; scaffold vocabulary rows are asserted bit-identical afterwards.
pub fn train_generator(
    gen: &mut Generator,
    vae: &Vae,
    corpus: &Corpus,
    model: &ModelConfig,
    cfg: &GenTrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    if !vae.store.trainable_names().is_empty() {
        return Err(SeasError::Config("autoencoder must be frozen before generator training".into()));
    }
    let abnormals = corpus.abnormals();
    let normals = corpus.normals();
    let needs_abnormal = !matches!(cfg.mix, MixStrategy::Mixed) || cfg.batch_abnormal > 0;
    let needs_normal = matches!(cfg.mix, MixStrategy::Mixed) && cfg.batch_normal > 0 && cfg.enable_na
        || !matches!(cfg.mix, MixStrategy::Mixed);
    if needs_abnormal && abnormals.is_empty() {
        return Err(SeasError::Data("corpus has no abnormal samples".into()));
    }
    if needs_normal && normals.is_empty() {
        return Err(SeasError::Data("corpus has no normal samples".into()));
    }

    let schedule = NoiseSchedule::cosine(model.schedule_steps)?;
    let cache = LatentCache::build(vae, corpus)?;
    let prompts: Vec<Prompt> = (1..=gen.n_types)
        .map(|n| gen.abnormal_prompt(n))
        .collect::<Result<_>>()?;
    let normal_prompt = gen.normal_prompt()?;
    let base_vocab_before = gen.store.value(gen.table.param_ids()[0]).to_vec();

    let weights = LossWeights {
        da1: cfg.weight_da1,
        da2: cfg.weight_da2,
        df: cfg.weight_df,
        ob: cfg.weight_ob,
        at: cfg.weight_at,
    };
    let lr_ids: Vec<_> = gen
        .store
        .ids()
        .into_iter()
        .filter(|id| gen.store.is_trainable(*id))
        .map(|id| {
            let lr = if gen.store.name(id).starts_with("tokens.") {
                cfg.lr_embeddings
            } else {
                cfg.lr_unet
            };
            (id, lr)
        })
        .collect();
    let opt_cfg = AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    let mut opt = AdamW::new(opt_cfg, lr_ids, &gen.store);

    let total = cfg.total_steps(gen.n_types);
    let mut rng = rng_for(seed, "gen-train");
    let mut curve = Vec::with_capacity(total);
    let mut log = Vec::with_capacity(total);

    for step in 0..total {
        let kind = step_kind(cfg.mix, step, total);
        let (n_ab, n_no) = match kind {
            StepKind::Mixed => (cfg.batch_abnormal, cfg.batch_normal),
            StepKind::AbnormalOnly => (cfg.batch_abnormal + cfg.batch_normal, 0),
            StepKind::NormalOnly => (0, cfg.batch_abnormal + cfg.batch_normal),
        };

        let mut g = Graph::new();
        let mut breakdown = LossBreakdown::default();
        let mut total_node = None;

        {
            let ctx = GenContext {
                model,
                unet: &gen.unet,
                store: &gen.store,
                table: &gen.table,
                schedule: &schedule,
            };

            if n_ab > 0 {
                let mut idx = Vec::with_capacity(n_ab);
                let mut batch_prompts = Vec::with_capacity(n_ab);
                let mut batch_masks = Vec::with_capacity(n_ab);
                for _ in 0..n_ab {
                    let s = pick(&abnormals, &mut rng);
                    idx.push(s.index);
                    batch_prompts.push(&prompts[s.anomaly_type - 1]);
                    batch_masks.push(s.mask.as_ref().ok_or_else(|| {
                        SeasError::Validation(format!("abnormal sample {} lacks a mask", s.index))
                    })?);
                }
                let latents = cache.batch(&idx);
                let nodes = abnormal_loss(
                    &mut g,
                    &ctx,
                    &latents,
                    &batch_prompts,
                    &batch_masks,
                    &cfg.alignment_layers,
                    &weights,
                    cfg.enable_st,
                    cfg.at_variant,
                    &mut rng,
                )?;
                breakdown.da_term1 = g.value(nodes.da_term1).item();
                breakdown.diffusion_df = g.value(nodes.diffusion_df).item();
                if let Some(t2) = nodes.da_term2 {
                    breakdown.da_term2 = g.value(t2).item();
                }
                if let Some(at) = nodes.at_term {
                    breakdown.at_term = g.value(at).item();
                }
                total_node = Some(nodes.total);
            }

            if n_no > 0 && (cfg.enable_na || !matches!(kind, StepKind::Mixed)) {
                let idx: Vec<usize> = (0..n_no).map(|_| pick(&normals, &mut rng).index).collect();
                let latents = cache.batch(&idx);
                let ob = normal_loss(&mut g, &ctx, &latents, &normal_prompt, &mut rng)?;
                breakdown.diffusion_ob = g.value(ob).item();
                total_node = Some(match total_node {
                    Some(t) => g.add_scaled(t, ob, weights.ob),
                    None => g.affine(ob, weights.ob, 0.0),
                });
            }
        }

        let total_node = total_node.ok_or_else(|| SeasError::Config("empty training step".into()))?;
        breakdown.total = g.value(total_node).item();
        if let Some(term) = breakdown.non_finite_term() {
            return Err(SeasError::Divergence { step, term: term.into() });
        }
        log.push(breakdown.log_line(step));
        curve.push(breakdown);

        gen.store.zero_grads();
        g.backward(total_node, &mut gen.store);
        opt.step(&mut gen.store);
        if step % 25 == 0 || step + 1 == total {
            println!("gen {}", breakdown.log_line(step));
        }
    }

    let base_vocab_after = gen.store.value(gen.table.param_ids()[0]).to_vec();
    assert_eq!(base_vocab_before, base_vocab_after, "scaffold vocabulary moved");

    Ok(TrainReport { steps: total, curve, log })
}

/// Mean IoU between the summed anomaly-token attention (thresholded at 0.5)
/// and the layer mask, over abnormal samples and alignment layers. The
/// attention is read at a fixed low noise level with seeded noise.
pub fn alignment_iou(
    gen: &Generator,
    vae: &Vae,
    corpus: &Corpus,
    model: &ModelConfig,
    layers: &[usize],
    seed: u64,
) -> Result<f64> {
    let schedule = NoiseSchedule::cosine(model.schedule_steps)?;
    let t_eval = 100.min(model.schedule_steps - 1);
    let mut rng = rng_for(seed, "align-eval");
    let mut ious = Vec::new();
    for s in corpus.abnormals() {
        let prompt = gen.abnormal_prompt(s.anomaly_type)?;
        let mask = s.mask.as_ref().expect("abnormal sample has mask");
        let z = vae.encode(&[&s.image])?;
        let eps = crate::unet::latent_noise(1, vae.latent_channels(), vae.latent_size(), &mut rng);
        let mut noisy = Vec::with_capacity(z.numel());
        let (a, b) = (schedule.alpha(t_eval), schedule.beta(t_eval));
        for (zv, ev) in z.data().iter().zip(eps.data()) {
            noisy.push(a * zv + b * ev);
        }
        let mut g = Graph::new();
        let zin = g.input(Tensor::new(z.shape().to_vec(), noisy));
        let cond = crate::losses::conditioning_batch(&mut g, &gen.table, &gen.store, &[&prompt]);
        let out = gen.unet.forward(&mut g, &gen.store, zin, &[t_eval], cond)?;
        for &l in layers {
            let r = model.attn_resolution(l);
            let m = &mask_layers(mask, &[r])?[0];
            let map = g.value(out.attn[l - 1]);
            let z_len = map.shape()[2];
            let mut inter = 0usize;
            let mut uni = 0usize;
            for cell in 0..r * r {
                let mut sum = 0.0;
                for &c in &prompt.df_columns {
                    sum += map.data()[cell * z_len + c];
                }
                let pred = sum > 0.5;
                let gt = m.data()[cell] == 1.0;
                if pred && gt {
                    inter += 1;
                }
                if pred || gt {
                    uni += 1;
                }
            }
            ious.push(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 });
        }
    }
    if ious.is_empty() {
        return Err(SeasError::Data("no abnormal samples to evaluate".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Plain diffusion MSE of the generator on held-out normal images, a cheap
/// training-health probe.
pub fn holdout_denoise_mse(
    gen: &Generator,
    vae: &Vae,
    corpus: &Corpus,
    model: &ModelConfig,
    seed: u64,
) -> Result<f64> {
    let holdouts = corpus.holdout_normals();
    if holdouts.is_empty() {
        return Err(SeasError::Data("no holdout normals".into()));
    }
    let schedule = NoiseSchedule::cosine(model.schedule_steps)?;
    let prompt = gen.normal_prompt()?;
    let mut rng = rng_for(seed, "holdout-eval");
    let mut acc = 0.0;
    for s in &holdouts {
        let z = vae.encode(&[&s.image])?;
        let ctx = GenContext {
            model,
            unet: &gen.unet,
            store: &gen.store,
            table: &gen.table,
            schedule: &schedule,
        };
        let mut g = Graph::new();
        let loss = normal_loss(&mut g, &ctx, &z, &prompt, &mut rng)?;
        acc += g.value(loss).item();
    }
    Ok(acc / holdouts.len() as f64)
}
