//! Conditional denoising U-Net over latents.
//!
//! Every encoder level runs a residual block then cross-attention over the
//! prompt tokens; the head-averaged attention map of each encoder level is
//! exposed for the alignment losses, keyed 1..n_levels from the outermost
//! (latent) resolution inward. Decoder levels mirror the encoder with skip
//! concatenation, and each decoder stage's feature map is exposed innermost
//! first, resolutions doubling stage to stage. The noise head starts zeroed
//! so an untrained model predicts zero noise.

use crate::config::ModelConfig;
use crate::error::{Result, SeasError};
use crate::nn::{sinusoidal_time_embedding, Conv2d, CrossAttention, GroupNorm, ResBlock, TimeMlp};
use crate::util::rng_for;
use seas_tensor::{Graph, NodeId, ParamStore, Tensor};

pub struct UnetOutputs {
    /// Predicted noise, same shape as the noisy latent.
    pub eps: NodeId,
    /// Encoder attention maps; index l-1 holds layer l as [B, r_l*r_l, Z].
    pub attn: Vec<NodeId>,
    /// Decoder features up-1..up-n, innermost first, resolutions doubling.
    pub decoder_taps: Vec<NodeId>,
}

struct EncLevel {
    res: ResBlock,
    attn: CrossAttention,
    down: Option<Conv2d>,
}

struct DecLevel {
    up: Option<Conv2d>,
    res: ResBlock,
    attn: CrossAttention,
}

pub struct Unet {
    latent_channels: usize,
    latent_size: usize,
    z_len: usize,
    cond_dim: usize,
    time_dim: usize,
    schedule_steps: usize,
    conv_in: Conv2d,
    time_mlp: TimeMlp,
    enc: Vec<EncLevel>,
    mid: ResBlock,
    dec: Vec<DecLevel>,
    out_norm: GroupNorm,
    conv_out: Conv2d,
}

impl Unet {
    /// Builds all parameters into `store` under the "unet." prefix.
    pub fn new(model: &ModelConfig, store: &mut ParamStore, seed: u64) -> Self {
        assert!(model.attn_dim % model.attn_heads == 0, "attn_dim must split across heads");
        let mut rng = rng_for(seed, "unet-init");
        let w = &model.unet_widths;
        let n = w.len();
        let groups = model.norm_groups;
        let heads = model.attn_heads;
        let head_dim = model.attn_dim / heads;
        let temb = Some(model.temb_dim);

        let conv_in = Conv2d::new(store, &mut rng, "unet.in", model.latent_channels, w[0], 3, 1, 1);
        let time_mlp = TimeMlp::new(store, &mut rng, "unet.time", model.time_dim, model.temb_dim);

        let mut enc = Vec::with_capacity(n);
        for l in 0..n {
            enc.push(EncLevel {
                res: ResBlock::new(store, &mut rng, &format!("unet.enc{}.res", l), w[l], w[l], groups, temb),
                attn: CrossAttention::new(
                    store,
                    &mut rng,
                    &format!("unet.enc{}.attn", l),
                    w[l],
                    model.cond_dim,
                    heads,
                    head_dim,
                    groups,
                ),
                down: if l + 1 < n {
                    Some(Conv2d::new(store, &mut rng, &format!("unet.enc{}.down", l), w[l], w[l + 1], 3, 2, 1))
                } else {
                    None
                },
            });
        }
        let mid = ResBlock::new(store, &mut rng, "unet.mid", w[n - 1], w[n - 1], groups, temb);

        let mut dec = Vec::with_capacity(n);
        for k in 0..n {
            // stage k consumes the skip from encoder level n-1-k
            let lvl = n - 1 - k;
            let c_here = w[lvl];
            dec.push(DecLevel {
                up: if k == 0 {
                    None
                } else {
                    Some(Conv2d::new(store, &mut rng, &format!("unet.dec{}.up", k), w[lvl + 1], c_here, 3, 1, 1))
                },
                res: ResBlock::new(store, &mut rng, &format!("unet.dec{}.res", k), 2 * c_here, c_here, groups, temb),
                attn: CrossAttention::new(
                    store,
                    &mut rng,
                    &format!("unet.dec{}.attn", k),
                    c_here,
                    model.cond_dim,
                    heads,
                    head_dim,
                    groups,
                ),
            });
        }

        let out_norm = GroupNorm::new(store, "unet.out.norm", w[0], groups);
        let conv_out = Conv2d::zeroed(store, "unet.out.conv", w[0], model.latent_channels, 3, 1, 1);

        Unet {
            latent_channels: model.latent_channels,
            latent_size: model.latent_size,
            z_len: model.z_len,
            cond_dim: model.cond_dim,
            time_dim: model.time_dim,
            schedule_steps: model.schedule_steps,
            conv_in,
            time_mlp,
            enc,
            mid,
            dec,
            out_norm,
            conv_out,
        }
    }

    pub fn n_levels(&self) -> usize {
        self.enc.len()
    }

    /// z [B,c,h,w] noisy latent, ts per-sample steps, cond [B,Z,C1].
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: NodeId,
        ts: &[usize],
        cond: NodeId,
    ) -> Result<UnetOutputs> {
        let zs = g.shape(z).to_vec();
        let b = zs[0];
        if zs.len() != 4 || zs[1] != self.latent_channels || zs[2] != self.latent_size || zs[3] != self.latent_size {
            return Err(SeasError::Dimension(format!(
                "latent shape {:?}, expected [B,{},{},{}]",
                zs, self.latent_channels, self.latent_size, self.latent_size
            )));
        }
        let cs = g.shape(cond).to_vec();
        if cs != vec![b, self.z_len, self.cond_dim] {
            return Err(SeasError::Dimension(format!(
                "conditioning shape {:?}, expected [{},{},{}]",
                cs, b, self.z_len, self.cond_dim
            )));
        }
        if ts.len() != b {
            return Err(SeasError::Dimension(format!("{} timesteps for batch {}", ts.len(), b)));
        }
        for &t in ts {
            if t >= self.schedule_steps {
                return Err(SeasError::Range(format!("timestep {} outside schedule {}", t, self.schedule_steps)));
            }
        }

        let emb = g.input(sinusoidal_time_embedding(ts, self.time_dim));
        let temb = self.time_mlp.apply(g, store, emb);

        let mut h = self.conv_in.apply(g, store, z);
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut attn_maps = Vec::with_capacity(self.enc.len());
        for level in &self.enc {
            h = level.res.apply(g, store, h, Some(temb));
            let (hh, map) = level.attn.apply(g, store, h, cond);
            h = hh;
            attn_maps.push(map);
            skips.push(h);
            if let Some(down) = &level.down {
                h = down.apply(g, store, h);
            }
        }

        h = self.mid.apply(g, store, h, Some(temb));

        let mut taps = Vec::with_capacity(self.dec.len());
        for stage in &self.dec {
            if let Some(up) = &stage.up {
                h = g.upsample_nearest2x(h);
                h = up.apply(g, store, h);
            }
            let skip = skips.pop().expect("one skip per stage");
            let cat = g.concat(1, &[h, skip]);
            h = stage.res.apply(g, store, cat, Some(temb));
            let (hh, _) = stage.attn.apply(g, store, h, cond);
            h = hh;
            taps.push(h);
        }

        let hn = self.out_norm.apply(g, store, h);
        let hs = g.silu(hn);
        let eps = self.conv_out.apply(g, store, hs);
        Ok(UnetOutputs { eps, attn: attn_maps, decoder_taps: taps })
    }
}

/// Standard-normal latent noise helper shaped [batch, c, s, s].
pub fn latent_noise(batch: usize, c: usize, s: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    Tensor::new(vec![batch, c, s, s], crate::util::randn(rng, batch * c * s * s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::util::randn;

    fn build() -> (RunConfig, ParamStore, Unet) {
        let cfg = RunConfig::micro();
        let mut store = ParamStore::new();
        let unet = Unet::new(&cfg.model, &mut store, cfg.seed);
        (cfg, store, unet)
    }

    fn run_forward(cfg: &RunConfig, store: &ParamStore, unet: &Unet, g: &mut Graph) -> UnetOutputs {
        let mut rng = rng_for(3, "unet-test");
        let m = &cfg.model;
        let z = g.input(latent_noise(2, m.latent_channels, m.latent_size, &mut rng));
        let cond = g.input(Tensor::new(
            vec![2, m.z_len, m.cond_dim],
            randn(&mut rng, 2 * m.z_len * m.cond_dim),
        ));
        unet.forward(g, store, z, &[0, 5], cond).unwrap()
    }

    #[test]
    fn output_shapes_follow_the_level_layout() {
        let (cfg, store, unet) = build();
        let m = &cfg.model;
        let mut g = Graph::new();
        let out = run_forward(&cfg, &store, &unet, &mut g);
        assert_eq!(g.shape(out.eps), &[2, m.latent_channels, m.latent_size, m.latent_size]);
        assert_eq!(out.attn.len(), m.unet_widths.len());
        for (i, map) in out.attn.iter().enumerate() {
            let r = m.attn_resolution(i + 1);
            assert_eq!(g.shape(*map), &[2, r * r, m.z_len], "attention layer {}", i + 1);
        }
        assert_eq!(out.decoder_taps.len(), m.unet_widths.len());
        for (k, tap) in out.decoder_taps.iter().enumerate() {
            let r = m.decoder_tap_resolution(k + 1);
            let c = m.decoder_tap_channels(k + 1);
            assert_eq!(g.shape(*tap), &[2, c, r, r], "decoder tap {}", k + 1);
        }
    }

    #[test]
    fn attention_maps_are_distributions_over_tokens() {
        let (cfg, store, unet) = build();
        let mut g = Graph::new();
        let out = run_forward(&cfg, &store, &unet, &mut g);
        for map in &out.attn {
            for row in g.value(*map).data().chunks_exact(cfg.model.z_len) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-10);
                assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn untrained_head_predicts_zero_noise() {
        let (cfg, store, unet) = build();
        let mut g = Graph::new();
        let out = run_forward(&cfg, &store, &unet, &mut g);
        assert!(g.value(out.eps).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bad_shapes_and_steps_are_rejected() {
        let (cfg, store, unet) = build();
        let m = &cfg.model;
        let mut rng = rng_for(4, "unet-test");
        let mut g = Graph::new();
        let z = g.input(latent_noise(1, m.latent_channels, m.latent_size, &mut rng));
        let cond_ok = g.input(Tensor::new(vec![1, m.z_len, m.cond_dim], randn(&mut rng, m.z_len * m.cond_dim)));
        let cond_bad = g.input(Tensor::new(vec![1, m.z_len + 1, m.cond_dim], randn(&mut rng, (m.z_len + 1) * m.cond_dim)));
        assert!(matches!(unet.forward(&mut g, &store, z, &[0], cond_bad), Err(SeasError::Dimension(_))));
        assert!(matches!(unet.forward(&mut g, &store, z, &[0, 1], cond_ok), Err(SeasError::Dimension(_))));
        assert!(matches!(
            unet.forward(&mut g, &store, z, &[m.schedule_steps], cond_ok),
            Err(SeasError::Range(_))
        ));
        let zbad = g.input(latent_noise(1, m.latent_channels + 1, m.latent_size, &mut rng));
        assert!(matches!(unet.forward(&mut g, &store, zbad, &[0], cond_ok), Err(SeasError::Dimension(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let (cfg, store, unet) = build();
        let mut g1 = Graph::new();
        let a = run_forward(&cfg, &store, &unet, &mut g1);
        let mut g2 = Graph::new();
        let b = run_forward(&cfg, &store, &unet, &mut g2);
        assert_eq!(g1.value(a.eps).data(), g2.value(b.eps).data());
        assert_eq!(g1.value(a.attn[0]).data(), g2.value(b.attn[0]).data());
    }
}
