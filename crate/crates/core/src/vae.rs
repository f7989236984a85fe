//! Deterministic convolutional autoencoder bridging images and the latent
//! space, with decoder (and encoder) feature taps for the mask-refinement
//! chain.
//!
//! Images live in [0,1] and are mapped to [-1,1] internally. The latent is
//! image_size/4 on a side. Three feature taps are exposed at latent, 2x, and
//! 4x resolution so each refinement stage sees a feature at exactly twice its
//! working resolution. After pretraining the whole store is frozen and a
//! global latent scale is fitted so diffusion sees roughly unit variance.

use crate::config::{ModelConfig, VaeTrainConfig, VaeFeatureSource};
use crate::error::{Result, SeasError};
use crate::imagedata::ImageF;
use crate::nn::{Conv2d, GroupNorm, ResBlock};
use crate::synthdata::Corpus;
use crate::util::{randn, rng_for};
use rand::RngCore;
use seas_tensor::{AdamW, AdamWConfig, Graph, NodeId, ParamStore, Tensor};

pub struct Vae {
    pub store: ParamStore,
    pub latent_scale: f64,
    image_size: usize,
    image_channels: usize,
    latent_channels: usize,
    latent_size: usize,
    widths: Vec<usize>,
    enc_in: Conv2d,
    enc_stages: Vec<ResBlock>,
    enc_downs: Vec<Conv2d>,
    enc_norm: GroupNorm,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_stages: Vec<ResBlock>,
    dec_ups: Vec<Conv2d>,
    dec_norm: GroupNorm,
    dec_out: Conv2d,
}

impl Vae {
    pub fn new(model: &ModelConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "vae-init");
        let w = model.vae_widths.clone();
        let stages = w.len();
        let groups = model.norm_groups.min(*w.iter().min().unwrap());

        let enc_in = Conv2d::new(&mut store, &mut rng, "vae.enc.in", model.image_channels, w[0], 3, 1, 1);
        let mut enc_stages = Vec::new();
        let mut enc_downs = Vec::new();
        for s in 0..stages {
            enc_stages.push(ResBlock::new(&mut store, &mut rng, &format!("vae.enc.s{}", s), w[s], w[s], groups, None));
            if s + 1 < stages {
                enc_downs.push(Conv2d::new(&mut store, &mut rng, &format!("vae.enc.d{}", s), w[s], w[s + 1], 3, 2, 1));
            }
        }
        let enc_norm = GroupNorm::new(&mut store, "vae.enc.norm", w[stages - 1], groups);
        let enc_out = Conv2d::new(&mut store, &mut rng, "vae.enc.out", w[stages - 1], model.latent_channels, 3, 1, 1);

        let dec_in = Conv2d::new(&mut store, &mut rng, "vae.dec.in", model.latent_channels, w[stages - 1], 3, 1, 1);
        let mut dec_stages = Vec::new();
        let mut dec_ups = Vec::new();
        for s in (0..stages).rev() {
            dec_stages.push(ResBlock::new(&mut store, &mut rng, &format!("vae.dec.s{}", s), w[s], w[s], groups, None));
            if s > 0 {
                dec_ups.push(Conv2d::new(&mut store, &mut rng, &format!("vae.dec.u{}", s), w[s], w[s - 1], 3, 1, 1));
            }
        }
        let dec_norm = GroupNorm::new(&mut store, "vae.dec.norm", w[0], groups);
        let dec_out = Conv2d::new(&mut store, &mut rng, "vae.dec.out", w[0], model.image_channels, 3, 1, 1);

        Vae {
            store,
            latent_scale: 1.0,
            image_size: model.image_size,
            image_channels: model.image_channels,
            latent_channels: model.latent_channels,
            latent_size: model.latent_size,
            widths: w,
            enc_in,
            enc_stages,
            enc_downs,
            enc_norm,
            enc_out,
            dec_in,
            dec_stages,
            dec_ups,
            dec_norm,
            dec_out,
        }
    }

    pub fn latent_size(&self) -> usize {
        self.latent_size
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    /// Feature tap shapes, innermost first: (channels, resolution) with the
    /// resolution doubling along the list.
    pub fn tap_shapes(&self) -> Vec<(usize, usize)> {
        let stages = self.widths.len();
        (0..stages)
            .map(|i| (self.widths[stages - 1 - i], self.latent_size << i))
            .collect()
    }

    /// Raw (unscaled) encoder pass, optionally capturing per-stage features.
    /// x [B,C,H,W] in [0,1].
    fn encode_graph(&self, g: &mut Graph, x: NodeId, taps: Option<&mut Vec<NodeId>>) -> NodeId {
        let stages = self.widths.len();
        let xc = g.affine(x, 2.0, -1.0);
        let mut h = self.enc_in.apply(g, &self.store, xc);
        let mut captured = vec![NodeId(0); stages];
        for s in 0..stages {
            h = self.enc_stages[s].apply(g, &self.store, h, None);
            captured[s] = h;
            if s + 1 < stages {
                h = self.enc_downs[s].apply(g, &self.store, h);
            }
        }
        if let Some(out) = taps {
            // innermost first so shapes line up with decoder taps
            captured.reverse();
            *out = captured;
        }
        let hn = self.enc_norm.apply(g, &self.store, h);
        let hs = g.silu(hn);
        self.enc_out.apply(g, &self.store, hs)
    }

    /// Raw decoder pass from an unscaled latent; returns the pre-clamp image
    /// in [-1,1] convention plus the per-stage feature taps, innermost first.
    fn decode_graph(&self, g: &mut Graph, z: NodeId) -> (NodeId, Vec<NodeId>) {
        let stages = self.widths.len();
        let mut h = self.dec_in.apply(g, &self.store, z);
        let mut taps = Vec::with_capacity(stages);
        for i in 0..stages {
            h = self.dec_stages[i].apply(g, &self.store, h, None);
            taps.push(h);
            if i + 1 < stages {
                h = g.upsample_nearest2x(h);
                h = self.dec_ups[i].apply(g, &self.store, h);
            }
        }
        let hn = self.dec_norm.apply(g, &self.store, h);
        let hs = g.silu(hn);
        (self.dec_out.apply(g, &self.store, hs), taps)
    }

    /// Feature taps for one latent batch, from the decoder or the encoder of
    /// the decoded image. Shapes match across sources.
    pub fn feature_taps(&self, g: &mut Graph, z_scaled: NodeId, source: VaeFeatureSource) -> Vec<NodeId> {
        let z = g.affine(z_scaled, 1.0 / self.latent_scale, 0.0);
        let (img, dec_taps) = self.decode_graph(g, z);
        match source {
            VaeFeatureSource::Decoder => dec_taps,
            VaeFeatureSource::Encoder => {
                let clamped = self.clamp01(g, img);
                let mut taps = Vec::new();
                self.encode_graph(g, clamped, Some(&mut taps));
                taps
            }
        }
    }

    fn clamp01(&self, g: &mut Graph, raw: NodeId) -> NodeId {
        // (tanh-free) clamp via relu: clamp(v,0,1) = relu((v+1)/2) - relu((v+1)/2 - 1)
        let y = g.affine(raw, 0.5, 0.5);
        let lo = g.relu(y);
        let shifted = g.affine(lo, 1.0, -1.0);
        let hi = g.relu(shifted);
        g.sub(lo, hi)
    }

    pub fn images_to_tensor(&self, images: &[&ImageF]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(SeasError::Data("empty image batch".into()));
        }
        let (c, hw) = (self.image_channels, self.image_size);
        let mut data = Vec::with_capacity(images.len() * c * hw * hw);
        for im in images {
            if im.c != c || im.h != hw || im.w != hw {
                return Err(SeasError::Dimension(format!(
                    "image {}x{}x{} does not match model {}x{}x{}",
                    im.c, im.h, im.w, c, hw, hw
                )));
            }
            if !im.data.iter().all(|v| v.is_finite()) {
                return Err(SeasError::NonFinite("image batch".into()));
            }
            data.extend_from_slice(&im.data);
        }
        Ok(Tensor::new(vec![images.len(), c, hw, hw], data))
    }

    fn tensor_to_images(&self, t: &Tensor) -> Vec<ImageF> {
        let (b, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
        let n = c * h * w;
        (0..b)
            .map(|i| ImageF {
                c,
                h,
                w,
                data: t.data()[i * n..(i + 1) * n].to_vec(),
            })
            .collect()
    }

    /// Scaled latents for a batch of images, [B,c,h,w].
    pub fn encode(&self, images: &[&ImageF]) -> Result<Tensor> {
        let x = self.images_to_tensor(images)?;
        let mut g = Graph::new();
        let xn = g.input(x);
        let z = self.encode_graph(&mut g, xn, None);
        let zs = g.affine(z, self.latent_scale, 0.0);
        Ok(g.value(zs).clone())
    }

    /// Decoded images in [0,1] from scaled latents.
    pub fn decode(&self, latents: &Tensor) -> Result<Vec<ImageF>> {
        if !latents.all_finite() {
            return Err(SeasError::NonFinite("latent batch".into()));
        }
        let mut g = Graph::new();
        let zin = g.input(latents.clone());
        let z = g.affine(zin, 1.0 / self.latent_scale, 0.0);
        let (raw, _) = self.decode_graph(&mut g, z);
        let img = self.clamp01(&mut g, raw);
        Ok(self.tensor_to_images(g.value(img)))
    }

    /// Mean absolute error of decode(encode(images)).
    pub fn round_trip_mae(&self, images: &[&ImageF]) -> Result<f64> {
        let z = self.encode(images)?;
        let recon = self.decode(&z)?;
        let mut acc = 0.0;
        let mut n = 0usize;
        for (im, re) in images.iter().zip(&recon) {
            for (a, b) in im.data.iter().zip(&re.data) {
                acc += (a - b).abs();
                n += 1;
            }
        }
        Ok(acc / n as f64)
    }

    /// Reconstruction training on every non-holdout corpus image. Returns the
    /// per-step loss curve, freezes the store, and fits the latent scale.
    pub fn pretrain(&mut self, corpus: &Corpus, cfg: &VaeTrainConfig, seed: u64) -> Result<Vec<f64>> {
        let pool: Vec<&ImageF> = corpus
            .samples
            .iter()
            .filter(|s| !s.holdout)
            .map(|s| &s.image)
            .collect();
        if pool.len() < cfg.batch {
            return Err(SeasError::Data(format!(
                "corpus has {} trainable images, batch needs {}",
                pool.len(),
                cfg.batch
            )));
        }
        let mut rng = rng_for(seed, "vae-train");
        let ids: Vec<_> = self
            .store
            .ids()
            .into_iter()
            .filter(|id| self.store.is_trainable(*id))
            .map(|id| (id, cfg.lr))
            .collect();
        let mut opt = AdamW::new(AdamWConfig::default(), ids, &self.store);
        let mut curve = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let mut batch = Vec::with_capacity(cfg.batch);
            for _ in 0..cfg.batch {
                let k = (rng.next_u64() % pool.len() as u64) as usize;
                batch.push(pool[k]);
            }
            let x = self.images_to_tensor(&batch)?;
            let target: Vec<f64> = x.data().iter().map(|v| v * 2.0 - 1.0).collect();
            let mut g = Graph::new();
            let xn = g.input(x.clone());
            let tn = g.input(Tensor::new(x.shape().to_vec(), target));
            let z = self.encode_graph(&mut g, xn, None);
            let (raw, _) = self.decode_graph(&mut g, z);
            let diff = g.sub(raw, tn);
            let sq = g.square(diff);
            let recon = g.mean_all(sq);
            let zsq = g.square(z);
            let reg = g.mean_all(zsq);
            let loss = g.add_scaled(recon, reg, cfg.latent_reg);
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(SeasError::Divergence { step, term: "vae".into() });
            }
            curve.push(lv);
            self.store.zero_grads();
            g.backward(loss, &mut self.store);
            opt.step(&mut self.store);
            if step % 50 == 0 || step + 1 == cfg.steps {
                println!("vae step {} loss {:.6}", step, lv);
            }
        }
        self.store.freeze_all();
        self.fit_latent_scale(&pool)?;
        Ok(curve)
    }

    /// Set latent_scale to 1/std of the raw latents over the given images.
    fn fit_latent_scale(&mut self, images: &[&ImageF]) -> Result<()> {
        self.latent_scale = 1.0;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        let mut n = 0usize;
        for chunk in images.chunks(8) {
            let z = self.encode(chunk)?;
            for v in z.iter() {
                acc += v;
                acc2 += v * v;
                n += 1;
            }
        }
        let mean = acc / n as f64;
        let var = (acc2 / n as f64 - mean * mean).max(1e-12);
        self.latent_scale = 1.0 / var.sqrt();
        Ok(())
    }

    /// Draw a standard normal tensor shaped like one latent batch.
    pub fn noise_like(&self, batch: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
        let n = batch * self.latent_channels * self.latent_size * self.latent_size;
        Tensor::new(
            vec![batch, self.latent_channels, self.latent_size, self.latent_size],
            randn(rng, n),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::synthdata::make_corpus;

    fn micro_vae() -> (Vae, RunConfig) {
        let cfg = RunConfig::micro();
        (Vae::new(&cfg.model, cfg.seed), cfg)
    }

    #[test]
    fn round_trip_shapes_and_range() {
        let (vae, cfg) = micro_vae();
        let corpus = make_corpus(&cfg.data, cfg.model.image_size, cfg.seed).unwrap();
        let imgs: Vec<&ImageF> = corpus.samples.iter().take(2).map(|s| &s.image).collect();
        let z = vae.encode(&imgs).unwrap();
        assert_eq!(z.shape(), &[2, 4, 4, 4]);
        let out = vae.decode(&z).unwrap();
        assert_eq!(out.len(), 2);
        for im in &out {
            assert_eq!((im.c, im.h, im.w), (3, 16, 16));
            assert!(im.data.iter().all(|v| (0.0..=1.0).contains(v) && v.is_finite()));
        }
    }

    #[test]
    fn zero_latent_decodes_finite() {
        let (vae, _) = micro_vae();
        let z = Tensor::zeros(vec![1, 4, 4, 4]);
        let out = vae.decode(&z).unwrap();
        assert!(out[0].data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn taps_double_in_resolution_across_sources() {
        let (vae, _) = micro_vae();
        assert_eq!(vae.tap_shapes(), vec![(16, 4), (8, 8), (8, 16)]);
        let z = Tensor::zeros(vec![1, 4, 4, 4]);
        for source in [VaeFeatureSource::Decoder, VaeFeatureSource::Encoder] {
            let mut g = Graph::new();
            let zn = g.input(z.clone());
            let taps = vae.feature_taps(&mut g, zn, source);
            assert_eq!(taps.len(), 3);
            for (tap, (c, r)) in taps.iter().zip(vae.tap_shapes()) {
                assert_eq!(g.shape(*tap), &[1, c, r, r]);
            }
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let (vae, _) = micro_vae();
        let mut im = ImageF::new(3, 16, 16);
        im.data[5] = f64::NAN;
        assert!(matches!(vae.encode(&[&im]), Err(SeasError::NonFinite(_))));
        let mut z = vec![0.0; 64];
        z[3] = f64::INFINITY;
        assert!(vae.decode(&Tensor::new(vec![1, 4, 4, 4], z)).is_err());
    }

    #[test]
    fn seeded_construction_is_reproducible() {
        let cfg = RunConfig::micro();
        let a = Vae::new(&cfg.model, cfg.seed);
        let b = Vae::new(&cfg.model, cfg.seed);
        for (ia, ib) in a.store.ids().into_iter().zip(b.store.ids()) {
            assert_eq!(a.store.value(ia), b.store.value(ib));
        }
    }

    #[test]
    fn short_pretrain_reduces_loss() {
        let cfg = RunConfig::micro();
        let mut vae = Vae::new(&cfg.model, cfg.seed);
        let corpus = make_corpus(&cfg.data, cfg.model.image_size, cfg.seed).unwrap();
        let mut tc = cfg.vae_train.clone();
        tc.steps = 40;
        let curve = vae.pretrain(&corpus, &tc, cfg.seed).unwrap();
        assert_eq!(curve.len(), 40);
        let head: f64 = curve[..8].iter().sum::<f64>() / 8.0;
        let tail: f64 = curve[32..].iter().sum::<f64>() / 8.0;
        assert!(tail < head, "loss should drop: head {} tail {}", head, tail);
        assert!(!vae.store.trainable_names().iter().any(|_| true), "store frozen");
        assert!(vae.latent_scale.is_finite() && vae.latent_scale > 0.0);
    }
}
