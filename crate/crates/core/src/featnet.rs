//! Fixed-weight feature network backing the image metrics.
//!
//! The weights are drawn once from a constant seed that is independent of any
//! run seed, so metric values are comparable across runs and machines. The
//! net is forward-only: three strided conv+relu stages, global average
//! pooling into a 64-d embedding, and a linear softmax head over 8 classes.

use crate::error::{Result, SeasError};
use crate::imagedata::ImageF;
use crate::util::{fingerprint_f64, randn, rng_for};
use seas_tensor::{Graph, NodeId, ParamStore, Tensor};

const FEATNET_SEED: u64 = 0x5EA5_FEA7;

pub const FEATURE_DIM: usize = 64;
pub const NUM_CLASSES: usize = 8;

pub struct FeatureNet {
    store: ParamStore,
    fingerprint: String,
}

impl Default for FeatureNet {
    fn default() -> Self {
        FeatureNet::new()
    }
}

impl FeatureNet {
    pub fn new() -> Self {
        let mut rng = rng_for(FEATNET_SEED, "featnet-weights");
        let mut store = ParamStore::new();
        let mut conv = |store: &mut ParamStore, name: &str, o: usize, i: usize| {
            let scale = (2.0 / (i as f64 * 9.0)).sqrt();
            let w: Vec<f64> = randn(&mut rng, o * i * 9).iter().map(|v| v * scale).collect();
            store.add(name, vec![o, i, 3, 3], w, false);
            let b = vec![0.0; o];
            store.add(&format!("{}.bias", name), vec![o], b, false);
        };
        conv(&mut store, "conv1", 16, 3);
        conv(&mut store, "conv2", 32, 16);
        conv(&mut store, "conv3", FEATURE_DIM, 32);
        let wk: Vec<f64> = randn(&mut rng, NUM_CLASSES * FEATURE_DIM)
            .iter()
            .map(|v| v * (1.0 / (FEATURE_DIM as f64).sqrt()))
            .collect();
        store.add("head", vec![NUM_CLASSES, FEATURE_DIM], wk, false);
        store.add("head.bias", vec![NUM_CLASSES], randn(&mut rng, NUM_CLASSES), false);
        let fingerprint = fingerprint_f64(store.ids().flat_map(|id| store.value(id).to_vec()));
        FeatureNet { store, fingerprint }
    }

    /// Hash of the exact weight bytes.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn check_image(&self, img: &ImageF) -> Result<()> {
        if img.c != 3 {
            return Err(SeasError::Dimension(format!("feature net wants 3 channels, got {}", img.c)));
        }
        if img.h < 8 || img.w < 8 {
            return Err(SeasError::Dimension(format!("image {}x{} below the 8x8 minimum", img.h, img.w)));
        }
        Ok(())
    }

    /// The three relu stage outputs for one image.
    fn stages(&self, g: &mut Graph, img: &ImageF) -> [NodeId; 3] {
        let x = g.input(Tensor::new(vec![1, 3, img.h, img.w], img.data.clone()));
        let mut cur = x;
        let mut outs = Vec::with_capacity(3);
        for name in ["conv1", "conv2", "conv3"] {
            let w = g.param(&self.store, self.store.lookup(name).unwrap());
            let b = g.param(&self.store, self.store.lookup(&format!("{}.bias", name)).unwrap());
            let y = g.conv2d(cur, w, Some(b), 2, 1);
            cur = g.relu(y);
            outs.push(cur);
        }
        [outs[0], outs[1], outs[2]]
    }

    /// 64-d embedding: global average pool of the last stage.
    pub fn features(&self, img: &ImageF) -> Result<Vec<f64>> {
        self.check_image(img)?;
        let mut g = Graph::new();
        let [_, _, f3] = self.stages(&mut g, img);
        let sh = g.shape(f3).to_vec();
        let flat = g.reshape(f3, vec![sh[1], sh[2] * sh[3]]);
        let pooled = g.mean_axis(flat, 1);
        Ok(g.value(pooled).data().to_vec())
    }

    /// Softmax class probabilities of the embedding.
    pub fn class_probs(&self, img: &ImageF) -> Result<Vec<f64>> {
        let f = self.features(img)?;
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, FEATURE_DIM], f));
        let w = g.param(&self.store, self.store.lookup("head").unwrap());
        let b = g.param(&self.store, self.store.lookup("head.bias").unwrap());
        let logits = g.linear(x, w, Some(b));
        let p = g.softmax_last(logits);
        Ok(g.value(p).data().to_vec())
    }

    /// Perceptual distance: mean squared difference of channel-normalized
    /// stage activations, averaged over the three stages.
    pub fn perceptual_distance(&self, a: &ImageF, b: &ImageF) -> Result<f64> {
        self.check_image(a)?;
        self.check_image(b)?;
        if a.h != b.h || a.w != b.w {
            return Err(SeasError::Dimension(format!(
                "size mismatch {}x{} vs {}x{}",
                a.h, a.w, b.h, b.w
            )));
        }
        let mut g = Graph::new();
        let sa = self.stages(&mut g, a);
        let sb = self.stages(&mut g, b);
        let mut total = 0.0;
        for (na, nb) in sa.iter().zip(sb.iter()) {
            let fa = unit_normalize(g.value(*na).data(), g.shape(*na)[1]);
            let fb = unit_normalize(g.value(*nb).data(), g.shape(*nb)[1]);
            let n = fa.len() as f64;
            let d: f64 = fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum();
            total += d / n;
        }
        Ok(total / 3.0)
    }
}

/// Normalize each spatial position's channel vector to unit length.
/// Data layout is [1,C,H,W].
fn unit_normalize(data: &[f64], c: usize) -> Vec<f64> {
    let hw = data.len() / c;
    let mut out = vec![0.0; data.len()];
    for p in 0..hw {
        let mut norm = 0.0;
        for ch in 0..c {
            let v = data[ch * hw + p];
            norm += v * v;
        }
        let inv = 1.0 / norm.sqrt().max(1e-10);
        for ch in 0..c {
            out[ch * hw + p] = data[ch * hw + p] * inv;
        }
    }
    out
}
