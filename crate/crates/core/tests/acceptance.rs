//! Acceptance checks for the whole pipeline, one test per criterion. Each
//! prints a single PASS line when its assertions hold, so a full run gives a
//! per-criterion scoreboard.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use seas_core::ablate::{apply_arm, arm_names};
use seas_core::config::RunConfig;
use seas_core::featnet::FeatureNet;
use seas_core::imagedata::MaskImage;
use seas_core::inference::{
    export_pairs, generate, GenMode, GenerationRequest, Pipeline, Provenance,
};
use seas_core::losses::{abnormal_loss, da_loss_nodes, normal_loss, GenContext, LossWeights};
use seas_core::manifest::{config_hash, RunManifest};
use seas_core::metrics;
use seas_core::pipeline::ensure_artifacts;
use seas_core::prompt::{build_abnormal_prompt, Prompt};
use seas_core::rmp::{compression_channels, focal_loss, rmp_targets, RmpModel};
use seas_core::schedule::NoiseSchedule;
use seas_core::trainer::{alignment_iou, Generator};
use seas_core::util::{randn, rng_for};
use seas_core::vae::Vae;
use seas_tensor::{Graph, ParamStore, Tensor};

fn pass(criterion: usize, detail: String) {
    println!("criterion {}: PASS {}", criterion, detail);
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Probe indices spread over a parameter: first, middle, last.
fn probe_coords(len: usize) -> Vec<usize> {
    if len < 3 {
        (0..len).collect()
    } else {
        vec![0, len / 2, len - 1]
    }
}

/// Central finite differences on selected parameters against the analytic
/// gradients of `eval`, which must be deterministic in everything but the
/// store values.
fn fd_check(
    store: &mut ParamStore,
    param_names: &[&str],
    mut eval: impl FnMut(&mut ParamStore, bool) -> f64,
) -> f64 {
    store.zero_grads();
    eval(store, true);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for name in param_names {
        let id = store
            .lookup(name)
            .unwrap_or_else(|| panic!("parameter {} exists", name));
        let analytic = store.grad(id).to_vec();
        for coord in probe_coords(analytic.len()) {
            let base = store.value(id)[coord];
            store.value_mut(id)[coord] = base + h;
            let up = eval(store, false);
            store.value_mut(id)[coord] = base - h;
            let dn = eval(store, false);
            store.value_mut(id)[coord] = base;
            let fd = (up - dn) / (2.0 * h);
            worst = worst.max(rel_err(analytic[coord], fd));
        }
    }
    worst
}

/// Fixed micro generator pieces, with the store split out so finite
/// differences can mutate it while the modules read it.
fn micro_gen_parts(seed: u64) -> (RunConfig, Generator, ParamStore, NoiseSchedule) {
    let cfg = RunConfig::micro();
    let mut gen = Generator::new(&cfg.model, &cfg.gen_train, 2, seed).unwrap();
    let store = std::mem::take(&mut gen.store);
    let schedule = NoiseSchedule::cosine(cfg.model.schedule_steps).unwrap();
    (cfg, gen, store, schedule)
}

fn micro_latents(cfg: &RunConfig, label: &str) -> Tensor {
    let m = &cfg.model;
    let n = m.latent_channels * m.latent_size * m.latent_size;
    Tensor::new(
        vec![1, m.latent_channels, m.latent_size, m.latent_size],
        randn(&mut rng_for(5, label), n),
    )
}

fn micro_mask(cfg: &RunConfig) -> MaskImage {
    let mut mask = MaskImage::zeros(cfg.model.image_size, cfg.model.image_size);
    for y in 3..7 {
        for x in 9..14 {
            mask.set(y, x, 1);
        }
    }
    mask
}

#[test]
fn criterion_1_gradient_suite() {
    let start = std::time::Instant::now();
    let (cfg, gen, mut store, schedule) = micro_gen_parts(3);
    let latents = micro_latents(&cfg, "fd-lat");
    let mask = micro_mask(&cfg);
    let layers = cfg.gen_train.alignment_layers.clone();
    let abnormal = gen.abnormal_prompt(1).unwrap();
    let normal = gen.normal_prompt().unwrap();
    let probes = ["tokens.df1", "unet.enc0.attn.q.w", "unet.enc1.attn.k.w"];
    let mut worst = 0.0f64;

    // plain alignment term through the network, fixed pre-noised input
    let noisy = {
        let eps = randn(&mut rng_for(6, "fd-eps"), latents.numel());
        let (a, b) = (schedule.alpha(80), schedule.beta(80));
        let data: Vec<f64> = latents.data().iter().zip(&eps).map(|(z, e)| a * z + b * e).collect();
        Tensor::new(latents.shape().to_vec(), data)
    };
    let resolutions: Vec<usize> = layers.iter().map(|&l| cfg.model.attn_resolution(l)).collect();
    let layer_masks = vec![seas_core::losses::mask_layers(&mask, &resolutions).unwrap()];
    worst = worst.max(fd_check(&mut store, &probes, |store, want_grad| {
        let mut g = Graph::new();
        let zin = g.input(noisy.clone());
        let cond =
            seas_core::losses::conditioning_batch(&mut g, &gen.table, store, &[&abnormal]);
        let out = gen.unet.forward(&mut g, store, zin, &[80], cond).unwrap();
        let (t1, t2) = da_loss_nodes(&mut g, &out.attn, &layers, &[&abnormal], &layer_masks).unwrap();
        let total = g.add(t1, t2);
        let v = g.value(total).item();
        if want_grad {
            g.backward(total, store);
        }
        v
    }));
    println!("criterion 1: da_loss worst rel err {:.3e}", worst);

    // full abnormal objective, suppression term active
    let run_abnormal = |store: &mut ParamStore, want_grad: bool, at_variant: bool| -> f64 {
        let mut g = Graph::new();
        let mut rng = rng_for(77, "fd-abn");
        let nodes = {
            let ctx = GenContext {
                model: &cfg.model,
                unet: &gen.unet,
                store,
                table: &gen.table,
                schedule: &schedule,
            };
            abnormal_loss(
                &mut g,
                &ctx,
                &latents,
                &[&abnormal],
                &[&mask],
                &layers,
                &LossWeights::default(),
                !at_variant,
                at_variant,
                &mut rng,
            )
            .unwrap()
        };
        let v = g.value(nodes.total).item();
        if want_grad {
            g.backward(nodes.total, store);
        }
        v
    };
    let w = fd_check(&mut store, &probes, |s, grad| run_abnormal(s, grad, false));
    println!("criterion 1: abnormal_loss worst rel err {:.3e}", w);
    worst = worst.max(w);
    let w = fd_check(&mut store, &probes, |s, grad| run_abnormal(s, grad, true));
    println!("criterion 1: at_variant_loss worst rel err {:.3e}", w);
    worst = worst.max(w);

    let w = fd_check(&mut store, &["tokens.ob1", "unet.enc0.attn.v.w", "unet.enc1.attn.out.w"], |store, want_grad| {
        let mut g = Graph::new();
        let mut rng = rng_for(78, "fd-norm");
        let node = {
            let ctx = GenContext {
                model: &cfg.model,
                unet: &gen.unet,
                store,
                table: &gen.table,
                schedule: &schedule,
            };
            normal_loss(&mut g, &ctx, &latents, &normal, &mut rng).unwrap()
        };
        let v = g.value(node).item();
        if want_grad {
            g.backward(node, store);
        }
        v
    });
    println!("criterion 1: normal_loss worst rel err {:.3e}", w);
    worst = worst.max(w);

    // refinement objective on fixed fake taps
    let rcfg = RunConfig::micro();
    let vae = Vae::new(&rcfg.model, 4);
    let rmp = RmpModel::new(&rcfg.model, &rcfg.rmp_train, &vae.tap_shapes(), 4).unwrap();
    let mut rstore = rmp.store.clone();
    let m = &rcfg.model;
    let mut rng = rng_for(9, "fd-taps");
    let dec_taps: Vec<Tensor> = (1..=m.unet_widths.len())
        .map(|k| {
            let c = m.decoder_tap_channels(k);
            let r = m.decoder_tap_resolution(k);
            Tensor::new(vec![1, c, r, r], randn(&mut rng, c * r * r))
        })
        .collect();
    let vae_taps: Vec<Tensor> = vae
        .tap_shapes()
        .iter()
        .map(|&(c, r)| Tensor::new(vec![1, c, r, r], randn(&mut rng, c * r * r)))
        .collect();
    let rmask = micro_mask(&rcfg);
    let (coarse_t, full_t) = rmp_targets(Some(&rmask), m.image_size, rmp.grid).unwrap();
    let rmp_probe: Vec<String> = {
        let names: Vec<String> = rstore
            .ids()
            .filter(|id| rstore.is_trainable(*id))
            .map(|id| rstore.name(id).to_string())
            .collect();
        vec![names[0].clone(), names[names.len() / 2].clone(), names[names.len() - 1].clone()]
    };
    let rmp_probe_refs: Vec<&str> = rmp_probe.iter().map(|s| s.as_str()).collect();
    let w = fd_check(&mut rstore, &rmp_probe_refs, |store, want_grad| {
        let mut g = Graph::new();
        let d: Vec<_> = dec_taps.iter().map(|t| g.input(t.clone())).collect();
        let v: Vec<_> = vae_taps.iter().map(|t| g.input(t.clone())).collect();
        let out = rmp.forward_with(&mut g, &*store, &d, &v).unwrap();
        let lc = focal_loss(&mut g, out.coarse_scores, &[coarse_t.clone()], 2.0, Some(0.75)).unwrap();
        let lr = focal_loss(&mut g, out.refined_scores, &[full_t.clone()], 2.0, Some(0.75)).unwrap();
        let total = g.add(lc, lr);
        let val = g.value(total).item();
        if want_grad {
            g.backward(total, store);
        }
        val
    });
    println!("criterion 1: rmp_loss worst rel err {:.3e}", w);
    worst = worst.max(w);

    assert!(worst < 1e-4, "worst relative error {}", worst);
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "gradient suite took {:.1}s", elapsed);
    pass(1, format!("gradient suite, worst rel err {:.3e}, {:.1}s", worst, elapsed));
}

#[test]
fn criterion_2_loss_zero_constructions() {
    // alignment: hand-built maps where the anomaly-token mean equals the mask
    // and the object token is silent inside it
    let z = 6;
    let cells = 4;
    let prompt = Prompt {
        anomaly_type: 1,
        slots: vec![0; z],
        ob_columns: vec![1],
        df_columns: vec![2, 3],
        anomaly_token_indices: vec![1, 2],
    };
    let mask = vec![1.0, 0.0, 1.0, 0.0];
    let mut map = vec![0.0; cells * z];
    for (cell, &mv) in mask.iter().enumerate() {
        map[cell * z + 2] = mv;
        map[cell * z + 3] = mv;
        map[cell * z + 1] = 1.0 - mv;
    }
    let mut g = Graph::new();
    let attn = g.input(Tensor::new(vec![1, cells, z], map));
    let masks = vec![vec![Tensor::new(vec![cells], mask)]];
    let (t1, t2) = da_loss_nodes(&mut g, &[attn], &[1], &[&prompt], &masks).unwrap();
    let v1 = g.value(t1).item();
    let v2 = g.value(t2).item();
    assert!(v1.abs() <= 1e-8, "alignment term {}", v1);
    assert!(v2.abs() <= 1e-8, "suppression term {}", v2);

    // focal: near-one-hot predictions on the true classes
    let n = 16;
    let target: Vec<f64> = (0..n).map(|i| f64::from(i % 3 == 0)).collect();
    let mut logits = vec![0.0; n * 2];
    for (i, &t) in target.iter().enumerate() {
        logits[i * 2] = if t == 0.0 { 20.0 } else { -20.0 };
        logits[i * 2 + 1] = if t == 1.0 { 20.0 } else { -20.0 };
    }
    let mut g = Graph::new();
    let ln = g.input(Tensor::new(vec![1, n, 2], logits));
    let probs = g.softmax_last(ln);
    let loss = focal_loss(&mut g, probs, &[Tensor::new(vec![n], target)], 2.0, Some(0.75)).unwrap();
    let lv = g.value(loss).item();
    assert!(lv < 1e-6, "focal loss {}", lv);
    pass(2, format!("alignment terms {:.1e}/{:.1e}, focal {:.1e}", v1, v2, lv));
}

/// Swap the two head blocks of one attention layer's projections, giving an
/// equivalent network with permuted heads.
fn swap_heads(store: &mut ParamStore, layer: &str, head_dim: usize, inner: usize) {
    for proj in ["q", "k", "v"] {
        let id = store.lookup(&format!("{}.{}.w", layer, proj)).unwrap();
        let w = store.value_mut(id);
        // weight is [inner, in]; swap row blocks
        let cols = w.len() / inner;
        for r in 0..head_dim {
            for c in 0..cols {
                w.swap(r * cols + c, (head_dim + r) * cols + c);
            }
        }
    }
    let id = store.lookup(&format!("{}.out.w", layer)).unwrap();
    let w = store.value_mut(id);
    // weight is [out, inner]; swap column blocks
    let rows = w.len() / inner;
    for r in 0..rows {
        for c in 0..head_dim {
            w.swap(r * inner + c, r * inner + head_dim + c);
        }
    }
}

#[test]
fn criterion_3_attention_properties() {
    let mut worst_norm = 0.0f64;
    for trial in 0..100 {
        let (cfg, gen, mut store, _) = micro_gen_parts(1000 + trial);
        let prompt = gen.abnormal_prompt(1 + (trial as usize) % 2).unwrap();
        let mask = micro_mask(&cfg);
        let layers = cfg.gen_train.alignment_layers.clone();
        let resolutions: Vec<usize> = layers.iter().map(|&l| cfg.model.attn_resolution(l)).collect();
        let masks = vec![seas_core::losses::mask_layers(&mask, &resolutions).unwrap()];
        let noisy = micro_latents(&cfg, &format!("attn-{}", trial));

        let da = |store: &ParamStore, check_norm: &mut f64| -> f64 {
            let mut g = Graph::new();
            let zin = g.input(noisy.clone());
            let cond = seas_core::losses::conditioning_batch(&mut g, &gen.table, store, &[&prompt]);
            let out = gen.unet.forward(&mut g, store, zin, &[60], cond).unwrap();
            for &map in &out.attn {
                let t = g.value(map);
                let (cells, z) = (t.shape()[1], t.shape()[2]);
                for cell in 0..cells {
                    let s: f64 = (0..z).map(|k| t.data()[cell * z + k]).sum();
                    *check_norm = check_norm.max((s - 1.0).abs());
                }
            }
            let (t1, t2) = da_loss_nodes(&mut g, &out.attn, &layers, &[&prompt], &masks).unwrap();
            let total = g.add(t1, t2);
            g.value(total).item()
        };
        let before = da(&store, &mut worst_norm);

        // permute heads at the deepest encoder level; its map is the only
        // one affected and only through the head average
        let deepest = cfg.model.unet_widths.len() - 1;
        let inner = cfg.model.attn_dim;
        let head_dim = inner / cfg.model.attn_heads;
        swap_heads(&mut store, &format!("unet.enc{}.attn", deepest), head_dim, inner);
        let mut ignored = 0.0;
        let after = da(&store, &mut ignored);
        assert_eq!(
            before.to_bits(),
            after.to_bits(),
            "trial {}: alignment loss changed under head permutation: {} vs {}",
            trial,
            before,
            after
        );
    }
    assert!(worst_norm < 1e-5, "token-axis normalization off by {}", worst_norm);
    pass(3, format!("100 trials, worst token-sum error {:.2e}, head swap exact", worst_norm));
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

fn oracle_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut hits = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                hits += 1.0;
            } else if si == sj {
                hits += 0.5;
            }
        }
    }
    hits / pairs
}

fn oracle_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let (mut ap, mut tp, mut fp, mut prev) = (0.0, 0usize, 0usize, 0.0);
    for &k in &order {
        if labels[k] == 1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let recall = tp as f64 / pos;
        ap += (recall - prev) * (tp as f64 / (tp + fp) as f64);
        prev = recall;
    }
    ap
}

fn oracle_f1_max(scores: &[f64], labels: &[u8]) -> f64 {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let (mut best, mut tp, mut fp) = (0.0f64, 0usize, 0usize);
    for &k in &order {
        if labels[k] == 1 {
            tp += 1;
        } else {
            fp += 1;
        }
        if tp > 0 {
            let p = tp as f64 / (tp + fp) as f64;
            let r = tp as f64 / pos;
            best = best.max(2.0 * p * r / (p + r));
        }
    }
    best
}

fn oracle_kid(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let d = x[0].len() as f64;
    let k = |a: &[f64], b: &[f64]| -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(u, v)| u * v).sum();
        (dot / d + 1.0).powi(3)
    };
    let (m, n) = (x.len() as f64, y.len() as f64);
    if x.len() == y.len() {
        let mut xx = 0.0;
        let mut yy = 0.0;
        let mut xy = 0.0;
        for i in 0..x.len() {
            for j in 0..x.len() {
                if i == j {
                    continue;
                }
                xx += k(&x[i], &x[j]);
                yy += k(&y[i], &y[j]);
                xy += k(&x[i], &y[j]) + k(&x[j], &y[i]);
            }
        }
        return (xx + yy - xy) / (m * (m - 1.0));
    }
    let mut xx = 0.0;
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i != j {
                xx += k(&x[i], &x[j]);
            }
        }
    }
    let mut yy = 0.0;
    for i in 0..y.len() {
        for j in 0..y.len() {
            if i != j {
                yy += k(&y[i], &y[j]);
            }
        }
    }
    let mut xy = 0.0;
    for xi in x {
        for yj in y {
            xy += k(xi, yj);
        }
    }
    xx / (m * (m - 1.0)) + yy / (n * (n - 1.0)) - 2.0 * xy / (m * n)
}

fn oracle_is(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len() as f64;
    let k = rows[0].len();
    let mut pbar = vec![0.0; k];
    for r in rows {
        for (a, p) in pbar.iter_mut().zip(r) {
            *a += p;
        }
    }
    for a in pbar.iter_mut() {
        *a /= n;
    }
    let mut total = 0.0;
    for r in rows {
        for (&p, &q) in r.iter().zip(&pbar) {
            if p > 0.0 {
                total += p * (p / q).ln();
            }
        }
    }
    (total / n).exp()
}

#[test]
fn criterion_4_metric_oracles() {
    let start = std::time::Instant::now();
    let mut rng = rng_for(404, "metric-oracle");
    for inst in 0..200 {
        let n = 2 + (rng.next_u64() % 63) as usize;
        let scores: Vec<f64> = (0..n).map(|_| uniform(&mut rng)).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| (rng.next_u64() & 1) as u8).collect();
        labels[0] = 1;
        if n > 1 {
            labels[1] = 0;
        }
        assert_eq!(
            metrics::auroc(&scores, &labels).unwrap(),
            oracle_auroc(&scores, &labels),
            "auroc instance {}",
            inst
        );
        assert_eq!(
            metrics::average_precision(&scores, &labels).unwrap(),
            oracle_ap(&scores, &labels),
            "ap instance {}",
            inst
        );
        assert_eq!(
            metrics::f1_max(&scores, &labels).unwrap(),
            oracle_f1_max(&scores, &labels),
            "f1 instance {}",
            inst
        );

        let h = 1 + (rng.next_u64() % 8) as usize;
        let w = 1 + (rng.next_u64() % 8) as usize;
        let a = MaskImage {
            h,
            w,
            data: (0..h * w).map(|_| (rng.next_u64() & 1) as u8).collect(),
        };
        let b = MaskImage {
            h,
            w,
            data: (0..h * w).map(|_| (rng.next_u64() & 1) as u8).collect(),
        };
        let mut inter = 0usize;
        let mut uni = 0usize;
        for (x, y) in a.data.iter().zip(&b.data) {
            inter += usize::from(*x == 1 && *y == 1);
            uni += usize::from(*x == 1 || *y == 1);
        }
        let want = if uni == 0 { 1.0 } else { inter as f64 / uni as f64 };
        assert_eq!(metrics::mask_iou(&a, &b).unwrap(), want, "iou instance {}", inst);
    }

    let mut worst_is = 0.0f64;
    let mut worst_kid = 0.0f64;
    for _ in 0..200 {
        let k = 2 + (rng.next_u64() % 7) as usize;
        let n = 2 + (rng.next_u64() % 15) as usize;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| uniform(&mut rng) + 1e-4).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let is = metrics::inception_score(&rows).unwrap();
        worst_is = worst_is.max((is - oracle_is(&rows)).abs());
        assert!(is >= 1.0 - 1e-9 && is <= k as f64 + 1e-9, "bounds: {} vs K={}", is, k);

        let d = 2 + (rng.next_u64() % 7) as usize;
        let m = 2 + (rng.next_u64() % 15) as usize;
        let n2 = if rng.next_u64() & 1 == 0 { m } else { 2 + (rng.next_u64() % 15) as usize };
        let xs: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| uniform(&mut rng)).collect()).collect();
        let ys: Vec<Vec<f64>> =
            (0..n2).map(|_| (0..d).map(|_| uniform(&mut rng)).collect()).collect();
        let kv = metrics::kid(&xs, &ys).unwrap();
        worst_kid = worst_kid.max((kv - oracle_kid(&xs, &ys)).abs());
    }
    assert!(worst_is < 1e-10, "inception score drift {}", worst_is);
    assert!(worst_kid < 1e-10, "kid drift {}", worst_kid);
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "oracle suite took {:.1}s", elapsed);
    pass(4, format!("200+200 instances, IS drift {:.1e}, KID drift {:.1e}", worst_is, worst_kid));
}

#[test]
fn criterion_5_toy_end_to_end() {
    let start = std::time::Instant::now();
    let cfg = RunConfig::toy();
    let cache = tempfile::tempdir().unwrap();
    let art = ensure_artifacts(&cfg, Some(cache.path())).unwrap();

    // (a) anomaly attention lands on the defect after training
    let init = Generator::new(&cfg.model, &cfg.gen_train, art.corpus.n_types(), cfg.seed).unwrap();
    let iou0 = alignment_iou(
        &init,
        &art.vae,
        &art.corpus,
        &cfg.model,
        &cfg.gen_train.alignment_layers,
        cfg.seed,
    )
    .unwrap();
    let iou1 = alignment_iou(
        &art.gen,
        &art.vae,
        &art.corpus,
        &cfg.model,
        &cfg.gen_train.alignment_layers,
        cfg.seed,
    )
    .unwrap();
    println!("criterion 5: alignment IoU {:.3} -> {:.3}", iou0, iou1);
    assert!(
        iou1 - iou0 >= 0.2,
        "alignment IoU improved only {:.3} (from {:.3} to {:.3})",
        iou1 - iou0,
        iou0,
        iou1
    );

    let pipe = Pipeline {
        vae: &art.vae,
        gen: &art.gen,
        rmp: Some(&art.rmp),
        model: &cfg.model,
    };
    let pool: Vec<&seas_core::imagedata::ImageF> =
        art.corpus.normals().iter().map(|s| &s.image).collect();

    // (b) generated defects come with nonempty refined masks at tau=0.2
    let mut nonempty = 0usize;
    let mut total = 0usize;
    let mut abnormal_images = Vec::new();
    for anomaly_type in 1..=art.corpus.n_types() {
        let req = GenerationRequest::from_config(
            &cfg.infer,
            GenMode::Abnormal,
            anomaly_type,
            50,
            cfg.seed + anomaly_type as u64,
        );
        let pairs = generate(&pipe, &pool, &req).unwrap();
        for p in &pairs {
            total += 1;
            let mask = p.mask.as_ref().expect("abnormal mode produces masks");
            if mask.binary.data.iter().any(|&v| v == 1) {
                nonempty += 1;
            }
        }
        abnormal_images.extend(pairs.into_iter().map(|p| p.image));
    }
    println!("criterion 5: {}/{} abnormal masks nonempty", nonempty, total);
    assert_eq!(total, 100);
    assert!(nonempty >= 90, "only {}/100 masks nonempty", nonempty);

    // (c) normal-mode output sits closer to the normal corpus than the
    // abnormal-mode output does
    let req = GenerationRequest::from_config(&cfg.infer, GenMode::Normal, 0, 100, cfg.seed);
    let normal_pairs = generate(&pipe, &pool, &req).unwrap();
    let net = FeatureNet::new();
    let feats = |imgs: &[seas_core::imagedata::ImageF]| -> Vec<Vec<f64>> {
        imgs.iter().map(|im| net.features(im).unwrap()).collect()
    };
    let corpus_feats: Vec<Vec<f64>> =
        art.corpus.normals().iter().map(|s| net.features(&s.image).unwrap()).collect();
    let normal_imgs: Vec<_> = normal_pairs.into_iter().map(|p| p.image).collect();
    let kid_normal = metrics::kid(&feats(&normal_imgs), &corpus_feats).unwrap();
    let kid_abnormal = metrics::kid(&feats(&abnormal_images), &corpus_feats).unwrap();
    println!("criterion 5: KID normal {:.4} abnormal {:.4}", kid_normal, kid_abnormal);
    assert!(
        kid_normal < kid_abnormal,
        "normal KID {} not below abnormal KID {}",
        kid_normal,
        kid_abnormal
    );

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 6.0 * 3600.0, "toy run took {:.0}s", elapsed);
    pass(
        5,
        format!(
            "IoU +{:.2}, {}/100 masks, KID {:.4} < {:.4}, {:.0}s",
            iou1 - iou0,
            nonempty,
            kid_normal,
            kid_abnormal,
            elapsed
        ),
    );
}

#[test]
fn criterion_6_ablation_parity() {
    let base = RunConfig::smoke();
    let cache = tempfile::tempdir().unwrap();
    for name in arm_names() {
        let cfg = apply_arm(&base, name).unwrap();
        let t = std::time::Instant::now();
        ensure_artifacts(&cfg, Some(cache.path()))
            .unwrap_or_else(|e| panic!("arm {} failed: {}", name, e));
        println!("criterion 6: arm {} trained in {:.0}s", name, t.elapsed().as_secs_f64());
    }
    pass(6, format!("{} arms trained to completion", arm_names().len()));
}

#[test]
fn criterion_7_determinism() {
    let mut cfg = RunConfig::micro();
    cfg.infer.count = 2;
    let mut hashes = Vec::new();
    let mut exports: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
    for _ in 0..2 {
        let cache = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let art = ensure_artifacts(&cfg, Some(cache.path())).unwrap();
        let pipe = Pipeline {
            vae: &art.vae,
            gen: &art.gen,
            rmp: Some(&art.rmp),
            model: &cfg.model,
        };
        let pool: Vec<&seas_core::imagedata::ImageF> =
            art.corpus.normals().iter().map(|s| &s.image).collect();
        let provenance = Provenance {
            vae: art.vae_fp.clone(),
            generator: art.gen_fp.clone(),
            rmp: Some(art.rmp_fp.clone()),
            config_hash: config_hash(&cfg),
        };
        let mut manifest = RunManifest::start("acceptance-e2e", &cfg);
        manifest.record_fingerprint("vae", &art.vae_fp);
        manifest.record_fingerprint("generator", &art.gen_fp);
        manifest.record_fingerprint("rmp", &art.rmp_fp);
        for (n, mode) in [(1usize, GenMode::Abnormal), (0, GenMode::Normal)] {
            let req = GenerationRequest::from_config(&cfg.infer, mode, n, 2, cfg.seed + n as u64);
            let pairs = generate(&pipe, &pool, &req).unwrap();
            let dir = out.path().join(format!("set{}", n));
            export_pairs(&pairs, &req, &provenance, &dir, false).unwrap();
            manifest.record_output(&format!("set{}/manifest.jsonl", n));
        }
        manifest.finish();
        hashes.push(manifest.content_hash());

        let mut files = Vec::new();
        for entry in walk_pngs(out.path()) {
            let rel = entry.strip_prefix(out.path()).unwrap().to_string_lossy().into_owned();
            files.push((rel, std::fs::read(&entry).unwrap()));
        }
        files.sort();
        exports.push(files);
    }
    assert_eq!(hashes[0], hashes[1], "manifest content hashes differ");
    assert_eq!(exports[0].len(), exports[1].len());
    assert!(!exports[0].is_empty());
    for (a, b) in exports[0].iter().zip(&exports[1]) {
        assert_eq!(a.0, b.0, "file sets differ");
        assert_eq!(a.1, b.1, "bytes differ for {}", a.0);
    }
    pass(7, format!("2 runs, {} files byte-identical, hash {}", exports[0].len(), &hashes[0][..12]));
}

fn walk_pngs(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "png") {
                out.push(p);
            }
        }
    }
    out
}

#[test]
fn criterion_8_structural_checks() {
    let cfg = RunConfig::micro();
    let vae = Vae::new(&cfg.model, cfg.seed);
    let rmp = RmpModel::new(&cfg.model, &cfg.rmp_train, &vae.tap_shapes(), cfg.seed).unwrap();

    // the refinement chain doubles from the coarse grid up to image size
    assert_eq!(rmp.grid * 8, rmp.image_size, "three doubling stages");

    // and is gated by exactly the three autoencoder taps at 2g, 4g, 8g
    let taps = vae.tap_shapes();
    assert_eq!(taps.len(), 3);
    for (k, &(_, r)) in taps.iter().enumerate() {
        assert_eq!(r, rmp.grid << (k + 1), "tap {} resolution", k);
    }

    // coarse fusion gives the coarser decoder tap twice the channels
    assert_eq!(compression_channels(&[2, 3], 16), vec![32, 16]);
    assert_eq!(compression_channels(&[1, 2, 3], 8), vec![32, 16, 8]);

    // with four anomaly tokens, type n owns global token rows 4n-3..4n
    let gen = Generator::new(&cfg.model, &cfg.gen_train, 2, cfg.seed).unwrap();
    let n_tok = cfg.gen_train.n_anomaly_tokens;
    assert_eq!(n_tok, 4);
    for n in 1..=2usize {
        let p = build_abnormal_prompt(&gen.table, n, 2, n_tok, cfg.gen_train.n_normal_tokens, cfg.model.z_len)
            .unwrap();
        let want: Vec<usize> = (4 * n - 3..=4 * n).collect();
        assert_eq!(p.anomaly_token_indices, want, "type {} token indices", n);
    }
    pass(8, "chain doubling, tap wiring, 2:1 split, token index formula".to_string());
}
