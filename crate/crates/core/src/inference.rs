//! Generation from trained components: noise a real normal image, denoise it
//! under the chosen prompt with the deterministic sampler, and in abnormal
//! mode average the refinement branch's mask over the last few steps.

use crate::config::{InferConfig, ModelConfig};
use crate::error::{Result, SeasError};
use crate::imagedata::{ImageF, MaskImage};
use crate::losses::conditioning_batch;
use crate::prompt::Prompt;
use crate::rmp::RmpModel;
use crate::schedule::{forward_diffuse, sample_step, timesteps_descending, z0_estimate, NoiseSchedule};
use crate::trainer::Generator;
use crate::util::{randn, rng_for};
use crate::vae::Vae;
use rand::RngCore;
use seas_tensor::{Graph, Tensor};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenMode {
    /// Condition on the full prompt of one anomaly type; produce masks.
    Abnormal,
    /// Condition on the object tokens only; no masks.
    Normal,
}

#[derive(Clone, Debug)]
pub struct GenerationRequest {
    pub mode: GenMode,
    /// 1-based anomaly type, required in abnormal mode.
    pub anomaly_type: usize,
    pub count: usize,
    pub seed: u64,
    /// Fraction of the schedule to noise the source image to, in (0, 1].
    pub noise_strength: f64,
    pub sampler_steps: usize,
    pub mask_threshold: f64,
    pub mask_average_steps: usize,
}

impl GenerationRequest {
    pub fn from_config(cfg: &InferConfig, mode: GenMode, anomaly_type: usize, count: usize, seed: u64) -> Self {
        GenerationRequest {
            mode,
            anomaly_type,
            count,
            seed,
            noise_strength: cfg.noise_strength,
            sampler_steps: cfg.sampler_steps,
            mask_threshold: cfg.tau,
            mask_average_steps: cfg.mask_average_steps,
        }
    }

    pub fn validate(&self, n_types: usize) -> Result<()> {
        if self.count == 0 {
            return Err(SeasError::Validation("request count must be positive".into()));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(SeasError::Range(format!("threshold {} outside (0, 1)", self.mask_threshold)));
        }
        if self.sampler_steps < self.mask_average_steps {
            return Err(SeasError::Config(format!(
                "{} sampler steps cannot cover {} averaged mask steps",
                self.sampler_steps, self.mask_average_steps
            )));
        }
        if self.mask_average_steps == 0 {
            return Err(SeasError::Config("mask averaging needs at least one step".into()));
        }
        if self.mode == GenMode::Abnormal && (self.anomaly_type == 0 || self.anomaly_type > n_types) {
            return Err(SeasError::Range(format!(
                "anomaly type {} outside 1..={}",
                self.anomaly_type, n_types
            )));
        }
        Ok(())
    }
}

/// Averaged anomaly scores with their binarization.
#[derive(Clone, Debug)]
pub struct RefinedMask {
    /// Anomalous-channel probability per pixel, row-major.
    pub scores: Vec<f64>,
    pub size: usize,
    pub binary: MaskImage,
}

impl RefinedMask {
    pub fn from_scores(scores: Vec<f64>, size: usize, tau: f64) -> Self {
        let mut binary = MaskImage::zeros(size, size);
        for y in 0..size {
            for x in 0..size {
                if scores[y * size + x] > tau {
                    binary.set(y, x, 1);
                }
            }
        }
        RefinedMask { scores, size, binary }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedPair {
    pub image: ImageF,
    pub mask: Option<RefinedMask>,
    /// Index of the source normal image in the pool.
    pub source: usize,
}

/// Trained components wired together for generation. The refinement branch
/// is optional; abnormal requests require it.
pub struct Pipeline<'a> {
    pub vae: &'a Vae,
    pub gen: &'a Generator,
    pub rmp: Option<&'a RmpModel>,
    pub model: &'a ModelConfig,
}

/// Per-step refined score maps captured for the mask provenance check.
pub struct GenerationTrace {
    /// One map per averaged step, each image_size^2 long.
    pub step_scores: Vec<Vec<f64>>,
}

fn prompt_for(pipe: &Pipeline, req: &GenerationRequest) -> Result<Prompt> {
    match req.mode {
        GenMode::Abnormal => pipe.gen.abnormal_prompt(req.anomaly_type),
        GenMode::Normal => pipe.gen.normal_prompt(),
    }
}

/// Denoise one latent, returning the final pair and the per-step mask trace.
fn generate_one(
    pipe: &Pipeline,
    schedule: &NoiseSchedule,
    ladder: &[usize],
    prompt: &Prompt,
    req: &GenerationRequest,
    source_latent: &[f64],
    source: usize,
    eps: &[f64],
) -> Result<(GeneratedPair, GenerationTrace)> {
    let c = pipe.model.latent_channels;
    let r = pipe.model.latent_size;
    let t_init = ladder[0];
    let mut z = forward_diffuse(source_latent, t_init, eps, schedule)?;
    let n_updates = ladder.len() - 1;
    let want_mask = req.mode == GenMode::Abnormal;
    let mut step_scores = Vec::new();

    for k in 0..n_updates {
        let (t_from, t_to) = (ladder[k], ladder[k + 1]);
        let mut g = Graph::new();
        let z_node = g.input(Tensor::new(vec![1, c, r, r], z.clone()));
        let cond = conditioning_batch(&mut g, &pipe.gen.table, &pipe.gen.store, &[prompt]);
        let out = pipe.gen.unet.forward(&mut g, &pipe.gen.store, z_node, &[t_from], cond)?;
        let eps_hat = g.value(out.eps).data().to_vec();

        if want_mask && k + req.mask_average_steps >= n_updates {
            let rmp = pipe.rmp.expect("validated");
            let z0 = z0_estimate(&z, &eps_hat, t_from, schedule)?;
            let z0_node = g.input(Tensor::new(vec![1, c, r, r], z0));
            let vtaps = pipe.vae.feature_taps(&mut g, z0_node, rmp.feature_source);
            let rout = rmp.forward(&mut g, &out.decoder_taps, &vtaps)?;
            let sc = g.value(rout.refined_scores);
            let n_px = pipe.model.image_size * pipe.model.image_size;
            let mut map = Vec::with_capacity(n_px);
            for i in 0..n_px {
                map.push(sc.data()[i * 2 + 1]);
            }
            step_scores.push(map);
        }

        z = if t_to == 0 {
            z0_estimate(&z, &eps_hat, t_from, schedule)?
        } else {
            sample_step(&z, t_from, t_to, &eps_hat, schedule)?
        };
        if z.iter().any(|v| !v.is_finite()) {
            return Err(SeasError::NonFinite(format!("latent after step to t={}", t_to)));
        }
    }

    let zt = Tensor::new(vec![1, c, r, r], z);
    let image = pipe.vae.decode(&zt)?.remove(0);
    let mask = if want_mask {
        let n_px = pipe.model.image_size * pipe.model.image_size;
        let mut mean = vec![0.0; n_px];
        for map in &step_scores {
            for (m, v) in mean.iter_mut().zip(map) {
                *m += v / step_scores.len() as f64;
            }
        }
        Some(RefinedMask::from_scores(mean, pipe.model.image_size, req.mask_threshold))
    } else {
        None
    };
    Ok((
        GeneratedPair { image, mask, source },
        GenerationTrace { step_scores },
    ))
}

/// Generate `count` images (pairs in abnormal mode) from a pool of real
/// normal images, with the full left-to-right trace of refined score maps.
pub fn generate_traced(
    pipe: &Pipeline,
    normal_pool: &[&ImageF],
    req: &GenerationRequest,
) -> Result<(Vec<GeneratedPair>, Vec<GenerationTrace>)> {
    req.validate(pipe.gen.n_types)?;
    if req.mode == GenMode::Abnormal && pipe.rmp.is_none() {
        return Err(SeasError::Config("abnormal generation requires the refinement branch".into()));
    }
    if normal_pool.is_empty() {
        return Err(SeasError::Data("normal pool is empty".into()));
    }
    let schedule = NoiseSchedule::cosine(pipe.model.schedule_steps)?;
    let t_init = schedule.t_for_strength(req.noise_strength)?;
    let ladder = timesteps_descending(t_init, req.sampler_steps)?;
    let prompt = prompt_for(pipe, req)?;

    let latents = pipe.vae.encode(normal_pool)?;
    let per = latents.numel() / normal_pool.len();

    let mut rng = rng_for(req.seed, "generate");
    let mut pairs = Vec::with_capacity(req.count);
    let mut traces = Vec::with_capacity(req.count);
    for _ in 0..req.count {
        let source = (rng.next_u64() % normal_pool.len() as u64) as usize;
        let sl = &latents.data()[source * per..(source + 1) * per];
        let eps = randn(&mut rng, per);
        let (pair, trace) = generate_one(pipe, &schedule, &ladder, &prompt, req, sl, source, &eps)?;
        pairs.push(pair);
        traces.push(trace);
    }
    Ok((pairs, traces))
}

pub fn generate(pipe: &Pipeline, normal_pool: &[&ImageF], req: &GenerationRequest) -> Result<Vec<GeneratedPair>> {
    Ok(generate_traced(pipe, normal_pool, req)?.0)
}

/// Checkpoint fingerprints recorded with every exported pair.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub vae: String,
    pub generator: String,
    pub rmp: Option<String>,
    pub config_hash: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExportRecord {
    pub index: usize,
    pub image: String,
    pub mask: Option<String>,
    pub mode: GenMode,
    pub anomaly_type: usize,
    pub seed: u64,
    pub tau: f64,
    pub noise_strength: f64,
    pub provenance: Provenance,
}

/// Write pairs as 8-bit PNGs plus a manifest listing one record per pair.
/// Refuses to overwrite an existing export unless forced.
pub fn export_pairs(
    results: &[GeneratedPair],
    req: &GenerationRequest,
    provenance: &Provenance,
    out_dir: &Path,
    force: bool,
) -> Result<PathBuf> {
    let manifest_path = out_dir.join("manifest.jsonl");
    if manifest_path.exists() && !force {
        return Err(SeasError::Validation(format!(
            "{} already holds an export; pass force to replace",
            out_dir.display()
        )));
    }
    let images_dir = out_dir.join("images");
    let masks_dir = out_dir.join("masks");
    std::fs::create_dir_all(&images_dir)?;
    let any_mask = results.iter().any(|p| p.mask.is_some());
    if any_mask {
        std::fs::create_dir_all(&masks_dir)?;
    }
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(&manifest_path)?);
    for (i, pair) in results.iter().enumerate() {
        let image_rel = format!("images/{:05}.png", i);
        pair.image.write_png(&out_dir.join(&image_rel))?;
        let mask_rel = match &pair.mask {
            Some(m) => {
                let rel = format!("masks/{:05}.png", i);
                m.binary.write_png(&out_dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        let record = ExportRecord {
            index: i,
            image: image_rel,
            mask: mask_rel,
            mode: req.mode,
            anomaly_type: if req.mode == GenMode::Abnormal { req.anomaly_type } else { 0 },
            seed: req.seed,
            tau: req.mask_threshold,
            noise_strength: req.noise_strength,
            provenance: provenance.clone(),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| SeasError::Validation(format!("manifest encode: {}", e)))?;
        writeln!(manifest, "{}", line)?;
    }
    manifest.flush()?;
    Ok(manifest_path)
}

/// Read back an exported directory: one (image, mask, anomaly_type) per
/// manifest record.
pub fn read_export_dir(dir: &Path) -> Result<Vec<(ImageF, Option<MaskImage>, usize)>> {
    let manifest = dir.join("manifest.jsonl");
    let text = std::fs::read_to_string(&manifest)
        .map_err(|e| SeasError::MissingArtifact(format!("{}: {}", manifest.display(), e)))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExportRecord = serde_json::from_str(line).map_err(|e| SeasError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let image = ImageF::read_png(&dir.join(&rec.image))?;
        let mask = match &rec.mask {
            Some(rel) => Some(MaskImage::read_png(&dir.join(rel))?),
            None => None,
        };
        out.push((image, mask, rec.anomaly_type));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::rmp::{train_rmp, RmpModel};
    use crate::synthdata::make_corpus;
    use crate::trainer::train_generator;

    struct Fixture {
        cfg: RunConfig,
        corpus: crate::synthdata::Corpus,
        vae: Vae,
        gen: Generator,
        rmp: RmpModel,
    }

    fn fixture() -> Fixture {
        let mut cfg = RunConfig::micro();
        cfg.vae_train.steps = 6;
        cfg.gen_train.total_steps = Some(4);
        cfg.rmp_train.total_steps = Some(4);
        let corpus = make_corpus(&cfg.data, cfg.model.image_size, cfg.seed).unwrap();
        let mut vae = Vae::new(&cfg.model, cfg.seed);
        vae.pretrain(&corpus, &cfg.vae_train, cfg.seed).unwrap();
        let mut gen = Generator::new(&cfg.model, &cfg.gen_train, corpus.n_types(), cfg.seed).unwrap();
        train_generator(&mut gen, &vae, &corpus, &cfg.model, &cfg.gen_train, cfg.seed).unwrap();
        gen.freeze();
        let mut rmp = RmpModel::new(&cfg.model, &cfg.rmp_train, &vae.tap_shapes(), cfg.seed).unwrap();
        train_rmp(&mut rmp, &gen, &vae, &corpus, &cfg.model, &cfg.rmp_train, cfg.seed).unwrap();
        Fixture { cfg, corpus, vae, gen, rmp }
    }

    fn pool(f: &Fixture) -> Vec<&ImageF> {
        f.corpus.normals().into_iter().map(|s| &s.image).collect()
    }

    fn abnormal_request(f: &Fixture, count: usize, seed: u64) -> GenerationRequest {
        let mut r = GenerationRequest::from_config(&f.cfg.infer, GenMode::Abnormal, 1, count, seed);
        r.sampler_steps = 5;
        r
    }

    #[test]
    fn abnormal_mode_yields_pairs_and_normal_mode_images_only() {
        let f = fixture();
        let p = pool(&f);
        let pipe = Pipeline { vae: &f.vae, gen: &f.gen, rmp: Some(&f.rmp), model: &f.cfg.model };
        let pairs = generate(&pipe, &p, &abnormal_request(&f, 2, 3)).unwrap();
        assert_eq!(pairs.len(), 2);
        for pair in &pairs {
            assert_eq!(pair.image.h, f.cfg.model.image_size);
            let m = pair.mask.as_ref().expect("abnormal mode produces masks");
            assert_eq!(m.scores.len(), 16 * 16);
            assert!(m.scores.iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= 1.0));
        }
        let mut nr = abnormal_request(&f, 2, 3);
        nr.mode = GenMode::Normal;
        let normals = generate(&pipe, &p, &nr).unwrap();
        assert!(normals.iter().all(|p| p.mask.is_none()));
    }

    #[test]
    fn equal_seeds_are_bit_identical_and_unequal_differ() {
        let f = fixture();
        let p = pool(&f);
        let pipe = Pipeline { vae: &f.vae, gen: &f.gen, rmp: Some(&f.rmp), model: &f.cfg.model };
        let a = generate(&pipe, &p, &abnormal_request(&f, 2, 11)).unwrap();
        let b = generate(&pipe, &p, &abnormal_request(&f, 2, 11)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.data, y.image.data);
            assert_eq!(
                x.mask.as_ref().unwrap().binary.data,
                y.mask.as_ref().unwrap().binary.data
            );
        }
        let c = generate(&pipe, &p, &abnormal_request(&f, 2, 12)).unwrap();
        assert_ne!(a[0].image.data, c[0].image.data);
    }

    #[test]
    fn mask_is_thresholded_mean_of_last_step_maps() {
        let f = fixture();
        let p = pool(&f);
        let pipe = Pipeline { vae: &f.vae, gen: &f.gen, rmp: Some(&f.rmp), model: &f.cfg.model };
        let req = abnormal_request(&f, 1, 21);
        let (pairs, traces) = generate_traced(&pipe, &p, &req).unwrap();
        let trace = &traces[0];
        assert_eq!(trace.step_scores.len(), req.mask_average_steps);
        let mask = pairs[0].mask.as_ref().unwrap();
        let n = mask.scores.len();
        for i in 0..n {
            let mean: f64 = trace.step_scores.iter().map(|m| m[i]).sum::<f64>() / req.mask_average_steps as f64;
            assert!((mask.scores[i] - mean).abs() < 1e-12);
            assert_eq!(mask.binary.data[i] == 1, mean > req.mask_threshold);
        }
    }

    #[test]
    fn request_validation_and_missing_refiner_are_rejected() {
        let f = fixture();
        let p = pool(&f);
        let pipe = Pipeline { vae: &f.vae, gen: &f.gen, rmp: None, model: &f.cfg.model };
        assert!(matches!(
            generate(&pipe, &p, &abnormal_request(&f, 1, 0)),
            Err(SeasError::Config(_))
        ));
        let pipe2 = Pipeline { vae: &f.vae, gen: &f.gen, rmp: Some(&f.rmp), model: &f.cfg.model };
        let mut bad = abnormal_request(&f, 1, 0);
        bad.anomaly_type = 9;
        assert!(matches!(generate(&pipe2, &p, &bad), Err(SeasError::Range(_))));
        let mut bad = abnormal_request(&f, 1, 0);
        bad.mask_threshold = 1.0;
        assert!(matches!(generate(&pipe2, &p, &bad), Err(SeasError::Range(_))));
        let mut bad = abnormal_request(&f, 1, 0);
        bad.sampler_steps = 2;
        assert!(matches!(generate(&pipe2, &p, &bad), Err(SeasError::Config(_))));
        let mut bad = abnormal_request(&f, 1, 0);
        bad.noise_strength = 0.0;
        assert!(matches!(generate(&pipe2, &p, &bad), Err(SeasError::Range(_))));
    }

    #[test]
    fn normal_prompt_avoids_anomaly_token_rows() {
        let f = fixture();
        let prompt = f.gen.normal_prompt().unwrap();
        assert!(prompt.df_columns.is_empty());
        let anomaly_rows: Vec<usize> = f
            .gen
            .table
            .added_names()
            .iter()
            .enumerate()
            .filter(|(_, name)| name.starts_with("df"))
            .map(|(i, _)| crate::prompt::BASE_TOKENS + i)
            .collect();
        assert!(!anomaly_rows.is_empty());
        for s in &prompt.slots {
            assert!(!anomaly_rows.contains(s), "normal prompt reads anomaly row {}", s);
        }
    }

    #[test]
    fn export_writes_pngs_and_refuses_silent_overwrite() {
        let f = fixture();
        let p = pool(&f);
        let pipe = Pipeline { vae: &f.vae, gen: &f.gen, rmp: Some(&f.rmp), model: &f.cfg.model };
        let req = abnormal_request(&f, 2, 5);
        let pairs = generate(&pipe, &p, &req).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let prov = Provenance {
            vae: "v".into(),
            generator: "g".into(),
            rmp: Some("r".into()),
            config_hash: "c".into(),
        };
        let manifest = export_pairs(&pairs, &req, &prov, dir.path(), false).unwrap();
        let text = std::fs::read_to_string(&manifest).unwrap();
        assert_eq!(text.lines().count(), 2);
        let rec: ExportRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(rec.anomaly_type, 1);
        let mask = MaskImage::read_png(&dir.path().join(rec.mask.unwrap())).unwrap();
        assert!(mask.data.iter().all(|v| *v <= 1));
        let img = ImageF::read_png(&dir.path().join(rec.image)).unwrap();
        assert_eq!(img.h, 16);

        assert!(matches!(
            export_pairs(&pairs, &req, &prov, dir.path(), false),
            Err(SeasError::Validation(_))
        ));
        export_pairs(&pairs, &req, &prov, dir.path(), true).unwrap();
    }
}
