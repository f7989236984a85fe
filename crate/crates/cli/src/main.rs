//! Command-line driver for the anomaly generation pipeline.
//!
//! Every command resolves one run configuration (the built-in toy preset when
//! no file is given), performs a stage, and appends a run manifest line to
//! `<out>/runs.jsonl`. Trained components are cached under a content key
//! derived from the configuration sections that affect them, so repeated runs
//! and ablation arms share work.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use seas_core::ablate::{apply_arm, arm_names};
use seas_core::config::{load_config_file, RunConfig};
use seas_core::featnet::FeatureNet;
use seas_core::imagedata::{ImageF, MaskImage};
use seas_core::inference::{
    export_pairs, generate, read_export_dir, GenMode, GenerationRequest, Pipeline, Provenance,
};
use seas_core::manifest::{config_hash, RunManifest};
use seas_core::metrics;
use seas_core::pipeline::{
    build_corpus, ensure_artifacts, ensure_generator, ensure_rmp, ensure_vae, gen_key, rmp_key,
    vae_key, Artifacts,
};
use seas_core::rmp::refined_scores_for_image;
use seas_core::synthdata::{load_corpus, write_corpus, Corpus};
use seas_core::util::rng_for;
use seas_core::{Result, SeasError};

#[derive(Parser)]
#[command(name = "seas", version, about = "Train and run the anomaly pair generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; defaults to the built-in toy preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for corpora, exports, reports and manifests.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Apply one ablation arm to the configuration (or select the arm to run
    /// for `ablate`).
    #[arg(long, global = true)]
    arm: Option<String>,
    /// Redo the stage even when a cached artifact or export exists.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the procedural corpus to <out>/corpus.
    GenData,
    /// Pre-train the autoencoder and cache the checkpoint.
    PretrainVae,
    /// Train the generator on top of the cached autoencoder.
    TrainGen,
    /// Train the mask refinement branch on top of the cached generator.
    TrainRmp,
    /// Generate image and mask pairs for every anomaly type plus a normal set.
    Generate,
    /// Score generated sets against the corpus and write <out>/report.csv.
    Evaluate,
    /// Run every ablation arm (or one via --arm) and write a summary table.
    Ablate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error class={} {}", e.class(), e);
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match cli.command {
        Command::GenData => cmd_gen_data(cli, &cfg),
        Command::PretrainVae => cmd_train(cli, &cfg, Phase::Vae),
        Command::TrainGen => cmd_train(cli, &cfg, Phase::Gen),
        Command::TrainRmp => cmd_train(cli, &cfg, Phase::Rmp),
        Command::Generate => cmd_generate(cli, &cfg),
        Command::Evaluate => cmd_evaluate(cli, &cfg),
        Command::Ablate => cmd_ablate(cli, &cfg),
    }
}

/// Configuration file (or toy preset), then seed override, then the arm
/// transform. `ablate` applies arms itself.
fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_config_file(path)?,
        None => RunConfig::toy(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(arm) = &cli.arm {
        if !matches!(cli.command, Command::Ablate) {
            cfg = apply_arm(&cfg, arm)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// SEAS_CACHE_DIR wins so parallel runs can share trained components.
fn cache_dir(cli: &Cli) -> PathBuf {
    std::env::var_os("SEAS_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| cli.out.join("checkpoints"))
}

fn finish_manifest(mut m: RunManifest, out: &Path) -> Result<()> {
    m.finish();
    m.append_to(&out.join("runs.jsonl"))?;
    println!("{} done content_hash={}", m.command, m.content_hash());
    Ok(())
}

fn cmd_gen_data(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let dir = cli.out.join("corpus");
    if dir.join("manifest.jsonl").exists() && !cli.force {
        return Err(SeasError::Validation(format!(
            "{} already holds a corpus; pass --force to replace",
            dir.display()
        )));
    }
    let corpus = build_corpus(cfg)?;
    write_corpus(&corpus, &dir)?;
    println!(
        "corpus: {} samples, {} anomaly types -> {}",
        corpus.samples.len(),
        corpus.n_types(),
        dir.display()
    );
    let mut m = RunManifest::start("gen-data", cfg);
    m.record_output("corpus/manifest.jsonl");
    finish_manifest(m, &cli.out)
}

enum Phase {
    Vae,
    Gen,
    Rmp,
}

/// Train up to the requested stage. `--force` retrains only that stage;
/// upstream stages still come from the cache when present.
fn cmd_train(cli: &Cli, cfg: &RunConfig, phase: Phase) -> Result<()> {
    let cache = cache_dir(cli);
    let corpus = build_corpus(cfg)?;
    let command = match phase {
        Phase::Vae => "pretrain-vae",
        Phase::Gen => "train-gen",
        Phase::Rmp => "train-rmp",
    };
    let mut m = RunManifest::start(command, cfg);
    let force_vae = cli.force && matches!(phase, Phase::Vae);
    let (vae, vae_fp) = ensure_vae(cfg, &corpus, Some(&cache), force_vae)?;
    m.record_fingerprint("vae", &vae_fp);
    m.record_output(&format!("vae-{}.ckpt", &vae_key(cfg)[..16]));
    if !matches!(phase, Phase::Vae) {
        let force_gen = cli.force && matches!(phase, Phase::Gen);
        let (gen, gen_fp) = ensure_generator(cfg, &corpus, &vae, &vae_fp, Some(&cache), force_gen)?;
        m.record_fingerprint("generator", &gen_fp);
        m.record_output(&format!("gen-{}.ckpt", &gen_key(cfg)[..16]));
        if matches!(phase, Phase::Rmp) {
            let (_, rmp_fp) =
                ensure_rmp(cfg, &corpus, &vae, &gen, &gen_fp, Some(&cache), cli.force)?;
            m.record_fingerprint("rmp", &rmp_fp);
            m.record_output(&format!("rmp-{}.ckpt", &rmp_key(cfg)[..16]));
        }
    }
    finish_manifest(m, &cli.out)
}

/// Per-set seeds keep exports reproducible and distinct; set 0 is normal.
fn set_seed(base: u64, set_index: usize) -> u64 {
    base.wrapping_add(1_000_003u64.wrapping_mul(set_index as u64))
}

fn generate_sets(
    cfg: &RunConfig,
    art: &Artifacts,
    out: &Path,
    force: bool,
) -> Result<Vec<String>> {
    let pipe = Pipeline {
        vae: &art.vae,
        gen: &art.gen,
        rmp: Some(&art.rmp),
        model: &cfg.model,
    };
    let pool: Vec<&ImageF> = art.corpus.normals().iter().map(|s| &s.image).collect();
    let provenance = Provenance {
        vae: art.vae_fp.clone(),
        generator: art.gen_fp.clone(),
        rmp: Some(art.rmp_fp.clone()),
        config_hash: config_hash(cfg),
    };
    let mut outputs = Vec::new();
    let mut jobs = vec![(0usize, "normal".to_string(), GenMode::Normal)];
    for n in 1..=art.corpus.n_types() {
        jobs.push((n, art.corpus.anomaly_types[n - 1].clone(), GenMode::Abnormal));
    }
    for (n, label, mode) in jobs {
        let req = GenerationRequest::from_config(
            &cfg.infer,
            mode,
            n,
            cfg.infer.count,
            set_seed(cfg.seed, n),
        );
        let pairs = generate(&pipe, &pool, &req)?;
        let dir = out.join("generated").join(&label);
        export_pairs(&pairs, &req, &provenance, &dir, force)?;
        println!("generated {} x{} -> {}", label, pairs.len(), dir.display());
        outputs.push(format!("generated/{}/manifest.jsonl", label));
    }
    Ok(outputs)
}

fn cmd_generate(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let cache = cache_dir(cli);
    let art = ensure_artifacts(cfg, Some(&cache))?;
    let mut m = RunManifest::start("generate", cfg);
    m.record_fingerprint("vae", &art.vae_fp);
    m.record_fingerprint("generator", &art.gen_fp);
    m.record_fingerprint("rmp", &art.rmp_fp);
    for o in generate_sets(cfg, &art, &cli.out, cli.force)? {
        m.record_output(&o);
    }
    finish_manifest(m, &cli.out)
}

/// One report row; None renders as an empty CSV cell.
struct EvalRow {
    set: String,
    count: usize,
    is: Option<f64>,
    ic_lpips: Option<f64>,
    kid: Option<f64>,
    ic_lpips_a: Option<f64>,
    auroc: Option<f64>,
    ap: Option<f64>,
    f1_max: Option<f64>,
    iou: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{:.6}", x)).unwrap_or_default()
}

fn write_report(rows: &[EvalRow], path: &Path) -> Result<()> {
    let mut text = String::from("set,count,is,ic_lpips,kid,ic_lpips_a,auroc,ap,f1_max,iou\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.set,
            r.count,
            cell(r.is),
            cell(r.ic_lpips),
            cell(r.kid),
            cell(r.ic_lpips_a),
            cell(r.auroc),
            cell(r.ap),
            cell(r.f1_max),
            cell(r.iou)
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Pixel-level detection scores on the real abnormal images of one type,
/// using the refinement branch at the mildest configured noise level.
fn detection_metrics(
    cfg: &RunConfig,
    art: &Artifacts,
    anomaly_type: usize,
) -> Result<(Option<f64>, Option<f64>, Option<f64>, Option<f64>)> {
    let samples = art.corpus.abnormals_of_type(anomaly_type);
    if samples.is_empty() {
        return Ok((None, None, None, None));
    }
    let t = *cfg.rmp_train.noise_levels.iter().min().unwrap();
    let prompt = art.gen.abnormal_prompt(anomaly_type)?;
    let mut rng = rng_for(cfg.seed, "evaluate");
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut ious = Vec::new();
    for s in samples {
        let mask = s.mask.as_ref().ok_or_else(|| {
            SeasError::Data(format!("abnormal sample {} lacks a mask", s.index))
        })?;
        let px = refined_scores_for_image(
            &art.rmp, &art.gen, &art.vae, &cfg.model, &s.image, &prompt, t, &mut rng,
        )?;
        let size = s.image.h;
        let pred: Vec<u8> = px.iter().map(|&v| u8::from(v > cfg.infer.tau)).collect();
        let pred = MaskImage { h: size, w: size, data: pred };
        ious.push(metrics::mask_iou(&pred, mask)?);
        scores.extend_from_slice(&px);
        labels.extend_from_slice(&mask.data);
    }
    let iou = ious.iter().sum::<f64>() / ious.len() as f64;
    Ok((
        Some(metrics::auroc(&scores, &labels)?),
        Some(metrics::average_precision(&scores, &labels)?),
        Some(metrics::f1_max(&scores, &labels)?),
        Some(iou),
    ))
}

fn cmd_evaluate(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let corpus = load_corpus(&cli.out.join("corpus"))?;
    let cache = cache_dir(cli);
    let art = ensure_artifacts(cfg, Some(&cache))?;
    let net = FeatureNet::new();
    let normal_features: Vec<Vec<f64>> = corpus
        .normals()
        .iter()
        .map(|s| net.features(&s.image))
        .collect::<Result<_>>()?;
    let mut labels = vec![(0usize, "normal".to_string())];
    for n in 1..=corpus.n_types() {
        labels.push((n, corpus.anomaly_types[n - 1].clone()));
    }
    let mut rows = Vec::new();
    for (n, label) in labels {
        let dir = cli.out.join("generated").join(&label);
        let exports = read_export_dir(&dir)?;
        let images: Vec<ImageF> = exports.iter().map(|(img, _, _)| img.clone()).collect();
        let probs: Vec<Vec<f64>> = images
            .iter()
            .map(|img| net.class_probs(img))
            .collect::<Result<_>>()?;
        let feats: Vec<Vec<f64>> = images
            .iter()
            .map(|img| net.features(img))
            .collect::<Result<_>>()?;
        let masked: Vec<(ImageF, MaskImage)> = exports
            .iter()
            .filter_map(|(img, mask, _)| mask.clone().map(|m| (img.clone(), m)))
            .collect();
        let ic_lpips_a = if masked.len() == images.len() && masked.len() >= 2 {
            Some(metrics::ic_lpips_masked(&net, &[masked])?)
        } else {
            None
        };
        let (auroc, ap, f1, iou) = if n > 0 {
            detection_metrics(cfg, &art, n)?
        } else {
            (None, None, None, None)
        };
        rows.push(EvalRow {
            set: label,
            count: images.len(),
            is: Some(metrics::inception_score(&probs)?),
            ic_lpips: if images.len() >= 2 {
                Some(metrics::ic_lpips(&net, &[images])?)
            } else {
                None
            },
            kid: Some(metrics::kid(&feats, &normal_features)?),
            ic_lpips_a,
            auroc,
            ap,
            f1_max: f1,
            iou,
        });
    }
    let report = cli.out.join("report.csv");
    write_report(&rows, &report)?;
    println!("report: {} rows -> {}", rows.len(), report.display());
    let mut m = RunManifest::start("evaluate", cfg);
    m.record_fingerprint("vae", &art.vae_fp);
    m.record_fingerprint("generator", &art.gen_fp);
    m.record_fingerprint("rmp", &art.rmp_fp);
    m.record_output("report.csv");
    finish_manifest(m, &cli.out)
}

/// Fraction of abnormal masks with at least one positive pixel, as a cheap
/// per-arm quality signal.
fn nonempty_mask_fraction(corpus: &Corpus, cfg: &RunConfig, art: &Artifacts) -> Result<f64> {
    let pipe = Pipeline {
        vae: &art.vae,
        gen: &art.gen,
        rmp: Some(&art.rmp),
        model: &cfg.model,
    };
    let pool: Vec<&ImageF> = corpus.normals().iter().map(|s| &s.image).collect();
    let count = cfg.infer.count.min(2).max(1);
    let req =
        GenerationRequest::from_config(&cfg.infer, GenMode::Abnormal, 1, count, set_seed(cfg.seed, 1));
    let pairs = generate(&pipe, &pool, &req)?;
    let nonempty = pairs
        .iter()
        .filter(|p| p.mask.as_ref().is_some_and(|m| m.binary.data.iter().any(|&v| v == 1)))
        .count();
    Ok(nonempty as f64 / pairs.len() as f64)
}

fn cmd_ablate(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let names: Vec<String> = match &cli.arm {
        Some(a) => vec![a.clone()],
        None => arm_names().iter().map(|s| s.to_string()).collect(),
    };
    let cache = cache_dir(cli);
    let dir = cli.out.join("ablate");
    std::fs::create_dir_all(&dir)?;
    let mut summary = String::from("arm,config_hash,vae,generator,rmp,nonempty_mask_fraction\n");
    for name in &names {
        let acfg = apply_arm(cfg, name)?;
        println!("arm {} config_hash={}", name, config_hash(&acfg));
        let art = ensure_artifacts(&acfg, Some(&cache))?;
        let frac = nonempty_mask_fraction(&art.corpus, &acfg, &art)?;
        summary.push_str(&format!(
            "{},{},{},{},{},{:.4}\n",
            name,
            &config_hash(&acfg)[..16],
            &art.vae_fp[..16],
            &art.gen_fp[..16],
            &art.rmp_fp[..16],
            frac
        ));
        let mut m = RunManifest::start(&format!("ablate:{}", name), &acfg);
        m.record_fingerprint("vae", &art.vae_fp);
        m.record_fingerprint("generator", &art.gen_fp);
        m.record_fingerprint("rmp", &art.rmp_fp);
        m.record_output("ablate/summary.csv");
        m.finish();
        m.append_to(&cli.out.join("runs.jsonl"))?;
    }
    let path = dir.join("summary.csv");
    std::fs::write(&path, summary)?;
    println!("ablate: {} arms -> {}", names.len(), path.display());
    Ok(())
}
