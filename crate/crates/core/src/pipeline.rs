//! Phase orchestration shared by the CLI commands and the ablation sweep:
//! build or load each trained component, keyed by a hash of exactly the
//! config sections that influence it, so sweeps retrain only what an arm
//! actually changes.

use crate::checkpoint::{
    load_generator, load_rmp, load_vae, save_generator, save_rmp, save_vae, verify_upstream,
};
use crate::config::RunConfig;
use crate::error::Result;
use crate::rmp::{train_rmp, RmpModel};
use crate::synthdata::{make_corpus, Corpus};
use crate::trainer::{train_generator, Generator};
use crate::vae::Vae;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

fn section_hash(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    h.finalize().iter().map(|b| format!("{:02x}", b)).collect()
}

fn js<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config section serializes")
}

/// Cache key for the pre-trained autoencoder.
pub fn vae_key(cfg: &RunConfig) -> String {
    section_hash(&[&js(&cfg.model), &js(&cfg.data), &js(&cfg.vae_train), &cfg.seed.to_string()])
}

/// Cache key for the trained generator; includes everything upstream.
pub fn gen_key(cfg: &RunConfig) -> String {
    section_hash(&[&vae_key(cfg), &js(&cfg.gen_train)])
}

/// Cache key for the trained refinement branch.
pub fn rmp_key(cfg: &RunConfig) -> String {
    section_hash(&[&gen_key(cfg), &js(&cfg.rmp_train)])
}

fn cache_path(dir: &Path, kind: &str, key: &str) -> PathBuf {
    dir.join(format!("{}-{}.ckpt", kind, &key[..16]))
}

/// Rebuild the procedural corpus for a config. Deterministic in the config
/// and seed, so commands regenerate it instead of reading it back from disk.
pub fn build_corpus(cfg: &RunConfig) -> Result<Corpus> {
    make_corpus(&cfg.data, cfg.model.image_size, cfg.seed)
}

/// Load the autoencoder from cache or pre-train and cache it. `force`
/// skips the cache read and overwrites the entry.
/// Returns the component and its fingerprint.
pub fn ensure_vae(cfg: &RunConfig, corpus: &Corpus, cache: Option<&Path>, force: bool) -> Result<(Vae, String)> {
    let key = vae_key(cfg);
    if let Some(dir) = cache {
        let path = cache_path(dir, "vae", &key);
        if path.exists() && !force {
            if let Ok((vae, header)) = load_vae(&path) {
                println!("vae: cached {}", path.display());
                return Ok((vae, header.fingerprint));
            }
            println!("vae: cache entry unreadable, retraining");
        }
    }
    let mut vae = Vae::new(&cfg.model, cfg.seed);
    vae.pretrain(corpus, &cfg.vae_train, cfg.seed)?;
    let fp = crate::checkpoint::store_fingerprint(&vae.store);
    if let Some(dir) = cache {
        save_vae(&cache_path(dir, "vae", &key), &vae, cfg)?;
    }
    Ok((vae, fp))
}

/// Load the generator from cache (verifying it was trained against this
/// autoencoder) or train and cache it. Returned frozen.
pub fn ensure_generator(
    cfg: &RunConfig,
    corpus: &Corpus,
    vae: &Vae,
    vae_fp: &str,
    cache: Option<&Path>,
    force: bool,
) -> Result<(Generator, String)> {
    let key = gen_key(cfg);
    if let Some(dir) = cache {
        let path = cache_path(dir, "gen", &key);
        if path.exists() && !force {
            match load_generator(&path) {
                Ok((gen, header)) if verify_upstream(&header, "vae", vae_fp).is_ok() => {
                    println!("generator: cached {}", path.display());
                    return Ok((gen, header.fingerprint));
                }
                _ => println!("generator: cache entry stale, retraining"),
            }
        }
    }
    let mut gen = Generator::new(&cfg.model, &cfg.gen_train, corpus.n_types(), cfg.seed)?;
    train_generator(&mut gen, vae, corpus, &cfg.model, &cfg.gen_train, cfg.seed)?;
    gen.freeze();
    let fp = gen.fingerprint();
    if let Some(dir) = cache {
        save_generator(&cache_path(dir, "gen", &key), &gen, cfg, vae_fp)?;
    }
    Ok((gen, fp))
}

/// Load the refinement branch from cache (verifying the generator pairing)
/// or train and cache it.
pub fn ensure_rmp(
    cfg: &RunConfig,
    corpus: &Corpus,
    vae: &Vae,
    gen: &Generator,
    gen_fp: &str,
    cache: Option<&Path>,
    force: bool,
) -> Result<(RmpModel, String)> {
    let key = rmp_key(cfg);
    if let Some(dir) = cache {
        let path = cache_path(dir, "rmp", &key);
        if path.exists() && !force {
            match load_rmp(&path, vae) {
                Ok((rmp, header)) if verify_upstream(&header, "generator", gen_fp).is_ok() => {
                    println!("rmp: cached {}", path.display());
                    return Ok((rmp, header.fingerprint));
                }
                _ => println!("rmp: cache entry stale, retraining"),
            }
        }
    }
    let mut rmp = RmpModel::new(&cfg.model, &cfg.rmp_train, &vae.tap_shapes(), cfg.seed)?;
    train_rmp(&mut rmp, gen, vae, corpus, &cfg.model, &cfg.rmp_train, cfg.seed)?;
    let fp = rmp.fingerprint();
    if let Some(dir) = cache {
        save_rmp(&cache_path(dir, "rmp", &key), &rmp, cfg, gen_fp)?;
    }
    Ok((rmp, fp))
}

/// All trained components for a config, cache-aware.
pub struct Artifacts {
    pub corpus: Corpus,
    pub vae: Vae,
    pub vae_fp: String,
    pub gen: Generator,
    pub gen_fp: String,
    pub rmp: RmpModel,
    pub rmp_fp: String,
}

pub fn ensure_artifacts(cfg: &RunConfig, cache: Option<&Path>) -> Result<Artifacts> {
    cfg.validate()?;
    let corpus = build_corpus(cfg)?;
    let (vae, vae_fp) = ensure_vae(cfg, &corpus, cache, false)?;
    let (gen, gen_fp) = ensure_generator(cfg, &corpus, &vae, &vae_fp, cache, false)?;
    let (rmp, rmp_fp) = ensure_rmp(cfg, &corpus, &vae, &gen, &gen_fp, cache, false)?;
    Ok(Artifacts { corpus, vae, vae_fp, gen, gen_fp, rmp, rmp_fp })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast_micro() -> RunConfig {
        let mut cfg = RunConfig::micro();
        cfg.vae_train.steps = 4;
        cfg.gen_train.total_steps = Some(2);
        cfg.rmp_train.total_steps = Some(2);
        cfg
    }

    #[test]
    fn keys_isolate_their_phases() {
        let a = fast_micro();
        let mut b = a.clone();
        b.infer.tau = 0.4;
        assert_eq!(vae_key(&a), vae_key(&b));
        assert_eq!(rmp_key(&a), rmp_key(&b));

        let mut c = a.clone();
        c.rmp_train.fusion_layers += 1;
        assert_eq!(gen_key(&a), gen_key(&c));
        assert_ne!(rmp_key(&a), rmp_key(&c));

        let mut d = a.clone();
        d.gen_train.enable_st = false;
        assert_eq!(vae_key(&a), vae_key(&d));
        assert_ne!(gen_key(&a), gen_key(&d));
        assert_ne!(rmp_key(&a), rmp_key(&d));

        let mut e = a.clone();
        e.seed += 1;
        assert_ne!(vae_key(&a), vae_key(&e));
    }

    #[test]
    fn cache_round_trip_matches_fresh_training() {
        let cfg = fast_micro();
        let dir = tempfile::tempdir().unwrap();
        let first = ensure_artifacts(&cfg, Some(dir.path())).unwrap();
        let second = ensure_artifacts(&cfg, Some(dir.path())).unwrap();
        assert_eq!(first.vae_fp, second.vae_fp);
        assert_eq!(first.gen_fp, second.gen_fp);
        assert_eq!(first.rmp_fp, second.rmp_fp);

        let fresh = ensure_artifacts(&cfg, None).unwrap();
        assert_eq!(first.gen_fp, fresh.gen_fp);
        assert_eq!(first.rmp_fp, fresh.rmp_fp);
    }

    #[test]
    fn stale_cache_entries_retrain() {
        let cfg = fast_micro();
        let dir = tempfile::tempdir().unwrap();
        let key = vae_key(&cfg);
        let path = cache_path(dir.path(), "vae", &key);
        std::fs::create_dir_all(dir.path()).unwrap();
        std::fs::write(&path, b"garbage").unwrap();
        let corpus = build_corpus(&cfg).unwrap();
        let (vae, fp) = ensure_vae(&cfg, &corpus, Some(dir.path()), false).unwrap();
        assert!(!fp.is_empty());
        assert!(vae.store.trainable_names().is_empty());
        let (_, fp2) = ensure_vae(&cfg, &corpus, Some(dir.path()), false).unwrap();
        assert_eq!(fp, fp2);
    }
}
