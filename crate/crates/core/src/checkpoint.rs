//! Checkpoint archives: one file per trained component with a JSON header
//! (format version, config echo, parameter directory, upstream fingerprints)
//! followed by raw little-endian f64 parameter payloads.
//!
//! Fingerprints chain the pipeline: the generator archive records the
//! autoencoder fingerprint it was trained against, the refinement archive
//! records the generator fingerprint. Loading into a mismatched partner is a
//! compatibility error.

use crate::config::RunConfig;
use crate::error::{Result, SeasError};
use crate::rmp::RmpModel;
use crate::trainer::Generator;
use crate::util::fingerprint_f64;
use crate::vae::Vae;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use seas_tensor::ParamStore;

const MAGIC: &[u8; 8] = b"SEASCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Vae,
    Generator,
    Rmp,
}

impl CheckpointKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CheckpointKind::Vae => "vae",
            CheckpointKind::Generator => "generator",
            CheckpointKind::Rmp => "rmp",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    /// Offset into the payload, in f64 units.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub config: RunConfig,
    /// Fingerprint of this archive's own parameters, in directory order.
    pub fingerprint: String,
    /// Fingerprints of the artifacts this one was trained against.
    pub upstream: BTreeMap<String, String>,
    /// Component-specific scalars (autoencoder latent scale, type count).
    pub extra: BTreeMap<String, serde_json::Value>,
    pub params: Vec<ParamRecord>,
}

/// Fingerprint of every parameter value in insertion order. Matches the
/// in-memory fingerprints reported by the trained models.
pub fn store_fingerprint(store: &ParamStore) -> String {
    let ids: Vec<_> = store.ids().collect();
    fingerprint_f64(ids.iter().flat_map(|id| store.value(*id).iter().copied()))
}

/// Write one component archive. Returns the parameter fingerprint.
pub fn save_store(
    path: &Path,
    kind: CheckpointKind,
    store: &ParamStore,
    config: &RunConfig,
    upstream: BTreeMap<String, String>,
    extra: BTreeMap<String, serde_json::Value>,
) -> Result<String> {
    let ids: Vec<_> = store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    let mut offset = 0usize;
    for id in &ids {
        let len = store.value(*id).len();
        params.push(ParamRecord {
            name: store.name(*id).to_string(),
            shape: store.shape(*id).to_vec(),
            trainable: store.is_trainable(*id),
            offset,
            len,
        });
        offset += len;
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        kind,
        config: config.clone(),
        fingerprint: store_fingerprint(store),
        upstream,
        extra,
        params,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| SeasError::Validation(format!("header encode: {}", e)))?;

    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u64::<LittleEndian>(header_bytes.len() as u64)?;
    w.write_all(&header_bytes)?;
    for id in &ids {
        for v in store.value(*id) {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    w.flush()?;
    Ok(header.fingerprint)
}

/// Read an archive's header and full payload.
pub fn read_archive(path: &Path) -> Result<(CheckpointHeader, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| {
        SeasError::MissingArtifact(format!("{}: {}", path.display(), e))
    })?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SeasError::Compatibility(format!(
            "{} is not a checkpoint archive",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(SeasError::Compatibility(format!(
            "archive format {} unsupported, want {}",
            version, FORMAT_VERSION
        )));
    }
    let hlen = r.read_u64::<LittleEndian>()? as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&hbytes)
        .map_err(|e| SeasError::Compatibility(format!("header decode: {}", e)))?;
    let total: usize = header.params.iter().map(|p| p.len).sum();
    let mut payload = Vec::with_capacity(total);
    for _ in 0..total {
        payload.push(r.read_f64::<LittleEndian>()?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(SeasError::Compatibility("trailing bytes after payload".into()));
    }
    for p in &header.params {
        let numel: usize = p.shape.iter().product();
        if numel != p.len || p.offset + p.len > total {
            return Err(SeasError::Compatibility(format!("bad directory entry for {}", p.name)));
        }
    }
    Ok((header, payload))
}

/// Overwrite a freshly built store with archived values by name. Every
/// archived parameter must exist with the same shape and the store must not
/// hold extras.
pub fn load_into_store(store: &mut ParamStore, header: &CheckpointHeader, payload: &[f64]) -> Result<()> {
    if store.len() != header.params.len() {
        return Err(SeasError::Compatibility(format!(
            "store holds {} parameters, archive {}",
            store.len(),
            header.params.len()
        )));
    }
    for p in &header.params {
        let id = store.lookup(&p.name).ok_or_else(|| {
            SeasError::Compatibility(format!("archive parameter {} missing from model", p.name))
        })?;
        if store.shape(id) != p.shape.as_slice() {
            return Err(SeasError::Compatibility(format!(
                "parameter {} shape {:?} vs archived {:?}",
                p.name,
                store.shape(id),
                p.shape
            )));
        }
        store.value_mut(id).copy_from_slice(&payload[p.offset..p.offset + p.len]);
        store.set_trainable(id, p.trainable);
    }
    Ok(())
}

fn expect_kind(header: &CheckpointHeader, want: CheckpointKind, path: &Path) -> Result<()> {
    if header.kind != want {
        return Err(SeasError::Compatibility(format!(
            "{} holds a {} archive, want {}",
            path.display(),
            header.kind.as_str(),
            want.as_str()
        )));
    }
    Ok(())
}

fn extra_f64(header: &CheckpointHeader, key: &str) -> Result<f64> {
    header
        .extra
        .get(key)
        .and_then(|v| v.as_f64())
        .ok_or_else(|| SeasError::Compatibility(format!("archive missing {}", key)))
}

fn extra_usize(header: &CheckpointHeader, key: &str) -> Result<usize> {
    header
        .extra
        .get(key)
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
        .ok_or_else(|| SeasError::Compatibility(format!("archive missing {}", key)))
}

/// Check that an archive was trained against the artifact it is now paired
/// with.
pub fn verify_upstream(header: &CheckpointHeader, key: &str, actual: &str) -> Result<()> {
    match header.upstream.get(key) {
        Some(fp) if fp == actual => Ok(()),
        Some(fp) => Err(SeasError::Compatibility(format!(
            "{} fingerprint {}.. does not match archived {}..",
            key,
            &actual[..12.min(actual.len())],
            &fp[..12.min(fp.len())]
        ))),
        None => Err(SeasError::Compatibility(format!("archive records no {} fingerprint", key))),
    }
}

pub fn save_vae(path: &Path, vae: &Vae, config: &RunConfig) -> Result<String> {
    let mut extra = BTreeMap::new();
    extra.insert(
        "latent_scale".to_string(),
        serde_json::Value::from(vae.latent_scale),
    );
    save_store(path, CheckpointKind::Vae, &vae.store, config, BTreeMap::new(), extra)
}

pub fn load_vae(path: &Path) -> Result<(Vae, CheckpointHeader)> {
    let (header, payload) = read_archive(path)?;
    expect_kind(&header, CheckpointKind::Vae, path)?;
    let mut vae = Vae::new(&header.config.model, header.config.seed);
    load_into_store(&mut vae.store, &header, &payload)?;
    vae.latent_scale = extra_f64(&header, "latent_scale")?;
    Ok((vae, header))
}

pub fn save_generator(path: &Path, gen: &Generator, config: &RunConfig, vae_fingerprint: &str) -> Result<String> {
    let mut upstream = BTreeMap::new();
    upstream.insert("vae".to_string(), vae_fingerprint.to_string());
    let mut extra = BTreeMap::new();
    extra.insert("n_types".to_string(), serde_json::Value::from(gen.n_types as u64));
    save_store(path, CheckpointKind::Generator, &gen.store, config, upstream, extra)
}

pub fn load_generator(path: &Path) -> Result<(Generator, CheckpointHeader)> {
    let (header, payload) = read_archive(path)?;
    expect_kind(&header, CheckpointKind::Generator, path)?;
    let n_types = extra_usize(&header, "n_types")?;
    let mut gen = Generator::new(&header.config.model, &header.config.gen_train, n_types, header.config.seed)?;
    load_into_store(&mut gen.store, &header, &payload)?;
    Ok((gen, header))
}

pub fn save_rmp(path: &Path, rmp: &RmpModel, config: &RunConfig, generator_fingerprint: &str) -> Result<String> {
    let mut upstream = BTreeMap::new();
    upstream.insert("generator".to_string(), generator_fingerprint.to_string());
    save_store(path, CheckpointKind::Rmp, &rmp.store, config, upstream, BTreeMap::new())
}

pub fn load_rmp(path: &Path, vae: &Vae) -> Result<(RmpModel, CheckpointHeader)> {
    let (header, payload) = read_archive(path)?;
    expect_kind(&header, CheckpointKind::Rmp, path)?;
    let mut rmp = RmpModel::new(
        &header.config.model,
        &header.config.rmp_train,
        &vae.tap_shapes(),
        header.config.seed,
    )?;
    load_into_store(&mut rmp.store, &header, &payload)?;
    Ok((rmp, header))
}
