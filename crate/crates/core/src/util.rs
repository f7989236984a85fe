//! Seed derivation and small numeric helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed from a master seed and a label. Stable across
/// platforms and releases (sha256 of the little-endian seed plus the label).
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub fn rng_for(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label))
}

/// Standard normal draws via Box-Muller on the uniform stream.
pub fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand::Rng;
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-12..1.0f64);
            let u2: f64 = rng.gen_range(0.0..1.0f64);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let d = h.finalize();
    d.iter().map(|b| format!("{:02x}", b)).collect()
}

/// Fingerprint of an f64 slice: hash of the exact little-endian bytes.
pub fn fingerprint_f64(values: impl Iterator<Item = f64>) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    let d = h.finalize();
    d.iter().map(|b| format!("{:02x}", b)).collect()
}
