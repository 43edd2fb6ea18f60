//! Seeded random streams.
//!
//! Every source of randomness in a run derives from one master seed through
//! named substreams, so that data sampling, weight init, and depth sampling
//! are independently reproducible and a resumed run can continue any stream
//! exactly where it left off.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a deterministic RNG from a master seed and a list of name/index tags.
pub fn derive_rng(master: u64, tags: &[&str]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for tag in tags {
        hasher.update([0xff]);
        hasher.update(tag.as_bytes());
    }
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Convenience for per-item streams keyed by integers (step, slot, shard).
pub fn derive_rng_indexed(master: u64, name: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update([0xff]);
    hasher.update(name.as_bytes());
    for ix in indices {
        hasher.update([0xfe]);
        hasher.update(ix.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Serializable position of a named stream, for exact resume.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StreamState {
    pub master: u64,
    pub name: String,
    pub word_pos: u128,
}

impl StreamState {
    pub fn capture(master: u64, name: &str, rng: &ChaCha8Rng) -> Self {
        StreamState {
            master,
            name: name.to_string(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = derive_rng(self.master, &[&self.name]);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Uniform draw in the open interval (0, 1), safe for log transforms.
pub fn uniform_open01<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12)
}

/// Standard Gumbel(0,1) sample.
pub fn gumbel01<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u = uniform_open01(rng);
    -(-u.ln()).ln()
}

/// Normal(0, std) truncated at two standard deviations, used for weight init.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}
