//! Keyed, counter-style seed derivation. Every random draw in the crate is
//! made from a generator seeded by a digest of the values that identify the
//! draw, so results do not depend on iteration order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A component of a derivation key.
pub enum KeyPart<'a> {
    U64(u64),
    Str(&'a str),
}

pub fn derive_seed(domain: &str, parts: &[KeyPart<'_>]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((domain.len() as u64).to_le_bytes());
    h.update(domain.as_bytes());
    for p in parts {
        match p {
            KeyPart::U64(v) => {
                h.update([0u8]);
                h.update(v.to_le_bytes());
            }
            KeyPart::Str(s) => {
                h.update([1u8]);
                h.update((s.len() as u64).to_le_bytes());
                h.update(s.as_bytes());
            }
        }
    }
    h.finalize().into()
}

pub fn keyed_rng(domain: &str, parts: &[KeyPart<'_>]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(domain, parts))
}

pub fn derive_u64(domain: &str, parts: &[KeyPart<'_>]) -> u64 {
    let s = derive_seed(domain, parts);
    u64::from_le_bytes(s[..8].try_into().expect("8 bytes"))
}
