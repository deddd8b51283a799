//! Credential hash chains.
//!
//! A chain is seeded with a random 32-byte value and extended by repeated
//! SHA-256: `cr_i = H(cr_{i-1})`. The meter reveals links back to front
//! (`cr_{n-1}` first, anchored by the provider's blind signature), so each
//! revealed credential is the preimage of the previously accepted one.

use sha2::{Digest, Sha256};

use super::CryptoError;

pub const HASH_LEN: usize = 32;

pub fn hash32(data: &[u8]) -> [u8; HASH_LEN] {
    Sha256::digest(data).into()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CredentialChain {
    links: Vec<[u8; HASH_LEN]>,
}

impl CredentialChain {
    /// Build `cr_0 .. cr_{n-1}` with `cr_0 = seed`.
    pub fn build(seed: [u8; HASH_LEN], n: usize) -> Result<Self, CryptoError> {
        if n == 0 {
            return Err(CryptoError::EmptyChain);
        }
        let mut links = Vec::with_capacity(n);
        links.push(seed);
        for _ in 1..n {
            links.push(hash32(links.last().unwrap()));
        }
        Ok(Self { links })
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn link(&self, i: usize) -> [u8; HASH_LEN] {
        self.links[i]
    }

    pub fn last(&self) -> [u8; HASH_LEN] {
        *self.links.last().unwrap()
    }

    /// Number of protocol-level hash invocations building this chain took.
    pub fn hashes_performed(&self) -> u64 {
        (self.links.len() - 1) as u64
    }
}
