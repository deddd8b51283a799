//! Cryptographic primitives for the metering protocol: RSA key pairs, blind
//! and ordinary FDH signatures, hybrid public-key envelopes, keyed MACs,
//! credential hash chains, and the seeded RNG everything draws from.
//!
//! All randomness flows through [`SimRng`] so a fixed seed makes every
//! operation bit-reproducible. Key sizes of 128–512 bits are supported only
//! so the benchmark axis can be swept; they are far below any secure margin.

mod chain;
mod envelope;
mod keys;
mod mac;
mod prime;
mod rng;

pub use chain::{hash32, CredentialChain, HASH_LEN};
pub use envelope::Envelope;
pub use keys::{
    blind, keygen, sign, sign_blinded, unblind, verify, BlindingFactor, KeyId, KeyPair,
    PrivateKey, PublicKey, Signature, SUPPORTED_KEY_BITS,
};
pub use mac::{mac, MacTag, SharedKey, MAC_LEN, SHARED_KEY_LEN};
pub use rng::SimRng;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CryptoError {
    #[error("unsupported RSA modulus size {0} (supported: 128, 256, 512, 1024, 2048)")]
    UnsupportedKeySize(u32),
    #[error("value out of range for modulus")]
    ValueOutOfRange,
    #[error("hash chain length must be at least 1")]
    EmptyChain,
    #[error("envelope decryption failed (wrong key or corrupted ciphertext)")]
    DecryptionFailed,
    #[error("plaintext must not be empty")]
    EmptyPlaintext,
}
