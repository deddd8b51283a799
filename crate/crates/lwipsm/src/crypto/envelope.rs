//! Hybrid public-key envelopes.
//!
//! Protocol payloads (up to the 5,480-byte program catalog) exceed any
//! supported RSA modulus, so encryption wraps a fresh symmetric key under the
//! recipient's public key and encrypts the plaintext with a SHA-256 counter
//! keystream. A digest of the plaintext travels inside the encrypted body:
//! decryption with the wrong key, or any single-bit corruption of the
//! ciphertext, surfaces as [`CryptoError::DecryptionFailed`].
//!
//! Envelopes can be padded up to a target wire size so the simulator's byte
//! accounting lines up with the evaluation's reference payload sizes.

use num_bigint::BigUint;
use sha2::{Digest, Sha256};

use super::{CryptoError, PrivateKey, PublicKey, SimRng};
use crate::codec::{CanonicalDecode, CanonicalEncode, CodecError, Decoder, Encoder};

const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    /// Ephemeral symmetric key encrypted as an RSA residue.
    wrapped_key: BigUint,
    /// Keystream-encrypted `plaintext || SHA256(plaintext)`.
    body: Vec<u8>,
    /// Zero padding appended to the encoding to reach a target wire size.
    pad: Vec<u8>,
}

impl Envelope {
    pub fn encrypt(pk: &PublicKey, plaintext: &[u8], rng: &mut SimRng) -> Result<Self, CryptoError> {
        Self::encrypt_to_size(pk, plaintext, rng, 0)
    }

    /// Encrypt and pad so the canonical encoding is exactly `target_size`
    /// bytes. When the minimal envelope is already larger, no padding is
    /// added and the envelope keeps its natural size.
    pub fn encrypt_to_size(
        pk: &PublicKey,
        plaintext: &[u8],
        rng: &mut SimRng,
        target_size: usize,
    ) -> Result<Self, CryptoError> {
        if plaintext.is_empty() {
            return Err(CryptoError::EmptyPlaintext);
        }
        let key_len = ephemeral_key_len(pk.modulus_len());
        let mut key = vec![0u8; key_len];
        rng.fill(&mut key);
        let wrapped_key = BigUint::from_bytes_be(&key).modpow(&pk.e, &pk.n);

        let mut body = Vec::with_capacity(plaintext.len() + DIGEST_LEN);
        body.extend_from_slice(plaintext);
        body.extend_from_slice(&Sha256::digest(plaintext));
        apply_keystream(&key, &mut body);

        let mut env = Self {
            wrapped_key,
            body,
            pad: Vec::new(),
        };
        let min_len = env.encoded_len();
        if target_size > min_len {
            env.pad = vec![0u8; target_size - min_len];
        }
        Ok(env)
    }

    pub fn decrypt(&self, sk: &PrivateKey) -> Result<Vec<u8>, CryptoError> {
        if self.wrapped_key >= sk.n || self.body.len() < DIGEST_LEN {
            return Err(CryptoError::DecryptionFailed);
        }
        let key_len = ephemeral_key_len(sk.modulus_len());
        let key_int = self.wrapped_key.modpow(&sk.d, &sk.n);
        let raw = key_int.to_bytes_be();
        if raw.len() > key_len {
            return Err(CryptoError::DecryptionFailed);
        }
        let mut key = vec![0u8; key_len - raw.len()];
        key.extend_from_slice(&raw);

        let mut body = self.body.clone();
        apply_keystream(&key, &mut body);
        let (plaintext, digest) = body.split_at(body.len() - DIGEST_LEN);
        if Sha256::digest(plaintext).as_slice() != digest {
            return Err(CryptoError::DecryptionFailed);
        }
        Ok(plaintext.to_vec())
    }

    /// Flip one bit of the ciphertext body in place (adversary tampering).
    pub fn corrupt_body_bit(&mut self, bit_index: usize) {
        let i = bit_index % (self.body.len() * 8);
        self.body[i / 8] ^= 1 << (i % 8);
    }
}

/// Ephemeral keys are sized one byte under the modulus so the wrapped integer
/// is always a valid residue; capped at 32 bytes for the larger moduli.
fn ephemeral_key_len(modulus_len: usize) -> usize {
    (modulus_len - 1).min(32)
}

fn apply_keystream(key: &[u8], data: &mut [u8]) {
    let mut counter = 0u64;
    let mut offset = 0;
    while offset < data.len() {
        let block = Sha256::new()
            .chain_update(b"lwipsm-stream")
            .chain_update(key)
            .chain_update(counter.to_be_bytes())
            .finalize();
        for (d, k) in data[offset..].iter_mut().zip(block.iter()) {
            *d ^= k;
        }
        offset += block.len();
        counter += 1;
    }
}

impl CanonicalEncode for Envelope {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.put_biguint(&self.wrapped_key);
        enc.put_bytes(&self.body);
        enc.put_bytes(&self.pad);
    }
}

impl CanonicalDecode for Envelope {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let wrapped_key = dec.take_biguint()?;
        let body = dec.take_bytes()?.to_vec();
        let pad = dec.take_bytes()?.to_vec();
        Ok(Self {
            wrapped_key,
            body,
            pad,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keygen;

    fn setup() -> (crate::crypto::KeyPair, SimRng) {
        let mut rng = SimRng::seed_from_u64(1001);
        let kp = keygen(512, &mut rng).unwrap();
        (kp, rng)
    }

    #[test]
    fn round_trip_single_byte() {
        let (kp, mut rng) = setup();
        let env = Envelope::encrypt(&kp.public, &[0x42], &mut rng).unwrap();
        assert_eq!(env.decrypt(&kp.private).unwrap(), vec![0x42]);
    }

    #[test]
    fn round_trip_large_catalog_payload() {
        let (kp, mut rng) = setup();
        let mut plaintext = vec![0u8; 5480];
        rng.fill(&mut plaintext);
        let env = Envelope::encrypt(&kp.public, &plaintext, &mut rng).unwrap();
        assert_eq!(env.decrypt(&kp.private).unwrap(), plaintext);
    }

    #[test]
    fn empty_plaintext_rejected() {
        let (kp, mut rng) = setup();
        assert!(matches!(
            Envelope::encrypt(&kp.public, &[], &mut rng),
            Err(CryptoError::EmptyPlaintext)
        ));
    }

    #[test]
    fn wrong_key_fails() {
        let (kp, mut rng) = setup();
        let other = keygen(512, &mut rng).unwrap();
        let env = Envelope::encrypt(&kp.public, b"secret reading", &mut rng).unwrap();
        assert!(matches!(
            env.decrypt(&other.private),
            Err(CryptoError::DecryptionFailed)
        ));
    }

    #[test]
    fn corrupted_body_fails() {
        let (kp, mut rng) = setup();
        let mut env = Envelope::encrypt(&kp.public, b"secret reading", &mut rng).unwrap();
        env.corrupt_body_bit(17);
        assert!(matches!(
            env.decrypt(&kp.private),
            Err(CryptoError::DecryptionFailed)
        ));
    }

    #[test]
    fn pads_to_target_size() {
        let (kp, mut rng) = setup();
        let env = Envelope::encrypt_to_size(&kp.public, b"short", &mut rng, 512).unwrap();
        assert_eq!(env.encoded_len(), 512);
        assert_eq!(env.decrypt(&kp.private).unwrap(), b"short");
        // target below minimum size keeps the natural size
        let env = Envelope::encrypt_to_size(&kp.public, b"short", &mut rng, 8).unwrap();
        assert!(env.encoded_len() > 8);
    }

    #[test]
    fn encoding_round_trips() {
        let (kp, mut rng) = setup();
        let env = Envelope::encrypt_to_size(&kp.public, b"payload", &mut rng, 256).unwrap();
        let bytes = env.encode();
        let back = Envelope::decode(&bytes).unwrap();
        assert_eq!(back, env);
        assert_eq!(back.decrypt(&kp.private).unwrap(), b"payload");
    }
}
