//! RSA key generation, full-domain-hash signatures, and Chaum blinding.
//!
//! Blind signing operates on `FDH(m)` rather than the raw credential bytes:
//! textbook RSA on raw messages is malleable and would leave verification
//! undefined for arbitrary 32-byte credentials. The blinding factor is kept
//! as `(r, r^-1, r^e)` so that multiplying the hashed credential by `r^e`
//! matches the usual `m * r^e mod n` construction, and unblinding is a single
//! modular multiplication by `r^-1`.

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::One;
use sha2::{Digest, Sha256};

use super::prime::{gen_prime, mod_inverse};
use super::{CryptoError, SimRng};
use crate::codec::{CanonicalDecode, CanonicalEncode, CodecError, Decoder, Encoder};

pub const SUPPORTED_KEY_BITS: [u32; 5] = [128, 256, 512, 1024, 2048];

const RSA_PUBLIC_EXPONENT: u32 = 65537;

/// Stable fingerprint identifying a public key (first 8 bytes of the hash of
/// its canonical encoding). Used to route signature verification through the
/// pre-provisioned key directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId(pub [u8; 8]);

impl KeyId {
    pub fn to_hex(self) -> String {
        hex::encode(self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKey {
    pub e: BigUint,
    pub n: BigUint,
    pub bits: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrivateKey {
    pub d: BigUint,
    pub n: BigUint,
    pub bits: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

impl PublicKey {
    pub fn key_id(&self) -> KeyId {
        let mut enc = Encoder::new();
        enc.put_biguint(&self.e);
        enc.put_biguint(&self.n);
        let digest = Sha256::digest(enc.finish());
        KeyId(digest[..8].try_into().unwrap())
    }

    /// Modulus length in whole bytes.
    pub fn modulus_len(&self) -> usize {
        (self.bits as usize) / 8
    }
}

impl PrivateKey {
    pub fn modulus_len(&self) -> usize {
        (self.bits as usize) / 8
    }
}

impl CanonicalEncode for PublicKey {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.put_biguint(&self.e);
        enc.put_biguint(&self.n);
        enc.put_uint(u64::from(self.bits));
    }
}

impl CanonicalDecode for PublicKey {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let e = dec.take_biguint()?;
        let n = dec.take_biguint()?;
        let bits = u32::try_from(dec.take_uint()?).map_err(|_| CodecError::IntegerOverflow)?;
        Ok(Self { e, n, bits })
    }
}

/// Generate an RSA key pair with a modulus of exactly `bits` significant
/// bits. Only the benchmark-axis sizes are accepted; anything below 2048 bits
/// is insecure and exists purely to reproduce the evaluation sweep.
pub fn keygen(bits: u32, rng: &mut SimRng) -> Result<KeyPair, CryptoError> {
    if !SUPPORTED_KEY_BITS.contains(&bits) {
        return Err(CryptoError::UnsupportedKeySize(bits));
    }
    let half = u64::from(bits) / 2;
    let e = BigUint::from(RSA_PUBLIC_EXPONENT);
    loop {
        let p = gen_prime(half, rng);
        let q = gen_prime(half, rng);
        if p == q {
            continue;
        }
        let n = &p * &q;
        debug_assert_eq!(n.bits(), u64::from(bits));
        let phi = (&p - 1u8) * (&q - 1u8);
        let Some(d) = mod_inverse(&e, &phi) else {
            continue;
        };
        return Ok(KeyPair {
            public: PublicKey {
                e: e.clone(),
                n: n.clone(),
                bits,
            },
            private: PrivateKey { d, n, bits },
        });
    }
}

/// Full-domain hash of `message` into Z_n: SHA-256 in counter mode expanded
/// to eight bytes past the modulus length, reduced mod n. Deterministic in
/// (message, n).
pub fn fdh(message: &[u8], n: &BigUint) -> BigUint {
    let target = (n.bits() as usize + 7) / 8 + 8;
    let mut out = Vec::with_capacity(target + 32);
    let mut counter = 0u32;
    while out.len() < target {
        let mut h = Sha256::new();
        h.update(b"lwipsm-fdh");
        h.update(counter.to_be_bytes());
        h.update(message);
        out.extend_from_slice(&h.finalize());
        counter += 1;
    }
    BigUint::from_bytes_be(&out[..target]) % n
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signature {
    pub value: BigUint,
    pub signer: KeyId,
}

impl CanonicalEncode for Signature {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.put_biguint(&self.value);
        enc.put_bytes(&self.signer.0);
    }
}

impl CanonicalDecode for Signature {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let value = dec.take_biguint()?;
        let signer = KeyId(dec.take_array()?);
        Ok(Self { value, signer })
    }
}

/// Blinding state held by the meter between Phase II and Phase IV.
#[derive(Debug, Clone)]
pub struct BlindingFactor {
    r: BigUint,
    r_inv: BigUint,
    r_e: BigUint,
    n: BigUint,
}

impl BlindingFactor {
    pub fn r(&self) -> &BigUint {
        &self.r
    }
    pub fn blinding_multiplier(&self) -> &BigUint {
        &self.r_e
    }
}

/// Blind a 32-byte credential for the holder of `pk`. Returns the blinded
/// residue to send and the factor to keep. `r` is resampled until coprime to
/// the modulus, so the coprimality precondition never surfaces to callers.
pub fn blind(message: &[u8; 32], pk: &PublicKey, rng: &mut SimRng) -> (BigUint, BlindingFactor) {
    let two = BigUint::from(2u8);
    let (r, r_inv) = loop {
        let r = rng.gen_biguint_range(&two, &pk.n);
        if r.gcd(&pk.n).is_one() {
            if let Some(inv) = mod_inverse(&r, &pk.n) {
                break (r, inv);
            }
        }
    };
    let r_e = r.modpow(&pk.e, &pk.n);
    let blinded = (fdh(message, &pk.n) * &r_e) % &pk.n;
    (
        blinded,
        BlindingFactor {
            r,
            r_inv,
            r_e,
            n: pk.n.clone(),
        },
    )
}

/// Sign a blinded residue. The signer sees only the integer; the structure
/// makes it impossible to pass the underlying credential here.
pub fn sign_blinded(blinded: &BigUint, sk: &PrivateKey) -> Result<Signature, CryptoError> {
    if blinded >= &sk.n {
        return Err(CryptoError::ValueOutOfRange);
    }
    Ok(Signature {
        value: blinded.modpow(&sk.d, &sk.n),
        signer: signer_id(sk),
    })
}

/// Remove the blinding factor; the result verifies as an ordinary signature
/// over the original message. A wrong factor is not detectable here, it only
/// shows up as a later verification failure.
pub fn unblind(blind_sig: &Signature, bf: &BlindingFactor) -> Signature {
    Signature {
        value: (&blind_sig.value * &bf.r_inv) % &bf.n,
        signer: blind_sig.signer,
    }
}

pub fn sign(sk: &PrivateKey, message: &[u8]) -> Signature {
    Signature {
        value: fdh(message, &sk.n).modpow(&sk.d, &sk.n),
        signer: signer_id(sk),
    }
}

pub fn verify(pk: &PublicKey, message: &[u8], sig: &Signature) -> bool {
    if sig.value >= pk.n {
        return false;
    }
    sig.value.modpow(&pk.e, &pk.n) == fdh(message, &pk.n)
}

fn signer_id(sk: &PrivateKey) -> KeyId {
    // The signer id is the fingerprint of the matching public key; recompute
    // it from (e, n). Private keys generated here always pair with e = 65537.
    PublicKey {
        e: BigUint::from(RSA_PUBLIC_EXPONENT),
        n: sk.n.clone(),
        bits: sk.bits,
    }
    .key_id()
}
