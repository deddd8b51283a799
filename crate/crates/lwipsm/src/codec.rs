//! Canonical binary encoding shared by every signed, MACed, or encrypted
//! structure in the protocol.
//!
//! The format is deterministic length-prefixed binary: every field is written
//! as a 4-byte big-endian byte count followed by the field payload, in
//! declaration order. Integers are encoded as minimal-length big-endian
//! magnitudes (zero encodes as an empty payload), floating-point values as
//! their 8-byte IEEE-754 big-endian bit pattern. Two encoders fed the same
//! value must produce identical bytes; decoders reject non-minimal integers
//! and trailing garbage so the encoding is bijective.

use num_bigint::BigUint;
use num_rational::Ratio;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("input truncated: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("trailing bytes after decode: {0}")]
    TrailingBytes(usize),
    #[error("integer not minimally encoded")]
    NonMinimalInteger,
    #[error("integer payload exceeds 8 bytes")]
    IntegerOverflow,
    #[error("boolean byte must be 0 or 1")]
    InvalidBool,
    #[error("field payload has wrong length (expected {expected}, got {got})")]
    WrongLength { expected: usize, got: usize },
    #[error("invalid utf-8 in string field")]
    InvalidUtf8,
    #[error("invalid value: {0}")]
    InvalidValue(&'static str),
}

/// Exact non-negative rational used for money and reward arithmetic.
pub type Money = Ratio<i64>;

#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self { buf: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn put_bytes(&mut self, b: &[u8]) -> &mut Self {
        self.buf
            .extend_from_slice(&(u32::try_from(b.len()).expect("field too large")).to_be_bytes());
        self.buf.extend_from_slice(b);
        self
    }

    /// Minimal big-endian magnitude; zero is the empty payload.
    pub fn put_uint(&mut self, v: u64) -> &mut Self {
        let be = v.to_be_bytes();
        let first = be.iter().position(|&b| b != 0).unwrap_or(8);
        self.put_bytes(&be[first..])
    }

    pub fn put_biguint(&mut self, v: &BigUint) -> &mut Self {
        if v == &BigUint::default() {
            self.put_bytes(&[])
        } else {
            self.put_bytes(&v.to_bytes_be())
        }
    }

    pub fn put_f64(&mut self, v: f64) -> &mut Self {
        self.put_bytes(&v.to_bits().to_be_bytes())
    }

    pub fn put_bool(&mut self, v: bool) -> &mut Self {
        self.put_bytes(&[u8::from(v)])
    }

    pub fn put_str(&mut self, s: &str) -> &mut Self {
        self.put_bytes(s.as_bytes())
    }

    /// Non-negative rational as reduced numerator/denominator pair.
    pub fn put_money(&mut self, v: &Money) -> &mut Self {
        let v = v.reduced();
        assert!(*v.numer() >= 0 && *v.denom() > 0, "money must be non-negative");
        self.put_uint(*v.numer() as u64);
        self.put_uint(*v.denom() as u64)
    }
}

#[derive(Debug)]
pub struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn expect_end(&self) -> Result<(), CodecError> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(CodecError::TrailingBytes(self.remaining()))
        }
    }

    pub fn take_bytes(&mut self) -> Result<&'a [u8], CodecError> {
        if self.remaining() < 4 {
            return Err(CodecError::Truncated {
                needed: 4 - self.remaining(),
            });
        }
        let len = u32::from_be_bytes(self.data[self.pos..self.pos + 4].try_into().unwrap()) as usize;
        self.pos += 4;
        if self.remaining() < len {
            return Err(CodecError::Truncated {
                needed: len - self.remaining(),
            });
        }
        let out = &self.data[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    pub fn take_array<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        let b = self.take_bytes()?;
        b.try_into().map_err(|_| CodecError::WrongLength {
            expected: N,
            got: b.len(),
        })
    }

    pub fn take_uint(&mut self) -> Result<u64, CodecError> {
        let b = self.take_bytes()?;
        if b.len() > 8 {
            return Err(CodecError::IntegerOverflow);
        }
        if !b.is_empty() && b[0] == 0 {
            return Err(CodecError::NonMinimalInteger);
        }
        let mut out = 0u64;
        for &byte in b {
            out = (out << 8) | u64::from(byte);
        }
        Ok(out)
    }

    pub fn take_biguint(&mut self) -> Result<BigUint, CodecError> {
        let b = self.take_bytes()?;
        if !b.is_empty() && b[0] == 0 {
            return Err(CodecError::NonMinimalInteger);
        }
        Ok(BigUint::from_bytes_be(b))
    }

    pub fn take_f64(&mut self) -> Result<f64, CodecError> {
        let b: [u8; 8] = self.take_array()?;
        Ok(f64::from_bits(u64::from_be_bytes(b)))
    }

    pub fn take_bool(&mut self) -> Result<bool, CodecError> {
        let b = self.take_bytes()?;
        match b {
            [0] => Ok(false),
            [1] => Ok(true),
            _ => Err(CodecError::InvalidBool),
        }
    }

    pub fn take_str(&mut self) -> Result<&'a str, CodecError> {
        std::str::from_utf8(self.take_bytes()?).map_err(|_| CodecError::InvalidUtf8)
    }

    pub fn take_money(&mut self) -> Result<Money, CodecError> {
        let numer = self.take_uint()?;
        let denom = self.take_uint()?;
        if denom == 0 {
            return Err(CodecError::InvalidValue("zero denominator"));
        }
        let numer = i64::try_from(numer).map_err(|_| CodecError::IntegerOverflow)?;
        let denom = i64::try_from(denom).map_err(|_| CodecError::IntegerOverflow)?;
        Ok(Money::new(numer, denom))
    }
}

/// Structures that serialize to the canonical wire encoding.
pub trait CanonicalEncode {
    fn encode_into(&self, enc: &mut Encoder);

    fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode_into(&mut enc);
        enc.finish()
    }

    fn encoded_len(&self) -> usize {
        self.encode().len()
    }
}

pub trait CanonicalDecode: Sized {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError>;

    fn decode(data: &[u8]) -> Result<Self, CodecError> {
        let mut dec = Decoder::new(data);
        let out = Self::decode_from(&mut dec)?;
        dec.expect_end()?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uint_roundtrip_is_minimal() {
        for v in [0u64, 1, 255, 256, 65535, u64::MAX] {
            let mut enc = Encoder::new();
            enc.put_uint(v);
            let bytes = enc.finish();
            let mut dec = Decoder::new(&bytes);
            assert_eq!(dec.take_uint().unwrap(), v);
            dec.expect_end().unwrap();
        }
        // zero is the empty payload
        let mut enc = Encoder::new();
        enc.put_uint(0);
        assert_eq!(enc.finish(), vec![0, 0, 0, 0]);
    }

    #[test]
    fn rejects_non_minimal_integers() {
        // 5-byte prefix declaring a 1-byte payload of 0x00
        let bytes = [0, 0, 0, 1, 0];
        let mut dec = Decoder::new(&bytes);
        assert_eq!(dec.take_uint(), Err(CodecError::NonMinimalInteger));
    }

    #[test]
    fn rejects_truncation_and_trailing() {
        let mut enc = Encoder::new();
        enc.put_bytes(b"abc");
        let mut bytes = enc.finish();
        bytes.push(0xff);
        let mut dec = Decoder::new(&bytes);
        dec.take_bytes().unwrap();
        assert!(matches!(dec.expect_end(), Err(CodecError::TrailingBytes(1))));

        let short = &bytes[..5];
        let mut dec = Decoder::new(short);
        assert!(matches!(dec.take_bytes(), Err(CodecError::Truncated { .. })));
    }

    #[test]
    fn money_encoding_reduces() {
        let mut a = Encoder::new();
        a.put_money(&Money::new(2, 4));
        let mut b = Encoder::new();
        b.put_money(&Money::new(1, 2));
        assert_eq!(a.finish(), b.finish());
    }

    #[test]
    fn f64_bit_exact() {
        let v = 0.1f64 + 0.2;
        let mut enc = Encoder::new();
        enc.put_f64(v);
        let bytes = enc.finish();
        let mut dec = Decoder::new(&bytes);
        assert_eq!(dec.take_f64().unwrap().to_bits(), v.to_bits());
    }
}
