//! Probable-prime generation for RSA moduli.

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use std::sync::LazyLock;

use super::SimRng;

const MILLER_RABIN_ROUNDS: usize = 40;

static SMALL_PRIMES: LazyLock<Vec<u64>> = LazyLock::new(|| {
    let limit = 2048usize;
    let mut sieve = vec![true; limit];
    sieve[0] = false;
    sieve[1] = false;
    for i in 2..limit {
        if sieve[i] {
            for j in (i * i..limit).step_by(i) {
                sieve[j] = false;
            }
        }
    }
    (2..limit as u64).filter(|&p| sieve[p as usize]).collect()
});

/// Sample a probable prime with exactly `bits` bits and the top two bits set,
/// so the product of two such primes has exactly `2*bits` bits.
pub fn gen_prime(bits: u64, rng: &mut SimRng) -> BigUint {
    assert!(bits >= 8);
    loop {
        let mut candidate = rng.gen_biguint(bits);
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(bits - 2, true);
        candidate.set_bit(0, true);
        if passes_trial_division(&candidate) && miller_rabin(&candidate, rng) {
            return candidate;
        }
    }
}

fn passes_trial_division(n: &BigUint) -> bool {
    for &p in SMALL_PRIMES.iter() {
        let p_big = BigUint::from(p);
        if n == &p_big {
            return true;
        }
        if (n % p_big).is_zero() {
            return false;
        }
    }
    true
}

fn miller_rabin(n: &BigUint, rng: &mut SimRng) -> bool {
    let one = BigUint::one();
    let two = BigUint::from(2u8);
    let n_minus_1 = n - &one;
    // n-1 = 2^s * d with d odd
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;

    'witness: for _ in 0..MILLER_RABIN_ROUNDS {
        let a = rng.gen_biguint_range(&two, &n_minus_1);
        let mut x = a.modpow(&d, n);
        if x == one || x == n_minus_1 {
            continue;
        }
        for _ in 0..s.saturating_sub(1) {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Modular inverse via extended Euclid; `None` when gcd(a, m) != 1.
pub fn mod_inverse(a: &BigUint, m: &BigUint) -> Option<BigUint> {
    use num_bigint::BigInt;
    let a = BigInt::from(a.clone());
    let m_int = BigInt::from(m.clone());
    let e = a.extended_gcd(&m_int);
    if e.gcd != BigInt::one() {
        return None;
    }
    let mut x = e.x % &m_int;
    if x < BigInt::zero() {
        x += &m_int;
    }
    x.to_biguint()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generates_primes_of_requested_size() {
        let mut rng = SimRng::seed_from_u64(11);
        for bits in [64u64, 128] {
            let p = gen_prime(bits, &mut rng);
            assert_eq!(p.bits(), bits);
            assert!(miller_rabin(&p, &mut rng));
        }
    }

    #[test]
    fn rejects_composites() {
        let mut rng = SimRng::seed_from_u64(1);
        let p = gen_prime(64, &mut rng);
        let q = gen_prime(64, &mut rng);
        assert!(!miller_rabin(&(p * q), &mut rng));
    }

    #[test]
    fn mod_inverse_works() {
        let a = BigUint::from(17u8);
        let m = BigUint::from(3120u32);
        let inv = mod_inverse(&a, &m).unwrap();
        assert_eq!(inv, BigUint::from(2753u32));
        assert!(mod_inverse(&BigUint::from(6u8), &BigUint::from(9u8)).is_none());
    }
}
