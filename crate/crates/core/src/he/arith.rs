// SPDX-License-Identifier: Apache-2.0

//! Random big integers and probabilistic primality.

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::Rng;

const MILLER_RABIN_ROUNDS: usize = 40;

/// Uniform sample in `[0, bound)`. `bound` must be nonzero.
pub fn random_below<R: Rng + ?Sized>(bound: &BigUint, rng: &mut R) -> BigUint {
    assert!(!bound.is_zero(), "empty sampling range");
    let bits = bound.bits();
    loop {
        let candidate = random_bits(bits, rng);
        if &candidate < bound {
            return candidate;
        }
    }
}

/// Uniform sample in `[low, high)`.
pub fn random_range<R: Rng + ?Sized>(low: &BigUint, high: &BigUint, rng: &mut R) -> BigUint {
    assert!(low < high, "empty sampling range");
    low + random_below(&(high - low), rng)
}

/// Uniform integer with at most `bits` bits.
pub fn random_bits<R: Rng + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    let bytes = bits.div_ceil(8) as usize;
    let mut buf = vec![0u8; bytes];
    rng.fill(buf.as_mut_slice());
    let excess = (bytes as u64 * 8 - bits) as u32;
    if excess > 0 {
        buf[0] &= 0xFF >> excess;
    }
    BigUint::from_bytes_be(&buf)
}

fn small_primes() -> &'static [u32] {
    use std::sync::OnceLock;
    static PRIMES: OnceLock<Vec<u32>> = OnceLock::new();
    PRIMES.get_or_init(|| {
        const LIMIT: usize = 2000;
        let mut sieve = vec![true; LIMIT];
        sieve[0] = false;
        sieve[1] = false;
        for i in 2..LIMIT {
            if sieve[i] {
                let mut j = i * i;
                while j < LIMIT {
                    sieve[j] = false;
                    j += i;
                }
            }
        }
        (0..LIMIT as u32).filter(|&i| sieve[i as usize]).collect()
    })
}

/// Miller–Rabin with random bases drawn from `rng`.
pub fn is_probable_prime<R: Rng + ?Sized>(n: &BigUint, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    for &p in small_primes() {
        let p = BigUint::from(p);
        if n == &p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }

    let n_minus_one = n - 1u32;
    let s = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> s;
    'witness: for _ in 0..MILLER_RABIN_ROUNDS {
        let a = random_range(&two, &n_minus_one, rng);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_one {
            continue;
        }
        for _ in 1..s {
            x = (&x * &x) % n;
            if x == n_minus_one {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// A random prime of exactly `bits` bits whose two top bits are set, so the
/// product of two such primes has exactly `2 * bits` bits.
pub fn random_prime<R: Rng + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    assert!(bits >= 8, "prime too small");
    let top = (BigUint::one() << (bits - 1)) | (BigUint::one() << (bits - 2));
    loop {
        let mut candidate = random_bits(bits, rng) | &top;
        if candidate.is_even() {
            candidate += 1u32;
        }
        // Walk forward over odd numbers; restart if we leave the bit range.
        for _ in 0..(20 * bits) {
            if candidate.bits() != bits {
                break;
            }
            if is_probable_prime(&candidate, rng) {
                return candidate;
            }
            candidate += 2u32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn classifies_small_numbers() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let primes: Vec<u32> = (0..200)
            .filter(|&n| is_probable_prime(&BigUint::from(n), &mut rng))
            .collect();
        let expected: Vec<u32> = (0..200u32)
            .filter(|&n| n >= 2 && (2..n).all(|d| n % d != 0))
            .collect();
        assert_eq!(primes, expected);
    }

    #[test]
    fn rejects_carmichael_numbers() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for n in [561u64, 41041, 825265, 321197185, 5394826801] {
            assert!(!is_probable_prime(&BigUint::from(n), &mut rng), "{n}");
        }
    }

    #[test]
    fn accepts_known_large_prime() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        // 2^127 - 1
        let m127 = (BigUint::one() << 127u32) - 1u32;
        assert!(is_probable_prime(&m127, &mut rng));
        assert!(!is_probable_prime(&(&m127 + 2u32), &mut rng));
    }

    #[test]
    fn random_prime_has_requested_width() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for bits in [32u64, 64, 100] {
            let p = random_prime(bits, &mut rng);
            assert_eq!(p.bits(), bits);
        }
    }

    #[test]
    fn random_below_stays_in_range() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let bound = BigUint::from(1000u32);
        for _ in 0..500 {
            assert!(random_below(&bound, &mut rng) < bound);
        }
    }
}
