// SPDX-License-Identifier: Apache-2.0

//! Paillier additively homomorphic encryption over fixed-point reals.
//!
//! The generator is fixed to `g = n + 1`, so `g^m mod n² = 1 + m·n` and an
//! encryption is `(1 + m·n) · r^n mod n²`. Plaintexts are [`EncodedNumber`]s:
//! integers mod `n` carrying a base-16 exponent. The bottom third of `[0, n)`
//! holds non-negative values, the top third holds negatives, and the middle
//! third is reserved so that overflow is detected at decryption instead of
//! wrapping silently.
//!
//! All key material and ciphertexts have a canonical big-endian encoding;
//! a ciphertext carries the SHA-256 fingerprint of its public key's encoding so
//! that mixing keys is an error rather than garbage.

pub mod arith;
mod encoding;

use std::cmp::Ordering;
use std::fmt;

use num_bigint::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};

pub use encoding::{
    batch_exponent, exact_exponent, f64_to_scaled, scaled_to_f64, EncodedNumber, ENCODING_BASE,
};
use encoding::{fits, scale_up};

pub const DEFAULT_KEY_BITS: u32 = 2048;
pub const MIN_KEY_BITS: u32 = 64;
pub const DEFAULT_EXPONENT: i32 = -40;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HeError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("overflow: {0}")]
    Overflow(String),
    #[error("ciphertext or plaintext belongs to a different public key")]
    WrongKey,
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

pub type Result<T, E = HeError> = std::result::Result<T, E>;

pub type Fingerprint = [u8; 32];

#[derive(Clone, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    g: BigUint,
    nn: BigUint,
    key_bits: u32,
    fingerprint: Fingerprint,
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PublicKey")
            .field("key_bits", &self.key_bits)
            .field("fingerprint", &hex::encode(&self.fingerprint[..8]))
            .finish()
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct PrivateKey {
    p: BigUint,
    q: BigUint,
    lambda: BigUint,
    mu: BigUint,
    public: PublicKey,
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PrivateKey")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Ciphertext {
    raw: BigUint,
    exponent: i32,
    key_fingerprint: Fingerprint,
}

/// Generates a keypair whose modulus has exactly `key_bits` bits.
/// Deterministic in `seed`.
pub fn keygen(key_bits: u32, seed: u64) -> Result<(PublicKey, PrivateKey)> {
    if key_bits < MIN_KEY_BITS {
        return Err(HeError::InvalidParameter(format!(
            "key_bits must be at least {MIN_KEY_BITS}, got {key_bits}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let p_bits = u64::from(key_bits / 2);
    let q_bits = u64::from(key_bits) - p_bits;
    loop {
        let p = arith::random_prime(p_bits, &mut rng);
        let q = arith::random_prime(q_bits, &mut rng);
        if p == q {
            continue;
        }
        let pair = keypair_from_primes(p, q)?;
        debug_assert_eq!(pair.0.key_bits, key_bits);
        return Ok(pair);
    }
}

/// Builds a keypair from caller-chosen primes. Intended for tests with
/// hand-checkable moduli such as `p = 5, q = 7`.
pub fn keypair_from_primes(p: BigUint, q: BigUint) -> Result<(PublicKey, PrivateKey)> {
    if p == q {
        return Err(HeError::InvalidParameter("primes must be distinct".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    for prime in [&p, &q] {
        if !arith::is_probable_prime(prime, &mut rng) {
            return Err(HeError::InvalidParameter(format!("{prime} is not prime")));
        }
    }
    let n = &p * &q;
    let one = BigUint::one();
    let phi = (&p - &one) * (&q - &one);
    if !n.gcd(&phi).is_one() {
        return Err(HeError::InvalidParameter(
            "gcd(pq, (p-1)(q-1)) must be 1".into(),
        ));
    }
    let lambda = (&p - &one).lcm(&(&q - &one));
    // With g = n + 1, L(g^λ mod n²) = λ mod n.
    let mu = (&lambda % &n)
        .modinv(&n)
        .ok_or_else(|| HeError::InvalidParameter("λ is not invertible mod n".into()))?;
    let public = PublicKey::from_modulus(n)?;
    Ok((
        public.clone(),
        PrivateKey {
            p,
            q,
            lambda,
            mu,
            public,
        },
    ))
}

impl PublicKey {
    fn from_modulus(n: BigUint) -> Result<Self> {
        if n.bits() < 4 {
            return Err(HeError::InvalidParameter("modulus too small".into()));
        }
        let key_bits = u32::try_from(n.bits())
            .map_err(|_| HeError::InvalidParameter("modulus too large".into()))?;
        let g = &n + 1u32;
        let nn = &n * &n;
        let mut key = Self {
            n,
            g,
            nn,
            key_bits,
            fingerprint: [0; 32],
        };
        key.fingerprint = Sha256::digest(key.to_bytes()).into();
        Ok(key)
    }

    pub fn modulus(&self) -> &BigUint {
        &self.n
    }

    pub fn generator(&self) -> &BigUint {
        &self.g
    }

    pub fn key_bits(&self) -> u32 {
        self.key_bits
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    /// `key_bits` (4 bytes), then `n` and `g`, each length-prefixed.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.into_bytes()
    }

    pub fn write(&self, w: &mut Writer) {
        w.put_u32(self.key_bits).put_biguint(&self.n).put_biguint(&self.g);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let at = r.position();
        let key_bits = r.get_u32()?;
        let n = r.get_biguint()?;
        let g = r.get_biguint()?;
        if g != &n + 1u32 {
            return Err(DecodeError::new(at, "generator must equal modulus + 1"));
        }
        let key = Self::from_modulus(n).map_err(|e| DecodeError::new(at, e.to_string()))?;
        if key.key_bits != key_bits {
            return Err(DecodeError::new(at, "key_bits does not match modulus"));
        }
        Ok(key)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let key = Self::read(&mut r)?;
        r.finish()?;
        Ok(key)
    }

    // ---- encoding ----------------------------------------------------------

    /// Encodes a signed integer mantissa at `exponent`.
    pub fn encode_int(&self, m: &BigInt, exponent: i32) -> Result<EncodedNumber> {
        if !fits(m, &self.n) {
            return Err(HeError::Overflow(format!(
                "mantissa with {} bits exceeds a third of the {}-bit modulus",
                m.bits(),
                self.key_bits
            )));
        }
        let mantissa = if m.sign() == Sign::Minus {
            &self.n - m.magnitude()
        } else {
            m.magnitude().clone()
        };
        Ok(EncodedNumber { mantissa, exponent })
    }

    /// Encodes `x` at exactly `exponent`, rounding to the nearest multiple of
    /// `16^exponent`.
    pub fn encode(&self, x: f64, exponent: i32) -> Result<EncodedNumber> {
        if !x.is_finite() {
            return Err(HeError::InvalidParameter(format!("cannot encode {x}")));
        }
        self.encode_int(&f64_to_scaled(x, exponent), exponent)
    }

    /// Encodes `x` at the largest exponent that represents it exactly, but no
    /// lower than `min_exponent`. Keeps plaintext scalars short.
    pub fn encode_exact(&self, x: f64, min_exponent: i32) -> Result<EncodedNumber> {
        let e = exact_exponent(x).map_or(min_exponent, |e| e.max(min_exponent));
        self.encode(x, e)
    }

    /// Interprets a mantissa in `[0, n)` as a signed integer.
    pub fn signed_mantissa(&self, e: &EncodedNumber) -> Result<BigInt> {
        let m = &e.mantissa;
        if m >= &self.n {
            return Err(HeError::Overflow("mantissa not reduced mod n".into()));
        }
        let three_m = m * 3u32;
        if three_m < self.n {
            Ok(BigInt::from(m.clone()))
        } else if three_m > &self.n * 2u32 {
            Ok(-BigInt::from(&self.n - m))
        } else {
            Err(HeError::Overflow(
                "mantissa lies in the reserved middle third of the modulus".into(),
            ))
        }
    }

    pub fn decode(&self, e: &EncodedNumber) -> Result<f64> {
        Ok(scaled_to_f64(&self.signed_mantissa(e)?, e.exponent))
    }

    // ---- encryption --------------------------------------------------------

    fn random_unit<R: Rng + ?Sized>(&self, rng: &mut R) -> BigUint {
        loop {
            let r = arith::random_below(&self.n, rng);
            if !r.is_zero() && r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }

    pub fn encrypt<R: Rng + ?Sized>(&self, value: &EncodedNumber, rng: &mut R) -> Result<Ciphertext> {
        let r = self.random_unit(rng);
        self.encrypt_with_randomness(value, &r)
    }

    /// Encryption with caller-supplied randomness `r ∈ Z*_n`.
    pub fn encrypt_with_randomness(&self, value: &EncodedNumber, r: &BigUint) -> Result<Ciphertext> {
        if value.mantissa >= self.n {
            return Err(HeError::Overflow(
                "plaintext mantissa must be below the modulus".into(),
            ));
        }
        if r.is_zero() || r >= &self.n {
            return Err(HeError::InvalidParameter("randomness must lie in [1, n)".into()));
        }
        let gm = (&value.mantissa * &self.n + 1u32) % &self.nn;
        let rn = r.modpow(&self.n, &self.nn);
        Ok(Ciphertext {
            raw: (gm * rn) % &self.nn,
            exponent: value.exponent,
            key_fingerprint: self.fingerprint,
        })
    }

    pub fn encrypt_f64<R: Rng + ?Sized>(&self, x: f64, exponent: i32, rng: &mut R) -> Result<Ciphertext> {
        self.encrypt(&self.encode(x, exponent)?, rng)
    }

    // ---- homomorphic operations ------------------------------------------

    fn check(&self, c: &Ciphertext) -> Result<()> {
        if c.key_fingerprint != self.fingerprint {
            return Err(HeError::WrongKey);
        }
        Ok(())
    }

    /// `c^k mod n²` for a signed `k`; negative powers go through one inversion.
    fn pow_signed(&self, raw: &BigUint, k: &BigInt) -> Result<BigUint> {
        match k.sign() {
            Sign::NoSign => Ok(BigUint::one()),
            Sign::Plus => Ok(raw.modpow(k.magnitude(), &self.nn)),
            Sign::Minus => {
                let inv = raw
                    .modinv(&self.nn)
                    .ok_or_else(|| HeError::InvalidParameter("ciphertext not invertible".into()))?;
                Ok(inv.modpow(k.magnitude(), &self.nn))
            }
        }
    }

    /// Lowers the exponent of `c` to `exponent` without changing its value.
    pub fn rescale(&self, c: &Ciphertext, exponent: i32) -> Result<Ciphertext> {
        self.check(c)?;
        match exponent.cmp(&c.exponent) {
            Ordering::Equal => Ok(c.clone()),
            Ordering::Greater => Err(HeError::InvalidParameter(format!(
                "cannot raise exponent from {} to {exponent} under encryption",
                c.exponent
            ))),
            Ordering::Less => {
                let shift = (c.exponent - exponent) as u32;
                let factor = scale_up(&BigInt::one(), shift);
                Ok(Ciphertext {
                    raw: c.raw.modpow(factor.magnitude(), &self.nn),
                    exponent,
                    key_fingerprint: c.key_fingerprint,
                })
            }
        }
    }

    /// Brings both ciphertexts to the smaller of their exponents.
    pub fn align_exponents(&self, a: &Ciphertext, b: &Ciphertext) -> Result<(Ciphertext, Ciphertext)> {
        let target = a.exponent.min(b.exponent);
        Ok((self.rescale(a, target)?, self.rescale(b, target)?))
    }

    pub fn add_cipher(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        self.check(a)?;
        self.check(b)?;
        let (a, b) = if a.exponent == b.exponent {
            (a.clone(), b.clone())
        } else {
            self.align_exponents(a, b)?
        };
        Ok(Ciphertext {
            raw: (&a.raw * &b.raw) % &self.nn,
            exponent: a.exponent,
            key_fingerprint: self.fingerprint,
        })
    }

    /// Sum of a non-empty batch.
    pub fn sum(&self, items: &[Ciphertext]) -> Result<Ciphertext> {
        let (first, rest) = items
            .split_first()
            .ok_or_else(|| HeError::InvalidParameter("cannot sum an empty batch".into()))?;
        rest.iter().try_fold(first.clone(), |acc, c| self.add_cipher(&acc, c))
    }

    /// Ciphertext times plaintext; exponents add.
    pub fn mul_plain(&self, c: &Ciphertext, k: &EncodedNumber) -> Result<Ciphertext> {
        self.check(c)?;
        let k_signed = self.signed_mantissa(k)?;
        let exponent = checked_exponent(c.exponent, k.exponent)?;
        Ok(Ciphertext {
            raw: self.pow_signed(&c.raw, &k_signed)?,
            exponent,
            key_fingerprint: self.fingerprint,
        })
    }

    /// Ciphertext times a plain integer; the exponent is unchanged.
    pub fn mul_int(&self, c: &Ciphertext, k: &BigInt) -> Result<Ciphertext> {
        self.check(c)?;
        if !fits(k, &self.n) {
            return Err(HeError::Overflow("integer multiplier too large".into()));
        }
        Ok(Ciphertext {
            raw: self.pow_signed(&c.raw, k)?,
            exponent: c.exponent,
            key_fingerprint: self.fingerprint,
        })
    }

    /// `Σ cts[i] · scalars[i]`. All scalars must share one exponent, and so
    /// must all ciphertexts. Positive and negative terms are accumulated
    /// separately so the whole sum needs a single modular inversion.
    pub fn dot(&self, cts: &[Ciphertext], scalars: &[EncodedNumber]) -> Result<Ciphertext> {
        if cts.len() != scalars.len() || cts.is_empty() {
            return Err(HeError::InvalidParameter(format!(
                "dot product over {} ciphertexts and {} scalars",
                cts.len(),
                scalars.len()
            )));
        }
        let c_exp = cts[0].exponent;
        let k_exp = scalars[0].exponent;
        let mut positive = BigUint::one();
        let mut negative = BigUint::one();
        for (c, k) in cts.iter().zip(scalars) {
            self.check(c)?;
            if c.exponent != c_exp || k.exponent != k_exp {
                return Err(HeError::InvalidParameter(
                    "dot product operands must share exponents".into(),
                ));
            }
            let k = self.signed_mantissa(k)?;
            match k.sign() {
                Sign::NoSign => {}
                Sign::Plus => positive = (positive * c.raw.modpow(k.magnitude(), &self.nn)) % &self.nn,
                Sign::Minus => negative = (negative * c.raw.modpow(k.magnitude(), &self.nn)) % &self.nn,
            }
        }
        let raw = if negative.is_one() {
            positive
        } else {
            let inv = negative
                .modinv(&self.nn)
                .ok_or_else(|| HeError::InvalidParameter("ciphertext not invertible".into()))?;
            (positive * inv) % &self.nn
        };
        Ok(Ciphertext {
            raw,
            exponent: checked_exponent(c_exp, k_exp)?,
            key_fingerprint: self.fingerprint,
        })
    }
}

fn checked_exponent(a: i32, b: i32) -> Result<i32> {
    a.checked_add(b)
        .ok_or_else(|| HeError::Overflow("exponent out of range".into()))
}

impl PrivateKey {
    pub fn public_key(&self) -> &PublicKey {
        &self.public
    }

    pub fn prime_p(&self) -> &BigUint {
        &self.p
    }

    pub fn prime_q(&self) -> &BigUint {
        &self.q
    }

    pub fn decrypt_exponent(&self) -> &BigUint {
        &self.lambda
    }

    pub fn decrypt_scaler(&self) -> &BigUint {
        &self.mu
    }

    /// Returns the plaintext mantissa in `[0, n)`; values in the reserved
    /// middle third are reported as overflow.
    pub fn decrypt(&self, c: &Ciphertext) -> Result<EncodedNumber> {
        let pk = &self.public;
        pk.check(c)?;
        if c.raw >= pk.nn {
            return Err(HeError::InvalidParameter("ciphertext not reduced mod n²".into()));
        }
        let u = c.raw.modpow(&self.lambda, &pk.nn);
        let l = (u - 1u32) / &pk.n;
        let mantissa = (l * &self.mu) % &pk.n;
        let out = EncodedNumber {
            mantissa,
            exponent: c.exponent,
        };
        pk.signed_mantissa(&out)?;
        Ok(out)
    }

    pub fn decrypt_f64(&self, c: &Ciphertext) -> Result<f64> {
        self.public.decode(&self.decrypt(c)?)
    }

    /// `p` and `q`, each length-prefixed.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_biguint(&self.p).put_biguint(&self.q);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let p = r.get_biguint()?;
        let q = r.get_biguint()?;
        r.finish()?;
        Ok(keypair_from_primes(p, q)?.1)
    }
}

impl Ciphertext {
    pub fn raw(&self) -> &BigUint {
        &self.raw
    }

    pub fn exponent(&self) -> i32 {
        self.exponent
    }

    pub fn key_fingerprint(&self) -> &Fingerprint {
        &self.key_fingerprint
    }

    /// Raw value (length-prefixed), exponent (signed 4 bytes), fingerprint
    /// (32 bytes).
    pub fn write(&self, w: &mut Writer) {
        w.put_biguint(&self.raw)
            .put_i32(self.exponent)
            .put_raw(&self.key_fingerprint);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let raw = r.get_biguint()?;
        let exponent = r.get_i32()?;
        let key_fingerprint = r.get_raw::<32>()?;
        Ok(Self {
            raw,
            exponent,
            key_fingerprint,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let c = Self::read(&mut r)?;
        r.finish()?;
        Ok(c)
    }
}

/// Count-prefixed batch of ciphertexts.
pub fn encode_ciphertexts(items: &[Ciphertext]) -> Vec<u8> {
    let mut w = Writer::new();
    w.put_count(items.len());
    for c in items {
        c.write(&mut w);
    }
    w.into_bytes()
}

pub fn decode_ciphertexts(bytes: &[u8]) -> Result<Vec<Ciphertext>, DecodeError> {
    let mut r = Reader::new(bytes);
    let count = r.get_count(40)?;
    let out = (0..count)
        .map(|_| Ciphertext::read(&mut r))
        .collect::<Result<Vec<_>, _>>()?;
    r.finish()?;
    Ok(out)
}

/// Count-prefixed batch of encoded plaintexts.
pub fn encode_numbers(items: &[EncodedNumber]) -> Vec<u8> {
    let mut w = Writer::new();
    w.put_count(items.len());
    for e in items {
        e.write(&mut w);
    }
    w.into_bytes()
}

pub fn decode_numbers(bytes: &[u8]) -> Result<Vec<EncodedNumber>, DecodeError> {
    let mut r = Reader::new(bytes);
    let count = r.get_count(8)?;
    let out = (0..count)
        .map(|_| EncodedNumber::read(&mut r))
        .collect::<Result<Vec<_>, _>>()?;
    r.finish()?;
    Ok(out)
}
