// SPDX-License-Identifier: Apache-2.0

//! Fixed-point bridge between `f64` and integer plaintexts.
//!
//! A real `x` at exponent `e` is represented by the integer `round(x / 16^e)`.
//! Conversions in both directions are exact or correctly rounded; no
//! intermediate floating-point arithmetic is used.

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{Signed, ToPrimitive, Zero};

use crate::codec::{DecodeError, Reader, Writer};

/// Every exponent is a power of this base.
pub const ENCODING_BASE: u32 = 16;
pub(crate) const LOG2_BASE: i64 = 4;

/// A plaintext integer in `[0, modulus)` together with its base-16 exponent.
///
/// Negative values live in the top third of the modulus range; see
/// [`PublicKey::signed_mantissa`](super::PublicKey::signed_mantissa).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EncodedNumber {
    pub(crate) mantissa: BigUint,
    pub(crate) exponent: i32,
}

impl EncodedNumber {
    pub fn mantissa(&self) -> &BigUint {
        &self.mantissa
    }

    pub fn exponent(&self) -> i32 {
        self.exponent
    }

    pub fn write(&self, w: &mut Writer) {
        w.put_biguint(&self.mantissa).put_i32(self.exponent);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let mantissa = r.get_biguint()?;
        let exponent = r.get_i32()?;
        Ok(Self { mantissa, exponent })
    }
}

/// Splits a finite `f64` into `(signed integer, power of two)`, exactly.
fn split_f64(x: f64) -> (i128, i64) {
    let bits = x.to_bits();
    let negative = bits >> 63 == 1;
    let biased = ((bits >> 52) & 0x7FF) as i64;
    let fraction = bits & ((1u64 << 52) - 1);
    let (mantissa, exp2) = if biased == 0 {
        (fraction, -1074)
    } else {
        (fraction | (1u64 << 52), biased - 1075)
    };
    let m = mantissa as i128;
    (if negative { -m } else { m }, exp2)
}

/// The largest base-16 exponent at which `x` is exactly representable, or
/// `None` for zero.
pub fn exact_exponent(x: f64) -> Option<i32> {
    assert!(x.is_finite(), "cannot encode non-finite value {x}");
    if x == 0.0 {
        return None;
    }
    let (m, exp2) = split_f64(x);
    let exp2 = exp2 + m.trailing_zeros() as i64;
    Some(exp2.div_euclid(LOG2_BASE) as i32)
}

/// Largest exponent, clamped from below by `floor`, that represents every
/// value in `values` exactly (values finer than `floor` will round).
pub fn batch_exponent(values: impl IntoIterator<Item = f64>, floor: i32) -> i32 {
    values
        .into_iter()
        .filter_map(exact_exponent)
        .min()
        .map_or(floor, |e| e.max(floor))
}

/// `round(x / 16^exponent)`, ties away from zero.
pub fn f64_to_scaled(x: f64, exponent: i32) -> BigInt {
    assert!(x.is_finite(), "cannot encode non-finite value {x}");
    let (m, exp2) = split_f64(x);
    if m == 0 {
        return BigInt::zero();
    }
    let shift = exp2 - LOG2_BASE * exponent as i64;
    if shift >= 0 {
        BigInt::from(m) << (shift as u64)
    } else {
        let s = (-shift) as u32;
        if s > 60 {
            // |m| < 2^53, so the quotient rounds to zero.
            return BigInt::zero();
        }
        let magnitude = m.unsigned_abs();
        let rounded = (magnitude + (1u128 << (s - 1))) >> s;
        let out = BigInt::from(rounded);
        if m < 0 {
            -out
        } else {
            out
        }
    }
}

/// Multiplies by `2^k` without intermediate overflow or underflow where the
/// final result is representable.
fn ldexp(mut x: f64, mut k: i64) -> f64 {
    let step = |e: i64| f64::from_bits(((e + 1023) as u64) << 52);
    while k > 1000 {
        x *= step(1000);
        k -= 1000;
        if x.is_infinite() {
            return x;
        }
    }
    while k < -1000 {
        x *= step(-1000);
        k += 1000;
        if x == 0.0 {
            return x;
        }
    }
    x * step(k)
}

/// `m · 16^exponent` as the nearest `f64`.
pub fn scaled_to_f64(m: &BigInt, exponent: i32) -> f64 {
    let magnitude = m.magnitude();
    let bits = magnitude.bits();
    if bits == 0 {
        return 0.0;
    }
    let shift = bits.saturating_sub(64);
    let mut top = (magnitude >> shift)
        .to_u64()
        .expect("shifted magnitude fits in 64 bits");
    if shift > 0 && magnitude.trailing_zeros().unwrap_or(0) < shift {
        // Sticky bit: keeps round-to-nearest correct for the discarded tail.
        top |= 1;
    }
    let value = ldexp(top as f64, shift as i64 + LOG2_BASE * exponent as i64);
    if m.sign() == Sign::Minus {
        -value
    } else {
        value
    }
}

/// `m · 16^shift` for `shift ≥ 0`.
pub(crate) fn scale_up(m: &BigInt, shift: u32) -> BigInt {
    m << (LOG2_BASE as u64 * shift as u64)
}

/// True when `|m| · 3 < n`, i.e. `m` is inside the representable signed range.
pub(crate) fn fits(m: &BigInt, n: &BigUint) -> bool {
    m.abs().magnitude() * 3u32 < *n
}
