// SPDX-License-Identifier: Apache-2.0

//! Big-endian, length-prefixed binary encoding shared by every wire format in
//! the crate.
//!
//! Integers are fixed-width big-endian. Byte strings and big integers carry a
//! 4-byte big-endian length prefix. Reals are IEEE-754 doubles, big-endian.

use num_bigint::BigUint;
use thiserror::Error;

/// A malformed buffer, with the byte offset at which decoding stopped.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("decode error at byte offset {offset}: {reason}")]
pub struct DecodeError {
    pub offset: usize,
    pub reason: String,
}

impl DecodeError {
    pub fn new(offset: usize, reason: impl Into<String>) -> Self {
        Self {
            offset,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Default, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            buf: Vec::with_capacity(capacity),
        }
    }

    pub fn put_u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn put_u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn put_u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn put_i32(&mut self, v: i32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn put_u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn put_u128(&mut self, v: u128) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn put_f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn put_raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }

    /// Panics if `bytes` is longer than `u32::MAX`.
    pub fn put_bytes(&mut self, bytes: &[u8]) -> &mut Self {
        let len = u32::try_from(bytes.len()).expect("byte string longer than u32::MAX");
        self.put_u32(len);
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn put_biguint(&mut self, v: &BigUint) -> &mut Self {
        self.put_bytes(&v.to_bytes_be())
    }

    /// Count prefix for a batch.
    pub fn put_count(&mut self, count: usize) -> &mut Self {
        let count = u32::try_from(count).expect("batch longer than u32::MAX");
        self.put_u32(count)
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug, Clone)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    /// Offset of the next unread byte.
    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < len {
            return Err(DecodeError::new(
                self.pos,
                format!(
                    "truncated {what}: need {len} bytes, {} available",
                    self.remaining()
                ),
            ));
        }
        let out = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], DecodeError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N, what)?);
        Ok(out)
    }

    pub fn get_u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.array::<1>("u8")?[0])
    }

    pub fn get_u16(&mut self) -> Result<u16, DecodeError> {
        self.array("u16").map(u16::from_be_bytes)
    }

    pub fn get_u32(&mut self) -> Result<u32, DecodeError> {
        self.array("u32").map(u32::from_be_bytes)
    }

    pub fn get_i32(&mut self) -> Result<i32, DecodeError> {
        self.array("i32").map(i32::from_be_bytes)
    }

    pub fn get_u64(&mut self) -> Result<u64, DecodeError> {
        self.array("u64").map(u64::from_be_bytes)
    }

    pub fn get_u128(&mut self) -> Result<u128, DecodeError> {
        self.array("u128").map(u128::from_be_bytes)
    }

    pub fn get_f64(&mut self) -> Result<f64, DecodeError> {
        self.array("f64").map(f64::from_be_bytes)
    }

    pub fn get_raw<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        self.array("fixed-width field")
    }

    pub fn get_bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let len = self.get_u32()? as usize;
        self.take(len, "byte string")
    }

    pub fn get_biguint(&mut self) -> Result<BigUint, DecodeError> {
        self.get_bytes().map(BigUint::from_bytes_be)
    }

    /// Reads a batch count and rejects counts that cannot possibly fit in the
    /// remaining buffer, given a lower bound on the per-item size.
    pub fn get_count(&mut self, min_item_size: usize) -> Result<usize, DecodeError> {
        let at = self.pos;
        let count = self.get_u32()? as usize;
        if count.saturating_mul(min_item_size.max(1)) > self.remaining() && min_item_size > 0 {
            return Err(DecodeError::new(
                at,
                format!("batch count {count} exceeds remaining {} bytes", self.remaining()),
            ));
        }
        Ok(count)
    }

    /// Fails unless every byte has been consumed.
    pub fn finish(self) -> Result<(), DecodeError> {
        if self.remaining() != 0 {
            return Err(DecodeError::new(
                self.pos,
                format!("{} trailing bytes", self.remaining()),
            ));
        }
        Ok(())
    }
}

pub fn encode_f64s(values: &[f64]) -> Vec<u8> {
    let mut w = Writer::with_capacity(4 + 8 * values.len());
    w.put_count(values.len());
    for v in values {
        w.put_f64(*v);
    }
    w.into_bytes()
}

pub fn decode_f64s(bytes: &[u8]) -> Result<Vec<f64>, DecodeError> {
    let mut r = Reader::new(bytes);
    let count = r.get_count(8)?;
    let out = (0..count).map(|_| r.get_f64()).collect::<Result<Vec<_>, _>>()?;
    r.finish()?;
    Ok(out)
}
