//! MSB-first bit packing.

use crate::error::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bits: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the low `n` bits of `value`, most significant first.
    pub fn write(&mut self, value: u64, n: u32) {
        debug_assert!(n <= 64);
        for i in (0..n).rev() {
            self.push_bit((value >> i) & 1 == 1);
        }
    }

    pub fn push_bit(&mut self, bit: bool) {
        let offset = (self.bits % 8) as u32;
        if offset == 0 {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().unwrap() |= 0x80 >> offset;
        }
        self.bits += 1;
    }

    /// Elias-gamma code of `v ≥ 1`: `⌊log₂ v⌋` zeros, then `v` in binary.
    pub fn write_gamma(&mut self, v: u64) {
        assert!(v >= 1, "gamma code needs a positive value");
        let n = 63 - v.leading_zeros();
        self.write(0, n);
        self.write(v, n + 1);
    }

    pub fn bit_len(&self) -> u64 {
        self.bits
    }

    /// Packed bytes, zero-padded to a byte boundary.
    pub fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn read_bit(&mut self) -> Result<bool> {
        let byte = self.bytes.get((self.pos / 8) as usize).ok_or(Error::TruncatedPayload(self.pos as usize))?;
        let bit = byte & (0x80 >> (self.pos % 8)) != 0;
        self.pos += 1;
        Ok(bit)
    }

    pub fn read(&mut self, n: u32) -> Result<u64> {
        let mut v = 0;
        for _ in 0..n {
            v = (v << 1) | self.read_bit()? as u64;
        }
        Ok(v)
    }

    pub fn read_gamma(&mut self) -> Result<u64> {
        let mut zeros = 0;
        while !self.read_bit()? {
            zeros += 1;
            if zeros > 63 {
                return Err(Error::malformed("TLUC payload", "Elias-gamma prefix too long"));
            }
        }
        Ok((1 << zeros) | self.read(zeros)?)
    }

    pub fn position(&self) -> u64 {
        self.pos
    }
}
