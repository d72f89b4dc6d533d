//! Bit-exact packing of b-bit codes into 32-bit little-endian words, plus the
//! storage-size arithmetic behind the size-reduction claims.
//!
//! Layout (normative for the on-disk base format):
//! - codes are packed row-major, LSB-first within each word;
//! - every row starts at a fresh word (≤31 bits of padding per row), so a
//!   code never straddles a row boundary and kernels can index rows in O(1);
//! - within a row, codes may straddle word boundaries (3-bit codes do);
//! - unused trailing bits in a row's final word are zero.

use crate::error::{Error, Result};
use crate::quant::CodeMatrix;

/// Frozen codes of an n×m matrix packed into 32-bit words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedIntMatrix {
    pub n: usize,
    pub m: usize,
    pub bits: u32,
    /// `n * words_per_row` words, row-major.
    pub words: Vec<u32>,
}

impl PackedIntMatrix {
    /// Words holding one row: ⌈m·b/32⌉.
    pub fn words_per_row(&self) -> usize {
        words_per_row(self.m, self.bits)
    }

    /// Extract the code at (i, j) without unpacking the whole matrix.
    #[inline]
    pub fn code(&self, i: usize, j: usize) -> u8 {
        let wpr = self.words_per_row();
        let bitpos = j * self.bits as usize;
        let word = i * wpr + bitpos / 32;
        let off = (bitpos % 32) as u32;
        let lo = self.words[word] as u64;
        let hi = if off + self.bits > 32 { self.words[word + 1] as u64 } else { 0 };
        (((lo | hi << 32) >> off) & ((1u64 << self.bits) - 1)) as u8
    }
}

/// ⌈m·b/32⌉.
pub fn words_per_row(m: usize, bits: u32) -> usize {
    (m * bits as usize + 31) / 32
}

/// Pack codes into the row-aligned LSB-first layout. Rejects any code outside
/// `[0, 2^bits − 1]` (with its indices) rather than silently truncating.
pub fn pack(q: &CodeMatrix) -> Result<PackedIntMatrix> {
    let qmax = ((1u32 << q.bits) - 1) as u8;
    let wpr = words_per_row(q.m, q.bits);
    let mut words = Vec::with_capacity(q.n * wpr);
    for i in 0..q.n {
        let mut acc: u64 = 0;
        let mut nbits: u32 = 0;
        let row_start = words.len();
        for j in 0..q.m {
            let code = q.q[i * q.m + j];
            if code > qmax {
                return Err(Error::Integrity(format!(
                    "code {code} at ({i}, {j}) exceeds {qmax} for {} bits",
                    q.bits
                )));
            }
            acc |= (code as u64) << nbits;
            nbits += q.bits;
            while nbits >= 32 {
                words.push(acc as u32);
                acc >>= 32;
                nbits -= 32;
            }
        }
        if nbits > 0 {
            words.push(acc as u32);
        }
        debug_assert_eq!(words.len() - row_start, wpr);
    }
    Ok(PackedIntMatrix { n: q.n, m: q.m, bits: q.bits, words })
}

/// Exact inverse of [`pack`]. Verifies the word count and that every padding
/// bit is zero, so corrupted or truncated buffers are rejected.
pub fn unpack(p: &PackedIntMatrix) -> Result<CodeMatrix> {
    let wpr = words_per_row(p.m, p.bits);
    if p.words.len() != p.n * wpr {
        return Err(Error::Integrity(format!(
            "word count {} does not match {}x{} at {} bits (expected {})",
            p.words.len(),
            p.n,
            p.m,
            p.bits,
            p.n * wpr
        )));
    }
    let used_in_last = p.m * p.bits as usize - 32 * (wpr - 1);
    let mut q = vec![0u8; p.n * p.m];
    for i in 0..p.n {
        for j in 0..p.m {
            q[i * p.m + j] = p.code(i, j);
        }
        if used_in_last < 32 {
            let last = p.words[i * wpr + wpr - 1];
            if last >> used_in_last != 0 {
                return Err(Error::Integrity(format!(
                    "nonzero padding bits in row {i}"
                )));
            }
        }
    }
    Ok(CodeMatrix { n: p.n, m: p.m, bits: p.bits, q })
}

/// Bytes needed to store one quantized n×m layer: packed codes
/// (4·n·⌈m·b/32⌉) plus one single-precision scale and one 32-bit zero-point
/// per (row, group) (n·⌈m/g⌉·8). `group_cols` is the resolved group width in
/// columns (m for channel-wise).
pub fn packed_weight_bytes(n: usize, m: usize, bits: u32, group_cols: usize) -> u64 {
    let code_bytes = 4 * n as u64 * words_per_row(m, bits) as u64;
    let groups = (m + group_cols - 1) / group_cols;
    code_bytes + n as u64 * groups as u64 * (4 + 4)
}

/// Packed code bytes alone (no scales/zero-points); the numerator of the
/// bytes-moved ratio against a dense baseline.
pub fn packed_code_bytes(n: usize, m: usize, bits: u32) -> u64 {
    4 * n as u64 * words_per_row(m, bits) as u64
}
