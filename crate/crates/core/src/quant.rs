//! Block-level linear quantization codecs.
//!
//! Weights are grouped into fixed-size blocks; each block stores its min and
//! max as FP16 plus a tightly bit-packed buffer of integer codes. Integer
//! widths 2..8 map a block onto `0..2^k-1`; the 3.5-bit scheme (`Q3H`) maps
//! onto digits `0..10` and packs two adjacent digits into one 7-bit value as
//! `hi * 11 + lo`, so a 64-weight block costs 28 bytes of codes.

use half::f16;
use thiserror::Error;

/// Codec identifier. `Fp16` is raw half-precision storage, not a block codec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeKind {
    Fp16,
    Q8,
    Q6,
    Q5,
    Q4,
    /// 3.5-bit pair-packed scheme.
    Q3H,
    Q3,
    Q2,
}

impl SchemeKind {
    pub const ALL_BLOCK_CODECS: [SchemeKind; 7] = [
        SchemeKind::Q8,
        SchemeKind::Q6,
        SchemeKind::Q5,
        SchemeKind::Q4,
        SchemeKind::Q3H,
        SchemeKind::Q3,
        SchemeKind::Q2,
    ];

    /// Bits per code, doubled so that 3.5 stays exact.
    pub fn bits_x2(self) -> u32 {
        match self {
            SchemeKind::Fp16 => 32,
            SchemeKind::Q8 => 16,
            SchemeKind::Q6 => 12,
            SchemeKind::Q5 => 10,
            SchemeKind::Q4 => 8,
            SchemeKind::Q3H => 7,
            SchemeKind::Q3 => 6,
            SchemeKind::Q2 => 4,
        }
    }

    pub fn bits_per_code(self) -> f64 {
        self.bits_x2() as f64 / 2.0
    }

    /// Largest admissible per-weight code (the denominator of Eq. 2).
    pub fn max_code(self) -> u32 {
        match self {
            SchemeKind::Fp16 => 0,
            SchemeKind::Q3H => 10,
            k => (1u32 << (k.bits_x2() / 2)) - 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Fp16 => "fp16",
            SchemeKind::Q8 => "q8",
            SchemeKind::Q6 => "q6",
            SchemeKind::Q5 => "q5",
            SchemeKind::Q4 => "q4",
            SchemeKind::Q3H => "q3h",
            SchemeKind::Q3 => "q3",
            SchemeKind::Q2 => "q2",
        }
    }

    pub fn parse(name: &str) -> Option<SchemeKind> {
        match name.to_ascii_lowercase().as_str() {
            "fp16" => Some(SchemeKind::Fp16),
            "q8" => Some(SchemeKind::Q8),
            "q6" => Some(SchemeKind::Q6),
            "q5" => Some(SchemeKind::Q5),
            "q4" => Some(SchemeKind::Q4),
            "q3h" => Some(SchemeKind::Q3H),
            "q3" => Some(SchemeKind::Q3),
            "q2" => Some(SchemeKind::Q2),
            _ => None,
        }
    }
}

/// A block codec: kind plus block size (32 or 64 weights per block).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantScheme {
    pub kind: SchemeKind,
    pub block_size: usize,
}

impl QuantScheme {
    pub fn new(kind: SchemeKind, block_size: usize) -> Result<QuantScheme, QuantError> {
        if kind == SchemeKind::Fp16 {
            return Err(QuantError::NotABlockCodec);
        }
        if block_size != 32 && block_size != 64 {
            return Err(QuantError::BadBlockSize(block_size));
        }
        // Q3H packs digit pairs, so an odd block size cannot be represented.
        if kind == SchemeKind::Q3H && !block_size.is_multiple_of(2) {
            return Err(QuantError::OddLength(block_size));
        }
        Ok(QuantScheme { kind, block_size })
    }

    /// Average in-memory bits per weight including the two FP16 extrema.
    pub fn bits_per_weight(&self) -> f64 {
        (self.block_size as f64 * self.kind.bits_per_code() + 32.0) / self.block_size as f64
    }

    /// Serialized size in bytes of a block holding `len` weights.
    pub fn block_bytes(&self, len: usize) -> usize {
        packed_len(self.kind, len) + 4
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("fp16 is raw storage, not a block codec")]
    NotABlockCodec,
    #[error("block size must be 32 or 64, got {0}")]
    BadBlockSize(usize),
    #[error("q3h blocks must have even length, got {0}")]
    OddLength(usize),
    #[error("block length {got} does not match scheme block size {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("weight at index {0} is not finite")]
    NonFinite(usize),
    #[error("3.5-bit digit {0} out of range 0..=10")]
    DigitOutOfRange(u32),
    #[error("packed 7-bit value {0} out of range 0..=120")]
    PackedOutOfRange(u32),
    #[error("code {code} exceeds maximum {max} for scheme")]
    CodeOutOfRange { code: u32, max: u32 },
    #[error("packed buffer has {got} bytes, expected {want}")]
    BufferSize { got: usize, want: usize },
    #[error("non-zero padding bits in packed buffer")]
    DirtyPadding,
}

/// One quantized block: FP16 extrema plus tightly packed codes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantBlock {
    pub scheme: QuantScheme,
    pub lo: f16,
    pub hi: f16,
    len: usize,
    codes: Vec<u8>,
}

/// Round-trip error statistics for a block.
#[derive(Debug, Clone)]
pub struct BlockErrorStats {
    pub per_weight_abs_error: Vec<f64>,
    pub avg_error: f64,
}

/// Combine two 3.5-bit digits into one 7-bit value.
pub fn pack_pair_35(q_even: u32, q_odd: u32) -> Result<u32, QuantError> {
    if q_even > 10 {
        return Err(QuantError::DigitOutOfRange(q_even));
    }
    if q_odd > 10 {
        return Err(QuantError::DigitOutOfRange(q_odd));
    }
    Ok(q_even * 11 + q_odd)
}

/// Split a packed 7-bit value back into its two digits.
pub fn unpack_pair_35(v: u32) -> Result<(u32, u32), QuantError> {
    if v > 120 {
        return Err(QuantError::PackedOutOfRange(v));
    }
    Ok((v / 11, v % 11))
}

/// Quantize a full-size block. Length must equal the scheme's block size.
pub fn quantize_block(weights: &[f32], scheme: QuantScheme) -> Result<QuantBlock, QuantError> {
    if weights.len() != scheme.block_size {
        return Err(QuantError::LengthMismatch {
            got: weights.len(),
            want: scheme.block_size,
        });
    }
    quantize_slice(weights, scheme)
}

/// Quantize a slice of any length >= 1 (even for `Q3H`) against `scheme`.
///
/// The relaxed length exists for short trailing blocks and for error-table
/// analysis on blocks smaller than the scheme's nominal size.
pub fn quantize_slice(weights: &[f32], scheme: QuantScheme) -> Result<QuantBlock, QuantError> {
    if weights.is_empty() {
        return Err(QuantError::LengthMismatch {
            got: 0,
            want: scheme.block_size,
        });
    }
    if scheme.kind == SchemeKind::Q3H && !weights.len().is_multiple_of(2) {
        return Err(QuantError::OddLength(weights.len()));
    }
    if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
        return Err(QuantError::NonFinite(i));
    }

    let digits = quantize_digits(weights, scheme.kind);
    let (lo, hi) = block_extrema(weights);
    Ok(QuantBlock {
        scheme,
        lo,
        hi,
        len: weights.len(),
        codes: pack_codes(scheme.kind, &digits),
    })
}

/// Dequantize back to f32, one value per original weight.
pub fn dequantize_block(block: &QuantBlock) -> Result<Vec<f32>, QuantError> {
    let digits = block.unpack_digits()?;
    Ok(dequantize_digits(
        &digits,
        block.scheme.kind,
        block.lo,
        block.hi,
    ))
}

/// Quantize, dequantize, and report per-weight absolute errors.
pub fn block_error_stats(
    weights: &[f32],
    scheme: QuantScheme,
) -> Result<BlockErrorStats, QuantError> {
    let block = quantize_slice(weights, scheme)?;
    let restored = dequantize_block(&block)?;
    let per_weight_abs_error: Vec<f64> = weights
        .iter()
        .zip(&restored)
        .map(|(w, r)| (*w as f64 - *r as f64).abs())
        .collect();
    let avg_error = per_weight_abs_error.iter().sum::<f64>() / per_weight_abs_error.len() as f64;
    Ok(BlockErrorStats {
        per_weight_abs_error,
        avg_error,
    })
}

impl QuantBlock {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Unpack the per-weight digits, validating every code.
    pub fn unpack_digits(&self) -> Result<Vec<u32>, QuantError> {
        unpack_codes(self.scheme.kind, &self.codes, self.len)
    }

    /// Serialize as `lo` + `hi` (FP16, little-endian) followed by the packed codes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.codes.len());
        out.extend_from_slice(&self.lo.to_bits().to_le_bytes());
        out.extend_from_slice(&self.hi.to_bits().to_le_bytes());
        out.extend_from_slice(&self.codes);
        out
    }

    pub fn from_bytes(
        scheme: QuantScheme,
        len: usize,
        bytes: &[u8],
    ) -> Result<QuantBlock, QuantError> {
        let want = scheme.block_bytes(len);
        if bytes.len() != want {
            return Err(QuantError::BufferSize {
                got: bytes.len(),
                want,
            });
        }
        let lo = f16::from_bits(u16::from_le_bytes([bytes[0], bytes[1]]));
        let hi = f16::from_bits(u16::from_le_bytes([bytes[2], bytes[3]]));
        let block = QuantBlock {
            scheme,
            lo,
            hi,
            len,
            codes: bytes[4..].to_vec(),
        };
        // Reject corrupted buffers up front.
        block.unpack_digits()?;
        Ok(block)
    }
}

/// Min and max of the block, rounded to FP16 as stored.
fn block_extrema(weights: &[f32]) -> (f16, f16) {
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &w in weights {
        min = min.min(w);
        max = max.max(w);
    }
    (f16::from_f32(min), f16::from_f32(max))
}

/// Ties round away from zero (3.5 -> 4, -3.5 -> -4), which is what
/// `f64::round` does.
fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Per-weight digits `round((w - lo) / (hi - lo) * max_code)`, computed
/// against the FP16-rounded extrema so the encoder and decoder agree on
/// the reconstruction grid.
fn quantize_digits(weights: &[f32], kind: SchemeKind) -> Vec<u32> {
    let (lo16, hi16) = block_extrema(weights);
    let lo = lo16.to_f64();
    let hi = hi16.to_f64();
    let max_code = kind.max_code();
    let range = hi - lo;
    weights
        .iter()
        .map(|&w| {
            if range <= 0.0 {
                // Degenerate block: all weights dequantize to lo exactly.
                return 0;
            }
            let t = (w as f64 - lo) / range * max_code as f64;
            let q = round_half_away(t);
            (q.max(0.0) as u32).min(max_code)
        })
        .collect()
}

/// Reconstruction `w' = q / max_code * (hi - lo) + lo`.
fn dequantize_digits(digits: &[u32], kind: SchemeKind, lo16: f16, hi16: f16) -> Vec<f32> {
    let lo = lo16.to_f64();
    let hi = hi16.to_f64();
    let max_code = kind.max_code() as f64;
    digits
        .iter()
        .map(|&q| {
            let w = if hi > lo {
                q as f64 / max_code * (hi - lo) + lo
            } else {
                lo
            };
            w as f32
        })
        .collect()
}

fn packed_len(kind: SchemeKind, len: usize) -> usize {
    (len * kind.bits_x2() as usize).div_ceil(16)
}

/// Append `bits` bits of `value` to the buffer, little-endian bit order.
fn push_bits(buf: &mut Vec<u8>, bit_pos: &mut usize, value: u32, bits: u32) {
    for b in 0..bits {
        let byte = *bit_pos / 8;
        if byte == buf.len() {
            buf.push(0);
        }
        if value >> b & 1 == 1 {
            buf[byte] |= 1 << (*bit_pos % 8);
        }
        *bit_pos += 1;
    }
}

fn read_bits(buf: &[u8], bit_pos: &mut usize, bits: u32) -> u32 {
    let mut value = 0u32;
    for b in 0..bits {
        let byte = *bit_pos / 8;
        if buf[byte] >> (*bit_pos % 8) & 1 == 1 {
            value |= 1 << b;
        }
        *bit_pos += 1;
    }
    value
}

fn pack_codes(kind: SchemeKind, digits: &[u32]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(packed_len(kind, digits.len()));
    let mut pos = 0usize;
    if kind == SchemeKind::Q3H {
        for pair in digits.chunks_exact(2) {
            let v = pack_pair_35(pair[0], pair[1]).expect("digits bounded by quantizer");
            push_bits(&mut buf, &mut pos, v, 7);
        }
    } else {
        let bits = kind.bits_x2() / 2;
        for &q in digits {
            push_bits(&mut buf, &mut pos, q, bits);
        }
    }
    buf.resize(packed_len(kind, digits.len()), 0);
    buf
}

fn unpack_codes(kind: SchemeKind, buf: &[u8], len: usize) -> Result<Vec<u32>, QuantError> {
    let want = packed_len(kind, len);
    if buf.len() != want {
        return Err(QuantError::BufferSize {
            got: buf.len(),
            want,
        });
    }
    let mut digits = Vec::with_capacity(len);
    let mut pos = 0usize;
    if kind == SchemeKind::Q3H {
        for _ in 0..len / 2 {
            let v = read_bits(buf, &mut pos, 7);
            let (a, b) = unpack_pair_35(v)?;
            digits.push(a);
            digits.push(b);
        }
    } else {
        let bits = kind.bits_x2() / 2;
        let max = kind.max_code();
        for _ in 0..len {
            let v = read_bits(buf, &mut pos, bits);
            if v > max {
                return Err(QuantError::CodeOutOfRange { code: v, max });
            }
            digits.push(v);
        }
    }
    // Trailing bits past the last code must be zero.
    while pos < buf.len() * 8 {
        if buf[pos / 8] >> (pos % 8) & 1 == 1 {
            return Err(QuantError::DirtyPadding);
        }
        pos += 1;
    }
    Ok(digits)
}
