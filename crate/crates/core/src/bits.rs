//! Bit-packed ±1 tensors.
//!
//! Bit 1 encodes +1, bit 0 encodes −1. The channel axis is packed innermost,
//! `words_per_pixel = ceil(c / 64)` words per (n, y, x) location. Padding bits
//! above `c` in the last word are always 0.

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Shape};

pub const WORD_BITS: usize = 64;

#[inline]
pub fn words_for(c: usize) -> usize {
    c.div_ceil(WORD_BITS)
}

/// Mask of the valid bits in the last word of a `c`-bit row.
#[inline]
pub fn tail_mask(c: usize) -> u64 {
    match c % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensor {
    shape: Shape,
    words_per_pixel: usize,
    words: Vec<u64>,
    pad_bits: usize,
    /// Bit used for spatial zero-padding taps: `0 − threshold ≥ 0`.
    border: bool,
}

impl BitTensor {
    /// All bits −1 (0).
    pub fn zeros(shape: Shape) -> Self {
        let wpp = words_for(shape.c);
        BitTensor {
            shape,
            words_per_pixel: wpp,
            words: vec![0; shape.n * shape.h * shape.w * wpp],
            pad_bits: wpp * WORD_BITS - shape.c,
            border: true,
        }
    }

    /// Builds from raw words; rejects set padding bits.
    pub fn from_words(shape: Shape, words: Vec<u64>, border: bool) -> Result<Self> {
        let wpp = words_for(shape.c);
        if words.len() != shape.n * shape.h * shape.w * wpp {
            return Err(Error::Shape(format!("{} words do not fit shape {shape}", words.len())));
        }
        if wpp > 0 {
            let mask = tail_mask(shape.c);
            if words.chunks(wpp).any(|px| px[wpp - 1] & !mask != 0) {
                return Err(Error::Invalid("padding bits must be zero".into()));
            }
        }
        Ok(BitTensor { shape, words_per_pixel: wpp, words, pad_bits: wpp * WORD_BITS - shape.c, border })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn words_per_pixel(&self) -> usize {
        self.words_per_pixel
    }

    pub fn pad_bits(&self) -> usize {
        self.pad_bits
    }

    pub fn border(&self) -> bool {
        self.border
    }

    pub fn with_border(mut self, border: bool) -> Self {
        self.border = border;
        self
    }

    #[inline]
    pub fn pixel(&self, n: usize, y: usize, x: usize) -> &[u64] {
        let s = self.shape;
        let off = ((n * s.h + y) * s.w + x) * self.words_per_pixel;
        &self.words[off..off + self.words_per_pixel]
    }

    #[inline]
    pub fn bit(&self, n: usize, c: usize, y: usize, x: usize) -> bool {
        let px = self.pixel(n, y, x);
        px[c / WORD_BITS] >> (c % WORD_BITS) & 1 == 1
    }

    pub fn set_bit(&mut self, n: usize, c: usize, y: usize, x: usize, v: bool) {
        let s = self.shape;
        assert!(c < s.c, "channel {c} out of range");
        let off = ((n * s.h + y) * s.w + x) * self.words_per_pixel + c / WORD_BITS;
        let m = 1u64 << (c % WORD_BITS);
        if v {
            self.words[off] |= m;
        } else {
            self.words[off] &= !m;
        }
    }

    /// Number of +1 bits.
    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    /// Channels `[start, start + len)` repacked word-aligned.
    pub fn extract_channels(&self, start: usize, len: usize) -> Result<BitTensor> {
        let s = self.shape;
        if start + len > s.c {
            return Err(Error::Shape(format!("channel range {start}+{len} out of {}", s.c)));
        }
        let mut out = BitTensor::zeros(s.with_c(len)).with_border(self.border);
        let owpp = out.words_per_pixel;
        for p in 0..s.n * s.h * s.w {
            let src = &self.words[p * self.words_per_pixel..(p + 1) * self.words_per_pixel];
            let dst = &mut out.words[p * owpp..(p + 1) * owpp];
            for (j, d) in dst.iter_mut().enumerate() {
                let bit = start + j * WORD_BITS;
                let (wi, sh) = (bit / WORD_BITS, bit % WORD_BITS);
                let mut v = src[wi] >> sh;
                if sh != 0 && wi + 1 < src.len() {
                    v |= src[wi + 1] << (WORD_BITS - sh);
                }
                let valid = (len - j * WORD_BITS).min(WORD_BITS);
                *d = if valid == WORD_BITS { v } else { v & ((1u64 << valid) - 1) };
            }
        }
        Ok(out)
    }
}

/// Packs `x − threshold ≥ 0` into bits.
pub fn pack(x: &DenseTensor, threshold: f32) -> Result<BitTensor> {
    if !threshold.is_finite() || !x.is_finite() {
        return Err(Error::NonFinite);
    }
    let s = x.shape();
    let mut out = BitTensor::zeros(s).with_border(0.0 - threshold >= 0.0);
    let wpp = out.words_per_pixel;
    let plane = s.plane();
    let data = x.data();
    for n in 0..s.n {
        let item = &data[n * s.item()..(n + 1) * s.item()];
        for c in 0..s.c {
            let chan = &item[c * plane..(c + 1) * plane];
            let (wi, m) = (c / WORD_BITS, 1u64 << (c % WORD_BITS));
            for (p, &v) in chan.iter().enumerate() {
                if v - threshold >= 0.0 {
                    out.words[(n * plane + p) * wpp + wi] |= m;
                }
            }
        }
    }
    Ok(out)
}

pub fn unpack(b: &BitTensor) -> DenseTensor {
    let s = b.shape();
    DenseTensor::from_fn(s, |n, c, y, x| if b.bit(n, c, y, x) { 1.0 } else { -1.0 })
}

/// Σ aᵢ·bᵢ over ±1 semantics for the first `n_valid` bits.
pub fn xnor_popcount_dot(a: &[u64], b: &[u64], n_valid: usize) -> Result<i64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("word spans differ: {} vs {}", a.len(), b.len())));
    }
    if n_valid > a.len() * WORD_BITS {
        return Err(Error::Shape(format!("{n_valid} valid bits exceed {} words", a.len())));
    }
    let full = n_valid / WORD_BITS;
    let mut agree: i64 = 0;
    for i in 0..full {
        agree += (!(a[i] ^ b[i])).count_ones() as i64;
    }
    let rem = n_valid % WORD_BITS;
    if rem != 0 {
        let m = (1u64 << rem) - 1;
        agree += (!(a[full] ^ b[full]) & m).count_ones() as i64;
    }
    Ok(2 * agree - n_valid as i64)
}

/// Same as [`xnor_popcount_dot`] for spans whose padding bits are zero in
/// both operands, where XOR needs no masking.
#[inline(always)]
pub fn dot_unmasked(a: &[u64], b: &[u64], n_valid: i32) -> i32 {
    let mut diff = 0u32;
    for (x, y) in a.iter().zip(b) {
        diff += (x ^ y).count_ones();
    }
    n_valid - 2 * diff as i32
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(vals: &[f32]) -> DenseTensor {
        DenseTensor::from_vec(Shape::new(1, vals.len(), 1, 1), vals.to_vec()).unwrap()
    }

    fn bits_of(b: &BitTensor) -> Vec<bool> {
        (0..b.shape().c).map(|c| b.bit(0, c, 0, 0)).collect()
    }

    #[test]
    fn pack_sign_zero_is_plus_one() {
        let b = pack(&row(&[0.3, -0.1, 0.0]), 0.0).unwrap();
        assert_eq!(bits_of(&b), [true, false, true]);
    }

    #[test]
    fn pack_at_threshold_is_plus_one() {
        let b = pack(&row(&[0.3, -0.1]), 0.3).unwrap();
        assert_eq!(bits_of(&b), [true, false]);
    }

    #[test]
    fn pack_rejects_nan() {
        let err = pack(&row(&[0.3, f32::NAN]), 0.0).unwrap_err();
        assert_eq!(err.to_string(), "non-finite input");
    }

    #[test]
    fn round_trip_matches_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Shape::new(2, 7, 5, 5);
        let x = DenseTensor::from_fn(s, |_, _, _, _| rng.gen_range(-1.0..1.0));
        let u = unpack(&pack(&x, 0.0).unwrap());
        for (a, b) in x.data().iter().zip(u.data()) {
            assert_eq!(*b, if *a >= 0.0 { 1.0 } else { -1.0 });
        }
    }

    #[test]
    fn unpack_values() {
        let b = pack(&row(&[1.0, -1.0, 1.0]), 0.0).unwrap();
        assert_eq!(unpack(&b).data(), &[1.0, -1.0, 1.0]);
        let z = BitTensor::from_words(Shape::new(1, 3, 1, 1), vec![0], true).unwrap();
        assert_eq!(unpack(&z).data(), &[-1.0, -1.0, -1.0]);
    }

    #[test]
    fn pack_of_unpack_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = Shape::new(1, 70, 3, 2);
        let x = DenseTensor::from_fn(s, |_, _, _, _| rng.gen_range(-1.0..1.0));
        let b = pack(&x, 0.0).unwrap();
        assert_eq!(pack(&unpack(&b), 0.0).unwrap(), b);
    }

    #[test]
    fn corrupt_padding_rejected() {
        assert!(BitTensor::from_words(Shape::new(1, 3, 1, 1), vec![0b1000], true).is_err());
        assert!(BitTensor::from_words(Shape::new(1, 64, 1, 1), vec![u64::MAX], true).is_ok());
    }

    #[test]
    fn dot_small_examples() {
        let a = pack(&row(&[1.0, 1.0, -1.0]), 0.0).unwrap();
        let b = pack(&row(&[1.0, -1.0, -1.0]), 0.0).unwrap();
        assert_eq!(xnor_popcount_dot(a.words(), b.words(), 3).unwrap(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DenseTensor::from_fn(Shape::new(1, 70, 1, 1), |_, _, _, _| rng.gen_range(-1.0..1.0));
        let p = pack(&x, 0.0).unwrap();
        assert_eq!(xnor_popcount_dot(p.words(), p.words(), 70).unwrap(), 70);
        assert!(xnor_popcount_dot(&[0, 0], &[0], 3).is_err());
    }

    #[test]
    fn extract_channels_crosses_words() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DenseTensor::from_fn(Shape::new(2, 150, 2, 3), |_, _, _, _| rng.gen_range(-1.0..1.0));
        let b = pack(&x, 0.0).unwrap();
        for &(start, len) in &[(0, 150), (3, 70), (63, 2), (64, 64), (100, 50), (149, 1)] {
            let e = b.extract_channels(start, len).unwrap();
            let direct = pack(&x.slice_channels(start, len).unwrap(), 0.0).unwrap();
            assert_eq!(e, direct, "range {start}+{len}");
        }
    }
}
