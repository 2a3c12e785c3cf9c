//! Bit-packed ±1 tensors and the XNOR-POPCNT convolution kernel.
//!
//! A `PackedBitTensor` stores ±1 values one bit per entry (bit 1 encodes +1,
//! bit 0 encodes −1), row-major and LSB-first within each 64-bit word. Rows
//! are word-aligned so each carries its own validity mask; positions whose
//! mask bit is 0 (word tail past the row's logical width, or padded taps in
//! an im2col row) never contribute to a dot product. With both operands
//! packed, a ±1 dot product reduces to
//! `K_valid − 2·popcount((a XOR w) AND valid_mask)`.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// ±1 tensor packed one bit per entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBitTensor {
    /// Logical shape of the unpacked tensor.
    pub shape: Vec<usize>,
    /// Number of packed rows; each row starts at a fresh word boundary.
    pub rows: usize,
    /// Logical bits per row (including masked-off positions).
    pub row_bits: usize,
    /// Words allocated per row: `ceil(row_bits / 64)`.
    pub words_per_row: usize,
    /// Value bits, `rows * words_per_row` words.
    pub payload: Vec<u64>,
    /// Validity bits, same layout as `payload`.
    pub mask: Vec<u64>,
}

impl PackedBitTensor {
    /// An all-invalid (zeroed) tensor with the given row structure.
    pub fn empty(shape: Vec<usize>, rows: usize, row_bits: usize) -> PackedBitTensor {
        let words_per_row = row_bits.div_ceil(64);
        let n = rows * words_per_row;
        PackedBitTensor { shape, rows, row_bits, words_per_row, payload: vec![0; n], mask: vec![0; n] }
    }

    /// Count of valid bits in row `r`.
    pub fn valid_bits(&self, r: usize) -> u32 {
        let base = r * self.words_per_row;
        self.mask[base..base + self.words_per_row].iter().map(|w| w.count_ones()).sum()
    }

    fn set(&mut self, r: usize, b: usize, one: bool) {
        let w = r * self.words_per_row + b / 64;
        let bit = 1u64 << (b % 64);
        self.mask[w] |= bit;
        if one {
            self.payload[w] |= bit;
        }
    }

    fn get(&self, r: usize, b: usize) -> (bool, bool) {
        let w = r * self.words_per_row + b / 64;
        let bit = 1u64 << (b % 64);
        (self.payload[w] & bit != 0, self.mask[w] & bit != 0)
    }

    /// Bytes occupied by the value payload alone.
    pub fn payload_bytes(&self) -> usize {
        self.payload.len() * 8
    }
}

/// Packs a ±1 tensor row-major, LSB-first. The leading axis becomes the row
/// axis (a 1-D tensor packs as a single row); every position is valid.
pub fn pack_bits(x: &Tensor) -> Result<PackedBitTensor> {
    let rows = if x.shape.len() >= 2 { x.shape[0] } else { 1 };
    let row_bits = if rows == 0 { 0 } else { x.numel() / rows };
    let mut p = PackedBitTensor::empty(x.shape.clone(), rows.max(1), row_bits);
    for (i, &v) in x.data.iter().enumerate() {
        if v != 1.0 && v != -1.0 {
            return Err(Error::invalid("pack_bits", format!("entry {i} is {v}, expected exactly +1 or -1")));
        }
        p.set(i / row_bits.max(1), i % row_bits.max(1), v == 1.0);
    }
    Ok(p)
}

/// Inverse of [`pack_bits`]; requires every position valid.
pub fn unpack(p: &PackedBitTensor) -> Result<Tensor> {
    let mut data = Vec::with_capacity(p.rows * p.row_bits);
    for r in 0..p.rows {
        for b in 0..p.row_bits {
            let (one, valid) = p.get(r, b);
            if !valid {
                return Err(Error::invalid("unpack", format!("row {r} bit {b} is masked off")));
            }
            data.push(if one { 1.0 } else { -1.0 });
        }
    }
    Tensor::from_vec(&p.shape, data)
}

/// ±1 dot product of one row of `a` against one row of `b` over their
/// jointly valid positions.
pub fn packed_dot(a: &PackedBitTensor, ra: usize, b: &PackedBitTensor, rb: usize) -> Result<i64> {
    if a.row_bits != b.row_bits {
        return Err(Error::shape("packed_dot", format!("row widths differ: {} vs {}", a.row_bits, b.row_bits)));
    }
    let (ba, bb) = (ra * a.words_per_row, rb * b.words_per_row);
    let mut valid = 0i64;
    let mut diff = 0i64;
    for w in 0..a.words_per_row {
        let m = a.mask[ba + w] & b.mask[bb + w];
        valid += i64::from(m.count_ones());
        diff += i64::from(((a.payload[ba + w] ^ b.payload[bb + w]) & m).count_ones());
    }
    Ok(valid - 2 * diff)
}

/// Packs a [C,H,W] feature map into one word per pixel, bit c = sign of
/// channel c, via an arbitrary binarization predicate. Channel count is
/// limited to one word.
pub fn pixel_words_by(c: usize, h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Result<Vec<u64>> {
    if c == 0 || c > 64 {
        return Err(Error::invalid("pixel_words", format!("channel count {c} outside 1..=64")));
    }
    let mut words = vec![0u64; h * w];
    for ci in 0..c {
        let bit = 1u64 << ci;
        for (pix, word) in words.iter_mut().enumerate() {
            if f(ci, pix) {
                *word |= bit;
            }
        }
    }
    Ok(words)
}

/// Packs an exact-±1 [C,H,W] map for [`binary_conv2d`]: one im2col row per
/// output pixel along the 3×3 same-padding reduction axis.
pub fn pack_channels(x: &Tensor) -> Result<PackedBitTensor> {
    if x.shape.len() != 3 {
        return Err(Error::shape("pack_channels", format!("expected [C,H,W], got {:?}", x.shape)));
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    for (i, &v) in x.data.iter().enumerate() {
        if v != 1.0 && v != -1.0 {
            return Err(Error::invalid("pack_channels", format!("entry {i} is {v}, expected exactly +1 or -1")));
        }
    }
    let words = pixel_words_by(c, h, w, |ci, pix| x.data[ci * h * w + pix] == 1.0)?;
    Ok(pack_im2col(&words, c, h, w))
}

/// Assembles per-pixel channel words into im2col rows: row (y,x) holds the
/// 3×3 neighborhood's channel words at bit offsets `tap·C` (tap = ky·3+kx);
/// out-of-bounds taps stay masked off, which is how same-padding is excluded
/// from the popcount.
pub fn pack_im2col(pixel_words: &[u64], c: usize, h: usize, w: usize) -> PackedBitTensor {
    debug_assert_eq!(pixel_words.len(), h * w);
    let full: u64 = if c == 64 { u64::MAX } else { (1 << c) - 1 };
    let mut p = PackedBitTensor::empty(vec![h, w, 9 * c], h * w, 9 * c);
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * p.words_per_row;
            for ky in 0..3usize {
                let Some(sy) = (y + ky).checked_sub(1).filter(|&sy| sy < h) else { continue };
                for kx in 0..3usize {
                    let Some(sx) = (x + kx).checked_sub(1).filter(|&sx| sx < w) else { continue };
                    let word = pixel_words[sy * w + sx];
                    let off = (ky * 3 + kx) * c;
                    let (wi, sh) = (off / 64, (off % 64) as u32);
                    p.payload[base + wi] |= word << sh;
                    p.mask[base + wi] |= full << sh;
                    if sh != 0 && sh as usize + c > 64 {
                        p.payload[base + wi + 1] |= word >> (64 - sh);
                        p.mask[base + wi + 1] |= full >> (64 - sh);
                    }
                }
            }
        }
    }
    p
}

/// Packs exact-±1 conv weights [Cout,Cin,3,3] into one row per output
/// channel, bit order matching [`pack_im2col`] rows (tap-major, channel
/// within tap).
pub fn pack_conv_weights(w: &Tensor) -> Result<PackedBitTensor> {
    if w.shape.len() != 4 || w.shape[2] != 3 || w.shape[3] != 3 {
        return Err(Error::shape("pack_conv_weights", format!("expected [Cout,Cin,3,3], got {:?}", w.shape)));
    }
    let (cout, cin) = (w.shape[0], w.shape[1]);
    if cin > 64 {
        return Err(Error::invalid("pack_conv_weights", format!("Cin {cin} exceeds the one-word kernel limit")));
    }
    let mut p = PackedBitTensor::empty(vec![cout, 9 * cin], cout, 9 * cin);
    for (i, &v) in w.data.iter().enumerate() {
        if v != 1.0 && v != -1.0 {
            return Err(Error::invalid("pack_conv_weights", format!("entry {i} is {v}, expected exactly +1 or -1")));
        }
        let kx = i % 3;
        let ky = i / 3 % 3;
        let ci = i / 9 % cin;
        let co = i / (9 * cin);
        p.set(co, (ky * 3 + kx) * cin + ci, v == 1.0);
    }
    Ok(p)
}

/// 3×3 same-padding convolution over packed ±1 operands: per output element,
/// `dot = K_valid − 2·popcount((a XOR w) AND valid_mask)`, scaled by the
/// output channel's scale (pass a single scale to broadcast it).
pub fn binary_conv2d(input: &PackedBitTensor, weights: &PackedBitTensor, scales: &[f32]) -> Result<Tensor> {
    if input.shape.len() != 3 || input.shape[0] * input.shape[1] != input.rows {
        return Err(Error::shape("binary_conv2d", format!("input is not an im2col pack: shape {:?}", input.shape)));
    }
    if input.row_bits != weights.row_bits {
        return Err(Error::shape(
            "binary_conv2d",
            format!("reduction widths differ: input {} vs weights {}", input.row_bits, weights.row_bits),
        ));
    }
    let (h, w) = (input.shape[0], input.shape[1]);
    let cout = weights.rows;
    if scales.len() != cout && scales.len() != 1 {
        return Err(Error::shape("binary_conv2d", format!("{} scales for {cout} output channels", scales.len())));
    }
    let wpr = input.words_per_row;
    let mut out = vec![0.0f32; cout * h * w];
    for pix in 0..h * w {
        let ia = pix * wpr;
        for co in 0..cout {
            let wa = co * wpr;
            let mut valid = 0i64;
            let mut diff = 0i64;
            for k in 0..wpr {
                let m = input.mask[ia + k] & weights.mask[wa + k];
                valid += i64::from(m.count_ones());
                diff += i64::from(((input.payload[ia + k] ^ weights.payload[wa + k]) & m).count_ones());
            }
            let scale = scales[if scales.len() == 1 { 0 } else { co }];
            out[co * h * w + pix] = (valid - 2 * diff) as f32 * scale;
        }
    }
    Tensor::from_vec(&[cout, h, w], out)
}

#[cfg(test)]
mod tests {
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::kernels::conv2d_fwd;

    fn pm1(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
    }

    #[test]
    fn sixty_four_plus_ones_pack_into_an_all_ones_word() {
        let t = Tensor::full(&[64], 1.0);
        let p = pack_bits(&t).unwrap();
        assert_eq!(p.payload, vec![0xFFFF_FFFF_FFFF_FFFF]);
        assert_eq!(p.mask, vec![0xFFFF_FFFF_FFFF_FFFF]);
        assert_eq!(p.valid_bits(0), 64);
    }

    #[test]
    fn alternating_signs_pack_into_the_0x5555_pattern() {
        let data: Vec<f32> = (0..64).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let p = pack_bits(&Tensor::from_vec(&[64], data).unwrap()).unwrap();
        assert_eq!(p.payload, vec![0x5555_5555_5555_5555]);
    }

    #[test]
    fn non_pm1_entries_are_rejected() {
        let err = pack_bits(&Tensor::from_vec(&[2], vec![1.0, 0.5]).unwrap()).unwrap_err();
        assert!(err.to_string().contains("+1 or -1"), "{err}");
    }

    #[test]
    fn random_1000_element_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = Tensor::from_vec(&[1000], pm1(1000, &mut rng)).unwrap();
        assert_eq!(unpack(&pack_bits(&t).unwrap()).unwrap().data, t.data);
    }

    #[test]
    fn payload_bits_beyond_the_valid_region_stay_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // 70 bits: the second word holds 6 valid bits, the rest must be 0.
        let p = pack_bits(&Tensor::from_vec(&[70], pm1(70, &mut rng)).unwrap()).unwrap();
        assert_eq!(p.payload[1] >> 6, 0);
        assert_eq!(p.mask[1], (1 << 6) - 1);
        assert_eq!(p.payload[1] & !p.mask[1], 0);
    }

    #[test]
    fn multirow_packing_keeps_rows_word_aligned() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t = Tensor::from_vec(&[3, 70], pm1(210, &mut rng)).unwrap();
        let p = pack_bits(&t).unwrap();
        assert_eq!((p.rows, p.words_per_row), (3, 2));
        for r in 0..3 {
            assert_eq!(p.valid_bits(r), 70);
        }
        assert_eq!(unpack(&p).unwrap().data, t.data);
    }

    #[test]
    fn identical_rows_dot_to_plus_k_and_antipodal_rows_to_minus_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = Tensor::from_vec(&[100], pm1(100, &mut rng)).unwrap();
        let not_a = Tensor::from_vec(&[100], a.data.iter().map(|v| -v).collect()).unwrap();
        let pa = pack_bits(&a).unwrap();
        assert_eq!(packed_dot(&pa, 0, &pa, 0).unwrap(), 100);
        assert_eq!(packed_dot(&pa, 0, &pack_bits(&not_a).unwrap(), 0).unwrap(), -100);
    }

    #[test]
    fn packed_dot_rejects_mismatched_row_widths() {
        let a = pack_bits(&Tensor::full(&[8], 1.0)).unwrap();
        let b = pack_bits(&Tensor::full(&[9], 1.0)).unwrap();
        assert!(packed_dot(&a, 0, &b, 0).is_err());
    }

    /// Float convolution over the same ±1 values is the independent oracle:
    /// zero-padding contributes 0 there, masked-off taps contribute 0 here.
    #[test]
    fn binary_conv2d_matches_the_float_oracle_on_200_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for case in 0..200 {
            let cin = rng.random_range(1..=16usize);
            let h = rng.random_range(2..=10usize);
            let w = rng.random_range(2..=10usize);
            let cout = rng.random_range(1..=8usize);
            let x = Tensor::from_vec(&[cin, h, w], pm1(cin * h * w, &mut rng)).unwrap();
            let wt = Tensor::from_vec(&[cout, cin, 3, 3], pm1(cout * cin * 9, &mut rng)).unwrap();
            let scales: Vec<f32> = (0..cout).map(|_| rng.random_range(0.1..2.0f32)).collect();

            let mut oracle = vec![0.0f32; cout * h * w];
            conv2d_fwd(&x.data, &wt.data, &vec![0.0; cout], cin, h, w, cout, &mut oracle);

            let got = binary_conv2d(&pack_channels(&x).unwrap(), &pack_conv_weights(&wt).unwrap(), &scales).unwrap();
            for (i, (&g, &o)) in got.data.iter().zip(&oracle).enumerate() {
                let want = o * scales[i / (h * w)];
                assert_eq!(g, want, "case {case} elem {i}: got {g}, oracle {want}");
            }
        }
    }

    #[test]
    fn binary_conv2d_rejects_mismatched_shapes_and_scales() {
        let x = pack_channels(&Tensor::full(&[4, 5, 5], 1.0)).unwrap();
        let wt = pack_conv_weights(&Tensor::full(&[2, 3, 3, 3], 1.0)).unwrap();
        assert!(binary_conv2d(&x, &wt, &[1.0, 1.0]).is_err(), "cin mismatch must fail");
        let wt4 = pack_conv_weights(&Tensor::full(&[2, 4, 3, 3], 1.0)).unwrap();
        assert!(binary_conv2d(&x, &wt4, &[1.0, 1.0, 1.0]).is_err(), "scale count mismatch must fail");
        assert!(binary_conv2d(&x, &wt4, &[1.0, 1.0]).is_ok());
        assert!(binary_conv2d(&x, &wt4, &[2.0]).is_ok(), "single scale broadcasts");
    }

    #[test]
    fn border_pixels_reduce_over_fewer_valid_taps() {
        // All-ones operands: every dot equals its K_valid, so corners see
        // 4 taps, edges 6, interior 9.
        let x = pack_channels(&Tensor::full(&[1, 3, 3], 1.0)).unwrap();
        let wt = pack_conv_weights(&Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let out = binary_conv2d(&x, &wt, &[1.0]).unwrap();
        assert_eq!(out.data, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }
}
