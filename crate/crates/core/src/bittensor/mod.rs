//! Bit-packed ±1 tensors and the xnor/popcount kernels built on them.
//!
//! Layout: row-major, the innermost (reduction) axis packed into 64-bit words
//! least-significant bit first. Bit `1` encodes `+1` (`x >= 0`), bit `0`
//! encodes `-1`. Padding bits past `bits_per_row` in the last word of each row
//! are always zero, so serialized tensors are portable across hosts.

pub(crate) mod conv;
mod io;
mod kernels;

pub use conv::{binary_conv2d, col2im, conv2d_float, conv_out_size, im2col, im2col_padded, ConvGeometry};
pub use io::{read_bittensor, write_bittensor, MAGIC};
pub use kernels::{
    binary_gemm, binary_gemm_with, popcount_hw_available, popcount_portable, xnor_popcount_dot,
    IntMatrix, Parallelism, PopcountPath,
};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const WORD_BITS: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensor {
    words: Vec<u64>,
    shape: Vec<usize>,
    bits_per_row: usize,
}

#[inline]
pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

/// Mask of the valid bits in the last word of a row of `bits` bits.
#[inline]
pub fn tail_mask(bits: usize) -> u64 {
    match bits % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

impl BitTensor {
    /// Builds a tensor from raw words, checking length and zero padding.
    pub fn from_words(words: Vec<u64>, shape: Vec<usize>, bits_per_row: usize) -> Result<Self> {
        let inner = shape.last().copied().unwrap_or(0);
        if inner != bits_per_row {
            return Err(Error::shape(format!(
                "innermost dimension {inner} differs from bits_per_row {bits_per_row}"
            )));
        }
        let rows = Self::rows_of(&shape);
        let wpr = words_for(bits_per_row);
        if words.len() != rows * wpr {
            return Err(Error::shape(format!(
                "expected {} words for {rows} rows of {bits_per_row} bits, got {}",
                rows * wpr,
                words.len()
            )));
        }
        let t = Self {
            words,
            shape,
            bits_per_row,
        };
        if wpr > 0 {
            let mask = tail_mask(bits_per_row);
            for r in 0..rows {
                if t.row_words(r)[wpr - 1] & !mask != 0 {
                    return Err(Error::param(format!("row {r} has nonzero padding bits")));
                }
            }
        }
        Ok(t)
    }

    fn rows_of(shape: &[usize]) -> usize {
        match shape.split_last() {
            Some((_, outer)) => outer.iter().product(),
            None => 0,
        }
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits_per_row(&self) -> usize {
        self.bits_per_row
    }

    pub fn words_per_row(&self) -> usize {
        words_for(self.bits_per_row)
    }

    pub fn rows(&self) -> usize {
        Self::rows_of(&self.shape)
    }

    pub fn row_words(&self, r: usize) -> &[u64] {
        let w = self.words_per_row();
        &self.words[r * w..(r + 1) * w]
    }

    /// Bit at `(row, col)` as ±1.
    pub fn get(&self, row: usize, col: usize) -> i8 {
        assert!(col < self.bits_per_row);
        let word = self.row_words(row)[col / WORD_BITS];
        if (word >> (col % WORD_BITS)) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    /// Expands back to a ±1 float tensor of the same shape.
    pub fn unpack<T: Scalar>(&self) -> Tensor<T> {
        let n = self.bits_per_row;
        let mut data = Vec::with_capacity(self.rows() * n);
        for r in 0..self.rows() {
            let row = self.row_words(r);
            for c in 0..n {
                let bit = (row[c / WORD_BITS] >> (c % WORD_BITS)) & 1;
                data.push(if bit == 1 { T::one() } else { -T::one() });
            }
        }
        Tensor::new(data, self.shape.clone()).expect("shape matches bit count")
    }
}

/// Packs `sign(x)` (`x >= 0` maps to bit 1) row by row.
///
/// `reduction_axis_length` is the packed row length; `x.len()` must be a
/// multiple of it. If it equals the innermost dimension the shape is kept,
/// otherwise the result is shaped `[rows, reduction_axis_length]`.
pub fn pack_signs<T: Scalar>(x: &Tensor<T>, reduction_axis_length: usize) -> Result<BitTensor> {
    x.ensure_finite()?;
    let n = reduction_axis_length;
    if n == 0 {
        return Err(Error::param("reduction axis length must be positive"));
    }
    if !x.len().is_multiple_of(n) {
        return Err(Error::shape(format!(
            "{} elements do not split into rows of {n}",
            x.len()
        )));
    }
    let rows = x.len() / n;
    let shape = if x.inner_len() == n && x.rank() > 0 {
        x.shape().to_vec()
    } else {
        vec![rows, n]
    };
    let words = pack_rows(x.data(), rows, n, |v: T| v >= T::zero());
    Ok(BitTensor {
        words,
        shape,
        bits_per_row: n,
    })
}

/// Packs an already-binarized predicate (`true` = +1) over `rows x n` values.
pub(crate) fn pack_rows<V: Copy>(data: &[V], rows: usize, n: usize, is_pos: impl Fn(V) -> bool) -> Vec<u64> {
    let wpr = words_for(n);
    let mut words = vec![0u64; rows * wpr];
    for r in 0..rows {
        let src = &data[r * n..(r + 1) * n];
        let dst = &mut words[r * wpr..(r + 1) * wpr];
        for (wi, chunk) in src.chunks(WORD_BITS).enumerate() {
            let mut word = 0u64;
            for (b, &v) in chunk.iter().enumerate() {
                if is_pos(v) {
                    word |= 1u64 << b;
                }
            }
            dst[wi] = word;
        }
    }
    words
}

/// Packs a ±1 tensor whose signs were decided elsewhere (e.g. RSign output).
pub fn pack_pm1<T: Scalar>(x: &Tensor<T>, reduction_axis_length: usize) -> Result<BitTensor> {
    pack_signs(x, reduction_axis_length)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_maps_to_positive_bit() {
        let x = Tensor::new(vec![0.5f32, -0.3, 0.0], vec![3]).unwrap();
        let b = pack_signs(&x, 3).unwrap();
        assert_eq!(b.words(), &[0b101]);
        assert_eq!((b.get(0, 0), b.get(0, 1), b.get(0, 2)), (1, -1, 1));
    }

    #[test]
    fn full_word_of_positives() {
        let x = Tensor::filled(vec![1, 64], 2.0f32);
        let b = pack_signs(&x, 64).unwrap();
        assert_eq!(b.words(), &[u64::MAX]);
    }

    #[test]
    fn random_row_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::from_fn(vec![100], |_| rng.random_range(-1.0f32..1.0));
        let b = pack_signs(&x, 100).unwrap();
        assert_eq!(b.words().len(), 2);
        for (i, &v) in x.data().iter().enumerate() {
            let bit = (b.words()[i / 64] >> (i % 64)) & 1;
            assert_eq!(bit == 1, v >= 0.0, "index {i}");
        }
        // padding of the second word stays clear
        assert_eq!(b.words()[1] >> 36, 0);
    }

    #[test]
    fn rejects_non_finite() {
        let x = Tensor::new(vec![1.0f32, f32::NAN], vec![2]).unwrap();
        assert!(matches!(pack_signs(&x, 2), Err(Error::NonFinite { index: 1, .. })));
        let x = Tensor::new(vec![f32::INFINITY], vec![1]).unwrap();
        assert!(pack_signs(&x, 1).is_err());
    }

    #[test]
    fn words_length_invariant() {
        for n in [1usize, 63, 64, 65, 130] {
            let x = Tensor::filled(vec![3, n], -1.0f64);
            let b = pack_signs(&x, n).unwrap();
            assert_eq!(b.words().len(), 3 * n.div_ceil(64));
            assert!(b.words().iter().all(|&w| w == 0));
        }
    }

    #[test]
    fn from_words_rejects_dirty_padding() {
        assert!(BitTensor::from_words(vec![1 << 5], vec![1, 5], 5).is_err());
        assert!(BitTensor::from_words(vec![0b11111], vec![1, 5], 5).is_ok());
        assert!(BitTensor::from_words(vec![0, 0], vec![1, 5], 5).is_err());
    }

    proptest! {
        #[test]
        fn unpack_pack_is_sign(v in proptest::collection::vec(
            prop_oneof![
                -1e30f32..1e30f32,
                Just(0.0f32),
                Just(-0.0f32),
                Just(f32::MIN_POSITIVE / 4.0),
                Just(-f32::MIN_POSITIVE / 4.0),
            ], 1..300)) {
            let n = v.len();
            let x = Tensor::new(v.clone(), vec![n]).unwrap();
            let back: Tensor<f32> = pack_signs(&x, n).unwrap().unpack();
            for (a, b) in v.iter().zip(back.data()) {
                prop_assert_eq!(*b, if *a >= 0.0 { 1.0 } else { -1.0 });
            }
        }
    }
}
