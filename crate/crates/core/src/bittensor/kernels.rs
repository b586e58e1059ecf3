use std::sync::OnceLock;

use rayon::prelude::*;

use super::{tail_mask, BitTensor};
use crate::error::{Error, Result};

/// Row-major `rows x cols` matrix of exact integer dot products.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntMatrix {
    pub data: Vec<i32>,
    pub rows: usize,
    pub cols: usize,
}

impl IntMatrix {
    pub fn get(&self, i: usize, j: usize) -> i32 {
        self.data[i * self.cols + j]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PopcountPath {
    /// Pick the hardware path when the CPU advertises it.
    Auto,
    Portable,
    Hardware,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    /// Split output rows across the rayon pool.
    Rows,
}

/// SWAR population count; no reliance on the target's popcnt instruction.
#[inline]
pub fn popcount_portable(mut x: u64) -> u32 {
    x -= (x >> 1) & 0x5555_5555_5555_5555;
    x = (x & 0x3333_3333_3333_3333) + ((x >> 2) & 0x3333_3333_3333_3333);
    x = (x + (x >> 4)) & 0x0f0f_0f0f_0f0f_0f0f;
    (x.wrapping_mul(0x0101_0101_0101_0101) >> 56) as u32
}

pub fn popcount_hw_available() -> bool {
    static HW: OnceLock<bool> = OnceLock::new();
    *HW.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            std::arch::is_x86_feature_detected!("popcnt")
        }
        #[cfg(target_arch = "aarch64")]
        {
            true
        }
        #[cfg(not(any(target_arch = "x86_64", target_arch = "aarch64")))]
        {
            false
        }
    })
}

type XorCount = fn(&[u64], &[u64]) -> u32;

fn xor_count_portable(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| popcount_portable(x ^ y)).sum()
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn xor_count_popcnt(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

fn xor_count_hw(a: &[u64], b: &[u64]) -> u32 {
    #[cfg(target_arch = "x86_64")]
    {
        // SAFETY: only selected after runtime detection of popcnt.
        unsafe { xor_count_popcnt(a, b) }
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
    }
}

fn select(path: PopcountPath) -> Result<XorCount> {
    match path {
        PopcountPath::Portable => Ok(xor_count_portable),
        PopcountPath::Hardware if popcount_hw_available() => Ok(xor_count_hw),
        PopcountPath::Hardware => Err(Error::param("hardware popcount not available on this host")),
        PopcountPath::Auto if popcount_hw_available() => Ok(xor_count_hw),
        PopcountPath::Auto => Ok(xor_count_portable),
    }
}

fn check_row_len(a: &BitTensor, w: &BitTensor) -> Result<usize> {
    if a.bits_per_row() != w.bits_per_row() {
        return Err(Error::shape(format!(
            "reduction lengths differ: {} vs {}",
            a.bits_per_row(),
            w.bits_per_row()
        )));
    }
    Ok(a.bits_per_row())
}

/// Integer dot product of row `ai` of `a` with row `wi` of `w`, computed as
/// `2 * popcount(xnor(a, w) & mask) - n`.
pub fn xnor_popcount_dot(a: &BitTensor, ai: usize, w: &BitTensor, wi: usize) -> Result<i32> {
    let n = check_row_len(a, w)?;
    if ai >= a.rows() || wi >= w.rows() {
        return Err(Error::shape("row index out of range"));
    }
    let (ra, rw) = (a.row_words(ai), w.row_words(wi));
    let last = ra.len().saturating_sub(1);
    let mut matches = 0u32;
    for (i, (x, y)) in ra.iter().zip(rw).enumerate() {
        let mut agree = !(x ^ y);
        if i == last {
            agree &= tail_mask(n);
        }
        matches += popcount_portable(agree);
    }
    Ok(2 * matches as i32 - n as i32)
}

/// `A (m x n)` against `W (k x n)`; entry `(i, j)` is the ±1 dot product of
/// `A_i` and `W_j`.
pub fn binary_gemm(a: &BitTensor, w: &BitTensor) -> Result<IntMatrix> {
    binary_gemm_with(a, w, PopcountPath::Auto, Parallelism::Rows)
}

pub fn binary_gemm_with(
    a: &BitTensor,
    w: &BitTensor,
    path: PopcountPath,
    par: Parallelism,
) -> Result<IntMatrix> {
    let n = check_row_len(a, w)? as i32;
    let count = select(path)?;
    let (m, k) = (a.rows(), w.rows());
    let mut data = vec![0i32; m * k];
    if k == 0 {
        return Ok(IntMatrix { data, rows: m, cols: k });
    }
    // Padding bits are zero in both operands, so xor needs no mask:
    // dot = matches - mismatches = n - 2 * popcount(a ^ w).
    let fill = |(i, out): (usize, &mut [i32])| {
        let ra = a.row_words(i);
        for (j, o) in out.iter_mut().enumerate() {
            *o = n - 2 * count(ra, w.row_words(j)) as i32;
        }
    };
    match par {
        Parallelism::Sequential => data.chunks_mut(k).enumerate().for_each(fill),
        Parallelism::Rows => data.par_chunks_mut(k).enumerate().for_each(fill),
    }
    Ok(IntMatrix { data, rows: m, cols: k })
}
