//! Host micro-benchmark: packed xnor/popcount GEMM against a scalar
//! triple-loop float GEMM on the same `m x n` by `k x n` shapes.
//!
//! Both sides run on one thread with pre-built operands; only the multiply
//! is timed. Samples come from a monotonic clock after discarded warmup runs.

use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bittensor::{binary_gemm_with, BitTensor, pack_signs, popcount_hw_available, Parallelism, PopcountPath};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_WARMUP: usize = 5;
pub const MIN_REPS: usize = 20;

fn d_rows() -> usize {
    256
}
fn d_warmup() -> usize {
    MIN_WARMUP
}
fn d_reps() -> usize {
    MIN_REPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// Reduction lengths `n`.
    pub sizes: Vec<usize>,
    /// Activation rows.
    #[serde(default = "d_rows")]
    pub m: usize,
    /// Weight rows.
    #[serde(default = "d_rows")]
    pub k: usize,
    #[serde(default = "d_warmup")]
    pub warmup: usize,
    #[serde(default = "d_reps")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![64, 256, 1024, 4096],
            m: d_rows(),
            k: d_rows(),
            warmup: MIN_WARMUP,
            repetitions: MIN_REPS,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.contains(&0) || self.m == 0 || self.k == 0 {
            return Err(Error::param("benchmark sizes and shapes must be positive"));
        }
        if self.warmup < MIN_WARMUP || self.repetitions < MIN_REPS {
            return Err(Error::param(format!(
                "need at least {MIN_WARMUP} warmup and {MIN_REPS} measured repetitions"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Seconds per measured repetition, in run order.
    pub samples: Vec<f64>,
}

impl Timing {
    pub fn median(&self) -> f64 {
        let mut s = self.samples.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        if n == 0 {
            f64::NAN
        } else if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        }
    }

    pub fn min(&self) -> f64 {
        self.samples.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub warmup: usize,
    pub repetitions: usize,
    pub packed: Timing,
    pub float: Timing,
}

impl BenchRow {
    /// Float median over packed median.
    pub fn speedup(&self) -> f64 {
        self.float.median() / self.packed.median()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineInfo {
    pub arch: String,
    pub os: String,
    pub threads: usize,
    pub hardware_popcount: bool,
}

impl MachineInfo {
    pub fn detect() -> Self {
        MachineInfo {
            arch: std::env::consts::ARCH.into(),
            os: std::env::consts::OS.into(),
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            hardware_popcount: popcount_hw_available(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub machine: MachineInfo,
    pub rows: Vec<BenchRow>,
}

/// `a (m x n)` times `w (k x n)^T`, plain loops.
pub fn naive_gemm(a: &[f32], w: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let wr = &w[j * n..(j + 1) * n];
            let mut acc = 0.0f32;
            for t in 0..n {
                acc += ar[t] * wr[t];
            }
            out[i * k + j] = acc;
        }
    }
}

fn time(warmup: usize, reps: usize, mut f: impl FnMut()) -> Timing {
    for _ in 0..warmup {
        f();
    }
    let samples = (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect();
    Timing { samples }
}

pub fn bench_size(cfg: &BenchConfig, n: usize) -> Result<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ n as u64);
    let pm1 = |rng: &mut ChaCha8Rng, rows: usize| -> Vec<f32> {
        (0..rows * n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
    };
    let a = Tensor::new(pm1(&mut rng, cfg.m), vec![cfg.m, n])?;
    let w = Tensor::new(pm1(&mut rng, cfg.k), vec![cfg.k, n])?;
    bench_operands(&pack_signs(&a, n)?, &pack_signs(&w, n)?, cfg.warmup, cfg.repetitions)
}

/// Times caller-supplied packed operands, e.g. read from BBT1 files.
pub fn bench_operands(pa: &BitTensor, pw: &BitTensor, warmup: usize, repetitions: usize) -> Result<BenchRow> {
    if warmup < MIN_WARMUP || repetitions < MIN_REPS {
        return Err(Error::param(format!(
            "need at least {MIN_WARMUP} warmup and {MIN_REPS} measured repetitions"
        )));
    }
    let (m, k, n) = (pa.rows(), pw.rows(), pa.bits_per_row());
    let a = pa.unpack::<f32>().into_data();
    let w = pw.unpack::<f32>().into_data();
    let expect = binary_gemm_with(pa, pw, PopcountPath::Auto, Parallelism::Sequential)?;
    let mut out = vec![0.0f32; m * k];
    naive_gemm(&a, &w, m, k, n, &mut out);
    if out.iter().zip(&expect.data).any(|(&f, &i)| f != i as f32) {
        return Err(Error::param(format!("packed and float GEMM disagree at n = {n}")));
    }
    let packed = time(warmup, repetitions, || {
        black_box(binary_gemm_with(black_box(pa), black_box(pw), PopcountPath::Auto, Parallelism::Sequential).ok());
    });
    let float = time(warmup, repetitions, || {
        naive_gemm(black_box(&a), black_box(&w), m, k, n, &mut out);
        black_box(&out);
    });
    Ok(BenchRow {
        m,
        k,
        n,
        warmup,
        repetitions,
        packed,
        float,
    })
}

pub fn run(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let rows = cfg.sizes.iter().map(|&n| bench_size(cfg, n)).collect::<Result<_>>()?;
    Ok(BenchReport {
        machine: MachineInfo::detect(),
        rows,
    })
}

impl BenchReport {
    /// One line per size with median/min for both sides.
    pub fn summary_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "m",
            "k",
            "n",
            "warmup",
            "repetitions",
            "packed_median_s",
            "packed_min_s",
            "float_median_s",
            "float_min_s",
            "speedup",
        ])?;
        for r in &self.rows {
            w.write_record(&[
                r.m.to_string(),
                r.k.to_string(),
                r.n.to_string(),
                r.warmup.to_string(),
                r.repetitions.to_string(),
                format!("{:.9}", r.packed.median()),
                format!("{:.9}", r.packed.min()),
                format!("{:.9}", r.float.median()),
                format!("{:.9}", r.float.min()),
                format!("{:.3}", r.speedup()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Every measured sample: `n,kernel,rep,seconds`.
    pub fn samples_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["n", "kernel", "rep", "seconds"])?;
        for r in &self.rows {
            for (name, t) in [("packed", &r.packed), ("float", &r.float)] {
                for (i, s) in t.samples.iter().enumerate() {
                    w.write_record(&[r.n.to_string(), name.into(), i.to_string(), format!("{s:.9}")])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| n | packed median (ms) | float median (ms) | speedup |\n|---|---|---|---|\n");
        for r in &self.rows {
            s += &format!(
                "| {} | {:.4} | {:.4} | {:.2} |\n",
                r.n,
                r.packed.median() * 1e3,
                r.float.median() * 1e3,
                r.speedup()
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_min() {
        let t = Timing {
            samples: vec![3.0, 1.0, 2.0, 10.0],
        };
        assert_eq!(t.median(), 2.5);
        assert_eq!(t.min(), 1.0);
    }

    #[test]
    fn repetitions_honored() {
        let cfg = BenchConfig {
            sizes: vec![16, 100],
            m: 8,
            k: 8,
            warmup: 5,
            repetitions: 23,
            seed: 1,
        };
        let r = run(&cfg).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r.rows.iter().all(|row| row.packed.samples.len() == 23 && row.float.samples.len() == 23));
        let mut buf = Vec::new();
        r.samples_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 2 * 2 * 23);
    }

    #[test]
    fn rejects_short_runs() {
        let cfg = BenchConfig {
            repetitions: 3,
            ..BenchConfig::default()
        };
        assert!(run(&cfg).is_err());
    }
}
