//! Structure-level binarization error: bottleneck, self-attention and
//! 3-layer MLP blocks in full precision against their BNN-binarized twins.
//!
//! Every structure has three parameterized units. A unit is a conv or linear
//! layer, followed by per-channel standardization in the bottleneck and the
//! MLP. The binarized twin applies sign to both operands of every unit; the
//! structures built on BN end in a ReLU (after the shortcut add for the
//! bottleneck). Attention keeps the softmax and its probabilities in full
//! precision and binarizes queries, keys and values, so `Q K^T` is a binary
//! product and `P V` multiplies by `sign(V)`.
//!
//! `E_f` for one input is the mean absolute difference between the two
//! outputs, each divided by its own population std over all elements.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bittensor::{binary_conv2d, binary_gemm, conv2d_float, pack_signs};
use crate::binarize::ScaleStructure;
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::nn::BatchNorm;
use crate::scalar::{sign, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKind {
    Attention,
    #[serde(rename = "cnn", alias = "bottleneck")]
    Bottleneck,
    #[serde(rename = "mlp", alias = "mlp3")]
    Mlp3,
}

impl StructureKind {
    pub const ALL: [StructureKind; 3] = [StructureKind::Attention, StructureKind::Bottleneck, StructureKind::Mlp3];

    pub fn id(self) -> &'static str {
        match self {
            StructureKind::Attention => "attention",
            StructureKind::Bottleneck => "cnn",
            StructureKind::Mlp3 => "mlp",
        }
    }

    /// Token counts, spatial sizes or point counts of the published grid.
    pub fn default_sizes(self) -> Vec<usize> {
        match self {
            StructureKind::Bottleneck => vec![14, 28, 56, 112],
            _ => vec![64, 128, 256, 512],
        }
    }
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for StructureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "attention" => Ok(StructureKind::Attention),
            "cnn" | "bottleneck" => Ok(StructureKind::Bottleneck),
            "mlp" | "mlp3" => Ok(StructureKind::Mlp3),
            _ => Err(Error::Parse(format!("unknown structure {s:?}"))),
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureSpec {
    pub kind: StructureKind,
    /// Feature dimension (channels for the bottleneck).
    pub dim: usize,
    /// Tokens, points, or the side of the square feature map.
    pub input_size: usize,
    pub seed: u64,
    /// When false the binarized twin is the full-precision structure.
    #[serde(default = "yes")]
    pub binarize: bool,
}

impl StructureSpec {
    pub fn new(kind: StructureKind, dim: usize, input_size: usize, seed: u64) -> Self {
        StructureSpec {
            kind,
            dim,
            input_size,
            seed,
            binarize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(Error::param("input_size must be positive"));
        }
        let min = if self.kind == StructureKind::Bottleneck { 4 } else { 1 };
        if self.dim < min {
            return Err(Error::param(format!("{} needs dim >= {min}, got {}", self.kind, self.dim)));
        }
        Ok(())
    }

    /// Per-sample input, batch axis included.
    pub fn input_shape(&self) -> Vec<usize> {
        match self.kind {
            StructureKind::Bottleneck => vec![1, self.dim, self.input_size, self.input_size],
            _ => vec![self.input_size, self.dim],
        }
    }
}

/// Shared parameters of a structure and its binarized twin.
#[derive(Clone, Debug, PartialEq)]
pub struct Structure<T> {
    pub spec: StructureSpec,
    pub units: [Tensor<T>; 3],
}

fn normal<T: Scalar>(shape: Vec<usize>, scale: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * scale)
    })
}

fn fan_in(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

/// Random weights (standard normal over `sqrt(fan_in)`) from `spec.seed`.
pub fn build<T: Scalar>(spec: StructureSpec) -> Result<Structure<T>> {
    spec.validate()?;
    let d = spec.dim;
    let shapes: [Vec<usize>; 3] = match spec.kind {
        StructureKind::Bottleneck => {
            let m = d / 4;
            [vec![m, d, 1, 1], vec![m, m, 3, 3], vec![d, m, 1, 1]]
        }
        _ => [vec![d, d], vec![d, d], vec![d, d]],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let units = shapes.map(|s| {
        let scale = 1.0 / (fan_in(&s) as f64).sqrt();
        normal(s, scale, &mut rng)
    });
    Ok(Structure { spec, units })
}

fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let mut out = vec![T::zero(); n * o];
    gemm(
        T::one(),
        MatRef::new(x.data(), n, f),
        MatRef::new(w.data(), o, f).t(),
        T::zero(),
        &mut out,
    );
    Tensor::new(out, vec![n, o])
}

/// `sign(x) sign(w)^T` through the packed kernel.
fn binary_linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let f = x.shape()[1];
    let ints = binary_gemm(&pack_signs(x, f)?, &pack_signs(w, f)?)?;
    Tensor::new(
        ints.data.iter().map(|&v| T::lit(v as f64)).collect(),
        vec![ints.rows, ints.cols],
    )
}

fn standardize<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(BatchNorm::new(x.shape()[1]).forward_train(x)?.0)
}

fn relu<T: Scalar>(x: Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

fn softmax_rows<T: Scalar>(mut s: Tensor<T>) -> Tensor<T> {
    let k = s.inner_len();
    for row in s.data_mut().chunks_mut(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    s
}

fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, alpha: T) -> Tensor<T> {
    let (n, f, m) = (a.shape()[0], a.shape()[1], b.shape()[0]);
    let mut out = vec![T::zero(); n * m];
    gemm(
        alpha,
        MatRef::new(a.data(), n, f),
        MatRef::new(b.data(), m, f).t(),
        T::zero(),
        &mut out,
    );
    Tensor::new(out, vec![n, m]).expect("matmul shape")
}

fn matmul_nn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, f, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); n * m];
    gemm(
        T::one(),
        MatRef::new(a.data(), n, f),
        MatRef::new(b.data(), f, m),
        T::zero(),
        &mut out,
    );
    Tensor::new(out, vec![n, m]).expect("matmul shape")
}

impl<T: Scalar> Structure<T> {
    pub fn unit_shapes(&self) -> Vec<Vec<usize>> {
        self.units.iter().map(|u| u.shape().to_vec()).collect()
    }

    /// Seeded standard normal input of [`StructureSpec::input_shape`].
    pub fn random_input(&self, seed: u64) -> Tensor<T> {
        normal(self.spec.input_shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        let want = self.spec.input_shape();
        if x.shape() != want.as_slice() {
            return Err(Error::shape(format!("{} expects input {want:?}, got {:?}", self.spec.kind, x.shape())));
        }
        Ok(())
    }

    /// Full-precision structure `f`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        self.run(x, false)
    }

    /// Binarized twin `f̂`.
    pub fn forward_binarized(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        self.run(x, self.spec.binarize)
    }

    fn run(&self, x: &Tensor<T>, bin: bool) -> Result<Tensor<T>> {
        let [w1, w2, w3] = &self.units;
        match self.spec.kind {
            StructureKind::Mlp3 => {
                let mut h = x.clone();
                for w in [w1, w2, w3] {
                    h = standardize(&if bin { binary_linear(&h, w)? } else { linear(&h, w)? })?;
                }
                Ok(relu(h))
            }
            StructureKind::Bottleneck => {
                let none = ScaleStructure::none();
                let mut h = x.clone();
                for (w, pad) in [(w1, 0), (w2, 1), (w3, 0)] {
                    let z = if bin {
                        binary_conv2d(&h, w, 1, pad, &none)?
                    } else {
                        conv2d_float(&h, w, 1, pad)?
                    };
                    h = standardize(&z)?;
                }
                let y: Vec<T> = x.data().iter().zip(h.data()).map(|(&a, &b)| a + b).collect();
                Ok(relu(Tensor::new(y, x.shape().to_vec())?))
            }
            StructureKind::Attention => {
                let inv = T::one() / T::lit((self.spec.dim as f64).sqrt());
                if bin {
                    let (q, k, v) = (binary_linear(x, w1)?, binary_linear(x, w2)?, binary_linear(x, w3)?);
                    let scores = binary_linear(&q, &k)?.map(|s| s * inv);
                    let p = softmax_rows(scores);
                    Ok(matmul_nn(&p, &v.map(sign)))
                } else {
                    let (q, k, v) = (linear(x, w1)?, linear(x, w2)?, linear(x, w3)?);
                    let p = softmax_rows(matmul_nt(&q, &k, inv));
                    Ok(matmul_nn(&p, &v))
                }
            }
        }
    }

    /// `E_f` over `inputs`.
    pub fn error(&self, inputs: &[Tensor<T>]) -> Result<ProbeError> {
        let pairs = inputs
            .iter()
            .map(|x| Ok((self.forward(x)?, self.forward_binarized(x)?)))
            .collect::<Result<Vec<_>>>()?;
        structure_error(&pairs)
    }
}

fn population_std<T: Scalar>(x: &[T]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.to_f64().unwrap_or(0.0)).sum::<f64>() / n;
    (x.iter().map(|v| (v.to_f64().unwrap_or(0.0) - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Normalized mean absolute difference for one input, `None` when either
/// output has zero spread.
pub fn sample_error<T: Scalar>(f: &Tensor<T>, fhat: &Tensor<T>) -> Result<Option<f64>> {
    if f.shape() != fhat.shape() {
        return Err(Error::shape(format!("outputs {:?} vs {:?}", f.shape(), fhat.shape())));
    }
    if f.is_empty() {
        return Err(Error::Empty("structure output"));
    }
    let (sf, sh) = (population_std(f.data()), population_std(fhat.data()));
    if !(sf > 0.0 && sh > 0.0) {
        return Ok(None);
    }
    let sum: f64 = f
        .data()
        .iter()
        .zip(fhat.data())
        .map(|(&a, &b)| (a.to_f64().unwrap_or(0.0) / sf - b.to_f64().unwrap_or(0.0) / sh).abs())
        .sum();
    Ok(Some(sum / f.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeError {
    pub value: f64,
    pub used: usize,
    /// Indices of inputs dropped for zero output spread.
    pub excluded: Vec<usize>,
}

/// Mean of [`sample_error`] over `(f(x), f̂(x))` pairs.
pub fn structure_error<T: Scalar>(pairs: &[(Tensor<T>, Tensor<T>)]) -> Result<ProbeError> {
    let mut sum = 0.0;
    let mut used = 0;
    let mut excluded = Vec::new();
    for (i, (f, g)) in pairs.iter().enumerate() {
        match sample_error(f, g)? {
            Some(e) => {
                sum += e;
                used += 1;
            }
            None => {
                log::warn!("probe input {i}: zero output std, excluded");
                excluded.push(i);
            }
        }
    }
    if used == 0 {
        return Err(Error::ZeroDenominator("every probe output had zero std".into()));
    }
    Ok(ProbeError {
        value: sum / used as f64,
        used,
        excluded,
    })
}

fn default_seeds() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeGrid {
    pub kinds: Vec<StructureKind>,
    pub dims: Vec<usize>,
    /// Overrides the per-kind defaults for every kind.
    #[serde(default)]
    pub sizes: Option<Vec<usize>>,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub base_seed: u64,
}

impl ProbeGrid {
    /// The published 3 x 4 x 4 grid.
    pub fn table7(seeds: usize) -> Self {
        ProbeGrid {
            kinds: StructureKind::ALL.to_vec(),
            dims: vec![64, 128, 256, 512],
            sizes: None,
            seeds,
            base_seed: 0,
        }
    }

    pub fn sizes_for(&self, kind: StructureKind) -> Vec<usize> {
        self.sizes.clone().unwrap_or_else(|| kind.default_sizes())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub kind: StructureKind,
    pub size: usize,
    pub dim: usize,
    pub value: Option<f64>,
    pub seeds_used: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeTable {
    pub dims: Vec<usize>,
    pub cells: Vec<ProbeCell>,
    /// Mean over the finished cells of each kind.
    pub means: BTreeMap<StructureKind, f64>,
}

/// SplitMix64 finalizer; decorrelates neighbouring cell seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn cell_seed(base: u64, kind: StructureKind, size: usize, dim: usize, s: usize) -> u64 {
    [kind as u64, size as u64, dim as u64, s as u64]
        .iter()
        .fold(mix(base), |acc, &v| mix(acc ^ v))
}

/// Runs every `(kind, size, dim, seed)` draw in parallel; each seed gets
/// fresh weights and a fresh input. Failed cells keep their error.
pub fn sweep<T: Scalar>(grid: &ProbeGrid) -> Result<ProbeTable> {
    if grid.kinds.is_empty() || grid.dims.is_empty() {
        return Err(Error::Empty("probe grid"));
    }
    if grid.seeds == 0 {
        return Err(Error::param("probe sweep needs at least one seed per cell"));
    }
    let mut keys = Vec::new();
    for &kind in &grid.kinds {
        for size in grid.sizes_for(kind) {
            for &dim in &grid.dims {
                keys.push((kind, size, dim));
            }
        }
    }
    let draws: Vec<(usize, Result<Option<f64>>)> = (0..keys.len() * grid.seeds)
        .into_par_iter()
        .map(|t| {
            let (c, s) = (t / grid.seeds, t % grid.seeds);
            let (kind, size, dim) = keys[c];
            let seed = cell_seed(grid.base_seed, kind, size, dim, s);
            let run = || -> Result<Option<f64>> {
                let st = build::<T>(StructureSpec::new(kind, dim, size, seed))?;
                let x = st.random_input(mix(seed));
                sample_error(&st.forward(&x)?, &st.forward_binarized(&x)?)
            };
            (c, run())
        })
        .collect();
    let mut cells: Vec<ProbeCell> = keys
        .iter()
        .map(|&(kind, size, dim)| ProbeCell {
            kind,
            size,
            dim,
            value: None,
            seeds_used: 0,
            error: None,
        })
        .collect();
    let mut sums = vec![0.0; keys.len()];
    for (c, r) in draws {
        match r {
            Ok(Some(e)) => {
                sums[c] += e;
                cells[c].seeds_used += 1;
            }
            Ok(None) => log::warn!("probe cell {:?}: zero output std, draw excluded", keys[c]),
            Err(e) => {
                cells[c].error.get_or_insert_with(|| e.to_string());
            }
        }
    }
    for (cell, s) in cells.iter_mut().zip(&sums) {
        if cell.error.is_none() && cell.seeds_used > 0 {
            cell.value = Some(s / cell.seeds_used as f64);
        }
    }
    let mut means = BTreeMap::new();
    for &kind in &grid.kinds {
        let v: Vec<f64> = cells.iter().filter(|c| c.kind == kind).filter_map(|c| c.value).collect();
        if !v.is_empty() {
            means.insert(kind, v.iter().sum::<f64>() / v.len() as f64);
        }
    }
    Ok(ProbeTable {
        dims: grid.dims.clone(),
        cells,
        means,
    })
}

impl ProbeTable {
    pub fn get(&self, kind: StructureKind, size: usize, dim: usize) -> Option<&ProbeCell> {
        self.cells.iter().find(|c| c.kind == kind && c.size == size && c.dim == dim)
    }

    fn rows(&self) -> Vec<(StructureKind, usize)> {
        let mut rows: Vec<(StructureKind, usize)> = Vec::new();
        for c in &self.cells {
            if !rows.contains(&(c.kind, c.size)) {
                rows.push((c.kind, c.size));
            }
        }
        rows
    }

    fn row_fields(&self, kind: StructureKind, size: usize, first: bool) -> Vec<String> {
        let mut f = vec![kind.id().to_string(), size.to_string()];
        for &d in &self.dims {
            f.push(
                self.get(kind, size, d)
                    .and_then(|c| c.value)
                    .map_or_else(String::new, |v| format!("{v:.4}")),
            );
        }
        f.push(match (first, self.means.get(&kind)) {
            (true, Some(m)) => format!("{m:.4}"),
            _ => String::new(),
        });
        f
    }

    /// Rows `(structure, size)`, one column per dim, kind mean on the first
    /// row of each kind.
    pub fn to_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["structure".to_string(), "size".to_string()];
        header.extend(self.dims.iter().map(|d| d.to_string()));
        header.push("mean".into());
        w.write_record(&header)?;
        let mut last = None;
        for (kind, size) in self.rows() {
            w.write_record(self.row_fields(kind, size, last != Some(kind)))?;
            last = Some(kind);
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| structure | size |");
        for d in &self.dims {
            s += &format!(" {d} |");
        }
        s += " mean |\n|---|---|";
        s += &"---|".repeat(self.dims.len() + 1);
        s.push('\n');
        let mut last = None;
        for (kind, size) in self.rows() {
            let f = self.row_fields(kind, size, last != Some(kind));
            s += &format!("| {} |\n", f.join(" | "));
            last = Some(kind);
        }
        s
    }
}
