//! Labelled datasets: CSV loading and seeded synthetic generators.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    /// `N x ...` features; the per-sample shape is `x.shape()[1..]`.
    pub x: Tensor<T>,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(x: Tensor<T>, y: Vec<usize>, classes: usize) -> Result<Self> {
        if x.rank() < 2 || x.shape()[0] != y.len() {
            return Err(Error::shape(format!("{} labels for features {:?}", y.len(), x.shape())));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(Error::param(format!("label {bad} out of range for {classes} classes")));
        }
        x.ensure_finite()?;
        Ok(Dataset { x, y, classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let inner: usize = self.x.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            data.extend_from_slice(&self.x.data()[i * inner..][..inner]);
        }
        let mut shape = self.x.shape().to_vec();
        shape[0] = idx.len();
        Dataset {
            x: Tensor::new(data, shape).expect("subset shape is consistent"),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
        }
    }

    /// Seeded shuffle, then the first `train_frac` of samples go to train.
    pub fn split(&self, train_frac: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..=1.0).contains(&train_frac) {
            return Err(Error::param(format!("train fraction {train_frac}")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = (self.len() as f64 * train_frac).round() as usize;
        Ok((self.subset(&idx[..cut]), self.subset(&idx[cut..])))
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            x: self.x.cast(),
            y: self.y.clone(),
            classes: self.classes,
        }
    }

    /// Feature columns followed by an integer label column, with a header row.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut data = Vec::new();
        let mut y = Vec::new();
        let mut width = None;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() < 2 {
                return Err(Error::Parse(format!("record {line}: need features and a label")));
            }
            let f = rec.len() - 1;
            if *width.get_or_insert(f) != f {
                return Err(Error::Parse(format!("record {line}: {f} features, expected {}", width.unwrap_or(0))));
            }
            for v in rec.iter().take(f) {
                let v: f64 = v.trim().parse().map_err(|e| Error::Parse(format!("record {line}: {v:?}: {e}")))?;
                data.push(T::lit(v));
            }
            let label = &rec[f];
            y.push(
                label
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("record {line}: label {label:?}: {e}")))?,
            );
        }
        let width = width.ok_or(Error::Empty("dataset csv"))?;
        let classes = y.iter().max().map_or(0, |m| m + 1);
        Dataset::new(Tensor::new(data, vec![y.len(), width])?, y, classes)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(std::fs::File::open(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Synthetic {
    /// Isotropic Gaussian clusters with centers on a seeded sphere.
    Blobs { classes: usize, dim: usize, spread: f64 },
    /// Two interleaved half circles with Gaussian jitter.
    TwoMoons { noise: f64 },
    /// 1x8x8 stripe textures: horizontal (0) or vertical (1), random phase and noise.
    Textures { noise: f64 },
}

impl Synthetic {
    pub fn generate<T: Scalar>(self, n: usize, seed: u64) -> Result<Dataset<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gauss = |sd: f64| Normal::new(0.0, sd).map_err(|e| Error::param(e.to_string()));
        match self {
            Synthetic::Blobs { classes, dim, spread } => {
                if classes == 0 || dim == 0 {
                    return Err(Error::param("blobs need classes and dim"));
                }
                let noise = gauss(spread)?;
                let unit = gauss(1.0)?;
                let centers: Vec<Vec<f64>> = (0..classes)
                    .map(|_| {
                        let v: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng)).collect();
                        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                        v.iter().map(|x| 2.0 * x / norm).collect()
                    })
                    .collect();
                let mut data = Vec::with_capacity(n * dim);
                let mut y = Vec::with_capacity(n);
                for i in 0..n {
                    let c = i % classes;
                    y.push(c);
                    data.extend(centers[c].iter().map(|&m| T::lit(m + noise.sample(&mut rng))));
                }
                Dataset::new(Tensor::new(data, vec![n, dim])?, y, classes)
            }
            Synthetic::TwoMoons { noise } => {
                let jitter = gauss(noise.max(0.0) + f64::MIN_POSITIVE)?;
                let mut data = Vec::with_capacity(2 * n);
                let mut y = Vec::with_capacity(n);
                for i in 0..n {
                    let c = i % 2;
                    let t = rng.random_range(0.0..std::f64::consts::PI);
                    let (px, py) = if c == 0 {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    };
                    data.push(T::lit(px + jitter.sample(&mut rng)));
                    data.push(T::lit(py + jitter.sample(&mut rng)));
                    y.push(c);
                }
                Dataset::new(Tensor::new(data, vec![n, 2])?, y, 2)
            }
            Synthetic::Textures { noise } => {
                let jitter = gauss(noise.max(0.0) + f64::MIN_POSITIVE)?;
                let mut data = Vec::with_capacity(n * 64);
                let mut y = Vec::with_capacity(n);
                for i in 0..n {
                    let c = i % 2;
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    for r in 0..8 {
                        for q in 0..8 {
                            let pos = if c == 0 { r } else { q } as f64;
                            let v = (pos * std::f64::consts::FRAC_PI_2 + phase).sin();
                            data.push(T::lit(v + jitter.sample(&mut rng)));
                        }
                    }
                    y.push(c);
                }
                Dataset::new(Tensor::new(data, vec![n, 1, 8, 8])?, y, 2)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_seeded() {
        for s in [
            Synthetic::Blobs {
                classes: 3,
                dim: 4,
                spread: 0.3,
            },
            Synthetic::TwoMoons { noise: 0.1 },
            Synthetic::Textures { noise: 0.2 },
        ] {
            let a: Dataset<f64> = s.generate(50, 7).unwrap();
            let b: Dataset<f64> = s.generate(50, 7).unwrap();
            let c: Dataset<f64> = s.generate(50, 8).unwrap();
            assert_eq!(a, b);
            assert_ne!(a.x, c.x);
            assert_eq!(a.len(), 50);
        }
    }

    #[test]
    fn split_partitions() {
        let d: Dataset<f32> = Synthetic::TwoMoons { noise: 0.1 }.generate(101, 1).unwrap();
        let (tr, te) = d.split(0.75, 3).unwrap();
        assert_eq!(tr.len() + te.len(), 101);
        assert_eq!(tr.len(), 76);
        assert_eq!(tr.sample_shape(), [2]);
    }

    #[test]
    fn csv_round_trip() {
        let text = "f0,f1,label\n0.5,-1,1\n2,3.25,0\n";
        let d = Dataset::<f64>::from_csv(text.as_bytes()).unwrap();
        assert_eq!(d.x.shape(), [2, 2]);
        assert_eq!(d.x.data(), &[0.5, -1.0, 2.0, 3.25]);
        assert_eq!(d.y, vec![1, 0]);
        assert_eq!(d.classes, 2);
        assert!(Dataset::<f64>::from_csv("a,b\n1,x\n".as_bytes()).is_err());
        assert!(Dataset::<f64>::from_csv("a,b,c\n1,2,0\n1,1\n".as_bytes()).is_err());
    }
}
