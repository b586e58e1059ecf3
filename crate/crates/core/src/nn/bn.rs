//! Batch normalization over axis 1 and its fold into a channel scale.

use crate::binarize::{channel_layout, ScaleStructure, WeightScale};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
}

#[derive(Clone, Debug)]
pub(crate) struct BnTape<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    pub(crate) mean: Vec<T>,
    pub(crate) var_unbiased: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::lit(1e-5),
            momentum: T::lit(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (outer, c, inner) = channel_layout(x.shape());
        if x.rank() < 2 || c != self.channels() {
            return Err(Error::shape(format!(
                "batch norm over {} channels got input {:?}",
                self.channels(),
                x.shape()
            )));
        }
        Ok((outer, c, inner))
    }

    fn affine(&self, x: &Tensor<T>, mean: &[T], inv_std: &[T]) -> Result<(Tensor<T>, Tensor<T>)> {
        let (outer, c, inner) = self.check(x)?;
        let mut xhat = x.clone();
        let mut y = x.clone();
        for b in 0..outer {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for k in off..off + inner {
                    let h = (x.data()[k] - mean[ch]) * inv_std[ch];
                    xhat.data_mut()[k] = h;
                    y.data_mut()[k] = self.gamma[ch] * h + self.beta[ch];
                }
            }
        }
        Ok((y, xhat))
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let inv: Vec<T> = self.running_var.iter().map(|&v| T::one() / (v + self.eps).sqrt()).collect();
        Ok(self.affine(x, &self.running_mean, &inv)?.0)
    }

    pub(crate) fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, BnTape<T>)> {
        let (outer, c, inner) = self.check(x)?;
        let count = outer * inner;
        if count == 0 {
            return Err(Error::Empty("batch norm input"));
        }
        let cnt = T::lit(count as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for b in 0..outer {
            for ch in 0..c {
                mean[ch] += x.data()[(b * c + ch) * inner..][..inner].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= cnt);
        for b in 0..outer {
            for ch in 0..c {
                for &v in &x.data()[(b * c + ch) * inner..][..inner] {
                    var[ch] += (v - mean[ch]) * (v - mean[ch]);
                }
            }
        }
        let var_unbiased: Vec<T> = var
            .iter()
            .map(|&s| if count > 1 { s / T::lit((count - 1) as f64) } else { T::zero() })
            .collect();
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s / cnt + self.eps).sqrt()).collect();
        let (y, xhat) = self.affine(x, &mean, &inv_std)?;
        Ok((
            y,
            BnTape {
                xhat,
                inv_std,
                mean,
                var_unbiased,
            },
        ))
    }

    pub(crate) fn update_running(&mut self, tape: &BnTape<T>) {
        let m = self.momentum;
        for ch in 0..self.channels() {
            self.running_mean[ch] = (T::one() - m) * self.running_mean[ch] + m * tape.mean[ch];
            self.running_var[ch] = (T::one() - m) * self.running_var[ch] + m * tape.var_unbiased[ch];
        }
    }

    /// Returns `(d_input, d_gamma, d_beta)`.
    pub(crate) fn backward(&self, tape: &BnTape<T>, g: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
        let (outer, c, inner) = self.check(g)?;
        let cnt = T::lit((outer * inner) as f64);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..outer {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for k in off..off + inner {
                    dbeta[ch] += g.data()[k];
                    dgamma[ch] += g.data()[k] * tape.xhat.data()[k];
                }
            }
        }
        let mut dx = g.clone();
        for b in 0..outer {
            for ch in 0..c {
                let s = self.gamma[ch] * tape.inv_std[ch];
                let (mg, mgx) = (dbeta[ch] / cnt, dgamma[ch] / cnt);
                let off = (b * c + ch) * inner;
                for k in off..off + inner {
                    dx.data_mut()[k] = s * (g.data()[k] - mg - tape.xhat.data()[k] * mgx);
                }
            }
        }
        Ok((dx, dgamma, dbeta))
    }
}

/// Per-channel affine replacing weight scale followed by eval-mode BN.
/// Any activation scale `K` is still applied separately.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedBn<T> {
    pub multiplier: Vec<T>,
    pub bias: Vec<T>,
}

pub fn fold_bn<T: Scalar>(scale: &ScaleStructure<T>, bn: &BatchNorm<T>) -> Result<FoldedBn<T>> {
    let c = bn.channels();
    let alpha = |o: usize| -> Result<T> {
        Ok(match &scale.weight {
            WeightScale::None => T::one(),
            WeightScale::Layer(a) => *a,
            WeightScale::Channel(a) => {
                if a.len() != c {
                    return Err(Error::shape(format!("{} channel scales for {c} BN channels", a.len())));
                }
                a[o]
            }
            WeightScale::Spatial { .. } => return Err(Error::FoldUnsupported("spatial".into())),
        })
    };
    let mut multiplier = Vec::with_capacity(c);
    let mut bias = Vec::with_capacity(c);
    for o in 0..c {
        let s = bn.gamma[o] / (bn.running_var[o] + bn.eps).sqrt();
        multiplier.push(s * alpha(o)?);
        bias.push(bn.beta[o] - s * bn.running_mean[o]);
    }
    Ok(FoldedBn { multiplier, bias })
}
