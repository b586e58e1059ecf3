//! Backward estimators for the sign function and the per-algorithm routing
//! of weights and activations onto them.

mod layer;

pub use layer::{
    layer_backward, layer_forward, ForwardOptions, LayerGrads, LayerKind, LayerParams, Quantizer, SavedForward,
    ShiftSource,
};

use serde::{Deserialize, Serialize};

use crate::binarize::{recu_transform, BinarizerKind, BinarizerSpec, RecuOutput};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Ste,
    PiecewisePoly,
    /// Identity through sign, then the ReCU clamp/standardization chain.
    ReCUChain,
    FourierSeries,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    pub clip_window: f64,
    pub fourier_terms: usize,
    pub omega: f64,
}

impl EstimatorSpec {
    pub fn new(kind: EstimatorKind) -> Self {
        Self {
            kind,
            clip_window: 1.0,
            fourier_terms: 4,
            omega: std::f64::consts::FRAC_PI_2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_window > 0.0) {
            return Err(Error::param("clip window must be positive"));
        }
        if self.fourier_terms == 0 {
            return Err(Error::param("fourier_terms must be at least 1"));
        }
        if !(self.omega > 0.0) {
            return Err(Error::param("omega must be positive"));
        }
        Ok(())
    }

    /// Surrogate derivative of sign at `x`.
    pub fn derivative<T: Scalar>(&self, x: T) -> T {
        match self.kind {
            EstimatorKind::Ste => ste_grad(x, T::one(), T::lit(self.clip_window)),
            EstimatorKind::PiecewisePoly => poly_grad(x),
            EstimatorKind::ReCUChain => T::one(),
            EstimatorKind::FourierSeries => fda_sign_grad(x, T::lit(self.omega), self.fourier_terms),
        }
    }

    /// The smooth function whose derivative is [`Self::derivative`]; used in
    /// place of sign when checking gradients numerically.
    pub fn primitive<T: Scalar>(&self, x: T) -> T {
        match self.kind {
            EstimatorKind::Ste => {
                let c = T::lit(self.clip_window);
                x.max(-c).min(c)
            }
            EstimatorKind::PiecewisePoly => poly_primitive(x),
            EstimatorKind::ReCUChain => x,
            EstimatorKind::FourierSeries => fda_primitive(x, T::lit(self.omega), self.fourier_terms),
        }
    }
}

/// Weight and activation estimators for one algorithm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Routing {
    pub weight: EstimatorSpec,
    pub activation: EstimatorSpec,
}

pub fn routing(spec: &BinarizerSpec) -> Routing {
    use EstimatorKind::*;
    let (w, a) = match spec.kind {
        BinarizerKind::Bnn | BinarizerKind::Xnor | BinarizerKind::DoReFa | BinarizerKind::XnorPp => (Ste, Ste),
        BinarizerKind::BiReal | BinarizerKind::ReActNet => (Ste, PiecewisePoly),
        BinarizerKind::ReCU => (ReCUChain, PiecewisePoly),
        BinarizerKind::Fda => (FourierSeries, FourierSeries),
    };
    let with = |kind| EstimatorSpec {
        kind,
        clip_window: 1.0,
        fourier_terms: spec.fourier_terms,
        omega: spec.omega,
    };
    Routing {
        weight: with(w),
        activation: with(a),
    }
}

/// Straight-through estimator: passes `upstream` on the open interval
/// `(-clip, clip)` and blocks it elsewhere.
#[inline]
pub fn ste_grad<T: Scalar>(x: T, upstream: T, clip: T) -> T {
    if x > -clip && x < clip {
        upstream
    } else {
        T::zero()
    }
}

#[inline]
pub fn poly_grad<T: Scalar>(a: T) -> T {
    let (one, two) = (T::one(), T::lit(2.0));
    if a >= -one && a < T::zero() {
        two + two * a
    } else if a >= T::zero() && a < one {
        two - two * a
    } else {
        T::zero()
    }
}

#[inline]
pub fn poly_primitive<T: Scalar>(a: T) -> T {
    let (one, two) = (T::one(), T::lit(2.0));
    if a < -one {
        -one
    } else if a < T::zero() {
        two * a + a * a
    } else if a < one {
        two * a - a * a
    } else {
        one
    }
}

/// Gradient of RSign with respect to its threshold, given the gradient that
/// reaches the RSign input.
#[inline]
pub fn rsign_threshold_grad<T: Scalar>(upstream: T) -> T {
    -upstream
}

/// `(4 omega / pi) * sum_{i < n} cos((2i + 1) omega t)`.
pub fn fda_sign_grad<T: Scalar>(t: T, omega: T, n_terms: usize) -> T {
    let mut s = T::zero();
    for i in 0..n_terms {
        let k = T::lit((2 * i + 1) as f64);
        s += (k * omega * t).cos();
    }
    T::lit(4.0 / std::f64::consts::PI) * omega * s
}

/// Partial Fourier sum of the unit square wave,
/// `(4 / pi) * sum_{i < n} sin((2i + 1) omega t) / (2i + 1)`.
pub fn fda_primitive<T: Scalar>(t: T, omega: T, n_terms: usize) -> T {
    let mut s = T::zero();
    for i in 0..n_terms {
        let k = T::lit((2 * i + 1) as f64);
        s += (k * omega * t).sin() / k;
    }
    T::lit(4.0 / std::f64::consts::PI) * s
}

/// Gradient of a loss with respect to the latent weights `w`, given
/// `upstream = dL/d recu(w)` and quantile bounds frozen at their forward
/// values. Recomputes the forward transform from `w`.
pub fn recu_weight_grad<T: Scalar>(w: &Tensor<T>, tau: f64, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let state = recu_transform(w, tau)?;
    recu_chain(&state, upstream)
}

/// Chains `upstream` through the clamp (zero where clamped) and the
/// balancing/standardization map recorded in `state`.
pub fn recu_chain<T: Scalar>(state: &RecuOutput<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if upstream.shape() != state.standardized.shape() {
        return Err(Error::shape(format!(
            "upstream {:?} does not match forward state {:?}",
            upstream.shape(),
            state.standardized.shape()
        )));
    }
    let per = upstream.len() / state.channels.len();
    let nf = T::lit(per as f64);
    let mut out = Vec::with_capacity(upstream.len());
    for (ci, ch) in state.channels.iter().enumerate() {
        let y = &state.standardized.data()[ci * per..][..per];
        let g: Vec<T> = upstream.data()[ci * per..][..per]
            .iter()
            .zip(y)
            .map(|(&g, &v)| if v > ch.lo && v < ch.hi { g } else { T::zero() })
            .collect();
        let mean_g = g.iter().copied().sum::<T>() / nf;
        if ch.degenerate {
            out.extend(g.iter().map(|&v| v - mean_g));
        } else {
            let mean_gy = g.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / nf;
            out.extend(g.iter().zip(y).map(|(&gi, &yi)| (gi - mean_g - yi * mean_gy) / ch.std));
        }
    }
    Tensor::new(out, upstream.shape().to_vec())
}
