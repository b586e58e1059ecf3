//! Forward quantizers for the eight binarization algorithms: statistical and
//! learnable scales, RSign thresholds, activation mean shift and the ReCU
//! weight transform.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bittensor::{im2col_padded, pack_signs, BitTensor, ConvGeometry};
use crate::error::{Error, Result};
use crate::scalar::{sign, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BinarizerKind {
    #[serde(rename = "bnn")]
    Bnn,
    #[serde(rename = "xnor")]
    Xnor,
    #[serde(rename = "dorefa")]
    DoReFa,
    #[serde(rename = "bireal")]
    BiReal,
    #[serde(rename = "xnorpp")]
    XnorPp,
    #[serde(rename = "reactnet")]
    ReActNet,
    #[serde(rename = "recu")]
    ReCU,
    #[serde(rename = "fda")]
    Fda,
}

impl BinarizerKind {
    pub const ALL: [BinarizerKind; 8] = [
        BinarizerKind::Bnn,
        BinarizerKind::Xnor,
        BinarizerKind::DoReFa,
        BinarizerKind::BiReal,
        BinarizerKind::XnorPp,
        BinarizerKind::ReActNet,
        BinarizerKind::ReCU,
        BinarizerKind::Fda,
    ];

    /// Short lowercase identifier used in configs and file names.
    pub fn id(self) -> &'static str {
        match self {
            BinarizerKind::Bnn => "bnn",
            BinarizerKind::Xnor => "xnor",
            BinarizerKind::DoReFa => "dorefa",
            BinarizerKind::BiReal => "bireal",
            BinarizerKind::XnorPp => "xnorpp",
            BinarizerKind::ReActNet => "reactnet",
            BinarizerKind::ReCU => "recu",
            BinarizerKind::Fda => "fda",
        }
    }

    pub fn weight_granularity(self) -> Granularity {
        match self {
            BinarizerKind::Bnn => Granularity::None,
            BinarizerKind::DoReFa => Granularity::Layer,
            BinarizerKind::XnorPp => Granularity::Spatial,
            _ => Granularity::Channel,
        }
    }

    pub fn uses_activation_scale(self) -> bool {
        self == BinarizerKind::Xnor
    }

    pub fn uses_thresholds(self) -> bool {
        self == BinarizerKind::ReActNet
    }

    pub fn uses_mean_shift(self) -> bool {
        self == BinarizerKind::Fda
    }
}

impl fmt::Display for BinarizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BinarizerKind::Bnn => "BNN",
            BinarizerKind::Xnor => "XNOR",
            BinarizerKind::DoReFa => "DoReFa",
            BinarizerKind::BiReal => "Bi-Real",
            BinarizerKind::XnorPp => "XNOR++",
            BinarizerKind::ReActNet => "ReActNet",
            BinarizerKind::ReCU => "ReCU",
            BinarizerKind::Fda => "FDA",
        })
    }
}

impl FromStr for BinarizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .collect::<String>()
            .to_ascii_lowercase()
            .replace("++", "pp");
        BinarizerKind::ALL
            .into_iter()
            .find(|k| k.id() == norm)
            .ok_or_else(|| Error::Parse(format!("unknown algorithm '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    None,
    Layer,
    Channel,
    Spatial,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::None => "none",
            Granularity::Layer => "layer",
            Granularity::Channel => "channel",
            Granularity::Spatial => "spatial",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Learnable {
    pub thresholds: bool,
    pub gamma: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinarizerSpec {
    pub kind: BinarizerKind,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_terms")]
    pub fourier_terms: usize,
    #[serde(default = "default_omega")]
    pub omega: f64,
    #[serde(default)]
    pub learnable: Option<Learnable>,
}

fn default_tau() -> f64 {
    0.85
}
fn default_terms() -> usize {
    4
}
fn default_omega() -> f64 {
    std::f64::consts::FRAC_PI_2
}

impl BinarizerSpec {
    pub fn new(kind: BinarizerKind) -> Self {
        Self {
            kind,
            tau: default_tau(),
            fourier_terms: default_terms(),
            omega: default_omega(),
            learnable: None,
        }
    }

    /// Learnable flags, defaulting to whatever the algorithm trains.
    pub fn learnable(&self) -> Learnable {
        self.learnable.unwrap_or(Learnable {
            thresholds: self.kind.uses_thresholds(),
            gamma: self.kind == BinarizerKind::XnorPp,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.5 && self.tau < 1.0) {
            return Err(Error::param(format!("tau must lie in (0.5, 1), got {}", self.tau)));
        }
        if self.fourier_terms == 0 {
            return Err(Error::param("fourier_terms must be at least 1"));
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(Error::param(format!("omega must be positive, got {}", self.omega)));
        }
        Ok(())
    }
}

/// Weight-side scaling factor of a binarized layer.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightScale<T> {
    None,
    Layer(T),
    Channel(Vec<T>),
    /// `Γ[o, i, j] = alpha[o] * beta[i] * gamma[j]`, kept factored.
    Spatial { alpha: Vec<T>, beta: Vec<T>, gamma: Vec<T> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleStructure<T> {
    pub weight: WeightScale<T>,
    /// XNOR's `K`, shaped `N x H_out x W_out`.
    pub activation_scale: Option<Tensor<T>>,
    /// RSign offsets, one per input channel.
    pub thresholds: Option<Vec<T>>,
    /// Per-input-channel value subtracted before sign.
    pub activation_shift: Option<Vec<T>>,
}

impl<T: Scalar> ScaleStructure<T> {
    fn with_weight(weight: WeightScale<T>) -> Self {
        Self {
            weight,
            activation_scale: None,
            thresholds: None,
            activation_shift: None,
        }
    }

    pub fn none() -> Self {
        Self::with_weight(WeightScale::None)
    }

    pub fn layer(alpha: T) -> Self {
        Self::with_weight(WeightScale::Layer(alpha))
    }

    pub fn channel(alpha: Vec<T>) -> Self {
        Self::with_weight(WeightScale::Channel(alpha))
    }

    pub fn granularity(&self) -> Granularity {
        match self.weight {
            WeightScale::None => Granularity::None,
            WeightScale::Layer(_) => Granularity::Layer,
            WeightScale::Channel(_) => Granularity::Channel,
            WeightScale::Spatial { .. } => Granularity::Spatial,
        }
    }

    /// Number of stored full-precision scale values on the weight side.
    pub fn param_count(&self) -> usize {
        match &self.weight {
            WeightScale::None => 0,
            WeightScale::Layer(_) => 1,
            WeightScale::Channel(a) => a.len(),
            WeightScale::Spatial { alpha, beta, gamma } => alpha.len() + beta.len() + gamma.len(),
        }
    }

    pub fn weight_factor(&self, o: usize, i: usize, j: usize) -> T {
        match &self.weight {
            WeightScale::None => T::one(),
            WeightScale::Layer(a) => *a,
            WeightScale::Channel(a) => a[o],
            WeightScale::Spatial { alpha, beta, gamma } => alpha[o] * beta[i] * gamma[j],
        }
    }

    /// Combined multiplier applied to the integer dot product at `(n, o, i, j)`.
    pub fn output_factor(&self, n: usize, o: usize, i: usize, j: usize) -> T {
        let w = self.weight_factor(o, i, j);
        match &self.activation_scale {
            Some(k) => {
                let (ho, wo) = (k.shape()[1], k.shape()[2]);
                w * k.data()[(n * ho + i) * wo + j]
            }
            None => w,
        }
    }

    /// Validates against a layer with `o` outputs, `c` inputs and a
    /// `n x ho x wo` output grid (linear layers use `ho = wo = 1`).
    pub fn check_conv(&self, o: usize, c: usize, n: usize, ho: usize, wo: usize) -> Result<()> {
        let positive = |v: &[T], what: &str| -> Result<()> {
            if v.iter().any(|x| !(*x > T::zero()) || !x.is_finite()) {
                return Err(Error::param(format!("{what} entries must be positive")));
            }
            Ok(())
        };
        match &self.weight {
            WeightScale::None => {}
            WeightScale::Layer(a) => positive(&[*a], "layer scale")?,
            WeightScale::Channel(a) => {
                if a.len() != o {
                    return Err(Error::shape(format!(
                        "channel scale has {} entries for {o} output channels",
                        a.len()
                    )));
                }
                positive(a, "channel scale")?;
            }
            WeightScale::Spatial { alpha, beta, gamma } => {
                if alpha.len() != o || beta.len() != ho || gamma.len() != wo {
                    return Err(Error::shape(format!(
                        "spatial factors {}/{}/{} do not match output {o}x{ho}x{wo}",
                        alpha.len(),
                        beta.len(),
                        gamma.len()
                    )));
                }
                positive(alpha, "alpha")?;
                positive(beta, "beta")?;
                positive(gamma, "gamma")?;
            }
        }
        if let Some(k) = &self.activation_scale {
            if k.shape() != [n, ho, wo] {
                return Err(Error::shape(format!(
                    "activation scale {:?} does not match output {n}x{ho}x{wo}",
                    k.shape()
                )));
            }
        }
        for (v, what) in [(&self.thresholds, "thresholds"), (&self.activation_shift, "mean shift")] {
            if let Some(v) = v {
                if v.len() != c {
                    return Err(Error::shape(format!("{what} has {} entries for {c} channels", v.len())));
                }
            }
        }
        Ok(())
    }

    /// Maps activations to ±1 floats: subtract the mean shift, then RSign
    /// against thresholds if present, plain sign otherwise.
    pub fn quantize_activations(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let shifted = match &self.activation_shift {
            Some(s) => per_channel(a, s, |x, m| x - m)?,
            None => a.clone(),
        };
        match &self.thresholds {
            Some(t) => rsign(&shifted, t),
            None => Ok(shifted.map(sign)),
        }
    }
}

/// Channel axis: 1 for batched tensors, 0 for a single vector.
pub(crate) fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        0 => (1, 1, 1),
        1 => (1, shape[0], 1),
        _ => (shape[0], shape[1], shape[2..].iter().product()),
    }
}

fn per_channel<T: Scalar>(a: &Tensor<T>, v: &[T], f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    let (outer, c, inner) = channel_layout(a.shape());
    if v.len() != c {
        return Err(Error::shape(format!("{} per-channel values for {c} channels", v.len())));
    }
    let mut out = a.clone();
    for b in 0..outer {
        for ch in 0..c {
            for x in &mut out.data_mut()[(b * c + ch) * inner..][..inner] {
                *x = f(*x, v[ch]);
            }
        }
    }
    Ok(out)
}

/// Mean of `|w|` over the whole tensor (`Layer`) or per leading-axis output
/// channel (`Channel`). Other granularities have no statistical scale.
pub fn weight_scale<T: Scalar>(w: &Tensor<T>, granularity: Granularity) -> Result<Vec<T>> {
    if w.is_empty() {
        return Err(Error::Empty("weight tensor"));
    }
    let mean_abs = |v: &[T]| v.iter().map(|x| x.abs()).sum::<T>() / T::lit(v.len() as f64);
    match granularity {
        Granularity::Layer => Ok(vec![mean_abs(w.data())]),
        Granularity::Channel => {
            let o = if w.rank() > 1 { w.shape()[0] } else { 1 };
            let per = w.len() / o;
            if per == 0 {
                return Err(Error::Empty("weight channel"));
            }
            Ok(w.data().chunks(per).map(mean_abs).collect())
        }
        g => Err(Error::param(format!("{g} granularity has no statistical weight scale"))),
    }
}

/// XNOR's `K`: channel-mean of `|a|`, then a `k x k` mean filter (zero
/// padded) at the layer's stride. Returns `N x H_out x W_out`.
pub fn xnor_activation_scale<T: Scalar>(a: &Tensor<T>, kernel: usize, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(a.shape(), kernel, stride, pad)?;
    let plane = g.height * g.width;
    let inv_c = T::one() / T::lit(g.channels as f64);
    let mut mean = vec![T::zero(); g.batch * plane];
    for n in 0..g.batch {
        for c in 0..g.channels {
            let src = &a.data()[(n * g.channels + c) * plane..][..plane];
            for (m, x) in mean[n * plane..][..plane].iter_mut().zip(src) {
                *m += x.abs() * inv_c;
            }
        }
    }
    let mean = Tensor::new(mean, vec![g.batch, 1, g.height, g.width])?;
    let cols = im2col_padded(&mean, kernel, stride, pad, T::zero())?;
    let inv_k = T::one() / T::lit((kernel * kernel) as f64);
    let k: Vec<T> = (0..cols.rows()).map(|r| cols.row(r).iter().copied().sum::<T>() * inv_k).collect();
    let (ho, wo) = g.out_hw();
    Tensor::new(k, vec![g.batch, ho, wo])
}

/// Per-sample `mean(|a|)` for a linear layer input `N x F`, as `N x 1 x 1`.
pub fn xnor_activation_scale_linear<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || a.inner_len() == 0 {
        return Err(Error::shape(format!("expected N x F input, got {:?}", a.shape())));
    }
    let f = T::lit(a.inner_len() as f64);
    let k = (0..a.rows()).map(|r| a.row(r).iter().map(|x| x.abs()).sum::<T>() / f).collect();
    Tensor::new(k, vec![a.rows(), 1, 1])
}

/// Spatial `Γ = alpha ⊗ beta ⊗ gamma`, stored factored.
pub fn xnorpp_gamma<T: Scalar>(alpha: Vec<T>, beta: Vec<T>, gamma: Vec<T>) -> Result<ScaleStructure<T>> {
    if alpha.is_empty() || beta.is_empty() || gamma.is_empty() {
        return Err(Error::Empty("XNOR++ factor vector"));
    }
    let s = ScaleStructure::with_weight(WeightScale::Spatial { alpha, beta, gamma });
    let (o, ho, wo) = match &s.weight {
        WeightScale::Spatial { alpha, beta, gamma } => (alpha.len(), beta.len(), gamma.len()),
        _ => unreachable!(),
    };
    s.check_conv(o, 0, 0, ho, wo)?;
    Ok(s)
}

/// ReActNet sign: `+1` where `a > t_c`, `-1` where `a <= t_c`.
pub fn rsign<T: Scalar>(a: &Tensor<T>, thresholds: &[T]) -> Result<Tensor<T>> {
    per_channel(a, thresholds, |x, t| if x > t { T::one() } else { -T::one() })
}

/// Sorted-order quantile with linear interpolation between neighbours.
pub fn quantile_sorted<T: Scalar>(sorted: &[T], q: f64) -> T {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::lit(pos - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Per-channel record of the ReCU transform, reused by the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RecuChannel<T> {
    pub mean: T,
    /// Divisor actually used (1 for zero-variance channels).
    pub std: T,
    pub lo: T,
    pub hi: T,
    /// Zero-variance channel: only the mean was removed.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecuOutput<T> {
    pub weights: Tensor<T>,
    /// `mean(|w|)` of the untransformed weights.
    pub b: T,
    /// Standardized, pre-clamp weights.
    pub standardized: Tensor<T>,
    pub channels: Vec<RecuChannel<T>>,
    pub tau: f64,
}

/// Balance (subtract the channel mean), standardize (divide by the channel
/// population std), then clamp to the channel's `[Q(1-tau), Q(tau)]`.
pub fn recu_transform<T: Scalar>(w: &Tensor<T>, tau: f64) -> Result<RecuOutput<T>> {
    if !(tau > 0.5 && tau < 1.0) {
        return Err(Error::param(format!("tau must lie in (0.5, 1), got {tau}")));
    }
    recu_impl(w, tau, None)
}

/// [`recu_transform`] with clamp bounds supplied per channel instead of
/// estimated, so finite differences see the bounds as constants.
pub fn recu_transform_frozen<T: Scalar>(w: &Tensor<T>, bounds: &[(T, T)]) -> Result<RecuOutput<T>> {
    recu_impl(w, f64::NAN, Some(bounds))
}

fn recu_impl<T: Scalar>(w: &Tensor<T>, tau: f64, bounds: Option<&[(T, T)]>) -> Result<RecuOutput<T>> {
    if w.is_empty() {
        return Err(Error::Empty("weight tensor"));
    }
    w.ensure_finite()?;
    let o = if w.rank() > 1 { w.shape()[0] } else { 1 };
    if let Some(b) = bounds {
        if b.len() != o {
            return Err(Error::shape(format!("{} clamp bounds for {o} channels", b.len())));
        }
    }
    let per = w.len() / o;
    let nf = T::lit(per as f64);
    let mut standardized = Vec::with_capacity(w.len());
    let mut out = Vec::with_capacity(w.len());
    let mut channels = Vec::with_capacity(o);
    for (ci, ch) in w.data().chunks(per).enumerate() {
        let mean = ch.iter().copied().sum::<T>() / nf;
        let var = ch.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
        let mut std = var.sqrt();
        let degenerate = !(std > T::zero());
        if degenerate {
            log::info!("ReCU: channel {ci} has zero variance, skipping standardization");
            std = T::one();
        }
        let y: Vec<T> = ch.iter().map(|&x| (x - mean) / std).collect();
        let (lo, hi) = match bounds {
            Some(b) => b[ci],
            None => {
                let mut sorted = y.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
                (quantile_sorted(&sorted, 1.0 - tau), quantile_sorted(&sorted, tau))
            }
        };
        out.extend(y.iter().map(|&v| v.max(lo).min(hi)));
        standardized.extend(y);
        channels.push(RecuChannel {
            mean,
            std,
            lo,
            hi,
            degenerate,
        });
    }
    let b = w.data().iter().map(|x| x.abs()).sum::<T>() / T::lit(w.len() as f64);
    Ok(RecuOutput {
        weights: Tensor::new(out, w.shape().to_vec())?,
        b,
        standardized: Tensor::new(standardized, w.shape().to_vec())?,
        channels,
        tau,
    })
}

/// Layer geometry for [`binarize_forward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerGeometry {
    /// `a: N x F`, `w: O x F`.
    Linear,
    /// `a: N x C x H x W`, `w: O x C x k x k`.
    Conv { stride: usize, pad: usize },
}

/// Learned parameters that feed the forward quantizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LearnedParams<T> {
    pub thresholds: Option<Vec<T>>,
    pub gamma: Option<(Vec<T>, Vec<T>, Vec<T>)>,
    /// Fixed mean shift (e.g. a running mean); batch means when absent.
    pub shift: Option<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Binarized<T> {
    /// `O x (C k k)` packed weight signs.
    pub weights: BitTensor,
    /// One packed row per receptive field (conv) or sample (linear).
    pub activations: BitTensor,
    pub scale: ScaleStructure<T>,
}

/// Quantized weights (before sign) and the matching scale for one algorithm.
pub(crate) fn quantize_weights<T: Scalar>(
    spec: &BinarizerSpec,
    w: &Tensor<T>,
) -> Result<(Tensor<T>, WeightScale<T>)> {
    let chan = |t: &Tensor<T>| weight_scale(t, Granularity::Channel).map(WeightScale::Channel);
    Ok(match spec.kind {
        BinarizerKind::Bnn | BinarizerKind::XnorPp => (w.clone(), WeightScale::None),
        BinarizerKind::DoReFa => (w.clone(), WeightScale::Layer(weight_scale(w, Granularity::Layer)?[0])),
        BinarizerKind::ReCU => {
            let r = recu_transform(w, spec.tau)?;
            let s = chan(&r.weights)?;
            (r.weights, s)
        }
        _ => (w.clone(), chan(w)?),
    })
}

/// Packs both operands of a linear or conv layer and derives the scale
/// structure dictated by `spec.kind`.
pub fn binarize_forward<T: Scalar>(
    spec: &BinarizerSpec,
    w: &Tensor<T>,
    a: &Tensor<T>,
    geometry: LayerGeometry,
) -> Result<Binarized<T>> {
    binarize_forward_with(spec, w, a, geometry, &LearnedParams::default())
}

pub fn binarize_forward_with<T: Scalar>(
    spec: &BinarizerSpec,
    w: &Tensor<T>,
    a: &Tensor<T>,
    geometry: LayerGeometry,
    params: &LearnedParams<T>,
) -> Result<Binarized<T>> {
    let run = || -> Result<Binarized<T>> {
        spec.validate()?;
        w.ensure_finite()?;
        a.ensure_finite()?;
        let o = w.shape().first().copied().ok_or(Error::Empty("weight tensor"))?;
        let c = a.shape().get(1).copied().ok_or_else(|| Error::shape("activation needs a channel axis"))?;
        let (n, ho, wo, row_len) = match geometry {
            LayerGeometry::Linear => {
                if w.rank() != 2 || a.rank() != 2 || w.shape()[1] != c {
                    return Err(Error::shape(format!(
                        "linear layer: weight {:?} vs input {:?}",
                        w.shape(),
                        a.shape()
                    )));
                }
                (a.shape()[0], 1, 1, c)
            }
            LayerGeometry::Conv { stride, pad } => {
                if w.rank() != 4 || w.shape()[1] != c {
                    return Err(Error::shape(format!(
                        "conv layer: weight {:?} vs input {:?}",
                        w.shape(),
                        a.shape()
                    )));
                }
                let g = ConvGeometry::new(a.shape(), w.shape()[2], stride, pad)?;
                let (ho, wo) = g.out_hw();
                (g.batch, ho, wo, g.patch_len())
            }
        };
        let (wq, weight) = quantize_weights(spec, w)?;
        let mut scale = ScaleStructure::with_weight(weight);
        if spec.kind == BinarizerKind::XnorPp {
            let (al, be, ga) = params
                .gamma
                .clone()
                .unwrap_or_else(|| (vec![T::one(); o], vec![T::one(); ho], vec![T::one(); wo]));
            scale = xnorpp_gamma(al, be, ga)?;
        }
        if spec.kind.uses_activation_scale() {
            scale.activation_scale = Some(match geometry {
                LayerGeometry::Linear => xnor_activation_scale_linear(a)?,
                LayerGeometry::Conv { stride, pad } => xnor_activation_scale(a, w.shape()[2], stride, pad)?,
            });
        }
        if spec.kind.uses_thresholds() {
            scale.thresholds = Some(params.thresholds.clone().unwrap_or_else(|| vec![T::zero(); c]));
        }
        if spec.kind.uses_mean_shift() {
            scale.activation_shift = Some(params.shift.clone().unwrap_or_else(|| channel_means(a)));
        }
        scale.check_conv(o, c, n, ho, wo)?;
        let q = scale.quantize_activations(a)?;
        let rows = match geometry {
            LayerGeometry::Linear => q,
            LayerGeometry::Conv { stride, pad } => im2col_padded(&q, w.shape()[2], stride, pad, T::one())?,
        };
        Ok(Binarized {
            weights: pack_signs(&wq, row_len)?,
            activations: pack_signs(&rows, row_len)?,
            scale,
        })
    };
    run().map_err(|e| e.in_algorithm(spec.kind))
}

/// Mean over batch and spatial positions for each channel (axis 1).
pub fn channel_means<T: Scalar>(a: &Tensor<T>) -> Vec<T> {
    let (outer, c, inner) = channel_layout(a.shape());
    let mut m = vec![T::zero(); c];
    for b in 0..outer {
        for (ch, acc) in m.iter_mut().enumerate() {
            *acc += a.data()[(b * c + ch) * inner..][..inner].iter().copied().sum::<T>();
        }
    }
    let denom = T::lit((outer * inner).max(1) as f64);
    m.iter_mut().for_each(|v| *v /= denom);
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bittensor::binary_conv2d;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn kind_names_round_trip() {
        for k in BinarizerKind::ALL {
            assert_eq!(k.to_string().parse::<BinarizerKind>().unwrap(), k);
            assert_eq!(k.id().parse::<BinarizerKind>().unwrap(), k);
        }
        assert_eq!("Bi_Real".parse::<BinarizerKind>().unwrap(), BinarizerKind::BiReal);
        assert!("ternary".parse::<BinarizerKind>().is_err());
    }

    #[test]
    fn spec_validation() {
        let mut s = BinarizerSpec::new(BinarizerKind::ReCU);
        assert!(s.validate().is_ok());
        for bad in [0.5, 1.0, 0.2, f64::NAN] {
            s.tau = bad;
            assert!(s.validate().is_err());
        }
        let mut s = BinarizerSpec::new(BinarizerKind::Fda);
        s.fourier_terms = 0;
        assert!(s.validate().is_err());
        s.fourier_terms = 1;
        s.omega = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn weight_scale_examples() {
        let w = Tensor::new(vec![1.0, -2.0, 3.0], vec![3]).unwrap();
        assert_eq!(weight_scale(&w, Granularity::Layer).unwrap(), vec![2.0]);
        let w = Tensor::new(vec![1.0, 1.0, -3.0, -3.0], vec![2, 2]).unwrap();
        assert_eq!(weight_scale(&w, Granularity::Channel).unwrap(), vec![1.0, 3.0]);
        assert!(weight_scale(&Tensor::<f64>::zeros(vec![0]), Granularity::Layer).is_err());
    }

    #[test]
    fn channel_scale_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let w = rand_tensor(vec![8, 16], &mut rng);
        let got = weight_scale(&w, Granularity::Channel).unwrap();
        for o in 0..8 {
            let mut s = 0.0;
            for i in 0..16 {
                s += w.data()[o * 16 + i].abs();
            }
            assert!((got[o] - s / 16.0).abs() < 1e-15);
        }
    }

    #[test]
    fn activation_scale_constant_and_pointwise() {
        let a = Tensor::filled(vec![1, 3, 6, 6], -0.7f64);
        let k = xnor_activation_scale(&a, 3, 1, 1).unwrap();
        assert_eq!(k.shape(), &[1, 6, 6]);
        for i in 1..5 {
            for j in 1..5 {
                assert!((k.data()[i * 6 + j] - 0.7).abs() < 1e-15);
            }
        }
        assert!(k.data()[0] < 0.7);

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = rand_tensor(vec![2, 3, 4, 4], &mut rng);
        let k = xnor_activation_scale(&a, 1, 1, 0).unwrap();
        for n in 0..2 {
            for p in 0..16 {
                let want = (0..3).map(|c| a.data()[(n * 3 + c) * 16 + p].abs()).sum::<f64>() / 3.0;
                assert!((k.data()[n * 16 + p] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn activation_scale_matches_nested_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a = rand_tensor(vec![1, 3, 8, 8], &mut rng);
        let (stride, pad) = (2, 1);
        let k = xnor_activation_scale(&a, 3, stride, pad).unwrap();
        let ho = (8 + 2 - 3) / 2 + 1;
        for i in 0..ho {
            for j in 0..ho {
                let mut s = 0.0;
                for ki in 0..3 {
                    for kj in 0..3 {
                        let y = (i * stride + ki) as isize - 1;
                        let x = (j * stride + kj) as isize - 1;
                        if (0..8).contains(&y) && (0..8).contains(&x) {
                            for c in 0..3 {
                                s += a.data()[(c * 8 + y as usize) * 8 + x as usize].abs() / 3.0;
                            }
                        }
                    }
                }
                assert!((k.data()[i * ho + j] - s / 9.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gamma_expansion() {
        let s = xnorpp_gamma(vec![1.0], vec![1.0], vec![1.0]).unwrap();
        assert_eq!(s.weight_factor(0, 0, 0), 1.0);
        let s = xnorpp_gamma(vec![2.0], vec![3.0], vec![5.0]).unwrap();
        assert_eq!(s.weight_factor(0, 0, 0), 30.0);
        assert!(xnorpp_gamma(vec![1.0, -1.0], vec![1.0], vec![1.0]).is_err());
        assert!(xnorpp_gamma(vec![1.0], vec![0.0], vec![1.0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let pos = |n, rng: &mut ChaCha8Rng| (0..n).map(|_| rng.random_range(0.1..2.0)).collect::<Vec<f64>>();
        let (a, b, g) = (pos(4, &mut rng), pos(6, &mut rng), pos(6, &mut rng));
        let s = xnorpp_gamma(a.clone(), b.clone(), g.clone()).unwrap();
        assert_eq!(s.param_count(), 16);
        for o in 0..4 {
            for i in 0..6 {
                for j in 0..6 {
                    assert_eq!(s.weight_factor(o, i, j), a[o] * b[i] * g[j]);
                }
            }
        }
    }

    #[test]
    fn rsign_boundaries() {
        let a = Tensor::new(vec![0.0, 0.5, -0.5, 0.0], vec![2, 2]).unwrap();
        assert_eq!(rsign(&a, &[0.0, 0.0]).unwrap().data(), &[-1.0, 1.0, -1.0, -1.0]);
        assert_eq!(rsign(&a, &[0.0, 0.5]).unwrap().data(), &[-1.0, -1.0, -1.0, -1.0]);
        assert!(rsign(&a, &[0.0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let a = rand_tensor(vec![3, 4, 2, 2], &mut rng);
        let t: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
        let r = rsign(&a, &t).unwrap();
        for (idx, (&x, &y)) in a.data().iter().zip(r.data()).enumerate() {
            let c = (idx / 4) % 4;
            assert_eq!(y, if x > t[c] { 1.0 } else { -1.0 });
        }
    }

    #[test]
    fn recu_examples() {
        let w = Tensor::new(vec![-1.0, 1.0], vec![2]).unwrap();
        // clamp distance shrinks linearly as tau approaches 1
        for tau in [0.9, 0.99, 0.999] {
            let r = recu_transform(&w, tau).unwrap();
            for (g, want) in r.weights.data().iter().zip([-1.0f64, 1.0]) {
                assert!((g - want).abs() <= 2.0 * (1.0 - tau) + 1e-12);
            }
        }

        let w = Tensor::new(vec![-10.0, -1.0, 0.0, 1.0, 10.0], vec![5]).unwrap();
        let r = recu_transform(&w, 0.8).unwrap();
        let std = (202.0f64 / 5.0).sqrt();
        let mut y: Vec<f64> = w.data().iter().map(|v| v / std).collect();
        y.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // positions 0.2*4 = 0.8 and 0.8*4 = 3.2
        let lo = y[0] + 0.8 * (y[1] - y[0]);
        let hi = y[3] + 0.2 * (y[4] - y[3]);
        let want = [lo, -1.0 / std, 0.0, 1.0 / std, hi];
        for (g, w) in r.weights.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }

        let w = Tensor::new(vec![1.0, -2.0, 3.0], vec![3]).unwrap();
        assert_eq!(recu_transform(&w, 0.85).unwrap().b, 2.0);
    }

    #[test]
    fn recu_zero_variance_channel() {
        let w = Tensor::new(vec![0.3, 0.3, 0.3, 1.0, -1.0, 0.0], vec![2, 3]).unwrap();
        let r = recu_transform(&w, 0.85).unwrap();
        assert_eq!(r.channels[0].std, 1.0);
        assert!(r.weights.data()[..3].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_routing() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let w = rand_tensor(vec![4, 4, 3, 3], &mut rng);
        let a = rand_tensor(vec![2, 4, 5, 5], &mut rng);
        let geo = LayerGeometry::Conv { stride: 1, pad: 1 };
        let bnn = binarize_forward(&BinarizerSpec::new(BinarizerKind::Bnn), &w, &a, geo).unwrap();
        assert_eq!(bnn.scale.granularity(), Granularity::None);
        let xnor = binarize_forward(&BinarizerSpec::new(BinarizerKind::Xnor), &w, &a, geo).unwrap();
        assert_eq!(xnor.scale.weight, WeightScale::Channel(weight_scale(&w, Granularity::Channel).unwrap()));
        assert!(xnor.scale.activation_scale.is_some());
        let dorefa = binarize_forward(&BinarizerSpec::new(BinarizerKind::DoReFa), &w, &a, geo).unwrap();
        assert_eq!(dorefa.scale.granularity(), Granularity::Layer);
        let pp = binarize_forward(&BinarizerSpec::new(BinarizerKind::XnorPp), &w, &a, geo).unwrap();
        assert_eq!(pp.scale.granularity(), Granularity::Spatial);
        assert_eq!(pp.scale.param_count(), 4 + 5 + 5);

        let react = binarize_forward(&BinarizerSpec::new(BinarizerKind::ReActNet), &w, &a, geo).unwrap();
        let bireal = binarize_forward(&BinarizerSpec::new(BinarizerKind::BiReal), &w, &a, geo).unwrap();
        // random inputs never hit exactly zero, so the boundary never differs
        assert_eq!(react.activations, bireal.activations);
        assert_eq!(react.weights, bireal.weights);
    }

    #[test]
    fn forward_errors_name_algorithm() {
        let w = Tensor::<f64>::zeros(vec![4, 3]);
        let a = Tensor::<f64>::zeros(vec![2, 5]);
        let err = binarize_forward(&BinarizerSpec::new(BinarizerKind::Xnor), &w, &a, LayerGeometry::Linear).unwrap_err();
        assert!(matches!(err, Error::Algorithm { algorithm: BinarizerKind::Xnor, .. }));
        assert!(err.to_string().starts_with("XNOR:"));
    }

    #[test]
    fn forward_matches_binary_conv() {
        // the packed operands plus scale reproduce binary_conv2d's output
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let w = rand_tensor(vec![3, 2, 3, 3], &mut rng);
        let a = rand_tensor(vec![2, 2, 4, 4], &mut rng);
        for kind in BinarizerKind::ALL {
            let spec = BinarizerSpec::new(kind);
            let geo = LayerGeometry::Conv { stride: 1, pad: 1 };
            let b = binarize_forward(&spec, &w, &a, geo).unwrap();
            let ints = crate::bittensor::binary_gemm(&b.activations, &b.weights).unwrap();
            let (wq, _) = quantize_weights(&spec, &w).unwrap();
            let out = binary_conv2d(&a, &wq, 1, 1, &b.scale).unwrap();
            for n in 0..2 {
                for o in 0..3 {
                    for p in 0..16 {
                        let want = ints.get(n * 16 + p, o) as f64 * b.scale.output_factor(n, o, p / 4, p % 4);
                        assert!((out.data()[(n * 3 + o) * 16 + p] - want).abs() < 1e-12, "{kind}");
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn scale_positivity_and_sign_invariance(
            v in proptest::collection::vec(-10.0f64..10.0, 2..64),
            s in 0.01f64..100.0,
        ) {
            let n = v.len() / 2 * 2;
            let w = Tensor::new(v[..n].to_vec(), vec![2, n / 2]).unwrap();
            let ws = w.map(|x| x * s);
            let a = weight_scale(&w, Granularity::Channel).unwrap();
            let b = weight_scale(&ws, Granularity::Channel).unwrap();
            for (c, (x, y)) in a.iter().zip(&b).enumerate() {
                prop_assert!(*x >= 0.0);
                if w.row(c).iter().any(|v| *v != 0.0) {
                    prop_assert!(*x > 0.0);
                }
                prop_assert!((y - x * s).abs() <= 1e-12 * y.abs().max(1.0));
            }
            prop_assert_eq!(pack_signs(&w, n / 2).unwrap(), pack_signs(&ws, n / 2).unwrap());
        }

        #[test]
        fn recu_clamp_containment(
            v in proptest::collection::vec(-5.0f64..5.0, 3..100),
            tau in 0.51f64..0.99,
        ) {
            let n = v.len();
            let w = Tensor::new(v, vec![1, n]).unwrap();
            let r = recu_transform(&w, tau).unwrap();
            let ch = &r.channels[0];
            for &x in r.weights.data() {
                prop_assert!(x >= ch.lo && x <= ch.hi);
            }
        }

        #[test]
        fn threshold_zero_reduction(v in proptest::collection::vec(-1.0f64..1.0, 1..50)) {
            let n = v.len();
            let a = Tensor::new(v, vec![1, n]).unwrap();
            let r = rsign(&a, &vec![0.0; n]).unwrap();
            for (x, y) in a.data().iter().zip(r.data()) {
                if *x != 0.0 {
                    prop_assert_eq!(*y, sign(*x));
                } else {
                    prop_assert_eq!(*y, -1.0);
                }
            }
        }
    }
}
