//! Differentiable float path of a binarized linear or conv layer.
//!
//! The forward pass stores everything the backward needs. Operands are kept
//! as ±1 floats so training can run on the float GEMM; the packed kernel path
//! used at inference is checked against this one by the nn tests.

use super::{rsign_threshold_grad, routing, EstimatorKind, Routing};
use crate::binarize::{
    channel_layout, channel_means, recu_transform, recu_transform_frozen, weight_scale, xnor_activation_scale,
    xnor_activation_scale_linear, BinarizerKind, BinarizerSpec, Granularity, RecuOutput, WeightScale,
};
use crate::bittensor::{col2im, im2col_padded, ConvGeometry};
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::scalar::{sign, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Conv { kernel: usize, stride: usize, pad: usize },
}

/// How sign is realized in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantizer {
    /// True binarization.
    Sign,
    /// The estimator primitives replace sign (ReCU weights pass through
    /// unchanged), so the surrogate gradients become exact derivatives.
    Smooth,
}

/// Where FDA's activation mean shift comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum ShiftSource<T> {
    /// Per-channel mean of the current batch; gradient flows through it.
    Batch,
    /// Stored running mean; treated as a constant.
    Fixed(Vec<T>),
}

#[derive(Clone, Copy, Debug)]
pub struct LayerParams<'a, T> {
    pub weight: &'a Tensor<T>,
    pub thresholds: Option<&'a [T]>,
    pub gamma: Option<(&'a [T], &'a [T], &'a [T])>,
}

#[derive(Clone, Debug)]
pub struct ForwardOptions<'a, T> {
    pub quantizer: Quantizer,
    pub shift: ShiftSource<T>,
    /// Frozen ReCU clamp bounds, one pair per output channel.
    pub recu_bounds: Option<&'a [(T, T)]>,
}

impl<T> Default for ForwardOptions<'_, T> {
    fn default() -> Self {
        Self {
            quantizer: Quantizer::Sign,
            shift: ShiftSource::Batch,
            recu_bounds: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SavedForward<T> {
    kind: LayerKind,
    algorithm: BinarizerKind,
    routing: Routing,
    geometry: Option<ConvGeometry>,
    input: Tensor<T>,
    /// Activation after mean shift and threshold, right before sign.
    pre_sign: Tensor<T>,
    cols: Vec<T>,
    /// Weights after any transform, right before sign, `O x L`.
    wq: Vec<T>,
    qw: Vec<T>,
    acc: Vec<T>,
    weight_scale: WeightScale<T>,
    act_scale: Option<Vec<T>>,
    recu: Option<RecuOutput<T>>,
    batch_shift: bool,
    has_thresholds: bool,
    dims: (usize, usize, usize, usize),
    weight_shape: Vec<usize>,
}

impl<T: Scalar> SavedForward<T> {
    /// ReCU clamp bounds chosen in the forward pass, for freezing.
    pub fn recu_bounds(&self) -> Option<Vec<(T, T)>> {
        self.recu.as_ref().map(|r| r.channels.iter().map(|c| (c.lo, c.hi)).collect())
    }

    pub fn weight_scale(&self) -> &WeightScale<T> {
        &self.weight_scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<T> {
    pub weight: Tensor<T>,
    pub input: Tensor<T>,
    pub thresholds: Option<Vec<T>>,
    pub gamma: Option<(Vec<T>, Vec<T>, Vec<T>)>,
}

fn wfactor<T: Scalar>(s: &WeightScale<T>, o: usize, i: usize, j: usize) -> T {
    match s {
        WeightScale::None => T::one(),
        WeightScale::Layer(a) => *a,
        WeightScale::Channel(a) => a[o],
        WeightScale::Spatial { alpha, beta, gamma } => alpha[o] * beta[i] * gamma[j],
    }
}

fn map_per_channel<T: Scalar>(a: &Tensor<T>, f: impl Fn(usize, T) -> T) -> Tensor<T> {
    let (outer, c, inner) = channel_layout(a.shape());
    let mut out = a.clone();
    let d = out.data_mut();
    for b in 0..outer {
        for ch in 0..c {
            for x in &mut d[(b * c + ch) * inner..][..inner] {
                *x = f(ch, *x);
            }
        }
    }
    out
}

/// Forward pass in rows form; returns `N x O` (linear) or `N x O x Ho x Wo`.
pub fn layer_forward<T: Scalar>(
    spec: &BinarizerSpec,
    params: LayerParams<'_, T>,
    a: &Tensor<T>,
    kind: LayerKind,
    opts: &ForwardOptions<'_, T>,
) -> Result<(Tensor<T>, SavedForward<T>)> {
    forward_impl(spec, params, a, kind, opts).map_err(|e| e.in_algorithm(spec.kind))
}

fn forward_impl<T: Scalar>(
    spec: &BinarizerSpec,
    params: LayerParams<'_, T>,
    a: &Tensor<T>,
    kind: LayerKind,
    opts: &ForwardOptions<'_, T>,
) -> Result<(Tensor<T>, SavedForward<T>)> {
    spec.validate()?;
    a.ensure_finite()?;
    let w = params.weight;
    w.ensure_finite()?;
    let o = *w.shape().first().ok_or(Error::Empty("weight tensor"))?;
    let c = *a.shape().get(1).ok_or_else(|| Error::shape("input needs a channel axis"))?;

    let (geometry, n, ho, wo, l) = match kind {
        LayerKind::Linear => {
            if a.rank() != 2 || w.rank() != 2 || w.shape()[1] != c {
                return Err(Error::shape(format!("linear weight {:?} vs input {:?}", w.shape(), a.shape())));
            }
            (None, a.shape()[0], 1, 1, c)
        }
        LayerKind::Conv { kernel, stride, pad } => {
            if w.shape() != [o, c, kernel, kernel] {
                return Err(Error::shape(format!(
                    "conv weight {:?} vs input {:?} with kernel {kernel}",
                    w.shape(),
                    a.shape()
                )));
            }
            let g = ConvGeometry::new(a.shape(), kernel, stride, pad)?;
            let (ho, wo) = g.out_hw();
            (Some(g), g.batch, ho, wo, g.patch_len())
        }
    };
    let r = n * ho * wo;
    let route = routing(spec);

    // activation side
    let batch_shift = spec.kind.uses_mean_shift() && opts.shift == ShiftSource::Batch;
    let shift = if spec.kind.uses_mean_shift() {
        let m = match &opts.shift {
            ShiftSource::Batch => channel_means(a),
            ShiftSource::Fixed(m) => m.clone(),
        };
        if m.len() != c {
            return Err(Error::shape(format!("mean shift has {} entries for {c} channels", m.len())));
        }
        Some(m)
    } else {
        None
    };
    let has_thresholds = spec.kind.uses_thresholds();
    let thresholds: Option<Vec<T>> = has_thresholds.then(|| match params.thresholds {
        Some(t) => t.to_vec(),
        None => vec![T::zero(); c],
    });
    if let Some(t) = &thresholds {
        if t.len() != c {
            return Err(Error::shape(format!("thresholds have {} entries for {c} channels", t.len())));
        }
    }
    let pre_sign = map_per_channel(a, |ch, x| {
        let mut u = x;
        if let Some(m) = &shift {
            u -= m[ch];
        }
        if let Some(t) = &thresholds {
            u -= t[ch];
        }
        u
    });
    let qa = match opts.quantizer {
        Quantizer::Sign if has_thresholds => pre_sign.map(|u| if u > T::zero() { T::one() } else { -T::one() }),
        Quantizer::Sign => pre_sign.map(sign),
        Quantizer::Smooth => pre_sign.map(|u| route.activation.primitive(u)),
    };
    let cols = match geometry {
        None => qa.into_data(),
        Some(g) => im2col_padded(&qa, g.kernel, g.stride, g.pad, T::one())?.into_data(),
    };

    // weight side
    let recu = if spec.kind == BinarizerKind::ReCU {
        Some(match opts.recu_bounds {
            Some(b) => recu_transform_frozen(w, b)?,
            None => recu_transform(w, spec.tau)?,
        })
    } else {
        None
    };
    let wq_t = recu.as_ref().map_or_else(|| w.clone(), |r| r.weights.clone());
    let qw: Vec<T> = match opts.quantizer {
        Quantizer::Sign => wq_t.data().iter().map(|&v| sign(v)).collect(),
        Quantizer::Smooth => wq_t.data().iter().map(|&v| route.weight.primitive(v)).collect(),
    };
    let weight_scale = match spec.kind.weight_granularity() {
        Granularity::None => WeightScale::None,
        Granularity::Layer => WeightScale::Layer(weight_scale(&wq_t, Granularity::Layer)?[0]),
        Granularity::Channel => WeightScale::Channel(weight_scale(&wq_t, Granularity::Channel)?),
        Granularity::Spatial => {
            let (al, be, ga) = match params.gamma {
                Some((al, be, ga)) => (al.to_vec(), be.to_vec(), ga.to_vec()),
                None => (vec![T::one(); o], vec![T::one(); ho], vec![T::one(); wo]),
            };
            if al.len() != o || be.len() != ho || ga.len() != wo {
                return Err(Error::shape(format!(
                    "gamma factors {}/{}/{} for output {o}x{ho}x{wo}",
                    al.len(),
                    be.len(),
                    ga.len()
                )));
            }
            WeightScale::Spatial {
                alpha: al,
                beta: be,
                gamma: ga,
            }
        }
    };
    let act_scale = if spec.kind.uses_activation_scale() {
        Some(match geometry {
            None => xnor_activation_scale_linear(a)?.into_data(),
            Some(g) => xnor_activation_scale(a, g.kernel, g.stride, g.pad)?.into_data(),
        })
    } else {
        None
    };

    let mut acc = vec![T::zero(); r * o];
    gemm(
        T::one(),
        MatRef::new(&cols, r, l),
        MatRef::new(&qw, o, l).t(),
        T::zero(),
        &mut acc,
    );
    let hw = ho * wo;
    let mut rows = acc.clone();
    for (ri, row) in rows.chunks_mut(o).enumerate() {
        let p = ri % hw;
        let (i, j) = (p / wo, p % wo);
        let k = act_scale.as_ref().map_or(T::one(), |k| k[ri]);
        for (oc, v) in row.iter_mut().enumerate() {
            *v *= wfactor(&weight_scale, oc, i, j) * k;
        }
    }
    let out = match geometry {
        None => Tensor::new(rows, vec![n, o])?,
        Some(_) => crate::bittensor::conv::rows_to_nchw(&rows, n, o, ho, wo),
    };
    let saved = SavedForward {
        kind,
        algorithm: spec.kind,
        routing: route,
        geometry,
        input: a.clone(),
        pre_sign,
        cols,
        wq: wq_t.into_data(),
        qw,
        acc,
        weight_scale,
        act_scale,
        recu,
        batch_shift,
        has_thresholds,
        dims: (n, o, ho, wo),
        weight_shape: w.shape().to_vec(),
    };
    Ok((out, saved))
}

/// Gradients of a scalar loss with respect to the latent weights, the
/// layer input and any learnable threshold / `Γ` factors.
pub fn layer_backward<T: Scalar>(saved: &SavedForward<T>, upstream: &Tensor<T>) -> Result<LayerGrads<T>> {
    backward_impl(saved, upstream).map_err(|e| e.in_algorithm(saved.algorithm))
}

fn backward_impl<T: Scalar>(s: &SavedForward<T>, upstream: &Tensor<T>) -> Result<LayerGrads<T>> {
    let (n, o, ho, wo) = s.dims;
    let hw = ho * wo;
    let r = n * hw;
    let expected: Vec<usize> = match s.kind {
        LayerKind::Linear => vec![n, o],
        LayerKind::Conv { .. } => vec![n, o, ho, wo],
    };
    if upstream.shape() != expected.as_slice() {
        return Err(Error::shape(format!(
            "upstream {:?} does not match layer output {expected:?}",
            upstream.shape()
        )));
    }
    let g_rows = match s.kind {
        LayerKind::Linear => upstream.data().to_vec(),
        LayerKind::Conv { .. } => crate::bittensor::conv::nchw_to_rows(upstream),
    };
    let l = s.wq.len() / o;

    // through the output scaling
    let mut gy = vec![T::zero(); r * o];
    let mut d_alpha = vec![T::zero(); o];
    let mut d_beta = vec![T::zero(); ho];
    let mut d_gamma = vec![T::zero(); wo];
    let mut d_k = vec![T::zero(); r];
    for ri in 0..r {
        let p = ri % hw;
        let (i, j) = (p / wo, p % wo);
        let k = s.act_scale.as_ref().map_or(T::one(), |k| k[ri]);
        for oc in 0..o {
            let idx = ri * o + oc;
            let wf = wfactor(&s.weight_scale, oc, i, j);
            let g = g_rows[idx];
            gy[idx] = g * wf * k;
            let pk = g * s.acc[idx];
            d_k[ri] += pk * wf;
            match &s.weight_scale {
                WeightScale::None => {}
                WeightScale::Layer(_) => d_alpha[0] += pk * k,
                WeightScale::Channel(_) => d_alpha[oc] += pk * k,
                WeightScale::Spatial { alpha, beta, gamma } => {
                    d_alpha[oc] += pk * k * beta[i] * gamma[j];
                    d_beta[i] += pk * k * alpha[oc] * gamma[j];
                    d_gamma[j] += pk * k * alpha[oc] * beta[i];
                }
            }
        }
    }

    // through the product
    let mut g_cols = vec![T::zero(); r * l];
    gemm(
        T::one(),
        MatRef::new(&gy, r, o),
        MatRef::new(&s.qw, o, l),
        T::zero(),
        &mut g_cols,
    );
    let mut g_qw = vec![T::zero(); o * l];
    gemm(
        T::one(),
        MatRef::new(&gy, r, o).t(),
        MatRef::new(&s.cols, r, l),
        T::zero(),
        &mut g_qw,
    );

    // weight side
    let mut g_wq: Vec<T> = g_qw
        .iter()
        .zip(&s.wq)
        .map(|(&g, &v)| g * s.routing.weight.derivative(v))
        .collect();
    match &s.weight_scale {
        WeightScale::Layer(_) => {
            let inv = T::one() / T::lit(s.wq.len() as f64);
            for (g, &v) in g_wq.iter_mut().zip(&s.wq) {
                *g += d_alpha[0] * abs_grad(v) * inv;
            }
        }
        WeightScale::Channel(_) => {
            let inv = T::one() / T::lit(l as f64);
            for (idx, (g, &v)) in g_wq.iter_mut().zip(&s.wq).enumerate() {
                *g += d_alpha[idx / l] * abs_grad(v) * inv;
            }
        }
        _ => {}
    }
    let g_wq = Tensor::new(g_wq, s.weight_shape.clone())?;
    let weight = match &s.recu {
        Some(state) => {
            debug_assert_eq!(s.routing.weight.kind, EstimatorKind::ReCUChain);
            super::recu_chain(state, &g_wq)?
        }
        None => g_wq,
    };

    // activation side
    let g_qa = match s.geometry {
        None => Tensor::new(g_cols, s.input.shape().to_vec())?,
        Some(g) => col2im(&g_cols, &g)?,
    };
    let g_u: Vec<T> = g_qa
        .data()
        .iter()
        .zip(s.pre_sign.data())
        .map(|(&g, &u)| g * s.routing.activation.derivative(u))
        .collect();
    let g_u = Tensor::new(g_u, s.input.shape().to_vec())?;
    let (outer, c, inner) = channel_layout(s.input.shape());
    let channel_sum = |t: &Tensor<T>| {
        let mut acc = vec![T::zero(); c];
        for b in 0..outer {
            for (ch, v) in acc.iter_mut().enumerate() {
                *v += t.data()[(b * c + ch) * inner..][..inner].iter().copied().sum::<T>();
            }
        }
        acc
    };
    let thresholds = s
        .has_thresholds
        .then(|| channel_sum(&g_u).into_iter().map(rsign_threshold_grad).collect::<Vec<T>>());
    let mut input = if s.batch_shift {
        let cnt = T::lit((outer * inner) as f64);
        let means: Vec<T> = channel_sum(&g_u).into_iter().map(|v| v / cnt).collect();
        map_per_channel(&g_u, |ch, v| v - means[ch])
    } else {
        g_u
    };
    if s.act_scale.is_some() {
        add_act_scale_grad(s, &d_k, &mut input)?;
    }
    let gamma = matches!(s.weight_scale, WeightScale::Spatial { .. }).then_some((d_alpha, d_beta, d_gamma));
    Ok(LayerGrads {
        weight,
        input,
        thresholds,
        gamma,
    })
}

/// Subgradient of `|x|` (taken as `+1` at zero, matching `sign`).
#[inline]
fn abs_grad<T: Scalar>(x: T) -> T {
    sign(x)
}

fn add_act_scale_grad<T: Scalar>(s: &SavedForward<T>, d_k: &[T], input: &mut Tensor<T>) -> Result<()> {
    let a = &s.input;
    match s.geometry {
        None => {
            let f = a.inner_len();
            let inv = T::one() / T::lit(f as f64);
            let d = input.data_mut();
            for (idx, &x) in a.data().iter().enumerate() {
                d[idx] += d_k[idx / f] * abs_grad(x) * inv;
            }
        }
        Some(g) => {
            // K = mean filter of the channel-mean map; its adjoint is col2im
            // of the per-patch gradient spread uniformly over the window
            let single = ConvGeometry { channels: 1, ..g };
            let kk = g.kernel * g.kernel;
            let inv_k = T::one() / T::lit(kk as f64);
            let mut cols = vec![T::zero(); d_k.len() * kk];
            for (p, &dk) in d_k.iter().enumerate() {
                cols[p * kk..][..kk].iter_mut().for_each(|v| *v = dk * inv_k);
            }
            let d_map = col2im(&cols, &single)?;
            let plane = g.height * g.width;
            let inv_c = T::one() / T::lit(g.channels as f64);
            let d = input.data_mut();
            for nb in 0..g.batch {
                for ch in 0..g.channels {
                    for q in 0..plane {
                        let idx = (nb * g.channels + ch) * plane + q;
                        d[idx] += d_map.data()[nb * plane + q] * inv_c * abs_grad(a.data()[idx]);
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut impl Rng, lim: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-lim..lim))
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn bnn_linear_matches_manual_backprop() {
        let spec = BinarizerSpec::new(BinarizerKind::Bnn);
        let w = Tensor::new(vec![0.3, -0.2, 1.5, -0.7, 0.1, 0.4], vec![2, 3]).unwrap();
        let a = Tensor::new(vec![0.5, -2.0, 0.25], vec![1, 3]).unwrap();
        let p = LayerParams {
            weight: &w,
            thresholds: None,
            gamma: None,
        };
        let (out, saved) = layer_forward(&spec, p, &a, LayerKind::Linear, &ForwardOptions::default()).unwrap();
        // sign(a) = [1, -1, 1], sign(w) rows [1, -1, 1], [-1, 1, 1]
        assert_eq!(out.data(), &[3.0, -1.0]);
        let g = Tensor::new(vec![1.0, 2.0], vec![1, 2]).unwrap();
        let grads = layer_backward(&saved, &g).unwrap();
        // dL/dqa = g . qw = [1 - 2, -1 + 2, 1 + 2]; STE zeroes |a| >= 1
        assert_eq!(grads.input.data(), &[-1.0, 0.0, 3.0]);
        // dL/dqw = g^T qa; STE zeroes |w| >= 1
        assert_eq!(grads.weight.data(), &[1.0, -1.0, 0.0, 2.0, -2.0, 2.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for kind in BinarizerKind::ALL {
            let spec = BinarizerSpec::new(kind);
            let w = rand_tensor(vec![3, 2, 3, 3], &mut rng, 0.5);
            let a = rand_tensor(vec![2, 2, 4, 4], &mut rng, 1.0);
            let p = LayerParams {
                weight: &w,
                thresholds: None,
                gamma: None,
            };
            let lk = LayerKind::Conv {
                kernel: 3,
                stride: 1,
                pad: 1,
            };
            let (out, saved) = layer_forward(&spec, p, &a, lk, &ForwardOptions::default()).unwrap();
            let g = layer_backward(&saved, &Tensor::zeros(out.shape().to_vec())).unwrap();
            assert!(g.weight.data().iter().chain(g.input.data()).all(|v| *v == 0.0), "{kind}");
            if let Some(t) = g.thresholds {
                assert!(t.iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn thresholds_receive_negated_channel_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let spec = BinarizerSpec::new(BinarizerKind::ReActNet);
        let w = rand_tensor(vec![3, 4], &mut rng, 0.5);
        let a = rand_tensor(vec![5, 4], &mut rng, 1.0);
        let t = [0.1, -0.2, 0.0, 0.3];
        let p = LayerParams {
            weight: &w,
            thresholds: Some(&t),
            gamma: None,
        };
        let (out, saved) = layer_forward(&spec, p, &a, LayerKind::Linear, &ForwardOptions::default()).unwrap();
        let up = rand_tensor(out.shape().to_vec(), &mut rng, 1.0);
        let g = layer_backward(&saved, &up).unwrap();
        let thr = g.thresholds.unwrap();
        for ch in 0..4 {
            let s: f64 = (0..5).map(|n| g.input.data()[n * 4 + ch]).sum();
            assert!((thr[ch] + s).abs() < 1e-12);
        }
    }

    /// Central-difference check of every gradient for one conv layer in
    /// smooth mode, contracted with a random cotangent.
    fn check_layer(kind: BinarizerKind, lk: LayerKind, in_shape: Vec<usize>, w_shape: Vec<usize>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = BinarizerSpec::new(kind);
        let w = rand_tensor(w_shape, &mut rng, 0.9);
        let a = rand_tensor(in_shape, &mut rng, 1.2);
        let c = a.shape()[1];
        let thr: Vec<f64> = (0..c).map(|_| rng.random_range(-0.2..0.2)).collect();
        let o = w.shape()[0];
        let (ho, wo) = match lk {
            LayerKind::Linear => (1, 1),
            LayerKind::Conv { kernel, stride, pad } => {
                let g = ConvGeometry::new(a.shape(), kernel, stride, pad).unwrap();
                g.out_hw()
            }
        };
        let gam: (Vec<f64>, Vec<f64>, Vec<f64>) = (
            (0..o).map(|_| rng.random_range(0.5..1.5)).collect(),
            (0..ho).map(|_| rng.random_range(0.5..1.5)).collect(),
            (0..wo).map(|_| rng.random_range(0.5..1.5)).collect(),
        );
        let base = ForwardOptions {
            quantizer: Quantizer::Smooth,
            ..Default::default()
        };
        let run = |w: &Tensor<f64>, a: &Tensor<f64>, t: &[f64], g: &(Vec<f64>, Vec<f64>, Vec<f64>), bounds: Option<&[(f64, f64)]>| {
            let p = LayerParams {
                weight: w,
                thresholds: Some(t),
                gamma: Some((&g.0, &g.1, &g.2)),
            };
            let opts = ForwardOptions {
                recu_bounds: bounds,
                ..base.clone()
            };
            layer_forward(&spec, p, a, lk, &opts).unwrap()
        };
        let (out, saved) = run(&w, &a, &thr, &gam, None);
        let bounds = saved.recu_bounds();
        let bref = bounds.as_deref();
        let cot = rand_tensor(out.shape().to_vec(), &mut rng, 1.0);
        let grads = layer_backward(&saved, &cot).unwrap();
        let loss = |w: &Tensor<f64>, a: &Tensor<f64>, t: &[f64], g: &(Vec<f64>, Vec<f64>, Vec<f64>)| dot(&run(w, a, t, g, bref).0, &cot);
        let h = 1e-6;
        let close = |fd: f64, an: f64, what: &str| {
            assert!(
                (fd - an).abs() <= 1e-4 * (1.0 + fd.abs().max(an.abs())),
                "{kind} {what}: fd {fd} vs analytic {an}"
            );
        };
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp.data_mut()[i] += h;
            wm.data_mut()[i] -= h;
            close((loss(&wp, &a, &thr, &gam) - loss(&wm, &a, &thr, &gam)) / (2.0 * h), grads.weight.data()[i], "weight");
        }
        for i in 0..a.len() {
            let (mut ap, mut am) = (a.clone(), a.clone());
            ap.data_mut()[i] += h;
            am.data_mut()[i] -= h;
            close((loss(&w, &ap, &thr, &gam) - loss(&w, &am, &thr, &gam)) / (2.0 * h), grads.input.data()[i], "input");
        }
        if let Some(gt) = &grads.thresholds {
            for i in 0..c {
                let (mut tp, mut tm) = (thr.clone(), thr.clone());
                tp[i] += h;
                tm[i] -= h;
                close((loss(&w, &a, &tp, &gam) - loss(&w, &a, &tm, &gam)) / (2.0 * h), gt[i], "threshold");
            }
        }
        if let Some((da, db, dg)) = &grads.gamma {
            for (which, an) in [(0, da), (1, db), (2, dg)] {
                for i in 0..an.len() {
                    let (mut gp, mut gm) = (gam.clone(), gam.clone());
                    let (vp, vm) = match which {
                        0 => (&mut gp.0, &mut gm.0),
                        1 => (&mut gp.1, &mut gm.1),
                        _ => (&mut gp.2, &mut gm.2),
                    };
                    vp[i] += h;
                    vm[i] -= h;
                    close((loss(&w, &a, &thr, &gp) - loss(&w, &a, &thr, &gm)) / (2.0 * h), an[i], "gamma");
                }
            }
        }
    }

    #[test]
    fn smooth_conv_gradients_match_finite_differences() {
        for (s, kind) in BinarizerKind::ALL.into_iter().enumerate() {
            check_layer(
                kind,
                LayerKind::Conv {
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                },
                vec![2, 2, 5, 5],
                vec![3, 2, 3, 3],
                100 + s as u64,
            );
        }
    }

    #[test]
    fn smooth_linear_gradients_match_finite_differences() {
        for (s, kind) in BinarizerKind::ALL.into_iter().enumerate() {
            check_layer(kind, LayerKind::Linear, vec![4, 6], vec![3, 6], 200 + s as u64);
        }
    }
}
