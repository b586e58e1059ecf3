//! Small trainable stack: linear/conv blocks with BN and Hardtanh, softmax
//! cross-entropy, optimizers, and a seeded training loop.
//!
//! Every hidden block is `layer -> BN -> Hardtanh`; the classifier is a bare
//! linear layer. Training runs the float ±1 path from
//! [`crate::gradients::layer_forward`]; inference ([`Model::forward`]) packs
//! operands and runs the xnor/popcount kernels.

mod bn;
mod data;
mod optim;
mod train;

pub use bn::{fold_bn, BatchNorm, FoldedBn};
pub use data::{Dataset, Synthetic};
pub use optim::{Optimizer, OptimizerKind, Schedule};
pub use train::{accuracy, evaluate, hyper_sweep, train, EpochLog, SweepCell, SweepResult, TrainConfig, TrainLog};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binarize::{binarize_forward_with, channel_means, BinarizerSpec, LayerGeometry, LearnedParams};
use crate::bittensor::conv::{nchw_to_rows, rows_to_nchw};
use crate::bittensor::{binary_gemm, col2im, im2col, ConvGeometry};
use crate::error::{Error, Result};
use crate::gradients::{
    layer_backward, layer_forward, routing, ForwardOptions, LayerKind, LayerParams, Quantizer, Routing, SavedForward,
    ShiftSource,
};
use crate::linalg::{gemm, MatRef};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use bn::BnTape;

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerDef {
    Linear {
        out: usize,
    },
    Conv {
        out: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Per-sample input shape: `[features]` or `[channels, height, width]`.
    pub input: Vec<usize>,
    /// Hidden blocks, each followed by BN and Hardtanh.
    #[serde(default)]
    pub hidden: Vec<LayerDef>,
    pub classes: usize,
    #[serde(default = "yes")]
    pub first_last_full_precision: bool,
}

impl ModelConfig {
    pub fn mlp(input_dim: usize, widths: &[usize], classes: usize) -> Self {
        ModelConfig {
            input: vec![input_dim],
            hidden: widths.iter().map(|&out| LayerDef::Linear { out }).collect(),
            classes,
            first_last_full_precision: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub kind: LayerKind,
    pub binarized: bool,
    /// Latent full-precision weights.
    pub weight: Tensor<T>,
    /// Only on full-precision layers without BN.
    pub bias: Option<Vec<T>>,
    pub thresholds: Option<Vec<T>>,
    pub gamma: Option<(Vec<T>, Vec<T>, Vec<T>)>,
    /// Running activation mean for algorithms with a mean shift.
    pub running_shift: Option<Vec<T>>,
    /// Frozen ReCU clamp bounds; recomputed every forward when absent.
    pub recu_bounds: Option<Vec<(T, T)>>,
    pub bn: Option<BatchNorm<T>>,
    pub hardtanh: bool,
    /// Per-sample output shape.
    pub out_shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub blocks: Vec<Block<T>>,
    pub binarizer: Option<BinarizerSpec>,
    pub first_last_full_precision: bool,
    /// `Smooth` swaps sign for the estimator primitives (gradient checks).
    pub quantizer: Quantizer,
    input_shape: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for BN and mean shift.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug)]
enum LayerTape<T> {
    Binary(Box<SavedForward<T>>),
    Float { input: Tensor<T>, geometry: Option<ConvGeometry> },
}

#[derive(Clone, Debug)]
struct BlockTape<T> {
    in_shape: Vec<usize>,
    layer: LayerTape<T>,
    batch_shift: Option<Vec<T>>,
    bn: Option<BnTape<T>>,
    /// Hardtanh input.
    pre_act: Option<Tensor<T>>,
}

/// Everything [`Model::backward`] needs from one forward pass.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    blocks: Vec<BlockTape<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrads<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub thresholds: Option<Vec<T>>,
    pub gamma: Option<(Vec<T>, Vec<T>, Vec<T>)>,
    pub bn: Option<(Vec<T>, Vec<T>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    pub blocks: Vec<BlockGrads<T>>,
}

fn fan_in_uniform<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

fn hardtanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(-T::one()).min(T::one()))
}

impl<T: Scalar> Model<T> {
    /// Seeded uniform fan-in init. `binarizer = None` builds the
    /// full-precision twin.
    pub fn new(cfg: &ModelConfig, binarizer: Option<BinarizerSpec>, seed: u64) -> Result<Self> {
        if cfg.input.is_empty() || cfg.input.contains(&0) || cfg.classes == 0 {
            return Err(Error::param("model input shape and classes must be nonzero"));
        }
        if let Some(s) = &binarizer {
            s.validate()?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let defs: Vec<LayerDef> = cfg
            .hidden
            .iter()
            .copied()
            .chain(std::iter::once(LayerDef::Linear { out: cfg.classes }))
            .collect();
        let last = defs.len() - 1;
        let mut shape = cfg.input.clone();
        let mut blocks = Vec::with_capacity(defs.len());
        for (i, def) in defs.iter().enumerate() {
            let edge = i == 0 || i == last;
            let binarized = binarizer.is_some() && !(cfg.first_last_full_precision && edge);
            let head = i == last;
            let build = || -> Result<(LayerKind, Tensor<T>, Vec<usize>, usize, (usize, usize))> {
                Ok(match *def {
                    LayerDef::Linear { out } => {
                        let f: usize = shape.iter().product();
                        (LayerKind::Linear, Tensor::zeros(vec![out, f]), vec![out], f, (1, 1))
                    }
                    LayerDef::Conv { out, kernel, stride, pad } => {
                        let &[c, h, w] = shape.as_slice() else {
                            return Err(Error::shape(format!("conv needs a CxHxW input, got {shape:?}")));
                        };
                        let g = ConvGeometry::new(&[1, c, h, w], kernel, stride, pad)?;
                        let (ho, wo) = g.out_hw();
                        (
                            LayerKind::Conv { kernel, stride, pad },
                            Tensor::zeros(vec![out, c, kernel, kernel]),
                            vec![out, ho, wo],
                            c * kernel * kernel,
                            (ho, wo),
                        )
                    }
                })
            };
            let (kind, w0, out_shape, fan_in, (ho, wo)) = build().map_err(|e| e.in_layer(i))?;
            let o = out_shape[0];
            let c_in = if kind == LayerKind::Linear { w0.shape()[1] } else { shape[0] };
            let weight = fan_in_uniform(w0.shape().to_vec(), fan_in, &mut rng);
            let spec = binarizer.as_ref().filter(|_| binarized);
            blocks.push(Block {
                kind,
                binarized,
                weight,
                bias: (!binarized && head).then(|| vec![T::zero(); o]),
                thresholds: spec.filter(|s| s.kind.uses_thresholds()).map(|_| vec![T::zero(); c_in]),
                gamma: spec
                    .filter(|s| s.kind == crate::binarize::BinarizerKind::XnorPp)
                    .map(|_| (vec![T::one(); o], vec![T::one(); ho], vec![T::one(); wo])),
                running_shift: spec.filter(|s| s.kind.uses_mean_shift()).map(|_| vec![T::zero(); c_in]),
                recu_bounds: None,
                bn: (!head).then(|| BatchNorm::new(o)),
                hardtanh: !head,
                out_shape: out_shape.clone(),
            });
            shape = out_shape;
        }
        Ok(Model {
            blocks,
            binarizer,
            first_last_full_precision: cfg.first_last_full_precision,
            quantizer: Quantizer::Sign,
            input_shape: cfg.input.clone(),
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_shape[0])
    }

    pub fn routing(&self) -> Option<Routing> {
        self.binarizer.as_ref().map(routing)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() < 2 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape(format!(
                "input {:?} does not match per-sample shape {:?}",
                x.shape(),
                self.input_shape
            ))
            .in_layer(0));
        }
        Ok(())
    }

    fn flatten_for(kind: LayerKind, a: Tensor<T>) -> Result<Tensor<T>> {
        if kind == LayerKind::Linear && a.rank() > 2 {
            let n = a.shape()[0];
            let f = a.len() / n.max(1);
            a.reshape(vec![n, f])
        } else {
            Ok(a)
        }
    }

    fn spec(&self) -> Result<&BinarizerSpec> {
        self.binarizer
            .as_ref()
            .ok_or_else(|| Error::param("binarized block in a model without binarizer"))
    }

    /// Float-path forward returning logits and the tape for [`Model::backward`].
    pub fn forward_tape(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_input(x)?;
        let mut a = x.clone();
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let step = |a: Tensor<T>| -> Result<(Tensor<T>, BlockTape<T>)> {
                let in_shape = a.shape().to_vec();
                let a = Self::flatten_for(b.kind, a)?;
                let (z, layer, batch_shift) = if b.binarized {
                    let spec = self.spec()?;
                    let shift = match (mode, &b.running_shift) {
                        (Mode::Eval, Some(m)) => ShiftSource::Fixed(m.clone()),
                        _ => ShiftSource::Batch,
                    };
                    let batch_shift = (mode == Mode::Train && b.running_shift.is_some()).then(|| channel_means(&a));
                    let opts = ForwardOptions {
                        quantizer: self.quantizer,
                        shift,
                        recu_bounds: b.recu_bounds.as_deref(),
                    };
                    let params = LayerParams {
                        weight: &b.weight,
                        thresholds: b.thresholds.as_deref(),
                        gamma: b.gamma.as_ref().map(|(x, y, z)| (&x[..], &y[..], &z[..])),
                    };
                    let (z, saved) = layer_forward(spec, params, &a, b.kind, &opts)?;
                    (z, LayerTape::Binary(Box::new(saved)), batch_shift)
                } else {
                    let (z, geometry) = fp_forward(b, &a)?;
                    (z, LayerTape::Float { input: a, geometry }, None)
                };
                let (z, bn) = match (&b.bn, mode) {
                    (Some(bn), Mode::Train) => {
                        let (y, t) = bn.forward_train(&z)?;
                        (y, Some(t))
                    }
                    (Some(bn), Mode::Eval) => (bn.forward_eval(&z)?, None),
                    (None, _) => (z, None),
                };
                let (out, pre_act) = if b.hardtanh { (hardtanh(&z), Some(z)) } else { (z, None) };
                Ok((
                    out,
                    BlockTape {
                        in_shape,
                        layer,
                        batch_shift,
                        bn,
                        pre_act,
                    },
                ))
            };
            let (out, t) = step(a).map_err(|e| e.in_layer(i))?;
            tapes.push(t);
            a = out;
        }
        Ok((a, Tape { blocks: tapes }))
    }

    pub fn backward(&self, tape: &Tape<T>, dlogits: &Tensor<T>) -> Result<Grads<T>> {
        if tape.blocks.len() != self.blocks.len() {
            return Err(Error::shape("tape does not belong to this model"));
        }
        let mut g = dlogits.clone();
        let mut out: Vec<Option<BlockGrads<T>>> = vec![None; self.blocks.len()];
        for i in (0..self.blocks.len()).rev() {
            let (b, t) = (&self.blocks[i], &tape.blocks[i]);
            let step = |mut g: Tensor<T>| -> Result<(Tensor<T>, BlockGrads<T>)> {
                if let Some(pre) = &t.pre_act {
                    for (gv, &p) in g.data_mut().iter_mut().zip(pre.data()) {
                        if !(p > -T::one() && p < T::one()) {
                            *gv = T::zero();
                        }
                    }
                }
                let bn_grads = match (&b.bn, &t.bn) {
                    (Some(bn), Some(bt)) => {
                        let (dx, dgam, dbeta) = bn.backward(bt, &g)?;
                        g = dx;
                        Some((dgam, dbeta))
                    }
                    (Some(_), None) => return Err(Error::param("backward needs a training-mode tape")),
                    _ => None,
                };
                let mut grads = match &t.layer {
                    LayerTape::Binary(saved) => {
                        let lg = layer_backward(saved, &g)?;
                        BlockGrads {
                            weight: lg.weight,
                            bias: None,
                            thresholds: lg.thresholds,
                            gamma: lg.gamma,
                            bn: None,
                        }
                        .with_input(lg.input)
                    }
                    LayerTape::Float { input, geometry } => fp_backward(b, input, geometry.as_ref(), &g)?,
                };
                grads.0.bn = bn_grads;
                let dx = grads.1.reshape(t.in_shape.clone())?;
                Ok((dx, grads.0))
            };
            let (dx, bg) = step(g).map_err(|e| e.in_layer(i))?;
            out[i] = Some(bg);
            g = dx;
        }
        Ok(Grads {
            blocks: out.into_iter().map(|b| b.expect("every block visited")).collect(),
        })
    }

    /// Folds batch statistics from a training tape into running estimates.
    pub fn update_running(&mut self, tape: &Tape<T>) {
        for (b, t) in self.blocks.iter_mut().zip(&tape.blocks) {
            if let (Some(bn), Some(bt)) = (&mut b.bn, &t.bn) {
                bn.update_running(bt);
            }
            if let (Some(rs), Some(m)) = (&mut b.running_shift, &t.batch_shift) {
                let mom = T::lit(0.1);
                for (r, &v) in rs.iter_mut().zip(m) {
                    *r = (T::one() - mom) * *r + mom * v;
                }
            }
        }
    }

    /// Stores the ReCU clamp bounds chosen on `x`, so later passes treat the
    /// quantiles as constants.
    pub fn freeze_recu_bounds(&mut self, x: &Tensor<T>) -> Result<()> {
        let (_, tape) = self.forward_tape(x, Mode::Train)?;
        for (b, t) in self.blocks.iter_mut().zip(&tape.blocks) {
            if let LayerTape::Binary(saved) = &t.layer {
                b.recu_bounds = saved.recu_bounds();
            }
        }
        Ok(())
    }

    fn learnable(&self) -> crate::binarize::Learnable {
        self.binarizer.as_ref().map(|s| s.learnable()).unwrap_or_default()
    }

    /// Trainable buffers in a fixed order matching [`Grads::slots`].
    pub fn param_slots_mut(&mut self) -> Vec<&mut [T]> {
        let learn = self.learnable();
        let mut v: Vec<&mut [T]> = Vec::new();
        for b in &mut self.blocks {
            v.push(b.weight.data_mut());
            if let Some(bias) = &mut b.bias {
                v.push(bias);
            }
            if let (true, Some(t)) = (learn.thresholds, &mut b.thresholds) {
                v.push(t);
            }
            if let (true, Some((x, y, z))) = (learn.gamma, &mut b.gamma) {
                v.push(x);
                v.push(y);
                v.push(z);
            }
            if let Some(bn) = &mut b.bn {
                v.push(&mut bn.gamma);
                v.push(&mut bn.beta);
            }
        }
        v
    }

    pub fn param_count(&mut self) -> usize {
        self.param_slots_mut().iter().map(|s| s.len()).sum()
    }

    /// Inference through the packed kernels with running statistics.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer(x, false)
    }

    /// Like [`Model::forward`] with each binarized layer's scale and BN
    /// replaced by the folded per-channel affine.
    pub fn forward_folded(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer(x, true)
    }

    fn infer(&self, x: &Tensor<T>, fold: bool) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut a = x.clone();
        for (i, b) in self.blocks.iter().enumerate() {
            let step = |a: Tensor<T>| -> Result<Tensor<T>> {
                let a = Self::flatten_for(b.kind, a)?;
                let mut bn_done = false;
                let z = if b.binarized {
                    let (geometry, n) = match b.kind {
                        LayerKind::Linear => (LayerGeometry::Linear, a.shape()[0]),
                        LayerKind::Conv { stride, pad, .. } => (LayerGeometry::Conv { stride, pad }, a.shape()[0]),
                    };
                    let learned = LearnedParams {
                        thresholds: b.thresholds.clone(),
                        gamma: b.gamma.clone(),
                        shift: b.running_shift.clone(),
                    };
                    let bin = binarize_forward_with(self.spec()?, &b.weight, &a, geometry, &learned)?;
                    let ints = binary_gemm(&bin.activations, &bin.weights)?;
                    let o = ints.cols;
                    let (ho, wo) = match b.kind {
                        LayerKind::Linear => (1, 1),
                        LayerKind::Conv { .. } => (b.out_shape[1], b.out_shape[2]),
                    };
                    let folded = match (&b.bn, fold) {
                        (Some(bn), true) => {
                            bn_done = true;
                            Some(fold_bn(&bin.scale, bn)?)
                        }
                        _ => None,
                    };
                    let hw = ho * wo;
                    let mut rows = vec![T::zero(); ints.rows * o];
                    for r in 0..ints.rows {
                        let (nn, p) = (r / hw, r % hw);
                        let (ii, jj) = (p / wo, p % wo);
                        for oc in 0..o {
                            let dot = T::lit(ints.get(r, oc) as f64);
                            rows[r * o + oc] = match &folded {
                                Some(f) => {
                                    let k = bin
                                        .scale
                                        .activation_scale
                                        .as_ref()
                                        .map_or(T::one(), |k| k.data()[(nn * ho + ii) * wo + jj]);
                                    f.multiplier[oc] * k * dot + f.bias[oc]
                                }
                                None => bin.scale.output_factor(nn, oc, ii, jj) * dot,
                            };
                        }
                    }
                    match b.kind {
                        LayerKind::Linear => Tensor::new(rows, vec![n, o])?,
                        LayerKind::Conv { .. } => rows_to_nchw(&rows, n, o, ho, wo),
                    }
                } else {
                    fp_forward(b, &a)?.0
                };
                let z = match (&b.bn, bn_done) {
                    (Some(bn), false) => bn.forward_eval(&z)?,
                    _ => z,
                };
                Ok(if b.hardtanh { hardtanh(&z) } else { z })
            };
            a = step(a).map_err(|e| e.in_layer(i))?;
        }
        Ok(a)
    }
}

impl<T: Scalar> BlockGrads<T> {
    fn with_input(self, input: Tensor<T>) -> (Self, Tensor<T>) {
        (self, input)
    }
}

impl<T: Scalar> Grads<T> {
    /// Gradient buffers in the order of [`Model::param_slots_mut`].
    pub fn slots(&self, model: &Model<T>) -> Vec<&[T]> {
        let learn = model.learnable();
        let mut v: Vec<&[T]> = Vec::new();
        for (g, b) in self.blocks.iter().zip(&model.blocks) {
            v.push(g.weight.data());
            if b.bias.is_some() {
                v.push(g.bias.as_deref().unwrap_or(&[]));
            }
            if learn.thresholds && b.thresholds.is_some() {
                v.push(g.thresholds.as_deref().unwrap_or(&[]));
            }
            if learn.gamma && b.gamma.is_some() {
                match &g.gamma {
                    Some((x, y, z)) => {
                        v.push(x);
                        v.push(y);
                        v.push(z);
                    }
                    None => v.extend([&[][..], &[], &[]]),
                }
            }
            if b.bn.is_some() {
                match &g.bn {
                    Some((x, y)) => {
                        v.push(x);
                        v.push(y);
                    }
                    None => v.extend([&[][..], &[]]),
                }
            }
        }
        v
    }
}

fn fp_forward<T: Scalar>(b: &Block<T>, a: &Tensor<T>) -> Result<(Tensor<T>, Option<ConvGeometry>)> {
    let o = b.weight.shape()[0];
    let add_bias = |rows: &mut [T]| {
        if let Some(bias) = &b.bias {
            for row in rows.chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bias) {
                    *v += bb;
                }
            }
        }
    };
    match b.kind {
        LayerKind::Linear => {
            let (n, f) = (a.shape()[0], b.weight.shape()[1]);
            if a.rank() != 2 || a.shape()[1] != f {
                return Err(Error::shape(format!("linear weight {:?} vs input {:?}", b.weight.shape(), a.shape())));
            }
            let mut rows = vec![T::zero(); n * o];
            gemm(
                T::one(),
                MatRef::new(a.data(), n, f),
                MatRef::new(b.weight.data(), o, f).t(),
                T::zero(),
                &mut rows,
            );
            add_bias(&mut rows);
            Ok((Tensor::new(rows, vec![n, o])?, None))
        }
        LayerKind::Conv { kernel, stride, pad } => {
            let g = ConvGeometry::new(a.shape(), kernel, stride, pad)?;
            if g.channels != b.weight.shape()[1] {
                return Err(Error::shape(format!("conv weight {:?} vs input {:?}", b.weight.shape(), a.shape())));
            }
            let cols = im2col(a, kernel, stride, pad)?;
            let (l, r) = (g.patch_len(), g.patches());
            let mut rows = vec![T::zero(); r * o];
            gemm(
                T::one(),
                MatRef::new(cols.data(), r, l),
                MatRef::new(b.weight.data(), o, l).t(),
                T::zero(),
                &mut rows,
            );
            add_bias(&mut rows);
            let (ho, wo) = g.out_hw();
            Ok((rows_to_nchw(&rows, g.batch, o, ho, wo), Some(g)))
        }
    }
}

fn fp_backward<T: Scalar>(
    b: &Block<T>,
    input: &Tensor<T>,
    geometry: Option<&ConvGeometry>,
    g: &Tensor<T>,
) -> Result<(BlockGrads<T>, Tensor<T>)> {
    let o = b.weight.shape()[0];
    let (grows, cols, r, l) = match geometry {
        None => (g.data().to_vec(), input.data().to_vec(), input.shape()[0], input.shape()[1]),
        Some(geo) => {
            let k = match b.kind {
                LayerKind::Conv { kernel, .. } => kernel,
                LayerKind::Linear => 1,
            };
            let cols = im2col(input, k, geo.stride, geo.pad)?;
            (nchw_to_rows(g), cols.into_data(), geo.patches(), geo.patch_len())
        }
    };
    let mut dw = vec![T::zero(); o * l];
    gemm(
        T::one(),
        MatRef::new(&grows, r, o).t(),
        MatRef::new(&cols, r, l),
        T::zero(),
        &mut dw,
    );
    let mut dcols = vec![T::zero(); r * l];
    gemm(
        T::one(),
        MatRef::new(&grows, r, o),
        MatRef::new(b.weight.data(), o, l),
        T::zero(),
        &mut dcols,
    );
    let bias = b.bias.as_ref().map(|_| {
        let mut s = vec![T::zero(); o];
        for row in grows.chunks(o) {
            for (acc, &v) in s.iter_mut().zip(row) {
                *acc += v;
            }
        }
        s
    });
    let dx = match geometry {
        None => Tensor::new(dcols, vec![r, l])?,
        Some(geo) => col2im(&dcols, geo)?,
    };
    Ok((
        BlockGrads {
            weight: Tensor::new(dw, b.weight.shape().to_vec())?,
            bias,
            thresholds: None,
            gamma: None,
            bn: None,
        },
        dx,
    ))
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::shape(format!("logits {:?} for {} labels", logits.shape(), labels.len())));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    let inv_n = T::one() / T::lit(n as f64);
    let mut grad = vec![T::zero(); n * k];
    let mut loss = T::zero();
    for (i, (&y, row)) in labels.iter().zip(logits.data().chunks(k)).enumerate() {
        if y >= k {
            return Err(Error::param(format!("label {y} for {k} classes")));
        }
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        loss += (z.ln() + m - row[y]) * inv_n;
        for (j, &v) in row.iter().enumerate() {
            let p = (v - m).exp() / z;
            grad[i * k + j] = (p - if j == y { T::one() } else { T::zero() }) * inv_n;
        }
    }
    Ok((loss, Tensor::new(grad, vec![n, k])?))
}

#[cfg(test)]
mod tests;
