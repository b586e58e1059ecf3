//! Parameter and FLOP accounting over a layer list, and the theoretical
//! compression/speedup ratios of a binarized model.
//!
//! FLOPs convention: one multiply-add is 2 FLOPs; a lone multiply or add is 1.
//! Conv FLOPs are `2 * c_in * k^2 * c_out * h_out * w_out`, linear FLOPs
//! `2 * in * out`. BN, activations and pooling contribute no FLOPs. Binarized
//! layers count in full toward the totals; their 1/32 storage and 1/64 compute
//! discount is applied only by [`ratios`].

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binarize::{BinarizerKind, Granularity};
use crate::error::{Error, Result};

pub const RESNET18_TOML: &str = include_str!("../data/resnet18.toml");
pub const RESNET18_CIFAR_TOML: &str = include_str!("../data/resnet18_cifar.toml");

pub const FLOPS_CONVENTION: &str = "multiply-add = 2 FLOPs; conv 2*c_in*k^2*c_out*h_out*w_out; \
linear 2*in*out; scale application 1 multiply-add per binarized output element; \
XNOR K and XNOR++ Gamma expansion 1 further multiply-add per output element; \
ReActNet threshold shift 1 add per binarized input element";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv2d,
    Linear,
    Bn,
    Activation,
    Pool,
}

fn one() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(default)]
    pub name: String,
    pub kind: LayerKind,
    pub c_in: u64,
    pub c_out: u64,
    /// Pool kernel 0 means global pooling.
    #[serde(default = "one")]
    pub kernel: u64,
    #[serde(default = "one")]
    pub stride: u64,
    #[serde(default)]
    pub pad: u64,
    pub in_size: [u64; 2],
    #[serde(default)]
    pub binarized: bool,
    #[serde(default)]
    pub bias: bool,
    /// Extra FP32 parameters the binarizer attaches to this layer.
    #[serde(default)]
    pub scale_params: u64,
    /// Extra full-precision FLOPs per sample the binarizer adds at inference.
    #[serde(default)]
    pub extra_flops: u64,
    /// Index of the layer whose output feeds this one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_from: Option<usize>,
    /// Side-branch layers never feed the main path by default.
    #[serde(default)]
    pub branch: bool,
}

impl LayerSpec {
    pub fn out_size(&self) -> Result<[u64; 2]> {
        let [h, w] = self.in_size;
        match self.kind {
            LayerKind::Bn | LayerKind::Activation => Ok([h, w]),
            LayerKind::Linear => Ok([1, 1]),
            LayerKind::Pool if self.kernel == 0 => Ok([1, 1]),
            LayerKind::Conv2d | LayerKind::Pool => {
                if self.stride == 0 || self.kernel == 0 {
                    return Err(Error::param("kernel and stride must be positive"));
                }
                if h + 2 * self.pad < self.kernel || w + 2 * self.pad < self.kernel {
                    return Err(Error::shape(format!(
                        "kernel {} exceeds padded input {h}x{w} (pad {})",
                        self.kernel, self.pad
                    )));
                }
                Ok([
                    (h + 2 * self.pad - self.kernel) / self.stride + 1,
                    (w + 2 * self.pad - self.kernel) / self.stride + 1,
                ])
            }
        }
    }

    fn out_hw(&self) -> u64 {
        self.out_size().map_or(0, |[h, w]| h * w)
    }

    pub fn out_elements(&self) -> u64 {
        self.c_out * self.out_hw()
    }

    pub fn in_elements(&self) -> u64 {
        self.c_in * self.in_size[0] * self.in_size[1]
    }

    /// Layer parameters, excluding `scale_params`.
    pub fn params(&self) -> u64 {
        match self.kind {
            LayerKind::Conv2d => {
                self.c_in * self.kernel * self.kernel * self.c_out + if self.bias { self.c_out } else { 0 }
            }
            LayerKind::Linear => self.c_in * self.c_out + if self.bias { self.c_out } else { 0 },
            LayerKind::Bn => 2 * self.c_out,
            LayerKind::Activation | LayerKind::Pool => 0,
        }
    }

    /// Layer FLOPs, excluding `extra_flops`.
    pub fn flops(&self) -> u64 {
        match self.kind {
            LayerKind::Conv2d => 2 * self.c_in * self.kernel * self.kernel * self.c_out * self.out_hw(),
            LayerKind::Linear => 2 * self.c_in * self.c_out,
            _ => 0,
        }
    }

    fn binarizable(&self) -> bool {
        matches!(self.kind, LayerKind::Conv2d | LayerKind::Linear)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default)]
    pub name: String,
    /// `[channels, height, width]` checked against the first layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<[u64; 3]>,
    #[serde(default, rename = "layer")]
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let m: ModelSpec = toml::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn resnet18() -> Self {
        Self::from_toml_str(RESNET18_TOML).expect("bundled resnet18 spec is valid")
    }

    pub fn resnet18_cifar() -> Self {
        Self::from_toml_str(RESNET18_CIFAR_TOML).expect("bundled resnet18_cifar spec is valid")
    }

    /// Checks channel and spatial chaining. Errors carry the layer index.
    pub fn validate(&self) -> Result<()> {
        let mut last_main: Option<usize> = None;
        for (i, l) in self.layers.iter().enumerate() {
            let check = || -> Result<()> {
                if l.binarized && !l.binarizable() {
                    return Err(Error::param(format!("{:?} layers cannot be binarized", l.kind)));
                }
                if l.c_in == 0 || l.c_out == 0 {
                    return Err(Error::param("channel counts must be positive"));
                }
                if matches!(l.kind, LayerKind::Bn | LayerKind::Activation | LayerKind::Pool) && l.c_in != l.c_out {
                    return Err(Error::shape(format!("{:?} must keep channels, got {} -> {}", l.kind, l.c_in, l.c_out)));
                }
                if l.kind == LayerKind::Linear && l.in_size != [1, 1] {
                    return Err(Error::shape("linear layers take in_size [1, 1]"));
                }
                l.out_size()?;
                let pred = match l.input_from {
                    Some(j) if j >= i => return Err(Error::param(format!("input_from {j} is not an earlier layer"))),
                    Some(j) => Some(j),
                    None if l.branch => i.checked_sub(1),
                    None => last_main,
                };
                let (c, [h, w]) = match pred {
                    Some(j) => {
                        let p = &self.layers[j];
                        (p.c_out, p.out_size()?)
                    }
                    None => match self.input {
                        Some([c, h, w]) => (c, [h, w]),
                        None => return Ok(()),
                    },
                };
                let ok = if l.kind == LayerKind::Linear {
                    c * h * w == l.c_in
                } else {
                    c == l.c_in && [h, w] == l.in_size
                };
                if ok {
                    Ok(())
                } else {
                    Err(Error::shape(format!(
                        "input {c}x{h}x{w} does not match declared {}x{}x{}",
                        l.c_in, l.in_size[0], l.in_size[1]
                    )))
                }
            };
            check().map_err(|e| e.in_layer(i))?;
            if !l.branch {
                last_main = Some(i);
            }
        }
        Ok(())
    }

    /// Copy with every binarizable layer flagged `binarized` except those
    /// named in `keep_fp`.
    pub fn binarize_all_except(&self, keep_fp: &[&str]) -> Self {
        let mut m = self.clone();
        for l in &mut m.layers {
            l.binarized = l.binarizable() && !keep_fp.contains(&l.name.as_str());
        }
        m
    }

    /// Copy with each binarized layer's `scale_params` and `extra_flops` set
    /// for `kind`. Non-binarized layers get zero overhead.
    pub fn with_algorithm(&self, kind: BinarizerKind) -> Self {
        let mut m = self.clone();
        for l in &mut m.layers {
            let o = if l.binarized { overhead(kind, l) } else { Overhead::default() };
            l.scale_params = o.scale_params;
            l.extra_flops = o.extra_flops;
        }
        m
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overhead {
    pub scale_params: u64,
    pub extra_flops: u64,
}

/// Inference-time cost a binarizer adds to one binarized layer.
pub fn overhead(kind: BinarizerKind, l: &LayerSpec) -> Overhead {
    let e = l.out_elements();
    let [ho, wo] = l.out_size().unwrap_or([0, 0]);
    let scale_params = match kind.weight_granularity() {
        Granularity::None => 0,
        Granularity::Layer => 1,
        Granularity::Channel => l.c_out,
        Granularity::Spatial => l.c_out + ho + wo,
    };
    let mut extra_flops = if scale_params == 0 { 0 } else { 2 * e };
    match kind {
        BinarizerKind::Xnor | BinarizerKind::XnorPp => extra_flops += 2 * e,
        BinarizerKind::ReActNet => extra_flops += l.in_elements(),
        _ => {}
    }
    Overhead {
        scale_params,
        extra_flops,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub params_total: u64,
    pub params_fp_remaining: u64,
    pub flops_total: u64,
    pub flops_fp_remaining: u64,
}

pub fn count(model: &ModelSpec) -> Result<Counts> {
    model.validate()?;
    let mut c = Counts::default();
    for l in &model.layers {
        let (p, f) = (l.params(), l.flops());
        c.params_total += p + l.scale_params;
        c.flops_total += f + l.extra_flops;
        c.params_fp_remaining += l.scale_params;
        c.flops_fp_remaining += l.extra_flops;
        if !l.binarized {
            c.params_fp_remaining += p;
            c.flops_fp_remaining += f;
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Ratios {
    pub r_c: f64,
    pub r_s: f64,
}

pub fn ratios(c: &Counts) -> Result<Ratios> {
    if c.params_total == 0 || c.flops_total == 0 {
        return Err(Error::ZeroDenominator("model has no parameters or FLOPs".into()));
    }
    if c.params_fp_remaining > c.params_total || c.flops_fp_remaining > c.flops_total {
        return Err(Error::param("full-precision remainder exceeds total"));
    }
    let ratio = |total: u64, fp: u64, discount: f64| {
        let (t, f) = (total as f64, fp as f64);
        t / ((t - f) / discount + f)
    };
    Ok(Ratios {
        r_c: ratio(c.params_total, c.params_fp_remaining, 32.0),
        r_s: ratio(c.flops_total, c.flops_fp_remaining, 64.0),
    })
}

pub fn om_comp(r: &Ratios) -> Result<f64> {
    crate::metrics::om_comp(r.r_c, r.r_s)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityRow {
    pub algorithm: BinarizerKind,
    pub counts: Counts,
    pub r_c: f64,
    pub r_s: f64,
    pub om_comp: f64,
}

/// Counts and ratios for each algorithm over the same binarized layout.
pub fn report(model: &ModelSpec, kinds: &[BinarizerKind]) -> Result<Vec<ComplexityRow>> {
    kinds
        .iter()
        .map(|&k| {
            let counts = count(&model.with_algorithm(k)).map_err(|e| e.in_algorithm(k))?;
            let r = ratios(&counts)?;
            Ok(ComplexityRow {
                algorithm: k,
                counts,
                r_c: r.r_c,
                r_s: r.r_s,
                om_comp: om_comp(&r)?,
            })
        })
        .collect()
}

pub fn report_markdown(model: &ModelSpec, rows: &[ComplexityRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model: {}", model.name);
    let _ = writeln!(s, "flops convention: {FLOPS_CONVENTION}\n");
    let _ = writeln!(s, "| algorithm | params | fp params | FLOPs | fp FLOPs | r_c | r_s | OM_comp |");
    let _ = writeln!(s, "|---|---:|---:|---:|---:|---:|---:|---:|");
    for r in rows {
        let c = &r.counts;
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {:.3} | {:.3} | {:.3} |",
            r.algorithm, c.params_total, c.params_fp_remaining, c.flops_total, c.flops_fp_remaining, r.r_c, r.r_s, r.om_comp
        );
    }
    s
}
