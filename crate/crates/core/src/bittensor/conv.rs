use super::{binary_gemm, pack_rows};
use crate::binarize::ScaleStructure;
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Square-kernel 2-D convolution geometry over an `N x C x H x W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::param("kernel and stride must be positive"));
    }
    let padded = input + 2 * pad;
    if kernel > padded {
        return Err(Error::shape(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn new(input_shape: &[usize], kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        let &[batch, channels, height, width] = input_shape else {
            return Err(Error::shape(format!(
                "expected N x C x H x W input, got {input_shape:?}"
            )));
        };
        let g = Self {
            batch,
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
        };
        g.out_h()?;
        g.out_w()?;
        Ok(g)
    }

    pub fn out_h(&self) -> Result<usize> {
        conv_out_size(self.height, self.kernel, self.stride, self.pad)
    }

    pub fn out_w(&self) -> Result<usize> {
        conv_out_size(self.width, self.kernel, self.stride, self.pad)
    }

    /// `(out_h, out_w)`; only valid on a constructed geometry.
    pub fn out_hw(&self) -> (usize, usize) {
        (self.out_h().expect("validated"), self.out_w().expect("validated"))
    }

    /// Number of receptive fields (rows of the lowered matrix).
    pub fn patches(&self) -> usize {
        let (ho, wo) = self.out_hw();
        self.batch * ho * wo
    }

    /// Receptive field length (columns of the lowered matrix).
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Patch unrolling with zero padding. Row `(n, i, j)` holds the receptive
/// field of output position `(i, j)` of sample `n`, columns ordered `(c, ki, kj)`.
pub fn im2col<T: Scalar>(input: &Tensor<T>, kernel: usize, stride: usize, pad: usize) -> Result<Tensor<T>> {
    im2col_padded(input, kernel, stride, pad, T::zero())
}

/// [`im2col`] with an arbitrary constant written at padded positions.
pub fn im2col_padded<T: Scalar>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
    pad_value: T,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), kernel, stride, pad)?;
    let (ho, wo) = g.out_hw();
    let (h, w, k) = (g.height, g.width, g.kernel);
    let cols = g.patch_len();
    let mut out = vec![pad_value; g.patches() * cols];
    let x = input.data();
    for n in 0..g.batch {
        for i in 0..ho {
            for j in 0..wo {
                let row = &mut out[((n * ho + i) * wo + j) * cols..][..cols];
                for c in 0..g.channels {
                    let plane = &x[(n * g.channels + c) * h * w..][..h * w];
                    for ki in 0..k {
                        let y = (i * stride + ki) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let xx = (j * stride + kj) as isize - pad as isize;
                            if xx >= 0 && xx < w as isize {
                                row[(c * k + ki) * k + kj] = plane[y as usize * w + xx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(out, vec![g.patches(), cols])
}

/// Adjoint of [`im2col`]: scatters patch rows back, summing overlaps and
/// dropping padded positions.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Result<Tensor<T>> {
    if cols.len() != g.patches() * g.patch_len() {
        return Err(Error::shape("lowered matrix does not match geometry"));
    }
    let (ho, wo) = g.out_hw();
    let (h, w, k) = (g.height, g.width, g.kernel);
    let pl = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.channels * h * w];
    for n in 0..g.batch {
        for i in 0..ho {
            for j in 0..wo {
                let row = &cols[((n * ho + i) * wo + j) * pl..][..pl];
                for c in 0..g.channels {
                    let plane = &mut out[(n * g.channels + c) * h * w..][..h * w];
                    for ki in 0..k {
                        let y = (i * g.stride + ki) as isize - g.pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let xx = (j * g.stride + kj) as isize - g.pad as isize;
                            if xx >= 0 && xx < w as isize {
                                plane[y as usize * w + xx as usize] += row[(c * k + ki) * k + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(out, vec![g.batch, g.channels, h, w])
}

/// `[N*Ho*Wo, O]` patch-major rows to `N x O x Ho x Wo`.
pub(crate) fn rows_to_nchw<T: Scalar>(rows: &[T], n: usize, o: usize, ho: usize, wo: usize) -> Tensor<T> {
    let hw = ho * wo;
    let mut out = vec![T::zero(); n * o * hw];
    for b in 0..n {
        for p in 0..hw {
            let src = &rows[(b * hw + p) * o..][..o];
            for (c, &v) in src.iter().enumerate() {
                out[(b * o + c) * hw + p] = v;
            }
        }
    }
    Tensor::new(out, vec![n, o, ho, wo]).expect("sizes match")
}

/// Inverse of [`rows_to_nchw`].
pub(crate) fn nchw_to_rows<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let &[n, o, ho, wo] = x.shape() else {
        panic!("expected rank-4 tensor");
    };
    let hw = ho * wo;
    let mut rows = vec![T::zero(); n * o * hw];
    let d = x.data();
    for b in 0..n {
        for c in 0..o {
            for p in 0..hw {
                rows[(b * hw + p) * o + c] = d[(b * o + c) * hw + p];
            }
        }
    }
    rows
}

fn check_weight(w: &Tensor<impl Scalar>, channels: usize) -> Result<(usize, usize)> {
    let &[o, c, kh, kw] = w.shape() else {
        return Err(Error::shape(format!("expected O x C x k x k weight, got {:?}", w.shape())));
    };
    if kh != kw {
        return Err(Error::shape("only square kernels are supported"));
    }
    if c != channels {
        return Err(Error::shape(format!(
            "weight expects {c} input channels, input has {channels}"
        )));
    }
    Ok((o, kh))
}

/// Full-precision convolution lowered to `im2col` + GEMM.
pub fn conv2d_float<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let c = input.shape().get(1).copied().unwrap_or(0);
    let (o, k) = check_weight(weight, c)?;
    let g = ConvGeometry::new(input.shape(), k, stride, pad)?;
    let cols = im2col(input, k, stride, pad)?;
    let (ho, wo) = g.out_hw();
    let mut rows = vec![T::zero(); g.patches() * o];
    gemm(
        T::one(),
        MatRef::new(cols.data(), g.patches(), g.patch_len()),
        MatRef::new(weight.data(), o, g.patch_len()).t(),
        T::zero(),
        &mut rows,
    );
    Ok(rows_to_nchw(&rows, g.batch, o, ho, wo))
}

/// Binarized convolution: activations are quantized to ±1 (plain sign, or
/// the thresholds / mean shift carried by `scale`), padded with `+1`,
/// packed, multiplied with `binary_gemm`, and rescaled.
pub fn binary_conv2d<T: Scalar>(
    a: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    scale: &ScaleStructure<T>,
) -> Result<Tensor<T>> {
    a.ensure_finite()?;
    w.ensure_finite()?;
    let c = a.shape().get(1).copied().unwrap_or(0);
    let (o, k) = check_weight(w, c)?;
    let g = ConvGeometry::new(a.shape(), k, stride, pad)?;
    let (ho, wo) = g.out_hw();
    scale.check_conv(o, c, g.batch, ho, wo)?;
    let q = scale.quantize_activations(a)?;
    let cols = im2col_padded(&q, k, stride, pad, T::one())?;
    let pl = g.patch_len();
    let packed_a = super::BitTensor {
        words: pack_rows(cols.data(), g.patches(), pl, |v: T| v >= T::zero()),
        shape: vec![g.patches(), pl],
        bits_per_row: pl,
    };
    let packed_w = super::pack_signs(w, pl)?;
    let ints = binary_gemm(&packed_a, &packed_w)?;
    let mut out = vec![T::zero(); g.batch * o * ho * wo];
    let hw = ho * wo;
    for n in 0..g.batch {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let p = i * wo + j;
                    let dot = ints.get(n * hw + p, oc);
                    out[(n * o + oc) * hw + p] = scale.output_factor(n, oc, i, j) * T::lit(dot as f64);
                }
            }
        }
    }
    Tensor::new(out, vec![g.batch, o, ho, wo])
}
