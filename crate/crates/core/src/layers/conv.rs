//! 2-D convolution (cross-correlation, no kernel flip) lowered to im2col + GEMM.

use serde::{Deserialize, Serialize};

use super::{he_normal, Param};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::gemm::{gemm, Lhs};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output is `ceil(H / stride)`; odd padding puts the extra row/column
    /// at the bottom/right.
    Same,
    /// No padding; output is `floor((H - K) / stride) + 1`.
    Valid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
    pub use_bias: bool,
}

impl ConvSpec {
    pub fn square(kernel: usize, stride: usize, in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding: Padding::Same,
            in_channels,
            out_channels,
            use_bias: false,
        }
    }

    pub fn with_bias(mut self, use_bias: bool) -> Self {
        self.use_bias = use_bias;
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 {
            return Err(Error::InvalidConfig("conv kernel and stride must be positive".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidConfig("conv channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.kernel_h, self.kernel_w, self.in_channels, self.out_channels]
    }

    pub fn fan_in(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_channels
    }
}

/// Output extent and leading padding along one spatial axis.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if input < kernel {
                return Err(Error::InvalidShape {
                    shape: vec![input],
                    reason: format!("valid convolution with kernel {kernel} leaves no output"),
                });
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    oh: usize,
    ow: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1×1 stride-1 convolution reads the input directly as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    spec: ConvSpec,
    kernel: Param<T>,
    bias: Option<Param<T>>,
    cache: Option<Tensor<T>>,
}

impl<T: Element> Conv2d<T> {
    pub fn new(spec: ConvSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let kernel = Param::learnable(he_normal(&spec.kernel_shape(), spec.fan_in(), rng));
        let bias = spec.use_bias.then(|| Param::learnable(Tensor::zeros(&[spec.out_channels])));
        Ok(Conv2d { spec, kernel, bias, cache: None })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn kernel(&self) -> &Tensor<T> {
        &self.kernel.value
    }

    pub fn kernel_grad(&self) -> Option<&Tensor<T>> {
        self.kernel.grad.as_ref()
    }

    pub fn set_kernel(&mut self, kernel: Tensor<T>) -> Result<()> {
        if kernel.shape() != self.spec.kernel_shape() {
            return Err(Error::ShapeMismatch {
                op: "set_kernel",
                left: self.spec.kernel_shape().to_vec(),
                right: kernel.shape().to_vec(),
            });
        }
        self.kernel.value = kernel;
        Ok(())
    }

    pub fn set_bias(&mut self, bias: Tensor<T>) -> Result<()> {
        match &mut self.bias {
            Some(p) if p.value.shape() == bias.shape() => {
                p.value = bias;
                Ok(())
            }
            _ => Err(Error::InvalidConfig("conv has no bias of that shape".into())),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        let mut out = vec![("kernel", &self.kernel)];
        if let Some(b) = &self.bias {
            out.push(("bias", b));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        let mut out = vec![("kernel", &mut self.kernel)];
        if let Some(b) = &mut self.bias {
            out.push(("bias", b));
        }
        out
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn geometry(&self, shape: &[usize]) -> Result<Geometry> {
        let [_, h, w, cin] = shape[..] else {
            return Err(Error::InvalidShape { shape: shape.to_vec(), reason: "conv2d expects N×H×W×C".into() });
        };
        if cin != self.spec.in_channels {
            return Err(Error::ShapeMismatch {
                op: "conv2d channels",
                left: vec![self.spec.in_channels],
                right: vec![cin],
            });
        }
        let (oh, pad_top) = conv_output_dim(h, self.spec.kernel_h, self.spec.stride, self.spec.padding)?;
        let (ow, pad_left) = conv_output_dim(w, self.spec.kernel_w, self.spec.stride, self.spec.padding)?;
        Ok(Geometry {
            h,
            w,
            cin,
            oh,
            ow,
            cout: self.spec.out_channels,
            kh: self.spec.kernel_h,
            kw: self.spec.kernel_w,
            stride: self.spec.stride,
            pad_top,
            pad_left,
        })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let g = self.geometry(input)?;
        Ok(vec![input[0], g.oh, g.ow, g.cout])
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geometry(x.shape())?;
        let n = x.shape()[0];
        let in_len = g.h * g.w * g.cin;
        let out_len = g.out_pixels() * g.cout;
        let mut out = vec![T::zero(); n * out_len];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.out_pixels() * g.patch_len()] };
        for b in 0..n {
            let image = &x.data()[b * in_len..(b + 1) * in_len];
            let lhs = if g.is_pointwise() {
                image
            } else {
                im2col(image, &g, &mut cols);
                &cols[..]
            };
            gemm(
                g.out_pixels(),
                g.cout,
                g.patch_len(),
                Lhs::normal(lhs, g.patch_len()),
                self.kernel.value.data(),
                &mut out[b * out_len..(b + 1) * out_len],
                false,
            );
        }
        if let Some(bias) = &self.bias {
            for row in out.chunks_exact_mut(g.cout) {
                for (v, &bv) in row.iter_mut().zip(bias.value.data()) {
                    *v += bv;
                }
            }
        }
        Tensor::new(&[n, g.oh, g.ow, g.cout], out)
    }

    /// Fills kernel (and bias) gradients; returns the input gradient when asked.
    pub fn backward(&mut self, grad_out: &Tensor<T>, need_input_grad: bool) -> Result<Option<Tensor<T>>> {
        let x = self.cache.as_ref().ok_or_else(|| Error::MissingCache { layer: "conv2d".into() })?;
        let g = self.geometry(x.shape())?;
        let n = x.shape()[0];
        let expected = [n, g.oh, g.ow, g.cout];
        if grad_out.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "conv2d backward",
                left: expected.to_vec(),
                right: grad_out.shape().to_vec(),
            });
        }
        let in_len = g.h * g.w * g.cin;
        let out_len = g.out_pixels() * g.cout;
        let patch = g.patch_len();

        let mut grad_kernel = vec![T::zero(); patch * g.cout];
        let kernel_t = if need_input_grad {
            Some(self.kernel.value.clone().reshape(&[patch, g.cout])?.transpose2()?)
        } else {
            None
        };
        let mut grad_x = if need_input_grad { vec![T::zero(); n * in_len] } else { Vec::new() };
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.out_pixels() * patch] };
        let mut grad_cols = if need_input_grad && !g.is_pointwise() {
            vec![T::zero(); g.out_pixels() * patch]
        } else {
            Vec::new()
        };

        for b in 0..n {
            let image = &x.data()[b * in_len..(b + 1) * in_len];
            let go = &grad_out.data()[b * out_len..(b + 1) * out_len];
            let lhs = if g.is_pointwise() {
                image
            } else {
                im2col(image, &g, &mut cols);
                &cols[..]
            };
            // dK += colsᵀ · dY
            gemm(patch, g.cout, g.out_pixels(), Lhs::transposed(lhs, patch), go, &mut grad_kernel, true);

            if let Some(kt) = &kernel_t {
                let gx = &mut grad_x[b * in_len..(b + 1) * in_len];
                // dCols = dY · Kᵀ
                if g.is_pointwise() {
                    gemm(g.out_pixels(), patch, g.cout, Lhs::normal(go, g.cout), kt.data(), gx, false);
                } else {
                    gemm(g.out_pixels(), patch, g.cout, Lhs::normal(go, g.cout), kt.data(), &mut grad_cols, false);
                    col2im(&grad_cols, &g, gx);
                }
            }
        }

        self.kernel.grad = Some(Tensor::new(&self.spec.kernel_shape(), grad_kernel)?);
        if let Some(bias) = &mut self.bias {
            let mut gb = vec![T::zero(); g.cout];
            for row in grad_out.data().chunks_exact(g.cout) {
                for (acc, &v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            bias.grad = Some(Tensor::new(&[g.cout], gb)?);
        }
        if need_input_grad {
            Ok(Some(Tensor::new(x.shape(), grad_x)?))
        } else {
            Ok(None)
        }
    }
}

/// Unrolls every receptive field of one `H×W×Cin` image into a row of `cols`.
fn im2col<T: Element>(image: &[T], g: &Geometry, cols: &mut [T]) {
    let row_len = g.patch_len();
    let seg = g.kw * g.cin;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * row_len..(oy * g.ow + ox + 1) * row_len];
            for ky in 0..g.kh {
                let dst = &mut row[ky * seg..(ky + 1) * seg];
                let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                if iy < 0 || iy >= g.h as isize {
                    dst.fill(T::zero());
                    continue;
                }
                let iy = iy as usize;
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                    let d = &mut dst[kx * g.cin..(kx + 1) * g.cin];
                    if ix < 0 || ix >= g.w as isize {
                        d.fill(T::zero());
                    } else {
                        let src = (iy * g.w + ix as usize) * g.cin;
                        d.copy_from_slice(&image[src..src + g.cin]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the image.
fn col2im<T: Element>(cols: &[T], g: &Geometry, image: &mut [T]) {
    let row_len = g.patch_len();
    let seg = g.kw * g.cin;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &cols[(oy * g.ow + ox) * row_len..(oy * g.ow + ox + 1) * row_len];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let iy = iy as usize;
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy * g.w + ix as usize) * g.cin;
                    let src = &row[ky * seg + kx * g.cin..ky * seg + (kx + 1) * g.cin];
                    for (d, &s) in image[dst..dst + g.cin].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}
