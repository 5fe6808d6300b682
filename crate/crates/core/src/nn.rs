//! Differentiable building blocks shared by every network in the crate.
//!
//! Convolutions are lowered to an explicit im2col followed by a matmul so
//! that both directions of autograd run through the matmul kernel. The
//! im2col/col2im pair is implemented as custom ops over contiguous CPU
//! storage.

use candle_core::{CpuStorage, CustomOp1, Layout, Module, Shape, Tensor, WithDType, D};
use candle_nn::{Init, VarBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PatchGeometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl PatchGeometry {
    fn columns(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Visits every (column-buffer index, image index) pair that lies inside
    /// the unpadded image.
    fn for_each<F: FnMut(usize, usize)>(&self, batch: usize, mut f: F) {
        let cols = self.columns();
        for b in 0..batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = ((b * self.out_h + oy) * self.out_w + ox) * cols;
                    for c in 0..self.channels {
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            let plane = ((b * self.channels + c) * self.height + iy as usize) * self.width;
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= self.width as isize {
                                    continue;
                                }
                                f(row + (c * self.kernel + ky) * self.kernel + kx, plane + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col expects contiguous input"),
    }
}

struct Im2Col(PatchGeometry);

struct Col2Im {
    geometry: PatchGeometry,
    batch: usize,
}

fn im2col<T: WithDType>(src: &[T], batch: usize, g: PatchGeometry) -> Vec<T> {
    let mut dst = vec![T::zero(); batch * g.out_h * g.out_w * g.columns()];
    g.for_each(batch, |col, pix| dst[col] = src[pix]);
    dst
}

fn col2im<T: WithDType>(src: &[T], batch: usize, g: PatchGeometry) -> Vec<T> {
    let mut dst = vec![T::zero(); batch * g.channels * g.height * g.width];
    g.for_each(batch, |col, pix| dst[pix] += src[col]);
    dst
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let batch = layout.dims()[0];
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous_slice(v, layout)?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous_slice(v, layout)?, batch, g)),
            other => candle_core::bail!(
                "im2col: unsupported dtype {:?}",
                candle_core::backend::BackendStorage::dtype(other)
            ),
        };
        Ok((out, Shape::from((batch * g.out_h * g.out_w, g.columns()))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = Col2Im {
            geometry: self.0,
            batch: arg.dim(0)?,
        };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geometry;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous_slice(v, layout)?, self.batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous_slice(v, layout)?, self.batch, g)),
            other => candle_core::bail!(
                "col2im: unsupported dtype {:?}",
                candle_core::backend::BackendStorage::dtype(other)
            ),
        };
        Ok((out, Shape::from((self.batch, g.channels, g.height, g.width))))
    }
}

/// 2D convolution over NCHW input, square kernel, zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Conv2d {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let (batch, channels, height, width) = xs.dims4()?;
        let (out_c, in_c, kernel, _) = self.weight.dims4()?;
        if in_c != channels {
            candle_core::bail!("conv2d: input has {channels} channels, kernel expects {in_c}");
        }
        let out_h = (height + 2 * self.padding - kernel) / self.stride + 1;
        let out_w = (width + 2 * self.padding - kernel) / self.stride + 1;
        let geometry = PatchGeometry {
            channels,
            height,
            width,
            kernel,
            stride: self.stride,
            padding: self.padding,
            out_h,
            out_w,
        };
        let cols = xs.contiguous()?.apply_op1(Im2Col(geometry))?;
        let kernel = self.weight.reshape((out_c, geometry.columns()))?;
        let ys = cols.matmul(&kernel.t()?)?;
        let ys = match &self.bias {
            Some(bias) => ys.broadcast_add(bias)?,
            None => ys,
        };
        ys.reshape((batch, out_h, out_w, out_c))?
            .permute((0, 3, 1, 2))?
            .contiguous()
    }
}

pub fn conv2d(
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    vb: VarBuilder,
) -> candle_core::Result<Conv2d> {
    let weight = vb.get_with_hints(
        (out_c, in_c, kernel, kernel),
        "weight",
        candle_nn::init::DEFAULT_KAIMING_NORMAL,
    )?;
    let bound = 1. / ((in_c * kernel * kernel) as f64).sqrt();
    let bias = vb.get_with_hints(out_c, "bias", Init::Uniform { lo: -bound, up: bound })?;
    Ok(Conv2d::new(weight, Some(bias), stride, padding))
}

/// A convolution whose weights and bias start at exactly zero.
pub fn zero_conv2d(in_c: usize, out_c: usize, vb: VarBuilder) -> candle_core::Result<Conv2d> {
    let weight = vb.get_with_hints((out_c, in_c, 1, 1), "weight", Init::Const(0.))?;
    let bias = vb.get_with_hints(out_c, "bias", Init::Const(0.))?;
    Ok(Conv2d::new(weight, Some(bias), 1, 0))
}

pub fn zero_linear(in_dim: usize, out_dim: usize, vb: VarBuilder) -> candle_core::Result<candle_nn::Linear> {
    let weight = vb.get_with_hints((out_dim, in_dim), "weight", Init::Const(0.))?;
    let bias = vb.get_with_hints(out_dim, "bias", Init::Const(0.))?;
    Ok(candle_nn::Linear::new(weight, Some(bias)))
}

/// Linear layer with a zero bias at initialization.
pub fn linear_zero_bias(in_dim: usize, out_dim: usize, vb: VarBuilder) -> candle_core::Result<candle_nn::Linear> {
    let weight = vb.get_with_hints((out_dim, in_dim), "weight", candle_nn::init::DEFAULT_KAIMING_NORMAL)?;
    let bias = vb.get_with_hints(out_dim, "bias", Init::Const(0.))?;
    Ok(candle_nn::Linear::new(weight, Some(bias)))
}

/// Layer normalization over the last dimension, written with
/// differentiable primitives.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(size: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(size, "weight", Init::Const(1.))?,
            bias: vb.get_with_hints(size, "bias", Init::Const(0.))?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let mean = xs.mean_keepdim(D::Minus1)?;
        let centered = xs.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

/// Sinusoidal embedding of integer timesteps, shape (batch, dim).
pub fn timestep_embedding(
    timesteps: &[usize],
    dim: usize,
    dtype: candle_core::DType,
    device: &candle_core::Device,
) -> candle_core::Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin());
        }
        data.extend(std::iter::repeat_n(0., dim - 2 * half));
    }
    Tensor::from_vec(data, (timesteps.len(), dim), device)?.to_dtype(dtype)
}
