//! Small layer toolkit on top of candle tensors.
//!
//! Layers keep clones of their registry variables, so an optimizer step or a
//! checkpoint load through the registry is visible to every forward pass.

use candle_core::{DType, Tensor, Var, D};

use crate::error::Result;
use crate::ops;
use crate::registry::{Init, ParamBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers; running estimates updated.
    Train,
    /// Running estimates in normalization layers.
    Eval,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// How a linear layer's weight is drawn.
#[derive(Debug, Clone, Copy)]
pub enum LinearInit {
    TruncNormal(f64),
    Xavier,
    Zeros,
}

impl Linear {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: LinearInit,
    ) -> Result<Self> {
        let w_init = match init {
            LinearInit::TruncNormal(std) => Init::TruncNormal { std },
            LinearInit::Xavier => Init::XavierUniform {
                fan_in: in_dim,
                fan_out: out_dim,
            },
            LinearInit::Zeros => Init::Zeros,
        };
        let weight = b.param(&format!("{name}.weight"), &[out_dim, in_dim], w_init)?;
        let bias = b.param(&format!("{name}.bias"), &[out_dim], Init::Zeros)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Applies `x W^T + b` over the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("non-scalar input");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.contiguous()?.reshape((rows, in_dim))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(bias) = &self.bias {
            y = y.broadcast_add(bias)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-scalar input") = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: b.param(&format!("{name}.weight"), &[dim], Init::Ones)?,
            bias: b.param(&format!("{name}.bias"), &[dim], Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let weight = b.param(
            &format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            Init::KaimingNormal {
                fan_in: in_ch * kernel * kernel,
            },
        )?;
        let bias = b.param(&format!("{name}.bias"), &[out_ch], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, dims) = self.forward_rows(x)?;
        ops::rows_to_nchw(&rows, dims)
    }

    /// Channel-major output `[co, b*ho*wo]` plus `(b, ho, wo)`.
    pub fn forward_rows(&self, x: &Tensor) -> Result<(Tensor, (usize, usize, usize))> {
        let (y, dims) = ops::conv2d_rows(x, &self.weight, self.stride, self.padding)?;
        let c = self.bias.dims()[0];
        Ok((y.broadcast_add(&self.bias.reshape((c, 1))?)?, dims))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub running_mean: Var,
    pub running_var: Var,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: b.param(&format!("{name}.weight"), &[channels], Init::Ones)?,
            bias: b.param(&format!("{name}.bias"), &[channels], Init::Zeros)?,
            running_mean: b.buffer(&format!("{name}.running_mean"), &[channels], Init::Zeros)?,
            running_var: b.buffer(&format!("{name}.running_var"), &[channels], Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, _, h, w) = x.dims4()?;
        let rows = self.forward_rows(&ops::nchw_to_rows(x)?, mode)?;
        ops::rows_to_nchw(&rows, (n, h, w))
    }

    /// Normalizes channel-major `[c, m]` activations; statistics run over `m`.
    pub fn forward_rows(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (c, count) = x.dims2()?;
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = x.mean_keepdim(1)?;
                let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
                let unbiased = if count > 1 { count as f64 / (count as f64 - 1.0) } else { 1.0 };
                let m = self.momentum;
                let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
                let new_var =
                    ((self.running_var.as_tensor() * (1.0 - m))? + (var.detach().flatten_all()? * (m * unbiased))?)?;
                self.running_mean.set(&new_mean)?;
                self.running_var.set(&new_var)?;
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.as_tensor().reshape((c, 1))?,
                self.running_var.as_tensor().reshape((c, 1))?,
            ),
        };
        let scale = (var + self.eps)?.sqrt()?.recip()?.broadcast_mul(&self.weight.reshape((c, 1))?)?;
        Ok(x.broadcast_sub(&mean)?
            .broadcast_mul(&scale)?
            .broadcast_add(&self.bias.reshape((c, 1))?)?)
    }
}

/// Convolution, batch normalization, ReLU. Parameters are `{name}.weight`,
/// `{name}.bias` and `{name}.bn.*`.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(b, name, in_ch, out_ch, kernel, stride)?,
            bn: BatchNorm2d::new(b, &format!("{name}.bn"), out_ch)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (rows, dims) = self.conv.forward_rows(x)?;
        ops::rows_to_nchw(&self.bn.forward_rows(&rows, mode)?.relu()?, dims)
    }
}

/// Transposed convolution with kernel 2 and stride 2 (exact 2x upsampling).
///
/// Weight layout is `[in, out, 2, 2]`; output pixel `(2i+dy, 2j+dx)` receives
/// `sum_c x[c, i, j] * w[c, o, dy, dx] + b[o]`.
#[derive(Debug, Clone)]
pub struct Deconv2x2 {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Deconv2x2 {
    pub fn new(b: &mut ParamBuilder, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            weight: b.param(
                &format!("{name}.weight"),
                &[in_ch, out_ch, 2, 2],
                Init::KaimingNormal { fan_in: in_ch },
            )?,
            bias: b.param(&format!("{name}.bias"), &[out_ch], Init::Zeros)?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let o = self.out_channels();
        let rows = x.permute((0, 2, 3, 1))?.contiguous()?.reshape((n * h * w, c))?;
        let y = rows.matmul(&self.weight.reshape((c, o * 4))?)?;
        let y = y
            .reshape((n, h, w, o, 2, 2))?
            .permute((0, 3, 1, 4, 2, 5))?
            .contiguous()?
            .reshape((n, o, 2 * h, 2 * w))?;
        Ok(y.broadcast_add(&self.bias.reshape((1, o, 1, 1))?)?)
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Log-softmax over dimension `dim`.
pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn is_float(dtype: DType) -> bool {
    matches!(dtype, DType::F32 | DType::F64)
}

#[cfg(test)]
mod tests {
    use candle_core::Device;

    use super::*;

    #[test]
    fn deconv_matches_direct_definition() {
        let mut b = ParamBuilder::new(11, DType::F64, Device::Cpu);
        let d = Deconv2x2::new(&mut b, "decoder.up", 3, 2).unwrap();
        let x = Tensor::arange(0f64, 24., &Device::Cpu).unwrap().reshape((1, 3, 2, 4)).unwrap();
        let y = d.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 2, 4, 8]);
        let xv = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let wv = d.weight.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let yv = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for o in 0..2 {
            for yy in 0..4 {
                for xx in 0..8 {
                    let (i, dy, j, dx) = (yy / 2, yy % 2, xx / 2, xx % 2);
                    let mut s = 0.0;
                    for c in 0..3 {
                        s += xv[(c * 2 + i) * 4 + j] * wv[((c * 2 + o) * 2 + dy) * 2 + dx];
                    }
                    let got = yv[(o * 4 + yy) * 8 + xx];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn linear_handles_batched_input() {
        let mut b = ParamBuilder::new(1, DType::F64, Device::Cpu);
        let l = Linear::new(&mut b, "encoder.l", 4, 3, LinearInit::TruncNormal(1.0)).unwrap();
        let x = Tensor::randn(0f64, 1., (2, 5, 4), &Device::Cpu).unwrap();
        let y = l.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 5, 3]);
        let row = l
            .forward(&x.narrow(0, 1, 1).unwrap().narrow(1, 2, 1).unwrap())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let full = y.narrow(0, 1, 1).unwrap().narrow(1, 2, 1).unwrap().flatten_all().unwrap();
        assert_eq!(full.to_vec1::<f64>().unwrap(), row);
    }

    #[test]
    fn batchnorm_normalizes_in_train_and_tracks_stats() {
        let mut b = ParamBuilder::new(1, DType::F64, Device::Cpu);
        let bn = BatchNorm2d::new(&mut b, "decoder.bn", 2).unwrap();
        let x = (Tensor::randn(0f64, 3., (4, 2, 5, 5), &Device::Cpu).unwrap() + 7.0).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        let m = y.mean_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(m.abs() < 1e-10);
        let rm = bn.running_mean.as_tensor().to_vec1::<f64>().unwrap();
        assert!(rm.iter().all(|v| (v - 0.7).abs() < 0.2));
        let ye = bn.forward(&x, Mode::Eval).unwrap();
        assert_eq!(ye.dims(), x.dims());
    }

    #[test]
    fn log_softmax_agrees_with_softmax() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [-1.0, 0.0, 5.0]], &Device::Cpu).unwrap();
        let a = log_softmax(&x, 1).unwrap().exp().unwrap();
        let b = softmax_last(&x).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-14);
    }
}
