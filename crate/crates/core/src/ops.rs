//! im2col / col2im as differentiable custom ops.
//!
//! Convolutions are computed as `W[co, c*k*k] @ unfold(x)[c*k*k, b*ho*wo]`,
//! so both forward and backward passes run on dense matrix products. The
//! backward of `unfold` is `fold` (a scatter-add back onto the input grid).

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn out_extent(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

/// `[b, c, h, w]` -> `[c*k*k, b*ho*wo]`.
#[derive(Debug, Clone, Copy)]
struct Unfold {
    win: Window,
}

/// `[c*k*k, b*ho*wo]` -> `[b, c, h, w]`, accumulating overlaps.
#[derive(Debug, Clone, Copy)]
struct Fold {
    win: Window,
    dims: (usize, usize, usize, usize),
}

fn unfold_slice<T: Copy + Default>(src: &[T], dims: (usize, usize, usize, usize), win: Window) -> Vec<T> {
    let (b, c, h, w) = dims;
    let (ho, wo) = (win.out_extent(h), win.out_extent(w));
    let k = win.kernel;
    let n = b * ho * wo;
    let mut out = vec![T::default(); c * k * k * n];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut out[row * n..(row + 1) * n];
                for bi in 0..b {
                    let plane = &src[(bi * c + ci) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (oy * win.stride + ky) as isize - win.padding as isize;
                        let line = &mut dst[(bi * ho + oy) * wo..][..wo];
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..][..w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * win.stride + kx) as isize - win.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn fold_slice<T: Copy + Default + std::ops::AddAssign>(
    src: &[T],
    dims: (usize, usize, usize, usize),
    win: Window,
) -> Vec<T> {
    let (b, c, h, w) = dims;
    let (ho, wo) = (win.out_extent(h), win.out_extent(w));
    let k = win.kernel;
    let n = b * ho * wo;
    let mut out = vec![T::default(); b * c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let col = &src[row * n..(row + 1) * n];
                for bi in 0..b {
                    let plane = &mut out[(bi * c + ci) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (oy * win.stride + ky) as isize - win.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &col[(bi * ho + oy) * wo..][..wo];
                        let dst_row = &mut plane[iy as usize * w..][..w];
                        for (ox, &v) in line.iter().enumerate() {
                            let ix = (ox * win.stride + kx) as isize - win.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous_slice<'a, T>(s: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&s[start..end]),
        None => candle_core::bail!("im2col ops need contiguous input"),
    }
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (b, c, h, w) = dims;
        let k = self.win.kernel;
        let shape = Shape::from((c * k * k, b * self.win.out_extent(h) * self.win.out_extent(w)));
        let out = match storage {
            CpuStorage::F32(s) => CpuStorage::F32(unfold_slice(contiguous_slice(s, layout)?, dims, self.win)),
            CpuStorage::F64(s) => CpuStorage::F64(unfold_slice(contiguous_slice(s, layout)?, dims, self.win)),
            _ => candle_core::bail!("unfold supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let fold = Fold {
            win: self.win,
            dims: arg.dims4()?,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&fold)?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(s) => CpuStorage::F32(fold_slice(contiguous_slice(s, layout)?, self.dims, self.win)),
            CpuStorage::F64(s) => CpuStorage::F64(fold_slice(contiguous_slice(s, layout)?, self.dims, self.win)),
            _ => candle_core::bail!("fold supports f32 and f64 only"),
        };
        Ok((out, Shape::from(self.dims)))
    }
}

/// Cross-correlation of `x: [b, c, h, w]` with `weight: [co, c, k, k]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (rows, dims) = conv2d_rows(x, weight, stride, padding)?;
    rows_to_nchw(&rows, dims)
}

/// Like [`conv2d`] but returns the channel-major `[co, b*ho*wo]` product and `(b, ho, wo)`.
pub fn conv2d_rows(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, (usize, usize, usize))> {
    let (b, _, h, w) = x.dims4()?;
    let (co, ci, k, _) = weight.dims4()?;
    let win = Window {
        kernel: k,
        stride,
        padding,
    };
    let (ho, wo) = (win.out_extent(h), win.out_extent(w));
    let cols = if k == 1 && stride == 1 && padding == 0 {
        nchw_to_rows(x)?
    } else {
        x.contiguous()?.apply_op1(Unfold { win })?
    };
    Ok((weight.reshape((co, ci * k * k))?.matmul(&cols)?, (b, ho, wo)))
}

/// `[b, c, h, w]` -> `[c, b*h*w]`.
pub fn nchw_to_rows(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.permute((1, 0, 2, 3))?.contiguous()?.reshape((c, b * h * w))?)
}

/// `[c, b*h*w]` -> `[b, c, h, w]`.
pub fn rows_to_nchw(rows: &Tensor, (b, h, w): (usize, usize, usize)) -> Result<Tensor> {
    let c = rows.dim(0)?;
    Ok(rows.reshape((c, b, h, w))?.permute((1, 0, 2, 3))?.contiguous()?)
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device, Var};

    use super::*;

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn matches_candle_conv_forward_and_backward() {
        let dev = Device::Cpu;
        for &(stride, k) in &[(1usize, 3usize), (2, 3), (1, 1)] {
            let x = Var::randn(0f64, 1., (2, 3, 9, 8), &dev).unwrap();
            let w = Var::randn(0f64, 1., (4, 3, k, k), &dev).unwrap();
            let pad = k / 2;
            let ours = conv2d(x.as_tensor(), w.as_tensor(), stride, pad).unwrap();
            let reference = x.as_tensor().conv2d(w.as_tensor(), pad, stride, 1, 1).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_diff(&ours, &reference) < 1e-12);

            if stride == 1 {
                let probe = Tensor::randn(0f64, 1., ours.dims(), &dev).unwrap();
                let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
                let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
                assert!(max_diff(g1.get(&x).unwrap(), g2.get(&x).unwrap()) < 1e-10);
                assert!(max_diff(g1.get(&w).unwrap(), g2.get(&w).unwrap()) < 1e-10);
            }
        }
    }

    #[test]
    fn fold_is_adjoint_of_unfold() {
        let dev = Device::Cpu;
        for &(stride, k, pad) in &[(2usize, 3usize, 1usize), (1, 3, 1), (2, 2, 0), (3, 5, 2)] {
            let win = Window { kernel: k, stride, padding: pad };
            let x = Tensor::randn(0f64, 1., (2, 3, 9, 7), &dev).unwrap();
            let cols = x.apply_op1_no_bwd(&Unfold { win }).unwrap();
            let y = Tensor::randn(0f64, 1., cols.dims(), &dev).unwrap();
            let folded = y.apply_op1_no_bwd(&Fold { win, dims: (2, 3, 9, 7) }).unwrap();
            let lhs = (cols * &y).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
            let rhs = (x * folded).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn f32_supported() {
        let x = Tensor::ones((1, 1, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let w = Tensor::ones((1, 1, 3, 3), DType::F32, &Device::Cpu).unwrap();
        let y = conv2d(&x, &w, 1, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y[0], 4.0);
        assert_eq!(y[5], 9.0);
    }
}
