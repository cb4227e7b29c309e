//! Spatial prior module: a four-block CNN stem whose last three blocks are
//! projected to the token dimension and flattened into one token sequence.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBnRelu, Mode};
use crate::registry::ParamBuilder;
use crate::types::ImageTensor;

/// Concatenated flattened level tokens, `[batch, sum(h*w), dim]`.
///
/// Levels are stored in order 1/4, 1/8, 1/16 of the input resolution.
#[derive(Debug, Clone)]
pub struct SpatialPriorTokens {
    pub tokens: Tensor,
    pub level_shapes: Vec<(usize, usize)>,
    pub level_starts: Vec<usize>,
}

impl SpatialPriorTokens {
    pub fn new(tokens: Tensor, level_shapes: Vec<(usize, usize)>) -> Result<Self> {
        let mut level_starts = Vec::with_capacity(level_shapes.len());
        let mut total = 0;
        for &(h, w) in &level_shapes {
            level_starts.push(total);
            total += h * w;
        }
        let n = tokens.dims3()?.1;
        if n != total {
            return Err(Error::shape(format!(
                "{n} spatial tokens but level shapes account for {total}"
            )));
        }
        Ok(Self {
            tokens,
            level_shapes,
            level_starts,
        })
    }

    pub fn total_tokens(&self) -> usize {
        self.level_shapes.iter().map(|(h, w)| h * w).sum()
    }

    pub fn with_tokens(&self, tokens: Tensor) -> Result<Self> {
        Self::new(tokens, self.level_shapes.clone())
    }

    /// Level `i` as a `[batch, dim, h, w]` map.
    pub fn level_map(&self, i: usize) -> Result<Tensor> {
        let (h, w) = self.level_shapes[i];
        let (b, _, d) = self.tokens.dims3()?;
        Ok(self
            .tokens
            .narrow(1, self.level_starts[i], h * w)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, d, h, w))?)
    }
}

/// Flattens `[batch, dim, h, w]` to `[batch, h*w, dim]`.
pub fn flatten_map(map: &Tensor) -> Result<Tensor> {
    let (b, d, h, w) = map.dims4()?;
    Ok(map.reshape((b, d, h * w))?.transpose(1, 2)?.contiguous()?)
}

#[derive(Debug, Clone)]
pub struct SpatialPriorModule {
    pub blocks: Vec<Vec<ConvBnRelu>>,
    pub projections: Vec<Conv2d>,
}

impl SpatialPriorModule {
    /// Block widths are `c, 2c, 4c, 4c` for base width `c`.
    pub fn new(b: &mut ParamBuilder, in_channels: usize, base: usize, dim: usize) -> Result<Self> {
        let widths = [base, 2 * base, 4 * base, 4 * base];
        let mut blocks = Vec::with_capacity(4);
        let mut in_ch = in_channels;
        for (k, &w) in widths.iter().enumerate() {
            let layers = if k == 0 { 4 } else { 2 };
            let mut block = Vec::with_capacity(layers);
            for j in 0..layers {
                let stride = if j + 1 == layers { 2 } else { 1 };
                let name = format!("adapter.spm.block{}.conv{}", k + 1, j + 1);
                block.push(ConvBnRelu::new(b, &name, in_ch, w, 3, stride)?);
                in_ch = w;
            }
            blocks.push(block);
        }
        let projections = (1..4)
            .map(|k| Conv2d::new(b, &format!("adapter.spm.proj{}", k + 1), widths[k], dim, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks, projections })
    }

    pub fn forward(&self, image: &ImageTensor, mode: Mode) -> Result<SpatialPriorTokens> {
        let (h, w) = (image.height(), image.width());
        if h < 16 || w < 16 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::shape(format!(
                "spatial prior module needs sides that are positive multiples of 16, got {h}x{w}"
            )));
        }
        let mut x = image.tensor().clone();
        let mut flat = Vec::with_capacity(3);
        let mut shapes = Vec::with_capacity(3);
        for (k, block) in self.blocks.iter().enumerate() {
            for layer in block {
                x = layer.forward(&x, mode)?;
            }
            if k > 0 {
                let projected = self.projections[k - 1].forward(&x)?;
                let (_, _, ph, pw) = projected.dims4()?;
                shapes.push((ph, pw));
                flat.push(flatten_map(&projected)?);
            }
        }
        let tokens = Tensor::cat(&flat, 1)?;
        SpatialPriorTokens::new(tokens, shapes)
    }
}
