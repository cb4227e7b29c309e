//! Shared semantic types: images, token sequences, feature maps and pyramids,
//! plus the plain (non-tensor) rasters used by postprocessing and evaluation.

use std::fmt;

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};

/// A batch of images, `[batch, channels, height, width]`, values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImageTensor {
    tensor: Tensor,
}

impl ImageTensor {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (_, _, h, w) = tensor.dims4()?;
        if h == 0 || w == 0 {
            return Err(Error::shape("image has zero extent"));
        }
        let flat = tensor.flatten_all()?.to_dtype(DType::F64)?;
        let lo = flat.min(0)?.to_scalar::<f64>()?;
        let hi = flat.max(0)?.to_scalar::<f64>()?;
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::NonFinite("image values".into()));
        }
        if lo < 0.0 || hi > 1.0 {
            return Err(Error::shape(format!(
                "image values must lie in [0,1], found [{lo}, {hi}]"
            )));
        }
        Ok(Self { tensor })
    }

    /// Stacks plain images into one batch tensor.
    pub fn from_images(images: &[&Image], dtype: DType, device: &Device) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::shape("empty image batch"))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if (img.channels, img.height, img.width) != (c, h, w) {
                return Err(Error::shape("images in a batch must share a shape"));
            }
            data.extend_from_slice(&img.data);
        }
        let t = Tensor::from_vec(data, (images.len(), c, h, w), device)?.to_dtype(dtype)?;
        Self::new(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn batch(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.tensor.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.tensor.dims()[3]
    }

    pub fn require_divisible(&self, patch: usize) -> Result<()> {
        if self.height() % patch != 0 || self.width() % patch != 0 {
            return Err(Error::shape(format!(
                "image {}x{} is not divisible by patch size {patch}",
                self.height(),
                self.width()
            )));
        }
        Ok(())
    }
}

/// `[batch, tokens, dim]` with an optional leading class token.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub has_class_token: bool,
    /// Patch grid as (rows, cols).
    pub grid: (usize, usize),
}

impl TokenSequence {
    pub fn new(tokens: Tensor, has_class_token: bool, grid: (usize, usize)) -> Result<Self> {
        let (_, n, _) = tokens.dims3()?;
        let expected = grid.0 * grid.1 + usize::from(has_class_token);
        if n != expected {
            return Err(Error::shape(format!(
                "token count {n} does not match grid {}x{} (class token: {has_class_token})",
                grid.0, grid.1
            )));
        }
        Ok(Self {
            tokens,
            has_class_token,
            grid,
        })
    }

    /// Number of patch tokens, excluding the class token.
    pub fn token_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn dim(&self) -> usize {
        self.tokens.dims()[2]
    }

    pub fn patch_tokens(&self) -> Result<Tensor> {
        let start = usize::from(self.has_class_token);
        Ok(self.tokens.narrow(1, start, self.token_count())?)
    }

    pub fn class_token(&self) -> Result<Tensor> {
        if !self.has_class_token {
            return Err(Error::shape("token sequence has no class token"));
        }
        Ok(self.tokens.narrow(1, 0, 1)?.squeeze(1)?)
    }

    /// Replaces the patch tokens, keeping the class token slot as is.
    pub fn with_patch_tokens(&self, patches: &Tensor) -> Result<Self> {
        let tokens = if self.has_class_token {
            Tensor::cat(&[&self.tokens.narrow(1, 0, 1)?, patches], 1)?
        } else {
            patches.clone()
        };
        Self::new(tokens, self.has_class_token, self.grid)
    }

    /// Reshapes the patch tokens into a `[batch, dim, rows, cols]` map.
    pub fn to_grid(&self) -> Result<Tensor> {
        let b = self.tokens.dims()[0];
        let d = self.dim();
        Ok(self
            .patch_tokens()?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, d, self.grid.0, self.grid.1))?)
    }

    /// Same values, cut from the autograd graph.
    pub fn detached(&self) -> Result<Self> {
        Self::new(self.tokens.detach(), self.has_class_token, self.grid)
    }

    pub fn is_finite(&self) -> Result<bool> {
        all_finite(&self.tokens)
    }
}

pub(crate) fn all_finite(t: &Tensor) -> Result<bool> {
    let s = t.to_dtype(DType::F64)?.abs()?.flatten_all()?.max(D::Minus1)?;
    Ok(s.to_scalar::<f64>()?.is_finite())
}

/// A rational fraction of the input resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scale {
    pub num: u32,
    pub den: u32,
}

impl Scale {
    pub const FULL: Scale = Scale { num: 1, den: 1 };

    pub const fn inverse_of(den: u32) -> Scale {
        Scale { num: 1, den }
    }

    /// Rounded extent at this scale.
    pub fn apply(self, extent: usize) -> usize {
        let num = extent as u64 * self.num as u64;
        let den = self.den as u64;
        ((num + den / 2) / den) as usize
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// A dense `[batch, channels, h, w]` map annotated with its scale.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub scale: Scale,
}

impl FeatureMap {
    pub fn new(tensor: Tensor, scale: Scale) -> Result<Self> {
        tensor.dims4()?;
        Ok(Self { tensor, scale })
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn hw(&self) -> (usize, usize) {
        let d = self.tensor.dims();
        (d[2], d[3])
    }

    /// Checks `h == round(H * scale)` and `w == round(W * scale)`.
    pub fn check_against(&self, height: usize, width: usize) -> Result<()> {
        let (h, w) = self.hw();
        if h != self.scale.apply(height) || w != self.scale.apply(width) {
            return Err(Error::shape(format!(
                "feature map {h}x{w} at scale {} inconsistent with input {height}x{width}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// Skip features at scales 1/2, 1/4, 1/8 and 1/16.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub h1: FeatureMap,
    pub h2: FeatureMap,
    pub h3: FeatureMap,
    pub h4: FeatureMap,
}

impl FeaturePyramid {
    pub const SCALES: [Scale; 4] = [
        Scale::inverse_of(2),
        Scale::inverse_of(4),
        Scale::inverse_of(8),
        Scale::inverse_of(16),
    ];

    pub fn levels(&self) -> [&FeatureMap; 4] {
        [&self.h1, &self.h2, &self.h3, &self.h4]
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        for (map, scale) in self.levels().into_iter().zip(Self::SCALES) {
            if map.scale != scale {
                return Err(Error::shape(format!(
                    "pyramid level has scale {} where {} was expected",
                    map.scale, scale
                )));
            }
            map.check_against(height, width)?;
        }
        Ok(())
    }
}

/// Plain channel-major image, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "image buffer holds {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Instance-id raster; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u32>,
}

impl InstanceMap {
    pub fn new(height: usize, width: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::shape(format!(
                "instance map holds {} ids, expected {height}x{width}",
                ids.len()
            )));
        }
        Ok(Self { height, width, ids })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ids: vec![0; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.ids[y * self.width + x]
    }

    pub fn max_id(&self) -> u32 {
        self.ids.iter().copied().max().unwrap_or(0)
    }

    /// Sorted distinct non-zero ids.
    pub fn instance_ids(&self) -> Vec<u32> {
        let mut seen = vec![false; self.max_id() as usize + 1];
        for &id in &self.ids {
            seen[id as usize] = true;
        }
        seen.iter()
            .enumerate()
            .skip(1)
            .filter(|(_, &s)| s)
            .map(|(i, _)| i as u32)
            .collect()
    }

    /// Renumbers ids to 1..=n in order of first appearance in raster order.
    pub fn relabel_consecutive(&self) -> (InstanceMap, Vec<(u32, u32)>) {
        let mut mapping = vec![0u32; self.max_id() as usize + 1];
        let mut pairs = Vec::new();
        let mut next = 0;
        let ids = self
            .ids
            .iter()
            .map(|&id| {
                if id == 0 {
                    return 0;
                }
                if mapping[id as usize] == 0 {
                    next += 1;
                    mapping[id as usize] = next;
                    pairs.push((id, next));
                }
                mapping[id as usize]
            })
            .collect();
        (
            InstanceMap {
                height: self.height,
                width: self.width,
                ids,
            },
            pairs,
        )
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.ids.iter().map(|&i| i != 0).collect()
    }

    pub fn same_shape(&self, other: &InstanceMap) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(format!(
                "maps differ in shape: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_sequence_counts() {
        let t = Tensor::zeros((2, 5, 8), DType::F32, &Device::Cpu).unwrap();
        let seq = TokenSequence::new(t.clone(), true, (2, 2)).unwrap();
        assert_eq!(seq.token_count(), 4);
        assert_eq!(seq.class_token().unwrap().dims(), &[2, 8]);
        assert_eq!(seq.to_grid().unwrap().dims(), &[2, 8, 2, 2]);
        assert!(TokenSequence::new(t, false, (2, 2)).is_err());
    }

    #[test]
    fn image_range_enforced() {
        let bad = Tensor::full(1.5f32, (1, 3, 4, 4), &Device::Cpu).unwrap();
        assert!(ImageTensor::new(bad).is_err());
        let nan = Tensor::full(f32::NAN, (1, 3, 4, 4), &Device::Cpu).unwrap();
        assert!(ImageTensor::new(nan).is_err());
        let ok = Tensor::full(0.5f32, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let img = ImageTensor::new(ok).unwrap();
        assert!(img.require_divisible(16).is_ok());
        assert!(img.require_divisible(12).is_err());
    }

    #[test]
    fn relabel_is_idempotent_on_consecutive_maps() {
        let m = InstanceMap::new(2, 3, vec![0, 7, 7, 3, 0, 9]).unwrap();
        let (r, pairs) = m.relabel_consecutive();
        assert_eq!(r.ids, vec![0, 1, 1, 2, 0, 3]);
        assert_eq!(pairs, vec![(7, 1), (3, 2), (9, 3)]);
        let (again, _) = r.relabel_consecutive();
        assert_eq!(again, r);
        assert_eq!(r.instance_ids(), vec![1, 2, 3]);
    }

    #[test]
    fn scale_rounding() {
        assert_eq!(Scale::inverse_of(4).apply(64), 16);
        assert_eq!(Scale::inverse_of(16).apply(256), 16);
        assert_eq!(Scale::FULL.apply(33), 33);
    }
}
