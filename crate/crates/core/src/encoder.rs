//! Plain ViT encoder: patch embedding, class token, learnable 1-D position
//! embedding and pre-norm transformer blocks, partitioned into equal groups
//! for adapter interaction.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::data::resample::bilinear_axis;
use crate::error::{Error, Result};
use crate::nn::{softmax_last, LayerNorm, Linear, LinearInit};
use crate::registry::{Init, ParamBuilder};
use crate::types::{ImageTensor, TokenSequence};

pub const POS_EMBED_NAME: &str = "encoder.pos_embed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_interaction_blocks: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config("image_size must be a positive multiple of patch_size"));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config("embed_dim must be divisible by heads"));
        }
        if self.num_interaction_blocks == 0 || self.depth % self.num_interaction_blocks != 0 {
            return Err(Error::config("depth must be divisible by num_interaction_blocks"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn blocks_per_group(&self) -> usize {
        self.depth / self.num_interaction_blocks
    }

    /// 1-indexed inclusive block range applied by `group` (also 1-indexed).
    pub fn group_blocks(&self, group: usize) -> Result<std::ops::RangeInclusive<usize>> {
        if group == 0 || group > self.num_interaction_blocks {
            return Err(Error::config(format!(
                "group {group} outside 1..={}",
                self.num_interaction_blocks
            )));
        }
        let per = self.blocks_per_group();
        Ok((group - 1) * per + 1..=group * per)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    fn new(b: &mut ParamBuilder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(b, &format!("{name}.qkv"), dim, 3 * dim, LinearInit::TruncNormal(0.02))?,
            proj: Linear::new(b, &format!("{name}.proj"), dim, dim, LinearInit::TruncNormal(0.02))?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (hd as f64).sqrt()))?;
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, d))?;
        self.proj.forward(&out)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut ParamBuilder, name: &str, dim: usize, hidden: usize, init: LinearInit) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(b, &format!("{name}.fc1"), dim, hidden, init)?,
            fc2: Linear::new(b, &format!("{name}.fc2"), hidden, dim, init)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    fn new(b: &mut ParamBuilder, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let hidden = (d as f64 * cfg.mlp_ratio).round() as usize;
        Ok(Self {
            norm1: LayerNorm::new(b, &format!("{name}.norm1"), d)?,
            attn: Attention::new(b, &format!("{name}.attn"), d, cfg.heads)?,
            norm2: LayerNorm::new(b, &format!("{name}.norm2"), d)?,
            mlp: Mlp::new(b, &format!("{name}.mlp"), d, hidden, LinearInit::TruncNormal(0.02))?,
        })
    }

    /// `z' = MHA(LN(z)) + z`, then `MLP(LN(z')) + z'`.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let z = (self.attn.forward(&self.norm1.forward(z)?)? + z)?;
        Ok((self.mlp.forward(&self.norm2.forward(&z)?)? + z)?)
    }
}

#[derive(Debug, Clone)]
pub struct VitEncoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl VitEncoder {
    pub fn new(b: &mut ParamBuilder, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let patch_dim = cfg.in_channels * cfg.patch_size * cfg.patch_size;
        let patch_embed =
            Linear::new(b, "encoder.patch_embed", patch_dim, d, LinearInit::TruncNormal(0.02))?;
        let cls_token = b.param("encoder.cls_token", &[1, d], Init::TruncNormal { std: 0.02 })?;
        let n = cfg.grid() * cfg.grid();
        let pos_embed = b.param(POS_EMBED_NAME, &[n + 1, d], Init::TruncNormal { std: 0.02 })?;
        let blocks = (1..=cfg.depth)
            .map(|i| Block::new(b, &format!("encoder.block{i}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(b, "encoder.norm", d)?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
        })
    }

    /// `[x_class; x_p^1 E; ...; x_p^N E] + E_pos`.
    ///
    /// Patches are flattened in (channel, row, column) order. For an input
    /// grid other than the configured one, the patch part of the position
    /// embedding is resized bilinearly.
    pub fn patch_embed(&self, image: &ImageTensor) -> Result<TokenSequence> {
        let p = self.cfg.patch_size;
        image.require_divisible(p)?;
        if image.channels() != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "encoder expects {} channels, got {}",
                self.cfg.in_channels,
                image.channels()
            )));
        }
        let (b, c, h, w) = image.tensor().dims4()?;
        let (gh, gw) = (h / p, w / p);
        let patches = image
            .tensor()
            .reshape((b, c, gh, p, gw, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, gh * gw, c * p * p))?;
        let tokens = self.patch_embed.forward(&patches)?;
        let d = self.cfg.embed_dim;
        let cls = self.cls_token.reshape((1, 1, d))?.broadcast_as((b, 1, d))?.contiguous()?;
        let tokens = Tensor::cat(&[&cls, &tokens], 1)?;
        let pos = self.position_embedding(gh, gw)?;
        let tokens = tokens.broadcast_add(&pos.unsqueeze(0)?)?;
        TokenSequence::new(tokens, true, (gh, gw))
    }

    fn position_embedding(&self, gh: usize, gw: usize) -> Result<Tensor> {
        let g = self.cfg.grid();
        if (gh, gw) == (g, g) {
            return Ok(self.pos_embed.clone());
        }
        let d = self.cfg.embed_dim;
        let cls = self.pos_embed.narrow(0, 0, 1)?;
        let grid = self.pos_embed.narrow(0, 1, g * g)?;
        let m = bilinear_matrix(g, g, gh, gw);
        let m = Tensor::from_vec(m, (gh * gw, g * g), self.pos_embed.device())?
            .to_dtype(self.pos_embed.dtype())?;
        let resized = m.matmul(&grid.contiguous()?)?;
        debug_assert_eq!(resized.dims(), &[gh * gw, d]);
        Ok(Tensor::cat(&[&cls, &resized], 0)?)
    }

    /// Applies block `index` (1-indexed).
    pub fn block_forward(&self, z: &TokenSequence, index: usize) -> Result<TokenSequence> {
        if index == 0 || index > self.blocks.len() {
            return Err(Error::config(format!("block {index} outside 1..={}", self.blocks.len())));
        }
        if !z.is_finite()? {
            return Err(Error::NonFinite(format!("input to block {index}")));
        }
        TokenSequence::new(self.blocks[index - 1].forward(&z.tokens)?, z.has_class_token, z.grid)
    }

    /// Applies the blocks of interaction group `group` (1-indexed) in order.
    pub fn group_forward(&self, z: &TokenSequence, group: usize) -> Result<TokenSequence> {
        let range = self.cfg.group_blocks(group)?;
        let mut t = z.tokens.clone();
        for i in range {
            t = self.blocks[i - 1].forward(&t)?;
        }
        TokenSequence::new(t, z.has_class_token, z.grid)
    }

    /// All blocks in sequence, without adapter interaction or final norm.
    pub fn forward_blocks(&self, z: &TokenSequence) -> Result<TokenSequence> {
        let mut t = z.tokens.clone();
        for block in &self.blocks {
            t = block.forward(&t)?;
        }
        TokenSequence::new(t, z.has_class_token, z.grid)
    }

    /// Final layer norm applied before the decoder consumes the tokens.
    pub fn final_norm(&self, z: &TokenSequence) -> Result<TokenSequence> {
        TokenSequence::new(self.norm.forward(&z.tokens)?, z.has_class_token, z.grid)
    }
}

pub fn class_token_of(z: &TokenSequence) -> Result<Tensor> {
    z.class_token()
}

/// Row-major `[new_h*new_w, old_h*old_w]` bilinear resampling matrix with
/// half-pixel centers and edge clamping.
pub fn bilinear_matrix(old_h: usize, old_w: usize, new_h: usize, new_w: usize) -> Vec<f64> {
    let (ys, xs) = (bilinear_axis(old_h, new_h), bilinear_axis(old_w, new_w));
    let mut m = vec![0.0; new_h * new_w * old_h * old_w];
    for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
            let row = &mut m[(i * new_w + j) * old_h * old_w..][..old_h * old_w];
            row[y0 * old_w + x0] += (1.0 - fy) * (1.0 - fx);
            row[y0 * old_w + x1] += (1.0 - fy) * fx;
            row[y1 * old_w + x0] += fy * (1.0 - fx);
            row[y1 * old_w + x1] += fy * fx;
        }
    }
    m
}

/// Resizes a `[1 + old_n, dim]` position embedding to `new_rows` rows; the
/// class-token slot is copied unchanged and both grids must be square.
pub fn resize_pos_embed(values: &[f64], old_rows: usize, new_rows: usize, dim: usize) -> Result<Vec<f64>> {
    let side = |rows: usize| -> Result<usize> {
        let n = rows.checked_sub(1).ok_or_else(|| Error::shape("empty position embedding"))?;
        let s = (n as f64).sqrt().round() as usize;
        if s * s != n {
            return Err(Error::shape(format!("position grid of {n} tokens is not square")));
        }
        Ok(s)
    };
    let (old_s, new_s) = (side(old_rows)?, side(new_rows)?);
    if values.len() != old_rows * dim {
        return Err(Error::shape("position embedding size does not match its shape"));
    }
    let m = bilinear_matrix(old_s, old_s, new_s, new_s);
    let mut out = Vec::with_capacity(new_rows * dim);
    out.extend_from_slice(&values[..dim]);
    let old_n = old_s * old_s;
    for r in 0..new_s * new_s {
        let weights = &m[r * old_n..(r + 1) * old_n];
        for c in 0..dim {
            let mut acc = 0.0;
            for (k, &wgt) in weights.iter().enumerate() {
                if wgt != 0.0 {
                    acc += wgt * values[(1 + k) * dim + c];
                }
            }
            out.push(acc);
        }
    }
    Ok(out)
}

/// Largest absolute entry, for quick diagnostics.
pub fn max_abs(t: &Tensor) -> Result<f64> {
    Ok(t.abs()?.flatten_all()?.max(D::Minus1)?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}
