//! CNN spatial-prior adapter around the ViT encoder.
//!
//! Per interaction block `i`:
//!
//! ```text
//! vit_hat = vit + gamma_i * Attn(LN(vit), LN(sp))          (injector)
//! vit'    = encoder group i (vit_hat)
//! sp_hat  = sp + Attn(LN(sp), LN(vit'))                     (extractor)
//! sp'     = sp_hat + FFN(LN(sp_hat))
//! ```
//!
//! The class token never enters the cross-attentions; it only takes part in
//! the encoder's self-attention.

pub mod deform;
pub mod spm;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use deform::{grid_centers, DeformableAttention, ValueLevels};
pub use spm::{flatten_map, SpatialPriorModule, SpatialPriorTokens};

use crate::encoder::{Mlp, VitEncoder};
use crate::error::{Error, Result};
use crate::nn::{Deconv2x2, LayerNorm, LinearInit, Mode};
use crate::registry::{Init, ParamBuilder};
use crate::types::{FeatureMap, FeaturePyramid, ImageTensor, Scale, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Base width of the spatial prior CNN.
    pub spm_channels: usize,
    pub deform_heads: usize,
    pub deform_points: usize,
    /// Hidden width of the extractor FFN as a fraction of the token dim.
    pub ffn_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct Injector {
    pub query_norm: LayerNorm,
    pub feat_norm: LayerNorm,
    pub attn: DeformableAttention,
    pub gamma: Tensor,
}

impl Injector {
    fn new(b: &mut ParamBuilder, name: &str, dim: usize, cfg: &AdapterConfig, levels: usize) -> Result<Self> {
        Ok(Self {
            query_norm: LayerNorm::new(b, &format!("{name}.query_norm"), dim)?,
            feat_norm: LayerNorm::new(b, &format!("{name}.feat_norm"), dim)?,
            attn: DeformableAttention::new(b, &format!("{name}.attn"), dim, cfg.deform_heads, levels, cfg.deform_points)?,
            gamma: b.param(&format!("{name}.gamma"), &[dim], Init::Zeros)?,
        })
    }

    /// Updates the patch tokens of `f_vit`; the class token is reattached unchanged.
    pub fn forward(&self, f_vit: &TokenSequence, f_sp: &SpatialPriorTokens) -> Result<TokenSequence> {
        let patches = f_vit.patch_tokens()?;
        let refs = grid_centers(f_vit.grid.0, f_vit.grid.1);
        let feat = self.feat_norm.forward(&f_sp.tokens)?;
        let value = ValueLevels {
            tokens: &feat,
            shapes: &f_sp.level_shapes,
            starts: &f_sp.level_starts,
        };
        let attended = self.attn.forward(&self.query_norm.forward(&patches)?, &refs, &value)?;
        let updated = (&patches + attended.broadcast_mul(&self.gamma)?)?;
        f_vit.with_patch_tokens(&updated)
    }
}

#[derive(Debug, Clone)]
pub struct Extractor {
    pub query_norm: LayerNorm,
    pub feat_norm: LayerNorm,
    pub attn: DeformableAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: Mlp,
}

impl Extractor {
    fn new(b: &mut ParamBuilder, name: &str, dim: usize, cfg: &AdapterConfig) -> Result<Self> {
        let hidden = ((dim as f64 * cfg.ffn_ratio).round() as usize).max(1);
        Ok(Self {
            query_norm: LayerNorm::new(b, &format!("{name}.query_norm"), dim)?,
            feat_norm: LayerNorm::new(b, &format!("{name}.feat_norm"), dim)?,
            attn: DeformableAttention::new(b, &format!("{name}.attn"), dim, cfg.deform_heads, 1, cfg.deform_points)?,
            ffn_norm: LayerNorm::new(b, &format!("{name}.ffn_norm"), dim)?,
            ffn: Mlp::new(b, &format!("{name}.ffn"), dim, hidden, LinearInit::Xavier)?,
        })
    }

    /// Spatial tokens query the ViT patch grid (class token excluded).
    pub fn forward(&self, f_sp: &SpatialPriorTokens, f_vit_next: &TokenSequence) -> Result<SpatialPriorTokens> {
        let mut refs = Vec::with_capacity(f_sp.total_tokens());
        for &(h, w) in &f_sp.level_shapes {
            refs.extend(grid_centers(h, w));
        }
        let vit = self.feat_norm.forward(&f_vit_next.patch_tokens()?)?;
        let shapes = [f_vit_next.grid];
        let value = ValueLevels {
            tokens: &vit,
            shapes: &shapes,
            starts: &[0],
        };
        let sp_hat = (&f_sp.tokens + self.attn.forward(&self.query_norm.forward(&f_sp.tokens)?, &refs, &value)?)?;
        let sp_next = (&sp_hat + self.ffn.forward(&self.ffn_norm.forward(&sp_hat)?)?)?;
        f_sp.with_tokens(sp_next)
    }
}

#[derive(Debug, Clone)]
pub struct Adapter {
    pub cfg: AdapterConfig,
    pub spm: SpatialPriorModule,
    pub injectors: Vec<Injector>,
    pub extractors: Vec<Extractor>,
    pub up: Deconv2x2,
}

impl Adapter {
    pub fn new(b: &mut ParamBuilder, cfg: &AdapterConfig, encoder: &VitEncoder) -> Result<Self> {
        let d = encoder.cfg.embed_dim;
        if cfg.deform_heads == 0 || d % cfg.deform_heads != 0 || cfg.deform_points == 0 {
            return Err(Error::config("deformable heads must divide the embed dim; points must be positive"));
        }
        let spm = SpatialPriorModule::new(b, encoder.cfg.in_channels, cfg.spm_channels, d)?;
        let n = encoder.cfg.num_interaction_blocks;
        let mut injectors = Vec::with_capacity(n);
        let mut extractors = Vec::with_capacity(n);
        for i in 1..=n {
            injectors.push(Injector::new(b, &format!("adapter.injector{i}"), d, cfg, 3)?);
            extractors.push(Extractor::new(b, &format!("adapter.extractor{i}"), d, cfg)?);
        }
        let up = Deconv2x2::new(b, "adapter.up", d, d)?;
        Ok(Self {
            cfg: cfg.clone(),
            spm,
            injectors,
            extractors,
            up,
        })
    }

    pub fn spm_forward(&self, image: &ImageTensor, mode: Mode) -> Result<SpatialPriorTokens> {
        self.spm.forward(image, mode)
    }

    /// Interaction block `block` is 1-indexed.
    pub fn inject(&self, f_vit: &TokenSequence, f_sp: &SpatialPriorTokens, block: usize) -> Result<TokenSequence> {
        self.check_levels(f_vit, f_sp)?;
        self.injector(block)?.forward(f_vit, f_sp)
    }

    pub fn extract(&self, f_sp: &SpatialPriorTokens, f_vit_next: &TokenSequence, block: usize) -> Result<SpatialPriorTokens> {
        self.check_levels(f_vit_next, f_sp)?;
        let ex = self
            .extractors
            .get(block.wrapping_sub(1))
            .ok_or_else(|| Error::config(format!("no extractor {block}")))?;
        ex.forward(f_sp, f_vit_next)
    }

    fn injector(&self, block: usize) -> Result<&Injector> {
        self.injectors
            .get(block.wrapping_sub(1))
            .ok_or_else(|| Error::config(format!("no injector {block}")))
    }

    /// The ViT grid must be the 1/16 level, so the pyramid is 4x, 2x and 1x of it.
    fn check_levels(&self, f_vit: &TokenSequence, f_sp: &SpatialPriorTokens) -> Result<()> {
        let (gh, gw) = f_vit.grid;
        let expected = [(4 * gh, 4 * gw), (2 * gh, 2 * gw), (gh, gw)];
        if f_sp.level_shapes.as_slice() != expected {
            return Err(Error::shape(format!(
                "spatial levels {:?} do not match ViT grid {gh}x{gw}",
                f_sp.level_shapes
            )));
        }
        Ok(())
    }

    /// inject, encoder group, extract for every interaction block in turn.
    pub fn interaction_forward(
        &self,
        encoder: &VitEncoder,
        image: &ImageTensor,
        z0: &TokenSequence,
        mode: Mode,
    ) -> Result<(TokenSequence, SpatialPriorTokens)> {
        let mut sp = self.spm_forward(image, mode)?;
        let mut vit = z0.clone();
        for i in 1..=self.injectors.len() {
            let injected = self.inject(&vit, &sp, i)?;
            vit = encoder.group_forward(&injected, i)?;
            sp = self.extract(&sp, &vit, i)?;
        }
        Ok((vit, sp))
    }

    /// Unflattens the levels into h2..h4 and deconvolves h2 into h1.
    pub fn build_pyramid(&self, f_sp: &SpatialPriorTokens) -> Result<FeaturePyramid> {
        if f_sp.level_shapes.len() != 3 {
            return Err(Error::shape("pyramid needs exactly three spatial levels"));
        }
        let h2 = f_sp.level_map(0)?;
        let h3 = f_sp.level_map(1)?;
        let h4 = f_sp.level_map(2)?;
        let h1 = self.up.forward(&h2)?;
        Ok(FeaturePyramid {
            h1: FeatureMap::new(h1, Scale::inverse_of(2))?,
            h2: FeatureMap::new(h2, Scale::inverse_of(4))?,
            h3: FeatureMap::new(h3, Scale::inverse_of(8))?,
            h4: FeatureMap::new(h4, Scale::inverse_of(16))?,
        })
    }
}
