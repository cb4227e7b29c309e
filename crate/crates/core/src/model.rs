//! Full network wiring: encoder, skip source (adapter or plain ViT skips),
//! decoder.

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterConfig};
use crate::decoder::{Decoder, DecoderConfig, Prediction};
use crate::encoder::{EncoderConfig, VitEncoder};
use crate::error::{Error, Result};
use crate::nn::{Deconv2x2, Mode};
use crate::registry::{Group, ParamBuilder, ParameterRegistry};
use crate::types::{FeatureMap, FeaturePyramid, ImageTensor, Scale, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub decoder: DecoderConfig,
    /// Without the adapter, skips come from intermediate ViT outputs that are
    /// upsampled by stacked deconvolutions (decoder-only baseline).
    pub use_adapter: bool,
}

impl ModelConfig {
    /// Desk-scale profile: 64 px input, 4x4 token grid, 3 cell and 2 tissue classes.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig {
                image_size: 64,
                in_channels: 3,
                patch_size: 16,
                embed_dim: 64,
                depth: 8,
                heads: 4,
                mlp_ratio: 4.0,
                num_interaction_blocks: 4,
            },
            adapter: AdapterConfig {
                spm_channels: 8,
                deform_heads: 2,
                deform_points: 2,
                ffn_ratio: 0.25,
            },
            decoder: DecoderConfig {
                stage_channels: [32, 16, 16, 8],
                num_cell_classes: 3,
                num_tissue_classes: 2,
            },
            use_adapter: true,
        }
    }

    /// ViT-L sized profile on 256 px tiles (PanNuke-style class counts).
    pub fn paper() -> Self {
        Self {
            encoder: EncoderConfig {
                image_size: 256,
                in_channels: 3,
                patch_size: 16,
                embed_dim: 1024,
                depth: 24,
                heads: 16,
                mlp_ratio: 4.0,
                num_interaction_blocks: 4,
            },
            adapter: AdapterConfig {
                spm_channels: 64,
                deform_heads: 4,
                deform_points: 4,
                ffn_ratio: 0.25,
            },
            decoder: DecoderConfig {
                stage_channels: [256, 128, 64, 64],
                num_cell_classes: 5,
                num_tissue_classes: 19,
            },
            use_adapter: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.patch_size != 16 {
            return Err(Error::config(
                "the skip topology assumes 16 px patches (token grid at 1/16 scale)",
            ));
        }
        Ok(())
    }
}

/// Decoder-only baseline skips: group outputs upsampled 1x, 2x, 3x.
#[derive(Debug, Clone)]
pub struct VitSkips {
    pub h1: Vec<Deconv2x2>,
    pub h2: Vec<Deconv2x2>,
    pub h3: Vec<Deconv2x2>,
}

impl VitSkips {
    fn new(b: &mut ParamBuilder, dim: usize) -> Result<Self> {
        let stack = |b: &mut ParamBuilder, level: usize, n: usize| -> Result<Vec<Deconv2x2>> {
            (1..=n)
                .map(|j| Deconv2x2::new(b, &format!("decoder.vit_skip.h{level}.up{j}"), dim, dim))
                .collect()
        };
        Ok(Self {
            h1: stack(b, 1, 3)?,
            h2: stack(b, 2, 2)?,
            h3: stack(b, 3, 1)?,
        })
    }

    fn forward(&self, groups: &[TokenSequence]) -> Result<FeaturePyramid> {
        let up = |stack: &[Deconv2x2], z: &TokenSequence| -> Result<candle_core::Tensor> {
            let mut x = z.to_grid()?;
            for d in stack {
                x = d.forward(&x)?;
            }
            Ok(x)
        };
        Ok(FeaturePyramid {
            h1: FeatureMap::new(up(&self.h1, &groups[0])?, Scale::inverse_of(2))?,
            h2: FeatureMap::new(up(&self.h2, &groups[1])?, Scale::inverse_of(4))?,
            h3: FeatureMap::new(up(&self.h3, &groups[2])?, Scale::inverse_of(8))?,
            h4: FeatureMap::new(groups[3].to_grid()?, Scale::inverse_of(16))?,
        })
    }
}

#[derive(Debug, Clone)]
pub enum SkipSource {
    Adapter(Adapter),
    VitSkips(VitSkips),
}

/// Intermediate results of one forward pass.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Last token sequence before the final layer norm.
    pub vit_tokens: TokenSequence,
    pub pyramid: FeaturePyramid,
}

#[derive(Debug, Clone)]
pub struct CellVta {
    pub cfg: ModelConfig,
    pub encoder: VitEncoder,
    pub skips: SkipSource,
    pub decoder: Decoder,
    pub registry: ParameterRegistry,
}

impl CellVta {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut b = ParamBuilder::new(seed, dtype, device.clone());
        let encoder = VitEncoder::new(&mut b, &cfg.encoder)?;
        let skips = if cfg.use_adapter {
            if cfg.encoder.num_interaction_blocks == 0 {
                return Err(Error::config("adapter needs at least one interaction block"));
            }
            SkipSource::Adapter(Adapter::new(&mut b, &cfg.adapter, &encoder)?)
        } else {
            if cfg.encoder.num_interaction_blocks != 4 {
                return Err(Error::config("ViT skips need exactly four encoder groups"));
            }
            SkipSource::VitSkips(VitSkips::new(&mut b, cfg.encoder.embed_dim)?)
        };
        let d = cfg.encoder.embed_dim;
        let decoder = Decoder::new(&mut b, &cfg.decoder, d, d, cfg.encoder.in_channels)?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            skips,
            decoder,
            registry: b.finish(),
        })
    }

    pub fn adapter(&self) -> Option<&Adapter> {
        match &self.skips {
            SkipSource::Adapter(a) => Some(a),
            SkipSource::VitSkips(_) => None,
        }
    }

    pub fn dtype(&self) -> DType {
        self.registry.dtype()
    }

    pub fn device(&self) -> &Device {
        self.registry.device()
    }

    pub fn set_frozen(&mut self, group: Group, frozen: bool) {
        self.registry.set_frozen(group, frozen);
    }

    pub fn encode(&self, image: &ImageTensor, mode: Mode) -> Result<Encoded> {
        let z0 = self.encoder.patch_embed(image)?;
        match &self.skips {
            SkipSource::Adapter(adapter) => {
                let (vit_tokens, sp) = adapter.interaction_forward(&self.encoder, image, &z0, mode)?;
                let pyramid = adapter.build_pyramid(&sp)?;
                Ok(Encoded { vit_tokens, pyramid })
            }
            SkipSource::VitSkips(skips) => {
                // nothing trainable upstream of a frozen plain encoder
                let frozen = self.registry.is_frozen(Group::Encoder);
                let mut z = z0;
                let mut groups = Vec::with_capacity(4);
                for g in 1..=4 {
                    z = self.encoder.group_forward(&z, g)?;
                    if frozen {
                        z = z.detached()?;
                    }
                    groups.push(z.clone());
                }
                let pyramid = skips.forward(&groups)?;
                Ok(Encoded { vit_tokens: z, pyramid })
            }
        }
    }

    pub fn forward(&self, image: &ImageTensor, mode: Mode) -> Result<Prediction> {
        let enc = self.encode(image, mode)?;
        let z_final = self.encoder.final_norm(&enc.vit_tokens)?;
        self.decoder.forward(image, &enc.pyramid, &z_final, mode)
    }
}
