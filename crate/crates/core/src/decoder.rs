//! Tri-branch U-Net decoder (nuclear pixel, horizontal/vertical, nuclear type)
//! fed by five skips, plus the tissue-classification head on the class token.
//!
//! Each branch climbs 1/16 -> 1/8 -> 1/4 -> 1/2 -> 1/1. A stage upsamples by a
//! 2x2 transposed convolution, concatenates its skip features and applies
//! two 3x3 conv + batch-norm + ReLU layers:
//!
//! | stage | resolution | skip features                                  |
//! |-------|------------|------------------------------------------------|
//! | 1     | 1/8        | H4 upsampled by deconvolution, H3 via 1x1 conv |
//! | 2     | 1/4        | H2 via 1x1 conv                                |
//! | 3     | 1/2        | H1 via 1x1 conv                                |
//! | 4     | 1/1        | input image via 3x3 conv + BN + ReLU           |
//!
//! Branches own independent parameters, skip projections included.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_softmax, Conv2d, ConvBnRelu, Deconv2x2, Linear, LinearInit, Mode};
use crate::registry::ParamBuilder;
use crate::types::{FeaturePyramid, ImageTensor, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Output widths of the 1/8, 1/4, 1/2 and 1/1 stages.
    pub stage_channels: [usize; 4],
    /// Nuclear types, excluding background.
    pub num_cell_classes: usize,
    pub num_tissue_classes: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) {
            return Err(Error::config("decoder stage widths must be positive"));
        }
        if self.num_cell_classes == 0 || self.num_tissue_classes == 0 {
            return Err(Error::config("need at least one cell class and one tissue class"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    NuclearPixel,
    HorizontalVertical,
    NuclearType,
}

impl BranchKind {
    pub fn prefix(self) -> &'static str {
        match self {
            BranchKind::NuclearPixel => "np",
            BranchKind::HorizontalVertical => "hv",
            BranchKind::NuclearType => "nc",
        }
    }
}

#[derive(Debug, Clone)]
struct Stage {
    up: Deconv2x2,
    skips: Vec<SkipProj>,
    conv1: ConvBnRelu,
    conv2: ConvBnRelu,
}

#[derive(Debug, Clone)]
enum SkipProj {
    Deconv(Deconv2x2),
    Pointwise(Conv2d),
    Image(ConvBnRelu),
}

impl SkipProj {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            SkipProj::Deconv(d) => d.forward(x),
            SkipProj::Pointwise(c) => c.forward(x),
            SkipProj::Image(c) => c.forward(x, mode),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub kind: BranchKind,
    stages: Vec<Stage>,
    pub head: Conv2d,
}

impl Branch {
    fn new(
        b: &mut ParamBuilder,
        kind: BranchKind,
        cfg: &DecoderConfig,
        bottleneck_ch: usize,
        pyramid_ch: usize,
        image_ch: usize,
        out_ch: usize,
    ) -> Result<Self> {
        let p = format!("decoder.{}", kind.prefix());
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = bottleneck_ch;
        for (s, &c) in cfg.stage_channels.iter().enumerate() {
            let name = format!("{p}.stage{}", s + 1);
            let up = Deconv2x2::new(b, &format!("{name}.up"), in_ch, c)?;
            let skips = match s {
                0 => vec![
                    SkipProj::Deconv(Deconv2x2::new(b, &format!("{name}.skip_h4"), pyramid_ch, c)?),
                    SkipProj::Pointwise(Conv2d::new(b, &format!("{name}.skip_h3"), pyramid_ch, c, 1, 1)?),
                ],
                1 | 2 => {
                    let level = 3 - s;
                    vec![SkipProj::Pointwise(Conv2d::new(
                        b,
                        &format!("{name}.skip_h{level}"),
                        pyramid_ch,
                        c,
                        1,
                        1,
                    )?)]
                }
                _ => vec![SkipProj::Image(ConvBnRelu::new(b, &format!("{name}.skip_image"), image_ch, c, 3, 1)?)],
            };
            let cat_ch = c * (1 + skips.len());
            let conv1 = ConvBnRelu::new(b, &format!("{name}.conv1"), cat_ch, c, 3, 1)?;
            let conv2 = ConvBnRelu::new(b, &format!("{name}.conv2"), c, c, 3, 1)?;
            stages.push(Stage { up, skips, conv1, conv2 });
            in_ch = c;
        }
        let head = Conv2d::new(b, &format!("{p}.head"), in_ch, out_ch, 1, 1)?;
        Ok(Self { kind, stages, head })
    }

    /// Raw head output at full resolution.
    pub fn forward(&self, bottleneck: &Tensor, skips: [&Tensor; 5], mode: Mode) -> Result<Tensor> {
        // skips: image, h1, h2, h3, h4
        let sources: [Vec<&Tensor>; 4] = [
            vec![skips[4], skips[3]],
            vec![skips[2]],
            vec![skips[1]],
            vec![skips[0]],
        ];
        let mut x = bottleneck.clone();
        for (stage, srcs) in self.stages.iter().zip(sources) {
            let mut parts = vec![stage.up.forward(&x)?];
            for (proj, src) in stage.skips.iter().zip(srcs) {
                parts.push(proj.forward(src, mode)?);
            }
            let cat = Tensor::cat(&parts, 1)?;
            x = stage.conv2.forward(&stage.conv1.forward(&cat, mode)?, mode)?;
        }
        self.head.forward(&x)
    }
}

/// Model output as tensors, batch-first and channel-major.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// `[batch, 2, H, W]` log-probabilities (background, nucleus).
    pub np_logp: Tensor,
    /// `[batch, 2, H, W]` in `[-1, 1]` (horizontal, vertical).
    pub hv: Tensor,
    /// `[batch, C+1, H, W]` log-probabilities, channel 0 is background.
    pub nc_logp: Tensor,
    /// `[batch, T]` log-probabilities.
    pub tissue_logp: Tensor,
}

impl Prediction {
    pub fn np_probs(&self) -> Result<Tensor> {
        Ok(self.np_logp.exp()?)
    }

    pub fn nc_probs(&self) -> Result<Tensor> {
        Ok(self.nc_logp.exp()?)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub np: Branch,
    pub hv: Branch,
    pub nc: Branch,
    pub tissue_head: Linear,
}

impl Decoder {
    pub fn new(b: &mut ParamBuilder, cfg: &DecoderConfig, embed_dim: usize, pyramid_ch: usize, image_ch: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            np: Branch::new(b, BranchKind::NuclearPixel, cfg, embed_dim, pyramid_ch, image_ch, 2)?,
            hv: Branch::new(b, BranchKind::HorizontalVertical, cfg, embed_dim, pyramid_ch, image_ch, 2)?,
            nc: Branch::new(
                b,
                BranchKind::NuclearType,
                cfg,
                embed_dim,
                pyramid_ch,
                image_ch,
                cfg.num_cell_classes + 1,
            )?,
            tissue_head: Linear::new(
                b,
                "decoder.tissue_head",
                embed_dim,
                cfg.num_tissue_classes,
                LinearInit::TruncNormal(0.02),
            )?,
        })
    }

    /// `z_final` is the normalized last token sequence; its patch grid is the
    /// 1/16 bottleneck and its class token feeds the tissue head.
    pub fn forward(
        &self,
        image: &ImageTensor,
        pyramid: &FeaturePyramid,
        z_final: &TokenSequence,
        mode: Mode,
    ) -> Result<Prediction> {
        let (h, w) = (image.height(), image.width());
        pyramid.validate(h, w)?;
        if z_final.grid != pyramid.h4.hw() {
            return Err(Error::shape(format!(
                "token grid {:?} does not match the 1/16 pyramid level {:?}",
                z_final.grid,
                pyramid.h4.hw()
            )));
        }
        let cls = z_final.class_token()?;
        let bottleneck = z_final.to_grid()?;
        let skips = [
            image.tensor(),
            &pyramid.h1.tensor,
            &pyramid.h2.tensor,
            &pyramid.h3.tensor,
            &pyramid.h4.tensor,
        ];
        let np = self.np.forward(&bottleneck, skips, mode)?;
        let hv = self.hv.forward(&bottleneck, skips, mode)?.tanh()?;
        let nc = self.nc.forward(&bottleneck, skips, mode)?;
        let tissue = self.tissue_head.forward(&cls)?;
        Ok(Prediction {
            np_logp: log_softmax(&np, 1)?,
            hv,
            nc_logp: log_softmax(&nc, 1)?,
            tissue_logp: log_softmax(&tissue, 1)?,
        })
    }
}
