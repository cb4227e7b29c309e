use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::synth::SynthConfig;
use crate::data::SplitRatios;
use crate::error::{Error, Result};
use crate::losses::TverskyParams;
use crate::model::ModelConfig;
use crate::postprocess::PostprocessConfig;
use crate::registry::Group;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Toy,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Profile::Toy),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::config(format!("unknown profile `{other}` (toy, paper)"))),
        }
    }
}

/// AdamW with a per-epoch exponential learning rate: `lr * factor^epoch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub schedule_factor: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            schedule_factor: 0.85,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.schedule_factor.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeConfig {
    pub encoder: bool,
    pub adapter: bool,
    pub decoder: bool,
}

impl Default for FreezeConfig {
    fn default() -> Self {
        Self {
            encoder: true,
            adapter: false,
            decoder: false,
        }
    }
}

impl FreezeConfig {
    pub fn groups(&self) -> [(Group, bool); 3] {
        [
            (Group::Encoder, self.encoder),
            (Group::Adapter, self.adapter),
            (Group::Decoder, self.decoder),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Paths {
    /// Dataset manifest; train/val/test are split from it by patient.
    pub manifest: Option<PathBuf>,
    /// Encoder weights loaded (non-strictly) before training.
    pub pretrained: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub freeze: FreezeConfig,
    pub seed: u64,
    /// Random flips and quarter turns during training.
    pub augment: bool,
    pub split: SplitRatios,
    pub tversky: TverskyParams,
    pub postprocess: PostprocessConfig,
    /// Used by `synth` and `ablate`.
    pub synth: SynthConfig,
    /// Evaluation batch size.
    pub eval_batch_size: usize,
    pub paths: Paths,
}

impl RunConfig {
    /// 64 px images, 20 epochs, 200 synthetic samples.
    pub fn toy() -> Self {
        Self {
            profile: Profile::Toy,
            model: ModelConfig::toy(),
            optim: OptimConfig::default(),
            batch_size: 4,
            epochs: 20,
            freeze: FreezeConfig::default(),
            seed: 0,
            augment: true,
            split: SplitRatios::default(),
            tversky: TverskyParams::default(),
            postprocess: PostprocessConfig::toy(),
            synth: SynthConfig::toy(200, 0),
            eval_batch_size: 8,
            paths: Paths::default(),
        }
    }

    /// ViT-L sized model on 256 px tiles, 50 epochs.
    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            model: ModelConfig::paper(),
            epochs: 50,
            postprocess: PostprocessConfig::default(),
            synth: SynthConfig {
                count: 200,
                image_size: 256,
                num_classes: 5,
                num_tissue_classes: 19,
                num_patients: 10,
                seed: 0,
            },
            eval_batch_size: 4,
            ..Self::toy()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Toy => Self::toy(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Profile defaults with a partial JSON object merged on top.
    pub fn with_overrides(profile: Profile, overrides: &Value) -> Result<Self> {
        let mut base = serde_json::to_value(Self::for_profile(profile))?;
        merge(&mut base, overrides);
        let cfg: Self = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(profile: Profile, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::with_overrides(profile, &serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.tversky.validate()?;
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if !(self.optim.lr > 0.0 && self.optim.schedule_factor > 0.0) {
            return Err(Error::config("learning rate and schedule factor must be positive"));
        }
        if self.synth.num_classes != self.model.decoder.num_cell_classes {
            return Err(Error::config(format!(
                "synthetic data has {} classes but the decoder predicts {}",
                self.synth.num_classes, self.model.decoder.num_cell_classes
            )));
        }
        Ok(())
    }

    /// Sets `seed` everywhere a seed is drawn.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self
    }
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = RunConfig::toy();
        assert_eq!((cfg.optim.lr, cfg.optim.schedule_factor, cfg.batch_size), (3e-4, 0.85, 4));
        assert_eq!(cfg.optim.lr_at(2), 3e-4 * 0.85 * 0.85);
        let o = serde_json::json!({"epochs": 3, "model": {"use_adapter": false}});
        let cfg = RunConfig::with_overrides(Profile::Toy, &o).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert!(!cfg.model.use_adapter);
        assert_eq!(cfg.model.encoder.embed_dim, 64);
        let bad = serde_json::json!({"synth": {"num_classes": 4}});
        assert!(RunConfig::with_overrides(Profile::Toy, &bad).is_err());
    }
}
