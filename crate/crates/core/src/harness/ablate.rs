//! Fine-tuning strategy comparison and the magnification-drop check.

use serde::{Deserialize, Serialize};

use super::config::{FreezeConfig, RunConfig};
use super::infer::{evaluate_samples, infer_samples, MagnificationMode};
use super::train::{train, TrainHistory};
use crate::data::resample::degrade;
use crate::data::synth::{class_names, generate_in_memory};
use crate::data::{split_samples, LabeledSample};
use crate::error::Result;
use crate::exec::Execution;
use crate::metrics::EvalReport;
use crate::types::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Frozen encoder with the adapter.
    #[serde(rename = "a_adapter_frozen")]
    AdapterFrozen,
    /// Frozen encoder, decoder only.
    #[serde(rename = "b_decoder_only")]
    DecoderOnly,
    /// Whole network trained, no adapter.
    #[serde(rename = "c_full_finetune")]
    FullFinetune,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::AdapterFrozen, Variant::DecoderOnly, Variant::FullFinetune];

    pub fn name(self) -> &'static str {
        match self {
            Variant::AdapterFrozen => "a_adapter_frozen",
            Variant::DecoderOnly => "b_decoder_only",
            Variant::FullFinetune => "c_full_finetune",
        }
    }

    pub fn configure(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        let (adapter, encoder_frozen) = match self {
            Variant::AdapterFrozen => (true, true),
            Variant::DecoderOnly => (false, true),
            Variant::FullFinetune => (false, false),
        };
        cfg.model.use_adapter = adapter;
        cfg.freeze = FreezeConfig {
            encoder: encoder_frozen,
            ..base.freeze
        };
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub test: EvalReport,
    /// Test report on 2x degraded inputs; computed for the adapter variant.
    pub degraded: Option<EvalReport>,
    /// Wall time of the degraded-input evaluation.
    pub degraded_seconds: Option<f64>,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub variants: Vec<VariantResult>,
}

impl SeedResult {
    pub fn mpq(&self, v: Variant) -> Option<f64> {
        self.variants.iter().find(|r| r.variant == v).map(|r| r.test.mpq)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<SeedResult>,
    /// Seeds on which the adapter variant beat the decoder-only variant.
    pub adapter_wins: usize,
    /// Seeds on which degraded inputs scored below clean inputs.
    pub degradation_drops: usize,
}

impl AblationReport {
    pub fn from_seeds(seeds: Vec<SeedResult>) -> Self {
        let adapter_wins = seeds
            .iter()
            .filter(|s| matches!((s.mpq(Variant::AdapterFrozen), s.mpq(Variant::DecoderOnly)), (Some(a), Some(b)) if a > b))
            .count();
        let degradation_drops = seeds
            .iter()
            .flat_map(|s| &s.variants)
            .filter(|r| r.degraded.as_ref().is_some_and(|d| d.mpq < r.test.mpq))
            .count();
        Self {
            seeds,
            adapter_wins,
            degradation_drops,
        }
    }

    /// Plain-text comparison table.
    pub fn table(&self) -> String {
        let mut s = format!("{:<6} {:<18} {:>8} {:>8} {:>8} {:>8} {:>10}\n", "seed", "variant", "mPQ", "bPQ", "DICE", "AJI", "degr. mPQ");
        for seed in &self.seeds {
            for r in &seed.variants {
                let d = r.degraded.as_ref().map_or("-".to_string(), |d| format!("{:.4}", d.mpq));
                s += &format!(
                    "{:<6} {:<18} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>10}\n",
                    seed.seed,
                    r.variant.name(),
                    r.test.mpq,
                    r.test.bpq,
                    r.test.dice,
                    r.test.aji,
                    d
                );
            }
        }
        s
    }
}

/// Evaluates `samples` after passing every image through the 2x
/// down-and-up corruption.
pub fn degraded_report(
    model: &crate::model::CellVta,
    cfg: &RunConfig,
    samples: &[LabeledSample],
    class_names: &[String],
    exec: Execution,
) -> Result<EvalReport> {
    let images: Vec<Image> = samples.iter().map(|s| degrade(&s.image, 2)).collect();
    let refs: Vec<&Image> = images.iter().collect();
    let preds = infer_samples(model, &refs, MagnificationMode::Native, cfg.eval_batch_size, &cfg.postprocess, exec)?;
    evaluate_samples(samples, &preds, class_names, exec)
}

/// Trains each variant on one synthetic dataset drawn with `seed`.
pub fn ablate_seed(base: &RunConfig, seed: u64, variants: &[Variant], exec: Execution) -> Result<SeedResult> {
    let base = base.clone().with_seed(seed);
    let (samples, _) = generate_in_memory(&base.synth, exec)?;
    let (train_set, val, test) = split_samples(samples, base.split, seed)?;
    let names = class_names(base.synth.num_classes);
    let test_images: Vec<&Image> = test.iter().map(|s| &s.image).collect();
    let mut results = Vec::with_capacity(variants.len());
    for &v in variants {
        let mut cfg = v.configure(&base);
        cfg.paths.out_dir = base.paths.out_dir.as_ref().map(|d| d.join(format!("seed{seed}")).join(v.name()));
        log::info!("seed {seed}: training {}", v.name());
        let trained = train(&cfg, &train_set, &val, &names, exec)?;
        let preds = infer_samples(&trained.model, &test_images, MagnificationMode::Native, cfg.eval_batch_size, &cfg.postprocess, exec)?;
        let report = evaluate_samples(&test, &preds, &names, exec)?;
        let t0 = std::time::Instant::now();
        let degraded = match v {
            Variant::AdapterFrozen => Some(degraded_report(&trained.model, &cfg, &test, &names, exec)?),
            _ => None,
        };
        let degraded_seconds = degraded.as_ref().map(|_| t0.elapsed().as_secs_f64());
        log::info!("seed {seed}: {} test mPQ {:.4}", v.name(), report.mpq);
        results.push(VariantResult {
            variant: v,
            test: report,
            degraded,
            degraded_seconds,
            history: trained.history,
        });
    }
    Ok(SeedResult {
        seed,
        n_train: train_set.len(),
        n_val: val.len(),
        n_test: test.len(),
        variants: results,
    })
}

pub fn ablate(base: &RunConfig, seeds: &[u64], variants: &[Variant], exec: Execution) -> Result<AblationReport> {
    let results = seeds
        .iter()
        .map(|&s| ablate_seed(base, s, variants, exec))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport::from_seeds(results))
}
