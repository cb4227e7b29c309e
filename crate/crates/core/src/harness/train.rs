//! Frozen-encoder training loop: AdamW, per-epoch exponential learning rate,
//! validation mPQ after every epoch and best-epoch selection.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::infer::{evaluate_samples, infer_samples, MagnificationMode};
use crate::checkpoint;
use crate::data::augment::Dihedral;
use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::losses::{total_loss, LossRecord, TargetBatch, TargetMaps};
use crate::model::CellVta;
use crate::nn::Mode;
use crate::registry::Group;
use crate::types::{Image, ImageTensor};

/// One JSON line of the epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(rename = "val_mPQ")]
    pub val_mpq: Option<f64>,
    pub encoder_checksum: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub losses: Vec<LossRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    #[serde(rename = "best_val_mPQ")]
    pub best_val_mpq: Option<f64>,
    pub encoder_checksum_start: String,
    pub encoder_checksum_end: String,
}

impl TrainHistory {
    /// Mean total loss over the first and the last `window` steps.
    pub fn smoothed_endpoints(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.losses.len();
        if n == 0 || window == 0 {
            return None;
        }
        let w = window.min(n);
        let mean = |r: &[LossRecord]| r.iter().map(|l| l.total).sum::<f64>() / r.len() as f64;
        Some((mean(&self.losses[..w]), mean(&self.losses[n - w..])))
    }
}

pub struct Trained {
    pub model: CellVta,
    pub history: TrainHistory,
}

/// Builds the model, applies freeze flags and optional pretrained weights.
pub fn build_model(cfg: &RunConfig, device: &Device) -> Result<CellVta> {
    let mut model = CellVta::new(&cfg.model, cfg.seed, DType::F32, device)?;
    if let Some(path) = &cfg.paths.pretrained {
        let report = checkpoint::load_into(&model.registry, path, false)?;
        log::info!(
            "loaded {} pretrained tensors ({} missing, {} unexpected)",
            report.updated.len(),
            report.missing.len(),
            report.unexpected.len()
        );
    }
    for (group, frozen) in cfg.freeze.groups() {
        model.set_frozen(group, frozen);
    }
    Ok(model)
}

/// Rebuilds the network for a checkpoint and loads it strictly. The model
/// config comes from `run_config.json` beside the checkpoint when present.
pub fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<CellVta> {
    let beside = ckpt.with_file_name("run_config.json");
    let model_cfg = if beside.exists() {
        RunConfig::from_file(cfg.profile, &beside)?.model
    } else {
        cfg.model.clone()
    };
    let model = CellVta::new(&model_cfg, cfg.seed, DType::F32, &Device::Cpu)?;
    checkpoint::load_into(&model.registry, ckpt, true)?;
    Ok(model)
}

fn checksum(model: &CellVta) -> Result<String> {
    Ok(format!("{:016x}", model.registry.group_checksum(Group::Encoder)?))
}

fn augmented(sample: &LabeledSample, t: Dihedral) -> (Image, TargetMaps) {
    let inst = t.apply_labels(&sample.inst_map);
    let target = TargetMaps::new(&inst, &sample.types, sample.tissue).expect("types validated on load");
    (t.apply_image(&sample.image), target)
}

struct Logs {
    loss: Option<BufWriter<File>>,
    epoch: Option<BufWriter<File>>,
}

impl Logs {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Self { loss: None, epoch: None });
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            Ok(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?))
        };
        Ok(Self {
            loss: Some(open("loss.jsonl")?),
            epoch: Some(open("epochs.jsonl")?),
        })
    }

    fn line<T: Serialize>(w: &mut Option<BufWriter<File>>, value: &T) -> Result<()> {
        if let Some(w) = w {
            let line = serde_json::to_string(value)?;
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

/// Trains on `train`, selecting the epoch with the best mPQ on `val`
/// (the last epoch if `val` is empty). The returned model holds the
/// selected weights. With `out_dir`, writes `loss.jsonl`, `epochs.jsonl`,
/// `best.ckpt` and `run_config.json`.
pub fn train(cfg: &RunConfig, train: &[LabeledSample], val: &[LabeledSample], class_names: &[String], exec: Execution) -> Result<Trained> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let num_classes = cfg.model.decoder.num_cell_classes;
    if class_names.len() != num_classes {
        return Err(Error::Dataset(format!(
            "dataset has {} cell classes, model predicts {num_classes}",
            class_names.len()
        )));
    }
    let size = cfg.model.encoder.image_size;
    if let Some(s) = train.iter().chain(val).find(|s| s.image.height != size || s.image.width != size) {
        return Err(Error::Dataset(format!(
            "sample {} is {}x{}, model expects {size}",
            s.name, s.image.height, s.image.width
        )));
    }
    if let Some(s) = train.iter().find(|s| s.tissue >= cfg.model.decoder.num_tissue_classes) {
        return Err(Error::Dataset(format!("sample {} has tissue class {} out of range", s.name, s.tissue)));
    }

    let out_dir = cfg.paths.out_dir.as_deref();
    let mut logs = Logs::open(out_dir)?;
    if let Some(dir) = out_dir {
        let p = dir.join("run_config.json");
        std::fs::write(&p, serde_json::to_string_pretty(cfg)? + "\n").map_err(|e| Error::io(&p, e))?;
    }

    let device = Device::Cpu;
    let model = build_model(cfg, &device)?;
    let vars = model.registry.trainable_vars();
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: cfg.optim.lr,
            beta1: cfg.optim.beta1,
            beta2: cfg.optim.beta2,
            eps: cfg.optim.eps,
            weight_decay: cfg.optim.weight_decay,
        },
    )?;
    let plain: Vec<TargetMaps> = train
        .iter()
        .map(|s| TargetMaps::new(&s.inst_map, &s.types, s.tissue))
        .collect::<Result<_>>()?;

    let start_sum = checksum(&model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let mut history = TrainHistory {
        losses: Vec::new(),
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_mpq: None,
        encoder_checksum_start: start_sum.clone(),
        encoder_checksum_end: start_sum,
    };
    let mut best: Option<(f64, _)> = None;
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = cfg.optim.lr_at(epoch);
        opt.set_learning_rate(lr);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                if cfg.augment {
                    let t = Dihedral::from_index(rng.random_range(0..8));
                    let (img, target) = augmented(&train[i], t);
                    images.push(img);
                    targets.push(target);
                } else {
                    images.push(train[i].image.clone());
                    targets.push(plain[i].clone());
                }
            }
            let image_refs: Vec<&Image> = images.iter().collect();
            let target_refs: Vec<&TargetMaps> = targets.iter().collect();
            let x = ImageTensor::from_images(&image_refs, model.dtype(), &device)?;
            let batch = TargetBatch::new(&target_refs, num_classes, model.dtype(), &device)?;
            let pred = model.forward(&x, Mode::Train)?;
            let loss = total_loss(&pred, &batch, cfg.tversky)?;
            let record = loss.record(step)?;
            if !record.total.is_finite() {
                let terms = serde_json::to_string(&record)?;
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, step {step}: {terms}")));
            }
            let grads = loss.total.backward()?;
            opt.step(&grads)?;
            epoch_loss += record.total;
            batches += 1;
            Logs::line(&mut logs.loss, &record)?;
            history.losses.push(record);
            step += 1;
        }

        let val_mpq = if val.is_empty() {
            None
        } else {
            let images: Vec<&Image> = val.iter().map(|s| &s.image).collect();
            let preds = infer_samples(&model, &images, MagnificationMode::Native, cfg.eval_batch_size, &cfg.postprocess, exec)?;
            Some(evaluate_samples(val, &preds, class_names, exec)?.mpq)
        };
        let score = val_mpq.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _)| score > *b) || val_mpq.is_none() {
            best = Some((score, model.registry.snapshot()?));
            history.best_epoch = epoch;
            history.best_val_mpq = val_mpq;
            if let Some(dir) = out_dir {
                checkpoint::save(&model.registry, dir.join("best.ckpt"))?;
            }
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: epoch_loss / batches as f64,
            val_mpq,
            encoder_checksum: checksum(&model)?,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e} loss {:.4} val mPQ {} ({:.1}s)",
            record.train_loss,
            val_mpq.map_or("-".into(), |v| format!("{v:.4}")),
            record.seconds
        );
        Logs::line(&mut logs.epoch, &record)?;
        history.epochs.push(record);
    }
    history.encoder_checksum_end = checksum(&model)?;
    if let Some((_, snapshot)) = best {
        model.registry.restore(&snapshot)?;
    }
    if let Some(dir) = out_dir {
        let p = dir.join("history.json");
        std::fs::write(&p, serde_json::to_string_pretty(&history)? + "\n").map_err(|e| Error::io(&p, e))?;
    }
    Ok(Trained { model, history })
}
