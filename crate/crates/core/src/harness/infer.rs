use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::tiling::{merge_and_downsample, upsample_and_tile, TileGeometry};
use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::losses::TargetMaps;
use crate::metrics::{evaluate, EvalReport};
use crate::model::CellVta;
use crate::nn::Mode;
use crate::postprocess::{postprocess, InstanceResult, PostprocessConfig, PredictionMaps};
use crate::types::{Image, ImageTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MagnificationMode {
    /// Images go through the model at their own size.
    Native,
    /// Upsample, run four overlapping tiles, merge and downsample.
    Upsample40x,
}

impl std::str::FromStr for MagnificationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "native" => Ok(Self::Native),
            "upsample40x" => Ok(Self::Upsample40x),
            other => Err(Error::config(format!("unknown magnification mode `{other}` (native, upsample40x)"))),
        }
    }
}

/// Forward passes in eval mode, `batch` images at a time.
pub fn predict_maps(model: &CellVta, images: &[&Image], batch: usize) -> Result<Vec<PredictionMaps>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let x = ImageTensor::from_images(chunk, model.dtype(), model.device())?;
        let pred = model.forward(&x, Mode::Eval)?;
        out.extend(PredictionMaps::from_prediction(&pred)?);
    }
    Ok(out)
}

pub fn predict_tiled(model: &CellVta, image: &Image, geom: &TileGeometry) -> Result<PredictionMaps> {
    let set = upsample_and_tile(image, geom)?;
    let patches: Vec<&Image> = set.tiles.iter().map(|t| &t.patch).collect();
    let maps = predict_maps(model, &patches, patches.len())?;
    let tiles: Vec<_> = set.tiles.iter().map(|t| t.origin).zip(maps).collect();
    merge_and_downsample(&tiles, geom)
}

/// Model maps for every image in the chosen magnification mode.
pub fn infer_maps(
    model: &CellVta,
    images: &[&Image],
    mode: MagnificationMode,
    batch: usize,
) -> Result<Vec<PredictionMaps>> {
    match mode {
        MagnificationMode::Native => predict_maps(model, images, batch),
        MagnificationMode::Upsample40x => {
            let geom = TileGeometry::scaled(model.cfg.encoder.image_size)?;
            images.iter().map(|img| predict_tiled(model, img, &geom)).collect()
        }
    }
}

pub fn postprocess_all(maps: &[PredictionMaps], cfg: &PostprocessConfig, exec: Execution) -> Result<Vec<InstanceResult>> {
    exec::try_map(maps, exec, |m| postprocess(m, cfg))
}

/// Forward passes run in order; postprocessing fans out per image.
pub fn infer_samples(
    model: &CellVta,
    images: &[&Image],
    mode: MagnificationMode,
    batch: usize,
    cfg: &PostprocessConfig,
    exec: Execution,
) -> Result<Vec<InstanceResult>> {
    postprocess_all(&infer_maps(model, images, mode, batch)?, cfg, exec)
}

/// The debug bypass: maps built from ground truth instead of a model.
pub fn ideal_results(
    samples: &[LabeledSample],
    num_classes: usize,
    cfg: &PostprocessConfig,
    exec: Execution,
) -> Result<Vec<InstanceResult>> {
    exec::try_map(samples, exec, |s| {
        let target = TargetMaps::new(&s.inst_map, &s.types, s.tissue)?;
        postprocess(&PredictionMaps::ideal(&target, num_classes)?, cfg)
    })
}

pub fn evaluate_samples(
    samples: &[LabeledSample],
    preds: &[InstanceResult],
    class_names: &[String],
    exec: Execution,
) -> Result<EvalReport> {
    if samples.len() != preds.len() {
        return Err(Error::Dataset(format!(
            "{} ground-truth samples but {} predictions",
            samples.len(),
            preds.len()
        )));
    }
    let gts = exec::try_map(samples, exec, |s| s.ground_truth())?;
    let pairs: Vec<_> = gts.iter().zip(preds).collect();
    evaluate(&pairs, class_names, exec)
}

/// Loads `<stem>.png` + `<stem>.json` for every sample from `dir`; missing
/// predictions are reported together.
pub fn load_predictions(dir: &Path, samples: &[LabeledSample]) -> Result<Vec<InstanceResult>> {
    let missing: Vec<&str> = samples
        .iter()
        .filter(|s| !dir.join(format!("{}.png", s.name)).exists() || !dir.join(format!("{}.json", s.name)).exists())
        .map(|s| s.name.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "missing predictions for {} sample(s): {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    samples.iter().map(|s| InstanceResult::load(dir, &s.name)).collect()
}

/// The image with instance boundaries painted in their class color.
pub fn overlay(image: &Image, result: &InstanceResult) -> Result<Image> {
    let map = &result.inst_map;
    if (image.height, image.width) != (map.height, map.width) || image.channels != 3 {
        return Err(Error::shape("overlay needs an RGB image of the label map's size"));
    }
    let (h, w) = (map.height, map.width);
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let id = map.get(y, x);
            if id == 0 {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || map.get(y - 1, x) != id
                || map.get(y + 1, x) != id
                || map.get(y, x - 1) != id
                || map.get(y, x + 1) != id;
            if edge {
                let color = result.types.get(&id).map_or([1.0; 3], |&c| OVERLAY_COLORS[(c - 1) % OVERLAY_COLORS.len()]);
                for (c, &v) in color.iter().enumerate() {
                    out.set(c, y, x, v);
                }
            }
        }
    }
    Ok(out)
}

const OVERLAY_COLORS: [[f32; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.3, 1.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
];

pub fn write_overlay(path: &Path, image: &Image, result: &InstanceResult) -> Result<()> {
    crate::data::manifest::write_rgb_png(path, &overlay(image, result)?)
}
