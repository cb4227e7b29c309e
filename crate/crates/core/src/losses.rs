//! Training targets and the composite loss
//! `total = (dice + ft)[np] + (mse + msge)[hv] + (dice + ft + ce)[nc] + ce[tissue]`.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::decoder::Prediction;
use crate::error::{Error, Result};
use crate::ops;
use crate::types::InstanceMap;

pub const DICE_EPS: f64 = 1e-5;

/// Focal Tversky settings; the loss per class is `(1 - TI)^(1 / gamma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TverskyParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for TverskyParams {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 0.3,
            gamma: 0.75,
        }
    }
}

impl TverskyParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0 && self.gamma > 0.0;
        if !ok || !(self.alpha + self.beta).is_finite() {
            return Err(Error::config(format!(
                "invalid focal Tversky parameters alpha={} beta={} gamma={}",
                self.alpha, self.beta, self.gamma
            )));
        }
        Ok(())
    }
}

/// Per-image targets, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    pub height: usize,
    pub width: usize,
    pub np: Vec<u8>,
    /// Horizontal plane followed by vertical plane.
    pub hv: Vec<f64>,
    /// 0 is background, cell classes are `1..=C`.
    pub nc: Vec<u32>,
    pub tissue: usize,
}

impl TargetMaps {
    pub fn new(inst: &InstanceMap, types: &BTreeMap<u32, usize>, tissue: usize) -> Result<Self> {
        let mut nc = vec![0u32; inst.ids.len()];
        for (dst, &id) in nc.iter_mut().zip(&inst.ids) {
            if id != 0 {
                let t = types
                    .get(&id)
                    .ok_or_else(|| Error::Dataset(format!("instance {id} has no type")))?;
                *dst = *t as u32;
            }
        }
        Ok(Self {
            height: inst.height,
            width: inst.width,
            np: inst.ids.iter().map(|&id| (id != 0) as u8).collect(),
            hv: hv_targets_from_instances(inst),
            nc,
            tissue,
        })
    }
}

/// Horizontal and vertical offsets of every nuclear pixel from its instance's
/// center of mass, divided per instance and axis by the largest absolute
/// offset. Output is `[2, h, w]` flattened; background and degenerate axes are 0.
pub fn hv_targets_from_instances(inst: &InstanceMap) -> Vec<f64> {
    let (h, w) = (inst.height, inst.width);
    let mut out = vec![0.0; 2 * h * w];
    // id -> (sum x, sum y, count)
    let mut sums: BTreeMap<u32, (f64, f64, f64)> = BTreeMap::new();
    for y in 0..h {
        for x in 0..w {
            let id = inst.ids[y * w + x];
            if id != 0 {
                let e = sums.entry(id).or_default();
                e.0 += x as f64;
                e.1 += y as f64;
                e.2 += 1.0;
            }
        }
    }
    let centers: BTreeMap<u32, (f64, f64)> = sums.iter().map(|(&id, &(sx, sy, n))| (id, (sx / n, sy / n))).collect();
    let mut extent: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
    for y in 0..h {
        for x in 0..w {
            let id = inst.ids[y * w + x];
            if id == 0 {
                continue;
            }
            let (cx, cy) = centers[&id];
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            out[y * w + x] = dx;
            out[h * w + y * w + x] = dy;
            let e = extent.entry(id).or_default();
            e.0 = e.0.max(dx.abs());
            e.1 = e.1.max(dy.abs());
        }
    }
    for i in 0..h * w {
        let id = inst.ids[i];
        if id == 0 {
            continue;
        }
        let (ex, ey) = extent[&id];
        out[i] = if ex > 0.0 { out[i] / ex } else { 0.0 };
        out[h * w + i] = if ey > 0.0 { out[h * w + i] / ey } else { 0.0 };
    }
    out
}

/// Stacked targets for a batch, as tensors of the model dtype.
#[derive(Debug, Clone)]
pub struct TargetBatch {
    /// `[b, 2, h, w]`
    pub np_onehot: Tensor,
    /// `[b, 1, h, w]` nuclear-pixel mask.
    pub np_mask: Tensor,
    /// `[b, 1, h, w]` u32 class index for the NP branch.
    pub np_index: Tensor,
    /// `[b, 2, h, w]`
    pub hv: Tensor,
    /// `[b, C+1, h, w]`
    pub nc_onehot: Tensor,
    /// `[b, 1, h, w]` u32
    pub nc_index: Tensor,
    /// `[b, 1]` u32
    pub tissue: Tensor,
}

impl TargetBatch {
    pub fn new(targets: &[&TargetMaps], num_cell_classes: usize, dtype: DType, device: &Device) -> Result<Self> {
        let first = targets.first().ok_or_else(|| Error::shape("empty target batch"))?;
        let (h, w) = (first.height, first.width);
        let b = targets.len();
        let k = num_cell_classes + 1;
        let hw = h * w;
        let mut np_onehot = vec![0f64; b * 2 * hw];
        let mut np_index = Vec::with_capacity(b * hw);
        let mut hv = Vec::with_capacity(b * 2 * hw);
        let mut nc_onehot = vec![0f64; b * k * hw];
        let mut nc_index = Vec::with_capacity(b * hw);
        let mut tissue = Vec::with_capacity(b);
        for (i, t) in targets.iter().enumerate() {
            if (t.height, t.width) != (h, w) {
                return Err(Error::shape("targets in a batch must share one size"));
            }
            for (p, (&np, &nc)) in t.np.iter().zip(&t.nc).enumerate() {
                if nc as usize >= k {
                    return Err(Error::Dataset(format!("class id {nc} exceeds {num_cell_classes} classes")));
                }
                np_onehot[(i * 2 + np as usize) * hw + p] = 1.0;
                nc_onehot[(i * k + nc as usize) * hw + p] = 1.0;
            }
            np_index.extend(t.np.iter().map(|&v| v as u32));
            nc_index.extend_from_slice(&t.nc);
            hv.extend_from_slice(&t.hv);
            tissue.push(t.tissue as u32);
        }
        let mk = |v: Vec<f64>, c: usize| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, (b, c, h, w), device)?.to_dtype(dtype)?)
        };
        let np_onehot = mk(np_onehot, 2)?;
        Ok(Self {
            np_mask: np_onehot.narrow(1, 1, 1)?.contiguous()?,
            np_onehot,
            np_index: Tensor::from_vec(np_index, (b, 1, h, w), device)?,
            hv: mk(hv, 2)?,
            nc_onehot: mk(nc_onehot, k)?,
            nc_index: Tensor::from_vec(nc_index, (b, 1, h, w), device)?,
            tissue: Tensor::from_vec(tissue, (b, 1), device)?,
        })
    }
}

/// `[b, k, h, w]` -> `[k, b*h*w]`.
fn class_rows(t: &Tensor) -> Result<Tensor> {
    ops::nchw_to_rows(t)
}

/// Soft Dice complement averaged over classes; sums run over the whole batch.
pub fn dice_loss(probs: &Tensor, onehot: &Tensor) -> Result<Tensor> {
    if probs.dims() != onehot.dims() {
        return Err(Error::shape(format!("dice: {:?} vs {:?}", probs.dims(), onehot.dims())));
    }
    let p = class_rows(probs)?;
    let t = class_rows(onehot)?;
    let inter = (&p * &t)?.sum(1)?;
    let denom = (p.sum(1)? + t.sum(1)?)?;
    let score = ((inter * 2.0)? + DICE_EPS)?.div(&(denom + DICE_EPS)?)?;
    Ok(score.affine(-1.0, 1.0)?.mean(0)?)
}

/// Focal Tversky loss averaged over classes:
/// `TI = (TP + eps/2) / (TP + alpha FN + beta FP + eps/2)`, loss `(1 - TI)^(1/gamma)`.
///
/// With `alpha = beta = 0.5` and `gamma = 1` this equals [`dice_loss`].
pub fn focal_tversky_loss(probs: &Tensor, onehot: &Tensor, params: TverskyParams) -> Result<Tensor> {
    params.validate()?;
    if probs.dims() != onehot.dims() {
        return Err(Error::shape(format!("focal Tversky: {:?} vs {:?}", probs.dims(), onehot.dims())));
    }
    let p = class_rows(probs)?;
    let t = class_rows(onehot)?;
    let tp = (&p * &t)?.sum(1)?;
    let fn_ = (t.sum(1)? - &tp)?;
    let fp = (p.sum(1)? - &tp)?;
    let num = (&tp + DICE_EPS / 2.0)?;
    let den = ((tp + (fn_ * params.alpha)?)? + (fp * params.beta)?)? + DICE_EPS / 2.0;
    let ti = num.div(&den?)?;
    Ok(ti.affine(-1.0, 1.0)?.relu()?.powf(1.0 / params.gamma)?.mean(0)?)
}

/// 5x5 derivative kernel along x: `k[v][h] = h / (h^2 + v^2)` for
/// `h, v in -2..=2`, zero at the center. The y kernel is its transpose.
/// Applied as a correlation over an edge-replicated border, without normalization.
pub fn derivative_kernel() -> [[f64; 5]; 5] {
    let mut k = [[0.0; 5]; 5];
    for (r, row) in k.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (r as f64 - 2.0, c as f64 - 2.0);
            if dx != 0.0 || dy != 0.0 {
                *v = dx / (dx * dx + dy * dy);
            }
        }
    }
    k
}

fn kernel_tensor(transpose: bool, dtype: DType, device: &Device) -> Result<Tensor> {
    let k = derivative_kernel();
    let mut v = Vec::with_capacity(25);
    for r in 0..5 {
        for c in 0..5 {
            v.push(if transpose { k[c][r] } else { k[r][c] });
        }
    }
    Ok(Tensor::from_vec(v, (1, 1, 5, 5), device)?.to_dtype(dtype)?)
}

/// x-derivative of channel 0 and y-derivative of channel 1 of `[b, 2, h, w]`.
pub fn hv_gradients(hv: &Tensor) -> Result<Tensor> {
    let (dtype, device) = (hv.dtype(), hv.device());
    let padded = hv.pad_with_same(2, 2, 2)?.pad_with_same(3, 2, 2)?;
    let gx = ops::conv2d(&padded.narrow(1, 0, 1)?, &kernel_tensor(false, dtype, device)?, 1, 0)?;
    let gy = ops::conv2d(&padded.narrow(1, 1, 1)?, &kernel_tensor(true, dtype, device)?, 1, 0)?;
    Ok(Tensor::cat(&[gx, gy], 1)?)
}

/// Mean squared difference of HV gradients over nuclear pixels, both channels.
pub fn msge_loss(hv_pred: &Tensor, hv_target: &Tensor, np_mask: &Tensor) -> Result<Tensor> {
    if hv_pred.dims() != hv_target.dims() {
        return Err(Error::shape(format!("msge: {:?} vs {:?}", hv_pred.dims(), hv_target.dims())));
    }
    let diff = (hv_gradients(hv_pred)? - hv_gradients(hv_target)?)?;
    let masked = diff.sqr()?.broadcast_mul(np_mask)?;
    let count = np_mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()? * 2.0;
    if count == 0.0 {
        return Ok(masked.sum_all()?.affine(0.0, 0.0)?);
    }
    Ok(masked.sum_all()?.affine(1.0 / count, 0.0)?)
}

pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(format!("mse: {:?} vs {:?}", pred.dims(), target.dims())));
    }
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Mean negative log-likelihood; `logp` is `[b, k, ...]`, `index` is `[b, 1, ...]` u32.
pub fn cross_entropy(logp: &Tensor, index: &Tensor) -> Result<Tensor> {
    let picked = logp.gather(&index.contiguous()?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Every loss term plus the unweighted total.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub np_dice: Tensor,
    pub np_ft: Tensor,
    pub hv_mse: Tensor,
    pub hv_msge: Tensor,
    pub nc_dice: Tensor,
    pub nc_ft: Tensor,
    pub nc_ce: Tensor,
    pub tc_ce: Tensor,
    pub total: Tensor,
}

/// One JSON line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub np_dice: f64,
    pub np_ft: f64,
    pub hv_mse: f64,
    pub hv_msge: f64,
    pub nc_dice: f64,
    pub nc_ft: f64,
    pub nc_ce: f64,
    pub tc_ce: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("np_dice", &self.np_dice),
            ("np_ft", &self.np_ft),
            ("hv_mse", &self.hv_mse),
            ("hv_msge", &self.hv_msge),
            ("nc_dice", &self.nc_dice),
            ("nc_ft", &self.nc_ft),
            ("nc_ce", &self.nc_ce),
            ("tc_ce", &self.tc_ce),
        ]
    }

    pub fn record(&self, step: usize) -> Result<LossRecord> {
        let s = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossRecord {
            step,
            np_dice: s(&self.np_dice)?,
            np_ft: s(&self.np_ft)?,
            hv_mse: s(&self.hv_mse)?,
            hv_msge: s(&self.hv_msge)?,
            nc_dice: s(&self.nc_dice)?,
            nc_ft: s(&self.nc_ft)?,
            nc_ce: s(&self.nc_ce)?,
            tc_ce: s(&self.tc_ce)?,
            total: s(&self.total)?,
        })
    }
}

pub fn total_loss(pred: &Prediction, target: &TargetBatch, ft: TverskyParams) -> Result<LossBreakdown> {
    let np_probs = pred.np_probs()?;
    let nc_probs = pred.nc_probs()?;
    let np_dice = dice_loss(&np_probs, &target.np_onehot)?;
    let np_ft = focal_tversky_loss(&np_probs, &target.np_onehot, ft)?;
    let hv_mse = mse_loss(&pred.hv, &target.hv)?;
    let hv_msge = msge_loss(&pred.hv, &target.hv, &target.np_mask)?;
    let nc_dice = dice_loss(&nc_probs, &target.nc_onehot)?;
    let nc_ft = focal_tversky_loss(&nc_probs, &target.nc_onehot, ft)?;
    let nc_ce = cross_entropy(&pred.nc_logp, &target.nc_index)?;
    let tc_ce = cross_entropy(&pred.tissue_logp, &target.tissue)?;
    let total = (((((((&np_dice + &np_ft)? + &hv_mse)? + &hv_msge)? + &nc_dice)? + &nc_ft)? + &nc_ce)? + &tc_ce)?;
    Ok(LossBreakdown {
        np_dice,
        np_ft,
        hv_mse,
        hv_msge,
        nc_dice,
        nc_ft,
        nc_ce,
        tc_ce,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(v: Vec<f64>, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn bar_offsets() {
        let inst = InstanceMap::new(1, 5, vec![1; 5]).unwrap();
        let hv = hv_targets_from_instances(&inst);
        assert_eq!(&hv[..5], &[-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(&hv[5..], &[0.0; 5]);
    }

    #[test]
    fn empty_map_gives_zero_targets() {
        let hv = hv_targets_from_instances(&InstanceMap::empty(4, 6));
        assert!(hv.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disk_is_antisymmetric() {
        let (h, w) = (9, 9);
        let ids = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64 - 4.0, (i % w) as f64 - 4.0);
                (x * x + y * y <= 9.0) as u32
            })
            .collect();
        let hv = hv_targets_from_instances(&InstanceMap::new(h, w, ids).unwrap());
        assert_eq!(hv[4 * w + 4], 0.0);
        for y in 0..h {
            for x in 0..w {
                let m = (h - 1 - y) * w + (w - 1 - x);
                assert!((hv[y * w + x] + hv[m]).abs() < 1e-12);
                assert!((hv[h * w + y * w + x] + hv[h * w + m]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dice_hand_computed_2x2() {
        // class 1 target: pixels 0 and 1; uniform 0.5 prediction.
        let probs = t64(vec![0.5; 8], (1, 2, 2, 2));
        let onehot = t64(vec![0., 0., 1., 1., 1., 1., 0., 0.], (1, 2, 2, 2));
        let got = scalar(&dice_loss(&probs, &onehot).unwrap());
        // per class: inter 1, sums 2 + 2.
        let expected = 1.0 - (2.0 + DICE_EPS) / (4.0 + DICE_EPS);
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn ft_background_vs_single_pixel() {
        let probs = t64(vec![1., 1., 1., 1., 0., 0., 0., 0.], (1, 2, 2, 2));
        let onehot = t64(vec![1., 1., 1., 0., 0., 0., 0., 1.], (1, 2, 2, 2));
        let p = TverskyParams {
            alpha: 0.7,
            beta: 0.3,
            gamma: 1.0,
        };
        let loss = scalar(&focal_tversky_loss(&probs, &onehot, p).unwrap());
        // foreground: TP 0, FN 1 -> TI = (eps/2)/(0.7 + eps/2); background: TP 3, FP 1.
        let ti1 = (DICE_EPS / 2.0) / (0.7 + DICE_EPS / 2.0);
        let ti0 = (3.0 + DICE_EPS / 2.0) / (3.0 + 0.3 + DICE_EPS / 2.0);
        assert!((loss - ((1.0 - ti0) + (1.0 - ti1)) / 2.0).abs() < 1e-12);
        assert!(1.0 - ti1 > 0.9999);
    }

    #[test]
    fn kernel_on_unit_ramp() {
        let k = derivative_kernel();
        let response: f64 = (0..5).flat_map(|r| (0..5).map(move |c| (r, c))).map(|(r, c)| k[r][c] * (c as f64 - 2.0)).sum();
        assert!((response - 12.0).abs() < 1e-12);
    }

    #[test]
    fn msge_ignores_constant_offset() {
        let hv = Tensor::randn(0f64, 1., (1, 2, 6, 6), &Device::Cpu).unwrap();
        let mask = Tensor::ones((1, 1, 6, 6), DType::F64, &Device::Cpu).unwrap();
        let shifted = (&hv + 0.3).unwrap();
        assert!(scalar(&msge_loss(&shifted, &hv, &mask).unwrap()) < 1e-24);
        assert_eq!(scalar(&msge_loss(&hv, &hv, &mask).unwrap()), 0.0);
    }
}
