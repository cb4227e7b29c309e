//! Instance segmentation metrics: the PQ family, DICE and AJI.
//!
//! Conventions: two empty maps score 1 on PQ, DICE and AJI. Multi-class and
//! binary PQ aggregate TP/FP/FN and IoU sums over the whole dataset before
//! dividing; DICE and AJI are per-image means.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::postprocess::InstanceResult;
use crate::types::InstanceMap;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// `(gt_id, pred_id, iou)` with `iou > 0.5`, ordered by gt id.
    pub pairs: Vec<(u32, u32, f64)>,
    pub unmatched_gt: Vec<u32>,
    pub unmatched_pred: Vec<u32>,
}

/// Pixel areas per id and intersections per `(gt, pred)` pair.
#[derive(Debug, Clone, Default)]
pub struct Overlaps {
    pub gt_area: BTreeMap<u32, u64>,
    pub pred_area: BTreeMap<u32, u64>,
    pub inter: BTreeMap<(u32, u32), u64>,
}

impl Overlaps {
    pub fn new(gt: &InstanceMap, pred: &InstanceMap) -> Result<Self> {
        gt.same_shape(pred)?;
        let mut o = Self::default();
        for (&g, &p) in gt.ids.iter().zip(&pred.ids) {
            if g != 0 {
                *o.gt_area.entry(g).or_default() += 1;
            }
            if p != 0 {
                *o.pred_area.entry(p).or_default() += 1;
            }
            if g != 0 && p != 0 {
                *o.inter.entry((g, p)).or_default() += 1;
            }
        }
        Ok(o)
    }

    pub fn iou(&self, g: u32, p: u32) -> f64 {
        let i = self.inter.get(&(g, p)).copied().unwrap_or(0);
        let u = self.gt_area[&g] + self.pred_area[&p] - i;
        i as f64 / u as f64
    }
}

/// Pairs every gt and predicted instance whose IoU exceeds 0.5.
pub fn match_instances(gt: &InstanceMap, pred: &InstanceMap) -> Result<MatchResult> {
    let o = Overlaps::new(gt, pred)?;
    let mut pairs = Vec::new();
    for &(g, p) in o.inter.keys() {
        let iou = o.iou(g, p);
        if iou > 0.5 {
            pairs.push((g, p, iou));
        }
    }
    let mut used_g = BTreeMap::new();
    let mut used_p = BTreeMap::new();
    for &(g, p, _) in &pairs {
        // IoU > 0.5 implies uniqueness; a violation means the overlap table is wrong.
        assert!(used_g.insert(g, p).is_none(), "gt instance {g} matched twice");
        assert!(used_p.insert(p, g).is_none(), "pred instance {p} matched twice");
    }
    Ok(MatchResult {
        unmatched_gt: o.gt_area.keys().filter(|g| !used_g.contains_key(g)).copied().collect(),
        unmatched_pred: o.pred_area.keys().filter(|p| !used_p.contains_key(p)).copied().collect(),
        pairs,
    })
}

/// Additive PQ counts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PqStats {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou_sum: f64,
}

impl PqStats {
    pub fn from_match(m: &MatchResult) -> Self {
        Self {
            tp: m.pairs.len(),
            fp: m.unmatched_pred.len(),
            fn_: m.unmatched_gt.len(),
            iou_sum: m.pairs.iter().map(|p| p.2).sum(),
        }
    }

    pub fn add(&mut self, other: &PqStats) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.iou_sum += other.iou_sum;
    }

    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    pub fn quality(&self) -> PqValue {
        if self.is_empty() {
            return PqValue { dq: 1.0, sq: 1.0, pq: 1.0 };
        }
        let dq = self.tp as f64 / (self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64);
        let sq = if self.tp == 0 { 0.0 } else { self.iou_sum / self.tp as f64 };
        PqValue { dq, sq, pq: dq * sq }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PqValue {
    pub dq: f64,
    pub sq: f64,
    pub pq: f64,
}

pub fn pq(m: &MatchResult) -> PqValue {
    PqStats::from_match(m).quality()
}

/// Keeps only the instances of class `class`.
pub fn class_map(result: &InstanceResult, class: usize) -> InstanceMap {
    let ids = result
        .inst_map
        .ids
        .iter()
        .map(|&id| if id != 0 && result.types.get(&id) == Some(&class) { id } else { 0 })
        .collect();
    InstanceMap {
        height: result.inst_map.height,
        width: result.inst_map.width,
        ids,
    }
}

fn check_types(result: &InstanceResult, num_classes: usize) -> Result<()> {
    for id in result.inst_map.instance_ids() {
        match result.types.get(&id) {
            Some(&c) if (1..=num_classes).contains(&c) => {}
            Some(&c) => return Err(Error::Dataset(format!("instance {id} has class {c} outside 1..={num_classes}"))),
            None => return Err(Error::Dataset(format!("instance {id} has no type"))),
        }
    }
    Ok(())
}

/// Per-class PQ counts of one image, index `c - 1` for class `c`.
pub fn class_stats(gt: &InstanceResult, pred: &InstanceResult, num_classes: usize) -> Result<Vec<PqStats>> {
    check_types(gt, num_classes)?;
    check_types(pred, num_classes)?;
    (1..=num_classes)
        .map(|c| Ok(PqStats::from_match(&match_instances(&class_map(gt, c), &class_map(pred, c))?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticlassPq {
    pub mpq: f64,
    pub mdq: f64,
    pub msq: f64,
    /// Classes absent from both gt and predictions are left out.
    pub per_class: BTreeMap<usize, PqValue>,
}

/// Averages per-class quality over classes seen in gt or predictions.
pub fn multiclass_from_stats(stats: &[PqStats]) -> MulticlassPq {
    let per_class: BTreeMap<usize, PqValue> = stats
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_empty())
        .map(|(i, s)| (i + 1, s.quality()))
        .collect();
    let n = per_class.len() as f64;
    let mean = |f: fn(&PqValue) -> f64| {
        if per_class.is_empty() {
            1.0
        } else {
            per_class.values().map(f).sum::<f64>() / n
        }
    };
    MulticlassPq {
        mpq: mean(|v| v.pq),
        mdq: mean(|v| v.dq),
        msq: mean(|v| v.sq),
        per_class,
    }
}

/// Dataset-level multi-class PQ over `(gt, pred)` pairs.
pub fn multiclass_pq(pairs: &[(&InstanceResult, &InstanceResult)], num_classes: usize) -> Result<MulticlassPq> {
    let mut total = vec![PqStats::default(); num_classes];
    for (gt, pred) in pairs {
        for (t, s) in total.iter_mut().zip(class_stats(gt, pred, num_classes)?) {
            t.add(&s);
        }
    }
    Ok(multiclass_from_stats(&total))
}

/// `2|A n B| / (|A| + |B|)`; 1 when both are empty.
pub fn dice_score(gt_fg: &[bool], pred_fg: &[bool]) -> Result<f64> {
    if gt_fg.len() != pred_fg.len() {
        return Err(Error::shape("dice masks differ in size"));
    }
    let (mut inter, mut total) = (0u64, 0u64);
    for (&a, &b) in gt_fg.iter().zip(pred_fg) {
        inter += (a && b) as u64;
        total += a as u64 + b as u64;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Aggregated Jaccard index. Gt instances are visited in id order and take
/// the unused prediction of highest IoU (lowest pred id on ties); unused
/// predictions are added to the union.
pub fn aji(gt: &InstanceMap, pred: &InstanceMap) -> Result<f64> {
    let o = Overlaps::new(gt, pred)?;
    let mut by_gt: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for &(g, p) in o.inter.keys() {
        by_gt.entry(g).or_default().push(p);
    }
    let mut used = BTreeMap::new();
    let (mut inter, mut union) = (0u64, 0u64);
    for (&g, &area) in &o.gt_area {
        let mut best: Option<(u32, f64)> = None;
        for &p in by_gt.get(&g).map(Vec::as_slice).unwrap_or(&[]) {
            if used.contains_key(&p) {
                continue;
            }
            let iou = o.iou(g, p);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((p, iou));
            }
        }
        match best {
            Some((p, _)) => {
                let i = o.inter[&(g, p)];
                inter += i;
                union += area + o.pred_area[&p] - i;
                used.insert(p, g);
            }
            None => union += area,
        }
    }
    for (p, &area) in &o.pred_area {
        if !used.contains_key(p) {
            union += area;
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Dataset evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mPQ")]
    pub mpq: f64,
    #[serde(rename = "mDQ")]
    pub mdq: f64,
    #[serde(rename = "mSQ")]
    pub msq: f64,
    #[serde(rename = "bPQ")]
    pub bpq: f64,
    #[serde(rename = "DICE")]
    pub dice: f64,
    #[serde(rename = "AJI")]
    pub aji: f64,
    #[serde(rename = "per_class_PQ")]
    pub per_class_pq: BTreeMap<String, f64>,
    pub n_images: usize,
}

#[derive(Debug, Clone)]
struct ImageStats {
    binary: PqStats,
    classes: Vec<PqStats>,
    dice: f64,
    aji: f64,
}

fn image_stats(gt: &InstanceResult, pred: &InstanceResult, num_classes: usize) -> Result<ImageStats> {
    Ok(ImageStats {
        binary: PqStats::from_match(&match_instances(&gt.inst_map, &pred.inst_map)?),
        classes: class_stats(gt, pred, num_classes)?,
        dice: dice_score(&gt.inst_map.foreground(), &pred.inst_map.foreground())?,
        aji: aji(&gt.inst_map, &pred.inst_map)?,
    })
}

/// Scores every `(gt, pred)` pair, images in parallel when `exec` allows.
/// `class_names[c - 1]` labels class `c` in the per-class table.
pub fn evaluate(
    pairs: &[(&InstanceResult, &InstanceResult)],
    class_names: &[String],
    exec: Execution,
) -> Result<EvalReport> {
    let num_classes = class_names.len();
    let per_image = exec::try_map(pairs, exec, |(gt, pred)| image_stats(gt, pred, num_classes))?;
    let mut binary = PqStats::default();
    let mut classes = vec![PqStats::default(); num_classes];
    let (mut dice, mut aji_sum) = (0.0, 0.0);
    for s in &per_image {
        binary.add(&s.binary);
        for (t, c) in classes.iter_mut().zip(&s.classes) {
            t.add(c);
        }
        dice += s.dice;
        aji_sum += s.aji;
    }
    let n = per_image.len();
    let m = multiclass_from_stats(&classes);
    let mean = |v: f64| if n == 0 { 0.0 } else { v / n as f64 };
    Ok(EvalReport {
        mpq: m.mpq,
        mdq: m.mdq,
        msq: m.msq,
        bpq: binary.quality().pq,
        dice: mean(dice),
        aji: mean(aji_sum),
        per_class_pq: m
            .per_class
            .iter()
            .map(|(&c, v)| (class_names[c - 1].clone(), v.pq))
            .collect(),
        n_images: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, x0: usize, y0: usize, side: usize) -> InstanceMap {
        let mut ids = vec![0; h * w];
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                ids[y * w + x] = 1;
            }
        }
        InstanceMap::new(h, w, ids).unwrap()
    }

    #[test]
    fn shifted_square_fixtures() {
        let gt = square(20, 20, 2, 2, 10);
        let two = square(20, 20, 4, 2, 10);
        let m = match_instances(&gt, &two).unwrap();
        assert_eq!(m.pairs.len(), 1);
        let v = pq(&m);
        assert_eq!((v.dq, v.sq, v.pq), (1.0, 2.0 / 3.0, 2.0 / 3.0));
        assert_eq!(dice_score(&gt.foreground(), &two.foreground()).unwrap(), 0.8);
        assert_eq!(aji(&gt, &two).unwrap(), 2.0 / 3.0);

        let five = square(20, 20, 7, 2, 10);
        let m = match_instances(&gt, &five).unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!((m.unmatched_gt.len(), m.unmatched_pred.len()), (1, 1));
    }

    #[test]
    fn degenerate_cases() {
        let gt = square(8, 8, 1, 1, 3);
        let empty = InstanceMap::empty(8, 8);
        assert_eq!(pq(&match_instances(&gt, &empty).unwrap()).pq, 0.0);
        assert_eq!(pq(&match_instances(&empty, &empty).unwrap()).pq, 1.0);
        assert_eq!(aji(&gt, &empty).unwrap(), 0.0);
        assert_eq!(aji(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice_score(&empty.foreground(), &empty.foreground()).unwrap(), 1.0);
    }

    #[test]
    fn half_missed_classes() {
        let gt_map = InstanceMap::new(1, 4, vec![1, 1, 2, 2]).unwrap();
        let gt = InstanceResult::from_parts(gt_map.clone(), BTreeMap::from([(1, 1), (2, 2)])).unwrap();
        let pred_map = InstanceMap::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        let pred = InstanceResult::from_parts(pred_map, BTreeMap::from([(1, 1)])).unwrap();
        let m = multiclass_pq(&[(&gt, &pred)], 3).unwrap();
        assert_eq!(m.mpq, 0.5);
        assert_eq!(m.per_class.len(), 2);
    }
}
