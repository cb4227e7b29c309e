//! Marker-controlled watershed over HV gradients, per-instance typing and
//! result serialization.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::path::Path;

use candle_core::{DType, Tensor};
use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::decoder::Prediction;
use crate::error::{Error, Result};
use crate::losses::{derivative_kernel, TargetMaps};
use crate::types::InstanceMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub tau_np: f64,
    pub tau_marker: f64,
    /// Markers with fewer pixels are discarded.
    pub min_size: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            tau_np: 0.5,
            tau_marker: 0.4,
            min_size: 10,
        }
    }
}

impl PostprocessConfig {
    pub fn toy() -> Self {
        Self {
            min_size: 3,
            ..Self::default()
        }
    }
}

/// Dense per-image model outputs, channel-major and row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMaps {
    pub height: usize,
    pub width: usize,
    /// `[2, h, w]` background / nucleus probabilities.
    pub np: Vec<f64>,
    /// `[2, h, w]` horizontal / vertical maps.
    pub hv: Vec<f64>,
    /// `[C+1, h, w]`, channel 0 is background.
    pub nc: Vec<f64>,
    pub nc_channels: usize,
}

impl PredictionMaps {
    pub fn new(height: usize, width: usize, np: Vec<f64>, hv: Vec<f64>, nc: Vec<f64>) -> Result<Self> {
        let hw = height * width;
        if hw == 0 || np.len() != 2 * hw || hv.len() != 2 * hw || nc.len() % hw != 0 || nc.len() < 2 * hw {
            return Err(Error::shape(format!(
                "prediction maps for {height}x{width}: np {}, hv {}, nc {}",
                np.len(),
                hv.len(),
                nc.len()
            )));
        }
        Ok(Self {
            height,
            width,
            nc_channels: nc.len() / hw,
            np,
            hv,
            nc,
        })
    }

    /// Splits a batched model output into per-image maps.
    pub fn from_prediction(pred: &Prediction) -> Result<Vec<Self>> {
        let np = pred.np_probs()?;
        let nc = pred.nc_probs()?;
        let (b, _, h, w) = np.dims4()?;
        let read = |t: &Tensor, i: usize| -> Result<Vec<f64>> {
            Ok(t.get(i)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
        };
        (0..b)
            .map(|i| Self::new(h, w, read(&np, i)?, read(&pred.hv, i)?, read(&nc, i)?))
            .collect()
    }

    /// The maps a perfect model would emit for these targets.
    pub fn ideal(target: &TargetMaps, num_cell_classes: usize) -> Result<Self> {
        let hw = target.height * target.width;
        let k = num_cell_classes + 1;
        let mut np = vec![0.0; 2 * hw];
        let mut nc = vec![0.0; k * hw];
        for p in 0..hw {
            np[target.np[p] as usize * hw + p] = 1.0;
            let c = target.nc[p] as usize;
            if c >= k {
                return Err(Error::Dataset(format!("class id {c} exceeds {num_cell_classes} classes")));
            }
            nc[c * hw + p] = 1.0;
        }
        Self::new(target.height, target.width, np, target.hv.clone(), nc)
    }

    pub fn foreground_prob(&self) -> &[f64] {
        &self.np[self.height * self.width..]
    }

    pub fn nc_plane(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.nc[c * hw..(c + 1) * hw]
    }
}

/// Segmented instances with their types and `(x, y)` centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceResult {
    pub inst_map: InstanceMap,
    pub types: BTreeMap<u32, usize>,
    pub centroids: BTreeMap<u32, (f64, f64)>,
}

impl InstanceResult {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            inst_map: InstanceMap::empty(height, width),
            types: BTreeMap::new(),
            centroids: BTreeMap::new(),
        }
    }

    /// Builds a result from a map and types, computing centroids.
    pub fn from_parts(inst_map: InstanceMap, types: BTreeMap<u32, usize>) -> Result<Self> {
        let centroids = centroids(&inst_map);
        for id in centroids.keys() {
            if !types.contains_key(id) {
                return Err(Error::Integrity {
                    sample: String::new(),
                    message: format!("instance {id} has no type"),
                });
            }
        }
        if let Some(id) = types.keys().find(|id| !centroids.contains_key(id)) {
            return Err(Error::Integrity {
                sample: String::new(),
                message: format!("type given for absent instance {id}"),
            });
        }
        Ok(Self {
            inst_map,
            types,
            centroids,
        })
    }

    /// Writes `{stem}.png` (16-bit ids) and `{stem}.json` (types, centroids).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_label_png(&dir.join(format!("{stem}.png")), &self.inst_map)?;
        let sidecar = Sidecar {
            types: self.types.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            centroids: self.centroids.iter().map(|(k, &(x, y))| (k.to_string(), [x, y])).collect(),
        };
        let path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&sidecar)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let inst_map = read_label_png(&dir.join(format!("{stem}.png")))?;
        let sidecar = read_sidecar(&dir.join(format!("{stem}.json")))?;
        let types = sidecar_types(&sidecar, stem)?;
        Self::from_parts(inst_map, types).map_err(|e| match e {
            Error::Integrity { message, .. } => Error::Integrity {
                sample: stem.to_string(),
                message,
            },
            other => other,
        })
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Sidecar {
    pub types: BTreeMap<String, usize>,
    #[serde(default)]
    pub centroids: BTreeMap<String, [f64; 2]>,
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn sidecar_types(sidecar: &Sidecar, sample: &str) -> Result<BTreeMap<u32, usize>> {
    sidecar
        .types
        .iter()
        .map(|(k, &v)| {
            k.parse::<u32>().map(|id| (id, v)).map_err(|_| Error::Integrity {
                sample: sample.to_string(),
                message: format!("bad instance id {k:?} in types"),
            })
        })
        .collect()
}

pub fn write_label_png(path: &Path, map: &InstanceMap) -> Result<()> {
    let mut data = Vec::with_capacity(map.ids.len());
    for &id in &map.ids {
        data.push(u16::try_from(id).map_err(|_| Error::Image {
            path: path.to_path_buf(),
            message: format!("instance id {id} does not fit in 16 bits"),
        })?);
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(map.width as u32, map.height as u32, data).expect("buffer matches map size");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn read_label_png(path: &Path) -> Result<InstanceMap> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let luma = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        other => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                message: format!("expected a 16-bit gray label map, found {:?}", other.color()),
            })
        }
    };
    let (w, h) = luma.dimensions();
    InstanceMap::new(h as usize, w as usize, luma.into_raw().into_iter().map(u32::from).collect())
}

/// Centroid `(x, y)` of every instance.
pub fn centroids(map: &InstanceMap) -> BTreeMap<u32, (f64, f64)> {
    let mut acc: BTreeMap<u32, (f64, f64, f64)> = BTreeMap::new();
    for (i, &id) in map.ids.iter().enumerate() {
        if id != 0 {
            let e = acc.entry(id).or_default();
            e.0 += (i % map.width) as f64;
            e.1 += (i / map.width) as f64;
            e.2 += 1.0;
        }
    }
    acc.into_iter().map(|(id, (x, y, n))| (id, (x / n, y / n))).collect()
}

/// 4-connected components of `mask`, labeled 1.. in raster order of their first pixel.
pub fn connected_components(mask: &[bool], height: usize, width: usize) -> (Vec<u32>, u32) {
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            for q in neighbors4(p, height, width) {
                if mask[q] && labels[q] == 0 {
                    labels[q] = next;
                    stack.push(q);
                }
            }
        }
    }
    (labels, next)
}

fn neighbors4(p: usize, height: usize, width: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (p / width, p % width);
    let up = (y > 0).then(|| p - width);
    let down = (y + 1 < height).then(|| p + width);
    let left = (x > 0).then(|| p - 1);
    let right = (x + 1 < width).then(|| p + 1);
    [up, left, right, down].into_iter().flatten()
}

/// Correlates `plane` with a 5x5 kernel over an edge-replicated border.
fn correlate5(plane: &[f64], height: usize, width: usize, k: &[[f64; 5]; 5]) -> Vec<f64> {
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (r, row) in k.iter().enumerate() {
                let yy = (y as isize + r as isize - 2).clamp(0, height as isize - 1) as usize;
                for (c, &kv) in row.iter().enumerate() {
                    if kv != 0.0 {
                        let xx = (x as isize + c as isize - 2).clamp(0, width as isize - 1) as usize;
                        acc += kv * plane[yy * width + xx];
                    }
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

fn min_max_normalize(v: &mut [f64]) {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let span = hi - lo;
    for x in v.iter_mut() {
        *x = if span > 0.0 { (*x - lo) / span } else { 0.0 };
    }
}

/// Marker energy, high inside nuclei and low on their boundaries.
///
/// `dh/dx` and `dv/dy` are min-max normalized over the image to `n_h, n_v`;
/// the energy is `1 - max(1 - n_h, 1 - n_v)`, zeroed outside `foreground`.
/// HV maps ramp from -1 to 1 across a nucleus, so the signed derivative is
/// largest in the interior and most negative where two instances (or an
/// instance and the background) meet.
pub fn energy_map(maps: &PredictionMaps, foreground: &[bool]) -> Vec<f64> {
    let (h, w) = (maps.height, maps.width);
    let hw = h * w;
    let kx = derivative_kernel();
    let mut ky = [[0.0; 5]; 5];
    for r in 0..5 {
        for c in 0..5 {
            ky[r][c] = kx[c][r];
        }
    }
    let mut gh = correlate5(&maps.hv[..hw], h, w, &kx);
    let mut gv = correlate5(&maps.hv[hw..], h, w, &ky);
    min_max_normalize(&mut gh);
    min_max_normalize(&mut gv);
    (0..hw)
        .map(|p| if foreground[p] { 1.0 - (1.0 - gh[p]).max(1.0 - gv[p]) } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct FloodItem {
    /// Lower floods first.
    elevation: f64,
    pixel: usize,
}

impl Eq for FloodItem {}

impl Ord for FloodItem {
    // reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .elevation
            .total_cmp(&self.elevation)
            .then_with(|| other.pixel.cmp(&self.pixel))
    }
}

impl PartialOrd for FloodItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Priority-flood watershed of `elevation` from labeled `markers`, confined
/// to `mask`. Ties are broken by pixel index; unreached pixels stay 0.
pub fn watershed(elevation: &[f64], markers: &[u32], mask: &[bool], height: usize, width: usize) -> Vec<u32> {
    let mut labels = markers.to_vec();
    let mut heap = BinaryHeap::new();
    for (p, &m) in markers.iter().enumerate() {
        if m != 0 {
            heap.push(FloodItem {
                elevation: elevation[p],
                pixel: p,
            });
        }
    }
    while let Some(FloodItem { pixel, .. }) = heap.pop() {
        let label = labels[pixel];
        for q in neighbors4(pixel, height, width) {
            if mask[q] && labels[q] == 0 {
                labels[q] = label;
                heap.push(FloodItem {
                    elevation: elevation[q],
                    pixel: q,
                });
            }
        }
    }
    labels
}

/// HoVer-style instance extraction; ids in the result are consecutive.
pub fn instances_from_maps(maps: &PredictionMaps, cfg: &PostprocessConfig) -> InstanceMap {
    let (h, w) = (maps.height, maps.width);
    let fg: Vec<bool> = maps.foreground_prob().iter().map(|&p| p > cfg.tau_np).collect();
    if !fg.iter().any(|&f| f) {
        return InstanceMap::empty(h, w);
    }
    let energy = energy_map(maps, &fg);
    let seeds: Vec<bool> = (0..h * w).map(|p| fg[p] && energy[p] > cfg.tau_marker).collect();
    let (mut markers, n) = connected_components(&seeds, h, w);
    let mut sizes = vec![0usize; n as usize + 1];
    for &m in &markers {
        sizes[m as usize] += 1;
    }
    for m in markers.iter_mut() {
        if *m != 0 && sizes[*m as usize] < cfg.min_size {
            *m = 0;
        }
    }
    let elevation: Vec<f64> = energy.iter().map(|e| -e).collect();
    let labels = watershed(&elevation, &markers, &fg, h, w);
    InstanceMap::new(h, w, labels).expect("shape preserved").relabel_consecutive().0
}

/// Argmax of the summed class probabilities inside each instance, excluding
/// background; ties go to the lowest class id.
pub fn assign_types(inst_map: &InstanceMap, maps: &PredictionMaps) -> Result<BTreeMap<u32, usize>> {
    if (inst_map.height, inst_map.width) != (maps.height, maps.width) {
        return Err(Error::shape("instance map and class maps differ in size"));
    }
    let classes = maps.nc_channels - 1;
    let mut sums: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (p, &id) in inst_map.ids.iter().enumerate() {
        if id == 0 {
            continue;
        }
        let acc = sums.entry(id).or_insert_with(|| vec![0.0; classes]);
        for (c, a) in acc.iter_mut().enumerate() {
            *a += maps.nc_plane(c + 1)[p];
        }
    }
    Ok(sums
        .into_iter()
        .map(|(id, acc)| {
            let mut best = 0;
            for c in 1..classes {
                if acc[c] > acc[best] {
                    best = c;
                }
            }
            (id, best + 1)
        })
        .collect())
}

/// Full postprocessing of one image.
pub fn postprocess(maps: &PredictionMaps, cfg: &PostprocessConfig) -> Result<InstanceResult> {
    let inst_map = instances_from_maps(maps, cfg);
    let types = assign_types(&inst_map, maps)?;
    InstanceResult::from_parts(inst_map, types)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk_map(h: usize, w: usize, disks: &[(f64, f64, f64)]) -> InstanceMap {
        let mut ids = vec![0u32; h * w];
        for (i, &(cx, cy, r)) in disks.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    if dx * dx + dy * dy <= r * r && ids[y * w + x] == 0 {
                        ids[y * w + x] = i as u32 + 1;
                    }
                }
            }
        }
        InstanceMap::new(h, w, ids).unwrap()
    }

    fn ideal(map: &InstanceMap) -> PredictionMaps {
        let types = map.instance_ids().into_iter().map(|id| (id, 1)).collect();
        PredictionMaps::ideal(&TargetMaps::new(map, &types, 0).unwrap(), 2).unwrap()
    }

    #[test]
    fn background_only() {
        let empty = InstanceMap::empty(16, 16);
        let out = instances_from_maps(&ideal(&empty), &PostprocessConfig::toy());
        assert_eq!(out.max_id(), 0);
    }

    #[test]
    fn two_disjoint_disks() {
        let gt = disk_map(32, 32, &[(8.0, 8.0, 5.0), (22.0, 20.0, 6.0)]);
        let out = instances_from_maps(&ideal(&gt), &PostprocessConfig::toy());
        assert_eq!(out, gt);
    }

    #[test]
    fn two_touching_disks() {
        let gt = disk_map(32, 40, &[(13.0, 16.0, 7.0), (26.0, 16.0, 7.0)]);
        let out = instances_from_maps(&ideal(&gt), &PostprocessConfig::toy());
        assert_eq!(out.max_id(), 2);
        let agree = gt.ids.iter().zip(&out.ids).filter(|(a, b)| a == b).count();
        assert!(agree as f64 / gt.ids.len() as f64 >= 0.95);
    }

    #[test]
    fn type_assignment() {
        let map = InstanceMap::new(1, 5, vec![1, 1, 1, 1, 1]).unwrap();
        // classes 1..=5; 3 pixels favor class 2, 2 favor class 5.
        let mut nc = vec![0.0; 6 * 5];
        for p in 0..5 {
            let c = if p < 3 { 2 } else { 5 };
            nc[c * 5 + p] = 1.0;
        }
        let maps = PredictionMaps::new(1, 5, vec![0., 0., 0., 0., 0., 1., 1., 1., 1., 1.], vec![0.0; 10], nc).unwrap();
        assert_eq!(assign_types(&map, &maps).unwrap()[&1], 2);
        let uniform = PredictionMaps::new(1, 5, maps.np.clone(), vec![0.0; 10], vec![1.0 / 6.0; 30]).unwrap();
        assert_eq!(assign_types(&map, &uniform).unwrap()[&1], 1);
    }

    #[test]
    fn label_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = disk_map(12, 9, &[(3.0, 3.0, 2.0), (6.0, 8.0, 2.5)]);
        let types = BTreeMap::from([(1, 2), (2, 1)]);
        let res = InstanceResult::from_parts(map, types).unwrap();
        res.save(dir.path(), "a").unwrap();
        assert_eq!(InstanceResult::load(dir.path(), "a").unwrap(), res);
    }

    #[test]
    fn missing_type_is_integrity_error() {
        let map = InstanceMap::new(1, 3, vec![1, 0, 2]).unwrap();
        let err = InstanceResult::from_parts(map, BTreeMap::from([(1, 1)])).unwrap_err();
        assert!(err.to_string().contains('2'));
    }
}
