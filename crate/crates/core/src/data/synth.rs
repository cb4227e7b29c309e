//! Synthetic nuclei scenes with exact ground truth.
//!
//! Each image holds 4 to 12 non-overlapping ellipses (at least one background
//! pixel between any two) on a textured background. A nucleus' class sets its
//! chroma; the tissue class is derived from the most frequent nucleus class.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_rgb_png, DatasetManifest, LabeledSample, Magnification, SampleEntry};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::postprocess::InstanceResult;
use crate::types::{Image, InstanceMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub num_tissue_classes: usize,
    pub num_patients: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn toy(count: usize, seed: u64) -> Self {
        Self {
            count,
            image_size: 64,
            num_classes: 3,
            num_tissue_classes: 2,
            num_patients: 10,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 48 {
            return Err(Error::config("synthetic images must be at least 48 px"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("synthetic data needs at least 2 cell classes"));
        }
        if self.num_tissue_classes == 0 || self.num_patients == 0 {
            return Err(Error::config("need at least one tissue class and one patient"));
        }
        Ok(())
    }
}

const MIN_NUCLEI: usize = 4;
const MAX_NUCLEI: usize = 12;
const PLACEMENT_TRIES: usize = 400;

/// Class `c` chroma; classes beyond the table rotate hue.
fn class_color(c: usize) -> [f64; 3] {
    const TABLE: [[f64; 3]; 5] = [
        [0.32, 0.12, 0.46],
        [0.58, 0.16, 0.22],
        [0.14, 0.34, 0.52],
        [0.44, 0.36, 0.10],
        [0.12, 0.42, 0.24],
    ];
    let base = TABLE[(c - 1) % TABLE.len()];
    let turn = ((c - 1) / TABLE.len()) % 3;
    [base[turn % 3], base[(turn + 1) % 3], base[(turn + 2) % 3]]
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }
}

/// One scene; `warning` is set when fewer nuclei fit than were drawn.
pub struct Scene {
    pub sample: LabeledSample,
    pub warning: Option<String>,
}

pub fn tissue_from_types(types: &BTreeMap<u32, usize>, num_classes: usize, num_tissue: usize) -> usize {
    let mut counts = vec![0usize; num_classes + 1];
    for &c in types.values() {
        counts[c] += 1;
    }
    let mut dominant = 1;
    for c in 2..=num_classes {
        if counts[c] > counts[dominant] {
            dominant = c;
        }
    }
    (dominant - 1).min(num_tissue - 1)
}

/// Renders scene `index` of a dataset; deterministic in `(cfg.seed, index)`.
pub fn generate_scene(cfg: &SynthConfig, index: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let n = cfg.image_size;
    let patient = index % cfg.num_patients;
    let wanted = rng.random_range(MIN_NUCLEI..=MAX_NUCLEI);
    let scale = n as f64 / 64.0;

    let mut ids = vec![0u32; n * n];
    // Pixels a new nucleus may not touch: existing nuclei dilated by one pixel.
    let mut blocked = vec![false; n * n];
    let mut types = BTreeMap::new();
    let mut shapes = Vec::new();
    let mut tries = 0;
    while shapes.len() < wanted && tries < PLACEMENT_TRIES {
        tries += 1;
        let a = rng.random_range(3.5..7.0) * scale;
        let b = rng.random_range(2.6..=a.max(2.7 * scale)).min(a);
        let e = Ellipse {
            cx: rng.random_range(a..n as f64 - a),
            cy: rng.random_range(a..n as f64 - a),
            a,
            b,
            theta: rng.random_range(0.0..PI),
        };
        let (x0, x1) = ((e.cx - a).floor().max(0.0) as usize, ((e.cx + a).ceil() as usize).min(n - 1));
        let (y0, y1) = ((e.cy - a).floor().max(0.0) as usize, ((e.cy + a).ceil() as usize).min(n - 1));
        let mut pixels = Vec::new();
        let mut clash = false;
        for y in y0..=y1 {
            for x in x0..=x1 {
                if e.contains(x as f64, y as f64) {
                    if blocked[y * n + x] {
                        clash = true;
                    }
                    pixels.push(y * n + x);
                }
            }
        }
        if clash || pixels.len() < 12 {
            continue;
        }
        let id = shapes.len() as u32 + 1;
        for &p in &pixels {
            ids[p] = id;
            let (y, x) = ((p / n) as isize, (p % n) as isize);
            for (dy, dx) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)] {
                let (yy, xx) = (y + dy, x + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < n && (xx as usize) < n {
                    blocked[yy as usize * n + xx as usize] = true;
                }
            }
        }
        types.insert(id, rng.random_range(1..=cfg.num_classes));
        shapes.push(e);
    }
    let warning = (shapes.len() < wanted).then(|| {
        format!(
            "scene {index}: placed {} of {wanted} nuclei after {PLACEMENT_TRIES} tries",
            shapes.len()
        )
    });

    // Background: pinkish stroma with low-frequency texture.
    let stain: [f64; 3] = {
        let mut prng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA5A5 ^ patient as u64);
        [prng.random_range(-0.04..0.04), prng.random_range(-0.04..0.04), prng.random_range(-0.04..0.04)]
    };
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.05..0.25),
                rng.random_range(0.05..0.25),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.02..0.05),
            )
        })
        .collect();
    let noise = Normal::new(0.0, 0.03).expect("valid sigma");
    let mut data = vec![0f32; 3 * n * n];
    let bg = [0.90, 0.72, 0.82];
    for y in 0..n {
        for x in 0..n {
            let p = y * n + x;
            let tex: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 / scale + fy * y as f64 / scale + ph).sin())
                .sum();
            let id = ids[p];
            let color = if id == 0 {
                [bg[0] + tex, bg[1] + tex, bg[2] + tex]
            } else {
                let c = class_color(types[&id]);
                let t = 0.6 * tex;
                [c[0] + t, c[1] + t, c[2] + t]
            };
            for ch in 0..3 {
                let v = color[ch] + stain[ch] + noise.sample(&mut rng);
                data[ch * n * n + p] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    let tissue = tissue_from_types(&types, cfg.num_classes, cfg.num_tissue_classes);
    Scene {
        sample: LabeledSample {
            name: format!("synth_{index:05}"),
            image: Image::new(3, n, n, data).expect("buffer sized for the image"),
            inst_map: InstanceMap::new(n, n, ids).expect("buffer sized for the map"),
            types,
            tissue,
            patient_id: format!("patient_{patient:02}"),
        },
        warning,
    }
}

pub fn class_names(num_classes: usize) -> Vec<String> {
    (1..=num_classes).map(|c| format!("class_{c}")).collect()
}

pub fn tissue_names(num_tissue: usize) -> Vec<String> {
    (0..num_tissue).map(|t| format!("tissue_{t}")).collect()
}

/// Scenes held in memory, no files.
pub fn generate_in_memory(cfg: &SynthConfig, exec: Execution) -> Result<(Vec<LabeledSample>, Vec<String>)> {
    cfg.validate()?;
    let scenes = exec::map_range(cfg.count, exec, |i| generate_scene(cfg, i));
    let warnings = scenes.iter().filter_map(|s| s.warning.clone()).collect();
    Ok((scenes.into_iter().map(|s| s.sample).collect(), warnings))
}

/// Writes `images/`, `labels/` and `manifest.json` under `dir`.
pub fn generate_synthetic(dir: &Path, cfg: &SynthConfig, exec: Execution) -> Result<DatasetManifest> {
    cfg.validate()?;
    for sub in ["images", "labels"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let written = exec::try_map(&(0..cfg.count).collect::<Vec<_>>(), exec, |&i| -> Result<(SampleEntry, Option<String>)> {
        let scene = generate_scene(cfg, i);
        let s = &scene.sample;
        let image_path = format!("images/{}.png", s.name);
        let label_path = format!("labels/{}.png", s.name);
        write_rgb_png(&dir.join(&image_path), &s.image)?;
        let result = InstanceResult::from_parts(s.inst_map.clone(), s.types.clone())?;
        result.save(&dir.join("labels"), &s.name)?;
        Ok((
            SampleEntry {
                image_path,
                label_path,
                tissue_class: s.tissue,
                patient_id: s.patient_id.clone(),
            },
            scene.warning,
        ))
    })?;
    let mut manifest = DatasetManifest {
        samples: Vec::with_capacity(written.len()),
        class_names: class_names(cfg.num_classes),
        tissue_names: tissue_names(cfg.num_tissue_classes),
        magnification: Magnification::X20,
        warnings: Vec::new(),
        root: dir.to_path_buf(),
    };
    for (entry, warning) in written {
        manifest.samples.push(entry);
        manifest.warnings.extend(warning);
    }
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}
