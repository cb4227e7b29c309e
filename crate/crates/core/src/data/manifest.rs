use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::{read_label_png, read_sidecar, sidecar_types, InstanceResult};
use crate::types::{Image, InstanceMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Magnification {
    #[serde(rename = "20x")]
    X20,
    #[serde(rename = "40x")]
    X40,
}

/// Paths are relative to the manifest's directory. The label sidecar is the
/// label path with a `.json` extension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub image_path: String,
    pub label_path: String,
    pub tissue_class: usize,
    pub patient_id: String,
}

impl SampleEntry {
    /// File stem of the image, used as the sample name.
    pub fn name(&self) -> String {
        Path::new(&self.image_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image_path.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub samples: Vec<SampleEntry>,
    /// Cell class `c` is named `class_names[c - 1]`.
    pub class_names: Vec<String>,
    pub tissue_names: Vec<String>,
    pub magnification: Magnification,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::Dataset("manifest lists no cell classes".into()));
        }
        for s in &self.samples {
            if s.patient_id.is_empty() {
                return Err(Error::Dataset(format!("sample {} has no patient id", s.image_path)));
            }
            if s.tissue_class >= self.tissue_names.len().max(1) {
                return Err(Error::Dataset(format!(
                    "sample {} has tissue class {} of {}",
                    s.image_path,
                    s.tissue_class,
                    self.tissue_names.len()
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// A manifest over a subset of the samples, sharing root and class names.
    pub fn subset(&self, samples: Vec<SampleEntry>) -> Self {
        Self {
            samples,
            warnings: Vec::new(),
            ..self.clone()
        }
    }

    pub fn patients(&self) -> BTreeSet<String> {
        self.samples.iter().map(|s| s.patient_id.clone()).collect()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

/// A decoded sample with validated labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub name: String,
    pub image: Image,
    pub inst_map: InstanceMap,
    pub types: BTreeMap<u32, usize>,
    pub tissue: usize,
    pub patient_id: String,
}

impl LabeledSample {
    pub fn ground_truth(&self) -> Result<InstanceResult> {
        InstanceResult::from_parts(self.inst_map.clone(), self.types.clone())
    }
}

pub fn read_rgb_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f32 / 255.0;
        }
    }
    Image::new(3, h, w, data)
}

pub fn write_rgb_png(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {}", img.channels)));
    }
    let hw = img.height * img.width;
    let mut raw = Vec::with_capacity(3 * hw);
    for i in 0..hw {
        for c in 0..3 {
            raw.push((img.data[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, raw).expect("buffer matches image size");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads and cross-checks one sample: every id in the map has a type in
/// `1..=C` and every typed id occurs in the map.
pub fn load_sample(manifest: &DatasetManifest, entry: &SampleEntry) -> Result<LabeledSample> {
    let name = entry.name();
    let integrity = |message: String| Error::Integrity {
        sample: name.clone(),
        message,
    };
    let image = read_rgb_png(&manifest.resolve(&entry.image_path))?;
    let label_path = manifest.resolve(&entry.label_path);
    let inst_map = read_label_png(&label_path)?;
    let sidecar = read_sidecar(&label_path.with_extension("json"))?;
    let types = sidecar_types(&sidecar, &name)?;
    if (image.height, image.width) != (inst_map.height, inst_map.width) {
        return Err(integrity(format!(
            "image is {}x{} but labels are {}x{}",
            image.height, image.width, inst_map.height, inst_map.width
        )));
    }
    let present = inst_map.instance_ids();
    if let Some(id) = present.iter().find(|id| !types.contains_key(id)) {
        return Err(integrity(format!("instance {id} is in the label map but has no type")));
    }
    if let Some(id) = types.keys().find(|id| present.binary_search(id).is_err()) {
        return Err(integrity(format!("instance {id} has a type but is absent from the label map")));
    }
    if let Some((id, c)) = types.iter().find(|(_, &c)| c == 0 || c > manifest.num_classes()) {
        return Err(integrity(format!(
            "instance {id} has class {c}, outside 1..={}",
            manifest.num_classes()
        )));
    }
    Ok(LabeledSample {
        name,
        image,
        inst_map,
        types,
        tissue: entry.tissue_class,
        patient_id: entry.patient_id.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    /// Fraction of patients held out for test.
    pub test: f64,
    /// Fraction of the remaining patients used for validation.
    pub val: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { test: 0.2, val: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

/// Patient ids of each split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientSplit {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

/// Shuffles patients with `seed` and cuts them test-first, then validation
/// out of the rest. Each split gets at least one patient.
pub fn assign_patients(patients: &BTreeSet<String>, ratios: SplitRatios, seed: u64) -> Result<PatientSplit> {
    let mut order: Vec<String> = patients.iter().cloned().collect();
    let n = order.len();
    if n < 3 {
        return Err(Error::Dataset(format!("need at least 3 patients to split, found {n}")));
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64 * ratios.test).round() as usize).clamp(1, n - 2);
    let n_val = (((n - n_test) as f64 * ratios.val).round() as usize).clamp(1, n - n_test - 1);
    Ok(PatientSplit {
        test: order[..n_test].iter().cloned().collect(),
        val: order[n_test..n_test + n_val].iter().cloned().collect(),
        train: order[n_test + n_val..].iter().cloned().collect(),
    })
}

pub fn split_by_patient(manifest: &DatasetManifest, ratios: SplitRatios, seed: u64) -> Result<Split> {
    let p = assign_patients(&manifest.patients(), ratios, seed)?;
    let pick = |set: &BTreeSet<String>| -> DatasetManifest {
        manifest.subset(manifest.samples.iter().filter(|s| set.contains(&s.patient_id)).cloned().collect())
    };
    Ok(Split {
        train: pick(&p.train),
        val: pick(&p.val),
        test: pick(&p.test),
    })
}

/// The same patient split applied to samples already in memory.
pub fn split_samples(
    samples: Vec<LabeledSample>,
    ratios: SplitRatios,
    seed: u64,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>, Vec<LabeledSample>)> {
    let patients = samples.iter().map(|s| s.patient_id.clone()).collect();
    let p = assign_patients(&patients, ratios, seed)?;
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for s in samples {
        if p.test.contains(&s.patient_id) {
            test.push(s);
        } else if p.val.contains(&s.patient_id) {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(patients: usize, per: usize) -> DatasetManifest {
        let samples = (0..patients * per)
            .map(|i| SampleEntry {
                image_path: format!("images/{i:04}.png"),
                label_path: format!("labels/{i:04}.png"),
                tissue_class: 0,
                patient_id: format!("p{:02}", i % patients),
            })
            .collect();
        DatasetManifest {
            samples,
            class_names: vec!["a".into()],
            tissue_names: vec!["t".into()],
            magnification: Magnification::X20,
            warnings: vec![],
            root: PathBuf::new(),
        }
    }

    #[test]
    fn ten_patients_split_six_two_two() {
        let m = manifest(10, 3);
        let s = split_by_patient(&m, SplitRatios::default(), 7).unwrap();
        assert_eq!(
            (s.train.patients().len(), s.val.patients().len(), s.test.patients().len()),
            (6, 2, 2)
        );
        assert!(s.train.patients().is_disjoint(&s.test.patients()));
        assert!(s.val.patients().is_disjoint(&s.test.patients()));
        assert!(s.train.patients().is_disjoint(&s.val.patients()));
        assert_eq!(s.train.samples.len() + s.val.samples.len() + s.test.samples.len(), 30);
        assert_eq!(split_by_patient(&m, SplitRatios::default(), 7).unwrap(), s);
    }

    #[test]
    fn too_few_patients() {
        assert!(split_by_patient(&manifest(2, 5), SplitRatios::default(), 0).is_err());
    }
}
