use std::collections::BTreeMap;

use candle_core::{DType, Device};
use cellvta::checkpoint;
use cellvta::data::synth::class_names;
use cellvta::data::{generate_in_memory, generate_synthetic, load_sample, split_by_patient, DatasetManifest, SplitRatios, SynthConfig};
use cellvta::exec::Execution;
use cellvta::harness::{evaluate_samples, ideal_results, infer_maps, load_predictions, overlay, MagnificationMode};
use cellvta::model::{CellVta, ModelConfig};
use cellvta::postprocess::{write_label_png, InstanceResult, PostprocessConfig};
use cellvta::types::{Image, InstanceMap};
use cellvta::Error;

#[test]
fn synthetic_dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::toy(12, 4);
    let manifest = generate_synthetic(dir.path(), &cfg, Execution::Parallel).unwrap();
    assert_eq!(manifest.samples.len(), 12);
    let loaded = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(loaded.samples, manifest.samples);
    let (memory, _) = generate_in_memory(&cfg, Execution::Sequential).unwrap();
    for (entry, expected) in loaded.samples.iter().zip(&memory) {
        let s = load_sample(&loaded, entry).unwrap();
        assert_eq!(s.inst_map, expected.inst_map);
        assert_eq!(s.types, expected.types);
        // 8-bit PNG quantization
        let err = s.image.data.iter().zip(&expected.image.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err <= 0.5 / 255.0 + 1e-6, "{err}");
    }
}

#[test]
fn synthesis_is_deterministic_and_mode_independent() {
    let cfg = SynthConfig::toy(16, 9);
    let (a, wa) = generate_in_memory(&cfg, Execution::Sequential).unwrap();
    let (b, wb) = generate_in_memory(&cfg, Execution::Parallel).unwrap();
    assert_eq!(a, b);
    assert_eq!(wa, wb);
    let (c, _) = generate_in_memory(&SynthConfig { seed: 10, ..cfg }, Execution::Parallel).unwrap();
    assert_ne!(a, c);

    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    generate_synthetic(d1.path(), &cfg, Execution::Parallel).unwrap();
    generate_synthetic(d2.path(), &cfg, Execution::Sequential).unwrap();
    for name in ["manifest.json", "images/synth_00003.png", "labels/synth_00003.png", "labels/synth_00003.json"] {
        let x = std::fs::read(d1.path().join(name)).unwrap();
        let y = std::fs::read(d2.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn toy_corpus_has_200_images_and_patient_disjoint_splits() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(dir.path(), &SynthConfig::toy(200, 0), Execution::Parallel).unwrap();
    assert_eq!(m.samples.len(), 200);
    let split = split_by_patient(&m, SplitRatios::default(), 0).unwrap();
    let (tr, va, te) = (split.train.patients(), split.val.patients(), split.test.patients());
    assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
    assert_eq!(split.train.samples.len() + split.val.samples.len() + split.test.samples.len(), 200);
    assert!(!va.is_empty() && !te.is_empty());
}

#[test]
fn corrupted_labels_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(dir.path(), &SynthConfig::toy(2, 1), Execution::Sequential).unwrap();
    let entry = &m.samples[0];
    let label = m.resolve(&entry.label_path);
    let original = load_sample(&m, entry).unwrap();

    // an instance in the map without a type
    let mut ids = original.inst_map.ids.clone();
    ids[0] = 999;
    write_label_png(&label, &InstanceMap::new(64, 64, ids).unwrap()).unwrap();
    match load_sample(&m, entry) {
        Err(Error::Integrity { sample, message }) => {
            assert_eq!(sample, entry.name());
            assert!(message.contains("999"), "{message}");
        }
        other => panic!("expected an integrity error, got {other:?}"),
    }

    // a typed instance missing from the map
    let mut ids = original.inst_map.ids.clone();
    for v in ids.iter_mut().filter(|v| **v == 1) {
        *v = 0;
    }
    write_label_png(&label, &InstanceMap::new(64, 64, ids).unwrap()).unwrap();
    assert!(matches!(load_sample(&m, entry), Err(Error::Integrity { .. })));
}

#[test]
fn ideal_bypass_recovers_every_instance() {
    let (samples, _) = generate_in_memory(&SynthConfig::toy(20, 3), Execution::Parallel).unwrap();
    let preds = ideal_results(&samples, 3, &PostprocessConfig::toy(), Execution::Parallel).unwrap();
    for (s, p) in samples.iter().zip(&preds) {
        assert_eq!(s.inst_map.instance_ids().len(), p.inst_map.instance_ids().len(), "{}", s.name);
    }
}

#[test]
fn evaluation_contract() {
    let (samples, _) = generate_in_memory(&SynthConfig::toy(6, 2), Execution::Parallel).unwrap();
    let names = class_names(3);
    let perfect: Vec<InstanceResult> = samples.iter().map(|s| s.ground_truth().unwrap()).collect();
    let r = evaluate_samples(&samples, &perfect, &names, Execution::Parallel).unwrap();
    assert_eq!((r.mpq, r.bpq, r.dice, r.aji, r.n_images), (1.0, 1.0, 1.0, 1.0, 6));

    let empty: Vec<InstanceResult> = samples.iter().map(|_| InstanceResult::empty(64, 64)).collect();
    let r = evaluate_samples(&samples, &empty, &names, Execution::Sequential).unwrap();
    assert_eq!((r.mpq, r.bpq, r.dice, r.aji), (0.0, 0.0, 0.0, 0.0));

    let json = serde_json::to_value(&r).unwrap();
    for key in ["mPQ", "mDQ", "mSQ", "bPQ", "DICE", "AJI", "per_class_PQ", "n_images"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn prediction_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (samples, _) = generate_in_memory(&SynthConfig::toy(4, 5), Execution::Parallel).unwrap();
    for s in &samples[..3] {
        s.ground_truth().unwrap().save(dir.path(), &s.name).unwrap();
    }
    let loaded = load_predictions(dir.path(), &samples[..3]).unwrap();
    for (s, p) in samples.iter().zip(&loaded) {
        assert_eq!(p.inst_map, s.inst_map);
        assert_eq!(p.types, s.types);
    }
    let err = load_predictions(dir.path(), &samples).unwrap_err().to_string();
    assert!(err.contains(&samples[3].name), "{err}");
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let cfg = ModelConfig::toy();
    let a = CellVta::new(&cfg, 1, DType::F32, &Device::Cpu).unwrap();
    let b = CellVta::new(&cfg, 2, DType::F32, &Device::Cpu).unwrap();
    checkpoint::save(&a.registry, &path).unwrap();
    assert!(!checkpoint::registries_equal(&a.registry, &b.registry).unwrap());
    let report = checkpoint::load_into(&b.registry, &path, true).unwrap();
    assert!(report.missing.is_empty() && report.unexpected.is_empty());
    assert!(checkpoint::registries_equal(&a.registry, &b.registry).unwrap());

    let (samples, _) = generate_in_memory(&SynthConfig::toy(2, 0), Execution::Sequential).unwrap();
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let pa = infer_maps(&a, &images, MagnificationMode::Native, 2).unwrap();
    let pb = infer_maps(&b, &images, MagnificationMode::Native, 2).unwrap();
    assert_eq!(pa, pb);
}

#[test]
fn upsampled_inference_keeps_shape_and_normalization() {
    let model = CellVta::new(&ModelConfig::toy(), 0, DType::F32, &Device::Cpu).unwrap();
    let img = Image::filled(3, 64, 64, 0.6);
    let maps = infer_maps(&model, &[&img], MagnificationMode::Upsample40x, 4).unwrap();
    let m = &maps[0];
    assert_eq!((m.height, m.width), (64, 64));
    for p in 0..64 * 64 {
        assert!((m.np[p] + m.np[64 * 64 + p] - 1.0).abs() < 1e-5);
    }
    assert!(m.hv.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
}

#[test]
fn overlay_marks_only_boundaries() {
    let mut ids = vec![0u32; 100];
    for y in 2..7 {
        for x in 2..7 {
            ids[y * 10 + x] = 1;
        }
    }
    let result = InstanceResult::from_parts(InstanceMap::new(10, 10, ids).unwrap(), BTreeMap::from([(1, 2)])).unwrap();
    let img = Image::filled(3, 10, 10, 0.5);
    let out = overlay(&img, &result).unwrap();
    let changed = |y: usize, x: usize| (0..3).any(|c| out.data[c * 100 + y * 10 + x] != 0.5);
    assert!(changed(2, 2) && changed(6, 4));
    assert!(!changed(4, 4) && !changed(0, 0));
}
