//! Flat binary checkpoint container.
//!
//! Layout:
//!
//! ```text
//! b"CVTA1" | header_len: u64 LE | header: UTF-8 JSON | payload
//! ```
//!
//! The header lists every parameter with its name, shape, dtype tag
//! (`"f32"` or `"f64"`), group, kind, and the byte offset/length of its raw
//! little-endian values relative to the start of the payload.
//!
//! Loading external weights: rename them to this crate's parameter names
//! (`encoder.patch_embed.weight`, `encoder.block{i}.attn.qkv.weight`, ...) and
//! write them in this container. A position embedding trained for another
//! grid size is resized bilinearly on load.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoder::{resize_pos_embed, POS_EMBED_NAME};
use crate::error::{Error, Result};
use crate::registry::{flat_f64, Group, ParamKind, ParameterRegistry};

pub const MAGIC: &[u8; 5] = b"CVTA1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EntryHeader {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub group: Group,
    pub kind: ParamKind,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Header {
    pub format: String,
    pub params: Vec<EntryHeader>,
}

/// A parsed checkpoint: header plus each entry's values widened to f64.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: Header,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub updated: Vec<String>,
    pub missing: Vec<String>,
    pub unexpected: Vec<String>,
}

fn dtype_tag(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

pub fn save(registry: &ParameterRegistry, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut entries = Vec::with_capacity(registry.len());
    let mut payload: Vec<u8> = Vec::new();
    let mut seen = BTreeSet::new();
    for (name, p) in registry.iter() {
        if !seen.insert(name) {
            return Err(Error::Checkpoint(format!("duplicate parameter name `{name}`")));
        }
        let t = p.var.as_tensor();
        let tag = dtype_tag(t.dtype())?;
        let offset = payload.len() as u64;
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F32 => {
                for v in flat.to_vec1::<f32>()? {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
            _ => {
                for v in flat.to_vec1::<f64>()? {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        entries.push(EntryHeader {
            name: name.to_string(),
            shape: t.dims().to_vec(),
            dtype: tag.to_string(),
            group: p.group,
            kind: p.kind,
            offset,
            nbytes: payload.len() as u64 - offset,
        });
    }
    let header = serde_json::to_vec(&Header {
        format: "CVTA1".into(),
        params: entries,
    })?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes)
}

pub fn parse(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("missing CVTA1 magic".into()));
    }
    let mut len = [0u8; 8];
    len.copy_from_slice(&bytes[5..13]);
    let header_len = u64::from_le_bytes(len) as usize;
    let payload_start = 13usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("header length exceeds file".into()))?;
    let header: Header = serde_json::from_slice(&bytes[13..payload_start])?;
    let payload = &bytes[payload_start..];
    let mut values = Vec::with_capacity(header.params.len());
    for e in &header.params {
        let count: usize = e.shape.iter().product();
        let width = match e.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has unknown dtype `{other}`",
                    e.name
                )))
            }
        };
        let (start, n) = (e.offset as usize, e.nbytes as usize);
        if n != count * width || start.checked_add(n).is_none_or(|end| end > payload.len()) {
            return Err(Error::Checkpoint(format!(
                "payload of `{}` is truncated or inconsistent with its shape",
                e.name
            )));
        }
        let raw = &payload[start..start + n];
        let v: Vec<f64> = if width == 4 {
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect()
        } else {
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect()
        };
        values.push(v);
    }
    Ok(Checkpoint { header, values })
}

/// Overwrites registry parameters whose names appear in the checkpoint.
///
/// Strict mode rejects both missing and unexpected names. Every entry is
/// validated before any parameter is touched.
pub fn load_into(
    registry: &ParameterRegistry,
    path: impl AsRef<Path>,
    strict: bool,
) -> Result<LoadReport> {
    let ckpt = read(path)?;
    apply(registry, &ckpt, strict)
}

pub fn apply(registry: &ParameterRegistry, ckpt: &Checkpoint, strict: bool) -> Result<LoadReport> {
    let file_names: BTreeSet<&str> = ckpt.header.params.iter().map(|e| e.name.as_str()).collect();
    let mut report = LoadReport {
        missing: registry
            .names()
            .filter(|n| !file_names.contains(n))
            .map(String::from)
            .collect(),
        unexpected: file_names
            .iter()
            .filter(|n| registry.get(n).is_none())
            .map(|n| n.to_string())
            .collect(),
        ..Default::default()
    };
    if strict && (!report.missing.is_empty() || !report.unexpected.is_empty()) {
        let mut parts = Vec::new();
        if !report.unexpected.is_empty() {
            parts.push(format!(
                "{} unexpected name{}: {}",
                report.unexpected.len(),
                if report.unexpected.len() == 1 { "" } else { "s" },
                report.unexpected.join(", ")
            ));
        }
        if !report.missing.is_empty() {
            parts.push(format!(
                "{} missing name{}: {}",
                report.missing.len(),
                if report.missing.len() == 1 { "" } else { "s" },
                report.missing.join(", ")
            ));
        }
        return Err(Error::Checkpoint(parts.join("; ")));
    }

    let mut staged: Vec<(&str, Tensor)> = Vec::new();
    for (entry, values) in ckpt.header.params.iter().zip(&ckpt.values) {
        let Some(param) = registry.get(&entry.name) else {
            continue;
        };
        let target = param.var.as_tensor();
        let expected = target.dims().to_vec();
        let values = if entry.shape == expected {
            values.clone()
        } else if entry.name == POS_EMBED_NAME && entry.shape.len() == 2 && expected.len() == 2 {
            resize_pos_embed(values, entry.shape[0], expected[0], expected[1])?
        } else {
            return Err(Error::ShapeMismatch {
                name: entry.name.clone(),
                expected,
                found: entry.shape.clone(),
            });
        };
        let t = Tensor::from_vec(values, target.dims(), target.device())?.to_dtype(target.dtype())?;
        staged.push((entry.name.as_str(), t));
    }
    for (name, t) in staged {
        registry.var(name)?.set(&t)?;
        report.updated.push(name.to_string());
    }
    Ok(report)
}

/// Value-level equality of two registries (names, shapes and bits).
pub fn registries_equal(a: &ParameterRegistry, b: &ParameterRegistry) -> Result<bool> {
    if a.len() != b.len() {
        return Ok(false);
    }
    for ((na, pa), (nb, pb)) in a.iter().zip(b.iter()) {
        if na != nb || pa.var.dims() != pb.var.dims() || pa.kind != pb.kind {
            return Ok(false);
        }
        let (va, vb) = (flat_f64(pa.var.as_tensor())?, flat_f64(pb.var.as_tensor())?);
        if va.iter().zip(&vb).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use candle_core::Device;

    use super::*;
    use crate::registry::{Init, ParamBuilder};

    fn small(seed: u64) -> ParameterRegistry {
        let mut b = ParamBuilder::new(seed, DType::F32, Device::Cpu);
        b.param("encoder.block1.attn.qkv.weight", &[6, 2], Init::TruncNormal { std: 0.02 })
            .unwrap();
        b.param("adapter.injector1.gamma", &[2], Init::TruncNormal { std: 1.0 }).unwrap();
        b.param("decoder.tissue_head.weight", &[3, 2], Init::TruncNormal { std: 1.0 })
            .unwrap();
        b.buffer("decoder.np.stage1.bn.running_var", &[4], Init::Ones).unwrap();
        b.finish()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cvta");
        let a = small(1);
        save(&a, &path).unwrap();
        let b = small(2);
        assert!(!registries_equal(&a, &b).unwrap());
        let report = load_into(&b, &path, true).unwrap();
        assert_eq!(report.updated.len(), 4);
        assert!(registries_equal(&a, &b).unwrap());
    }

    #[test]
    fn empty_checkpoint_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.cvta");
        let reg = ParameterRegistry::new(DType::F32, Device::Cpu);
        save(&reg, &path).unwrap();
        let ck = read(&path).unwrap();
        assert!(ck.header.params.is_empty());
        assert_eq!(load_into(&reg, &path, true).unwrap(), LoadReport::default());
    }

    #[test]
    fn strict_mode_counts_unexpected_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extra.cvta");
        let mut b = ParamBuilder::new(3, DType::F32, Device::Cpu);
        b.param("encoder.block1.attn.qkv.weight", &[6, 2], Init::Zeros).unwrap();
        b.param("adapter.injector1.gamma", &[2], Init::Zeros).unwrap();
        b.param("decoder.tissue_head.weight", &[3, 2], Init::Zeros).unwrap();
        b.buffer("decoder.np.stage1.bn.running_var", &[4], Init::Ones).unwrap();
        b.param("decoder.extra", &[1], Init::Zeros).unwrap();
        save(&b.finish(), &path).unwrap();
        let target = small(4);
        let err = load_into(&target, &path, true).unwrap_err().to_string();
        assert!(err.contains("1 unexpected name"), "{err}");
        let report = load_into(&target, &path, false).unwrap();
        assert_eq!(report.unexpected, vec!["decoder.extra".to_string()]);
    }

    #[test]
    fn partial_load_touches_only_matching_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.cvta");
        let mut b = ParamBuilder::new(9, DType::F32, Device::Cpu);
        b.param("encoder.block1.attn.qkv.weight", &[6, 2], Init::Ones).unwrap();
        save(&b.finish(), &path).unwrap();
        let target = small(5);
        let adapter_before = target.group_checksum(Group::Adapter).unwrap();
        let decoder_before = target.group_checksum(Group::Decoder).unwrap();
        let report = load_into(&target, &path, false).unwrap();
        assert_eq!(report.updated, vec!["encoder.block1.attn.qkv.weight".to_string()]);
        assert_eq!(adapter_before, target.group_checksum(Group::Adapter).unwrap());
        assert_eq!(decoder_before, target.group_checksum(Group::Decoder).unwrap());
        let w = flat_f64(target.var("encoder.block1.attn.qkv.weight").unwrap()).unwrap();
        assert!(w.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn shape_mismatch_names_the_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cvta");
        let mut b = ParamBuilder::new(9, DType::F32, Device::Cpu);
        b.param("adapter.injector1.gamma", &[3], Init::Ones).unwrap();
        save(&b.finish(), &path).unwrap();
        let target = small(5);
        let before = target.snapshot().unwrap();
        let err = load_into(&target, &path, false).unwrap_err();
        assert!(matches!(&err, Error::ShapeMismatch { name, .. } if name == "adapter.injector1.gamma"));
        assert_eq!(before, target.snapshot().unwrap());
    }

    #[test]
    fn corrupt_and_missing_files_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.cvta");
        std::fs::write(&path, b"CVTA1\xff\xff\xff\xff\xff\xff\xff\x7f{}").unwrap();
        assert!(read(&path).is_err());
        assert!(matches!(read(dir.path().join("nope")), Err(Error::Io { .. })));
        assert!(parse(b"NOPE").is_err());
    }
}
