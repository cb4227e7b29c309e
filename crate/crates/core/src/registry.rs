//! Named parameters grouped by component, with per-group freezing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Encoder,
    Adapter,
    Decoder,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Encoder, Group::Adapter, Group::Decoder];

    /// The group is the first dotted component of a parameter name.
    pub fn of_name(name: &str) -> Option<Group> {
        match name.split('.').next()? {
            "encoder" => Some(Group::Encoder),
            "adapter" => Some(Group::Adapter),
            "decoder" => Some(Group::Decoder),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Adapter => "adapter",
            Group::Decoder => "decoder",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Buffers (running statistics) are saved and loaded but never optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub var: Var,
    pub group: Group,
    pub kind: ParamKind,
}

#[derive(Debug, Clone)]
pub struct ParameterRegistry {
    params: BTreeMap<String, Parameter>,
    frozen: BTreeSet<Group>,
    dtype: DType,
    device: Device,
}

impl ParameterRegistry {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            params: BTreeMap::new(),
            frozen: BTreeSet::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn insert(&mut self, name: &str, var: Var, kind: ParamKind) -> Result<()> {
        let group = Group::of_name(name).ok_or_else(|| {
            Error::config(format!(
                "parameter `{name}` must start with encoder., adapter. or decoder."
            ))
        })?;
        if self.params.contains_key(name) {
            return Err(Error::Checkpoint(format!("duplicate parameter name `{name}`")));
        }
        self.params
            .insert(name.to_string(), Parameter { var, group, kind });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.params
            .get(name)
            .map(|p| &p.var)
            .ok_or_else(|| Error::config(format!("no parameter named `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_frozen(&mut self, group: Group, frozen: bool) {
        if frozen {
            self.frozen.insert(group);
        } else {
            self.frozen.remove(&group);
        }
    }

    pub fn is_frozen(&self, group: Group) -> bool {
        self.frozen.contains(&group)
    }

    /// Weights that the optimizer may update: not buffers, not in a frozen group.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.params
            .values()
            .filter(|p| p.kind == ParamKind::Weight && !self.frozen.contains(&p.group))
            .map(|p| p.var.clone())
            .collect()
    }

    pub fn num_elements(&self, group: Option<Group>) -> usize {
        self.params
            .values()
            .filter(|p| group.is_none_or(|g| g == p.group))
            .map(|p| p.var.elem_count())
            .sum()
    }

    /// FNV-1a over names and raw value bits of one group.
    pub fn group_checksum(&self, group: Group) -> Result<u64> {
        let mut h = Fnv64::new();
        for (name, p) in self.params.iter().filter(|(_, p)| p.group == group) {
            h.write(name.as_bytes());
            for v in flat_f64(p.var.as_tensor())? {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        Ok(h.finish())
    }

    /// Writes back values taken by [`ParameterRegistry::snapshot`].
    pub fn restore(&self, snapshot: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        for (name, values) in snapshot {
            let var = self.var(name)?;
            if values.len() != var.elem_count() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: var.dims().to_vec(),
                    found: vec![values.len()],
                });
            }
            let t = Tensor::from_vec(values.clone(), var.dims(), var.device())?.to_dtype(var.dtype())?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Exact copy of every value, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        self.params
            .iter()
            .map(|(k, p)| Ok((k.clone(), flat_f64(p.var.as_tensor())?)))
            .collect()
    }
}

pub(crate) fn flat_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

struct Fnv64(u64);

impl Fnv64 {
    fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal truncated at two standard deviations.
    TruncNormal { std: f64 },
    /// He initialization for ReLU layers.
    KaimingNormal { fan_in: usize },
    XavierUniform { fan_in: usize, fan_out: usize },
}

/// Creates parameters in a fixed order from one seeded stream.
pub struct ParamBuilder {
    registry: ParameterRegistry,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            registry: ParameterRegistry::new(dtype, device),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.create(name, shape, init, ParamKind::Weight)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.create(name, shape, init, ParamKind::Buffer)?;
        Ok(self.registry.var(name)?.clone())
    }

    fn create(&mut self, name: &str, shape: &[usize], init: Init, kind: ParamKind) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal { std } => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = dist.sample(&mut self.rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
            Init::KaimingNormal { fan_in } => {
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::XavierUniform { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-a..a)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, self.registry.device())?
            .to_dtype(self.registry.dtype())?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.registry.insert(name, var, kind)?;
        Ok(tensor)
    }

    pub fn dtype(&self) -> DType {
        self.registry.dtype()
    }

    pub fn device(&self) -> Device {
        self.registry.device().clone()
    }

    pub fn finish(self) -> ParameterRegistry {
        self.registry
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_from_names() {
        assert_eq!(Group::of_name("encoder.block1.attn.qkv.weight"), Some(Group::Encoder));
        assert_eq!(Group::of_name("adapter.injector1.gamma"), Some(Group::Adapter));
        assert_eq!(Group::of_name("decoder.tissue_head.weight"), Some(Group::Decoder));
        assert_eq!(Group::of_name("head.weight"), None);
    }

    #[test]
    fn builder_is_deterministic_and_rejects_duplicates() {
        let build = || {
            let mut b = ParamBuilder::new(7, DType::F32, Device::Cpu);
            b.param("encoder.w", &[3, 4], Init::TruncNormal { std: 0.02 }).unwrap();
            b.param("decoder.w", &[5], Init::KaimingNormal { fan_in: 5 }).unwrap();
            assert!(b.param("decoder.w", &[5], Init::Zeros).is_err());
            b.finish()
        };
        let (a, b) = (build(), build());
        assert_eq!(a.snapshot().unwrap(), b.snapshot().unwrap());
        for v in &a.snapshot().unwrap()["encoder.w"] {
            assert!(v.abs() <= 0.04 + 1e-7);
        }
    }

    #[test]
    fn frozen_groups_are_excluded_from_trainables() {
        let mut b = ParamBuilder::new(0, DType::F32, Device::Cpu);
        b.param("encoder.w", &[2], Init::Ones).unwrap();
        b.param("adapter.w", &[2], Init::Ones).unwrap();
        b.buffer("decoder.bn.running_mean", &[2], Init::Zeros).unwrap();
        let mut reg = b.finish();
        assert_eq!(reg.trainable_vars().len(), 2);
        reg.set_frozen(Group::Encoder, true);
        assert_eq!(reg.trainable_vars().len(), 1);
        let before = reg.group_checksum(Group::Encoder).unwrap();
        reg.var("adapter.w").unwrap().set(&Tensor::new(&[3f32, 4.], &Device::Cpu).unwrap()).unwrap();
        assert_eq!(before, reg.group_checksum(Group::Encoder).unwrap());
        assert_ne!(
            reg.group_checksum(Group::Adapter).unwrap(),
            before
        );
    }
}
