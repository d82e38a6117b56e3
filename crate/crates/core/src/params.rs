//! Named parameter registry with roles, non-trainable buffers and checksums.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Backbone weight matrices, convolution kernels and bias-score tables.
    Weight,
    /// Additive bias vectors of the backbone.
    Bias,
    /// Norm affine parameters of the backbone.
    Norm,
    PromptToken,
    PromptBiasEmbed,
    PromptBiasWeight,
    SegToken,
    FixedHead,
    Adapter,
}

impl Role {
    pub fn is_backbone(self) -> bool {
        matches!(self, Role::Weight | Role::Bias | Role::Norm)
    }

    /// Parameters trained with the prompt learning rate.
    pub fn is_prompt(self) -> bool {
        matches!(self, Role::PromptToken | Role::PromptBiasEmbed | Role::PromptBiasWeight | Role::SegToken)
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub role: Role,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
    buffers: Vec<(String, Tensor)>,
    buffer_index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, role: Role, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("parameter `{name}` registered twice")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, role, value });
        Ok(self.entries.len() - 1)
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.buffer_index.contains_key(&name) {
            return Err(Error::Invalid(format!("buffer `{name}` registered twice")));
        }
        self.buffer_index.insert(name.clone(), self.buffers.len());
        self.buffers.push((name, value));
        Ok(())
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| Error::Unknown { kind: "parameter", name: name.to_string() })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entries[self.id(name)?].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.id(name)?;
        Ok(&mut self.entries[i].value)
    }

    pub fn entry(&self, id: usize) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.entries[id].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffer_index
            .get(name)
            .map(|&i| &self.buffers[i].1)
            .ok_or_else(|| Error::Unknown { kind: "buffer", name: name.to_string() })
    }

    pub fn set_buffer(&mut self, name: &str, value: Vec<f64>) -> Result<()> {
        let i = *self.buffer_index.get(name).ok_or_else(|| Error::Unknown { kind: "buffer", name: name.to_string() })?;
        let t = &mut self.buffers[i].1;
        if t.len() != value.len() {
            return Err(Error::shape(format!("buffer `{name}` has {} values, got {}", t.len(), value.len())));
        }
        t.data_mut().copy_from_slice(&value);
        Ok(())
    }

    pub fn buffers(&self) -> &[(String, Tensor)] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = &mut (String, Tensor)> {
        self.buffers.iter_mut()
    }

    /// Number of scalars over entries selected by `filter`.
    pub fn count(&self, filter: impl Fn(&ParamEntry) -> bool) -> usize {
        self.entries.iter().filter(|e| filter(e)).map(|e| e.value.len()).sum()
    }

    pub fn backbone_count(&self) -> usize {
        self.count(|e| e.role.is_backbone())
    }

    /// Hex SHA-256 over names, shapes and exact f64 bits of the selected entries.
    pub fn checksum(&self, filter: impl Fn(&ParamEntry) -> bool) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| filter(e)) {
            h.update(e.name.as_bytes());
            for &d in e.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> std::result::Result<(), String> {
        match self.entries.iter().find(|e| !e.value.all_finite()) {
            Some(e) => Err(e.name.clone()),
            None => Ok(()),
        }
    }

    /// Same names, roles and shapes in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| a.name == b.name && a.role == b.role && a.value.shape() == b.value.shape())
            && self.buffers.len() == other.buffers.len()
            && self.buffers.iter().zip(&other.buffers).all(|(a, b)| a.0 == b.0 && a.1.shape() == b.1.shape())
    }
}

/// Per-parameter trainability, aligned with a [`ParamStore`]'s entry order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainableMask {
    names: Vec<String>,
    flags: Vec<bool>,
}

impl TrainableMask {
    pub fn from_fn(store: &ParamStore, f: impl Fn(&ParamEntry) -> bool) -> Self {
        TrainableMask {
            names: store.entries().iter().map(|e| e.name.clone()).collect(),
            flags: store.entries().iter().map(f).collect(),
        }
    }

    pub fn all(store: &ParamStore, value: bool) -> Self {
        Self::from_fn(store, |_| value)
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn get(&self, id: usize) -> bool {
        self.flags.get(id).copied().unwrap_or(false)
    }

    pub fn is_trainable(&self, name: &str) -> Option<bool> {
        self.names.iter().position(|n| n == name).map(|i| self.flags[i])
    }

    pub fn set(&mut self, name: &str, value: bool) -> Result<()> {
        let i = self.names.iter().position(|n| n == name).ok_or_else(|| Error::Unknown { kind: "parameter", name: name.to_string() })?;
        self.flags[i] = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, bool)> {
        self.names.iter().map(String::as_str).zip(self.flags.iter().copied())
    }

    /// Errors unless the mask names every parameter of `store` exactly once, in order.
    pub fn check_covers(&self, store: &ParamStore) -> Result<()> {
        if self.names.len() != store.len() || self.names.iter().zip(store.entries()).any(|(n, e)| *n != e.name) {
            return Err(Error::Invalid("trainable mask does not match the parameter registry".into()));
        }
        Ok(())
    }

    pub fn trainable_count(&self, store: &ParamStore) -> usize {
        store.entries().iter().zip(&self.flags).filter(|(_, &f)| f).map(|(e, _)| e.value.len()).sum()
    }

    pub fn frozen_checksum(&self, store: &ParamStore) -> String {
        let frozen: std::collections::HashSet<&str> = self.iter().filter(|(_, f)| !f).map(|(n, _)| n).collect();
        store.checksum(|e| frozen.contains(e.name.as_str()))
    }
}

/// `θ_t ← m·θ_t + (1 − m)·θ_s` over parameters and buffers.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::config("ema_momentum", format!("{m} is outside [0, 1]")));
    }
    if !teacher.same_layout(student) {
        return Err(Error::Invalid("teacher and student registries differ".into()));
    }
    let blend = |t: &mut Tensor, s: &Tensor| {
        if m == 1.0 {
            return;
        }
        for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = if m == 0.0 { *b } else { m * *a + (1.0 - m) * b };
        }
    };
    for (t, s) in teacher.entries.iter_mut().zip(&student.entries) {
        blend(&mut t.value, &s.value);
    }
    for (t, s) in teacher.buffers.iter_mut().zip(&student.buffers) {
        blend(&mut t.1, &s.1);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.weight", Role::Weight, Tensor::full(&[2, 2], v)).unwrap();
        s.insert("a.bias", Role::Bias, Tensor::full(&[2], v)).unwrap();
        s.insert("p.tokens", Role::PromptToken, Tensor::full(&[3], v)).unwrap();
        s.insert_buffer("bn.mean", Tensor::full(&[2], v)).unwrap();
        s
    }

    #[test]
    fn registry_basics() {
        let mut s = store(1.0);
        assert!(s.insert("a.bias", Role::Bias, Tensor::zeros(&[1])).is_err());
        assert_eq!(s.backbone_count(), 6);
        assert_eq!(s.count(|e| e.role.is_prompt()), 3);
        assert!(matches!(s.get("nope"), Err(Error::Unknown { .. })));
        assert!(s.set_buffer("bn.mean", vec![1.0]).is_err());
        s.set_buffer("bn.mean", vec![4.0, 5.0]).unwrap();
        assert_eq!(s.buffer("bn.mean").unwrap().data(), &[4.0, 5.0]);
    }

    #[test]
    fn checksum_sees_single_bit() {
        let mut s = store(1.0);
        let before = s.checksum(|_| true);
        let w = s.get_mut("a.weight").unwrap();
        w.data_mut()[3] = f64::from_bits(1.0f64.to_bits() + 1);
        assert_ne!(before, s.checksum(|_| true));
        assert_eq!(store(1.0).checksum(|e| e.role.is_prompt()), s.checksum(|e| e.role.is_prompt()));
    }

    #[test]
    fn ema_cases() {
        let mut t = store(0.0);
        let s = store(2.0);
        ema_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t.checksum(|_| true), store(0.0).checksum(|_| true));
        ema_update(&mut t, &s, 0.5).unwrap();
        assert!(t.entries().iter().all(|e| e.value.data().iter().all(|&v| v == 1.0)));
        assert_eq!(t.buffer("bn.mean").unwrap().data(), &[1.0, 1.0]);
        ema_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t.checksum(|_| true), s.checksum(|_| true));
        assert!(ema_update(&mut t, &s, 1.5).is_err());
        let mut other = ParamStore::new();
        other.insert("x", Role::Weight, Tensor::zeros(&[1])).unwrap();
        assert!(ema_update(&mut t, &other, 0.5).is_err());
    }

    #[test]
    fn mask_coverage_and_counts() {
        let s = store(1.0);
        let mut m = TrainableMask::from_fn(&s, |e| e.role.is_prompt());
        m.check_covers(&s).unwrap();
        assert_eq!(m.trainable_count(&s), 3);
        m.set("a.bias", true).unwrap();
        assert_eq!(m.trainable_count(&s), 5);
        assert_eq!(m.is_trainable("a.weight"), Some(false));
        let mut bigger = store(1.0);
        bigger.insert("extra", Role::Adapter, Tensor::zeros(&[1])).unwrap();
        assert!(m.check_covers(&bigger).is_err());
    }
}
