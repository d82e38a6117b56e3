//! Checkpoints: a JSON manifest plus one payload of f32 little-endian values.
//!
//! A model checkpoint holds the configuration, the student registry (with
//! every prompt set and head), the BN buffers and optionally the teacher. A
//! prompt checkpoint holds only the prompt-side parameters of chosen tasks.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{f32_from_le, f32_le_bytes, sha256_hex};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Role};
use crate::punet::PUNet;
use crate::seghead::PromptTask;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const PAYLOAD: &str = "payload.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Model,
    Prompts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Network {
    Student,
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub network: Network,
    /// `None` for buffers.
    pub role: Option<Role>,
    pub shape: Vec<usize>,
    /// Offset into the payload, in values.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub tasks: Vec<PromptTask>,
    pub tensors: Vec<TensorRecord>,
    pub payload_values: usize,
    pub payload_sha256: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub struct Loaded {
    pub model: PUNet,
    pub teacher: Option<ParamStore>,
    pub metadata: serde_json::Value,
}

/// First configuration key on which `a` and `b` build different parameter layouts.
pub fn architecture_conflict(a: &ExperimentConfig, b: &ExperimentConfig) -> Option<&'static str> {
    let checks: [(&'static str, bool); 9] = [
        ("levels", a.levels == b.levels),
        ("channels_per_level", a.channels_per_level == b.channels_per_level),
        ("window_size", a.window_size == b.window_size),
        ("shift", a.shift == b.shift),
        ("heads", a.heads == b.heads),
        ("bias_channels", a.bias_channels == b.bias_channels),
        ("tokens_per_class", a.tokens_per_class == b.tokens_per_class),
        ("patch_stride", a.patch_stride == b.patch_stride),
        ("prompt_sharing", a.prompt_sharing == b.prompt_sharing),
    ];
    checks.iter().find(|c| !c.1).map(|c| c.0)
}

struct Writer {
    tensors: Vec<TensorRecord>,
    values: Vec<f32>,
}

impl Writer {
    fn push(&mut self, name: &str, network: Network, role: Option<Role>, t: &Tensor) {
        self.tensors.push(TensorRecord { name: name.to_string(), network, role, shape: t.shape().to_vec(), offset: self.values.len() });
        self.values.extend(t.data().iter().map(|&v| v as f32));
    }

    fn store(&mut self, s: &ParamStore, network: Network, keep: impl Fn(&str, Role) -> bool) {
        for e in s.entries() {
            if keep(&e.name, e.role) {
                self.push(&e.name, network, Some(e.role), &e.value);
            }
        }
    }

    fn finish(self, dir: &Path, kind: CheckpointKind, config: &ExperimentConfig, tasks: Vec<PromptTask>, metadata: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir)?;
        let bytes = f32_le_bytes(&self.values);
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            kind,
            config: config.clone(),
            config_hash: config.hash(),
            tasks,
            tensors: self.tensors,
            payload_values: self.values.len(),
            payload_sha256: sha256_hex(&bytes),
            metadata,
        };
        fs::write(dir.join(PAYLOAD), &bytes)?;
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

pub fn save_model(dir: &Path, model: &PUNet, teacher: Option<&ParamStore>, metadata: serde_json::Value) -> Result<()> {
    let mut w = Writer { tensors: Vec::new(), values: Vec::new() };
    w.store(&model.params, Network::Student, |_, _| true);
    for (name, t) in model.params.buffers() {
        w.push(name, Network::Student, None, t);
    }
    if let Some(t) = teacher {
        if !t.same_layout(&model.params) {
            return Err(Error::Checkpoint("teacher registry does not match the student".into()));
        }
        w.store(t, Network::Teacher, |_, _| true);
        for (name, b) in t.buffers() {
            w.push(name, Network::Teacher, None, b);
        }
    }
    w.finish(dir, CheckpointKind::Model, &model.config, model.tasks.clone(), metadata)
}

/// Whether a parameter belongs in the prompt checkpoint of `tasks`.
pub fn is_prompt_param(name: &str, role: Role, tasks: &[&str]) -> bool {
    let owned = tasks.iter().any(|t| name.starts_with(&format!("prompt.{t}.")) || name.starts_with(&format!("head.{t}.")));
    (role.is_prompt() || role == Role::FixedHead) && (owned || role == Role::PromptBiasWeight)
}

pub fn save_prompts(dir: &Path, model: &PUNet, tasks: &[&str], metadata: serde_json::Value) -> Result<()> {
    let selected = tasks.iter().map(|t| model.task(t).cloned()).collect::<Result<Vec<_>>>()?;
    let mut w = Writer { tensors: Vec::new(), values: Vec::new() };
    w.store(&model.params, Network::Student, |n, r| is_prompt_param(n, r, tasks));
    w.finish(dir, CheckpointKind::Prompts, &model.config, selected, metadata)
}

fn read_manifest(dir: &Path) -> Result<(Manifest, Vec<f32>)> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{MANIFEST}: {e}")))?;
    if m.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("format version {} is not {CHECKPOINT_VERSION}", m.format_version)));
    }
    let bytes = fs::read(dir.join(PAYLOAD))?;
    if bytes.len() != m.payload_values * 4 {
        return Err(Error::Truncated(format!("{PAYLOAD} has {} bytes, expected {}", bytes.len(), m.payload_values * 4)));
    }
    if sha256_hex(&bytes) != m.payload_sha256 {
        return Err(Error::Checksum(format!("{PAYLOAD} does not match its manifest")));
    }
    Ok((m, f32_from_le(&bytes)?))
}

fn tensor_at(rec: &TensorRecord, values: &[f32]) -> Result<Vec<f64>> {
    let n: usize = rec.shape.iter().product();
    values
        .get(rec.offset..rec.offset + n)
        .map(|s| s.iter().map(|&v| v as f64).collect())
        .ok_or_else(|| Error::Truncated(format!("tensor `{}` runs past the payload", rec.name)))
}

fn fill(store: &mut ParamStore, rec: &TensorRecord, data: Vec<f64>) -> Result<()> {
    match rec.role {
        Some(_) => {
            let t = store.get_mut(&rec.name).map_err(|_| Error::Checkpoint(format!("unexpected parameter `{}`", rec.name)))?;
            if t.shape() != rec.shape.as_slice() {
                return Err(Error::Checkpoint(format!("`{}` has shape {:?}, model expects {:?}", rec.name, rec.shape, t.shape())));
            }
            t.data_mut().copy_from_slice(&data);
            Ok(())
        }
        None => store.set_buffer(&rec.name, data).map_err(|_| Error::Checkpoint(format!("unexpected buffer `{}`", rec.name))),
    }
}

/// Loads a model checkpoint. With `expected`, an architecture mismatch is an
/// error naming the first conflicting key.
pub fn load_model(dir: &Path, expected: Option<&ExperimentConfig>) -> Result<Loaded> {
    let (m, values) = read_manifest(dir)?;
    if m.kind != CheckpointKind::Model {
        return Err(Error::Checkpoint("expected a model checkpoint, found a prompt checkpoint".into()));
    }
    if let Some(key) = expected.and_then(|e| architecture_conflict(e, &m.config)) {
        return Err(Error::Checkpoint(format!("checkpoint conflicts with the configuration on `{key}`")));
    }
    let mut model = PUNet::build(&m.config)?;
    for t in &m.tasks {
        model.add_task(t.clone(), 0)?;
    }
    let has_teacher = m.tensors.iter().any(|r| r.network == Network::Teacher);
    let mut teacher = has_teacher.then(|| model.params.clone());
    let (mut n_params, mut n_teacher) = (0, 0);
    for rec in &m.tensors {
        let data = tensor_at(rec, &values)?;
        match rec.network {
            Network::Student => {
                n_params += rec.role.is_some() as usize;
                fill(&mut model.params, rec, data)?;
            }
            Network::Teacher => {
                n_teacher += rec.role.is_some() as usize;
                fill(teacher.as_mut().expect("teacher present"), rec, data)?;
            }
        }
    }
    if n_params != model.params.len() || (has_teacher && n_teacher != model.params.len()) {
        return Err(Error::Checkpoint("checkpoint does not cover every model parameter".into()));
    }
    Ok(Loaded { model, teacher, metadata: m.metadata })
}

/// Installs the prompt sets of a prompt checkpoint into `model`, registering
/// tasks it does not know yet.
pub fn load_prompts(dir: &Path, model: &mut PUNet) -> Result<Vec<String>> {
    let (m, values) = read_manifest(dir)?;
    if m.kind != CheckpointKind::Prompts {
        return Err(Error::Checkpoint("expected a prompt checkpoint".into()));
    }
    if let Some(key) = architecture_conflict(&model.config, &m.config) {
        return Err(Error::Checkpoint(format!("prompt checkpoint conflicts with the model on `{key}`")));
    }
    for t in &m.tasks {
        if model.task(&t.name).is_err() {
            model.add_task(t.clone(), 0)?;
        }
    }
    for rec in &m.tensors {
        let data = tensor_at(rec, &values)?;
        fill(&mut model.params, rec, data)?;
    }
    Ok(m.tasks.iter().map(|t| t.name.clone()).collect())
}

pub fn read_metadata(dir: &Path) -> Result<serde_json::Value> {
    Ok(read_manifest(dir)?.0.metadata)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> PUNet {
        let mut m = PUNet::build(&ExperimentConfig::toy()).unwrap();
        m.add_task(PromptTask::binary(4), 3).unwrap();
        m.add_task(PromptTask::multiclass("a", vec![1, 2, 3]), 4).unwrap();
        m
    }

    fn rounded(s: &ParamStore) -> Vec<Vec<f64>> {
        s.entries().iter().map(|e| e.value.data().iter().map(|&v| v as f32 as f64).collect()).collect()
    }

    #[test]
    fn model_round_trip() {
        let mut m = model();
        m.params.set_buffer("enc1.down_bn.running_mean", vec![0.25; 16]).unwrap();
        let mut teacher = m.params.clone();
        teacher.get_mut("enc0.embed.weight").unwrap().data_mut()[0] = 7.0;
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &m, Some(&teacher), serde_json::json!({"phase": "p1"})).unwrap();
        let l = load_model(dir.path(), Some(&m.config)).unwrap();
        assert_eq!(rounded(&l.model.params), rounded(&m.params));
        assert_eq!(l.model.params.buffer("enc1.down_bn.running_mean").unwrap().data(), &[0.25; 16]);
        assert_eq!(l.teacher.unwrap().get("enc0.embed.weight").unwrap().data()[0], 7.0);
        assert_eq!(l.model.tasks, m.tasks);
        assert_eq!(l.metadata["phase"], "p1");
    }

    #[test]
    fn conflicting_config_is_rejected() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &m, None, serde_json::Value::Null).unwrap();
        let other = ExperimentConfig { heads: 2, ..ExperimentConfig::toy() };
        let err = load_model(dir.path(), Some(&other)).err().unwrap();
        assert!(err.to_string().contains("heads"), "{err}");
        // Training-only fields do not conflict.
        let lr = ExperimentConfig { lr_net: 0.5, ..ExperimentConfig::toy() };
        assert!(load_model(dir.path(), Some(&lr)).is_ok());
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &model(), None, serde_json::Value::Null).unwrap();
        let p = dir.path().join(PAYLOAD);
        let mut bytes = fs::read(&p).unwrap();
        bytes[100] ^= 1;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_model(dir.path(), None), Err(Error::Checksum(_))));
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_model(dir.path(), None), Err(Error::Truncated(_))));
    }

    #[test]
    fn prompt_checkpoint_round_trip() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        save_prompts(dir.path(), &m, &["c4"], serde_json::Value::Null).unwrap();
        let (manifest, _) = read_manifest(dir.path()).unwrap();
        assert!(manifest.tensors.iter().all(|t| t.name.starts_with("prompt.c4.") || t.name.starts_with("head.c4.") || t.name.ends_with("w_prompt")));
        let n: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        assert!(n < m.params.backbone_count() / 10);

        let mut fresh = PUNet::build(&ExperimentConfig::toy()).unwrap();
        assert_eq!(load_prompts(dir.path(), &mut fresh).unwrap(), vec!["c4".to_string()]);
        let name = "prompt.c4.1.seg";
        let want: Vec<f64> = m.params.get(name).unwrap().data().iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(fresh.params.get(name).unwrap().data(), want.as_slice());
        assert!(load_model(dir.path(), None).is_err());
    }
}
