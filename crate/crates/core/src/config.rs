//! Experiment configuration: every hyperparameter, shape, seed and scheme choice.
//!
//! Stored as JSON with a schema version. Missing keys take the full-scale
//! defaults; [`ExperimentConfig::toy`] is the pinned desk-scale preset.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Parameter-freezing scheme used during adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Fixed,
    Bias,
    PromptNoBias,
    Prompt,
    BiasPlusPrompt,
    Adapter,
    Decoder,
    Full,
    FullFixed,
}

impl Scheme {
    pub const ALL: [Scheme; 9] = [
        Scheme::Fixed,
        Scheme::Bias,
        Scheme::PromptNoBias,
        Scheme::Prompt,
        Scheme::BiasPlusPrompt,
        Scheme::Adapter,
        Scheme::Decoder,
        Scheme::Full,
        Scheme::FullFixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Fixed => "fixed",
            Scheme::Bias => "bias",
            Scheme::PromptNoBias => "prompt_no_bias",
            Scheme::Prompt => "prompt",
            Scheme::BiasPlusPrompt => "bias_plus_prompt",
            Scheme::Adapter => "adapter",
            Scheme::Decoder => "decoder",
            Scheme::Full => "full",
            Scheme::FullFixed => "full_fixed",
        }
    }

    /// Schemes that predict with the linear head instead of prompt similarity.
    pub fn uses_fixed_head(self) -> bool {
        matches!(self, Scheme::Fixed | Scheme::FullFixed)
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Unknown { kind: "scheme", name: s.to_string() })
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Binary,
    Multiclass,
    Fixed,
}

/// Whether the two attention sublayers of a block share one token bank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSharing {
    Block,
    Sublayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Weighted,
    Topk,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub levels: usize,
    pub channels_per_level: Vec<usize>,
    pub window_size: usize,
    pub shift: usize,
    pub heads: usize,
    pub bias_channels: usize,
    pub tokens_per_class: usize,
    pub patch_stride: usize,
    pub teacher_fov: usize,
    pub student1_fov: usize,
    pub student2_fov: usize,
    pub tau_agg: f64,
    pub tau_teacher: f64,
    pub tau_student: f64,
    pub fwhm: f64,
    pub proto_reduction: usize,
    pub cluster_iters: usize,
    pub ema_momentum: f64,
    pub focal_gamma: f64,
    pub loss_weight_seg: f64,
    pub loss_weight_cpa: f64,
    pub lr_net: f64,
    pub lr_prompt: f64,
    pub lr_net_p2: f64,
    pub lr_prompt_p2: f64,
    pub weight_decay: f64,
    pub epochs_p1: usize,
    pub epochs_p2: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub scheme: Scheme,
    pub prompt_mode: PromptMode,
    pub prompt_sharing: PromptSharing,
    pub aggregation: Aggregation,
    pub topk: usize,
    /// Inclusive band for the fraction of student pixels that get masked.
    pub mask_fraction: [f64; 2],
    pub leaky_slope: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            levels: 5,
            channels_per_level: vec![32, 64, 128, 256, 384],
            window_size: 8,
            shift: 4,
            heads: 8,
            bias_channels: 32,
            tokens_per_class: 16,
            patch_stride: 2,
            teacher_fov: 256,
            student1_fov: 224,
            student2_fov: 160,
            tau_agg: 0.1,
            tau_teacher: 0.033,
            tau_student: 0.066,
            fwhm: 128.0,
            proto_reduction: 8,
            cluster_iters: 3,
            ema_momentum: 0.999,
            focal_gamma: 4.0,
            loss_weight_seg: 1.0,
            loss_weight_cpa: 0.01,
            lr_net: 1e-4,
            lr_prompt: 1e-3,
            lr_net_p2: 5e-4,
            lr_prompt_p2: 5e-3,
            weight_decay: 1e-2,
            epochs_p1: 400,
            epochs_p2: 100,
            samples_per_epoch: 5000,
            batch_size: 8,
            seed: 0,
            scheme: Scheme::Prompt,
            prompt_mode: PromptMode::Binary,
            prompt_sharing: PromptSharing::Block,
            aggregation: Aggregation::Weighted,
            topk: 3,
            mask_fraction: [0.1, 0.4],
            leaky_slope: 0.01,
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale preset used by the tests and the trend suite.
    pub fn toy() -> Self {
        ExperimentConfig {
            levels: 3,
            channels_per_level: vec![8, 16, 32],
            window_size: 4,
            shift: 2,
            heads: 4,
            bias_channels: 8,
            tokens_per_class: 4,
            teacher_fov: 64,
            student1_fov: 48,
            student2_fov: 32,
            fwhm: 32.0,
            proto_reduction: 8,
            ema_momentum: 0.99,
            lr_net: 2e-3,
            lr_prompt: 1e-2,
            lr_net_p2: 2e-3,
            lr_prompt_p2: 0.15,
            epochs_p1: 4,
            epochs_p2: 8,
            samples_per_epoch: 2000,
            batch_size: 8,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `PUNET_SEED` if set.
    pub fn with_env_overrides(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var("PUNET_SEED") {
            self.seed = v.trim().parse().map_err(|_| Error::config("seed", format!("PUNET_SEED={v:?} is not an integer")))?;
        }
        Ok(self)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn fovs(&self) -> [usize; 3] {
        [self.teacher_fov, self.student1_fov, self.student2_fov]
    }

    /// Channel width of the decoder embedding.
    pub fn out_channels(&self) -> usize {
        self.channels_per_level[0]
    }

    pub fn p1_steps(&self) -> usize {
        self.epochs_p1 * self.samples_per_epoch / self.batch_size.max(1)
    }

    pub fn p2_steps(&self) -> usize {
        self.epochs_p2 * self.samples_per_epoch / self.batch_size.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, r: String| Err(Error::config(k, r));
        if self.schema_version != SCHEMA_VERSION {
            return err("schema_version", format!("expected {SCHEMA_VERSION}, got {}", self.schema_version));
        }
        if self.levels == 0 || self.levels != self.channels_per_level.len() {
            return err("channels_per_level", format!("{} entries for {} levels", self.channels_per_level.len(), self.levels));
        }
        if self.heads == 0 {
            return err("heads", "must be positive".into());
        }
        for &c in &self.channels_per_level {
            if c == 0 || c % self.heads != 0 {
                return err("channels_per_level", format!("{c} is not a positive multiple of heads={}", self.heads));
            }
        }
        for (k, v) in [
            ("window_size", self.window_size),
            ("bias_channels", self.bias_channels),
            ("tokens_per_class", self.tokens_per_class),
            ("patch_stride", self.patch_stride),
            ("proto_reduction", self.proto_reduction),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return err(k, "must be positive".into());
            }
        }
        if self.shift * 2 != self.window_size {
            return err("shift", format!("must be window_size/2 = {}", self.window_size / 2));
        }
        let unit = self.patch_stride * self.window_size;
        for (k, v) in [("teacher_fov", self.teacher_fov), ("student1_fov", self.student1_fov), ("student2_fov", self.student2_fov)] {
            if v == 0 || v % unit != 0 {
                return err(k, format!("{v} is not divisible by patch_stride*window_size = {unit}"));
            }
        }
        if self.student1_fov > self.teacher_fov {
            return err("student1_fov", "exceeds teacher_fov".into());
        }
        if self.student2_fov > self.teacher_fov {
            return err("student2_fov", "exceeds teacher_fov".into());
        }
        for (k, v) in [
            ("tau_agg", self.tau_agg),
            ("tau_teacher", self.tau_teacher),
            ("tau_student", self.tau_student),
            ("fwhm", self.fwhm),
            ("lr_net", self.lr_net),
            ("lr_prompt", self.lr_prompt),
            ("lr_net_p2", self.lr_net_p2),
            ("lr_prompt_p2", self.lr_prompt_p2),
        ] {
            if !(v > 0.0) {
                return err(k, format!("must be strictly positive, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return err("ema_momentum", format!("{} is outside [0, 1]", self.ema_momentum));
        }
        if !(self.focal_gamma >= 0.0) {
            return err("focal_gamma", "must be non-negative".into());
        }
        if !(self.weight_decay >= 0.0) {
            return err("weight_decay", "must be non-negative".into());
        }
        if self.topk == 0 || self.topk > self.tokens_per_class {
            if self.aggregation == Aggregation::Topk {
                return err("topk", format!("must lie in 1..={}", self.tokens_per_class));
            }
        }
        let [lo, hi] = self.mask_fraction;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return err("mask_fraction", format!("[{lo}, {hi}] is not a sub-interval of [0, 1]"));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path)
}

pub fn toy_preset() -> ExperimentConfig {
    ExperimentConfig::toy()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_object_gives_full_scale_defaults() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg.channels_per_level, vec![32, 64, 128, 256, 384]);
        assert_eq!(cfg.tokens_per_class, 16);
        assert_eq!(cfg.focal_gamma, 4.0);
        assert_eq!(cfg.tau_agg, 0.1);
        assert_eq!(cfg.heads, 8);
        assert_eq!(cfg.bias_channels, 32);
        assert_eq!(cfg.fwhm, 128.0);
        assert_eq!(cfg.proto_reduction, 8);
        assert_eq!((cfg.tau_teacher, cfg.tau_student), (0.033, 0.066));
        assert_eq!((cfg.loss_weight_seg, cfg.loss_weight_cpa), (1.0, 0.01));
    }

    #[test]
    fn explicit_heads_accepted() {
        let cfg = ExperimentConfig::from_json(r#"{"heads": 8, "channels_per_level": [32, 64, 128, 256, 384]}"#).unwrap();
        assert!(cfg.channels_per_level.iter().all(|c| c % 8 == 0));
    }

    #[test]
    fn violations_name_the_key() {
        for (json, key) in [
            (r#"{"ema_momentum": 1.5}"#, "ema_momentum"),
            (r#"{"heads": 7}"#, "channels_per_level"),
            (r#"{"levels": 4}"#, "channels_per_level"),
            (r#"{"student1_fov": 512}"#, "student1_fov"),
            (r#"{"student2_fov": 100}"#, "student2_fov"),
            (r#"{"tau_agg": 0.0}"#, "tau_agg"),
            (r#"{"fwhm": -1.0}"#, "fwhm"),
            (r#"{"shift": 3}"#, "shift"),
        ] {
            match ExperimentConfig::from_json(json) {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key, "{json}"),
                other => panic!("{json}: expected config error, got {other:?}"),
            }
        }
    }

    #[test]
    fn parse_errors_are_reported() {
        assert!(matches!(ExperimentConfig::from_json("{"), Err(Error::ConfigParse(_))));
        assert!(matches!(ExperimentConfig::from_json(r#"{"hedas": 8}"#), Err(Error::ConfigParse(_))));
        assert!(matches!(ExperimentConfig::from_json(r#"{"scheme": "lora"}"#), Err(Error::ConfigParse(_))));
    }

    #[test]
    fn toy_preset_is_valid_and_stable() {
        let a = toy_preset();
        assert_eq!(a.levels, 3);
        assert_eq!(a.channels_per_level, vec![8, 16, 32]);
        assert_eq!((a.window_size, a.shift, a.heads, a.tokens_per_class), (4, 2, 4, 4));
        assert_eq!(a.fovs(), [64, 48, 32]);
        a.validate().unwrap();
        assert_eq!(a, toy_preset());
        assert_eq!(a.hash(), toy_preset().hash());
    }

    #[test]
    fn env_seed_override() {
        // Only this test touches PUNET_SEED.
        std::env::set_var("PUNET_SEED", "1234");
        let cfg = ExperimentConfig::toy().with_env_overrides().unwrap();
        std::env::set_var("PUNET_SEED", "abc");
        let bad = ExperimentConfig::toy().with_env_overrides();
        std::env::remove_var("PUNET_SEED");
        assert_eq!(cfg.seed, 1234);
        assert!(bad.is_err());
    }

    #[test]
    fn load_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 9}"#).unwrap();
        assert_eq!(load_config(&p).unwrap().seed, 9);
        assert!(load_config(&dir.path().join("missing.json")).is_err());
    }

    proptest! {
        #[test]
        fn serialize_load_round_trip(
            heads in prop::sample::select(vec![1usize, 2, 4]),
            mult in prop::collection::vec(1usize..5, 1..5),
            window in prop::sample::select(vec![2usize, 4, 8]),
            tau in 0.001f64..1.0,
            ema in 0.0f64..=1.0,
            seed in any::<u64>(),
            scheme in prop::sample::select(Scheme::ALL.to_vec()),
        ) {
            let fov = 2 * window * 4;
            let cfg = ExperimentConfig {
                levels: mult.len(),
                channels_per_level: mult.iter().map(|m| m * heads * 2).collect(),
                heads,
                window_size: window,
                shift: window / 2,
                teacher_fov: fov,
                student1_fov: fov,
                student2_fov: fov / 2,
                tau_agg: tau,
                ema_momentum: ema,
                seed,
                scheme,
                ..ExperimentConfig::toy()
            };
            cfg.validate().unwrap();
            let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
