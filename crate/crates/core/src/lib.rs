//! Prompt-able UNet with prompt-aware shifted-window attention, prototype
//! self-supervision and the experiment harness around it.

pub mod attention;
pub mod bind;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod params;
pub mod punet;
pub mod pswin;
pub mod seghead;
pub mod selfsup;
pub mod supervise;
pub mod tensor;
pub mod windowing;

pub use config::{Aggregation, ExperimentConfig, PromptMode, PromptSharing, Scheme};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
