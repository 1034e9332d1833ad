//! Online anomaly detection with a small learnable prototype memory.
//!
//! Frozen backbone features stream in one frame at a time. Each frame passes
//! through a 1×1 patch adapter and trains adapter and prototypes jointly with
//! a contrastive over-cluster loss. It is then scored by its distance to the
//! nearest prototype.

pub mod adapter;
pub mod anonce;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod frame;
pub mod io;
pub mod memory;
pub mod metrics;
pub mod optim;
pub mod resample;
pub mod rng;
pub mod scorer;
pub mod synth;
pub mod tensor;

pub use adapter::{AdapterGrads, AdapterParams};
pub use anonce::{anonce_loss, LossConfig, LossOutput};
pub use engine::{
    run_stream, Engine, EngineConfig, EvalOptions, InitStrategy, ModelState, StreamReport, UpdateStrategy,
};
pub use error::{Error, Result};
pub use frame::{Label, StreamFrame};
pub use io::{export_frames, load_manifest, read_tensor, save_manifest, write_tensor, Manifest, ManifestRecord, Split, TensorData};
pub use memory::{PrototypeBank, Rebalance};
pub use metrics::{aupro, auroc, EvalResult};
pub use optim::{AdamHyper, AdamState};
pub use scorer::{anomaly_map, ImageAggregation, ScoreMap, ScoreOptions};
pub use synth::{DriftKind, DriftSpec, SynthConfig, SynthSource};
pub use tensor::{Matrix, Tensor3};
