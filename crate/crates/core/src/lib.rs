//! Time-domain speech separation with an unknown number of speakers:
//! learned encoder, dilated convolutional embedder, Gerschgorin-disk source
//! counting, attractor masking and a learned decoder, trained end to end
//! with permutation-invariant SI-SNR.

pub mod attractor;
pub mod checkpoint;
pub mod config;
pub mod counter;
pub mod data;
pub mod decoder;
pub mod dsp;
pub mod embedder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod selfcheck;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{ModelConfig, Preset};
pub use counter::{gde_count, gde_count_scaled, rank_count, GdeResult, DEFAULT_GDE_SCALE, DEFAULT_RANK_THRESHOLD};
pub use data::{DatasetConfig, Manifest, Split};
pub use decoder::{pit_loss, si_snr, LossReport};
pub use dsp::{Waveform, SAMPLE_RATE};
pub use error::{Error, Result};
pub use metrics::{EvalRecord, EvalReport};
pub use model::{CountMode, Separation, Separator};
pub use numcore::{ParamSet, Tensor};
pub use trainer::{evaluate, train, Regime, TrainConfig, TrainItem, TrainSession};
