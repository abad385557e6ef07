//! PET/CT lesion segmentation: NIfTI I/O, preprocessing, patch sampling,
//! a residual 3D U-Net with its own autodiff engine, cross-validated
//! training, sliding-window ensemble inference and lesion-level metrics.

pub mod alloc;
pub mod case;
pub mod fsutil;
pub mod inference;
pub mod metrics;
pub mod network;
pub mod nifti;
pub mod sampler;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use case::{Case, Preprocessing};
pub use inference::{predict_case, CasePrediction, PatchPredictor, SlidingWindowSpec};
pub use metrics::{Connectivity, MetricsReport, MetricsSummary};
pub use network::{LossWeights, Network, NetworkConfig};
pub use sampler::{PatchBatch, PatchSpec};
pub use tensor::{Graph, Tensor, Var};
pub use trainer::{AdamConfig, FoldResult, ModelCheckpoint, TrainConfig};
pub use volume::{IntensityWindow, Interpolation, Volume};
