//! Unsupervised image fusion with a cross attention guided dense network.
//!
//! Two registered sources are fused by three sub-networks: a dense chain of
//! cross attention blocks, a multi-scale auxiliary branch, and a merging
//! network with dilated residual dense blocks. Training minimizes weighted
//! SSIM and MSE terms against both sources; no ground truth is needed.

pub mod attention;
pub mod auxiliary;
pub mod checkpoint;
pub mod cli;
pub mod conv;
pub mod data;
pub mod error;
pub mod graph;
pub mod losses;
pub mod merging;
pub mod metrics;
pub mod network;
pub mod params;
pub mod tensor;
pub mod training;
pub mod types;

pub use checkpoint::Checkpoint;
pub use data::{expand_patches, export_fused, load_pairs, ColorPolicy, DatasetSpec, PairingRule, PatchSet};
pub use error::{FusionError, Result};
pub use losses::{mse_loss, ssim, ssim_loss, total_loss, LossBreakdown};
pub use metrics::{evaluate, MetricReport, MetricValues};
pub use network::{Ablation, FusionNetwork};
pub use tensor::{FeatureMap, Tensor};
pub use training::{build_ablation, fuse, train, TrainConfig};
pub use types::{preset_weights, validate_pair, FusedImage, Image, ImagePair, LossWeights, NetworkConfig, Plane, TaskKind};
