//! Unsupervised streamline registration: learned keypoints on tractograms,
//! a regularised thin-plate-spline warp, and the tooling to train, apply and
//! score it.

pub mod error;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod streamline;
pub mod synth;
pub mod tps;
pub mod train;

pub use error::{Error, Result};
pub use geometry::Point3;
pub use graph::{build_graph, StreamlineGraph};
pub use metrics::{abd, chamfer_loss, l21_distance, mdf_distance, tract_density_map, wdice, VoxelGrid};
pub use net::{detect_keypoints, KeypointSet, ModelConfig, ModelParams};
pub use pipeline::{evaluate, register, EvaluationReport, Matcher, RegisterOptions, Registration};
pub use streamline::{Streamline, Tractogram};
pub use tps::{solve_tps, KeypointPairs, TpsTransform};
pub use train::config::TrainConfig;
pub use train::Trainer;
