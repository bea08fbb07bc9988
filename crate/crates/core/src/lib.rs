//! Multi-scene visual localization at desk scale.
//!
//! The pipeline regresses dense 3D scene coordinates with per-cell
//! uncertainty from synthetic feature images, then recovers 6-DoF camera
//! poses with a RANSAC-wrapped PnP solver. Several scenes are trained
//! jointly: a learnable per-layer score gates each backbone layer between a
//! task-shared and a task-specific weight, a penalty on the scores pulls
//! layers toward sharing, and the shared-parameter gradients of all tasks
//! are rescaled to a common magnitude before they are averaged.
//!
//! Everything numeric is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below pin the f64 instantiation used by the CLI harness.

pub mod scalar;
pub mod tensor;
pub mod graph;
pub mod sharing;
pub mod model;
pub mod loss;
pub mod metrics;
pub mod geom;
pub mod sim;
pub mod optim;
pub mod train;
pub mod checkpoint;

pub use scalar::{Dtype, Scalar};

/// f64 tensor, the precision used by the training harness.
pub type Tensor64 = tensor::Tensor<f64>;
/// f64 computation graph.
pub type Graph64 = graph::Graph<f64>;
/// f64 graph builder.
pub type GraphBuilder64 = graph::GraphBuilder<f64>;
/// f64 camera-to-world pose.
pub type Pose64 = geom::Pose<f64>;
/// f64 pinhole intrinsics.
pub type CameraIntrinsics64 = geom::CameraIntrinsics<f64>;
/// f64 model bundle.
pub type ModelBundle64 = model::ModelBundle<f64>;
/// f64 rendered view.
pub type RenderedView64 = sim::RenderedView<f64>;
