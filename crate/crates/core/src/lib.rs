//! Hemisphere LiDAR scan pipeline: packet ingest, point projection,
//! multi-channel frame representations, dataset tooling and instance
//! segmentation scoring.

pub mod container;
pub mod dataset;
pub mod evaluation;
pub mod ingest;
pub mod intrinsics;
pub mod projection;
pub mod representation;
pub mod synth;
pub mod wire;

pub use container::{ContainerError, Tensor, TensorData};
pub use dataset::{AnnotationSet, Class, Dataset, DatasetError, DatasetManifest, Task};
pub use evaluation::{EvalError, EvalReport, MatchParams, PredictionSet};
pub use ingest::{Assembler, IngestError, IngestStats, LidarScan};
pub use intrinsics::{parse_metadata, MetadataError, SensorIntrinsics};
pub use projection::{PointImage, ProjectionError, ProjectionMode, Projector};
pub use representation::{Channel, FrameRepresentation, RepresentationConfig, RepresentationError};
pub use synth::{Scene, SynthError};
pub use wire::{LidarPacket, WireError};
