pub mod anchors;
pub mod assignment;
pub mod detector;
pub mod generator;
pub mod geometry;
pub mod harness;
pub mod linker;
pub mod metrics;
pub mod motion;
pub mod noise;
pub mod pipeline;
pub mod raster;
pub mod scalar;
pub mod simulator;

/// 1-based frame number, as in MOTChallenge files.
pub type FrameId = u32;

pub use scalar::Real;

pub type BBox64 = geometry::BBox<f64>;
pub type BBox32 = geometry::BBox<f32>;
pub type AnchorGrid64 = anchors::AnchorGrid<f64>;
pub type AnchorGrid32 = anchors::AnchorGrid<f32>;
pub type FlowField64 = motion::FlowField<f64>;
pub type FlowField32 = motion::FlowField<f32>;
pub type Tracklet64 = generator::Tracklet<f64>;
