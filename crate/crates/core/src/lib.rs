//! Core library for monocular dynamic-scene view synthesis at desk scale:
//! consistent depth via masked affine alignment, surface scene flow from a
//! small trainable network, hierarchical neural point clouds, and point-based
//! volume rendering, validated against built-in analytic scenes.

pub mod depth;
pub mod geometry;
pub mod image;
pub mod masking;
pub mod nn;
pub mod oracle;
pub mod points;
pub mod pose;
pub mod renderer;
pub mod scene_flow;

pub use depth::{ScaleShift, TriangulatedDepthSet};
pub use geometry::{Camera, DepthMap, GeometryError, Intrinsics, NormalMap, Pose};
pub use image::RgbImage;
pub use masking::{FlowField, MaskConfig, MaskImage, MaskKind, Segmentation};
pub use nn::{Activation, AdamState, EncodingConfig, MlpParams};
pub use oracle::{OracleBundle, SceneSpec};
