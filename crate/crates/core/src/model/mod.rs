//! End-to-end segmentation network and its analytic cost profile.

mod encoder;
mod macmd;
mod profile;
mod seghead;

pub use encoder::{encoder_macs, encoder_param_count, Encoder, FeaturePyramid, INPUT_MULTIPLE};
pub use macmd::{fusion_param_count, Fusion, MacmdConfig, MacmdModel, Predictions};
pub use profile::{profile, Profile, ProfileRow};
pub use seghead::{seghead_macs, seghead_param_count, SegHead, DEPTHWISE_KERNEL};
