//! Multi-region lung severity scoring from chest radiographs: lung
//! segmentation, affine alignment, attentive region scoring, staged
//! training, superpixel explanations and agreement statistics, with a
//! procedural phantom generator for end-to-end verification.

pub mod config;
pub mod error;
pub mod experiments;
pub mod explain;
pub mod geometry;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod scoring;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Independent per-item seed derived from a global seed (SplitMix64).
pub fn item_seed(global: u64, index: u64) -> u64 {
    let mut z = global ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
