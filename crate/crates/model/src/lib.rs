//! Attention-gated encoder-decoder FCN for avalanche debris segmentation, its
//! training loop and tiled whole-scene inference.

pub mod config;
pub mod error;
pub mod infer;
pub mod net;
pub mod train;

pub use config::{AttentionConfig, AugmentToggles, FcnConfig, LossKind, PipelineConfig, PosWeight, TrainConfig};
pub use error::{ModelError, Result};
pub use infer::{predict_scene, threshold, Blend, InferenceConfig, Predictor};
pub use net::{Forward, ForwardOptions, Model};
pub use train::{train, train_patches, EpochRecord, History, TrainOutcome};

use ava_nn::Tensor;

/// Multiplies the three SAR channels of an `N x C x H x W` feature batch (C >= 4)
/// by an `N x 1 x H x W` mask, leaving slope and any later channels untouched.
pub fn apply_attention(features: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (fs, ms) = (features.shape(), mask.shape());
    if fs.c() < config::FCN_IN_CHANNELS || ms.c() != 1 || ms.n() != fs.n() || ms.h() != fs.h() || ms.w() != fs.w() {
        return Err(ModelError::Input(format!("cannot gate {fs} with mask {ms}")));
    }
    let plane = fs.plane();
    let mut out = features.clone();
    for (k, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let (n, c) = (k / fs.c(), k % fs.c());
        if c < config::SAR_CHANNELS {
            for (v, &m) in chunk.iter_mut().zip(&mask.data()[n * plane..(n + 1) * plane]) {
                *v *= m;
            }
        }
    }
    Ok(out)
}
