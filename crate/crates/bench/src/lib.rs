//! Shared fixtures for the benchmarks.

use echodiff_core::dataset::toy_record;
use echodiff_core::net::{ConditionMode, Denoiser, NetConfig};
use echodiff_core::{SemanticCondition, VideoTensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The two-level network used for CPU training runs.
pub fn toy_net(mode: ConditionMode) -> Denoiser {
    Denoiser::new(NetConfig { condition_mode: mode, ..NetConfig::toy() }).expect("toy config is valid")
}

/// A noisy clip and the ED map of a synthetic patient at `hw x hw`.
pub fn clip_and_map(frames: usize, hw: usize) -> (VideoTensor<f32>, SemanticCondition) {
    let rec = toy_record(0, frames, hw, 7).expect("toy record");
    let noise = VideoTensor::randn(rec.frames.dims(), &mut ChaCha8Rng::seed_from_u64(1));
    (noise, rec.condition())
}

/// A clean clip of a synthetic patient.
pub fn clip(frames: usize, hw: usize, seed: u64) -> VideoTensor<f32> {
    toy_record(seed as usize, frames, hw, seed).expect("toy record").frames
}
