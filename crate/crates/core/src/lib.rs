pub mod autograd;
pub mod cascade;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod metrics;
pub mod net;
pub mod sampler;
pub mod seed;
pub mod tensor;
pub mod trainer;
pub mod video;

pub use diffusion::{DiffusionStep, NoiseSchedule, ReverseOptions, ReverseVariance, ScheduleKind};
pub use error::{Error, Result};
pub use net::{ConditionMode, Denoiser, DenoiserParameters, NetConfig};
pub use sampler::{SamplerConfig, VideoGenerator};
pub use tensor::{Element, Tensor};
pub use video::{LabelMap, SemanticCondition, VideoTensor, NUM_CLASSES};
