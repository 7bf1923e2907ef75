//! Ancestral sampling with classifier-free guidance.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{p_step, DiffusionStep, NoiseSchedule, ReverseOptions, ReverseVariance};
use crate::error::{Error, Result};
use crate::net::{Denoiser, DenoiserParameters};
use crate::seed::derive_seed;
use crate::tensor::Element;
use crate::video::{SemanticCondition, VideoDims, VideoTensor};

pub const DEFAULT_GUIDANCE_SCALE: f64 = 7.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Guidance scale `s`; 0 disables guidance.
    pub guidance_scale: f64,
    /// Clamp the predicted clean clip to `[-1, 1]` at every step.
    pub clip_denoised: bool,
    pub seed: u64,
    pub variance: ReverseVariance,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            clip_denoised: true,
            seed: 0,
            variance: ReverseVariance::Posterior,
        }
    }
}

impl SamplerConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = vec![];
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            p.push(format!("guidance_scale must be finite and >= 0, got {}", self.guidance_scale));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems() {
            p if p.is_empty() => Ok(()),
            p => Err(Error::Config(p.join("; "))),
        }
    }

    fn reverse_options(&self) -> ReverseOptions {
        ReverseOptions { clip_denoised: self.clip_denoised, variance: self.variance }
    }
}

/// Guided noise estimate `eps_c + s (eps_c - eps_u)`.
pub fn cfg_combine<F: Element>(eps_cond: &VideoTensor<F>, eps_uncond: &VideoTensor<F>, s: f64) -> Result<VideoTensor<F>> {
    let s = F::of(s);
    eps_cond.zip_map(eps_uncond, |c, u| c + s * (c - u))
}

/// Anything that predicts noise for a noisy clip under a list of conditions.
/// Each condition counts as one denoiser evaluation.
pub trait EpsModel<F: Element> {
    fn predict(
        &self,
        y_t: &VideoTensor<F>,
        conditions: &[&SemanticCondition],
        t: DiffusionStep,
    ) -> Result<Vec<VideoTensor<F>>>;
}

/// A [`Denoiser`] with a fixed parameter set (and optional extra input).
#[derive(Clone, Copy)]
pub struct NetModel<'a, F: Element> {
    net: &'a Denoiser,
    params: &'a DenoiserParameters<F>,
    extra: Option<&'a VideoTensor<F>>,
}

impl<'a, F: Element> NetModel<'a, F> {
    pub fn new(net: &'a Denoiser, params: &'a DenoiserParameters<F>) -> Self {
        Self { net, params, extra: None }
    }

    /// Supplies the extra input channels (the low-resolution clip of a
    /// super-resolution stage).
    pub fn with_extra(mut self, extra: &'a VideoTensor<F>) -> Self {
        self.extra = Some(extra);
        self
    }
}

impl<F: Element> EpsModel<F> for NetModel<'_, F> {
    fn predict(
        &self,
        y_t: &VideoTensor<F>,
        conditions: &[&SemanticCondition],
        t: DiffusionStep,
    ) -> Result<Vec<VideoTensor<F>>> {
        self.net.predict_conditions(self.params, y_t, conditions, t, self.extra)
    }
}

/// Counts denoiser evaluations of the wrapped model.
pub struct CountingModel<M> {
    inner: M,
    calls: AtomicUsize,
}

impl<M> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn into_inner(self) -> M {
        self.inner
    }
}

impl<F: Element, M: EpsModel<F>> EpsModel<F> for CountingModel<M> {
    fn predict(
        &self,
        y_t: &VideoTensor<F>,
        conditions: &[&SemanticCondition],
        t: DiffusionStep,
    ) -> Result<Vec<VideoTensor<F>>> {
        self.calls.fetch_add(conditions.len(), Ordering::Relaxed);
        self.inner.predict(y_t, conditions, t)
    }
}

/// Runs the reverse chain from `y_T ~ N(0, I)` (seeded by `cfg.seed`) down
/// to `y_0`. Every step evaluates the model under `x` and under the null
/// condition in one call and feeds the guided estimate to [`p_step`].
pub fn guided_sample<F: Element, M: EpsModel<F> + ?Sized>(
    model: &M,
    x: &SemanticCondition,
    dims: VideoDims,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<VideoTensor<F>> {
    cfg.validate()?;
    if x.is_null() {
        return Err(Error::Config("sampling needs a non-null condition".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut y = VideoTensor::<F>::randn(dims, &mut rng);
    let null = x.null_like();
    let opts = cfg.reverse_options();
    for t in (1..=schedule.steps()).rev() {
        let step = DiffusionStep::new(t, schedule)?;
        let fail = |e: Error| Error::SamplingStep { step: t, reason: e.to_string() };
        let eps = model.predict(&y, &[x, &null], step).map_err(fail)?;
        let [cond, uncond] = &eps[..] else {
            return Err(fail(Error::Shape(format!("model returned {} estimates for 2 conditions", eps.len()))));
        };
        let guided = cfg_combine(cond, uncond, cfg.guidance_scale).map_err(fail)?;
        let noise = if t > 1 { VideoTensor::randn(dims, &mut rng) } else { VideoTensor::zeros(dims) };
        y = p_step(&y, &guided, step, schedule, &noise, opts).map_err(fail)?;
        if !y.all_finite() {
            return Err(fail(Error::NumericFault("non-finite sample".into())));
        }
    }
    Ok(y)
}

/// Samples one `frames`-frame clip at the condition's resolution.
pub fn sample_video<F: Element>(
    net: &Denoiser,
    params: &DenoiserParameters<F>,
    x: &SemanticCondition,
    frames: usize,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<VideoTensor<F>> {
    let dims = (frames, net.config().in_channels, x.height(), x.width());
    guided_sample(&NetModel::new(net, params), x, dims, schedule, cfg)
}

/// Produces one clip for a condition from a seed.
pub trait VideoGenerator {
    fn generate(&self, x: &SemanticCondition, seed: u64) -> Result<VideoTensor<f32>>;
}

/// Guided DDPM sampling from a trained network.
pub struct DdpmGenerator<'a> {
    pub net: &'a Denoiser,
    pub params: &'a DenoiserParameters<f32>,
    pub schedule: &'a NoiseSchedule,
    pub config: SamplerConfig,
    pub frames: usize,
}

impl VideoGenerator for DdpmGenerator<'_> {
    fn generate(&self, x: &SemanticCondition, seed: u64) -> Result<VideoTensor<f32>> {
        let cfg = SamplerConfig { seed, ..self.config.clone() };
        sample_video(self.net, self.params, x, self.frames, self.schedule, &cfg)
    }
}

/// Seed of replicate `replicate` for condition `condition`.
pub fn replicate_seed(base_seed: u64, condition: usize, replicate: usize) -> u64 {
    derive_seed(&[base_seed, condition as u64, replicate as u64])
}

#[derive(Debug, Clone)]
pub struct GeneratedVideo {
    pub condition_index: usize,
    pub replicate_index: usize,
    pub seed: u64,
    pub video: VideoTensor<f32>,
}

/// `n_per_condition` clips per condition, condition-major, each seeded with
/// [`replicate_seed`].
pub fn batch_sample<G: VideoGenerator + ?Sized>(
    generator: &G,
    conditions: &[SemanticCondition],
    n_per_condition: usize,
    base_seed: u64,
) -> Result<Vec<GeneratedVideo>> {
    if n_per_condition == 0 {
        return Err(Error::Config("n_per_condition must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(conditions.len() * n_per_condition);
    for (ci, x) in conditions.iter().enumerate() {
        for ri in 0..n_per_condition {
            let seed = replicate_seed(base_seed, ci, ri);
            let video = generator.generate(x, seed).map_err(|e| Error::Replicate {
                condition: ci,
                replicate: ri,
                source: Box::new(e),
            })?;
            log::debug!("sampled condition {ci} replicate {ri} (seed {seed:#x})");
            out.push(GeneratedVideo { condition_index: ci, replicate_index: ri, seed, video });
        }
    }
    Ok(out)
}
