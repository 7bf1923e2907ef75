//! Two-stage generation: a low-resolution base model followed by a
//! super-resolution model that sees the upsampled, noise-augmented base clip
//! as extra input channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::net::{Denoiser, DenoiserParameters};
use crate::sampler::{guided_sample, CountingModel, NetModel, SamplerConfig, VideoGenerator};
use crate::seed::derive_seed;
use crate::tensor::Element;
use crate::video::{SemanticCondition, VideoTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeConfig {
    pub base_hw: usize,
    pub target_hw: usize,
    /// Standard deviation of the Gaussian noise added to the upsampled base clip.
    pub sr_noise_aug_level: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self { base_hw: 56, target_hw: 128, sr_noise_aug_level: 0.1 }
    }
}

impl CascadeConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = vec![];
        if self.base_hw == 0 || self.base_hw >= self.target_hw {
            p.push(format!("base_hw {} must be positive and below target_hw {}", self.base_hw, self.target_hw));
        }
        if !(0.0..1.0).contains(&self.sr_noise_aug_level) {
            p.push(format!("sr_noise_aug_level must lie in [0, 1), got {}", self.sr_noise_aug_level));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems() {
            p if p.is_empty() => Ok(()),
            p => Err(Error::Config(p.join("; "))),
        }
    }
}

/// Area-weighted resampling weights mapping `src` samples onto `dst` cells.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut w = vec![];
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < src {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((i, overlap / scale));
                }
                i += 1;
            }
            w
        })
        .collect()
}

/// Bilinear weights with half-pixel centres and edge clamping.
fn bilinear_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            let f = pos - i0 as f64;
            if i1 == i0 || f == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - f), (i1, f)]
            }
        })
        .collect()
}

/// Separable resampling of every plane with per-axis weight tables.
fn resample<F: Element>(v: &VideoTensor<F>, rows: &[Vec<(usize, f64)>], cols: &[Vec<(usize, f64)>]) -> VideoTensor<F> {
    let (k, c, h, w) = v.dims();
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = Vec::with_capacity(k * c * oh * ow);
    let mut tmp = vec![0.0f64; h * ow];
    for kk in 0..k {
        for cc in 0..c {
            let plane = v.plane(kk, cc);
            for y in 0..h {
                for (x, wx) in cols.iter().enumerate() {
                    tmp[y * ow + x] = wx.iter().map(|&(i, a)| a * plane[y * w + i].as_f64()).sum();
                }
            }
            for wy in rows {
                for x in 0..ow {
                    out.push(F::of(wy.iter().map(|&(i, a)| a * tmp[i * ow + x]).sum()));
                }
            }
        }
    }
    VideoTensor::new((k, c, oh, ow), out).expect("sized")
}

/// Per-frame area averaging down to `hw x hw`.
pub fn downsample_video<F: Element>(v: &VideoTensor<F>, hw: usize) -> Result<VideoTensor<F>> {
    if hw == 0 || hw > v.height() || hw > v.width() {
        return Err(Error::Shape(format!("cannot downsample {}x{} to {hw}x{hw}", v.height(), v.width())));
    }
    Ok(resample(v, &area_weights(v.height(), hw), &area_weights(v.width(), hw)))
}

/// Per-frame bilinear upsampling to `hw x hw`.
pub fn upsample_video<F: Element>(v: &VideoTensor<F>, hw: usize) -> Result<VideoTensor<F>> {
    if hw < v.height() || hw < v.width() {
        return Err(Error::Shape(format!("cannot upsample {}x{} to {hw}x{hw}", v.height(), v.width())));
    }
    Ok(resample(v, &bilinear_weights(v.height(), hw), &bilinear_weights(v.width(), hw)))
}

/// Inputs of the super-resolution stage.
#[derive(Debug, Clone)]
pub struct SrCondition<F: Element> {
    /// Upsampled, noise-augmented low-resolution clip; enters as extra input channels.
    pub lowres_up: VideoTensor<F>,
    /// The semantic map at the target resolution.
    pub condition: SemanticCondition,
}

/// Upsamples `lowres` to `target_hw`, adds `aug_level * aug_eps`, and pairs it
/// with the map resized to the target resolution.
pub fn sr_condition_assembly<F: Element>(
    lowres: &VideoTensor<F>,
    x: &SemanticCondition,
    aug_eps: &VideoTensor<F>,
    aug_level: f64,
    target_hw: usize,
) -> Result<SrCondition<F>> {
    let up = upsample_video(lowres, target_hw)?;
    let a = F::of(aug_level);
    let lowres_up = up.zip_map(aug_eps, |u, e| u + a * e)?;
    let condition = if (x.height(), x.width()) == (target_hw, target_hw) { x.clone() } else { x.resize_nearest(target_hw, target_hw) };
    Ok(SrCondition { lowres_up, condition })
}

/// A trained stage: network, weights, schedule and sampler settings.
pub struct CascadeStage<'a> {
    pub net: &'a Denoiser,
    pub params: &'a DenoiserParameters<f32>,
    pub schedule: &'a NoiseSchedule,
    pub sampler: SamplerConfig,
}

impl<'a> CascadeStage<'a> {
    fn reseeded(&self, seed: u64) -> CascadeStage<'a> {
        CascadeStage {
            net: self.net,
            params: self.params,
            schedule: self.schedule,
            sampler: SamplerConfig { seed, ..self.sampler.clone() },
        }
    }
}

#[derive(Debug, Clone)]
pub struct CascadeOutput {
    pub base: VideoTensor<f32>,
    pub output: VideoTensor<f32>,
    pub base_calls: usize,
    pub sr_calls: usize,
}

fn stage_error(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::Stage { stage, source: Box::new(e) }
}

/// Samples the low-resolution clip alone. Returns the clip and the number
/// of denoiser evaluations.
pub fn cascade_base_sample(
    x: &SemanticCondition,
    base: &CascadeStage,
    frames: usize,
    cfg: &CascadeConfig,
) -> Result<(VideoTensor<f32>, usize)> {
    cfg.validate()?;
    let err = stage_error("base");
    let xb = x.resize_nearest(cfg.base_hw, cfg.base_hw);
    let model = CountingModel::new(NetModel::new(base.net, base.params));
    let dims = (frames, base.net.config().in_channels, cfg.base_hw, cfg.base_hw);
    let out = guided_sample(&model, &xb, dims, base.schedule, &base.sampler).map_err(&err)?;
    if (out.height(), out.width()) != (cfg.base_hw, cfg.base_hw) {
        return Err(err(Error::Shape(format!("base output {}x{}", out.height(), out.width()))));
    }
    Ok((out, model.calls()))
}

/// Base stage at `base_hw`, then the super-resolution stage at `target_hw`
/// conditioned on the base output and the map.
pub fn cascade_sample(
    x: &SemanticCondition,
    base: &CascadeStage,
    sr: &CascadeStage,
    frames: usize,
    cfg: &CascadeConfig,
) -> Result<CascadeOutput> {
    let (low, base_calls) = cascade_base_sample(x, base, frames, cfg)?;
    let err = stage_error("super-resolution");
    let channels = sr.net.config().in_channels;
    if sr.net.config().extra_input_channels != low.channels() {
        return Err(err(Error::Config(format!(
            "super-resolution network takes {} extra channels, base clip has {}",
            sr.net.config().extra_input_channels,
            low.channels()
        ))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[sr.sampler.seed, 1]));
    let (k, c) = (low.frames(), low.channels());
    let aug = VideoTensor::randn((k, c, cfg.target_hw, cfg.target_hw), &mut rng);
    let cond = sr_condition_assembly(&low, x, &aug, cfg.sr_noise_aug_level, cfg.target_hw).map_err(&err)?;
    let model = CountingModel::new(NetModel::new(sr.net, sr.params).with_extra(&cond.lowres_up));
    let dims = (frames, channels, cfg.target_hw, cfg.target_hw);
    let output = guided_sample(&model, &cond.condition, dims, sr.schedule, &sr.sampler).map_err(&err)?;
    if (output.height(), output.width()) != (cfg.target_hw, cfg.target_hw) {
        return Err(err(Error::Shape(format!("final output {}x{}", output.height(), output.width()))));
    }
    Ok(CascadeOutput { base: low, output, base_calls, sr_calls: model.calls() })
}

/// Cascade sampling behind the [`VideoGenerator`] interface. The base stage
/// is seeded with the given seed, the super-resolution stage with a seed
/// derived from it.
pub struct CascadeGenerator<'a> {
    pub base: CascadeStage<'a>,
    pub sr: CascadeStage<'a>,
    pub frames: usize,
    pub config: CascadeConfig,
}

impl VideoGenerator for CascadeGenerator<'_> {
    fn generate(&self, x: &SemanticCondition, seed: u64) -> Result<VideoTensor<f32>> {
        let base = self.base.reseeded(seed);
        let sr = self.sr.reseeded(derive_seed(&[seed, 2]));
        Ok(cascade_sample(x, &base, &sr, self.frames, &self.config)?.output)
    }
}
