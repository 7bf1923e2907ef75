//! Optimization of the noise-prediction objective with condition dropout,
//! Adam, gradient clipping, weight averaging and checkpointing.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::cascade::{downsample_video, upsample_video, CascadeConfig};
use crate::dataset::{resample_frames, PatientRecord};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::net::{Denoiser, DenoiserParameters};
use crate::seed::derive_seed;
use crate::tensor::{Element, Tensor};
use crate::video::{SemanticCondition, VideoTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    #[default]
    Ddpm,
    CascadeBase,
    CascadeSr,
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Self::Ddpm),
            "cascade_base" => Ok(Self::CascadeBase),
            "cascade_sr" => Ok(Self::CascadeSr),
            o => Err(Error::Config(format!("unknown variant {o:?} (expected ddpm|cascade_base|cascade_sr)"))),
        }
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ddpm => "ddpm",
            Self::CascadeBase => "cascade_base",
            Self::CascadeSr => "cascade_sr",
        })
    }
}

/// How the learning rate evolves over `max_steps`, after any warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `learning_rate` down to `min_learning_rate` at `max_steps`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Peak learning rate.
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    /// Linear ramp from 0 over this many steps.
    pub warmup_steps: u64,
    /// Floor of the cosine schedule.
    pub min_learning_rate: f64,
    /// Examples per optimizer step.
    pub batch_size: usize,
    /// Examples per forward pass; gradients are accumulated up to `batch_size`.
    pub micro_batch: usize,
    /// Required; 0 means unset.
    pub max_steps: u64,
    pub cond_drop_prob: f64,
    /// Weight averaging; `"off"` in config files disables it.
    #[serde(with = "number_or_off")]
    pub ema_decay: Option<f64>,
    /// Global gradient-norm limit; `"off"` disables clipping.
    #[serde(with = "number_or_off")]
    pub grad_clip_norm: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Frames per clip `K`.
    pub frames: usize,
    pub variant: ModelVariant,
    pub cascade: CascadeConfig,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            lr_schedule: LrSchedule::Constant,
            warmup_steps: 0,
            min_learning_rate: 0.0,
            batch_size: 24,
            micro_batch: 4,
            max_steps: 0,
            cond_drop_prob: 0.1,
            ema_decay: Some(0.9999),
            grad_clip_norm: Some(1.0),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            frames: 16,
            variant: ModelVariant::Ddpm,
            cascade: CascadeConfig::default(),
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = vec![];
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            p.push(format!("learning_rate must be finite and positive, got {}", self.learning_rate));
        } else if !(0.0..=self.learning_rate).contains(&self.min_learning_rate) {
            p.push(format!("min_learning_rate must lie in [0, learning_rate], got {}", self.min_learning_rate));
        }
        if self.max_steps > 0 && self.warmup_steps >= self.max_steps {
            p.push(format!("warmup_steps {} must be below max_steps {}", self.warmup_steps, self.max_steps));
        }
        if self.batch_size == 0 {
            p.push("batch_size must be at least 1".into());
        }
        if self.micro_batch == 0 {
            p.push("micro_batch must be at least 1".into());
        }
        if self.max_steps == 0 {
            p.push("max_steps must be set explicitly".into());
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            p.push(format!("cond_drop_prob must lie in [0, 1], got {}", self.cond_drop_prob));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                p.push(format!("ema_decay must lie in [0, 1), got {d}"));
            }
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                p.push(format!("grad_clip_norm must be positive, got {c}"));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            p.push("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.frames < 2 {
            p.push(format!("frames must be at least 2, got {}", self.frames));
        }
        if self.checkpoint_every == 0 {
            p.push("checkpoint_every must be at least 1".into());
        }
        if self.variant != ModelVariant::Ddpm {
            p.extend(self.cascade.problems());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems() {
            p if p.is_empty() => Ok(()),
            p => Err(Error::Config(p.join("; "))),
        }
    }

    /// Learning rate of optimizer step `step` (1-based).
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        if step <= self.warmup_steps {
            return self.learning_rate * step as f64 / self.warmup_steps as f64;
        }
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let span = self.max_steps.saturating_sub(self.warmup_steps).max(1) as f64;
                let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
                let (hi, lo) = (self.learning_rate, self.min_learning_rate);
                lo + (hi - lo) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Optional numeric knobs written as a number or the string `"off"`, so a
/// disabled value survives a round trip through formats without null.
mod number_or_off {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str("off"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Knob {
            Number(f64),
            Word(String),
        }
        match Knob::deserialize(d)? {
            Knob::Number(x) => Ok(Some(x)),
            Knob::Word(w) if w == "off" => Ok(None),
            Knob::Word(w) => Err(D::Error::custom(format!("expected a number or \"off\", got {w:?}"))),
        }
    }
}

/// With probability `p` the null condition, otherwise `x`.
pub fn drop_condition<R: Rng + ?Sized>(x: &SemanticCondition, p: f64, rng: &mut R) -> SemanticCondition {
    if rng.gen::<f64>() < p {
        x.null_like()
    } else {
        x.clone()
    }
}

/// Uniform diffusion step in `1..=steps`.
pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R, steps: usize) -> usize {
    rng.gen_range(1..=steps)
}

/// One training clip with its map (and, for super-resolution, the
/// low-resolution clip it is generated from).
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub clip: VideoTensor<f32>,
    pub condition: SemanticCondition,
    pub lowres: Option<VideoTensor<f32>>,
}

/// Resamples records to `cfg.frames` and resizes them for the variant.
pub fn prepare_examples(records: &[PatientRecord], cfg: &TrainConfig) -> Result<Vec<TrainingExample>> {
    records
        .iter()
        .map(|r| {
            let clip = resample_frames(r, cfg.frames)?;
            let x = r.condition();
            let c = &cfg.cascade;
            Ok(match cfg.variant {
                ModelVariant::Ddpm => TrainingExample { clip, condition: x, lowres: None },
                ModelVariant::CascadeBase => TrainingExample {
                    clip: resize_square(&clip, c.base_hw)?,
                    condition: x.resize_nearest(c.base_hw, c.base_hw),
                    lowres: None,
                },
                ModelVariant::CascadeSr => {
                    let clip = resize_square(&clip, c.target_hw)?;
                    let lowres = Some(downsample_video(&clip, c.base_hw)?);
                    TrainingExample { clip, condition: x.resize_nearest(c.target_hw, c.target_hw), lowres }
                }
            })
        })
        .collect()
}

fn resize_square(v: &VideoTensor<f32>, hw: usize) -> Result<VideoTensor<f32>> {
    if (v.height(), v.width()) == (hw, hw) {
        Ok(v.clone())
    } else if hw <= v.height().min(v.width()) {
        downsample_video(v, hw)
    } else {
        upsample_video(v, hw)
    }
}

/// Everything random about one micro-batch, drawn ahead of the forward pass.
#[derive(Debug, Clone)]
pub struct TrainBatch<F: Element> {
    /// `[N, K, H, W, C]` noised clips.
    pub noisy: Tensor<F>,
    /// The noise that was added, same shape.
    pub eps: Tensor<F>,
    /// `[N, 1, H, W, C_lab]`, zeros where the condition was dropped.
    pub conditions: Tensor<F>,
    pub steps: Vec<usize>,
    pub extra: Option<Tensor<F>>,
    pub dropped: usize,
}

/// Draws a micro-batch from `examples` at positions `picks`.
pub fn build_batch<F: Element, R: Rng + ?Sized>(
    examples: &[TrainingExample],
    picks: &[usize],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainBatch<F>> {
    let mut noisy = vec![];
    let mut eps_all = vec![];
    let mut conds = vec![];
    let mut extra = vec![];
    let mut steps = vec![];
    let mut dropped = 0;
    let mut dims = None;
    for &i in picks {
        let ex = &examples[i];
        let clip: VideoTensor<F> = ex.clip.cast();
        if *dims.get_or_insert(clip.dims()) != clip.dims() {
            return Err(Error::Shape("training clips differ in shape".into()));
        }
        let t = sample_timestep(rng, schedule.steps());
        let eps = VideoTensor::<F>::randn(clip.dims(), rng);
        let ab = schedule.alpha_bars()[t - 1];
        let y_t = crate::diffusion::q_sample_with(&clip, &eps, ab);
        let x = drop_condition(&ex.condition, cfg.cond_drop_prob, rng);
        dropped += usize::from(x.is_null());
        if let Some(low) = &ex.lowres {
            let up: VideoTensor<F> = upsample_video(&low.cast(), clip.height())?;
            let aug = VideoTensor::<F>::randn(up.dims(), rng);
            let a = F::of(cfg.cascade.sr_noise_aug_level);
            extra.extend_from_slice(up.zip_map(&aug, |u, e| u + a * e)?.to_channel_last().data());
        }
        noisy.extend_from_slice(y_t.to_channel_last().data());
        eps_all.extend_from_slice(eps.to_channel_last().data());
        conds.extend_from_slice(x.to_channel_last::<F>().data());
        steps.push(t);
    }
    let (k, c, h, w) = dims.ok_or_else(|| Error::Shape("empty batch".into()))?;
    let n = picks.len();
    let labels = examples[picks[0]].condition.classes();
    let extra = if extra.is_empty() { None } else { Some(Tensor::from_vec(&[n, k, h, w, c], extra)?) };
    Ok(TrainBatch {
        noisy: Tensor::from_vec(&[n, k, h, w, c], noisy)?,
        eps: Tensor::from_vec(&[n, k, h, w, c], eps_all)?,
        conditions: Tensor::from_vec(&[n, 1, h, w, labels], conds)?,
        steps,
        extra,
        dropped,
    })
}

/// Mean squared noise-prediction error of one batch and its parameter gradients.
pub fn loss_and_grads<F: Element>(
    net: &Denoiser,
    params: &DenoiserParameters<F>,
    batch: &TrainBatch<F>,
) -> Result<(F, DenoiserParameters<F>)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let x = g.input(batch.noisy.clone());
    let extra = batch.extra.clone().map(|e| g.input(e));
    let out = net.forward_graph(&mut g, &p, x, &batch.conditions, &batch.steps, extra)?;
    let target = g.input(batch.eps.clone());
    let loss = g.mse(out, target);
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss);
    let mut result = params.clone();
    for (t, v) in result.tensors_mut().iter_mut().zip(p.vars()) {
        *t = grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape()));
    }
    Ok((value, result))
}

/// Parameters plus optimizer and averaging state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<F: Element = f32> {
    pub params: DenoiserParameters<F>,
    pub ema: Option<DenoiserParameters<F>>,
    pub adam_m: Vec<Tensor<F>>,
    pub adam_v: Vec<Tensor<F>>,
    /// Completed optimizer steps.
    pub step: u64,
}

impl<F: Element> TrainState<F> {
    pub fn new(params: DenoiserParameters<F>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<_> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { ema: cfg.ema_decay.map(|_| params.clone()), adam_m: zeros.clone(), adam_v: zeros, params, step: 0 }
    }

    pub fn init(net: &Denoiser, cfg: &TrainConfig) -> Self {
        Self::new(net.init_params(derive_seed(&[cfg.seed, 0x1417])), cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub learning_rate: f64,
    pub timesteps: Vec<usize>,
    pub dropped: usize,
}

/// Generator for the randomness of optimizer step `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[seed, step, 0x57E9]))
}

/// `ema + (1 - d) (theta - ema)`, i.e. `d ema + (1 - d) theta`.
pub fn ema_update<F: Element>(ema: &mut DenoiserParameters<F>, params: &DenoiserParameters<F>, decay: f64) {
    let w = F::of(1.0 - decay);
    for (e, p) in ema.tensors_mut().iter_mut().zip(params.tensors()) {
        for (a, &b) in e.data_mut().iter_mut().zip(p.data()) {
            *a = *a + w * (b - *a);
        }
    }
}

/// One optimizer step over `cfg.batch_size` examples, accumulated in
/// micro-batches of `cfg.micro_batch`.
pub fn train_step<F: Element>(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    examples: &[TrainingExample],
    state: &mut TrainState<F>,
) -> Result<StepReport> {
    if examples.is_empty() {
        return Err(Error::Training("no training examples".into()));
    }
    let step = state.step + 1;
    let mut rng = step_rng(cfg.seed, step);
    let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..examples.len())).collect();
    let mut total = 0.0f64;
    let mut grads: Option<Vec<Tensor<F>>> = None;
    let mut timesteps = vec![];
    let mut dropped = 0;
    for chunk in picks.chunks(cfg.micro_batch) {
        let batch = build_batch::<F, _>(examples, chunk, schedule, cfg, &mut rng)?;
        let (loss, g) = loss_and_grads(net, &state.params, &batch)?;
        let w = chunk.len() as f64 / picks.len() as f64;
        total += w * loss.as_f64();
        timesteps.extend_from_slice(&batch.steps);
        dropped += batch.dropped;
        let wf = F::of(w);
        match &mut grads {
            None => grads = Some(g.tensors().iter().map(|t| t.map(|v| v * wf)).collect()),
            Some(acc) => {
                for (a, t) in acc.iter_mut().zip(g.tensors()) {
                    for (x, &y) in a.data_mut().iter_mut().zip(t.data()) {
                        *x = *x + wf * y;
                    }
                }
            }
        }
    }
    let mut grads = grads.expect("at least one micro-batch");
    let norm = grads.iter().flat_map(|t| t.data()).map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    if !total.is_finite() || !norm.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss {total} / gradient norm {norm} at step {step} (timesteps {timesteps:?}, parameter norm {:.4e})",
            state.params.tensors().iter().flat_map(|t| t.data()).map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
        )));
    }
    if let Some(c) = cfg.grad_clip_norm {
        if norm > c {
            let s = F::of(c / norm);
            for t in &mut grads {
                t.data_mut().iter_mut().for_each(|v| *v = *v * s);
            }
        }
    }
    adam_update(state, &grads, cfg, step);
    if let (Some(ema), Some(d)) = (&mut state.ema, cfg.ema_decay) {
        ema_update(ema, &state.params, d);
    }
    state.step = step;
    Ok(StepReport { step, loss: total, grad_norm: norm, learning_rate: cfg.learning_rate_at(step), timesteps, dropped })
}

fn adam_update<F: Element>(state: &mut TrainState<F>, grads: &[Tensor<F>], cfg: &TrainConfig, step: u64) {
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let lr = F::of(cfg.learning_rate_at(step) * c2.sqrt() / c1);
    let (b1f, b2f) = (F::of(b1), F::of(b2));
    let (o1, o2) = (F::of(1.0 - b1), F::of(1.0 - b2));
    let eps = F::of(cfg.adam_eps * c2.sqrt());
    for (((p, m), v), g) in state.params.tensors_mut().iter_mut().zip(&mut state.adam_m).zip(&mut state.adam_v).zip(grads) {
        for (((pi, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            *mi = b1f * *mi + o1 * gi;
            *vi = b2f * *vi + o2 * gi * gi;
            *pi = *pi - lr * *mi / (vi.sqrt() + eps);
        }
    }
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    #[serde(default)]
    pub learning_rate: f64,
    pub examples_per_sec: f64,
}

pub const LATEST_CHECKPOINT: &str = "checkpoint_latest.ckpt";
pub const METRIC_LOG: &str = "train_log.jsonl";

pub fn latest_checkpoint(out_dir: &Path) -> PathBuf {
    out_dir.join(LATEST_CHECKPOINT)
}

/// Reads the metric log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Trains until `cfg.max_steps`, writing `train_log.jsonl` and
/// `checkpoint_latest.ckpt` (every `checkpoint_every` steps and at the end)
/// into `out_dir`. With `resume`, continues from the latest checkpoint
/// there; the log is cut back to the checkpoint's step so the curve stays
/// consistent.
pub fn run_training(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    examples: &[TrainingExample],
    out_dir: &Path,
    resume: bool,
) -> Result<Checkpoint> {
    cfg.validate()?;
    crate::io::create_dir(out_dir)?;
    let ckpt_path = latest_checkpoint(out_dir);
    let log_path = out_dir.join(METRIC_LOG);
    let mut state = if resume && ckpt_path.exists() {
        let ck = load_checkpoint(&ckpt_path)?;
        ck.ensure_compatible(net.config(), schedule)?;
        log::info!("resuming from step {}", ck.step);
        ck.into_state(cfg)
    } else {
        TrainState::init(net, cfg)
    };
    let kept: Vec<LogRecord> = if log_path.exists() && state.step > 0 {
        read_log(&log_path)?.into_iter().filter(|r| r.step <= state.step).collect()
    } else {
        vec![]
    };
    let mut text = String::new();
    for r in &kept {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    crate::io::atomic_write(&log_path, text.as_bytes())?;
    let mut log = OpenOptions::new().append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let save = |state: &TrainState<f32>| save_checkpoint(&Checkpoint::from_state(net.config(), cfg, schedule, state), &ckpt_path);
    while state.step < cfg.max_steps {
        let started = Instant::now();
        let report = train_step(net, schedule, cfg, examples, &mut state)?;
        let rec = LogRecord {
            step: report.step,
            loss: report.loss,
            grad_norm: report.grad_norm,
            learning_rate: report.learning_rate,
            examples_per_sec: cfg.batch_size as f64 / started.elapsed().as_secs_f64().max(1e-9),
        };
        writeln!(log, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&log_path, e))?;
        if report.step % 50 == 0 || report.step == 1 {
            log::info!("step {} loss {:.5} grad-norm {:.3}", report.step, report.loss, report.grad_norm);
        }
        if state.step % cfg.checkpoint_every == 0 {
            save(&state)?;
        }
    }
    save(&state)?;
    Ok(Checkpoint::from_state(net.config(), cfg, schedule, &state))
}
