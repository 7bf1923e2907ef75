//! Gaussian diffusion algebra: the noise schedule, the forward (noising)
//! process in single-step and closed form, the reverse ancestral step and the
//! noise-prediction objective. Everything here is a pure function of its
//! arguments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Element;
use crate::video::VideoTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Which fixed variance the reverse step uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReverseVariance {
    /// Posterior variance `beta_t (1 - abar_{t-1}) / (1 - abar_t)`.
    #[default]
    Posterior,
    /// `beta_t`.
    Beta,
}

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_STEPS: usize = 1000;

/// Per-step constants for `t = 1..=T`. Stored in 64-bit; kernels convert to
/// their element type at use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_var: Vec<f64>,
}

/// A diffusion step index `t` in `1..=T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DiffusionStep(usize);

impl DiffusionStep {
    pub fn new(t: usize, schedule: &NoiseSchedule) -> Result<Self> {
        if t == 0 || t > schedule.steps() {
            return Err(Error::Shape(format!("diffusion step {t} outside 1..={}", schedule.steps())));
        }
        Ok(Self(t))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

/// Linear beta schedule from `beta_start` to `beta_end` over `steps` steps.
pub fn build_schedule(steps: usize, kind: ScheduleKind, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "betas must satisfy 0 < start <= end < 1, got start={beta_start} end={beta_end}"
        )));
    }
    let betas = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    NoiseSchedule::from_betas(kind, betas)
}

impl NoiseSchedule {
    /// Builds the cumulative and posterior tables from explicit betas.
    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let posterior_var = betas
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                b * (1.0 - prev) / (1.0 - alpha_bars[i])
            })
            .collect();
        Ok(Self { kind, betas, alpha_bars, posterior_var })
    }

    /// The common convention for shorter chains: the default 1000-step range
    /// scaled by `1000 / steps`, so `abar_T` stays near zero.
    pub fn linear_scaled(steps: usize) -> Result<Self> {
        let scale = DEFAULT_STEPS as f64 / steps.max(1) as f64;
        build_schedule(steps, ScheduleKind::Linear, DEFAULT_BETA_START * scale, (DEFAULT_BETA_END * scale).min(0.999))
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_variances(&self) -> &[f64] {
        &self.posterior_var
    }

    pub fn beta(&self, t: DiffusionStep) -> f64 {
        self.betas[t.0 - 1]
    }

    pub fn alpha_bar(&self, t: DiffusionStep) -> f64 {
        self.alpha_bars[t.0 - 1]
    }

    /// `abar_{t-1}` with `abar_0 = 1`.
    pub fn alpha_bar_prev(&self, t: DiffusionStep) -> f64 {
        if t.0 == 1 {
            1.0
        } else {
            self.alpha_bars[t.0 - 2]
        }
    }

    pub fn posterior_variance(&self, t: DiffusionStep) -> f64 {
        self.posterior_var[t.0 - 1]
    }

    pub fn reverse_variance(&self, t: DiffusionStep, kind: ReverseVariance) -> f64 {
        match kind {
            ReverseVariance::Posterior => self.posterior_variance(t),
            ReverseVariance::Beta => self.beta(t),
        }
    }

    /// Coefficients `(c0, ct)` of the posterior mean
    /// `mu = c0 * y0 + ct * y_t`.
    pub fn posterior_mean_coefs(&self, t: DiffusionStep) -> (f64, f64) {
        let beta = self.beta(t);
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar_prev(t);
        (ab_prev.sqrt() * beta / (1.0 - ab), (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab))
    }

    /// Stable digest of the schedule constants.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for b in &self.betas {
            h.update(b.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

fn check_pair<F: Element>(a: &VideoTensor<F>, b: &VideoTensor<F>) -> Result<()> {
    a.ensure_same_dims(b)
}

/// Closed-form forward marginal: `sqrt(abar_t) y0 + sqrt(1 - abar_t) eps`.
pub fn q_sample<F: Element>(
    y0: &VideoTensor<F>,
    t: DiffusionStep,
    eps: &VideoTensor<F>,
    schedule: &NoiseSchedule,
) -> Result<VideoTensor<F>> {
    check_pair(y0, eps)?;
    let ab = schedule.alpha_bar(t);
    Ok(q_sample_with(y0, eps, ab))
}

pub(crate) fn q_sample_with<F: Element>(y0: &VideoTensor<F>, eps: &VideoTensor<F>, alpha_bar: f64) -> VideoTensor<F> {
    let (a, s) = (F::of(alpha_bar.sqrt()), F::of((1.0 - alpha_bar).sqrt()));
    y0.zip_map(eps, |y, e| a * y + s * e).expect("dims checked by caller")
}

/// One forward transition: `sqrt(1 - beta_t) y_{t-1} + sqrt(beta_t) eps`.
pub fn q_forward_step<F: Element>(
    y_prev: &VideoTensor<F>,
    t: DiffusionStep,
    eps: &VideoTensor<F>,
    schedule: &NoiseSchedule,
) -> Result<VideoTensor<F>> {
    check_pair(y_prev, eps)?;
    let beta = schedule.beta(t);
    let (a, s) = (F::of((1.0 - beta).sqrt()), F::of(beta.sqrt()));
    y_prev.zip_map(eps, |y, e| a * y + s * e)
}

/// Inverts the forward marginal given a noise estimate:
/// `(y_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`, optionally clamped to
/// `[-1, 1]`.
pub fn predict_y0_from_eps<F: Element>(
    y_t: &VideoTensor<F>,
    eps_hat: &VideoTensor<F>,
    t: DiffusionStep,
    schedule: &NoiseSchedule,
    clip_denoised: bool,
) -> Result<VideoTensor<F>> {
    check_pair(y_t, eps_hat)?;
    let ab = schedule.alpha_bar(t);
    let inv = F::of(1.0 / ab.sqrt());
    let s = F::of((1.0 - ab).sqrt());
    let one = F::one();
    Ok(y_t.zip_map(eps_hat, |y, e| {
        let v = (y - s * e) * inv;
        if clip_denoised {
            v.max(-one).min(one)
        } else {
            v
        }
    })?)
}

/// Options for [`p_step`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReverseOptions {
    pub clip_denoised: bool,
    pub variance: ReverseVariance,
}

impl Default for ReverseOptions {
    fn default() -> Self {
        Self { clip_denoised: true, variance: ReverseVariance::Posterior }
    }
}

/// One ancestral reverse step `y_t -> y_{t-1}`: posterior mean from the
/// predicted clean clip plus fixed-variance noise. At `t = 1` no noise is
/// added and `noise` is ignored.
pub fn p_step<F: Element>(
    y_t: &VideoTensor<F>,
    eps_hat: &VideoTensor<F>,
    t: DiffusionStep,
    schedule: &NoiseSchedule,
    noise: &VideoTensor<F>,
    options: ReverseOptions,
) -> Result<VideoTensor<F>> {
    check_pair(y_t, noise)?;
    let y0_hat = predict_y0_from_eps(y_t, eps_hat, t, schedule, options.clip_denoised)?;
    let (c0, ct) = schedule.posterior_mean_coefs(t);
    let (c0, ct) = (F::of(c0), F::of(ct));
    let mean = y0_hat.zip_map(y_t, |y0, yt| c0 * y0 + ct * yt)?;
    if t.get() == 1 {
        return Ok(mean);
    }
    let sigma = F::of(schedule.reverse_variance(t, options.variance).sqrt());
    mean.zip_map(noise, |m, z| m + sigma * z)
}

/// Mean over all elements of `(eps - eps_hat)^2`.
pub fn training_loss<F: Element>(eps_hat: &VideoTensor<F>, eps: &VideoTensor<F>) -> Result<F> {
    check_pair(eps_hat, eps)?;
    let n = F::of(eps.data().len() as f64);
    Ok(eps_hat.data().iter().zip(eps.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<F>() / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn step(t: usize, s: &NoiseSchedule) -> DiffusionStep {
        DiffusionStep::new(t, s).unwrap()
    }

    fn four_step() -> NoiseSchedule {
        NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.1, 0.2, 0.3, 0.4]).unwrap()
    }

    fn scalar_video(v: Vec<f64>) -> VideoTensor<f64> {
        let n = v.len();
        VideoTensor::new((1, 1, 1, n), v).unwrap()
    }

    #[test]
    fn default_schedule_is_strictly_decreasing() {
        let s = build_schedule(1000, ScheduleKind::Linear, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        assert_eq!(s.steps(), 1000);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        let ab = s.alpha_bars();
        assert!(0.0 < ab[999] && ab[999] < ab[0] && ab[0] < 1.0);
        assert!(s.posterior_variances().iter().all(|&v| v >= 0.0));
        assert_eq!(s.posterior_variances()[0], 0.0);
    }

    #[test]
    fn constant_beta_closed_form() {
        let s = build_schedule(3, ScheduleKind::Linear, 0.1, 0.1).unwrap();
        for (got, want) in s.alpha_bars().iter().zip([0.9, 0.81, 0.729]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn explicit_betas_running_product() {
        let s = four_step();
        for (got, want) in s.alpha_bars().iter().zip([0.9, 0.72, 0.504, 0.3024]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn schedule_rejects_invalid_ranges() {
        assert!(matches!(build_schedule(0, ScheduleKind::Linear, 1e-4, 0.02), Err(Error::Config(_))));
        assert!(build_schedule(10, ScheduleKind::Linear, 0.0, 0.02).is_err());
        assert!(build_schedule(10, ScheduleKind::Linear, 0.03, 0.02).is_err());
        assert!(build_schedule(10, ScheduleKind::Linear, 0.01, 1.0).is_err());
        assert!(DiffusionStep::new(0, &four_step()).is_err());
        assert!(DiffusionStep::new(5, &four_step()).is_err());
    }

    #[test]
    fn schedule_consistency_ratio() {
        let s = build_schedule(1000, ScheduleKind::Linear, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        let mut prev = 1.0;
        for (ab, b) in s.alpha_bars().iter().zip(s.betas()) {
            assert_eq!(*ab, prev * (1.0 - b));
            prev = *ab;
        }
    }

    #[test]
    fn q_sample_limits() {
        let s = four_step();
        let y0 = scalar_video(vec![0.5, -0.25, 1.0]);
        let zero = VideoTensor::zeros(y0.dims());
        let out = q_sample(&y0, step(2, &s), &zero, &s).unwrap();
        let a = 0.72f64.sqrt();
        for (o, y) in out.data().iter().zip(y0.data()) {
            assert!((*o - a * y).abs() < 1e-12);
        }
        let eps = scalar_video(vec![0.3, -1.2, 2.0]);
        assert_eq!(q_sample_with(&y0, &eps, 0.0), eps);
        let bad = scalar_video(vec![0.0; 2]);
        assert!(matches!(q_sample(&y0, step(1, &s), &bad, &s), Err(Error::Shape(_))));
    }

    #[test]
    fn q_sample_monte_carlo_moments() {
        let s = four_step();
        let t = step(2, &s);
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y0 = VideoTensor::<f64>::full((1, 1, 1, n), 0.5);
        let eps = VideoTensor::randn(y0.dims(), &mut rng);
        let out = q_sample(&y0, t, &eps, &s).unwrap();
        let mean = out.data().iter().sum::<f64>() / n as f64;
        let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want_mean = 0.72f64.sqrt() * 0.5;
        let want_var = 0.28;
        assert!((want_mean - 0.4243).abs() < 1e-4);
        assert!((mean - want_mean).abs() < 4.0 * (want_var / n as f64).sqrt());
        assert!((var - want_var).abs() < 4.0 * want_var * (2.0 / (n - 1) as f64).sqrt());
    }

    #[test]
    fn forward_step_limits() {
        let s = NoiseSchedule::from_betas(ScheduleKind::Linear, vec![1e-300]).unwrap();
        let y = scalar_video(vec![0.3, -0.7]);
        let eps = scalar_video(vec![5.0, -5.0]);
        let out = q_forward_step(&y, step(1, &s), &eps, &s).unwrap();
        assert!(out.max_abs_diff(&y) < 1e-100);
        let s = four_step();
        let zero = VideoTensor::zeros(y.dims());
        let out = q_forward_step(&y, step(3, &s), &zero, &s).unwrap();
        assert_eq!(out, y.map(|v| 0.7f64.sqrt() * v));
    }

    #[test]
    fn inversion_recovers_clean_clip() {
        let s = four_step();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y0 = VideoTensor::<f64>::randn((2, 1, 3, 3), &mut rng).map(|v| v.tanh());
        let eps = VideoTensor::randn(y0.dims(), &mut rng);
        for t in 1..=4 {
            let yt = q_sample(&y0, step(t, &s), &eps, &s).unwrap();
            let back = predict_y0_from_eps(&yt, &eps, step(t, &s), &s, false).unwrap();
            assert!(back.max_abs_diff(&y0) < 1e-12);
        }
        let yt = y0.map(|v| 0.72f64.sqrt() * v);
        let back = predict_y0_from_eps(&yt, &VideoTensor::zeros(y0.dims()), step(2, &s), &s, false).unwrap();
        assert!(back.max_abs_diff(&y0) < 1e-12);
    }

    #[test]
    fn inversion_clamps_when_enabled() {
        let s = four_step();
        let t = step(1, &s);
        let y0 = scalar_video(vec![1.7, -3.0, 0.2]);
        let yt = y0.map(|v| 0.9f64.sqrt() * v);
        let zero = VideoTensor::zeros(y0.dims());
        let clipped = predict_y0_from_eps(&yt, &zero, t, &s, true).unwrap();
        assert_eq!(clipped.data()[0], 1.0);
        assert_eq!(clipped.data()[1], -1.0);
        assert!((clipped.data()[2] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn final_step_ignores_noise_and_recovers_y0() {
        let s = four_step();
        let t = step(1, &s);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y0 = VideoTensor::<f64>::randn((1, 1, 4, 4), &mut rng).map(|v| 0.5 * v.tanh());
        let eps = VideoTensor::randn(y0.dims(), &mut rng);
        let y1 = q_sample(&y0, t, &eps, &s).unwrap();
        let opts = ReverseOptions::default();
        let a = p_step(&y1, &eps, t, &s, &VideoTensor::randn(y0.dims(), &mut rng), opts).unwrap();
        let b = p_step(&y1, &eps, t, &s, &VideoTensor::zeros(y0.dims()), opts).unwrap();
        assert_eq!(a, b);
        assert!(a.max_abs_diff(&y0) < 1e-5);
    }

    /// Independent route: condition the joint Gaussian of
    /// `(y_{t-1}, y_t) | y0` on `y_t`.
    #[test]
    fn posterior_coefficients_match_gaussian_conditioning() {
        let s = four_step();
        let t = step(3, &s);
        let (c0, ct) = s.posterior_mean_coefs(t);
        let ab_prev: f64 = 0.72;
        let beta: f64 = 0.3;
        let ab = ab_prev * (1.0 - beta);
        let var_prev = 1.0 - ab_prev;
        let cov = (1.0 - beta).sqrt() * var_prev;
        let var_t = (1.0 - beta) * var_prev + beta;
        let gain = cov / var_t;
        let want_ct = gain;
        let want_c0 = ab_prev.sqrt() - gain * f64::sqrt(ab);
        let want_var = var_prev - cov * cov / var_t;
        assert!((ct - want_ct).abs() < 1e-12, "{ct} vs {want_ct}");
        assert!((c0 - want_c0).abs() < 1e-12, "{c0} vs {want_c0}");
        assert!((s.posterior_variance(t) - want_var).abs() < 1e-12);
    }

    #[test]
    fn p_step_is_deterministic() {
        let s = four_step();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = (2, 1, 3, 3);
        let (y, e, z) = (
            VideoTensor::<f32>::randn(dims, &mut rng),
            VideoTensor::randn(dims, &mut rng),
            VideoTensor::randn(dims, &mut rng),
        );
        let a = p_step(&y, &e, step(3, &s), &s, &z, ReverseOptions::default()).unwrap();
        let b = p_step(&y, &e, step(3, &s), &s, &z, ReverseOptions::default()).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn loss_examples() {
        let eps = scalar_video(vec![1.0, 2.0]);
        assert_eq!(training_loss(&eps, &eps).unwrap(), 0.0);
        assert_eq!(training_loss(&scalar_video(vec![0.0, 0.0]), &eps).unwrap(), 2.5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let big = VideoTensor::<f64>::randn((1, 1, 1000, 1000), &mut rng);
        let l = training_loss(&VideoTensor::zeros(big.dims()), &big).unwrap();
        assert!((l - 1.0).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn loss_symmetric_and_nonnegative(a in prop::collection::vec(-3.0f64..3.0, 1..32), seed in 0u64..1000) {
            let n = a.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = VideoTensor::<f64>::randn((1, 1, 1, n), &mut rng);
            let a = scalar_video(a);
            let ab = training_loss(&a, &b).unwrap();
            let ba = training_loss(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab > 0.0);
            prop_assert_eq!(training_loss(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn inversion_round_trip(seed in 0u64..500, t in 1usize..=1000) {
            let s = build_schedule(1000, ScheduleKind::Linear, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y0 = VideoTensor::<f64>::randn((2, 1, 2, 2), &mut rng).map(f64::tanh);
            let eps = VideoTensor::randn(y0.dims(), &mut rng);
            let t = DiffusionStep::new(t, &s).unwrap();
            let yt = q_sample(&y0, t, &eps, &s).unwrap();
            let back = predict_y0_from_eps(&yt, &eps, t, &s, false).unwrap();
            prop_assert!(back.max_abs_diff(&y0) < 1e-5);
        }
    }
}
