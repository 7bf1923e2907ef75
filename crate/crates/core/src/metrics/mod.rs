//! Evaluation: SSIM, FID / FVD over pluggable extractors, and the per-map
//! pairing protocol that ties them to a generator.

mod features;
mod frechet;
mod ssim;

pub use features::{split_frames, CommandExtractor, FrameExtractor, ToyFrameExtractor, ToyVideoExtractor, VideoExtractor};
pub use frechet::{
    frechet_distance, frechet_distance_detailed, moments_distance, FrechetResult, GaussianMoments, EIGEN_CLIP,
    REGULARIZATION_EPS,
};
pub use ssim::{
    gaussian_window, ssim_frame, ssim_video, ssim_video_pairs, video_frames, GrayFrame, PairedSsim, SSIM_C1, SSIM_C2,
    SSIM_SIGMA, SSIM_WINDOW,
};

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{batch_sample, GeneratedVideo, VideoGenerator};
use crate::video::{SemanticCondition, VideoTensor};

/// Embeds `items` on all available cores; output order matches input order.
fn embed_all<T: Sync>(items: &[T], f: impl Fn(&T) -> Result<Vec<f64>> + Sync) -> Result<Vec<Vec<f64>>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<_>>>())).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("embedding worker panicked")?);
        }
        Ok(out)
    })
}

/// FID between two frame populations (each item a single-frame clip).
pub fn fid_compute(real: &[VideoTensor<f32>], generated: &[VideoTensor<f32>], ex: &dyn FrameExtractor) -> Result<FrechetResult> {
    let a = GaussianMoments::fit(&embed_all(real, |f| ex.embed_frame(f))?)?;
    let b = GaussianMoments::fit(&embed_all(generated, |f| ex.embed_frame(f))?)?;
    moments_distance(&a, &b)
}

/// FVD between two clip populations.
pub fn fvd_compute(real: &[VideoTensor<f32>], generated: &[VideoTensor<f32>], ex: &dyn VideoExtractor) -> Result<FrechetResult> {
    let a = GaussianMoments::fit(&embed_all(real, |v| ex.embed_video(v))?)?;
    let b = GaussianMoments::fit(&embed_all(generated, |v| ex.embed_video(v))?)?;
    moments_distance(&a, &b)
}

/// One evaluation map with the real clip annotated by it.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub map_id: String,
    pub condition: SemanticCondition,
    pub real: VideoTensor<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub n_per_map: usize,
    pub base_seed: u64,
    /// Row labels for the results table.
    pub condition_label: String,
    pub model_label: String,
    pub config_fingerprint: String,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            n_per_map: 10,
            base_seed: 0,
            condition_label: "Seg. map".into(),
            model_label: "DDPM+SPADE".into(),
            config_fingerprint: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub condition: String,
    pub model: String,
    pub frames: usize,
    pub fid: f64,
    pub fvd: f64,
    pub mean_ssim: f64,
    pub ssim_comparisons: usize,
    pub n_maps: usize,
    pub n_real: usize,
    pub n_generated: usize,
    pub frame_extractor: String,
    pub video_extractor: String,
    pub fid_regularized: bool,
    pub fvd_regularized: bool,
    pub config_fingerprint: String,
}

impl MetricsReport {
    pub fn problems(&self) -> Vec<String> {
        let mut p = vec![];
        if self.n_real == 0 || self.n_generated == 0 {
            p.push("empty real or generated set".to_string());
        }
        for (name, v) in [("fid", self.fid), ("fvd", self.fvd), ("mean_ssim", self.mean_ssim)] {
            if !v.is_finite() {
                p.push(format!("{name} is not finite"));
            }
        }
        p
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOutput {
    pub report: MetricsReport,
    pub videos: Vec<GeneratedVideo>,
}

/// Samples `n_per_map` clips per map, then scores them: FID over all
/// frames, FVD over whole clips, SSIM of each clip against the real clip of
/// its map.
pub fn evaluate_suite<G: VideoGenerator + ?Sized>(
    generator: &G,
    items: &[EvalItem],
    cfg: &SuiteConfig,
    frame_ex: &dyn FrameExtractor,
    video_ex: &dyn VideoExtractor,
) -> Result<SuiteOutput> {
    if items.is_empty() {
        return Err(Error::Metric("no evaluation maps".into()));
    }
    let mut ids = std::collections::BTreeSet::new();
    if let Some(d) = items.iter().find(|i| !ids.insert(i.map_id.as_str())) {
        return Err(Error::Metric(format!("duplicate map id {}", d.map_id)));
    }
    let conditions: Vec<SemanticCondition> = items.iter().map(|i| i.condition.clone()).collect();
    let videos = batch_sample(generator, &conditions, cfg.n_per_map, cfg.base_seed)?;
    let real: Vec<VideoTensor<f32>> = items.iter().map(|i| i.real.clone()).collect();
    let generated: Vec<VideoTensor<f32>> = videos.iter().map(|g| g.video.clone()).collect();
    let real_frames: Vec<_> = real.iter().flat_map(split_frames).collect();
    let gen_frames: Vec<_> = generated.iter().flat_map(split_frames).collect();
    let fid = fid_compute(&real_frames, &gen_frames, frame_ex)?;
    let fvd = fvd_compute(&real, &generated, video_ex)?;
    let by_map: BTreeMap<String, &VideoTensor<f32>> = items.iter().map(|i| (i.map_id.clone(), &i.real)).collect();
    let pairs: Vec<(String, &VideoTensor<f32>)> =
        videos.iter().map(|g| (items[g.condition_index].map_id.clone(), &g.video)).collect();
    let ssim = ssim_video_pairs(&pairs, &by_map)?;
    let report = MetricsReport {
        condition: cfg.condition_label.clone(),
        model: cfg.model_label.clone(),
        frames: generated[0].frames(),
        fid: fid.distance,
        fvd: fvd.distance,
        mean_ssim: ssim.mean,
        ssim_comparisons: ssim.comparisons,
        n_maps: items.len(),
        n_real: real.len(),
        n_generated: videos.len(),
        frame_extractor: frame_ex.id(),
        video_extractor: video_ex.id(),
        fid_regularized: fid.regularized,
        fvd_regularized: fvd.regularized,
        config_fingerprint: cfg.config_fingerprint.clone(),
    };
    if let Some(p) = report.problems().first() {
        return Err(Error::Metric(p.clone()));
    }
    Ok(SuiteOutput { report, videos })
}

/// Plain-text results table with columns Cond. / Model / K / FID / FVD / SSIM.
pub fn results_table(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:<14} {:>3} {:>10} {:>10} {:>7}", "Cond.", "Model", "K", "FID", "FVD", "SSIM");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<10} {:<14} {:>3} {:>10.2} {:>10.2} {:>7.3}",
            r.condition, r.model, r.frames, r.fid, r.fvd, r.mean_ssim
        );
    }
    let extractors: std::collections::BTreeSet<_> =
        reports.iter().map(|r| format!("{} / {}", r.frame_extractor, r.video_extractor)).collect();
    for e in extractors {
        let _ = writeln!(out, "FID / FVD relative to extractors {e}");
    }
    out
}
