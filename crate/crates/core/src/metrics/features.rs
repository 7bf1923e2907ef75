//! Feature extractors for the Fréchet metrics.
//!
//! The built-in extractors are deterministic toys: area-average pooling to a
//! coarse grid followed by a fixed-seed random projection, with the video
//! variant adding pooled inter-frame differences. [`CommandExtractor`] hands
//! clips to an external program (for instance one that wraps a published
//! image or video backbone) and reads the embedding back.

use std::path::PathBuf;
use std::process::Command;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cascade::downsample_video;
use crate::error::{Error, Result};
use crate::tensor::Element;
use crate::video::VideoTensor;

/// Embeds single frames (`[1, C, H, W]` clips).
pub trait FrameExtractor: Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed_frame(&self, frame: &VideoTensor<f32>) -> Result<Vec<f64>>;
}

/// Embeds whole clips.
pub trait VideoExtractor: Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed_video(&self, video: &VideoTensor<f32>) -> Result<Vec<f64>>;
}

/// Splits a clip into single-frame clips.
pub fn split_frames(v: &VideoTensor<f32>) -> Vec<VideoTensor<f32>> {
    let per = v.channels() * v.height() * v.width();
    (0..v.frames())
        .map(|k| {
            VideoTensor::new((1, v.channels(), v.height(), v.width()), v.data()[k * per..(k + 1) * per].to_vec())
                .expect("sized")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyFrameExtractor {
    grid: usize,
    dim: usize,
    seed: u64,
    /// `dim x grid^2`, row-major.
    projection: Vec<f64>,
}

impl ToyFrameExtractor {
    pub fn new(grid: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (grid as f64);
        let projection = (0..dim * grid * grid).map(|_| f64::sample_normal(&mut rng) * scale).collect();
        Self { grid, dim, seed, projection }
    }

    /// Average-pooled grid values, channel-summed.
    fn pooled(&self, frame: &VideoTensor<f32>) -> Result<Vec<f64>> {
        let p = downsample_video(&frame.cast::<f64>(), self.grid)?;
        let cells = self.grid * self.grid;
        let mut out = vec![0.0; cells];
        for (i, v) in p.data().iter().enumerate() {
            out[i % cells] += v;
        }
        Ok(out)
    }

    fn project(&self, x: &[f64]) -> Vec<f64> {
        self.projection.chunks_exact(x.len()).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }
}

impl Default for ToyFrameExtractor {
    fn default() -> Self {
        Self::new(8, 32, 0x5EED)
    }
}

impl FrameExtractor for ToyFrameExtractor {
    fn id(&self) -> String {
        format!("toy-frame-g{}-d{}-s{:x}", self.grid, self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_frame(&self, frame: &VideoTensor<f32>) -> Result<Vec<f64>> {
        if frame.frames() != 1 {
            return Err(Error::Shape(format!("frame extractor got a {}-frame clip", frame.frames())));
        }
        Ok(self.project(&self.pooled(frame)?))
    }
}

/// Mean frame embedding concatenated with the projected mean absolute
/// pooled difference between consecutive frames.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ToyVideoExtractor {
    frame: ToyFrameExtractor,
}

impl ToyVideoExtractor {
    pub fn new(frame: ToyFrameExtractor) -> Self {
        Self { frame }
    }
}

impl VideoExtractor for ToyVideoExtractor {
    fn id(&self) -> String {
        format!("toy-video({})", self.frame.id())
    }

    fn dim(&self) -> usize {
        2 * self.frame.dim
    }

    fn embed_video(&self, video: &VideoTensor<f32>) -> Result<Vec<f64>> {
        let pooled = split_frames(video).iter().map(|f| self.frame.pooled(f)).collect::<Result<Vec<_>>>()?;
        let cells = pooled[0].len();
        let k = pooled.len() as f64;
        let mean: Vec<f64> = (0..cells).map(|i| pooled.iter().map(|p| p[i]).sum::<f64>() / k).collect();
        let steps = (pooled.len() - 1).max(1) as f64;
        let motion: Vec<f64> =
            (0..cells).map(|i| pooled.windows(2).map(|w| (w[1][i] - w[0][i]).abs()).sum::<f64>() / steps).collect();
        let mut out = self.frame.project(&mean);
        out.extend(self.frame.project(&motion));
        Ok(out)
    }
}

/// Runs `program args... <dir>` where `<dir>` holds the clip as
/// `frame_NNNN.png` files, and parses whitespace-separated numbers from the
/// program's standard output.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandExtractor {
    pub name: String,
    pub program: PathBuf,
    pub args: Vec<String>,
    pub dim: usize,
}

impl CommandExtractor {
    fn run(&self, video: &VideoTensor<f32>) -> Result<Vec<f64>> {
        let dir = std::env::temp_dir().join(format!("echodiff-extract-{}-{}", std::process::id(), unique()));
        crate::io::write_frames(&dir, video)?;
        let out = Command::new(&self.program).args(&self.args).arg(&dir).output();
        let _ = std::fs::remove_dir_all(&dir);
        let out = out.map_err(|e| Error::io(&self.program, e))?;
        if !out.status.success() {
            return Err(Error::Metric(format!(
                "extractor {} exited with {}: {}",
                self.name,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let values = String::from_utf8_lossy(&out.stdout)
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::Metric(format!("extractor {} printed {t:?}", self.name))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != self.dim {
            return Err(Error::Metric(format!("extractor {} returned {} values, expected {}", self.name, values.len(), self.dim)));
        }
        Ok(values)
    }
}

fn unique() -> u64 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static NEXT: AtomicU64 = AtomicU64::new(0);
    NEXT.fetch_add(1, Ordering::Relaxed)
}

impl FrameExtractor for CommandExtractor {
    fn id(&self) -> String {
        format!("external:{}", self.name)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_frame(&self, frame: &VideoTensor<f32>) -> Result<Vec<f64>> {
        self.run(frame)
    }
}

impl VideoExtractor for CommandExtractor {
    fn id(&self) -> String {
        format!("external:{}", self.name)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_video(&self, video: &VideoTensor<f32>) -> Result<Vec<f64>> {
        self.run(video)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(values: &[f32]) -> VideoTensor<f32> {
        let per = 16 * 16;
        VideoTensor::new((values.len(), 1, 16, 16), values.iter().flat_map(|&v| std::iter::repeat(v).take(per)).collect()).unwrap()
    }

    #[test]
    fn toy_features_are_deterministic_and_linear() {
        let e = ToyFrameExtractor::default();
        let a = e.embed_frame(&clip(&[0.2])).unwrap();
        assert_eq!(a, ToyFrameExtractor::default().embed_frame(&clip(&[0.2])).unwrap());
        assert_eq!(a.len(), e.dim());
        let b = e.embed_frame(&clip(&[0.4])).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn video_features_see_motion() {
        let e = ToyVideoExtractor::default();
        let still = e.embed_video(&clip(&[0.1, 0.1, 0.1])).unwrap();
        let moving = e.embed_video(&clip(&[0.0, 0.1, 0.2])).unwrap();
        assert_eq!(still.len(), 64);
        assert_eq!(&still[..32], &moving[..32]);
        assert!(still[32..].iter().all(|v| *v == 0.0));
        assert!(moving[32..].iter().any(|v| *v != 0.0));
    }

    #[cfg(unix)]
    #[test]
    fn command_adapter_round_trip() {
        let e = CommandExtractor {
            name: "echo".into(),
            program: "/bin/sh".into(),
            args: vec!["-c".into(), "ls \"$0\" | wc -l; echo 2.5".into()],
            dim: 2,
        };
        assert_eq!(e.embed_video(&clip(&[0.0, 0.5, 1.0])).unwrap(), vec![3.0, 2.5]);
        let wrong = CommandExtractor { dim: 3, ..e };
        assert!(wrong.embed_video(&clip(&[0.0])).is_err());
    }
}
