//! On-disk formats: 8-bit grayscale frame directories, sample manifests,
//! animated previews and atomic file writes.

use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::VideoTensor;

/// Maps `[-1, 1]` to `0..=255`, clamping out-of-range values.
pub fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Inverse of [`to_u8`].
pub fn from_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn frame_file_name(k: usize) -> String {
    format!("frame_{k:04}.png")
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, pixels: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| Error::Shape(format!("{width}x{height} image with wrong pixel count")))?;
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Returns `(width, height, pixels)`; colour images are converted to luma.
pub fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.into_luma8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

/// Writes an atomically-replaced file: temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes one PNG per frame (`frame_0000.png`, ...) into `dir`. Only
/// single-channel clips are supported.
pub fn write_frames(dir: &Path, video: &VideoTensor<f32>) -> Result<Vec<PathBuf>> {
    if video.channels() != 1 {
        return Err(Error::Shape(format!("grayscale output needs 1 channel, clip has {}", video.channels())));
    }
    create_dir(dir)?;
    (0..video.frames())
        .map(|k| {
            let path = dir.join(frame_file_name(k));
            let px = video.frame(k).iter().map(|&v| to_u8(v)).collect();
            write_gray_png(&path, video.width(), video.height(), px)?;
            Ok(path)
        })
        .collect()
}

/// Reads `frame_0000.png ...` from `dir` until the first missing index.
pub fn read_frames(dir: &Path) -> Result<VideoTensor<f32>> {
    let mut data = vec![];
    let mut dims = None;
    let mut k = 0;
    loop {
        let path = dir.join(frame_file_name(k));
        if !path.exists() {
            break;
        }
        let (w, h, px) = read_gray_png(&path)?;
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(Error::Shape(format!("{}: {w}x{h} differs from earlier frames", path.display())))
            }
            _ => {}
        }
        data.extend(px.into_iter().map(from_u8));
        k += 1;
    }
    let (h, w) = dims.ok_or_else(|| Error::Validation(vec![format!("{}: no frame_0000.png", dir.display())]))?;
    VideoTensor::new((k, 1, h, w), data)
}

/// Animated GIF preview of a single-channel clip.
pub fn write_gif(path: &Path, video: &VideoTensor<f32>, frame_delay_ms: u32) -> Result<()> {
    use image::codecs::gif::{GifEncoder, Repeat};
    use image::{Delay, Frame, RgbaImage};
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = GifEncoder::new(std::io::BufWriter::new(file));
    enc.set_repeat(Repeat::Infinite).map_err(|e| Error::image(path, e))?;
    let (w, h) = (video.width() as u32, video.height() as u32);
    for k in 0..video.frames() {
        let plane = video.plane(k, 0);
        let img = RgbaImage::from_fn(w, h, |x, y| {
            let v = to_u8(plane[(y * w + x) as usize]);
            image::Rgba([v, v, v, 255])
        });
        let frame = Frame::from_parts(img, 0, 0, Delay::from_numer_denom_ms(frame_delay_ms, 1));
        enc.encode_frame(frame).map_err(|e| Error::image(path, e))?;
    }
    Ok(())
}

/// Provenance written next to every sampled clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub seed: u64,
    pub map_id: String,
    pub guidance_scale: f64,
    pub steps: usize,
    pub frames: usize,
    pub checkpoint_fingerprint: String,
    /// `"ddpm"`, or the stage labels of a cascade run.
    pub stages: Vec<String>,
}

/// Writes frames, `manifest.json` and optionally `preview.gif` into `dir`.
pub fn save_sample(dir: &Path, video: &VideoTensor<f32>, manifest: &SampleManifest, preview: bool) -> Result<()> {
    write_frames(dir, video)?;
    write_json(&dir.join("manifest.json"), manifest)?;
    if preview {
        write_gif(&dir.join("preview.gif"), video, 80)?;
    }
    Ok(())
}

/// Writes a label map image whose pixel values are the class ids.
pub fn write_label_png(path: &Path, map: &crate::video::LabelMap) -> Result<()> {
    write_gray_png(path, map.width(), map.height(), map.classes().to_vec())
}

pub fn read_label_png(path: &Path) -> Result<crate::video::LabelMap> {
    let (w, h, px) = read_gray_png(path)?;
    crate::video::LabelMap::new(h, w, px).map_err(|e| match e {
        Error::Validation(v) => Error::Validation(v.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn byte_round_trip_is_lossless() {
        for b in 0..=255u8 {
            assert_eq!(to_u8(from_u8(b)), b);
            assert!((-1.0..=1.0).contains(&from_u8(b)));
        }
        assert_eq!(to_u8(3.0), 255);
        assert_eq!(to_u8(-3.0), 0);
    }

    #[test]
    fn frames_round_trip_within_one_level() {
        let dir = tempfile::tempdir().unwrap();
        let v = VideoTensor::randn((3, 1, 5, 7), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).map(|x: f32| x.clamp(-1.0, 1.0));
        write_frames(dir.path(), &v).unwrap();
        let back = read_frames(dir.path()).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert!(back.max_abs_diff(&v) <= 1.0 / 255.0 + 1e-6);
        write_gif(&dir.path().join("p.gif"), &v, 50).unwrap();
        assert!(dir.path().join("p.gif").metadata().unwrap().len() > 0);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
