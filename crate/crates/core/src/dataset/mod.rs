//! Patient-level echocardiography data.
//!
//! Layout of a dataset root, one directory per patient:
//!
//! ```text
//! root/
//!   patient0001/
//!     manifest.toml      patient_id, frames, ed_index, es_index, view = "2CH"
//!     frame_0000.png     8-bit grayscale, ED ...
//!     frame_NNNN.png     ... ES
//!     label_ed.png       8-bit, pixel value = class id in 0..=3
//! ```

pub mod camus;
mod toy;

pub use toy::{toy_generate, toy_record, ToyConfig, TOY_SIZE_MULTIPLE};

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{atomic_write, frame_file_name, read_frames, read_label_png, write_frames, write_label_png};
use crate::video::{LabelMap, SemanticCondition, VideoTensor};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const LABEL_FILE: &str = "label_ed.png";
pub const VIEW_2CH: &str = "2CH";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordManifest {
    pub patient_id: String,
    pub frames: usize,
    pub ed_index: usize,
    pub es_index: usize,
    pub view: String,
}

/// One patient's cardiac cycle, ED first and ES last.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    /// `N x 1 x H x W`, values in `[-1, 1]`.
    pub frames: VideoTensor<f32>,
    pub label_ed: LabelMap,
}

impl PatientRecord {
    pub fn new(patient_id: impl Into<String>, frames: VideoTensor<f32>, label_ed: LabelMap) -> Result<Self> {
        let patient_id = patient_id.into();
        let mut p = vec![];
        if frames.frames() < 2 {
            p.push(format!("{patient_id}: needs at least 2 frames, has {}", frames.frames()));
        }
        if frames.channels() != 1 {
            p.push(format!("{patient_id}: frames must be grayscale"));
        }
        if (label_ed.height(), label_ed.width()) != (frames.height(), frames.width()) {
            p.push(format!(
                "{patient_id}: label {}x{} does not match frames {}x{}",
                label_ed.height(),
                label_ed.width(),
                frames.height(),
                frames.width()
            ));
        }
        if !p.is_empty() {
            return Err(Error::Validation(p));
        }
        Ok(Self { patient_id, frames, label_ed })
    }

    pub fn condition(&self) -> SemanticCondition {
        one_hot_labels(&self.label_ed)
    }
}

/// Writes a record in the dataset layout under `dir`.
pub fn write_record(dir: &Path, record: &PatientRecord) -> Result<()> {
    write_frames(dir, &record.frames)?;
    write_label_png(&dir.join(LABEL_FILE), &record.label_ed)?;
    let manifest = RecordManifest {
        patient_id: record.patient_id.clone(),
        frames: record.frames.frames(),
        ed_index: 0,
        es_index: record.frames.frames() - 1,
        view: VIEW_2CH.into(),
    };
    atomic_write(&dir.join(MANIFEST_FILE), toml::to_string(&manifest)?.as_bytes())
}

/// Loads and validates one patient directory. The cycle is the frame range
/// `ed_index..=es_index` of the stored frames.
pub fn load_record(dir: &Path) -> Result<PatientRecord> {
    let at = |m: String| Error::Validation(vec![format!("{}: {m}", dir.display())]);
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| at(format!("cannot read {MANIFEST_FILE}: {e}")))?;
    let m: RecordManifest = toml::from_str(&text).map_err(|e| at(format!("bad {MANIFEST_FILE}: {e}")))?;
    if m.view != VIEW_2CH {
        return Err(at(format!("view {:?} is not supported (only {VIEW_2CH})", m.view)));
    }
    if !(m.ed_index < m.es_index && m.es_index < m.frames) {
        return Err(at(format!("need ed_index < es_index < frames, got {} / {} / {}", m.ed_index, m.es_index, m.frames)));
    }
    let lpath = dir.join(LABEL_FILE);
    if !lpath.exists() {
        return Err(at(format!("missing {LABEL_FILE}")));
    }
    let label = read_label_png(&lpath)?;
    let all = read_frames(dir)?;
    if all.frames() != m.frames {
        return Err(at(format!("manifest lists {} frames, found {}", m.frames, all.frames())));
    }
    if dir.join(frame_file_name(m.frames)).exists() {
        return Err(at("frames beyond the manifest count".into()));
    }
    let per = all.channels() * all.height() * all.width();
    let data = all.data()[m.ed_index * per..(m.es_index + 1) * per].to_vec();
    let frames = VideoTensor::new((m.es_index - m.ed_index + 1, 1, all.height(), all.width()), data)?;
    PatientRecord::new(m.patient_id, frames, label).map_err(|e| match e {
        Error::Validation(v) => Error::Validation(v.into_iter().map(|s| format!("{}: {s}", dir.display())).collect()),
        other => other,
    })
}

/// Loads every patient directory under `root` (sorted by name). All
/// invalid records are reported together.
pub fn load_dataset(root: &Path) -> Result<Vec<PatientRecord>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        log::warn!("dataset root {} contains no patient directories", root.display());
    }
    let mut records = vec![];
    let mut problems = vec![];
    for d in &dirs {
        match load_record(d) {
            Ok(r) => records.push(r),
            Err(Error::Validation(v)) => problems.extend(v),
            Err(e) => problems.push(format!("{}: {e}", d.display())),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.8, 0.1, 0.1];

/// Seeded patient-level split. Ids are sorted, shuffled, and partitioned
/// with `floor(n * ratio)` patients for validation and test; the remainder
/// goes to training.
pub fn patient_split(ids: &[String], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    if ids.len() < 3 {
        return Err(Error::Config(format!("cannot split {} patients three ways", ids.len())));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::Config("duplicate patient ids".into()));
    }
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = sorted.len() as f64;
    let n_val = (n * ratios[1] + 1e-9).floor() as usize;
    let n_test = (n * ratios[2] + 1e-9).floor() as usize;
    let test = sorted.split_off(sorted.len() - n_test);
    let val = sorted.split_off(sorted.len() - n_val);
    Ok(DatasetSplit { train: sorted, val, test })
}

/// Source frame indices `round(i (N - 1) / (K - 1))` for `i in 0..K`.
pub fn resample_indices(n: usize, k: usize) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 output frames, got {k}")));
    }
    if n == 0 {
        return Err(Error::Config("record has no frames".into()));
    }
    // Integer form of round-half-up.
    Ok((0..k).map(|i| (2 * i * (n - 1) + (k - 1)) / (2 * (k - 1))).collect())
}

/// Nearest-index temporal resampling to `k` frames with ED and ES pinned.
pub fn resample_frames(record: &PatientRecord, k: usize) -> Result<VideoTensor<f32>> {
    let idx = resample_indices(record.frames.frames(), k)?;
    let f = &record.frames;
    let mut data = Vec::with_capacity(k * f.height() * f.width());
    for i in idx {
        data.extend_from_slice(f.frame(i));
    }
    VideoTensor::new((k, 1, f.height(), f.width()), data)
}

pub fn one_hot_labels(m: &LabelMap) -> SemanticCondition {
    SemanticCondition::from_labels(m)
}
