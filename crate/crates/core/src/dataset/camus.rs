//! Conversion of CAMUS MetaImage exports into the dataset layout.
//!
//! Expected input, one directory per patient:
//!
//! ```text
//! patient0001/
//!   patient0001_2CH_half_sequence.mhd (+ .raw)   ED..ES sequence, or *_2CH_sequence.mhd
//!   patient0001_2CH_ED_gt.mhd (+ .raw)           ED annotation, ids 0..=3
//!   Info_2CH.cfg                                 "ED: n", "ES: n" (1-based), optional
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{write_record, PatientRecord};
use crate::cascade::{downsample_video, upsample_video};
use crate::error::{Error, Result};
use crate::io::create_dir;
use crate::video::{LabelMap, VideoTensor};

/// A decoded MetaImage volume: `dims` is `[x, y, (z)]`, data x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaImage {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

fn header_map(text: &str) -> HashMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// Reads an uncompressed `.mhd` header and its data file (or local data).
pub fn read_metaimage(path: &Path) -> Result<MetaImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Validation(vec![format!("{}: {m}", path.display())]);
    // The header is ASCII and ends at the ElementDataFile line.
    let key = b"ElementDataFile";
    let pos = bytes.windows(key.len()).position(|w| w == key).ok_or_else(|| bad("no ElementDataFile".into()))?;
    let line_end = bytes[pos..].iter().position(|&b| b == b'\n').map(|i| pos + i + 1).unwrap_or(bytes.len());
    let header = header_map(&String::from_utf8_lossy(&bytes[..line_end]));
    if header.get("CompressedData").is_some_and(|v| v.eq_ignore_ascii_case("true")) {
        return Err(bad("compressed MetaImage data is not supported".into()));
    }
    let dims: Vec<usize> = header
        .get("DimSize")
        .ok_or_else(|| bad("no DimSize".into()))?
        .split_whitespace()
        .map(|d| d.parse().map_err(|_| bad(format!("bad DimSize entry {d:?}"))))
        .collect::<Result<_>>()?;
    let msb = ["ElementByteOrderMSB", "BinaryDataByteOrderMSB"]
        .iter()
        .any(|k| header.get(*k).is_some_and(|v| v.eq_ignore_ascii_case("true")));
    let etype = header.get("ElementType").ok_or_else(|| bad("no ElementType".into()))?;
    let file = &header["ElementDataFile"];
    let raw = if file == "LOCAL" {
        bytes[line_end..].to_vec()
    } else {
        let p = path.parent().unwrap_or(Path::new(".")).join(file);
        fs::read(&p).map_err(|e| Error::io(&p, e))?
    };
    let n: usize = dims.iter().product();
    let (size, decode): (usize, fn(&[u8], bool) -> f64) = match etype.as_str() {
        "MET_UCHAR" => (1, |b, _| b[0] as f64),
        "MET_CHAR" => (1, |b, _| b[0] as i8 as f64),
        "MET_USHORT" => (2, |b, m| {
            let a = [b[0], b[1]];
            f64::from(if m { u16::from_be_bytes(a) } else { u16::from_le_bytes(a) })
        }),
        "MET_SHORT" => (2, |b, m| {
            let a = [b[0], b[1]];
            f64::from(if m { i16::from_be_bytes(a) } else { i16::from_le_bytes(a) })
        }),
        "MET_FLOAT" => (4, |b, m| {
            let a = [b[0], b[1], b[2], b[3]];
            f64::from(if m { f32::from_be_bytes(a) } else { f32::from_le_bytes(a) })
        }),
        other => return Err(bad(format!("unsupported ElementType {other}"))),
    };
    if raw.len() < n * size {
        return Err(bad(format!("data holds {} bytes, need {}", raw.len(), n * size)));
    }
    let data = raw.chunks_exact(size).take(n).map(|c| decode(c, msb)).collect();
    Ok(MetaImage { dims, data })
}

/// `(ED, ES)` 1-based indices from an `Info_2CH.cfg` file.
fn read_info(path: &Path) -> Result<Option<(usize, usize)>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let get = |k: &str| {
        text.lines()
            .filter_map(|l| l.split_once(':'))
            .find(|(a, _)| a.trim() == k)
            .and_then(|(_, v)| v.trim().parse::<usize>().ok())
    };
    Ok(get("ED").zip(get("ES")))
}

fn find_file(dir: &Path, suffixes: &[&str]) -> Option<PathBuf> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir).ok()?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    suffixes
        .iter()
        .find_map(|s| entries.iter().find(|p| p.to_string_lossy().ends_with(s)).cloned())
}

/// Square-resizes a clip: area averaging when shrinking, bilinear otherwise.
fn resize_clip(v: &VideoTensor<f32>, hw: usize) -> Result<VideoTensor<f32>> {
    if hw <= v.height() && hw <= v.width() {
        downsample_video(v, hw)
    } else if hw >= v.height() && hw >= v.width() {
        upsample_video(v, hw)
    } else {
        upsample_video(&downsample_video(v, v.height().min(v.width()))?, hw)
    }
}

/// Converts one CAMUS patient directory, resized to `hw x hw`.
pub fn convert_patient(dir: &Path, hw: usize) -> Result<PatientRecord> {
    let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let bad = |m: &str| Error::Validation(vec![format!("{}: {m}", dir.display())]);
    let seq_path = find_file(dir, &["_2CH_half_sequence.mhd", "_2CH_sequence.mhd"]).ok_or_else(|| bad("no 2CH sequence"))?;
    let gt_path = find_file(dir, &["_2CH_ED_gt.mhd"]).ok_or_else(|| bad("no 2CH ED annotation"))?;
    let seq = read_metaimage(&seq_path)?;
    let gt = read_metaimage(&gt_path)?;
    if seq.dims.len() != 3 || gt.dims.len() < 2 || seq.dims[..2] != gt.dims[..2] {
        return Err(bad(&format!("sequence dims {:?} do not match annotation dims {:?}", seq.dims, gt.dims)));
    }
    let (w, h, n) = (seq.dims[0], seq.dims[1], seq.dims[2]);
    let (lo, hi) = seq.data.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (lo, span) = if lo >= 0.0 && hi <= 255.0 { (0.0, 255.0) } else { (lo, span) };
    let mut order: Vec<usize> = (0..n).collect();
    if let Some((ed, es)) = read_info(&dir.join("Info_2CH.cfg"))? {
        if ed >= 1 && es >= 1 && ed.max(es) <= n && ed != es && n > 2 && !seq_path.to_string_lossy().contains("half") {
            order = if ed < es { (ed - 1..es).collect() } else { (es - 1..ed).rev().collect() };
        }
    }
    let mut data = Vec::with_capacity(order.len() * w * h);
    for &k in &order {
        data.extend(seq.data[k * w * h..(k + 1) * w * h].iter().map(|&v| (2.0 * (v - lo) / span - 1.0) as f32));
    }
    let video = resize_clip(&VideoTensor::new((order.len(), 1, h, w), data)?, hw)?;
    let classes: Vec<u8> = gt.data[..w * h].iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
    let label = LabelMap::new(h, w, classes)?.resize_nearest(hw, hw);
    PatientRecord::new(id, video, label)
}

/// Converts every patient directory under `src` into `dst`; failures are
/// collected and reported together after the valid patients are written.
pub fn convert_camus(src: &Path, dst: &Path, hw: usize) -> Result<usize> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(src)
        .map_err(|e| Error::io(src, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    create_dir(dst)?;
    let mut problems = vec![];
    let mut written = 0;
    for d in &dirs {
        match convert_patient(d, hw).and_then(|r| write_record(&dst.join(&r.patient_id), &r)) {
            Ok(()) => written += 1,
            Err(Error::Validation(v)) => problems.extend(v),
            Err(e) => problems.push(format!("{}: {e}", d.display())),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    Ok(written)
}
