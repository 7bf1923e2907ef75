//! Synthetic apical two-chamber cycles.
//!
//! Each patient is a left-ventricle cavity (dark ellipse) inside a bright
//! myocardial ring, with a dark left-atrium blob below it, all inside an
//! ultrasound sector. The ventricle contracts from ED to ES while the
//! atrium fills. Intensities are modulated by smooth multiplicative speckle.
//! Label ids: 0 background, 1 LV cavity, 2 myocardium, 3 left atrium.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_record, PatientRecord};
use crate::error::{Error, Result};
use crate::io::create_dir;
use crate::seed::derive_seed;
use crate::video::{LabelMap, VideoTensor};

/// Spatial sizes must be a multiple of this (the deepest default network).
pub const TOY_SIZE_MULTIPLE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub patients: usize,
    pub frames: usize,
    pub hw: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { patients: 10, frames: 16, hw: 32, seed: 0 }
    }
}

impl ToyConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = vec![];
        if self.patients == 0 {
            p.push("patients must be at least 1".to_string());
        }
        if self.frames < 2 {
            p.push(format!("frames must be at least 2, got {}", self.frames));
        }
        if self.hw < 16 || self.hw % TOY_SIZE_MULTIPLE != 0 {
            p.push(format!("size {} must be >= 16 and a multiple of {TOY_SIZE_MULTIPLE}", self.hw));
        }
        p
    }
}

struct Anatomy {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    wall: f64,
    contraction: f64,
    la_dx: f64,
    la_ax: f64,
    la_ay: f64,
    la_fill: f64,
    tilt: f64,
    /// `(fx, fy, phase, amplitude)` components of the speckle field.
    speckle: Vec<(f64, f64, f64, f64)>,
    drift: f64,
}

impl Anatomy {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let speckle = (0..6)
            .map(|_| {
                let f = rng.gen_range(1.5..4.0);
                let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                (f * a.cos(), f * a.sin(), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.5..1.0))
            })
            .collect();
        Self {
            cx: 0.5 + rng.gen_range(-0.04..0.04),
            cy: 0.40 + rng.gen_range(-0.03..0.03),
            ax: rng.gen_range(0.12..0.16),
            ay: rng.gen_range(0.20..0.25),
            wall: rng.gen_range(0.06..0.08),
            contraction: rng.gen_range(0.22..0.32),
            la_dx: rng.gen_range(-0.03..0.03),
            la_ax: rng.gen_range(0.10..0.13),
            la_ay: rng.gen_range(0.07..0.09),
            la_fill: rng.gen_range(0.15..0.3),
            tilt: rng.gen_range(-0.15..0.15),
            speckle,
            drift: rng.gen_range(0.2..0.5),
        }
    }

    /// Normalized elliptical radius of `(u, v)` around a centre.
    fn radius(&self, u: f64, v: f64, cx: f64, cy: f64, ax: f64, ay: f64) -> f64 {
        let (s, c) = self.tilt.sin_cos();
        let (du, dv) = (u - cx, v - cy);
        let (x, y) = (c * du + s * dv, -s * du + c * dv);
        ((x / ax).powi(2) + (y / ay).powi(2)).sqrt()
    }

    /// Region radii at cycle phase `p` in `[0, 1]` (0 = ED, 1 = ES).
    fn shapes(&self, p: f64) -> [(f64, f64, f64, f64); 3] {
        let squeeze = 1.0 - self.contraction * (1.0 - (std::f64::consts::PI * p).cos()) / 2.0;
        let (ax, ay) = (self.ax * squeeze, self.ay * squeeze);
        let wall = self.wall / squeeze.sqrt();
        let grow = 1.0 + self.la_fill * (1.0 - (std::f64::consts::PI * p).cos()) / 2.0;
        let (lax, lay) = (self.la_ax * grow, self.la_ay * grow);
        let la_cy = self.cy + self.ay + wall + lay * 0.8;
        [
            (self.cx, self.cy, ax, ay),
            (self.cx, self.cy, ax + wall, ay + wall),
            (self.cx + self.la_dx, la_cy, lax, lay),
        ]
    }

    fn speckle(&self, u: f64, v: f64, p: f64) -> f64 {
        let total: f64 = self.speckle.iter().map(|s| s.3).sum();
        let tau = std::f64::consts::TAU;
        self.speckle
            .iter()
            .map(|&(fx, fy, ph, a)| a * (tau * (fx * u + fy * v) + ph + self.drift * p).cos())
            .sum::<f64>()
            / total
    }
}

fn in_sector(u: f64, v: f64) -> f64 {
    // Apex at the top centre, +-40 degrees, soft rim.
    let (dx, dy) = (u - 0.5, v + 0.02);
    let angle = dx.atan2(dy).abs();
    let r = (dx * dx + dy * dy).sqrt();
    smoothstep(0.70, 0.66, angle) * smoothstep(1.02, 0.98, r)
}

fn smoothstep(edge_out: f64, edge_in: f64, x: f64) -> f64 {
    let t = ((x - edge_out) / (edge_in - edge_out)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Soft membership of a point at normalized radius `r` (softness `s`).
fn inside(r: f64, s: f64) -> f64 {
    1.0 / (1.0 + ((r - 1.0) / s).exp())
}

const TISSUE: f64 = -0.3;
const CAVITY: f64 = -0.85;
const MYOCARDIUM: f64 = 0.45;
const ATRIUM: f64 = -0.75;

/// Renders patient `index` of a toy dataset in memory.
pub fn toy_record(index: usize, frames: usize, hw: usize, seed: u64) -> Result<PatientRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, index as u64]));
    let a = Anatomy::draw(&mut rng);
    let px = |i: usize| (i as f64 + 0.5) / hw as f64;
    let soft = 0.6 / (hw as f64 * a.ax);
    let mut data = Vec::with_capacity(frames * hw * hw);
    for k in 0..frames {
        let p = k as f64 / (frames - 1).max(1) as f64;
        let [cav, myo, la] = a.shapes(p);
        for y in 0..hw {
            for x in 0..hw {
                let (u, v) = (px(x), px(y));
                let m_cav = inside(a.radius(u, v, cav.0, cav.1, cav.2, cav.3), soft);
                let m_myo = inside(a.radius(u, v, myo.0, myo.1, myo.2, myo.3), soft);
                let m_la = inside(a.radius(u, v, la.0, la.1, la.2, la.3), soft) * (1.0 - m_myo);
                let mut val = TISSUE;
                val += (MYOCARDIUM - val) * m_myo;
                val += (CAVITY - val) * m_cav;
                val += (ATRIUM - val) * m_la;
                let bright = (val + 1.0) * (1.0 + 0.25 * a.speckle(u, v, p));
                let sector = in_sector(u, v);
                data.push(((bright * sector) - 1.0).clamp(-1.0, 1.0) as f32);
            }
        }
    }
    let [cav, myo, la] = a.shapes(0.0);
    let mut classes = Vec::with_capacity(hw * hw);
    for y in 0..hw {
        for x in 0..hw {
            let (u, v) = (px(x), px(y));
            let c = if a.radius(u, v, cav.0, cav.1, cav.2, cav.3) < 1.0 {
                1
            } else if a.radius(u, v, myo.0, myo.1, myo.2, myo.3) < 1.0 {
                2
            } else if a.radius(u, v, la.0, la.1, la.2, la.3) < 1.0 {
                3
            } else {
                0
            };
            classes.push(c);
        }
    }
    let video = VideoTensor::new((frames, 1, hw, hw), data)?;
    PatientRecord::new(format!("patient{:04}", index + 1), video, LabelMap::new(hw, hw, classes)?)
}

/// Writes `cfg.patients` synthetic records under `out_root`. Validation
/// happens before anything is written.
pub fn toy_generate(cfg: &ToyConfig, out_root: &Path) -> Result<Vec<PathBuf>> {
    let p = cfg.problems();
    if !p.is_empty() {
        return Err(Error::Config(p.join("; ")));
    }
    create_dir(out_root)?;
    (0..cfg.patients)
        .map(|i| {
            let rec = toy_record(i, cfg.frames, cfg.hw, cfg.seed)?;
            let dir = out_root.join(&rec.patient_id);
            write_record(&dir, &rec)?;
            Ok(dir)
        })
        .collect()
}
