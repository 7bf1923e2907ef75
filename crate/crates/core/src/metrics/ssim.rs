//! Structural similarity with the classic defaults: 11x11 Gaussian window,
//! sigma 1.5, `K1 = 0.01`, `K2 = 0.03`, dynamic range 1, valid-mode
//! filtering, mean over window positions.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::video::VideoTensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// A grayscale image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayFrame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayFrame {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{height}x{width} frame with {} values", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }
}

/// Frames of a single-channel clip, mapped from `[-1, 1]` to `[0, 1]`.
pub fn video_frames(v: &VideoTensor<f32>) -> Result<Vec<GrayFrame>> {
    if v.channels() != 1 {
        return Err(Error::Shape(format!("expected a 1-channel clip, got {} channels", v.channels())));
    }
    (0..v.frames())
        .map(|k| GrayFrame::new(v.height(), v.width(), v.frame(k).iter().map(|&x| (f64::from(x) + 1.0) / 2.0).collect()))
        .collect()
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, a)| a * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two frames.
pub fn ssim_frame(a: &GrayFrame, b: &GrayFrame) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape(format!("{}x{} vs {}x{} frames", a.height, a.width, b.height, b.width)));
    }
    let (h, w) = (a.height, a.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("{h}x{w} frame is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let taps = gaussian_window();
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter(&a.data, h, w, &taps);
    let mu_b = filter(&b.data, h, w, &taps);
    let aa = filter(&prod(|x, _| x * x), h, w, &taps);
    let bb = filter(&prod(|_, y| y * y), h, w, &taps);
    let ab = filter(&prod(|x, y| x * y), h, w, &taps);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean frame SSIM of two clips of equal shape.
pub fn ssim_video(a: &VideoTensor<f32>, b: &VideoTensor<f32>) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (fa, fb) = (video_frames(a)?, video_frames(b)?);
    let s = fa.iter().zip(&fb).map(|(x, y)| ssim_frame(x, y)).sum::<Result<f64>>()?;
    Ok(s / fa.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedSsim {
    pub mean: f64,
    /// Frame pairs compared.
    pub comparisons: usize,
}

/// Mean SSIM over every frame of every generated clip against the real
/// clip that shares its segmentation map, keyed by map id.
pub fn ssim_video_pairs(generated: &[(String, &VideoTensor<f32>)], real: &BTreeMap<String, &VideoTensor<f32>>) -> Result<PairedSsim> {
    let orphans: Vec<&str> = generated.iter().filter(|(id, _)| !real.contains_key(id)).map(|(id, _)| id.as_str()).collect();
    if !orphans.is_empty() {
        return Err(Error::Metric(format!("generated clips without a real clip for map: {}", orphans.join(", "))));
    }
    let mut total = 0.0;
    let mut comparisons = 0;
    for (id, g) in generated {
        let r = real[id];
        if g.frames() != r.frames() {
            return Err(Error::Metric(format!("map {id}: {} generated frames vs {} real", g.frames(), r.frames())));
        }
        total += ssim_video(g, r)? * g.frames() as f64;
        comparisons += g.frames();
    }
    if comparisons == 0 {
        return Err(Error::Metric("no clips to compare".into()));
    }
    Ok(PairedSsim { mean: total / comparisons as f64, comparisons })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct 2-D sliding window with the full outer-product kernel.
    fn oracle(a: &GrayFrame, b: &GrayFrame) -> f64 {
        let g = gaussian_window();
        let n = SSIM_WINDOW;
        let (h, w) = (a.height, a.width);
        let mut acc = 0.0;
        let mut count = 0;
        for y in 0..=h - n {
            for x in 0..=w - n {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let k = g[i] * g[j];
                        let (p, q) = (a.data[(y + i) * w + x + j], b.data[(y + i) * w + x + j]);
                        ma += k * p;
                        mb += k * q;
                        saa += k * p * p;
                        sbb += k * q * q;
                        sab += k * p * q;
                    }
                }
                let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * (sab - ma * mb) + SSIM_C2);
                let den = (ma * ma + mb * mb + SSIM_C1) * (saa - ma * ma + sbb - mb * mb + SSIM_C2);
                acc += num / den;
                count += 1;
            }
        }
        acc / count as f64
    }

    fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> GrayFrame {
        GrayFrame::new(h, w, (0..h * w).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn constant_closed_form() {
        let s = ssim_frame(&GrayFrame::constant(16, 16, 0.4), &GrayFrame::constant(16, 16, 0.6)).unwrap();
        let expect = (2.0 * 0.4 * 0.6 + SSIM_C1) / (0.4f64.powi(2) + 0.6f64.powi(2) + SSIM_C1);
        assert!((s - expect).abs() < 1e-12);
        assert!((s - 0.92309).abs() < 1e-5);
    }

    #[test]
    fn agrees_with_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let (a, b) = (random_frame(&mut rng, 17, 14), random_frame(&mut rng, 17, 14));
            assert!((ssim_frame(&a, &b).unwrap() - oracle(&a, &b)).abs() < 1e-9);
        }
    }

    #[test]
    fn size_contracts() {
        let a = GrayFrame::constant(10, 20, 0.5);
        assert!(matches!(ssim_frame(&a, &a), Err(Error::Shape(_))));
        assert!(ssim_frame(&GrayFrame::constant(12, 12, 0.5), &GrayFrame::constant(12, 13, 0.5)).is_err());
    }

    #[test]
    fn pairing_reports_orphans_and_is_order_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clip = |rng: &mut ChaCha8Rng| VideoTensor::new((2, 1, 12, 12), (0..288).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (r1, r2, g1, g2) = (clip(&mut rng), clip(&mut rng), clip(&mut rng), clip(&mut rng));
        let real = BTreeMap::from([("a".to_string(), &r1), ("b".to_string(), &r2)]);
        let gen = vec![("a".to_string(), &g1), ("b".to_string(), &g2), ("a".to_string(), &g2)];
        let p = ssim_video_pairs(&gen, &real).unwrap();
        assert_eq!(p.comparisons, 6);
        let rev: Vec<_> = gen.iter().rev().cloned().collect();
        assert!((ssim_video_pairs(&rev, &real).unwrap().mean - p.mean).abs() < 1e-12);
        let same = ssim_video_pairs(&[("a".to_string(), &r1)], &real).unwrap();
        assert!((same.mean - 1.0).abs() < 1e-12);
        let err = ssim_video_pairs(&[("zz".to_string(), &g1)], &real).unwrap_err();
        assert!(err.to_string().contains("zz"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn bounded_and_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random_frame(&mut rng, 12, 13), random_frame(&mut rng, 12, 13));
            let s = ssim_frame(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!((s - ssim_frame(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((ssim_frame(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
