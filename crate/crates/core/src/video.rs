//! Video clips, label maps and the semantic condition fed to the denoiser.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Number of semantic classes: background, LV cavity, myocardium, left atrium.
pub const NUM_CLASSES: usize = 4;

/// A clip of `K` frames stored `K x C x H x W`. Clean clips live in `[-1, 1]`;
/// noised diffusion states are unbounded.
#[derive(Clone, PartialEq)]
pub struct VideoTensor<F = f32> {
    tensor: Tensor<F>,
}

impl<F: Element> std::fmt::Debug for VideoTensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "VideoTensor{:?}", self.dims())
    }
}

/// `(K, C, H, W)`.
pub type VideoDims = (usize, usize, usize, usize);

impl<F: Element> VideoTensor<F> {
    pub fn new(dims: VideoDims, data: Vec<F>) -> Result<Self> {
        let (k, c, h, w) = dims;
        if k == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("video dims must be positive, got {dims:?}")));
        }
        Ok(Self { tensor: Tensor::from_vec(&[k, c, h, w], data)? })
    }

    pub fn from_tensor(tensor: Tensor<F>) -> Result<Self> {
        match *tensor.shape() {
            [k, c, h, w] if k > 0 && c > 0 && h > 0 && w > 0 => Ok(Self { tensor }),
            _ => Err(Error::Shape(format!("expected a K x C x H x W tensor, got {:?}", tensor.shape()))),
        }
    }

    pub fn zeros(dims: VideoDims) -> Self {
        let (k, c, h, w) = dims;
        Self { tensor: Tensor::zeros(&[k, c, h, w]) }
    }

    pub fn full(dims: VideoDims, value: F) -> Self {
        let (k, c, h, w) = dims;
        Self { tensor: Tensor::full(&[k, c, h, w], value) }
    }

    /// Standard-normal draw with the given dims.
    pub fn randn<R: Rng + ?Sized>(dims: VideoDims, rng: &mut R) -> Self {
        let (k, c, h, w) = dims;
        Self { tensor: Tensor::randn(&[k, c, h, w], rng) }
    }

    pub fn dims(&self) -> VideoDims {
        let s = self.tensor.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn frames(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[3]
    }

    pub fn data(&self) -> &[F] {
        self.tensor.data()
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        self.tensor.data_mut()
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<F> {
        self.tensor
    }

    /// Samples of frame `k`, `C x H x W`.
    pub fn frame(&self, k: usize) -> &[F] {
        let n = self.channels() * self.height() * self.width();
        &self.tensor.data()[k * n..(k + 1) * n]
    }

    /// One channel of one frame as an `H x W` plane.
    pub fn plane(&self, k: usize, c: usize) -> &[F] {
        let hw = self.height() * self.width();
        &self.frame(k)[c * hw..(c + 1) * hw]
    }

    /// Channel-last `[1, K, H, W, C]` layout used by the network.
    pub fn to_channel_last(&self) -> Tensor<F> {
        let (k, c, h, w) = self.dims();
        let t = if c == 1 {
            self.tensor.clone()
        } else {
            self.tensor.permute(&[0, 2, 3, 1])
        };
        t.reshape(&[1, k, h, w, c]).expect("same element count")
    }

    /// Inverse of [`to_channel_last`](Self::to_channel_last) for one sample
    /// `[K, H, W, C]` (a leading batch axis of 1 is accepted).
    pub fn from_channel_last(t: &Tensor<F>) -> Result<Self> {
        let s = t.shape();
        let (k, h, w, c) = match *s {
            [1, k, h, w, c] | [k, h, w, c] => (k, h, w, c),
            _ => return Err(Error::Shape(format!("expected [K,H,W,C], got {s:?}"))),
        };
        let flat = t.clone().reshape(&[k, h, w, c])?;
        let kchw = if c == 1 { flat } else { flat.permute(&[0, 3, 1, 2]) };
        Self::from_tensor(kchw.reshape(&[k, c, h, w])?)
    }

    pub fn ensure_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!("video dims {:?} vs {:?}", self.dims(), other.dims())));
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        self.ensure_same_dims(other)?;
        Ok(Self { tensor: self.tensor.zip_map(&other.tensor, f)? })
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { tensor: self.tensor.map(f) }
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        self.tensor.max_abs_diff(&other.tensor)
    }

    pub fn all_finite(&self) -> bool {
        self.tensor.all_finite()
    }

    pub fn cast<G: Element>(&self) -> VideoTensor<G> {
        VideoTensor { tensor: self.tensor.cast() }
    }
}

/// Integer class map `H x W` with class ids in `0..NUM_CLASSES`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    classes: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} ids, got {}",
                height * width,
                classes.len()
            )));
        }
        if let Some(bad) = classes.iter().find(|&&c| c as usize >= NUM_CLASSES) {
            return Err(Error::Validation(vec![format!(
                "class id {bad} outside 0..{}",
                NUM_CLASSES - 1
            )]));
        }
        Ok(Self { height, width, classes })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    /// Nearest-neighbour resize to `h x w`.
    pub fn resize_nearest(&self, h: usize, w: usize) -> Self {
        let classes = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| self.classes[(y * self.height / h) * self.width + x * self.width / w])
            .collect();
        Self { height: h, width: w, classes }
    }
}

/// The denoiser's conditioning input: a one-hot map `C_lab x H x W`, or the
/// null condition, which is all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticCondition {
    onehot: Tensor<f32>,
    is_null: bool,
}

impl SemanticCondition {
    /// One-hot encoding of a label map.
    pub fn from_labels(map: &LabelMap) -> Self {
        let (h, w) = (map.height, map.width);
        let mut data = vec![0.0f32; NUM_CLASSES * h * w];
        for (i, &c) in map.classes.iter().enumerate() {
            data[c as usize * h * w + i] = 1.0;
        }
        Self { onehot: Tensor::from_vec(&[NUM_CLASSES, h, w], data).expect("sized"), is_null: false }
    }

    /// Validates and wraps an existing one-hot array.
    pub fn from_onehot(onehot: Tensor<f32>) -> Result<Self> {
        let s = onehot.shape().to_vec();
        let [c, h, w] = s[..] else {
            return Err(Error::Shape(format!("one-hot condition must be C x H x W, got {s:?}")));
        };
        let hw = h * w;
        for p in 0..hw {
            let mut total = 0.0;
            for ch in 0..c {
                let v = onehot.data()[ch * hw + p];
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Validation(vec![format!("non-binary one-hot value {v}")]));
                }
                total += v;
            }
            if total != 1.0 {
                return Err(Error::Validation(vec![format!("pixel {p} has channel sum {total}")]));
            }
        }
        Ok(Self { onehot, is_null: false })
    }

    /// The null condition: a black image with every element zero.
    pub fn null(height: usize, width: usize) -> Self {
        Self { onehot: Tensor::zeros(&[NUM_CLASSES, height, width]), is_null: true }
    }

    pub fn null_like(&self) -> Self {
        Self::null(self.height(), self.width())
    }

    pub fn is_null(&self) -> bool {
        self.is_null
    }

    pub fn classes(&self) -> usize {
        self.onehot.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.onehot.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.onehot.shape()[2]
    }

    pub fn onehot(&self) -> &Tensor<f32> {
        &self.onehot
    }

    /// Per-pixel argmax, recovering the label map. Null conditions have none.
    pub fn argmax(&self) -> Option<LabelMap> {
        if self.is_null {
            return None;
        }
        let (c, h, w) = (self.classes(), self.height(), self.width());
        let hw = h * w;
        let classes = (0..hw)
            .map(|p| {
                (0..c)
                    .max_by(|&a, &b| self.onehot.data()[a * hw + p].total_cmp(&self.onehot.data()[b * hw + p]))
                    .unwrap_or(0) as u8
            })
            .collect();
        LabelMap::new(h, w, classes).ok()
    }

    /// Nearest-neighbour resize of the one-hot planes; one-hot structure and
    /// nullness are preserved.
    pub fn resize_nearest(&self, h: usize, w: usize) -> Self {
        let (c, sh, sw) = (self.classes(), self.height(), self.width());
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let plane = &self.onehot.data()[ch * sh * sw..(ch + 1) * sh * sw];
            for y in 0..h {
                for x in 0..w {
                    data.push(plane[(y * sh / h) * sw + x * sw / w]);
                }
            }
        }
        Self { onehot: Tensor::from_vec(&[c, h, w], data).expect("sized"), is_null: self.is_null }
    }

    /// Channel-last single-frame layout `[1, 1, H, W, C_lab]` for the network.
    pub fn to_channel_last<F: Element>(&self) -> Tensor<F> {
        let (c, h, w) = (self.classes(), self.height(), self.width());
        self.onehot.permute(&[1, 2, 0]).cast::<F>().reshape(&[1, 1, h, w, c]).expect("sized")
    }
}

/// `K` identical copies of the condition along a new leading frame axis:
/// `K x C_lab x H x W`.
pub fn replicate_condition(x: &SemanticCondition, frames: usize) -> Tensor<f32> {
    let (c, h, w) = (x.classes(), x.height(), x.width());
    let mut data = Vec::with_capacity(frames * c * h * w);
    for _ in 0..frames {
        data.extend_from_slice(x.onehot.data());
    }
    Tensor::from_vec(&[frames, c, h, w], data).expect("sized")
}
