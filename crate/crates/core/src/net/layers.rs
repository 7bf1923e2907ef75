//! Building blocks of the denoising UNet. Each layer registers its
//! parameters with a [`ParamBuilder`] at construction and records its forward
//! pass on a [`Graph`].

use crate::autograd::{ConvGeometry, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Element;

use super::params::{BoundParams, Init, ParamBuilder, ParamId};

pub(crate) const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
    geometry: ConvGeometry,
}

impl Conv {
    pub fn new(pb: &mut ParamBuilder, name: &str, ci: usize, co: usize, geometry: ConvGeometry, zero: bool) -> Self {
        let [kt, kh, kw] = geometry.kernel;
        let fan_in = kt * kh * kw * ci;
        pb.scoped(name, |pb| {
            let init = if zero { Init::Zeros } else { Init::FanIn(fan_in) };
            let w = pb.add("weight", &[kt, kh, kw, ci, co], init);
            let b = pb.add("bias", &[co], if zero { Init::Zeros } else { Init::FanIn(fan_in) });
            Self { w, b, geometry }
        })
    }

    pub fn forward<F: Element>(&self, g: &mut Graph<F>, p: &BoundParams, x: Var) -> Var {
        g.conv3d(x, p.var(self.w), Some(p.var(self.b)), self.geometry)
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, ci: usize, co: usize, zero: bool) -> Self {
        pb.scoped(name, |pb| {
            let init = if zero { Init::Zeros } else { Init::FanIn(ci) };
            Self { w: pb.add("weight", &[ci, co], init), b: pb.add("bias", &[co], init) }
        })
    }

    pub fn forward<F: Element>(&self, g: &mut Graph<F>, p: &BoundParams, x: Var) -> Var {
        g.linear(x, p.var(self.w), Some(p.var(self.b)))
    }
}

/// Group normalization across the whole clip with a learned per-channel
/// scale and shift.
#[derive(Debug, Clone)]
pub(crate) struct GroupNorm {
    scale: ParamId,
    shift: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, groups: usize) -> Self {
        pb.scoped(name, |pb| Self {
            scale: pb.add("scale", &[1, 1, 1, 1, channels], Init::Ones),
            shift: pb.add("shift", &[1, 1, 1, 1, channels], Init::Zeros),
            groups,
        })
    }

    pub fn forward<F: Element>(&self, g: &mut Graph<F>, p: &BoundParams, x: Var) -> Var {
        let n = g.group_norm(x, self.groups, false, F::of(NORM_EPS));
        let s = g.mul_broadcast(n, p.var(self.scale));
        g.add_broadcast(s, p.var(self.shift))
    }
}

/// Condition features shared by every spatially-adaptive normalization layer
/// of one forward pass.
pub(crate) struct ConditionFeatures {
    /// One-hot condition per decoder level, `[N, 1, H_l, W_l, C_lab]`.
    pub levels: Vec<Var>,
    /// Projected frame embeddings `[K, frame_width]`.
    pub frames: Var,
}

/// Spatially-adaptive normalization: parameter-free per-frame group
/// normalization modulated by a per-pixel scale `gamma(x, k)` and shift
/// `delta(x, k)` predicted from the label map `x` and the frame code `k`.
///
/// The trunk runs two `1x3x3` convolutions over the condition, adds a
/// per-frame bias projected from the frame code, then two `1x1` heads produce
/// `gamma - 1` and `delta`. Both heads start at zero, so a fresh layer is plain
/// group normalization.
#[derive(Debug, Clone)]
pub(crate) struct Spade {
    trunk1: Conv,
    trunk2: Conv,
    frame_proj: Linear,
    gamma: Linear,
    delta: Linear,
    groups: usize,
    hidden: usize,
    frame_width: usize,
    level: usize,
}

impl Spade {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        channels: usize,
        label_channels: usize,
        hidden: usize,
        frame_width: usize,
        groups: usize,
        level: usize,
    ) -> Self {
        pb.scoped(name, |pb| Self {
            trunk1: Conv::new(pb, "trunk1", label_channels, hidden, ConvGeometry::same(1, 3), false),
            trunk2: Conv::new(pb, "trunk2", hidden, hidden, ConvGeometry::same(1, 3), false),
            frame_proj: Linear::new(pb, "frame_proj", frame_width, hidden, false),
            gamma: Linear::new(pb, "gamma", hidden, channels, true),
            delta: Linear::new(pb, "delta", hidden, channels, true),
            groups,
            hidden,
            frame_width,
            level,
        })
    }

    /// Returns `(gamma, delta)`, each shaped like the feature map.
    pub fn modulation<F: Element>(
        &self,
        g: &mut Graph<F>,
        p: &BoundParams,
        cond: &ConditionFeatures,
    ) -> Result<(Var, Var)> {
        let x = *cond
            .levels
            .get(self.level)
            .ok_or_else(|| Error::Config(format!("no condition provided for level {}", self.level)))?;
        let fs = g.shape(cond.frames).to_vec();
        if fs.len() != 2 || fs[1] != self.frame_width {
            return Err(Error::Config(format!(
                "frame embedding {:?} does not match the modulation head input width {}",
                fs, self.frame_width
            )));
        }
        let frames = fs[0];
        let h = self.trunk1.forward(g, p, x);
        let h = g.silu(h);
        let h = self.trunk2.forward(g, p, h);
        let fb = self.frame_proj.forward(g, p, cond.frames);
        let fb = g.reshape(fb, &[1, frames, 1, 1, self.hidden]);
        let h = g.add_broadcast(h, fb);
        let h = g.silu(h);
        let gamma = self.gamma.forward(g, p, h);
        let gamma = g.affine(gamma, F::one(), F::one());
        let delta = self.delta.forward(g, p, h);
        Ok((gamma, delta))
    }

    pub fn forward<F: Element>(
        &self,
        g: &mut Graph<F>,
        p: &BoundParams,
        f: Var,
        cond: &ConditionFeatures,
    ) -> Result<Var> {
        let fshape = g.shape(f).to_vec();
        let x = *cond
            .levels
            .get(self.level)
            .ok_or_else(|| Error::Config(format!("no condition provided for level {}", self.level)))?;
        let xs = g.shape(x);
        if xs.len() != 5 || xs[2] != fshape[2] || xs[3] != fshape[3] || xs[0] != fshape[0] {
            return Err(Error::Shape(format!(
                "condition {xs:?} does not match feature resolution {fshape:?}"
            )));
        }
        let (gamma, delta) = self.modulation(g, p, cond)?;
        let n = g.group_norm(f, self.groups, true, F::of(NORM_EPS));
        let out = g.mul(gamma, n);
        Ok(g.add(out, delta))
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Norm {
    Group(GroupNorm),
    Spade(Spade),
}

impl Norm {
    pub fn forward<F: Element>(
        &self,
        g: &mut Graph<F>,
        p: &BoundParams,
        x: Var,
        cond: Option<&ConditionFeatures>,
    ) -> Result<Var> {
        match self {
            Norm::Group(n) => Ok(n.forward(g, p, x)),
            Norm::Spade(s) => {
                let cond = cond.ok_or_else(|| Error::Config("modulated normalization needs a condition".into()))?;
                s.forward(g, p, x, cond)
            }
        }
    }
}

/// Two 3D convolution stages with normalization and SiLU, the step
/// embedding added as a per-channel bias after the first stage, and a skip
/// connection (a `1x1x1` projection when the width changes).
#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time_proj: Linear,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
    out_channels: usize,
}

pub(crate) struct ResBlockSpec {
    pub ci: usize,
    pub co: usize,
    pub time_width: usize,
    pub groups: usize,
    pub temporal_kernel: usize,
    /// `Some((label_channels, hidden, frame_width, level))` for modulated norms.
    pub spade: Option<(usize, usize, usize, usize)>,
}

impl ResBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, spec: ResBlockSpec) -> Self {
        let ResBlockSpec { ci, co, time_width, groups, temporal_kernel, spade } = spec;
        pb.scoped(name, |pb| {
            let norm = |pb: &mut ParamBuilder, name: &str, ch: usize| match spade {
                Some((lab, hidden, fw, level)) => Norm::Spade(Spade::new(pb, name, ch, lab, hidden, fw, groups, level)),
                None => Norm::Group(GroupNorm::new(pb, name, ch, groups)),
            };
            let geo = ConvGeometry::same(temporal_kernel, 3);
            Self {
                norm1: norm(pb, "norm1", ci),
                conv1: Conv::new(pb, "conv1", ci, co, geo, false),
                time_proj: Linear::new(pb, "time_proj", time_width, co, false),
                norm2: norm(pb, "norm2", co),
                conv2: Conv::new(pb, "conv2", co, co, geo, true),
                skip: (ci != co).then(|| Conv::new(pb, "skip", ci, co, ConvGeometry::same(1, 1), false)),
                out_channels: co,
            }
        })
    }

    /// `temb_act` is the SiLU-activated step embedding `[N, time_width]`.
    pub fn forward<F: Element>(
        &self,
        g: &mut Graph<F>,
        p: &BoundParams,
        x: Var,
        temb_act: Var,
        cond: Option<&ConditionFeatures>,
    ) -> Result<Var> {
        let n = g.shape(x)[0];
        let h = self.norm1.forward(g, p, x, cond)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, p, h);
        let tb = self.time_proj.forward(g, p, temb_act);
        let tb = g.reshape(tb, &[n, 1, 1, 1, self.out_channels]);
        let h = g.add_broadcast(h, tb);
        let h = self.norm2.forward(g, p, h, cond)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h);
        let skip = match &self.skip {
            Some(s) => s.forward(g, p, x),
            None => x,
        };
        Ok(g.add(skip, h))
    }

    pub fn second_conv(&self) -> ParamId {
        self.conv2.weight()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum AttentionAxis {
    /// Tokens are the `H x W` positions of one frame.
    Spatial,
    /// Tokens are the `K` frames at one pixel.
    Temporal,
}

/// Residual multi-head self-attention along one factorized axis.
#[derive(Debug, Clone)]
pub(crate) struct AttentionBlock {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    axis: AttentionAxis,
}

impl AttentionBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, head_dim: usize, groups: usize, axis: AttentionAxis) -> Self {
        let heads = (channels / head_dim.max(1)).max(1);
        pb.scoped(name, |pb| Self {
            norm: GroupNorm::new(pb, "norm", channels, groups),
            q: Linear::new(pb, "q", channels, channels, false),
            k: Linear::new(pb, "k", channels, channels, false),
            v: Linear::new(pb, "v", channels, channels, false),
            out: Linear::new(pb, "out", channels, channels, true),
            heads,
            axis,
        })
    }

    /// `[N, K, H, W, C]` into `[B * heads, L, d]` token batches.
    fn to_tokens<F: Element>(&self, g: &mut Graph<F>, x: Var, s: &[usize]) -> Var {
        let (n, k, h, w, c) = (s[0], s[1], s[2], s[3], s[4]);
        let d = c / self.heads;
        let (x, b, l) = match self.axis {
            AttentionAxis::Spatial => (x, n * k, h * w),
            AttentionAxis::Temporal => (g.permute(x, &[0, 2, 3, 1, 4]), n * h * w, k),
        };
        if self.heads == 1 {
            return g.reshape(x, &[b, l, c]);
        }
        let x = g.reshape(x, &[b, l, self.heads, d]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[b * self.heads, l, d])
    }

    fn from_tokens<F: Element>(&self, g: &mut Graph<F>, o: Var, s: &[usize]) -> Var {
        let (n, k, h, w, c) = (s[0], s[1], s[2], s[3], s[4]);
        let d = c / self.heads;
        let (b, l) = match self.axis {
            AttentionAxis::Spatial => (n * k, h * w),
            AttentionAxis::Temporal => (n * h * w, k),
        };
        let o = if self.heads == 1 {
            o
        } else {
            let o = g.reshape(o, &[b, self.heads, l, d]);
            g.permute(o, &[0, 2, 1, 3])
        };
        match self.axis {
            AttentionAxis::Spatial => g.reshape(o, &[n, k, h, w, c]),
            AttentionAxis::Temporal => {
                let o = g.reshape(o, &[n, h, w, k, c]);
                g.permute(o, &[0, 3, 1, 2, 4])
            }
        }
    }

    pub fn forward<F: Element>(&self, g: &mut Graph<F>, p: &BoundParams, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let h = self.norm.forward(g, p, x);
        let q = self.q.forward(g, p, h);
        let k = self.k.forward(g, p, h);
        let v = self.v.forward(g, p, h);
        let (q, k, v) = (self.to_tokens(g, q, &s), self.to_tokens(g, k, &s), self.to_tokens(g, v, &s));
        let d = s[4] / self.heads;
        let o = g.attention(q, k, v, F::of(1.0 / (d as f64).sqrt()));
        let o = self.from_tokens(g, o, &s);
        let o = self.out.forward(g, p, o);
        g.add(x, o)
    }
}

/// Spatial attention followed by temporal attention.
#[derive(Debug, Clone)]
pub(crate) struct FactorizedAttention {
    pub spatial: AttentionBlock,
    pub temporal: AttentionBlock,
}

impl FactorizedAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, head_dim: usize, groups: usize) -> Self {
        pb.scoped(name, |pb| Self {
            spatial: AttentionBlock::new(pb, "spatial", channels, head_dim, groups, AttentionAxis::Spatial),
            temporal: AttentionBlock::new(pb, "temporal", channels, head_dim, groups, AttentionAxis::Temporal),
        })
    }

    pub fn forward<F: Element>(&self, g: &mut Graph<F>, p: &BoundParams, x: Var) -> Var {
        let h = self.spatial.forward(g, p, x);
        self.temporal.forward(g, p, h)
    }
}
