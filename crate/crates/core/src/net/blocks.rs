//! Stand-alone versions of the UNet building blocks, each with its own
//! parameter inventory, operating on single feature maps `K x C x H x W`.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use crate::video::{SemanticCondition, VideoTensor};

use super::embed::frame_table;
use super::layers::{AttentionAxis, AttentionBlock, ConditionFeatures, ResBlock, ResBlockSpec, Spade};
use super::params::{BoundParams, DenoiserParameters, Inventory, ParamBuilder};

/// A feature map at some resolution level, `K x C_f x H_f x W_f`.
pub type FeatureMap<F> = VideoTensor<F>;

/// Runs `build` on a fresh graph. With `upstream`, also returns the
/// parameter gradients of `sum(out * upstream)`.
fn run<F: Element>(
    params: &DenoiserParameters<F>,
    upstream: Option<&FeatureMap<F>>,
    build: impl FnOnce(&mut Graph<F>, &BoundParams) -> Result<Var>,
) -> Result<(FeatureMap<F>, Option<DenoiserParameters<F>>)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, upstream.is_some());
    let out = build(&mut g, &p)?;
    let value = FeatureMap::from_channel_last(g.value(out))?;
    let Some(up) = upstream else {
        return Ok((value, None));
    };
    value.ensure_same_dims(up)?;
    let w = g.input(up.to_channel_last());
    let prod = g.mul(out, w);
    let root = g.sum(prod);
    let mut grads = g.backward(root);
    let mut result = params.clone();
    for (t, v) in result.tensors_mut().iter_mut().zip(p.vars()) {
        *t = grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape()));
    }
    Ok((value, Some(result)))
}

fn check_groups(channels: usize, groups: usize) -> Result<()> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::Config(format!("{groups} groups do not divide {channels} channels")));
    }
    Ok(())
}

fn check_channels<F: Element>(f: &FeatureMap<F>, channels: usize) -> Result<()> {
    if f.channels() != channels {
        return Err(Error::Shape(format!("feature map has {} channels, layer expects {channels}", f.channels())));
    }
    Ok(())
}

/// Spatially-adaptive normalization over a single feature map.
#[derive(Debug, Clone)]
pub struct SpadeLayer {
    layer: Spade,
    channels: usize,
    label_channels: usize,
    frame_width: usize,
    inventory: Inventory,
}

impl SpadeLayer {
    pub fn new(channels: usize, label_channels: usize, hidden: usize, frame_width: usize, groups: usize) -> Result<Self> {
        check_groups(channels, groups)?;
        if frame_width == 0 || frame_width % 2 != 0 || hidden == 0 {
            return Err(Error::Config(format!("invalid head widths: hidden {hidden}, frame {frame_width}")));
        }
        let mut pb = ParamBuilder::default();
        let layer = Spade::new(&mut pb, "spade", channels, label_channels, hidden, frame_width, groups, 0);
        Ok(Self { layer, channels, label_channels, frame_width, inventory: pb.finish() })
    }

    pub fn inventory(&self) -> &Inventory {
        &self.inventory
    }

    pub fn init_params<F: Element>(&self, seed: u64) -> DenoiserParameters<F> {
        DenoiserParameters::init(&self.inventory, seed)
    }

    /// Sinusoidal frame codes `[K, frame_width]` for a clip of `frames` frames.
    pub fn frame_codes<F: Element>(&self, frames: usize) -> Result<Tensor<F>> {
        frame_table(frames, self.frame_width)
    }

    fn features<F: Element>(
        &self,
        g: &mut Graph<F>,
        f: &FeatureMap<F>,
        x: &SemanticCondition,
        frame_codes: &Tensor<F>,
    ) -> Result<ConditionFeatures> {
        check_channels(f, self.channels)?;
        if (x.height(), x.width()) != (f.height(), f.width()) {
            return Err(Error::Shape(format!(
                "condition {}x{} does not match feature resolution {}x{}",
                x.height(),
                x.width(),
                f.height(),
                f.width()
            )));
        }
        if x.classes() != self.label_channels {
            return Err(Error::Shape(format!("condition has {} classes, layer expects {}", x.classes(), self.label_channels)));
        }
        if frame_codes.shape().first() != Some(&f.frames()) {
            return Err(Error::Shape(format!("{:?} frame codes for {} frames", frame_codes.shape(), f.frames())));
        }
        let levels = vec![g.input(x.to_channel_last())];
        Ok(ConditionFeatures { levels, frames: g.input(frame_codes.clone()) })
    }

    /// Per-pixel, per-frame `(gamma, delta)`, each shaped like `f`.
    pub fn modulation<F: Element>(
        &self,
        params: &DenoiserParameters<F>,
        f: &FeatureMap<F>,
        x: &SemanticCondition,
        frame_codes: &Tensor<F>,
    ) -> Result<(FeatureMap<F>, FeatureMap<F>)> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let cond = self.features(&mut g, f, x, frame_codes)?;
        let (gamma, delta) = self.layer.modulation(&mut g, &p, &cond)?;
        Ok((FeatureMap::from_channel_last(g.value(gamma))?, FeatureMap::from_channel_last(g.value(delta))?))
    }

    /// `gamma(x, k) * GroupNorm(f) + delta(x, k)` with per-frame,
    /// parameter-free group normalization.
    pub fn forward<F: Element>(
        &self,
        params: &DenoiserParameters<F>,
        f: &FeatureMap<F>,
        x: &SemanticCondition,
        frame_codes: &Tensor<F>,
    ) -> Result<FeatureMap<F>> {
        run(params, None, |g, p| {
            let cond = self.features(g, f, x, frame_codes)?;
            let fv = g.input(f.to_channel_last());
            self.layer.forward(g, p, fv, &cond)
        })
        .map(|(v, _)| v)
    }
}

/// Which axis an [`AttentionLayer`] attends over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// Over the `H x W` positions of each frame.
    Spatial,
    /// Over the `K` frames at each pixel.
    Temporal,
}

/// Residual self-attention along one factorized axis.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    block: AttentionBlock,
    channels: usize,
    inventory: Inventory,
}

impl AttentionLayer {
    pub fn new(kind: AttentionKind, channels: usize, head_dim: usize, groups: usize) -> Result<Self> {
        check_groups(channels, groups)?;
        if head_dim == 0 || (channels > head_dim && channels % head_dim != 0) {
            return Err(Error::Config(format!("head dim {head_dim} does not divide {channels} channels")));
        }
        let axis = match kind {
            AttentionKind::Spatial => AttentionAxis::Spatial,
            AttentionKind::Temporal => AttentionAxis::Temporal,
        };
        let mut pb = ParamBuilder::default();
        let block = AttentionBlock::new(&mut pb, "attention", channels, head_dim, groups, axis);
        Ok(Self { block, channels, inventory: pb.finish() })
    }

    pub fn inventory(&self) -> &Inventory {
        &self.inventory
    }

    pub fn init_params<F: Element>(&self, seed: u64) -> DenoiserParameters<F> {
        DenoiserParameters::init(&self.inventory, seed)
    }

    pub fn forward<F: Element>(&self, params: &DenoiserParameters<F>, f: &FeatureMap<F>) -> Result<FeatureMap<F>> {
        check_channels(f, self.channels)?;
        run(params, None, |g, p| {
            let x = g.input(f.to_channel_last());
            Ok(self.block.forward(g, p, x))
        })
        .map(|(v, _)| v)
    }
}

/// 3D residual block with a step-embedding bias.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    block: ResBlock,
    in_channels: usize,
    time_width: usize,
    inventory: Inventory,
}

impl ResidualBlock {
    pub fn new(in_channels: usize, out_channels: usize, time_width: usize, groups: usize, temporal_kernel: usize) -> Result<Self> {
        check_groups(in_channels, groups)?;
        check_groups(out_channels, groups)?;
        if temporal_kernel % 2 == 0 {
            return Err(Error::Config(format!("temporal kernel must be odd, got {temporal_kernel}")));
        }
        let mut pb = ParamBuilder::default();
        let spec = ResBlockSpec { ci: in_channels, co: out_channels, time_width, groups, temporal_kernel, spade: None };
        let block = ResBlock::new(&mut pb, "res", spec);
        Ok(Self { block, in_channels, time_width, inventory: pb.finish() })
    }

    pub fn inventory(&self) -> &Inventory {
        &self.inventory
    }

    pub fn init_params<F: Element>(&self, seed: u64) -> DenoiserParameters<F> {
        DenoiserParameters::init(&self.inventory, seed)
    }

    fn record<F: Element>(&self, g: &mut Graph<F>, p: &BoundParams, f: &FeatureMap<F>, t_emb: &[F]) -> Result<Var> {
        check_channels(f, self.in_channels)?;
        if t_emb.len() != self.time_width {
            return Err(Error::Shape(format!("step embedding has {} values, block expects {}", t_emb.len(), self.time_width)));
        }
        let x = g.input(f.to_channel_last());
        let t = g.input(Tensor::from_vec(&[1, self.time_width], t_emb.to_vec())?);
        self.block.forward(g, p, x, t, None)
    }

    /// `t_emb` is the activated step embedding of width `time_width`.
    pub fn forward<F: Element>(&self, params: &DenoiserParameters<F>, f: &FeatureMap<F>, t_emb: &[F]) -> Result<FeatureMap<F>> {
        run(params, None, |g, p| self.record(g, p, f, t_emb)).map(|(v, _)| v)
    }

    /// Output together with the parameter gradients of `sum(output * upstream)`.
    pub fn vjp<F: Element>(
        &self,
        params: &DenoiserParameters<F>,
        f: &FeatureMap<F>,
        t_emb: &[F],
        upstream: &FeatureMap<F>,
    ) -> Result<(FeatureMap<F>, DenoiserParameters<F>)> {
        let (v, g) = run(params, Some(upstream), |g, p| self.record(g, p, f, t_emb))?;
        Ok((v, g.expect("gradients requested")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::video::LabelMap;

    fn randomize(p: &mut DenoiserParameters<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in p.tensors_mut() {
            *t = Tensor::randn(t.shape(), &mut rng).map(|v| 0.3 * v);
        }
    }

    #[test]
    fn spade_rejects_mismatched_inputs() {
        let layer = SpadeLayer::new(8, 4, 8, 6, 4).unwrap();
        let p = layer.init_params::<f64>(0);
        let f = FeatureMap::zeros((2, 8, 4, 4));
        let x = SemanticCondition::null(4, 4);
        let wrong_width = Tensor::zeros(&[2, 4]);
        assert!(matches!(layer.forward(&p, &f, &x, &wrong_width), Err(Error::Config(_))));
        let codes = layer.frame_codes(2).unwrap();
        let small = SemanticCondition::null(2, 2);
        assert!(matches!(layer.forward(&p, &f, &small, &codes), Err(Error::Shape(_))));
        assert!(SpadeLayer::new(6, 4, 8, 6, 4).is_err());
    }

    #[test]
    fn modulation_varies_with_frame_and_class() {
        let layer = SpadeLayer::new(4, 4, 8, 6, 2).unwrap();
        let mut p = layer.init_params::<f64>(1);
        randomize(&mut p, 2);
        let f = FeatureMap::zeros((3, 4, 4, 4));
        let classes = (0..16).map(|i| (i % 4) as u8).collect();
        let x = SemanticCondition::from_labels(&LabelMap::new(4, 4, classes).unwrap());
        let (gamma, delta) = layer.modulation(&p, &f, &x, &layer.frame_codes(3).unwrap()).unwrap();
        assert_ne!(gamma.frame(0), gamma.frame(1));
        assert_ne!(delta.plane(0, 0)[0], delta.plane(0, 0)[1]);
    }

    #[test]
    fn residual_width_change() {
        let block = ResidualBlock::new(8, 16, 12, 4, 3).unwrap();
        let p = block.init_params::<f32>(0);
        let f = FeatureMap::randn((2, 8, 4, 4), &mut ChaCha8Rng::seed_from_u64(0));
        let out = block.forward(&p, &f, &[0.5; 12]).unwrap();
        assert_eq!(out.dims(), (2, 16, 4, 4));
        assert!(block.forward(&p, &f, &[0.5; 11]).is_err());
    }
}
