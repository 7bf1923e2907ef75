use crate::autograd::{ConvGeometry, Graph, Var};
use crate::diffusion::DiffusionStep;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use crate::video::{SemanticCondition, VideoTensor};

use super::embed::{frame_table, time_table};
use super::layers::{ConditionFeatures, Conv, FactorizedAttention, GroupNorm, Linear, Norm, ResBlock, ResBlockSpec, Spade};
use super::params::{BoundParams, DenoiserParameters, Inventory, ParamBuilder, ParamId};
use super::{ConditionMode, NetConfig};

struct Stage {
    block: ResBlock,
    attention: Option<FactorizedAttention>,
}

struct Unet {
    time_in: Linear,
    time_out: Linear,
    frame_mlp: Option<Linear>,
    conv_in: Conv,
    encoder: Vec<Vec<Stage>>,
    down: Vec<Conv>,
    mid1: ResBlock,
    mid_attention: Option<FactorizedAttention>,
    mid2: ResBlock,
    decoder: Vec<Vec<Stage>>,
    up: Vec<Option<Conv>>,
    norm_out: Norm,
    conv_out: Conv,
}

/// The denoising network: its configuration, layer graph and parameter
/// inventory. Parameters are held separately in [`DenoiserParameters`] so
/// one network can evaluate raw and averaged weights alike.
pub struct Denoiser {
    config: NetConfig,
    unet: Unet,
    inventory: Inventory,
}

impl std::fmt::Debug for Denoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Denoiser")
            .field("config", &self.config)
            .field("parameters", &self.inventory.len())
            .finish()
    }
}

impl Denoiser {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::default();
        let unet = build(&config, &mut pb);
        Ok(Self { config, unet, inventory: pb.finish() })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn inventory(&self) -> &Inventory {
        &self.inventory
    }

    pub fn init_params<F: Element>(&self, seed: u64) -> DenoiserParameters<F> {
        DenoiserParameters::init(&self.inventory, seed)
    }

    /// Checks the spatial size against the downsampling depth.
    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let d = self.config.spatial_divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::Config(format!(
                "spatial size {h}x{w} must be divisible by {d} for {} levels",
                self.config.levels()
            )));
        }
        Ok(())
    }

    /// Records a forward pass on `g`.
    ///
    /// * `noisy`: `[N, K, H, W, C]` noised clips.
    /// * `conditions`: `[N, 1, H, W, C_lab]` one-hot maps (zeros for null).
    /// * `steps`: diffusion step per sample.
    /// * `extra`: `[N, K, H, W, C_extra]` when the network takes extra input channels.
    pub fn forward_graph<F: Element>(
        &self,
        g: &mut Graph<F>,
        p: &BoundParams,
        noisy: Var,
        conditions: &Tensor<F>,
        steps: &[usize],
        extra: Option<Var>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let s = g.shape(noisy).to_vec();
        let [n, k, h, w, c] = s[..] else {
            return Err(Error::Shape(format!("noisy input must be [N,K,H,W,C], got {s:?}")));
        };
        if c != cfg.in_channels {
            return Err(Error::Shape(format!("input has {c} channels, network expects {}", cfg.in_channels)));
        }
        self.check_spatial(h, w)?;
        if steps.len() != n {
            return Err(Error::Shape(format!("{} step indices for a batch of {n}", steps.len())));
        }
        if conditions.shape() != [n, 1, h, w, cfg.label_channels] {
            return Err(Error::Shape(format!(
                "conditions {:?} do not match [{n}, 1, {h}, {w}, {}]",
                conditions.shape(),
                cfg.label_channels
            )));
        }
        let mut input = noisy;
        match (extra, cfg.extra_input_channels) {
            (Some(e), ce) if ce > 0 => {
                if g.shape(e) != [n, k, h, w, ce] {
                    return Err(Error::Shape(format!("extra input {:?} does not match [{n},{k},{h},{w},{ce}]", g.shape(e))));
                }
                input = g.concat_last(input, e);
            }
            (None, 0) => {}
            (Some(_), _) => return Err(Error::Shape("network takes no extra input channels".into())),
            (None, ce) => return Err(Error::Shape(format!("network expects {ce} extra input channels"))),
        }

        let u = &self.unet;
        let temb = g.input(time_table(steps, cfg.time_embed_dim)?);
        let temb = u.time_in.forward(g, p, temb);
        let temb = g.silu(temb);
        let temb = u.time_out.forward(g, p, temb);
        let temb_act = g.silu(temb);

        let cond = match cfg.condition_mode {
            ConditionMode::Concat => {
                let rep = replicate_frames(conditions, k);
                let rep = g.input(rep);
                input = g.concat_last(input, rep);
                None
            }
            ConditionMode::Spade => {
                let frames = g.input(frame_table(k, cfg.frame_embed_dim)?);
                let mlp = u.frame_mlp.as_ref().expect("spade networks own a frame projection");
                let frames = mlp.forward(g, p, frames);
                let frames = g.silu(frames);
                let levels = (0..cfg.levels())
                    .map(|l| g.input(resize_condition(conditions, h >> l, w >> l)))
                    .collect();
                Some(ConditionFeatures { levels, frames })
            }
        };
        let cond = cond.as_ref();

        let mut hcur = u.conv_in.forward(g, p, input);
        let mut skips = vec![hcur];
        for (l, stages) in u.encoder.iter().enumerate() {
            for st in stages {
                hcur = st.block.forward(g, p, hcur, temb_act, None)?;
                if let Some(a) = &st.attention {
                    hcur = a.forward(g, p, hcur);
                }
                skips.push(hcur);
            }
            if let Some(d) = u.down.get(l) {
                hcur = d.forward(g, p, hcur);
                skips.push(hcur);
            }
        }
        hcur = u.mid1.forward(g, p, hcur, temb_act, None)?;
        if let Some(a) = &u.mid_attention {
            hcur = a.forward(g, p, hcur);
        }
        hcur = u.mid2.forward(g, p, hcur, temb_act, None)?;
        for l in (0..cfg.levels()).rev() {
            for st in &u.decoder[l] {
                let skip = skips.pop().expect("one skip per decoder block");
                hcur = g.concat_last(hcur, skip);
                hcur = st.block.forward(g, p, hcur, temb_act, cond)?;
                if let Some(a) = &st.attention {
                    hcur = a.forward(g, p, hcur);
                }
            }
            if let Some(up) = &u.up[l] {
                hcur = g.upsample_nearest(hcur, 2);
                hcur = up.forward(g, p, hcur);
            }
        }
        debug_assert!(skips.is_empty());
        let hcur = u.norm_out.forward(g, p, hcur, cond)?;
        let hcur = g.silu(hcur);
        Ok(u.conv_out.forward(g, p, hcur))
    }

    /// Noise estimate for one noisy clip under one condition.
    pub fn denoise_forward<F: Element>(
        &self,
        params: &DenoiserParameters<F>,
        y_t: &VideoTensor<F>,
        x: &SemanticCondition,
        t: DiffusionStep,
    ) -> Result<VideoTensor<F>> {
        let mut out = self.predict_conditions(params, y_t, &[x], t, None)?;
        Ok(out.pop().expect("one output per condition"))
    }

    /// Evaluates the same noisy clip under several conditions in one batch.
    pub fn predict_conditions<F: Element>(
        &self,
        params: &DenoiserParameters<F>,
        y_t: &VideoTensor<F>,
        conditions: &[&SemanticCondition],
        t: DiffusionStep,
        extra: Option<&VideoTensor<F>>,
    ) -> Result<Vec<VideoTensor<F>>> {
        let n = conditions.len();
        let (k, c, h, w) = y_t.dims();
        let one = y_t.to_channel_last();
        let mut noisy = Vec::with_capacity(n * one.numel());
        for _ in 0..n {
            noisy.extend_from_slice(one.data());
        }
        let noisy = Tensor::from_vec(&[n, k, h, w, c], noisy)?;
        let conds = stack_conditions(conditions, h, w, self.config.label_channels)?;
        let extra = extra
            .map(|e| {
                let one = e.to_channel_last();
                let ce = e.channels();
                let mut data = Vec::with_capacity(n * one.numel());
                for _ in 0..n {
                    data.extend_from_slice(one.data());
                }
                Tensor::from_vec(&[n, k, h, w, ce], data)
            })
            .transpose()?;
        let out = self.predict_batch(params, noisy, &conds, &vec![t.get(); n], extra)?;
        split_batch(&out)
    }

    /// Inference over a prepared channel-last batch; the result is checked
    /// for non-finite values.
    pub fn predict_batch<F: Element>(
        &self,
        params: &DenoiserParameters<F>,
        noisy: Tensor<F>,
        conditions: &Tensor<F>,
        steps: &[usize],
        extra: Option<Tensor<F>>,
    ) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.input(noisy);
        let e = extra.map(|e| g.input(e));
        let out = self.forward_graph(&mut g, &p, x, conditions, steps, e)?;
        let out = g.value(out).clone();
        if !out.all_finite() {
            return Err(Error::NumericFault("denoiser produced non-finite values".into()));
        }
        Ok(out)
    }

    /// Handles to individual layers, for tests and diagnostics.
    pub fn probe(&self) -> DenoiserProbe {
        let u = &self.unet;
        let mut second_convs = vec![];
        for stages in u.encoder.iter().chain(&u.decoder) {
            second_convs.extend(stages.iter().map(|s| s.block.second_conv()));
        }
        second_convs.push(u.mid1.second_conv());
        second_convs.push(u.mid2.second_conv());
        DenoiserProbe { residual_second_convs: second_convs }
    }
}

/// Parameter handles inside a [`Denoiser`].
#[derive(Debug, Clone)]
pub struct DenoiserProbe {
    pub residual_second_convs: Vec<ParamId>,
}

fn build(cfg: &NetConfig, pb: &mut ParamBuilder) -> Unet {
    let levels = cfg.levels();
    let tw = cfg.time_width();
    let groups = cfg.groups;
    let kt = cfg.temporal_kernel;
    let spade = cfg.condition_mode == ConditionMode::Spade;
    let spade_spec = |level: usize| spade.then_some((cfg.label_channels, cfg.spade_hidden, cfg.frame_embed_dim, level));
    let attn = |pb: &mut ParamBuilder, l: usize, ch: usize| {
        cfg.attention_levels
            .contains(&l)
            .then(|| FactorizedAttention::new(pb, "attention", ch, cfg.attention_head_dim, groups))
    };

    let time_in = Linear::new(pb, "time_mlp.0", cfg.time_embed_dim, tw, false);
    let time_out = Linear::new(pb, "time_mlp.1", tw, tw, false);
    let frame_mlp = spade.then(|| Linear::new(pb, "frame_mlp", cfg.frame_embed_dim, cfg.frame_embed_dim, false));
    let mut in_ch = cfg.in_channels + cfg.extra_input_channels;
    if !spade {
        in_ch += cfg.label_channels;
    }
    let conv_in = Conv::new(pb, "conv_in", in_ch, cfg.base_width, ConvGeometry::same(kt, 3), false);

    let mut skip_widths = vec![cfg.base_width];
    let mut cur = cfg.base_width;
    let mut encoder = vec![];
    let mut down = vec![];
    for l in 0..levels {
        let wl = cfg.level_width(l);
        let stages = pb.scoped(format!("encoder.{l}"), |pb| {
            (0..cfg.res_blocks_per_level)
                .map(|b| {
                    pb.scoped(b.to_string(), |pb| {
                        let block = ResBlock::new(
                            pb,
                            "res",
                            ResBlockSpec { ci: cur, co: wl, time_width: tw, groups, temporal_kernel: kt, spade: None },
                        );
                        cur = wl;
                        skip_widths.push(cur);
                        Stage { block, attention: attn(pb, l, wl) }
                    })
                })
                .collect::<Vec<_>>()
        });
        encoder.push(stages);
        if l + 1 < levels {
            down.push(Conv::new(pb, &format!("down.{l}"), cur, cur, ConvGeometry::down2(kt), false));
            skip_widths.push(cur);
        }
    }
    let coarsest = levels - 1;
    let mid_spec = ResBlockSpec { ci: cur, co: cur, time_width: tw, groups, temporal_kernel: kt, spade: None };
    let mid1 = ResBlock::new(pb, "mid.res1", mid_spec);
    let mid_attention = pb.scoped("mid", |pb| attn(pb, coarsest, cur));
    let mid2 = ResBlock::new(
        pb,
        "mid.res2",
        ResBlockSpec { ci: cur, co: cur, time_width: tw, groups, temporal_kernel: kt, spade: None },
    );

    let mut decoder: Vec<Vec<Stage>> = (0..levels).map(|_| vec![]).collect();
    let mut up: Vec<Option<Conv>> = (0..levels).map(|_| None).collect();
    for l in (0..levels).rev() {
        let wl = cfg.level_width(l);
        let stages = pb.scoped(format!("decoder.{l}"), |pb| {
            (0..=cfg.res_blocks_per_level)
                .map(|b| {
                    pb.scoped(b.to_string(), |pb| {
                        let skip = skip_widths.pop().expect("skip width");
                        let block = ResBlock::new(
                            pb,
                            "res",
                            ResBlockSpec {
                                ci: cur + skip,
                                co: wl,
                                time_width: tw,
                                groups,
                                temporal_kernel: kt,
                                spade: spade_spec(l),
                            },
                        );
                        cur = wl;
                        Stage { block, attention: attn(pb, l, wl) }
                    })
                })
                .collect::<Vec<_>>()
        });
        decoder[l] = stages;
        if l > 0 {
            up[l] = Some(Conv::new(pb, &format!("up.{l}"), cur, cur, ConvGeometry::same(kt, 3), false));
        }
    }
    let norm_out = if spade {
        Norm::Spade(Spade::new(pb, "norm_out", cur, cfg.label_channels, cfg.spade_hidden, cfg.frame_embed_dim, groups, 0))
    } else {
        Norm::Group(GroupNorm::new(pb, "norm_out", cur, groups))
    };
    let conv_out = Conv::new(pb, "conv_out", cur, cfg.in_channels, ConvGeometry::same(kt, 3), true);
    Unet {
        time_in,
        time_out,
        frame_mlp,
        conv_in,
        encoder,
        down,
        mid1,
        mid_attention,
        mid2,
        decoder,
        up,
        norm_out,
        conv_out,
    }
}

/// `[N, 1, H, W, C]` repeated along the frame axis to `[N, K, H, W, C]`.
pub(crate) fn replicate_frames<F: Element>(t: &Tensor<F>, frames: usize) -> Tensor<F> {
    let s = t.shape();
    let per = s[2] * s[3] * s[4];
    let mut data = Vec::with_capacity(s[0] * frames * per);
    for n in 0..s[0] {
        for _ in 0..frames {
            data.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
        }
    }
    Tensor::from_vec(&[s[0], frames, s[2], s[3], s[4]], data).expect("sized")
}

/// Nearest-neighbour resize of `[N, 1, H, W, C]` condition maps.
pub(crate) fn resize_condition<F: Element>(t: &Tensor<F>, h: usize, w: usize) -> Tensor<F> {
    let s = t.shape();
    let (sh, sw, c) = (s[2], s[3], s[4]);
    if (sh, sw) == (h, w) {
        return t.clone();
    }
    let mut data = Vec::with_capacity(s[0] * h * w * c);
    for n in 0..s[0] {
        for y in 0..h {
            for x in 0..w {
                let src = ((n * sh + y * sh / h) * sw + x * sw / w) * c;
                data.extend_from_slice(&t.data()[src..src + c]);
            }
        }
    }
    Tensor::from_vec(&[s[0], 1, h, w, c], data).expect("sized")
}

/// Stacks conditions into `[N, 1, H, W, C_lab]`, resizing to `h x w` where needed.
pub(crate) fn stack_conditions<F: Element>(
    conditions: &[&SemanticCondition],
    h: usize,
    w: usize,
    label_channels: usize,
) -> Result<Tensor<F>> {
    let mut data = Vec::with_capacity(conditions.len() * h * w * label_channels);
    for c in conditions {
        if c.classes() != label_channels {
            return Err(Error::Shape(format!("condition has {} classes, network expects {label_channels}", c.classes())));
        }
        let c = if (c.height(), c.width()) == (h, w) { (*c).clone() } else { c.resize_nearest(h, w) };
        data.extend_from_slice(c.to_channel_last::<F>().data());
    }
    Tensor::from_vec(&[conditions.len(), 1, h, w, label_channels], data)
}

pub(crate) fn split_batch<F: Element>(t: &Tensor<F>) -> Result<Vec<VideoTensor<F>>> {
    let s = t.shape();
    let per = t.numel() / s[0].max(1);
    (0..s[0])
        .map(|i| {
            let one = Tensor::from_vec(&s[1..], t.data()[i * per..(i + 1) * per].to_vec())?;
            VideoTensor::from_channel_last(&one)
        })
        .collect()
}
