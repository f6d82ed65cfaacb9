//! Backbones, the shared-weight multi-view classifier and weight files.

mod io;

pub use io::{
    check_compatible, decode_weights, encode_weights, expected_layout, load_for, load_weights, save_weights,
    Checkpoint, FORMAT_VERSION, MAGIC,
};

use std::fmt;
use std::str::FromStr;

use crate::autograd::{ParamStore, Reduce, Tape, Var};
use crate::config::KeyValues;
use crate::error::{invalid, Error, Result};
use crate::nn::{
    init_rng, ConvNextBlock, Ctx, Downsample, LayerNorm, LctBlock, Linear, Phase, RecBlock, Stem,
};
use crate::tensor::{Scalar, Shape, Tensor};

/// Stage widths shared by every architecture.
pub const WIDTHS: [usize; 4] = [96, 192, 384, 768];
pub const LCT_DEPTHS: [usize; 4] = [1, 1, 1, 1];
pub const CONVNEXT_TINY_DEPTHS: [usize; 4] = [3, 3, 9, 3];
pub const DEFAULT_CLASSES: usize = 4;
pub const DEFAULT_VIEWS: usize = 3;

/// Backbone family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    /// ConvNeXt-Tiny baseline: depths [3, 3, 9, 3], layer norm, GELU.
    ConvNextTiny,
    /// Depths [1, 1, 1, 1], batch norm, ReLU, grouped expansion.
    LctNet,
    /// LCTNet with MSRM mixers.
    LctMsrm,
    /// LCTNet with LAFE residual fusion.
    LctLafe,
    /// LCTNet with MSRM and LAFE.
    MlcNet,
}

impl Arch {
    pub const ALL: [Arch; 5] = [Arch::ConvNextTiny, Arch::LctNet, Arch::LctMsrm, Arch::LctLafe, Arch::MlcNet];

    pub fn name(self) -> &'static str {
        match self {
            Arch::ConvNextTiny => "convnext-tiny",
            Arch::LctNet => "lctnet",
            Arch::LctMsrm => "lctnet-msrm",
            Arch::LctLafe => "lctnet-lafe",
            Arch::MlcNet => "mlcnet",
        }
    }

    pub fn depths(self) -> [usize; 4] {
        match self {
            Arch::ConvNextTiny => CONVNEXT_TINY_DEPTHS,
            _ => LCT_DEPTHS,
        }
    }

    fn msrm(self) -> bool {
        matches!(self, Arch::LctMsrm | Arch::MlcNet)
    }

    fn lafe(self) -> bool {
        matches!(self, Arch::LctLafe | Arch::MlcNet)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Arch::ALL.iter().map(|a| a.name()).collect();
                invalid(format!("unknown architecture {s:?} (expected one of {})", names.join(", ")))
            })
    }
}

/// How per-view feature vectors are combined before the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Fusion {
    #[default]
    Max,
    Add,
    Min,
    Concat,
}

impl Fusion {
    pub const ALL: [Fusion; 4] = [Fusion::Add, Fusion::Min, Fusion::Concat, Fusion::Max];

    pub fn name(self) -> &'static str {
        match self {
            Fusion::Max => "max",
            Fusion::Add => "add",
            Fusion::Min => "min",
            Fusion::Concat => "concat",
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Fusion::Max),
            "add" => Ok(Fusion::Add),
            "min" => Ok(Fusion::Min),
            "concat" | "con" => Ok(Fusion::Concat),
            _ => Err(invalid(format!("unknown fusion {s:?} (expected max, add, min or concat)"))),
        }
    }
}

/// Everything needed to rebuild a model's structure.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub num_classes: usize,
    /// Number of wavelength views sharing the backbone.
    pub views: usize,
    pub fusion: Fusion,
    /// Channels per view image.
    pub in_channels: usize,
    /// Stride (and kernel size) of the patchify stem; 4 by default.
    pub stem_stride: usize,
}

impl ModelConfig {
    pub fn new(arch: Arch) -> Self {
        Self {
            arch,
            num_classes: DEFAULT_CLASSES,
            views: if arch == Arch::ConvNextTiny { 1 } else { DEFAULT_VIEWS },
            fusion: Fusion::Max,
            in_channels: 1,
            stem_stride: 4,
        }
    }

    /// MLCNet with the default three views and max fusion.
    pub fn mlcnet() -> Self {
        Self::new(Arch::MlcNet)
    }

    /// ConvNeXt-Tiny as published: three-channel single-view input.
    pub fn convnext_tiny() -> Self {
        Self {
            in_channels: 3,
            ..Self::new(Arch::ConvNextTiny)
        }
    }

    pub fn with_views(mut self, views: usize) -> Self {
        self.views = views;
        self
    }

    pub fn with_fusion(mut self, fusion: Fusion) -> Self {
        self.fusion = fusion;
        self
    }

    /// Total downsampling factor of the backbone.
    pub fn reduction(&self) -> usize {
        self.stem_stride * 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.views == 0 || self.in_channels == 0 || self.stem_stride == 0 {
            return Err(invalid(format!("degenerate model config {self:?}")));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("arch", self.arch.name());
        kv.set("num-classes", self.num_classes.to_string());
        kv.set("views", self.views.to_string());
        kv.set("fusion", self.fusion.name());
        kv.set("in-channels", self.in_channels.to_string());
        kv.set("stem-stride", self.stem_stride.to_string());
        kv
    }

    /// Reads the keys written by [`ModelConfig::to_kv`]; missing keys take
    /// the architecture's defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let arch: Arch = kv.get_or("arch", Arch::MlcNet)?;
        let d = Self::new(arch);
        let c = Self {
            arch,
            num_classes: kv.get_or("num-classes", d.num_classes)?,
            views: kv.get_or("views", d.views)?,
            fusion: kv.get_or("fusion", d.fusion)?,
            in_channels: kv.get_or("in-channels", d.in_channels)?,
            stem_stride: kv.get_or("stem-stride", d.stem_stride)?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug)]
enum Block {
    Lct(LctBlock),
    ConvNext(ConvNextBlock),
}

impl Block {
    fn init(&self, s: &mut ParamStore<f32>, rng: &mut crate::nn::InitRng) -> Result<()> {
        match self {
            Block::Lct(b) => b.init(s, rng),
            Block::ConvNext(b) => b.init(s, rng),
        }
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        match self {
            Block::Lct(b) => b.forward(ctx, x),
            Block::ConvNext(b) => b.forward(ctx, x),
        }
    }
}

/// Output of a multi-view forward pass.
pub struct ForwardOutput {
    /// `(B, num_classes)` logits.
    pub logits: Var,
    /// Final feature maps of all views stacked along the batch axis,
    /// view-major: `(V * B, 768, H / r, W / r)`.
    pub features: Var,
}

/// A backbone shared by every view, followed by feature fusion and a linear
/// head.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    stem: Stem,
    stages: Vec<Vec<Block>>,
    downsamples: Vec<Downsample>,
    head_norm: Option<LayerNorm>,
    head: Linear,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let convnext = config.arch == Arch::ConvNextTiny;
        let stem = if convnext {
            Stem::layer_norm("stem", config.in_channels, WIDTHS[0], config.stem_stride)
        } else {
            Stem::batch_norm("stem", config.in_channels, WIDTHS[0], config.stem_stride)
        };
        let mut stages = Vec::new();
        let mut downsamples = Vec::new();
        for (i, (&depth, &width)) in config.arch.depths().iter().zip(&WIDTHS).enumerate() {
            if i > 0 {
                let name = format!("down{i}");
                downsamples.push(if convnext {
                    Downsample::layer_norm(&name, WIDTHS[i - 1], width)
                } else {
                    Downsample::batch_norm(&name, WIDTHS[i - 1], width)
                });
            }
            let blocks = (0..depth)
                .map(|j| {
                    let name = format!("stage{}.{j}", i + 1);
                    Ok(if convnext {
                        Block::ConvNext(ConvNextBlock::new(name, width))
                    } else {
                        Block::Lct(LctBlock::new(name, width, config.arch.msrm(), config.arch.lafe())?)
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
        }
        let feat = WIDTHS[3];
        let head_in = if config.fusion == Fusion::Concat {
            feat * config.views
        } else {
            feat
        };
        Ok(Self {
            head_norm: convnext.then(|| LayerNorm::new("head_norm", feat)),
            head: Linear::new("head", head_in, config.num_classes),
            stem,
            stages,
            downsamples,
            config,
        })
    }

    /// Channels of the final feature map.
    pub fn feature_channels(&self) -> usize {
        WIDTHS[3]
    }

    /// Name of the head's `(num_classes, in, 1, 1)` weight.
    pub fn head_weight_name(&self) -> String {
        self.head.weight_name()
    }

    /// Fresh parameters: conv/linear weights from a ±2σ truncated normal
    /// with σ = 0.02, zero biases, identity norms. Deterministic in `seed`.
    pub fn init(&self, seed: u64) -> Result<ParamStore<f32>> {
        let mut rng = init_rng(seed);
        let mut s = ParamStore::new();
        self.stem.init(&mut s, &mut rng)?;
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                self.downsamples[i - 1].init(&mut s, &mut rng)?;
            }
            for b in stage {
                b.init(&mut s, &mut rng)?;
            }
        }
        if let Some(n) = &self.head_norm {
            n.init(&mut s)?;
        }
        self.head.init(&mut s, &mut rng)?;
        Ok(s)
    }

    /// Every RECblock, in forward order.
    pub fn rec_blocks(&self) -> Vec<&RecBlock> {
        self.stages
            .iter()
            .flatten()
            .flat_map(|b| match b {
                Block::Lct(l) => l.rec_blocks().iter().collect::<Vec<_>>(),
                Block::ConvNext(_) => Vec::new(),
            })
            .collect()
    }

    /// Stem through stage 4 on a `(N, C, H, W)` batch.
    pub fn backbone<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x);
        let r = self.config.reduction();
        if s.h % r != 0 || s.w % r != 0 || s.h == 0 || s.w == 0 {
            return Err(invalid(format!(
                "input {}x{} is not divisible by the backbone reduction {r}",
                s.h, s.w
            )));
        }
        if s.c != self.config.in_channels {
            return Err(invalid(format!(
                "backbone expects {} input channels, got {s}",
                self.config.in_channels
            )));
        }
        let mut y = self.stem.forward(ctx, x)?;
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                y = self.downsamples[i - 1].forward(ctx, y)?;
            }
            for b in stage {
                y = b.forward(ctx, y)?;
            }
        }
        Ok(y)
    }

    /// Runs all views through the shared backbone as one batch, pools,
    /// fuses and classifies.
    pub fn forward_full<T: Scalar>(&self, ctx: &mut Ctx<T>, views: &[Var]) -> Result<ForwardOutput> {
        if views.len() != self.config.views {
            return Err(invalid(format!(
                "model expects {} views, got {}",
                self.config.views,
                views.len()
            )));
        }
        let s0 = ctx.tape.shape(views[0]);
        for &v in views {
            let s = ctx.tape.shape(v);
            if s != s0 {
                return Err(invalid(format!("views differ in shape: {s} vs {s0}")));
            }
        }
        let b = s0.n;
        let x = if views.len() == 1 {
            views[0]
        } else {
            ctx.tape.stack_batch(views)?
        };
        let features = self.backbone(ctx, x)?;
        let mut pooled = ctx.tape.global_avg_pool(features)?;
        if let Some(n) = &self.head_norm {
            pooled = n.forward(ctx, pooled)?;
        }
        let fused = if views.len() == 1 {
            pooled
        } else {
            let per_view = (0..views.len())
                .map(|i| ctx.tape.narrow_batch(pooled, i * b, b))
                .collect::<Result<Vec<_>>>()?;
            fuse_vars(ctx.tape, &per_view, self.config.fusion)?
        };
        let logits = self.head.forward(ctx, fused)?;
        Ok(ForwardOutput { logits, features })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, views: &[Var]) -> Result<Var> {
        Ok(self.forward_full(ctx, views)?.logits)
    }

    /// Eval-mode logits for a batch of views.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, phase: Phase, views: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, store, false, phase);
        let vars: Vec<Var> = views.iter().map(|v| ctx.tape.constant(v.clone())).collect();
        let logits = self.forward(&mut ctx, &vars)?;
        Ok(tape.value(logits).clone())
    }

    /// Shape of one view batch this model accepts at spatial size `hw`.
    pub fn input_shape(&self, batch: usize, hw: usize) -> Shape {
        Shape::new(batch, self.config.in_channels, hw, hw)
    }
}

fn fuse_vars<T: Scalar>(tape: &mut Tape<T>, views: &[Var], op: Fusion) -> Result<Var> {
    match op {
        Fusion::Max => tape.reduce(Reduce::Max, views),
        Fusion::Min => tape.reduce(Reduce::Min, views),
        Fusion::Add => tape.reduce(Reduce::Add, views),
        Fusion::Concat => tape.concat_channels(views),
    }
}

/// Combines per-view feature vectors `(B, C, 1, 1)`: elementwise max, sum or
/// min, or channel concatenation in view order.
pub fn fuse_views<T: Scalar>(views: &[Tensor<T>], op: Fusion) -> Result<Tensor<T>> {
    if views.is_empty() {
        return Err(invalid("fuse_views needs at least one view"));
    }
    let s0 = views[0].shape();
    if let Some(v) = views.iter().find(|v| v.shape() != s0) {
        return Err(invalid(format!("fuse_views: mixed shapes {} and {s0}", v.shape())));
    }
    let mut tape = Tape::inference();
    let vars: Vec<Var> = views.iter().map(|v| tape.constant(v.clone())).collect();
    let out = fuse_vars(&mut tape, &vars, op)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests;
