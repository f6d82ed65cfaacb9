use super::{relu, BatchNorm, Conv, Ctx, InitRng, LayerNorm, LayerScale, Phase};
use crate::autograd::{ParamStore, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Activation, ConvGeom, Scalar};

/// Number of channel groups an MSRM splits its input into.
pub const MSRM_LEVELS: usize = 5;

// ---------------------------------------------------------------------------
// RECblock

/// Dual-branch depthwise block: `BN(DW3x3(x)) + BN(DW1x1(x))` while training,
/// a single biased depthwise 3×3 convolution after fusion.
#[derive(Clone, Debug)]
pub struct RecBlock {
    pub name: String,
    pub channels: usize,
    pub dw3: Conv,
    pub bn3: BatchNorm,
    pub dw1: Conv,
    pub bn1: BatchNorm,
    pub fused: Conv,
}

impl RecBlock {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        let name = name.into();
        let sub = |f: &str| format!("{name}.{f}");
        Self {
            dw3: Conv::new(sub("dw3"), ConvGeom::depthwise(channels, 3), false),
            bn3: BatchNorm::new(sub("bn3"), channels),
            dw1: Conv::new(sub("dw1"), ConvGeom::depthwise(channels, 1), false),
            bn1: BatchNorm::new(sub("bn1"), channels),
            fused: Conv::new(sub("fused"), ConvGeom::depthwise(channels, 3), true),
            name,
            channels,
        }
    }

    pub fn init(&self, s: &mut ParamStore<f32>, rng: &mut InitRng) -> Result<()> {
        self.dw3.init(s, rng)?;
        self.bn3.init(s)?;
        self.dw1.init(s, rng)?;
        self.bn1.init(s)
    }

    /// Whether the store holds the fused kernel for this block.
    pub fn is_fused<T: Scalar>(&self, s: &ParamStore<T>) -> bool {
        s.contains(&self.fused.weight_name())
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        check_channels(ctx, x, self.channels, &self.name)?;
        match ctx.phase {
            Phase::Inference => {
                if !self.is_fused(ctx.store) {
                    return Err(Error::InvalidState(format!(
                        "{}: inference phase requires fused parameters; run fusion first",
                        self.name
                    )));
                }
                self.fused.forward(ctx, x)
            }
            Phase::Training => {
                let a = self.dw3.forward(ctx, x)?;
                let a = self.bn3.forward(ctx, a)?;
                let b = self.dw1.forward(ctx, x)?;
                let b = self.bn1.forward(ctx, b)?;
                ctx.tape.add(a, b)
            }
        }
    }
}

fn check_channels<T: Scalar>(ctx: &Ctx<T>, x: Var, c: usize, what: &str) -> Result<()> {
    let s = ctx.tape.shape(x);
    if s.c != c {
        return Err(invalid(format!("{what}: expected {c} channels, input is {s}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// MSRM

/// Channel bookkeeping of an MSRM.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    /// Widths of the initial split `x_1..x_s`; `x_1` takes the remainder.
    pub groups: Vec<usize>,
    /// Input width of each level: `[x_1, E_2 in, ..., E_s in]`.
    pub level_inputs: Vec<usize>,
    /// Widths of the concatenated output segments
    /// `[x_1, t_{2,1}, ..., t_{s-1,1}, t_s]`.
    pub segments: Vec<usize>,
}

impl SplitPlan {
    /// Width forwarded from level `i` (1-based, `2..s`) to the next level.
    pub fn forwarded(&self, level: usize) -> usize {
        self.level_inputs[level - 1] / 2
    }
}

/// Splits `channels` into `levels` groups for the hierarchical residual
/// module. Each level `i >= 2` sees its own group plus the second half
/// (`floor(n/2)`) of level `i - 1`'s output; the first half (`ceil(n/2)`) is
/// emitted.
pub fn msrm_split_plan(channels: usize, levels: usize) -> Result<SplitPlan> {
    if levels < 2 {
        return Err(invalid(format!("msrm needs at least 2 levels, got {levels}")));
    }
    if channels < levels {
        return Err(invalid(format!(
            "msrm cannot split {channels} channels into {levels} groups"
        )));
    }
    let w = channels / levels;
    let mut groups = vec![w; levels];
    groups[0] += channels % levels;
    let mut level_inputs = vec![groups[0]];
    let mut segments = vec![groups[0]];
    let mut carry = 0;
    for (i, &g) in groups.iter().enumerate().skip(1) {
        let n = g + carry;
        level_inputs.push(n);
        if i + 1 == levels {
            segments.push(n);
        } else {
            segments.push(n.div_ceil(2));
            carry = n / 2;
        }
    }
    debug_assert_eq!(segments.iter().sum::<usize>(), channels);
    Ok(SplitPlan {
        groups,
        level_inputs,
        segments,
    })
}

/// Multi-scale residual module: hierarchical split, one RECblock per level,
/// channel shuffle and a 1×1 merge.
#[derive(Clone, Debug)]
pub struct Msrm {
    pub name: String,
    pub channels: usize,
    pub out_channels: usize,
    pub plan: SplitPlan,
    /// RECblocks for levels `2..=s`.
    pub recs: Vec<RecBlock>,
    pub shuffle_groups: usize,
    pub merge: Conv,
}

impl Msrm {
    pub fn new(name: impl Into<String>, channels: usize) -> Result<Self> {
        let name = name.into();
        let plan = msrm_split_plan(channels, MSRM_LEVELS)?;
        let recs = plan.level_inputs[1..]
            .iter()
            .enumerate()
            .map(|(i, &n)| RecBlock::new(format!("{name}.rec{}", i + 2), n))
            .collect();
        Ok(Self {
            merge: Conv::new(format!("{name}.merge"), ConvGeom::pointwise(channels, channels, 1), true),
            shuffle_groups: if channels % 2 == 0 { 2 } else { 1 },
            out_channels: channels,
            recs,
            plan,
            name,
            channels,
        })
    }

    pub fn init(&self, s: &mut ParamStore<f32>, rng: &mut InitRng) -> Result<()> {
        for r in &self.recs {
            r.init(s, rng)?;
        }
        self.merge.init(s, rng)
    }

    /// The concatenated segments before shuffle and merge.
    pub fn forward_segments<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Vec<Var>> {
        check_channels(ctx, x, self.channels, &self.name)?;
        let xs = ctx.tape.split_channels(x, &self.plan.groups)?;
        let mut segments = vec![xs[0]];
        let mut carry: Option<Var> = None;
        let last = self.recs.len() - 1;
        for (i, rec) in self.recs.iter().enumerate() {
            let input = match carry.take() {
                Some(c) => ctx.tape.concat_channels(&[xs[i + 1], c])?,
                None => xs[i + 1],
            };
            let out = rec.forward(ctx, input)?;
            if i == last {
                segments.push(out);
            } else {
                let n = rec.channels;
                let halves = ctx.tape.split_channels(out, &[n.div_ceil(2), n / 2])?;
                segments.push(halves[0]);
                if n / 2 > 0 {
                    carry = Some(halves[1]);
                }
            }
        }
        Ok(segments)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let segments = self.forward_segments(ctx, x)?;
        let cat = ctx.tape.concat_channels(&segments)?;
        let shuffled = ctx.tape.channel_shuffle(cat, self.shuffle_groups)?;
        self.merge.forward(ctx, shuffled)
    }
}

// ---------------------------------------------------------------------------
// LAFE

/// `BN_b(ReLU(BN_a(DW1x1(.))))`.
#[derive(Clone, Debug)]
pub struct LafeBranch {
    pub conv: Conv,
    pub bn_a: BatchNorm,
    pub bn_b: BatchNorm,
}

impl LafeBranch {
    fn new(prefix: &str, c: usize) -> Self {
        Self {
            conv: Conv::new(format!("{prefix}.conv"), ConvGeom::depthwise(c, 1), false),
            bn_a: BatchNorm::new(format!("{prefix}.bn_a"), c),
            bn_b: BatchNorm::new(format!("{prefix}.bn_b"), c),
        }
    }

    fn init(&self, s: &mut ParamStore<f32>, rng: &mut InitRng) -> Result<()> {
        self.conv.init(s, rng)?;
        self.bn_a.init(s)?;
        self.bn_b.init(s)
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn_a.forward(ctx, y)?;
        let y = relu(ctx, y);
        self.bn_b.forward(ctx, y)
    }
}

/// Local attention feature enhancement: a learned soft selection between the
/// block output `X` and the skip input `Y`.
#[derive(Clone, Debug)]
pub struct Lafe {
    pub name: String,
    pub channels: usize,
    pub global: LafeBranch,
    pub local: LafeBranch,
    pub final_relu: bool,
}

impl Lafe {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        let name = name.into();
        Self {
            global: LafeBranch::new(&format!("{name}.global"), channels),
            local: LafeBranch::new(&format!("{name}.local"), channels),
            final_relu: true,
            name,
            channels,
        }
    }

    pub fn init(&self, s: &mut ParamStore<f32>, rng: &mut InitRng) -> Result<()> {
        self.global.init(s, rng)?;
        self.local.init(s, rng)
    }

    /// The gate `w = sigmoid(G(I) + L(I))` with `I = X + Y`.
    pub fn weights<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var, y: Var) -> Result<Var> {
        let (xs, ys) = (ctx.tape.shape(x), ctx.tape.shape(y));
        if xs != ys {
            return Err(invalid(format!("{}: X is {xs} but Y is {ys}", self.name)));
        }
        check_channels(ctx, x, self.channels, &self.name)?;
        let i = ctx.tape.add(x, y)?;
        let pooled = ctx.tape.global_avg_pool(i)?;
        let g = self.global.forward(ctx, pooled)?;
        let l = self.local.forward(ctx, i)?;
        let z = ctx.tape.add(l, g)?;
        Ok(ctx.tape.activation(Activation::Sigmoid, z))
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var, y: Var) -> Result<Var> {
        let w = self.weights(ctx, x, y)?;
        let out = ctx.tape.gate(x, y, w)?;
        Ok(if self.final_relu { relu(ctx, out) } else { out })
    }
}

// ---------------------------------------------------------------------------
// LCT block

/// Spatial mixing stage of an LCT block.
#[derive(Clone, Debug)]
pub enum Mixer {
    /// Depthwise 7×7 convolution (no bias) followed by batch norm.
    DwBn { conv: Conv, bn: BatchNorm },
    Msrm(Msrm),
}

/// How the block output joins the skip path.
#[derive(Clone, Debug)]
pub enum Residual {
    Plain,
    Lafe(Lafe),
}

/// Lightweight ConvNeXt-style block: mixer, grouped 1×1 expansion, ReLU,
/// 1×1 projection, residual fusion.
#[derive(Clone, Debug)]
pub struct LctBlock {
    pub name: String,
    pub channels: usize,
    pub mixer: Mixer,
    pub expand: Conv,
    pub project: Conv,
    pub residual: Residual,
}

/// Expansion ratio of blocks with the 7×7 mixer.
pub const LCT_EXPANSION: usize = 4;
/// Expansion ratio of blocks with an MSRM mixer.
pub const MSRM_EXPANSION: usize = 2;
/// Groups of the expansion convolution.
pub const EXPAND_GROUPS: usize = 2;

impl LctBlock {
    pub fn new(name: impl Into<String>, channels: usize, msrm: bool, lafe: bool) -> Result<Self> {
        let name = name.into();
        let sub = |f: &str| format!("{name}.{f}");
        let (mixer, ratio) = if msrm {
            (Mixer::Msrm(Msrm::new(sub("msrm"), channels)?), MSRM_EXPANSION)
        } else {
            (
                Mixer::DwBn {
                    conv: Conv::new(sub("dw"), ConvGeom::depthwise(channels, 7), false),
                    bn: BatchNorm::new(sub("dw_bn"), channels),
                },
                LCT_EXPANSION,
            )
        };
        let hidden = ratio * channels;
        let expand = ConvGeom::pointwise(channels, hidden, EXPAND_GROUPS);
        expand.validate()?;
        Ok(Self {
            mixer,
            expand: Conv::new(sub("expand"), expand, true),
            project: Conv::new(sub("project"), ConvGeom::pointwise(hidden, channels, 1), true),
            residual: if lafe {
                Residual::Lafe(Lafe::new(sub("lafe"), channels))
            } else {
                Residual::Plain
            },
            name,
            channels,
        })
    }

    pub fn init(&self, s: &mut ParamStore<f32>, rng: &mut InitRng) -> Result<()> {
        match &self.mixer {
            Mixer::DwBn { conv, bn } => {
                conv.init(s, rng)?;
                bn.init(s)?;
            }
            Mixer::Msrm(m) => m.init(s, rng)?,
        }
        self.expand.init(s, rng)?;
        self.project.init(s, rng)?;
        if let Residual::Lafe(l) = &self.residual {
            l.init(s, rng)?;
        }
        Ok(())
    }

    pub fn rec_blocks(&self) -> &[RecBlock] {
        match &self.mixer {
            Mixer::Msrm(m) => &m.recs,
            Mixer::DwBn { .. } => &[],
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        check_channels(ctx, x, self.channels, &self.name)?;
        let m = match &self.mixer {
            Mixer::DwBn { conv, bn } => {
                let y = conv.forward(ctx, x)?;
                bn.forward(ctx, y)?
            }
            Mixer::Msrm(msrm) => msrm.forward(ctx, x)?,
        };
        let h = self.expand.forward(ctx, m)?;
        let h = relu(ctx, h);
        let h = self.project.forward(ctx, h)?;
        match &self.residual {
            Residual::Plain => ctx.tape.add(h, x),
            Residual::Lafe(l) => l.forward(ctx, h, x),
        }
    }
}

// ---------------------------------------------------------------------------
// ConvNeXt block (baseline)

/// `x + gamma * pw2(GELU(pw1(LN(dw7(x)))))`.
#[derive(Clone, Debug)]
pub struct ConvNextBlock {
    pub name: String,
    pub channels: usize,
    pub dw: Conv,
    pub norm: LayerNorm,
    pub pw1: Conv,
    pub pw2: Conv,
    pub scale: LayerScale,
}

impl ConvNextBlock {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        let name = name.into();
        let sub = |f: &str| format!("{name}.{f}");
        Self {
            dw: Conv::new(sub("dw"), ConvGeom::depthwise(channels, 7), true),
            norm: LayerNorm::new(sub("norm"), channels),
            pw1: Conv::new(sub("pw1"), ConvGeom::pointwise(channels, 4 * channels, 1), true),
            pw2: Conv::new(sub("pw2"), ConvGeom::pointwise(4 * channels, channels, 1), true),
            scale: LayerScale {
                name: sub("gamma"),
                channels,
                init_value: 1e-6,
            },
            name,
            channels,
        }
    }

    pub fn init(&self, s: &mut ParamStore<f32>, rng: &mut InitRng) -> Result<()> {
        self.dw.init(s, rng)?;
        self.norm.init(s)?;
        self.pw1.init(s, rng)?;
        self.pw2.init(s, rng)?;
        self.scale.init(s)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        check_channels(ctx, x, self.channels, &self.name)?;
        let y = self.dw.forward(ctx, x)?;
        let y = self.norm.forward(ctx, y)?;
        let y = self.pw1.forward(ctx, y)?;
        let y = ctx.tape.activation(Activation::Gelu, y);
        let y = self.pw2.forward(ctx, y)?;
        let y = self.scale.forward(ctx, y)?;
        ctx.tape.add(y, x)
    }
}

// ---------------------------------------------------------------------------
// stem and downsampling

/// Normalization used next to strided convolutions.
#[derive(Clone, Debug)]
pub enum Norm {
    Batch(BatchNorm),
    Layer(LayerNorm),
}

impl Norm {
    fn init(&self, s: &mut ParamStore<f32>) -> Result<()> {
        match self {
            Norm::Batch(b) => b.init(s),
            Norm::Layer(l) => l.init(s),
        }
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        match self {
            Norm::Batch(b) => b.forward(ctx, x),
            Norm::Layer(l) => l.forward(ctx, x),
        }
    }
}

fn check_divisible<T: Scalar>(ctx: &Ctx<T>, x: Var, stride: usize, what: &str) -> Result<()> {
    let s = ctx.tape.shape(x);
    if s.h % stride != 0 || s.w % stride != 0 {
        return Err(invalid(format!(
            "{what}: spatial size {}x{} is not divisible by stride {stride}",
            s.h, s.w
        )));
    }
    Ok(())
}

/// Patchify stem: `k×k` convolution with stride `k`, then normalization.
#[derive(Clone, Debug)]
pub struct Stem {
    pub conv: Conv,
    pub norm: Norm,
}

impl Stem {
    /// Batch-norm stem used by the LCT family. The convolution has no bias
    /// since the batch norm would cancel it.
    pub fn batch_norm(name: &str, in_c: usize, out_c: usize, stride: usize) -> Self {
        Self {
            conv: Conv::new(format!("{name}.conv"), ConvGeom::new(in_c, out_c, stride, stride, 0, 1), false),
            norm: Norm::Batch(BatchNorm::new(format!("{name}.bn"), out_c)),
        }
    }

    /// Layer-norm stem of the ConvNeXt baseline.
    pub fn layer_norm(name: &str, in_c: usize, out_c: usize, stride: usize) -> Self {
        Self {
            conv: Conv::new(format!("{name}.conv"), ConvGeom::new(in_c, out_c, stride, stride, 0, 1), true),
            norm: Norm::Layer(LayerNorm::new(format!("{name}.ln"), out_c)),
        }
    }

    pub fn init(&self, s: &mut ParamStore<f32>, rng: &mut InitRng) -> Result<()> {
        self.conv.init(s, rng)?;
        self.norm.init(s)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        check_divisible(ctx, x, self.conv.geom.stride, &self.conv.name)?;
        let y = self.conv.forward(ctx, x)?;
        self.norm.forward(ctx, y)
    }
}

/// 2×2 stride-2 convolution between stages. The LCT family normalizes after
/// the convolution with batch norm; the ConvNeXt baseline applies layer norm
/// before it.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv,
    pub norm: Norm,
}

impl Downsample {
    pub fn batch_norm(name: &str, in_c: usize, out_c: usize) -> Self {
        Self {
            conv: Conv::new(format!("{name}.conv"), ConvGeom::new(in_c, out_c, 2, 2, 0, 1), false),
            norm: Norm::Batch(BatchNorm::new(format!("{name}.bn"), out_c)),
        }
    }

    pub fn layer_norm(name: &str, in_c: usize, out_c: usize) -> Self {
        Self {
            conv: Conv::new(format!("{name}.conv"), ConvGeom::new(in_c, out_c, 2, 2, 0, 1), true),
            norm: Norm::Layer(LayerNorm::new(format!("{name}.ln"), in_c)),
        }
    }

    pub fn init(&self, s: &mut ParamStore<f32>, rng: &mut InitRng) -> Result<()> {
        self.conv.init(s, rng)?;
        self.norm.init(s)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        check_divisible(ctx, x, 2, &self.conv.name)?;
        match &self.norm {
            Norm::Batch(_) => {
                let y = self.conv.forward(ctx, x)?;
                self.norm.forward(ctx, y)
            }
            Norm::Layer(_) => {
                let y = self.norm.forward(ctx, x)?;
                self.conv.forward(ctx, y)
            }
        }
    }
}
