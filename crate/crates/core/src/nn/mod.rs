//! Named layers and the architectural blocks built from them.
//!
//! A layer is a small description (a name prefix plus geometry). Its tensors
//! live in a [`ParamStore`] under `"{prefix}.{field}"`, so the same layer can
//! run in 32- or 64-bit precision and weights can be saved by name.

mod blocks;

pub use blocks::{
    msrm_split_plan, ConvNextBlock, Downsample, Lafe, LafeBranch, LctBlock, Mixer, Msrm, Norm,
    RecBlock, Residual, SplitPlan, Stem, EXPAND_GROUPS, LCT_EXPANSION, MSRM_EXPANSION, MSRM_LEVELS,
};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{BnBatchStats, ParamKind, ParamStore, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Activation, ConvGeom, Scalar, Shape, Tensor};

/// Random source used for weight initialization.
pub type InitRng = ChaCha8Rng;

/// Standard deviation of initial conv/linear weights.
pub const INIT_STD: f64 = 0.02;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-6;

/// Whether re-parameterizable blocks run their training-time branches or the
/// fused single convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Phase {
    #[default]
    Training,
    Inference,
}

impl Phase {
    pub fn code(self) -> u8 {
        match self {
            Phase::Training => 0,
            Phase::Inference => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Phase::Training),
            1 => Ok(Phase::Inference),
            _ => Err(Error::Format(format!("unknown phase code {c}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Training => "training",
            Phase::Inference => "inference",
        }
    }
}

/// State threaded through one forward pass.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    /// Batch norm uses batch statistics (and records them) when set,
    /// running statistics otherwise.
    pub train: bool,
    pub phase: Phase,
    /// Batch statistics seen by each train-mode batch norm, in call order.
    pub bn_updates: Vec<(String, BnBatchStats<T>)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, train: bool, phase: Phase) -> Self {
        Self {
            tape,
            store,
            train,
            phase,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.store.leaf(self.tape, name)
    }

    fn buffer(&self, name: &str) -> Result<&'a [T]> {
        let store: &'a ParamStore<T> = self.store;
        Ok(store.require(name)?.data())
    }
}

/// Samples from N(0, std²) truncated to ±2 std.
pub fn trunc_normal(rng: &mut InitRng, std: f64) -> f64 {
    loop {
        let v: f64 = StandardNormal.sample(rng);
        if v.abs() <= 2.0 {
            return v * std;
        }
    }
}

fn trunc_normal_tensor(rng: &mut InitRng, shape: Shape) -> Tensor<f32> {
    Tensor::from_fn(shape, |_, _, _, _| trunc_normal(rng, INIT_STD) as f32)
}

fn join(prefix: &str, field: &str) -> String {
    format!("{prefix}.{field}")
}

/// Convolution with optional bias; parameters `weight` and `bias`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub geom: ConvGeom,
    pub bias: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, geom: ConvGeom, bias: bool) -> Self {
        Self {
            name: name.into(),
            geom,
            bias,
        }
    }

    pub fn weight_name(&self) -> String {
        join(&self.name, "weight")
    }

    pub fn bias_name(&self) -> String {
        join(&self.name, "bias")
    }

    pub fn init(&self, s: &mut ParamStore<f32>, rng: &mut InitRng) -> Result<()> {
        self.geom.validate()?;
        s.insert(self.weight_name(), ParamKind::Trainable, trunc_normal_tensor(rng, self.geom.weight_shape()))?;
        if self.bias {
            s.insert(self.bias_name(), ParamKind::Trainable, Tensor::zeros(Shape::vector(1, self.geom.out_c)))?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight_name())?;
        let b = if self.bias {
            Some(ctx.param(&self.bias_name())?)
        } else {
            None
        };
        ctx.tape.conv2d(x, w, b, self.geom)
    }
}

/// Batch norm with affine `weight`/`bias` and `running_mean`/`running_var`
/// buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn field(&self, f: &str) -> String {
        join(&self.name, f)
    }

    pub fn init(&self, s: &mut ParamStore<f32>) -> Result<()> {
        let v = Shape::vector(1, self.channels);
        s.insert(self.field("weight"), ParamKind::Trainable, Tensor::full(v, 1.0))?;
        s.insert(self.field("bias"), ParamKind::Trainable, Tensor::zeros(v))?;
        s.insert(self.field("running_mean"), ParamKind::Buffer, Tensor::zeros(v))?;
        s.insert(self.field("running_var"), ParamKind::Buffer, Tensor::full(v, 1.0))?;
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let g = ctx.param(&self.field("weight"))?;
        let b = ctx.param(&self.field("bias"))?;
        let eps = T::c(BN_EPS);
        if ctx.train {
            let (y, stats) = ctx.tape.batch_norm_train(x, g, b, eps)?;
            ctx.bn_updates.push((self.name.clone(), stats));
            Ok(y)
        } else {
            let mean = ctx.buffer(&self.field("running_mean"))?;
            let var = ctx.buffer(&self.field("running_var"))?;
            ctx.tape.batch_norm_infer(x, g, b, mean, var, eps)
        }
    }
}

/// Folds recorded batch statistics into the running estimates:
/// `running = (1 - m) * running + m * batch`.
pub fn apply_bn_updates<T: Scalar>(
    store: &mut ParamStore<T>,
    updates: &[(String, BnBatchStats<T>)],
    momentum: f64,
) -> Result<()> {
    let m = T::c(momentum);
    for (name, stats) in updates {
        for (field, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let key = join(name, field);
            let t = store
                .get_mut(&key)
                .ok_or_else(|| Error::InvalidState(format!("missing buffer {key:?}")))?;
            if t.len() != batch.len() {
                return Err(invalid(format!("{key}: {} batch stats for {} channels", batch.len(), t.len())));
            }
            for (r, &b) in t.data_mut().iter_mut().zip(batch.iter()) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }
    Ok(())
}

/// Channels-first layer norm with affine `weight`/`bias`.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub channels: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn init(&self, s: &mut ParamStore<f32>) -> Result<()> {
        let v = Shape::vector(1, self.channels);
        s.insert(join(&self.name, "weight"), ParamKind::Trainable, Tensor::full(v, 1.0))?;
        s.insert(join(&self.name, "bias"), ParamKind::Trainable, Tensor::zeros(v))
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let g = ctx.param(&join(&self.name, "weight"))?;
        let b = ctx.param(&join(&self.name, "bias"))?;
        ctx.tape.layer_norm_channels(x, g, b, T::c(LN_EPS))
    }
}

/// Fully connected layer on `(B, in, 1, 1)` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Self {
            name: name.into(),
            in_features,
            out_features,
        }
    }

    pub fn weight_name(&self) -> String {
        join(&self.name, "weight")
    }

    pub fn init(&self, s: &mut ParamStore<f32>, rng: &mut InitRng) -> Result<()> {
        let shape = Shape::new(self.out_features, self.in_features, 1, 1);
        s.insert(self.weight_name(), ParamKind::Trainable, trunc_normal_tensor(rng, shape))?;
        s.insert(
            join(&self.name, "bias"),
            ParamKind::Trainable,
            Tensor::zeros(Shape::vector(1, self.out_features)),
        )
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight_name())?;
        let b = ctx.param(&join(&self.name, "bias"))?;
        ctx.tape.linear(x, w, Some(b))
    }
}

/// Per-channel learnable scale (ConvNeXt layer scale).
#[derive(Clone, Debug)]
pub struct LayerScale {
    pub name: String,
    pub channels: usize,
    pub init_value: f32,
}

impl LayerScale {
    pub fn init(&self, s: &mut ParamStore<f32>) -> Result<()> {
        s.insert(
            self.name.clone(),
            ParamKind::Trainable,
            Tensor::full(Shape::vector(1, self.channels), self.init_value),
        )
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let g = ctx.param(&self.name)?;
        ctx.tape.mul(x, g)
    }
}

pub(crate) fn relu<T: Scalar>(ctx: &mut Ctx<T>, x: Var) -> Var {
    ctx.tape.activation(Activation::Relu, x)
}

/// Seeded initialization RNG.
pub fn init_rng(seed: u64) -> InitRng {
    use rand::SeedableRng;
    InitRng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trunc_normal_bounds_and_spread() {
        let mut rng = init_rng(3);
        let v: Vec<f64> = (0..20000).map(|_| trunc_normal(&mut rng, 0.02)).collect();
        assert!(v.iter().all(|x| x.abs() <= 0.04));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        assert!((0.015..0.025).contains(&std), "{std}");
    }

    #[test]
    fn bn_running_update() {
        let mut s = ParamStore::<f32>::new();
        BatchNorm::new("bn", 2).init(&mut s).unwrap();
        let stats = BnBatchStats {
            mean: vec![1.0, 2.0],
            var: vec![3.0, 5.0],
        };
        apply_bn_updates(&mut s, &[("bn".into(), stats)], 0.1).unwrap();
        let m = s.get("bn.running_mean").unwrap().data().to_vec();
        let v = s.get("bn.running_var").unwrap().data().to_vec();
        assert!((m[0] - 0.1).abs() < 1e-7 && (m[1] - 0.2).abs() < 1e-7);
        assert!((v[0] - 1.2).abs() < 1e-6 && (v[1] - 1.4).abs() < 1e-6);
    }
}
