//! Structural re-parameterization: batch-norm folding, 1×1→3×3 kernel
//! padding, RECblock fusion and numerical equivalence checks.
//!
//! Fusion works on a [`ParamStore`]: for every RECblock the two branch
//! convolutions and their batch norms are replaced by a single depthwise
//! 3×3 kernel with bias (`{block}.fused.weight` / `.bias`). All other
//! tensors are left untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{ParamKind, ParamStore};
use crate::error::{invalid, Error, Result};
use crate::models::Model;
use crate::nn::{BatchNorm, Phase, RecBlock, BN_EPS};
use crate::tensor::{Scalar, Shape, Tensor};

/// Default maximum absolute logit deviation for 32-bit fusion checks.
pub const TOLERANCE_F32: f64 = 1e-4;
/// Default maximum absolute logit deviation for 64-bit fusion checks.
pub const TOLERANCE_F64: f64 = 1e-10;

/// Inference-mode batch-norm parameters for one layer.
#[derive(Clone, Debug)]
pub struct BnParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> BnParams<T> {
    /// Reads a batch norm's affine parameters and running statistics. A
    /// missing statistic is an invalid-state error.
    pub fn from_store(store: &ParamStore<T>, bn: &BatchNorm) -> Result<Self> {
        let get = |f: &str| {
            store.get(&bn.field(f)).cloned().ok_or_else(|| {
                Error::InvalidState(format!("{}: missing {f}; batch-norm statistics are not populated", bn.name))
            })
        };
        Ok(Self {
            gamma: get("weight")?,
            beta: get("bias")?,
            mean: get("running_mean")?,
            var: get("running_var")?,
            eps: BN_EPS,
        })
    }

    /// Whether the running statistics are still the initial mean 0, var 1.
    pub fn has_default_stats(&self) -> bool {
        self.mean.data().iter().all(|&m| m == T::zero()) && self.var.data().iter().all(|&v| v == T::one())
    }
}

/// Folds an inference-mode batch norm into the convolution before it:
/// `scale = γ / √(var + eps)`, `W′ = scale·W` per output channel and
/// `b′ = β + (b − mean)·scale`. A missing conv bias counts as zero.
pub fn fold_bn_into_conv<T: Scalar>(
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    bn: &BnParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let out_c = w.shape().n;
    for (what, t) in [("gamma", &bn.gamma), ("beta", &bn.beta), ("mean", &bn.mean), ("var", &bn.var)] {
        if t.len() != out_c {
            return Err(invalid(format!("batch-norm {what} has {} entries, conv has {out_c} outputs", t.len())));
        }
    }
    if let Some(b) = b {
        if b.len() != out_c {
            return Err(invalid(format!("conv bias has {} entries, conv has {out_c} outputs", b.len())));
        }
    }
    let eps = T::c(bn.eps);
    let mut scale = Vec::with_capacity(out_c);
    for (c, &v) in bn.var.data().iter().enumerate() {
        let d = v + eps;
        if !(d > T::zero()) {
            return Err(Error::NumericDomain(format!(
                "channel {c}: var + eps = {d:?} is not positive"
            )));
        }
        scale.push(bn.gamma.data()[c] / d.sqrt());
    }
    let per = w.len() / out_c.max(1);
    let mut wf = w.clone();
    for (c, chunk) in wf.data_mut().chunks_mut(per).enumerate() {
        for v in chunk {
            *v = *v * scale[c];
        }
    }
    let bias = (0..out_c)
        .map(|c| {
            let b0 = b.map_or(T::zero(), |b| b.data()[c]);
            bn.beta.data()[c] + (b0 - bn.mean.data()[c]) * scale[c]
        })
        .collect();
    Ok((wf, Tensor::from_vec(Shape::vector(1, out_c), bias)?))
}

/// Embeds a depthwise `(C, 1, 1, 1)` kernel at the centre of a zero
/// `(C, 1, 3, 3)` kernel. With padding 1 the result computes the same
/// output as the original kernel with padding 0.
pub fn pad_1x1_to_3x3<T: Scalar>(k: &Tensor<T>) -> Result<Tensor<T>> {
    let s = k.shape();
    if s.c != 1 || s.h != 1 || s.w != 1 {
        return Err(invalid(format!("expected a depthwise 1x1 kernel (C,1,1,1), got {s}")));
    }
    let mut out = Tensor::zeros(Shape::new(s.n, 1, 3, 3));
    for c in 0..s.n {
        out.set(c, 0, 1, 1, k.data()[c]);
    }
    Ok(out)
}

/// Names of the branch tensors a fused block no longer needs.
fn branch_names(block: &RecBlock) -> Vec<String> {
    let mut names = vec![block.dw3.weight_name(), block.dw1.weight_name()];
    for bn in [&block.bn3, &block.bn1] {
        for f in ["weight", "bias", "running_mean", "running_var"] {
            names.push(bn.field(f));
        }
    }
    names
}

/// Replaces one RECblock's branches in `store` by the fused kernel and
/// bias. Returns whether the block still carried default statistics.
pub fn fuse_rec_block<T: Scalar>(block: &RecBlock, store: &mut ParamStore<T>) -> Result<bool> {
    if block.is_fused(store) {
        return Err(Error::InvalidState(format!("{}: block is already fused", block.name)));
    }
    let bn3 = BnParams::from_store(store, &block.bn3)?;
    let bn1 = BnParams::from_store(store, &block.bn1)?;
    let (w3, b3) = fold_bn_into_conv(store.require(&block.dw3.weight_name())?, None, &bn3)?;
    let (w1, b1) = fold_bn_into_conv(store.require(&block.dw1.weight_name())?, None, &bn1)?;
    let mut w = pad_1x1_to_3x3(&w1)?;
    w.add_assign(&w3);
    let mut b = b1;
    b.add_assign(&b3);
    for name in branch_names(block) {
        store.remove(&name);
    }
    store.insert(block.fused.weight_name(), ParamKind::Trainable, w)?;
    store.insert(block.fused.bias_name(), ParamKind::Trainable, b)?;
    Ok(bn3.has_default_stats() && bn1.has_default_stats())
}

/// A model's parameters after fusing every RECblock.
#[derive(Clone, Debug)]
pub struct FusedStore<T: Scalar> {
    pub store: ParamStore<T>,
    /// Blocks fused with never-updated batch-norm statistics. Fusion is
    /// still exact for them, but the model has evidently not been trained.
    pub default_stats: Vec<String>,
}

/// Fuses every RECblock of `model`. A model without RECblocks comes back
/// unchanged.
pub fn fuse_model<T: Scalar>(model: &Model, store: &ParamStore<T>) -> Result<FusedStore<T>> {
    let mut out = store.clone();
    let mut default_stats = Vec::new();
    for block in model.rec_blocks() {
        if fuse_rec_block(block, &mut out)? {
            default_stats.push(block.name.clone());
        }
    }
    Ok(FusedStore { store: out, default_stats })
}

/// Outcome of comparing training-phase and fused logits.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub samples: usize,
    pub max_abs_deviation: f64,
    pub tolerance: f64,
    /// Samples whose predicted class differs between the two models.
    pub argmax_mismatches: usize,
    /// Set when fusion used default (untrained) batch-norm statistics.
    pub warnings: Vec<String>,
    /// `max_abs_deviation < tolerance` and no argmax mismatches.
    pub passed: bool,
}

impl std::fmt::Display for EquivalenceReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "samples             {}", self.samples)?;
        writeln!(f, "max abs deviation   {:.3e}", self.max_abs_deviation)?;
        writeln!(f, "tolerance           {:.3e}", self.tolerance)?;
        writeln!(f, "argmax mismatches   {}", self.argmax_mismatches)?;
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        write!(f, "result              {}", if self.passed { "PASS" } else { "FAIL" })
    }
}

/// Probe settings for [`verify_equivalence`].
#[derive(Clone, Debug)]
pub struct VerifyConfig {
    /// Number of random multi-view samples.
    pub samples: usize,
    pub tolerance: f64,
    /// Spatial size of each probe image.
    pub size: usize,
    /// Probes evaluated per forward pass.
    pub batch: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            tolerance: TOLERANCE_F32,
            size: 64,
            batch: 10,
            seed: 0,
        }
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Compares eval-mode logits of the training-phase parameters with those of
/// the fused parameters on seeded standard-normal probes.
pub fn verify_equivalence<T: Scalar>(
    model: &Model,
    train: &ParamStore<T>,
    fused: &FusedStore<T>,
    cfg: &VerifyConfig,
) -> Result<EquivalenceReport> {
    if cfg.samples == 0 || cfg.batch == 0 {
        return Err(invalid("verify_equivalence needs at least one sample and a non-zero batch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut max_dev = 0.0f64;
    let mut mismatches = 0;
    let mut done = 0;
    while done < cfg.samples {
        let b = cfg.batch.min(cfg.samples - done);
        let views: Vec<Tensor<T>> = (0..model.config.views)
            .map(|_| {
                Tensor::from_fn(model.input_shape(b, cfg.size), |_, _, _, _| {
                    T::c(StandardNormal.sample(&mut rng))
                })
            })
            .collect();
        let a = model.predict(train, Phase::Training, &views)?;
        let f = model.predict(&fused.store, Phase::Inference, &views)?;
        if !a.all_finite() || !f.all_finite() {
            return Err(Error::NumericInstability("non-finite logits during equivalence check".into()));
        }
        max_dev = max_dev.max(a.max_abs_diff(&f).to_f64().unwrap_or(f64::INFINITY));
        let k = a.shape().c;
        for i in 0..b {
            if argmax(&a.data()[i * k..(i + 1) * k]) != argmax(&f.data()[i * k..(i + 1) * k]) {
                mismatches += 1;
            }
        }
        done += b;
    }
    let warnings = if fused.default_stats.is_empty() {
        Vec::new()
    } else {
        vec![format!(
            "{} of {} RECblocks were fused with default batch-norm statistics (mean 0, var 1); the model looks untrained",
            fused.default_stats.len(),
            model.rec_blocks().len()
        )]
    };
    Ok(EquivalenceReport {
        samples: cfg.samples,
        max_abs_deviation: max_dev,
        tolerance: cfg.tolerance,
        argmax_mismatches: mismatches,
        passed: max_dev < cfg.tolerance && mismatches == 0,
        warnings,
    })
}

#[cfg(test)]
mod tests;
