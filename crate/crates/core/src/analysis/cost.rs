//! Parameter and multiply-accumulate accounting.
//!
//! FLOPs are reported as multiply-accumulate operations (one multiply-add
//! counted once) over convolutions and fully connected layers only; bias,
//! normalization, activations, pooling and elementwise operations are
//! excluded. Costs are measured by running one profiled forward pass, so
//! they always match the layers the model actually executes.

use std::fmt;
use std::path::Path;

use indexmap::IndexMap;

use crate::autograd::{ParamKind, ParamStore, Tape};
use crate::error::{invalid, Result};
use crate::models::Model;
use crate::nn::{Ctx, Phase};
use crate::tensor::{Scalar, Shape, Tensor};

/// Layer names that belong to the classifier rather than the backbone.
const HEAD_LAYERS: [&str; 2] = ["head", "head_norm"];

/// Cost of one named layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    /// Trainable scalars owned by the layer.
    pub params: u64,
    /// Multiply-accumulates over all of the layer's calls.
    pub flops: u64,
    /// Output shape of the layer's last call, for layers that ran a
    /// convolution or linear map.
    pub output: Option<Shape>,
}

/// Parameter and FLOPs totals with a per-layer breakdown whose columns sum
/// exactly to the totals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_flops: u64,
    /// FLOPs of every layer except the head.
    pub backbone_flops: u64,
    pub head_flops: u64,
}

pub const COST_HEADER: [&str; 4] = ["layer", "params", "flops", "output_shape"];

/// Layer that owns a parameter: its name without the last `.field`.
fn layer_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(l, _)| l)
}

fn is_head(layer: &str) -> bool {
    HEAD_LAYERS.contains(&layer)
}

impl CostReport {
    fn from_layers(layers: Vec<LayerCost>) -> Self {
        let head_flops = layers.iter().filter(|l| is_head(&l.name)).map(|l| l.flops).sum();
        let total_flops = layers.iter().map(|l| l.flops).sum();
        Self {
            total_params: layers.iter().map(|l| l.params).sum(),
            total_flops,
            backbone_flops: total_flops - head_flops,
            head_flops,
            layers,
        }
    }

    /// Millions of parameters.
    pub fn params_m(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    /// Billions of multiply-accumulates.
    pub fn flops_g(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }

    /// CSV with [`COST_HEADER`], one line per layer, then a `total` line.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COST_HEADER)?;
        for l in &self.layers {
            w.write_record([
                l.name.clone(),
                l.params.to_string(),
                l.flops.to_string(),
                l.output.map(|s| format!("{}x{}x{}x{}", s.n, s.c, s.h, s.w)).unwrap_or_default(),
            ])?;
        }
        w.write_record(["total".to_string(), self.total_params.to_string(), self.total_flops.to_string(), String::new()])?;
        w.into_inner().map_err(|e| invalid(format!("cost buffer: {e}")))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::util::write_atomic(path, &self.to_csv()?)
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "params   {} ({:.2}M)", self.total_params, self.params_m())?;
        writeln!(f, "FLOPs    {} ({:.3}G MACs)", self.total_flops, self.flops_g())?;
        writeln!(f, "backbone {} / head {}", self.backbone_flops, self.head_flops)
    }
}

/// Trainable scalars per layer, in store order.
fn params_by_layer<T: Scalar>(store: &ParamStore<T>) -> IndexMap<String, u64> {
    let mut m = IndexMap::new();
    for (name, kind, t) in store.iter() {
        if kind == ParamKind::Trainable {
            *m.entry(layer_of(name).to_string()).or_insert(0) += t.len() as u64;
        }
    }
    m
}

/// Counts every trainable scalar in `store`; running statistics and other
/// buffers are excluded. FLOPs are left at zero.
pub fn count_params<T: Scalar>(store: &ParamStore<T>) -> CostReport {
    let layers = params_by_layer(store)
        .into_iter()
        .map(|(name, params)| LayerCost {
            name,
            params,
            flops: 0,
            output: None,
        })
        .collect();
    CostReport::from_layers(layers)
}

/// Parameters and FLOPs of one eval-mode forward pass of `model` on a view
/// batch of shape `input` (every view gets the same shape). The shared
/// backbone is counted once per view.
pub fn count_flops(model: &Model, store: &ParamStore<f32>, phase: Phase, input: Shape) -> Result<CostReport> {
    if input.numel() == 0 {
        return Err(invalid(format!("empty input shape {input}")));
    }
    let mut tape = Tape::profiling();
    let mut ctx = Ctx::new(&mut tape, store, false, phase);
    let views: Vec<_> = (0..model.config.views)
        .map(|_| ctx.tape.constant(Tensor::zeros(input)))
        .collect();
    model.forward(&mut ctx, &views)?;
    let mut layers: IndexMap<String, LayerCost> = params_by_layer(store)
        .into_iter()
        .map(|(name, params)| {
            let cost = LayerCost {
                name: name.clone(),
                params,
                flops: 0,
                output: None,
            };
            (name, cost)
        })
        .collect();
    for op in tape.take_profile() {
        let e = layers.entry(op.layer.clone()).or_insert_with(|| LayerCost {
            name: op.layer,
            params: 0,
            flops: 0,
            output: None,
        });
        e.flops += op.macs;
        e.output = Some(op.output);
    }
    Ok(CostReport::from_layers(layers.into_values().collect()))
}
