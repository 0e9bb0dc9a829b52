//! Analytic multiply-accumulate and parameter counts.
//!
//! FLOPs here are multiply-accumulates of the convolution itself; bias
//! additions, activations and pooling are not counted. For a stride-1
//! same-padded layer on a `H x W` map:
//!
//! * standard: `H W K^2 M N`
//! * parallel with group size `g`: `H W K^2 (M/g) N + H W M N`
//!
//! so the parallel/standard ratio is exactly `1/g + 1/K^2`.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use super::spec::{LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::{ConvKind, ConvLayerSpec};

pub fn flops_standard(layer: &ConvLayerSpec, h: usize, w: usize) -> u64 {
    (h * w * layer.d_k * layer.d_k * layer.d_m * layer.d_n) as u64
}

pub fn flops_parallel(layer: &ConvLayerSpec, h: usize, w: usize) -> Result<u64> {
    check_groups(layer)?;
    let hw = (h * w) as u64;
    let k2 = (layer.d_k * layer.d_k) as u64;
    let (m, n, g) = (layer.d_m as u64, layer.d_n as u64, layer.groups as u64);
    Ok(hw * k2 * (m / g) * n + hw * m * n)
}

fn check_groups(layer: &ConvLayerSpec) -> Result<()> {
    if layer.groups == 0 || layer.d_m % layer.groups != 0 {
        return Err(Error::Group(format!(
            "g = {} must divide the {} input channels",
            layer.groups, layer.d_m
        )));
    }
    Ok(())
}

/// Multiply-accumulates of `layer` as configured (any kind).
pub fn layer_flops(layer: &ConvLayerSpec, h: usize, w: usize) -> Result<u64> {
    let hw = (h * w) as u64;
    let k2 = (layer.d_k * layer.d_k) as u64;
    let (m, n, g) = (
        layer.d_m as u64,
        layer.d_n as u64,
        layer.groups.max(1) as u64,
    );
    Ok(match layer.kind {
        ConvKind::Standard => flops_standard(layer, h, w),
        ConvKind::Grouped => {
            check_groups(layer)?;
            hw * k2 * (m / g) * n
        }
        ConvKind::Pointwise => hw * m * n,
        ConvKind::Parallel => flops_parallel(layer, h, w)?,
    })
}

pub fn params_standard(layer: &ConvLayerSpec) -> u64 {
    (layer.d_k * layer.d_k * layer.d_m * layer.d_n + if layer.bias { layer.d_n } else { 0 }) as u64
}

pub fn params_parallel(layer: &ConvLayerSpec) -> Result<u64> {
    check_groups(layer)?;
    let spatial = layer.d_k * layer.d_k * (layer.d_m / layer.groups) * layer.d_n;
    let point = layer.d_m * layer.d_n;
    Ok((spatial + point + if layer.bias { layer.d_n } else { 0 }) as u64)
}

/// Learnable parameters of `layer` as configured (any kind).
pub fn layer_params(layer: &ConvLayerSpec) -> Result<u64> {
    let bias = if layer.bias { layer.d_n } else { 0 } as u64;
    Ok(match layer.kind {
        ConvKind::Standard => params_standard(layer),
        ConvKind::Grouped => {
            check_groups(layer)?;
            (layer.d_k * layer.d_k * (layer.d_m / layer.groups) * layer.d_n) as u64 + bias
        }
        ConvKind::Pointwise => (layer.d_m * layer.d_n) as u64 + bias,
        ConvKind::Parallel => params_parallel(layer)?,
    })
}

/// `1/g + 1/K^2`. Values `>= 1` mean the parallel layer costs at least as
/// much as the standard one; that case is logged as a warning.
pub fn reduction_ratio(layer: &ConvLayerSpec) -> Ratio<u64> {
    let r =
        Ratio::new(1, layer.groups.max(1) as u64) + Ratio::new(1, (layer.d_k * layer.d_k) as u64);
    if r >= Ratio::from_integer(1) {
        log::warn!(
            "no reduction: g = {}, K = {} gives R = {} >= 1",
            layer.groups,
            layer.d_k,
            r
        );
    }
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub index: usize,
    pub name: String,
    pub d_m: usize,
    pub d_n: usize,
    pub d_k: usize,
    pub groups: usize,
    pub height: usize,
    pub width: usize,
    pub standard_flops: u64,
    pub parallel_flops: u64,
    pub standard_params: u64,
    pub parallel_params: u64,
    /// Exact `parallel / standard` FLOP ratio as `"num/den"`; absent for the
    /// fully connected head.
    pub ratio: Option<String>,
    pub ratio_value: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTotals {
    pub standard_flops: u64,
    pub parallel_flops: u64,
    pub standard_params: u64,
    pub parallel_params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub group_size: usize,
    pub input_shape: [usize; 3],
    pub rows: Vec<CostRow>,
    pub totals: CostTotals,
}

/// Per-layer and total cost of the network's conv chain evaluated both as
/// standard convolutions and as parallel blocks.
pub fn cost_report(spec: &NetworkSpec) -> Result<CostReport> {
    spec.validate()?;
    let dims = spec.layer_input_dims();
    let mut rows = Vec::new();
    let mut conv_index = 0;
    for (layer, &(h, w)) in spec.layers.iter().zip(&dims) {
        match layer {
            LayerSpec::Conv(c) => {
                conv_index += 1;
                let groups = match c.kind {
                    ConvKind::Grouped | ConvKind::Parallel => c.groups,
                    _ => 1,
                };
                let par = ConvLayerSpec {
                    kind: ConvKind::Parallel,
                    groups,
                    ..*c
                };
                let std = ConvLayerSpec {
                    kind: ConvKind::Standard,
                    groups: 1,
                    ..*c
                };
                let standard_flops = flops_standard(&std, h, w);
                let parallel_flops = flops_parallel(&par, h, w)?;
                let r = reduction_ratio(&par);
                assert_eq!(Ratio::new(parallel_flops, standard_flops), r);
                rows.push(CostRow {
                    index: conv_index,
                    name: format!("parallel-conv{conv_index}"),
                    d_m: c.d_m,
                    d_n: c.d_n,
                    d_k: c.d_k,
                    groups,
                    height: h,
                    width: w,
                    standard_flops,
                    parallel_flops,
                    standard_params: params_standard(&std),
                    parallel_params: params_parallel(&par)?,
                    ratio: Some(format!("{}/{}", r.numer(), r.denom())),
                    ratio_value: Some(*r.numer() as f64 / *r.denom() as f64),
                });
            }
            LayerSpec::FullyConnected {
                inputs,
                num_classes,
            } => {
                let flops = (inputs * num_classes) as u64;
                let params = flops + *num_classes as u64;
                rows.push(CostRow {
                    index: conv_index + 1,
                    name: format!("fc-{num_classes}"),
                    d_m: *inputs,
                    d_n: *num_classes,
                    d_k: 1,
                    groups: 1,
                    height: 1,
                    width: 1,
                    standard_flops: flops,
                    parallel_flops: flops,
                    standard_params: params,
                    parallel_params: params,
                    ratio: None,
                    ratio_value: None,
                });
            }
            LayerSpec::AvgPool | LayerSpec::GlobalAvgPool => {}
        }
    }
    let totals = rows.iter().fold(
        CostTotals {
            standard_flops: 0,
            parallel_flops: 0,
            standard_params: 0,
            parallel_params: 0,
        },
        |t, r| CostTotals {
            standard_flops: t.standard_flops + r.standard_flops,
            parallel_flops: t.parallel_flops + r.parallel_flops,
            standard_params: t.standard_params + r.standard_params,
            parallel_params: t.parallel_params + r.parallel_params,
        },
    );
    Ok(CostReport {
        group_size: spec.group_size,
        input_shape: spec.input_shape,
        rows,
        totals,
    })
}

impl CostReport {
    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let [c, h, w] = self.input_shape;
        let _ = writeln!(out, "input {c}x{h}x{w}, g = {}", self.group_size);
        let _ = writeln!(
            out,
            "{:<17} {:>5} {:>5} {:>3} {:>7} {:>15} {:>15} {:>12} {:>12} {:>8} {:>7}",
            "layer",
            "M",
            "N",
            "g",
            "HxW",
            "std MACs",
            "par MACs",
            "std params",
            "par params",
            "R",
            "R~"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<17} {:>5} {:>5} {:>3} {:>7} {:>15} {:>15} {:>12} {:>12} {:>8} {:>7}",
                r.name,
                r.d_m,
                r.d_n,
                r.groups,
                format!("{}x{}", r.height, r.width),
                r.standard_flops,
                r.parallel_flops,
                r.standard_params,
                r.parallel_params,
                r.ratio.as_deref().unwrap_or("-"),
                r.ratio_value
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "-".into()),
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            out,
            "{:<17} {:>5} {:>5} {:>3} {:>7} {:>15} {:>15} {:>12} {:>12}",
            "total",
            "",
            "",
            "",
            "",
            t.standard_flops,
            t.parallel_flops,
            t.standard_params,
            t.parallel_params
        );
        let _ = writeln!(
            out,
            "standard: {:.2} M params, {:.2} GMACs | parallel: {:.2} M params, {:.2} GMACs",
            t.standard_params as f64 / 1e6,
            t.standard_flops as f64 / 1e9,
            t.parallel_params as f64 / 1e6,
            t.parallel_flops as f64 / 1e9,
        );
        out
    }
}
