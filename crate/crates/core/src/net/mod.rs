//! The light-weight parallel-convolution network: architecture, analytic
//! cost accounting, weights and checkpoints.

mod checkpoint;
mod cost;
mod model;
mod spec;

pub use checkpoint::{decode_model, encode_model, load_model, save_model, FORMAT_VERSION, MAGIC};
pub use cost::{
    cost_report, flops_parallel, flops_standard, layer_flops, layer_params, params_parallel,
    params_standard, reduction_ratio, CostReport, CostRow, CostTotals,
};
pub use model::{ConvLayer, FcLayer, Layer, Model};
pub use spec::{
    LayerSpec, NetworkSpec, DEFAULT_GROUP_SIZE, DEFAULT_INPUT_FRAMES, DEFAULT_NUM_CLASSES,
    REFERENCE_STAGES,
};
