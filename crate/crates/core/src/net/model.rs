use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::spec::{LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::{
    avg_pool2, conv_block_raw, global_avg_pool, linear, ConvKind, ConvLayerSpec, Graph, Tensor, Var,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub spec: ConvLayerSpec,
    /// Spatial kernel (the grouped branch for parallel layers).
    pub weight: Tensor,
    /// 1x1 branch, parallel layers only.
    pub pointwise: Option<Tensor>,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    AvgPool,
    GlobalAvgPool,
    FullyConnected(FcLayer),
}

/// A built network: its [`NetworkSpec`] plus weights. Every conv block is followed
/// by a ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: NetworkSpec,
    layers: Vec<Layer>,
}

fn kaiming_uniform(shape: [usize; 4], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

impl Model {
    /// Kaiming-uniform weights (fan-in of both branches combined for parallel
    /// layers), zero biases.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Conv(c) => {
                    let k2 = c.d_k * c.d_k;
                    let bias = c.bias.then(|| Tensor::zeros([c.d_n]));
                    match c.kind {
                        ConvKind::Parallel => {
                            let fan_in = k2 * c.d_m / c.groups + c.d_m;
                            let weight = kaiming_uniform(c.kernel_shape(), fan_in, &mut rng);
                            let pointwise =
                                Some(kaiming_uniform(c.pointwise_shape(), fan_in, &mut rng));
                            Layer::Conv(ConvLayer {
                                spec: c,
                                weight,
                                pointwise,
                                bias,
                            })
                        }
                        _ => {
                            let fan_in = k2 * c.d_m / c.groups;
                            let weight = kaiming_uniform(c.kernel_shape(), fan_in, &mut rng);
                            Layer::Conv(ConvLayer {
                                spec: c,
                                weight,
                                pointwise: None,
                                bias,
                            })
                        }
                    }
                }
                LayerSpec::AvgPool => Layer::AvgPool,
                LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
                LayerSpec::FullyConnected {
                    inputs,
                    num_classes,
                } => {
                    let bound = (1.0 / inputs as f64).sqrt();
                    Layer::FullyConnected(FcLayer {
                        weight: Tensor::uniform([num_classes, inputs], -bound, bound, &mut rng),
                        bias: Tensor::zeros([num_classes]),
                    })
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    /// Assembles a model from existing weights, checking every shape.
    pub fn from_parts(spec: NetworkSpec, layers: Vec<Layer>) -> Result<Self> {
        spec.validate()?;
        if spec.layers.len() != layers.len() {
            return Err(Error::Shape(format!(
                "{} layer specs but {} layers",
                spec.layers.len(),
                layers.len()
            )));
        }
        for (i, (ls, l)) in spec.layers.iter().zip(&layers).enumerate() {
            let ok = match (ls, l) {
                (LayerSpec::Conv(c), Layer::Conv(cl)) => {
                    cl.spec == *c
                        && cl.weight.shape() == c.kernel_shape()
                        && match (c.kind, &cl.pointwise) {
                            (ConvKind::Parallel, Some(p)) => p.shape() == c.pointwise_shape(),
                            (ConvKind::Parallel, None) => false,
                            (_, p) => p.is_none(),
                        }
                        && match &cl.bias {
                            Some(b) => c.bias && b.shape() == [c.d_n],
                            None => !c.bias,
                        }
                }
                (LayerSpec::AvgPool, Layer::AvgPool)
                | (LayerSpec::GlobalAvgPool, Layer::GlobalAvgPool) => true,
                (
                    LayerSpec::FullyConnected {
                        inputs,
                        num_classes,
                    },
                    Layer::FullyConnected(fc),
                ) => {
                    fc.weight.shape() == [*num_classes, *inputs]
                        && fc.bias.shape() == [*num_classes]
                }
                _ => false,
            };
            if !ok {
                return Err(Error::Shape(format!(
                    "layer {i} does not match its spec {ls:?}"
                )));
            }
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Parameters in a fixed order (layer order; weight, pointwise, bias).
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv(c) => {
                    out.push(&c.weight);
                    out.extend(c.pointwise.as_ref());
                    out.extend(c.bias.as_ref());
                }
                Layer::FullyConnected(fc) => {
                    out.push(&fc.weight);
                    out.push(&fc.bias);
                }
                _ => {}
            }
        }
        out
    }

    /// Same order as [`Model::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv(c) => {
                    out.push(&mut c.weight);
                    out.extend(c.pointwise.as_mut());
                    out.extend(c.bias.as_mut());
                }
                Layer::FullyConnected(fc) => {
                    out.push(&mut fc.weight);
                    out.push(&mut fc.bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.dims4()?;
        if [c, h, w] != self.spec.input_shape {
            return Err(Error::Shape(format!(
                "model expects N x {:?} input, got {:?}",
                self.spec.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `graph`. Returns the logits and the
    /// parameter variables in [`Model::parameters`] order.
    pub fn forward_graph<'a>(
        &'a self,
        graph: &mut Graph<'a, f32>,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_input(graph.value(x))?;
        let mut params = Vec::new();
        let mut h = x;
        for l in &self.layers {
            h = match l {
                Layer::Conv(c) => {
                    let w = graph.param(&c.weight);
                    params.push(w);
                    let pw = c.pointwise.as_ref().map(|p| graph.param(p));
                    params.extend(pw);
                    let b = c.bias.as_ref().map(|b| graph.param(b));
                    params.extend(b);
                    graph.conv_block(h, w, pw, b, c.spec.groups, c.spec.padding)?
                }
                Layer::AvgPool => graph.avg_pool2(h)?,
                Layer::GlobalAvgPool => graph.global_avg_pool(h)?,
                Layer::FullyConnected(fc) => {
                    let w = graph.param(&fc.weight);
                    let b = graph.param(&fc.bias);
                    params.push(w);
                    params.push(b);
                    graph.linear(h, w, Some(b))?
                }
            };
        }
        Ok((h, params))
    }

    /// Inference without recording a graph. Returns `N x num_classes` logits.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for l in &self.layers {
            h = match l {
                Layer::Conv(c) => conv_block_raw(
                    &h,
                    &c.weight,
                    c.pointwise.as_ref(),
                    c.bias.as_ref(),
                    c.spec.groups,
                    c.spec.padding,
                )?,
                Layer::AvgPool => avg_pool2(&h)?,
                Layer::GlobalAvgPool => global_avg_pool(&h)?,
                Layer::FullyConnected(fc) => linear(&h, &fc.weight, Some(&fc.bias))?,
            };
        }
        Ok(h)
    }
}
