use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvKind, ConvLayerSpec};

/// Output-channel plan of the light-weight network: five stages separated by
/// 2x2 average pooling.
pub const REFERENCE_STAGES: [&[usize]; 5] = [
    &[64, 64],
    &[128, 128],
    &[256, 256, 256],
    &[512, 512, 512, 512, 512],
    &[1024, 1024],
];

pub const DEFAULT_GROUP_SIZE: usize = 4;
pub const DEFAULT_NUM_CLASSES: usize = 7;
pub const DEFAULT_INPUT_FRAMES: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv(ConvLayerSpec),
    AvgPool,
    GlobalAvgPool,
    FullyConnected { inputs: usize, num_classes: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `(channels, height, width)`; height is the Mel axis, width is time.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub group_size: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// The 14-layer parallel-convolution network on a `1 x 128 x 128` input.
    pub fn reference(group_size: usize) -> Result<Self> {
        Self::from_stages(
            &REFERENCE_STAGES,
            ConvKind::Parallel,
            group_size,
            [1, 128, DEFAULT_INPUT_FRAMES],
            DEFAULT_NUM_CLASSES,
        )
    }

    /// Builds `conv* | pool | conv* | ... | conv* | GAP | FC` from a stage
    /// plan. For grouped and parallel layers `g` is clamped to 1 where the
    /// layer has a single input channel.
    pub fn from_stages(
        stages: &[&[usize]],
        kind: ConvKind,
        group_size: usize,
        input_shape: [usize; 3],
        num_classes: usize,
    ) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::Group("group size must be positive".into()));
        }
        let mut layers = Vec::new();
        let mut channels = input_shape[0];
        for (si, stage) in stages.iter().enumerate() {
            if si > 0 {
                layers.push(LayerSpec::AvgPool);
            }
            for &out in stage.iter() {
                let spec = match kind {
                    ConvKind::Standard => ConvLayerSpec::standard(channels, out, 3),
                    ConvKind::Pointwise => ConvLayerSpec::pointwise(channels, out),
                    ConvKind::Grouped | ConvKind::Parallel => {
                        let g = if channels == 1 && group_size != 1 {
                            log::info!("clamping g = {group_size} to 1 for a layer with a single input channel");
                            1
                        } else {
                            group_size
                        };
                        if kind == ConvKind::Grouped {
                            ConvLayerSpec::grouped(channels, out, 3, g)
                        } else {
                            ConvLayerSpec::parallel(channels, out, 3, g)
                        }
                    }
                };
                layers.push(LayerSpec::Conv(spec));
                channels = out;
            }
        }
        layers.push(LayerSpec::GlobalAvgPool);
        layers.push(LayerSpec::FullyConnected {
            inputs: channels,
            num_classes,
        });
        let spec = Self {
            input_shape,
            num_classes,
            group_size,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Same channel chain with every conv replaced by `kind` (group size kept
    /// where meaningful).
    pub fn with_conv_kind(&self, kind: ConvKind) -> Result<Self> {
        let stages = self.stages();
        let refs: Vec<&[usize]> = stages.iter().map(|s| s.as_slice()).collect();
        Self::from_stages(
            &refs,
            kind,
            self.group_size,
            self.input_shape,
            self.num_classes,
        )
    }

    /// Output channels per stage.
    pub fn stages(&self) -> Vec<Vec<usize>> {
        let mut stages = vec![Vec::new()];
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv(c) => stages.last_mut().unwrap().push(c.d_n),
                LayerSpec::AvgPool => stages.push(Vec::new()),
                _ => {}
            }
        }
        stages
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &ConvLayerSpec> {
        self.layers.iter().filter_map(|l| match l {
            LayerSpec::Conv(c) => Some(c),
            _ => None,
        })
    }

    /// Checks the channel chain, group divisibility, and that every pooling
    /// layer sees even spatial dims.
    pub fn validate(&self) -> Result<()> {
        let [mut c, mut h, mut w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "invalid input shape {:?}",
                self.input_shape
            )));
        }
        let mut flat = false;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv(spec) => {
                    if flat {
                        return Err(Error::Shape(format!(
                            "layer {i}: convolution after global pooling"
                        )));
                    }
                    if spec.d_m != c {
                        return Err(Error::Shape(format!(
                            "layer {i}: expects {} input channels, chain provides {c}",
                            spec.d_m
                        )));
                    }
                    spec.validate()?;
                    c = spec.d_n;
                }
                LayerSpec::AvgPool => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::Shape(format!(
                            "layer {i}: cannot 2x2-pool an odd {h}x{w} map"
                        )));
                    }
                    h /= 2;
                    w /= 2;
                }
                LayerSpec::GlobalAvgPool => flat = true,
                LayerSpec::FullyConnected {
                    inputs,
                    num_classes,
                } => {
                    if !flat || *inputs != c || *num_classes != self.num_classes {
                        return Err(Error::Shape(format!(
                            "layer {i}: fully connected {inputs}->{num_classes} does not fit a pooled {c}-vector / {} classes",
                            self.num_classes
                        )));
                    }
                }
            }
        }
        match self.layers.last() {
            Some(LayerSpec::FullyConnected { .. }) => Ok(()),
            _ => Err(Error::Shape(
                "network must end in a fully connected layer".into(),
            )),
        }
    }

    /// Spatial size seen by each layer's input.
    pub fn layer_input_dims(&self) -> Vec<(usize, usize)> {
        let [_, mut h, mut w] = self.input_shape;
        self.layers
            .iter()
            .map(|l| {
                let dims = (h, w);
                if matches!(l, LayerSpec::AvgPool) {
                    h /= 2;
                    w /= 2;
                }
                dims
            })
            .collect()
    }
}
