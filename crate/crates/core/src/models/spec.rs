use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{ModelError, Partition};

pub const CONV_KERNEL: usize = 3;
/// Zero padding of every backbone convolution; with a 3x3 kernel the spatial
/// size is preserved.
pub const CONV_PADDING: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Backbone {
    /// Dense ReLU layers of the given widths.
    Mlp { hidden: Vec<usize> },
    /// 3x3 same-padded ReLU convolutions over a `channels_in x height x width`
    /// image, flattened at the end.
    Cnn {
        channels_in: usize,
        height: usize,
        width: usize,
        channels: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Head {
    Classifier {
        num_classes: usize,
    },
    /// Linear map back to the input dimension.
    Reconstructor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub backbone: Backbone,
    pub head: Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Backbone,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense { fan_in: usize, fan_out: usize },
    Conv { in_channels: usize, out_channels: usize },
}

impl LayerKind {
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Dense { fan_in, .. } => fan_in,
            LayerKind::Conv { in_channels, .. } => in_channels * CONV_KERNEL * CONV_KERNEL,
        }
    }

    fn sizes(&self) -> (usize, usize) {
        match *self {
            LayerKind::Dense { fan_in, fan_out } => (fan_in * fan_out, fan_out),
            LayerKind::Conv {
                in_channels,
                out_channels,
            } => (out_channels * in_channels * CONV_KERNEL * CONV_KERNEL, out_channels),
        }
    }
}

/// Location of one layer's weight and bias inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layer {
    pub kind: LayerKind,
    pub part: Part,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

impl ModelSpec {
    /// Desk-scale default: MLP `input -> 64 -> 32`.
    pub fn default_mlp(input_dim: usize, head: Head) -> Self {
        Self {
            input_dim,
            backbone: Backbone::Mlp { hidden: vec![64, 32] },
            head,
        }
    }

    pub fn with_head(&self, head: Head) -> Self {
        Self { head, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidSpec(m.to_owned()));
        if self.input_dim == 0 {
            return bad("input_dim must be positive");
        }
        match &self.backbone {
            Backbone::Mlp { hidden } => {
                if hidden.is_empty() || hidden.contains(&0) {
                    return bad("mlp backbone needs at least one layer and positive widths");
                }
            }
            Backbone::Cnn {
                channels_in,
                height,
                width,
                channels,
            } => {
                if channels.is_empty() || channels.contains(&0) || *channels_in == 0 {
                    return bad("cnn backbone needs at least one layer and positive channel counts");
                }
                if channels_in * height * width != self.input_dim {
                    return bad("cnn image geometry does not match input_dim");
                }
            }
        }
        if let Head::Classifier { num_classes } = self.head {
            if num_classes < 2 {
                return bad("classifier head needs at least two classes");
            }
        }
        Ok(())
    }

    /// Width of the backbone output, which is the head input.
    pub fn feature_dim(&self) -> usize {
        match &self.backbone {
            Backbone::Mlp { hidden } => *hidden.last().expect("validated"),
            Backbone::Cnn {
                height,
                width,
                channels,
                ..
            } => channels.last().expect("validated") * height * width,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.head {
            Head::Classifier { num_classes } => num_classes,
            Head::Reconstructor => self.input_dim,
        }
    }

    pub fn layers(&self) -> Vec<Layer> {
        let mut kinds = Vec::new();
        match &self.backbone {
            Backbone::Mlp { hidden } => {
                let mut prev = self.input_dim;
                for &h in hidden {
                    kinds.push((
                        LayerKind::Dense {
                            fan_in: prev,
                            fan_out: h,
                        },
                        Part::Backbone,
                    ));
                    prev = h;
                }
            }
            Backbone::Cnn {
                channels_in, channels, ..
            } => {
                let mut prev = *channels_in;
                for &c in channels {
                    kinds.push((
                        LayerKind::Conv {
                            in_channels: prev,
                            out_channels: c,
                        },
                        Part::Backbone,
                    ));
                    prev = c;
                }
            }
        }
        kinds.push((
            LayerKind::Dense {
                fan_in: self.feature_dim(),
                fan_out: self.output_dim(),
            },
            Part::Head,
        ));

        let mut offset = 0;
        kinds
            .into_iter()
            .map(|(kind, part)| {
                let (nw, nb) = kind.sizes();
                let layer = Layer {
                    kind,
                    part,
                    weight: offset..offset + nw,
                    bias: offset + nw..offset + nw + nb,
                };
                offset += nw + nb;
                layer
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().last().map_or(0, |l| l.bias.end)
    }

    pub fn partition(&self) -> Partition {
        let layers = self.layers();
        let split = layers
            .iter()
            .find(|l| l.part == Part::Head)
            .map_or(0, |l| l.weight.start);
        Partition {
            backbone: 0..split,
            head: split..self.param_count(),
        }
    }
}
