use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: Padding,
    },
    BatchNorm {
        channels: usize,
        momentum: f64,
        epsilon: f64,
    },
    LeakyRelu {
        slope: f64,
    },
    /// Flattens `(channels, m)` to `channels * m` features first.
    Fc {
        in_features: usize,
        out_features: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalActivation {
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub n_meters: usize,
    pub layers: Vec<LayerSpec>,
    pub final_activation: FinalActivation,
}

impl ArchitectureSpec {
    /// Conv/BN/LeakyReLU blocks with the given `(kernel, width)` pairs, then
    /// a fully connected layer onto `n_meters` outputs.
    pub fn conv_stack(n_meters: usize, blocks: &[(usize, usize)]) -> Self {
        let mut layers = Vec::new();
        let mut ch = 1;
        for &(kernel, width) in blocks {
            layers.push(LayerSpec::Conv {
                kernel,
                in_channels: ch,
                out_channels: width,
                stride: 1,
                padding: Padding::Same,
            });
            layers.push(LayerSpec::BatchNorm {
                channels: width,
                momentum: BN_MOMENTUM,
                epsilon: BN_EPSILON,
            });
            layers.push(LayerSpec::LeakyRelu { slope: LEAKY_SLOPE });
            ch = width;
        }
        layers.push(LayerSpec::Fc {
            in_features: ch * n_meters,
            out_features: n_meters,
        });
        ArchitectureSpec {
            n_meters,
            layers,
            final_activation: FinalActivation::Sigmoid,
        }
    }

    /// Kernel lengths and default channel widths for the three bundled
    /// systems, keyed by bus count (up to 14, up to 30, larger).
    pub fn preset_blocks(n_bus: usize) -> Vec<(usize, usize)> {
        if n_bus <= 14 {
            vec![(10, 16), (5, 32), (3, 32), (3, 32)]
        } else if n_bus <= 30 {
            vec![(10, 16), (5, 32), (3, 32), (3, 32), (3, 32)]
        } else {
            vec![(5, 16), (5, 32), (5, 32), (3, 64), (3, 64), (3, 64)]
        }
    }

    pub fn preset(n_bus: usize, n_meters: usize) -> Self {
        Self::conv_stack(n_meters, &Self::preset_blocks(n_bus))
    }

    /// Preset kernels with overridden widths (one per conv block).
    pub fn preset_with_widths(n_bus: usize, n_meters: usize, widths: &[usize]) -> Result<Self> {
        let blocks = Self::preset_blocks(n_bus);
        if widths.len() != blocks.len() {
            return Err(Error::Config(format!(
                "expected {} channel widths, got {}",
                blocks.len(),
                widths.len()
            )));
        }
        let blocks: Vec<_> = blocks.iter().zip(widths).map(|(b, w)| (b.0, *w)).collect();
        let arch = Self::conv_stack(n_meters, &blocks);
        arch.validate()?;
        Ok(arch)
    }

    /// Checks that layer shapes chain and that the output length is `n_meters`.
    pub fn validate(&self) -> Result<()> {
        let m = self.n_meters;
        if m == 0 {
            return Err(Error::Shape("architecture needs at least one meter".into()));
        }
        let mut ch = 1;
        let mut flat = false;
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Err(Error::Shape(format!("layer {i}: {msg}")));
            if flat {
                return bad("no layer may follow the fully connected layer".into());
            }
            match *layer {
                LayerSpec::Conv {
                    kernel,
                    in_channels,
                    out_channels,
                    stride,
                    ..
                } => {
                    if in_channels != ch {
                        return bad(format!("expects {in_channels} channels, receives {ch}"));
                    }
                    if kernel == 0 || out_channels == 0 || stride != 1 {
                        return bad("conv needs kernel >= 1, out_channels >= 1, stride 1".into());
                    }
                    ch = out_channels;
                }
                LayerSpec::BatchNorm {
                    channels,
                    momentum,
                    epsilon,
                } => {
                    if channels != ch {
                        return bad(format!("batchnorm over {channels} channels, receives {ch}"));
                    }
                    if !(0.0..=1.0).contains(&momentum) || epsilon <= 0.0 {
                        return bad("batchnorm momentum must lie in [0, 1], epsilon > 0".into());
                    }
                }
                LayerSpec::LeakyRelu { slope } => {
                    if !slope.is_finite() {
                        return bad("slope must be finite".into());
                    }
                }
                LayerSpec::Fc {
                    in_features,
                    out_features,
                } => {
                    if in_features != ch * m {
                        return bad(format!("fc expects {in_features} features, receives {}", ch * m));
                    }
                    if out_features != m {
                        return bad(format!("fc must output {m} values, not {out_features}"));
                    }
                    flat = true;
                }
            }
        }
        if !flat {
            return Err(Error::Shape("architecture must end in a fully connected layer".into()));
        }
        Ok(())
    }
}
