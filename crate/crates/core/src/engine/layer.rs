use serde::{Deserialize, Serialize};

use crate::numerics::{self, BackendProfile, Lane, NumericsError, Tensor};

use super::EngineError;

/// One inference layer. Parameter tensors are public: the attack mutates
/// them on private model copies.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `y = W x + b` with `weight[out, in]` (one row per output unit).
    Linear { weight: Tensor, bias: Tensor },
    /// Two consecutive linear maps with no nonlinearity between:
    /// `y = W2 (W1 x) + b`, `w1[mid, in]`, `w2[out, mid]`. The host for
    /// product-preserving permutations of the contraction dimension.
    FactoredLinear {
        w1: Tensor,
        w2: Tensor,
        bias: Tensor,
    },
    /// `kernel[cout, cin, kh, kw]` over `[cin, h, w]` inputs, zero padding.
    Conv2d {
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Relu,
    GlobalAvgPool,
}

/// Architecture description of a [`Layer`]: shapes and config, no values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        inputs: usize,
        outputs: usize,
    },
    FactoredLinear {
        inputs: usize,
        mid: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: usize,
    },
    Relu,
    GlobalAvgPool,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Linear { weight, .. } => LayerSpec::Linear {
                inputs: weight.shape()[1],
                outputs: weight.shape()[0],
            },
            Layer::FactoredLinear { w1, w2, .. } => LayerSpec::FactoredLinear {
                inputs: w1.shape()[1],
                mid: w1.shape()[0],
                outputs: w2.shape()[0],
            },
            Layer::Conv2d {
                kernel,
                stride,
                padding,
                ..
            } => LayerSpec::Conv2d {
                in_channels: kernel.shape()[1],
                out_channels: kernel.shape()[0],
                kernel: [kernel.shape()[2], kernel.shape()[3]],
                stride: *stride,
                padding: *padding,
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::GlobalAvgPool => LayerSpec::GlobalAvgPool,
        }
    }

    /// A zero-initialized layer matching `spec`.
    pub fn from_spec(spec: &LayerSpec) -> Layer {
        match *spec {
            LayerSpec::Linear { inputs, outputs } => Layer::Linear {
                weight: Tensor::zeros(vec![outputs, inputs]),
                bias: Tensor::zeros(vec![outputs]),
            },
            LayerSpec::FactoredLinear {
                inputs,
                mid,
                outputs,
            } => Layer::FactoredLinear {
                w1: Tensor::zeros(vec![mid, inputs]),
                w2: Tensor::zeros(vec![outputs, mid]),
                bias: Tensor::zeros(vec![outputs]),
            },
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => Layer::Conv2d {
                kernel: Tensor::zeros(vec![out_channels, in_channels, kernel[0], kernel[1]]),
                bias: Tensor::zeros(vec![out_channels]),
                stride,
                padding,
            },
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
        }
    }

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        match self {
            Layer::Linear { weight, bias } => vec![weight, bias],
            Layer::FactoredLinear { w1, w2, bias } => vec![w1, w2, bias],
            Layer::Conv2d { kernel, bias, .. } => vec![kernel, bias],
            Layer::Relu | Layer::GlobalAvgPool => vec![],
        }
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Linear { weight, bias } => vec![weight, bias],
            Layer::FactoredLinear { w1, w2, bias } => vec![w1, w2, bias],
            Layer::Conv2d { kernel, bias, .. } => vec![kernel, bias],
            Layer::Relu | Layer::GlobalAvgPool => vec![],
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, EngineError> {
        let bad = |detail: String| EngineError::Shape { layer: None, detail };
        match self {
            Layer::Linear { weight, .. } => {
                // Dense layers flatten row-major: any input shape with the
                // right element count composes.
                if input.iter().product::<usize>() != weight.shape()[1] {
                    return Err(bad(format!(
                        "linear expects {} inputs, got {:?}",
                        weight.shape()[1],
                        input
                    )));
                }
                Ok(vec![weight.shape()[0]])
            }
            Layer::FactoredLinear { w1, w2, .. } => {
                if input != [w1.shape()[1]] {
                    return Err(bad(format!(
                        "factored-linear expects [{}], got {:?}",
                        w1.shape()[1],
                        input
                    )));
                }
                if w1.shape()[0] != w2.shape()[1] {
                    return Err(bad("factored-linear inner dims disagree".into()));
                }
                Ok(vec![w2.shape()[0]])
            }
            Layer::Conv2d {
                kernel,
                stride,
                padding,
                ..
            } => {
                let ks = kernel.shape();
                if input.len() != 3 || input[0] != ks[1] {
                    return Err(bad(format!("conv2d expects [{}, h, w], got {:?}", ks[1], input)));
                }
                let (h, w) = (input[1], input[2]);
                if h + 2 * padding < ks[2] || w + 2 * padding < ks[3] {
                    return Err(bad("conv2d kernel larger than padded input".into()));
                }
                Ok(vec![
                    ks[0],
                    (h + 2 * padding - ks[2]) / stride + 1,
                    (w + 2 * padding - ks[3]) / stride + 1,
                ])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::GlobalAvgPool => {
                if input.len() != 3 {
                    return Err(bad(format!("global-avg-pool expects [c, h, w], got {:?}", input)));
                }
                Ok(vec![input[0]])
            }
        }
    }

    pub fn forward(
        &self,
        input: &Tensor,
        profile: &BackendProfile,
        lane: Lane,
    ) -> Result<Tensor, NumericsError> {
        match self {
            Layer::Linear { weight, bias } => {
                let out: Result<Vec<f32>, NumericsError> = (0..weight.shape()[0])
                    .map(|j| {
                        numerics::dot_lane(weight.row(j), input.data(), profile, lane)
                            .map(|v| v + bias.data()[j])
                    })
                    .collect();
                Ok(Tensor::from_vec(out?))
            }
            Layer::FactoredLinear { w1, w2, bias } => {
                let mid: Result<Vec<f32>, NumericsError> = (0..w1.shape()[0])
                    .map(|m| numerics::dot_lane(w1.row(m), input.data(), profile, lane))
                    .collect();
                let mid = mid?;
                let out: Result<Vec<f32>, NumericsError> = (0..w2.shape()[0])
                    .map(|j| {
                        numerics::dot_lane(w2.row(j), &mid, profile, lane)
                            .map(|v| v + bias.data()[j])
                    })
                    .collect();
                Ok(Tensor::from_vec(out?))
            }
            Layer::Conv2d {
                kernel,
                bias,
                stride,
                padding,
            } => {
                let mut out =
                    numerics::conv2d(input, kernel, *stride, *padding, profile, lane)?;
                let (oh, ow) = (out.shape()[1], out.shape()[2]);
                for c in 0..out.shape()[0] {
                    let b = bias.data()[c];
                    for v in &mut out.data_mut()[c * oh * ow..(c + 1) * oh * ow] {
                        *v += b;
                    }
                }
                Ok(out)
            }
            Layer::Relu => Ok(Tensor::new(
                input.shape().to_vec(),
                input
                    .data()
                    .iter()
                    .map(|&v| if v > 0.0 { v } else { 0.0 })
                    .collect(),
            )
            .expect("relu preserves shape")),
            Layer::GlobalAvgPool => {
                let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                let area = (h * w) as f32;
                let out: Result<Vec<f32>, NumericsError> = (0..c)
                    .map(|ci| {
                        numerics::reduce_sum_lane(
                            &input.data()[ci * h * w..(ci + 1) * h * w],
                            profile,
                            lane,
                        )
                        .map(|s| s / area)
                    })
                    .collect();
                Ok(Tensor::from_vec(out?))
            }
        }
    }
}
