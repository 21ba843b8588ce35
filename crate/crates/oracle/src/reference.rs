//! Wide-precision reference mirror of the engine.
//!
//! An independent f64 reimplementation of the layer math (plain loop order,
//! no profile plumbing) used to check analytic gradients by central finite
//! differences. It shares nothing with the production forward/backward paths
//! beyond the architecture description it mirrors.

use driftlab::engine::{Layer, Model};

#[derive(Debug, Clone)]
enum WideLayer {
    Linear {
        weight: Vec<f64>, // [out, in]
        bias: Vec<f64>,
        out: usize,
        inp: usize,
    },
    Factored {
        w1: Vec<f64>, // [mid, in]
        w2: Vec<f64>, // [out, mid]
        bias: Vec<f64>,
        mid: usize,
        inp: usize,
        out: usize,
    },
    Conv {
        kernel: Vec<f64>, // [cout, cin, kh, kw]
        bias: Vec<f64>,
        cout: usize,
        cin: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Gap,
}

/// f64 mirror of a [`Model`] with the same frozen flat parameter order.
#[derive(Debug, Clone)]
pub struct WideModel {
    layers: Vec<WideLayer>,
    input_shape: Vec<usize>,
}

impl WideModel {
    pub fn from_model(model: &Model) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Linear { weight, bias } => WideLayer::Linear {
                    weight: widen(weight.data()),
                    bias: widen(bias.data()),
                    out: weight.shape()[0],
                    inp: weight.shape()[1],
                },
                Layer::FactoredLinear { w1, w2, bias } => WideLayer::Factored {
                    w1: widen(w1.data()),
                    w2: widen(w2.data()),
                    bias: widen(bias.data()),
                    mid: w1.shape()[0],
                    inp: w1.shape()[1],
                    out: w2.shape()[0],
                },
                Layer::Conv2d {
                    kernel,
                    bias,
                    stride,
                    padding,
                } => WideLayer::Conv {
                    kernel: widen(kernel.data()),
                    bias: widen(bias.data()),
                    cout: kernel.shape()[0],
                    cin: kernel.shape()[1],
                    kh: kernel.shape()[2],
                    kw: kernel.shape()[3],
                    stride: *stride,
                    padding: *padding,
                },
                Layer::Relu => WideLayer::Relu,
                Layer::GlobalAvgPool => WideLayer::Gap,
            })
            .collect();
        Self {
            layers,
            input_shape: model.input_shape.clone(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for layer in &self.layers {
            match layer {
                WideLayer::Linear { weight, bias, .. } => {
                    flat.extend_from_slice(weight);
                    flat.extend_from_slice(bias);
                }
                WideLayer::Factored { w1, w2, bias, .. } => {
                    flat.extend_from_slice(w1);
                    flat.extend_from_slice(w2);
                    flat.extend_from_slice(bias);
                }
                WideLayer::Conv { kernel, bias, .. } => {
                    flat.extend_from_slice(kernel);
                    flat.extend_from_slice(bias);
                }
                WideLayer::Relu | WideLayer::Gap => {}
            }
        }
        flat
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        let mut take = |dst: &mut Vec<f64>| {
            let n = dst.len();
            dst.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        };
        for layer in &mut self.layers {
            match layer {
                WideLayer::Linear { weight, bias, .. } => {
                    take(weight);
                    take(bias);
                }
                WideLayer::Factored { w1, w2, bias, .. } => {
                    take(w1);
                    take(w2);
                    take(bias);
                }
                WideLayer::Conv { kernel, bias, .. } => {
                    take(kernel);
                    take(bias);
                }
                WideLayer::Relu | WideLayer::Gap => {}
            }
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut act = input.to_vec();
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            match layer {
                WideLayer::Linear {
                    weight,
                    bias,
                    out,
                    inp,
                } => {
                    act = (0..*out)
                        .map(|j| {
                            let mut acc = bias[j];
                            for t in 0..*inp {
                                acc += weight[j * inp + t] * act[t];
                            }
                            acc
                        })
                        .collect();
                    shape = vec![*out];
                }
                WideLayer::Factored {
                    w1,
                    w2,
                    bias,
                    mid,
                    inp,
                    out,
                } => {
                    let h: Vec<f64> = (0..*mid)
                        .map(|m| (0..*inp).map(|t| w1[m * inp + t] * act[t]).sum())
                        .collect();
                    act = (0..*out)
                        .map(|j| {
                            bias[j] + (0..*mid).map(|m| w2[j * mid + m] * h[m]).sum::<f64>()
                        })
                        .collect();
                    shape = vec![*out];
                }
                WideLayer::Conv {
                    kernel,
                    bias,
                    cout,
                    cin,
                    kh,
                    kw,
                    stride,
                    padding,
                } => {
                    let (h, w) = (shape[1], shape[2]);
                    let oh = (h + 2 * padding - kh) / stride + 1;
                    let ow = (w + 2 * padding - kw) / stride + 1;
                    let mut next = vec![0.0f64; cout * oh * ow];
                    for c in 0..*cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = bias[c];
                                for ci in 0..*cin {
                                    for ky in 0..*kh {
                                        for kx in 0..*kw {
                                            let iy =
                                                (oy * stride + ky) as isize - *padding as isize;
                                            let ix =
                                                (ox * stride + kx) as isize - *padding as isize;
                                            if iy < 0
                                                || ix < 0
                                                || iy as usize >= h
                                                || ix as usize >= w
                                            {
                                                continue;
                                            }
                                            acc += kernel[((c * cin + ci) * kh + ky) * kw + kx]
                                                * act[(ci * h + iy as usize) * w + ix as usize];
                                        }
                                    }
                                }
                                next[(c * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                    act = next;
                    shape = vec![*cout, oh, ow];
                }
                WideLayer::Relu => {
                    for v in &mut act {
                        if *v <= 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                WideLayer::Gap => {
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    act = (0..c)
                        .map(|ci| act[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>()
                            / (h * w) as f64)
                        .collect();
                    shape = vec![c];
                }
            }
        }
        act
    }
}

fn widen(values: &[f32]) -> Vec<f64> {
    values.iter().map(|&v| v as f64).collect()
}

/// Largest-minus-runner-up logit margin (zero at a tie). Subgradient-free
/// f64 restatement of the boundary-distance loss.
pub fn loss_diff_f64(logits: &[f64]) -> f64 {
    let mut top = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[top] {
            top = i;
        }
    }
    let runner = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    logits[top] - runner
}

/// Hinge on leaving the source class `t`.
pub fn loss_class_f64(logits: &[f64], t: usize) -> f64 {
    let best_other = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != t)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    (best_other - logits[t]).max(0.0)
}

/// Squared Euclidean distance between flat parameter views.
pub fn loss_reg_f64(theta: &[f64], theta_bar: &[f64]) -> f64 {
    theta
        .iter()
        .zip(theta_bar)
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// Full weighted proxy loss in f64.
pub fn proxy_loss_f64(
    logits: &[f64],
    t: usize,
    theta: &[f64],
    theta_bar: &[f64],
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> f64 {
    alpha * loss_diff_f64(logits) + beta * loss_class_f64(logits, t) + gamma * loss_reg_f64(theta, theta_bar)
}

/// Central finite differences of `f` around `theta`.
pub fn central_difference<F>(f: F, theta: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(theta.len());
    let mut work = theta.to_vec();
    for i in 0..theta.len() {
        work[i] = theta[i] + step;
        let up = f(&work);
        work[i] = theta[i] - step;
        let down = f(&work);
        work[i] = theta[i];
        grad.push((up - down) / (2.0 * step));
    }
    grad
}
