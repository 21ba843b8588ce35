//! Model container, forward evaluation under a backend profile, and analytic
//! gradients.
//!
//! Forward passes take the profile of the device they simulate. Gradients
//! always run under the canonical wide profile ([`BackendProfile::canonical`])
//! with sequential f64 accumulation: backend deviations are not meaningfully
//! differentiable, so the attack treats the model as a single decision
//! function while shaping it and only meets the per-device functions through
//! forward evaluations.
//!
//! The flat parameter view is frozen as: layers in order, tensors within a
//! layer in declaration order (linear: weight, bias; factored-linear: w1,
//! w2, bias; conv2d: kernel, bias), row-major within each tensor. Bit-flip
//! records and checkpoints index into this view.

mod checkpoint;
mod layer;

pub use checkpoint::{load_model, load_model_path, save_model, save_model_path, CheckpointError};
pub use layer::{Layer, LayerSpec};

use thiserror::Error;

use crate::numerics::{BackendProfile, Lane, NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("shape error{}: {detail}", .layer.map(|l| format!(" at layer {l}")).unwrap_or_default())]
    Shape {
        layer: Option<usize>,
        detail: String,
    },
    #[error("non-finite activation after layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("parameter count mismatch: expected {expected}, got {got}")]
    ParamCount { expected: usize, got: usize },
}

/// Index of the largest logit; exact ties break to the lowest class index.
pub fn argmax_lowest(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Ordered layers mapping an input tensor to `num_classes` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub num_classes: usize,
    pub input_shape: Vec<usize>,
}

/// Activations recorded by [`Model::forward_traced`] for the backward pass:
/// the input to every layer plus factored-linear mid activations.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    layer_inputs: Vec<Tensor>,
    mids: Vec<Option<Tensor>>,
    pub logits: Tensor,
}

impl Model {
    pub fn new(
        layers: Vec<Layer>,
        num_classes: usize,
        input_shape: Vec<usize>,
    ) -> Result<Self, EngineError> {
        let model = Self {
            layers,
            num_classes,
            input_shape,
        };
        model.validate()?;
        Ok(model)
    }

    /// Checks that adjacent layer shapes compose and the output is
    /// `[num_classes]`.
    pub fn validate(&self) -> Result<(), EngineError> {
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|e| match e {
                EngineError::Shape { detail, .. } => EngineError::Shape {
                    layer: Some(i),
                    detail,
                },
                other => other,
            })?;
        }
        if shape != [self.num_classes] {
            return Err(EngineError::Shape {
                layer: None,
                detail: format!(
                    "model output {:?} does not match [{}]",
                    shape, self.num_classes
                ),
            });
        }
        Ok(())
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// The frozen flat parameter view.
    pub fn flatten(&self) -> Vec<f32> {
        let mut flat = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            for tensor in layer.param_tensors() {
                flat.extend_from_slice(tensor.data());
            }
        }
        flat
    }

    /// Inverse of [`Model::flatten`]; round-trips bit-exactly.
    pub fn set_flat(&mut self, flat: &[f32]) -> Result<(), EngineError> {
        if flat.len() != self.param_count() {
            return Err(EngineError::ParamCount {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for tensor in layer.param_tensors_mut() {
                let n = tensor.len();
                tensor.data_mut().copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    /// The flat ranges covered by each layer's parameters.
    pub fn layer_param_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut ranges = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for layer in &self.layers {
            let n = layer.param_count();
            ranges.push(offset..offset + n);
            offset += n;
        }
        ranges
    }

    pub fn forward(&self, x: &Tensor, profile: &BackendProfile) -> Result<Tensor, EngineError> {
        self.forward_lane(x, profile, Lane::SOLO)
    }

    pub fn forward_lane(
        &self,
        x: &Tensor,
        profile: &BackendProfile,
        lane: Lane,
    ) -> Result<Tensor, EngineError> {
        self.check_input(x)?;
        let mut act = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            act = layer.forward(&act, profile, lane).map_err(|e| match e {
                NumericsError::NonFinite { .. } => EngineError::NonFiniteActivation { layer: i },
                other => EngineError::Numerics(other),
            })?;
            act.ensure_finite("forward")
                .map_err(|_| EngineError::NonFiniteActivation { layer: i })?;
        }
        Ok(act)
    }

    /// Forward for each sample of a batch, lane `(i, batch_len)` for sample
    /// `i`. Interleaved-tiling profiles make the result depend on both.
    pub fn forward_batch(
        &self,
        xs: &[Tensor],
        profile: &BackendProfile,
    ) -> Result<Vec<Tensor>, EngineError> {
        xs.iter()
            .enumerate()
            .map(|(i, x)| self.forward_lane(x, profile, Lane::new(i, xs.len())))
            .collect()
    }

    /// Activation after every layer (`out[i]` = output of layer `i`).
    pub fn forward_collect(
        &self,
        x: &Tensor,
        profile: &BackendProfile,
        lane: Lane,
    ) -> Result<Vec<Tensor>, EngineError> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut act = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            act = layer.forward(&act, profile, lane)?;
            act.ensure_finite("forward")
                .map_err(|_| EngineError::NonFiniteActivation { layer: i })?;
            acts.push(act.clone());
        }
        Ok(acts)
    }

    pub fn predict(&self, x: &Tensor, profile: &BackendProfile) -> Result<usize, EngineError> {
        Ok(argmax_lowest(self.forward(x, profile)?.data()))
    }

    pub fn predict_lane(
        &self,
        x: &Tensor,
        profile: &BackendProfile,
        lane: Lane,
    ) -> Result<usize, EngineError> {
        Ok(argmax_lowest(self.forward_lane(x, profile, lane)?.data()))
    }

    /// Prediction plus whether the top logit is strictly separated from the
    /// runner-up (no exact tie). Boundary shaping aims at ties, so callers
    /// that certify a split decision insist on strictness.
    pub fn predict_strict(
        &self,
        x: &Tensor,
        profile: &BackendProfile,
    ) -> Result<(usize, bool), EngineError> {
        let logits = self.forward(x, profile)?;
        let best = argmax_lowest(logits.data());
        let strict = logits
            .data()
            .iter()
            .enumerate()
            .all(|(i, &v)| i == best || v < logits.data()[best]);
        Ok((best, strict))
    }

    /// Forward under the canonical profile, recording what backward needs.
    pub fn forward_traced(&self, x: &Tensor) -> Result<ForwardTrace, EngineError> {
        self.check_input(x)?;
        let canonical = BackendProfile::canonical();
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut mids = Vec::with_capacity(self.layers.len());
        let mut act = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            layer_inputs.push(act.clone());
            let mid = match layer {
                Layer::FactoredLinear { w1, .. } => {
                    let mid: Result<Vec<f32>, NumericsError> = (0..w1.shape()[0])
                        .map(|m| crate::numerics::dot(w1.row(m), act.data(), &canonical))
                        .collect();
                    Some(Tensor::from_vec(mid?))
                }
                _ => None,
            };
            mids.push(mid);
            act = layer.forward(&act, &canonical, Lane::SOLO)?;
            act.ensure_finite("forward")
                .map_err(|_| EngineError::NonFiniteActivation { layer: i })?;
        }
        Ok(ForwardTrace {
            layer_inputs,
            mids,
            logits: act,
        })
    }

    /// Analytic gradient of the recorded computation with respect to the
    /// flat parameter view, given the loss gradient at the logits.
    /// Sequential f64 accumulation throughout (canonical profile).
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        dlogits: &[f64],
    ) -> Result<Vec<f32>, EngineError> {
        assert_eq!(dlogits.len(), self.num_classes);
        let ranges = self.layer_param_ranges();
        let mut flat_grad = vec![0.0f64; self.param_count()];
        let mut dact: Vec<f64> = dlogits.to_vec();

        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.layer_inputs[i];
            let grad_slot = &mut flat_grad[ranges[i].clone()];
            dact = match layer {
                Layer::Linear { weight, .. } => {
                    let (out, inp) = (weight.shape()[0], weight.shape()[1]);
                    // grad_slot = [weight (out*inp), bias (out)]
                    for j in 0..out {
                        for t in 0..inp {
                            grad_slot[j * inp + t] += dact[j] * input.data()[t] as f64;
                        }
                        grad_slot[out * inp + j] += dact[j];
                    }
                    (0..inp)
                        .map(|t| {
                            (0..out)
                                .map(|j| dact[j] * weight.at2(j, t) as f64)
                                .sum::<f64>()
                        })
                        .collect()
                }
                Layer::FactoredLinear { w1, w2, .. } => {
                    let mid_act = trace.mids[i].as_ref().expect("factored mid recorded");
                    let (mid, inp) = (w1.shape()[0], w1.shape()[1]);
                    let out = w2.shape()[0];
                    let w1_len = mid * inp;
                    let w2_len = out * mid;
                    let dmid: Vec<f64> = (0..mid)
                        .map(|m| {
                            (0..out)
                                .map(|j| dact[j] * w2.at2(j, m) as f64)
                                .sum::<f64>()
                        })
                        .collect();
                    for j in 0..out {
                        for m in 0..mid {
                            grad_slot[w1_len + j * mid + m] += dact[j] * mid_act.data()[m] as f64;
                        }
                        grad_slot[w1_len + w2_len + j] += dact[j];
                    }
                    for m in 0..mid {
                        for t in 0..inp {
                            grad_slot[m * inp + t] += dmid[m] * input.data()[t] as f64;
                        }
                    }
                    (0..inp)
                        .map(|t| {
                            (0..mid)
                                .map(|m| dmid[m] * w1.at2(m, t) as f64)
                                .sum::<f64>()
                        })
                        .collect()
                }
                Layer::Conv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let ks = kernel.shape();
                    let (cout, cin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
                    let (h, w) = (input.shape()[1], input.shape()[2]);
                    let oh = (h + 2 * padding - kh) / stride + 1;
                    let ow = (w + 2 * padding - kw) / stride + 1;
                    let klen = cout * cin * kh * kw;
                    let mut dinput = vec![0.0f64; cin * h * w];
                    for c in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let dy = dact[(c * oh + oy) * ow + ox];
                                grad_slot[klen + c] += dy;
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        for kx in 0..kw {
                                            let iy = (oy * stride + ky) as isize
                                                - *padding as isize;
                                            let ix = (ox * stride + kx) as isize
                                                - *padding as isize;
                                            if iy < 0
                                                || ix < 0
                                                || iy as usize >= h
                                                || ix as usize >= w
                                            {
                                                continue;
                                            }
                                            let in_idx =
                                                (ci * h + iy as usize) * w + ix as usize;
                                            let k_idx =
                                                ((c * cin + ci) * kh + ky) * kw + kx;
                                            grad_slot[k_idx] +=
                                                dy * input.data()[in_idx] as f64;
                                            dinput[in_idx] +=
                                                dy * kernel.data()[k_idx] as f64;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    dinput
                }
                Layer::Relu => input
                    .data()
                    .iter()
                    .zip(&dact)
                    .map(|(&x, &d)| if x > 0.0 { d } else { 0.0 })
                    .collect(),
                Layer::GlobalAvgPool => {
                    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                    let inv_area = 1.0 / (h * w) as f64;
                    let mut dinput = vec![0.0f64; c * h * w];
                    for ci in 0..c {
                        for p in 0..h * w {
                            dinput[ci * h * w + p] = dact[ci] * inv_area;
                        }
                    }
                    dinput
                }
            };
        }

        if !flat_grad.iter().all(|g| g.is_finite()) {
            return Err(EngineError::NonFiniteGradient);
        }
        Ok(flat_grad.into_iter().map(|g| g as f32).collect())
    }

    fn check_input(&self, x: &Tensor) -> Result<(), EngineError> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(EngineError::Shape {
                layer: None,
                detail: format!(
                    "input shape {:?} does not match model input {:?}",
                    x.shape(),
                    self.input_shape
                ),
            });
        }
        x.ensure_finite("forward input")?;
        Ok(())
    }
}

/// Numerically stable softmax cross-entropy with its logit gradient,
/// evaluated in f64. The training and fine-tuning loss.
pub fn softmax_cross_entropy(logits: &[f32], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (logits[label] as f64 - max);
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, e)| e / total - if i == label { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}
