//! Causal localization via cross-backend activation patching.
//!
//! For a backdoored model and a backend pair, run the first `i` layers under
//! the deployment backend, hand the activation over bit-exactly, and finish
//! under the other backend. The per-split logit difference between the two
//! conflicting classes traces how the prediction flip builds up layer by
//! layer; aggregating absolute first differences over many backdoors
//! attributes it to layers. "Layer" granularity is one engine layer, so a
//! model with `L` layers yields `L + 1` trace points.

use std::io::Write;

use thiserror::Error;

use crate::engine::{EngineError, Model};
use crate::numerics::{BackendProfile, Lane, NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("patch split {split} out of range 0..={layers}")]
    SplitOutOfRange { split: usize, layers: usize },
    #[error("no split decision: both backends predict class {class}")]
    NoSplitDecision { class: usize },
    #[error("aggregate over an empty trace set")]
    EmptyTraceSet,
    #[error("aggregate index must be >= 1 (first differences)")]
    AggregateAtZero,
    #[error("traces disagree in length or backend pair")]
    MixedTraces,
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-layer logit differences for one backdoor and backend pair.
#[derive(Debug, Clone)]
pub struct PatchTrace {
    pub model_id: String,
    pub pair: (String, String),
    pub target_id: String,
    /// Class predicted under `h1` (the deployment backend).
    pub class_a: usize,
    /// Class predicted under `h2`, different from `class_a`.
    pub class_b: usize,
    /// `deltas[i]` = logit_a - logit_b of the patched forward at split `i`,
    /// for `i` in `0..=L`.
    pub deltas: Vec<f32>,
}

impl PatchTrace {
    /// View normalized to [-1, +1] by the peak magnitude; preserves signs
    /// and zero crossings. Raw values are what gets persisted.
    pub fn normalized(&self) -> Vec<f32> {
        let peak = self
            .deltas
            .iter()
            .fold(0.0f32, |acc, d| acc.max(d.abs()));
        if peak == 0.0 {
            return self.deltas.clone();
        }
        self.deltas.iter().map(|d| d / peak).collect()
    }
}

/// Run layers `0..split` under `h1`, the rest under `h2`. `split = 0` is a
/// plain forward under `h2`; `split = L` under `h1`.
pub fn patched_forward(
    model: &Model,
    x: &Tensor,
    h1: &BackendProfile,
    h2: &BackendProfile,
    split: usize,
) -> Result<Tensor, AnalysisError> {
    let layers = model.layers.len();
    if split > layers {
        return Err(AnalysisError::SplitOutOfRange { split, layers });
    }
    let mut act = x.clone();
    for (i, layer) in model.layers.iter().enumerate() {
        let profile = if i < split { h1 } else { h2 };
        act = layer
            .forward(&act, profile, Lane::SOLO)
            .map_err(|e: NumericsError| AnalysisError::Engine(e.into()))?;
        act.ensure_finite("patched_forward")
            .map_err(|e| AnalysisError::Engine(e.into()))?;
    }
    Ok(act)
}

/// The conflicting classes `(a, b)` for a split decision, erroring when the
/// two backends agree.
pub fn split_classes(
    model: &Model,
    x: &Tensor,
    h1: &BackendProfile,
    h2: &BackendProfile,
) -> Result<(usize, usize), AnalysisError> {
    let a = model.predict(x, h1)?;
    let b = model.predict(x, h2)?;
    if a == b {
        return Err(AnalysisError::NoSplitDecision { class: a });
    }
    Ok((a, b))
}

/// Logit difference `logit_a - logit_b` of the patched forward at `split`,
/// for fixed conflicting classes.
pub fn delta_for_classes(
    model: &Model,
    x: &Tensor,
    h1: &BackendProfile,
    h2: &BackendProfile,
    split: usize,
    class_a: usize,
    class_b: usize,
) -> Result<f32, AnalysisError> {
    let logits = patched_forward(model, x, h1, h2, split)?;
    Ok(logits.data()[class_a] - logits.data()[class_b])
}

/// As [`delta_for_classes`] with the classes taken from the model's own
/// split decision (errors when there is none).
pub fn delta(
    model: &Model,
    x: &Tensor,
    h1: &BackendProfile,
    h2: &BackendProfile,
    split: usize,
) -> Result<f32, AnalysisError> {
    let (a, b) = split_classes(model, x, h1, h2)?;
    delta_for_classes(model, x, h1, h2, split, a, b)
}

/// Full per-layer trace for one backdoored model and target.
pub fn trace(
    model: &Model,
    x: &Tensor,
    h1: &BackendProfile,
    h2: &BackendProfile,
    model_id: impl Into<String>,
    target_id: impl Into<String>,
) -> Result<PatchTrace, AnalysisError> {
    let (class_a, class_b) = split_classes(model, x, h1, h2)?;
    let deltas: Result<Vec<f32>, AnalysisError> = (0..=model.layers.len())
        .map(|split| delta_for_classes(model, x, h1, h2, split, class_a, class_b))
        .collect();
    Ok(PatchTrace {
        model_id: model_id.into(),
        pair: (h1.name.clone(), h2.name.clone()),
        target_id: target_id.into(),
        class_a,
        class_b,
        deltas: deltas?,
    })
}

/// Average contribution of layer `i`: the summed absolute first differences
/// `|delta_i - delta_{i-1}|` over all traces. Defined for `i >= 1`.
pub fn aggregate_delta(traces: &[PatchTrace], i: usize) -> Result<f32, AnalysisError> {
    if traces.is_empty() {
        return Err(AnalysisError::EmptyTraceSet);
    }
    if i == 0 {
        return Err(AnalysisError::AggregateAtZero);
    }
    let len = traces[0].deltas.len();
    let pair = &traces[0].pair;
    if traces
        .iter()
        .any(|t| t.deltas.len() != len || &t.pair != pair)
    {
        return Err(AnalysisError::MixedTraces);
    }
    if i >= len {
        return Err(AnalysisError::SplitOutOfRange {
            split: i,
            layers: len - 1,
        });
    }
    Ok(traces
        .iter()
        .map(|t| (t.deltas[i] - t.deltas[i - 1]).abs())
        .sum())
}

/// CSV export mirroring the plotted data: one row per (trace, split).
pub fn write_traces_csv<W: Write>(traces: &[PatchTrace], mut out: W) -> Result<(), AnalysisError> {
    writeln!(
        out,
        "model_id,pair,target_id,split,delta,delta_normalized"
    )?;
    for t in traces {
        let normalized = t.normalized();
        for (i, (d, dn)) in t.deltas.iter().zip(&normalized).enumerate() {
            writeln!(
                out,
                "{},{}->{},{},{},{},{}",
                t.model_id, t.pair.0, t.pair.1, t.target_id, i, d, dn
            )?;
        }
    }
    Ok(())
}
