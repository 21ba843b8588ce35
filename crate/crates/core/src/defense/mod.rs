//! The four countermeasures, each with the success metric it is scored by.
//!
//! Every defense consumes a corpus of verified backdoors (model, target,
//! backend pair) and reports, per sweep point, the per-backdoor remaining
//! success as a mean of binary outcomes. Identity points (zero ULPs, batch
//! of one, zero fine-tuning steps, lossless downcast) reproduce the
//! undefended success exactly.

mod halffmt;

pub use halffmt::{bf16_bits_to_f32, f16_bits_to_f32, f32_to_bf16_bits, f32_to_f16_bits};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Split;
use crate::engine::{softmax_cross_entropy, EngineError, Model};
use crate::numerics::{BackendProfile, Tensor};
use crate::parallel;

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("defense config: {0}")]
    Config(String),
    #[error("parameter {param} overflowed to infinity during {format} rounding")]
    DowncastOverflow { param: usize, format: &'static str },
    #[error("fine-tuning diverged (non-finite loss)")]
    Divergence,
}

/// One verified backdoor under evaluation.
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub id: String,
    pub model: Model,
    pub target: Tensor,
    pub source_class: usize,
    pub h1: BackendProfile,
    pub h2: BackendProfile,
}

impl CorpusEntry {
    /// The undefended success indicator: do the two backends disagree at
    /// the target right now?
    pub fn splits(&self) -> Result<bool, DefenseError> {
        Ok(self.model.predict(&self.target, &self.h1)?
            != self.model.predict(&self.target, &self.h2)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    InputPerturbation,
    BatchSize,
    Downcast,
    FineTune,
}

impl DefenseKind {
    pub fn label(&self) -> &'static str {
        match self {
            DefenseKind::InputPerturbation => "input_perturbation",
            DefenseKind::BatchSize => "batch_size",
            DefenseKind::Downcast => "downcast",
            DefenseKind::FineTune => "fine_tune",
        }
    }
}

/// Binary outcomes for one backdoor at one sweep point.
#[derive(Debug, Clone, Serialize)]
pub struct BackdoorOutcome {
    pub id: String,
    pub successes: u32,
    pub trials: u32,
}

impl BackdoorOutcome {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.trials.max(1) as f64
    }
}

/// All outcomes at one sweep value.
#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub value: String,
    pub outcomes: Vec<BackdoorOutcome>,
}

impl SweepPoint {
    /// Mean remaining success over the corpus.
    pub fn rate(&self) -> f64 {
        if self.outcomes.is_empty() {
            return 0.0;
        }
        self.outcomes.iter().map(|o| o.rate()).sum::<f64>() / self.outcomes.len() as f64
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DefenseReport {
    pub kind: DefenseKind,
    pub points: Vec<SweepPoint>,
}

impl DefenseReport {
    pub fn merge(mut self, other: DefenseReport) -> DefenseReport {
        assert_eq!(self.kind, other.kind);
        self.points.extend(other.points);
        self
    }
}

/// Map a float to the integer index of its position in the ordered set of
/// representable values; stepping by n indices moves n ULPs.
fn ordered_index(x: f32) -> i32 {
    let bits = x.to_bits() as i32;
    if bits < 0 {
        i32::MIN - bits
    } else {
        bits
    }
}

fn from_ordered_index(index: i32) -> f32 {
    if index >= 0 {
        f32::from_bits(index as u32)
    } else {
        f32::from_bits(i32::MIN.wrapping_sub(index) as u32)
    }
}

/// Displace by `steps` representable values (value-dependent ULPs), clamped
/// to the finite range.
pub fn step_ulps(x: f32, steps: i64) -> f32 {
    let max = ordered_index(f32::MAX) as i64;
    let target = (ordered_index(x) as i64 + steps).clamp(-max, max);
    from_ordered_index(target as i32)
}

fn seed_bytes(master: u64, index: u64, tag: u64, extra: u64) -> [u8; 32] {
    let mut bytes = [0u8; 32];
    bytes[0..8].copy_from_slice(&master.to_le_bytes());
    bytes[8..16].copy_from_slice(&index.to_le_bytes());
    bytes[16..24].copy_from_slice(&tag.to_le_bytes());
    bytes[24..32].copy_from_slice(&extra.to_le_bytes());
    bytes
}

const TAG_INPUT: u64 = 0x696e7075; // "inpu"
const TAG_TUNE: u64 = 0x74756e65; // "tune"

/// Input-perturbation defense: displace every element of the target by up
/// to `ulps` representable steps (uniform, per-element) and count how often
/// the split decision survives, averaged over `trials`.
///
/// Trial RNG is seeded by (corpus index, trial) and scaled by the sweep
/// value, so sweep points reuse common perturbation directions: outcomes
/// stay comparable across magnitudes and evaluation order.
pub fn defend_input_perturbation(
    corpus: &[CorpusEntry],
    ulps: u32,
    trials: usize,
    master_seed: u64,
) -> Result<DefenseReport, DefenseError> {
    let trials = trials.max(1);
    let outcomes: Vec<Result<BackdoorOutcome, DefenseError>> =
        parallel::map_indexed(corpus.len(), |ci| {
            let entry = &corpus[ci];
            let mut successes = 0;
            for trial in 0..trials {
                let mut rng = ChaCha8Rng::from_seed(seed_bytes(
                    master_seed,
                    ci as u64,
                    TAG_INPUT,
                    trial as u64,
                ));
                let mut perturbed = entry.target.clone();
                for v in perturbed.data_mut() {
                    let direction = rng.random::<f64>() * 2.0 - 1.0;
                    let steps = (direction * ulps as f64).round() as i64;
                    *v = step_ulps(*v, steps);
                }
                let p1 = entry.model.predict(&perturbed, &entry.h1)?;
                let p2 = entry.model.predict(&perturbed, &entry.h2)?;
                if p1 != p2 {
                    successes += 1;
                }
            }
            Ok(BackdoorOutcome {
                id: entry.id.clone(),
                successes,
                trials: trials as u32,
            })
        });
    Ok(DefenseReport {
        kind: DefenseKind::InputPerturbation,
        points: vec![SweepPoint {
            value: ulps.to_string(),
            outcomes: outcomes.into_iter().collect::<Result<_, _>>()?,
        }],
    })
}

/// Batch-size defense: duplicate the target into a batch of `k` and average
/// the split indicator over all pairs of batch indices. Backends whose
/// tiling ignores the batch dimension reduce to the `k = 1` check.
pub fn defend_batch_size(
    corpus: &[CorpusEntry],
    k: usize,
) -> Result<DefenseReport, DefenseError> {
    if k == 0 {
        return Err(DefenseError::Config("batch size must be >= 1".into()));
    }
    let outcomes: Vec<Result<BackdoorOutcome, DefenseError>> =
        parallel::map_indexed(corpus.len(), |ci| {
            let entry = &corpus[ci];
            let batch = vec![entry.target.clone(); k];
            let preds1: Vec<usize> = entry
                .model
                .forward_batch(&batch, &entry.h1)?
                .iter()
                .map(|logits| crate::engine::argmax_lowest(logits.data()))
                .collect();
            let preds2: Vec<usize> = entry
                .model
                .forward_batch(&batch, &entry.h2)?
                .iter()
                .map(|logits| crate::engine::argmax_lowest(logits.data()))
                .collect();
            let mut successes = 0;
            for &p1 in &preds1 {
                for &p2 in &preds2 {
                    if p1 != p2 {
                        successes += 1;
                    }
                }
            }
            Ok(BackdoorOutcome {
                id: entry.id.clone(),
                successes,
                trials: (k * k) as u32,
            })
        });
    Ok(DefenseReport {
        kind: DefenseKind::BatchSize,
        points: vec![SweepPoint {
            value: k.to_string(),
            outcomes: outcomes.into_iter().collect::<Result<_, _>>()?,
        }],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DowncastFormat {
    F16,
    Bf16,
}

impl DowncastFormat {
    pub fn label(&self) -> &'static str {
        match self {
            DowncastFormat::F16 => "f16",
            DowncastFormat::Bf16 => "bf16",
        }
    }
}

/// Round every parameter to the target format (values stored back in f32;
/// inference still accumulates per the backend profiles). Parameters that
/// overflow to infinity are reported.
pub fn downcast_model(model: &Model, format: DowncastFormat) -> Result<Model, DefenseError> {
    let mut flat = model.flatten();
    for (i, v) in flat.iter_mut().enumerate() {
        let rounded = match format {
            DowncastFormat::F16 => f16_bits_to_f32(f32_to_f16_bits(*v)),
            DowncastFormat::Bf16 => bf16_bits_to_f32(f32_to_bf16_bits(*v)),
        };
        if !rounded.is_finite() {
            return Err(DefenseError::DowncastOverflow {
                param: i,
                format: format.label(),
            });
        }
        *v = rounded;
    }
    let mut out = model.clone();
    out.set_flat(&flat)?;
    Ok(out)
}

/// Downcast defense: success is the split indicator of the downcasted model.
pub fn defend_downcast(
    corpus: &[CorpusEntry],
    format: DowncastFormat,
) -> Result<DefenseReport, DefenseError> {
    let outcomes: Vec<Result<BackdoorOutcome, DefenseError>> =
        parallel::map_indexed(corpus.len(), |ci| {
            let entry = &corpus[ci];
            let downcast = downcast_model(&entry.model, format)?;
            let p1 = downcast.predict(&entry.target, &entry.h1)?;
            let p2 = downcast.predict(&entry.target, &entry.h2)?;
            Ok(BackdoorOutcome {
                id: entry.id.clone(),
                successes: (p1 != p2) as u32,
                trials: 1,
            })
        });
    Ok(DefenseReport {
        kind: DefenseKind::Downcast,
        points: vec![SweepPoint {
            value: format.label().to_string(),
            outcomes: outcomes.into_iter().collect::<Result<_, _>>()?,
        }],
    })
}

/// SGD-with-momentum fine-tuning on clean batches, then the split check.
/// RNG is seeded per (corpus index, step count), so sweep points are
/// independently reproducible.
pub fn defend_finetune(
    corpus: &[CorpusEntry],
    train: &Split,
    steps: usize,
    lr: f32,
    momentum: f32,
    batch: usize,
    master_seed: u64,
) -> Result<DefenseReport, DefenseError> {
    if train.is_empty() {
        return Err(DefenseError::Config("clean training data required".into()));
    }
    let batch = batch.max(1).min(train.len());
    let outcomes: Vec<Result<BackdoorOutcome, DefenseError>> =
        parallel::map_indexed(corpus.len(), |ci| {
            let entry = &corpus[ci];
            let mut rng = ChaCha8Rng::from_seed(seed_bytes(
                master_seed,
                ci as u64,
                TAG_TUNE,
                steps as u64,
            ));
            let mut model = entry.model.clone();
            let mut velocity = vec![0.0f64; model.param_count()];
            for _ in 0..steps {
                let mut grad = vec![0.0f64; model.param_count()];
                let mut loss_sum = 0.0f64;
                for _ in 0..batch {
                    let idx = rng.random_range(0..train.len());
                    let trace = model.forward_traced(&train.inputs[idx])?;
                    let (loss, dlogits) =
                        softmax_cross_entropy(trace.logits.data(), train.labels[idx]);
                    loss_sum += loss;
                    let g = model.backward(&trace, &dlogits)?;
                    for (acc, gi) in grad.iter_mut().zip(&g) {
                        *acc += *gi as f64;
                    }
                }
                if !loss_sum.is_finite() {
                    return Err(DefenseError::Divergence);
                }
                let mut flat = model.flatten();
                for ((w, v), g) in flat.iter_mut().zip(&mut velocity).zip(&grad) {
                    *v = momentum as f64 * *v + g / batch as f64;
                    *w = (*w as f64 - lr as f64 * *v) as f32;
                }
                model.set_flat(&flat)?;
            }
            let p1 = model.predict(&entry.target, &entry.h1)?;
            let p2 = model.predict(&entry.target, &entry.h2)?;
            Ok(BackdoorOutcome {
                id: entry.id.clone(),
                successes: (p1 != p2) as u32,
                trials: 1,
            })
        });
    Ok(DefenseReport {
        kind: DefenseKind::FineTune,
        points: vec![SweepPoint {
            value: steps.to_string(),
            outcomes: outcomes.into_iter().collect::<Result<_, _>>()?,
        }],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ulp_stepping_is_exact_and_invertible() {
        for x in [1.0f32, -0.25, 3.5e-3, -1.7e4, 0.0] {
            assert_eq!(step_ulps(x, 0).to_bits(), x.to_bits());
            let up = step_ulps(x, 5);
            assert_eq!(step_ulps(up, -5).to_bits(), x.to_bits());
        }
        assert_eq!(step_ulps(1.0, 1), f32::from_bits(1.0f32.to_bits() + 1));
        // Crossing zero is well defined on the ordered index.
        let just_neg = step_ulps(0.0, -2);
        assert!(just_neg < 0.0);
        assert_eq!(step_ulps(just_neg, 2).to_bits(), 0.0f32.to_bits());
    }

    #[test]
    fn batch_size_zero_is_rejected() {
        assert!(matches!(
            defend_batch_size(&[], 0),
            Err(DefenseError::Config(_))
        ));
    }

    #[test]
    fn downcast_of_representable_model_is_identity() {
        let model = crate::engine::tests::toy_mlp(77);
        // Snap to bf16 first; then bf16 downcast must be a no-op.
        let snapped = downcast_model(&model, DowncastFormat::Bf16).unwrap();
        let again = downcast_model(&snapped, DowncastFormat::Bf16).unwrap();
        assert!(snapped
            .flatten()
            .iter()
            .zip(again.flatten().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
