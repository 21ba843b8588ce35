//! Backdoor construction against a pair (or group) of backends.
//!
//! Two alternating steps, repeated up to `max_iters` times:
//!
//! 1. *Boundary shaping*: gradient steps on the weighted proxy loss pull the
//!    target input onto the decision boundary of the deployment backend
//!    while staying close to the original weights. The smooth terms take
//!    plain gradient steps; the quadratic anchor `gamma ||theta - theta_bar||^2`
//!    is applied as its exact proximal shrink toward `theta_bar`, which is
//!    stable for every `gamma` (as `gamma -> inf` the weights freeze at
//!    `theta_bar` instead of diverging).
//! 2. *Deviation refinement*: `m_perm` product-preserving permutations and
//!    `m_flip` low-mantissa bit-flip candidates are generated from per-index
//!    seeds and the first candidate (by index) that splits the prediction
//!    across backends while retaining `rho` of baseline accuracy wins.
//!
//! Candidate evaluation is pure per candidate and runs in parallel; the
//! selected winner is always the first qualifying index, independent of
//! completion order. A split decision only counts when the top logit is
//! strict on every involved backend, so exact ties never masquerade as
//! backdoors.

mod candidates;
mod losses;

pub use candidates::{
    apply_flip_record, bitflip_candidate, factored_layers, permute_candidate, random_permutation,
    FlipRecord, ParamMask, MAX_FLIP_BIT,
};
pub use losses::{loss_class, loss_diff, loss_reg, proxy_loss};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{accuracy, Split};
use crate::engine::{EngineError, Model};
use crate::numerics::{BackendProfile, Tensor};
use crate::parallel;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("attack config: {0}")]
    Config(String),
    #[error("logits must cover at least two classes")]
    TooFewClasses,
    #[error("layer {layer} is not factored-linear")]
    NotFactored { layer: usize },
    #[error("invalid permutation for layer {layer}")]
    BadPermutation { layer: usize },
    #[error("layer mask selects no parameters")]
    EmptyMask,
    #[error("not enough correctly-classified training points: wanted {wanted}, found {found}")]
    NotEnoughTargets { wanted: usize, found: usize },
}

/// Success predicate connecting the deployment backend to the others.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TriggerMode {
    /// Predictions differ between `h1` and the single other backend.
    Pairwise,
    /// Misclassified on `h1` while every other backend still predicts the
    /// source class.
    OneVsRest,
}

/// Which refinement mechanisms run after each shaping pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Base,
    Perm,
    Flip,
    Full,
}

impl Variant {
    fn wants_perms(self) -> bool {
        matches!(self, Variant::Perm | Variant::Full)
    }
    fn wants_flips(self) -> bool {
        matches!(self, Variant::Flip | Variant::Full)
    }
}

/// Adaptive schedule for the boundary coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub init: f32,
    /// Above this margin alpha doubles after an iteration.
    pub tau_high: f32,
    /// Below this margin alpha halves after an iteration.
    pub tau_low: f32,
    pub min: f32,
    pub max: f32,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        Self {
            init: 1.0,
            tau_high: 0.5,
            tau_low: 0.05,
            min: 2f32.powi(-6),
            max: 2f32.powi(6),
        }
    }
}

impl AlphaSchedule {
    pub fn update(&self, alpha: f32, mean_margin: f32) -> f32 {
        let next = if mean_margin > self.tau_high {
            alpha * 2.0
        } else if mean_margin < self.tau_low {
            alpha * 0.5
        } else {
            alpha
        };
        next.clamp(self.min, self.max)
    }
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    /// Deployment backend the misclassification triggers on.
    pub h1: BackendProfile,
    /// The other backend(s): the pairwise partner, or the one-vs-rest group.
    pub others: Vec<BackendProfile>,
    pub alpha: AlphaSchedule,
    pub beta: f32,
    pub gamma: f32,
    pub lr: f32,
    pub steps_per_iter: usize,
    pub k_bits: usize,
    pub m_perm: usize,
    pub m_flip: usize,
    pub rho: f32,
    pub max_iters: usize,
    pub layer_mask: Option<Vec<usize>>,
    pub mode: TriggerMode,
    pub variant: Variant,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(h1: BackendProfile, others: Vec<BackendProfile>) -> Self {
        Self {
            h1,
            others,
            alpha: AlphaSchedule::default(),
            beta: 0.1,
            gamma: 10_000.0,
            lr: 1e-2,
            steps_per_iter: 500,
            k_bits: 5,
            m_perm: 128,
            m_flip: 128,
            rho: 0.95,
            max_iters: 6,
            layer_mask: None,
            mode: TriggerMode::Pairwise,
            variant: Variant::Full,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(AttackError::Config("rho must be in (0, 1]".into()));
        }
        if self.k_bits == 0 {
            return Err(AttackError::Config("k_bits must be >= 1".into()));
        }
        if self.others.is_empty() {
            return Err(AttackError::Config(
                "at least one non-target backend is required".into(),
            ));
        }
        if self.mode == TriggerMode::Pairwise && self.others.len() != 1 {
            return Err(AttackError::Config(
                "pairwise mode takes exactly one other backend".into(),
            ));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(AttackError::Config("lr must be positive".into()));
        }
        self.h1
            .validate()
            .map_err(|e| AttackError::Engine(e.into()))?;
        for p in &self.others {
            p.validate().map_err(|e| AttackError::Engine(e.into()))?;
        }
        Ok(())
    }
}

/// A chosen target: its training-set index, input, and source class.
#[derive(Debug, Clone)]
pub struct TargetRef {
    pub index: usize,
    pub input: Tensor,
    pub source_class: usize,
}

/// Which mechanism produced the split decision.
#[derive(Debug, Clone, PartialEq)]
pub enum Mechanism {
    /// Boundary shaping alone already split the prediction.
    None,
    Permutation { layer: usize },
    BitFlip { record: FlipRecord },
}

impl Mechanism {
    pub fn label(&self) -> &'static str {
        match self {
            Mechanism::None => "none",
            Mechanism::Permutation { .. } => "perm",
            Mechanism::BitFlip { .. } => "flip",
        }
    }

    pub fn detail(&self) -> String {
        match self {
            Mechanism::None => String::new(),
            Mechanism::Permutation { layer } => format!("layer={layer}"),
            Mechanism::BitFlip { record } => record.summary(),
        }
    }
}

/// Outcome of one attack run.
#[derive(Debug, Clone)]
pub struct BackdoorResult {
    pub run_index: usize,
    pub targets: Vec<TargetRef>,
    pub model: Model,
    /// Joint trigger over every target plus the accuracy floor.
    pub success: bool,
    pub per_target_success: Vec<bool>,
    /// Per target: predicted class under `h1` then each other backend.
    pub predictions: Vec<Vec<(String, usize)>>,
    pub baseline_accuracy: f32,
    pub accuracy_ratio: f32,
    pub iterations: usize,
    pub mechanism: Mechanism,
}

/// Sample `count` distinct targets uniformly from the correctly-classified
/// training points (correct under `h1`, so the source class is well
/// defined).
pub fn sample_targets(
    model: &Model,
    train: &Split,
    h1: &BackendProfile,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TargetRef>, AttackError> {
    let eligible: Vec<usize> = (0..train.len())
        .filter(|&i| {
            model
                .predict(&train.inputs[i], h1)
                .map(|p| p == train.labels[i])
                .unwrap_or(false)
        })
        .collect();
    if eligible.len() < count {
        return Err(AttackError::NotEnoughTargets {
            wanted: count,
            found: eligible.len(),
        });
    }
    let mut pool = eligible;
    let mut chosen = Vec::with_capacity(count);
    for _ in 0..count {
        let at = rng.random_range(0..pool.len());
        let index = pool.swap_remove(at);
        chosen.push(TargetRef {
            index,
            input: train.inputs[index].clone(),
            source_class: train.labels[index],
        });
    }
    Ok(chosen)
}

/// Mean top-two logit margin over the targets under `h1`.
fn mean_margin(
    model: &Model,
    targets: &[TargetRef],
    h1: &BackendProfile,
) -> Result<f32, AttackError> {
    if targets.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0f32;
    for target in targets {
        let logits = model.forward(&target.input, h1)?;
        total += losses::loss_diff(logits.data())?;
    }
    Ok(total / targets.len() as f32)
}

/// One shaping pass: `steps_per_iter` proximal gradient steps on
/// `sum_targets [alpha L_diff + beta L_class] + |targets| gamma L_reg`,
/// anchored at `theta_bar`, returning the trajectory iterate with the
/// smallest mean boundary margin. Constant-step descent bounces around the
/// tie with amplitude proportional to the step, so the final iterate's
/// margin equals that amplitude while the best visited one is smaller by
/// roughly the step count; the refinement search needs the latter. An empty
/// target set is a bit-exact no-op.
pub fn shape_boundary(
    model: &Model,
    theta_bar: &[f32],
    targets: &[TargetRef],
    config: &AttackConfig,
    alpha: f32,
) -> Result<Model, AttackError> {
    Ok(shape_boundary_full(model, theta_bar, targets, config, alpha)?.best)
}

/// Best and final iterates of one shaping pass. The alternating loop
/// refines the best iterate but resumes descent from the final one, so
/// successive passes sample fresh phases of the bounce around the tie
/// instead of deterministically replaying their own tail.
pub(crate) struct ShapeOutcome {
    pub last: Model,
    pub best: Model,
}

pub(crate) fn shape_boundary_full(
    model: &Model,
    theta_bar: &[f32],
    targets: &[TargetRef],
    config: &AttackConfig,
    alpha: f32,
) -> Result<ShapeOutcome, AttackError> {
    if targets.is_empty() {
        return Ok(ShapeOutcome {
            last: model.clone(),
            best: model.clone(),
        });
    }
    let mut shaped = model.clone();
    let lr = config.lr as f64;
    // Exact proximal map of the summed quadratic anchor.
    let shrink = 1.0 / (1.0 + 2.0 * config.gamma as f64 * targets.len() as f64 * lr);
    let mut best: Option<(f32, Vec<f32>)> = None;
    for _step in 0..config.steps_per_iter {
        let mut grad = vec![0.0f64; shaped.param_count()];
        let mut worst_margin = 0.0f32;
        for target in targets {
            let logits = shaped.forward(&target.input, &config.h1)?;
            if logits.data().len() < 2 {
                return Err(AttackError::TooFewClasses);
            }
            // The joint trigger needs every target near its boundary at
            // once, so the best iterate is the one minimizing the worst
            // per-target margin.
            worst_margin = worst_margin.max(losses::loss_diff(logits.data())?);
            let mut dlogits = losses::dlogits_diff(logits.data());
            for (d, c) in dlogits
                .iter_mut()
                .zip(losses::dlogits_class(logits.data(), target.source_class))
            {
                *d = alpha as f64 * *d + config.beta as f64 * c;
            }
            let trace = shaped.forward_traced(&target.input)?;
            let g = shaped.backward(&trace, &dlogits)?;
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += *gi as f64;
            }
        }
        if best
            .as_ref()
            .map(|(m, _)| worst_margin < *m)
            .unwrap_or(true)
        {
            best = Some((worst_margin, shaped.flatten()));
        }
        let mut flat = shaped.flatten();
        for ((w, g), bar) in flat.iter_mut().zip(&grad).zip(theta_bar) {
            let stepped = *w as f64 - lr * g;
            *w = (*bar as f64 + (stepped - *bar as f64) * shrink) as f32;
        }
        if !flat.iter().all(|v| v.is_finite()) {
            return Err(AttackError::Config(
                "boundary shaping diverged to non-finite parameters".into(),
            ));
        }
        shaped.set_flat(&flat)?;
    }
    // Keep the best visited iterate if it beats the final one.
    let final_margin = mean_margin(&shaped, targets, &config.h1)?;
    let mut best_model = shaped.clone();
    if let Some((margin, flat)) = best {
        if margin < final_margin {
            best_model.set_flat(&flat)?;
        }
    }
    Ok(ShapeOutcome {
        last: shaped,
        best: best_model,
    })
}

/// Evaluate the run's trigger predicate for one target, requiring strict
/// top-logit separation on every backend involved.
fn target_triggers(
    model: &Model,
    target: &TargetRef,
    config: &AttackConfig,
) -> Result<bool, AttackError> {
    let (p1, strict1) = model.predict_strict(&target.input, &config.h1)?;
    if !strict1 {
        return Ok(false);
    }
    match config.mode {
        TriggerMode::Pairwise => {
            let (p2, strict2) = model.predict_strict(&target.input, &config.others[0])?;
            Ok(strict2 && p1 != p2)
        }
        TriggerMode::OneVsRest => {
            if p1 == target.source_class {
                return Ok(false);
            }
            for other in &config.others {
                let (p, strict) = model.predict_strict(&target.input, other)?;
                if !strict || p != target.source_class {
                    return Ok(false);
                }
            }
            Ok(true)
        }
    }
}

fn all_targets_trigger(
    model: &Model,
    targets: &[TargetRef],
    config: &AttackConfig,
) -> Result<bool, AttackError> {
    for target in targets {
        if !target_triggers(model, target, config)? {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, Copy)]
enum CandidateSpec {
    Perm(u64),
    Flip(u64),
}

fn candidate_seed(seed: u64, iteration: u64, tag: u64, index: u64) -> [u8; 32] {
    let mut bytes = [0u8; 32];
    bytes[0..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&iteration.to_le_bytes());
    bytes[16..24].copy_from_slice(&tag.to_le_bytes());
    bytes[24..32].copy_from_slice(&index.to_le_bytes());
    bytes
}

const TAG_PERM: u64 = 0x7065726d; // "perm"
const TAG_FLIP: u64 = 0x666c6970; // "flip"
const TAG_TARGETS: u64 = 0x74677473; // "tgts"

/// A refinement hit: the qualifying candidate model and how it was built.
#[derive(Debug, Clone)]
pub struct RefineHit {
    pub model: Model,
    pub mechanism: Mechanism,
    pub candidate_index: usize,
}

fn build_candidate(
    model: &Model,
    spec: CandidateSpec,
    config: &AttackConfig,
    iteration: usize,
    perm_layers: &[usize],
    mask: Option<&ParamMask>,
) -> Result<(Model, Mechanism), AttackError> {
    match spec {
        CandidateSpec::Perm(j) => {
            let mut rng = ChaCha8Rng::from_seed(candidate_seed(
                config.seed,
                iteration as u64,
                TAG_PERM,
                j,
            ));
            let layer = perm_layers[rng.random_range(0..perm_layers.len())];
            let mid = match &model.layers[layer] {
                crate::engine::Layer::FactoredLinear { w1, .. } => w1.shape()[0],
                _ => unreachable!("perm_layers holds factored layers"),
            };
            let perm = random_permutation(mid, &mut rng);
            let candidate = permute_candidate(model, layer, &perm)?;
            Ok((candidate, Mechanism::Permutation { layer }))
        }
        CandidateSpec::Flip(j) => {
            let mut rng = ChaCha8Rng::from_seed(candidate_seed(
                config.seed,
                iteration as u64,
                TAG_FLIP,
                j,
            ));
            let mask = mask.expect("flip candidates need a parameter mask");
            let (candidate, record) =
                bitflip_candidate(model, config.k_bits, &mut rng, mask)?;
            Ok((candidate, Mechanism::BitFlip { record }))
        }
    }
}

/// Generate and screen the iteration's candidates; returns the first (by
/// index) that satisfies the trigger and retains `rho` of baseline
/// accuracy under `h1`, or `None` when no candidate qualifies.
pub fn refine(
    model: &Model,
    targets: &[TargetRef],
    test: &Split,
    config: &AttackConfig,
    baseline_accuracy: f32,
    iteration: usize,
) -> Result<Option<RefineHit>, AttackError> {
    let perm_layers = factored_layers(model, config.layer_mask.as_deref());
    let mask = ParamMask::from_model(model, config.layer_mask.as_deref()).ok();

    let mut specs: Vec<CandidateSpec> = Vec::new();
    if config.variant.wants_perms() && !perm_layers.is_empty() {
        specs.extend((0..config.m_perm as u64).map(CandidateSpec::Perm));
    }
    if config.variant.wants_flips() && mask.is_some() {
        specs.extend((0..config.m_flip as u64).map(CandidateSpec::Flip));
    }
    if specs.is_empty() {
        return Ok(None);
    }

    let floor = config.rho * baseline_accuracy;
    let screened: Vec<Result<bool, AttackError>> = parallel::map_slice(&specs, |spec| {
        let (candidate, _) =
            build_candidate(model, *spec, config, iteration, &perm_layers, mask.as_ref())?;
        if !all_targets_trigger(&candidate, targets, config)? {
            return Ok(false);
        }
        Ok(accuracy(&candidate, test, &config.h1)? >= floor)
    });
    for (index, outcome) in screened.into_iter().enumerate() {
        if outcome? {
            let (candidate, mechanism) = build_candidate(
                model,
                specs[index],
                config,
                iteration,
                &perm_layers,
                mask.as_ref(),
            )?;
            return Ok(Some(RefineHit {
                model: candidate,
                mechanism,
                candidate_index: index,
            }));
        }
    }
    Ok(None)
}

fn finish(
    run_index: usize,
    model: Model,
    targets: &[TargetRef],
    config: &AttackConfig,
    test: &Split,
    baseline_accuracy: f32,
    iterations: usize,
    mechanism: Mechanism,
) -> Result<BackdoorResult, AttackError> {
    let mut predictions = Vec::with_capacity(targets.len());
    let mut per_target_success = Vec::with_capacity(targets.len());
    for target in targets {
        let mut row = vec![(
            config.h1.name.clone(),
            model.predict(&target.input, &config.h1)?,
        )];
        for other in &config.others {
            row.push((other.name.clone(), model.predict(&target.input, other)?));
        }
        predictions.push(row);
        per_target_success.push(target_triggers(&model, target, config)?);
    }
    let acc = accuracy(&model, test, &config.h1)?;
    let accuracy_ratio = if baseline_accuracy > 0.0 {
        acc / baseline_accuracy
    } else {
        1.0
    };
    let success =
        per_target_success.iter().all(|&s| s) && accuracy_ratio >= config.rho && !targets.is_empty();
    Ok(BackdoorResult {
        run_index,
        targets: targets.to_vec(),
        model,
        success,
        per_target_success,
        predictions,
        baseline_accuracy,
        accuracy_ratio,
        iterations,
        mechanism,
    })
}

/// The full alternating optimization for one set of targets.
pub fn run_attack(
    baseline: &Model,
    targets: &[TargetRef],
    test: &Split,
    config: &AttackConfig,
) -> Result<BackdoorResult, AttackError> {
    run_attack_indexed(0, baseline, targets, test, config)
}

pub fn run_attack_indexed(
    run_index: usize,
    baseline: &Model,
    targets: &[TargetRef],
    test: &Split,
    config: &AttackConfig,
) -> Result<BackdoorResult, AttackError> {
    config.validate()?;
    if targets.is_empty() {
        return Err(AttackError::Config("at least one target is required".into()));
    }
    let baseline_accuracy = accuracy(baseline, test, &config.h1)?;
    let theta_bar = baseline.flatten();
    let mut current = baseline.clone();
    let mut best_shaped = baseline.clone();
    let mut alpha = config.alpha.init;

    for iteration in 0..config.max_iters {
        let outcome = shape_boundary_full(&current, &theta_bar, targets, config, alpha)?;
        let shaped = outcome.best;
        current = outcome.last;
        best_shaped = shaped.clone();

        // Shaping alone may already split the prediction (mechanism none).
        if all_targets_trigger(&shaped, targets, config)?
            && accuracy(&shaped, test, &config.h1)? >= config.rho * baseline_accuracy
        {
            return finish(
                run_index,
                shaped,
                targets,
                config,
                test,
                baseline_accuracy,
                iteration + 1,
                Mechanism::None,
            );
        }

        if config.variant != Variant::Base {
            if let Some(hit) = refine(&shaped, targets, test, config, baseline_accuracy, iteration)?
            {
                return finish(
                    run_index,
                    hit.model,
                    targets,
                    config,
                    test,
                    baseline_accuracy,
                    iteration + 1,
                    hit.mechanism,
                );
            }
        }

        alpha = config.alpha.update(alpha, mean_margin(&shaped, targets, &config.h1)?);
    }

    finish(
        run_index,
        best_shaped,
        targets,
        config,
        test,
        baseline_accuracy,
        config.max_iters,
        Mechanism::None,
    )
}

/// Seeded repetitions with freshly sampled targets, evaluated in parallel
/// and returned ordered by run index.
pub fn run_many(
    baseline: &Model,
    train: &Split,
    test: &Split,
    config: &AttackConfig,
    runs: usize,
    targets_per_run: usize,
) -> Result<Vec<BackdoorResult>, AttackError> {
    config.validate()?;
    let results: Vec<Result<BackdoorResult, AttackError>> = parallel::map_indexed(runs, |r| {
        let mut rng = ChaCha8Rng::from_seed(candidate_seed(
            config.seed,
            r as u64,
            TAG_TARGETS,
            0,
        ));
        let targets = sample_targets(baseline, train, &config.h1, targets_per_run, &mut rng)?;
        let mut run_config = config.clone();
        run_config.seed = rng.random::<u64>();
        run_attack_indexed(r, baseline, &targets, test, &run_config)
    });
    results.into_iter().collect()
}
