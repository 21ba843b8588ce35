use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::NumericsError;

/// Shape of the accumulation order used by reductions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReductionTree {
    /// One running sum over the whole sequence.
    Sequential,
    /// Balanced binary tree; odd splits are left-heavy.
    Pairwise,
    /// Full blocks of `block_size` summed sequentially, block partials then
    /// combined sequentially. Degenerates to `Sequential` once `block_size`
    /// reaches the reduction length.
    Blocked,
}

/// Precision partial sums are kept in before the final rounding to f32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Accumulator {
    F32,
    F64,
}

/// Whether the batch dimension participates in tiling.
///
/// `PerRow` backends reduce every sample identically no matter how it is
/// batched. `Interleaved` backends rotate the reduction order by an offset
/// derived from the batch index and batch size, so results become
/// batch-size-dependent (a batch of one is always the unrotated order).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchTiling {
    PerRow,
    Interleaved,
}

/// A virtual hardware platform: a complete, deterministic specification of
/// how kernels order and round their floating-point work.
///
/// Two calls with equal inputs and equal profiles are bit-identical; two
/// profiles with equal numerical fields are bit-identical regardless of
/// their names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendProfile {
    pub name: String,
    pub block_size: usize,
    pub tree: ReductionTree,
    /// Fuse multiply-add (single rounding) instead of separate multiply then
    /// add (two roundings). Only observable with the f32 accumulator; f32
    /// products are exact in f64.
    pub fma: bool,
    pub accumulator: Accumulator,
    pub batch_tiling: BatchTiling,
}

impl BackendProfile {
    pub fn new(
        name: impl Into<String>,
        block_size: usize,
        tree: ReductionTree,
        fma: bool,
        accumulator: Accumulator,
        batch_tiling: BatchTiling,
    ) -> Result<Self, NumericsError> {
        let profile = Self {
            name: name.into(),
            block_size,
            tree,
            fma,
            accumulator,
            batch_tiling,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        if self.block_size == 0 {
            return Err(NumericsError::InvalidProfile {
                name: self.name.clone(),
                reason: "block_size must be >= 1".into(),
            });
        }
        if self.name.is_empty() {
            return Err(NumericsError::InvalidProfile {
                name: self.name.clone(),
                reason: "profile name must be non-empty".into(),
            });
        }
        Ok(())
    }

    /// True when the two profiles round identically, regardless of names.
    pub fn same_numerics(&self, other: &Self) -> bool {
        self.block_size == other.block_size
            && self.tree == other.tree
            && self.fma == other.fma
            && self.accumulator == other.accumulator
            && self.batch_tiling == other.batch_tiling
    }

    /// The fixed wide profile used for all gradient computations.
    pub fn canonical() -> Self {
        Self {
            name: "canon64".into(),
            block_size: 1,
            tree: ReductionTree::Sequential,
            fma: false,
            accumulator: Accumulator::F64,
            batch_tiling: BatchTiling::PerRow,
        }
    }
}

fn profile(
    name: &str,
    block_size: usize,
    tree: ReductionTree,
    fma: bool,
    accumulator: Accumulator,
    batch_tiling: BatchTiling,
) -> BackendProfile {
    BackendProfile {
        name: name.into(),
        block_size,
        tree,
        fma,
        accumulator,
        batch_tiling,
    }
}

/// The backends shipped with the lab.
///
/// `seq32` and `seq32twin` are the canonical bit-identical pair: identical
/// numerics under two device names, so any cross-device attack between them
/// must fail. The `*b` profiles are interleaved-batch variants of their
/// per-row counterparts and exist for the batch-size defense.
pub fn builtin_profiles() -> Vec<BackendProfile> {
    use Accumulator::*;
    use BatchTiling::*;
    use ReductionTree::*;
    vec![
        profile("seq32", 1, Sequential, false, F32, PerRow),
        profile("seq32twin", 1, Sequential, false, F32, PerRow),
        profile("blk8", 8, Blocked, false, F32, PerRow),
        profile("blk32", 32, Blocked, false, F32, PerRow),
        profile("pair32", 1, Pairwise, false, F32, PerRow),
        profile("fma32", 1, Sequential, true, F32, PerRow),
        profile("wide64", 1, Sequential, false, F64, PerRow),
        profile("pair64", 1, Pairwise, false, F64, PerRow),
        profile("seq32b", 1, Sequential, false, F32, Interleaved),
        profile("blk8b", 8, Blocked, false, F32, Interleaved),
        profile("pair32b", 1, Pairwise, false, F32, Interleaved),
        BackendProfile::canonical(),
    ]
}

/// Name-addressable profile store with deterministic iteration order.
#[derive(Debug, Clone, Default)]
pub struct ProfileRegistry {
    profiles: BTreeMap<String, BackendProfile>,
}

impl ProfileRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut registry = Self::new();
        for profile in builtin_profiles() {
            registry
                .insert(profile)
                .expect("builtin profiles are valid and unique");
        }
        registry
    }

    pub fn insert(&mut self, profile: BackendProfile) -> Result<(), NumericsError> {
        profile.validate()?;
        if self.profiles.contains_key(&profile.name) {
            return Err(NumericsError::InvalidProfile {
                name: profile.name.clone(),
                reason: "duplicate profile name".into(),
            });
        }
        self.profiles.insert(profile.name.clone(), profile);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&BackendProfile> {
        self.profiles.get(name)
    }

    pub fn resolve(&self, name: &str) -> Result<&BackendProfile, NumericsError> {
        self.get(name).ok_or_else(|| NumericsError::UnknownProfile {
            name: name.to_string(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &BackendProfile> {
        self.profiles.values()
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }
}
