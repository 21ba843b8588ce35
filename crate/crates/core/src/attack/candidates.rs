//! The two refinement mechanisms: product-preserving weight permutations
//! (implicit, changes only the summation order) and low-mantissa bit flips
//! (explicit, changes values by at most a few parts in 2^8).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{Layer, Model};

use super::AttackError;

/// Highest mantissa bit index eligible for flipping (inclusive). Bits 0..=15
/// of an f32 fraction change a parameter by less than 2^-7 of itself and can
/// never touch the exponent, so flipped parameters stay finite.
pub const MAX_FLIP_BIT: u8 = 15;

/// A set of applied bit flips, `(flat parameter index, mantissa bit)`.
/// Applying the same record twice restores the original model exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlipRecord {
    pub flips: Vec<(usize, u8)>,
}

impl FlipRecord {
    pub fn summary(&self) -> String {
        self.flips
            .iter()
            .map(|(p, b)| format!("{p}:{b}"))
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// XOR the recorded bits into a copy of the model.
pub fn apply_flip_record(model: &Model, record: &FlipRecord) -> Model {
    let mut flat = model.flatten();
    for &(param, bit) in &record.flips {
        flat[param] = f32::from_bits(flat[param].to_bits() ^ (1u32 << bit));
    }
    let mut out = model.clone();
    out.set_flat(&flat).expect("same architecture");
    out
}

/// Parameters eligible for flipping, as flat-index ranges of the unmasked
/// layers.
#[derive(Debug, Clone)]
pub struct ParamMask {
    ranges: Vec<std::ops::Range<usize>>,
    total: usize,
}

impl ParamMask {
    pub fn from_model(model: &Model, layer_mask: Option<&[usize]>) -> Result<Self, AttackError> {
        let all = model.layer_param_ranges();
        let ranges: Vec<std::ops::Range<usize>> = all
            .iter()
            .enumerate()
            .filter(|(i, r)| {
                !r.is_empty() && layer_mask.map(|m| m.contains(i)).unwrap_or(true)
            })
            .map(|(_, r)| r.clone())
            .collect();
        let total = ranges.iter().map(|r| r.len()).sum();
        if total == 0 {
            return Err(AttackError::EmptyMask);
        }
        Ok(Self { ranges, total })
    }

    pub fn total(&self) -> usize {
        self.total
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let mut r = rng.random_range(0..self.total);
        for range in &self.ranges {
            if r < range.len() {
                return range.start + r;
            }
            r -= range.len();
        }
        unreachable!("sample within total")
    }
}

/// Flip exactly `k` distinct `(parameter, bit)` positions sampled uniformly
/// over the masked parameters and bits `0..=MAX_FLIP_BIT`. Candidates whose
/// flipped parameters were non-finite would be resampled, but mantissa-only
/// flips cannot produce them from finite inputs.
pub fn bitflip_candidate(
    model: &Model,
    k: usize,
    rng: &mut ChaCha8Rng,
    mask: &ParamMask,
) -> Result<(Model, FlipRecord), AttackError> {
    if k == 0 {
        return Err(AttackError::Config("k_bits must be >= 1".into()));
    }
    for _attempt in 0..64 {
        let mut flips: Vec<(usize, u8)> = Vec::with_capacity(k);
        while flips.len() < k {
            let pos = (
                mask.sample(rng),
                rng.random_range(0..=MAX_FLIP_BIT as u32) as u8,
            );
            if !flips.contains(&pos) {
                flips.push(pos);
            }
        }
        let record = FlipRecord { flips };
        let candidate = apply_flip_record(model, &record);
        if candidate.flatten().iter().all(|v| v.is_finite()) {
            return Ok((candidate, record));
        }
    }
    Err(AttackError::Config(
        "could not sample a finite bit-flip candidate".into(),
    ))
}

/// Indices of factored-linear layers, optionally restricted to a layer mask.
pub fn factored_layers(model: &Model, layer_mask: Option<&[usize]>) -> Vec<usize> {
    model
        .layers
        .iter()
        .enumerate()
        .filter(|(i, layer)| {
            matches!(layer, Layer::FactoredLinear { .. })
                && layer_mask.map(|m| m.contains(i)).unwrap_or(true)
        })
        .map(|(i, _)| i)
        .collect()
}

/// Reparameterize a factored-linear layer by a permutation of its
/// contraction dimension: row `m` of `w1` and column `m` of `w2` both move
/// to position of `perm[m]`'s slot, so the exact product `w2 w1` is
/// unchanged while every summation over the contraction dimension meets its
/// terms in a different order.
pub fn permute_candidate(
    model: &Model,
    layer: usize,
    perm: &[usize],
) -> Result<Model, AttackError> {
    let Some(Layer::FactoredLinear { w1, w2, bias }) = model.layers.get(layer) else {
        return Err(AttackError::NotFactored { layer });
    };
    let mid = w1.shape()[0];
    let mut seen = vec![false; mid];
    if perm.len() != mid || perm.iter().any(|&p| p >= mid || std::mem::replace(&mut seen[p], true)) {
        return Err(AttackError::BadPermutation { layer });
    }
    let inp = w1.shape()[1];
    let out = w2.shape()[0];
    let mut new_w1 = vec![0.0f32; mid * inp];
    for m in 0..mid {
        new_w1[m * inp..(m + 1) * inp].copy_from_slice(w1.row(perm[m]));
    }
    let mut new_w2 = vec![0.0f32; out * mid];
    for j in 0..out {
        for m in 0..mid {
            new_w2[j * mid + m] = w2.at2(j, perm[m]);
        }
    }
    let mut result = model.clone();
    result.layers[layer] = Layer::FactoredLinear {
        w1: crate::numerics::Tensor::new(vec![mid, inp], new_w1).expect("w1 shape"),
        w2: crate::numerics::Tensor::new(vec![out, mid], new_w2).expect("w2 shape"),
        bias: bias.clone(),
    };
    Ok(result)
}

pub fn random_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_model(seed: u64) -> Model {
        use crate::numerics::Tensor;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            Tensor::new(
                shape,
                (0..len).map(|_| rng.random::<f32>() - 0.5).collect(),
            )
            .unwrap()
        };
        Model::new(
            vec![
                Layer::Linear {
                    weight: t(vec![8, 5]),
                    bias: t(vec![8]),
                },
                Layer::Relu,
                Layer::FactoredLinear {
                    w1: t(vec![6, 8]),
                    w2: t(vec![3, 6]),
                    bias: t(vec![3]),
                },
            ],
            3,
            vec![5],
        )
        .unwrap()
    }

    #[test]
    fn flip_record_is_an_involution_with_hamming_distance_k() {
        let model = toy_model(1);
        let mask = ParamMask::from_model(&model, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (flipped, record) = bitflip_candidate(&model, 5, &mut rng, &mask).unwrap();
        let (orig, new) = (model.flatten(), flipped.flatten());
        let hamming: u32 = orig
            .iter()
            .zip(&new)
            .map(|(a, b)| (a.to_bits() ^ b.to_bits()).count_ones())
            .sum();
        assert_eq!(hamming, 5);
        let restored = apply_flip_record(&flipped, &record);
        assert!(orig
            .iter()
            .zip(restored.flatten().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn single_low_bit_flip_changes_param_by_one_ulp() {
        let model = toy_model(3);
        let record = FlipRecord {
            flips: vec![(0, 0)],
        };
        let flipped = apply_flip_record(&model, &record);
        let (a, b) = (model.flatten()[0], flipped.flatten()[0]);
        assert_eq!((a.to_bits() ^ b.to_bits()), 1);
        assert!((a - b).abs() <= a.abs() * f32::EPSILON);
    }

    #[test]
    fn layer_mask_restricts_flip_positions() {
        let model = toy_model(4);
        let mask = ParamMask::from_model(&model, Some(&[2])).unwrap();
        let ranges = model.layer_param_ranges();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (_, record) = bitflip_candidate(&model, 3, &mut rng, &mask).unwrap();
            for (param, _) in record.flips {
                assert!(ranges[2].contains(&param));
            }
        }
        assert!(ParamMask::from_model(&model, Some(&[1])).is_err());
    }

    #[test]
    fn identity_permutation_is_bit_identical() {
        let model = toy_model(6);
        let permuted = permute_candidate(&model, 2, &[0, 1, 2, 3, 4, 5]).unwrap();
        assert!(model
            .flatten()
            .iter()
            .zip(permuted.flatten().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn permutation_requires_factored_layer_and_valid_perm() {
        let model = toy_model(7);
        assert!(matches!(
            permute_candidate(&model, 0, &[0]),
            Err(AttackError::NotFactored { layer: 0 })
        ));
        assert!(matches!(
            permute_candidate(&model, 2, &[0, 0, 2, 3, 4, 5]),
            Err(AttackError::BadPermutation { .. })
        ));
    }

    #[test]
    fn nontrivial_permutation_changes_f32_logits_but_not_wide_ones() {
        let model = toy_model(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let perm = loop {
            let p = random_permutation(6, &mut rng);
            if p.iter().enumerate().any(|(i, &v)| i != v) {
                break p;
            }
        };
        let permuted = permute_candidate(&model, 2, &perm).unwrap();
        let x = crate::numerics::Tensor::from_vec(vec![0.7, -0.2, 0.4, 0.9, -0.5]);
        let narrow = crate::numerics::BackendProfile::new(
            "seq",
            1,
            crate::numerics::ReductionTree::Sequential,
            false,
            crate::numerics::Accumulator::F32,
            crate::numerics::BatchTiling::PerRow,
        )
        .unwrap();
        let a = model.forward(&x, &narrow).unwrap();
        let b = permuted.forward(&x, &narrow).unwrap();
        assert!(!a.bit_eq(&b), "expected low-order disagreement");
        // Under exact arithmetic the product is unchanged; in f32 the
        // logits stay within summation-error distance.
        for (va, vb) in a.data().iter().zip(b.data()) {
            assert!((va - vb).abs() < 1e-4);
        }
    }
}
