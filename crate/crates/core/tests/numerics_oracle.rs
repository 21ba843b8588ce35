//! Bit-exact cross-checks of the production kernels against the exact
//! dyadic oracle, plus the summation error-bound and exactness properties.

use driftlab::numerics::{
    builtin_profiles, dot, gemm, reduce_sum, Accumulator, BackendProfile, BatchTiling,
    ReductionTree, Tensor,
};
use driftlab_oracle::exact;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_values(rng: &mut ChaCha8Rng, len: usize, scale: f32) -> Vec<f32> {
    (0..len)
        .map(|_| (rng.random::<f32>() * 2.0 - 1.0) * scale)
        .collect()
}

#[test]
fn reduce_sum_matches_oracle_on_random_sequences() {
    let profiles = builtin_profiles();
    let mut rng = ChaCha8Rng::seed_from_u64(01);
    for case in 0..200 {
        let len = rng.random_range(1..=64);
        let values = random_values(&mut rng, len, 4.0);
        for profile in &profiles {
            let ours = reduce_sum(&values, profile).unwrap();
            let reference = exact::exact_reduce_sum(&values, profile);
            assert_eq!(
                ours.to_bits(),
                reference.to_bits(),
                "case {case} profile {} values {values:?}",
                profile.name
            );
        }
    }
}

#[test]
fn dot_matches_oracle_on_random_sequences() {
    let profiles = builtin_profiles();
    let mut rng = ChaCha8Rng::seed_from_u64(02);
    for case in 0..150 {
        let len = rng.random_range(1..=48);
        let a = random_values(&mut rng, len, 2.0);
        let b = random_values(&mut rng, len, 2.0);
        for profile in &profiles {
            let ours = dot(&a, &b, profile).unwrap();
            let reference = exact::exact_dot(&a, &b, profile);
            assert_eq!(
                ours.to_bits(),
                reference.to_bits(),
                "case {case} profile {}",
                profile.name
            );
        }
    }
}

#[test]
fn known_cancellation_case_verified_against_oracle() {
    let seq = BackendProfile::new(
        "seq",
        1,
        ReductionTree::Sequential,
        false,
        Accumulator::F32,
        BatchTiling::PerRow,
    )
    .unwrap();
    let blk2 = BackendProfile::new(
        "blk2",
        2,
        ReductionTree::Blocked,
        false,
        Accumulator::F32,
        BatchTiling::PerRow,
    )
    .unwrap();
    let absorbed = [1e8f32, 1.0, -1e8];
    assert_eq!(reduce_sum(&absorbed, &seq).unwrap(), 0.0);
    assert_eq!(exact::exact_reduce_sum(&absorbed, &seq), 0.0);
    let preserved = [1e8f32, -1e8, 1.0];
    assert_eq!(reduce_sum(&preserved, &blk2).unwrap(), 1.0);
    assert_eq!(exact::exact_reduce_sum(&preserved, &blk2), 1.0);
}

#[test]
fn frobenius_trace_stays_within_summation_bound_of_exact_value() {
    // trace(M^T M) for the all-0.01 100x100 matrix is exactly 1; each f32
    // profile must land within the recursive-summation bound of it and at
    // least two profiles must disagree.
    let profiles: Vec<BackendProfile> = builtin_profiles()
        .into_iter()
        .filter(|p| p.accumulator == Accumulator::F32)
        .collect();
    let values = driftlab::numerics::frobenius_demo(100, 0.01, &profiles).unwrap();
    let mut bits = std::collections::BTreeSet::new();
    for v in &values {
        assert!((*v as f64 - 1.0).abs() <= 2.0 * 1e4 * 2f64.powi(-24));
        bits.insert(v.to_bits());
    }
    assert!(bits.len() >= 2, "profiles unexpectedly agree: {values:?}");
}

#[test]
fn gemm_elements_match_oracle_dots() {
    let mut rng = ChaCha8Rng::seed_from_u64(03);
    let (m, k, n) = (5, 17, 4);
    let a = Tensor::new(vec![m, k], random_values(&mut rng, m * k, 1.0)).unwrap();
    let b = Tensor::new(vec![k, n], random_values(&mut rng, k * n, 1.0)).unwrap();
    for profile in builtin_profiles() {
        let out = gemm(&a, &b, &profile).unwrap();
        for i in 0..m {
            for j in 0..n {
                let col: Vec<f32> = (0..k).map(|t| b.at2(t, j)).collect();
                let reference = exact::exact_dot(a.row(i), &col, &profile);
                assert_eq!(out.at2(i, j).to_bits(), reference.to_bits());
            }
        }
    }
}

#[test]
fn wide_accumulator_agrees_with_single_rounding_on_unit_scale_sums() {
    // f64 partial sums of up to 1000 values in [-1, 1] are accurate enough
    // that the final f32 rounding matches rounding the exact sum once.
    // Double rounding can break this in principle, but only when a partial
    // lands within ~2^-40 relative of an f32 tie, far off any uniform draw.
    let mut rng = ChaCha8Rng::seed_from_u64(04);
    let wide: Vec<BackendProfile> = builtin_profiles()
        .into_iter()
        .filter(|p| p.accumulator == Accumulator::F64)
        .collect();
    assert!(wide.len() >= 2);
    for _ in 0..300 {
        let len = rng.random_range(1..=1000);
        let values = random_values(&mut rng, len, 1.0);
        let exact_once = exact::exact_sum(&values).to_f32_rne();
        for profile in &wide {
            assert_eq!(reduce_sum(&values, profile).unwrap().to_bits(), exact_once.to_bits());
        }
    }
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    fn arb_profile() -> impl Strategy<Value = BackendProfile> {
        (
            prop_oneof![
                Just(ReductionTree::Sequential),
                Just(ReductionTree::Pairwise),
                Just(ReductionTree::Blocked),
            ],
            1usize..=16,
            any::<bool>(),
            prop_oneof![Just(Accumulator::F32), Just(Accumulator::F64)],
        )
            .prop_map(|(tree, block, fma, acc)| {
                BackendProfile::new("prop", block, tree, fma, acc, BatchTiling::PerRow).unwrap()
            })
    }

    proptest! {
        #[test]
        fn determinism_repeated_calls(values in proptest::collection::vec(-1e3f32..1e3, 0..80),
                                      profile in arb_profile()) {
            let a = reduce_sum(&values, &profile).unwrap();
            let b = reduce_sum(&values, &profile).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }

        #[test]
        fn pairwise_error_bound(values in proptest::collection::vec(-1e3f32..1e3, 1..256),
                                p1 in arb_profile(), p2 in arb_profile()) {
            // |sum(v,p1) - sum(v,p2)| <= 2 n eps sum|v| with eps = 2^-24.
            let s1 = reduce_sum(&values, &p1).unwrap() as f64;
            let s2 = reduce_sum(&values, &p2).unwrap() as f64;
            let abs_sum: f64 = values.iter().map(|v| v.abs() as f64).sum();
            let bound = 2.0 * values.len() as f64 * 2f64.powi(-24) * abs_sum;
            prop_assert!((s1 - s2).abs() <= bound,
                "|{s1} - {s2}| > {bound} (n = {})", values.len());
        }

        #[test]
        fn small_integers_are_exact_everywhere(ints in proptest::collection::vec(-512i32..512, 1..64),
                                               profile in arb_profile()) {
            // Integer sums this small are exactly representable at every
            // partial, so every association yields the same bits.
            let values: Vec<f32> = ints.iter().map(|&i| i as f32).collect();
            let expected: i64 = ints.iter().map(|&i| i as i64).sum();
            let got = reduce_sum(&values, &profile).unwrap();
            prop_assert_eq!(got, expected as f32);
        }
    }
}
