//! Deterministic floating-point kernels parameterized by a [`BackendProfile`].
//!
//! Every kernel's rounding sequence is a pure function of its inputs and the
//! profile, so repeated calls are bit-identical and two profiles stand in for
//! two hardware platforms. The order contract, which tests and the exact
//! oracle both rely on, is:
//!
//! * `Sequential`: one running sum, seeded with the first term, every add
//!   rounded in the accumulator precision.
//! * `Pairwise`: balanced binary tree over the terms; an odd-length slice
//!   splits left-heavy (`ceil(n/2)` terms on the left).
//! * `Blocked`: chunks of `block_size` consecutive terms are each summed
//!   sequentially, then the chunk partials are combined sequentially. With
//!   `block_size >= n` this is exactly `Sequential`.
//!
//! Dot products first round each elementwise product in the accumulator
//! precision, then sum per the tree. With `fma` set and an f32 accumulator,
//! multiplies fuse into the running add where one exists: sequential chains
//! and block interiors use `mul_add`; a pairwise tree fuses at the leaf
//! pairing step (`v_j = mul_add(a1, b1, a0 * b0)`) and combines the leaves
//! with plain adds. With an f64 accumulator the fma flag is unobservable,
//! because f32 products are exact in f64.
//!
//! Profiles with `Interleaved` batch tiling rotate the term order of every
//! reduction by `(lane.index + lane.size - 1) mod n`, which makes results
//! depend on batch placement while leaving a batch of one untouched.
//! Round-to-nearest-even is assumed throughout and denormals are kept.

mod profile;
mod tensor;

pub use profile::{
    builtin_profiles, Accumulator, BackendProfile, BatchTiling, ProfileRegistry, ReductionTree,
};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite result in {kernel}")]
    NonFinite { kernel: &'static str },
    #[error("invalid profile `{name}`: {reason}")]
    InvalidProfile { name: String, reason: String },
    #[error("unknown profile `{name}`")]
    UnknownProfile { name: String },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

/// Position of a sample within a batch. Kernels under `PerRow` tiling ignore
/// it; under `Interleaved` tiling it selects the reduction rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lane {
    pub index: usize,
    pub size: usize,
}

impl Lane {
    /// The unbatched lane: index 0 in a batch of one.
    pub const SOLO: Lane = Lane { index: 0, size: 1 };

    pub fn new(index: usize, size: usize) -> Self {
        debug_assert!(size >= 1 && index < size);
        Self { index, size }
    }

    fn rotation(&self, tiling: BatchTiling, n: usize) -> usize {
        match tiling {
            BatchTiling::PerRow => 0,
            BatchTiling::Interleaved => {
                if n == 0 {
                    0
                } else {
                    (self.index + self.size - 1) % n
                }
            }
        }
    }
}

impl Default for Lane {
    fn default() -> Self {
        Self::SOLO
    }
}

/// Accumulator precision abstraction; the two impls are the only ones.
trait Acc: Copy {
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
    fn add(self, other: Self) -> Self;
    fn prod(a: f32, b: f32) -> Self;
}

impl Acc for f32 {
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
    fn add(self, other: Self) -> Self {
        self + other
    }
    fn prod(a: f32, b: f32) -> Self {
        a * b
    }
}

impl Acc for f64 {
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
    fn add(self, other: Self) -> Self {
        self + other
    }
    fn prod(a: f32, b: f32) -> Self {
        // Exact: two 24-bit significands fit in f64.
        a as f64 * b as f64
    }
}

fn sum_sequential<A: Acc>(terms: &[A]) -> A {
    let mut iter = terms.iter();
    match iter.next() {
        None => A::from_f32(0.0),
        Some(&first) => iter.fold(first, |acc, &t| acc.add(t)),
    }
}

fn sum_pairwise<A: Acc>(terms: &[A]) -> A {
    match terms.len() {
        0 => A::from_f32(0.0),
        1 => terms[0],
        2 => terms[0].add(terms[1]),
        n => {
            let mid = n.div_ceil(2);
            sum_pairwise(&terms[..mid]).add(sum_pairwise(&terms[mid..]))
        }
    }
}

fn sum_blocked<A: Acc>(terms: &[A], block_size: usize) -> A {
    if terms.len() <= block_size {
        return sum_sequential(terms);
    }
    let partials: Vec<A> = terms
        .chunks(block_size)
        .map(|chunk| sum_sequential(chunk))
        .collect();
    sum_sequential(&partials)
}

fn sum_tree<A: Acc>(terms: &[A], tree: ReductionTree, block_size: usize) -> A {
    match tree {
        ReductionTree::Sequential => sum_sequential(terms),
        ReductionTree::Pairwise => sum_pairwise(terms),
        ReductionTree::Blocked => sum_blocked(terms, block_size),
    }
}

fn sum_values<A: Acc>(values: &[f32], rotation: usize, profile: &BackendProfile) -> A {
    let n = values.len();
    let terms: Vec<A> = (0..n)
        .map(|k| A::from_f32(values[(k + rotation) % n]))
        .collect();
    sum_tree(&terms, profile.tree, profile.block_size)
}

/// Sum of `values` under the profile's accumulation tree, rounded per the
/// profile's accumulator, for the unbatched lane.
pub fn reduce_sum(values: &[f32], profile: &BackendProfile) -> Result<f32, NumericsError> {
    reduce_sum_lane(values, profile, Lane::SOLO)
}

/// As [`reduce_sum`] at an explicit batch lane.
pub fn reduce_sum_lane(
    values: &[f32],
    profile: &BackendProfile,
    lane: Lane,
) -> Result<f32, NumericsError> {
    profile.validate()?;
    let rotation = lane.rotation(profile.batch_tiling, values.len());
    let total = match profile.accumulator {
        Accumulator::F32 => sum_values::<f32>(values, rotation, profile),
        Accumulator::F64 => sum_values::<f64>(values, rotation, profile).to_f32(),
    };
    if total.is_finite() {
        Ok(total)
    } else {
        Err(NumericsError::NonFinite {
            kernel: "reduce_sum",
        })
    }
}

/// Sequential fused chain: seeded with the first (plain) product, every
/// later term folded in with a single rounding.
fn dot_fma_chain(a: &[f32], b: &[f32], idx: impl Iterator<Item = usize>) -> f32 {
    let mut acc = None;
    for i in idx {
        acc = Some(match acc {
            None => a[i] * b[i],
            Some(run) => a[i].mul_add(b[i], run),
        });
    }
    acc.unwrap_or(0.0)
}

fn dot_fma_f32(a: &[f32], b: &[f32], rotation: usize, profile: &BackendProfile) -> f32 {
    let n = a.len();
    let at = |k: usize| (k + rotation) % n;
    match profile.tree {
        ReductionTree::Sequential => dot_fma_chain(a, b, (0..n).map(at)),
        ReductionTree::Blocked => {
            if n <= profile.block_size {
                return dot_fma_chain(a, b, (0..n).map(at));
            }
            let partials: Vec<f32> = (0..n)
                .step_by(profile.block_size)
                .map(|start| {
                    let end = (start + profile.block_size).min(n);
                    dot_fma_chain(a, b, (start..end).map(at))
                })
                .collect();
            sum_sequential(&partials)
        }
        ReductionTree::Pairwise => {
            let mut leaves = Vec::with_capacity(n.div_ceil(2));
            let mut k = 0;
            while k + 1 < n {
                let (i, j) = (at(k), at(k + 1));
                leaves.push(a[j].mul_add(b[j], a[i] * b[i]));
                k += 2;
            }
            if k < n {
                let i = at(k);
                leaves.push(a[i] * b[i]);
            }
            sum_pairwise(&leaves)
        }
    }
}

fn dot_unchecked(a: &[f32], b: &[f32], profile: &BackendProfile, lane: Lane) -> f32 {
    let n = a.len();
    let rotation = lane.rotation(profile.batch_tiling, n);
    match profile.accumulator {
        Accumulator::F32 if profile.fma => dot_fma_f32(a, b, rotation, profile),
        Accumulator::F32 => {
            let terms: Vec<f32> = (0..n)
                .map(|k| {
                    let i = (k + rotation) % n;
                    f32::prod(a[i], b[i])
                })
                .collect();
            sum_tree(&terms, profile.tree, profile.block_size)
        }
        Accumulator::F64 => {
            let terms: Vec<f64> = (0..n)
                .map(|k| {
                    let i = (k + rotation) % n;
                    f64::prod(a[i], b[i])
                })
                .collect();
            sum_tree(&terms, profile.tree, profile.block_size).to_f32()
        }
    }
}

/// Inner product of two equal-length slices under the profile's order.
pub fn dot(a: &[f32], b: &[f32], profile: &BackendProfile) -> Result<f32, NumericsError> {
    dot_lane(a, b, profile, Lane::SOLO)
}

pub fn dot_lane(
    a: &[f32],
    b: &[f32],
    profile: &BackendProfile,
    lane: Lane,
) -> Result<f32, NumericsError> {
    profile.validate()?;
    if a.len() != b.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "dot",
            detail: format!("lengths {} vs {}", a.len(), b.len()),
        });
    }
    let value = dot_unchecked(a, b, profile, lane);
    if value.is_finite() {
        Ok(value)
    } else {
        Err(NumericsError::NonFinite { kernel: "dot" })
    }
}

/// `a[m,k] x b[k,n]`; every output element is the profile-ordered dot of a
/// row of `a` with a column of `b`.
pub fn gemm(a: &Tensor, b: &Tensor, profile: &BackendProfile) -> Result<Tensor, NumericsError> {
    gemm_lane(a, b, profile, Lane::SOLO)
}

pub fn gemm_lane(
    a: &Tensor,
    b: &Tensor,
    profile: &BackendProfile,
    lane: Lane,
) -> Result<Tensor, NumericsError> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(NumericsError::ShapeMismatch {
            op: "gemm",
            detail: format!("{:?} x {:?}", a.shape(), b.shape()),
        });
    }
    let (k, n) = (b.shape()[0], b.shape()[1]);
    let mut bt = vec![0.0f32; n * k];
    for r in 0..k {
        for c in 0..n {
            bt[c * k + r] = b.at2(r, c);
        }
    }
    let bt = Tensor::new(vec![n, k], bt).expect("transpose shape");
    gemm_bt_lane(a, &bt, profile, lane)
}

/// GEMM against a pre-transposed right operand (`bt[n,k]` holds the columns
/// of `b` as rows). Layout-only variant of [`gemm`]: identical bits.
pub fn gemm_bt_lane(
    a: &Tensor,
    bt: &Tensor,
    profile: &BackendProfile,
    lane: Lane,
) -> Result<Tensor, NumericsError> {
    profile.validate()?;
    if a.shape().len() != 2 || bt.shape().len() != 2 || a.shape()[1] != bt.shape()[1] {
        return Err(NumericsError::ShapeMismatch {
            op: "gemm",
            detail: format!("{:?} x {:?}^T", a.shape(), bt.shape()),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = bt.shape()[0];
    let row_of = |i: usize| -> Vec<f32> {
        let ar = a.row(i);
        (0..n).map(|j| dot_unchecked(ar, bt.row(j), profile, lane)).collect()
    };
    // Row partitioning is fixed, so thread count cannot change any bit.
    let rows: Vec<Vec<f32>> = if m * n * k >= 1 << 16 {
        crate::parallel::map_indexed(m, row_of)
    } else {
        (0..m).map(row_of).collect()
    };
    let mut out = Vec::with_capacity(m * n);
    for row in rows {
        out.extend_from_slice(&row);
    }
    let out = Tensor::new(vec![m, n], out).expect("gemm shape");
    out.ensure_finite("gemm")?;
    Ok(out)
}

/// Valid-range 2-D convolution computed through [`gemm`] over im2col
/// patches, so the profile governs the reduction order.
///
/// `input` is `[cin, h, w]`, `kernel` is `[cout, cin, kh, kw]`; zero padding
/// contributes exact zero terms that still occupy order slots.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    profile: &BackendProfile,
    lane: Lane,
) -> Result<Tensor, NumericsError> {
    let (ish, ksh) = (input.shape(), kernel.shape());
    if ish.len() != 3 || ksh.len() != 4 || ish[0] != ksh[1] || stride == 0 {
        return Err(NumericsError::ShapeMismatch {
            op: "conv2d",
            detail: format!("input {:?}, kernel {:?}, stride {}", ish, ksh, stride),
        });
    }
    let (cin, h, w) = (ish[0], ish[1], ish[2]);
    let (cout, kh, kw) = (ksh[0], ksh[2], ksh[3]);
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(NumericsError::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel {}x{} larger than padded input", kh, kw),
        });
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let patch_len = cin * kh * kw;

    // Patches laid out as rows, i.e. the transposed im2col matrix.
    let mut patches = vec![0.0f32; oh * ow * patch_len];
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * patch_len;
            let mut p = 0;
            for ci in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            patches[base + p] =
                                input.data()[(ci * h + iy as usize) * w + ix as usize];
                        }
                        p += 1;
                    }
                }
            }
        }
    }
    let patches = Tensor::new(vec![oh * ow, patch_len], patches).expect("patch shape");
    let kmat = Tensor::new(vec![cout, patch_len], kernel.data().to_vec()).expect("kernel shape");
    let out = gemm_bt_lane(&kmat, &patches, profile, lane)?;
    Tensor::new(vec![cout, oh, ow], out.into_data())
}

/// Squared Frobenius norm of the constant matrix `fill * 1[n,n]`, computed
/// as `trace(M^T M)` under each profile. With n=100 and fill=0.01 the exact
/// value is 1, and deviating profiles disagree in the low-order bits.
pub fn frobenius_demo(
    n: usize,
    fill: f32,
    profiles: &[BackendProfile],
) -> Result<Vec<f32>, NumericsError> {
    if n == 0 {
        return Err(NumericsError::InvalidArgument {
            op: "frobenius_demo",
            detail: "n must be >= 1".into(),
        });
    }
    let m = Tensor::new(vec![n, n], vec![fill; n * n]).expect("fill shape");
    profiles
        .iter()
        .map(|p| {
            let prod = gemm(&m, &m, p)?;
            let diag: Vec<f32> = (0..n).map(|i| prod.at2(i, i)).collect();
            reduce_sum(&diag, p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(tree: ReductionTree, block: usize, acc: Accumulator, fma: bool) -> BackendProfile {
        BackendProfile::new("t", block, tree, fma, acc, BatchTiling::PerRow).unwrap()
    }

    #[test]
    fn cancellation_depends_on_order() {
        // (1e8 + 1.0) + -1e8 loses the 1.0; (1e8 + -1e8) + 1.0 keeps it.
        let seq = p(ReductionTree::Sequential, 1, Accumulator::F32, false);
        assert_eq!(reduce_sum(&[1e8, 1.0, -1e8], &seq).unwrap(), 0.0);
        let blk = p(ReductionTree::Blocked, 2, Accumulator::F32, false);
        assert_eq!(reduce_sum(&[1e8, -1e8, 1.0], &blk).unwrap(), 1.0);
    }

    #[test]
    fn powers_of_two_are_exact_under_any_association() {
        for tree in [
            ReductionTree::Sequential,
            ReductionTree::Pairwise,
            ReductionTree::Blocked,
        ] {
            for acc in [Accumulator::F32, Accumulator::F64] {
                let prof = p(tree, 2, acc, false);
                assert_eq!(reduce_sum(&[0.5, 0.25, 0.25], &prof).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn widened_accumulator_rounds_once_on_short_sums() {
        let wide = p(ReductionTree::Sequential, 1, Accumulator::F64, false);
        // 0.1 + 0.2 in f32 sequential is not the exact-rounded sum; in f64 it is.
        let values = [0.1f32, 0.2, 0.3, 0.4];
        let exact: f64 = values.iter().map(|&v| v as f64).sum();
        assert_eq!(reduce_sum(&values, &wide).unwrap(), exact as f32);
    }

    #[test]
    fn blocked_degenerates_to_sequential() {
        let seq = p(ReductionTree::Sequential, 1, Accumulator::F32, false);
        let blk = p(ReductionTree::Blocked, 64, Accumulator::F32, false);
        let values: Vec<f32> = (0..17).map(|i| (i as f32).sin()).collect();
        assert_eq!(
            reduce_sum(&values, &seq).unwrap().to_bits(),
            reduce_sum(&values, &blk).unwrap().to_bits()
        );
    }

    #[test]
    fn empty_and_singleton_sums() {
        let seq = p(ReductionTree::Sequential, 1, Accumulator::F32, false);
        assert_eq!(reduce_sum(&[], &seq).unwrap(), 0.0);
        let x = -0.0f32;
        assert_eq!(reduce_sum(&[x], &seq).unwrap().to_bits(), x.to_bits());
    }

    #[test]
    fn overflow_is_reported() {
        let seq = p(ReductionTree::Sequential, 1, Accumulator::F32, false);
        let err = reduce_sum(&[f32::MAX, f32::MAX], &seq).unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { kernel: "reduce_sum" }));
    }

    #[test]
    fn identity_gemm_is_bit_exact() {
        let n = 6;
        let mut eye = vec![0.0f32; n * n];
        for i in 0..n {
            eye[i * n + i] = 1.0;
        }
        let eye = Tensor::new(vec![n, n], eye).unwrap();
        let a = Tensor::new(
            vec![n, n],
            (0..n * n).map(|i| (i as f32 * 0.37).sin()).collect(),
        )
        .unwrap();
        for tree in [
            ReductionTree::Sequential,
            ReductionTree::Pairwise,
            ReductionTree::Blocked,
        ] {
            let prof = p(tree, 3, Accumulator::F32, false);
            let out = gemm(&eye, &a, &prof).unwrap();
            assert!(out.bit_eq(&a));
        }
    }

    #[test]
    fn integer_gemm_is_exact_under_every_profile() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let expected = [19.0, 22.0, 43.0, 50.0];
        for prof in builtin_profiles() {
            let out = gemm(&a, &b, &prof).unwrap();
            assert_eq!(out.data(), &expected);
        }
    }

    #[test]
    fn gemm_shape_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 2]);
        let seq = p(ReductionTree::Sequential, 1, Accumulator::F32, false);
        assert!(matches!(
            gemm(&a, &b, &seq),
            Err(NumericsError::ShapeMismatch { op: "gemm", .. })
        ));
    }

    #[test]
    fn conv_identity_kernel() {
        let input = Tensor::new(vec![1, 4, 4], (0..16).map(|i| i as f32 * 0.1).collect()).unwrap();
        let kernel = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let seq = p(ReductionTree::Sequential, 1, Accumulator::F32, false);
        let out = conv2d(&input, &kernel, 1, 0, &seq, Lane::SOLO).unwrap();
        assert!(out.bit_eq(&input));
    }

    #[test]
    fn conv_zero_kernel_gives_zero() {
        let input = Tensor::new(vec![1, 5, 5], vec![0.3; 25]).unwrap();
        let kernel = Tensor::zeros(vec![2, 1, 3, 3]);
        let blk = p(ReductionTree::Blocked, 4, Accumulator::F32, false);
        let out = conv2d(&input, &kernel, 1, 1, &blk, Lane::SOLO).unwrap();
        assert_eq!(out.shape(), &[2, 5, 5]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_differs_across_block_sizes_on_constant_input() {
        let input = Tensor::new(vec![1, 8, 8], vec![0.01; 64]).unwrap();
        let kernel = Tensor::new(vec![1, 1, 3, 3], vec![1.0 / 3.0; 9]).unwrap();
        let a = p(ReductionTree::Sequential, 1, Accumulator::F32, false);
        let b = p(ReductionTree::Blocked, 2, Accumulator::F32, false);
        let oa = conv2d(&input, &kernel, 1, 0, &a, Lane::SOLO).unwrap();
        let ob = conv2d(&input, &kernel, 1, 0, &b, Lane::SOLO).unwrap();
        assert!(!oa.bit_eq(&ob));
    }

    #[test]
    fn frobenius_demo_profiles_disagree_near_one() {
        let profiles: Vec<BackendProfile> = builtin_profiles()
            .into_iter()
            .filter(|p| p.accumulator == Accumulator::F32)
            .collect();
        let values = frobenius_demo(100, 0.01, &profiles).unwrap();
        let distinct: std::collections::BTreeSet<u32> =
            values.iter().map(|v| v.to_bits()).collect();
        assert!(distinct.len() >= 2, "expected deviating profiles: {values:?}");
        for v in &values {
            assert!((v - 1.0).abs() < 1.2e-3);
        }
    }

    #[test]
    fn frobenius_demo_n1_is_profile_independent() {
        let profiles = builtin_profiles();
        let values = frobenius_demo(1, 0.3, &profiles).unwrap();
        for v in &values {
            assert_eq!(v.to_bits(), (0.3f32 * 0.3f32).to_bits());
        }
    }

    #[test]
    fn interleaved_lane_rotates_the_order() {
        let prof = BackendProfile::new(
            "b",
            4,
            ReductionTree::Blocked,
            false,
            Accumulator::F32,
            BatchTiling::Interleaved,
        )
        .unwrap();
        let values: Vec<f32> = (0..13).map(|i| 1.0 / (i as f32 + 1.0)).collect();
        // Batch of one is the unrotated order.
        let solo = reduce_sum_lane(&values, &prof, Lane::SOLO).unwrap();
        let per_row = BackendProfile::new(
            "p",
            4,
            ReductionTree::Blocked,
            false,
            Accumulator::F32,
            BatchTiling::PerRow,
        )
        .unwrap();
        assert_eq!(solo.to_bits(), reduce_sum(&values, &per_row).unwrap().to_bits());
        // A rotated lane equals the per-row sum of the rotated sequence.
        let lane = Lane::new(1, 4);
        let r = (1 + 4 - 1) % values.len();
        let rotated: Vec<f32> = (0..values.len())
            .map(|k| values[(k + r) % values.len()])
            .collect();
        assert_eq!(
            reduce_sum_lane(&values, &prof, lane).unwrap().to_bits(),
            reduce_sum(&rotated, &per_row).unwrap().to_bits()
        );
    }
}
