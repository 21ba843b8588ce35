//! Exact dyadic-rational arithmetic with explicit round-to-nearest-even.
//!
//! Every finite binary float is `mant * 2^exp` for integer `mant`, so sums
//! and products of floats are closed over dyadic rationals and can be
//! carried exactly in big integers. Rounding back to a binary format is then
//! an explicit, inspectable operation instead of whatever the host FPU does.
//! This module is the reference side of the crate's bit-exactness tests: it
//! re-derives reduction results step by step over exact values and never
//! calls into the production kernels.

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{One, Signed, ToPrimitive, Zero};

use driftlab::numerics::{Accumulator, BackendProfile, ReductionTree};

/// A binary floating-point format: significand width (including the hidden
/// bit) and the exponent range of normal values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinaryFormat {
    pub sig_bits: u32,
    pub min_exp: i64,
    pub max_exp: i64,
}

pub const F32: BinaryFormat = BinaryFormat {
    sig_bits: 24,
    min_exp: -126,
    max_exp: 127,
};
pub const F64: BinaryFormat = BinaryFormat {
    sig_bits: 53,
    min_exp: -1022,
    max_exp: 1023,
};
pub const F16: BinaryFormat = BinaryFormat {
    sig_bits: 11,
    min_exp: -14,
    max_exp: 15,
};
pub const BF16: BinaryFormat = BinaryFormat {
    sig_bits: 8,
    min_exp: -126,
    max_exp: 127,
};

/// Exact dyadic rational `mant * 2^exp`, kept normalized (mant odd or zero).
#[derive(Debug, Clone)]
pub struct Dyadic {
    mant: BigInt,
    exp: i64,
}

/// Result of rounding a [`Dyadic`] to a [`BinaryFormat`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FormatRounded {
    /// The rounded value, exactly representable in f64 (every f16/bf16/f32
    /// value is). Infinite when `overflow` is set.
    pub value: f64,
    pub overflow: bool,
}

fn pow2_f64(q: i64) -> f64 {
    if q > 1023 {
        f64::INFINITY
    } else if q >= -1022 {
        f64::from_bits(((q + 1023) as u64) << 52)
    } else if q >= -1074 {
        f64::from_bits(1u64 << (q + 1074))
    } else {
        0.0
    }
}

impl Dyadic {
    pub fn zero() -> Self {
        Self {
            mant: BigInt::zero(),
            exp: 0,
        }
    }

    fn normalized(mut mant: BigInt, mut exp: i64) -> Self {
        if mant.is_zero() {
            return Self::zero();
        }
        if let Some(tz) = mant.magnitude().trailing_zeros() {
            if tz > 0 {
                mant >>= tz;
                exp += tz as i64;
            }
        }
        Self { mant, exp }
    }

    pub fn from_f32(x: f32) -> Self {
        assert!(x.is_finite(), "dyadic oracle only represents finite values");
        let bits = x.to_bits();
        let sign = if bits >> 31 == 1 { -1i64 } else { 1 };
        let biased = ((bits >> 23) & 0xFF) as i64;
        let frac = (bits & 0x7F_FFFF) as i64;
        let (mant, exp) = if biased == 0 {
            (frac, -126 - 23)
        } else {
            (frac | 0x80_0000, biased - 127 - 23)
        };
        Self::normalized(BigInt::from(sign * mant), exp)
    }

    pub fn from_f64(x: f64) -> Self {
        assert!(x.is_finite(), "dyadic oracle only represents finite values");
        let bits = x.to_bits();
        let sign = if bits >> 63 == 1 { -1i128 } else { 1 };
        let biased = ((bits >> 52) & 0x7FF) as i64;
        let frac = (bits & 0xF_FFFF_FFFF_FFFF) as i128;
        let (mant, exp) = if biased == 0 {
            (frac, -1022 - 52)
        } else {
            (frac | 0x10_0000_0000_0000, biased - 1023 - 52)
        };
        Self::normalized(BigInt::from(sign * mant), exp)
    }

    pub fn is_zero(&self) -> bool {
        self.mant.is_zero()
    }

    pub fn neg(&self) -> Self {
        Self {
            mant: -&self.mant,
            exp: self.exp,
        }
    }

    pub fn abs(&self) -> Self {
        Self {
            mant: self.mant.abs(),
            exp: self.exp,
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        if self.is_zero() {
            return other.clone();
        }
        if other.is_zero() {
            return self.clone();
        }
        let exp = self.exp.min(other.exp);
        let a = &self.mant << (self.exp - exp) as u64;
        let b = &other.mant << (other.exp - exp) as u64;
        Self::normalized(a + b, exp)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.neg())
    }

    pub fn mul(&self, other: &Self) -> Self {
        Self::normalized(&self.mant * &other.mant, self.exp + other.exp)
    }

    /// Round to `fmt` under round-to-nearest-even, subnormals included.
    pub fn round(&self, fmt: &BinaryFormat) -> FormatRounded {
        if self.is_zero() {
            return FormatRounded {
                value: 0.0,
                overflow: false,
            };
        }
        let negative = self.mant.sign() == Sign::Minus;
        let m = self.mant.magnitude();
        let bits = m.bits() as i64;
        // Exact binary exponent: |value| is in [2^e2, 2^(e2+1)).
        let e2 = self.exp + bits - 1;
        let sig = fmt.sig_bits as i64;
        // Quantum: normal spacing at e2, floored at the subnormal spacing.
        let q = (e2 - (sig - 1)).max(fmt.min_exp - (sig - 1));
        let shift = q - self.exp;
        let keep: BigUint = if shift <= 0 {
            m << (-shift) as u64
        } else {
            let shift = shift as u64;
            let truncated: BigUint = m >> shift;
            let rem: BigUint = m & ((BigUint::one() << shift) - BigUint::one());
            let half: BigUint = BigUint::one() << (shift - 1);
            match rem.cmp(&half) {
                std::cmp::Ordering::Greater => truncated + BigUint::one(),
                std::cmp::Ordering::Equal => {
                    if (&truncated & BigUint::one()) == BigUint::one() {
                        truncated + BigUint::one()
                    } else {
                        truncated
                    }
                }
                std::cmp::Ordering::Less => truncated,
            }
        };
        if keep.is_zero() {
            return FormatRounded {
                value: if negative { -0.0 } else { 0.0 },
                overflow: false,
            };
        }
        let rounded_exp = q + keep.bits() as i64 - 1;
        if rounded_exp > fmt.max_exp {
            return FormatRounded {
                value: if negative {
                    f64::NEG_INFINITY
                } else {
                    f64::INFINITY
                },
                overflow: true,
            };
        }
        let kf = keep.to_u64().expect("rounded significand fits in 64 bits") as f64;
        let v = kf * pow2_f64(q);
        FormatRounded {
            value: if negative { -v } else { v },
            overflow: false,
        }
    }

    pub fn to_f32_rne(&self) -> f32 {
        self.round(&F32).value as f32
    }

    pub fn to_f64_rne(&self) -> f64 {
        self.round(&F64).value
    }
}

impl PartialEq for Dyadic {
    fn eq(&self, other: &Self) -> bool {
        // Both normalized, so structural equality is value equality.
        self.exp == other.exp && self.mant == other.mant
    }
}

impl Eq for Dyadic {}

impl PartialOrd for Dyadic {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.sub(other).mant.sign().cmp(&Sign::NoSign))
    }
}

/// Fully exact sum (no rounding anywhere).
pub fn exact_sum(values: &[f32]) -> Dyadic {
    values
        .iter()
        .fold(Dyadic::zero(), |acc, &v| acc.add(&Dyadic::from_f32(v)))
}

/// Fully exact inner product (no rounding anywhere).
pub fn exact_dot_value(a: &[f32], b: &[f32]) -> Dyadic {
    a.iter().zip(b).fold(Dyadic::zero(), |acc, (&x, &y)| {
        acc.add(&Dyadic::from_f32(x).mul(&Dyadic::from_f32(y)))
    })
}

/// Fully exact matrix product of `a[m,k]` and `b[k,n]`, row-major.
pub fn exact_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<Dyadic> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = Dyadic::zero();
            for t in 0..k {
                acc = acc.add(&Dyadic::from_f32(a[i * k + t]).mul(&Dyadic::from_f32(b[t * n + j])));
            }
            out.push(acc);
        }
    }
    out
}

fn step_round(d: &Dyadic, acc: Accumulator) -> Dyadic {
    let fmt = match acc {
        Accumulator::F32 => &F32,
        Accumulator::F64 => &F64,
    };
    let r = d.round(fmt);
    assert!(!r.overflow, "oracle accumulator overflow");
    Dyadic::from_f64(r.value)
}

fn seq_sum(terms: &[Dyadic], acc: Accumulator) -> Dyadic {
    let mut iter = terms.iter();
    match iter.next() {
        None => Dyadic::zero(),
        Some(first) => iter.fold(first.clone(), |run, t| step_round(&run.add(t), acc)),
    }
}

fn pairwise_sum(terms: &[Dyadic], acc: Accumulator) -> Dyadic {
    match terms.len() {
        0 => Dyadic::zero(),
        1 => terms[0].clone(),
        2 => step_round(&terms[0].add(&terms[1]), acc),
        n => {
            let mid = n.div_ceil(2);
            step_round(
                &pairwise_sum(&terms[..mid], acc).add(&pairwise_sum(&terms[mid..], acc)),
                acc,
            )
        }
    }
}

fn blocked_sum(terms: &[Dyadic], block: usize, acc: Accumulator) -> Dyadic {
    if terms.len() <= block {
        return seq_sum(terms, acc);
    }
    let partials: Vec<Dyadic> = terms.chunks(block).map(|c| seq_sum(c, acc)).collect();
    seq_sum(&partials, acc)
}

fn tree_sum(terms: &[Dyadic], profile: &BackendProfile) -> Dyadic {
    match profile.tree {
        ReductionTree::Sequential => seq_sum(terms, profile.accumulator),
        ReductionTree::Pairwise => pairwise_sum(terms, profile.accumulator),
        ReductionTree::Blocked => blocked_sum(terms, profile.block_size, profile.accumulator),
    }
}

/// Reference for `reduce_sum` at the unbatched lane: the profile's tree,
/// evaluated over exact values with one explicit rounding per add.
pub fn exact_reduce_sum(values: &[f32], profile: &BackendProfile) -> f32 {
    let terms: Vec<Dyadic> = values.iter().map(|&v| Dyadic::from_f32(v)).collect();
    tree_sum(&terms, profile).to_f32_rne()
}

/// Reference for `dot` at the unbatched lane, including the fma contract:
/// sequential chains and block interiors fuse (one rounding per term), a
/// pairwise tree fuses at the leaf pairing step, and the f64 accumulator
/// sees exact products regardless of the flag.
pub fn exact_dot(a: &[f32], b: &[f32], profile: &BackendProfile) -> f32 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n == 0 {
        return 0.0;
    }
    let acc = profile.accumulator;
    let exact_prod = |i: usize| -> Dyadic { Dyadic::from_f32(a[i]).mul(&Dyadic::from_f32(b[i])) };

    if acc == Accumulator::F32 && profile.fma {
        let chain = |range: std::ops::Range<usize>| -> Dyadic {
            let mut run: Option<Dyadic> = None;
            for i in range {
                run = Some(match run {
                    None => step_round(&exact_prod(i), acc),
                    Some(r) => step_round(&exact_prod(i).add(&r), acc),
                });
            }
            run.unwrap_or_else(Dyadic::zero)
        };
        let total = match profile.tree {
            ReductionTree::Sequential => chain(0..n),
            ReductionTree::Blocked => {
                if n <= profile.block_size {
                    chain(0..n)
                } else {
                    let partials: Vec<Dyadic> = (0..n)
                        .step_by(profile.block_size)
                        .map(|s| chain(s..(s + profile.block_size).min(n)))
                        .collect();
                    seq_sum(&partials, acc)
                }
            }
            ReductionTree::Pairwise => {
                let mut leaves = Vec::with_capacity(n.div_ceil(2));
                let mut k = 0;
                while k + 1 < n {
                    let first = step_round(&exact_prod(k), acc);
                    leaves.push(step_round(&exact_prod(k + 1).add(&first), acc));
                    k += 2;
                }
                if k < n {
                    leaves.push(step_round(&exact_prod(k), acc));
                }
                pairwise_sum(&leaves, acc)
            }
        };
        return total.to_f32_rne();
    }

    let terms: Vec<Dyadic> = (0..n).map(|i| step_round(&exact_prod(i), acc)).collect();
    tree_sum(&terms, profile).to_f32_rne()
}

/// Reference rounding of a single f32 to a narrower format.
pub fn round_f32_to_format(x: f32, fmt: &BinaryFormat) -> FormatRounded {
    Dyadic::from_f32(x).round(fmt)
}
