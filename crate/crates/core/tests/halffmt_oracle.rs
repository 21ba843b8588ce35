//! Bit-exact cross-check of the f16/bf16 software rounding against the
//! exact dyadic reference.

use driftlab::defense::{bf16_bits_to_f32, f16_bits_to_f32, f32_to_bf16_bits, f32_to_f16_bits};
use driftlab_oracle::exact::{round_f32_to_format, BF16, F16};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn check_f16(x: f32) {
    let ours = f16_bits_to_f32(f32_to_f16_bits(x));
    let reference = round_f32_to_format(x, &F16);
    if reference.overflow {
        assert!(
            ours.is_infinite() && (ours > 0.0) == (reference.value > 0.0),
            "f16({x}) expected overflow, got {ours}"
        );
    } else {
        assert_eq!(
            ours.to_bits(),
            (reference.value as f32).to_bits(),
            "f16({x}): ours {ours}, reference {}",
            reference.value
        );
    }
}

fn check_bf16(x: f32) {
    let ours = bf16_bits_to_f32(f32_to_bf16_bits(x));
    let reference = round_f32_to_format(x, &BF16);
    if reference.overflow {
        assert!(ours.is_infinite() && (ours > 0.0) == (reference.value > 0.0));
    } else {
        assert_eq!(
            ours.to_bits(),
            (reference.value as f32).to_bits(),
            "bf16({x}): ours {ours}, reference {}",
            reference.value
        );
    }
}

#[test]
fn f16_rounding_matches_oracle_across_magnitudes() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    // Cover normals, the subnormal band, ties, and the overflow edge.
    for _ in 0..20_000 {
        let exp = rng.random_range(-30..20);
        let mant = rng.random::<f32>() + 1.0;
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        check_f16(sign * mant * 2f32.powi(exp));
    }
    for special in [
        0.0f32,
        -0.0,
        65504.0,
        65519.9,
        65520.0,
        65536.0,
        2f32.powi(-24),
        2f32.powi(-25),
        1.5 * 2f32.powi(-25),
        2f32.powi(-26),
        1.0 + 2f32.powi(-11),
        1.0 + 2f32.powi(-10),
    ] {
        check_f16(special);
        check_f16(-special);
    }
}

#[test]
fn bf16_rounding_matches_oracle_across_magnitudes() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..20_000 {
        let exp = rng.random_range(-40..39);
        let mant = rng.random::<f32>() + 1.0;
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        check_bf16(sign * mant * 2f32.powi(exp));
    }
    for special in [
        0.0f32,
        1.0,
        1.0 + 2f32.powi(-8),
        1.0 + 2f32.powi(-9),
        3.3895314e38,
        3.3961775e38,
        f32::MAX,
        2f32.powi(-126),
        2f32.powi(-130),
    ] {
        check_bf16(special);
        check_bf16(-special);
    }
}

#[test]
fn every_f16_value_roundtrips_through_f32() {
    // All 63488 finite f16 bit patterns: decode then re-encode must be
    // the identity (the decoded f32 is exactly representable).
    for bits in 0u16..=0xFFFF {
        if (bits >> 10) & 0x1F == 0x1F {
            continue; // skip inf/nan encodings
        }
        let x = f16_bits_to_f32(bits);
        let back = f32_to_f16_bits(x);
        assert_eq!(back, bits, "f16 bits {bits:#06x} -> {x} -> {back:#06x}");
    }
}
