//! Software emulation of f16 and bf16 rounding (round-to-nearest-even,
//! subnormals kept, overflow to infinity). Only the f32 -> narrow -> f32
//! round-trip is needed: downcast defenses store the rounded values back in
//! f32 tensors.

/// Round an f32 to bfloat16 (8-bit significand, f32 exponent range).
pub fn f32_to_bf16_bits(x: f32) -> u16 {
    let bits = x.to_bits();
    let sign = (bits >> 16) as u16 & 0x8000;
    let mag = bits & 0x7FFF_FFFF;
    if mag >= 0x7F80_0000 {
        // Inf stays Inf; NaN keeps a set mantissa bit.
        let mant = if mag > 0x7F80_0000 { 0x0040 } else { 0 };
        return sign | 0x7F80 | mant;
    }
    // Round-to-nearest-even on the low 16 bits, clamping the carry into the
    // exponent when it overflows past the largest finite bf16.
    let rounded = mag + 0x7FFF + ((mag >> 16) & 1);
    let upper = (rounded >> 16) as u16;
    sign | upper.min(0x7F80)
}

pub fn bf16_bits_to_f32(bits: u16) -> f32 {
    f32::from_bits((bits as u32) << 16)
}

/// Round an f32 to IEEE binary16.
pub fn f32_to_f16_bits(x: f32) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let mag = bits & 0x7FFF_FFFF;
    if mag >= 0x7F80_0000 {
        let mant = if mag > 0x7F80_0000 { 0x0200 } else { 0 };
        return sign | 0x7C00 | mant;
    }
    let exp = (mag >> 23) as i32 - 127; // unbiased
    if exp >= 16 {
        return sign | 0x7C00; // infinity (65520..65536 carries up below)
    }
    if exp >= -14 {
        // Normal f16: 13 mantissa bits dropped with RNE.
        let mant = mag & 0x007F_FFFF;
        let keep = mant >> 13;
        let rem = mant & 0x1FFF;
        let half = 0x1000;
        let mut h = (((exp + 15) as u32) << 10) | keep;
        if rem > half || (rem == half && (keep & 1) == 1) {
            h += 1; // may carry into the exponent and up to infinity
        }
        if h >= 0x7C00 {
            return sign | 0x7C00;
        }
        return sign | h as u16;
    }
    if exp < -25 {
        return sign; // underflows to zero even after rounding
    }
    // Subnormal f16: value = keep * 2^-24 after rounding.
    let mant = (mag & 0x007F_FFFF) | 0x0080_0000;
    let shift = (-exp - 1) as u32; // 14 at exp=-15 .. 24 at exp=-25
    let keep = mant >> shift;
    let rem = mant & ((1 << shift) - 1);
    let half = 1u32 << (shift - 1);
    let mut h = keep;
    if rem > half || (rem == half && (keep & 1) == 1) {
        h += 1;
    }
    sign | h as u16
}

pub fn f16_bits_to_f32(bits: u16) -> f32 {
    let sign = ((bits & 0x8000) as u32) << 16;
    let exp = ((bits >> 10) & 0x1F) as u32;
    let mant = (bits & 0x03FF) as u32;
    let out = if exp == 0 {
        if mant == 0 {
            sign
        } else {
            // Subnormal: value = mant * 2^-24, renormalized into f32.
            let len = 32 - mant.leading_zeros(); // 1..=10
            let exp32 = 102 + len; // biased: 127 + (len - 25)
            let frac = (mant & !(1u32 << (len - 1))) << (24 - len);
            sign | (exp32 << 23) | frac
        }
    } else if exp == 0x1F {
        sign | 0x7F80_0000 | (mant << 13)
    } else {
        sign | ((exp + 127 - 15) << 23) | (mant << 13)
    };
    f32::from_bits(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bf16_roundtrip_of_representable_values() {
        for x in [1.0f32, -2.5, 0.0, 0.15625, 3.3895314e38] {
            let bits = f32_to_bf16_bits(x);
            assert_eq!(bf16_bits_to_f32(bits), x, "{x}");
        }
    }

    #[test]
    fn f16_reference_points() {
        assert_eq!(f16_bits_to_f32(f32_to_f16_bits(1.0)), 1.0);
        assert_eq!(f16_bits_to_f32(f32_to_f16_bits(65504.0)), 65504.0);
        assert!(f16_bits_to_f32(f32_to_f16_bits(65520.0)).is_infinite());
        assert_eq!(f16_bits_to_f32(f32_to_f16_bits(65519.99)), 65504.0);
        // Smallest f16 subnormal and the tie below it.
        assert_eq!(f16_bits_to_f32(f32_to_f16_bits(6.0e-8)), 2f32.powi(-24));
        assert_eq!(f16_bits_to_f32(f32_to_f16_bits(2f32.powi(-25))), 0.0);
        assert_eq!(f16_bits_to_f32(f32_to_f16_bits(-1.5)), -1.5);
    }

    #[test]
    fn bf16_overflow_goes_to_infinity() {
        let over = f32::from_bits(0x7F7F_FFFF); // above bf16 max midpoint
        assert!(bf16_bits_to_f32(f32_to_bf16_bits(over)).is_infinite());
    }
}
