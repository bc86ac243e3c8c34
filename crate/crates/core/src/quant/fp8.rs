//! OCP e4m3 (`fn` variant): bias 7, no infinities, `S.1111.111` is NaN,
//! largest finite magnitude 448, smallest subnormal 2⁻⁹.

pub const FP8_MAX: f64 = 448.0;
const MIN_NORMAL: f64 = 1.0 / 64.0;
const SUBNORMAL_QUANTUM: f64 = 1.0 / 512.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fp8Value(pub u8);

impl Fp8Value {
    pub fn encode(x: f64) -> Self {
        fp8_e4m3_encode(x)
    }

    pub fn decode(self) -> f64 {
        fp8_e4m3_decode(self)
    }

    pub fn is_nan(self) -> bool {
        self.0 & 0x7f == 0x7f
    }
}

/// Nearest e4m3 code, ties to even mantissa, saturating at ±448.
pub fn fp8_e4m3_encode(x: f64) -> Fp8Value {
    let sign: u8 = if x.is_sign_negative() { 0x80 } else { 0 };
    if x.is_nan() {
        return Fp8Value(sign | 0x7f);
    }
    let a = x.abs();
    if a >= FP8_MAX {
        return Fp8Value(sign | 0x7e);
    }
    if a < MIN_NORMAL {
        // subnormal codes 0..=7; a result of 8 is the smallest normal code
        let m = (a / SUBNORMAL_QUANTUM).round_ties_even() as u8;
        return Fp8Value(sign | m);
    }
    let mut e = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    let quantum = 2f64.powi(e - 3);
    let mut m = (a / quantum).round_ties_even() as u32;
    if m == 16 {
        e += 1;
        m = 8;
    }
    Fp8Value(sign | (((e + 7) as u8) << 3) | (m - 8) as u8)
}

pub fn fp8_e4m3_decode(v: Fp8Value) -> f64 {
    let b = v.0;
    let sign = if b & 0x80 != 0 { -1.0 } else { 1.0 };
    let e = i32::from((b >> 3) & 0x0f);
    let m = f64::from(b & 0x07);
    if e == 15 && b & 0x07 == 7 {
        return f64::NAN.copysign(sign);
    }
    if e == 0 {
        sign * m * SUBNORMAL_QUANTUM
    } else {
        sign * (1.0 + m / 8.0) * 2f64.powi(e - 7)
    }
}
