//! Uniform quantisation `q = round(r / S + Z)` and its inverse `r = S (q - Z)`.
//!
//! Scales are kept as exact rationals. The float fast path is only trusted
//! when `r / S + Z` is clearly away from a rounding tie; anything closer is
//! re-evaluated exactly, so results never depend on platform float quirks.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::bigtensor::IntTensor;
use crate::error::{Error, Result};

/// Rule used to pick the scale factor of a weight tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRule {
    /// `S = 1 / (2^(b-1) - 1)`, independent of the data.
    Unit,
    /// `S = max|W| / (2^(b-1) - 1)`.
    MaxAbs,
    /// `S = (max W - min W) / (2^(b-1) - 1)`.
    Range,
}

impl fmt::Display for ScaleRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleRule::Unit => "unit",
            ScaleRule::MaxAbs => "max_abs",
            ScaleRule::Range => "range",
        })
    }
}

impl FromStr for ScaleRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "unit" => Ok(ScaleRule::Unit),
            "max_abs" => Ok(ScaleRule::MaxAbs),
            "range" => Ok(ScaleRule::Range),
            other => Err(format!(
                "unknown scale rule `{other}` (unit, max_abs, range)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    Symmetric,
    Affine,
}

/// Parameters of one per-tensor quantiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScheme", into = "RawScheme")]
pub struct QuantScheme {
    bits: u32,
    scale: BigRational,
    zero_point: i64,
    mode: QuantMode,
    signed: bool,
    // Cached float views of `scale`; never used where exactness matters.
    scale_f64: f64,
    inv_scale_f64: f64,
}

const MAX_BITS: u32 = 62;

fn check_bits(bits: u32) -> Result<()> {
    if bits < 2 {
        return Err(Error::InvalidBits {
            bits,
            reason: "at least 2 bits are required",
        });
    }
    if bits > MAX_BITS {
        return Err(Error::InvalidBits {
            bits,
            reason: "at most 62 bits are supported",
        });
    }
    Ok(())
}

fn exact(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite float")
}

fn half_range(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

impl QuantScheme {
    pub fn new(
        bits: u32,
        scale: BigRational,
        zero_point: i64,
        mode: QuantMode,
        signed: bool,
    ) -> Result<Self> {
        check_bits(bits)?;
        if !scale.is_positive() {
            return Err(Error::Degenerate(format!(
                "scale must be positive, got {scale}"
            )));
        }
        if mode == QuantMode::Symmetric && zero_point != 0 {
            return Err(Error::Degenerate(
                "symmetric schemes must have a zero point of 0".into(),
            ));
        }
        let scale_f64 = scale.to_f64().unwrap_or(f64::NAN);
        let inv_scale_f64 = scale.recip().to_f64().unwrap_or(f64::NAN);
        let scheme = Self {
            bits,
            scale,
            zero_point,
            mode,
            signed,
            scale_f64,
            inv_scale_f64,
        };
        let (lo, hi) = scheme.range();
        if zero_point < lo || zero_point > hi {
            return Err(Error::Degenerate(format!(
                "zero point {zero_point} outside [{lo}, {hi}]"
            )));
        }
        Ok(scheme)
    }

    /// Symmetric signed scheme with the given scale.
    pub fn symmetric(bits: u32, scale: BigRational) -> Result<Self> {
        Self::new(bits, scale, 0, QuantMode::Symmetric, true)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn scale(&self) -> &BigRational {
        &self.scale
    }

    pub fn scale_f64(&self) -> f64 {
        self.scale_f64
    }

    pub fn zero_point(&self) -> i64 {
        self.zero_point
    }

    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    pub fn is_signed(&self) -> bool {
        self.signed
    }

    /// Inclusive integer range `[lo, hi]` of the quantised values.
    pub fn range(&self) -> (i64, i64) {
        if self.signed {
            (-(1i64 << (self.bits - 1)), (1i64 << (self.bits - 1)) - 1)
        } else {
            (0, (1i64 << self.bits) - 1)
        }
    }

    /// `round(r / S + Z)` before clamping, evaluated exactly.
    fn round_exact(&self, r: f64) -> BigInt {
        let x = exact(r) / &self.scale + BigRational::from_integer(BigInt::from(self.zero_point));
        x.round().to_integer()
    }

    /// Unclamped rounded value, or `None` when it is certainly outside
    /// `[lo - 1, hi + 1]` (only the side matters for clamping then).
    fn round_unclamped(&self, r: f64) -> RoundOutcome {
        let (lo, hi) = self.range();
        let xf = r * self.inv_scale_f64 + self.zero_point as f64;
        if xf > hi as f64 + 2.0 {
            return RoundOutcome::Above;
        }
        if xf < lo as f64 - 2.0 {
            return RoundOutcome::Below;
        }
        let frac = xf - xf.floor();
        let margin = 1e-12 * (1.0 + xf.abs());
        let q = if (frac - 0.5).abs() > margin && frac > margin && frac < 1.0 - margin {
            xf.round() as i64
        } else {
            // Close to a tie or to an integer boundary: decide exactly.
            let q = self.round_exact(r);
            match q.to_i64() {
                Some(q) => q,
                None if q.is_positive() => return RoundOutcome::Above,
                None => return RoundOutcome::Below,
            }
        };
        RoundOutcome::Value(q)
    }

    /// Quantise one real value: round half away from zero, then clamp.
    pub fn quantise_value(&self, r: f64) -> i64 {
        let (lo, hi) = self.range();
        match self.round_unclamped(r) {
            RoundOutcome::Above => hi,
            RoundOutcome::Below => lo,
            RoundOutcome::Value(q) => q.clamp(lo, hi),
        }
    }

    /// Quantised value and whether it fell inside the range before clamping.
    pub fn quantise_with_mask(&self, r: f64) -> (i64, bool) {
        let (lo, hi) = self.range();
        match self.round_unclamped(r) {
            RoundOutcome::Above => (hi, false),
            RoundOutcome::Below => (lo, false),
            RoundOutcome::Value(q) => (q.clamp(lo, hi), (lo..=hi).contains(&q)),
        }
    }

    pub fn dequantise_value(&self, q: i64) -> f64 {
        self.scale_f64 * (q - self.zero_point) as f64
    }
}

enum RoundOutcome {
    Value(i64),
    Above,
    Below,
}

impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}-bit {:?} S={} Z={}",
            self.bits, self.mode, self.scale, self.zero_point
        )
    }
}

#[derive(Serialize, Deserialize)]
struct RawScheme {
    bits: u32,
    scale_num: String,
    scale_den: String,
    zero_point: i64,
    mode: QuantMode,
    signed: bool,
}

impl TryFrom<RawScheme> for QuantScheme {
    type Error = Error;

    fn try_from(raw: RawScheme) -> Result<Self> {
        let parse = |s: &str| {
            BigInt::from_str(s).map_err(|e| Error::Degenerate(format!("bad scale `{s}`: {e}")))
        };
        let den = parse(&raw.scale_den)?;
        if den.is_zero() {
            return Err(Error::Degenerate("scale denominator is zero".into()));
        }
        let scale = BigRational::new(parse(&raw.scale_num)?, den);
        QuantScheme::new(raw.bits, scale, raw.zero_point, raw.mode, raw.signed)
    }
}

impl From<QuantScheme> for RawScheme {
    fn from(s: QuantScheme) -> Self {
        RawScheme {
            bits: s.bits,
            scale_num: s.scale.numer().to_str_radix(10),
            scale_den: s.scale.denom().to_str_radix(10),
            zero_point: s.zero_point,
            mode: s.mode,
            signed: s.signed,
        }
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

/// Derive a per-tensor scheme for `weights` under a scale rule.
///
/// Symmetric schemes are signed with `Z = 0`. Affine schemes are unsigned
/// over `[0, 2^b - 1]` with `Z = round(-min W * (2^b - 1) / (max W - min W))`.
pub fn derive_scheme(
    weights: &[f64],
    bits: u32,
    rule: ScaleRule,
    mode: QuantMode,
) -> Result<QuantScheme> {
    check_bits(bits)?;
    if weights.is_empty() {
        return Err(Error::Degenerate(
            "cannot derive a scheme for an empty tensor".into(),
        ));
    }
    check_finite(weights)?;

    let alpha = weights.iter().copied().fold(f64::INFINITY, f64::min);
    let beta = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let max_abs = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    let denom = BigRational::from_integer(BigInt::from(half_range(bits)));

    let scale = match rule {
        ScaleRule::Unit => BigRational::one() / denom,
        ScaleRule::MaxAbs => {
            if max_abs == 0.0 {
                return Err(Error::Degenerate(
                    "max_abs rule on an all-zero tensor gives a zero scale".into(),
                ));
            }
            exact(max_abs) / denom
        }
        ScaleRule::Range => {
            if beta == alpha {
                return Err(Error::Degenerate(
                    "range rule on a constant tensor gives a zero scale".into(),
                ));
            }
            (exact(beta) - exact(alpha)) / denom
        }
    };

    match mode {
        QuantMode::Symmetric => QuantScheme::new(bits, scale, 0, mode, true),
        QuantMode::Affine => {
            if beta == alpha {
                return Err(Error::Degenerate(
                    "affine zero point is undefined for a constant tensor".into(),
                ));
            }
            let levels = BigRational::from_integer((BigInt::one() << bits) - 1);
            let z = (-exact(alpha) * levels / (exact(beta) - exact(alpha)))
                .round()
                .to_integer();
            let top = (1i64 << bits) - 1;
            let z = z.to_i64().unwrap_or(if z.is_positive() { top } else { 0 });
            QuantScheme::new(bits, scale, z.clamp(0, top), mode, false)
        }
    }
}

/// Quantise a float tensor elementwise under `scheme`.
pub fn quantise_tensor(
    values: &[f64],
    shape: Vec<usize>,
    scheme: &QuantScheme,
) -> Result<IntTensor> {
    check_finite(values)?;
    let data = values
        .iter()
        .map(|&r| BigInt::from(scheme.quantise_value(r)))
        .collect();
    IntTensor::new(shape, data)
}

/// `r = S (q - Z)` elementwise; every element must lie in the scheme range.
pub fn dequantise_tensor(q: &IntTensor, scheme: &QuantScheme) -> Result<Vec<f64>> {
    let (lo, hi) = scheme.range();
    q.data()
        .iter()
        .enumerate()
        .map(|(index, v)| match v.to_i64() {
            Some(v) if (lo..=hi).contains(&v) => Ok(scheme.dequantise_value(v)),
            _ => Err(Error::OutOfRange {
                index,
                value: v.to_string(),
                min: lo,
                max: hi,
            }),
        })
        .collect()
}

/// Quantise-then-dequantise with a scheme derived from the current values.
///
/// Returns the fake-quantised values and the straight-through mask: `true`
/// where the rounded value was inside the range (gradient passes), `false`
/// where clamping was active.
pub fn fake_quant_with_mask(
    weights: &[f64],
    bits: u32,
    rule: ScaleRule,
) -> Result<(Vec<f64>, Vec<bool>, QuantScheme)> {
    let scheme = derive_scheme(weights, bits, rule, QuantMode::Symmetric)?;
    let (values, mask) = fake_quant_fixed(weights, &scheme);
    Ok((values, mask, scheme))
}

/// Fake-quantise under a fixed scheme.
pub fn fake_quant_fixed(weights: &[f64], scheme: &QuantScheme) -> (Vec<f64>, Vec<bool>) {
    weights
        .iter()
        .map(|&w| {
            let (q, inside) = scheme.quantise_with_mask(w);
            (scheme.dequantise_value(q), inside)
        })
        .unzip()
}

pub fn fake_quant(weights: &[f64], bits: u32, rule: ScaleRule) -> Result<Vec<f64>> {
    fake_quant_with_mask(weights, bits, rule).map(|(v, _, _)| v)
}

/// Down-scale 8-bit pixels to `b_in` bits: `q = round(p (2^b_in - 1) / 255)`.
pub fn quantise_inputs(pixels: &[u8], shape: Vec<usize>, b_in: u32) -> Result<IntTensor> {
    let levels = input_levels(b_in)?;
    IntTensor::new(
        shape,
        pixels
            .iter()
            .map(|&p| BigInt::from(quantise_pixel(p, levels)))
            .collect(),
    )
}

/// `2^b_in - 1` for a valid input width.
pub fn input_levels(b_in: u32) -> Result<u32> {
    if !(1..=8).contains(&b_in) {
        return Err(Error::InvalidBits {
            bits: b_in,
            reason: "input width must be between 1 and 8 bits",
        });
    }
    Ok((1u32 << b_in) - 1)
}

/// Integer rounding of `p * levels / 255`, ties away from zero.
pub fn quantise_pixel(p: u8, levels: u32) -> u32 {
    (2 * p as u32 * levels + 255) / 510
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ratio(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn unit_rule_at_eight_bits() {
        let s = derive_scheme(&[0.3, -0.2], 8, ScaleRule::Unit, QuantMode::Symmetric).unwrap();
        assert_eq!(s.scale(), &ratio(1, 127));
        assert!((s.scale_f64() - 0.007874).abs() < 1e-6);
        assert_eq!(s.zero_point(), 0);
    }

    #[test]
    fn max_abs_rule() {
        let s = derive_scheme(
            &[0.7, -0.1, 0.3],
            4,
            ScaleRule::MaxAbs,
            QuantMode::Symmetric,
        )
        .unwrap();
        assert_eq!(s.scale(), &(exact(0.7) / ratio(7, 1)));
        assert!((s.scale_f64() - 0.1).abs() < 1e-15);
        assert!(matches!(
            derive_scheme(&[0.0], 4, ScaleRule::MaxAbs, QuantMode::Symmetric),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            derive_scheme(&[0.5], 1, ScaleRule::Unit, QuantMode::Symmetric),
            Err(Error::InvalidBits { .. })
        ));
    }

    #[test]
    fn range_rule_and_affine_zero_point() {
        let w = [-0.25, 0.75];
        let s = derive_scheme(&w, 4, ScaleRule::Range, QuantMode::Symmetric).unwrap();
        assert_eq!(s.scale(), &ratio(1, 7));
        let a = derive_scheme(&w, 4, ScaleRule::Range, QuantMode::Affine).unwrap();
        // Z = 0.25 * 15 / 1.0 = 3.75 -> 4
        assert_eq!(a.zero_point(), 4);
        assert!(!a.is_signed());
        assert_eq!(a.range(), (0, 15));
        assert_eq!(a.quantise_value(0.0), 4);
    }

    #[test]
    fn quantise_examples() {
        let s = QuantScheme::symmetric(8, ratio(1, 100)).unwrap();
        assert_eq!(s.quantise_value(0.0), 0);
        // The double nearest 0.635 sits just above it, so r/S = 63.50000...09.
        assert_eq!(s.quantise_value(0.635), 64);
        // An exactly representable tie rounds away from zero.
        let half = QuantScheme::symmetric(8, ratio(1, 2)).unwrap();
        assert_eq!(half.quantise_value(0.25), 1);
        assert_eq!(half.quantise_value(-0.25), -1);
        let three_bit = QuantScheme::symmetric(3, ratio(1, 1)).unwrap();
        assert_eq!(three_bit.quantise_value(10.0), 3);
        assert_eq!(three_bit.quantise_value(-10.0), -4);
    }

    #[test]
    fn tie_at_sixty_three_and_a_half() {
        // r/S = 63.5 exactly: r = 127, S = 2.
        let s = QuantScheme::symmetric(8, ratio(2, 1)).unwrap();
        assert_eq!(s.quantise_value(127.0), 64);
        assert_eq!(s.quantise_value(-127.0), -64);
    }

    #[test]
    fn dequantise_examples() {
        let s = QuantScheme::symmetric(8, ratio(1, 100)).unwrap();
        let q = IntTensor::from_i64(vec![2], &[64, 0]).unwrap();
        let r = dequantise_tensor(&q, &s).unwrap();
        assert!((r[0] - 0.64).abs() < 1e-15);
        assert_eq!(r[1], 0.0);
        let bad = IntTensor::from_i64(vec![1], &[200]).unwrap();
        assert!(matches!(
            dequantise_tensor(&bad, &s),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn non_finite_input_rejected() {
        let s = QuantScheme::symmetric(8, ratio(1, 100)).unwrap();
        assert!(matches!(
            quantise_tensor(&[0.0, f64::NAN], vec![2], &s),
            Err(Error::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn fake_quant_examples() {
        assert_eq!(fake_quant(&[0.0, 0.5], 8, ScaleRule::Unit).unwrap()[0], 0.0);
        let s = QuantScheme::symmetric(8, ratio(1, 100)).unwrap();
        let (v, mask) = fake_quant_fixed(&[0.632], &s);
        assert!((v[0] - 0.63).abs() < 1e-15);
        assert!(mask[0]);
        let (_, mask) = fake_quant_fixed(&[50.0], &s);
        assert!(!mask[0]);
    }

    #[test]
    fn fake_quant_is_idempotent_for_fixed_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for bits in [2, 3, 4, 8] {
            let w: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (once, _, scheme) = fake_quant_with_mask(&w, bits, ScaleRule::MaxAbs).unwrap();
            let (twice, _) = fake_quant_fixed(&once, &scheme);
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn input_downscaling() {
        let q = quantise_inputs(&[255, 0, 127], vec![3], 2).unwrap();
        assert_eq!(
            q.data(),
            &[BigInt::from(3), BigInt::from(0), BigInt::from(1)]
        );
        let all: Vec<u8> = (0..=255).collect();
        let q = quantise_inputs(&all, vec![256], 8).unwrap();
        for (p, v) in all.iter().zip(q.data()) {
            assert_eq!(BigInt::from(*p), *v);
        }
        // Brute-force oracle for every width.
        for b in 1..=8u32 {
            let levels = (1u32 << b) - 1;
            for p in 0..=255u8 {
                let exact_val =
                    BigRational::new(BigInt::from(p as u32 * levels), BigInt::from(255));
                assert_eq!(
                    BigInt::from(quantise_pixel(p, levels)),
                    exact_val.round().to_integer()
                );
            }
        }
        assert!(quantise_inputs(&[1], vec![1], 0).is_err());
        assert!(quantise_inputs(&[1], vec![1], 9).is_err());
    }

    #[test]
    fn scheme_json_shape() {
        let s = QuantScheme::symmetric(4, ratio(3, 70)).unwrap();
        let v: serde_json::Value = serde_json::to_value(&s).unwrap();
        assert_eq!(v["bits"], 4);
        assert_eq!(v["scale_num"], "3");
        assert_eq!(v["scale_den"], "70");
        assert_eq!(v["zero_point"], 0);
        assert_eq!(v["mode"], "symmetric");
        assert_eq!(v["signed"], true);
        let back: QuantScheme = serde_json::from_value(v).unwrap();
        assert_eq!(back, s);
    }

    fn scheme_strategy() -> impl Strategy<Value = QuantScheme> {
        (2u32..=16, 1i64..1000, 1i64..1000)
            .prop_map(|(b, n, d)| QuantScheme::symmetric(b, ratio(n, d)).unwrap())
    }

    proptest! {
        #[test]
        fn fast_path_matches_exact(s in scheme_strategy(), r in -1e4f64..1e4) {
            let (lo, hi) = s.range();
            let exact_q = s.round_exact(r).to_i64().map(|q| q.clamp(lo, hi))
                .unwrap_or(if r > 0.0 { hi } else { lo });
            prop_assert_eq!(s.quantise_value(r), exact_q);
        }

        #[test]
        fn monotone(s in scheme_strategy(), a in -1e3f64..1e3, b in -1e3f64..1e3) {
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(s.quantise_value(a) <= s.quantise_value(b));
        }

        #[test]
        fn antisymmetric_away_from_lower_edge(s in scheme_strategy(), r in -1e3f64..1e3) {
            let (lo, _) = s.range();
            let q = s.quantise_value(r);
            let qn = s.quantise_value(-r);
            prop_assume!(q != lo && qn != lo);
            prop_assert_eq!(qn, -q);
        }

        #[test]
        fn argmax_scaling_invariance(
            w in proptest::collection::vec(-1.0f64..1.0, 1..40),
            c in proptest::sample::select(vec![0.5f64, 2.0, 4.0, 0.25, 8.0]),
            bits in 2u32..9,
        ) {
            prop_assume!(w.iter().any(|x| *x != 0.0));
            let scaled: Vec<f64> = w.iter().map(|x| x * c).collect();
            let s1 = derive_scheme(&w, bits, ScaleRule::MaxAbs, QuantMode::Symmetric).unwrap();
            let s2 = derive_scheme(&scaled, bits, ScaleRule::MaxAbs, QuantMode::Symmetric).unwrap();
            prop_assert_eq!(s2.scale(), &(s1.scale() * exact(c)));
            let q1 = quantise_tensor(&w, vec![w.len()], &s1).unwrap();
            let q2 = quantise_tensor(&scaled, vec![w.len()], &s2).unwrap();
            prop_assert_eq!(q1, q2);
        }
    }
}
