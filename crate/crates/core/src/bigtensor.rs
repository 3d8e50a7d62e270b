//! Arbitrary-precision integer tensors.
//!
//! Integer inference never rescales between layers, so intermediate values
//! keep growing. A 32-bit quantised CIFAR network ends up with logits of
//! several hundred bits, which is why everything here is backed by
//! [`BigInt`] rather than a fixed-width type.
//!
//! Tensors are row-major and immutable once built.

use num_bigint::BigInt;
use num_traits::{Signed, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of bits needed to hold `|v|`; zero has length 0.
pub fn bit_length(v: &BigInt) -> u64 {
    v.bits()
}

/// Row-major tensor of signed big integers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawIntTensor", into = "RawIntTensor")]
pub struct IntTensor {
    shape: Vec<usize>,
    data: Vec<BigInt>,
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, data: Vec<BigInt>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Degenerate(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                actual: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_i64(shape: Vec<usize>, values: &[i64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| BigInt::from(v)).collect())
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![BigInt::zero(); len])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[BigInt] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<BigInt> {
        self.data
    }

    /// Same data viewed under a different shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Largest absolute value in the tensor.
    pub fn max_abs(&self) -> Result<BigInt> {
        max_abs(&self.data)
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(Zero::is_zero)
    }
}

/// Largest `|x|` over a slice of values; errors on an empty slice.
pub fn max_abs(values: &[BigInt]) -> Result<BigInt> {
    values
        .iter()
        .map(|v| v.abs())
        .max()
        .ok_or_else(|| Error::Degenerate("max_abs of an empty tensor".into()))
}

#[derive(Serialize, Deserialize)]
struct RawIntTensor {
    shape: Vec<usize>,
    #[serde(with = "decimal_vec")]
    data: Vec<BigInt>,
}

impl TryFrom<RawIntTensor> for IntTensor {
    type Error = Error;

    fn try_from(raw: RawIntTensor) -> Result<Self> {
        IntTensor::new(raw.shape, raw.data)
    }
}

impl From<IntTensor> for RawIntTensor {
    fn from(t: IntTensor) -> Self {
        RawIntTensor {
            shape: t.shape,
            data: t.data,
        }
    }
}

/// Serde adapter writing a [`BigInt`] as a signed base-10 string.
///
/// JSON numbers lose precision past 53 bits, so big integers never travel
/// as numbers.
pub mod decimal {
    use std::str::FromStr;

    use num_bigint::BigInt;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &BigInt, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_str_radix(10))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigInt, D::Error> {
        let s = String::deserialize(d)?;
        BigInt::from_str(&s).map_err(de::Error::custom)
    }
}

/// [`decimal`] applied to every element of a vector.
pub mod decimal_vec {
    use std::str::FromStr;

    use num_bigint::BigInt;
    use serde::{de, ser::SerializeSeq, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[BigInt], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for x in v {
            seq.serialize_element(&x.to_str_radix(10))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<BigInt>, D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        raw.iter()
            .map(|s| BigInt::from_str(s).map_err(de::Error::custom))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::One;
    use proptest::prelude::*;

    fn halving_count(v: &BigInt) -> u64 {
        let mut x = v.abs();
        let mut n = 0;
        while !x.is_zero() {
            x >>= 1;
            n += 1;
        }
        n
    }

    #[test]
    fn bit_length_examples() {
        assert_eq!(bit_length(&BigInt::zero()), 0);
        assert_eq!(bit_length(&BigInt::from(255)), 8);
        assert_eq!(bit_length(&BigInt::from(256)), 9);
        let p = BigInt::from(35_184_371_138_561u64);
        // Just below 2^45 = 35184372088832.
        assert_eq!(halving_count(&p), 45);
        assert_eq!(bit_length(&p), 45);
        assert_eq!(bit_length(&BigInt::from(-256)), 9);
    }

    #[test]
    fn max_abs_examples() {
        let t = IntTensor::from_i64(vec![2], &[-5, 3]).unwrap();
        assert_eq!(t.max_abs().unwrap(), BigInt::from(5));
        let z = IntTensor::zeros(vec![2, 3]).unwrap();
        assert_eq!(z.max_abs().unwrap(), BigInt::zero());
        let d = IntTensor::from_i64(vec![3], &[2, -9, 9]).unwrap();
        assert_eq!(d.max_abs().unwrap(), BigInt::from(9));
        assert!(matches!(max_abs(&[]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn construction_checks_length() {
        assert!(IntTensor::from_i64(vec![2, 2], &[1, 2, 3]).is_err());
        assert!(IntTensor::from_i64(vec![0], &[]).is_err());
    }

    #[test]
    fn json_uses_decimal_strings() {
        let big: BigInt = (BigInt::one() << 200usize) - 1;
        let t = IntTensor::new(vec![2], vec![big.clone(), -big.clone()]).unwrap();
        let js = serde_json::to_string(&t).unwrap();
        assert!(js.contains(&format!("\"-{}\"", (BigInt::one() << 200usize) - 1)));
        let back: IntTensor = serde_json::from_str(&js).unwrap();
        assert_eq!(back, t);
        assert!(serde_json::from_str::<IntTensor>(r#"{"shape":[2],"data":["1"]}"#).is_err());
    }

    fn big_operand() -> impl Strategy<Value = BigInt> {
        (proptest::collection::vec(any::<u32>(), 22), any::<bool>()).prop_map(|(limbs, neg)| {
            let v = BigInt::from(num_bigint::BigUint::new(limbs));
            if neg {
                -v
            } else {
                v
            }
        })
    }

    proptest! {
        #[test]
        fn bit_length_brackets_value(v in big_operand()) {
            prop_assume!(!v.is_zero());
            let n = bit_length(&v);
            let lo = BigInt::one() << (n - 1);
            let hi = BigInt::one() << n;
            prop_assert!(lo <= v.abs() && v.abs() < hi);
            prop_assert_eq!(n, halving_count(&v));
        }

        #[test]
        fn arithmetic_is_exact(a in big_operand(), b in big_operand()) {
            prop_assume!(!b.is_zero());
            prop_assert_eq!(&(&a + &b) - &b, a.clone());
            let prod = &a * &b;
            prop_assert!((&prod % &b).is_zero());
            prop_assert_eq!(prod / &b, a);
        }

        #[test]
        fn max_abs_matches_scan(values in proptest::collection::vec(-1_000_000i64..1_000_000, 1..64)) {
            let t = IntTensor::from_i64(vec![values.len()], &values).unwrap();
            let mut best = 0i64;
            for v in &values {
                if v.abs() > best {
                    best = v.abs();
                }
            }
            prop_assert_eq!(t.max_abs().unwrap(), BigInt::from(best));
        }
    }
}
