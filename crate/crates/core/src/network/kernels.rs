//! Layer kernels shared by float and integer inference.
//!
//! The integer instantiations never divide or shift; every layer is a sum
//! of products, a square, or a plain window sum.

use num_bigint::BigInt;
use num_traits::{Signed, ToPrimitive, Zero};

/// Ring operations needed by the forward pass.
pub trait Arith: Clone + Send + Sync {
    fn zero_value() -> Self;
    /// `self += a * b`
    fn mul_add(&mut self, a: &Self, b: &Self);
    fn add_assign(&mut self, a: &Self);
    fn square(&self) -> Self;
}

impl Arith for f64 {
    fn zero_value() -> Self {
        0.0
    }

    fn mul_add(&mut self, a: &Self, b: &Self) {
        *self += a * b;
    }

    fn add_assign(&mut self, a: &Self) {
        *self += a;
    }

    fn square(&self) -> Self {
        self * self
    }
}

// Only used when a static bound guarantees no overflow.
impl Arith for i128 {
    fn zero_value() -> Self {
        0
    }

    fn mul_add(&mut self, a: &Self, b: &Self) {
        *self += a * b;
    }

    fn add_assign(&mut self, a: &Self) {
        *self += a;
    }

    fn square(&self) -> Self {
        self * self
    }
}

impl Arith for BigInt {
    fn zero_value() -> Self {
        Zero::zero()
    }

    fn mul_add(&mut self, a: &Self, b: &Self) {
        if !a.is_zero() && !b.is_zero() {
            *self += a * b;
        }
    }

    fn add_assign(&mut self, a: &Self) {
        *self += a;
    }

    fn square(&self) -> Self {
        self * self
    }
}

/// Magnitude as a big integer, for width accounting.
pub trait AbsBig {
    fn abs_big(&self) -> BigInt;
}

impl AbsBig for i128 {
    fn abs_big(&self) -> BigInt {
        BigInt::from(self.unsigned_abs())
    }
}

impl AbsBig for BigInt {
    fn abs_big(&self) -> BigInt {
        self.abs()
    }
}

pub(crate) fn big_to_i128(v: &BigInt) -> i128 {
    v.to_i128().expect("value checked to fit in i128")
}

/// Valid (no padding) convolution.
///
/// `input` is `[c][h][w]`, `weight` is `[o][c][kh][kw]`; output is `[o][oh][ow]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d<T: Arith>(
    input: &[T],
    (c, h, w): (usize, usize, usize),
    weight: &[T],
    bias: Option<&[T]>,
    out_channels: usize,
    (kh, kw): (usize, usize),
    stride: usize,
) -> Vec<T> {
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let mut out = Vec::with_capacity(out_channels * oh * ow);
    for o in 0..out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.map_or_else(T::zero_value, |b| b[o].clone());
                for ci in 0..c {
                    for dy in 0..kh {
                        let row = (ci * h + oy * stride + dy) * w + ox * stride;
                        let wrow = ((o * c + ci) * kh + dy) * kw;
                        for dx in 0..kw {
                            acc.mul_add(&weight[wrow + dx], &input[row + dx]);
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

/// Window sum without the averaging division.
pub fn sum_pool<T: Arith>(
    input: &[T],
    (c, h, w): (usize, usize, usize),
    window: usize,
    stride: usize,
) -> Vec<T> {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero_value();
                for dy in 0..window {
                    let row = (ci * h + oy * stride + dy) * w + ox * stride;
                    for dx in 0..window {
                        acc.add_assign(&input[row + dx]);
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

/// `weight` is `[out][in]` row-major.
pub fn dense<T: Arith>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    out_features: usize,
) -> Vec<T> {
    let n = input.len();
    (0..out_features)
        .map(|o| {
            let mut acc = bias.map_or_else(T::zero_value, |b| b[o].clone());
            for (wv, x) in weight[o * n..(o + 1) * n].iter().zip(input) {
                acc.mul_add(wv, x);
            }
            acc
        })
        .collect()
}

pub fn square<T: Arith>(input: &[T]) -> Vec<T> {
    input.iter().map(Arith::square).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_of_ones() {
        let x = vec![1.0; 9];
        let k = vec![1.0; 4];
        let y = conv2d(&x, (1, 3, 3), &k, None, 1, (2, 2), 1);
        assert_eq!(y, vec![4.0; 4]);
    }

    #[test]
    fn strided_conv_picks_positions() {
        // 1x4x4 ramp, 1x1 kernel of 1, stride 2 -> elements (0,0),(0,2),(2,0),(2,2)
        let x: Vec<i128> = (0..16).collect();
        let y = conv2d(&x, (1, 4, 4), &[1], None, 1, (1, 1), 2);
        assert_eq!(y, vec![0, 2, 8, 10]);
    }

    #[test]
    fn pool_sums_window() {
        let x: Vec<i128> = vec![1, 2, 3, 4];
        assert_eq!(sum_pool(&x, (1, 2, 2), 2, 2), vec![10]);
        assert_eq!(sum_pool(&x, (1, 2, 2), 1, 1), x);
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax(&[2, 5, 1]), 1);
        assert_eq!(argmax(&[0, 0, 0]), 0);
        assert_eq!(argmax(&[3.0, 7.0, 7.0]), 1);
    }
}
