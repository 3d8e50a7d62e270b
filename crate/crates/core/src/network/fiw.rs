//! Final integer width: measured over a dataset, or bounded statically.

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::infer::PreparedInt;
use super::{IntNetwork, LayerSpec, Shape};
use crate::bigtensor::{bit_length, decimal, IntTensor};
use crate::error::{Error, Result};

/// Width of one layer output: largest magnitude and signed bit width.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerWidth {
    pub layer: String,
    #[serde(with = "decimal")]
    pub max_abs: BigInt,
    pub width: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiwReport {
    pub layers: Vec<LayerWidth>,
    pub final_integer_width: u64,
    /// Zero for a static bound.
    pub sample_count: usize,
}

/// Signed width: magnitude bits plus one sign bit, never below 1.
pub fn signed_width(max_abs: &BigInt) -> u64 {
    bit_length(max_abs) + 1
}

impl FiwReport {
    fn from_maxima(layers: &[LayerSpec], maxima: Vec<BigInt>, sample_count: usize) -> Self {
        let layers: Vec<LayerWidth> = layers
            .iter()
            .zip(maxima)
            .map(|(l, m)| LayerWidth {
                layer: l.name().to_string(),
                width: signed_width(&m),
                max_abs: m,
            })
            .collect();
        let final_integer_width = layers.last().map_or(1, |l| l.width);
        Self {
            layers,
            final_integer_width,
            sample_count,
        }
    }

    /// Elementwise max of two reports over the same network.
    pub fn merge(mut self, other: &FiwReport) -> Self {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if b.max_abs > a.max_abs {
                a.max_abs = b.max_abs.clone();
                a.width = b.width;
            }
        }
        self.final_integer_width = self.layers.last().map_or(1, |l| l.width);
        self.sample_count += other.sample_count;
        self
    }
}

/// Run integer inference on every sample and record the widest values.
pub fn fiw_empirical(net: &IntNetwork, samples: &[IntTensor]) -> Result<FiwReport> {
    if samples.is_empty() {
        return Err(Error::Degenerate("FIW of an empty dataset".into()));
    }
    let prepared = PreparedInt::new(net)?;
    let layers = net.arch.layers.len();
    let maxima = samples
        .par_iter()
        .map(|x| prepared.run(x, true).map(|(_, m)| m))
        .try_reduce(
            || vec![BigInt::zero(); layers],
            |a, b| Ok(a.into_iter().zip(b).map(|(x, y)| x.max(y)).collect()),
        )?;
    Ok(FiwReport::from_maxima(
        &net.arch.layers,
        maxima,
        samples.len(),
    ))
}

#[derive(Clone, Debug)]
struct Interval {
    lo: BigInt,
    hi: BigInt,
}

impl Interval {
    fn point(v: BigInt) -> Self {
        Self {
            lo: v.clone(),
            hi: v,
        }
    }

    fn add(&mut self, o: &Interval) {
        self.lo += &o.lo;
        self.hi += &o.hi;
    }

    fn scaled(&self, w: &BigInt) -> Interval {
        if w.is_negative() {
            Interval {
                lo: w * &self.hi,
                hi: w * &self.lo,
            }
        } else {
            Interval {
                lo: w * &self.lo,
                hi: w * &self.hi,
            }
        }
    }

    fn square(&self) -> Interval {
        let a = &self.lo * &self.lo;
        let b = &self.hi * &self.hi;
        if !self.lo.is_negative() {
            Interval { lo: a, hi: b }
        } else if self.hi.is_positive() {
            Interval {
                lo: BigInt::zero(),
                hi: a.max(b),
            }
        } else {
            Interval { lo: b, hi: a }
        }
    }

    fn max_abs(&self) -> BigInt {
        self.lo.abs().max(self.hi.abs())
    }
}

fn affine(
    input: &[Interval],
    weights: &[BigInt],
    bias: Option<&BigInt>,
    taps: impl Iterator<Item = (usize, usize)>,
) -> Interval {
    let mut acc = Interval::point(bias.cloned().unwrap_or_default());
    for (wi, xi) in taps {
        if !weights[wi].is_zero() {
            acc.add(&input[xi].scaled(&weights[wi]));
        }
    }
    acc
}

/// Worst-case widths over every input in `[0, 2^b_in - 1]`, by per-element
/// interval propagation. Always at least the empirical FIW.
pub fn fiw_static(net: &IntNetwork) -> Result<FiwReport> {
    let shapes = net.arch.shapes()?;
    let top = (BigInt::one() << net.arch.input_bits) - 1;
    let mut x: Vec<Interval> = vec![
        Interval {
            lo: BigInt::zero(),
            hi: top
        };
        shapes[0].len()
    ];
    let mut maxima = Vec::with_capacity(net.arch.layers.len());
    for (i, layer) in net.arch.layers.iter().enumerate() {
        x = match (*layer, shapes[i]) {
            (
                LayerSpec::Conv2d {
                    out_channels,
                    kernel_h: kh,
                    kernel_w: kw,
                    stride,
                },
                Shape::Image { c, h, w },
            ) => {
                let p = net.params[i].as_ref().expect("conv parameters");
                let (wts, bias) = (p.weight.data(), p.bias.as_ref().map(|b| b.data()));
                let oh = (h - kh) / stride + 1;
                let ow = (w - kw) / stride + 1;
                let mut out = Vec::with_capacity(out_channels * oh * ow);
                for o in 0..out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let taps = (0..c).flat_map(move |ci| {
                                (0..kh).flat_map(move |dy| {
                                    (0..kw).map(move |dx| {
                                        (
                                            ((o * c + ci) * kh + dy) * kw + dx,
                                            (ci * h + oy * stride + dy) * w + ox * stride + dx,
                                        )
                                    })
                                })
                            });
                            out.push(affine(&x, wts, bias.map(|b| &b[o]), taps));
                        }
                    }
                }
                out
            }
            (LayerSpec::Square, _) => x.iter().map(Interval::square).collect(),
            (LayerSpec::SumPool { window, stride }, Shape::Image { c, h, w }) => {
                let oh = (h - window) / stride + 1;
                let ow = (w - window) / stride + 1;
                let mut out = Vec::with_capacity(c * oh * ow);
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = Interval::point(BigInt::zero());
                            for dy in 0..window {
                                for dx in 0..window {
                                    acc.add(&x[(ci * h + oy * stride + dy) * w + ox * stride + dx]);
                                }
                            }
                            out.push(acc);
                        }
                    }
                }
                out
            }
            (LayerSpec::Flatten, _) => x,
            (LayerSpec::Dense { out_features }, Shape::Flat(n)) => {
                let p = net.params[i].as_ref().expect("dense parameters");
                let (wts, bias) = (p.weight.data(), p.bias.as_ref().map(|b| b.data()));
                (0..out_features)
                    .map(|o| affine(&x, wts, bias.map(|b| &b[o]), (0..n).map(|j| (o * n + j, j))))
                    .collect()
            }
            _ => unreachable!("shapes validated"),
        };
        maxima.push(x.iter().map(Interval::max_abs).max().unwrap_or_default());
    }
    Ok(FiwReport::from_maxima(&net.arch.layers, maxima, 0))
}
