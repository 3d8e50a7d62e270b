use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use rayon::prelude::*;

use super::kernels::{self, big_to_i128, AbsBig, Arith};
use super::{Architecture, FloatNetwork, IntNetwork, LayerSpec, Shape};
use crate::bigtensor::{bit_length, IntTensor};
use crate::error::{Error, Result};
use crate::tensor::FloatTensor;

type ParamRef<'a, T> = Option<(&'a [T], Option<&'a [T]>)>;

/// Run every layer in order, handing each layer output to `observe`.
pub(crate) fn forward<T: Arith>(
    arch: &Architecture,
    shapes: &[Shape],
    params: &[ParamRef<'_, T>],
    input: Vec<T>,
    mut observe: impl FnMut(usize, &[T]),
) -> Vec<T> {
    let mut x = input;
    for (i, layer) in arch.layers.iter().enumerate() {
        let in_shape = shapes[i];
        x = match (*layer, in_shape) {
            (
                LayerSpec::Conv2d {
                    out_channels,
                    kernel_h,
                    kernel_w,
                    stride,
                },
                Shape::Image { c, h, w },
            ) => {
                let (wt, b) = params[i].expect("conv parameters");
                kernels::conv2d(
                    &x,
                    (c, h, w),
                    wt,
                    b,
                    out_channels,
                    (kernel_h, kernel_w),
                    stride,
                )
            }
            (LayerSpec::Square, _) => kernels::square(&x),
            (LayerSpec::SumPool { window, stride }, Shape::Image { c, h, w }) => {
                kernels::sum_pool(&x, (c, h, w), window, stride)
            }
            (LayerSpec::Flatten, _) => x,
            (LayerSpec::Dense { out_features }, Shape::Flat(_)) => {
                let (wt, b) = params[i].expect("dense parameters");
                kernels::dense(&x, wt, b, out_features)
            }
            _ => unreachable!("shapes validated at construction"),
        };
        observe(i, &x);
    }
    x
}

fn check_input(arch: &Architecture, shape: &[usize]) -> Result<()> {
    if shape != arch.input_shape {
        return Err(Error::ShapeMismatch {
            expected: arch.input_shape.to_vec(),
            actual: shape.to_vec(),
        });
    }
    Ok(())
}

/// Float forward pass; returns the flattened output (logits).
pub fn float_infer(net: &FloatNetwork, x: &FloatTensor) -> Result<Vec<f64>> {
    check_input(&net.arch, &x.shape)?;
    let shapes = net.arch.shapes()?;
    let params: Vec<ParamRef<'_, f64>> = net
        .params
        .iter()
        .map(|p| {
            p.as_ref()
                .map(|p| (&p.weight.data[..], p.bias.as_ref().map(|b| &b.data[..])))
        })
        .collect();
    Ok(forward(
        &net.arch,
        &shapes,
        &params,
        x.data.clone(),
        |_, _| {},
    ))
}

pub fn predict_float(net: &FloatNetwork, x: &FloatTensor) -> Result<usize> {
    Ok(kernels::argmax(&float_infer(net, x)?))
}

/// Integer network prepared for repeated evaluation.
///
/// Keeps an `i128` copy of the parameters when a magnitude bound shows that
/// no intermediate value (partial sums included) can leave the `i128` range
/// for inputs no larger than the 8-bit pixel range. Results are identical either way.
pub(crate) struct PreparedInt<'a> {
    net: &'a IntNetwork,
    shapes: Vec<Shape>,
    small: Option<(Vec<Option<(Vec<i128>, Option<Vec<i128>>)>>, BigInt)>,
}

const I128_SAFE_BITS: u64 = 125;

impl<'a> PreparedInt<'a> {
    pub(crate) fn new(net: &'a IntNetwork) -> Result<Self> {
        let shapes = net.arch.shapes()?;
        let input_limit = (BigInt::one() << net.arch.input_bits.max(8)) - 1;
        let small = if magnitude_bits(net, &input_limit) <= I128_SAFE_BITS {
            let params = net
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| {
                        (
                            p.weight.data().iter().map(big_to_i128).collect(),
                            p.bias
                                .as_ref()
                                .map(|b| b.data().iter().map(big_to_i128).collect()),
                        )
                    })
                })
                .collect();
            Some((params, input_limit))
        } else {
            None
        };
        Ok(Self { net, shapes, small })
    }

    pub(crate) fn output_shape(&self) -> Shape {
        *self.shapes.last().unwrap()
    }

    /// Logits plus, when `trace` is set, the largest magnitude seen after
    /// every layer.
    pub(crate) fn run(&self, x: &IntTensor, trace: bool) -> Result<(Vec<BigInt>, Vec<BigInt>)> {
        check_input(&self.net.arch, x.shape())?;
        let mut maxima = if trace {
            vec![BigInt::zero(); self.net.arch.layers.len()]
        } else {
            Vec::new()
        };
        let fits = self
            .small
            .as_ref()
            .filter(|(_, limit)| x.data().iter().all(|v| v.abs() <= *limit));
        let out = match fits {
            Some((params, _)) => {
                let refs: Vec<ParamRef<'_, i128>> = params
                    .iter()
                    .map(|p| p.as_ref().map(|(w, b)| (&w[..], b.as_deref())))
                    .collect();
                let input = x.data().iter().map(big_to_i128).collect();
                let out = forward(&self.net.arch, &self.shapes, &refs, input, |i, vals| {
                    if trace {
                        let m = vals.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
                        maxima[i] = BigInt::from(m);
                    }
                });
                out.iter().map(|v| BigInt::from(*v)).collect()
            }
            None => {
                let refs: Vec<ParamRef<'_, BigInt>> = self
                    .net
                    .params
                    .iter()
                    .map(|p| {
                        p.as_ref()
                            .map(|p| (p.weight.data(), p.bias.as_ref().map(|b| b.data())))
                    })
                    .collect();
                forward(
                    &self.net.arch,
                    &self.shapes,
                    &refs,
                    x.data().to_vec(),
                    |i, vals| {
                        if trace {
                            maxima[i] = vals.iter().map(AbsBig::abs_big).max().unwrap_or_default();
                        }
                    },
                )
            }
        };
        Ok((out, maxima))
    }
}

/// Upper bound on the bit length of any intermediate value, partial sums
/// included, for inputs with `|x| <= input_limit`.
fn magnitude_bits(net: &IntNetwork, input_limit: &BigInt) -> u64 {
    let mut bound = input_limit.clone();
    let mut widest = bit_length(&bound);
    for (i, layer) in net.arch.layers.iter().enumerate() {
        bound = match *layer {
            LayerSpec::Conv2d { out_channels, .. }
            | LayerSpec::Dense {
                out_features: out_channels,
            } => {
                let p = net.params[i].as_ref().expect("parameters");
                let per_out = p.weight.len() / out_channels;
                (0..out_channels)
                    .map(|o| {
                        let wsum: BigInt = p.weight.data()[o * per_out..(o + 1) * per_out]
                            .iter()
                            .map(|w| w.abs())
                            .sum();
                        let b = p
                            .bias
                            .as_ref()
                            .map_or_else(BigInt::zero, |b| b.data()[o].abs());
                        wsum * &bound + b
                    })
                    .max()
                    .unwrap_or_default()
            }
            LayerSpec::Square => &bound * &bound,
            LayerSpec::SumPool { window, .. } => &bound * BigInt::from(window * window),
            LayerSpec::Flatten => bound,
        };
        widest = widest.max(bit_length(&bound));
    }
    widest
}

/// Exact integer forward pass. No division or shift happens anywhere.
pub fn int_infer(net: &IntNetwork, x: &IntTensor) -> Result<IntTensor> {
    let prepared = PreparedInt::new(net)?;
    let (out, _) = prepared.run(x, false)?;
    IntTensor::new(prepared.output_shape().dims(), out)
}

/// [`int_infer`] that also returns the largest magnitude after each layer.
pub fn int_infer_traced(net: &IntNetwork, x: &IntTensor) -> Result<(IntTensor, Vec<BigInt>)> {
    let prepared = PreparedInt::new(net)?;
    let (out, maxima) = prepared.run(x, true)?;
    Ok((IntTensor::new(prepared.output_shape().dims(), out)?, maxima))
}

pub fn predict_int(net: &IntNetwork, x: &IntTensor) -> Result<usize> {
    Ok(kernels::argmax(int_infer(net, x)?.data()))
}

/// [`predict_int`] over many samples, in parallel.
pub fn predict_int_batch(net: &IntNetwork, xs: &[IntTensor]) -> Result<Vec<usize>> {
    let prepared = PreparedInt::new(net)?;
    xs.par_iter()
        .map(|x| prepared.run(x, false).map(|(out, _)| kernels::argmax(&out)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{FloatLayerParams, IntLayerParams};

    fn arch(input: [usize; 3], layers: Vec<LayerSpec>) -> Architecture {
        Architecture {
            name: "t".into(),
            input_shape: input,
            input_bits: 2,
            layers,
        }
    }

    fn conv_square_dense() -> Architecture {
        arch(
            [1, 3, 3],
            vec![
                LayerSpec::Conv2d {
                    out_channels: 1,
                    kernel_h: 2,
                    kernel_w: 2,
                    stride: 1,
                },
                LayerSpec::Square,
                LayerSpec::Flatten,
                LayerSpec::Dense { out_features: 1 },
            ],
        )
    }

    fn int_params(w: &[(Vec<usize>, Vec<i64>)]) -> Vec<IntLayerParams> {
        w.iter()
            .map(|(s, v)| IntLayerParams {
                weight: IntTensor::from_i64(s.clone(), v).unwrap(),
                bias: None,
            })
            .collect()
    }

    #[test]
    fn integer_pipeline_by_hand() {
        let a = conv_square_dense();
        let mut p =
            int_params(&[(vec![1, 1, 2, 2], vec![1; 4]), (vec![1, 4], vec![1; 4])]).into_iter();
        let net = IntNetwork::new(a, vec![p.next(), None, None, p.next()], None).unwrap();
        let x = IntTensor::from_i64(vec![1, 3, 3], &[1; 9]).unwrap();
        let (out, maxima) = int_infer_traced(&net, &x).unwrap();
        assert_eq!(out.data(), &[BigInt::from(64)]);
        assert_eq!(
            maxima,
            vec![4, 16, 16, 64]
                .into_iter()
                .map(BigInt::from)
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn float_conv_of_ones() {
        let a = arch(
            [1, 3, 3],
            vec![LayerSpec::Conv2d {
                out_channels: 1,
                kernel_h: 2,
                kernel_w: 2,
                stride: 1,
            }],
        );
        let net = FloatNetwork::new(
            a,
            vec![Some(FloatLayerParams {
                weight: FloatTensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap(),
                bias: None,
            })],
        )
        .unwrap();
        let x = FloatTensor::new(vec![1, 3, 3], vec![1.0; 9]).unwrap();
        assert_eq!(float_infer(&net, &x).unwrap(), vec![4.0; 4]);
    }

    #[test]
    fn float_dense_identity_and_zero() {
        let a = arch(
            [1, 1, 3],
            vec![LayerSpec::Flatten, LayerSpec::Dense { out_features: 3 }],
        );
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let net = FloatNetwork::new(
            a,
            vec![
                None,
                Some(FloatLayerParams {
                    weight: FloatTensor::new(vec![3, 3], eye).unwrap(),
                    bias: Some(FloatTensor::zeros(vec![3])),
                }),
            ],
        )
        .unwrap();
        let x = FloatTensor::new(vec![1, 1, 3], vec![0.5, -2.0, 7.0]).unwrap();
        assert_eq!(float_infer(&net, &x).unwrap(), vec![0.5, -2.0, 7.0]);
        let z = FloatTensor::zeros(vec![1, 1, 3]);
        assert_eq!(float_infer(&net, &z).unwrap(), vec![0.0; 3]);
        let wrong = FloatTensor::zeros(vec![1, 3, 1]);
        assert!(matches!(
            float_infer(&net, &wrong),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn doubling_a_weight_is_local() {
        let a = arch(
            [1, 3, 3],
            vec![LayerSpec::Conv2d {
                out_channels: 2,
                kernel_h: 2,
                kernel_w: 2,
                stride: 1,
            }],
        );
        let base: Vec<i64> = vec![1, 2, 3, 4, 5, 6, 7, 8];
        let mut doubled = base.clone();
        doubled[5] *= 2; // channel 1 only
        let build = |w: &[i64]| {
            IntNetwork::new(
                a.clone(),
                vec![Some(IntLayerParams {
                    weight: IntTensor::from_i64(vec![2, 1, 2, 2], w).unwrap(),
                    bias: None,
                })],
                None,
            )
            .unwrap()
        };
        let x = IntTensor::from_i64(vec![1, 3, 3], &[1, 2, 3, 4, 5, 6, 7, 8, 9]).unwrap();
        let y0 = int_infer(&build(&base), &x).unwrap();
        let y1 = int_infer(&build(&doubled), &x).unwrap();
        assert_eq!(y0.data()[..4], y1.data()[..4]);
        assert!(y0.data()[4..]
            .iter()
            .zip(&y1.data()[4..])
            .all(|(a, b)| a != b));
    }

    #[test]
    fn products_grow_by_at_most_the_sum_of_widths() {
        let a = BigInt::from(255);
        let b = BigInt::from(-201);
        let p = &a * &b;
        assert!(bit_length(&p) <= bit_length(&a) + bit_length(&b));
        assert!(bit_length(&p) >= 15);
    }

    #[test]
    fn big_and_small_paths_agree() {
        // Large weights force the BigInt path; compare against i128 by hand.
        let a = conv_square_dense();
        let huge = 1i64 << 40;
        let mut p = int_params(&[
            (vec![1, 1, 2, 2], vec![huge; 4]),
            (vec![1, 4], vec![huge; 4]),
        ])
        .into_iter();
        let net = IntNetwork::new(a, vec![p.next(), None, None, p.next()], None).unwrap();
        let prepared = PreparedInt::new(&net).unwrap();
        assert!(prepared.small.is_none());
        let x = IntTensor::from_i64(vec![1, 3, 3], &[3; 9]).unwrap();
        let out = int_infer(&net, &x).unwrap();
        let conv: BigInt = BigInt::from(huge) * 12;
        let expected = conv.pow(2) * 4 * BigInt::from(huge);
        assert_eq!(out.data(), &[expected]);
    }
}
