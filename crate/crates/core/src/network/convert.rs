//! Post-training conversion of a float network into an integer one.
//!
//! Each integer layer output represents `value / scale`, where the scale is
//! the product of the input scale and every weight scale seen so far
//! (squared by Square layers). Biases are quantised at exactly that scale so
//! they can be added to the integer accumulators without any rescaling.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::One;
use serde::{Deserialize, Serialize};

use super::{Architecture, FloatNetwork, IntLayerParams, IntNetwork, LayerSpec, QuantInfo};
use crate::bigtensor::IntTensor;
use crate::error::{Error, Result};
use crate::quant::{derive_scheme, QuantMode, ScaleRule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    /// Quantise biases at the accumulated scale of the layer.
    Quantise,
    /// Discard biases entirely.
    Drop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PtqConfig {
    pub bits: u32,
    pub rule: ScaleRule,
    pub mode: QuantMode,
    pub bias: BiasMode,
}

impl PtqConfig {
    pub fn symmetric(bits: u32, rule: ScaleRule) -> Self {
        Self {
            bits,
            rule,
            mode: QuantMode::Symmetric,
            bias: BiasMode::Quantise,
        }
    }
}

/// Real value of one integer input unit: pixels `p / 255` become
/// `q / (2^b_in - 1)`.
pub fn input_scale(input_bits: u32) -> BigRational {
    BigRational::new(BigInt::one(), (BigInt::one() << input_bits) - 1)
}

/// Accumulated scale after each layer, given each layer's weight scale.
pub fn propagate_scales(
    arch: &Architecture,
    weight_scales: &[Option<BigRational>],
) -> Result<Vec<BigRational>> {
    if weight_scales.len() != arch.layers.len() {
        return Err(Error::InvalidNetwork(format!(
            "{} weight scales for {} layers",
            weight_scales.len(),
            arch.layers.len()
        )));
    }
    let mut acc = input_scale(arch.input_bits);
    let mut out = Vec::with_capacity(arch.layers.len());
    for (i, (layer, s)) in arch.layers.iter().zip(weight_scales).enumerate() {
        acc = match layer {
            LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } => {
                let s = s.as_ref().ok_or_else(|| {
                    Error::InvalidNetwork(format!("layer {i} has no weight scale"))
                })?;
                acc * s
            }
            LayerSpec::Square => &acc * &acc,
            LayerSpec::SumPool { .. } | LayerSpec::Flatten => acc,
        };
        out.push(acc.clone());
    }
    Ok(out)
}

impl IntNetwork {
    /// Accumulated scales recorded at conversion time.
    pub fn output_scales(&self) -> Option<Vec<BigRational>> {
        self.quant.as_ref().map(|q| {
            q.output_scales
                .iter()
                .map(|s| s.parse().expect("scales written by quantise_network"))
                .collect()
        })
    }
}

/// Quantise every weight tensor with its own per-tensor scheme.
///
/// The integer weight is `q - Z`, so affine schemes also produce a network
/// whose outputs are plain multiples of the accumulated scale.
pub fn quantise_network(net: &FloatNetwork, cfg: &PtqConfig) -> Result<IntNetwork> {
    let mut schemes = Vec::with_capacity(net.params.len());
    for p in &net.params {
        schemes.push(match p {
            Some(p) => Some(derive_scheme(&p.weight.data, cfg.bits, cfg.rule, cfg.mode)?),
            None => None,
        });
    }
    let weight_scales: Vec<Option<BigRational>> = schemes
        .iter()
        .map(|s| s.as_ref().map(|s| s.scale().clone()))
        .collect();
    let scales = propagate_scales(&net.arch, &weight_scales)?;

    let mut params = Vec::with_capacity(net.params.len());
    for (i, (p, scheme)) in net.params.iter().zip(&schemes).enumerate() {
        let (Some(p), Some(scheme)) = (p, scheme) else {
            params.push(None);
            continue;
        };
        let z = scheme.zero_point();
        let weight = IntTensor::new(
            p.weight.shape.clone(),
            p.weight
                .data
                .iter()
                .map(|&w| BigInt::from(scheme.quantise_value(w) - z))
                .collect(),
        )?;
        let bias = match (&p.bias, cfg.bias) {
            (Some(b), BiasMode::Quantise) => {
                // Scale of this layer's accumulator = its output scale.
                let unit = &scales[i];
                let data = b
                    .data
                    .iter()
                    .enumerate()
                    .map(|(index, &v)| {
                        if !v.is_finite() {
                            return Err(Error::NonFinite { index, value: v });
                        }
                        let exact = BigRational::from_float(v).expect("finite");
                        Ok((exact / unit).round().to_integer())
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(IntTensor::new(b.shape.clone(), data)?)
            }
            _ => None,
        };
        params.push(Some(IntLayerParams { weight, bias }));
    }

    let quant = QuantInfo {
        bits: cfg.bits,
        rule: cfg.rule,
        mode: cfg.mode,
        bias: cfg.bias,
        schemes,
        output_scales: scales.iter().map(|s| s.to_string()).collect(),
    };
    IntNetwork::new(net.arch.clone(), params, Some(quant))
}
