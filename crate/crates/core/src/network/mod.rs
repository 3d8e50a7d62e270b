//! Layer graphs, float and integer inference, and final-integer-width analysis.
//!
//! Networks are built only from HE-friendly layers: valid convolutions,
//! `x^2` activations, window sums and dense layers. Integer inference never
//! rescales, so the width of the logits (the final integer width, FIW) is
//! what decides how large the plaintext space has to be.

mod convert;
mod fiw;
mod infer;
pub mod kernels;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bigtensor::IntTensor;
use crate::error::{Error, Result};
use crate::quant::{QuantMode, QuantScheme, ScaleRule};
use crate::tensor::FloatTensor;

pub use convert::{propagate_scales, quantise_network, BiasMode, PtqConfig};
pub use fiw::{fiw_empirical, fiw_static, FiwReport, LayerWidth};
pub use infer::{
    float_infer, int_infer, int_infer_traced, predict_float, predict_int, predict_int_batch,
};
pub use kernels::argmax;

pub const FORMAT_TAG: &str = "fiwnet";
pub const FORMAT_VERSION: u32 = 1;

const MNIST_ARCH: &str = include_str!("../../../../configs/mnist.fiwnet.json");
const CIFAR_ARCH: &str = include_str!("../../../../configs/cifar.fiwnet.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Valid convolution; there is no padding option.
    Conv2d {
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
    },
    Square,
    /// Window sum with the averaging division left out.
    SumPool {
        window: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Square => "square",
            LayerSpec::SumPool { .. } => "sum_pool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }
}

/// Activation shape between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Image { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Image { c, h, w } => c * h * w,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Image { c, h, w } => vec![c, h, w],
            Shape::Flat(n) => vec![n],
        }
    }
}

/// Layer graph without parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    /// `[channels, height, width]`
    pub input_shape: [usize; 3],
    /// Width the 8-bit input pixels are reduced to.
    pub input_bits: u32,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn mnist() -> Self {
        NetworkDoc::from_json(MNIST_ARCH)
            .expect("bundled MNIST config parses")
            .arch
    }

    pub fn cifar() -> Self {
        NetworkDoc::from_json(CIFAR_ARCH)
            .expect("bundled CIFAR config parses")
            .arch
    }

    pub fn input(&self) -> Shape {
        let [c, h, w] = self.input_shape;
        Shape::Image { c, h, w }
    }

    /// Shapes before the first layer and after every layer.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        if self.layers.is_empty() {
            return Err(Error::InvalidNetwork("network has no layers".into()));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::InvalidNetwork(format!(
                "input shape {:?} has a zero dimension",
                self.input_shape
            )));
        }
        let mut shapes = vec![self.input()];
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = *shapes.last().unwrap();
            let bad =
                |msg: String| Error::InvalidNetwork(format!("layer {i} ({}): {msg}", layer.name()));
            let next = match (*layer, prev) {
                (
                    LayerSpec::Conv2d {
                        out_channels,
                        kernel_h,
                        kernel_w,
                        stride,
                    },
                    Shape::Image { h, w, .. },
                ) => {
                    if out_channels == 0 || kernel_h == 0 || kernel_w == 0 || stride == 0 {
                        return Err(bad("zero-sized convolution parameter".into()));
                    }
                    if kernel_h > h || kernel_w > w {
                        return Err(bad(format!(
                            "kernel {kernel_h}x{kernel_w} larger than input {h}x{w}"
                        )));
                    }
                    Shape::Image {
                        c: out_channels,
                        h: (h - kernel_h) / stride + 1,
                        w: (w - kernel_w) / stride + 1,
                    }
                }
                (LayerSpec::SumPool { window, stride }, Shape::Image { c, h, w }) => {
                    if window == 0 || stride == 0 {
                        return Err(bad("zero-sized pooling parameter".into()));
                    }
                    if window > h || window > w {
                        return Err(bad(format!("window {window} larger than input {h}x{w}")));
                    }
                    Shape::Image {
                        c,
                        h: (h - window) / stride + 1,
                        w: (w - window) / stride + 1,
                    }
                }
                (LayerSpec::Conv2d { .. } | LayerSpec::SumPool { .. }, Shape::Flat(_)) => {
                    return Err(bad("needs an image-shaped input".into()));
                }
                (LayerSpec::Square, s) => s,
                (LayerSpec::Flatten, s) => Shape::Flat(s.len()),
                (LayerSpec::Dense { out_features }, Shape::Flat(_)) => {
                    if out_features == 0 {
                        return Err(bad("zero output features".into()));
                    }
                    Shape::Flat(out_features)
                }
                (LayerSpec::Dense { .. }, Shape::Image { .. }) => {
                    return Err(bad("dense layer needs a flattened input".into()));
                }
            };
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output(&self) -> Result<Shape> {
        Ok(*self.shapes()?.last().unwrap())
    }

    /// Weight shape and bias length of every parameterised layer.
    pub fn param_shapes(&self) -> Result<Vec<Option<(Vec<usize>, usize)>>> {
        let shapes = self.shapes()?;
        Ok(self
            .layers
            .iter()
            .zip(&shapes)
            .map(|(layer, input)| match (*layer, *input) {
                (
                    LayerSpec::Conv2d {
                        out_channels,
                        kernel_h,
                        kernel_w,
                        ..
                    },
                    Shape::Image { c, .. },
                ) => Some((vec![out_channels, c, kernel_h, kernel_w], out_channels)),
                (LayerSpec::Dense { out_features }, Shape::Flat(n)) => {
                    Some((vec![out_features, n], out_features))
                }
                _ => None,
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloatLayerParams {
    pub weight: FloatTensor,
    pub bias: Option<FloatTensor>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntLayerParams {
    pub weight: IntTensor,
    pub bias: Option<IntTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloatNetwork {
    pub arch: Architecture,
    /// One entry per layer; `Some` exactly for conv and dense layers.
    pub params: Vec<Option<FloatLayerParams>>,
}

/// How an integer network was obtained from a float one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantInfo {
    pub bits: u32,
    pub rule: ScaleRule,
    pub mode: QuantMode,
    pub bias: BiasMode,
    /// Weight scheme per layer (`None` for parameter-free layers).
    pub schemes: Vec<Option<QuantScheme>>,
    /// Real value of one integer unit after each layer, as `num/den`.
    pub output_scales: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntNetwork {
    pub arch: Architecture,
    pub params: Vec<Option<IntLayerParams>>,
    pub quant: Option<QuantInfo>,
}

fn check_params<P>(
    arch: &Architecture,
    params: &[Option<P>],
    shape_of: impl Fn(&P) -> (Vec<usize>, Option<Vec<usize>>),
) -> Result<()> {
    let expected = arch.param_shapes()?;
    if params.len() != expected.len() {
        return Err(Error::InvalidNetwork(format!(
            "{} parameter entries for {} layers",
            params.len(),
            expected.len()
        )));
    }
    for (i, (p, e)) in params.iter().zip(&expected).enumerate() {
        match (p, e) {
            (None, None) => {}
            (Some(p), Some((wshape, blen))) => {
                let (ws, bs) = shape_of(p);
                if &ws != wshape {
                    return Err(Error::ShapeMismatch {
                        expected: wshape.clone(),
                        actual: ws,
                    });
                }
                if let Some(bs) = bs {
                    if bs != vec![*blen] {
                        return Err(Error::ShapeMismatch {
                            expected: vec![*blen],
                            actual: bs,
                        });
                    }
                }
            }
            (Some(_), None) => {
                return Err(Error::InvalidNetwork(format!(
                    "layer {i} takes no parameters"
                )))
            }
            (None, Some(_)) => {
                return Err(Error::InvalidNetwork(format!(
                    "layer {i} is missing parameters"
                )))
            }
        }
    }
    Ok(())
}

impl FloatNetwork {
    pub fn new(arch: Architecture, params: Vec<Option<FloatLayerParams>>) -> Result<Self> {
        check_params(&arch, &params, |p| {
            (
                p.weight.shape.clone(),
                p.bias.as_ref().map(|b| b.shape.clone()),
            )
        })?;
        Ok(Self { arch, params })
    }
}

impl IntNetwork {
    pub fn new(
        arch: Architecture,
        params: Vec<Option<IntLayerParams>>,
        quant: Option<QuantInfo>,
    ) -> Result<Self> {
        check_params(&arch, &params, |p| {
            (
                p.weight.shape().to_vec(),
                p.bias.as_ref().map(|b| b.shape().to_vec()),
            )
        })?;
        Ok(Self {
            arch,
            params,
            quant,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Params {
    Float {
        layers: Vec<Option<FloatLayerParams>>,
    },
    Int {
        layers: Vec<Option<IntLayerParams>>,
        quant: Option<QuantInfo>,
    },
}

/// On-disk `.fiwnet.json` document. `params` is absent for architecture-only
/// configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkDoc {
    pub format: String,
    pub version: u32,
    pub arch: Architecture,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Params>,
    /// Free-form provenance (run manifest, training config, metrics).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl NetworkDoc {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: NetworkDoc = serde_json::from_str(text)?;
        if doc.format != FORMAT_TAG {
            return Err(Error::InvalidNetwork(format!(
                "unexpected format tag `{}`",
                doc.format
            )));
        }
        if doc.version != FORMAT_VERSION {
            return Err(Error::InvalidNetwork(format!(
                "unsupported format version {}",
                doc.version
            )));
        }
        doc.arch.shapes()?;
        Ok(doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn architecture(arch: Architecture) -> Self {
        Self {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            arch,
            params: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn into_float(self) -> Result<FloatNetwork> {
        match self.params {
            Some(Params::Float { layers }) => FloatNetwork::new(self.arch, layers),
            _ => Err(Error::InvalidNetwork(
                "document does not hold float parameters".into(),
            )),
        }
    }

    pub fn into_int(self) -> Result<IntNetwork> {
        match self.params {
            Some(Params::Int { layers, quant }) => IntNetwork::new(self.arch, layers, quant),
            _ => Err(Error::InvalidNetwork(
                "document does not hold integer parameters".into(),
            )),
        }
    }
}

impl From<FloatNetwork> for NetworkDoc {
    fn from(net: FloatNetwork) -> Self {
        Self {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            arch: net.arch,
            params: Some(Params::Float { layers: net.params }),
            meta: BTreeMap::new(),
        }
    }
}

impl From<IntNetwork> for NetworkDoc {
    fn from(net: IntNetwork) -> Self {
        Self {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            arch: net.arch,
            params: Some(Params::Int {
                layers: net.params,
                quant: net.quant,
            }),
            meta: BTreeMap::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_architectures() {
        for arch in [Architecture::mnist(), Architecture::cifar()] {
            let shapes = arch.shapes().unwrap();
            assert_eq!(*shapes.last().unwrap(), Shape::Flat(10));
            assert!(matches!(
                arch.layers.last(),
                Some(LayerSpec::Dense { out_features: 10 })
            ));
        }
        let mnist = Architecture::mnist();
        assert_eq!(mnist.input_shape, [1, 28, 28]);
        assert_eq!(mnist.input_bits, 2);
        let convs = mnist
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv2d { .. }))
            .count();
        let squares = mnist
            .layers
            .iter()
            .filter(|l| **l == LayerSpec::Square)
            .count();
        assert_eq!((convs, squares), (2, 2));
        let cifar = Architecture::cifar();
        assert_eq!(cifar.input_shape, [3, 32, 32]);
        assert_eq!(cifar.layers.len(), 10);
        assert!(cifar
            .layers
            .iter()
            .any(|l| matches!(l, LayerSpec::SumPool { .. })));
    }

    #[test]
    fn shape_errors() {
        let arch = Architecture {
            name: "bad".into(),
            input_shape: [1, 4, 4],
            input_bits: 2,
            layers: vec![LayerSpec::Dense { out_features: 3 }],
        };
        assert!(matches!(arch.shapes(), Err(Error::InvalidNetwork(_))));
        let empty = Architecture {
            layers: vec![],
            ..arch.clone()
        };
        assert!(empty.shapes().is_err());
        let big_kernel = Architecture {
            layers: vec![LayerSpec::Conv2d {
                out_channels: 1,
                kernel_h: 5,
                kernel_w: 5,
                stride: 1,
            }],
            ..arch
        };
        assert!(big_kernel.shapes().is_err());
    }

    #[test]
    fn doc_rejects_wrong_tag() {
        let mut doc = NetworkDoc::architecture(Architecture::mnist());
        doc.format = "other".into();
        let js = serde_json::to_string(&doc).unwrap();
        assert!(NetworkDoc::from_json(&js).is_err());
    }
}
