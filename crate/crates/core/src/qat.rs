//! Float and quantisation-aware training.
//!
//! QAT runs the forward pass with fake-quantised weights (quantise, then
//! immediately dequantise) so the network learns around the rounding error.
//! Only weights are fake-quantised; activations and biases stay float. The
//! rounding step is bypassed in the backward pass (straight-through
//! estimator), except where the quantiser clamps, which blocks the gradient.
//!
//! Master weights always stay float. A trained network is turned into an
//! integer one with [`crate::network::quantise_network`] using the same
//! bits and scale rule.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::network::{
    argmax, float_infer, predict_int_batch, Architecture, FloatLayerParams, FloatNetwork,
    IntNetwork, LayerSpec, Shape,
};
use crate::quant::{fake_quant_with_mask, input_levels, quantise_pixel, QuantScheme, ScaleRule};
use crate::tensor::FloatTensor;

/// Missing fields in a JSON config take their [`Default`] values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Weight bits for fake quantisation; `None` trains a float baseline.
    pub bits: Option<u32>,
    pub scale_rule: ScaleRule,
    pub use_bias: bool,
    /// Multiplier on the Glorot-uniform initialisation range.
    pub init_gain: f64,
    /// Also differentiate through the max_abs scale statistic, so the loss
    /// can shrink the scale when too many weights round to zero.
    pub scale_grad: bool,
    /// Rescale each batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.05,
            lr_decay: 0.8,
            optimizer: Optimizer::default(),
            seed: 1,
            bits: None,
            scale_rule: ScaleRule::MaxAbs,
            use_bias: true,
            init_gain: 1.0,
            clip_norm: None,
            scale_grad: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// Heavy-ball momentum; 0 gives plain SGD.
    Sgd {
        momentum: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Sgd { momentum: 0.0 }
    }
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter optimiser state, flattened in parameter order.
struct OptimizerState {
    kind: Optimizer,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

impl OptimizerState {
    fn new(kind: Optimizer, net: &FloatNetwork) -> Self {
        let n = param_refs(net).map(|p| p.len()).sum();
        Self {
            kind,
            first: vec![0.0; n],
            second: vec![0.0; n],
            steps: 0,
        }
    }

    fn step(&mut self, net: &mut FloatNetwork, grads: &GradientSet, lr: f64) {
        self.steps += 1;
        let grads: Vec<f64> = grads
            .layers
            .iter()
            .flatten()
            .flat_map(|(w, b)| w.iter().chain(b.iter().flatten()).copied())
            .collect();
        let params = net.params.iter_mut().flatten().flat_map(|p| {
            p.weight
                .data
                .iter_mut()
                .chain(p.bias.iter_mut().flat_map(|b| b.data.iter_mut()))
        });
        match self.kind {
            Optimizer::Sgd { momentum } => {
                for ((w, g), v) in params.zip(&grads).zip(&mut self.first) {
                    *v = momentum * *v + g;
                    *w -= lr * *v;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.steps);
                let c2 = 1.0 - beta2.powi(self.steps);
                for (((w, g), m), v) in params
                    .zip(&grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

fn param_refs(net: &FloatNetwork) -> impl Iterator<Item = &[f64]> {
    net.params
        .iter()
        .flatten()
        .flat_map(|p| std::iter::once(&p.weight.data[..]).chain(p.bias.iter().map(|b| &b.data[..])))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.bits {
            if ![2, 3, 4, 8, 32].contains(&b) {
                return Err(Error::InvalidBits {
                    bits: b,
                    reason: "training supports 2, 3, 4, 8 or 32 weight bits",
                });
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Degenerate(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Degenerate(
                "learning rate must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Gradients congruent with a network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<Option<(Vec<f64>, Option<Vec<f64>>)>>,
}

impl GradientSet {
    pub fn zeros_like(net: &FloatNetwork) -> Self {
        Self {
            layers: net
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| {
                        (
                            vec![0.0; p.weight.len()],
                            p.bias.as_ref().map(|b| vec![0.0; b.len()]),
                        )
                    })
                })
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some((aw, ab)), Some((bw, bb))) = (a, b) {
                aw.iter_mut().zip(bw).for_each(|(x, y)| *x += y);
                if let (Some(ab), Some(bb)) = (ab, bb) {
                    ab.iter_mut().zip(bb).for_each(|(x, y)| *x += y);
                }
            }
        }
    }

    pub fn norm(&self) -> f64 {
        let mut sum = 0.0;
        for (w, b) in self.layers.iter().flatten() {
            sum += w.iter().map(|x| x * x).sum::<f64>();
            if let Some(b) = b {
                sum += b.iter().map(|x| x * x).sum::<f64>();
            }
        }
        sum.sqrt()
    }

    fn scale(&mut self, k: f64) {
        for (w, b) in self.layers.iter_mut().flatten() {
            w.iter_mut().for_each(|x| *x *= k);
            if let Some(b) = b {
                b.iter_mut().for_each(|x| *x *= k);
            }
        }
    }
}

/// Network with fake-quantised weights plus the straight-through masks.
pub struct EffectiveWeights {
    pub net: FloatNetwork,
    pub masks: Vec<Option<Vec<bool>>>,
    pub schemes: Vec<Option<QuantScheme>>,
}

/// Replace every weight tensor by its fake-quantised version. With
/// `bits == None` this is the identity with all-pass masks.
pub fn effective_weights(
    net: &FloatNetwork,
    bits: Option<u32>,
    rule: ScaleRule,
) -> Result<EffectiveWeights> {
    let mut out = net.clone();
    let mut masks = Vec::with_capacity(net.params.len());
    let mut schemes = vec![None; net.params.len()];
    for (p, slot) in out.params.iter_mut().zip(&mut schemes) {
        match (p, bits) {
            (Some(p), Some(b)) => {
                // An all-zero tensor has no max_abs scale; it is already exact.
                if p.weight.data.iter().all(|w| *w == 0.0) && rule != ScaleRule::Unit {
                    masks.push(Some(vec![true; p.weight.len()]));
                    continue;
                }
                let (v, m, scheme) = fake_quant_with_mask(&p.weight.data, b, rule)?;
                p.weight.data = v;
                masks.push(Some(m));
                *slot = Some(scheme);
            }
            (Some(p), None) => masks.push(Some(vec![true; p.weight.len()])),
            (None, _) => masks.push(None),
        }
    }
    Ok(EffectiveWeights {
        net: out,
        masks,
        schemes,
    })
}

/// Loss and gradients of one sample under effective weights `net`.
fn sample_grad(
    net: &FloatNetwork,
    shapes: &[Shape],
    x: &[f64],
    label: usize,
) -> (f64, usize, GradientSet) {
    // Forward, keeping every layer input.
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(net.arch.layers.len() + 1);
    acts.push(x.to_vec());
    for (i, layer) in net.arch.layers.iter().enumerate() {
        let input = &acts[i];
        let out = match (*layer, shapes[i]) {
            (
                LayerSpec::Conv2d {
                    out_channels,
                    kernel_h,
                    kernel_w,
                    stride,
                },
                Shape::Image { c, h, w },
            ) => {
                let p = net.params[i].as_ref().unwrap();
                crate::network::kernels::conv2d(
                    input,
                    (c, h, w),
                    &p.weight.data,
                    p.bias.as_ref().map(|b| &b.data[..]),
                    out_channels,
                    (kernel_h, kernel_w),
                    stride,
                )
            }
            (LayerSpec::Square, _) => input.iter().map(|v| v * v).collect(),
            (LayerSpec::SumPool { window, stride }, Shape::Image { c, h, w }) => {
                crate::network::kernels::sum_pool(input, (c, h, w), window, stride)
            }
            (LayerSpec::Flatten, _) => input.clone(),
            (LayerSpec::Dense { out_features }, _) => {
                let p = net.params[i].as_ref().unwrap();
                crate::network::kernels::dense(
                    input,
                    &p.weight.data,
                    p.bias.as_ref().map(|b| &b.data[..]),
                    out_features,
                )
            }
            _ => unreachable!("shapes validated"),
        };
        acts.push(out);
    }

    let logits = acts.last().unwrap();
    let (loss, mut grad) = softmax_cross_entropy(logits, label);
    let pred = argmax(logits);

    let mut grads = GradientSet::zeros_like(net);
    for i in (0..net.arch.layers.len()).rev() {
        let input = &acts[i];
        grad = match (net.arch.layers[i], shapes[i]) {
            (
                LayerSpec::Conv2d {
                    out_channels,
                    kernel_h: kh,
                    kernel_w: kw,
                    stride,
                },
                Shape::Image { c, h, w },
            ) => {
                let p = net.params[i].as_ref().unwrap();
                let (gw, gb) = grads.layers[i].as_mut().unwrap();
                let oh = (h - kh) / stride + 1;
                let ow = (w - kw) / stride + 1;
                let mut gx = vec![0.0; input.len()];
                for o in 0..out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = grad[(o * oh + oy) * ow + ox];
                            if let Some(gb) = gb.as_mut() {
                                gb[o] += g;
                            }
                            if g == 0.0 {
                                continue;
                            }
                            for ci in 0..c {
                                for dy in 0..kh {
                                    let row = (ci * h + oy * stride + dy) * w + ox * stride;
                                    let wrow = ((o * c + ci) * kh + dy) * kw;
                                    for dx in 0..kw {
                                        gw[wrow + dx] += g * input[row + dx];
                                        gx[row + dx] += g * p.weight.data[wrow + dx];
                                    }
                                }
                            }
                        }
                    }
                }
                gx
            }
            (LayerSpec::Square, _) => input.iter().zip(&grad).map(|(x, g)| 2.0 * x * g).collect(),
            (LayerSpec::SumPool { window, stride }, Shape::Image { c, h, w }) => {
                let oh = (h - window) / stride + 1;
                let ow = (w - window) / stride + 1;
                let mut gx = vec![0.0; input.len()];
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = grad[(ci * oh + oy) * ow + ox];
                            for dy in 0..window {
                                let row = (ci * h + oy * stride + dy) * w + ox * stride;
                                for dx in 0..window {
                                    gx[row + dx] += g;
                                }
                            }
                        }
                    }
                }
                gx
            }
            (LayerSpec::Flatten, _) => grad,
            (LayerSpec::Dense { out_features }, _) => {
                let p = net.params[i].as_ref().unwrap();
                let (gw, gb) = grads.layers[i].as_mut().unwrap();
                let n = input.len();
                let mut gx = vec![0.0; n];
                for o in 0..out_features {
                    let g = grad[o];
                    if let Some(gb) = gb.as_mut() {
                        gb[o] += g;
                    }
                    let row = &p.weight.data[o * n..(o + 1) * n];
                    for j in 0..n {
                        gw[o * n + j] += g * input[j];
                        gx[j] += g * row[j];
                    }
                }
                gx
            }
            _ => unreachable!("shapes validated"),
        };
    }
    (loss, pred, grads)
}

/// Numerically stable softmax cross-entropy and its gradient w.r.t. logits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + m - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Mean loss and gradients over a batch.
///
/// The forward pass uses fake-quantised weights when `cfg.bits` is set;
/// gradients are returned w.r.t. the float master weights, masked where the
/// quantiser clamps.
pub fn forward_backward(
    net: &FloatNetwork,
    batch: &[(FloatTensor, usize)],
    cfg: &TrainConfig,
) -> Result<(f64, GradientSet)> {
    let (loss, _, grads) = batch_step(net, batch, cfg)?;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            step: 0,
            loss,
        });
    }
    Ok((loss, grads))
}

fn batch_step(
    net: &FloatNetwork,
    batch: &[(FloatTensor, usize)],
    cfg: &TrainConfig,
) -> Result<(f64, usize, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let shapes = net.arch.shapes()?;
    for (x, _) in batch {
        if x.shape != net.arch.input_shape {
            return Err(Error::ShapeMismatch {
                expected: net.arch.input_shape.to_vec(),
                actual: x.shape.clone(),
            });
        }
    }
    let eff = effective_weights(net, cfg.bits, cfg.scale_rule)?;
    // Per-sample results are reduced in batch order, so the sum does not
    // depend on thread scheduling.
    let per_sample: Vec<(f64, usize, GradientSet)> = batch
        .par_iter()
        .map(|(x, y)| sample_grad(&eff.net, &shapes, &x.data, *y))
        .collect();
    let mut total = GradientSet::zeros_like(net);
    let mut loss = 0.0;
    let mut correct = 0;
    for ((l, pred, g), (_, y)) in per_sample.iter().zip(batch) {
        loss += l;
        correct += usize::from(pred == y);
        total.add_assign(g);
    }
    let k = 1.0 / batch.len() as f64;
    total.scale(k);
    for (i, (g, mask)) in total.layers.iter_mut().zip(&eff.masks).enumerate() {
        let (Some((gw, _)), Some(mask)) = (g, mask) else {
            continue;
        };
        let scale_term = match &eff.schemes[i] {
            Some(scheme) if cfg.scale_grad && cfg.scale_rule == ScaleRule::MaxAbs => {
                let master = &net.params[i].as_ref().unwrap().weight.data;
                let fq = &eff.net.params[i].as_ref().unwrap().weight.data;
                Some(max_abs_scale_grad(master, fq, gw, mask, scheme))
            }
            _ => None,
        };
        gw.iter_mut().zip(mask).for_each(|(g, &m)| {
            if !m {
                *g = 0.0
            }
        });
        if let Some((idx, extra)) = scale_term {
            gw[idx] += extra;
        }
    }
    Ok((loss * k, correct, total))
}

/// Gradient reaching the largest-magnitude weight through `S = max|w| / q_max`.
///
/// With `w~ = S q` and rounding treated as identity, `dw~_j/dS` is
/// `q_j - w_j/S` inside the range and `q_j` where clamped.
fn max_abs_scale_grad(
    master: &[f64],
    fake: &[f64],
    grad: &[f64],
    mask: &[bool],
    scheme: &QuantScheme,
) -> (usize, f64) {
    let s = scheme.scale_f64();
    let qmax = scheme.range().1 as f64;
    let (idx, top) = master
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |(bi, bv), (i, w)| {
            if w.abs() > bv {
                (i, w.abs())
            } else {
                (bi, bv)
            }
        });
    let ds: f64 = master
        .iter()
        .zip(fake)
        .zip(grad.iter().zip(mask))
        .map(|((w, f), (g, &inside))| {
            let q = f / s;
            g * if inside { q - w / s } else { q }
        })
        .sum();
    let sign = if master[idx] < 0.0 { -1.0 } else { 1.0 };
    debug_assert!(top > 0.0);
    (idx, sign * ds / qmax)
}

/// `w <- w - lr * g` on the float master weights.
pub fn sgd_step(net: &mut FloatNetwork, grads: &GradientSet, lr: f64) {
    for (p, g) in net.params.iter_mut().zip(&grads.layers) {
        if let (Some(p), Some((gw, gb))) = (p, g) {
            p.weight
                .data
                .iter_mut()
                .zip(gw)
                .for_each(|(w, g)| *w -= lr * g);
            if let (Some(b), Some(gb)) = (p.bias.as_mut(), gb) {
                b.data.iter_mut().zip(gb).for_each(|(w, g)| *w -= lr * g);
            }
        }
    }
}

/// Seeded Glorot-uniform initialisation; biases start at zero.
pub fn init_network(arch: &Architecture, cfg: &TrainConfig) -> Result<FloatNetwork> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = arch
        .param_shapes()?
        .into_iter()
        .map(|p| {
            p.map(|(wshape, blen)| {
                let (fan_in, fan_out) = match wshape.len() {
                    4 => (
                        wshape[1] * wshape[2] * wshape[3],
                        wshape[0] * wshape[2] * wshape[3],
                    ),
                    _ => (wshape[1], wshape[0]),
                };
                let limit = cfg.init_gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
                let len = wshape.iter().product();
                let data = (0..len).map(|_| rng.gen_range(-limit..limit)).collect();
                FloatLayerParams {
                    weight: FloatTensor {
                        shape: wshape,
                        data,
                    },
                    bias: cfg.use_bias.then(|| FloatTensor::zeros(vec![blen])),
                }
            })
        })
        .collect();
    FloatNetwork::new(arch.clone(), params)
}

/// Float inputs seen by a network reading `b_in`-bit quantised pixels:
/// `q / (2^b_in - 1)`.
pub fn float_inputs(ds: &LabeledDataset, b_in: u32) -> Result<Vec<FloatTensor>> {
    let levels = input_levels(b_in)?;
    Ok(ds
        .images
        .iter()
        .map(|img| FloatTensor {
            shape: ds.shape.to_vec(),
            data: img
                .iter()
                .map(|&p| quantise_pixel(p, levels) as f64 / levels as f64)
                .collect(),
        })
        .collect())
}

/// Fraction of samples whose argmax (ties to the lowest index) matches.
pub fn accuracy_from_predictions(preds: &[usize], labels: &[u8]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Degenerate("accuracy of an empty dataset".into()));
    }
    let correct = preds
        .iter()
        .zip(labels)
        .filter(|(p, l)| **p == **l as usize)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Accuracy of a float network on a labeled dataset.
pub fn evaluate(net: &FloatNetwork, ds: &LabeledDataset) -> Result<f64> {
    let inputs = float_inputs(ds, net.arch.input_bits)?;
    let preds = inputs
        .par_iter()
        .map(|x| float_infer(net, x).map(|l| argmax(&l)))
        .collect::<Result<Vec<_>>>()?;
    accuracy_from_predictions(&preds, &ds.labels)
}

/// Accuracy of exact integer inference.
pub fn evaluate_int(net: &IntNetwork, ds: &LabeledDataset) -> Result<f64> {
    let preds = predict_int_batch(net, &ds.int_inputs(net.arch.input_bits)?)?;
    accuracy_from_predictions(&preds, &ds.labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

pub struct TrainOutcome {
    pub net: FloatNetwork,
    pub log: Vec<EpochLog>,
}

/// Shuffled minibatch SGD. Test accuracy is measured on the effective
/// (fake-quantised) network.
pub fn train(
    arch: &Architecture,
    cfg: &TrainConfig,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Degenerate(
            "training needs non-empty train and test sets".into(),
        ));
    }
    let mut net = init_network(arch, cfg)?;
    let inputs = float_inputs(train_set, arch.input_bits)?;
    let samples: Vec<(FloatTensor, usize)> = inputs
        .into_iter()
        .zip(train_set.labels.iter().map(|&l| l as usize))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut opt = OptimizerState::new(cfg.optimizer, &net);
    let mut lr = cfg.learning_rate;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(FloatTensor, usize)> =
                chunk.iter().map(|&i| samples[i].clone()).collect();
            let (loss, right, mut grads) = batch_step(&net, &batch, cfg)?;
            if !loss.is_finite() {
                log::error!("diverged at epoch {epoch} step {step}: loss {loss}");
                return Err(Error::Diverged { epoch, step, loss });
            }
            loss_sum += loss * chunk.len() as f64;
            correct += right;
            if let Some(max) = cfg.clip_norm {
                let norm = grads.norm();
                if norm > max {
                    grads.scale(max / norm);
                }
            }
            opt.step(&mut net, &grads, lr);
        }
        let eff = effective_weights(&net, cfg.bits, cfg.scale_rule)?;
        let entry = EpochLog {
            epoch,
            loss: loss_sum / samples.len() as f64,
            train_acc: correct as f64 / samples.len() as f64,
            test_acc: evaluate(&eff.net, test_set)?,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train {:.4} test {:.4}",
            entry.loss,
            entry.train_acc,
            entry.test_acc
        );
        log.push(entry);
        lr *= cfg.lr_decay;
    }
    Ok(TrainOutcome { net, log })
}
