//! Encrypted inference over simulated BFV slot vectors.
//!
//! [`compile`] lowers an integer network into an [`EncPlan`]: each input
//! channel is packed into its own vector, convolutions and pooling use
//! rotations plus masked plaintext products, the dense layer uses the
//! diagonal method, and a compaction stage gathers strided outputs into one
//! contiguous vector before it. [`run_encrypted_inference`] replays the plan
//! once per RNS modulus and recombines the logits with the CRT.

mod layout;
mod plan;

use num_bigint::BigInt;
use num_traits::Zero;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use layout::SlotLayout;
pub use plan::{
    check_plan, compile, CompileOptions, EncPlan, HeOp, LayerOps, OpCounts, PlainValues,
    PlainVector, Reg,
};

use crate::bigtensor::IntTensor;
use crate::error::{Error, Result};
use crate::he_sim::{reduce, RnsContext, SlotVector};
use plan::{Builder, Value};

/// Pack each channel of a `[c, h, w]` image row-major into its own vector.
pub fn pack_channels(image: &IntTensor, t: u64, n: usize) -> Result<(Vec<SlotVector>, SlotLayout)> {
    let [c, h, w] = image.shape()[..] else {
        return Err(Error::Layout(format!(
            "expected a [c, h, w] image, got {:?}",
            image.shape()
        )));
    };
    let layout = SlotLayout::packed(c, h, w);
    layout.check(n)?;
    let vectors = image
        .data()
        .chunks(h * w)
        .map(|ch| SlotVector::encode(ch, t, n))
        .collect::<Result<_>>()?;
    Ok((vectors, layout))
}

fn plain_vector(plan: &EncPlan, index: usize, t: u64) -> Result<SlotVector> {
    let pv = &plan.plains[index];
    let slots = &plan.patterns[pv.pattern];
    let entries: Vec<(usize, u64)> = match &pv.values {
        PlainValues::Uniform { value } => {
            let r = reduce(value, t);
            slots.iter().map(|&s| (s, r)).collect()
        }
        PlainValues::PerSlot { values } => slots
            .iter()
            .zip(values)
            .map(|(&s, v)| (s, reduce(v, t)))
            .collect(),
    };
    SlotVector::from_sparse(plan.n, t, &entries)
}

/// Replay `plan` on one instance. Registers are dropped after their last
/// use.
pub fn execute(plan: &EncPlan, inputs: &[SlotVector], t: u64) -> Result<Vec<SlotVector>> {
    if inputs.len() != plan.input_layout.vectors() {
        return Err(Error::SlotMismatch(format!(
            "plan reads {} input vectors, got {}",
            plan.input_layout.vectors(),
            inputs.len()
        )));
    }
    if let Some(v) = inputs.iter().find(|v| v.n() != plan.n || v.modulus() != t) {
        return Err(Error::SlotMismatch(format!(
            "input vector {v:?} does not match N = {}, t = {t}",
            plan.n
        )));
    }
    let keep = plan.ops.len();
    let mut last_use = vec![0usize; plan.registers];
    for (i, op) in plan.ops.iter().enumerate() {
        for s in op.sources() {
            last_use[s] = i;
        }
    }
    for r in plan.outputs.iter().flatten() {
        last_use[*r] = keep;
    }

    let mut regs: Vec<Option<SlotVector>> = vec![None; plan.registers];
    let get = |regs: &[Option<SlotVector>], r: Reg| -> Result<SlotVector> {
        regs[r]
            .clone()
            .ok_or_else(|| Error::Layout(format!("register {r} read after release")))
    };
    for (i, op) in plan.ops.iter().enumerate() {
        let value = match *op {
            HeOp::Load { channel, .. } => inputs[channel].clone(),
            HeOp::Rotate { src, k, .. } => regs[src]
                .as_ref()
                .map(|v| v.rotate(k as i64))
                .ok_or_else(|| Error::Layout(format!("register {src} read after release")))?,
            HeOp::MulPlain { src, plain, .. } => {
                get(&regs, src)?.mul_plain(&plain_vector(plan, plain, t)?)?
            }
            HeOp::MulCipher { a, b, .. } => {
                let x = get(&regs, a)?;
                x.mul_cipher(regs[b].as_ref().expect("checked plan"))?
            }
            HeOp::Add { a, b, .. } => {
                get(&regs, a)?.add(regs[b].as_ref().expect("checked plan"))?
            }
            HeOp::AddPlain { src, plain, .. } => {
                get(&regs, src)?.add(&plain_vector(plan, plain, t)?)?
            }
            HeOp::Encode { plain, .. } => plain_vector(plan, plain, t)?,
        };
        regs[op.dst()] = Some(value);
        for s in op.sources() {
            if last_use[s] == i {
                regs[s] = None;
            }
        }
    }
    plan.outputs
        .iter()
        .map(|r| match r {
            Some(r) => get(&regs, *r),
            None => SlotVector::zeros(plan.n, t),
        })
        .collect()
}

/// Relative cost of each op kind for [`OpCountReport::weighted_cost`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub rotation: f64,
    pub plain_mul: f64,
    pub cipher_mul: f64,
    pub addition: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            rotation: 1.0,
            plain_mul: 1.0,
            cipher_mul: 1.0,
            addition: 1.0,
        }
    }
}

impl CostModel {
    pub fn cost(&self, c: &OpCounts) -> f64 {
        self.rotation * c.rotations as f64
            + self.plain_mul * c.plain_muls as f64
            + self.cipher_mul * c.cipher_muls as f64
            + self.addition * c.additions as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCountReport {
    pub rotations: u64,
    pub plain_muls: u64,
    pub cipher_muls: u64,
    pub additions: u64,
    /// Ops removed by zero skipping, per kind.
    pub skipped: OpCounts,
    pub instances: usize,
    /// Ops of one instance.
    pub total_ops: u64,
    /// Ops if every instance runs one after another.
    pub sequential_cost: u64,
}

impl OpCountReport {
    pub fn new(plan: &EncPlan, instances: usize) -> Self {
        let c = plan.counts();
        Self {
            rotations: c.rotations,
            plain_muls: c.plain_muls,
            cipher_muls: c.cipher_muls,
            additions: c.additions,
            skipped: plan.skipped(),
            instances,
            total_ops: c.total(),
            sequential_cost: c.total() * instances as u64,
        }
    }

    pub fn counts(&self) -> OpCounts {
        OpCounts {
            rotations: self.rotations,
            plain_muls: self.plain_muls,
            cipher_muls: self.cipher_muls,
            additions: self.additions,
        }
    }

    /// Sequential cost under per-op weights.
    pub fn weighted_cost(&self, model: &CostModel) -> f64 {
        model.cost(&self.counts()) * self.instances as f64
    }

    /// Accumulate another run (e.g. the next image).
    pub fn merge(&mut self, other: &OpCountReport) {
        self.rotations += other.rotations;
        self.plain_muls += other.plain_muls;
        self.cipher_muls += other.cipher_muls;
        self.additions += other.additions;
        self.skipped.merge(&other.skipped);
        self.instances = self.instances.max(other.instances);
        self.total_ops += other.total_ops;
        self.sequential_cost += other.sequential_cost;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeInference {
    pub logits: IntTensor,
    pub report: OpCountReport,
}

/// Run `plan` on `image` under every modulus of `ctx` and CRT-decode the
/// outputs.
pub fn run_encrypted_inference(
    plan: &EncPlan,
    image: &IntTensor,
    ctx: &RnsContext,
) -> Result<HeInference> {
    if image.shape() != &plan.input_shape[..] {
        return Err(Error::ShapeMismatch {
            expected: plan.input_shape.clone(),
            actual: image.shape().to_vec(),
        });
    }
    if ctx.n() != plan.n {
        return Err(Error::SlotMismatch(format!(
            "plan compiled for N = {}, context has N = {}",
            plan.n,
            ctx.n()
        )));
    }
    if let Some(fiw) = plan.required_fiw {
        let have = ctx.product().bits();
        // T >= 2^fiw, i.e. T has more than fiw bits (T is odd, never 2^fiw).
        if have <= fiw as u64 {
            return Err(Error::ModulusTooSmall { have, need: fiw });
        }
    }
    let per_instance: Vec<Vec<SlotVector>> = ctx
        .moduli()
        .par_iter()
        .map(|&t| {
            let (inputs, _) = pack_channels(image, t, plan.n)?;
            execute(plan, &inputs, t)
        })
        .collect::<Result<_>>()?;

    let layout = plan.output_layout;
    let mut logits = vec![BigInt::zero(); layout.len()];
    for v in 0..layout.vectors() {
        let (indices, slots): (Vec<usize>, Vec<usize>) = (0..layout.len())
            .filter_map(|f| {
                let (vec, slot) = layout.slot_of(f);
                (vec == v).then_some((f, slot))
            })
            .unzip();
        let residues: Vec<SlotVector> = per_instance.iter().map(|outs| outs[v].clone()).collect();
        for (f, x) in indices
            .into_iter()
            .zip(ctx.decode_slots(&residues, &slots)?)
        {
            logits[f] = x;
        }
    }
    Ok(HeInference {
        logits: IntTensor::new(plan.output_shape.clone(), logits)?,
        report: OpCountReport::new(plan, ctx.instances()),
    })
}

/// Build a plan fragment over already-packed inputs and run it.
fn run_fragment(
    inputs: &[SlotVector],
    layout: &SlotLayout,
    options: CompileOptions,
    emit: impl FnOnce(&mut Builder, Vec<Value>) -> Result<(Vec<Value>, SlotLayout)>,
) -> Result<(Vec<SlotVector>, SlotLayout, OpCounts)> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::SlotMismatch("no input vectors".into()))?;
    let (n, t) = (first.n(), first.modulus());
    layout.check(n)?;
    if inputs.len() != layout.vectors() {
        return Err(Error::Layout(format!(
            "{} vectors for a layout of {}",
            inputs.len(),
            layout.vectors()
        )));
    }
    let mut b = Builder::new(n, options.skip_zeros);
    let loaded = (0..inputs.len()).map(|c| b.load(c)).collect();
    let (values, out_layout) = emit(&mut b, loaded)?;
    let outputs = values
        .into_iter()
        .map(|v| b.materialise(v))
        .map(Some)
        .collect();
    let counts = OpCounts::of(&b.ops);
    let plan = EncPlan {
        n,
        input_layout: *layout,
        output_layout: out_layout,
        input_shape: vec![],
        output_shape: vec![],
        registers: b.registers(),
        ops: b.ops,
        patterns: b.patterns,
        plains: b.plains,
        outputs,
        layers: vec![],
        options,
        required_fiw: None,
    };
    check_plan(&plan)?;
    Ok((execute(&plan, inputs, t)?, out_layout, counts))
}

/// Rotation-based valid convolution of per-channel vectors.
pub fn conv_rotational(
    inputs: &[SlotVector],
    layout: &SlotLayout,
    weight: &IntTensor,
    bias: Option<&IntTensor>,
    stride: usize,
    options: CompileOptions,
) -> Result<(Vec<SlotVector>, SlotLayout, OpCounts)> {
    run_fragment(inputs, layout, options, |b, v| {
        b.conv(&v, layout, weight, bias, stride)
    })
}

/// Diagonal-method product of a `[d_out, d_in]` matrix with a clean vector
/// holding `d_in` values in its leading slots.
pub fn matvec_diagonal(
    m: &IntTensor,
    v: &SlotVector,
    options: CompileOptions,
) -> Result<(SlotVector, OpCounts)> {
    let [_, d_in] = m.shape()[..] else {
        return Err(Error::Layout(format!("matrix shape {:?}", m.shape())));
    };
    let layout = SlotLayout::Flat {
        len: d_in,
        clean: true,
    };
    let (mut out, _, counts) =
        run_fragment(std::slice::from_ref(v), &layout, options, |b, vals| {
            let (r, l) = b.dense(vals[0], &layout, m, None)?;
            Ok((vec![r], l))
        })?;
    Ok((out.remove(0), counts))
}

/// Slotwise square of a ciphertext.
pub fn square_slots(v: &SlotVector) -> Result<SlotVector> {
    v.mul_cipher(v)
}

/// Rotation-based window sums.
pub fn sumpool_rotational(
    inputs: &[SlotVector],
    layout: &SlotLayout,
    window: usize,
    stride: usize,
) -> Result<(Vec<SlotVector>, SlotLayout)> {
    let (v, l, _) = run_fragment(inputs, layout, CompileOptions::default(), |b, v| {
        b.sum_pool(&v, layout, window, stride)
    })?;
    Ok((v, l))
}

/// Read the elements of `layout` out of decoded single-modulus vectors,
/// lifting residues to the centered range.
pub fn read_layout(vectors: &[SlotVector], layout: &SlotLayout) -> Vec<i128> {
    (0..layout.len())
        .map(|f| {
            let (v, s) = layout.slot_of(f);
            let t = vectors[v].modulus() as i128;
            let x = vectors[v].slots()[s] as i128;
            if x > t / 2 {
                x - t
            } else {
                x
            }
        })
        .collect()
}
