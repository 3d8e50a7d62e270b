//! Compilation of an integer network into HE-legal operations.
//!
//! Plans are in single-assignment form: every op writes a fresh register.
//! Plain vectors (weight masks, biases) are baked into the plan as sparse
//! integers and reduced modulo each instance's prime only at execution time,
//! so one plan serves every RNS instance.

use std::collections::{BTreeMap, HashMap};

use num_bigint::BigInt;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use super::layout::SlotLayout;
use crate::bigtensor::IntTensor;
use crate::error::{Error, Result};
use crate::network::{IntNetwork, LayerSpec, Shape};

pub type Reg = usize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum HeOp {
    /// Read packed input vector `channel`.
    Load {
        dst: Reg,
        channel: usize,
    },
    /// Cyclic left rotation by `k` slots.
    Rotate {
        dst: Reg,
        src: Reg,
        k: usize,
    },
    MulPlain {
        dst: Reg,
        src: Reg,
        plain: usize,
    },
    MulCipher {
        dst: Reg,
        a: Reg,
        b: Reg,
    },
    Add {
        dst: Reg,
        a: Reg,
        b: Reg,
    },
    AddPlain {
        dst: Reg,
        src: Reg,
        plain: usize,
    },
    /// Trivially encrypt a plain vector (a channel with no input terms).
    Encode {
        dst: Reg,
        plain: usize,
    },
}

impl HeOp {
    pub fn dst(&self) -> Reg {
        match *self {
            HeOp::Load { dst, .. }
            | HeOp::Rotate { dst, .. }
            | HeOp::MulPlain { dst, .. }
            | HeOp::MulCipher { dst, .. }
            | HeOp::Add { dst, .. }
            | HeOp::AddPlain { dst, .. }
            | HeOp::Encode { dst, .. } => dst,
        }
    }

    pub fn sources(&self) -> Vec<Reg> {
        match *self {
            HeOp::Load { .. } | HeOp::Encode { .. } => vec![],
            HeOp::Rotate { src, .. } | HeOp::MulPlain { src, .. } | HeOp::AddPlain { src, .. } => {
                vec![src]
            }
            HeOp::MulCipher { a, b, .. } | HeOp::Add { a, b, .. } => vec![a, b],
        }
    }

    pub fn plain(&self) -> Option<usize> {
        match *self {
            HeOp::MulPlain { plain, .. }
            | HeOp::AddPlain { plain, .. }
            | HeOp::Encode { plain, .. } => Some(plain),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlainValues {
    /// The same integer at every slot of the pattern.
    Uniform {
        #[serde(with = "crate::bigtensor::decimal")]
        value: BigInt,
    },
    /// One integer per pattern slot, in pattern order.
    PerSlot {
        #[serde(with = "crate::bigtensor::decimal_vec")]
        values: Vec<BigInt>,
    },
}

/// A plaintext vector: `values` at the slots of `patterns[pattern]`, zero
/// elsewhere.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlainVector {
    pub pattern: usize,
    pub values: PlainValues,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub rotations: u64,
    pub plain_muls: u64,
    pub cipher_muls: u64,
    pub additions: u64,
}

impl OpCounts {
    pub fn total(&self) -> u64 {
        self.rotations + self.plain_muls + self.cipher_muls + self.additions
    }

    pub fn merge(&mut self, other: &OpCounts) {
        self.rotations += other.rotations;
        self.plain_muls += other.plain_muls;
        self.cipher_muls += other.cipher_muls;
        self.additions += other.additions;
    }

    /// `self - other`, saturating at zero.
    pub fn minus(&self, other: &OpCounts) -> OpCounts {
        OpCounts {
            rotations: self.rotations.saturating_sub(other.rotations),
            plain_muls: self.plain_muls.saturating_sub(other.plain_muls),
            cipher_muls: self.cipher_muls.saturating_sub(other.cipher_muls),
            additions: self.additions.saturating_sub(other.additions),
        }
    }

    /// Counts of the ops in a plan slice.
    pub fn of(ops: &[HeOp]) -> OpCounts {
        let mut c = OpCounts::default();
        for op in ops {
            match op {
                HeOp::Rotate { .. } => c.rotations += 1,
                HeOp::MulPlain { .. } => c.plain_muls += 1,
                HeOp::MulCipher { .. } => c.cipher_muls += 1,
                HeOp::Add { .. } | HeOp::AddPlain { .. } => c.additions += 1,
                HeOp::Load { .. } | HeOp::Encode { .. } => {}
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOps {
    pub layer: usize,
    pub kind: String,
    /// Ops emitted for this layer, as a range into `EncPlan::ops`.
    pub ops: (usize, usize),
    pub counts: OpCounts,
    /// Ops the zero-skipping pass removed from this layer.
    pub skipped: OpCounts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileOptions {
    /// Omit multiplications by all-zero plain vectors and everything that
    /// only feeds them.
    pub skip_zeros: bool,
}

impl Default for CompileOptions {
    fn default() -> Self {
        Self { skip_zeros: true }
    }
}

/// A replayable op sequence for one network at one slot count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncPlan {
    #[serde(rename = "N")]
    pub n: usize,
    pub input_layout: SlotLayout,
    pub output_layout: SlotLayout,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub ops: Vec<HeOp>,
    pub patterns: Vec<Vec<usize>>,
    pub plains: Vec<PlainVector>,
    /// One register per output vector; `None` for an all-zero vector.
    pub outputs: Vec<Option<Reg>>,
    pub layers: Vec<LayerOps>,
    pub registers: usize,
    pub options: CompileOptions,
    /// FIW the network is known to need; execution refuses smaller moduli.
    pub required_fiw: Option<u32>,
}

impl EncPlan {
    pub fn counts(&self) -> OpCounts {
        OpCounts::of(&self.ops)
    }

    pub fn skipped(&self) -> OpCounts {
        let mut s = OpCounts::default();
        for l in &self.layers {
            s.merge(&l.skipped);
        }
        s
    }

    pub fn with_required_fiw(mut self, fiw: u32) -> Self {
        self.required_fiw = Some(fiw);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Value {
    /// Known to be zero in every slot; holds no register.
    Zero,
    Reg(Reg),
}

/// Emits ops and interns plain vectors.
pub(crate) struct Builder {
    pub n: usize,
    pub skip: bool,
    pub ops: Vec<HeOp>,
    pub patterns: Vec<Vec<usize>>,
    pattern_ids: HashMap<Vec<usize>, usize>,
    pub plains: Vec<PlainVector>,
    next: Reg,
}

impl Builder {
    pub fn new(n: usize, skip: bool) -> Self {
        Self {
            n,
            skip,
            ops: Vec::new(),
            patterns: Vec::new(),
            pattern_ids: HashMap::new(),
            plains: Vec::new(),
            next: 0,
        }
    }

    pub fn registers(&self) -> usize {
        self.next
    }

    fn fresh(&mut self) -> Reg {
        self.next += 1;
        self.next - 1
    }

    fn pattern(&mut self, slots: Vec<usize>) -> usize {
        if let Some(&id) = self.pattern_ids.get(&slots) {
            return id;
        }
        let id = self.patterns.len();
        self.patterns.push(slots.clone());
        self.pattern_ids.insert(slots, id);
        id
    }

    fn plain(&mut self, pattern: usize, values: PlainValues) -> usize {
        self.plains.push(PlainVector { pattern, values });
        self.plains.len() - 1
    }

    pub fn load(&mut self, channel: usize) -> Value {
        let dst = self.fresh();
        self.ops.push(HeOp::Load { dst, channel });
        Value::Reg(dst)
    }

    fn rotate(&mut self, src: Reg, k: i64) -> Reg {
        let k = k.rem_euclid(self.n as i64) as usize;
        if k == 0 {
            return src;
        }
        let dst = self.fresh();
        self.ops.push(HeOp::Rotate { dst, src, k });
        dst
    }

    fn mul_plain(&mut self, src: Reg, pattern: usize, values: PlainValues) -> Reg {
        let plain = self.plain(pattern, values);
        let dst = self.fresh();
        self.ops.push(HeOp::MulPlain { dst, src, plain });
        dst
    }

    fn add(&mut self, a: Reg, b: Reg) -> Reg {
        let dst = self.fresh();
        self.ops.push(HeOp::Add { dst, a, b });
        dst
    }

    /// Left-fold addition; `Zero` for no terms.
    fn sum(&mut self, terms: &[Reg]) -> Value {
        let Some((&first, rest)) = terms.split_first() else {
            return Value::Zero;
        };
        Value::Reg(rest.iter().fold(first, |acc, &t| self.add(acc, t)))
    }

    /// Add a plain vector, or encode it when the accumulator is zero.
    fn add_plain(&mut self, acc: Value, pattern: usize, values: PlainValues) -> Value {
        let plain = self.plain(pattern, values);
        let dst = self.fresh();
        match acc {
            Value::Reg(src) => self.ops.push(HeOp::AddPlain { dst, src, plain }),
            Value::Zero => self.ops.push(HeOp::Encode { dst, plain }),
        }
        Value::Reg(dst)
    }

    /// Materialise a value as a register (zero vectors become encodes).
    pub fn materialise(&mut self, v: Value) -> Reg {
        match v {
            Value::Reg(r) => r,
            Value::Zero => {
                let p = self.pattern(Vec::new());
                let plain = self.plain(
                    p,
                    PlainValues::Uniform {
                        value: BigInt::zero(),
                    },
                );
                let dst = self.fresh();
                self.ops.push(HeOp::Encode { dst, plain });
                dst
            }
        }
    }

    /// Valid (unpadded) convolution, one output vector per out-channel.
    ///
    /// The rotation of input `c` by the offset of kernel tap `(dy, dx)` is
    /// shared by every output channel; each output channel multiplies it by
    /// a mask holding its weight at the output positions.
    pub fn conv(
        &mut self,
        inputs: &[Value],
        layout: &SlotLayout,
        weight: &IntTensor,
        bias: Option<&IntTensor>,
        stride: usize,
    ) -> Result<(Vec<Value>, SlotLayout)> {
        let SlotLayout::Image {
            channels,
            height,
            width,
            row_step,
            col_step,
            ..
        } = *layout
        else {
            return Err(Error::Layout("convolution needs an image layout".into()));
        };
        let [o_ch, c_in, kh, kw] = weight.shape()[..] else {
            return Err(Error::Layout(format!(
                "conv weight shape {:?}",
                weight.shape()
            )));
        };
        if c_in != channels || inputs.len() != channels || kh > height || kw > width || stride == 0
        {
            return Err(Error::Layout(format!(
                "conv {:?} does not fit input {layout:?}",
                weight.shape()
            )));
        }
        let out = SlotLayout::Image {
            channels: o_ch,
            height: (height - kh) / stride + 1,
            width: (width - kw) / stride + 1,
            row_step: row_step * stride,
            col_step: col_step * stride,
            clean: true,
        };
        out.check(self.n)?;
        let pattern = self.pattern(out.valid_slots());
        let w = weight.data();
        let idx = |o: usize, c: usize, dy: usize, dx: usize| ((o * c_in + c) * kh + dy) * kw + dx;

        let mut rotated: Vec<Option<Reg>> = vec![None; c_in * kh * kw];
        for c in 0..c_in {
            let Value::Reg(src) = inputs[c] else { continue };
            for dy in 0..kh {
                for dx in 0..kw {
                    let used = (0..o_ch).any(|o| !w[idx(o, c, dy, dx)].is_zero());
                    if self.skip && !used {
                        continue;
                    }
                    let k = (dy * row_step + dx * col_step) as i64;
                    rotated[(c * kh + dy) * kw + dx] = Some(self.rotate(src, k));
                }
            }
        }

        let mut outputs = Vec::with_capacity(o_ch);
        for o in 0..o_ch {
            let mut terms = Vec::new();
            for c in 0..c_in {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let Some(r) = rotated[(c * kh + dy) * kw + dx] else {
                            continue;
                        };
                        let wv = &w[idx(o, c, dy, dx)];
                        if self.skip && wv.is_zero() {
                            continue;
                        }
                        terms.push(self.mul_plain(
                            r,
                            pattern,
                            PlainValues::Uniform { value: wv.clone() },
                        ));
                    }
                }
            }
            let mut acc = self.sum(&terms);
            if let Some(b) = bias {
                let bv = &b.data()[o];
                if !(self.skip && bv.is_zero()) {
                    acc = self.add_plain(acc, pattern, PlainValues::Uniform { value: bv.clone() });
                }
            }
            outputs.push(acc);
        }
        Ok((outputs, out))
    }

    pub fn square(&mut self, inputs: &[Value]) -> Vec<Value> {
        inputs
            .iter()
            .map(|v| match *v {
                Value::Zero => Value::Zero,
                Value::Reg(r) => {
                    let dst = self.fresh();
                    self.ops.push(HeOp::MulCipher { dst, a: r, b: r });
                    Value::Reg(dst)
                }
            })
            .collect()
    }

    /// Window sums by rotation; results sit at the top-left slot of each
    /// window, other slots hold partial sums.
    pub fn sum_pool(
        &mut self,
        inputs: &[Value],
        layout: &SlotLayout,
        window: usize,
        stride: usize,
    ) -> Result<(Vec<Value>, SlotLayout)> {
        let SlotLayout::Image {
            channels,
            height,
            width,
            row_step,
            col_step,
            ..
        } = *layout
        else {
            return Err(Error::Layout("pooling needs an image layout".into()));
        };
        if window == 0
            || stride == 0
            || window > height
            || window > width
            || inputs.len() != channels
        {
            return Err(Error::Layout(format!(
                "pool {window}/{stride} does not fit {layout:?}"
            )));
        }
        let out = SlotLayout::Image {
            channels,
            height: (height - window) / stride + 1,
            width: (width - window) / stride + 1,
            row_step: row_step * stride,
            col_step: col_step * stride,
            clean: window == 1 && layout.is_clean(),
        };
        out.check(self.n)?;
        let outputs = inputs
            .iter()
            .map(|v| match *v {
                Value::Zero => Value::Zero,
                Value::Reg(src) => {
                    let mut terms = Vec::with_capacity(window * window);
                    for dy in 0..window {
                        for dx in 0..window {
                            terms.push(self.rotate(src, (dy * row_step + dx * col_step) as i64));
                        }
                    }
                    self.sum(&terms)
                }
            })
            .collect();
        Ok((outputs, out))
    }

    /// Gather every element into one contiguous, clean vector.
    ///
    /// Elements that move by the same rotation are masked out of their
    /// channel together and rotated once.
    pub fn compact(
        &mut self,
        inputs: &[Value],
        layout: &SlotLayout,
    ) -> Result<(Value, SlotLayout)> {
        let len = layout.len();
        let out = SlotLayout::Flat { len, clean: true };
        out.check(self.n)?;
        if let SlotLayout::Flat { clean: true, .. } = layout {
            return Ok((inputs[0], *layout));
        }
        if let SlotLayout::Image {
            channels: 1,
            width,
            row_step,
            col_step: 1,
            clean: true,
            ..
        } = *layout
        {
            if row_step == width {
                return Ok((inputs[0], out));
            }
        }
        let n = self.n;
        let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for f in 0..len {
            let (c, s) = layout.slot_of(f);
            groups.entry((c, (s + n - f) % n)).or_default().push(s);
        }
        let mut terms = Vec::new();
        for ((c, k), slots) in groups {
            let Value::Reg(src) = inputs[c] else { continue };
            let p = self.pattern(slots);
            let masked = self.mul_plain(
                src,
                p,
                PlainValues::Uniform {
                    value: BigInt::from(1),
                },
            );
            terms.push(self.rotate(masked, k as i64));
        }
        Ok((self.sum(&terms), out))
    }

    /// Matrix-vector product by generalised diagonals:
    /// `out = sum_i diag_i * rotate(v, i)` with `diag_i[j] = M[j, (j+i) mod d]`.
    ///
    /// `v` must be clean and contiguous. When `2d <= N` it is first
    /// replicated into slots `d..2d` so the cyclic rotation over N slots
    /// behaves like one over `d`; otherwise `d` is padded to N.
    pub fn dense(
        &mut self,
        input: Value,
        layout: &SlotLayout,
        weight: &IntTensor,
        bias: Option<&IntTensor>,
    ) -> Result<(Value, SlotLayout)> {
        let SlotLayout::Flat {
            len: d_in,
            clean: true,
        } = *layout
        else {
            return Err(Error::Layout(format!(
                "dense needs a clean flat input, got {layout:?}"
            )));
        };
        let [d_out, w_in] = weight.shape()[..] else {
            return Err(Error::Layout(format!(
                "dense weight shape {:?}",
                weight.shape()
            )));
        };
        if w_in != d_in {
            return Err(Error::Layout(format!(
                "dense expects {w_in} inputs, layout has {d_in}"
            )));
        }
        let mut d = d_in.max(d_out);
        if d > self.n {
            return Err(Error::Layout(format!(
                "dense of size {d} exceeds N = {}",
                self.n
            )));
        }
        let replicate = 2 * d <= self.n;
        if !replicate {
            d = self.n;
        }
        let out = SlotLayout::Flat {
            len: d_out,
            clean: true,
        };
        let w = weight.data();
        let diagonal = |i: usize| -> Vec<BigInt> {
            (0..d)
                .map(|j| {
                    let col = (j + i) % d;
                    if j < d_out && col < d_in {
                        w[j * d_in + col].clone()
                    } else {
                        BigInt::zero()
                    }
                })
                .collect()
        };
        let diag_pattern = self.pattern((0..d).collect());

        let mut acc = Value::Zero;
        if let Value::Reg(src) = input {
            let v = if replicate {
                let copy = self.rotate(src, -(d as i64));
                self.add(src, copy)
            } else {
                src
            };
            let mut terms = Vec::new();
            for i in 0..d {
                let diag = diagonal(i);
                if self.skip && diag.iter().all(Zero::is_zero) {
                    continue;
                }
                let r = self.rotate(v, i as i64);
                terms.push(self.mul_plain(r, diag_pattern, PlainValues::PerSlot { values: diag }));
            }
            acc = self.sum(&terms);
        }
        if let Some(b) = bias {
            if !(self.skip && b.is_all_zero()) {
                let p = self.pattern((0..d_out).collect());
                acc = self.add_plain(
                    acc,
                    p,
                    PlainValues::PerSlot {
                        values: b.data().to_vec(),
                    },
                );
            }
        }
        Ok((acc, out))
    }
}

fn compile_once(net: &IntNetwork, n: usize, skip: bool) -> Result<EncPlan> {
    if net.arch.layers.is_empty() {
        return Err(Error::InvalidNetwork(
            "cannot compile a network without layers".into(),
        ));
    }
    let shapes = net.arch.shapes()?;
    let Shape::Image { c, h, w } = shapes[0] else {
        return Err(Error::InvalidNetwork(
            "network input must be an image".into(),
        ));
    };
    let input_layout = SlotLayout::packed(c, h, w);
    input_layout.check(n)?;

    let mut b = Builder::new(n, skip);
    let mut values: Vec<Value> = (0..c).map(|ch| b.load(ch)).collect();
    let mut layout = input_layout;
    let mut layers = Vec::with_capacity(net.arch.layers.len());

    for (i, spec) in net.arch.layers.iter().enumerate() {
        let start = b.ops.len();
        let params = net.params[i].as_ref();
        match *spec {
            LayerSpec::Conv2d { stride, .. } => {
                let p = params.expect("validated network");
                let (v, l) = b.conv(&values, &layout, &p.weight, p.bias.as_ref(), stride)?;
                values = v;
                layout = l;
            }
            LayerSpec::Square => values = b.square(&values),
            LayerSpec::SumPool { window, stride } => {
                let (v, l) = b.sum_pool(&values, &layout, window, stride)?;
                values = v;
                layout = l;
            }
            LayerSpec::Flatten => {
                let (v, l) = b.compact(&values, &layout)?;
                values = vec![v];
                layout = l;
            }
            LayerSpec::Dense { .. } => {
                let p = params.expect("validated network");
                if !layout.is_clean() {
                    let (v, l) = b.compact(&values, &layout)?;
                    values = vec![v];
                    layout = l;
                }
                let (v, l) = b.dense(values[0], &layout, &p.weight, p.bias.as_ref())?;
                values = vec![v];
                layout = l;
            }
        }
        let end = b.ops.len();
        layers.push(LayerOps {
            layer: i,
            kind: spec.name().to_string(),
            ops: (start, end),
            counts: OpCounts::of(&b.ops[start..end]),
            skipped: OpCounts::default(),
        });
    }

    let outputs = values
        .iter()
        .map(|v| match v {
            Value::Reg(r) => Some(*r),
            Value::Zero => None,
        })
        .collect();
    let output_shape = shapes.last().expect("non-empty").dims();
    Ok(EncPlan {
        n,
        input_layout,
        output_layout: layout,
        input_shape: vec![c, h, w],
        output_shape,
        ops: b.ops,
        registers: b.next,
        patterns: b.patterns,
        plains: b.plains,
        outputs,
        layers,
        options: CompileOptions { skip_zeros: skip },
        required_fiw: None,
    })
}

/// Compile `net` for `n` slots. With zero skipping on, each layer also
/// records how many ops the unskipped plan would have had in addition.
pub fn compile(net: &IntNetwork, n: usize, options: CompileOptions) -> Result<EncPlan> {
    if !n.is_power_of_two() {
        return Err(Error::Layout(format!(
            "slot count {n} is not a power of two"
        )));
    }
    let mut plan = compile_once(net, n, options.skip_zeros)?;
    if options.skip_zeros {
        let full = compile_once(net, n, false)?;
        for (l, f) in plan.layers.iter_mut().zip(&full.layers) {
            l.skipped = f.counts.minus(&l.counts);
        }
    }
    check_plan(&plan)?;
    Ok(plan)
}

/// Static legality check: every op reads registers that were written
/// earlier, writes a fresh register, and refers to existing plain vectors
/// and in-range slots.
pub fn check_plan(plan: &EncPlan) -> Result<()> {
    let bad = |msg: String| Err(Error::Layout(format!("illegal plan: {msg}")));
    let mut written = vec![false; plan.registers];
    let inputs = plan.input_layout.vectors();
    for (i, op) in plan.ops.iter().enumerate() {
        for s in op.sources() {
            if s >= plan.registers || !written[s] {
                return bad(format!("op {i} reads register {s} before it is written"));
            }
        }
        if let Some(p) = op.plain() {
            let Some(pv) = plan.plains.get(p) else {
                return bad(format!("op {i} uses missing plain vector {p}"));
            };
            let Some(pat) = plan.patterns.get(pv.pattern) else {
                return bad(format!("plain {p} uses missing pattern {}", pv.pattern));
            };
            if pat.iter().any(|&s| s >= plan.n) {
                return bad(format!("pattern {} addresses a slot beyond N", pv.pattern));
            }
            if let PlainValues::PerSlot { values } = &pv.values {
                if values.len() != pat.len() {
                    return bad(format!(
                        "plain {p} has {} values for {} slots",
                        values.len(),
                        pat.len()
                    ));
                }
            }
        }
        match *op {
            HeOp::Load { channel, .. } if channel >= inputs => {
                return bad(format!("op {i} loads channel {channel} of {inputs}"));
            }
            HeOp::Rotate { k, .. } if k >= plan.n => {
                return bad(format!("op {i} rotates by {k} >= N"));
            }
            _ => {}
        }
        let d = op.dst();
        if d >= plan.registers || written[d] {
            return bad(format!("op {i} writes register {d} twice"));
        }
        written[d] = true;
    }
    for r in plan.outputs.iter().flatten() {
        if !written[*r] {
            return bad(format!("output register {r} never written"));
        }
    }
    if plan.outputs.len() != plan.output_layout.vectors() {
        return bad("output count does not match layout".into());
    }
    Ok(())
}
