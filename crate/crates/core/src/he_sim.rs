//! Plaintext-semantics simulator for BFV batching.
//!
//! A [`SlotVector`] behaves like a batched ciphertext: N residues modulo a
//! plaintext prime t, with slotwise addition and multiplication plus cyclic
//! rotation. Nothing else is exposed, in particular no division and no way
//! to read a single slot inside a computation.
//!
//! Rotation models the slots as one N-cycle. Real BFV batching rotates two
//! rows of N/2 slots independently; the single cycle keeps layer algorithms
//! simpler and is the only deliberate departure from ciphertext behaviour.
//!
//! Large plaintext spaces are split into RNS instances, one per prime, and
//! recombined with the CRT followed by a centered lift.

use std::fmt;

use num_bigint::{BigInt, BigUint};
use num_integer::Integer;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest plaintext modulus accepted, in bits.
pub const MAX_MODULUS_BITS: u32 = 60;

#[derive(Clone, PartialEq, Eq)]
pub struct SlotVector {
    modulus: u64,
    slots: Vec<u64>,
}

impl fmt::Debug for SlotVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shown = self.slots.len().min(8);
        write!(
            f,
            "SlotVector(t={}, N={}, {:?}",
            self.modulus,
            self.slots.len(),
            &self.slots[..shown]
        )?;
        if shown < self.slots.len() {
            write!(f, "..")?;
        }
        write!(f, ")")
    }
}

fn check_geometry(n: usize, t: u64) -> Result<()> {
    if !n.is_power_of_two() {
        return Err(Error::SlotMismatch(format!(
            "slot count {n} is not a power of two"
        )));
    }
    if !(2..1 << MAX_MODULUS_BITS).contains(&t) {
        return Err(Error::SlotMismatch(format!(
            "plaintext modulus {t} outside [2, 2^{MAX_MODULUS_BITS})"
        )));
    }
    Ok(())
}

#[inline]
fn mul_mod(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

/// Reduce a signed integer into `[0, t)`.
pub fn reduce(v: &BigInt, t: u64) -> u64 {
    v.mod_floor(&BigInt::from(t))
        .to_u64()
        .expect("residue below t")
}

/// Reduce a signed machine integer into `[0, t)`.
pub fn reduce_i128(v: i128, t: u64) -> u64 {
    v.rem_euclid(t as i128) as u64
}

impl SlotVector {
    pub fn new(n: usize, t: u64, slots: Vec<u64>) -> Result<Self> {
        check_geometry(n, t)?;
        if slots.len() != n {
            return Err(Error::SlotMismatch(format!(
                "{} slots for N = {n}",
                slots.len()
            )));
        }
        if let Some(bad) = slots.iter().find(|&&s| s >= t) {
            return Err(Error::SlotMismatch(format!(
                "slot value {bad} not below t = {t}"
            )));
        }
        Ok(Self { modulus: t, slots })
    }

    pub fn zeros(n: usize, t: u64) -> Result<Self> {
        check_geometry(n, t)?;
        Ok(Self {
            modulus: t,
            slots: vec![0; n],
        })
    }

    /// Pack values into the leading slots; negative values wrap modulo t
    /// and the remaining slots are zero.
    pub fn encode(values: &[BigInt], t: u64, n: usize) -> Result<Self> {
        if values.len() > n {
            return Err(Error::TooManyValues {
                len: values.len(),
                slots: n,
            });
        }
        let mut v = Self::zeros(n, t)?;
        for (slot, x) in v.slots.iter_mut().zip(values) {
            *slot = reduce(x, t);
        }
        Ok(v)
    }

    pub fn encode_i64(values: &[i64], t: u64, n: usize) -> Result<Self> {
        if values.len() > n {
            return Err(Error::TooManyValues {
                len: values.len(),
                slots: n,
            });
        }
        let mut v = Self::zeros(n, t)?;
        for (slot, &x) in v.slots.iter_mut().zip(values) {
            *slot = reduce_i128(x as i128, t);
        }
        Ok(v)
    }

    /// Build from `(slot, value)` pairs; every other slot is zero.
    pub fn from_sparse(n: usize, t: u64, entries: &[(usize, u64)]) -> Result<Self> {
        let mut v = Self::zeros(n, t)?;
        for &(i, x) in entries {
            if i >= n || x >= t {
                return Err(Error::SlotMismatch(format!(
                    "entry ({i}, {x}) outside N = {n}, t = {t}"
                )));
            }
            v.slots[i] = x;
        }
        Ok(v)
    }

    pub fn n(&self) -> usize {
        self.slots.len()
    }

    pub fn modulus(&self) -> u64 {
        self.modulus
    }

    /// The raw residues. This is a decryption-side view; plans never use it.
    pub fn slots(&self) -> &[u64] {
        &self.slots
    }

    fn check_compatible(&self, other: &SlotVector) -> Result<()> {
        if self.modulus != other.modulus || self.n() != other.n() {
            return Err(Error::SlotMismatch(format!(
                "operands (t={}, N={}) and (t={}, N={})",
                self.modulus,
                self.n(),
                other.modulus,
                other.n()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &SlotVector) -> Result<SlotVector> {
        self.check_compatible(other)?;
        let t = self.modulus;
        Ok(SlotVector {
            modulus: t,
            slots: self
                .slots
                .iter()
                .zip(&other.slots)
                .map(|(&a, &b)| {
                    let s = a + b;
                    if s >= t {
                        s - t
                    } else {
                        s
                    }
                })
                .collect(),
        })
    }

    fn mul(&self, other: &SlotVector) -> Result<SlotVector> {
        self.check_compatible(other)?;
        let t = self.modulus;
        Ok(SlotVector {
            modulus: t,
            slots: self
                .slots
                .iter()
                .zip(&other.slots)
                .map(|(&a, &b)| mul_mod(a, b, t))
                .collect(),
        })
    }

    /// Slotwise product with a plaintext vector.
    pub fn mul_plain(&self, plain: &SlotVector) -> Result<SlotVector> {
        self.mul(plain)
    }

    /// Slotwise product of two ciphertexts.
    pub fn mul_cipher(&self, other: &SlotVector) -> Result<SlotVector> {
        self.mul(other)
    }

    /// Cyclic left rotation: `out[i] = in[(i + k) mod N]`. Negative `k`
    /// rotates right.
    pub fn rotate(&self, k: i64) -> SlotVector {
        let n = self.n();
        let k = k.rem_euclid(n as i64) as usize;
        let mut slots = Vec::with_capacity(n);
        slots.extend_from_slice(&self.slots[k..]);
        slots.extend_from_slice(&self.slots[..k]);
        SlotVector {
            modulus: self.modulus,
            slots,
        }
    }
}

const MR_BASES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

fn pow_mod(mut base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc = 1 % m;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, m);
        }
        base = mul_mod(base, base, m);
        exp >>= 1;
    }
    acc
}

/// Deterministic Miller-Rabin; the first twelve prime bases are exact for
/// every 64-bit input.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for &p in &MR_BASES {
        if n.is_multiple_of(p) {
            return n == p;
        }
    }
    let s = (n - 1).trailing_zeros();
    let d = (n - 1) >> s;
    'witness: for &a in &MR_BASES {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Prime with `p = 1 (mod 2N)`, the condition for slot batching at degree N.
pub fn is_batching_prime(p: u64, n: usize) -> bool {
    let two_n = 2 * n as u64;
    p % two_n == 1 && is_prime(p)
}

/// A set of RNS plaintext moduli sharing one slot count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawContext", into = "RawContext")]
pub struct RnsContext {
    n: usize,
    moduli: Vec<u64>,
    product: BigInt,
    /// `M_i * (M_i^{-1} mod t_i)` for each modulus, where `M_i = T / t_i`.
    crt_coeffs: Vec<BigInt>,
}

#[derive(Serialize, Deserialize)]
struct RawContext {
    #[serde(rename = "N")]
    n: usize,
    moduli: Vec<u64>,
}

impl TryFrom<RawContext> for RnsContext {
    type Error = Error;

    fn try_from(raw: RawContext) -> Result<Self> {
        RnsContext::new(raw.n, raw.moduli)
    }
}

impl From<RnsContext> for RawContext {
    fn from(ctx: RnsContext) -> Self {
        RawContext {
            n: ctx.n,
            moduli: ctx.moduli,
        }
    }
}

impl RnsContext {
    pub fn new(n: usize, moduli: Vec<u64>) -> Result<Self> {
        if moduli.is_empty() {
            return Err(Error::NoPrimes(
                "an RNS context needs at least one modulus".into(),
            ));
        }
        for &t in &moduli {
            check_geometry(n, t)?;
            if !is_batching_prime(t, n) {
                return Err(Error::NoPrimes(format!(
                    "{t} is not a batching prime for N = {n}"
                )));
            }
        }
        for (i, a) in moduli.iter().enumerate() {
            if moduli[..i].contains(a) {
                return Err(Error::NoPrimes(format!("modulus {a} repeated")));
            }
        }
        let product: BigInt = moduli.iter().map(|&t| BigInt::from(t)).product();
        let crt_coeffs = moduli
            .iter()
            .map(|&t| {
                let t = BigInt::from(t);
                let m = &product / &t;
                let inv = m.modinv(&t).expect("distinct primes are coprime");
                m * inv
            })
            .collect();
        Ok(Self {
            n,
            moduli,
            product,
            crt_coeffs,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn moduli(&self) -> &[u64] {
        &self.moduli
    }

    pub fn instances(&self) -> usize {
        self.moduli.len()
    }

    /// `T`, the product of all moduli.
    pub fn product(&self) -> &BigInt {
        &self.product
    }

    /// Per-instance encodings of the same signed values.
    pub fn encode(&self, values: &[BigInt]) -> Result<Vec<SlotVector>> {
        self.moduli
            .iter()
            .map(|&t| SlotVector::encode(values, t, self.n))
            .collect()
    }

    /// Combine residues slotwise and lift into `(-T/2, T/2]`. The result is
    /// the true value exactly when its magnitude is below `T/2`.
    pub fn decode(&self, residues: &[SlotVector]) -> Result<Vec<BigInt>> {
        self.decode_prefix(residues, self.n)
    }

    /// Like [`RnsContext::decode`] for the first `len` slots only.
    pub fn decode_prefix(&self, residues: &[SlotVector], len: usize) -> Result<Vec<BigInt>> {
        let slots: Vec<usize> = (0..len.min(self.n)).collect();
        self.decode_slots(residues, &slots)
    }

    /// Like [`RnsContext::decode`] for the listed slots, in list order.
    pub fn decode_slots(&self, residues: &[SlotVector], slots: &[usize]) -> Result<Vec<BigInt>> {
        if residues.len() != self.moduli.len()
            || residues
                .iter()
                .zip(&self.moduli)
                .any(|(r, &t)| r.modulus != t || r.n() != self.n)
        {
            return Err(Error::SlotMismatch(format!(
                "residues under moduli {:?} do not match context {:?}",
                residues.iter().map(|r| r.modulus).collect::<Vec<_>>(),
                self.moduli
            )));
        }
        if let Some(bad) = slots.iter().find(|&&s| s >= self.n) {
            return Err(Error::SlotMismatch(format!(
                "slot {bad} beyond N = {}",
                self.n
            )));
        }
        let half = &self.product >> 1u32;
        Ok(slots
            .iter()
            .map(|&i| {
                let mut x = BigInt::zero();
                for (r, c) in residues.iter().zip(&self.crt_coeffs) {
                    x += c * r.slots[i];
                }
                let x = x.mod_floor(&self.product);
                if x > half {
                    x - &self.product
                } else {
                    x
                }
            })
            .collect())
    }
}

/// Per-slot CRT decode; see [`RnsContext::decode`].
pub fn decode_crt(residues: &[SlotVector], ctx: &RnsContext) -> Result<Vec<BigInt>> {
    ctx.decode(residues)
}

/// Output of [`select_moduli`] with its minimality evidence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModulusSelection {
    pub ctx: RnsContext,
    pub fiw: u32,
    pub cap: u32,
    /// Bit length of the product of all chosen moduli.
    pub product_bits: u64,
    /// Bit length of the product of the largest `count - 1` qualifying
    /// primes; below `fiw + 1` it proves no smaller count exists.
    pub best_smaller_bits: u64,
    /// `(count - 1) * cap < fiw`: a cruder but cap-only proof of minimality.
    pub cap_certificate: bool,
}

/// Batching primes below `2^cap` in descending order.
pub fn batching_primes_below(cap: u32, n: usize) -> impl Iterator<Item = u64> {
    let step = 2 * n as u64;
    let limit = 1u64 << cap;
    // Largest k with k * 2N + 1 < 2^cap.
    let top = (limit - 2) / step;
    (1..=top)
        .rev()
        .map(move |k| k * step + 1)
        .filter(|&p| is_prime(p))
}

/// Fewest batching primes below `2^cap` whose product reaches `2^fiw`,
/// taking the largest primes first.
///
/// Any `k` primes below the cap multiply to at most the product of the `k`
/// largest, so the greedy count is minimal.
pub fn select_moduli(fiw: u32, cap: u32, n: usize) -> Result<ModulusSelection> {
    if !(2..=MAX_MODULUS_BITS).contains(&cap) {
        return Err(Error::NoPrimes(format!(
            "per-modulus cap {cap} bits outside [2, {MAX_MODULUS_BITS}]"
        )));
    }
    if !n.is_power_of_two() {
        return Err(Error::SlotMismatch(format!(
            "slot count {n} is not a power of two"
        )));
    }
    if 2 * n as u64 + 1 >= 1u64 << cap {
        return Err(Error::NoPrimes(format!(
            "no p = 1 (mod {}) fits below 2^{cap}",
            2 * n
        )));
    }
    let target = BigUint::one() << fiw;
    let mut product = BigUint::one();
    let mut previous = BigUint::one();
    let mut moduli = Vec::new();
    for p in batching_primes_below(cap, n) {
        previous = product.clone();
        product *= p;
        moduli.push(p);
        if product >= target {
            break;
        }
    }
    if moduli.is_empty() || product < target {
        return Err(Error::NoPrimes(format!(
            "all batching primes below 2^{cap} for N = {n} multiply to only {} bits, need {fiw}",
            product.bits()
        )));
    }
    let count = moduli.len() as u64;
    let selection = ModulusSelection {
        ctx: RnsContext::new(n, moduli)?,
        fiw,
        cap,
        product_bits: product.bits(),
        best_smaller_bits: previous.bits(),
        cap_certificate: (count - 1) * (cap as u64) < fiw as u64,
    };
    log::info!(
        "FIW {fiw} with {cap}-bit cap at N = {n}: {count} instance(s) {:?}; \
         best {} primes give {} bits (cap certificate {})",
        selection.ctx.moduli(),
        count - 1,
        selection.best_smaller_bits,
        selection.cap_certificate
    );
    Ok(selection)
}

/// Ciphertext modulus size reported alongside a slot count. Only N = 2^14
/// and 2^15 have a conventional value; anything else needs an explicit one.
pub fn default_log_q(n: usize) -> Option<u32> {
    match n {
        16384 => Some(389),
        32768 => Some(825),
        _ => None,
    }
}

/// HE parameter record for one network and quantisation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeParams {
    pub network: String,
    pub quantisation: String,
    #[serde(rename = "N")]
    pub n: usize,
    /// Reporting metadata only; the simulator has no noise model.
    pub log_q: Option<u32>,
    pub moduli: Vec<u64>,
}

impl HeParams {
    pub fn context(&self) -> Result<RnsContext> {
        RnsContext::new(self.n, self.moduli.clone())
    }
}

/// Every value lies in the centered range `(-T/2, T/2]`, so decoding it is
/// exact. `T` is a product of odd primes, hence odd.
pub fn fits(values: &[BigInt], ctx: &RnsContext) -> bool {
    let half = ctx.product() >> 1u32;
    values.iter().all(|v| v.abs() <= half)
}
