//! Comparison and piecewise-linear gadgets on shared values.
//!
//! Arithmetic shares are converted to XOR-shared bit planes and added with
//! a ripple-carry circuit to extract the sign bit. Bits are packed 64 lanes
//! per word, so a sign extraction over `m` values costs 63 exchanges and
//! `63·ceil(m/64)` AND-triple words regardless of `m`'s contents.

use crate::engine::{EngineError, PartyContext, SharedMatrix};
use crate::fxp::{RingElement, RingMatrix, RING_BITS};
use crate::shares::{Role, TripleBudget};
use crate::transport::ChannelStats;

/// XOR shares of `len` bits, packed little-endian into 64-bit words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedBits {
    pub role: Role,
    pub len: usize,
    pub words: Vec<u64>,
}

fn word_count(len: usize) -> usize {
    len.div_ceil(64)
}

fn tail_mask(len: usize, word: usize) -> u64 {
    let full = word_count(len);
    if word + 1 < full || len % 64 == 0 {
        u64::MAX
    } else {
        (1u64 << (len % 64)) - 1
    }
}

impl SharedBits {
    pub fn get(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    /// Complement of the shared bits (the Modeler flips its share).
    pub fn not(&self) -> SharedBits {
        let mut out = self.clone();
        if self.role == Role::Modeler {
            for (w, word) in out.words.iter_mut().enumerate() {
                *word ^= tail_mask(self.len, w);
            }
        }
        out
    }

    /// Bits `start..start+len` as a new sharing.
    pub fn slice(&self, start: usize, len: usize) -> SharedBits {
        let mut words = vec![0u64; word_count(len)];
        for i in 0..len {
            if self.get(start + i) {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        SharedBits {
            role: self.role,
            len,
            words,
        }
    }
}

/// Traffic caused by one gadget invocation at one party.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GadgetTranscript {
    pub rounds: u64,
    pub bytes_sent: u64,
}

impl GadgetTranscript {
    /// Runs `f` and records the traffic it generated.
    pub fn measure<T>(
        ctx: &mut PartyContext,
        f: impl FnOnce(&mut PartyContext) -> T,
    ) -> (T, GadgetTranscript) {
        let before: ChannelStats = ctx.stats();
        let out = f(ctx);
        let delta = ctx.stats().since(&before);
        (
            out,
            GadgetTranscript {
                rounds: delta.rounds,
                bytes_sent: delta.bytes_sent,
            },
        )
    }
}

/// XOR shares of the sign bit of every entry of `x` (row-major order).
pub fn a2b_msb(ctx: &mut PartyContext, x: &SharedMatrix) -> Result<SharedBits, EngineError> {
    let m = x.len();
    let words = word_count(m);
    let role = ctx.role();
    if m == 0 {
        return Ok(SharedBits {
            role,
            len: 0,
            words: Vec::new(),
        });
    }
    // planes[i][w]: bit i of this party's share for lanes 64w..64w+63
    let mut planes = vec![vec![0u64; words]; RING_BITS as usize];
    for (j, v) in x.share.data.iter().enumerate() {
        let (w, lane) = (j / 64, j % 64);
        let mut bits = v.0;
        let mut i = 0;
        while bits != 0 {
            let tz = bits.trailing_zeros() as usize;
            i += tz;
            planes[i][w] |= 1 << lane;
            bits >>= tz;
            bits >>= 1;
            i += 1;
        }
    }
    let zero = vec![0u64; words];
    // the Modeler's share bits are input "a", the Regulator's input "b"
    let (a_planes, b_planes): (Vec<&Vec<u64>>, Vec<&Vec<u64>>) = match role {
        Role::Modeler => (planes.iter().collect(), vec![&zero; RING_BITS as usize]),
        Role::Regulator => (vec![&zero; RING_BITS as usize], planes.iter().collect()),
    };
    let mut carry = vec![0u64; words];
    for i in 0..(RING_BITS as usize - 1) {
        let x: Vec<u64> = a_planes[i].iter().zip(&carry).map(|(a, c)| a ^ c).collect();
        let y: Vec<u64> = b_planes[i].iter().zip(&carry).map(|(b, c)| b ^ c).collect();
        let t = ctx.and_words(&x, &y)?;
        for (c, t) in carry.iter_mut().zip(&t) {
            *c ^= t;
        }
    }
    let top = RING_BITS as usize - 1;
    let msb = (0..words)
        .map(|w| (a_planes[top][w] ^ b_planes[top][w] ^ carry[w]) & tail_mask(m, w))
        .collect();
    Ok(SharedBits { role, len: m, words: msb })
}

/// XOR shares of `[x < y]` per entry, valid while `x - y` does not wrap.
pub fn secure_less_than(
    ctx: &mut PartyContext,
    x: &SharedMatrix,
    y: &SharedMatrix,
) -> Result<SharedBits, EngineError> {
    a2b_msb(ctx, &x.sub(y))
}

/// Concatenation of bit sharings in order.
pub fn concat_bits(role: Role, parts: &[&SharedBits]) -> SharedBits {
    let len = parts.iter().map(|b| b.len).sum();
    let mut words = vec![0u64; word_count(len)];
    let mut at = 0;
    for part in parts {
        for i in 0..part.len {
            if part.get(i) {
                words[(at + i) / 64] |= 1 << ((at + i) % 64);
            }
        }
        at += part.len;
    }
    SharedBits { role, len, words }
}

/// XOR shares of the conjunction of all bits, by a halving tree of ANDs.
/// The empty conjunction is 1.
pub fn and_all(ctx: &mut PartyContext, bits: &SharedBits) -> Result<SharedBits, EngineError> {
    let role = ctx.role();
    if bits.len == 0 {
        return Ok(SharedBits {
            role,
            len: 1,
            words: vec![(role == Role::Modeler) as u64],
        });
    }
    let mut cur = bits.clone();
    while cur.len > 1 {
        let half = cur.len / 2;
        let (a, b) = (cur.slice(0, half), cur.slice(half, half));
        let prod = SharedBits {
            role,
            len: half,
            words: ctx.and_words(&a.words, &b.words)?,
        };
        cur = if cur.len % 2 == 1 {
            concat_bits(role, &[&prod, &cur.slice(2 * half, 1)])
        } else {
            prod
        };
    }
    Ok(cur)
}

/// Converts XOR-shared bits into additive shares of 0/1 (a column vector).
pub fn b2a(ctx: &mut PartyContext, bits: &SharedBits) -> Result<SharedMatrix, EngineError> {
    let role = ctx.role();
    let mine: Vec<RingElement> = (0..bits.len).map(|i| RingElement(bits.get(i) as u64)).collect();
    let own = SharedMatrix::new(role, RingMatrix::from_vec(bits.len, 1, mine));
    let zero = SharedMatrix::zeros(role, bits.len, 1);
    // c1 ⊕ c2 = c1 + c2 - 2·c1·c2 with c1 owned by the Modeler, c2 by the Regulator
    let (x, y) = match role {
        Role::Modeler => (&own, &zero),
        Role::Regulator => (&zero, &own),
    };
    let prod = ctx.hadamard(x, y)?;
    Ok(own.sub(&prod.mul_public_scalar(RingElement(2))))
}

/// `a` where the bit is set, `b` elsewhere.
pub fn secure_select(
    ctx: &mut PartyContext,
    c: &SharedBits,
    a: &SharedMatrix,
    b: &SharedMatrix,
) -> Result<SharedMatrix, EngineError> {
    let ca = b2a(ctx, c)?.reshape(a.rows(), a.cols());
    let diff = a.sub(b);
    Ok(b.add(&ctx.hadamard(&ca, &diff)?))
}

/// `max(x, 0)` per entry.
pub fn secure_relu(ctx: &mut PartyContext, x: &SharedMatrix) -> Result<SharedMatrix, EngineError> {
    let nonneg = a2b_msb(ctx, x)?.not();
    let g = b2a(ctx, &nonneg)?.reshape(x.rows(), x.cols());
    ctx.hadamard(&g, x)
}

/// Piecewise-linear sigmoid: 0 for `x ≤ -1/2`, `x + 1/2` in between, 1 for
/// `x ≥ 1/2`. Exact at fixed-point resolution (no truncation involved).
pub fn secure_sigmoid_approx(ctx: &mut PartyContext, x: &SharedMatrix) -> Result<SharedMatrix, EngineError> {
    let fx = ctx.fx();
    let half = RingElement(1u64 << (fx.frac_bits - 1));
    let one = fx.one();
    let m = x.len();
    // α = [x ≥ 1/2] = ¬msb(x - 1/2), β = [x ≤ -1/2] = ¬msb(-1/2 - x)
    let upper = x.add_public_scalar(-half);
    let lower = x.neg().add_public_scalar(-half);
    let both = SharedMatrix::concat(ctx.role(), &[&upper, &lower]);
    let bits = a2b_msb(ctx, &both)?.not();
    let flags = b2a(ctx, &bits)?;
    let alpha = flags.row_slice(0, m).reshape(x.rows(), x.cols());
    let beta = flags.row_slice(m, 2 * m).reshape(x.rows(), x.cols());
    let middle = alpha.add(&beta).neg().add_public_scalar(RingElement(1));
    let shifted = x.add_public_scalar(half);
    let mid_part = ctx.hadamard(&middle, &shifted)?;
    Ok(alpha.mul_public_scalar(one).add(&mid_part))
}

/// Cleartext model of [`secure_sigmoid_approx`] on encoded values.
pub fn sigmoid_approx_clear(x: RingElement, frac_bits: u32) -> RingElement {
    let half = 1i64 << (frac_bits - 1);
    let v = x.signed();
    if v >= half {
        RingElement(1u64 << frac_bits)
    } else if v <= -half {
        RingElement(0)
    } else {
        RingElement::from_signed(v + half)
    }
}

/// Triples consumed by the gadgets for `m` inputs.
pub mod cost {
    use super::*;

    pub fn a2b_msb(m: usize) -> TripleBudget {
        TripleBudget {
            and_words: (RING_BITS as u64 - 1) * word_count(m) as u64,
            ..Default::default()
        }
    }

    pub fn b2a(m: usize) -> TripleBudget {
        TripleBudget {
            scalar: m as u64,
            ..Default::default()
        }
    }

    pub fn select(m: usize) -> TripleBudget {
        let mut b = b2a(m);
        b.scalar += m as u64;
        b
    }

    pub fn relu(m: usize) -> TripleBudget {
        let mut b = a2b_msb(m);
        b.merge(&select(m));
        b
    }

    pub fn and_all(m: usize) -> TripleBudget {
        let mut words = 0;
        let mut len = m;
        while len > 1 {
            words += word_count(len / 2) as u64;
            len = len / 2 + len % 2;
        }
        TripleBudget {
            and_words: words,
            ..Default::default()
        }
    }

    pub fn sigmoid(m: usize) -> TripleBudget {
        let mut b = a2b_msb(2 * m);
        b.merge(&b2a(2 * m));
        b.scalar += m as u64;
        b
    }
}
