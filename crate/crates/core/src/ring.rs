//! Two's-complement fixed-point arithmetic over the ring Z_{2^64}.
//!
//! Every value that flows through the sharing engine or the plaintext
//! reference path is a [`RingElement`]: a `u64` with wrapping arithmetic and a
//! signed (two's complement) interpretation. A [`FixedPointFormat`] fixes the
//! number of fractional bits `s`, so a real number `x` is represented as
//! `round(x * 2^s) mod 2^64`. Both execution modes share the scalar kernels in
//! this module, which is what makes their outputs bit-comparable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An element of Z_{2^64}. All arithmetic wraps; the signed view is two's
/// complement.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct RingElement(pub u64);

impl RingElement {
    pub const ZERO: RingElement = RingElement(0);

    #[inline]
    pub fn from_signed(v: i64) -> Self {
        RingElement(v as u64)
    }

    /// Two's-complement interpretation.
    #[inline]
    pub fn as_signed(self) -> i64 {
        self.0 as i64
    }

    #[inline]
    pub fn wrapping_add(self, rhs: Self) -> Self {
        RingElement(self.0.wrapping_add(rhs.0))
    }

    #[inline]
    pub fn wrapping_sub(self, rhs: Self) -> Self {
        RingElement(self.0.wrapping_sub(rhs.0))
    }

    #[inline]
    pub fn wrapping_mul(self, rhs: Self) -> Self {
        RingElement(self.0.wrapping_mul(rhs.0))
    }

    #[inline]
    pub fn wrapping_neg(self) -> Self {
        RingElement(self.0.wrapping_neg())
    }
}

impl std::ops::Add for RingElement {
    type Output = RingElement;
    fn add(self, rhs: Self) -> Self {
        self.wrapping_add(rhs)
    }
}

impl std::ops::Sub for RingElement {
    type Output = RingElement;
    fn sub(self, rhs: Self) -> Self {
        self.wrapping_sub(rhs)
    }
}

impl std::ops::Mul for RingElement {
    type Output = RingElement;
    fn mul(self, rhs: Self) -> Self {
        self.wrapping_mul(rhs)
    }
}

impl std::ops::Neg for RingElement {
    type Output = RingElement;
    fn neg(self) -> Self {
        self.wrapping_neg()
    }
}

impl std::fmt::Debug for RingElement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RingElement({})", self.as_signed())
    }
}

/// Fixed-point layout: `scale_bits` fractional bits inside a 64-bit ring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointFormat {
    pub scale_bits: u32,
}

impl Default for FixedPointFormat {
    fn default() -> Self {
        FixedPointFormat { scale_bits: 12 }
    }
}

impl FixedPointFormat {
    pub const RING_BITS: u32 = 64;

    pub fn new(scale_bits: u32) -> Result<Self> {
        if scale_bits == 0 || scale_bits >= 32 {
            return Err(Error::InvalidScale(scale_bits));
        }
        Ok(FixedPointFormat { scale_bits })
    }

    /// 2^s as a real number.
    #[inline]
    pub fn scale(&self) -> f64 {
        (1u64 << self.scale_bits) as f64
    }

    /// Largest representable magnitude: values live in [-2^(63-s), 2^(63-s)).
    #[inline]
    pub fn max_magnitude(&self) -> f64 {
        (1u64 << (63 - self.scale_bits)) as f64
    }

    /// One unit in the last place, as a real number.
    #[inline]
    pub fn ulp(&self) -> f64 {
        1.0 / self.scale()
    }

    /// encode(1.0).
    #[inline]
    pub fn one(&self) -> RingElement {
        RingElement(1u64 << self.scale_bits)
    }

    /// Round `x * 2^s` half away from zero and reduce mod 2^64.
    pub fn encode(&self, x: f64) -> Result<RingElement> {
        let hi = self.max_magnitude();
        if !x.is_finite() || x >= hi || x < -hi {
            return Err(Error::Range {
                value: x,
                lo: -hi,
                hi,
                scale_bits: self.scale_bits,
            });
        }
        let scaled = x * self.scale();
        // round half away from zero
        let rounded = if scaled >= 0.0 {
            (scaled + 0.5).floor()
        } else {
            (scaled - 0.5).ceil()
        };
        Ok(RingElement::from_signed(rounded as i64))
    }

    /// `encode` clamped to the representable range. Used by the transcendental
    /// kernels so that a saturated intermediate stays deterministic instead of
    /// aborting mid-circuit.
    pub fn encode_saturating(&self, x: f64) -> RingElement {
        let hi = self.max_magnitude();
        let clamped = if x.is_nan() {
            0.0
        } else {
            x.clamp(-hi, hi - self.ulp())
        };
        self.encode(clamped).expect("clamped value is in range")
    }

    /// Signed interpretation divided by 2^s.
    #[inline]
    pub fn decode(&self, e: RingElement) -> f64 {
        e.as_signed() as f64 / self.scale()
    }

    /// Arithmetic shift right by `s` on the signed interpretation. This is the
    /// exact truncation used after every fixed-point multiplication, and the
    /// reference the ideal truncation oracle applies.
    #[inline]
    pub fn truncate(&self, e: RingElement) -> RingElement {
        RingElement::from_signed(e.as_signed() >> self.scale_bits)
    }
}

/// Scalar kernels shared by the plaintext reference path and the ideal
/// non-arithmetic oracle. Transcendentals go through f64 and re-encode with
/// saturation; comparisons and ReLU act on the signed view exactly.
pub mod kernels {
    use super::{FixedPointFormat, RingElement};

    pub fn exp(fmt: &FixedPointFormat, e: RingElement) -> RingElement {
        fmt.encode_saturating(fmt.decode(e).exp())
    }

    pub fn div(fmt: &FixedPointFormat, num: RingElement, den: RingElement) -> RingElement {
        let d = fmt.decode(den);
        if d == 0.0 {
            return RingElement::ZERO;
        }
        fmt.encode_saturating(fmt.decode(num) / d)
    }

    pub fn relu(e: RingElement) -> RingElement {
        if e.as_signed() > 0 {
            e
        } else {
            RingElement::ZERO
        }
    }

    pub fn silu(fmt: &FixedPointFormat, e: RingElement) -> RingElement {
        let x = fmt.decode(e);
        fmt.encode_saturating(x / (1.0 + (-x).exp()))
    }

    /// tanh-form GeLU.
    pub fn gelu(fmt: &FixedPointFormat, e: RingElement) -> RingElement {
        let x = fmt.decode(e);
        let inner = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
        fmt.encode_saturating(0.5 * x * (1.0 + inner.tanh()))
    }

    pub fn rsqrt(fmt: &FixedPointFormat, e: RingElement) -> RingElement {
        let x = fmt.decode(e);
        if x <= 0.0 {
            return fmt.encode_saturating(fmt.scale().sqrt());
        }
        fmt.encode_saturating(1.0 / x.sqrt())
    }

    /// Maximum under the signed interpretation.
    pub fn max(a: RingElement, b: RingElement) -> RingElement {
        if a.as_signed() >= b.as_signed() {
            a
        } else {
            b
        }
    }

    /// Index of the signed maximum, lowest index on ties.
    pub fn argmax(row: &[RingElement]) -> usize {
        let mut best = 0usize;
        for (i, e) in row.iter().enumerate().skip(1) {
            if e.as_signed() > row[best].as_signed() {
                best = i;
            }
        }
        best
    }
}
