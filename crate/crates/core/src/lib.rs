//! Desk-scale secure-inference simulator and MPC-minimization toolkit for
//! decoder-only transformers.
//!
//! The crate runs a toy transformer in two interchangeable evaluation modes
//! with identical numerics: a plaintext fixed-point reference and a simulated
//! additive-secret-sharing engine with full operation and communication
//! accounting. On top of that substrate it implements the three
//! MPC-minimizing architecture transforms (layer freezing, split low-rank
//! adapters, head merging), data-driven head grouping, MPC-friendly softmax
//! and activation substitutions, a client/server inference protocol verified
//! against an ideal-functionality oracle, and cost reporting with
//! improvement-factor comparison between scenario runs.

pub mod approx;
pub mod channel;
pub mod cost;
pub mod distill;
pub mod engine;
pub mod error;
pub mod model;
pub mod protocol;
pub mod ring;
pub mod similarity;
pub mod tensor;
pub mod transforms;

pub use error::{Error, Result};
pub use ring::{FixedPointFormat, RingElement};

/// Dense row-major matrix helpers over ring elements, shared by the engine
/// and the plaintext tensor path.
pub(crate) mod linalg {
    use crate::ring::RingElement;

    /// (rows x n) . (n x k), wrapping arithmetic.
    pub fn matmul(
        a: &[RingElement],
        b: &[RingElement],
        rows: usize,
        n: usize,
        k: usize,
    ) -> Vec<RingElement> {
        debug_assert_eq!(a.len(), rows * n);
        debug_assert_eq!(b.len(), n * k);
        let mut out = vec![RingElement::ZERO; rows * k];
        for r in 0..rows {
            for i in 0..n {
                let av = a[r * n + i];
                if av == RingElement::ZERO {
                    continue;
                }
                let brow = &b[i * k..(i + 1) * k];
                let orow = &mut out[r * k..(r + 1) * k];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * *bv;
                }
            }
        }
        out
    }

}
