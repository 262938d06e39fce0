//! MPC-friendly softmax and activation substitutions.
//!
//! The kinds here plug into the model config; the tensor layer decomposes
//! each into engine primitives with distinct non-arithmetic accounting. The
//! row kernels below are the single source of truth for the plaintext math,
//! used verbatim by both evaluation modes:
//!
//! - `Exact`: row-max subtraction (Compare), exp (SoftmaxExp), division
//!   (SoftmaxDiv).
//! - `TwoRelu`: ReLU(x_i) / (sum ReLU + eps). The ReLUs are comparison-based
//!   and charged as Compare; one SoftmaxDiv per element remains. Rows whose
//!   ReLU mass is below eps fall back to the uniform row.
//! - `TwoQuad`: (x_i + c)^2 / sum (x_j + c)^2. The squarings are plain
//!   private multiplications (plus truncation), not oracle calls; one
//!   SoftmaxDiv per element remains, with the uniform fallback when the
//!   denominator underflows to zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ring::{kernels, FixedPointFormat, RingElement};

pub const QUAD_DEFAULT: (f64, f64, f64) = (0.125, 0.25, 0.5);
pub const TWO_QUAD_DEFAULT_C: f64 = 2.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SoftmaxKind {
    #[default]
    Exact,
    #[serde(rename = "2relu")]
    TwoRelu { eps: f64 },
    #[serde(rename = "2quad")]
    TwoQuad { c: f64 },
}

impl SoftmaxKind {
    /// eps defaults to one ulp of the active format.
    pub fn two_relu_default(fmt: &FixedPointFormat) -> Self {
        SoftmaxKind::TwoRelu { eps: fmt.ulp() }
    }
}

impl std::str::FromStr for SoftmaxKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(SoftmaxKind::Exact),
            "2relu" => Ok(SoftmaxKind::TwoRelu {
                eps: FixedPointFormat::default().ulp(),
            }),
            "2quad" => Ok(SoftmaxKind::TwoQuad {
                c: TWO_QUAD_DEFAULT_C,
            }),
            other => Err(Error::InvalidConfig(format!("unknown softmax kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ActivationKind {
    #[default]
    Silu,
    Gelu,
    Relu,
    Quad { c2: f64, c1: f64, c0: f64 },
}

impl std::str::FromStr for ActivationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(ActivationKind::Silu),
            "gelu" => Ok(ActivationKind::Gelu),
            "relu" => Ok(ActivationKind::Relu),
            "quad" => Ok(ActivationKind::Quad {
                c2: QUAD_DEFAULT.0,
                c1: QUAD_DEFAULT.1,
                c0: QUAD_DEFAULT.2,
            }),
            other => Err(Error::InvalidConfig(format!(
                "unknown activation kind `{other}`"
            ))),
        }
    }
}

/// Per-row maximum, broadcast back to one value per row.
pub fn rowmax_rows(rows: &[RingElement], row_len: usize) -> Vec<RingElement> {
    rows.chunks(row_len)
        .map(|row| {
            row.iter()
                .copied()
                .reduce(kernels::max)
                .unwrap_or(RingElement::ZERO)
        })
        .collect()
}

pub fn exp_map(fmt: &FixedPointFormat, xs: &[RingElement]) -> Vec<RingElement> {
    xs.iter().map(|x| kernels::exp(fmt, *x)).collect()
}

pub fn relu_map(xs: &[RingElement]) -> Vec<RingElement> {
    xs.iter().map(|x| kernels::relu(*x)).collect()
}

/// Exact-softmax division stage: out_i = num_i / denom_row.
pub fn softmax_div_rows(
    fmt: &FixedPointFormat,
    numers: &[RingElement],
    denoms: &[RingElement],
    row_len: usize,
) -> Vec<RingElement> {
    numers
        .chunks(row_len)
        .zip(denoms)
        .flat_map(|(row, d)| row.iter().map(|n| kernels::div(fmt, *n, *d)).collect::<Vec<_>>())
        .collect()
}

/// TwoRelu division stage. `denoms` already include the +eps term; a row
/// degenerates to uniform when its ReLU mass was below eps, i.e. when the
/// denominator is below 2*eps.
pub fn two_relu_div_rows(
    fmt: &FixedPointFormat,
    numers: &[RingElement],
    denoms: &[RingElement],
    row_len: usize,
    eps_enc: RingElement,
) -> Vec<RingElement> {
    let uniform = fmt.encode_saturating(1.0 / row_len as f64);
    let threshold = eps_enc.as_signed().saturating_mul(2);
    numers
        .chunks(row_len)
        .zip(denoms)
        .flat_map(|(row, d)| {
            if d.as_signed() < threshold {
                vec![uniform; row_len]
            } else {
                row.iter().map(|n| kernels::div(fmt, *n, *d)).collect()
            }
        })
        .collect()
}

/// TwoQuad division stage with the underflow fallback.
pub fn two_quad_div_rows(
    fmt: &FixedPointFormat,
    numers: &[RingElement],
    denoms: &[RingElement],
    row_len: usize,
) -> Vec<RingElement> {
    let uniform = fmt.encode_saturating(1.0 / row_len as f64);
    numers
        .chunks(row_len)
        .zip(denoms)
        .flat_map(|(row, d)| {
            if d.as_signed() == 0 {
                vec![uniform; row_len]
            } else {
                row.iter().map(|n| kernels::div(fmt, *n, *d)).collect()
            }
        })
        .collect()
}

pub fn silu_map(fmt: &FixedPointFormat, xs: &[RingElement]) -> Vec<RingElement> {
    xs.iter().map(|x| kernels::silu(fmt, *x)).collect()
}

pub fn gelu_map(fmt: &FixedPointFormat, xs: &[RingElement]) -> Vec<RingElement> {
    xs.iter().map(|x| kernels::gelu(fmt, *x)).collect()
}

pub fn rsqrt_map(fmt: &FixedPointFormat, xs: &[RingElement]) -> Vec<RingElement> {
    xs.iter().map(|x| kernels::rsqrt(fmt, *x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmt() -> FixedPointFormat {
        FixedPointFormat::default()
    }

    fn enc(xs: &[f64]) -> Vec<RingElement> {
        xs.iter().map(|x| fmt().encode(*x).unwrap()).collect()
    }

    #[test]
    fn rowmax_per_row() {
        let rows = enc(&[1.0, 3.0, 2.0, -5.0, -1.0, -2.0]);
        let maxes = rowmax_rows(&rows, 3);
        assert_eq!(maxes, enc(&[3.0, -1.0]));
    }

    #[test]
    fn two_relu_all_positive_closed_form() {
        let f = fmt();
        let eps = f.encode(f.ulp()).unwrap();
        let xs = enc(&[1.0, 2.0, 3.0]);
        let relus = relu_map(&xs);
        let sum = relus
            .iter()
            .copied()
            .fold(RingElement::ZERO, |a, b| a + b)
            + eps;
        let out = two_relu_div_rows(&f, &relus, &[sum], 3, eps);
        for (got, want) in out.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((f.decode(*got) - want).abs() <= f.ulp() * 2.0);
        }
    }

    #[test]
    fn two_relu_all_negative_is_uniform() {
        let f = fmt();
        let eps = f.encode(f.ulp()).unwrap();
        let xs = enc(&[-1.0, -2.0, -0.5, -4.0]);
        let relus = relu_map(&xs);
        let sum = relus
            .iter()
            .copied()
            .fold(RingElement::ZERO, |a, b| a + b)
            + eps;
        let out = two_relu_div_rows(&f, &relus, &[sum], 4, eps);
        let uniform = f.encode(0.25).unwrap();
        assert_eq!(out, vec![uniform; 4]);
    }

    #[test]
    fn two_quad_constant_row_is_uniform() {
        let f = fmt();
        // constant row: all numerators equal, division yields 1/len everywhere
        let y = enc(&[1.5, 1.5, 1.5, 1.5]);
        let sq: Vec<RingElement> = y.iter().map(|e| f.truncate(*e * *e)).collect();
        let sum = sq.iter().copied().fold(RingElement::ZERO, |a, b| a + b);
        let out = two_quad_div_rows(&f, &sq, &[sum], 4);
        for o in &out {
            assert!((f.decode(*o) - 0.25).abs() <= 2.0 * f.ulp());
        }
    }

    #[test]
    fn two_quad_zero_denominator_is_uniform() {
        let f = fmt();
        let out = two_quad_div_rows(&f, &[RingElement::ZERO; 2], &[RingElement::ZERO], 2);
        assert_eq!(out, vec![f.encode(0.5).unwrap(); 2]);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("exact".parse::<SoftmaxKind>().unwrap(), SoftmaxKind::Exact);
        assert!(matches!(
            "2relu".parse::<SoftmaxKind>().unwrap(),
            SoftmaxKind::TwoRelu { .. }
        ));
        assert!(matches!(
            "2quad".parse::<SoftmaxKind>().unwrap(),
            SoftmaxKind::TwoQuad { .. }
        ));
        assert!("softmax".parse::<SoftmaxKind>().is_err());
        assert!(matches!(
            "quad".parse::<ActivationKind>().unwrap(),
            ActivationKind::Quad { .. }
        ));
        assert!("reluu".parse::<ActivationKind>().is_err());
    }

    #[test]
    fn kind_json_roundtrip() {
        let k = SoftmaxKind::TwoRelu { eps: 0.5 };
        let s = serde_json::to_string(&k).unwrap();
        assert_eq!(serde_json::from_str::<SoftmaxKind>(&s).unwrap(), k);
        let a = ActivationKind::Quad {
            c2: 0.125,
            c1: 0.25,
            c0: 0.5,
        };
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<ActivationKind>(&s).unwrap(), a);
    }
}
