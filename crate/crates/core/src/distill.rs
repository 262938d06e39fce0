//! Knowledge-distillation loss formulas as pure metric operations over toy
//! student/teacher activations. No training loop: these are the measurements
//! a fine-tuning stage would minimize.
//!
//! Conventions: MSE is the element mean (keeps the loss weights stable across
//! toy sizes); the logits loss uses forward KL with the teacher distribution
//! as reference, natural logarithms, averaged over tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FloatTensor;
use crate::transforms::Partition;

/// Loss coefficients. Defaults follow the two-stage recipe: attention and
/// hidden-state matching in stage one, logits matching plus supervised NLL in
/// stage two.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillWeights {
    pub alpha_attn: f64,
    pub alpha_hidden: f64,
    pub alpha_kld: f64,
    pub alpha_nll: f64,
}

impl Default for DistillWeights {
    fn default() -> Self {
        DistillWeights {
            alpha_attn: 0.1,
            alpha_hidden: 5.0,
            alpha_kld: 0.5,
            alpha_nll: 0.5,
        }
    }
}

impl DistillWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_attn", self.alpha_attn),
            ("alpha_hidden", self.alpha_hidden),
            ("alpha_kld", self.alpha_kld),
            ("alpha_nll", self.alpha_nll),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be nonnegative")));
            }
        }
        Ok(())
    }
}

fn mse(a: &FloatTensor, b: &FloatTensor) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::ShapeMismatch(format!(
            "activation shapes {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    let n = a.data.len();
    if n == 0 {
        return Err(Error::ShapeMismatch("empty activation".into()));
    }
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n as f64)
}

/// Stage-one losses: L_attn = sum of per-layer MSE between student and
/// teacher MHA outputs (post output-projection), L_hidden likewise over the
/// per-layer hidden states, both summed over the private suffix only.
/// Activations are indexed by absolute layer.
pub fn attn_hidden_loss(
    student_attn: &[FloatTensor],
    teacher_attn: &[FloatTensor],
    student_hidden: &[FloatTensor],
    teacher_hidden: &[FloatTensor],
    partition: Partition,
) -> Result<(f64, f64)> {
    let n = partition.total;
    for (name, acts) in [
        ("student attn", student_attn),
        ("teacher attn", teacher_attn),
        ("student hidden", student_hidden),
        ("teacher hidden", teacher_hidden),
    ] {
        if acts.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{name}: {} activation layers for a {n}-layer partition",
                acts.len()
            )));
        }
    }
    let mut l_attn = 0.0;
    let mut l_hidden = 0.0;
    for layer in partition.boundary()..n {
        l_attn += mse(&student_attn[layer], &teacher_attn[layer])?;
        l_hidden += mse(&student_hidden[layer], &teacher_hidden[layer])?;
    }
    Ok((l_attn, l_hidden))
}

/// Weighted stage-one objective.
pub fn stage_one_loss(l_attn: f64, l_hidden: f64, w: &DistillWeights) -> f64 {
    w.alpha_attn * l_attn + w.alpha_hidden * l_hidden
}

fn softmax_f64(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|e| e / s).collect()
}

/// Stage-two loss: alpha_kld * KLD(softmax(z_T) || softmax(z_S)) plus
/// alpha_nll * NLL(z_S, labels), averaged over token rows.
pub fn logits_loss(
    student_logits: &[Vec<f64>],
    teacher_logits: &[Vec<f64>],
    labels: &[u32],
    vocab: usize,
    w: &DistillWeights,
) -> Result<f64> {
    w.validate()?;
    let rows = student_logits.len();
    if rows == 0 || teacher_logits.len() != rows || labels.len() != rows {
        return Err(Error::ShapeMismatch(format!(
            "{rows} student rows, {} teacher rows, {} labels",
            teacher_logits.len(),
            labels.len()
        )));
    }
    let mut kld_sum = 0.0;
    let mut nll_sum = 0.0;
    for ((zs, zt), &label) in student_logits.iter().zip(teacher_logits).zip(labels) {
        if zs.len() != vocab || zt.len() != vocab {
            return Err(Error::ShapeMismatch(format!(
                "logit rows of {} and {} over vocab {vocab}",
                zs.len(),
                zt.len()
            )));
        }
        if label as usize >= vocab {
            return Err(Error::TokenOutOfVocab {
                token: label,
                vocab,
            });
        }
        let ps = softmax_f64(zs);
        let pt = softmax_f64(zt);
        kld_sum += pt
            .iter()
            .zip(&ps)
            .map(|(t, s)| if *t > 0.0 { t * (t / s).ln() } else { 0.0 })
            .sum::<f64>();
        nll_sum += -ps[label as usize].ln();
    }
    let n = rows as f64;
    Ok(w.alpha_kld * (kld_sum / n) + w.alpha_nll * (nll_sum / n))
}
