//! The five-term training objective: one binary cross-entropy per cue plus
//! the router importance and entropy penalties, summed with unit weights by
//! default.

use crate::backbone::MultiCueLogits;
use crate::corpus::Label;
use crate::moea::{entropy_loss, importance_loss, GateRecord};
use serde::{Deserialize, Serialize};

/// The five scalar terms and their weighted sum.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_img: f64,
    pub l_ci: f64,
    pub l_hf: f64,
    pub l_imp: f64,
    pub l_ent: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.l_img, self.l_ci, self.l_hf, self.l_imp, self.l_ent, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Per-term weights; the printed objective uses all ones.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub img: f64,
    pub ci: f64,
    pub hf: f64,
    pub imp: f64,
    pub ent: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            img: 1.0,
            ci: 1.0,
            hf: 1.0,
            imp: 1.0,
            ent: 1.0,
        }
    }
}

/// Numerically stable binary cross-entropy on a logit:
/// `max(z,0) − z·y + ln(1 + e^(−|z|))`.
pub fn bce_loss(logit: f64, label: Label) -> f64 {
    let y = label.target();
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

/// Per-sample loss breakdown. The auxiliary terms are computed over the
/// gate records handed in (a batch pools records across samples, cues, and
/// adapter layers before calling this).
pub fn total_loss(
    logits: &MultiCueLogits,
    label: Label,
    records: &[GateRecord],
    weights: &LossWeights,
) -> LossBreakdown {
    let l_img = bce_loss(logits.img_logit as f64, label);
    let l_ci = bce_loss(logits.ci_logit as f64, label);
    let l_hf = bce_loss(logits.hf_logit as f64, label);
    let l_imp = if records.is_empty() {
        0.0
    } else {
        importance_loss(records).expect("records non-empty")
    };
    let l_ent = if records.is_empty() {
        0.0
    } else {
        entropy_loss(records).expect("records non-empty")
    };
    breakdown(l_img, l_ci, l_hf, l_imp, l_ent, weights)
}

pub fn breakdown(
    l_img: f64,
    l_ci: f64,
    l_hf: f64,
    l_imp: f64,
    l_ent: f64,
    weights: &LossWeights,
) -> LossBreakdown {
    let l_img = weights.img * l_img;
    let l_ci = weights.ci * l_ci;
    let l_hf = weights.hf * l_hf;
    let l_imp = weights.imp * l_imp;
    let l_ent = weights.ent * l_ent;
    LossBreakdown {
        l_img,
        l_ci,
        l_hf,
        l_imp,
        l_ent,
        total: l_img + l_ci + l_hf + l_imp + l_ent,
    }
}
