//! Weighted sum of mean pixel cross-entropy and soft-Dice loss.
//!
//! ```text
//! CE   = -(1/R) Σ_j Σ_c t_jc · ln(max(p_jc, 1e-7))
//! Dice = (2 Σ_j p_j t_j + ε) / (Σ_j p_j + Σ_j t_j + ε)      (foreground channel)
//! loss = w_ce · CE + w_dice · (1 - Dice)
//! ```
//!
//! Sums run over every pixel of every image in the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ProbMap;

pub const DICE_EPSILON: f64 = 1e-6;
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombinedLoss {
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub foreground_class: usize,
}

impl Default for CombinedLoss {
    fn default() -> Self {
        Self {
            ce_weight: 0.5,
            dice_weight: 0.5,
            foreground_class: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub cross_entropy: f64,
    /// `1 - Dice`.
    pub dice_term: f64,
}

struct Sums {
    pixels: usize,
    ce: f64,
    intersection: f64,
    pred: f64,
    target: f64,
}

impl CombinedLoss {
    fn check(&self, preds: &[ProbMap], targets: &[ProbMap]) -> Result<()> {
        if preds.is_empty() || preds.len() != targets.len() {
            return Err(Error::invalid(format!(
                "loss needs equal, non-empty batches (got {} predictions, {} targets)",
                preds.len(),
                targets.len()
            )));
        }
        for (i, (p, t)) in preds.iter().zip(targets).enumerate() {
            if !p.same_shape(t) {
                return Err(Error::invalid(format!("prediction/target shape mismatch at batch index {i}")));
            }
            if self.foreground_class >= p.classes() {
                return Err(Error::invalid("foreground class out of range"));
            }
        }
        Ok(())
    }

    fn sums(&self, preds: &[ProbMap], targets: &[ProbMap]) -> Sums {
        let mut s = Sums {
            pixels: 0,
            ce: 0.0,
            intersection: 0.0,
            pred: 0.0,
            target: 0.0,
        };
        let fg = self.foreground_class;
        for (p, t) in preds.iter().zip(targets) {
            s.pixels += p.pixels();
            for (&pv, &tv) in p.probs().iter().zip(t.probs()) {
                if tv != 0.0 {
                    s.ce -= tv * pv.max(PROB_FLOOR).ln();
                }
            }
            for (pv, tv) in p.channel(fg).zip(t.channel(fg)) {
                s.intersection += pv * tv;
                s.pred += pv;
                s.target += tv;
            }
        }
        s
    }

    fn parts(&self, s: &Sums) -> LossParts {
        let ce = s.ce / s.pixels as f64;
        let dice = (2.0 * s.intersection + DICE_EPSILON) / (s.pred + s.target + DICE_EPSILON);
        let dice_term = 1.0 - dice;
        LossParts {
            total: self.ce_weight * ce + self.dice_weight * dice_term,
            cross_entropy: ce,
            dice_term,
        }
    }

    pub fn evaluate(&self, preds: &[ProbMap], targets: &[ProbMap]) -> Result<LossParts> {
        self.check(preds, targets)?;
        Ok(self.parts(&self.sums(preds, targets)))
    }

    /// Loss and its gradient with respect to each prediction, in `ProbMap` layout.
    pub fn value_and_grad(
        &self,
        preds: &[ProbMap],
        targets: &[ProbMap],
    ) -> Result<(LossParts, Vec<Vec<f64>>)> {
        self.check(preds, targets)?;
        let s = self.sums(preds, targets);
        let parts = self.parts(&s);

        let n = s.pixels as f64;
        let denom = s.pred + s.target + DICE_EPSILON;
        let numer = 2.0 * s.intersection + DICE_EPSILON;
        let fg = self.foreground_class;
        let grads = preds
            .iter()
            .zip(targets)
            .map(|(p, t)| {
                let classes = p.classes();
                p.probs()
                    .iter()
                    .zip(t.probs())
                    .enumerate()
                    .map(|(idx, (&pv, &tv))| {
                        let mut g = 0.0;
                        if pv >= PROB_FLOOR {
                            g -= self.ce_weight * tv / (pv * n);
                        }
                        if idx % classes == fg {
                            // d(1 - Dice)/dp = -(2 t denom - numer) / denom^2
                            g -= self.dice_weight * (2.0 * tv * denom - numer) / (denom * denom);
                        }
                        g
                    })
                    .collect()
            })
            .collect();
        Ok((parts, grads))
    }
}
