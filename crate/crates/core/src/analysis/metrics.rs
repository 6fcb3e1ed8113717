use serde::{Deserialize, Serialize};

use crate::denoise::{label_posterior, DataModel};
use crate::error::{DiceError, Result};
use crate::tokens::TokenSeq;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditMetrics {
    /// 1 when the edit equals the source token for token, else 0.
    pub token_accuracy: f64,
    pub hamming_similarity: f64,
    /// The exact classifier prefers the target label over the source label.
    pub edit_success: bool,
}

/// Compares an edit against its source under the fixture's exact label
/// posterior.
pub fn compute_edit_metrics(
    source: &TokenSeq,
    edited: &TokenSeq,
    model: &dyn DataModel,
    source_label: u32,
    target_label: u32,
) -> Result<EditMetrics> {
    let hamming = source.hamming_similarity(edited)?;
    let posterior = label_posterior(model, edited.tokens())?;
    let prob = |label: u32| {
        posterior
            .iter()
            .find(|(l, _)| *l == label)
            .map(|(_, p)| *p)
            .ok_or(DiceError::UnknownCondition(label))
    };
    let (p_src, p_tgt) = (prob(source_label)?, prob(target_label)?);
    Ok(EditMetrics {
        token_accuracy: if source.tokens() == edited.tokens() { 1.0 } else { 0.0 },
        hamming_similarity: hamming,
        edit_success: p_tgt > p_src,
    })
}

/// Expected per-position agreement between `x0` and an independent draw
/// from `label`.
pub fn expected_overlap(model: &dyn DataModel, x0: &TokenSeq, label: u32) -> Result<f64> {
    let marginals = model.position_marginals(label)?;
    if marginals.len() != x0.len() {
        return Err(DiceError::ShapeMismatch {
            expected: (marginals.len(), 1),
            actual: (x0.len(), 1),
        });
    }
    let total: f64 = x0.tokens().iter().zip(&marginals).map(|(&tok, row)| row[tok]).sum();
    Ok(total / x0.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditSummary {
    pub trials: usize,
    pub token_accuracy: f64,
    pub hamming_similarity: f64,
    pub edit_success: f64,
    /// Mean Hamming similarity of the residual-free (`lambda_1 = 0`) run, when measured.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preservation_baseline: Option<f64>,
}

/// Means over trials.
pub fn summarize(metrics: &[EditMetrics]) -> EditSummary {
    let n = metrics.len().max(1) as f64;
    EditSummary {
        trials: metrics.len(),
        token_accuracy: metrics.iter().map(|m| m.token_accuracy).sum::<f64>() / n,
        hamming_similarity: metrics.iter().map(|m| m.hamming_similarity).sum::<f64>() / n,
        edit_success: metrics.iter().filter(|m| m.edit_success).count() as f64 / n,
        preservation_baseline: None,
    }
}
