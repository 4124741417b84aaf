//! Softmax ranking loss. `scores[0]` is the true item, the rest negatives.

use super::TrainError;

fn log_sum_exp(scores: &[f64]) -> f64 {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}

/// `−log softmax(scores)[0]`.
pub fn softmax_loss(scores: &[f64]) -> Result<f64, TrainError> {
    if scores.is_empty() {
        return Err(TrainError::EmptyCandidates);
    }
    Ok(log_sum_exp(scores) - scores[0])
}

/// Loss and its gradient w.r.t. every score.
pub fn softmax_loss_grad(scores: &[f64]) -> Result<(f64, Vec<f64>), TrainError> {
    let loss = softmax_loss(scores)?;
    let lse = log_sum_exp(scores);
    let mut grad: Vec<f64> = scores.iter().map(|s| (s - lse).exp()).collect();
    grad[0] -= 1.0;
    Ok((loss, grad))
}
