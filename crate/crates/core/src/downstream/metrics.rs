use super::DownstreamError;

/// F1 of class 1; 0 when precision + recall is 0.
pub fn f1_score(pred: &[u8], truth: &[u8]) -> Result<f64, DownstreamError> {
    if pred.len() != truth.len() {
        return Err(DownstreamError::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            (0, 0) => {}
            _ => return Err(DownstreamError::NonBinary),
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok((2 * tp) as f64 / (2 * tp + fp + fn_) as f64)
}

/// Mann–Whitney AUC: the fraction of positive/negative pairs ranked
/// correctly, ties counting one half.
pub fn auc(scores: &[f64], truth: &[u8]) -> Result<f64, DownstreamError> {
    if scores.len() != truth.len() {
        return Err(DownstreamError::LengthMismatch {
            left: scores.len(),
            right: truth.len(),
        });
    }
    if truth.iter().any(|&t| t > 1) {
        return Err(DownstreamError::NonBinary);
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DownstreamError::Invalid("NaN score".into()));
    }
    let mut neg: Vec<f64> = scores.iter().zip(truth).filter(|(_, &t)| t == 0).map(|(&s, _)| s).collect();
    let n_pos = truth.len() - neg.len();
    if n_pos == 0 || neg.is_empty() {
        return Err(DownstreamError::SingleClass);
    }
    neg.sort_by(f64::total_cmp);
    // Twice the Mann–Whitney U, kept integral so the result is exact.
    let mut twice_u: u64 = 0;
    for (&s, _) in scores.iter().zip(truth).filter(|(_, &t)| t == 1) {
        let below = neg.partition_point(|&x| x < s);
        let not_above = neg.partition_point(|&x| x <= s);
        twice_u += 2 * below as u64 + (not_above - below) as u64;
    }
    Ok(twice_u as f64 / (2 * n_pos * neg.len()) as f64)
}
