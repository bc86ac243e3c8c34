use crate::error::{invalid, Result};

/// Area under the ROC curve with ties counted as half-concordant.
///
/// Sorts once and counts, per group of tied scores, how many negatives lie
/// strictly below. The numerator is kept as an exact integer (twice the
/// Mann-Whitney U), so the result is bit-identical to the pairwise count
/// `(concordant + ties / 2) / (pos · neg)`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid!("scores contain NaN"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(invalid!(
            "AUC needs both classes, got {n_pos} positive and {n_neg} negative"
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos_g, mut neg_g) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos_g += 1;
            } else {
                neg_g += 1;
            }
            j += 1;
        }
        twice_u += pos_g * (2 * neg_below + neg_g);
        neg_below += neg_g;
        i = j;
    }
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}
