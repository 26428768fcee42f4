//! Accuracy and OOD-detection metrics. Higher scores mean "more ID".

use crate::error::{Error, Result};

pub fn top1_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Data("accuracy of an empty set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Dimension { expected: labels.len(), got: predictions.len() });
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

fn nonempty(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Data("OOD metrics need nonempty ID and OOD scores".into()));
    }
    Ok(())
}

/// Mann–Whitney AUROC via midrank sums: the probability that a random ID
/// score beats a random OOD score, ties counting one half.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    nonempty(id_scores, ood_scores)?;
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sum of doubled midranks keeps everything integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share midrank (i+1+j)/2
        let twice_mid = (i + 1 + j) as u128;
        let ids = all[i..j].iter().filter(|e| e.1).count() as u128;
        twice_rank_sum += twice_mid * ids;
        i = j;
    }
    let n1 = id_scores.len() as u128;
    let n2 = ood_scores.len() as u128;
    let twice_u = twice_rank_sum - n1 * (n1 + 1);
    Ok(twice_u as f64 / (2 * n1 * n2) as f64)
}

/// False-positive rate at the largest threshold that keeps at least
/// `tpr_target` of ID scores (`score >= threshold` counts as positive).
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr_target: f64) -> Result<f64> {
    nonempty(id_scores, ood_scores)?;
    let n = id_scores.len();
    // smallest k with k/n >= target
    let mut k = ((tpr_target * n as f64).ceil().max(0.0) as usize).min(n);
    while k > 0 && (k - 1) as f64 / n as f64 >= tpr_target {
        k -= 1;
    }
    while k < n && (k as f64 / n as f64) < tpr_target {
        k += 1;
    }
    if k == 0 {
        return Ok(0.0);
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[k - 1];
    let fp = ood_scores.iter().filter(|&&s| s >= threshold).count();
    Ok(fp as f64 / ood_scores.len() as f64)
}

pub fn fpr95(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    fpr_at_tpr(id_scores, ood_scores, 0.95)
}
