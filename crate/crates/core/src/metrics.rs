//! Evaluation metrics: greedy IoU-matched localization PRF, multiset
//! recognition PRF, and average normalized Levenshtein similarity.

use std::collections::HashMap;

use crate::geometry::{iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(matches: usize, n_pred: usize, n_gold: usize) -> Self {
        let precision = if n_pred == 0 {
            0.0
        } else {
            matches as f64 / n_pred as f64
        };
        let recall = if n_gold == 0 {
            0.0
        } else {
            matches as f64 / n_gold as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

/// Greedy one-to-one matching in descending IoU order; pairs with
/// IoU ≥ `iou_thresh` count as matches.
pub fn localization_prf(pred: &[BBox], gold: &[BBox], iou_thresh: f64) -> Prf {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gold.iter().enumerate() {
            let v = iou(p, g);
            if v >= iou_thresh {
                pairs.push((v, i, j));
            }
        }
    }
    // stable tie-break on indices keeps the matching deterministic
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_pred = vec![false; pred.len()];
    let mut used_gold = vec![false; gold.len()];
    let mut matches = 0;
    for (_, i, j) in pairs {
        if !used_pred[i] && !used_gold[j] {
            used_pred[i] = true;
            used_gold[j] = true;
            matches += 1;
        }
    }
    Prf::from_counts(matches, pred.len(), gold.len())
}

/// Multiset intersection on exact strings.
pub fn recognition_prf(pred: &[String], gold: &[String]) -> Prf {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for g in gold {
        *counts.entry(g).or_insert(0) += 1;
    }
    let mut matches = 0;
    for p in pred {
        if let Some(c) = counts.get_mut(p.as_str()) {
            if *c > 0 {
                *c -= 1;
                matches += 1;
            }
        }
    }
    Prf::from_counts(matches, pred.len(), gold.len())
}

pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, &ca) in a.iter().enumerate() {
        let mut cur = vec![i + 1];
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur.push(sub.min(prev[j + 1] + 1).min(cur[j] + 1));
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Normalized Levenshtein similarity, thresholded at `tau`: the best
/// 1 − dist/max_len over the golds, or 0 when below the threshold.
pub fn anls(pred: &str, golds: &[&str], tau: f64) -> f64 {
    let best = golds
        .iter()
        .map(|g| {
            let denom = pred.chars().count().max(g.chars().count());
            if denom == 0 {
                1.0
            } else {
                1.0 - levenshtein(pred, g) as f64 / denom as f64
            }
        })
        .fold(0.0f64, f64::max);
    if best >= tau {
        best
    } else {
        0.0
    }
}
