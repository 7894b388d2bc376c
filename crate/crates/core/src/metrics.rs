//! AUROC and FPR at a fixed TPR, plus split-level evaluation.
//!
//! Scores follow the "higher means more in-distribution" convention.

use serde::{Deserialize, Serialize};

use crate::backbone::{encode_text, ClassVocabulary, FrozenEncoder, PromptContext};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scoring::{score_records, ScoreKind};
use crate::synthworld::FeatureRecord;

pub const DEFAULT_TPR: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub auroc: f64,
    pub fpr95: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub threshold: f64,
}

fn check(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() {
        return Err(Error::Empty("ID scores"));
    }
    if ood.is_empty() {
        return Err(Error::Empty("OOD scores"));
    }
    if id.iter().chain(ood).any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    Ok(())
}

/// `P(id > ood) + 0.5·P(id = ood)` over all pairs, via mid-ranks.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check(id, ood)?;
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sum of (1-based, tie-averaged) ranks of the ID scores.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let n_id_tied = all[i..=j].iter().filter(|x| x.1).count();
        rank_sum += mid * n_id_tied as f64;
        i = j + 1;
    }
    let (n, m) = (id.len() as f64, ood.len() as f64);
    Ok((rank_sum - n * (n + 1.0) / 2.0) / (n * m))
}

/// `(fpr, threshold)`: the threshold is the largest ID score `t` with
/// `#(id ≥ t) / n_id ≥ tpr`; the FPR is `#(ood ≥ t) / n_ood`.
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], tpr: f64) -> Result<(f64, f64)> {
    check(id, ood)?;
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(Error::InvalidArgument(format!("tpr must lie in (0, 1], got {tpr}")));
    }
    let mut sorted = id.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    let mut threshold = sorted[n - 1];
    let mut k = 0;
    while k < n {
        let t = sorted[k];
        // include every tie of t
        while k + 1 < n && sorted[k + 1] == t {
            k += 1;
        }
        if (k + 1) as f64 / n as f64 >= tpr {
            threshold = t;
            break;
        }
        k += 1;
    }
    let false_pos = ood.iter().filter(|&&s| s >= threshold).count();
    Ok((false_pos as f64 / ood.len() as f64, threshold))
}

pub fn compute_metrics(id: &[f64], ood: &[f64]) -> Result<MetricResult> {
    let (fpr95, threshold) = fpr_at_tpr(id, ood, DEFAULT_TPR)?;
    Ok(MetricResult {
        auroc: auroc(id, ood)?,
        fpr95,
        n_id: id.len(),
        n_ood: ood.len(),
        threshold,
    })
}

/// Named group of OOD test records.
#[derive(Debug, Clone)]
pub struct OodSplit {
    pub name: String,
    pub records: Vec<FeatureRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub score: ScoreKind,
    pub splits: Vec<(String, MetricResult)>,
    /// Unweighted mean over splits.
    pub average: MetricResult,
}

/// Scores the ID set and every OOD split against fixed text features.
pub fn evaluate_text(
    text: &Matrix,
    id_test: &[FeatureRecord],
    ood_splits: &[OodSplit],
    kind: ScoreKind,
) -> Result<EvalReport> {
    if ood_splits.is_empty() {
        return Err(Error::Empty("OOD splits"));
    }
    let id_scores: Vec<f64> = score_records(id_test, text, true)?
        .iter()
        .map(|s| s.get(kind))
        .collect();
    let mut splits = Vec::with_capacity(ood_splits.len());
    for split in ood_splits {
        let ood_scores: Vec<f64> = score_records(&split.records, text, true)?
            .iter()
            .map(|s| s.get(kind))
            .collect();
        splits.push((split.name.clone(), compute_metrics(&id_scores, &ood_scores)?));
    }
    let k = splits.len() as f64;
    let mean = |f: fn(&MetricResult) -> f64| splits.iter().map(|(_, m)| f(m)).sum::<f64>() / k;
    let average = MetricResult {
        auroc: mean(|m| m.auroc),
        fpr95: mean(|m| m.fpr95),
        n_id: id_scores.len(),
        n_ood: splits.iter().map(|(_, m)| m.n_ood).sum(),
        threshold: mean(|m| m.threshold),
    };
    Ok(EvalReport {
        score: kind,
        splits,
        average,
    })
}

/// Encodes `ctx` and evaluates. Pass the reference context for the
/// zero-shot baseline.
pub fn evaluate(
    ctx: &PromptContext,
    vocab: &ClassVocabulary,
    enc: &FrozenEncoder,
    id_test: &[FeatureRecord],
    ood_splits: &[OodSplit],
    kind: ScoreKind,
) -> Result<EvalReport> {
    let text = encode_text(ctx, vocab, enc)?;
    evaluate_text(&text, id_test, ood_splits, kind)
}
