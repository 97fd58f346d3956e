//! Ranking metrics for graded video corpora: pair-order ratio, pairwise AUC,
//! DCG at fixed cutoffs, GSB deltas, and the per-branch diagnostic report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::QualityGrade;

/// DCG cutoffs reported by the evaluation harness.
pub const DCG_CUTOFFS: [usize; 2] = [2, 4];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("labels ({labels}) and scores ({scores}) differ in length")]
    LengthMismatch { labels: usize, scores: usize },
    #[error("need at least {need} items, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("no pair of items with distinct labels")]
    NoDistinctLabels,
    #[error("every pair with distinct labels has tied scores")]
    AllPairsScoreTied,
    #[error("need at least one positive and one negative label")]
    SingleClass,
    #[error("good + same + bad must be positive")]
    EmptyGsb,
}

/// Ratio of concordant to discordant pairs. The ratio has no upper bound;
/// a score ordering with zero inversions is reported as [`Pnr::Infinite`]
/// and serialized as the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pnr {
    Finite(f64),
    Infinite,
}

impl Pnr {
    pub fn as_f64(self) -> f64 {
        match self {
            Pnr::Finite(v) => v,
            Pnr::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Pnr::Infinite)
    }
}

impl Serialize for Pnr {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Pnr::Finite(v) => serializer.serialize_f64(*v),
            Pnr::Infinite => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Pnr {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Word(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Num(v) => Ok(Pnr::Finite(v)),
            Repr::Word(w) if w == "inf" => Ok(Pnr::Infinite),
            Repr::Word(w) => Err(serde::de::Error::custom(format!(
                "expected a number or \"inf\", got {w:?}"
            ))),
        }
    }
}

/// Concordant-to-discordant pair ratio of `scores` against ordinal `labels`.
///
/// A pair counts as concordant when the higher label also has the higher
/// score, discordant when it has the lower score. Ties in either labels or
/// scores join neither count.
pub fn pnr<L: PartialOrd>(labels: &[L], scores: &[f64]) -> Result<Pnr, MetricError> {
    if labels.len() != scores.len() {
        return Err(MetricError::LengthMismatch {
            labels: labels.len(),
            scores: scores.len(),
        });
    }
    if labels.len() < 2 {
        return Err(MetricError::TooFew {
            need: 2,
            got: labels.len(),
        });
    }
    let mut concordant = 0u64;
    let mut discordant = 0u64;
    let mut saw_distinct_labels = false;
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let (hi, lo) = match labels[i].partial_cmp(&labels[j]) {
                Some(std::cmp::Ordering::Greater) => (i, j),
                Some(std::cmp::Ordering::Less) => (j, i),
                _ => continue,
            };
            saw_distinct_labels = true;
            if scores[hi] > scores[lo] {
                concordant += 1;
            } else if scores[hi] < scores[lo] {
                discordant += 1;
            }
        }
    }
    if !saw_distinct_labels {
        return Err(MetricError::NoDistinctLabels);
    }
    match (concordant, discordant) {
        (0, 0) => Err(MetricError::AllPairsScoreTied),
        (_, 0) => Ok(Pnr::Infinite),
        (c, d) => Ok(Pnr::Finite(c as f64 / d as f64)),
    }
}

/// Pair-counting AUC: over all (positive, negative) pairs, a full point when
/// the positive outscores the negative, half a point on a tie.
pub fn auc(positives: &[bool], scores: &[f64]) -> Result<f64, MetricError> {
    if positives.len() != scores.len() {
        return Err(MetricError::LengthMismatch {
            labels: positives.len(),
            scores: scores.len(),
        });
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut points = 0.0f64;
    for (i, &is_pos) in positives.iter().enumerate() {
        if !is_pos {
            continue;
        }
        for (j, &other_pos) in positives.iter().enumerate() {
            if other_pos {
                continue;
            }
            if scores[i] > scores[j] {
                points += 1.0;
            } else if scores[i] == scores[j] {
                points += 0.5;
            }
        }
    }
    Ok(points / (n_pos as f64 * n_neg as f64))
}

/// Binarization used for AUC: low grades against high grades.
pub fn is_high_quality(grade: QualityGrade) -> bool {
    grade >= QualityGrade::Good
}

/// Discounted cumulative gain over the first `n` positions of an already
/// ranked gain list; positions beyond the list contribute nothing.
pub fn dcg_at_n(gains_in_rank_order: &[f64], n: usize) -> f64 {
    gains_in_rank_order
        .iter()
        .take(n)
        .enumerate()
        .map(|(i, &g)| g / ((i + 2) as f64).log2())
        .sum()
}

/// Side-by-side human judgment tallies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GsbCounts {
    pub good: u64,
    pub same: u64,
    pub bad: u64,
}

/// Net preference rate `(good - bad) / total` of a side-by-side comparison.
pub fn delta_gsb(counts: GsbCounts) -> Result<f64, MetricError> {
    let total = counts.good + counts.same + counts.bad;
    if total == 0 {
        return Err(MetricError::EmptyGsb);
    }
    Ok((counts.good as f64 - counts.bad as f64) / total as f64)
}

/// Names of the four quality branches, in score-vector order.
pub const BRANCH_NAMES: [&str; 4] = [
    "video_text_match",
    "frame_coherence",
    "frame_quality",
    "text_quality",
];

/// Aggregate metrics plus per-branch diagnostics for one scored corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub pnr: Pnr,
    pub auc: f64,
    /// cutoff → DCG of the score-ranked corpus with soft-label gains
    pub dcg: BTreeMap<usize, f64>,
    /// grade → branch → mean raw branch score; grades absent from the corpus
    /// are omitted
    pub branch_mean_logits: BTreeMap<String, BTreeMap<String, f64>>,
    /// branch → ratio of concordant to discordant pairs of its raw score
    pub branch_pnr: BTreeMap<String, Pnr>,
}

/// Builds a [`RankingReport`] from per-record grades, final scores, and the
/// four raw branch scores per record.
pub fn ranking_report(
    grades: &[QualityGrade],
    scores: &[f64],
    branch_logits: &[[f64; 4]],
) -> Result<RankingReport, MetricError> {
    if grades.len() != scores.len() || grades.len() != branch_logits.len() {
        return Err(MetricError::LengthMismatch {
            labels: grades.len(),
            scores: scores.len().min(branch_logits.len()),
        });
    }
    let overall_pnr = pnr(grades, scores)?;
    let positives: Vec<bool> = grades.iter().map(|&g| is_high_quality(g)).collect();
    let overall_auc = auc(&positives, scores)?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let ranked_gains: Vec<f64> = order
        .iter()
        .map(|&i| grades[i].soft_label() as f64)
        .collect();
    let dcg = DCG_CUTOFFS
        .iter()
        .map(|&n| (n, dcg_at_n(&ranked_gains, n)))
        .collect();

    let mut branch_mean_logits = BTreeMap::new();
    for grade in QualityGrade::ALL {
        let rows: Vec<&[f64; 4]> = grades
            .iter()
            .zip(branch_logits)
            .filter(|(&g, _)| g == grade)
            .map(|(_, row)| row)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let mut per_branch = BTreeMap::new();
        for (b, name) in BRANCH_NAMES.iter().enumerate() {
            let mean = rows.iter().map(|row| row[b]).sum::<f64>() / rows.len() as f64;
            per_branch.insert(name.to_string(), mean);
        }
        branch_mean_logits.insert(grade.name().to_string(), per_branch);
    }

    let mut branch_pnr = BTreeMap::new();
    for (b, name) in BRANCH_NAMES.iter().enumerate() {
        let branch_scores: Vec<f64> = branch_logits.iter().map(|row| row[b]).collect();
        branch_pnr.insert(name.to_string(), pnr(grades, &branch_scores)?);
    }

    Ok(RankingReport {
        pnr: overall_pnr,
        auc: overall_auc,
        dcg,
        branch_mean_logits,
        branch_pnr,
    })
}
