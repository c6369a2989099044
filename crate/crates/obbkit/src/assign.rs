//! Label assignment for proposals against ground-truth boxes.
//!
//! The class-aware dynamic assignment refines plain max-IoU banding with
//! classification scores fed back from the second stage: proposals in the
//! weak band `[0.4, 0.5)` are ignored when either the matched-class or the
//! background score is confident (>= 0.5), and low-IoU proposals that are
//! confidently not background (`IoU in [0, 0.3]`, background < 0.5) become
//! focus negatives with a reserved sampling quota.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::IoUMatrix;

const POSITIVE_LOW: f64 = 0.5;
const WEAK_LOW: f64 = 0.4;
const FOCUS_HIGH: f64 = 0.3;
const SCORE_CONFIDENT: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum AssignError {
    #[error("scores misaligned with proposals: expected {expected}, got {got}")]
    MisalignedScores { expected: usize, got: usize },
    #[error("ground-truth classes misaligned with IoU columns: expected {expected}, got {got}")]
    MisalignedClasses { expected: usize, got: usize },
    #[error("score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("class {class} out of range for {n_classes} score classes")]
    ClassOutOfRange { class: usize, n_classes: usize },
    #[error("budget {0} must be >= 8 and divisible by 8")]
    InvalidBudget(usize),
}

/// Per-proposal class probabilities plus a background entry. Entries need
/// only lie in `[0, 1]`; no sum-to-one constraint is imposed.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    class_scores: Vec<f64>,
    background: f64,
}

impl ScoreRecord {
    pub fn new(class_scores: Vec<f64>, background: f64) -> Result<Self, AssignError> {
        for &v in class_scores.iter().chain(std::iter::once(&background)) {
            if !(0.0..=1.0).contains(&v) {
                return Err(AssignError::InvalidScore(v));
            }
        }
        Ok(ScoreRecord { class_scores, background })
    }

    /// From a flat vector whose last entry is the background score.
    pub fn from_raw(raw: &[f64]) -> Result<Self, AssignError> {
        let (&background, classes) = raw
            .split_last()
            .ok_or(AssignError::MisalignedScores { expected: 1, got: 0 })?;
        ScoreRecord::new(classes.to_vec(), background)
    }

    pub fn n_classes(&self) -> usize {
        self.class_scores.len()
    }

    pub fn class_score(&self, class: usize) -> f64 {
        self.class_scores[class]
    }

    pub fn background(&self) -> f64 {
        self.background
    }
}

/// Outcome for a single proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalLabel {
    /// Matched ground truth index.
    Positive(usize),
    NegNormal,
    NegFocus,
    Ignore,
}

impl ProposalLabel {
    pub fn name(&self) -> &'static str {
        match self {
            ProposalLabel::Positive(_) => "positive",
            ProposalLabel::NegNormal => "neg_normal",
            ProposalLabel::NegFocus => "neg_focus",
            ProposalLabel::Ignore => "ignore",
        }
    }

    pub fn from_name(name: &str, matched_gt: Option<usize>) -> Option<Self> {
        match name {
            "positive" => matched_gt.map(ProposalLabel::Positive),
            "neg_normal" => Some(ProposalLabel::NegNormal),
            "neg_focus" => Some(ProposalLabel::NegFocus),
            "ignore" => Some(ProposalLabel::Ignore),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalAssignment {
    pub label: ProposalLabel,
    /// Max IoU over ground truths (0 when there are none).
    pub matched_iou: f64,
    /// Argmax ground truth, ties to the lowest index.
    pub matched_gt: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    pub assignments: Vec<ProposalAssignment>,
}

impl AssignmentResult {
    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    fn indices_with(&self, pred: impl Fn(&ProposalLabel) -> bool) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, a)| pred(&a.label))
            .map(|(i, _)| i)
            .collect()
    }
}

/// The sampled training subset: positives capped at `budget / 4`, focus
/// negatives at `budget / 8`, normal negatives filling the remainder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub positives: Vec<usize>,
    pub focus_negatives: Vec<usize>,
    pub normal_negatives: Vec<usize>,
    pub budget: usize,
}

fn validate_scores(
    scores: &[ScoreRecord],
    n_proposals: usize,
    gt_classes: &[usize],
) -> Result<(), AssignError> {
    if scores.len() != n_proposals {
        return Err(AssignError::MisalignedScores { expected: n_proposals, got: scores.len() });
    }
    let n_classes = scores.first().map_or(0, ScoreRecord::n_classes);
    for s in scores {
        if s.n_classes() != n_classes {
            return Err(AssignError::MisalignedScores { expected: n_classes, got: s.n_classes() });
        }
    }
    if let Some(&class) = gt_classes.iter().find(|&&c| c >= n_classes) {
        return Err(AssignError::ClassOutOfRange { class, n_classes });
    }
    Ok(())
}

/// Class-aware dynamic assignment. `scores` is `None` during warm-up
/// (before the first second-stage pass), which degrades both score-dependent
/// branches to plain negatives so the positive set matches max-IoU exactly.
/// An empty ground-truth set labels every proposal as a normal negative.
pub fn cdla_assign(
    ious: &IoUMatrix,
    scores: Option<&[ScoreRecord]>,
    gt_classes: &[usize],
) -> Result<AssignmentResult, AssignError> {
    if gt_classes.len() != ious.cols() {
        return Err(AssignError::MisalignedClasses {
            expected: ious.cols(),
            got: gt_classes.len(),
        });
    }
    if let Some(scores) = scores {
        validate_scores(scores, ious.rows(), gt_classes)?;
    }

    let mut assignments = Vec::with_capacity(ious.rows());
    for row in 0..ious.rows() {
        let Some((gt, iou)) = ious.row_max(row) else {
            // no ground truths on the image
            assignments.push(ProposalAssignment {
                label: ProposalLabel::NegNormal,
                matched_iou: 0.0,
                matched_gt: None,
            });
            continue;
        };
        let label = if iou >= POSITIVE_LOW {
            ProposalLabel::Positive(gt)
        } else if iou >= WEAK_LOW {
            match scores {
                Some(scores) => {
                    let s = &scores[row];
                    if s.class_score(gt_classes[gt]) < SCORE_CONFIDENT
                        && s.background() < SCORE_CONFIDENT
                    {
                        ProposalLabel::NegNormal
                    } else {
                        ProposalLabel::Ignore
                    }
                }
                None => ProposalLabel::NegNormal,
            }
        } else if iou <= FOCUS_HIGH
            && scores.is_some_and(|s| s[row].background() < SCORE_CONFIDENT)
        {
            ProposalLabel::NegFocus
        } else {
            ProposalLabel::NegNormal
        };
        assignments.push(ProposalAssignment { label, matched_iou: iou, matched_gt: Some(gt) });
    }
    Ok(AssignmentResult { assignments })
}

/// Baseline max-IoU assignment: positive at or above the threshold, normal
/// negative otherwise. Never emits ignore or focus labels.
pub fn max_iou_assign(ious: &IoUMatrix, pos_thresh: f64) -> AssignmentResult {
    let assignments = (0..ious.rows())
        .map(|row| match ious.row_max(row) {
            Some((gt, iou)) => ProposalAssignment {
                label: if iou >= pos_thresh {
                    ProposalLabel::Positive(gt)
                } else {
                    ProposalLabel::NegNormal
                },
                matched_iou: iou,
                matched_gt: Some(gt),
            },
            None => ProposalAssignment {
                label: ProposalLabel::NegNormal,
                matched_iou: 0.0,
                matched_gt: None,
            },
        })
        .collect();
    AssignmentResult { assignments }
}

/// Seeded uniform sampling without replacement under the budget rules.
/// Ignore-labeled proposals are never sampled; returned indices are sorted.
pub fn sample(a: &AssignmentResult, budget_n: usize, seed: u64) -> Result<SampleSet, AssignError> {
    if budget_n < 8 || !budget_n.is_multiple_of(8) {
        return Err(AssignError::InvalidBudget(budget_n));
    }
    let positives = a.indices_with(|l| matches!(l, ProposalLabel::Positive(_)));
    let focus = a.indices_with(|l| *l == ProposalLabel::NegFocus);
    let normal = a.indices_with(|l| *l == ProposalLabel::NegNormal);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positives = choose(&mut rng, &positives, budget_n / 4);
    let focus = choose(&mut rng, &focus, budget_n / 8);
    let remaining = budget_n - positives.len() - focus.len();
    let normal = choose(&mut rng, &normal, remaining);

    Ok(SampleSet {
        positives,
        focus_negatives: focus,
        normal_negatives: normal,
        budget: budget_n,
    })
}

fn choose(rng: &mut ChaCha8Rng, pool: &[usize], cap: usize) -> Vec<usize> {
    let amount = pool.len().min(cap);
    let mut picked: Vec<usize> =
        rand::seq::index::sample(rng, pool.len(), amount).iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    picked
}
