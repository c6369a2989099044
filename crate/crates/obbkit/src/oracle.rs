//! Independent verification suites: raster-grid agreement for the exact IoU,
//! finite-difference checks for the loss gradients, and a line-by-line
//! reference transcription of the assignment rules. Each suite generates
//! seeded random inputs, checks the supplied implementation against its
//! oracle, and reports pass/fail counts. The reference paths here stay
//! deliberately separate from the primary implementations they check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::assign::{
    sample, AssignError, AssignmentResult, ProposalLabel, ScoreRecord,
};
use crate::codec::{encode, DeltaOffsets};
use crate::geometry::{raster_iou_oracle, IoUMatrix, OBB};
use crate::loss::{reg_loss, BoxLossKind, LossGrad, LossParams};

/// Outcome of one suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteReport {
    pub trials: usize,
    pub failures: usize,
    pub max_error: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Random box with `w, h` in `[1, 100]` and the full angle range.
pub fn random_obb(rng: &mut ChaCha8Rng) -> OBB {
    let a: f64 = rng.gen_range(1.0..=100.0);
    let b: f64 = rng.gen_range(1.0..=100.0);
    let theta = rng.gen_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
    OBB::new(
        rng.gen_range(-50.0..50.0),
        rng.gen_range(-50.0..50.0),
        a.max(b),
        a.min(b),
        theta,
    )
    .expect("sampled box is valid")
}

/// Check an IoU implementation against the raster-grid estimate on seeded
/// random pairs; also requires bitwise symmetry and exact self-IoU of 1.
/// A trial fails when the absolute disagreement exceeds 0.01.
pub fn geometry_suite<F>(trials: usize, seed: u64, samples_per_axis: usize, iou: F) -> SuiteReport
where
    F: Fn(&OBB, &OBB) -> f64 + Sync,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(OBB, OBB)> =
        (0..trials).map(|_| (random_obb(&mut rng), random_obb(&mut rng))).collect();
    let errors: Vec<(bool, f64)> = pairs
        .par_iter()
        .map(|(a, b)| {
            let fast = iou(a, b);
            let grid = raster_iou_oracle(a, b, samples_per_axis);
            let err = (fast - grid).abs();
            let symmetric = iou(a, b).to_bits() == iou(b, a).to_bits();
            let self_exact = iou(a, a) == 1.0 && iou(b, b) == 1.0;
            (err <= 0.01 && symmetric && self_exact, err)
        })
        .collect();
    let failures = errors.iter().filter(|(ok, _)| !ok).count();
    let max_error = errors.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    SuiteReport { trials, failures, max_error }
}

/// Central finite differences with step 1e-6 against an analytic gradient on
/// seeded random configurations. Draws are rejected near the loss kinks
/// (cross product below 1e-3, box residuals at the L1 kink or the smooth-L1
/// transition), where only a subgradient is defined. A trial fails when any
/// component disagrees by more than 1e-5 relative (floored at 1 absolute).
pub fn gradient_suite<F>(trials: usize, seed: u64, grad: F) -> SuiteReport
where
    F: Fn(&DeltaOffsets, &DeltaOffsets, &LossParams) -> LossGrad,
{
    const STEP: f64 = 1e-6;
    const KINK_GUARD: f64 = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0usize;
    let mut max_error = 0.0f64;
    for trial in 0..trials {
        let gt = random_obb(&mut rng);
        let anchor = random_obb(&mut rng);
        let t = encode(&gt, &anchor);
        let kind = if trial % 2 == 0 { BoxLossKind::SmoothL1 } else { BoxLossKind::L1 };
        let beta = rng.gen_range(0.4..2.0);
        let params = LossParams::new(beta, kind, gt.w(), gt.h()).expect("valid params");

        // rejection-sample a prediction clear of the kink neighborhoods
        let tp = loop {
            let cand = DeltaOffsets::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
            );
            let cross = cand.t_sin * t.t_cos - cand.t_cos * t.t_sin;
            if cross.abs() < KINK_GUARD {
                continue;
            }
            let residuals = [
                t.t_x - cand.t_x,
                t.t_y - cand.t_y,
                t.t_w - cand.t_w,
                t.t_h - cand.t_h,
            ];
            let near_kink = residuals
                .iter()
                .any(|r| r.abs() < KINK_GUARD || (r.abs() - beta).abs() < KINK_GUARD);
            if !near_kink {
                break cand;
            }
        };

        let analytic = grad(&t, &tp, &params).as_array();
        let mut trial_err = 0.0f64;
        for i in 0..6 {
            let mut plus = tp.as_array();
            let mut minus = tp.as_array();
            plus[i] += STEP;
            minus[i] -= STEP;
            let fd = (reg_loss(&t, &DeltaOffsets::from_array(plus), &params).total
                - reg_loss(&t, &DeltaOffsets::from_array(minus), &params).total)
                / (2.0 * STEP);
            let rel = (analytic[i] - fd).abs() / fd.abs().max(1.0);
            trial_err = trial_err.max(rel);
        }
        max_error = max_error.max(trial_err);
        if trial_err > 1e-5 {
            failures += 1;
        }
    }
    SuiteReport { trials, failures, max_error }
}

/// Literal transcription of the assignment conditional chain, kept separate
/// from the primary implementation: explicit max scan per proposal, then the
/// positive band `[0.5, 1]`, the score-gated weak band `[0.4, 0.5)`, the
/// focus band `[0, 0.3]` with background gate, and the fallthrough.
fn reference_assignment(
    ious: &IoUMatrix,
    scores: Option<&[ScoreRecord]>,
    gt_classes: &[usize],
) -> Vec<ProposalLabel> {
    let mut labels = Vec::with_capacity(ious.rows());
    for p in 0..ious.rows() {
        if ious.cols() == 0 {
            labels.push(ProposalLabel::NegNormal);
            continue;
        }
        let mut best_iou = f64::NEG_INFINITY;
        let mut best_gt = 0usize;
        for g in 0..ious.cols() {
            let v = ious.get(p, g);
            if v > best_iou {
                best_iou = v;
                best_gt = g;
            }
        }
        let i = best_iou;
        let label = if (0.5..=1.0).contains(&i) {
            ProposalLabel::Positive(best_gt)
        } else if (0.4..0.5).contains(&i) {
            if let Some(scores) = scores {
                let tp_score = scores[p].class_score(gt_classes[best_gt]);
                let bk_score = scores[p].background();
                if tp_score < 0.5 && bk_score < 0.5 {
                    ProposalLabel::NegNormal
                } else {
                    ProposalLabel::Ignore
                }
            } else {
                ProposalLabel::NegNormal
            }
        } else if (0.0..=0.3).contains(&i)
            && scores.is_some_and(|s| s[p].background() < 0.5)
        {
            ProposalLabel::NegFocus
        } else {
            ProposalLabel::NegNormal
        };
        labels.push(label);
    }
    labels
}

fn random_scene(
    rng: &mut ChaCha8Rng,
    max_proposals: usize,
    max_gts: usize,
) -> (IoUMatrix, Option<Vec<ScoreRecord>>, Vec<usize>) {
    let n_props = rng.gen_range(10..=max_proposals);
    let n_gts = rng.gen_range(1..=max_gts);
    let n_classes = rng.gen_range(1..=16);
    let gt_classes: Vec<usize> = (0..n_gts).map(|_| rng.gen_range(0..n_classes)).collect();
    let mut values = Vec::with_capacity(n_props * n_gts);
    for _ in 0..n_props * n_gts {
        // land exactly on a band edge now and then
        let v = if rng.gen_bool(0.15) {
            *[0.3, 0.4, 0.5].get(rng.gen_range(0..3)).unwrap()
        } else {
            rng.gen_range(0.0..1.0)
        };
        values.push(v);
    }
    let ious = IoUMatrix::from_values(n_props, n_gts, values).expect("entries in range");
    let scores = rng.gen_bool(0.8).then(|| {
        (0..n_props)
            .map(|_| {
                let raw: Vec<f64> = (0..=n_classes).map(|_| rng.gen_range(0.0..=1.0)).collect();
                ScoreRecord::from_raw(&raw).expect("scores in range")
            })
            .collect()
    });
    (ious, scores, gt_classes)
}

/// Compare an assignment implementation against [`reference_assignment`] on
/// seeded random scenes, then sample each result under a budget of 512 and
/// check the quota caps, index uniqueness, and that no ignored proposal is
/// drawn. `max_error` reports the largest per-scene label disagreement count.
pub fn assignment_suite<F>(trials: usize, seed: u64, assign: F) -> SuiteReport
where
    F: Fn(&IoUMatrix, Option<&[ScoreRecord]>, &[usize]) -> Result<AssignmentResult, AssignError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0usize;
    let mut max_error = 0.0f64;
    for trial in 0..trials {
        let (ious, scores, gt_classes) = random_scene(&mut rng, 2000, 50);
        let Ok(result) = assign(&ious, scores.as_deref(), &gt_classes) else {
            failures += 1;
            continue;
        };
        let expected = reference_assignment(&ious, scores.as_deref(), &gt_classes);
        let disagreements = result
            .assignments
            .iter()
            .zip(&expected)
            .filter(|(got, want)| got.label != **want)
            .count();
        max_error = max_error.max(disagreements as f64);

        let budget = 512;
        let sampled = sample(&result, budget, seed ^ trial as u64).expect("valid budget");
        let mut all: Vec<usize> = sampled
            .positives
            .iter()
            .chain(&sampled.focus_negatives)
            .chain(&sampled.normal_negatives)
            .copied()
            .collect();
        all.sort_unstable();
        let unique = all.windows(2).all(|w| w[0] != w[1]);
        let caps_ok = sampled.positives.len() <= budget / 4
            && sampled.focus_negatives.len() <= budget / 8
            && all.len() <= budget;
        let no_ignored = all
            .iter()
            .all(|&i| result.assignments[i].label != ProposalLabel::Ignore);
        if disagreements > 0 || !unique || !caps_ok || !no_ignored {
            failures += 1;
        }
    }
    SuiteReport { trials, failures, max_error }
}
