//! Property tests for the geometric and numeric invariants: IoU symmetry and
//! rigid-motion invariance, codec roundtrips, loss continuity and range,
//! assignment partitioning, and sampler caps.

use std::f64::consts::{FRAC_PI_2, PI};

use proptest::prelude::*;

use obbkit::assign::{cdla_assign, max_iou_assign, sample, ProposalLabel};
use obbkit::codec::{canonicalize, decode, encode, OBB6};
use obbkit::eval::{average_precision, match_detections, ApMode, Detection, GtRecord};
use obbkit::geometry::{
    convex_intersect, min_area_rect, obb_to_polygon, rotated_iou, IoUMatrix, Point, OBB,
};
use obbkit::loss::{tlf_angle_loss, LossParams};
use obbkit::DeltaOffsets;

fn arb_obb() -> impl Strategy<Value = OBB> {
    (
        -50.0..50.0f64,
        -50.0..50.0f64,
        1.0..100.0f64,
        1.0..100.0f64,
        -FRAC_PI_2..FRAC_PI_2,
    )
        .prop_map(|(cx, cy, a, b, theta)| {
            OBB::new(cx, cy, a.max(b), a.min(b), theta).expect("valid box")
        })
}

fn arb_point() -> impl Strategy<Value = Point> {
    (-50.0..50.0f64, -50.0..50.0f64).prop_map(|(x, y)| Point::new(x, y))
}

proptest! {
    #[test]
    fn iou_is_bitwise_symmetric(a in arb_obb(), b in arb_obb()) {
        prop_assert_eq!(rotated_iou(&a, &b).to_bits(), rotated_iou(&b, &a).to_bits());
    }

    #[test]
    fn iou_in_unit_interval_and_self_is_one(a in arb_obb(), b in arb_obb()) {
        let v = rotated_iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(rotated_iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_invariant_under_rigid_motion(
        a in arb_obb(),
        b in arb_obb(),
        phi in -PI..PI,
        tx in -30.0..30.0f64,
        ty in -30.0..30.0f64,
    ) {
        let transform = |o: &OBB| {
            let (s, c) = phi.sin_cos();
            let cx = o.cx() * c - o.cy() * s + tx;
            let cy = o.cx() * s + o.cy() * c + ty;
            OBB::canonical(cx, cy, o.w(), o.h(), o.theta() + phi).expect("valid box")
        };
        let before = rotated_iou(&a, &b);
        let after = rotated_iou(&transform(&a), &transform(&b));
        prop_assert!((before - after).abs() < 1e-9, "before {before}, after {after}");
    }

    #[test]
    fn rectangle_intersections_have_3_to_8_vertices(a in arb_obb(), b in arb_obb()) {
        let inter = convex_intersect(&obb_to_polygon(&a), &obb_to_polygon(&b));
        prop_assert!(
            inter.is_empty() || (3..=8).contains(&inter.len()),
            "intersection of two rectangles has {} vertices",
            inter.len()
        );
    }

    #[test]
    fn polygon_is_pi_periodic(o in arb_obb()) {
        let shifted = OBB::canonical(o.cx(), o.cy(), o.w(), o.h(), o.theta() + PI).unwrap();
        let d = obb_to_polygon(&o).max_vertex_distance(&obb_to_polygon(&shifted));
        prop_assert!(d < 1e-9, "vertex drift {d}");
    }

    #[test]
    fn min_rect_encloses_and_beats_aabb(pts in [arb_point(), arb_point(), arb_point(), arb_point()]) {
        let Ok(rect) = min_area_rect(&pts) else { return Ok(()) };
        let (sin_t, cos_t) = rect.theta().sin_cos();
        for p in &pts {
            let dx = p.x - rect.cx();
            let dy = p.y - rect.cy();
            let u = dx * cos_t + dy * sin_t;
            let v = -dx * sin_t + dy * cos_t;
            prop_assert!(u.abs() <= rect.w() * 0.5 + 1e-9);
            prop_assert!(v.abs() <= rect.h() * 0.5 + 1e-9);
        }
        let xs: Vec<f64> = pts.iter().map(|p| p.x).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.y).collect();
        let aabb = (xs.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
            - xs.iter().fold(f64::INFINITY, |m, &v| m.min(v)))
            * (ys.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
                - ys.iter().fold(f64::INFINITY, |m, &v| m.min(v)));
        prop_assert!(rect.area() <= aabb + 1e-9);
    }

    #[test]
    fn codec_roundtrip_restores_polygon(gt in arb_obb(), anchor in arb_obb()) {
        let offsets = encode(&gt, &anchor);
        prop_assert!((offsets.t_sin.powi(2) + offsets.t_cos.powi(2) - 1.0).abs() < 1e-12);
        let back = canonicalize(&decode(&offsets, &anchor)).unwrap();
        let d = obb_to_polygon(&back).max_vertex_distance(&obb_to_polygon(&gt));
        prop_assert!(d < 1e-9, "roundtrip drift {d}");
    }

    #[test]
    fn size_offsets_ignore_angles(
        anchor in arb_obb(),
        theta1 in -FRAC_PI_2..FRAC_PI_2,
        theta2 in -FRAC_PI_2..FRAC_PI_2,
        w in 1.0..80.0f64,
        h in 1.0..80.0f64,
    ) {
        // the codec never swaps sides, so the log ratios cannot depend on
        // either box's angle
        let g1 = OBB::new(3.0, 4.0, w.max(h), w.min(h), theta1).unwrap();
        let g2 = OBB::new(3.0, 4.0, w.max(h), w.min(h), theta2).unwrap();
        let d1 = encode(&g1, &anchor);
        let d2 = encode(&g2, &anchor);
        prop_assert_eq!(d1.t_w.to_bits(), d2.t_w.to_bits());
        prop_assert_eq!(d1.t_h.to_bits(), d2.t_h.to_bits());
    }

    #[test]
    fn decode_preserves_offset_norm(anchor in arb_obb(), s in -2.0..2.0f64, c in -2.0..2.0f64) {
        let d = DeltaOffsets::new(0.0, 0.0, 0.0, 0.0, s, c);
        let out = decode(&d, &anchor);
        prop_assert!((s.hypot(c) - out.sin_t.hypot(out.cos_t)).abs() < 1e-12);
    }

    #[test]
    fn canonicalize_preserves_polygon(
        x in -50.0..50.0f64,
        y in -50.0..50.0f64,
        w in 0.5..80.0f64,
        h in 0.5..80.0f64,
        angle in -PI..PI,
        scale in 0.1..5.0f64,
    ) {
        let b = OBB6 { x, y, w, h, sin_t: angle.sin() * scale, cos_t: angle.cos() * scale };
        let o = canonicalize(&b).unwrap();
        prop_assert!(o.w() >= o.h());
        prop_assert!((-FRAC_PI_2..FRAC_PI_2).contains(&o.theta()));
        let d = obb_to_polygon(&o).max_vertex_distance(&b.polygon());
        prop_assert!(d < 1e-9, "canonicalize moved vertices by {d}");
    }

    #[test]
    fn angle_loss_boundary_continuity(delta in 1e-6..1e-1f64, ar in 1.0..25.0f64) {
        let params = LossParams::new(1.0, obbkit::BoxLossKind::SmoothL1, ar, 1.0).unwrap();
        let target = DeltaOffsets::new(0.0, 0.0, 0.0, 0.0, (-FRAC_PI_2).sin(), (-FRAC_PI_2).cos());
        let hi = FRAC_PI_2 - delta;
        let lo = -FRAC_PI_2 + delta;
        let l_hi = tlf_angle_loss(&target, &DeltaOffsets::new(0.0, 0.0, 0.0, 0.0, hi.sin(), hi.cos()), &params);
        let l_lo = tlf_angle_loss(&target, &DeltaOffsets::new(0.0, 0.0, 0.0, 0.0, lo.sin(), lo.cos()), &params);
        prop_assert!((l_hi - l_lo).abs() < 1e-9);
    }

    #[test]
    fn angle_loss_bounded_for_unit_pairs(tg in -PI..PI, tp in -PI..PI, ar in 1.0..100.0f64) {
        let params = LossParams::new(1.0, obbkit::BoxLossKind::SmoothL1, ar, 1.0).unwrap();
        let t = DeltaOffsets::new(0.0, 0.0, 0.0, 0.0, tg.sin(), tg.cos());
        let p = DeltaOffsets::new(0.0, 0.0, 0.0, 0.0, tp.sin(), tp.cos());
        let v = tlf_angle_loss(&t, &p, &params);
        prop_assert!((0.0..=ar.sqrt() + 1e-12).contains(&v));
    }

    #[test]
    fn assignment_partitions_and_matches_warmup(
        values in proptest::collection::vec(0.0..1.0f64, 1..200),
        cols in 1usize..8,
    ) {
        let rows = values.len() / cols;
        prop_assume!(rows >= 1);
        let m = IoUMatrix::from_values(rows, cols, values[..rows * cols].to_vec()).unwrap();
        let classes = vec![0usize; cols];
        let cdla = cdla_assign(&m, None, &classes).unwrap();
        let base = max_iou_assign(&m, 0.5);
        prop_assert_eq!(cdla.len(), rows);
        for (a, b) in cdla.assignments.iter().zip(&base.assignments) {
            // warm-up collapses to the max-IoU labels, and every proposal
            // carries exactly one label by construction
            prop_assert_eq!(a.label, b.label);
            match a.label {
                ProposalLabel::Positive(g) => {
                    prop_assert!(a.matched_iou >= 0.5);
                    prop_assert_eq!(a.matched_gt, Some(g));
                }
                _ => prop_assert!(a.matched_iou < 0.5),
            }
        }
    }

    #[test]
    fn sampler_respects_caps(
        values in proptest::collection::vec(0.0..1.0f64, 20..400),
        budget_octets in 1usize..64,
        seed in 0u64..1000,
    ) {
        let rows = values.len();
        let m = IoUMatrix::from_values(rows, 1, values).unwrap();
        let scores: Vec<obbkit::ScoreRecord> = (0..rows)
            .map(|i| obbkit::ScoreRecord::new(vec![(i % 10) as f64 / 10.0], ((i * 7) % 10) as f64 / 10.0).unwrap())
            .collect();
        let assignment = cdla_assign(&m, Some(&scores), &[0]).unwrap();
        let budget = budget_octets * 8;
        let s = sample(&assignment, budget, seed).unwrap();
        prop_assert!(s.positives.len() <= budget / 4);
        prop_assert!(s.focus_negatives.len() <= budget / 8);
        let total = s.positives.len() + s.focus_negatives.len() + s.normal_negatives.len();
        prop_assert!(total <= budget);
        let mut all: Vec<usize> = s.positives.iter().chain(&s.focus_negatives).chain(&s.normal_negatives).copied().collect();
        all.sort_unstable();
        let len_before = all.len();
        all.dedup();
        prop_assert_eq!(len_before, all.len());
        for i in all {
            prop_assert!(assignment.assignments[i].label != ProposalLabel::Ignore);
        }
    }

    #[test]
    fn ap_stays_in_unit_interval(
        offsets in proptest::collection::vec((-6.0..6.0f64, 0.01..1.0f64), 1..40),
    ) {
        let gts: Vec<GtRecord> = (0..8)
            .map(|i| GtRecord {
                obb: OBB::new(i as f64 * 20.0, 0.0, 8.0, 4.0, 0.0).unwrap(),
                class_id: 0,
                image_id: "im".into(),
                difficult: false,
            })
            .collect();
        let dets: Vec<Detection> = offsets
            .iter()
            .enumerate()
            .map(|(i, (dx, score))| {
                Detection::new(
                    "im".into(),
                    0,
                    *score,
                    OBB::new((i % 8) as f64 * 20.0 + dx, 0.0, 8.0, 4.0, 0.0).unwrap(),
                )
                .unwrap()
            })
            .collect();
        let r = match_detections(&dets, &gts, 0.5);
        for mode in [ApMode::Voc07, ApMode::Voc12] {
            let ap = average_precision(&r.curve, mode);
            prop_assert!((0.0..=1.0).contains(&ap));
        }
        let mut prev = 0.0;
        for &(recall, _) in &r.curve.points {
            prop_assert!(recall >= prev);
            prev = recall;
        }
    }
}
