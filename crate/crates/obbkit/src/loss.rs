//! Regression losses for the six-component offsets: smooth-L1 (or plain L1)
//! on the center/size terms plus a trigonometric angle loss on the
//! `(sin, cos)` pair. The angle term is the cross product
//! `|tp_sin * t_cos - tp_cos * t_sin|` scaled by an aspect-ratio factor
//! `sqrt(w/h)`; for unit-norm pairs this equals `sqrt(w/h) * |sin(dtheta)|`,
//! which is continuous across the angle range boundary and has convergence
//! points at the target angle and its antipode.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::codec::DeltaOffsets;
use crate::geometry::{rotated_iou, OBB};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("invalid loss params: {0}")]
    InvalidParams(String),
    #[error("invalid sweep request: {0}")]
    InvalidSweep(String),
}

/// Which penalty the four box terms use. Single-stage training swaps the
/// smooth-L1 for a plain L1; the angle term is unaffected either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxLossKind {
    SmoothL1,
    L1,
}

/// Parameters of the combined regression loss. `ar_w`/`ar_h` are the
/// ground-truth box's long and short sides, feeding the `sqrt(w/h)` angle
/// sensitivity factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub beta: f64,
    pub box_loss_kind: BoxLossKind,
    pub ar_w: f64,
    pub ar_h: f64,
}

impl LossParams {
    pub fn new(beta: f64, box_loss_kind: BoxLossKind, ar_w: f64, ar_h: f64) -> Result<Self, LossError> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(LossError::InvalidParams(format!("beta = {beta} must be > 0")));
        }
        if !(ar_h > 0.0 && ar_w >= ar_h && ar_w.is_finite()) {
            return Err(LossError::InvalidParams(format!(
                "need ar_w >= ar_h > 0, got ar_w = {ar_w}, ar_h = {ar_h}"
            )));
        }
        Ok(LossParams { beta, box_loss_kind, ar_w, ar_h })
    }

    /// Conventional defaults (beta 1, smooth-L1) with the aspect factor taken
    /// from the ground-truth box.
    pub fn for_gt(gt: &OBB, box_loss_kind: BoxLossKind) -> Self {
        LossParams { beta: 1.0, box_loss_kind, ar_w: gt.w(), ar_h: gt.h() }
    }

    fn aspect_factor(&self) -> f64 {
        (self.ar_w / self.ar_h).sqrt()
    }
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams { beta: 1.0, box_loss_kind: BoxLossKind::SmoothL1, ar_w: 1.0, ar_h: 1.0 }
    }
}

/// Loss total along with its named components; the total is their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub per_component: BTreeMap<&'static str, f64>,
}

/// Partials of [`reg_loss`] with respect to the six predicted offsets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossGrad {
    pub d_x: f64,
    pub d_y: f64,
    pub d_w: f64,
    pub d_h: f64,
    pub d_sin: f64,
    pub d_cos: f64,
}

impl LossGrad {
    pub fn as_array(&self) -> [f64; 6] {
        [self.d_x, self.d_y, self.d_w, self.d_h, self.d_sin, self.d_cos]
    }
}

/// `0.5 x^2 / beta` below the transition point, `|x| - beta/2` above; C1 at
/// `|x| = beta`.
pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    debug_assert!(beta > 0.0);
    let ax = x.abs();
    if ax < beta {
        0.5 * x * x / beta
    } else {
        ax - 0.5 * beta
    }
}

fn box_term(x: f64, p: &LossParams) -> f64 {
    match p.box_loss_kind {
        BoxLossKind::SmoothL1 => smooth_l1(x, p.beta),
        BoxLossKind::L1 => x.abs(),
    }
}

/// Derivative of the box penalty; sign(0) = 0 is the subgradient convention
/// at the L1 kink.
fn box_term_deriv(x: f64, p: &LossParams) -> f64 {
    match p.box_loss_kind {
        BoxLossKind::SmoothL1 => {
            if x.abs() < p.beta {
                x / p.beta
            } else {
                sign(x)
            }
        }
        BoxLossKind::L1 => sign(x),
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Angle loss on offset space: `sqrt(w/h) * |tp_sin * t_cos - tp_cos * t_sin|`.
/// With both pairs unit-norm this is `sqrt(w/h) * |sin(theta_p - theta_g)|`.
pub fn tlf_angle_loss(t: &DeltaOffsets, tp: &DeltaOffsets, p: &LossParams) -> f64 {
    p.aspect_factor() * (tp.t_sin * t.t_cos - tp.t_cos * t.t_sin).abs()
}

/// Combined regression loss: box penalty on `(x, y, w, h)` plus the angle
/// term, as an unweighted sum.
pub fn reg_loss(t: &DeltaOffsets, tp: &DeltaOffsets, p: &LossParams) -> LossValue {
    let mut per_component = BTreeMap::new();
    per_component.insert("x", box_term(t.t_x - tp.t_x, p));
    per_component.insert("y", box_term(t.t_y - tp.t_y, p));
    per_component.insert("w", box_term(t.t_w - tp.t_w, p));
    per_component.insert("h", box_term(t.t_h - tp.t_h, p));
    per_component.insert("angle", tlf_angle_loss(t, tp, p));
    let total = per_component.values().sum();
    LossValue { total, per_component }
}

/// Analytic partials of [`reg_loss`] over the predicted offsets. At kinks
/// (zero box residual under L1, zero cross product) the returned value is a
/// subgradient.
pub fn reg_loss_grad(t: &DeltaOffsets, tp: &DeltaOffsets, p: &LossParams) -> LossGrad {
    let cross = tp.t_sin * t.t_cos - tp.t_cos * t.t_sin;
    let s = sign(cross) * p.aspect_factor();
    LossGrad {
        d_x: -box_term_deriv(t.t_x - tp.t_x, p),
        d_y: -box_term_deriv(t.t_y - tp.t_y, p),
        d_w: -box_term_deriv(t.t_w - tp.t_w, p),
        d_h: -box_term_deriv(t.t_h - tp.t_h, p),
        d_sin: s * t.t_cos,
        d_cos: -s * t.t_sin,
    }
}

/// One grid point of a [`loss_sweep`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub theta_p: f64,
    pub tlf: f64,
    pub one_minus_iou: f64,
}

/// Sweep the predicted angle over a uniform grid on `[-pi/2, pi/2)` for a
/// box of aspect ratio `ar` centered at the origin, emitting the angle loss
/// and `1 - IoU` against the target-angle box of identical center and dims.
pub fn loss_sweep(theta_g: f64, ar: f64, grid_n: usize) -> Result<Vec<SweepRow>, LossError> {
    if grid_n < 16 {
        return Err(LossError::InvalidSweep(format!("grid_n = {grid_n} must be >= 16")));
    }
    if !(ar >= 1.0 && ar.is_finite()) {
        return Err(LossError::InvalidSweep(format!("aspect ratio {ar} must be >= 1")));
    }
    if !theta_g.is_finite() {
        return Err(LossError::InvalidSweep("theta_g must be finite".into()));
    }
    let h = 24.0;
    let w = h * ar;
    let gt_box = OBB::canonical(0.0, 0.0, w, h, theta_g).expect("valid sweep box");
    let params = LossParams::new(1.0, BoxLossKind::SmoothL1, w, h).expect("valid sweep params");
    let t = DeltaOffsets::new(0.0, 0.0, 0.0, 0.0, theta_g.sin(), theta_g.cos());
    let step = std::f64::consts::PI / grid_n as f64;
    let rows = (0..grid_n)
        .map(|k| {
            let theta_p = -std::f64::consts::FRAC_PI_2 + k as f64 * step;
            let tp = DeltaOffsets::new(0.0, 0.0, 0.0, 0.0, theta_p.sin(), theta_p.cos());
            let pred_box = OBB::canonical(0.0, 0.0, w, h, theta_p).expect("valid sweep box");
            SweepRow {
                theta_p,
                tlf: tlf_angle_loss(&t, &tp, &params),
                one_minus_iou: 1.0 - rotated_iou(&gt_box, &pred_box),
            }
        })
        .collect();
    Ok(rows)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "series must have equal length");
    assert!(xs.len() >= 2, "need at least two observations");
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 * 0.5 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn unit_pair(theta: f64) -> DeltaOffsets {
        DeltaOffsets::new(0.0, 0.0, 0.0, 0.0, theta.sin(), theta.cos())
    }

    fn params(ar: f64) -> LossParams {
        LossParams::new(1.0, BoxLossKind::SmoothL1, ar, 1.0).unwrap()
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0, 1.0), 0.0);
        assert_relative_eq!(smooth_l1(0.5, 1.0), 0.125);
        assert_relative_eq!(smooth_l1(2.0, 1.0), 1.5);
        assert_relative_eq!(smooth_l1(-2.0, 1.0), 1.5);
    }

    #[test]
    fn smooth_l1_is_c1_at_beta() {
        for beta in [0.5, 1.0, 3.0] {
            let d = 1e-9;
            let below = (smooth_l1(beta, beta) - smooth_l1(beta - d, beta)) / d;
            let above = (smooth_l1(beta + d, beta) - smooth_l1(beta, beta)) / d;
            assert!((below - above).abs() < 1e-6);
            assert!((smooth_l1(beta + d, beta) - smooth_l1(beta - d, beta)).abs() < 1e-8);
        }
    }

    #[test]
    fn angle_loss_zero_at_target() {
        let t = unit_pair(0.7);
        assert_eq!(tlf_angle_loss(&t, &t, &params(1.0)), 0.0);
    }

    #[test]
    fn angle_loss_pi_over_six() {
        let t = unit_pair(0.0);
        let tp = unit_pair(PI / 6.0);
        assert_relative_eq!(tlf_angle_loss(&t, &tp, &params(1.0)), 0.5, epsilon = 1e-12);
        assert_relative_eq!(tlf_angle_loss(&t, &tp, &params(4.0)), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn angle_loss_vanishes_at_antipode() {
        let t = unit_pair(0.3);
        let tp = unit_pair(0.3 + PI);
        assert!(tlf_angle_loss(&t, &tp, &params(1.0)) < 1e-15);
    }

    #[test]
    fn angle_loss_symmetries() {
        let p = params(3.0);
        for (tg, tp) in [(0.2, 1.1), (-1.4, 0.9), (0.0, -0.6)] {
            let base = tlf_angle_loss(&unit_pair(tg), &unit_pair(tp), &p);
            let shifted = tlf_angle_loss(&unit_pair(tg), &unit_pair(tp + PI), &p);
            let swapped = tlf_angle_loss(&unit_pair(tp), &unit_pair(tg), &p);
            assert_relative_eq!(base, shifted, epsilon = 1e-12);
            assert_relative_eq!(base, swapped, epsilon = 1e-12);
        }
    }

    #[test]
    fn angle_loss_range_for_unit_pairs() {
        let p = params(5.0);
        let bound = 5f64.sqrt();
        for i in 0..100 {
            let tg = -FRAC_PI_2 + i as f64 * 0.031;
            let tp = 1.3 * (i as f64).sin();
            let v = tlf_angle_loss(&unit_pair(tg), &unit_pair(tp), &p);
            assert!((0.0..=bound + 1e-12).contains(&v));
        }
    }

    #[test]
    fn reg_loss_components() {
        let p = params(1.0);
        let t = unit_pair(0.0);
        assert_eq!(reg_loss(&t, &t, &p).total, 0.0);

        let mut tp = t;
        tp.t_x += 0.5;
        let v = reg_loss(&t, &tp, &p);
        assert_relative_eq!(v.total, 0.125);
        assert_relative_eq!(v.per_component["x"], 0.125);

        let v = reg_loss(&t, &unit_pair(PI / 6.0), &p);
        assert_relative_eq!(v.total, 0.5, epsilon = 1e-12);
        assert_relative_eq!(v.per_component["angle"], 0.5, epsilon = 1e-12);

        let busy = reg_loss(
            &DeltaOffsets::new(0.1, -0.4, 0.2, 0.9, 0.6, 0.8),
            &DeltaOffsets::new(-0.7, 1.1, 0.0, -0.2, -0.3, 0.95),
            &LossParams::new(0.7, BoxLossKind::L1, 6.0, 2.0).unwrap(),
        );
        assert!((busy.total - busy.per_component.values().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn grad_rotational_magnitude() {
        // d/dtheta_p of |sin(theta_p - theta_g)| at dtheta = pi/6 is cos(pi/6).
        let t = unit_pair(0.0);
        let theta_p = PI / 6.0;
        let g = reg_loss_grad(&t, &unit_pair(theta_p), &params(1.0));
        let along_rotation = g.d_sin * theta_p.cos() - g.d_cos * theta_p.sin();
        assert_relative_eq!(along_rotation, (PI / 6.0).cos(), epsilon = 1e-12);
    }

    #[test]
    fn grad_matches_finite_differences() {
        let p = LossParams::new(1.0, BoxLossKind::SmoothL1, 4.0, 1.0).unwrap();
        let t = DeltaOffsets::new(0.2, -0.3, 0.1, 0.4, 0.6, 0.8);
        let tp = DeltaOffsets::new(-0.5, 0.7, -0.2, 0.9, -0.4, 0.7);
        let g = reg_loss_grad(&t, &tp, &p).as_array();
        let step = 1e-6;
        for i in 0..6 {
            let mut plus = tp.as_array();
            let mut minus = tp.as_array();
            plus[i] += step;
            minus[i] -= step;
            let fd = (reg_loss(&t, &DeltaOffsets::from_array(plus), &p).total
                - reg_loss(&t, &DeltaOffsets::from_array(minus), &p).total)
                / (2.0 * step);
            assert_relative_eq!(g[i], fd, epsilon = 1e-6, max_relative = 1e-5);
        }
    }

    #[test]
    fn grad_subgradient_at_target() {
        let p = params(4.0);
        let t = unit_pair(0.4);
        let g = reg_loss_grad(&t, &t, &p);
        let bound = 2.0; // sqrt(4)
        for v in g.as_array() {
            assert!(v.abs() <= bound);
        }
        assert_eq!(g.d_sin, 0.0);
        assert_eq!(g.d_cos, 0.0);
    }

    #[test]
    fn sweep_boundary_target_has_minima_at_both_ends() {
        // Target at -pi/2: global minimum at the first grid point, and the
        // curve descends again toward the +pi/2 end (the second convergence
        // point just outside the half-open grid).
        let rows = loss_sweep(-FRAC_PI_2, 5.0, 1000).unwrap();
        let min = rows.iter().map(|r| r.tlf).fold(f64::INFINITY, f64::min);
        assert!(rows[0].tlf <= min + 1e-12);
        let n = rows.len();
        assert!(rows[n - 1].tlf < rows[n - 2].tlf);
        assert!(rows[n - 2].tlf < rows[n - 3].tlf);
        assert!(rows[n - 1].tlf < rows[n / 2].tlf);
        // both ends sit within one grid cell of a convergence point
        let cell = PI / n as f64;
        assert!(rows[n - 1].tlf <= 5f64.sqrt() * cell.sin() + 1e-12);
    }

    #[test]
    fn sweep_zero_at_target_row() {
        let theta_g = -FRAC_PI_2 + 250.0 * (PI / 1000.0); // lands on the grid
        let rows = loss_sweep(theta_g, 3.0, 1000).unwrap();
        let row = rows
            .iter()
            .min_by(|a, b| (a.theta_p - theta_g).abs().total_cmp(&(b.theta_p - theta_g).abs()))
            .unwrap();
        assert!(row.tlf < 1e-12);
        assert!(row.one_minus_iou < 1e-9);
    }

    #[test]
    fn sweep_argmin_consistency_with_iou() {
        for ar in [2.0, 3.0, 5.0] {
            let rows = loss_sweep(0.35, ar, 720).unwrap();
            let argmin = |f: &dyn Fn(&SweepRow) -> f64| {
                rows.iter()
                    .enumerate()
                    .min_by(|a, b| f(a.1).total_cmp(&f(b.1)))
                    .map(|(i, _)| i)
                    .unwrap() as i64
            };
            let i_tlf = argmin(&|r| r.tlf);
            let i_iou = argmin(&|r| r.one_minus_iou);
            let n = rows.len() as i64;
            let d = (i_tlf - i_iou).rem_euclid(n).min((i_iou - i_tlf).rem_euclid(n));
            assert!(d <= 1, "argmins {i_tlf} vs {i_iou} differ by more than a cell");
        }
    }

    #[test]
    fn sweep_validates_inputs() {
        assert!(loss_sweep(0.0, 2.0, 8).is_err());
        assert!(loss_sweep(0.0, 0.5, 100).is_err());
        assert!(loss_sweep(f64::NAN, 2.0, 100).is_err());
    }

    #[test]
    fn spearman_basics() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_relative_eq!(spearman(&xs, &[2.0, 4.0, 6.0, 8.0]), 1.0);
        assert_relative_eq!(spearman(&xs, &[8.0, 6.0, 4.0, 2.0]), -1.0);
        // monotone transform leaves ranks alone
        assert_relative_eq!(spearman(&xs, &[0.1, 100.0, 101.0, 1e6]), 1.0);
    }

    #[test]
    fn spearman_handles_ties() {
        let r = spearman(&[1.0, 1.0, 2.0, 3.0], &[1.0, 1.0, 2.0, 3.0]);
        assert_relative_eq!(r, 1.0);
    }
}
